use fieldbound::loss::{multitask_loss, multitask_loss_grad, tanimoto_loss, tanimoto_loss_grad};
use fieldbound::metrics::*;
use fieldbound::{DenseTensor, MultitaskPrediction};
use proptest::prelude::*;

/// Plain loop evaluation of the complemented Tanimoto loss.
fn loss_oracle(p: &[f64], l: &[f64]) -> f64 {
    let t = |a: &[f64], b: &[f64]| {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        if aa == 0.0 && bb == 0.0 {
            0.0
        } else {
            ab / (aa + bb - ab)
        }
    };
    let pc: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    let lc: Vec<f64> = l.iter().map(|v| 1.0 - v).collect();
    1.0 - 0.5 * (t(p, l) + t(&pc, &lc))
}

fn pair(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| (prop::collection::vec(0.0..=1.0f64, n), prop::collection::vec(0.0..=1.0f64, n)))
}

fn layers(v: &[f64], h: usize, w: usize) -> MultitaskPrediction {
    let n = h * w;
    let t = |k: usize| DenseTensor::new(vec![h, w], v[k * n..(k + 1) * n].to_vec()).unwrap();
    MultitaskPrediction::new(t(0), t(1), t(2)).unwrap()
}

#[test]
fn loss_reference_cases() {
    assert_eq!(tanimoto_loss(&[0.3, 0.8, 0.0], &[0.3, 0.8, 0.0]).unwrap(), 0.0);
    assert_eq!(tanimoto_loss(&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
    // T = 0.5 / (0.5 + 1 - 0.5) = 0.5 on both the map and its complement.
    assert!((tanimoto_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(tanimoto_loss(&[1.2], &[1.0]), Err(fieldbound::Error::Range(_))));
    assert!(matches!(tanimoto_loss(&[0.2, 0.1], &[1.0]), Err(fieldbound::Error::Dimension(_))));
}

#[test]
fn one_perfect_layer_of_three() {
    let gt = layers(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], 2, 2);
    let wrong = |t: &DenseTensor| t.map(|v| 1.0 - v);
    let pred = MultitaskPrediction::new(gt.extent.clone(), wrong(&gt.boundary), wrong(&gt.distance)).unwrap();
    assert!((multitask_loss(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn loss_matches_loop_oracle((p, l) in pair(1..40)) {
        let v = tanimoto_loss(&p, &l).unwrap();
        prop_assert!((v - loss_oracle(&p, &l)).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        prop_assert!((v - tanimoto_loss(&l, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_central_differences(p in prop::collection::vec(0.05..0.95f64, 2..12), seed in 0u64..1000) {
        let l: Vec<f64> = p.iter().enumerate().map(|(i, _)| ((seed as usize + i) % 3) as f64 / 2.0).collect();
        let (_, g) = tanimoto_loss_grad(&p, &l).unwrap();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut up = p.clone();
            up[k] += h;
            let mut dn = p.clone();
            dn[k] -= h;
            let fd = (loss_oracle(&up, &l) - loss_oracle(&dn, &l)) / (2.0 * h);
            prop_assert!((g[k] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn multitask_loss_is_the_layer_mean(v in prop::collection::vec(0.0..=1.0f64, 24), u in prop::collection::vec(0.0..=1.0f64, 24)) {
        let (a, b) = (layers(&v, 2, 4), layers(&u, 2, 4));
        let mean = [(&a.extent, &b.extent), (&a.boundary, &b.boundary), (&a.distance, &b.distance)]
            .iter()
            .map(|(x, y)| loss_oracle(x.data(), y.data()))
            .sum::<f64>() / 3.0;
        let (value, grads) = multitask_loss_grad(&a, &b).unwrap();
        prop_assert!((value - mean).abs() < 1e-12);
        prop_assert!((value - multitask_loss(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(grads.iter().all(|g| g.shape() == [2, 4]));
    }

    #[test]
    fn confusion_counts_every_pixel(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&pred, &truth, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let n = pairs.iter().filter(|&&(p, t)| p == i && t == j).count() as u64;
                prop_assert_eq!(cm.get(i, j), n);
            }
        }
        prop_assert_eq!(cm.total(), pairs.len() as u64);
    }

    #[test]
    fn mcc_and_kappa_are_bounded_and_relabel_invariant(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 2..150),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&pred, &truth, 3).unwrap();
        let relabel = |xs: &[usize]| xs.iter().map(|&x| perm[x]).collect::<Vec<_>>();
        let cm2 = confusion(&relabel(&pred), &relabel(&truth), 3).unwrap();
        for (a, b) in [(mcc(&cm), mcc(&cm2)), (cohens_kappa(&cm), cohens_kappa(&cm2))] {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a.value));
            prop_assert_eq!(a.degenerate, b.degenerate);
            prop_assert!((a.value - b.value).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_rates_match_counts(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (pred, truth): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let count = |p: bool, t: bool| pairs.iter().filter(|&&x| x == (p, t)).count() as f64;
        let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
        let iou = iou_binary(&pred, &truth).unwrap();
        if tp + fp + fn_ > 0.0 {
            prop_assert!((iou - tp / (tp + fp + fn_)).abs() < 1e-15);
        }
        let f = fdr(&pred, &truth).unwrap();
        prop_assert_eq!(f.degenerate, tp + fp == 0.0);
        if !f.degenerate {
            prop_assert!((f.value - fp / (tp + fp)).abs() < 1e-15);
        }
        let r = for_rate(&pred, &truth).unwrap();
        prop_assert_eq!(r.degenerate, fn_ + tn == 0.0);
        if !r.degenerate {
            prop_assert!((r.value - fn_ / (fn_ + tn)).abs() < 1e-15);
        }
    }

    #[test]
    fn fuzzy_miou_is_bounded_and_reflexive(v in prop::collection::vec(0.0..=1.0f64, 18), u in prop::collection::vec(0.0..=1.0f64, 18)) {
        let p = DenseTensor::new(vec![2, 3, 3], v).unwrap();
        let l = DenseTensor::new(vec![2, 3, 3], u).unwrap();
        let m = miou_fuzzy(&p, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((m - miou_fuzzy(&l, &p).unwrap()).abs() < 1e-15);
        prop_assert_eq!(miou_fuzzy(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn vertex_distances(
        x in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..20),
        y in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..20),
        shift in (-5.0..5.0f64, -5.0..5.0f64),
    ) {
        let x: Vec<Point> = x.into_iter().map(|(a, b)| [a, b]).collect();
        let y: Vec<Point> = y.into_iter().map(|(a, b)| [a, b]).collect();
        let (m, h) = (msd(&x, &y).unwrap(), hausdorff(&x, &y).unwrap());
        prop_assert!(m <= h + 1e-12);
        prop_assert_eq!(h, hausdorff(&y, &x).unwrap());
        prop_assert!((m - msd(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert_eq!(hausdorff(&x, &x).unwrap(), 0.0);
        // A rigid shift moves every vertex by exactly its length.
        let moved: Vec<Point> = x.iter().map(|p| [p[0] + shift.0, p[1] + shift.1]).collect();
        prop_assert!(hausdorff(&x, &moved).unwrap() <= shift.0.hypot(shift.1) + 1e-12);
    }
}

#[test]
fn mcc_hand_case_and_degenerate_flags() {
    let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
    assert!((mcc(&cm).value - 1.0 / 3.0).abs() < 1e-15);
    let one_class = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 0]).unwrap();
    assert!(mcc(&one_class).degenerate);
    assert_eq!(mcc(&one_class).value, 0.0);
    assert!(matches!(confusion(&[2], &[0], 2), Err(fieldbound::Error::Range(_))));
    assert!(matches!(msd(&[], &[[0.0, 0.0]]), Err(fieldbound::Error::EmptyGeometry(_))));
}
