mod common;

use fieldbound::postprocess::*;
use fieldbound::synth::{gen_fields, SceneSpec};
use fieldbound::{DenseTensor, Error};
use proptest::prelude::*;

fn mask_from(rows: &[&str]) -> Mask {
    let h = rows.len();
    let w = rows[0].len();
    let data = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
    Mask::new(h, w, data).unwrap()
}

fn random_mask(h: usize, w: usize, fill: f64, seed: u64) -> Mask {
    use rand::Rng;
    let mut rng = common::rng(seed);
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(fill)).collect()).unwrap()
}

#[test]
fn thinning_leaves_a_one_pixel_line() {
    let m = mask_from(&["........", "..####..", "........"]);
    assert_eq!(thin(&m), m);
}

#[test]
fn thinning_a_square_keeps_one_connected_skeleton() {
    let m = mask_from(&[".......", ".#####.", ".#####.", ".#####.", ".#####.", ".#####.", "......."]);
    let s = thin(&m);
    assert!(s.count() >= 1 && s.count() < m.count());
    // 8-connectivity of the skeleton: dilate once with the cross and count.
    let (_, n) = label_components(&dilate_cross(&s));
    assert_eq!(n, 1);
    assert!(s.data().iter().zip(m.data()).all(|(&a, &b)| !a || b));
}

#[test]
fn ridge_splits_two_fields() {
    // A three pixel wide boundary ridge between two flat extent plateaus.
    let (h, w) = (12, 15);
    let b = DenseTensor::from_fn(&[h, w], |i| if (6..9).contains(&i[1]) { 0.9 } else { 0.05 });
    let e = DenseTensor::from_fn(&[h, w], |i| if (6..9).contains(&i[1]) { 0.3 } else { 0.95 });
    let m = refined_threshold(&e, &b, ThresholdPair::default()).unwrap();
    let (_, n) = label_components(&m);
    assert_eq!(n, 2);
    // Without the boundary the extent alone is one blob.
    let (_, n_plain) = label_components(&Mask::from_threshold(&e, 0.2).unwrap());
    assert_eq!(n_plain, 1);
}

#[test]
fn threshold_pair_range() {
    assert!(ThresholdPair::new(0.0, 0.5).is_err());
    assert!(ThresholdPair::new(0.5, 1.0).is_err());
    assert!(ThresholdPair::new(0.2, 0.4).is_ok());
}

#[test]
fn single_pixel_becomes_unit_square() {
    for (r, c) in [(0, 0), (2, 3), (4, 4)] {
        let mut m = Mask::empty(5, 5);
        m.set(r, c, true);
        let ps = components_to_polygons(&m, &RasterMeta::unit(5, 5)).unwrap();
        assert_eq!(ps.len(), 1);
        let p = &ps[0];
        assert!(p.holes.is_empty());
        assert_eq!(p.area_m2, 1.0);
        let mut v = p.exterior.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (x, y) = (c as f64, r as f64);
        assert_eq!(v, vec![[x, y], [x, y + 1.0], [x + 1.0, y], [x + 1.0, y + 1.0]]);
    }
}

#[test]
fn ring_with_hole_and_diagonal_contact() {
    let m = mask_from(&["#####.", "#...#.", "#.#.#.", "#...##", "#####.", ".....#"]);
    let meta = RasterMeta::unit(6, 6);
    let ps = components_to_polygons(&m, &meta).unwrap();
    let total: f64 = ps.iter().map(|p| p.area_m2).sum();
    assert_eq!(total, m.count() as f64);
    assert!(ps.iter().any(|p| !p.holes.is_empty()));
    assert_eq!(rasterize(&ps, &meta), m);
}

#[test]
fn georeferenced_area_uses_pixel_size() {
    let mut m = Mask::empty(4, 4);
    for r in 1..3 {
        for c in 0..3 {
            m.set(r, c, true);
        }
    }
    let meta = RasterMeta::new(4, 4, [500_000.0, 10.0, 0.0, 6_000_000.0, 0.0, -10.0], "EPSG:32755").unwrap();
    let ps = components_to_polygons(&m, &meta).unwrap();
    assert_eq!(ps.len(), 1);
    assert_eq!(ps[0].area_m2, 600.0);
    assert!(signed_area2(&ps[0].exterior) > 0.0, "exteriors are counter-clockwise in world space");
    assert_eq!(rasterize(&ps, &meta), m);
}

#[test]
fn synthetic_scene_round_trip() {
    for seed in 0..4 {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let (_, gt) = gen_fields(&spec).unwrap();
        let e = gt.extent.reshape(&[spec.height, spec.width]).unwrap();
        let b = gt.boundary.reshape(&[spec.height, spec.width]).unwrap();
        let m = refined_threshold(&e, &b, ThresholdPair::default()).unwrap();
        let meta = RasterMeta::unit(spec.width, spec.height);
        let ps = components_to_polygons(&m, &meta).unwrap();
        assert_eq!(rasterize(&ps, &meta), m, "seed {seed}");
        assert_eq!(ps.len(), label_components(&m).1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn polygonize_rasterize_round_trip(h in 1usize..12, w in 1usize..12, fill in 0.1f64..0.9, seed in any::<u64>()) {
        let m = random_mask(h, w, fill, seed);
        let meta = RasterMeta::unit(w, h);
        let ps = components_to_polygons(&m, &meta).unwrap();
        prop_assert_eq!(rasterize(&ps, &meta), m.clone());
        let total: f64 = ps.iter().map(|p| p.area_m2).sum();
        prop_assert_eq!(total, m.count() as f64);
        for p in &ps {
            prop_assert!(is_valid_polygon(p));
        }
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                prop_assert!(polygon_iou(&ps[i], &ps[j]) < 1e-12);
            }
        }
    }

    #[test]
    fn thinning_is_idempotent(h in 3usize..14, w in 3usize..14, fill in 0.2f64..0.9, seed in any::<u64>()) {
        let m = random_mask(h, w, fill, seed);
        let s = thin(&m);
        prop_assert_eq!(thin(&s), s.clone());
        prop_assert!(s.data().iter().zip(m.data()).all(|(&a, &b)| !a || b));
    }
}

fn square(x: f64, y: f64, side: f64, id: usize) -> FieldPolygon {
    FieldPolygon::new(vec![[x, y], [x + side, y], [x + side, y + side], [x, y + side]], vec![], id)
}

#[test]
fn simplification_drops_collinear_vertices() {
    let p = FieldPolygon::new(vec![[0.0, 0.0], [5.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]], vec![], 1);
    let out = simplify_filter(std::slice::from_ref(&p), 0.5, 0.0).unwrap();
    assert_eq!(out[0].exterior.len(), 4);
    assert_eq!(out[0].area_m2, 100.0);
    assert_eq!(simplify_ring(&p.exterior, 0.0), p.exterior);
}

#[test]
fn small_polygons_are_removed() {
    let keep = square(0.0, 0.0, 20.0, 1);
    let small = square(100.0, 100.0, 50f64.sqrt(), 2);
    let out = simplify_filter(&[keep.clone(), small], 1.0, 100.0).unwrap();
    assert_eq!(out, vec![keep]);
    assert!(matches!(simplify_filter(&[], -1.0, 0.0), Err(Error::Config(_))));
}

#[test]
fn simplified_polygons_stay_valid() {
    for seed in 0..3 {
        let m = random_mask(24, 24, 0.6, seed);
        let ps = components_to_polygons(&m, &RasterMeta::unit(24, 24)).unwrap();
        for q in simplify_filter(&ps, 1.5, 0.0).unwrap() {
            assert!(is_valid_polygon(&q));
        }
    }
}

#[test]
fn matching_identity_and_disjoint_sets() {
    let ps = vec![square(0.0, 0.0, 10.0, 1), square(20.0, 0.0, 10.0, 2), square(0.0, 20.0, 5.0, 3)];
    let m = match_polygons(&ps, &ps, 0.5).unwrap();
    assert_eq!(m.len(), 3);
    for x in &m {
        assert_eq!(x.pred_id, x.truth_id);
        assert!((x.iou - 1.0).abs() < 1e-12);
        assert_eq!(x.hausdorff, 0.0);
        assert_eq!(x.msd, 0.0);
    }
    let far = vec![square(100.0, 100.0, 10.0, 1)];
    assert!(match_polygons(&far, &ps, 0.0).unwrap().is_empty());
}

#[test]
fn one_prediction_covering_two_fields_matches_once() {
    let pred = vec![FieldPolygon::new(vec![[0.0, 0.0], [20.0, 0.0], [20.0, 10.0], [0.0, 10.0]], vec![], 1)];
    let truth = vec![square(0.0, 0.0, 10.0, 1), square(10.0, 0.0, 10.0, 2)];
    let m = match_polygons(&pred, &truth, 0.0).unwrap();
    assert_eq!(m.len(), 1);
    assert!((m[0].iou - 0.5).abs() < 1e-12);
    assert_eq!(m[0].truth_id, 0, "equal IoU ties go to the lower index");
}

fn random_candidates(n: usize, seed: u64) -> Vec<Candidate> {
    use rand::Rng;
    let mut rng = common::rng(seed);
    (0..n)
        .map(|i| Candidate {
            thresholds: ThresholdPair { t_b: 0.1 + 0.01 * i as f64, t_e: 0.5 },
            // Coarse values force ties and duplicates.
            objectives: std::array::from_fn(|_| rng.random_range(0..5) as f64 / 4.0),
            components: 0,
        })
        .collect()
}

fn oracle_front(c: &[Candidate]) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..c.len() {
        let mut dominated = false;
        for j in 0..c.len() {
            let a = &c[j].objectives;
            let b = &c[i].objectives;
            let mut le = true;
            let mut lt = false;
            for k in 0..4 {
                le &= a[k] <= b[k];
                lt |= a[k] < b[k];
            }
            dominated |= le && lt;
        }
        if !dominated {
            out.push(i);
        }
    }
    out
}

#[test]
fn pareto_front_matches_quadratic_oracle() {
    for seed in 0..50 {
        let c = random_candidates(40, seed);
        let front = pareto_front(&c);
        let expect: Vec<Candidate> = oracle_front(&c).into_iter().map(|i| c[i].clone()).collect();
        assert_eq!(front, expect);
    }
}

#[test]
fn tuning_on_a_scene() {
    let spec = SceneSpec { seed: 5, ..SceneSpec::default() };
    let (_, gt) = gen_fields(&spec).unwrap();
    let e = gt.extent.reshape(&[spec.height, spec.width]).unwrap();
    let b = gt.boundary.reshape(&[spec.height, spec.width]).unwrap();
    let truth = Mask::from_threshold(&e, 0.5).unwrap();
    let n = label_components(&truth).1;
    let grid = threshold_grid(10).unwrap();
    assert_eq!(grid.len(), 81);
    assert!(grid.iter().any(|t| (t.t_b - 0.2).abs() < 1e-12 && (t.t_e - 0.4).abs() < 1e-12));
    let r = tune_thresholds(&e, &b, &truth, n, &grid).unwrap();
    assert_eq!(r.candidates.len(), 81);
    let best = r.pareto.iter().find(|c| c.thresholds == r.best).unwrap();
    assert!(r.pareto.iter().all(|c| c.norm() >= best.norm()));

    let single = tune_thresholds(&e, &b, &truth, n, &[ThresholdPair::default()]).unwrap();
    assert_eq!(single.best, ThresholdPair::default());
    assert_eq!(single.pareto.len(), 1);
    assert!(matches!(tune_thresholds(&e, &b, &truth, n, &[]), Err(Error::Config(_))));
}
