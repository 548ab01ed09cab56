use fieldbound::io::{self, Raster};
use fieldbound::nn::{init_weights, UNet3DConfig};
use fieldbound::{DenseTensor, Error, PatchSpec};
use proptest::prelude::*;

fn raster_strategy() -> impl Strategy<Value = Raster> {
    (1usize..4, 1usize..3, 1usize..6, 1usize..6, any::<bool>())
        .prop_flat_map(|(c, t, h, w, with_time)| {
            let dims = if with_time { vec![c, t, h, w] } else { vec![c, h, w] };
            let n = dims.iter().product::<usize>();
            (Just(dims), prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n))
        })
        .prop_map(|(dims, data)| {
            let names = (0..dims[0]).map(|i| format!("b{i}")).collect();
            Raster::new(DenseTensor::new(dims, data).unwrap(), names)
                .unwrap()
                .with_meta([5.0, 10.0, 0.0, 80.0, 0.0, -10.0], "EPSG:32633")
        })
}

proptest! {
    #[test]
    fn raster_round_trip_is_bit_exact(r in raster_strategy()) {
        let bytes = r.to_bytes().unwrap();
        let back = Raster::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let same_bits = back.data.data().iter().zip(r.data.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
        prop_assert_eq!(back.header, r.header);
    }

    #[test]
    fn truncated_rasters_are_format_errors(r in raster_strategy(), cut in 1usize..64) {
        let bytes = r.to_bytes().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(matches!(Raster::from_bytes(&bytes[..keep]), Err(Error::Format(_))));
    }
}

#[test]
fn weights_round_trip_and_corruption() {
    let cfg = UNet3DConfig {
        in_channels: 2,
        init_features: 4,
        stage_repeats: vec![1],
        patch: PatchSpec::new(1, 2, 2),
        ..UNet3DConfig::default()
    };
    let w = init_weights(cfg, 5).unwrap();
    let bytes = io::weights_to_bytes(&w).unwrap();
    let back = io::weights_from_bytes(&bytes).unwrap();
    assert_eq!(back, w);
    assert_eq!(io::weights_to_bytes(&back).unwrap(), bytes);
    assert!(matches!(io::weights_from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Weight(_))));
    assert!(matches!(io::weights_from_bytes(b"FBRASTER1\n"), Err(Error::Format(_))));
}

#[test]
fn files_are_replaced_atomically() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("a.fbr");
    let r = Raster::new(DenseTensor::full(&[1, 2, 2], 0.5), vec!["extent".into()]).unwrap();
    io::write_raster(&p, &r).unwrap();
    io::write_raster(&p, &r).unwrap();
    let names: Vec<_> = std::fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["a.fbr"]);
    assert_eq!(io::read_raster(&p).unwrap().data, r.data);
}
