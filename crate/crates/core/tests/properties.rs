use std::fs;

use proptest::prelude::*;

use fusewright::checkpoint::{Checkpoint, Stage};
use fusewright::data::{self, AugOp, Image, SceneSpec};
use fusewright::metrics;
use fusewright::nn::ParamSet;
use fusewright::tasks::{metric_fbeta, metric_mae, metric_miou};
use fusewright::train::{lr_schedule, Schedule, TrainStage};
use fusewright::Tensor;

fn gray(h: usize, w: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0u8..=255, h * w)
        .prop_map(move |px| Image::new(h, w, px.iter().map(|&v| v as f64 / 255.0).collect()).unwrap())
}

fn sized_gray() -> impl Strategy<Value = Image> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| gray(h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pgm_bytes_survive_read_write(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        let px: Vec<u8> = (0..h * w).map(|i| (seed.wrapping_mul(2654435761).wrapping_add(i as u64 * 97) >> 7) as u8).collect();
        let mut bytes = format!("P5\n# note\n{w} {h}\n255\n").into_bytes();
        bytes.extend(&px);
        fs::write(&a, &bytes).unwrap();
        let img = data::read_image(&a).unwrap();
        data::write_image(&b, &img).unwrap();
        let again = data::read_image(&b).unwrap();
        prop_assert_eq!(&img, &again);
        data::write_image(&a, &again).unwrap();
        prop_assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), run in 0.0f64..5.0) {
        let mut set = ParamSet::new();
        set.insert_param("w", Tensor::new(&[vals.len()], vals.clone()).unwrap()).unwrap();
        set.insert_buffer("bn.mean", Tensor::new(&[1], vec![run]).unwrap()).unwrap();
        let c = Checkpoint::new(Stage::Bfn, set).with_meta([("seed", "4")]);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.meta("seed"), Some("4".to_string()));
    }

    #[test]
    fn flips_and_turns_are_invertible(seed in 0u64..1000) {
        let s = data::generate_one(&SceneSpec { h: 16, w: 16, ..SceneSpec::default() }, seed).unwrap();
        for (op, n) in [(AugOp::HFlip, 2), (AugOp::VFlip, 2), (AugOp::Rot90, 4)] {
            let back = data::augment(&s, &vec![op; n], 0).unwrap();
            prop_assert_eq!(&back, &s);
        }
        let c = data::augment(&s, &[AugOp::Crop(8, 12)], seed).unwrap();
        prop_assert_eq!((c.ir.h, c.ir.w, c.gt.h, c.gt.w), (8, 12, 8, 12));
    }

    #[test]
    fn self_information_identities(img in sized_gray()) {
        let h = metrics::entropy(&img);
        prop_assert!((metrics::q_mi(&img, &img, &img).unwrap() - 2.0 * h).abs() < 1e-9);
        prop_assert!(metrics::q_ce(&img, &img, &img).unwrap().abs() < 1e-9);
    }

    #[test]
    fn task_metric_identities(mask in proptest::collection::vec(0u8..2, 1..64), cls in proptest::collection::vec(0u8..4, 1..64)) {
        let probs: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        prop_assert_eq!(metric_mae(&probs, &mask), 0.0);
        prop_assert_eq!(metric_fbeta(&probs, &mask, 0.3), 1.0);
        prop_assert_eq!(metric_miou(&cls, &cls, 4), 1.0);
        let inverted: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        prop_assert_eq!(metric_mae(&inverted, &mask), 1.0);
    }

    #[test]
    fn schedule_stays_in_range(total in 1usize..300, frac in 0.0f64..1.0) {
        let s = Schedule::default();
        let e = ((total as f64 * frac) as usize).min(total - 1);
        let lr = lr_schedule(TrainStage::Bfn, e, total, &s).unwrap();
        prop_assert!(lr >= 0.0 && lr <= s.lr_peak * (1.0 + 1e-12));
        let lr2 = lr_schedule(TrainStage::Toar, e, total, &s).unwrap();
        prop_assert!(lr2 > 0.0 && lr2 <= s.toar_lr * (1.0 + 1e-12));
        prop_assert!(lr_schedule(TrainStage::Bfn, total, total, &s).is_err());
    }
}
