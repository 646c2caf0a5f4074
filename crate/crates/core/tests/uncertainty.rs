use ndarray::{Array3, Axis};
use pocus_core::data::AugmentationPolicy;
use pocus_core::nn::{Arch, Classifier, ClassifierConfig, ModelInput};
use pocus_core::uncertainty::{
    aleatoric_confidence, confidence_from_std, epistemic_confidence, read_confidence_csv, scores_from_stack,
    write_confidence_csv, ConfidenceKind, ConfidenceRow,
};
use pocus_core::Class;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(dropout: f64) -> Classifier {
    let cfg = ClassifierConfig {
        backbone_widths: Some(vec![vec![4], vec![6]]),
        input_size: 64,
        dropout_rate: dropout,
        init_seed: 5,
        ..ClassifierConfig::new(Arch::VggCam)
    };
    Classifier::build(&cfg).unwrap()
}

fn frames(n: usize) -> Vec<Array3<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..n).map(|_| Array3::from_shape_fn((64, 64, 3), |_| rng.random())).collect()
}

#[test]
fn no_dropout_means_full_confidence() {
    let f = frames(3);
    let scores = epistemic_confidence(&model(0.0), ModelInput::Frames(&f), 10, 1).unwrap();
    assert!(scores.iter().all(|s| s.value == 1.0 && s.raw_std == 0.0));
}

#[test]
fn identity_policy_means_full_confidence() {
    let f = frames(3);
    let scores = aleatoric_confidence(&model(0.5), ModelInput::Frames(&f), &AugmentationPolicy::identity(), 10, 1).unwrap();
    assert!(scores.iter().all(|s| s.value == 1.0 && s.kind == ConfidenceKind::Aleatoric));
}

#[test]
fn seeded_scores_repeat() {
    let f = frames(4);
    let m = model(0.5);
    let a = epistemic_confidence(&m, ModelInput::Frames(&f), 10, 7).unwrap();
    assert_eq!(a, epistemic_confidence(&m, ModelInput::Frames(&f), 10, 7).unwrap());
    assert!(a.iter().any(|s| s.value < 1.0));
    let policy = AugmentationPolicy::default();
    let b = aleatoric_confidence(&m, ModelInput::Frames(&f), &policy, 10, 7).unwrap();
    assert_eq!(b, aleatoric_confidence(&m, ModelInput::Frames(&f), &policy, 10, 7).unwrap());
    assert!(epistemic_confidence(&m, ModelInput::Frames(&f), 1, 7).is_err());
}

#[test]
fn confidence_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        ConfidenceRow { video_id: "v1".into(), frame_index: 0, pred_class: Class::Covid, epistemic_c: 0.8125, aleatoric_c: 0.7, correct: true },
        ConfidenceRow { video_id: "v2".into(), frame_index: 3, pred_class: Class::Healthy, epistemic_c: 0.1, aleatoric_c: 1.0, correct: false },
    ];
    let path = dir.path().join("confidence.csv");
    write_confidence_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("video_id,frame_index,pred_class,epistemic_c,aleatoric_c,correct\n"));
    assert_eq!(read_confidence_csv(&path).unwrap(), rows);
}

fn simplex_stack() -> impl Strategy<Value = Array3<f32>> {
    (2usize..12, 1usize..4).prop_flat_map(|(p, b)| {
        prop::collection::vec(prop::collection::vec(0.01f32..1.0, 4), p * b).prop_map(move |rows| {
            let mut s = Array3::<f32>::zeros((p, b, 4));
            for (i, row) in rows.iter().enumerate() {
                let total: f32 = row.iter().sum();
                for k in 0..4 {
                    s[[i / b, i % b, k]] = row[k] / total;
                }
            }
            s
        })
    })
}

proptest! {
    #[test]
    fn confidence_decreases_with_spread(a in 0.0..0.5f64, b in 0.0..0.5f64) {
        prop_assume!(a < b);
        prop_assert!(confidence_from_std(a).unwrap() > confidence_from_std(b).unwrap());
    }

    #[test]
    fn winner_is_argmax_of_mean(stack in simplex_stack()) {
        let scores = scores_from_stack(&stack, ConfidenceKind::Epistemic).unwrap();
        for (b, s) in scores.iter().enumerate() {
            let mean = stack.index_axis(Axis(1), b).mapv(|v| v as f64).mean_axis(Axis(0)).unwrap();
            let best = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = mean.iter().position(|&v| v == best).unwrap();
            prop_assert_eq!(s.winning_class, first);
            prop_assert!((0.0..=1.0).contains(&s.value));
        }
    }

    #[test]
    fn identical_passes_give_full_confidence(row in prop::collection::vec(0.01f32..1.0, 4), passes in 2usize..10) {
        let total: f32 = row.iter().sum();
        let stack = Array3::from_shape_fn((passes, 1, 4), |(_, _, k)| row[k] / total);
        prop_assert_eq!(scores_from_stack(&stack, ConfidenceKind::Epistemic).unwrap()[0].value, 1.0);
    }
}
