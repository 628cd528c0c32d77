use cssstn::cli::config::ExperimentConfig;
use cssstn::eeg_io::stratified_folds;
use cssstn::evaluate::classifier_accuracy;
use cssstn::preprocess::{preprocess_pipeline, PipelineInput};
use cssstn::synthdata::{generate_subject, matched_filter_oracle, SynthSpec};
use cssstn::training::pretrain_classifier;
use proptest::prelude::*;

struct Scores {
    pipeline: f64,
    oracle: f64,
}

/// Trains the CNN on half of one subject and scores it on the other half,
/// next to the matched-filter oracle on the same held-out epochs.
fn pipeline_and_oracle(spec: &SynthSpec, subject: usize, seed: u64) -> Scores {
    let cfg = ExperimentConfig::desk_scale().with_seed(seed);
    let set = generate_subject(spec, subject, seed).unwrap();
    let fold = stratified_folds(&set.labels, 2, seed).unwrap().swap_remove(0);
    let features = preprocess_pipeline(&PipelineInput::Epochs(set.clone()), &cfg.preprocess).unwrap();
    let (c, _) = pretrain_classifier(&features.select(&fold.train), &cfg.pretrain).unwrap();
    let pipeline = classifier_accuracy(&c, &features, &fold.test).unwrap();
    let oracle = matched_filter_oracle(&set.select(&fold.test), spec, subject).unwrap();
    Scores { pipeline, oracle }
}

fn spec(separation: f64) -> SynthSpec {
    SynthSpec { separation, ..ExperimentConfig::desk_scale().synth }
}

#[test]
fn strong_separation_is_learned_by_the_pipeline() {
    let s = pipeline_and_oracle(&spec(10.0), 0, 3);
    assert!(s.pipeline >= 0.95, "pipeline {}", s.pipeline);
    assert!(s.oracle >= 0.99, "oracle {}", s.oracle);
    assert!(s.oracle >= s.pipeline - 0.05);
}

#[test]
fn golden_subject_beats_illiterate_subject() {
    let spec = spec(5.0);
    assert_eq!(spec.skills, vec![1.0, 0.3]);
    for seed in [0, 1] {
        let golden = pipeline_and_oracle(&spec, 0, seed);
        let illiterate = pipeline_and_oracle(&spec, 1, seed);
        assert!(
            golden.pipeline >= illiterate.pipeline + 0.1,
            "seed {seed}: golden {} illiterate {}",
            golden.pipeline,
            illiterate.pipeline
        );
        for s in [&golden, &illiterate] {
            assert!(s.oracle >= s.pipeline - 0.05, "seed {seed}: oracle {} pipeline {}", s.oracle, s.pipeline);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn oracle_is_at_chance_without_signal(seed in 0u64..10_000) {
        let s = SynthSpec { epochs_per_subject: 4400, ..spec(0.0) };
        let acc = matched_filter_oracle(&generate_subject(&s, 0, seed).unwrap(), &s, 0).unwrap();
        prop_assert!((acc - 0.5).abs() <= 0.05, "oracle {}", acc);
    }

    #[test]
    fn oracle_does_not_drop_as_separation_grows(seed in 0u64..10_000, subject in 0usize..2) {
        let mut prev = 0.0;
        for d in [0.0, 1.0, 3.0, 10.0] {
            let s = spec(d);
            let acc = matched_filter_oracle(&generate_subject(&s, subject, seed).unwrap(), &s, subject).unwrap();
            prop_assert!(acc >= prev - 0.03, "d={}: {} after {}", d, acc, prev);
            prev = acc;
        }
    }

    #[test]
    fn same_seed_gives_identical_epochs(seed in 0u64..10_000) {
        let s = SynthSpec { epochs_per_subject: 22, ..spec(5.0) };
        prop_assert_eq!(generate_subject(&s, 1, seed).unwrap(), generate_subject(&s, 1, seed).unwrap());
    }
}
