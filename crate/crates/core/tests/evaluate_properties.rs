mod common;

use cssstn::eeg_io::{stratified_folds, Fold};
use cssstn::evaluate::{classifier_accuracy, evaluate_fold, Identity};
use cssstn::models::{Classifier, ClassifierConfig};
use proptest::prelude::*;

fn classifier(seed: u64) -> Classifier {
    Classifier::new(ClassifierConfig { in_channels: 2, image_size: 8, seed, ..common::tiny_classifier() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn identical_voters_reproduce_the_solo_classifier(net_seed in 0u64..1000, data_seed in 0u64..1000) {
        let data = common::blobs(48, 2, 8, 2.0, data_seed);
        let c = classifier(net_seed);
        let fold = stratified_folds(&data.labels, 3, data_seed).unwrap().swap_remove(1);
        let e = evaluate_fold(1, &Identity, &c, &c, &data, &fold).unwrap();
        let solo = classifier_accuracy(&c, &data, &fold.test).unwrap();
        prop_assert_eq!(e.ensemble_bacc, solo);
        prop_assert_eq!(e.baseline_bacc, solo);
        prop_assert_eq!(e.source_bacc, solo);
        prop_assert_eq!(e.ensemble, e.baseline);
        prop_assert_eq!(e.n_test, fold.test.len());
    }
}

#[test]
fn overlapping_fold_is_refused() {
    let data = common::blobs(16, 2, 8, 2.0, 0);
    let c = classifier(0);
    let fold = Fold { train: (0..10).collect(), test: (8..16).collect() };
    assert!(evaluate_fold(0, &Identity, &c, &c, &data, &fold).is_err());
}
