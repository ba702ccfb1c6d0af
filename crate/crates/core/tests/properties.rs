//! Cross-module properties on generated data.

use proptest::prelude::*;

use sumcal::correctness::roc_from_scores;
use sumcal::metrics::{brier, calibration_report, skill_score, squared_errors};
use sumcal::rescale::{assign_record_folds, crossval_rescale, labeled_samples, DEFAULT_L2};
use sumcal::stats::paired_ttest;
use sumcal::synth::{generate, CalibrationMap, GeneratorSpec};
use sumcal::{ConfidenceSpec, CorrectnessRule, FeatureSpace};

fn map_strategy() -> impl Strategy<Value = CalibrationMap> {
    prop_oneof![
        Just(CalibrationMap::Identity),
        (1.5f64..4.0).prop_map(|gamma| CalibrationMap::Overconfident { gamma }),
        (0.1f64..0.9).prop_map(|q| CalibrationMap::Constant { q }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn out_of_fold_rescaling_keeps_every_sample_once(
        seed in any::<u64>(),
        map in map_strategy(),
        k in 2usize..7,
    ) {
        let g = generate(&GeneratorSpec::new(600, seed, map));
        let rule = CorrectnessRule::new("bertscore", 0.49);
        let raw = labeled_samples(&g.corpus.records, &rule, &ConfidenceSpec::default()).unwrap();
        let folds = assign_record_folds(&g.corpus.records, k, seed).unwrap();
        let Ok(cv) = crossval_rescale(&raw, &folds, FeatureSpace::default(), DEFAULT_L2) else {
            // a training split with a single class is a legitimate refusal
            return Ok(());
        };
        prop_assert_eq!(cv.samples.len(), raw.len());
        prop_assert_eq!(cv.folds.len(), k);
        for s in &cv.samples {
            prop_assert_eq!(folds.fold_of(&s.sample.repo).unwrap(), s.fold);
            prop_assert!((0.0..=1.0).contains(&s.sample.confidence));
        }
        // pairing a treatment with itself yields no difference
        let same = paired_ttest(&cv.labeled(), &cv.labeled()).unwrap();
        prop_assert_eq!(same.mean_diff, 0.0);
        prop_assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn rescaling_preserves_per_fold_ranking(seed in any::<u64>()) {
        let g = generate(&GeneratorSpec::new(800, seed, CalibrationMap::Overconfident { gamma: 2.5 }));
        let rule = CorrectnessRule::new("bertscore", 0.49);
        let raw = labeled_samples(&g.corpus.records, &rule, &ConfidenceSpec::default()).unwrap();
        let folds = assign_record_folds(&g.corpus.records, 5, seed).unwrap();
        let cv = crossval_rescale(&raw, &folds, FeatureSpace::default(), DEFAULT_L2).unwrap();
        for fold in 0..5 {
            let rows: Vec<_> = cv.samples.iter().filter(|s| s.fold == fold).collect();
            if cv.folds[fold].model.slope <= 0.0 {
                continue;
            }
            let before: Vec<_> = rows.iter().map(|s| (s.raw_confidence, s.sample.outcome == 1)).collect();
            let after: Vec<_> = rows.iter().map(|s| (s.sample.confidence, s.sample.outcome == 1)).collect();
            if let (Ok(a), Ok(b)) = (roc_from_scores(&before), roc_from_scores(&after)) {
                prop_assert!((a.auc - b.auc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn report_agrees_with_component_metrics(seed in any::<u64>(), bins in 1usize..25) {
        let g = generate(&GeneratorSpec::new(300, seed, CalibrationMap::Overconfident { gamma: 2.0 }));
        let rule = CorrectnessRule::new("bertscore", 0.49);
        let s = labeled_samples(&g.corpus.records, &rule, &ConfidenceSpec::default()).unwrap();
        let report = calibration_report(&s, bins).unwrap();
        prop_assert_eq!(report.brier, brier(&s).unwrap());
        prop_assert_eq!(report.skill, skill_score(&s).ok());
        prop_assert_eq!(report.bins.iter().map(|b| b.count).sum::<usize>(), s.len());
        prop_assert_eq!(squared_errors(&s).len(), s.len());
    }
}
