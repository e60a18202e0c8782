use lbgen::alignment::{individual_alignment_loss, select_negative_class};
use lbgen::evaluation::{background_gap, context_bias_avg, stratified_subsample, texture_inclination, CueConflictDecision, PartitionAccuracyTable};
use lbgen::generator::make_grad_mask;
use lbgen::quality::{level_probabilities, quality_score, LevelLogits};
use lbgen::derive_stream;
use proptest::prelude::*;

proptest! {
    #[test]
    fn grad_mask_has_k_flags(t in 1usize..30, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((t - 1) as f64 * k_frac) as usize;
        let m = make_grad_mask(t, k, &mut derive_stream(seed, "mask")).unwrap();
        prop_assert_eq!(m.count(), k);
        prop_assert_eq!(m.flags.len(), t);
    }

    #[test]
    fn negative_class_excludes(c in 2usize..12, e in 0usize..12, seed in any::<u64>()) {
        let e = e % c;
        let n = select_negative_class(c, e, &mut derive_stream(seed, "neg")).unwrap();
        prop_assert!(n != e && n < c);
    }

    #[test]
    fn quality_score_in_range(l in prop::array::uniform5(-30.0f64..30.0)) {
        let s = quality_score(&level_probabilities(&LevelLogits(l)).unwrap());
        prop_assert!((1.0..=5.0).contains(&s));
    }

    #[test]
    fn individual_loss_in_range(a in prop::collection::vec(-1.0f64..1.0, 4), b in prop::collection::vec(-1.0f64..1.0, 4)) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let l = individual_alignment_loss(&a, &b).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
    }

    #[test]
    fn context_bias_is_scale_free(acc in prop::array::uniform4(0.05f64..1.0), lambda in 0.1f64..10.0) {
        let a = context_bias_avg(&PartitionAccuracyTable::from_accuracies(&acc)).unwrap();
        let b = context_bias_avg(&PartitionAccuracyTable::from_accuracies(&acc.map(|x| x * lambda))).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn background_gap_is_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assert_eq!(background_gap(a, b).unwrap(), -background_gap(b, a).unwrap());
    }

    #[test]
    fn metrics_ignore_logit_offsets(
        logits in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..60),
        shift in -100.0f64..100.0,
    ) {
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        let decide = |s: f64| -> Vec<CueConflictDecision> {
            logits.iter().map(|l| {
                let shifted: Vec<f64> = l.iter().map(|x| x + s).collect();
                CueConflictDecision { shape_class: 0, texture_class: 1, predicted_class: argmax(&shifted) }
            }).collect()
        };
        let a = texture_inclination(&decide(0.0));
        let b = texture_inclination(&decide(shift));
        prop_assert_eq!(a.is_ok(), b.is_ok());
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn stratified_counts_within_one(labels in prop::collection::vec(0usize..5, 20..200), f in 0.3f64..1.0, seed in any::<u64>()) {
        let starved = (0..5).any(|c| {
            let n = labels.iter().filter(|&&y| y == c).count();
            n > 0 && (f * n as f64).round() == 0.0
        });
        let result = stratified_subsample(&labels, f, seed);
        prop_assert_eq!(result.is_err(), starved);
        let Ok(idx) = result else { return Ok(()) };
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for c in 0..5 {
            let total = labels.iter().filter(|&&y| y == c).count() as f64;
            let got = idx.iter().filter(|&&i| labels[i] == c).count() as f64;
            prop_assert!((got - f * total).abs() <= 1.0);
        }
    }
}
