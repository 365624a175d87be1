use ecgnet::dataset::{Dataset, LabelVocabulary, Provenance};
use ecgnet::metrics::{confusion_counts, evaluate_model, f1_from_counts, ClassCounts, ConfusionCounts};
use ecgnet::model::{Model, ModelConfig, Thresholds};
use ecgnet::record::{EcgRecord, LabelSet};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Q = Ratio<i128>;

fn q_ratio(num: u64, den: u64) -> Q {
    if den == 0 {
        Q::from_integer(0)
    } else {
        Q::new(num as i128, den as i128)
    }
}

/// Exact precision, recall and F1 with every degenerate ratio set to 0.
fn oracle(k: ClassCounts) -> (f64, f64, f64) {
    let p = q_ratio(k.tp, k.tp + k.fp);
    let r = q_ratio(k.tp, k.tp + k.fn_);
    let f = if p + r == Q::from_integer(0) {
        Q::from_integer(0)
    } else {
        Q::from_integer(2) * p * r / (p + r)
    };
    let to_f = |x: Q| *x.numer() as f64 / *x.denom() as f64;
    (to_f(p), to_f(r), to_f(f))
}

fn count() -> impl Strategy<Value = u64> {
    prop_oneof![Just(0u64), 0u64..4, 0u64..1_000_000]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rates_match_rational_recount(tp in count(), fp in count(), fn_ in count(), tn in count()) {
        let k = ClassCounts { tp, fp, fn_, tn };
        let table = f1_from_counts(&ConfusionCounts { classes: vec!["x".into()], counts: vec![k] });
        let row = &table.rows[0];
        let (p, r, f) = oracle(k);
        prop_assert!((row.precision - p).abs() <= 1e-12);
        prop_assert!((row.recall - r).abs() <= 1e-12);
        prop_assert!((row.f1 - f).abs() <= 1e-12, "{k:?}: {} vs {f}", row.f1);
        prop_assert_eq!(row.support, tp + fn_);
    }
}

#[test]
fn degenerate_counts_are_zero() {
    for k in [
        ClassCounts::default(),
        ClassCounts { tn: 9, ..Default::default() },
        ClassCounts { fp: 3, ..Default::default() },
        ClassCounts { fn_: 3, ..Default::default() },
    ] {
        let t = f1_from_counts(&ConfusionCounts { classes: vec!["x".into()], counts: vec![k] });
        assert_eq!((t.rows[0].precision, t.rows[0].recall, t.rows[0].f1), (0.0, 0.0, 0.0));
    }
}

fn random_sets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<LabelSet> {
    (0..n)
        .map(|_| {
            let mut s = LabelSet::default();
            for c in 0..classes {
                if rng.gen_bool(0.3) {
                    s.insert(c);
                }
            }
            s
        })
        .collect()
}

#[test]
fn confusion_counts_match_brute_force_and_ignore_order() {
    let vocab = LabelVocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let preds = random_sets(&mut rng, 300, vocab.len());
    let truths = random_sets(&mut rng, 300, vocab.len());
    let counts = confusion_counts(&preds, &truths, &vocab).unwrap();
    for (c, k) in counts.counts.iter().enumerate() {
        let mut brute = ClassCounts::default();
        for (p, t) in preds.iter().zip(&truths) {
            match (p.contains(c), t.contains(c)) {
                (true, true) => brute.tp += 1,
                (true, false) => brute.fp += 1,
                (false, true) => brute.fn_ += 1,
                (false, false) => brute.tn += 1,
            }
        }
        assert_eq!(*k, brute, "class {c}");
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.reverse();
    order.rotate_left(17);
    let p2: Vec<_> = order.iter().map(|&i| preds[i]).collect();
    let t2: Vec<_> = order.iter().map(|&i| truths[i]).collect();
    assert_eq!(confusion_counts(&p2, &t2, &vocab).unwrap(), counts);
}

#[test]
fn evaluate_model_matches_manual_thresholding() {
    let vocab = LabelVocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let records: Vec<EcgRecord> = (0..20)
        .map(|i| {
            let v = (0..12 * 2500).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let mut l = LabelSet::default();
            l.insert(i % 3);
            EcgRecord::new(v, l, format!("r{i}")).unwrap()
        })
        .collect();
    let ds = Dataset::from_records(records, vocab.clone(), Provenance::default());
    let heads: Vec<String> = vocab.names()[..3].to_vec();
    let config = ModelConfig {
        conv_layers: 4,
        base_channels: 2,
        channel_cap: Some(2),
        kernel_size: 3,
        ..ModelConfig::default()
    }
    .with_heads(heads.clone());
    let model = Model::<f64>::build(config, 5).unwrap();
    let table = evaluate_model(&model, &ds, &Thresholds::default()).unwrap();

    let mut preds = Vec::new();
    for r in ds.records() {
        let batch = ecgnet::record::stack_records::<f64>([r.as_ref()]).unwrap();
        let scores = &model.predict_scores(&batch).unwrap()[0];
        let mut s = LabelSet::default();
        for (h, &p) in scores.iter().enumerate() {
            if p > 0.5 {
                s.insert(vocab.index_of(&heads[h]).unwrap());
            }
        }
        preds.push(s);
    }
    let truths: Vec<LabelSet> = ds.records().iter().map(|r| r.labels).collect();
    let all = f1_from_counts(&confusion_counts(&preds, &truths, &vocab).unwrap());
    for h in &heads {
        assert_eq!(table.get(h), all.get(h), "{h}");
    }
    assert!(table.get(&vocab.names()[5]).is_none());
}
