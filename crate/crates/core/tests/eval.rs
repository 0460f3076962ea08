mod common;

use common::{tiny_bench, tiny_cfg, tiny_spec};
use egoprompt_core::component::Component;
use egoprompt_core::data::Split;
use egoprompt_core::eval::{
    ablation_cells, argmax, average_accuracy, class_average_accuracy, evaluate_checkpoint, evaluate_model,
    full_method, harmonic_mean, harmonic_mean_or_zero, iqr, median, records_csv, run_sweep, series_dat, summarize,
    summary_csv, train_and_evaluate, AblationConfig, CellKey, EvalMode, Measurement, Protocol, RunRecord, SweepAxis,
};
use egoprompt_core::trainer::{Trainer, Variant};
use egoprompt_core::Error;
use proptest::prelude::*;

#[test]
fn harmonic_mean_reproduces_reference_cells() {
    for (a, b, hm) in [(42.93, 35.75, 39.01), (29.71, 47.89, 36.67), (42.9, 29.7, 35.1)] {
        let got = harmonic_mean(a, b).unwrap();
        assert!((got - hm).abs() <= 0.02, "({a}, {b}) -> {got}, expected {hm}");
    }
}

#[test]
fn harmonic_mean_rejects_non_positive_inputs() {
    assert!(matches!(harmonic_mean(0.0, 50.0), Err(Error::Usage(_))));
    assert!(harmonic_mean(-1.0, 50.0).is_err());
    assert_eq!(harmonic_mean_or_zero(0.0, 50.0), 0.0);
    assert_eq!(harmonic_mean(50.0, 50.0).unwrap(), 50.0);
}

#[test]
fn accuracy_examples() {
    let truth = [0, 0, 0, 1];
    let preds = [0, 0, 0, 0];
    assert_eq!(average_accuracy(&preds, &truth).unwrap(), 75.0);
    assert_eq!(class_average_accuracy(&preds, &truth).unwrap(), 50.0);
    assert!(average_accuracy(&[0], &[0, 1]).is_err());
    assert!(average_accuracy(&[], &[]).is_err());
}

#[test]
fn argmax_breaks_ties_toward_the_lower_index() {
    assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    assert_eq!(argmax(&[1.0, 1.0]), 0);
}

#[test]
fn quantile_helpers() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2.0);
    assert!(median(&[]).is_nan());
}

proptest! {
    #[test]
    fn harmonic_mean_is_below_geometric_and_arithmetic(a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let h = harmonic_mean(a, b).unwrap();
        let g = (a * b).sqrt();
        prop_assert!(h <= g * (1.0 + 1e-12));
        prop_assert!(g <= (a + b) / 2.0 * (1.0 + 1e-12));
        prop_assert!(h >= a.min(b) * (1.0 - 1e-12));
    }

    #[test]
    fn class_average_is_invariant_to_duplicating_a_class(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
        class in 0usize..4,
    ) {
        let (preds, truth): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let base = class_average_accuracy(&preds, &truth).unwrap();
        let (mut p2, mut t2) = (preds.clone(), truth.clone());
        for (p, t) in preds.iter().zip(&truth) {
            if *t == class {
                p2.push(*p);
                t2.push(*t);
            }
        }
        let dup = class_average_accuracy(&p2, &t2).unwrap();
        prop_assert!((base - dup).abs() < 1e-9);
    }

    #[test]
    fn accuracies_lie_in_0_100(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..30)) {
        let (preds, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        for v in [average_accuracy(&preds, &truth).unwrap(), class_average_accuracy(&preds, &truth).unwrap()] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn stage1_scores_match_a_brute_force_scorer() {
    let bench = tiny_bench(11);
    let mut cfg = tiny_cfg();
    cfg.variant = Variant::Stage1Only;
    let mut t = Trainer::<f64>::new(cfg.clone(), &bench).unwrap();
    t.run_variant(bench.split(Split::Train)).unwrap();
    let report = evaluate_model(&t.model, &t.labels, &cfg, &bench, EvalMode::Stage1).unwrap();
    for split in [Split::WithinTest, Split::CrossTest] {
        let data = bench.split(split);
        for c in Component::ALL {
            let base = t.labels.base(c).to_vec();
            let table = t
                .model
                .class_table(c, &t.labels.names_of(c, &base), cfg.templates()[c.index()])
                .unwrap();
            let (mut hits, mut n) = (0usize, 0usize);
            for i in 0..data.len() {
                let Some(truth) = base.iter().position(|&l| l == data.labels(c)[i]) else {
                    continue;
                };
                let f = &t.model.component_features(data.clip(i)).unwrap()[c.index()];
                let mut best = (f64::NEG_INFINITY, 0);
                for r in 0..table.rows() {
                    let s = cosine(f, table.row(r));
                    if s > best.0 {
                        best = (s, r);
                    }
                }
                hits += usize::from(best.1 == truth);
                n += 1;
            }
            let m = report.get(split, c).unwrap();
            assert_eq!(m.samples, n);
            assert!((m.average_accuracy - 100.0 * hits as f64 / n as f64).abs() < 1e-9, "{split:?} {c:?}");
        }
    }
    let wc = report.hm(Protocol::WithinCross, Component::Verb).unwrap();
    let a = report.get(Split::WithinTest, Component::Verb).unwrap().average_accuracy;
    let b = report.get(Split::CrossTest, Component::Verb).unwrap().average_accuracy;
    assert!((wc.average_accuracy - harmonic_mean_or_zero(a, b)).abs() < 1e-12);
}

#[test]
fn novel_split_is_scored_among_novel_labels_only() {
    let bench = tiny_bench(12);
    let res = train_and_evaluate::<f32>(&tiny_cfg(), &bench).unwrap();
    let data = bench.split(Split::NovelTest);
    for c in Component::ALL {
        let novel = bench.novel(c);
        let expected = data.labels(c).iter().filter(|l| novel.contains(l)).count();
        match res.metrics.get(Split::NovelTest, c) {
            Some(m) => assert_eq!(m.samples, expected),
            None => assert_eq!(expected, 0),
        }
    }
    assert!(res.pool.is_some());
}

#[test]
fn stage2_evaluation_needs_a_stage2_checkpoint() {
    let bench = tiny_bench(13);
    let res = train_and_evaluate::<f32>(&tiny_cfg(), &bench).unwrap();
    let err = evaluate_checkpoint(&res.checkpoints[0], &bench, EvalMode::Stage2).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    let again = evaluate_checkpoint(&res.checkpoints[1], &bench, EvalMode::Stage2).unwrap();
    assert_eq!(again, res.metrics);
    let other = tiny_bench(14);
    if other.novel_verbs != bench.novel_verbs || other.novel_nouns != bench.novel_nouns {
        assert!(evaluate_checkpoint(&res.checkpoints[1], &other, EvalMode::Stage2).is_err());
    }
}

#[test]
fn ablation_grid_has_32_cells_with_the_full_method_once() {
    let base = tiny_cfg();
    let cells = ablation_cells(&base, &AblationConfig::default());
    assert_eq!(cells.len(), 32);
    let full = full_method(&base);
    assert_eq!(cells.iter().filter(|c| CellKey::of(c) == full).count(), 1);
    let mut keys: Vec<String> = cells.iter().map(|c| CellKey::of(c).label()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 32);
}

#[test]
fn invalid_sweep_values_are_config_errors() {
    let base = tiny_cfg();
    for (axis, v) in [
        (SweepAxis::K, 7.0),
        (SweepAxis::K, 0.0),
        (SweepAxis::PoolSize, 2.5),
        (SweepAxis::LambdaFreq, -1.0),
        (SweepAxis::LambdaOrth, f64::NAN),
    ] {
        match axis.apply(&base, v) {
            Err(Error::Config { key, .. }) => assert_eq!(key, format!("sweep.{}", axis.name()), "{axis} {v}"),
            other => panic!("{axis} {v}: {other:?}"),
        }
    }
    assert!("depth".parse::<SweepAxis>().is_err());
    assert_eq!("pool-size".parse::<SweepAxis>().unwrap(), SweepAxis::PoolSize);
}

#[test]
fn sweep_emits_one_record_per_value_and_seed() {
    let mut base = tiny_cfg();
    base.epochs_stage1 = 2;
    base.epochs_stage2 = 2;
    let r = run_sweep::<f32>(&tiny_spec(), &base, SweepAxis::PoolSize, &[4.0, 8.0], &[0, 1]).unwrap();
    assert_eq!(r.points.len(), 4);
    assert_eq!(r.points.iter().map(|(v, _)| *v).collect::<Vec<_>>(), [4.0, 4.0, 8.0, 8.0]);
    assert_eq!(r.points[2].1.cell.pool_size, 8);
    let series = r.series("verb", "hm:within-cross", "average_accuracy");
    assert_eq!(series.len(), 2);
    let dat = series_dat("pool_size", "verb", &series);
    assert_eq!(dat.lines().count(), 3);
    assert!(dat.lines().nth(1).unwrap().starts_with("4 "));
}

fn record(variant: Variant, seed: u64, value: f64) -> RunRecord {
    let mut cfg = tiny_cfg();
    cfg.variant = variant;
    RunRecord {
        cell: CellKey::of(&cfg),
        seed,
        measurements: vec![Measurement {
            component: "verb".into(),
            split: "cross-test".into(),
            metric: "average_accuracy".into(),
            value,
        }],
    }
}

#[test]
fn summary_reports_medians_iqr_and_win_loss() {
    let records = vec![
        record(Variant::TwoStage, 0, 50.0),
        record(Variant::TwoStage, 1, 60.0),
        record(Variant::TwoStage, 2, 70.0),
        record(Variant::Stage1Only, 0, 40.0),
        record(Variant::Stage1Only, 1, 45.0),
        record(Variant::Stage1Only, 2, 80.0),
    ];
    let full = full_method(&tiny_cfg());
    let rows = summarize(&records, Some(&full));
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].median, rows[0].iqr, rows[0].seeds), (60.0, 10.0, 3));
    assert_eq!(rows[0].vs_full, None);
    assert_eq!(rows[1].median, 45.0);
    assert_eq!(rows[1].vs_full.as_deref(), Some("loss"));
    let csv = summary_csv(&rows).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "variant,lambda_freq,lambda_orth,deep_prompting,pool_size,k,component,split,metric,seeds,median,iqr,vs_full,values"
    );
    assert_eq!(lines.count(), 2);
    assert!(csv.contains("stage1-only,") && csv.contains(",loss,40;45;80"));
    let rcsv = records_csv(&records).unwrap();
    assert_eq!(rcsv.lines().count(), 7);
}
