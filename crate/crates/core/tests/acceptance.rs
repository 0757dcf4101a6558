//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vulnmil::corpus::{generate_synthetic, SyntheticSpec};
use vulnmil::encoder::Mode;
use vulnmil::head::StatementScores;
use vulnmil::metrics::{confusion_and_prf, f1_score, predict_function};
use vulnmil::pipeline::{prepare, prepare_for_training, run_experiment, ExperimentConfig, ExperimentOutput};
use vulnmil::report::{render_annotated, render_json, render_table, score_dump};
use vulnmil::segmenter::{filter_truncation_conflicts, train_bpe, FunctionSample, Split};
use vulnmil::tensor::{Graph, Tensor};
use vulnmil::trainer::{mil_loss, select_topk_pseudo_labels};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Counts giving exactly the requested precision and recall.
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let mut pred = vec![1u8; tp + fp];
    let mut gold = vec![1u8; tp];
    gold.extend(vec![0u8; fp]);
    pred.extend(vec![0u8; fn_]);
    gold.extend(vec![1u8; fn_]);
    confusion_and_prf(&pred, &gold).unwrap().f1
}

fn metric_fidelity() -> Outcome {
    // 47241/65250 = 0.724, 47241/90500 = 0.522; 92787/197000 = 0.471, 92787/235500 = 0.394.
    let cases = [
        (0.724, 0.522, 0.607, f1_from_counts(47241, 18009, 43259)),
        (0.471, 0.394, 0.429, f1_from_counts(92787, 104213, 142713)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, r, want, from_counts) in cases {
        let direct = f1_score(p, r);
        pass &= (direct - want).abs() <= 5e-4 && (from_counts - want).abs() <= 5e-4;
        parts.push(format!("P {p} R {r} -> {direct:.4} (counts {from_counts:.4}, expected {want})"));
    }
    outcome(pass, parts.join("; "))
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut worst_ifa_ulps = 0;
    for i in 0..500 {
        let fs = common::random_instance(&mut rng);
        let o = common::oracle_metrics(&fs, 0.5);
        let r = common::library_report(&fs);
        let mut ok = r.function_level.accuracy == o.acc
            && r.function_level.precision == o.precision
            && r.function_level.recall == o.recall
            && r.function_level.f1 == o.f1;
        match &r.statement_level {
            Some(st) => {
                ok &= st.accuracy == o.st_acc
                    && st.precision == o.st_precision
                    && st.recall == o.st_recall
                    && st.f1 == o.st_f1
            }
            None => ok &= fs.iter().all(|f| f.truth.is_empty()),
        }
        match &r.ranking {
            Some(rk) => {
                ok &= rk.functions == o.ranked
                    && [rk.top1, rk.top3, rk.top5] == o.top
                    && rk.mfr == o.mfr
                    && rk.mar == o.mar
                    && rk.ifa == rk.mfr - 1.0;
                worst_ifa_ulps = worst_ifa_ulps.max(ulps(rk.ifa, o.ifa));
            }
            None => ok &= o.ranked == 0,
        }
        if !ok {
            failures.push(i);
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && worst_ifa_ulps <= 4 && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "500 instances, {} mismatched {:?}, IFA within {worst_ifa_ulps} ulp of direct sum, {:.2}s",
            failures.len(),
            &failures[..failures.len().min(5)],
            elapsed.as_secs_f64()
        ),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for seed in 1..=3 {
        for (name, err) in common::op_gradient_errors(seed) {
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let batch = common::tiny_batch();
    for (seed, k, mode) in [(1, 1, Mode::Eval), (2, 2, Mode::Eval), (3, 2, Mode::Train)] {
        let err = common::model_gradient_error(&common::tiny_model(seed), &batch, k, mode);
        if err > worst.1 {
            worst = ("tiny model", err);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.1 < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {:.2e} ({}), {:.1}s", worst.1, worst.0, elapsed.as_secs_f64()),
    )
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut selection_ok = true;
    for _ in 0..200 {
        let k = rng.gen_range(1..=6);
        let fs: Vec<(Vec<f64>, u8)> = (0..rng.gen_range(1..=8))
            .map(|_| {
                let m = rng.gen_range(1..=15);
                ((0..m).map(|_| rng.gen::<f64>()).collect(), rng.gen_range(0..=1))
            })
            .collect();
        let sel: Vec<_> = fs.iter().map(|(p, y)| select_topk_pseudo_labels(p, *y, k)).collect();
        for ((p, y), s) in fs.iter().zip(&sel) {
            selection_ok &= s.selected.len() == k.min(p.len())
                && select_topk_pseudo_labels(p, 1 - y, k).selected == s.selected;
        }
        let mut g = Graph::new();
        let vars: Vec<_> = fs.iter().map(|(p, _)| g.constant(Tensor::vector(p.clone()).unwrap())).collect();
        let pairs: Vec<_> = vars.into_iter().zip(sel.iter()).collect();
        let loss = mil_loss(&mut g, &pairs).unwrap();
        let got = g.value(loss).item().unwrap();
        worst = worst.max((got - common::oracle_loss(&fs, k)).abs());
    }
    outcome(
        worst <= 1e-12 && selection_ok,
        format!("200 score sets, max |loss - oracle| {worst:.1e}, selection independent of label: {selection_ok}"),
    )
}

fn aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    let mut check = |p: Vec<f64>| {
        let m = p.len();
        let scores = StatementScores {
            statements: (0..m).collect(),
            lines: (0..m).collect(),
            p_max: p.clone(),
            p_mean: p.clone(),
            p,
        };
        let pred = predict_function("f", scores, 0.5);
        if pred.predicted_label != pred.statement_labels.iter().copied().max().unwrap() {
            bad += 1;
        }
        pred.predicted_label
    };
    for _ in 0..1000 {
        let m = rng.gen_range(1..=30);
        check((0..m).map(|_| rng.gen::<f64>().powi(rng.gen_range(1..=4))).collect());
    }
    let all_zero = check(vec![0.1, 0.2, 0.49]);
    outcome(
        bad == 0 && all_zero == 0,
        format!("1000 vectors, {bad} disagreements, all-zero statements give label {all_zero}"),
    )
}

fn run(spec: &SyntheticSpec, cfg: &ExperimentConfig) -> (ExperimentOutput, f64) {
    let data = generate_synthetic(spec).unwrap();
    let start = Instant::now();
    let out = run_experiment(&data, cfg, |_| {}).unwrap();
    (out, start.elapsed().as_secs_f64())
}

fn synthetic_recovery() -> Outcome {
    let (out, secs) = run(&SyntheticSpec::default(), &ExperimentConfig::default());
    let f1 = out.report.function_level.f1;
    let rk = out.report.ranking.clone().unwrap();
    let best = &out.outcome.history[out.outcome.best_epoch - 1];
    let val_f1 = best.val_f1.unwrap_or(0.0);
    outcome(
        f1 >= 0.95 && rk.top1 >= 0.90 && rk.mfr <= 1.5 && val_f1 >= 0.95 && secs <= 300.0,
        format!(
            "test F1 {f1:.3}, Top-1 {:.3}, MFR {:.2}, best epoch {} val F1 {val_f1:.3}, {secs:.0}s",
            rk.top1, rk.mfr, out.outcome.best_epoch
        ),
    )
}

fn k_tradeoff() -> Outcome {
    let spec = SyntheticSpec {
        planted_lines: (1, 1),
        ..Default::default()
    };
    let measure = |k| {
        let mut cfg = ExperimentConfig::default();
        cfg.train.k = k;
        let st = run(&spec, &cfg).0.report.statement_level.unwrap();
        (st.precision, st.recall)
    };
    let (p1, r1) = measure(1);
    let (p5, r5) = measure(5);
    outcome(
        p1 > p5 && r5 >= r1,
        format!("k=1 precision {p1:.3} recall {r1:.3}; k=5 precision {p5:.3} recall {r5:.3}"),
    )
}

fn truncation_filter() -> Outcome {
    let vocab = train_bpe(common::TINY_VOCAB_TEXTS, 300).unwrap();
    let source = (0..12).map(|i| format!("int a{i} = {i};")).collect::<Vec<_>>().join("\n");
    let sample = |id: &str, label, lines: Option<&[usize]>| FunctionSample {
        id: id.into(),
        source: source.clone(),
        label,
        vulnerable_lines: lines.map(|l| l.iter().copied().collect::<BTreeSet<_>>()),
        cwe: None,
        split: Split::Train,
    };
    let samples = vec![
        sample("late", 1, Some(&[11])),
        sample("early_and_late", 1, Some(&[0, 11])),
        sample("clean", 0, None),
        sample("unlabeled", 1, None),
    ];
    let max_len = 16;
    let prepared = prepare(&samples, &vocab, max_len).unwrap();
    let window_cuts_line_11 = prepared.iter().all(|p| !p.tokens.line_survives(11) && p.tokens.line_survives(0));
    let (kept, removed) = filter_truncation_conflicts(prepared);
    let kept_ids: Vec<&str> = kept.iter().map(|p| p.sample.id.as_str()).collect();
    let via_pipeline = prepare_for_training(&samples, &vocab, max_len).unwrap().len();
    outcome(
        window_cuts_line_11 && removed == 1 && kept_ids == ["early_and_late", "clean", "unlabeled"] && via_pipeline == 3,
        format!("removed {removed}, kept {kept_ids:?}"),
    )
}

fn determinism() -> Outcome {
    let spec = SyntheticSpec {
        train: 60,
        valid: 20,
        test: 20,
        ..Default::default()
    };
    let mut cfg = ExperimentConfig::default();
    cfg.train.max_epochs = 3;
    let artifacts = || {
        let (out, _) = run(&spec, &cfg);
        let annotated: String = out
            .test
            .iter()
            .zip(&out.predictions)
            .map(|(s, p)| render_annotated(&s.sample, p, 3))
            .collect();
        (
            out.outcome.model.to_bytes(),
            out.vocab.to_text(),
            score_dump(&out.predictions),
            render_json(&out.report) + &render_table(&out.report) + &annotated,
        )
    };
    let (a, b) = (artifacts(), artifacts());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3];
    outcome(
        same.iter().all(|&s| s),
        format!("checkpoint, vocabulary, score dump, reports identical: {same:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric fidelity", metric_fidelity),
        ("metrics match brute-force oracle", metrics_oracle),
        ("gradients match finite differences", gradients),
        ("MIL loss matches oracle", loss_oracle),
        ("statement-to-function aggregation", aggregation),
        ("synthetic localization recovery", synthetic_recovery),
        ("k trades precision for recall", k_tradeoff),
        ("truncation conflict filtering", truncation_filter),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
