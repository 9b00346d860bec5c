// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
// failure. The benchmark section trains every ablation variant on all folds
// and seeds and dominates the runtime.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use mce_core::ablation::{
    core_variants, mean_miou, run_ablations, summarize, to_csv, AblationPlan,
};
use mce_core::data::generate_dataset;
use mce_core::episode::split_folds;
use mce_core::harness::{evaluate, Predictor};
use mce_core::suite::{gradient_suite, TOLERANCE};
use mce_core::RunConfig;

const BENCHMARK: &str = include_str!("../../../configs/benchmark.toml");

const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const BENCHMARK_BUDGET: Duration = Duration::from_secs(2 * 3600);
const ORACLE_TOLERANCE: f64 = 1e-10;

struct Outcome {
    lines: Vec<(bool, String)>,
}

impl Outcome {
    fn record(&mut self, pass: bool, line: String) {
        println!("[{}] {line}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, line));
    }
}

fn gradients(out: &mut Outcome) {
    let start = Instant::now();
    let checks = gradient_suite(10, 0);
    let elapsed = start.elapsed();
    match checks {
        Ok(checks) => {
            let worst = checks
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .expect("non-empty suite");
            let failing: Vec<&str> = checks
                .iter()
                .filter(|c| !(c.max_rel_error <= TOLERANCE))
                .map(|c| c.op)
                .collect();
            let pass = failing.is_empty()
                && checks.iter().all(|c| c.instances >= 10)
                && elapsed <= GRADIENT_BUDGET;
            out.record(
                pass,
                format!(
                    "1 gradient suite: {} entries x 10 instances, worst {} at {:.2e}, \
                     failing {failing:?}, {:.1} s",
                    checks.len(),
                    worst.op,
                    worst.max_rel_error,
                    elapsed.as_secs_f64()
                ),
            );
        }
        Err(e) => out.record(false, format!("1 gradient suite: error {e}")),
    }
}

fn masking(out: &mut Outcome) {
    let m = masking_exactness(1, 1000);
    let pass = m.instances == 1000
        && m.nonzero_masked_weights == 0
        && m.max_masked_weight == 0.0
        && m.rq_changes == 0;
    out.record(
        pass,
        format!(
            "2 masking exactness: {} instances, max masked weight {:e}, \
             {} non-zero masked weights, {} R_Q changes",
            m.instances, m.max_masked_weight, m.nonzero_masked_weights, m.rq_changes
        ),
    );
}

fn oracles(out: &mut Outcome) {
    let n = 100;
    let errors = [
        ("matmul", matmul_error(2, n)),
        ("conv2d", conv2d_error(3, n)),
        ("layer_norm", layer_norm_error(4, n)),
        ("bilinear_resize", bilinear_error(5, n)),
        ("masked_average_pool", map_error(6, n)),
        ("similarity_matrix", similarity_error(7, n)),
        ("metrics", metrics_error(8, n)),
    ];
    let pass = errors.iter().all(|(_, e)| *e <= ORACLE_TOLERANCE);
    let detail: Vec<String> = errors.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    out.record(
        pass,
        format!("3 loop oracles ({n} instances each): {}", detail.join(", ")),
    );
}

fn straight_line(out: &mut Outcome) {
    let err = straight_line_error(9, 100);
    out.record(
        err <= ORACLE_TOLERANCE,
        format!("4 straight-line encoder oracle, 4 tokens, 100 instances: max error {err:.1e}"),
    );
}

fn benchmark(out: &mut Outcome) {
    let cfg = match RunConfig::from_toml_str(BENCHMARK) {
        Ok(c) => c,
        Err(e) => {
            for c in 5..=7 {
                out.record(false, format!("{c} benchmark config: {e}"));
            }
            return;
        }
    };
    let plan = AblationPlan {
        variants: core_variants(),
        folds: (0..cfg.protocol.n_folds).collect(),
        seeds: cfg.protocol.seeds.clone(),
        extra_shots: BTreeMap::from([("fusion".to_string(), vec![5])]),
    };
    let start = Instant::now();
    let runs = run_ablations(&cfg, &plan, |r| {
        eprintln!(
            "  {:>13} fold {} seed {} {}-shot: mIoU {:.4}  ({:.0} s)",
            r.variant,
            r.fold,
            r.seed,
            r.shots,
            r.miou,
            start.elapsed().as_secs_f64()
        );
    });
    let elapsed = start.elapsed();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => {
            for c in 5..=7 {
                out.record(false, format!("{c} benchmark: error {e}"));
            }
            return;
        }
    };
    let summary = summarize(&runs);
    println!("{}", to_csv(&[], &summary).trim_end());
    let m = |v: &str, k: usize| mean_miou(&summary, v, k).unwrap_or(f64::NAN);
    let full = m("fusion", 1);

    let gain = full - m("baseline", 1);
    let removals: Vec<(&str, f64)> = ["no_cross_map", "no_similarity", "single_level"]
        .into_iter()
        .map(|v| (v, m(v, 1) - full))
        .collect();
    let pass =
        gain >= 0.03 && removals.iter().all(|(_, d)| *d <= 0.01) && elapsed <= BENCHMARK_BUDGET;
    let detail: Vec<String> = removals
        .iter()
        .map(|(v, d)| format!("{v} {:+.2}", 100.0 * d))
        .collect();
    out.record(
        pass,
        format!(
            "5 benchmark ({} folds x {} seeds, 1-shot): full {:.2} vs baseline {:.2} \
             ({:+.2} points); removals {}; {:.1} min",
            plan.folds.len(),
            plan.seeds.len(),
            100.0 * full,
            100.0 * m("baseline", 1),
            100.0 * gain,
            detail.join(", "),
            elapsed.as_secs_f64() / 60.0
        ),
    );

    let (q, s) = (m("query_only", 1), m("support_only", 1));
    out.record(
        full >= q && q >= s,
        format!(
            "6 encoder outputs: fusion {:.2} >= query-only {:.2} >= support-only {:.2}",
            100.0 * full,
            100.0 * q,
            100.0 * s
        ),
    );

    let five = m("fusion", 5);
    out.record(
        five >= full,
        format!(
            "7 shots: 5-shot {:.2} >= 1-shot {:.2}",
            100.0 * five,
            100.0 * full
        ),
    );
}

fn protocol(out: &mut Outcome) {
    let cfg = RunConfig::from_toml_str(BENCHMARK).expect("benchmark config");
    let data = generate_dataset(&cfg.dataset, cfg.protocol.n_classes, 0).expect("dataset");
    let leaks = leak_violations(&data, cfg.protocol.n_folds, 5000, 0);
    let reordered = order_sensitivity(10, 100);

    let small = small_run_config(10);
    let report = || {
        let (data, model) = trained_model(&small, 3);
        let split = &split_folds(8, 4).expect("folds")[0];
        evaluate(Predictor::Model(&model), &data, None, split, 1, 60, 3, 0).expect("evaluate")
    };
    let (a, b) = (report(), report());
    let identical = a == b && a.miou.to_bits() == b.miou.to_bits();
    out.record(
        leaks == 0 && reordered == 0 && identical,
        format!(
            "8 protocol: {leaks} leaking samples or episodes, {reordered}/100 shuffles changed \
             the report, repeated train+eval bit-identical: {identical}"
        ),
    );
}

fn checkpoint(out: &mut Outcome) {
    let dir = tempfile::tempdir().expect("temp dir");
    let c = checkpoint_round_trip(dir.path(), 11);
    out.record(
        c.bit_identical && c.checksum_rejected && c.truncation_rejected && c.version_rejected,
        format!(
            "9 checkpoint: round trip bit-identical {}, flipped byte -> checksum error {}, \
             truncation error {}, version error {}",
            c.bit_identical, c.checksum_rejected, c.truncation_rejected, c.version_rejected
        ),
    );
}

fn main() -> ExitCode {
    let mut out = Outcome { lines: Vec::new() };
    gradients(&mut out);
    masking(&mut out);
    oracles(&mut out);
    straight_line(&mut out);
    benchmark(&mut out);
    protocol(&mut out);
    checkpoint(&mut out);
    let failed = out.lines.iter().filter(|(p, _)| !p).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        out.lines.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
