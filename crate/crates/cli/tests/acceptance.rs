//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedbook_cli::commands::{cmd_eval, cmd_finetune, cmd_pretrain, cmd_synth, CHECKPOINT_FILE, METRICS_FILE};
use fedbook_cli::config::RunConfig;
use fedbook_core::federation::RoundReport;
use fedbook_core::verify::{self, CheckResult, Implementations};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

const SCHEMES: [&str; 4] = ["fedbook", "fedavg", "no-phase1", "no-phase2"];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SMOOTHING_WINDOW: usize = 3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: &[CheckResult]) -> Outcome {
    Outcome {
        passed: checks.iter().all(CheckResult::passed),
        detail: checks.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; "),
    }
}

fn within(outcome: Outcome, elapsed: Duration, limit: Duration) -> Outcome {
    Outcome {
        passed: outcome.passed && elapsed < limit,
        detail: format!("{} [{:.1}s of {}s]", outcome.detail, elapsed.as_secs_f64(), limit.as_secs()),
    }
}

fn failure(e: impl std::fmt::Display) -> Outcome {
    Outcome {
        passed: false,
        detail: format!("error: {e}"),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let out = match verify::check_loss_gradients(&mut ChaCha8Rng::seed_from_u64(1)) {
        Ok(c) => from_checks(&[c]),
        Err(e) => failure(e),
    };
    within(out, start.elapsed(), Duration::from_secs(10))
}

fn quantization() -> Outcome {
    match verify::check_quantization(&Implementations::default(), 1000, &mut ChaCha8Rng::seed_from_u64(2)) {
        Ok(c) => from_checks(&[c]),
        Err(e) => failure(e),
    }
}

fn aggregation_oracles() -> Outcome {
    match verify::check_aggregation_oracles(&Implementations::default(), 200, &mut ChaCha8Rng::seed_from_u64(3)) {
        Ok(c) => from_checks(&c),
        Err(e) => failure(e),
    }
}

fn invariant(name: &str, checks: &Result<Vec<CheckResult>, String>) -> Outcome {
    match checks {
        Ok(c) => match c.iter().find(|c| c.name == name) {
            Some(c) => from_checks(std::slice::from_ref(c)),
            None => failure(format!("no `{name}` check")),
        },
        Err(e) => failure(e),
    }
}

fn metrics() -> Outcome {
    match verify::check_metrics(&Implementations::default(), 100, &mut ChaCha8Rng::seed_from_u64(5)) {
        Ok(c) => from_checks(&c),
        Err(e) => failure(e),
    }
}

/// Six clients over two synthetic domains, 60 nodes each, node
/// classification with accuracy.
fn benchmark_config(out: &Path, scheme: &str, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.run_id = format!("{scheme}-{seed}");
    cfg.run.out_dir = out.to_path_buf();
    cfg.seeds.data = seed;
    cfg.seeds.federation = seed;
    cfg.seeds.finetune = seed;
    cfg.data.clients_per_domain = 3;
    cfg.data.synth.domains = 2;
    cfg.data.synth.class_count = 2;
    cfg.data.synth.nodes_per_graph = 180;
    cfg.data.synth.graphs_per_domain = 1;
    cfg.federation.rounds_phase1 = 3;
    cfg.federation.rounds_phase2 = 3;
    cfg.federation.local_epochs = 2;
    cfg.federation.scheme = scheme.into();
    cfg
}

struct RunResult {
    reports: Vec<RoundReport>,
    mean_accuracy: f64,
}

fn full_run(cfg: &RunConfig) -> Result<RunResult, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let outcome = cmd_pretrain(cfg).map_err(|e| e.to_string())?;
    cmd_finetune(cfg).map_err(|e| e.to_string())?;
    let rows = cmd_eval(cfg).map_err(|e| e.to_string())?;
    let mean_accuracy = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
    Ok(RunResult {
        reports: outcome.reports,
        mean_accuracy,
    })
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let run = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>), String> {
        let mut cfg = benchmark_config(dir, "fedbook", 7);
        cfg.run.run_id = "determinism".into();
        let data = cmd_synth(&cfg).map_err(|e| e.to_string())?;
        cfg.data.source = "files".into();
        cfg.data.dir = Some(data);
        full_run(&cfg)?;
        let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| e.to_string());
        Ok((read(CHECKPOINT_FILE)?, read(METRICS_FILE)?))
    };
    let (Ok(a), Ok(b)) = (tempfile::tempdir(), tempfile::tempdir()) else {
        return failure("cannot create temporary directories");
    };
    let out = match (run(a.path()), run(b.path())) {
        (Ok(x), Ok(y)) => Outcome {
            passed: x == y,
            detail: format!(
                "checkpoint identical={} metrics identical={} ({} checkpoint bytes)",
                x.0 == y.0,
                x.1 == y.1,
                x.0.len()
            ),
        },
        (Err(e), _) | (_, Err(e)) => failure(e),
    };
    within(out, start.elapsed(), Duration::from_secs(300))
}

/// Trailing mean over the last `SMOOTHING_WINDOW` rounds.
fn smoothed_final(reports: &[RoundReport]) -> f64 {
    let tail = &reports[reports.len().saturating_sub(SMOOTHING_WINDOW)..];
    tail.iter().map(RoundReport::mean_loss).sum::<f64>() / tail.len() as f64
}

fn directional() -> Outcome {
    let start = Instant::now();
    let mut accuracy = [0.0f64; 4];
    let mut not_decreasing = Vec::new();
    for (s, scheme) in SCHEMES.iter().enumerate() {
        for &seed in &SEEDS {
            let Ok(dir) = tempfile::tempdir() else {
                return failure("cannot create temporary directory");
            };
            let run = match full_run(&benchmark_config(dir.path(), scheme, seed)) {
                Ok(r) => r,
                Err(e) => return failure(format!("{scheme} seed {seed}: {e}")),
            };
            if smoothed_final(&run.reports) >= run.reports[0].mean_loss() {
                not_decreasing.push(format!("{scheme}/{seed}"));
            }
            accuracy[s] += run.mean_accuracy / SEEDS.len() as f64;
        }
    }
    let ordering = accuracy.iter().all(|&a| accuracy[0] >= a);
    let summary = SCHEMES
        .iter()
        .zip(accuracy)
        .map(|(s, a)| format!("{s}={a:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    let out = Outcome {
        passed: not_decreasing.is_empty() && ordering,
        detail: format!(
            "loss decreased in every run={} {}; fedbook highest={} mean accuracy {}",
            not_decreasing.is_empty(),
            if not_decreasing.is_empty() { String::new() } else { format!("(not: {})", not_decreasing.join(",")) },
            ordering,
            summary
        ),
    };
    within(out, start.elapsed(), Duration::from_secs(600))
}

fn main() -> ExitCode {
    let invariants = verify::check_invariants(&Implementations::default(), 200, &mut ChaCha8Rng::seed_from_u64(4))
        .map_err(|e| e.to_string());
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("quantization oracle", Box::new(quantization)),
        ("aggregation oracle equivalence", Box::new(aggregation_oracles)),
        ("λ=1 no-op", Box::new(|| invariant(verify::LAMBDA_ONE, &invariants))),
        ("identical-upload fixpoint", Box::new(|| invariant(verify::FIXPOINT, &invariants))),
        ("permutation equivariance", Box::new(|| invariant(verify::PERMUTATION, &invariants))),
        ("frequency-pattern sufficiency", Box::new(|| invariant(verify::FREQUENCY_SCALING, &invariants))),
        ("FedAvg consistency", Box::new(|| invariant(verify::FEDAVG, &invariants))),
        ("end-to-end determinism", Box::new(determinism)),
        ("directional convergence", Box::new(directional)),
        ("evaluation-metric oracles", Box::new(metrics)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let out = check();
        if !out.passed {
            failed += 1;
        }
        println!("{} {:>2} {name}: {}", if out.passed { "PASS" } else { "FAIL" }, i + 1, out.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
