//! Subcommand bodies. Each takes a validated [`RunConfig`] and reads or
//! writes files under `run.out_dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedbook_core::aggregation::DIAGNOSTICS_HEADER;
use fedbook_core::federation::{run_pretraining, PretrainOutcome, RoundReport};
use fedbook_core::finetune::{self, collect_instances, evaluate, make_split, FinetuneResult, Heads, METRICS_HEADER};
use fedbook_core::graph::{decentralize, load_dataset, save_dataset, synth_multidomain};
use fedbook_core::model::{load_checkpoint, save_checkpoint, Checkpoint, TensorArchive};
use fedbook_core::verify::{self, Implementations, VerifyConfig, VerifyReport};
use fedbook_core::ClientDataset;
use serde::Serialize;

use crate::config::{RunConfig, SeedSection};
use crate::error::CliError;

pub const DATA_DIR: &str = "data";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.toml";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const AGGREGATION_FILE: &str = "aggregation.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HEADS_FILE: &str = "heads.bin";
pub const FINETUNE_FILE: &str = "finetune.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(fedbook_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Synthetic domains split into `clients_per_domain` clients each.
pub fn generate_clients(cfg: &RunConfig) -> Result<Vec<ClientDataset>, CliError> {
    let graphs = synth_multidomain(&cfg.synth_config()?, cfg.seeds.data)?;
    Ok(decentralize(graphs, cfg.data.clients_per_domain, cfg.seeds.data)?)
}

/// Client datasets named by the config: generated or read from disk.
pub fn load_clients(cfg: &RunConfig) -> Result<Vec<ClientDataset>, CliError> {
    match &cfg.data.dir {
        Some(dir) if cfg.data.source == "files" => Ok(load_dataset(dir)?),
        _ => generate_clients(cfg),
    }
}

/// Writes generated client datasets to `<out>/data`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let clients = generate_clients(cfg)?;
    let dir = cfg.run.out_dir.join(DATA_DIR);
    save_dataset(&dir, &clients)?;
    log::info!("wrote {} client datasets to {}", clients.len(), dir.display());
    Ok(dir)
}

/// Re-splits the dataset in `data.dir` so every domain is shared by
/// `clients_per_domain` clients, writing the result to `<out>/data`.
pub fn cmd_partition(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let src = cfg
        .data
        .dir
        .as_ref()
        .filter(|_| cfg.data.source == "files")
        .ok_or_else(|| CliError::Config("partition reads data.dir; set data.source = \"files\"".into()))?;
    let dir = cfg.run.out_dir.join(DATA_DIR);
    if dir == *src {
        return Err(CliError::Config("partition output would overwrite its input".into()));
    }
    let graphs = load_dataset(src)?
        .into_iter()
        .flat_map(|c| {
            let tag = c.domain;
            c.graphs.into_iter().map(move |g| (g, tag.clone()))
        })
        .collect();
    let clients = decentralize(graphs, cfg.data.clients_per_domain, cfg.seeds.data)?;
    save_dataset(&dir, &clients)?;
    log::info!("partitioned into {} clients at {}", clients.len(), dir.display());
    Ok(dir)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    run_id: &'a str,
    scheme: &'a str,
    clients: usize,
    feature_dim: usize,
    edge_features: bool,
    seeds: &'a SeedSection,
    config: &'a RunConfig,
}

/// Header plus one row per round: aggregation kind, mean loss over
/// clients, then each client's mean epoch loss.
pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,aggregation,mean_loss");
    if let Some(first) = reports.first() {
        for (id, _) in &first.client_losses {
            let _ = write!(out, ",loss_client{id}");
        }
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{},{},{}", r.round, r.diagnostics.kind.as_str(), r.mean_loss());
        for (_, l) in &r.client_losses {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
    }
    out
}

/// Federated pre-training; writes the run manifest, round log, aggregation
/// diagnostics and final checkpoint.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome, CliError> {
    let clients = load_clients(cfg)?;
    let first = clients
        .first()
        .and_then(|c| c.graphs.first())
        .ok_or_else(|| CliError::runtime("dataset has no graphs"))?;
    let dims = cfg.model_dims(first.feature_dim(), first.edge_features.is_some());
    let fed = cfg.federation_config()?;
    let out = &cfg.run.out_dir;

    let manifest = RunManifest {
        run_id: &cfg.run.run_id,
        scheme: fed.scheme.as_str(),
        clients: clients.len(),
        feature_dim: dims.feature_dim,
        edge_features: dims.edge_features,
        seeds: &cfg.seeds,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
    write_file(&out.join(RUN_MANIFEST_FILE), &text)?;

    let outcome = run_pretraining(clients, &dims, &fed)?;

    write_file(&out.join(ROUNDS_FILE), &rounds_csv(&outcome.reports))?;
    let mut diag = format!("{DIAGNOSTICS_HEADER}\n");
    for r in &outcome.reports {
        diag.push_str(&r.diagnostics.csv_rows(r.round));
    }
    write_file(&out.join(AGGREGATION_FILE), &diag)?;

    let checkpoint = Checkpoint {
        params: outcome.global.clone(),
        counts: None,
        meta: vec![
            ("run_id".into(), cfg.run.run_id.clone()),
            ("scheme".into(), fed.scheme.as_str().into()),
            ("seed".into(), cfg.seeds.federation.to_string()),
            ("rounds".into(), fed.total_rounds().to_string()),
            ("lambda".into(), fed.lambda.to_string()),
        ],
    };
    save_checkpoint(&out.join(CHECKPOINT_FILE), &checkpoint)?;
    Ok(outcome)
}

fn load_backbone(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "no checkpoint at {}; run pretrain first or set finetune.checkpoint",
            path.display()
        )));
    }
    Ok(load_checkpoint(&path)?)
}

/// Fine-tuned heads of one client.
#[derive(Clone, Debug)]
pub struct ClientHeads {
    pub client_id: usize,
    /// Learning rate picked from the grid.
    pub lr: f64,
    pub result: FinetuneResult,
}

fn final_val(r: &FinetuneResult) -> f64 {
    r.val_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// Fits heads on every client's training split, keeping the grid learning
/// rate with the best final validation score; writes the heads archive and
/// the per-epoch training loss and validation score of the kept run.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<Vec<ClientHeads>, CliError> {
    let backbone = load_backbone(cfg)?.params;
    let task = cfg.task()?;
    let mut archive = TensorArchive::default();
    let mut log = String::from("client_id,lr,epoch,train_loss,val_score\n");
    let mut out = Vec::new();
    for client in load_clients(cfg)? {
        let level = client.label_level();
        if level != Some(task.level) {
            return Err(CliError::Config(format!(
                "client {} has {} labels but finetune.level is {}",
                client.client_id,
                level.map_or("no".to_string(), |l| l.to_string()),
                task.level
            )));
        }
        let all = collect_instances(&client, &backbone)?.compact_classes();
        let split_seed = cfg.finetune_config(client.client_id, 0.0).seed;
        let split = make_split(&all.targets, &task.split, split_seed)?;
        let train = all.subset(&split.train)?;
        let val = all.subset(&split.val)?;
        let mut best: Option<(f64, FinetuneResult)> = None;
        for &lr in &cfg.finetune.lr_grid {
            let ft = cfg.finetune_config(client.client_id, lr);
            let result = finetune::finetune(&train, Some(&val), all.targets.width(), task.metric, &ft)?;
            if best.as_ref().is_none_or(|(_, b)| final_val(&result) > final_val(b)) {
                best = Some((lr, result));
            }
        }
        let (lr, result) = best.expect("lr grid is non-empty");
        result
            .heads
            .write_archive(&format!("client{}", client.client_id), &mut archive);
        for (e, loss) in result.train_loss.iter().enumerate() {
            let v = result.val_trace.get(e).map_or(String::new(), |v| v.to_string());
            let _ = writeln!(log, "{},{lr},{},{loss},{v}", client.client_id, e + 1);
        }
        out.push(ClientHeads {
            client_id: client.client_id,
            lr,
            result,
        });
    }
    archive.meta.push(("run_id".into(), cfg.run.run_id.clone()));
    let dir = &cfg.run.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    archive.save(&dir.join(HEADS_FILE))?;
    write_file(&dir.join(FINETUNE_FILE), &log)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub client_id: usize,
    pub level: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Scores saved heads on every client's test split and writes the metrics
/// CSV.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<MetricRow>, CliError> {
    let backbone = load_backbone(cfg)?.params;
    let task = cfg.task()?;
    let heads_path = cfg.run.out_dir.join(HEADS_FILE);
    if !heads_path.is_file() {
        return Err(CliError::Config(format!("no heads at {}; run finetune first", heads_path.display())));
    }
    let archive = TensorArchive::load(&heads_path)?;
    let mut rows = Vec::new();
    for client in load_clients(cfg)? {
        let seed = cfg.finetune_config(client.client_id, 0.0).seed;
        let heads = Heads::read_archive(&format!("client{}", client.client_id), &archive)?;
        let all = collect_instances(&client, &backbone)?.compact_classes();
        let split = make_split(&all.targets, &task.split, seed)?;
        if split.test.is_empty() {
            return Err(CliError::runtime(format!("client {} has no test instances", client.client_id)));
        }
        let test = all.subset(&split.test)?;
        let value = evaluate(&heads.predict(&test.embeddings)?, &test.targets, task.metric)?;
        rows.push(MetricRow {
            client_id: client.client_id,
            level: task.level.to_string(),
            metric: task.metric.to_string(),
            value,
            seed,
        });
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{},{}", cfg.run.run_id, r.client_id, r.level, r.metric, r.value, r.seed);
    }
    write_file(&cfg.run.out_dir.join(METRICS_FILE), &csv)?;
    Ok(rows)
}

/// Runs the oracle suite; an `Err` only for harness failures, a failing
/// check is reported through [`VerifyReport::all_passed`].
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport, CliError> {
    let vc = VerifyConfig {
        seed: cfg.seeds.federation,
        ..VerifyConfig::default()
    };
    Ok(verify::run(&vc, &Implementations::default())?)
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .map(|h| h.split(',').map(str::to_string).collect())
        .unwrap_or_default();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::runtime(format!("CSV has no `{name}` column")))
}

/// Plain-text summary of a run directory: loss per round and test metrics.
pub fn cmd_report(cfg: &RunConfig) -> Result<String, CliError> {
    let dir = &cfg.run.out_dir;
    let rounds_path = dir.join(ROUNDS_FILE);
    if !rounds_path.is_file() {
        return Err(CliError::Config(format!("no round log at {}; run pretrain first", rounds_path.display())));
    }
    let mut out = format!("run {} ({})\n\nround  aggregation  mean_loss\n", cfg.run.run_id, dir.display());
    let (header, rows) = parse_csv(&read_file(&rounds_path)?);
    let (ri, ai, li) = (column(&header, "round")?, column(&header, "aggregation")?, column(&header, "mean_loss")?);
    for r in &rows {
        let _ = writeln!(out, "{:>5}  {:<11}  {}", r[ri], r[ai], r[li]);
    }
    let metrics_path = dir.join(METRICS_FILE);
    if metrics_path.is_file() {
        let (header, rows) = parse_csv(&read_file(&metrics_path)?);
        let (ci, mi, vi) = (column(&header, "client_id")?, column(&header, "metric")?, column(&header, "value")?);
        out.push_str("\nclient  metric    value\n");
        let mut values = Vec::new();
        for r in &rows {
            let _ = writeln!(out, "{:>6}  {:<8}  {}", r[ci], r[mi], r[vi]);
            values.push(r[vi].parse::<f64>().map_err(|_| CliError::runtime(format!("bad metric value `{}`", r[vi])))?);
        }
        if !values.is_empty() {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let _ = writeln!(out, "mean    {:<8}  {mean:.4}", rows[0][mi]);
        }
    } else {
        out.push_str("\nno metrics yet (run finetune and eval)\n");
    }
    write_file(&dir.join(REPORT_FILE), &out)?;
    Ok(out)
}
