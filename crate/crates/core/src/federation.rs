//! Communication rounds.
//!
//! Rounds `1..=R1` aggregate within domains and send every client its own
//! parameters; rounds `R1+1..=R1+R2` aggregate globally and broadcast one
//! model. Ablation schemes swap either phase for FedAvg.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{
    aggregate_fedavg, aggregate_phase1, aggregate_phase2, AggregationDiagnostics, ClientUpload, GlobalParams,
};
use crate::error::{Error, Result};
use crate::graph::ClientDataset;
use crate::model::{local_train, ModelDims, ModelParams, Optimizer, OptimizerConfig, TokenCounts, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    FedBook,
    FedAvg,
    /// FedAvg in place of within-domain rounds.
    NoPhase1,
    /// FedAvg in place of cross-domain rounds.
    NoPhase2,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::FedBook, Scheme::FedAvg, Scheme::NoPhase1, Scheme::NoPhase2];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::FedBook => "fedbook",
            Scheme::FedAvg => "fedavg",
            Scheme::NoPhase1 => "no-phase1",
            Scheme::NoPhase2 => "no-phase2",
        }
    }

    fn uses_phase1(self) -> bool {
        matches!(self, Scheme::FedBook | Scheme::NoPhase2)
    }

    fn uses_phase2(self) -> bool {
        matches!(self, Scheme::FedBook | Scheme::NoPhase1)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scheme `{s}` (expected fedbook, fedavg, no-phase1 or no-phase2)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub rounds_phase1: usize,
    pub rounds_phase2: usize,
    pub local_epochs: usize,
    pub scheme: Scheme,
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds_phase1: 3,
            rounds_phase2: 3,
            local_epochs: 2,
            scheme: Scheme::FedBook,
            lambda: 0.5,
            optimizer: OptimizerConfig::adam(1e-4),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds_phase2 == 0 {
            return Err(Error::config("at least one cross-domain round is required (R2 ≥ 1)"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("λ must lie in [0, 1], got {}", self.lambda)));
        }
        self.optimizer.validate()?;
        self.train.validate()
    }

    pub fn total_rounds(&self) -> usize {
        self.rounds_phase1 + self.rounds_phase2
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    /// Index of the next round to run, starting at 1.
    pub round: usize,
    pub config: FederationConfig,
    /// Most recent broadcast model, if any round has produced one.
    pub global: Option<ModelParams>,
}

#[derive(Clone, Debug)]
pub struct ClientRuntime {
    pub client_id: usize,
    pub data: ClientDataset,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
    pub counts: TokenCounts,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    /// Mean epoch loss of each client, in client-id order.
    pub client_losses: Vec<(usize, f64)>,
    pub diagnostics: AggregationDiagnostics,
    pub duration: Duration,
}

impl RoundReport {
    pub fn mean_loss(&self) -> f64 {
        self.client_losses.iter().map(|(_, l)| l).sum::<f64>() / self.client_losses.len() as f64
    }
}

/// One shared initialization copied into every client.
pub fn init_federation(
    datasets: Vec<ClientDataset>,
    dims: &ModelDims,
    config: &FederationConfig,
) -> Result<(ServerState, Vec<ClientRuntime>)> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::config("federation needs at least one client"));
    }
    let mut ids: Vec<usize> = datasets.iter().map(|d| d.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("client ids must be unique"));
    }
    let init = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let clients = datasets
        .into_iter()
        .map(|data| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(data.client_id as u64 + 1);
            Ok(ClientRuntime {
                client_id: data.client_id,
                data,
                params: init.clone(),
                optimizer: Optimizer::new(config.optimizer)?,
                rng,
                counts: TokenCounts::zeros(dims.heads, dims.tokens),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let server = ServerState {
        round: 1,
        config: config.clone(),
        global: None,
    };
    Ok((server, clients))
}

fn apply_global(clients: &mut [ClientRuntime], global: &GlobalParams) -> Result<()> {
    for c in clients {
        c.params.set_tokens(global.tokens.clone())?;
        c.params.set_other_params(&global.other)?;
    }
    Ok(())
}

/// Local training on every client, then one aggregation step.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientRuntime]) -> Result<RoundReport> {
    let cfg = server.config.clone();
    let r = server.round;
    if r > cfg.total_rounds() {
        return Err(Error::contract(format!(
            "round {r} is past the last round {}",
            cfg.total_rounds()
        )));
    }
    if clients.is_empty() {
        return Err(Error::contract("no clients to run"));
    }
    let start = Instant::now();

    let results = clients
        .par_iter_mut()
        .map(|c| {
            let out = local_train(&c.data, &mut c.params, cfg.local_epochs, &mut c.optimizer, &cfg.train, &mut c.rng)?;
            c.counts.accumulate(&out.counts)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].client_id);
    let uploads: Vec<ClientUpload> = order
        .iter()
        .map(|&i| {
            let c = &mut clients[i];
            let upload = ClientUpload {
                client_id: c.client_id,
                tokens: c.params.codebook.tokens.clone(),
                frequencies: c.counts.clone(),
                other: c.params.other_params(),
                sample_count: results[i].sample_count,
            };
            c.counts.reset();
            upload
        })
        .collect();
    let client_losses = order
        .iter()
        .map(|&i| {
            let trace = &results[i].loss_trace;
            let mean = if trace.is_empty() { f64::NAN } else { trace.iter().sum::<f64>() / trace.len() as f64 };
            (clients[i].client_id, mean)
        })
        .collect();

    let phase1 = r <= cfg.rounds_phase1;
    let diagnostics = if phase1 && cfg.scheme.uses_phase1() {
        let (personal, diag) = aggregate_phase1(&uploads, cfg.lambda)?;
        for (p, &i) in personal.iter().zip(&order) {
            let c = &mut clients[i];
            c.params.set_tokens(p.tokens.clone())?;
            c.params.set_other_params(&p.other)?;
        }
        diag
    } else if !phase1 && cfg.scheme.uses_phase2() {
        let (global, diag) = aggregate_phase2(&uploads)?;
        apply_global(clients, &global)?;
        server.global = Some(clients[0].params.clone());
        diag
    } else {
        let (global, diag) = aggregate_fedavg(&uploads)?;
        apply_global(clients, &global)?;
        server.global = Some(clients[0].params.clone());
        diag
    };

    server.round += 1;
    let report = RoundReport {
        round: r,
        client_losses,
        diagnostics,
        duration: start.elapsed(),
    };
    log::info!(
        "round {r} ({}) mean loss {:.6} in {:?}",
        report.diagnostics.kind.as_str(),
        report.mean_loss(),
        report.duration
    );
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub global: ModelParams,
    pub reports: Vec<RoundReport>,
    pub clients: Vec<ClientRuntime>,
}

/// All `R1 + R2` rounds from a fresh initialization.
pub fn run_pretraining(datasets: Vec<ClientDataset>, dims: &ModelDims, config: &FederationConfig) -> Result<PretrainOutcome> {
    let (mut server, mut clients) = init_federation(datasets, dims, config)?;
    let reports = (0..config.total_rounds())
        .map(|_| run_round(&mut server, &mut clients))
        .collect::<Result<Vec<_>>>()?;
    let global = server
        .global
        .ok_or_else(|| Error::contract("no global model after the final round"))?;
    Ok(PretrainOutcome {
        global,
        reports,
        clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synth_multidomain, DomainSpec, DomainTag, LabelLevel, SynthConfig};

    fn datasets(k: usize) -> Vec<ClientDataset> {
        let dom = |name: &str, c: Vec<f64>| DomainSpec {
            name: name.into(),
            feature_center: c,
            intra_edge_prob: 0.4,
            inter_edge_prob: 0.05,
            class_count: 2,
            nodes_per_graph: 10,
        };
        let cfg = SynthConfig {
            domains: vec![dom("a", vec![1.0, 0.0, 0.0, 0.0]), dom("b", vec![0.0, 0.0, 1.0, 0.0])],
            graphs_per_domain: k.div_ceil(2),
            label_level: LabelLevel::Node,
            noise_std: 0.2,
            prototype_scale: 1.0,
            multi_label: false,
        };
        synth_multidomain(&cfg, 3)
            .unwrap()
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (g, tag))| ClientDataset {
                client_id: i,
                domain: DomainTag(tag.0),
                graphs: vec![g],
            })
            .collect()
    }

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 4,
            edge_features: false,
            hidden_dim: 4,
            heads: 2,
            tokens: 3,
        }
    }

    fn config(scheme: Scheme, lr: f64) -> FederationConfig {
        FederationConfig {
            rounds_phase1: 2,
            rounds_phase2: 2,
            local_epochs: 2,
            scheme,
            lambda: 0.5,
            optimizer: OptimizerConfig::adam(lr),
            train: TrainConfig::default(),
            seed: 17,
        }
    }

    #[test]
    fn init_copies_one_model() {
        let (server, clients) = init_federation(datasets(3), &dims(), &config(Scheme::FedBook, 1e-3)).unwrap();
        assert_eq!(server.round, 1);
        assert!(clients.windows(2).all(|w| w[0].params == w[1].params));
        let (_, again) = init_federation(datasets(3), &dims(), &config(Scheme::FedBook, 1e-3)).unwrap();
        assert_eq!(clients[0].params, again[0].params);
        assert!(matches!(init_federation(vec![], &dims(), &config(Scheme::FedBook, 1e-3)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_lr_fedavg_keeps_caches() {
        let (mut server, mut clients) = init_federation(datasets(3), &dims(), &config(Scheme::FedAvg, 0.0)).unwrap();
        let before = clients[0].params.clone();
        run_round(&mut server, &mut clients).unwrap();
        for c in &clients {
            assert!(c.params.max_abs_diff(&before) < 1e-15);
        }
    }

    #[test]
    fn single_client_other_params_follow_local_training() {
        let mut cfg = config(Scheme::FedBook, 1e-2);
        cfg.lambda = 1.0;
        let (mut server, mut clients) = init_federation(datasets(1), &dims(), &cfg).unwrap();
        let mut local = clients[0].clone();
        for _ in 0..cfg.total_rounds() {
            run_round(&mut server, &mut clients).unwrap();
            local_train(&local.data, &mut local.params, cfg.local_epochs, &mut local.optimizer, &cfg.train, &mut local.rng).unwrap();
        }
        assert!(clients[0].params.max_abs_diff(&local.params) < 1e-12);
    }

    #[test]
    fn phase2_rounds_synchronize_caches() {
        let out = run_pretraining(datasets(4), &dims(), &config(Scheme::FedBook, 1e-2)).unwrap();
        assert_eq!(out.reports.len(), 4);
        assert!(out.clients.iter().all(|c| c.params == out.global));
        assert!(out.clients.iter().all(|c| c.counts.total() == 0));
    }

    #[test]
    fn phase1_rounds_personalize() {
        let (mut server, mut clients) = init_federation(datasets(4), &dims(), &config(Scheme::FedBook, 1e-2)).unwrap();
        run_round(&mut server, &mut clients).unwrap();
        assert_ne!(clients[0].params, clients[1].params);
    }

    #[test]
    fn deterministic_and_order_independent() {
        let cfg = config(Scheme::FedBook, 1e-2);
        let a = run_pretraining(datasets(4), &dims(), &cfg).unwrap();
        let b = run_pretraining(datasets(4), &dims(), &cfg).unwrap();
        assert_eq!(a.global, b.global);
        let mut reversed = datasets(4);
        reversed.reverse();
        let c = run_pretraining(reversed, &dims(), &cfg).unwrap();
        assert_eq!(a.global, c.global);
    }

    #[test]
    fn counters_cover_one_round() {
        let (mut server, mut clients) = init_federation(datasets(2), &dims(), &config(Scheme::FedBook, 1e-2)).unwrap();
        let report = run_round(&mut server, &mut clients).unwrap();
        assert_eq!(report.diagnostics.kind, crate::aggregation::AggregationKind::Phase1);
        assert!(clients.iter().all(|c| c.counts.total() == 0));
    }

    #[test]
    fn bounds_are_enforced() {
        let mut cfg = config(Scheme::FedBook, 1e-2);
        cfg.rounds_phase2 = 0;
        assert!(matches!(run_pretraining(datasets(2), &dims(), &cfg), Err(Error::Config(_))));
        let cfg = config(Scheme::FedAvg, 1e-2);
        let (mut server, mut clients) = init_federation(datasets(2), &dims(), &cfg).unwrap();
        for _ in 0..4 {
            run_round(&mut server, &mut clients).unwrap();
        }
        assert!(matches!(run_round(&mut server, &mut clients), Err(Error::Contract(_))));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("fedprox".parse::<Scheme>().is_err());
    }
}
