//! Oracle suite: naive reference implementations, finite-difference
//! gradient checks and an invariant battery, reported one line per check.
//!
//! The functions under test are passed in through [`Implementations`] so a
//! broken variant can be swapped in and shown to fail.

pub mod reference;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, ClientUpload, GlobalParams};
use crate::error::Result;
use crate::finetune::{self, PrototypeHead};
use crate::gradcheck::{check_gradients, DEFAULT_EPS};
use crate::graph::{Labels, TextAttributedGraph};
use crate::model::{self, build_pretrain_loss, GraphTensors, ModelDims, ModelParams, ParamSet, TokenCounts};
use crate::tensor::Tensor;

type MaskFn = fn(&Tensor, &[u64], &[u64]) -> Result<Vec<Vec<Option<f64>>>>;
type PersonalizeFn = fn(&[ClientUpload], &[Vec<f64>]) -> Result<Vec<ParamSet>>;

/// Signatures of every routine the suite checks.
#[derive(Clone, Copy)]
pub struct Implementations {
    pub nearest_tokens: fn(&Tensor, &Tensor) -> Result<Vec<Vec<usize>>>,
    pub loss_feat: fn(&Tensor, &Tensor, f64) -> Result<f64>,
    pub loss_topo: fn(&Tensor, &Tensor) -> Result<f64>,
    pub prototype_probabilities: fn(&Tensor, &[f64]) -> Vec<f64>,
    pub token_similarity: fn(&Tensor, &Tensor, usize) -> Result<Tensor>,
    pub alignment_mask: MaskFn,
    pub phase1_codebooks: fn(&[ClientUpload], f64) -> Result<Vec<Tensor>>,
    pub similarity_matrix: fn(&[ClientUpload]) -> Result<Vec<Vec<f64>>>,
    pub personalized_other: PersonalizeFn,
    pub distinctiveness: fn(&[Vec<f64>]) -> Result<Vec<f64>>,
    pub phase2_global: fn(&[ClientUpload], &[f64]) -> Result<GlobalParams>,
    pub fedavg: fn(&[ClientUpload]) -> Result<GlobalParams>,
    pub accuracy: fn(&Tensor, &[usize]) -> Result<f64>,
    pub auc_roc: fn(&Tensor, &[Vec<bool>]) -> Result<f64>,
}

fn prototype_probabilities(prototypes: &Tensor, z: &[f64]) -> Vec<f64> {
    PrototypeHead {
        prototypes: prototypes.clone(),
    }
    .probabilities(z)
}

impl Default for Implementations {
    fn default() -> Self {
        Self {
            nearest_tokens: model::nearest_tokens,
            loss_feat: model::loss_feat,
            loss_topo: model::loss_topo,
            prototype_probabilities,
            token_similarity: aggregation::token_similarity,
            alignment_mask: aggregation::alignment_mask,
            phase1_codebooks: aggregation::update_codebooks_phase1,
            similarity_matrix: aggregation::client_similarity_matrix,
            personalized_other: aggregation::personalized_other_params,
            distinctiveness: aggregation::domain_distinctiveness,
            phase2_global: aggregation::global_aggregate_phase2,
            fedavg: aggregation::fedavg_aggregate,
            accuracy: finetune::accuracy,
            auc_roc: finetune::auc_roc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random (z, codebook) pairs for the quantization oracle.
    pub quantization_trials: usize,
    /// Random upload sets for the aggregation oracles and invariants.
    pub aggregation_trials: usize,
    /// Random label/score sets for the metric oracles.
    pub metric_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            quantization_trials: 1000,
            aggregation_trials: 200,
            metric_trials: 100,
        }
    }
}

/// One line of the report. `measured` is a max error (or mismatch count)
/// and passes when it does not exceed `tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.measured <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} measured={:.3e} tolerance={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

pub const QUANTIZATION: &str = "nearest-token quantization";
pub const LOSS_GRADIENTS: &str = "pre-training loss gradients";
pub const RECONSTRUCTION: &str = "feature and topology reconstruction";
pub const PROTOTYPE: &str = "prototype classifier probabilities";
pub const TOKEN_SIMILARITY: &str = "token cosine similarity";
pub const ALIGNMENT_MASK: &str = "frequency alignment mask";
pub const PHASE1_CODEBOOK: &str = "within-domain codebook update";
pub const CLIENT_SIMILARITY: &str = "client similarity";
pub const PERSONALIZED: &str = "personalized parameter averaging";
pub const DISTINCTIVENESS: &str = "domain distinctiveness";
pub const PHASE2_GLOBAL: &str = "distinctiveness-weighted global average";

/// The per-formula checks, in model order.
pub const FORMULA_CHECKS: [&str; 11] = [
    QUANTIZATION,
    LOSS_GRADIENTS,
    RECONSTRUCTION,
    PROTOTYPE,
    TOKEN_SIMILARITY,
    ALIGNMENT_MASK,
    PHASE1_CODEBOOK,
    CLIENT_SIMILARITY,
    PERSONALIZED,
    DISTINCTIVENESS,
    PHASE2_GLOBAL,
];

pub const LAMBDA_ONE: &str = "λ=1 keeps codebooks bit-identical";
pub const FIXPOINT: &str = "identical uploads are a fixpoint";
pub const PERMUTATION: &str = "client order equivariance";
pub const FREQUENCY_SCALING: &str = "frequency scaling invariance";
pub const FEDAVG: &str = "FedAvg equals uniform averaging";
pub const ACCURACY: &str = "accuracy against pair counting";
pub const AUC: &str = "AUC-ROC against pair counting";

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const INVARIANT_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Runs the whole suite.
pub fn run(config: &VerifyConfig, imp: &Implementations) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut checks = vec![
        check_quantization(imp, config.quantization_trials, &mut rng)?,
        check_loss_gradients(&mut rng)?,
        check_reconstruction(imp, &mut rng)?,
        check_prototypes(imp, &mut rng),
    ];
    checks.extend(check_aggregation_oracles(imp, config.aggregation_trials, &mut rng)?);
    checks.extend(check_invariants(imp, config.aggregation_trials, &mut rng)?);
    checks.extend(check_metrics(imp, config.metric_trials, &mut rng)?);
    Ok(VerifyReport { checks })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
}

/// Values on a coarse grid so exact distance ties are common.
fn grid_or_normal<R: Rng>(rng: &mut R, grid: bool) -> f64 {
    if grid {
        rng.random_range(-1i32..=1) as f64
    } else {
        crate::tensor::standard_normal(rng)
    }
}

/// Random codebook-and-embedding pairs against a brute-force scan.
/// Measured value: number of mismatching selections.
pub fn check_quantization<R: Rng>(imp: &Implementations, trials: usize, rng: &mut R) -> Result<CheckResult> {
    let mut mismatches = 0usize;
    for _ in 0..trials {
        let n = rng.random_range(1..=20);
        let n_tok = rng.random_range(1..=16);
        let heads = rng.random_range(1..=3);
        let d = rng.random_range(1..=6);
        let grid = rng.random_bool(0.5);
        let tok: Vec<f64> = (0..heads * n_tok * d).map(|_| grid_or_normal(rng, grid)).collect();
        let zs: Vec<f64> = (0..n * d).map(|_| grid_or_normal(rng, grid)).collect();
        let tokens = Tensor::new(vec![heads, n_tok, d], tok)?;
        let z = Tensor::matrix(n, d, zs)?;
        let book: reference::Codebook = (0..heads)
            .map(|h| (0..n_tok).map(|j| model::token_row(&tokens, h, j).to_vec()).collect())
            .collect();
        let expect = reference::nearest_tokens(&nested(&z), &book);
        let got = (imp.nearest_tokens)(&z, &tokens)?;
        mismatches += expect
            .iter()
            .zip(&got)
            .map(|(e, g)| e.iter().zip(g).filter(|(a, b)| a != b).count())
            .sum::<usize>();
        if got.len() != expect.len() {
            mismatches += n;
        }
    }
    Ok(CheckResult {
        name: QUANTIZATION,
        measured: mismatches as f64,
        tolerance: 0.0,
    })
}

/// The five-node graph used for the gradient check.
pub fn gradient_check_graph<R: Rng>(rng: &mut R) -> Result<TextAttributedGraph> {
    let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)];
    let feats = Tensor::randn(&[5, 4], 1.0, rng);
    let ef = Tensor::randn(&[6, 4], 1.0, rng);
    TextAttributedGraph::new("gradcheck", edges, feats, Some(ef), Labels::Node(vec![0, 1, 0, 1, 0]))
}

/// Max relative error between tape gradients and central differences of the
/// full pre-training loss on a five-node graph (d=4, d_h=6, H=2, N=4).
pub fn check_loss_gradients<R: Rng>(rng: &mut R) -> Result<CheckResult> {
    let g = gradient_check_graph(rng)?;
    let dims = ModelDims {
        feature_dim: 4,
        edge_features: true,
        hidden_dim: 6,
        heads: 2,
        tokens: 4,
    };
    let mut params = ModelParams::init(&dims, rng)?;
    for t in params.slots_mut() {
        *t = Tensor::randn(t.shape(), 0.5, rng);
    }
    let gt = GraphTensors::new(&g);
    let mask = vec![false, true, false, false, true];
    let trace = build_pretrain_loss(&params, &[&gt], &[mask], 2.0)?;
    let report = check_gradients(&trace.tape, trace.terms.total, trace.param_vars(), DEFAULT_EPS)?;
    Ok(CheckResult {
        name: LOSS_GRADIENTS,
        measured: report.max_rel_error(),
        tolerance: GRADIENT_TOLERANCE,
    })
}

pub fn check_reconstruction<R: Rng>(imp: &Implementations, rng: &mut R) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=5);
        let gamma = [1.0, 2.0, 3.0][rng.random_range(0..3)];
        let x = Tensor::randn(&[n, d], 1.0, rng);
        let xh = Tensor::randn(&[n, d], 1.0, rng);
        let adj = Tensor::matrix(n, n, (0..n * n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect())?;
        let feat = (imp.loss_feat)(&x, &xh, gamma)?;
        let topo = (imp.loss_topo)(&adj, &xh)?;
        worst = worst
            .max((feat - reference::loss_feat(&nested(&x), &nested(&xh), gamma)).abs())
            .max((topo - reference::loss_topo(&nested(&adj), &nested(&xh))).abs());
    }
    Ok(CheckResult {
        name: RECONSTRUCTION,
        measured: worst,
        tolerance: ORACLE_TOLERANCE,
    })
}

pub fn check_prototypes<R: Rng>(imp: &Implementations, rng: &mut R) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c = rng.random_range(1..=5);
        let d = rng.random_range(1..=5);
        let protos = Tensor::randn(&[c, d], 1.0, rng);
        let z = Tensor::randn(&[d], 1.0, rng);
        let got = (imp.prototype_probabilities)(&protos, z.data());
        worst = worst.max(max_diff(&got, &reference::prototype_probabilities(&nested(&protos), z.data())));
    }
    CheckResult {
        name: PROTOTYPE,
        measured: worst,
        tolerance: ORACLE_TOLERANCE,
    }
}

/// A random set of uploads with matching shapes.
pub fn random_uploads<R: Rng>(rng: &mut R, k: usize, heads: usize, n: usize, d: usize) -> Result<Vec<ClientUpload>> {
    let layout = [vec![2, 3], vec![4]];
    (0..k)
        .map(|id| {
            let counts = (0..heads * n).map(|_| rng.random_range(0..5)).collect();
            Ok(ClientUpload {
                client_id: id,
                tokens: Tensor::randn(&[heads, n, d], 1.0, rng),
                frequencies: TokenCounts::from_vec(heads, n, counts)?,
                other: ParamSet(layout.iter().map(|s| Tensor::randn(s, 1.0, rng)).collect()),
                sample_count: rng.random_range(1..10),
            })
        })
        .collect()
}

fn random_instance<R: Rng>(rng: &mut R) -> Result<Vec<ClientUpload>> {
    let k = rng.random_range(1..=4);
    let heads = rng.random_range(1..=2);
    let n = rng.random_range(1..=8);
    let d = rng.random_range(1..=6);
    random_uploads(rng, k, heads, n, d)
}

fn flat_global(g: &GlobalParams) -> Vec<f64> {
    let mut v = g.tokens.data().to_vec();
    for t in &g.other.0 {
        v.extend_from_slice(t.data());
    }
    v
}

fn flat_params(p: &ParamSet) -> Vec<f64> {
    p.0.iter().flat_map(|t| t.data().iter().cloned()).collect()
}

fn mask_as_logits(m: &[Vec<Option<f64>>]) -> Vec<f64> {
    m.iter()
        .flat_map(|r| r.iter().map(|e| e.unwrap_or(f64::NEG_INFINITY)))
        .collect()
}

fn diff_with_inf(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

/// Per-formula aggregation oracles over random instances.
pub fn check_aggregation_oracles<R: Rng>(imp: &Implementations, trials: usize, rng: &mut R) -> Result<Vec<CheckResult>> {
    let mut worst = [0.0f64; 7];
    for _ in 0..trials {
        let uploads = random_instance(rng)?;
        let lambda = rng.random_range(0.0..1.0);
        let books: Vec<reference::Codebook> = uploads.iter().map(reference::codebook).collect();
        let heads = books[0].len();

        for a in 0..uploads.len() {
            for b in 0..uploads.len() {
                for h in 0..heads {
                    let s = (imp.token_similarity)(&uploads[a].tokens, &uploads[b].tokens, h)?;
                    let expect = reference::token_similarity(&books[a], &books[b], h);
                    worst[0] = worst[0].max(max_diff(s.data(), &expect.concat()));
                    let m = (imp.alignment_mask)(&s, uploads[a].frequencies.head(h), uploads[b].frequencies.head(h))?;
                    let em = reference::masked_similarity(&expect, uploads[a].frequencies.head(h), uploads[b].frequencies.head(h));
                    worst[1] = worst[1].max(diff_with_inf(&mask_as_logits(&m), &em.concat()));
                }
            }
        }

        let got = (imp.phase1_codebooks)(&uploads, lambda)?;
        let expect = reference::phase1_codebooks(&uploads, lambda);
        for (g, e) in got.iter().zip(&expect) {
            let flat: Vec<f64> = e.iter().flatten().flatten().cloned().collect();
            worst[2] = worst[2].max(max_diff(g.data(), &flat));
        }

        let delta = (imp.similarity_matrix)(&uploads)?;
        let ref_delta = reference::similarity_matrix(&uploads);
        worst[3] = worst[3].max(max_diff(&delta.concat(), &ref_delta.concat()));

        let pers = (imp.personalized_other)(&uploads, &ref_delta)?;
        for (p, e) in pers.iter().zip(reference::personalized(&uploads, &ref_delta)) {
            worst[4] = worst[4].max(max_diff(&flat_params(p), &e));
        }

        let dist = (imp.distinctiveness)(&ref_delta)?;
        let ref_dist = reference::distinctiveness(&ref_delta);
        worst[5] = worst[5].max(max_diff(&dist, &ref_dist));

        let global = (imp.phase2_global)(&uploads, &ref_dist)?;
        worst[6] = worst[6].max(max_diff(&flat_global(&global), &reference::phase2_global(&uploads, &ref_dist)));
    }
    let names = [
        TOKEN_SIMILARITY,
        ALIGNMENT_MASK,
        PHASE1_CODEBOOK,
        CLIENT_SIMILARITY,
        PERSONALIZED,
        DISTINCTIVENESS,
        PHASE2_GLOBAL,
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&name, measured)| CheckResult {
            name,
            measured,
            tolerance: ORACLE_TOLERANCE,
        })
        .collect())
}

/// Aggregation invariants over random instances.
pub fn check_invariants<R: Rng>(imp: &Implementations, trials: usize, rng: &mut R) -> Result<Vec<CheckResult>> {
    let mut lambda_one = 0.0f64;
    let mut fixpoint = 0.0f64;
    let mut perm = 0.0f64;
    let mut scaling = 0.0f64;
    let mut fedavg = 0.0f64;
    let bits_differ = |a: &Tensor, b: &Tensor| {
        a.shape() != b.shape() || a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits())
    };

    for _ in 0..trials {
        let uploads = random_instance(rng)?;
        let k = uploads.len();

        // λ = 1 returns the uploaded codebooks.
        let same = (imp.phase1_codebooks)(&uploads, 1.0)?;
        if same.iter().zip(&uploads).any(|(c, u)| bits_differ(c, &u.tokens)) {
            lambda_one += 1.0;
        }

        // K copies of one upload (N = 1 so codebooks are fixed too).
        let base = random_uploads(rng, 1, uploads[0].tokens.shape()[0], 1, uploads[0].tokens.shape()[2])?.remove(0);
        let copies: Vec<ClientUpload> = (0..k.max(2))
            .map(|id| ClientUpload {
                client_id: id,
                ..base.clone()
            })
            .collect();
        let delta = (imp.similarity_matrix)(&copies)?;
        for p in (imp.personalized_other)(&copies, &delta)? {
            fixpoint = fixpoint.max(p.max_abs_diff(&base.other));
        }
        let dist = (imp.distinctiveness)(&delta)?;
        let global = (imp.phase2_global)(&copies, &dist)?;
        fixpoint = fixpoint
            .max(global.other.max_abs_diff(&base.other))
            .max(max_diff(global.tokens.data(), base.tokens.data()));
        let lambda = rng.random_range(0.0..1.0);
        for c in (imp.phase1_codebooks)(&copies, lambda)? {
            fixpoint = fixpoint.max(max_diff(c.data(), base.tokens.data()));
        }

        // Permuting clients permutes personalized outputs, fixes global ones.
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        let permuted: Vec<ClientUpload> = order.iter().map(|&i| uploads[i].clone()).collect();
        let books = (imp.phase1_codebooks)(&uploads, lambda)?;
        let books_p = (imp.phase1_codebooks)(&permuted, lambda)?;
        let delta = (imp.similarity_matrix)(&uploads)?;
        let delta_p = (imp.similarity_matrix)(&permuted)?;
        let pers = (imp.personalized_other)(&uploads, &delta)?;
        let pers_p = (imp.personalized_other)(&permuted, &delta_p)?;
        for (pos, &i) in order.iter().enumerate() {
            perm = perm
                .max(max_diff(books[i].data(), books_p[pos].data()))
                .max(pers[i].max_abs_diff(&pers_p[pos]));
        }
        let g = (imp.phase2_global)(&uploads, &(imp.distinctiveness)(&delta)?)?;
        let g_p = (imp.phase2_global)(&permuted, &(imp.distinctiveness)(&delta_p)?)?;
        perm = perm.max(max_diff(&flat_global(&g), &flat_global(&g_p)));
        perm = perm.max(max_diff(
            &flat_global(&(imp.fedavg)(&uploads)?),
            &flat_global(&(imp.fedavg)(&permuted)?),
        ));

        // Multiplying every counter by 7 changes nothing (exact).
        let scaled: Vec<ClientUpload> = uploads
            .iter()
            .map(|u| ClientUpload {
                frequencies: u.frequencies.scaled(7),
                ..u.clone()
            })
            .collect();
        let books_s = (imp.phase1_codebooks)(&scaled, lambda)?;
        if books.iter().zip(&books_s).any(|(a, b)| bits_differ(a, b)) {
            scaling += 1.0;
        }

        // Equal sample counts: FedAvg is the plain mean and matches uniform ∇.
        let equal: Vec<ClientUpload> = uploads
            .iter()
            .map(|u| ClientUpload {
                sample_count: 3,
                ..u.clone()
            })
            .collect();
        let avg = flat_global(&(imp.fedavg)(&equal)?);
        let mean = reference::weighted_average(&equal, &vec![1.0 / k as f64; k]);
        let uniform = flat_global(&(imp.phase2_global)(&equal, &vec![0.25; k])?);
        fedavg = fedavg.max(max_diff(&avg, &mean)).max(max_diff(&avg, &uniform));
    }
    let exact = |name, measured| CheckResult {
        name,
        measured,
        tolerance: 0.0,
    };
    let close = |name, measured| CheckResult {
        name,
        measured,
        tolerance: INVARIANT_TOLERANCE,
    };
    Ok(vec![
        exact(LAMBDA_ONE, lambda_one),
        close(FIXPOINT, fixpoint),
        close(PERMUTATION, perm),
        exact(FREQUENCY_SCALING, scaling),
        close(FEDAVG, fedavg),
    ])
}

/// Accuracy and AUC against exhaustive pair counting on small random sets
/// with frequent score ties. Measured value: number of inexact matches.
pub fn check_metrics<R: Rng>(imp: &Implementations, trials: usize, rng: &mut R) -> Result<Vec<CheckResult>> {
    let mut acc_bad = 0usize;
    let mut auc_bad = 0usize;
    for _ in 0..trials {
        let m = rng.random_range(2..=12);
        let c = rng.random_range(2..=4);
        let probs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..c).map(|_| rng.random_range(0..4) as f64 / 4.0).collect())
            .collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let got = (imp.accuracy)(&Tensor::from_rows(&probs)?, &labels)?;
        if got != reference::accuracy(&probs, &labels) {
            acc_bad += 1;
        }

        // Guarantee one valid label column.
        let mut bits: Vec<Vec<bool>> = (0..m).map(|_| (0..c).map(|_| rng.random_bool(0.5)).collect()).collect();
        bits[0][0] = true;
        bits[1][0] = false;
        let scores = Tensor::from_rows(&probs)?;
        let got = (imp.auc_roc)(&scores, &bits)?;
        let valid: Vec<f64> = (0..c)
            .filter_map(|col| {
                let s: Vec<f64> = probs.iter().map(|r| r[col]).collect();
                let l: Vec<bool> = bits.iter().map(|r| r[col]).collect();
                reference::auc_pairs(&s, &l)
            })
            .collect();
        let expect = valid.iter().sum::<f64>() / valid.len() as f64;
        if got != expect {
            auc_bad += 1;
        }
    }
    Ok(vec![
        CheckResult {
            name: ACCURACY,
            measured: acc_bad as f64,
            tolerance: 0.0,
        },
        CheckResult {
            name: AUC,
            measured: auc_bad as f64,
            tolerance: 0.0,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyConfig {
        VerifyConfig {
            seed: 7,
            quantization_trials: 100,
            aggregation_trials: 20,
            metric_trials: 20,
        }
    }

    #[test]
    fn fresh_build_passes_everything() {
        let report = run(&small(), &Implementations::default()).unwrap();
        assert!(report.all_passed(), "{report}");
    }

    #[test]
    fn report_has_one_line_per_formula() {
        let report = run(&small(), &Implementations::default()).unwrap();
        for name in FORMULA_CHECKS {
            assert_eq!(report.checks.iter().filter(|c| c.name == name).count(), 1, "{name}");
        }
        assert_eq!(report.to_string().lines().filter(|l| l.starts_with("PASS")).count(), report.checks.len());
    }

    fn flipped_distinctiveness(delta: &[Vec<f64>]) -> Result<Vec<f64>> {
        let k = delta.len() as f64;
        Ok(delta.iter().map(|row| 1.0 + row.iter().sum::<f64>() / k).collect())
    }

    #[test]
    fn sign_error_in_distinctiveness_is_caught() {
        let imp = Implementations {
            distinctiveness: flipped_distinctiveness,
            ..Implementations::default()
        };
        let report = run(&small(), &imp).unwrap();
        assert!(!report.get(DISTINCTIVENESS).unwrap().passed());
        assert!(report.get(PHASE2_GLOBAL).unwrap().passed());
        assert!(!report.all_passed());
    }

    fn last_index_ties(z: &Tensor, tokens: &Tensor) -> Result<Vec<Vec<usize>>> {
        let &[h, n, _] = tokens.shape() else { unreachable!() };
        Ok(z.rows()
            .map(|row| {
                (0..h)
                    .map(|hh| {
                        let mut best = 0;
                        for j in 0..n {
                            let dj = crate::tensor::squared_distance(row, model::token_row(tokens, hh, j));
                            let db = crate::tensor::squared_distance(row, model::token_row(tokens, hh, best));
                            if dj <= db {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect())
    }

    #[test]
    fn wrong_tie_rule_is_caught() {
        let imp = Implementations {
            nearest_tokens: last_index_ties,
            ..Implementations::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!check_quantization(&imp, 200, &mut rng).unwrap().passed());
    }
}
