//! Server-side aggregation.
//!
//! Phase 1 (within a domain) pulls each token toward similar tokens that are
//! used at least as often, then averages the remaining parameters with
//! weights from codebook similarity. Phase 2 (across domains) averages
//! everything with weights that favour clients whose codebooks look least
//! like everyone else's. FedAvg weights by local sample count.
//!
//! Multi-head codebooks are handled head by head; client similarity is the
//! mean over heads.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{token_row, ParamSet, TokenCounts};
use crate::tensor::{cosine, softmax, Tensor};

/// What one client sends to the server after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    /// `heads × tokens × hidden_dim`.
    pub tokens: Tensor,
    pub frequencies: TokenCounts,
    /// Every parameter except the codebook tokens.
    pub other: ParamSet,
    pub sample_count: usize,
}

/// Parameters broadcast to every client.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalParams {
    pub tokens: Tensor,
    pub other: ParamSet,
}

/// Per-client parameters after a within-domain round.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizedParams {
    pub client_id: usize,
    pub tokens: Tensor,
    pub other: ParamSet,
}

fn codebook_shape(tokens: &Tensor) -> Result<(usize, usize, usize)> {
    match *tokens.shape() {
        [h, n, d] => Ok((h, n, d)),
        ref s => Err(Error::dim(format!("codebook tokens must be rank 3, got {s:?}"))),
    }
}

/// Checks that all uploads agree on every shape.
pub fn validate_uploads(uploads: &[ClientUpload]) -> Result<()> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one upload"))?;
    let (h, n, _) = codebook_shape(&first.tokens)?;
    for u in uploads {
        if u.tokens.shape() != first.tokens.shape() {
            return Err(Error::dim(format!(
                "client {} codebook shape {:?} differs from {:?}",
                u.client_id,
                u.tokens.shape(),
                first.tokens.shape()
            )));
        }
        if (u.frequencies.heads(), u.frequencies.tokens()) != (h, n) {
            return Err(Error::dim(format!("client {} counter table does not match its codebook", u.client_id)));
        }
        if !u.other.same_layout(&first.other) {
            return Err(Error::dim(format!("client {} parameter layout differs", u.client_id)));
        }
    }
    Ok(())
}

/// Cosine similarity of every token pair of head `head`, `N × N`.
pub fn token_similarity(tokens_a: &Tensor, tokens_b: &Tensor, head: usize) -> Result<Tensor> {
    let (h, n, d) = codebook_shape(tokens_a)?;
    let (hb, nb, db) = codebook_shape(tokens_b)?;
    if (n, d) != (nb, db) || head >= h.min(hb) {
        return Err(Error::dim(format!(
            "cannot compare head {head} of codebooks {:?} and {:?}",
            tokens_a.shape(),
            tokens_b.shape()
        )));
    }
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(cosine(token_row(tokens_a, head, i), token_row(tokens_b, head, j)));
        }
    }
    Tensor::matrix(n, n, data)
}

/// Keeps `S[i][j]` where `freq_b[j] >= freq_a[i]`; `None` marks a masked pair.
pub fn alignment_mask(s: &Tensor, freq_a: &[u64], freq_b: &[u64]) -> Result<Vec<Vec<Option<f64>>>> {
    let (rows, cols) = s.dims2()?;
    if freq_a.len() != rows || freq_b.len() != cols {
        return Err(Error::dim("frequency vectors do not match the similarity matrix"));
    }
    Ok((0..rows)
        .map(|i| (0..cols).map(|j| (freq_b[j] >= freq_a[i]).then(|| s.at(i, j))).collect())
        .collect())
}

/// Within-domain codebook refinement. Returns one codebook per upload.
///
/// `φ̂_i^a = λ φ_i^a + (1-λ) Σ_{b,j} w_{ij}^{ab} φ_j^b`, where the weights are
/// `exp(S_ij^{ab})` over unmasked pairs, normalized over all clients and
/// tokens (the uploading client included).
pub fn update_codebooks_phase1(uploads: &[ClientUpload], lambda: f64) -> Result<Vec<Tensor>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("λ must lie in [0, 1], got {lambda}")));
    }
    validate_uploads(uploads)?;
    if lambda == 1.0 {
        return Ok(uploads.iter().map(|u| u.tokens.clone()).collect());
    }
    let (heads, n, d) = codebook_shape(&uploads[0].tokens)?;
    let mut out = Vec::with_capacity(uploads.len());
    for a in uploads {
        let mut data = Vec::with_capacity(heads * n * d);
        for h in 0..heads {
            let masked: Vec<Vec<Vec<Option<f64>>>> = uploads
                .iter()
                .map(|b| {
                    let s = token_similarity(&a.tokens, &b.tokens, h)?;
                    alignment_mask(&s, a.frequencies.head(h), b.frequencies.head(h))
                })
                .collect::<Result<_>>()?;
            for i in 0..n {
                let mut mix = vec![0.0; d];
                let mut denom = 0.0;
                for (b, m) in uploads.iter().zip(&masked) {
                    for (j, entry) in m[i].iter().enumerate() {
                        if let Some(s) = entry {
                            let w = s.exp();
                            denom += w;
                            for (acc, v) in mix.iter_mut().zip(token_row(&b.tokens, h, j)) {
                                *acc += w * v;
                            }
                        }
                    }
                }
                // The self pair always survives the mask, so denom > 0.
                let own = token_row(&a.tokens, h, i);
                data.extend(
                    own.iter()
                        .zip(&mix)
                        .map(|(o, m)| lambda * o + (1.0 - lambda) * m / denom),
                );
            }
        }
        out.push(Tensor::new(vec![heads, n, d], data)?);
    }
    Ok(out)
}

/// Mean over heads of `(1/N) Σ_i max_j S_ij`.
pub fn client_similarity(tokens_a: &Tensor, tokens_b: &Tensor) -> Result<f64> {
    let (heads, n, _) = codebook_shape(tokens_a)?;
    if tokens_a.shape() != tokens_b.shape() {
        return Err(Error::dim("client similarity needs equal codebook shapes"));
    }
    let mut total = 0.0;
    for h in 0..heads {
        let s = token_similarity(tokens_a, tokens_b, h)?;
        let best: f64 = s
            .rows()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        total += best / n as f64;
    }
    Ok(total / heads as f64)
}

/// `Δ[a][b]` for every ordered pair of uploads. Not symmetric in general.
pub fn client_similarity_matrix(uploads: &[ClientUpload]) -> Result<Vec<Vec<f64>>> {
    validate_uploads(uploads)?;
    uploads
        .iter()
        .map(|a| uploads.iter().map(|b| client_similarity(&a.tokens, &b.tokens)).collect())
        .collect()
}

fn check_square(delta: &[Vec<f64>], k: usize) -> Result<()> {
    if delta.len() != k || delta.iter().any(|r| r.len() != k) {
        return Err(Error::dim(format!("similarity matrix must be {k}×{k}")));
    }
    Ok(())
}

/// Row-wise softmax of `Δ`: client `a`'s weights over all clients.
pub fn personalization_weights(delta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    delta.iter().map(|row| softmax(row)).collect()
}

/// Similarity-weighted average of the non-codebook parameters, per client.
pub fn personalized_other_params(uploads: &[ClientUpload], delta: &[Vec<f64>]) -> Result<Vec<ParamSet>> {
    validate_uploads(uploads)?;
    check_square(delta, uploads.len())?;
    let sets: Vec<&ParamSet> = uploads.iter().map(|u| &u.other).collect();
    personalization_weights(delta)
        .iter()
        .map(|w| ParamSet::weighted_sum(&sets, w))
        .collect()
}

/// `∇^a = 1 - (1/K) Σ_b Δ[a][b]`, self term included.
pub fn domain_distinctiveness(delta: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_square(delta, delta.len())?;
    let k = delta.len() as f64;
    Ok(delta.iter().map(|row| 1.0 - row.iter().sum::<f64>() / k).collect())
}

/// Softmax of the distinctiveness vector.
pub fn phase2_weights(distinctiveness: &[f64]) -> Vec<f64> {
    softmax(distinctiveness)
}

/// Weighted average of all parameters, tokens aligned by position, summed
/// in ascending client-id order.
fn weighted_global(uploads: &[ClientUpload], weights: &[f64]) -> Result<GlobalParams> {
    let mut order: Vec<usize> = (0..uploads.len()).collect();
    order.sort_by_key(|&i| uploads[i].client_id);
    let w: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let other = ParamSet::weighted_sum(&order.iter().map(|&i| &uploads[i].other).collect::<Vec<_>>(), &w)?;
    let tokens = ParamSet::weighted_sum(
        &order
            .iter()
            .map(|&i| ParamSet(vec![uploads[i].tokens.clone()]))
            .collect::<Vec<_>>()
            .iter()
            .collect::<Vec<_>>(),
        &w,
    )?
    .0
    .pop()
    .expect("one tensor in, one out");
    Ok(GlobalParams { tokens, other })
}

/// Cross-domain integration: every parameter averaged with `softmax(∇)`.
pub fn global_aggregate_phase2(uploads: &[ClientUpload], distinctiveness: &[f64]) -> Result<GlobalParams> {
    validate_uploads(uploads)?;
    if distinctiveness.len() != uploads.len() {
        return Err(Error::dim("one distinctiveness value per upload is required"));
    }
    weighted_global(uploads, &phase2_weights(distinctiveness))
}

/// `M_i / M` per upload.
pub fn fedavg_weights(uploads: &[ClientUpload]) -> Result<Vec<f64>> {
    let total: usize = uploads.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::contract("FedAvg needs a positive total sample count"));
    }
    Ok(uploads.iter().map(|u| u.sample_count as f64 / total as f64).collect())
}

pub fn fedavg_aggregate(uploads: &[ClientUpload]) -> Result<GlobalParams> {
    validate_uploads(uploads)?;
    weighted_global(uploads, &fedavg_weights(uploads)?)
}

/// Token similarity per head and ordered client pair, client similarity and
/// distinctiveness for one set of uploads.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTables {
    /// `token[h][a][b]` is the `N × N` similarity of clients `a` and `b` in head `h`.
    pub token: Vec<Vec<Vec<Tensor>>>,
    pub delta: Vec<Vec<f64>>,
    pub distinctiveness: Vec<f64>,
}

impl SimilarityTables {
    pub fn compute(uploads: &[ClientUpload]) -> Result<Self> {
        validate_uploads(uploads)?;
        let (heads, _, _) = codebook_shape(&uploads[0].tokens)?;
        let token = (0..heads)
            .map(|h| {
                uploads
                    .iter()
                    .map(|a| uploads.iter().map(|b| token_similarity(&a.tokens, &b.tokens, h)).collect())
                    .collect()
            })
            .collect::<Result<Vec<Vec<Vec<Tensor>>>>>()?;
        let delta = client_similarity_matrix(uploads)?;
        let distinctiveness = domain_distinctiveness(&delta)?;
        Ok(Self {
            token,
            delta,
            distinctiveness,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationKind {
    Phase1,
    Phase2,
    FedAvg,
}

impl AggregationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationKind::Phase1 => "phase1",
            AggregationKind::Phase2 => "phase2",
            AggregationKind::FedAvg => "fedavg",
        }
    }
}

/// What the server computed in one round, for analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationDiagnostics {
    pub kind: AggregationKind,
    /// Client ids in the row/column order of the tables below.
    pub client_ids: Vec<usize>,
    pub delta: Option<Vec<Vec<f64>>>,
    pub distinctiveness: Option<Vec<f64>>,
    /// One row per receiving client (Phase 1) or a single global row.
    pub weights: Vec<Vec<f64>>,
}

pub const DIAGNOSTICS_HEADER: &str = "round,aggregation,table,row,col,value";

impl AggregationDiagnostics {
    /// CSV rows (no header) with client ids as row/column labels; `-` for
    /// an unused index.
    pub fn csv_rows(&self, round: usize) -> String {
        let mut out = String::new();
        let kind = self.kind.as_str();
        let ids = &self.client_ids;
        if let Some(delta) = &self.delta {
            for (a, row) in delta.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    let _ = writeln!(out, "{round},{kind},similarity,{},{},{v}", ids[a], ids[b]);
                }
            }
        }
        if let Some(nabla) = &self.distinctiveness {
            for (a, v) in nabla.iter().enumerate() {
                let _ = writeln!(out, "{round},{kind},distinctiveness,{},-,{v}", ids[a]);
            }
        }
        for (r, row) in self.weights.iter().enumerate() {
            let label = if self.weights.len() == 1 { "-".to_string() } else { ids[r].to_string() };
            for (b, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{round},{kind},weight,{label},{},{v}", ids[b]);
            }
        }
        out
    }
}

/// Phase 1 in full: refined codebooks plus personalized other parameters.
pub fn aggregate_phase1(uploads: &[ClientUpload], lambda: f64) -> Result<(Vec<PersonalizedParams>, AggregationDiagnostics)> {
    let tokens = update_codebooks_phase1(uploads, lambda)?;
    let delta = client_similarity_matrix(uploads)?;
    let other = personalized_other_params(uploads, &delta)?;
    let out = uploads
        .iter()
        .zip(tokens)
        .zip(other)
        .map(|((u, tokens), other)| PersonalizedParams {
            client_id: u.client_id,
            tokens,
            other,
        })
        .collect();
    let diag = AggregationDiagnostics {
        kind: AggregationKind::Phase1,
        client_ids: uploads.iter().map(|u| u.client_id).collect(),
        weights: personalization_weights(&delta),
        delta: Some(delta),
        distinctiveness: None,
    };
    Ok((out, diag))
}

/// Phase 2 in full: distinctiveness-weighted global parameters. Tables are
/// computed in ascending client-id order.
pub fn aggregate_phase2(uploads: &[ClientUpload]) -> Result<(GlobalParams, AggregationDiagnostics)> {
    let mut sorted = uploads.to_vec();
    sorted.sort_by_key(|u| u.client_id);
    let uploads = sorted.as_slice();
    let delta = client_similarity_matrix(uploads)?;
    let nabla = domain_distinctiveness(&delta)?;
    let global = global_aggregate_phase2(uploads, &nabla)?;
    let diag = AggregationDiagnostics {
        kind: AggregationKind::Phase2,
        client_ids: uploads.iter().map(|u| u.client_id).collect(),
        weights: vec![phase2_weights(&nabla)],
        delta: Some(delta),
        distinctiveness: Some(nabla),
    };
    Ok((global, diag))
}

pub fn aggregate_fedavg(uploads: &[ClientUpload]) -> Result<(GlobalParams, AggregationDiagnostics)> {
    let global = fedavg_aggregate(uploads)?;
    let diag = AggregationDiagnostics {
        kind: AggregationKind::FedAvg,
        client_ids: uploads.iter().map(|u| u.client_id).collect(),
        delta: None,
        distinctiveness: None,
        weights: vec![fedavg_weights(uploads)?],
    };
    Ok((global, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn upload(id: usize, tokens: Tensor, freq: Vec<u64>, other: Vec<f64>, m: usize) -> ClientUpload {
        let (h, n, _) = codebook_shape(&tokens).unwrap();
        ClientUpload {
            client_id: id,
            tokens,
            frequencies: TokenCounts::from_vec(h, n, freq).unwrap(),
            other: ParamSet(vec![Tensor::vector(other).unwrap()]),
            sample_count: m,
        }
    }

    fn random_upload(id: usize, h: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> ClientUpload {
        use rand::Rng;
        let tokens = Tensor::randn(&[h, n, d], 1.0, rng);
        let freq = (0..h * n).map(|_| rng.random_range(0..5)).collect();
        let other = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        upload(id, tokens, freq, other, rng.random_range(1..10))
    }

    #[test]
    fn orthonormal_self_similarity_is_identity() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(token_similarity(&t, &t, 0).unwrap(), Tensor::identity(2));
    }

    #[test]
    fn token_similarity_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[1, 4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 4, 3], 1.0, &mut rng);
        let s = token_similarity(&a, &b, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (x, y) = (a.row(i), b.row(j));
                let mut dot = 0.0;
                let (mut nx, mut ny) = (0.0, 0.0);
                for k in 0..3 {
                    dot += x[k] * y[k];
                    nx += x[k] * x[k];
                    ny += y[k] * y[k];
                }
                assert!((s.at(i, j) - dot / (nx.sqrt() * ny.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_examples() {
        let s = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let all = alignment_mask(&s, &[3, 3], &[3, 3]).unwrap();
        assert_eq!(all, vec![vec![Some(0.1), Some(0.2)], vec![Some(0.3), Some(0.4)]]);
        let m = alignment_mask(&s, &[0, 5], &[0, 0]).unwrap();
        assert_eq!(m[1], vec![None, None]);
        let mixed = alignment_mask(&s, &[2, 1], &[1, 2]).unwrap();
        assert_eq!(mixed, vec![vec![None, Some(0.2)], vec![Some(0.3), Some(0.4)]]);
    }

    /// Materializes every `(b, j)` weight of a K=2, N=2, d=2 example.
    #[test]
    fn phase1_matches_naive_weights() {
        let ta = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let tb = Tensor::new(vec![1, 2, 2], vec![0.0, 2.0, -1.0, 1.0]).unwrap();
        let fa = vec![3, 1];
        let fb = vec![2, 4];
        let ups = vec![
            upload(0, ta.clone(), fa.clone(), vec![0.0], 1),
            upload(1, tb.clone(), fb.clone(), vec![0.0], 1),
        ];
        let lambda = 0.5;
        let got = update_codebooks_phase1(&ups, lambda).unwrap();

        let toks = [ta.to_rows(), tb.to_rows()];
        let freqs = [fa, fb];
        for a in 0..2 {
            for i in 0..2 {
                let mut cands: Vec<(f64, &Vec<f64>)> = Vec::new();
                for b in 0..2 {
                    for j in 0..2 {
                        if freqs[b][j] >= freqs[a][i] {
                            let x = &toks[a][i];
                            let y = &toks[b][j];
                            let c = (x[0] * y[0] + x[1] * y[1])
                                / ((x[0] * x[0] + x[1] * x[1]).sqrt() * (y[0] * y[0] + y[1] * y[1]).sqrt());
                            cands.push((c.exp(), y));
                        }
                    }
                }
                let z: f64 = cands.iter().map(|c| c.0).sum();
                for k in 0..2 {
                    let mixed: f64 = cands.iter().map(|(w, y)| w / z * y[k]).sum();
                    let expect = lambda * toks[a][i][k] + (1.0 - lambda) * mixed;
                    assert!((got[a].row(i)[k] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lambda_one_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ups: Vec<_> = (0..3).map(|i| random_upload(i, 2, 4, 3, &mut rng)).collect();
        let out = update_codebooks_phase1(&ups, 1.0).unwrap();
        for (u, t) in ups.iter().zip(&out) {
            assert_eq!(&u.tokens, t);
        }
        assert!(matches!(update_codebooks_phase1(&ups, 1.5), Err(Error::Config(_))));
        assert!(matches!(update_codebooks_phase1(&ups, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn identical_single_token_clients_are_fixed() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let ups: Vec<_> = (0..3).map(|i| upload(i, t.clone(), vec![4], vec![1.0], 2)).collect();
        for out in update_codebooks_phase1(&ups, 0.3).unwrap() {
            for (a, b) in out.data().iter().zip(t.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_examples() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((client_similarity(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let o = Tensor::new(vec![1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let p = Tensor::new(vec![1, 2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, -2.0]).unwrap();
        assert_eq!(client_similarity(&o, &p).unwrap(), 0.0);
    }

    #[test]
    fn client_similarity_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let mut expect = 0.0;
        for h in 0..2 {
            let mut acc = 0.0;
            for i in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for j in 0..3 {
                    best = best.max(cosine(token_row(&a, h, i), token_row(&b, h, j)));
                }
                acc += best;
            }
            expect += acc / 3.0;
        }
        expect /= 2.0;
        assert!((client_similarity(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn personalized_hand_softmax() {
        let t = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let ups: Vec<_> = [1.0, 2.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &w)| upload(i, t.clone(), vec![0], vec![w], 1))
            .collect();
        let delta = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.5], vec![0.0, 0.0, 2.0_f64.ln()]];
        let out = personalized_other_params(&ups, &delta).unwrap();
        let e = std::f64::consts::E;
        let expect0 = (e * 1.0 + 2.0 + 4.0) / (e + 2.0);
        assert!((out[0].0[0].item() - expect0).abs() < 1e-12);
        assert!((out[1].0[0].item() - 7.0 / 3.0).abs() < 1e-12);
        assert!((out[2].0[0].item() - (1.0 + 2.0 + 8.0) / 4.0).abs() < 1e-12);

        let single = personalized_other_params(&ups[..1], &[vec![0.7]]).unwrap();
        assert_eq!(single[0], ups[0].other);
    }

    #[test]
    fn distinctiveness_examples() {
        assert_eq!(domain_distinctiveness(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(domain_distinctiveness(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d: Vec<Vec<f64>> = (0..4).map(|_| Tensor::randn(&[4], 0.5, &mut rng).into_data()).collect();
        let got = domain_distinctiveness(&d).unwrap();
        for (row, g) in d.iter().zip(&got) {
            let mut s = 0.0;
            for v in row {
                s += v;
            }
            assert!((g - (1.0 - s / 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn phase2_hand_weights() {
        let t = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let ups: Vec<_> = [7.0, 14.0, 21.0]
            .iter()
            .enumerate()
            .map(|(i, &w)| upload(i, t.clone(), vec![0], vec![w], 1))
            .collect();
        let g = global_aggregate_phase2(&ups, &[0.0, 2.0_f64.ln(), 4.0_f64.ln()]).unwrap();
        let expect = 7.0 / 7.0 + 14.0 * 2.0 / 7.0 + 21.0 * 4.0 / 7.0;
        assert!((g.other.0[0].item() - expect).abs() < 1e-12);
        let solo = global_aggregate_phase2(&ups[..1], &[0.3]).unwrap();
        assert_eq!(solo.other, ups[0].other);
    }

    #[test]
    fn fedavg_examples() {
        let t = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let mk = |ms: [usize; 3]| -> Vec<ClientUpload> {
            [10.0, 20.0, 30.0]
                .iter()
                .zip(ms)
                .enumerate()
                .map(|(i, (&w, m))| upload(i, t.clone(), vec![0], vec![w], m))
                .collect()
        };
        let g = fedavg_aggregate(&mk([1, 2, 3])).unwrap();
        assert!((g.other.0[0].item() - 140.0 / 6.0).abs() < 1e-12);
        assert!((fedavg_aggregate(&mk([5, 5, 5])).unwrap().other.0[0].item() - 20.0).abs() < 1e-12);
        assert_eq!(fedavg_aggregate(&mk([0, 4, 0])).unwrap().other.0[0].item(), 20.0);
        assert!(matches!(fedavg_aggregate(&mk([0, 0, 0])), Err(Error::Contract(_))));
    }

    #[test]
    fn diagnostics_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ups: Vec<_> = (0..2).map(|i| random_upload(i, 1, 2, 2, &mut rng)).collect();
        let (_, diag) = aggregate_phase2(&ups).unwrap();
        let csv = diag.csv_rows(3);
        assert_eq!(csv.lines().count(), 4 + 2 + 2);
        assert!(csv.lines().all(|l| l.starts_with("3,phase2,")));
    }

    fn uploads_strategy() -> impl Strategy<Value = (Vec<ClientUpload>, Vec<usize>, f64)> {
        (2usize..5, 1usize..3, 1usize..4, 1usize..4, any::<u64>(), 0.0f64..=1.0).prop_map(|(k, h, n, d, seed, lambda)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ups: Vec<_> = (0..k).map(|i| random_upload(i, h, n, d, &mut rng)).collect();
            let mut perm: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            (ups, perm, lambda)
        })
    }

    fn close(a: &Tensor, b: &Tensor) -> bool {
        a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    proptest! {
        #[test]
        fn permutation_equivariance((ups, perm, lambda) in uploads_strategy()) {
            let permuted: Vec<_> = perm.iter().map(|&i| ups[i].clone()).collect();
            let base = update_codebooks_phase1(&ups, lambda).unwrap();
            let moved = update_codebooks_phase1(&permuted, lambda).unwrap();
            for (pos, &i) in perm.iter().enumerate() {
                prop_assert!(close(&moved[pos], &base[i]));
            }
            let delta = client_similarity_matrix(&ups).unwrap();
            let pdelta = client_similarity_matrix(&permuted).unwrap();
            let base_o = personalized_other_params(&ups, &delta).unwrap();
            let moved_o = personalized_other_params(&permuted, &pdelta).unwrap();
            for (pos, &i) in perm.iter().enumerate() {
                prop_assert!(moved_o[pos].max_abs_diff(&base_o[i]) < 1e-12);
            }
            prop_assert_eq!(aggregate_phase2(&ups).unwrap().0, aggregate_phase2(&permuted).unwrap().0);
            prop_assert_eq!(fedavg_aggregate(&ups).unwrap(), fedavg_aggregate(&permuted).unwrap());
        }

        #[test]
        fn frequency_scaling_changes_nothing((ups, _perm, lambda) in uploads_strategy(), factor in 2u64..6) {
            let scaled: Vec<_> = ups.iter().map(|u| ClientUpload { frequencies: u.frequencies.scaled(factor), ..u.clone() }).collect();
            prop_assert_eq!(update_codebooks_phase1(&ups, lambda).unwrap(), update_codebooks_phase1(&scaled, lambda).unwrap());
        }

        #[test]
        fn phase1_tokens_are_bounded((ups, _perm, lambda) in uploads_strategy()) {
            let max_norm = ups.iter().flat_map(|u| u.tokens.rows().map(crate::tensor::l2_norm).collect::<Vec<_>>()).fold(0.0, f64::max);
            for t in update_codebooks_phase1(&ups, lambda).unwrap() {
                for row in t.rows() {
                    prop_assert!(crate::tensor::l2_norm(row) <= max_norm + 1e-12);
                }
            }
        }

        #[test]
        fn similarity_ranges((ups, _perm, _lambda) in uploads_strategy()) {
            let tables = SimilarityTables::compute(&ups).unwrap();
            for per_head in &tables.token {
                for row in per_head {
                    for s in row {
                        prop_assert!(s.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
                    }
                }
            }
            for (a, row) in tables.delta.iter().enumerate() {
                prop_assert!((row[a] - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            }
            for w in personalization_weights(&tables.delta).iter().chain([phase2_weights(&tables.distinctiveness)].iter()) {
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn identical_uploads_are_a_fixpoint((ups, _perm, lambda) in uploads_strategy()) {
            let same: Vec<_> = ups.iter().map(|u| ClientUpload { client_id: u.client_id, ..ups[0].clone() }).collect();
            let delta = client_similarity_matrix(&same).unwrap();
            for o in personalized_other_params(&same, &delta).unwrap() {
                prop_assert!(o.max_abs_diff(&same[0].other) < 1e-12);
            }
            let g = aggregate_phase2(&same).unwrap().0;
            prop_assert!(g.other.max_abs_diff(&same[0].other) < 1e-12);
            prop_assert!(close(&g.tokens, &same[0].tokens));
            let _ = lambda;
        }

        #[test]
        fn fedavg_equals_uniform_phase2((ups, _perm, _lambda) in uploads_strategy()) {
            let equal: Vec<_> = ups.iter().map(|u| ClientUpload { sample_count: 3, ..u.clone() }).collect();
            let a = fedavg_aggregate(&equal).unwrap();
            let b = global_aggregate_phase2(&equal, &vec![0.25; equal.len()]).unwrap();
            prop_assert!(a.other.max_abs_diff(&b.other) < 1e-12);
            prop_assert!(close(&a.tokens, &b.tokens));
        }
    }
}
