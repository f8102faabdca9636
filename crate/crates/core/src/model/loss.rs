use super::encoder::{encode_on_tape, GraphTensors, ParamVars};
use super::quantize::quantize_on_tape;
use super::{ModelParams, TokenCounts};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::tensor::Tensor;

/// Scalar nodes of the four loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub feat: Var,
    pub topo: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub feat: f64,
    pub topo: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// A recorded pretraining forward pass, ready for `backward`.
pub struct PretrainTrace {
    pub tape: Tape,
    pub terms: LossTerms,
    pub(crate) vars: ParamVars,
    /// Encoder outputs per graph.
    pub z: Vec<Var>,
    /// Projected quantized embeddings per graph.
    pub z_q: Vec<Var>,
    pub counts: TokenCounts,
}

impl PretrainTrace {
    /// Parameter leaves in the order of [`ModelParams::slots`].
    pub fn param_vars(&self) -> &[Var] {
        &self.vars.all
    }

    pub fn tokens_var(&self) -> Var {
        self.vars.tokens
    }

    pub fn breakdown(&self) -> LossBreakdown {
        let v = |x: Var| self.tape.value(x).item();
        LossBreakdown {
            feat: v(self.terms.feat),
            topo: v(self.terms.topo),
            codebook: v(self.terms.codebook),
            commitment: v(self.terms.commitment),
            total: v(self.terms.total),
        }
    }

    /// Gradients of the total loss in canonical parameter order.
    pub fn gradients(&self) -> Result<Vec<Tensor>> {
        self.tape.backward(self.terms.total, &self.vars.all)
    }
}

fn add_all(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Sum over rows of `(1 - cos(x_v, x̂_v))^γ`.
fn feat_sum(tape: &mut Tape, x: Var, xhat: Var, gamma: f64) -> Result<Var> {
    let cos = tape.row_cosine(x, xhat)?;
    let gap = tape.affine(cos, -1.0, 1.0)?;
    let pw = tape.powf(gap, gamma)?;
    tape.sum(pw)
}

/// `‖A - σ(X̂ X̂ᵀ)‖²_F`.
fn topo_term(tape: &mut Tape, a: Var, xhat: Var) -> Result<Var> {
    let xt = tape.transpose(xhat)?;
    let logits = tape.matmul(xhat, xt)?;
    let probs = tape.sigmoid(logits)?;
    let diff = tape.sub(a, probs)?;
    let sq = tape.square(diff)?;
    tape.sum(sq)
}

fn squared_sum(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// Records the pretraining objective over a client batch.
///
/// The feature and both quantization terms average over all nodes of all
/// graphs in the batch; the structure term sums over graphs.
pub fn build_pretrain_loss(
    params: &ModelParams,
    graphs: &[&GraphTensors],
    masks: &[Vec<bool>],
    gamma: f64,
) -> Result<PretrainTrace> {
    if graphs.is_empty() {
        return Err(Error::contract("pretraining batch has no graphs"));
    }
    if graphs.len() != masks.len() {
        return Err(Error::contract("one mask per graph is required"));
    }
    let dims = params.dims();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let mut counts = TokenCounts::zeros(dims.heads, dims.tokens);
    let (mut feats, mut topos, mut books, mut commits) = (vec![], vec![], vec![], vec![]);
    let (mut zs, mut zqs) = (vec![], vec![]);
    let mut nodes = 0usize;

    for (g, mask) in graphs.iter().zip(masks) {
        if g.features.last_dim() != dims.feature_dim {
            return Err(Error::dim(format!(
                "graph features have width {}, model expects {}",
                g.features.last_dim(),
                dims.feature_dim
            )));
        }
        nodes += g.node_count();
        let z = encode_on_tape(&mut tape, &vars, g, mask)?;
        let (zq, _, c) = quantize_on_tape(&mut tape, &vars, z)?;
        counts.accumulate(&c)?;

        let dec_in = tape.straight_through(z, zq)?;
        let lin = tape.matmul(dec_in, vars.decoder_weight)?;
        let xhat = tape.add_bias(lin, vars.decoder_bias)?;
        let x = tape.constant(g.features.clone());
        let a = tape.constant(g.adjacency.clone());
        feats.push(feat_sum(&mut tape, x, xhat, gamma)?);
        topos.push(topo_term(&mut tape, a, xhat)?);

        let z_sg = tape.stop_gradient(z)?;
        books.push(squared_sum(&mut tape, z_sg, zq)?);
        let zq_sg = tape.stop_gradient(zq)?;
        commits.push(squared_sum(&mut tape, z, zq_sg)?);
        zs.push(z);
        zqs.push(zq);
    }

    let inv_n = 1.0 / nodes as f64;
    let feat_total = add_all(&mut tape, &feats)?;
    let feat = tape.scale(feat_total, inv_n)?;
    let topo = add_all(&mut tape, &topos)?;
    let book_total = add_all(&mut tape, &books)?;
    let codebook = tape.scale(book_total, inv_n)?;
    let commit_total = add_all(&mut tape, &commits)?;
    let commitment = tape.scale(commit_total, inv_n)?;
    let total = add_all(&mut tape, &[feat, topo, codebook, commitment])?;

    Ok(PretrainTrace {
        tape,
        terms: LossTerms {
            feat,
            topo,
            codebook,
            commitment,
            total,
        },
        vars,
        z: zs,
        z_q: zqs,
        counts,
    })
}

/// Pretraining loss of a single graph under a fixed mask.
pub fn pretrain_loss(g: &TextAttributedGraph, params: &ModelParams, masked: &[bool], gamma: f64) -> Result<LossBreakdown> {
    let gt = GraphTensors::new(g);
    Ok(build_pretrain_loss(params, &[&gt], &[masked.to_vec()], gamma)?.breakdown())
}

/// Mean of `(1 - cos(x_v, x̂_v))^γ` over rows.
pub fn loss_feat(x: &Tensor, xhat: &Tensor, gamma: f64) -> Result<f64> {
    let n = x.dims2()?.0;
    if n == 0 {
        return Err(Error::contract("feature loss over zero rows"));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let hv = tape.constant(xhat.clone());
    let s = feat_sum(&mut tape, xv, hv, gamma)?;
    Ok(tape.value(s).item() / n as f64)
}

/// `‖A - σ(X̂ X̂ᵀ)‖²_F` for a dense adjacency `A`.
pub fn loss_topo(adjacency: &Tensor, xhat: &Tensor) -> Result<f64> {
    let n = xhat.dims2()?.0;
    adjacency.expect_shape(&[n, n])?;
    let mut tape = Tape::new();
    let a = tape.constant(adjacency.clone());
    let h = tape.constant(xhat.clone());
    let t = topo_term(&mut tape, a, h)?;
    Ok(tape.value(t).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::gradcheck::{check_gradients, DEFAULT_EPS};
    use crate::graph::Labels;
    use crate::model::{quantize, ModelDims};
    use crate::tensor::{cosine, dot, squared_distance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn five_node_graph() -> TextAttributedGraph {
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let feats = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let ef = Tensor::randn(&[6, 4], 1.0, &mut rng);
        TextAttributedGraph::new("g", edges, feats, Some(ef), Labels::Edge(vec![0, 1, 0, 1, 0, 1])).unwrap()
    }

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 4,
            edge_features: true,
            hidden_dim: 6,
            heads: 2,
            tokens: 4,
        }
    }

    /// Parameters large enough that every term carries signal.
    fn lively_params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(&dims(), &mut rng).unwrap();
        for t in p.slots_mut() {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
        p
    }

    #[test]
    fn feat_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let xh = Tensor::randn(&[6, 3], 1.0, &mut rng);
        for gamma in [1.0, 2.0, 3.0] {
            let mut expect = 0.0;
            for i in 0..6 {
                let c = dot(x.row(i), xh.row(i))
                    / (dot(x.row(i), x.row(i)).sqrt() * dot(xh.row(i), xh.row(i)).sqrt());
                expect += (1.0 - c).powf(gamma);
            }
            expect /= 6.0;
            assert!((loss_feat(&x, &xh, gamma).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn topo_matches_scalar_loop() {
        let g = five_node_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xh = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let a = g.adjacency();
        let mut expect = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let d = a.at(i, j) - sigmoid(dot(xh.row(i), xh.row(j)));
                expect += d * d;
            }
        }
        assert!((loss_topo(&a, &xh).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_reconstruction_has_zero_feature_loss() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        assert!(loss_feat(&x, &x.scale(4.0), 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn breakdown_matches_independent_recomputation() {
        let g = five_node_graph();
        let p = lively_params(3);
        let mask = vec![true, false, false, true, false];
        let got = pretrain_loss(&g, &p, &mask, 2.0).unwrap();

        let z = crate::model::encode(&g, &p, &mask).unwrap();
        let q = quantize(&z, &p.codebook).unwrap();
        let xhat = q.z_q.matmul(&p.decoder.weight).unwrap();
        let xhat = Tensor::from_rows(
            &xhat
                .rows()
                .map(|r| r.iter().zip(p.decoder.bias.data()).map(|(a, b)| a + b).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
        .unwrap();
        let n = 5.0;
        let feat: f64 = (0..5)
            .map(|i| (1.0 - cosine(g.node_features.row(i), xhat.row(i))).powi(2))
            .sum::<f64>()
            / n;
        let vq: f64 = (0..5).map(|i| squared_distance(z.row(i), q.z_q.row(i))).sum::<f64>() / n;
        let topo = loss_topo(&g.adjacency(), &xhat).unwrap();
        assert!((got.feat - feat).abs() < 1e-12);
        assert!((got.topo - topo).abs() < 1e-12);
        assert!((got.codebook - vq).abs() < 1e-12);
        assert!((got.commitment - vq).abs() < 1e-12);
        assert!((got.total - (feat + topo + 2.0 * vq)).abs() < 1e-12);
        assert!(got.total >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = five_node_graph();
        let gt = GraphTensors::new(&g);
        let p = lively_params(5);
        let trace = build_pretrain_loss(&p, &[&gt], &[vec![false, true, false, false, false]], 2.0).unwrap();
        let report = check_gradients(&trace.tape, trace.terms.total, trace.param_vars(), DEFAULT_EPS).unwrap();
        assert!(report.passes(1e-4), "max rel error {}", report.max_rel_error());
    }

    #[test]
    fn codebook_term_does_not_reach_encoder() {
        let g = five_node_graph();
        let gt = GraphTensors::new(&g);
        let p = lively_params(6);
        let trace = build_pretrain_loss(&p, &[&gt], &[vec![false; 5]], 2.0).unwrap();
        let grads = trace.tape.backward(trace.terms.codebook, trace.param_vars()).unwrap();
        let enc_count = if dims().edge_features { 8 } else { 6 };
        for gr in &grads[..enc_count] {
            assert_eq!(gr.max_abs(), 0.0);
        }
        assert!(grads.last().unwrap().max_abs() > 0.0);
    }

    #[test]
    fn commitment_term_does_not_reach_tokens() {
        let g = five_node_graph();
        let gt = GraphTensors::new(&g);
        let p = lively_params(7);
        let trace = build_pretrain_loss(&p, &[&gt], &[vec![false; 5]], 2.0).unwrap();
        let grads = trace.tape.backward(trace.terms.commitment, trace.param_vars()).unwrap();
        assert_eq!(grads.last().unwrap().max_abs(), 0.0);
        assert!(grads[0].max_abs() > 0.0);
    }

    #[test]
    fn decoder_gradient_reaches_encoder_through_straight_through() {
        let g = five_node_graph();
        let gt = GraphTensors::new(&g);
        let p = lively_params(8);
        let trace = build_pretrain_loss(&p, &[&gt], &[vec![false; 5]], 2.0).unwrap();
        let grads = trace.tape.backward(trace.terms.feat, trace.param_vars()).unwrap();
        assert!(grads[0].max_abs() > 0.0);
    }
}
