use super::{Codebook, ParamVars, TokenCounts};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// `indices[v][h]`: token chosen for row `v` in head `h`.
    pub indices: Vec<Vec<usize>>,
    /// Projected quantized embedding, `n × hidden_dim`.
    pub z_q: Tensor,
    /// Selections made by this call.
    pub counts: TokenCounts,
}

/// Nearest token per head for every row of `z`; ties go to the lowest index.
pub fn nearest_tokens(z: &Tensor, tokens: &Tensor) -> Result<Vec<Vec<usize>>> {
    let (_, d) = z.dims2()?;
    let &[heads, n_tok, d_tok] = tokens.shape() else {
        return Err(Error::dim(format!("tokens must be rank 3, got {:?}", tokens.shape())));
    };
    if d != d_tok {
        return Err(Error::dim(format!("embedding width {d} vs token width {d_tok}")));
    }
    if n_tok == 0 {
        return Err(Error::contract("codebook has no tokens"));
    }
    Ok(z.rows()
        .map(|row| {
            (0..heads)
                .map(|h| {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for j in 0..n_tok {
                        let dist = squared_distance(row, tokens.row(h * n_tok + j));
                        if dist < best_d {
                            best = j;
                            best_d = dist;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect())
}

fn tally(indices: &[Vec<usize>], heads: usize, n_tok: usize) -> TokenCounts {
    let mut counts = TokenCounts::zeros(heads, n_tok);
    for row in indices {
        for (h, &j) in row.iter().enumerate() {
            counts.increment(h, j);
        }
    }
    counts
}

/// Multi-head quantization followed by the shared projection.
pub fn quantize(z: &Tensor, codebook: &Codebook) -> Result<Quantized> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let tokens = tape.constant(codebook.tokens.clone());
    let proj = tape.constant(codebook.projection.clone());
    let (zq, indices) = quantize_vars(&mut tape, zv, tokens, proj)?;
    let counts = tally(&indices, codebook.heads(), codebook.size());
    Ok(Quantized {
        indices,
        z_q: tape.value(zq).clone(),
        counts,
    })
}

/// Records quantization of `z` on the tape. Returns `z_q` and the chosen indices.
pub(crate) fn quantize_on_tape(tape: &mut Tape, pv: &ParamVars, z: Var) -> Result<(Var, Vec<Vec<usize>>, TokenCounts)> {
    let (zq, indices) = quantize_vars(tape, z, pv.tokens, pv.projection)?;
    let shape = tape.value(pv.tokens).shape();
    let counts = tally(&indices, shape[0], shape[1]);
    Ok((zq, indices, counts))
}

fn quantize_vars(tape: &mut Tape, z: Var, tokens: Var, projection: Var) -> Result<(Var, Vec<Vec<usize>>)> {
    let indices = nearest_tokens(tape.value(z), tape.value(tokens))?;
    let (heads, n_tok) = {
        let s = tape.value(tokens).shape();
        (s[0], s[1])
    };
    let parts = (0..heads)
        .map(|h| {
            let rows = indices.iter().map(|r| h * n_tok + r[h]).collect();
            tape.gather_rows(tokens, rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = tape.concat_cols(parts)?;
    let zq = tape.matmul(cat, projection)?;
    Ok((zq, indices))
}
