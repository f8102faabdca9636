//! Deliberately naive reimplementations used as oracles.
//!
//! Everything here works on nested `Vec`s with explicit loops and builds
//! every weight vector in full before using it. Nothing is shared with the
//! production code paths beyond the input types.

#![allow(clippy::needless_range_loop)]

use crate::aggregation::ClientUpload;

/// `[head][token][dim]`.
pub type Codebook = Vec<Vec<Vec<f64>>>;

pub fn codebook(upload: &ClientUpload) -> Codebook {
    let s = upload.tokens.shape();
    let (h, n, d) = (s[0], s[1], s[2]);
    let data = upload.tokens.data();
    (0..h)
        .map(|hh| (0..n).map(|j| (0..d).map(|k| data[(hh * n + j) * d + k]).collect()).collect())
        .collect()
}

fn frequencies(upload: &ClientUpload, head: usize) -> Vec<u64> {
    upload.frequencies.head(head).to_vec()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let mut total = 0.0;
    for x in &e {
        total += x;
    }
    e.iter().map(|x| x / total).collect()
}

/// First index of the smallest squared distance, per row and head.
pub fn nearest_tokens(z: &[Vec<f64>], tokens: &Codebook) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for row in z {
        let mut per_head = Vec::new();
        for head in tokens {
            let dists: Vec<f64> = head
                .iter()
                .map(|t| {
                    let mut s = 0.0;
                    for k in 0..t.len() {
                        s += (row[k] - t[k]) * (row[k] - t[k]);
                    }
                    s
                })
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            per_head.push(dists.iter().position(|&x| x == min).unwrap());
        }
        out.push(per_head);
    }
    out
}

pub fn loss_feat(x: &[Vec<f64>], xhat: &[Vec<f64>], gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        total += (1.0 - cos(&x[i], &xhat[i])).powf(gamma);
    }
    total / x.len() as f64
}

pub fn loss_topo(adj: &[Vec<f64>], xhat: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..adj.len() {
        for j in 0..adj.len() {
            let mut d = 0.0;
            for k in 0..xhat[i].len() {
                d += xhat[i][k] * xhat[j][k];
            }
            let r = adj[i][j] - 1.0 / (1.0 + (-d).exp());
            total += r * r;
        }
    }
    total
}

/// `exp(-‖z-p_c‖²) / Σ exp(-‖z-p_c'‖²)`.
pub fn prototype_probabilities(prototypes: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            let mut s = 0.0;
            for k in 0..z.len() {
                s += (z[k] - p[k]) * (z[k] - p[k]);
            }
            -s
        })
        .collect();
    naive_softmax(&neg)
}

pub fn token_similarity(a: &Codebook, b: &Codebook, head: usize) -> Vec<Vec<f64>> {
    let n = a[head].len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = cos(&a[head][i], &b[head][j]);
        }
    }
    s
}

/// `S` where `freq_b[j] >= freq_a[i]`, negative infinity elsewhere.
pub fn masked_similarity(s: &[Vec<f64>], freq_a: &[u64], freq_b: &[u64]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![f64::NEG_INFINITY; s[0].len()]; s.len()];
    for i in 0..s.len() {
        for j in 0..s[i].len() {
            if freq_b[j] >= freq_a[i] {
                out[i][j] = s[i][j];
            }
        }
    }
    out
}

pub fn phase1_codebooks(uploads: &[ClientUpload], lambda: f64) -> Vec<Codebook> {
    let books: Vec<Codebook> = uploads.iter().map(codebook).collect();
    let mut result = Vec::new();
    for a in 0..uploads.len() {
        let mut book = books[a].clone();
        for h in 0..book.len() {
            let n = book[h].len();
            for i in 0..n {
                // Candidate list over every (client, token) pair.
                let mut logits = Vec::new();
                let mut candidates = Vec::new();
                for b in 0..uploads.len() {
                    let s = token_similarity(&books[a], &books[b], h);
                    let m = masked_similarity(&s, &frequencies(&uploads[a], h), &frequencies(&uploads[b], h));
                    for j in 0..n {
                        logits.push(m[i][j]);
                        candidates.push(books[b][h][j].clone());
                    }
                }
                let weights = naive_softmax(&logits);
                let d = book[h][i].len();
                for k in 0..d {
                    let mut mixed = 0.0;
                    for c in 0..candidates.len() {
                        mixed += weights[c] * candidates[c][k];
                    }
                    book[h][i][k] = lambda * books[a][h][i][k] + (1.0 - lambda) * mixed;
                }
            }
        }
        result.push(book);
    }
    result
}

pub fn client_similarity(a: &Codebook, b: &Codebook) -> f64 {
    let mut per_head = 0.0;
    for h in 0..a.len() {
        let s = token_similarity(a, b, h);
        let mut acc = 0.0;
        for row in &s {
            let mut best = row[0];
            for &v in row {
                if v > best {
                    best = v;
                }
            }
            acc += best;
        }
        per_head += acc / s.len() as f64;
    }
    per_head / a.len() as f64
}

pub fn similarity_matrix(uploads: &[ClientUpload]) -> Vec<Vec<f64>> {
    let books: Vec<Codebook> = uploads.iter().map(codebook).collect();
    let mut delta = vec![vec![0.0; books.len()]; books.len()];
    for a in 0..books.len() {
        for b in 0..books.len() {
            delta[a][b] = client_similarity(&books[a], &books[b]);
        }
    }
    delta
}

/// Flattened non-codebook parameters per client.
pub fn flat_other(upload: &ClientUpload) -> Vec<f64> {
    let mut out = Vec::new();
    for t in &upload.other.0 {
        out.extend_from_slice(t.data());
    }
    out
}

pub fn personalized(uploads: &[ClientUpload], delta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flats: Vec<Vec<f64>> = uploads.iter().map(flat_other).collect();
    let mut out = Vec::new();
    for a in 0..uploads.len() {
        let w = naive_softmax(&delta[a]);
        let mut acc = vec![0.0; flats[0].len()];
        for b in 0..uploads.len() {
            for k in 0..acc.len() {
                acc[k] += w[b] * flats[b][k];
            }
        }
        out.push(acc);
    }
    out
}

pub fn distinctiveness(delta: &[Vec<f64>]) -> Vec<f64> {
    let k = delta.len() as f64;
    let mut out = Vec::new();
    for row in delta {
        let mut s = 0.0;
        for v in row {
            s += v;
        }
        out.push(1.0 - s / k);
    }
    out
}

/// Weighted flat average of tokens followed by other parameters.
pub fn weighted_average(uploads: &[ClientUpload], weights: &[f64]) -> Vec<f64> {
    let flats: Vec<Vec<f64>> = uploads
        .iter()
        .map(|u| {
            let mut f = u.tokens.data().to_vec();
            f.extend(flat_other(u));
            f
        })
        .collect();
    let mut acc = vec![0.0; flats[0].len()];
    for (f, w) in flats.iter().zip(weights) {
        for k in 0..acc.len() {
            acc[k] += w * f[k];
        }
    }
    acc
}

pub fn phase2_global(uploads: &[ClientUpload], distinctiveness: &[f64]) -> Vec<f64> {
    weighted_average(uploads, &naive_softmax(distinctiveness))
}

pub fn fedavg(uploads: &[ClientUpload]) -> Vec<f64> {
    let mut total = 0.0;
    for u in uploads {
        total += u.sample_count as f64;
    }
    let w: Vec<f64> = uploads.iter().map(|u| u.sample_count as f64 / total).collect();
    weighted_average(uploads, &w)
}

/// Fraction of rows whose first maximal entry equals the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut hits = 0;
    for (row, &y) in probs.iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if row.iter().position(|&v| v == max) == Some(y) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// Pair-counting AUC: share of (positive, negative) pairs ranked correctly,
/// ties counted half. `None` without both classes.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| good / pairs)
}
