//! Stochastic-block-model generator for multi-domain text-attributed graphs.
//!
//! Every domain draws one prototype vector per class. A node of class `c`
//! gets features `prototype[c] + feature_center + noise`, and node pairs are
//! connected with `intra_edge_prob` inside a class block and
//! `inter_edge_prob` across blocks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DomainTag, GraphLabel, LabelLevel, Labels, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::tensor::{standard_normal, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub feature_center: Vec<f64>,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    pub class_count: usize,
    pub nodes_per_graph: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub domains: Vec<DomainSpec>,
    pub graphs_per_domain: usize,
    pub label_level: LabelLevel,
    /// Standard deviation of the per-node Gaussian noise.
    pub noise_std: f64,
    /// Standard deviation of class prototype entries.
    pub prototype_scale: f64,
    /// Graph-level only: label graphs with a multi-hot class set.
    pub multi_label: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<usize> {
        let first = self
            .domains
            .first()
            .ok_or_else(|| Error::config("synthetic config lists no domains"))?;
        let d = first.feature_center.len();
        if d == 0 {
            return Err(Error::config("feature_center must be non-empty"));
        }
        if self.graphs_per_domain == 0 {
            return Err(Error::config("graphs_per_domain must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.prototype_scale >= 0.0) {
            return Err(Error::config("noise_std and prototype_scale must be non-negative"));
        }
        if self.multi_label && self.label_level != LabelLevel::Graph {
            return Err(Error::config("multi_label requires graph-level labels"));
        }
        for dom in &self.domains {
            for (name, p) in [("intra_edge_prob", dom.intra_edge_prob), ("inter_edge_prob", dom.inter_edge_prob)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!("{}: {name} = {p} is outside [0, 1]", dom.name)));
                }
            }
            if dom.class_count < 2 {
                return Err(Error::config(format!(
                    "{}: class_count must be at least 2, got {}",
                    dom.name, dom.class_count
                )));
            }
            if dom.nodes_per_graph == 0 {
                return Err(Error::config(format!("{}: nodes_per_graph must be positive", dom.name)));
            }
            if dom.feature_center.len() != d {
                return Err(Error::config(format!(
                    "{}: feature_center has {} entries, expected {d}",
                    dom.name,
                    dom.feature_center.len()
                )));
            }
            if dom.name.is_empty() || dom.name.contains(char::is_whitespace) {
                return Err(Error::config(format!("domain name `{}` must be one non-empty word", dom.name)));
            }
        }
        Ok(d)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    (0..d).map(|_| std * standard_normal(rng)).collect()
}

/// Generates `graphs_per_domain` graphs for every domain, in domain order.
pub fn synth_multidomain(config: &SynthConfig, seed: u64) -> Result<Vec<(TextAttributedGraph, DomainTag)>> {
    let d = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(config.domains.len() * config.graphs_per_domain);
    for dom in &config.domains {
        let prototypes: Vec<Vec<f64>> = (0..dom.class_count)
            .map(|_| gaussian_vec(&mut rng, d, config.prototype_scale))
            .collect();
        for _ in 0..config.graphs_per_domain {
            let g = synth_graph(config, dom, &prototypes, d, &mut rng)?;
            out.push((g, DomainTag(dom.name.clone())));
        }
    }
    Ok(out)
}

fn synth_graph(
    config: &SynthConfig,
    dom: &DomainSpec,
    prototypes: &[Vec<f64>],
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TextAttributedGraph> {
    let n = dom.nodes_per_graph;
    let c = dom.class_count;

    let mut graph_label = None;
    let classes: Vec<usize> = match config.label_level {
        LabelLevel::Graph => {
            let present: Vec<usize> = if config.multi_label {
                let mut set: Vec<usize> = (0..c).filter(|_| rng.random_bool(0.5)).collect();
                if set.is_empty() {
                    set.push(rng.random_range(0..c));
                }
                let mut bits = vec![false; c];
                for &k in &set {
                    bits[k] = true;
                }
                graph_label = Some(GraphLabel::MultiLabel(bits));
                set
            } else {
                let k = rng.random_range(0..c);
                graph_label = Some(GraphLabel::Class(k));
                vec![k]
            };
            (0..n).map(|_| present[rng.random_range(0..present.len())]).collect()
        }
        LabelLevel::Node | LabelLevel::Edge => {
            let mut cls: Vec<usize> = (0..n).map(|i| i % c).collect();
            cls.shuffle(rng);
            cls
        }
    };

    let mut feats = Vec::with_capacity(n * d);
    for &k in &classes {
        let noise = gaussian_vec(rng, d, config.noise_std);
        for j in 0..d {
            feats.push(prototypes[k][j] + dom.feature_center[j] + noise[j]);
        }
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if classes[u] == classes[v] {
                dom.intra_edge_prob
            } else {
                dom.inter_edge_prob
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let (labels, edge_features) = match config.label_level {
        LabelLevel::Node => (Labels::Node(classes), None),
        LabelLevel::Edge => {
            let mut ef = Vec::with_capacity(edges.len() * d);
            let mut labels = Vec::with_capacity(edges.len());
            for &(u, v) in &edges {
                let noise = gaussian_vec(rng, d, config.noise_std);
                for j in 0..d {
                    ef.push(0.5 * (prototypes[classes[u]][j] + prototypes[classes[v]][j]) + dom.feature_center[j] + noise[j]);
                }
                labels.push(usize::from(classes[u] == classes[v]));
            }
            (Labels::Edge(labels), Some(Tensor::matrix(edges.len(), d, ef)?))
        }
        LabelLevel::Graph => (Labels::Graph(graph_label.expect("graph label chosen above")), None),
    };

    TextAttributedGraph::new(dom.name.clone(), edges, Tensor::matrix(n, d, feats)?, edge_features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    fn two_domains(level: LabelLevel) -> SynthConfig {
        let mut a = vec![0.0; 8];
        a[0] = 3.0;
        let mut b = vec![0.0; 8];
        b[1] = 3.0;
        let dom = |name: &str, center: Vec<f64>| DomainSpec {
            name: name.into(),
            feature_center: center,
            intra_edge_prob: 0.3,
            inter_edge_prob: 0.02,
            class_count: 3,
            nodes_per_graph: 40,
        };
        SynthConfig {
            domains: vec![dom("alpha", a), dom("beta", b)],
            graphs_per_domain: 1,
            label_level: level,
            noise_std: 0.3,
            prototype_scale: 1.0,
            multi_label: false,
        }
    }

    fn mean_pair_cosine(a: &TextAttributedGraph, b: &TextAttributedGraph, same: bool) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..a.node_count {
            for j in 0..b.node_count {
                if same && i == j {
                    continue;
                }
                total += cosine(a.node_features.row(i), b.node_features.row(j));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn orthogonal_centers_separate_domains() {
        let graphs = synth_multidomain(&two_domains(LabelLevel::Node), 11).unwrap();
        let (a, b) = (&graphs[0].0, &graphs[1].0);
        let intra = 0.5 * (mean_pair_cosine(a, a, true) + mean_pair_cosine(b, b, true));
        let inter = mean_pair_cosine(a, b, false);
        assert!(inter < intra, "inter {inter} vs intra {intra}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = two_domains(LabelLevel::Edge);
        assert_eq!(synth_multidomain(&cfg, 5).unwrap(), synth_multidomain(&cfg, 5).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        let mut cfg = two_domains(LabelLevel::Node);
        cfg.domains[0].class_count = 1;
        assert!(matches!(synth_multidomain(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let mut cfg = two_domains(LabelLevel::Node);
        cfg.domains[1].inter_edge_prob = 1.5;
        assert!(matches!(synth_multidomain(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn every_class_appears() {
        let cfg = two_domains(LabelLevel::Node);
        for (g, _) in synth_multidomain(&cfg, 3).unwrap() {
            let Labels::Node(l) = &g.labels else { unreachable!() };
            for c in 0..3 {
                assert!(l.contains(&c));
            }
        }
    }
}
