//! Text-attributed graphs: data model, line-record IO, synthetic
//! multi-domain generation and client partitioning.
//!
//! Edges are stored once as `(src, dst)` pairs and treated as undirected for
//! message passing and adjacency reconstruction.

mod io;
mod partition;
mod synth;

use std::fmt;
use std::str::FromStr;

pub use io::{load_dataset, load_graph, save_dataset, save_graph, Manifest, ManifestEntry, MANIFEST_FILE};
pub use partition::{decentralize, partition_graph_level, partition_subgraph, BALANCE_TOLERANCE, PartitionAssignment, PartitionKind};
pub use synth::{synth_multidomain, DomainSpec, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelLevel {
    Node,
    Edge,
    Graph,
}

impl fmt::Display for LabelLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelLevel::Node => "node",
            LabelLevel::Edge => "edge",
            LabelLevel::Graph => "graph",
        })
    }
}

impl FromStr for LabelLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(LabelLevel::Node),
            "edge" => Ok(LabelLevel::Edge),
            "graph" => Ok(LabelLevel::Graph),
            other => Err(Error::config(format!("unknown label level `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GraphLabel {
    Class(usize),
    MultiLabel(Vec<bool>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    Node(Vec<usize>),
    Edge(Vec<usize>),
    Graph(GraphLabel),
}

impl Labels {
    pub fn level(&self) -> LabelLevel {
        match self {
            Labels::Node(_) => LabelLevel::Node,
            Labels::Edge(_) => LabelLevel::Edge,
            Labels::Graph(_) => LabelLevel::Graph,
        }
    }
}

/// Identifier of the domain a client dataset was drawn from.
///
/// Only used for diagnostics; aggregation never reads it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DomainTag(pub String);

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextAttributedGraph {
    /// Free-form tag written in the file header (the domain for synthetic data).
    pub tag: String,
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// `node_count × d`.
    pub node_features: Tensor,
    /// `edge_count × d` when present.
    pub edge_features: Option<Tensor>,
    pub labels: Labels,
}

impl TextAttributedGraph {
    pub fn new(
        tag: impl Into<String>,
        edges: Vec<(usize, usize)>,
        node_features: Tensor,
        edge_features: Option<Tensor>,
        labels: Labels,
    ) -> Result<Self> {
        let (node_count, _) = node_features.dims2()?;
        let g = Self {
            tag: tag.into(),
            node_count,
            edges,
            node_features,
            edge_features,
            labels,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count == 0 {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        let (n, d) = self.node_features.dims2()?;
        if n != self.node_count {
            return Err(Error::Validation(format!(
                "{} feature rows for {} nodes",
                n, self.node_count
            )));
        }
        for (i, &(s, t)) in self.edges.iter().enumerate() {
            if s >= self.node_count || t >= self.node_count {
                return Err(Error::Validation(format!(
                    "edge {i} ({s}, {t}) references a node outside 0..{}",
                    self.node_count
                )));
            }
        }
        if let Some(ef) = &self.edge_features {
            if ef.shape() != [self.edges.len(), d] {
                return Err(Error::Validation(format!(
                    "edge features have shape {:?}, expected [{}, {}]",
                    ef.shape(),
                    self.edges.len(),
                    d
                )));
            }
        }
        match &self.labels {
            Labels::Node(l) if l.len() != self.node_count => Err(Error::Validation(format!(
                "{} node labels for {} nodes",
                l.len(),
                self.node_count
            ))),
            Labels::Edge(l) if l.len() != self.edges.len() => Err(Error::Validation(format!(
                "{} edge labels for {} edges",
                l.len(),
                self.edges.len()
            ))),
            Labels::Graph(GraphLabel::MultiLabel(bits)) if bits.is_empty() => {
                Err(Error::Validation("empty multi-label vector".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.last_dim()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn label_level(&self) -> LabelLevel {
        self.labels.level()
    }

    /// Number of supervised instances at this graph's label level.
    pub fn instance_count(&self) -> usize {
        match self.labels {
            Labels::Node(_) => self.node_count,
            Labels::Edge(_) => self.edges.len(),
            Labels::Graph(_) => 1,
        }
    }

    /// Symmetric 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Tensor {
        let n = self.node_count;
        let mut a = Tensor::zeros(&[n, n]);
        let data = a.data_mut();
        for &(s, t) in &self.edges {
            data[s * n + t] = 1.0;
            data[t * n + s] = 1.0;
        }
        a
    }

    /// Incident edge ids of every node; a self-loop is listed once.
    pub fn incidence(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.node_count];
        for (e, &(s, t)) in self.edges.iter().enumerate() {
            inc[t].push(e);
            if s != t {
                inc[s].push(e);
            }
        }
        inc
    }

    /// Row-normalized neighbor averaging operator `P` with `(P H)_v` the mean
    /// of `h_u` over the incident edges of `v`. Isolated nodes get a zero row.
    pub fn neighbor_mean_operator(&self) -> Tensor {
        let n = self.node_count;
        let mut p = Tensor::zeros(&[n, n]);
        let inc = self.incidence();
        let data = p.data_mut();
        for (v, edges) in inc.iter().enumerate() {
            if edges.is_empty() {
                continue;
            }
            let w = 1.0 / edges.len() as f64;
            for &e in edges {
                let (s, t) = self.edges[e];
                let u = if t == v { s } else { t };
                data[v * n + u] += w;
            }
        }
        p
    }

    /// Mean incident edge feature per node (`n × d`), if edges carry features.
    pub fn mean_incident_edge_features(&self) -> Option<Tensor> {
        let ef = self.edge_features.as_ref()?;
        let d = ef.last_dim();
        let mut out = Tensor::zeros(&[self.node_count, d]);
        for (v, edges) in self.incidence().iter().enumerate() {
            if edges.is_empty() {
                continue;
            }
            let w = 1.0 / edges.len() as f64;
            let row = out.row_mut(v);
            for &e in edges {
                for (o, x) in row.iter_mut().zip(ef.row(e)) {
                    *o += w * x;
                }
            }
        }
        Some(out)
    }

    /// Subgraph induced by `nodes` (kept in the given order); only edges with
    /// both endpoints inside survive.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.node_count];
        for (new, &old) in nodes.iter().enumerate() {
            remap[old] = new;
        }
        let d = self.feature_dim();
        let mut feats = Vec::with_capacity(nodes.len() * d);
        for &v in nodes {
            feats.extend_from_slice(self.node_features.row(v));
        }
        let mut edges = Vec::new();
        let mut kept = Vec::new();
        for (e, &(s, t)) in self.edges.iter().enumerate() {
            if remap[s] != usize::MAX && remap[t] != usize::MAX {
                edges.push((remap[s], remap[t]));
                kept.push(e);
            }
        }
        let edge_features = match &self.edge_features {
            Some(ef) => {
                let mut data = Vec::with_capacity(kept.len() * d);
                for &e in &kept {
                    data.extend_from_slice(ef.row(e));
                }
                Some(Tensor::matrix(kept.len(), d, data)?)
            }
            None => None,
        };
        let labels = match &self.labels {
            Labels::Node(l) => Labels::Node(nodes.iter().map(|&v| l[v]).collect()),
            Labels::Edge(l) => Labels::Edge(kept.iter().map(|&e| l[e]).collect()),
            Labels::Graph(g) => Labels::Graph(g.clone()),
        };
        Self::new(
            self.tag.clone(),
            edges,
            Tensor::matrix(nodes.len(), d, feats)?,
            edge_features,
            labels,
        )
    }
}

/// One client's local graph collection.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub domain: DomainTag,
    pub graphs: Vec<TextAttributedGraph>,
}

impl ClientDataset {
    pub fn label_level(&self) -> Option<LabelLevel> {
        self.graphs.first().map(TextAttributedGraph::label_level)
    }

    /// Local training instances `M`: nodes, edges or graphs by label level.
    pub fn sample_count(&self) -> usize {
        self.graphs.iter().map(TextAttributedGraph::instance_count).sum()
    }

    pub fn node_count(&self) -> usize {
        self.graphs.iter().map(|g| g.node_count).sum()
    }
}
