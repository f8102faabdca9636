//! Line-record graph files and dataset manifests.
//!
//! ```text
//! #<tag> d=<int> level=<node|edge|graph>
//! N <id> <f1> ... <fd> [label]
//! E <src> <dst> [<f1> ... <fd>] [label]
//! G <label...>
//! ```
//!
//! A label column is present exactly when the header level matches the
//! record kind. A `G` line with a single value is a class index; with more
//! values it is a 0/1 multi-label vector.
//!
//! A dataset directory holds one file per graph plus `manifest.txt`:
//!
//! ```text
//! #manifest clients=<K>
//! <file> <client> <domain>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ClientDataset, DomainTag, GraphLabel, LabelLevel, Labels, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";

struct LineParser<'a> {
    path: &'a Path,
    line: usize,
}

impl LineParser<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn usize(&self, tok: &str, what: &str) -> Result<usize> {
        tok.parse()
            .map_err(|_| self.err(format!("invalid {what} `{tok}`")))
    }

    fn f64(&self, tok: &str) -> Result<f64> {
        let v: f64 = tok
            .parse()
            .map_err(|_| self.err(format!("invalid number `{tok}`")))?;
        if !v.is_finite() {
            return Err(self.err(format!("non-finite value `{tok}`")));
        }
        Ok(v)
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<TextAttributedGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text, path)
}

fn parse_graph(text: &str, path: &Path) -> Result<TextAttributedGraph> {
    let mut header: Option<(String, usize, LabelLevel)> = None;
    let mut nodes: BTreeMap<usize, (Vec<f64>, Option<usize>)> = BTreeMap::new();
    let mut edges = Vec::new();
    let mut edge_feats: Vec<Vec<f64>> = Vec::new();
    let mut edge_labels = Vec::new();
    let mut graph_label = None;

    for (i, raw) in text.lines().enumerate() {
        let p = LineParser { path, line: i + 1 };
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let kind = toks.next().unwrap_or_default();
        let rest: Vec<&str> = toks.collect();

        let Some((_, d, level)) = &header else {
            let Some(tag) = kind.strip_prefix('#') else {
                return Err(p.err("expected `#<tag> d=<int> level=<level>` header"));
            };
            let mut dim = None;
            let mut lvl = None;
            for tok in &rest {
                if let Some(v) = tok.strip_prefix("d=") {
                    dim = Some(p.usize(v, "feature dimension")?);
                } else if let Some(v) = tok.strip_prefix("level=") {
                    lvl = Some(v.parse::<LabelLevel>().map_err(|e| p.err(e.to_string()))?);
                } else {
                    return Err(p.err(format!("unknown header field `{tok}`")));
                }
            }
            let dim = dim.ok_or_else(|| p.err("header lacks d=<int>"))?;
            if dim == 0 {
                return Err(p.err("feature dimension must be positive"));
            }
            let lvl = lvl.ok_or_else(|| p.err("header lacks level=<level>"))?;
            header = Some((tag.to_string(), dim, lvl));
            continue;
        };
        let (d, level) = (*d, *level);

        match kind {
            "N" => {
                let with_label = level == LabelLevel::Node;
                let want = 1 + d + usize::from(with_label);
                if rest.len() != want {
                    return Err(p.err(format!("node record needs {want} fields, got {}", rest.len())));
                }
                let id = p.usize(rest[0], "node id")?;
                let feats = rest[1..=d].iter().map(|t| p.f64(t)).collect::<Result<Vec<_>>>()?;
                let label = if with_label { Some(p.usize(rest[d + 1], "label")?) } else { None };
                if nodes.insert(id, (feats, label)).is_some() {
                    return Err(p.err(format!("duplicate node id {id}")));
                }
            }
            "E" => {
                if rest.len() < 2 {
                    return Err(p.err("edge record needs <src> <dst>"));
                }
                let s = p.usize(rest[0], "edge source")?;
                let t = p.usize(rest[1], "edge target")?;
                let with_label = level == LabelLevel::Edge;
                let tail = &rest[2..];
                let n_feat = tail.len().checked_sub(usize::from(with_label)).ok_or_else(|| p.err("edge record lacks its label"))?;
                if n_feat != 0 && n_feat != d {
                    return Err(p.err(format!("edge record has {n_feat} feature values, expected 0 or {d}")));
                }
                let has_feats = n_feat == d;
                if !edges.is_empty() && has_feats != !edge_feats.is_empty() {
                    return Err(p.err("either every edge carries features or none does"));
                }
                if has_feats {
                    edge_feats.push(tail[..d].iter().map(|t| p.f64(t)).collect::<Result<Vec<_>>>()?);
                }
                if with_label {
                    edge_labels.push(p.usize(tail[n_feat], "label")?);
                }
                edges.push((s, t));
            }
            "G" => {
                if level != LabelLevel::Graph {
                    return Err(p.err("graph label in a non graph-level file"));
                }
                if graph_label.is_some() {
                    return Err(p.err("more than one graph label line"));
                }
                graph_label = Some(match rest.as_slice() {
                    [] => return Err(p.err("empty graph label")),
                    [one] => GraphLabel::Class(p.usize(one, "label")?),
                    many => GraphLabel::MultiLabel(
                        many.iter()
                            .map(|t| match *t {
                                "0" => Ok(false),
                                "1" => Ok(true),
                                other => Err(p.err(format!("multi-label bits must be 0/1, got `{other}`"))),
                            })
                            .collect::<Result<Vec<_>>>()?,
                    ),
                });
            }
            other => return Err(p.err(format!("unknown record kind `{other}`"))),
        }
    }

    let (tag, d, level) = header.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "empty graph file".into(),
    })?;
    let n = nodes.len();
    if let Some((&last, _)) = nodes.iter().next_back() {
        if last + 1 != n {
            return Err(Error::Validation(format!(
                "node ids must be 0..{n} without gaps, found id {last}"
            )));
        }
    }
    let mut feats = Vec::with_capacity(n * d);
    let mut node_labels = Vec::with_capacity(n);
    for (_, (f, l)) in nodes {
        feats.extend(f);
        node_labels.extend(l);
    }
    let labels = match level {
        LabelLevel::Node => Labels::Node(node_labels),
        LabelLevel::Edge => Labels::Edge(edge_labels),
        LabelLevel::Graph => Labels::Graph(
            graph_label.ok_or_else(|| Error::Validation("graph-level file lacks a G line".into()))?,
        ),
    };
    let edge_features = if edge_feats.is_empty() {
        None
    } else {
        Some(Tensor::matrix(edges.len(), d, edge_feats.concat())?)
    };
    TextAttributedGraph::new(tag, edges, Tensor::matrix(n, d, feats)?, edge_features, labels)
}

pub fn render_graph(g: &TextAttributedGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#{} d={} level={}", g.tag, g.feature_dim(), g.label_level());
    for v in 0..g.node_count {
        let _ = write!(out, "N {v}");
        for x in g.node_features.row(v) {
            let _ = write!(out, " {x}");
        }
        if let Labels::Node(l) = &g.labels {
            let _ = write!(out, " {}", l[v]);
        }
        out.push('\n');
    }
    for (e, (s, t)) in g.edges.iter().enumerate() {
        let _ = write!(out, "E {s} {t}");
        if let Some(ef) = &g.edge_features {
            for x in ef.row(e) {
                let _ = write!(out, " {x}");
            }
        }
        if let Labels::Edge(l) = &g.labels {
            let _ = write!(out, " {}", l[e]);
        }
        out.push('\n');
    }
    match &g.labels {
        Labels::Graph(GraphLabel::Class(c)) => {
            let _ = writeln!(out, "G {c}");
        }
        Labels::Graph(GraphLabel::MultiLabel(bits)) => {
            out.push('G');
            for b in bits {
                out.push_str(if *b { " 1" } else { " 0" });
            }
            out.push('\n');
        }
        _ => {}
    }
    out
}

pub fn save_graph(g: &TextAttributedGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_graph(g)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub client: usize,
    pub domain: DomainTag,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub clients: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut clients = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let p = LineParser { path: &path, line: i + 1 };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if clients.is_none() {
                match toks.as_slice() {
                    ["#manifest", k] => {
                        let k = k
                            .strip_prefix("clients=")
                            .ok_or_else(|| p.err("expected clients=<K>"))?;
                        clients = Some(p.usize(k, "client count")?);
                    }
                    _ => return Err(p.err("expected `#manifest clients=<K>` header")),
                }
                continue;
            }
            let [file, client, domain] = toks.as_slice() else {
                return Err(p.err("manifest rows are `<file> <client> <domain>`"));
            };
            entries.push(ManifestEntry {
                file: file.to_string(),
                client: p.usize(client, "client id")?,
                domain: DomainTag(domain.to_string()),
            });
        }
        let clients = clients.ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: 0,
            message: "empty manifest".into(),
        })?;
        if let Some(bad) = entries.iter().find(|e| e.client >= clients) {
            return Err(Error::Validation(format!(
                "manifest assigns {} to client {} of {}",
                bad.file, bad.client, clients
            )));
        }
        Ok(Self { clients, entries })
    }

    pub fn render(&self) -> String {
        let mut out = format!("#manifest clients={}\n", self.clients);
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {}", e.file, e.client, e.domain);
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }
}

/// Writes every client's graphs as `c<client>_g<index>.tag` plus a manifest.
pub fn save_dataset(dir: impl AsRef<Path>, clients: &[ClientDataset]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for c in clients {
        for (j, g) in c.graphs.iter().enumerate() {
            let file = format!("c{}_g{}.tag", c.client_id, j);
            save_graph(g, dir.join(&file))?;
            entries.push(ManifestEntry {
                file,
                client: c.client_id,
                domain: c.domain.clone(),
            });
        }
    }
    let manifest = Manifest {
        clients: clients.len(),
        entries,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Loads a dataset directory into per-client collections ordered by client id.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<ClientDataset>> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    let mut clients: Vec<ClientDataset> = (0..manifest.clients)
        .map(|client_id| ClientDataset {
            client_id,
            domain: DomainTag(String::new()),
            graphs: Vec::new(),
        })
        .collect();
    for entry in &manifest.entries {
        let path: PathBuf = dir.join(&entry.file);
        let g = load_graph(&path)?;
        let c = &mut clients[entry.client];
        c.domain = entry.domain.clone();
        c.graphs.push(g);
    }
    if let Some(empty) = clients.iter().find(|c| c.graphs.is_empty()) {
        return Err(Error::Validation(format!(
            "client {} has no graphs in the manifest",
            empty.client_id
        )));
    }
    Ok(clients)
}
