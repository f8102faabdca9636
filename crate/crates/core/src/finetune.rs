//! Task heads on a frozen backbone, splits and metrics.
//!
//! Instances are embedded with quantized backbone outputs (no masking):
//! nodes directly, edges as the elementwise product of their endpoints,
//! graphs as the mean over nodes. A prototype head (softmax of negative
//! squared distances to class means) and a linear softmax head are averaged.
//! Multi-label graph tasks use per-label positive/negative prototypes and a
//! sigmoid linear path.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{ClientDataset, GraphLabel, LabelLevel, Labels, TextAttributedGraph};
use crate::model::{encode, quantize, ModelParams, TensorArchive, Optimizer, OptimizerConfig, OptimizerKind, INIT_STD};
use crate::tensor::{softmax, squared_distance, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    AucRoc,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::AucRoc => "auc_roc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "auc_roc" => Ok(Metric::AucRoc),
            other => Err(Error::config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// Stratified fractions for train and validation; the rest is test.
    Fractions { train: f64, val: f64 },
    /// `k` training instances per class; the rest halves into val and test.
    FewShot { k: usize },
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SplitSpec::Fractions { train, val } => {
                if !(train > 0.0 && val >= 0.0 && train + val < 1.0) {
                    return Err(Error::config(format!(
                        "split fractions train={train} val={val} must be positive and leave a test share"
                    )));
                }
            }
            SplitSpec::FewShot { k: 0 } => return Err(Error::config("few-shot k must be positive")),
            SplitSpec::FewShot { .. } => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub level: LabelLevel,
    pub metric: Metric,
    pub split: SplitSpec,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.metric == Metric::AucRoc && self.level != LabelLevel::Graph {
            return Err(Error::config("auc_roc is only used for graph-level multi-label tasks"));
        }
        if matches!(self.split, SplitSpec::FewShot { .. }) && self.metric == Metric::AucRoc {
            return Err(Error::config("few-shot splits need single-label classes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Class(Vec<usize>),
    MultiLabel(Vec<Vec<bool>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Class(c) => c.len(),
            Targets::MultiLabel(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Class(c) => Targets::Class(idx.iter().map(|&i| c[i]).collect()),
            Targets::MultiLabel(m) => Targets::MultiLabel(idx.iter().map(|&i| m[i].clone()).collect()),
        }
    }

    /// Renumbers single-label classes to `0..c` over the classes present,
    /// keeping their order. Multi-label targets are returned unchanged.
    pub fn compact(&self) -> Targets {
        match self {
            Targets::Class(c) => {
                let mut present = c.clone();
                present.sort_unstable();
                present.dedup();
                Targets::Class(c.iter().map(|y| present.binary_search(y).expect("present")).collect())
            }
            Targets::MultiLabel(_) => self.clone(),
        }
    }

    /// Number of classes (single-label) or labels (multi-label).
    pub fn width(&self) -> usize {
        match self {
            Targets::Class(c) => c.iter().max().map_or(0, |m| m + 1),
            Targets::MultiLabel(m) => m.first().map_or(0, Vec::len),
        }
    }
}

/// Embeddings and targets of every supervised instance of a client.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub embeddings: Tensor,
    pub targets: Targets,
}

impl InstanceSet {
    /// Drops class indices that no instance uses, see [`Targets::compact`].
    pub fn compact_classes(self) -> InstanceSet {
        InstanceSet {
            targets: self.targets.compact(),
            embeddings: self.embeddings,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Result<InstanceSet> {
        let d = self.embeddings.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.embeddings.row(i));
        }
        Ok(InstanceSet {
            embeddings: Tensor::matrix(idx.len(), d, data)?,
            targets: self.targets.subset(idx),
        })
    }
}

/// Quantized node embeddings of one graph, `n × hidden_dim`.
pub fn node_embeddings(g: &TextAttributedGraph, backbone: &ModelParams) -> Result<Tensor> {
    let z = encode(g, backbone, &vec![false; g.node_count])?;
    Ok(quantize(&z, &backbone.codebook)?.z_q)
}

/// Embeddings of the supervised instances of `g` at `level`.
pub fn embed_instances(g: &TextAttributedGraph, backbone: &ModelParams, level: LabelLevel) -> Result<Tensor> {
    if g.label_level() != level {
        return Err(Error::contract(format!(
            "graph carries {} labels but {level} embeddings were requested",
            g.label_level()
        )));
    }
    let zq = node_embeddings(g, backbone)?;
    let d = zq.last_dim();
    match level {
        LabelLevel::Node => Ok(zq),
        LabelLevel::Edge => {
            let mut data = Vec::with_capacity(g.edge_count() * d);
            for &(s, t) in &g.edges {
                data.extend(zq.row(s).iter().zip(zq.row(t)).map(|(a, b)| a * b));
            }
            Tensor::matrix(g.edge_count(), d, data)
        }
        LabelLevel::Graph => {
            let mut mean = vec![0.0; d];
            for row in zq.rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            let n = zq.row_count() as f64;
            Tensor::matrix(1, d, mean.into_iter().map(|m| m / n).collect())
        }
    }
}

/// Embeds every labeled instance of a client, graphs in order.
pub fn collect_instances(data: &ClientDataset, backbone: &ModelParams) -> Result<InstanceSet> {
    let level = data
        .label_level()
        .ok_or_else(|| Error::contract(format!("client {} has no graphs", data.client_id)))?;
    let d = backbone.dims().hidden_dim;
    let mut emb = Vec::new();
    let mut classes = Vec::new();
    let mut multi = Vec::new();
    for g in &data.graphs {
        emb.extend_from_slice(embed_instances(g, backbone, level)?.data());
        match &g.labels {
            Labels::Node(l) | Labels::Edge(l) => classes.extend_from_slice(l),
            Labels::Graph(GraphLabel::Class(c)) => classes.push(*c),
            Labels::Graph(GraphLabel::MultiLabel(bits)) => multi.push(bits.clone()),
        }
    }
    if !classes.is_empty() && !multi.is_empty() {
        return Err(Error::contract("client mixes single- and multi-label graphs"));
    }
    let targets = if multi.is_empty() {
        Targets::Class(classes)
    } else {
        if multi.iter().any(|m| m.len() != multi[0].len()) {
            return Err(Error::contract("multi-label vectors have different lengths"));
        }
        Targets::MultiLabel(multi)
    };
    Ok(InstanceSet {
        embeddings: Tensor::matrix(targets.len(), d, emb)?,
        targets,
    })
}

/// Class means, `class_count × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeHead {
    pub prototypes: Tensor,
}

pub fn fit_prototypes(embeddings: &Tensor, labels: &[usize], class_count: usize) -> Result<PrototypeHead> {
    let (m, d) = embeddings.dims2()?;
    if labels.len() != m {
        return Err(Error::dim(format!("{} labels for {m} embeddings", labels.len())));
    }
    let mut sums = vec![0.0; class_count * d];
    let mut counts = vec![0usize; class_count];
    for (row, &y) in embeddings.rows().zip(labels) {
        if y >= class_count {
            return Err(Error::contract(format!("label {y} outside 0..{class_count}")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    let empty: Vec<usize> = (0..class_count).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        return Err(Error::contract(format!("no training instances for classes {empty:?}")));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(PrototypeHead {
        prototypes: Tensor::matrix(class_count, d, sums)?,
    })
}

impl PrototypeHead {
    /// `softmax_c(-‖z - p_c‖²)`.
    pub fn probabilities(&self, z: &[f64]) -> Vec<f64> {
        let neg: Vec<f64> = self.prototypes.rows().map(|p| -squared_distance(z, p)).collect();
        softmax(&neg)
    }
}

/// Per-label positive and negative means; `None` where a side is absent
/// from training.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelPrototypes {
    pub positive: Vec<Option<Vec<f64>>>,
    pub negative: Vec<Option<Vec<f64>>>,
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for r in rows {
        n += 1;
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

pub fn fit_multilabel_prototypes(embeddings: &Tensor, labels: &[Vec<bool>]) -> Result<MultiLabelPrototypes> {
    let (m, d) = embeddings.dims2()?;
    if labels.len() != m {
        return Err(Error::dim(format!("{} label rows for {m} embeddings", labels.len())));
    }
    let width = labels.first().map_or(0, Vec::len);
    let side = |want: bool| -> Vec<Option<Vec<f64>>> {
        (0..width)
            .map(|l| {
                mean_rows(
                    embeddings.rows().zip(labels).filter(|(_, y)| y[l] == want).map(|(r, _)| r),
                    d,
                )
            })
            .collect()
    };
    Ok(MultiLabelPrototypes {
        positive: side(true),
        negative: side(false),
    })
}

impl MultiLabelPrototypes {
    /// Probability that each label is on, from the two prototypes.
    pub fn probabilities(&self, z: &[f64]) -> Vec<f64> {
        self.positive
            .iter()
            .zip(&self.negative)
            .map(|(p, n)| match (p, n) {
                (Some(p), Some(n)) => softmax(&[-squared_distance(z, p), -squared_distance(z, n)])[0],
                (Some(_), None) => 1.0,
                _ => 0.0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `hidden_dim × outputs`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn zeros(d: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let c = self.bias.numel();
        (0..c)
            .map(|k| self.bias.data()[k] + z.iter().enumerate().map(|(i, v)| v * self.weight.at(i, k)).sum::<f64>())
            .collect()
    }
}

/// Averages the two probability vectors and renormalizes.
pub fn predict(z: &[f64], proto: &PrototypeHead, linear: &LinearHead) -> Vec<f64> {
    let p = proto.probabilities(z);
    let q = softmax(&linear.logits(z));
    let mixed: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    let total: f64 = mixed.iter().sum();
    mixed.into_iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Heads {
    SingleLabel { proto: PrototypeHead, linear: LinearHead },
    MultiLabel { proto: MultiLabelPrototypes, linear: LinearHead },
}

impl Heads {
    pub fn linear(&self) -> &LinearHead {
        match self {
            Heads::SingleLabel { linear, .. } | Heads::MultiLabel { linear, .. } => linear,
        }
    }

    /// Class probabilities (single-label) or per-label on-probabilities,
    /// one row per embedding.
    pub fn predict(&self, embeddings: &Tensor) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = match self {
            Heads::SingleLabel { proto, linear } => embeddings.rows().map(|z| predict(z, proto, linear)).collect(),
            Heads::MultiLabel { proto, linear } => embeddings
                .rows()
                .map(|z| {
                    let p = proto.probabilities(z);
                    let q = linear.logits(z).into_iter().map(crate::autodiff::sigmoid);
                    p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect()
                })
                .collect(),
        };
        let width = self.linear().bias.numel();
        Tensor::matrix(rows.len(), width, rows.concat())
    }
}

fn optional_rows(rows: &[Option<Vec<f64>>], d: usize) -> (Tensor, Vec<u64>) {
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut present = Vec::with_capacity(rows.len());
    for r in rows {
        match r {
            Some(v) => data.extend_from_slice(v),
            None => data.extend(std::iter::repeat_n(0.0, d)),
        }
        present.push(u64::from(r.is_some()));
    }
    (Tensor::new(vec![rows.len(), d], data).expect("rows × d"), present)
}

fn read_optional_rows(t: &Tensor, present: &[u64]) -> Result<Vec<Option<Vec<f64>>>> {
    if t.row_count() != present.len() {
        return Err(Error::Validation("prototype presence flags do not match the prototype rows".into()));
    }
    Ok(t.rows().zip(present).map(|(r, &p)| (p != 0).then(|| r.to_vec())).collect())
}

impl Heads {
    /// Stores the heads under `<prefix>.*` names.
    pub fn write_archive(&self, prefix: &str, archive: &mut TensorArchive) {
        let linear = self.linear();
        archive.tensors.push((format!("{prefix}.linear.weight"), linear.weight.clone()));
        archive.tensors.push((format!("{prefix}.linear.bias"), linear.bias.clone()));
        match self {
            Heads::SingleLabel { proto, .. } => {
                archive.tensors.push((format!("{prefix}.prototypes"), proto.prototypes.clone()));
            }
            Heads::MultiLabel { proto, .. } => {
                let d = linear.weight.row_count();
                for (side, rows) in [("positive", &proto.positive), ("negative", &proto.negative)] {
                    let (t, present) = optional_rows(rows, d);
                    archive.tensors.push((format!("{prefix}.{side}"), t));
                    archive.counters.push((format!("{prefix}.{side}.present"), present));
                }
            }
        }
    }

    pub fn read_archive(prefix: &str, archive: &TensorArchive) -> Result<Heads> {
        let get = |name: String| {
            archive
                .tensor(&name)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("head archive is missing `{name}`")))
        };
        let linear = LinearHead {
            weight: get(format!("{prefix}.linear.weight"))?,
            bias: get(format!("{prefix}.linear.bias"))?,
        };
        if let Some(p) = archive.tensor(&format!("{prefix}.prototypes")) {
            return Ok(Heads::SingleLabel {
                proto: PrototypeHead { prototypes: p.clone() },
                linear,
            });
        }
        let side = |name: &str| -> Result<Vec<Option<Vec<f64>>>> {
            let flags = archive
                .counter(&format!("{prefix}.{name}.present"))
                .ok_or_else(|| Error::Validation(format!("head archive is missing `{prefix}.{name}.present`")))?;
            read_optional_rows(&get(format!("{prefix}.{name}"))?, flags)
        };
        Ok(Heads::MultiLabel {
            proto: MultiLabelPrototypes {
                positive: side("positive")?,
                negative: side("negative")?,
            },
            linear,
        })
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (m, _) = probs.dims2()?;
    if labels.len() != m || m == 0 {
        return Err(Error::dim(format!("{} labels for {m} prediction rows", labels.len())));
    }
    let hits = probs
        .rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / m as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mann-Whitney statistic of one score column; `None` if only one class
/// is present.
pub fn auc_single(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tied runs, summed for positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Mean AUC over label columns that contain both classes.
pub fn auc_roc(scores: &Tensor, labels: &[Vec<bool>]) -> Result<f64> {
    let (m, width) = scores.dims2()?;
    if labels.len() != m || labels.iter().any(|l| l.len() != width) {
        return Err(Error::dim("label matrix does not match the score matrix"));
    }
    let aucs: Vec<f64> = (0..width)
        .filter_map(|c| {
            let col: Vec<f64> = scores.rows().map(|r| r[c]).collect();
            let lab: Vec<bool> = labels.iter().map(|l| l[c]).collect();
            auc_single(&col, &lab)
        })
        .collect();
    if aucs.is_empty() {
        return Err(Error::contract("no label column has both positive and negative instances"));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

pub fn evaluate(probs: &Tensor, targets: &Targets, metric: Metric) -> Result<f64> {
    match (metric, targets) {
        (Metric::Accuracy, Targets::Class(y)) => accuracy(probs, y),
        (Metric::AucRoc, Targets::MultiLabel(y)) => auc_roc(probs, y),
        (Metric::AucRoc, Targets::Class(y)) => {
            let width = probs.last_dim();
            let onehot: Vec<Vec<bool>> = y.iter().map(|&c| (0..width).map(|k| k == c).collect()).collect();
            auc_roc(probs, &onehot)
        }
        (Metric::Accuracy, Targets::MultiLabel(_)) => {
            Err(Error::contract("accuracy is undefined for multi-label targets"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        groups[c].push(i);
    }
    groups
}

/// `k` random training instances per class; the remainder is shuffled and
/// halved into validation (first half) and test.
pub fn few_shot_split(labels: &[usize], k: usize, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = by_class(labels);
    let short: Vec<usize> = (0..groups.len()).filter(|&c| groups[c].len() < k).collect();
    if !short.is_empty() {
        return Err(Error::contract(format!("classes {short:?} have fewer than {k} instances")));
    }
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        train.extend_from_slice(&g[..k]);
        rest.extend_from_slice(&g[k..]);
    }
    rest.shuffle(&mut rng);
    let test = rest.split_off(rest.len() / 2);
    train.sort_unstable();
    Ok(Split { train, val: rest, test })
}

/// Per-key shuffled split with `round(train·n)` (at least one) training and
/// `round(val·n)` validation instances per key.
pub fn stratified_split(keys: &[usize], train: f64, val: f64, seed: u64) -> Result<Split> {
    SplitSpec::Fractions { train, val }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut g in by_class(keys) {
        if g.is_empty() {
            continue;
        }
        g.shuffle(&mut rng);
        let n = g.len() as f64;
        let n_train = ((train * n).round() as usize).clamp(1, g.len());
        let n_val = ((val * n).round() as usize).min(g.len() - n_train);
        split.train.extend_from_slice(&g[..n_train]);
        split.val.extend_from_slice(&g[n_train..n_train + n_val]);
        split.test.extend_from_slice(&g[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

pub fn make_split(targets: &Targets, spec: &SplitSpec, seed: u64) -> Result<Split> {
    match (spec, targets) {
        (SplitSpec::FewShot { k }, Targets::Class(y)) => few_shot_split(y, *k, seed),
        (SplitSpec::FewShot { .. }, Targets::MultiLabel(_)) => {
            Err(Error::contract("few-shot splits need single-label targets"))
        }
        (SplitSpec::Fractions { train, val }, Targets::Class(y)) => stratified_split(y, *train, *val, seed),
        (SplitSpec::Fractions { train, val }, Targets::MultiLabel(m)) => {
            stratified_split(&vec![0; m.len()], *train, *val, seed)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-2,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub heads: Heads,
    /// Training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation score per epoch (empty without a validation set).
    pub val_trace: Vec<f64>,
}

fn fit_heads_prototypes(train: &InstanceSet, width: usize, linear: LinearHead) -> Result<Heads> {
    Ok(match &train.targets {
        Targets::Class(y) => Heads::SingleLabel {
            proto: fit_prototypes(&train.embeddings, y, width)?,
            linear,
        },
        Targets::MultiLabel(y) => Heads::MultiLabel {
            proto: fit_multilabel_prototypes(&train.embeddings, y)?,
            linear,
        },
    })
}

/// Trains the linear head by cross-entropy on the averaged prediction,
/// refitting prototypes at the start of every epoch.
pub fn finetune(
    train: &InstanceSet,
    val: Option<&InstanceSet>,
    width: usize,
    metric: Metric,
    config: &FinetuneConfig,
) -> Result<FinetuneResult> {
    if train.targets.is_empty() {
        return Err(Error::contract("fine-tuning needs at least one training instance"));
    }
    let (m, d) = train.embeddings.dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut linear = LinearHead {
        weight: Tensor::randn(&[d, width], INIT_STD, &mut rng),
        bias: Tensor::zeros(&[width]),
    };
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Adam,
        lr: config.lr,
        weight_decay: config.weight_decay,
    })?;
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_trace = Vec::new();

    for _ in 0..config.epochs {
        let heads = fit_heads_prototypes(train, width, linear.clone())?;
        let proto_probs: Vec<f64> = match &heads {
            Heads::SingleLabel { proto, .. } => train.embeddings.rows().flat_map(|z| proto.probabilities(z)).collect(),
            Heads::MultiLabel { proto, .. } => train.embeddings.rows().flat_map(|z| proto.probabilities(z)).collect(),
        };
        let mut tape = Tape::new();
        let w = tape.param(linear.weight.clone());
        let b = tape.param(linear.bias.clone());
        let x = tape.constant(train.embeddings.clone());
        let p = tape.constant(Tensor::matrix(m, width, proto_probs)?);
        let xw = tape.matmul(x, w)?;
        let logits = tape.add_bias(xw, b)?;
        let loss = match &train.targets {
            Targets::Class(y) => {
                let q = tape.softmax(logits)?;
                let pq = tape.add(p, q)?;
                let mixed = tape.scale(pq, 0.5)?;
                let logp = tape.ln(mixed)?;
                let mut onehot = vec![0.0; m * width];
                for (i, &c) in y.iter().enumerate() {
                    onehot[i * width + c] = 1.0;
                }
                let oh = tape.constant(Tensor::matrix(m, width, onehot)?);
                let picked = tape.mul(logp, oh)?;
                let total = tape.sum(picked)?;
                tape.scale(total, -1.0 / m as f64)?
            }
            Targets::MultiLabel(y) => {
                let q = tape.sigmoid(logits)?;
                let pq = tape.add(p, q)?;
                let mixed = tape.scale(pq, 0.5)?;
                let on = tape.ln(mixed)?;
                let off_p = tape.affine(mixed, -1.0, 1.0)?;
                let off = tape.ln(off_p)?;
                let yv: Vec<f64> = y.iter().flat_map(|r| r.iter().map(|&b| f64::from(u8::from(b)))).collect();
                let notv: Vec<f64> = yv.iter().map(|v| 1.0 - v).collect();
                let yt = tape.constant(Tensor::matrix(m, width, yv)?);
                let nt = tape.constant(Tensor::matrix(m, width, notv)?);
                let a = tape.mul(on, yt)?;
                let bb = tape.mul(off, nt)?;
                let both = tape.add(a, bb)?;
                let total = tape.sum(both)?;
                tape.scale(total, -1.0 / (m * width) as f64)?
            }
        };
        train_loss.push(tape.value(loss).item());
        let grads = tape.backward(loss, &[w, b])?;
        opt.step(vec![&mut linear.weight, &mut linear.bias], &grads)?;
        if let Some(v) = val.filter(|v| !v.targets.is_empty()) {
            let h = fit_heads_prototypes(train, width, linear.clone())?;
            val_trace.push(evaluate(&h.predict(&v.embeddings)?, &v.targets, metric)?);
        }
    }
    let heads = fit_heads_prototypes(train, width, linear)?;
    Ok(FinetuneResult {
        heads,
        train_loss,
        val_trace,
    })
}

/// Split, fine-tune and test one client on a frozen backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientEvaluation {
    pub client_id: usize,
    pub level: LabelLevel,
    pub metric: Metric,
    pub test_score: f64,
    pub finetune: FinetuneResult,
    pub split: Split,
}

pub fn evaluate_client(
    data: &ClientDataset,
    backbone: &ModelParams,
    task: &TaskSpec,
    config: &FinetuneConfig,
) -> Result<ClientEvaluation> {
    task.validate()?;
    let level = data
        .label_level()
        .ok_or_else(|| Error::contract(format!("client {} has no graphs", data.client_id)))?;
    if level != task.level {
        return Err(Error::contract(format!(
            "client {} has {level} labels, task expects {}",
            data.client_id, task.level
        )));
    }
    let all = collect_instances(data, backbone)?.compact_classes();
    let width = all.targets.width();
    let split = make_split(&all.targets, &task.split, config.seed)?;
    if split.test.is_empty() {
        return Err(Error::contract(format!("client {} has no test instances", data.client_id)));
    }
    let train = all.subset(&split.train)?;
    let val = all.subset(&split.val)?;
    let test = all.subset(&split.test)?;
    let ft = finetune(&train, Some(&val), width, task.metric, config)?;
    let test_score = evaluate(&ft.heads.predict(&test.embeddings)?, &test.targets, task.metric)?;
    Ok(ClientEvaluation {
        client_id: data.client_id,
        level,
        metric: task.metric,
        test_score,
        finetune: ft,
        split,
    })
}

pub const METRICS_HEADER: &str = "run_id,client_id,level,metric,value,seed";

/// One metrics CSV line (no trailing newline).
pub fn metrics_row(run_id: &str, eval: &ClientEvaluation, seed: u64) -> String {
    format!(
        "{run_id},{},{},{},{},{seed}",
        eval.client_id, eval.level, eval.metric, eval.test_score
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use proptest::prelude::*;

    #[test]
    fn prototype_examples() {
        let e = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(fit_prototypes(&e, &[1, 0], 2).unwrap().prototypes.data(), &[3.0, 4.0, 1.0, 2.0]);
        let e = Tensor::matrix(4, 1, vec![0.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(fit_prototypes(&e, &[0, 0, 1, 1], 2).unwrap().prototypes.data(), &[1.0, 15.0]);
        let err = fit_prototypes(&e, &[0, 0, 2, 2], 3).unwrap_err();
        assert!(matches!(&err, Error::Contract(m) if m.contains("[1]")));
    }

    #[test]
    fn prototypes_match_groupby_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::randn(&[20, 3], 1.0, &mut rng);
        let labels: Vec<usize> = (0..20).map(|i| (i * 7) % 3).collect();
        let head = fit_prototypes(&e, &labels, 3).unwrap();
        for c in 0..3 {
            let members: Vec<&[f64]> = (0..20).filter(|&i| labels[i] == c).map(|i| e.row(i)).collect();
            for k in 0..3 {
                let mean = members.iter().map(|r| r[k]).sum::<f64>() / members.len() as f64;
                assert!((head.prototypes.at(c, k) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_combined_prediction() {
        let proto = PrototypeHead {
            prototypes: Tensor::matrix(2, 1, vec![0.0, 2.0_f64.ln().sqrt()]).unwrap(),
        };
        let p = proto.probabilities(&[0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        let out = predict(&[0.0], &proto, &LinearHead::zeros(1, 2));
        assert!((out[0] - 7.0 / 12.0).abs() < 1e-12);
        assert!((out[1] - 5.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn far_prototypes_concentrate() {
        let proto = PrototypeHead {
            prototypes: Tensor::matrix(3, 1, vec![0.0, 30.0, -30.0]).unwrap(),
        };
        assert!(proto.probabilities(&[0.0])[0] > 1.0 - 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_single(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(auc_single(&[0.9, 0.3, 0.8, 0.1], &[true, true, false, false]), Some(0.75));
        assert_eq!(auc_single(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc_single(&[0.5, 0.1], &[true, true]), None);
        let s = Tensor::matrix(2, 1, vec![0.1, 0.2]).unwrap();
        assert!(matches!(auc_roc(&s, &[vec![true], vec![true]]), Err(Error::Contract(_))));
    }

    #[test]
    fn accuracy_ties_take_lowest_class() {
        let p = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.2, 0.8]).unwrap();
        assert_eq!(accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn few_shot_examples() {
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let s = few_shot_split(&labels, 2, 4).unwrap();
        assert_eq!(s.train.len(), 6);
        assert_eq!(s, few_shot_split(&labels, 2, 4).unwrap());
        let labels = vec![0, 0, 1, 1, 2, 2, 2, 2, 2];
        let s = few_shot_split(&labels, 2, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len() + s.test.len()), (6, 3));
        assert!(matches!(few_shot_split(&[0, 1, 1], 2, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn stratified_split_partitions_indices() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let s = stratified_split(&labels, 0.6, 0.2, 5).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (18, 6, 6));
    }

    fn toy_backbone() -> ModelParams {
        let dims = ModelDims {
            feature_dim: 2,
            edge_features: false,
            hidden_dim: 2,
            heads: 1,
            tokens: 2,
        };
        let mut p = ModelParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for layer in &mut p.encoder.layers {
            layer.w_self = Tensor::identity(2);
            layer.w_neighbor = Tensor::zeros(&[2, 2]);
        }
        p.codebook.tokens = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        p.codebook.projection = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 3.0]).unwrap();
        p
    }

    fn toy_graph(labels: Labels) -> TextAttributedGraph {
        let feats = Tensor::matrix(3, 2, vec![0.9, 0.1, 0.0, 1.5, 2.0, 0.0]).unwrap();
        TextAttributedGraph::new("t", vec![(0, 1), (1, 1)], feats, None, labels).unwrap()
    }

    #[test]
    fn hand_embeddings() {
        let bb = toy_backbone();
        // Identity encoder with ReLU: nodes map to tokens 0, 1, 0.
        // Projected tokens: [1, 0]·P = [1, 1]; [0, 2]·P = [0, 6].
        let nodes = embed_instances(&toy_graph(Labels::Node(vec![0, 1, 0])), &bb, LabelLevel::Node).unwrap();
        assert_eq!(nodes.data(), &[1.0, 1.0, 0.0, 6.0, 1.0, 1.0]);
        let edges = embed_instances(&toy_graph(Labels::Edge(vec![0, 1])), &bb, LabelLevel::Edge).unwrap();
        assert_eq!(edges.data(), &[0.0, 6.0, 0.0, 36.0]);
        let graph = embed_instances(&toy_graph(Labels::Graph(GraphLabel::Class(0))), &bb, LabelLevel::Graph).unwrap();
        for (a, b) in graph.data().iter().zip([2.0 / 3.0, 8.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            embed_instances(&toy_graph(Labels::Node(vec![0; 3])), &bb, LabelLevel::Edge),
            Err(Error::Contract(_))
        ));
    }

    fn separable(seed: u64) -> InstanceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::randn(&[40, 2], 0.3, &mut rng);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { [-2.0, 0.0] } else { [2.0, 0.0] };
            data.push(center[0] + noise.at(i, 0));
            data.push(center[1] + noise.at(i, 1));
            y.push(c);
        }
        InstanceSet {
            embeddings: Tensor::matrix(40, 2, data).unwrap(),
            targets: Targets::Class(y),
        }
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let mut good = 0;
        for seed in 0..5 {
            let train = separable(seed);
            let cfg = FinetuneConfig {
                epochs: 50,
                lr: 1e-1,
                seed,
                ..FinetuneConfig::default()
            };
            let ft = finetune(&train, None, 2, Metric::Accuracy, &cfg).unwrap();
            let acc = evaluate(&ft.heads.predict(&train.embeddings).unwrap(), &train.targets, Metric::Accuracy).unwrap();
            if acc == 1.0 {
                good += 1;
            }
        }
        assert!(good >= 4, "{good}/5 seeds reached 1.0");
    }

    #[test]
    fn zero_lr_keeps_linear_head() {
        let train = separable(1);
        let cfg = FinetuneConfig {
            epochs: 5,
            lr: 0.0,
            seed: 2,
            ..FinetuneConfig::default()
        };
        let ft = finetune(&train, None, 2, Metric::Accuracy, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(ft.heads.linear().weight, Tensor::randn(&[2, 2], INIT_STD, &mut rng));
        let Heads::SingleLabel { proto, .. } = &ft.heads else { unreachable!() };
        assert_eq!(proto.prototypes.row_count(), 2);
    }

    #[test]
    fn loss_decreases_and_multilabel_runs() {
        let train = separable(3);
        let ft = finetune(&train, Some(&train), 2, Metric::Accuracy, &FinetuneConfig { epochs: 30, ..Default::default() }).unwrap();
        assert!(ft.train_loss[29] < ft.train_loss[0]);
        assert_eq!(ft.val_trace.len(), 30);

        let y: Vec<Vec<bool>> = (0..40).map(|i| vec![i % 2 == 0, i % 4 == 0]).collect();
        let ml = InstanceSet {
            embeddings: train.embeddings.clone(),
            targets: Targets::MultiLabel(y),
        };
        let ft = finetune(&ml, None, 2, Metric::AucRoc, &FinetuneConfig { epochs: 30, ..Default::default() }).unwrap();
        let probs = ft.heads.predict(&ml.embeddings).unwrap();
        assert!(evaluate(&probs, &ml.targets, Metric::AucRoc).unwrap() > 0.5);
    }

    proptest! {
        #[test]
        fn predictions_are_distributions(seed in any::<u64>(), z in prop::collection::vec(-3.0f64..3.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let proto = PrototypeHead { prototypes: Tensor::randn(&[4, 3], 1.0, &mut rng) };
            let lin = LinearHead { weight: Tensor::randn(&[3, 4], 1.0, &mut rng), bias: Tensor::randn(&[4], 1.0, &mut rng) };
            let p = predict(&z, &proto, &lin);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn prototype_probs_translation_invariant(seed in any::<u64>(), shift in prop::collection::vec(-5.0f64..5.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let protos = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let z = Tensor::randn(&[3], 1.0, &mut rng);
            let moved = Tensor::from_rows(&protos.rows().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
            let zm: Vec<f64> = z.data().iter().zip(&shift).map(|(a, b)| a + b).collect();
            let a = PrototypeHead { prototypes: protos }.probabilities(z.data());
            let b = PrototypeHead { prototypes: moved }.probabilities(&zm);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn accuracy_ignores_positive_scaling(seed in any::<u64>(), c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = Tensor::randn(&[10, 3], 1.0, &mut rng).map(f64::abs);
            let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
            prop_assert_eq!(accuracy(&probs, &labels).unwrap(), accuracy(&probs.scale(c), &labels).unwrap());
        }
    }

    #[test]
    fn heads_round_trip_through_archive() {
        let train = separable(4);
        let cfg = FinetuneConfig { epochs: 3, ..Default::default() };
        let single = finetune(&train, None, 2, Metric::Accuracy, &cfg).unwrap().heads;
        let ml = InstanceSet {
            embeddings: train.embeddings.clone(),
            targets: Targets::MultiLabel((0..40).map(|i| vec![i % 2 == 0, true]).collect()),
        };
        let multi = finetune(&ml, None, 2, Metric::AucRoc, &cfg).unwrap().heads;
        let mut archive = TensorArchive::default();
        single.write_archive("c0", &mut archive);
        multi.write_archive("c1", &mut archive);
        let archive = TensorArchive::from_bytes(&archive.to_bytes()).unwrap();
        assert_eq!(Heads::read_archive("c0", &archive).unwrap(), single);
        let back = Heads::read_archive("c1", &archive).unwrap();
        assert_eq!(back, multi);
        let Heads::MultiLabel { proto, .. } = back else { unreachable!() };
        assert!(proto.negative[1].is_none());
    }

    #[test]
    fn compaction_renumbers_present_classes() {
        assert_eq!(Targets::Class(vec![3, 1, 3, 5]).compact(), Targets::Class(vec![1, 0, 1, 2]));
        assert_eq!(Targets::Class(vec![1, 1]).compact().width(), 1);
    }
}
