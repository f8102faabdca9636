//! Client partitioners.
//!
//! `partition_subgraph` is a greedy stand-in for METIS-style community
//! splitting:
//!
//! 1. The first seed is drawn from the rng; each further seed is the node
//!    farthest (BFS hops) from all chosen seeds, unreachable nodes counting
//!    as infinitely far and ties going to the lowest index.
//! 2. Parts grow one node at a time. The smallest part (lowest index on ties)
//!    attaches the frontier node that adds the fewest cut edges, ties going to
//!    the lowest node index. A part with an empty frontier takes the cheapest
//!    unassigned node anywhere.
//!
//! Growing the smallest part first keeps part sizes within one of each other.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClientDataset, DomainTag, LabelLevel, TextAttributedGraph};
use crate::error::{Error, Result};

/// Largest allowed part size relative to `ceil(n / k)`.
pub const BALANCE_TOLERANCE: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    /// `owner[v]` is the client of node `v`.
    Subgraph,
    /// `owner[i]` is the client of graph `i`.
    GraphLevel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionAssignment {
    pub kind: PartitionKind,
    pub client_count: usize,
    pub owner: Vec<usize>,
}

impl PartitionAssignment {
    /// Members of each client in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.client_count];
        for (item, &c) in self.owner.iter().enumerate() {
            parts[c].push(item);
        }
        parts
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// Edges whose endpoints belong to different clients.
    pub fn cut_size(&self, g: &TextAttributedGraph) -> usize {
        g.edges
            .iter()
            .filter(|&&(s, t)| self.owner[s] != self.owner[t])
            .count()
    }

    /// Induced per-client subgraphs of a subgraph-level assignment.
    pub fn induce(&self, g: &TextAttributedGraph) -> Result<Vec<TextAttributedGraph>> {
        if self.kind != PartitionKind::Subgraph || self.owner.len() != g.node_count {
            return Err(Error::contract("assignment does not partition this graph's nodes"));
        }
        self.members()
            .iter()
            .map(|nodes| g.induced_subgraph(nodes))
            .collect()
    }
}

fn neighbor_lists(g: &TextAttributedGraph) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); g.node_count];
    for &(s, t) in &g.edges {
        adj[s].push(t);
        if s != t {
            adj[t].push(s);
        }
    }
    adj
}

fn pick_seeds(adj: &[Vec<usize>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = adj.len();
    let mut seeds = vec![rng.random_range(0..n)];
    while seeds.len() < k {
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for &s in &seeds {
            dist[s] = 0;
            queue.push_back(s);
        }
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        let next = (0..n)
            .filter(|v| dist[*v] != 0)
            .max_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)))
            .expect("k <= n leaves an unchosen node");
        seeds.push(next);
    }
    seeds
}

pub fn partition_subgraph(g: &TextAttributedGraph, k: usize, seed: u64) -> Result<PartitionAssignment> {
    let n = g.node_count;
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot split {n} nodes into {k} parts")));
    }
    let adj = neighbor_lists(g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const FREE: usize = usize::MAX;
    let mut owner = vec![FREE; n];
    let mut sizes = vec![0usize; k];
    for (p, s) in pick_seeds(&adj, k, &mut rng).into_iter().enumerate() {
        owner[s] = p;
        sizes[p] = 1;
    }
    let mut assigned = k;

    let cost = |owner: &[usize], v: usize, p: usize| -> usize {
        adj[v].iter().filter(|&&u| owner[u] != FREE && owner[u] != p).count()
    };

    while assigned < n {
        let p = (0..k).min_by_key(|&p| (sizes[p], p)).expect("k >= 1");
        let frontier: Vec<usize> = (0..n)
            .filter(|&v| owner[v] == FREE && adj[v].iter().any(|&u| owner[u] == p))
            .collect();
        let pool: Vec<usize> = if frontier.is_empty() {
            (0..n).filter(|&v| owner[v] == FREE).collect()
        } else {
            frontier
        };
        let v = pool
            .into_iter()
            .min_by_key(|&v| (cost(&owner, v, p), v))
            .expect("an unassigned node remains");
        owner[v] = p;
        sizes[p] += 1;
        assigned += 1;
    }

    Ok(PartitionAssignment {
        kind: PartitionKind::Subgraph,
        client_count: k,
        owner,
    })
}

/// Seeded shuffle of graph indices followed by round-robin assignment.
pub fn partition_graph_level(graph_count: usize, k: usize, seed: u64) -> Result<PartitionAssignment> {
    if graph_count == 0 {
        return Err(Error::config("no graphs to partition"));
    }
    if k == 0 || k > graph_count {
        return Err(Error::config(format!("cannot split {graph_count} graphs into {k} clients")));
    }
    let mut order: Vec<usize> = (0..graph_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut owner = vec![0; graph_count];
    for (pos, &g) in order.iter().enumerate() {
        owner[g] = pos % k;
    }
    Ok(PartitionAssignment {
        kind: PartitionKind::GraphLevel,
        client_count: k,
        owner,
    })
}

/// Splits each domain's graphs across `clients_per_domain` clients.
///
/// Node- and edge-level graphs are each cut into that many subgraphs, client
/// `j` of a domain receiving part `j` of every graph. Graph-level domains
/// allocate whole graphs. Client ids run consecutively in domain order.
pub fn decentralize(
    graphs: Vec<(TextAttributedGraph, DomainTag)>,
    clients_per_domain: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if clients_per_domain == 0 {
        return Err(Error::config("clients_per_domain must be at least 1"));
    }
    let mut domains: Vec<(DomainTag, Vec<TextAttributedGraph>)> = Vec::new();
    for (g, tag) in graphs {
        match domains.iter_mut().find(|(t, _)| *t == tag) {
            Some((_, list)) => list.push(g),
            None => domains.push((tag, vec![g])),
        }
    }
    let mut clients = Vec::new();
    for (di, (tag, list)) in domains.into_iter().enumerate() {
        let dseed = seed.wrapping_add(di as u64);
        let mut parts: Vec<Vec<TextAttributedGraph>> = vec![Vec::new(); clients_per_domain];
        if list[0].label_level() == LabelLevel::Graph {
            let assignment = partition_graph_level(list.len(), clients_per_domain, dseed)?;
            for (g, &owner) in list.into_iter().zip(&assignment.owner) {
                parts[owner].push(g);
            }
        } else {
            for (gi, g) in list.iter().enumerate() {
                let assignment = partition_subgraph(g, clients_per_domain, dseed.wrapping_add(gi as u64))?;
                for (part, sub) in parts.iter_mut().zip(assignment.induce(g)?) {
                    part.push(sub);
                }
            }
        }
        for graphs in parts {
            clients.push(ClientDataset {
                client_id: clients.len(),
                domain: tag.clone(),
                graphs,
            });
        }
    }
    Ok(clients)
}
