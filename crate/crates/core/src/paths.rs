//! Loopless k-shortest path sets per OD pair.
//!
//! Paths are ranked by base-class free-flow cost, ties broken by fewer links
//! and then by the lexicographic order of the link-id sequence. Costs are
//! accumulated link by link from the origin, so the ranking is reproducible
//! bit for bit.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::network::{Network, OdMatrix};
use crate::{Error, Result};

/// Default number of path slots per OD pair.
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Path {
    pub links: Vec<usize>,
    /// Base-class time at zero flow.
    pub freeflow_cost: f64,
}

impl Path {
    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    fn rank_cmp(&self, other: &Self) -> Ordering {
        self.freeflow_cost
            .total_cmp(&other.freeflow_cost)
            .then(self.links.len().cmp(&other.links.len()))
            .then_with(|| self.links.cmp(&other.links))
    }
}

/// Exactly `k` slots; slots past the last real path are padded with empty
/// paths and `pad_mask[slot] == true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub origin: usize,
    pub dest: usize,
    pub paths: Vec<Path>,
    pub pad_mask: Vec<bool>,
    /// False when no path connects origin to dest (or origin == dest).
    pub reachable: bool,
}

impl PathSet {
    fn padded(origin: usize, dest: usize, mut paths: Vec<Path>, k: usize) -> Self {
        let real = paths.len();
        paths.resize_with(k, Path::default);
        let pad_mask = (0..k).map(|s| s >= real).collect();
        Self {
            origin,
            dest,
            paths,
            pad_mask,
            reachable: real > 0,
        }
    }

    pub fn real_count(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }

    pub fn real_paths(&self) -> impl Iterator<Item = &Path> {
        self.paths.iter().zip(&self.pad_mask).filter(|(_, pad)| !**pad).map(|(p, _)| p)
    }
}

/// One [`PathSet`] per ordered node pair, indexed `origin * N + dest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSets {
    nodes: usize,
    k: usize,
    sets: Vec<PathSet>,
}

impl PathSets {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, origin: usize, dest: usize) -> &PathSet {
        &self.sets[origin * self.nodes + dest]
    }

    pub fn pair(&self, pair: usize) -> &PathSet {
        &self.sets[pair]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, PathSet> {
        self.sets.iter()
    }

    /// Off-diagonal pairs without any path.
    pub fn unreachable_pairs(&self) -> Vec<(usize, usize)> {
        self.sets
            .iter()
            .filter(|s| s.origin != s.dest && !s.reachable)
            .map(|s| (s.origin, s.dest))
            .collect()
    }

    /// Pairs with positive demand in any class but no path.
    pub fn unserved_pairs(&self, demand: &OdMatrix) -> Vec<(usize, usize)> {
        self.sets
            .iter()
            .enumerate()
            .filter(|(r, s)| !s.reachable && demand.pair_total(*r) > 0.0)
            .map(|(_, s)| (s.origin, s.dest))
            .collect()
    }

    /// Flattened records for the line-delimited dump.
    pub fn records(&self) -> Vec<PathRecord> {
        let mut out = Vec::with_capacity(self.sets.len() * self.k);
        for set in &self.sets {
            if set.origin == set.dest {
                continue;
            }
            for (slot, path) in set.paths.iter().enumerate() {
                out.push(PathRecord {
                    origin: set.origin,
                    dest: set.dest,
                    slot,
                    links: path.links.clone(),
                    freeflow_cost: path.freeflow_cost,
                    pad: set.pad_mask[slot],
                });
            }
        }
        out
    }
}

/// One line of the path-set dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub origin: usize,
    pub dest: usize,
    pub slot: usize,
    pub links: Vec<usize>,
    pub freeflow_cost: f64,
    pub pad: bool,
}

#[derive(Debug, Clone)]
struct Label {
    cost: f64,
    links: Vec<usize>,
    node: usize,
}

impl Label {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.links.len().cmp(&other.links.len()))
            .then_with(|| self.links.cmp(&other.links))
    }
}

impl PartialEq for Label {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Label {}
impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Label {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

/// Best path under the ranking key from `start` (with the given prefix
/// already travelled) to `dest`, avoiding blocked nodes and links.
fn best_extension(
    network: &Network,
    start: Label,
    dest: usize,
    blocked_nodes: &[bool],
    blocked_links: &[bool],
) -> Option<Label> {
    let mut best: Vec<Option<Label>> = vec![None; network.node_count()];
    let mut heap = BinaryHeap::new();
    best[start.node] = Some(start.clone());
    heap.push(start);
    while let Some(label) = heap.pop() {
        if let Some(b) = &best[label.node] {
            if b.key_cmp(&label) == Ordering::Less {
                continue;
            }
        }
        if label.node == dest {
            return Some(label);
        }
        for &e in network.outgoing(label.node) {
            if !network.is_enabled(e) || blocked_links[e] {
                continue;
            }
            let head = network.link(e).head;
            if blocked_nodes[head] {
                continue;
            }
            let mut links = label.links.clone();
            links.push(e);
            let next = Label {
                cost: label.cost + network.link(e).freeflow_time,
                links,
                node: head,
            };
            let better = match &best[head] {
                None => true,
                Some(b) => next.key_cmp(b) == Ordering::Less,
            };
            if better {
                best[head] = Some(next.clone());
                heap.push(next);
            }
        }
    }
    None
}

fn node_sequence(network: &Network, origin: usize, links: &[usize]) -> Vec<usize> {
    let mut nodes = Vec::with_capacity(links.len() + 1);
    nodes.push(origin);
    nodes.extend(links.iter().map(|&e| network.link(e).head));
    nodes
}

/// Up to `k` loopless paths from `origin` to `dest` (Yen's algorithm under the
/// ranking key), padded to `k` slots.
pub fn k_shortest(network: &Network, origin: usize, dest: usize, k: usize) -> PathSet {
    if origin == dest || k == 0 {
        return PathSet::padded(origin, dest, Vec::new(), k);
    }
    let n = network.node_count();
    let l = network.link_count();
    let mut blocked_nodes = vec![false; n];
    let mut blocked_links = vec![false; l];
    blocked_nodes[origin] = true;
    let start = Label {
        cost: 0.0,
        links: Vec::new(),
        node: origin,
    };
    let Some(first) = best_extension(network, start, dest, &blocked_nodes, &blocked_links) else {
        return PathSet::padded(origin, dest, Vec::new(), k);
    };
    let mut accepted: Vec<Path> = vec![Path {
        links: first.links,
        freeflow_cost: first.cost,
    }];
    let mut candidates: Vec<Path> = Vec::new();

    while accepted.len() < k {
        let prev = accepted.last().expect("non-empty").clone();
        let prev_nodes = node_sequence(network, origin, &prev.links);
        let mut root_cost = 0.0;
        for spur in 0..prev.links.len() {
            let root = &prev.links[..spur];
            blocked_nodes.iter_mut().for_each(|b| *b = false);
            blocked_links.iter_mut().for_each(|b| *b = false);
            for &v in &prev_nodes[..=spur] {
                blocked_nodes[v] = true;
            }
            for p in &accepted {
                if p.links.len() > spur && &p.links[..spur] == root {
                    blocked_links[p.links[spur]] = true;
                }
            }
            let start = Label {
                cost: root_cost,
                links: root.to_vec(),
                node: prev_nodes[spur],
            };
            if let Some(found) = best_extension(network, start, dest, &blocked_nodes, &blocked_links) {
                let cand = Path {
                    links: found.links,
                    freeflow_cost: found.cost,
                };
                if !accepted.iter().any(|p| p.links == cand.links) && !candidates.iter().any(|p| p.links == cand.links) {
                    candidates.push(cand);
                }
            }
            root_cost += network.link(prev.links[spur]).freeflow_time;
        }
        if candidates.is_empty() {
            break;
        }
        let best = (0..candidates.len())
            .min_by(|&a, &b| candidates[a].rank_cmp(&candidates[b]))
            .expect("non-empty");
        accepted.push(candidates.swap_remove(best));
    }
    PathSet::padded(origin, dest, accepted, k)
}

/// Path sets for every ordered pair; diagonal pairs are fully padded.
pub fn build_path_sets(network: &Network, k: usize) -> PathSets {
    let n = network.node_count();
    let mut sets = Vec::with_capacity(n * n);
    for o in 0..n {
        for d in 0..n {
            sets.push(k_shortest(network, o, d, k));
        }
    }
    PathSets { nodes: n, k, sets }
}

/// Disables `removed` and rebuilds the path sets. Fails with the list of pairs
/// that carry demand but lost every path.
pub fn rebuild_after_removal(
    network: &Network,
    removed: &[usize],
    k: usize,
    demand: &OdMatrix,
) -> Result<(Network, PathSets)> {
    let reduced = network.with_disabled(removed)?;
    let sets = build_path_sets(&reduced, k);
    let unserved = sets.unserved_pairs(demand);
    if !unserved.is_empty() {
        return Err(Error::Infeasible(unserved));
    }
    Ok((reduced, sets))
}
