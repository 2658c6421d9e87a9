//! Graph model, demand and flow containers, and the BPR cost primitives.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::paths::{PathSet, PathSets};
use crate::{Error, Result};

/// BPR congestion coefficient.
pub const BPR_ALPHA: f64 = 0.15;
/// Largest node count accepted by [`generate_manhattan`].
pub const MAX_GRID_NODES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleClass {
    pub id: usize,
    pub name: String,
    /// Scales every base free-flow time; exactly 1 for the base class.
    pub freeflow_multiplier: f64,
}

impl VehicleClass {
    pub fn new(id: usize, name: impl Into<String>, freeflow_multiplier: f64) -> Self {
        Self {
            id,
            name: name.into(),
            freeflow_multiplier,
        }
    }

    pub fn car() -> Self {
        Self::new(0, "car", 1.0)
    }

    pub fn truck() -> Self {
        Self::new(1, "truck", 1.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: usize,
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    pub capacity: f64,
    /// Base-class free-flow time.
    pub freeflow_time: f64,
}

/// Directed road network. Disabled links keep their ids and are treated as
/// absent by every cost and path operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    nodes: usize,
    links: Vec<Link>,
    classes: Vec<VehicleClass>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
    disabled: Vec<bool>,
}

impl Network {
    pub fn new(nodes: usize, links: Vec<Link>, classes: Vec<VehicleClass>) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Validation("network has no nodes".into()));
        }
        validate_classes(&classes)?;
        let mut adjacency = vec![Vec::new(); nodes];
        for (i, link) in links.iter().enumerate() {
            if link.id != i {
                return Err(Error::Validation(format!("link at position {i} has id {}", link.id)));
            }
            if link.tail >= nodes || link.head >= nodes {
                return Err(Error::Validation(format!(
                    "link {i} ({} -> {}) references a node outside 0..{nodes}",
                    link.tail, link.head
                )));
            }
            if link.tail == link.head {
                return Err(Error::Validation(format!("link {i} is a self-loop on node {}", link.tail)));
            }
            if !(link.capacity > 0.0) || !(link.freeflow_time > 0.0) {
                return Err(Error::Validation(format!(
                    "link {i} needs positive capacity and free-flow time"
                )));
            }
            if !link.length.is_finite() || link.length < 0.0 {
                return Err(Error::Validation(format!("link {i} has invalid length")));
            }
            if adjacency[link.tail].iter().any(|&e: &usize| links[e].head == link.head) {
                return Err(Error::Validation(format!(
                    "duplicate link ({} -> {})",
                    link.tail, link.head
                )));
            }
            adjacency[link.tail].push(i);
        }
        let disabled = vec![false; links.len()];
        Ok(Self {
            nodes,
            links,
            classes,
            adjacency,
            disabled,
        })
    }

    pub fn single_class(nodes: usize, links: Vec<Link>) -> Result<Self> {
        Self::new(nodes, links, vec![VehicleClass::car()])
    }

    /// Rebuilds the adjacency lists after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        let disabled = core::mem::take(&mut self.disabled);
        let mut net = Self::new(self.nodes, self.links, self.classes)?;
        if disabled.len() == net.links.len() {
            net.disabled = disabled;
        }
        Ok(net)
    }

    pub fn with_classes(&self, classes: Vec<VehicleClass>) -> Result<Self> {
        validate_classes(&classes)?;
        let mut net = self.clone();
        net.classes = classes;
        Ok(net)
    }

    /// Copy of the network with exactly `removed` disabled (on top of
    /// anything already disabled).
    pub fn with_disabled(&self, removed: &[usize]) -> Result<Self> {
        let mut net = self.clone();
        for &e in removed {
            if e >= net.links.len() {
                return Err(Error::Validation(format!("link id {e} out of range")));
            }
            net.disabled[e] = true;
        }
        Ok(net)
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn pair_count(&self) -> usize {
        self.nodes * self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: usize) -> &Link {
        &self.links[id]
    }

    pub fn classes(&self) -> &[VehicleClass] {
        &self.classes
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn is_enabled(&self, link: usize) -> bool {
        !self.disabled[link]
    }

    pub fn disabled_links(&self) -> Vec<usize> {
        (0..self.links.len()).filter(|&e| self.disabled[e]).collect()
    }

    pub fn enabled_link_count(&self) -> usize {
        self.disabled.iter().filter(|d| !**d).count()
    }

    /// Enabled direct link `tail -> head`, if any.
    pub fn link_between(&self, tail: usize, head: usize) -> Option<usize> {
        self.adjacency[tail]
            .iter()
            .copied()
            .find(|&e| self.links[e].head == head && !self.disabled[e])
    }

    pub fn freeflow_time(&self, link: usize, class: usize) -> f64 {
        self.links[link].freeflow_time * self.classes[class].freeflow_multiplier
    }

    /// Base-class congested time of every link at the given total flows.
    /// Disabled links get `f64::INFINITY`.
    pub fn base_link_costs(&self, total_flows: &[f64]) -> Vec<f64> {
        self.links
            .iter()
            .zip(total_flows)
            .map(|(l, &v)| {
                if self.disabled[l.id] {
                    f64::INFINITY
                } else {
                    l.freeflow_time * bpr_factor(v, l.capacity)
                }
            })
            .collect()
    }
}

fn validate_classes(classes: &[VehicleClass]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Validation("at least one vehicle class is required".into()));
    }
    for (i, c) in classes.iter().enumerate() {
        if c.id != i {
            return Err(Error::Validation(format!("class at position {i} has id {}", c.id)));
        }
        if !(c.freeflow_multiplier >= 1.0) || !c.freeflow_multiplier.is_finite() {
            return Err(Error::Validation(format!("class {i} multiplier must be >= 1")));
        }
    }
    if classes[0].freeflow_multiplier != 1.0 {
        return Err(Error::Validation("base class multiplier must be exactly 1".into()));
    }
    Ok(())
}

/// Per-class OD demand, row index `tail * N + head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdMatrix {
    nodes: usize,
    classes: usize,
    demand: Vec<f64>,
}

impl OdMatrix {
    pub fn zeros(nodes: usize, classes: usize) -> Self {
        Self {
            nodes,
            classes,
            demand: vec![0.0; nodes * nodes * classes],
        }
    }

    pub fn from_vec(nodes: usize, classes: usize, demand: Vec<f64>) -> Result<Self> {
        if demand.len() != nodes * nodes * classes {
            return Err(Error::Shape {
                op: "OdMatrix::from_vec",
                left: vec![demand.len()],
                right: vec![nodes * nodes, classes],
            });
        }
        let m = Self { nodes, classes, demand };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for pair in 0..self.nodes * self.nodes {
            for z in 0..self.classes {
                let x = self.demand[pair * self.classes + z];
                if !(x >= 0.0) || !x.is_finite() {
                    return Err(Error::Validation(format!("negative or invalid demand at pair {pair}")));
                }
                if x > 0.0 && pair / self.nodes == pair % self.nodes {
                    return Err(Error::Validation(format!("diagonal pair {pair} has demand")));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pair_index(&self, origin: usize, dest: usize) -> usize {
        origin * self.nodes + dest
    }

    pub fn get(&self, pair: usize, class: usize) -> f64 {
        self.demand[pair * self.classes + class]
    }

    pub fn set(&mut self, origin: usize, dest: usize, class: usize, value: f64) -> Result<()> {
        if origin >= self.nodes || dest >= self.nodes || class >= self.classes {
            return Err(Error::Validation(format!(
                "demand entry ({origin}, {dest}, class {class}) out of range"
            )));
        }
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Validation(format!("invalid demand {value} for ({origin}, {dest})")));
        }
        if origin == dest && value != 0.0 {
            return Err(Error::Validation(format!("diagonal pair ({origin}, {origin}) cannot carry demand")));
        }
        let idx = (origin * self.nodes + dest) * self.classes + class;
        self.demand[idx] = value;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.demand
    }

    pub fn pair_total(&self, pair: usize) -> f64 {
        self.demand[pair * self.classes..(pair + 1) * self.classes].iter().sum()
    }

    pub fn class_total(&self, class: usize) -> f64 {
        self.demand.iter().skip(class).step_by(self.classes).sum()
    }

    /// Number of OD pairs with positive total demand.
    pub fn demanded_pairs(&self) -> usize {
        (0..self.nodes * self.nodes).filter(|&r| self.pair_total(r) > 0.0).count()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut m = self.clone();
        m.demand.iter_mut().for_each(|x| *x *= factor);
        m
    }

    /// Copy with a different class count; class 0 is kept, new classes are zero.
    pub fn with_class_count(&self, classes: usize) -> Self {
        let mut m = Self::zeros(self.nodes, classes);
        for pair in 0..self.nodes * self.nodes {
            for z in 0..classes.min(self.classes) {
                m.demand[pair * classes + z] = self.get(pair, z);
            }
        }
        m
    }
}

/// Per-class link flows, shape (L, n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFlows {
    pub links: usize,
    pub classes: usize,
    pub flow: Vec<f64>,
}

impl LinkFlows {
    pub fn zeros(links: usize, classes: usize) -> Self {
        Self {
            links,
            classes,
            flow: vec![0.0; links * classes],
        }
    }

    pub fn get(&self, link: usize, class: usize) -> f64 {
        self.flow[link * self.classes + class]
    }

    pub fn total(&self, link: usize) -> f64 {
        self.flow[link * self.classes..(link + 1) * self.classes].iter().sum()
    }

    pub fn totals(&self) -> Vec<f64> {
        (0..self.links).map(|e| self.total(e)).collect()
    }
}

/// Path flows, shape (N², n, k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFlows {
    pub pairs: usize,
    pub classes: usize,
    pub k: usize,
    pub flow: Vec<f64>,
}

impl PathFlows {
    pub fn zeros(pairs: usize, classes: usize, k: usize) -> Self {
        Self {
            pairs,
            classes,
            k,
            flow: vec![0.0; pairs * classes * k],
        }
    }

    pub fn from_vec(pairs: usize, classes: usize, k: usize, flow: Vec<f64>) -> Result<Self> {
        if flow.len() != pairs * classes * k {
            return Err(Error::Shape {
                op: "PathFlows::from_vec",
                left: vec![flow.len()],
                right: vec![pairs, classes, k],
            });
        }
        Ok(Self { pairs, classes, k, flow })
    }

    pub fn index(&self, pair: usize, class: usize, slot: usize) -> usize {
        (pair * self.classes + class) * self.k + slot
    }

    pub fn get(&self, pair: usize, class: usize, slot: usize) -> f64 {
        self.flow[self.index(pair, class, slot)]
    }

    pub fn set(&mut self, pair: usize, class: usize, slot: usize, value: f64) {
        let i = self.index(pair, class, slot);
        self.flow[i] = value;
    }

    pub fn od_class(&self, pair: usize, class: usize) -> &[f64] {
        let i = self.index(pair, class, 0);
        &self.flow[i..i + self.k]
    }

    pub fn od_class_mut(&mut self, pair: usize, class: usize) -> &mut [f64] {
        let i = self.index(pair, class, 0);
        &mut self.flow[i..i + self.k]
    }
}

/// `1 + 0.15 (v / C)^4`.
#[inline]
pub fn bpr_factor(total_flow: f64, capacity: f64) -> f64 {
    let r = total_flow / capacity;
    let r2 = r * r;
    1.0 + BPR_ALPHA * r2 * r2
}

/// Derivative of the base link time with respect to total flow.
#[inline]
pub fn bpr_derivative(link: &Link, total_flow: f64) -> f64 {
    let c = link.capacity;
    let r = total_flow / c;
    link.freeflow_time * 4.0 * BPR_ALPHA * r * r * r / c
}

/// Integral of the base link time from 0 to `total_flow`.
#[inline]
pub fn bpr_integral(link: &Link, total_flow: f64) -> f64 {
    let r = total_flow / link.capacity;
    let r2 = r * r;
    link.freeflow_time * total_flow * (1.0 + BPR_ALPHA / 5.0 * r2 * r2)
}

/// Class travel time of one link; `total_flow` is summed over all classes.
pub fn bpr_cost(link: &Link, class: &VehicleClass, total_flow: f64) -> f64 {
    class.freeflow_multiplier * (link.freeflow_time * bpr_factor(total_flow, link.capacity))
}

/// Class travel time along a path: the class multiplier times the summed base
/// link times, so class cost ratios equal the multiplier ratios exactly.
pub fn path_cost(network: &Network, path: &[usize], class: usize, flows: &LinkFlows) -> Result<f64> {
    let mut base = 0.0;
    for &e in path {
        if e >= network.link_count() {
            return Err(Error::Validation(format!("link id {e} out of range")));
        }
        if !network.is_enabled(e) {
            return Err(Error::InfeasiblePath(e));
        }
        let link = network.link(e);
        base += link.freeflow_time * bpr_factor(flows.total(e), link.capacity);
    }
    Ok(network.classes()[class].freeflow_multiplier * base)
}

/// Minimum class cost over the non-padded paths of one OD pair.
pub fn min_path_cost(network: &Network, set: &PathSet, class: usize, flows: &LinkFlows) -> Result<f64> {
    let mut best: Option<f64> = None;
    for p in set.real_paths() {
        let c = path_cost(network, &p.links, class, flows)?;
        best = Some(match best {
            Some(b) if b <= c => b,
            _ => c,
        });
    }
    best.ok_or(Error::NoFeasiblePath)
}

/// Loads path flows onto links: `v_e^z = sum_r sum_p delta(p, e) f_p^{r,z}`.
pub fn aggregate_link_flows(network: &Network, path_sets: &PathSets, path_flows: &PathFlows) -> Result<LinkFlows> {
    let n = network.class_count();
    if path_flows.pairs != path_sets.len() || path_flows.classes != n || path_flows.k != path_sets.k() {
        return Err(Error::Shape {
            op: "aggregate_link_flows",
            left: vec![path_flows.pairs, path_flows.classes, path_flows.k],
            right: vec![path_sets.len(), n, path_sets.k()],
        });
    }
    let mut out = LinkFlows::zeros(network.link_count(), n);
    for (pair, set) in path_sets.iter().enumerate() {
        for (slot, path) in set.paths.iter().enumerate() {
            if set.pad_mask[slot] {
                continue;
            }
            for z in 0..n {
                let f = path_flows.get(pair, z, slot);
                if f == 0.0 {
                    continue;
                }
                for &e in &path.links {
                    out.flow[e * n + z] += f;
                }
            }
        }
    }
    Ok(out)
}

/// 4-neighbour grid with every edge in both directions and uniformly sampled
/// attributes: length in [20, 40], capacity in [1000, 2000], free-flow time in
/// [0.5, 1], drawn per directed link in link order.
pub fn generate_manhattan(rows: usize, cols: usize, seed: u64) -> Result<Network> {
    if rows < 2 || cols < 2 {
        return Err(Error::Validation("grid needs at least 2 rows and 2 columns".into()));
    }
    let nodes = rows
        .checked_mul(cols)
        .filter(|&n| n <= MAX_GRID_NODES)
        .ok_or_else(|| Error::Size(format!("{rows}x{cols} grid exceeds {MAX_GRID_NODES} nodes")))?;
    let mut rng = crate::rng::seeded(seed);
    let mut links = Vec::with_capacity(2 * (rows * (cols - 1) + cols * (rows - 1)));
    for node in 0..nodes {
        let (r, c) = (node / cols, node % cols);
        let mut heads = Vec::with_capacity(4);
        if r > 0 {
            heads.push(node - cols);
        }
        if c > 0 {
            heads.push(node - 1);
        }
        if c + 1 < cols {
            heads.push(node + 1);
        }
        if r + 1 < rows {
            heads.push(node + cols);
        }
        for head in heads {
            let length = rng.random_range(20.0..=40.0);
            let capacity = rng.random_range(1000.0..=2000.0);
            let freeflow_time = rng.random_range(0.5..=1.0);
            links.push(Link {
                id: links.len(),
                tail: node,
                head,
                length,
                capacity,
                freeflow_time,
            });
        }
    }
    Network::single_class(nodes, links)
}

/// Unit annotations carried alongside a network; no conversion is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: String,
    pub time: String,
}

impl Units {
    pub fn new(length: &str, time: &str) -> Self {
        Self {
            length: length.to_string(),
            time: time.to_string(),
        }
    }
}
