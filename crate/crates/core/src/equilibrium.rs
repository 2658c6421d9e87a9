//! Restricted multi-class user equilibrium over fixed path sets.
//!
//! Class `z` sees link times `mu_z * t0_e * (1 + 0.15 (V_e / C_e)^4)` where
//! `V_e` is the flow summed over classes. Because every class cost is the base
//! cost scaled by a constant, path choice of every class is driven by the base
//! cost, and the equilibrium minimises the Beckmann potential
//! `sum_e integral_0^{V_e} t0_e (1 + 0.15 (x / C_e)^4) dx` over the per-OD,
//! per-class flow simplices.
//!
//! The solver is a Gauss-Seidel path-based gradient projection: OD/class
//! blocks are visited one at a time, flow is shifted from every costlier path
//! to the cheapest one with a Newton-scaled step, and the block is projected
//! back onto its simplex. Link flows are updated in place after each block.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::network::{
    aggregate_link_flows, bpr_derivative, bpr_factor, bpr_integral, LinkFlows, Network, OdMatrix, PathFlows,
};
use crate::paths::PathSets;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Newton step scaled by `initial_step` every iteration.
    Fixed,
    /// `initial_step / sqrt(1 + iteration)`.
    Diminishing,
    /// Armijo backtracking on the Beckmann potential, starting at `initial_step`.
    LineSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_rule: StepRule,
    pub initial_step: f64,
    pub rel_gap_tol: f64,
    pub kkt_tol: f64,
    /// Seeds the OD sweep order.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            step_rule: StepRule::LineSearch,
            initial_step: 1.0,
            rel_gap_tol: 1e-6,
            kkt_tol: 1e-2,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.rel_gap_tol > 0.0) {
            return Err(Error::Config("rel_gap_tol must be > 0".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::Config("initial_step must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeSolution {
    pub path_flows: PathFlows,
    pub link_flows: LinkFlows,
    /// Class minimum path cost per pair, shape (N², n); 0 where the pair has no path.
    pub min_costs: Vec<f64>,
    pub rel_gap: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// False when `max_iters` was reached before `rel_gap_tol`.
    pub converged: bool,
    /// Beckmann potential at the start of every sweep and at the end.
    pub potential_trace: Vec<f64>,
}

/// Congested path costs at fixed link flows.
#[derive(Debug, Clone)]
pub struct CostSnapshot {
    k: usize,
    /// Base-class path cost per (pair, slot); infinite on padded slots.
    pub base_path_cost: Vec<f64>,
    /// Base-class minimum per pair; infinite without paths.
    pub base_min: Vec<f64>,
    multipliers: Vec<f64>,
}

impl CostSnapshot {
    pub fn at_link_totals(network: &Network, path_sets: &PathSets, totals: &[f64]) -> Self {
        let link_cost = network.base_link_costs(totals);
        let k = path_sets.k();
        let mut base_path_cost = vec![f64::INFINITY; path_sets.len() * k];
        let mut base_min = vec![f64::INFINITY; path_sets.len()];
        for (r, set) in path_sets.iter().enumerate() {
            for (s, path) in set.paths.iter().enumerate() {
                if set.pad_mask[s] {
                    continue;
                }
                let c: f64 = path.links.iter().map(|&e| link_cost[e]).fold(0.0, |a, b| a + b);
                base_path_cost[r * k + s] = c;
                if c < base_min[r] {
                    base_min[r] = c;
                }
            }
        }
        Self {
            k,
            base_path_cost,
            base_min,
            multipliers: network.classes().iter().map(|c| c.freeflow_multiplier).collect(),
        }
    }

    pub fn at_path_flows(network: &Network, path_sets: &PathSets, flows: &PathFlows) -> Result<Self> {
        let lf = aggregate_link_flows(network, path_sets, flows)?;
        Ok(Self::at_link_totals(network, path_sets, &lf.totals()))
    }

    pub fn path_cost(&self, pair: usize, class: usize, slot: usize) -> f64 {
        self.multipliers[class] * self.base_path_cost[pair * self.k + slot]
    }

    pub fn min_cost(&self, pair: usize, class: usize) -> f64 {
        self.multipliers[class] * self.base_min[pair]
    }
}

pub fn beckmann_potential(network: &Network, totals: &[f64]) -> f64 {
    network
        .links()
        .iter()
        .zip(totals)
        .filter(|(l, _)| network.is_enabled(l.id))
        .map(|(l, &v)| bpr_integral(l, v))
        .sum()
}

/// Euclidean projection of `v` onto `{f >= 0, sum f = total}`.
pub fn project_simplex(v: &mut [f64], total: f64) {
    if v.is_empty() {
        return;
    }
    if total <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - total) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

fn check_shapes(network: &Network, demand: &OdMatrix, path_sets: &PathSets) -> Result<()> {
    let n = network.node_count();
    if demand.nodes() != n || path_sets.nodes() != n || demand.classes() != network.class_count() {
        return Err(Error::Shape {
            op: "equilibrium inputs",
            left: vec![n, network.class_count()],
            right: vec![demand.nodes(), demand.classes(), path_sets.nodes()],
        });
    }
    Ok(())
}

/// Change of the base potential on one link when its flow moves from `v` to
/// `v + d`, written without cancellation.
fn potential_delta(network: &Network, e: usize, v: f64, d: f64) -> f64 {
    let l = network.link(e);
    let w = v + d;
    let c = l.capacity;
    let (a, b) = (w / c, v / c);
    // (a^5 - b^5) / (a - b) = a^4 + a^3 b + a^2 b^2 + a b^3 + b^4
    let s = a * a * a * a + a * a * a * b + a * a * b * b + a * b * b * b + b * b * b * b;
    l.freeflow_time * d * (1.0 + crate::network::BPR_ALPHA / 5.0 * s)
}

/// Solves the restricted UE from the all-on-rank-1 start.
pub fn solve_ue(network: &Network, demand: &OdMatrix, path_sets: &PathSets, cfg: &SolverConfig) -> Result<UeSolution> {
    cfg.validate()?;
    check_shapes(network, demand, path_sets)?;
    let unserved = path_sets.unserved_pairs(demand);
    if !unserved.is_empty() {
        return Err(Error::Infeasible(unserved));
    }
    let n = network.class_count();
    let k = path_sets.k();
    let pairs = path_sets.len();

    let mut flows = PathFlows::zeros(pairs, n, k);
    let mut blocks = Vec::new();
    for (r, set) in path_sets.iter().enumerate() {
        for z in 0..n {
            let x = demand.get(r, z);
            if x > 0.0 {
                let first = set.pad_mask.iter().position(|p| !*p).expect("served pair");
                flows.set(r, z, first, x);
                if set.real_count() > 1 {
                    blocks.push((r, z));
                }
            }
        }
    }
    let mut order_rng = crate::rng::seeded(cfg.seed);
    blocks.shuffle(&mut order_rng);

    let mut totals = aggregate_link_flows(network, path_sets, &flows)?.totals();
    let mut trace = Vec::new();
    let mut rel_gap = relative_gap_at(network, demand, path_sets, &flows, &totals)?;
    let mut iterations = 0;
    let mut grad = vec![0.0; k];
    let mut step = vec![0.0; k];
    let mut touched: Vec<(usize, f64)> = Vec::new();

    while rel_gap > cfg.rel_gap_tol && iterations < cfg.max_iters {
        trace.push(beckmann_potential(network, &totals));
        let alpha0 = match cfg.step_rule {
            StepRule::Fixed | StepRule::LineSearch => cfg.initial_step,
            StepRule::Diminishing => cfg.initial_step / libm::sqrt(1.0 + iterations as f64),
        };
        for &(r, z) in &blocks {
            let set = path_sets.pair(r);
            let mut best = usize::MAX;
            for s in 0..k {
                if set.pad_mask[s] {
                    grad[s] = f64::INFINITY;
                    continue;
                }
                grad[s] = set.paths[s]
                    .links
                    .iter()
                    .map(|&e| network.link(e).freeflow_time * bpr_factor(totals[e], network.link(e).capacity))
                    .fold(0.0, |a, b| a + b);
                if best == usize::MAX || grad[s] < grad[best] {
                    best = s;
                }
            }
            let f = flows.od_class(r, z);
            let mut slope = 0.0;
            let mut any = false;
            for s in 0..k {
                step[s] = 0.0;
                if s == best || set.pad_mask[s] || f[s] <= 0.0 {
                    continue;
                }
                let gap = grad[s] - grad[best];
                if gap <= 0.0 {
                    continue;
                }
                let curvature: f64 = symmetric_difference(&set.paths[s].links, &set.paths[best].links)
                    .map(|e| bpr_derivative(network.link(e), totals[e]))
                    .sum();
                let newton = if curvature > 0.0 { gap / curvature } else { f[s] };
                step[s] = newton.min(f[s]);
                slope += step[s] * gap;
                any = true;
            }
            if !any {
                continue;
            }
            let mut alpha = alpha0.min(1.0);
            if cfg.step_rule == StepRule::LineSearch {
                let mut accepted = false;
                for _ in 0..40 {
                    collect_link_moves(set, &step, best, alpha, &mut touched);
                    let delta: f64 = touched.iter().map(|&(e, d)| potential_delta(network, e, totals[e], d)).sum();
                    if delta <= -1e-4 * alpha * slope {
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    continue;
                }
            } else {
                collect_link_moves(set, &step, best, alpha, &mut touched);
            }
            let x = demand.get(r, z);
            let block = flows.od_class_mut(r, z);
            let before: Vec<f64> = block.to_vec();
            for s in 0..k {
                if step[s] > 0.0 {
                    let moved = (alpha * step[s]).min(block[s]);
                    block[s] -= moved;
                    block[best] += moved;
                }
            }
            let mut real: Vec<f64> = (0..k).filter(|&s| !set.pad_mask[s]).map(|s| block[s]).collect();
            project_simplex(&mut real, x);
            let mut projected = real.into_iter();
            for s in 0..k {
                if set.pad_mask[s] {
                    continue;
                }
                block[s] = projected.next().expect("real slot");
                let diff = block[s] - before[s];
                if diff != 0.0 {
                    for &e in &set.paths[s].links {
                        totals[e] += diff;
                    }
                }
            }
        }
        iterations += 1;
        totals = aggregate_link_flows(network, path_sets, &flows)?.totals();
        rel_gap = relative_gap_at(network, demand, path_sets, &flows, &totals)?;
    }
    trace.push(beckmann_potential(network, &totals));

    let link_flows = aggregate_link_flows(network, path_sets, &flows)?;
    let snapshot = CostSnapshot::at_link_totals(network, path_sets, &totals);
    let mut min_costs = vec![0.0; pairs * n];
    for r in 0..pairs {
        if path_sets.pair(r).reachable {
            for z in 0..n {
                min_costs[r * n + z] = snapshot.min_cost(r, z);
            }
        }
    }
    let kkt_residual = kkt_residual(network, demand, path_sets, &flows)?;
    Ok(UeSolution {
        path_flows: flows,
        link_flows,
        min_costs,
        rel_gap,
        kkt_residual,
        iterations,
        converged: rel_gap <= cfg.rel_gap_tol,
        potential_trace: trace,
    })
}

fn symmetric_difference<'a>(a: &'a [usize], b: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
    a.iter()
        .filter(move |e| !b.contains(e))
        .chain(b.iter().filter(move |e| !a.contains(e)))
        .copied()
}

/// Net per-link flow change of moving `alpha * step[s]` from every slot `s`
/// onto slot `best`.
fn collect_link_moves(
    set: &crate::paths::PathSet,
    step: &[f64],
    best: usize,
    alpha: f64,
    out: &mut Vec<(usize, f64)>,
) {
    out.clear();
    let mut add = |e: usize, d: f64| match out.iter_mut().find(|(x, _)| *x == e) {
        Some(entry) => entry.1 += d,
        None => out.push((e, d)),
    };
    let mut gained = 0.0;
    for (s, &st) in step.iter().enumerate() {
        if st > 0.0 {
            let d = alpha * st;
            gained += d;
            for &e in &set.paths[s].links {
                add(e, -d);
            }
        }
    }
    for &e in &set.paths[best].links {
        add(e, gained);
    }
}

fn relative_gap_at(
    network: &Network,
    demand: &OdMatrix,
    path_sets: &PathSets,
    flows: &PathFlows,
    totals: &[f64],
) -> Result<f64> {
    let snap = CostSnapshot::at_link_totals(network, path_sets, totals);
    gap_terms(network, demand, path_sets, flows, &snap)
}

fn gap_terms(
    network: &Network,
    demand: &OdMatrix,
    path_sets: &PathSets,
    flows: &PathFlows,
    snap: &CostSnapshot,
) -> Result<f64> {
    let n = network.class_count();
    let mut experienced = 0.0;
    let mut shortest = 0.0;
    let mut any_demand = false;
    for (r, set) in path_sets.iter().enumerate() {
        for z in 0..n {
            let x = demand.get(r, z);
            if x <= 0.0 {
                continue;
            }
            any_demand = true;
            for s in 0..set.paths.len() {
                let f = flows.get(r, z, s);
                if f > 0.0 && !set.pad_mask[s] {
                    experienced += f * snap.path_cost(r, z, s);
                }
            }
            shortest += x * snap.min_cost(r, z);
        }
    }
    if !any_demand {
        return Ok(0.0);
    }
    if !(experienced > 0.0) {
        return Err(Error::Contract("zero total cost with positive demand".into()));
    }
    Ok((experienced - shortest) / experienced)
}

/// `(sum f c - sum x u) / sum f c` with costs at the given flows; 0 when there
/// is no demand.
pub fn relative_gap(network: &Network, demand: &OdMatrix, path_sets: &PathSets, flows: &PathFlows) -> Result<f64> {
    check_shapes(network, demand, path_sets)?;
    let snap = CostSnapshot::at_path_flows(network, path_sets, flows)?;
    gap_terms(network, demand, path_sets, flows, &snap)
}

/// Complementarity residual `1/(|R| n) sum f max(0, c - u)`; `|R|` counts
/// pairs with positive total demand.
pub fn kkt_residual(network: &Network, demand: &OdMatrix, path_sets: &PathSets, flows: &PathFlows) -> Result<f64> {
    check_shapes(network, demand, path_sets)?;
    let snap = CostSnapshot::at_path_flows(network, path_sets, flows)?;
    let n = network.class_count();
    let demanded = demand.demanded_pairs();
    if demanded == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (r, set) in path_sets.iter().enumerate() {
        for z in 0..n {
            for s in 0..set.paths.len() {
                let f = flows.get(r, z, s);
                if f > 0.0 && !set.pad_mask[s] {
                    sum += f * (snap.path_cost(r, z, s) - snap.min_cost(r, z)).max(0.0);
                }
            }
        }
    }
    Ok(sum / (demanded * n) as f64)
}

/// OD conservation error `1/(|R| n) sum |sum_p f - x|`.
pub fn od_conservation_residual(demand: &OdMatrix, flows: &PathFlows) -> Result<f64> {
    if flows.pairs != demand.nodes() * demand.nodes() || flows.classes != demand.classes() {
        return Err(Error::Shape {
            op: "od_conservation_residual",
            left: vec![flows.pairs, flows.classes],
            right: vec![demand.nodes() * demand.nodes(), demand.classes()],
        });
    }
    let demanded = demand.demanded_pairs();
    if demanded == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for r in 0..flows.pairs {
        for z in 0..flows.classes {
            let total: f64 = flows.od_class(r, z).iter().sum();
            sum += (total - demand.get(r, z)).abs();
        }
    }
    Ok(sum / (demanded * demand.classes()) as f64)
}

/// Path-to-link consistency `1/|E| sum_e |sum_{p ∋ e} f - v_e|` over totals.
pub fn link_aggregation_residual(
    network: &Network,
    path_sets: &PathSets,
    path_flows: &PathFlows,
    link_flows: &LinkFlows,
) -> Result<f64> {
    let agg = aggregate_link_flows(network, path_sets, path_flows)?;
    if link_flows.links != agg.links {
        return Err(Error::Shape {
            op: "link_aggregation_residual",
            left: vec![link_flows.links, link_flows.classes],
            right: vec![agg.links, agg.classes],
        });
    }
    if agg.links == 0 {
        return Ok(0.0);
    }
    let sum: f64 = (0..agg.links).map(|e| (agg.total(e) - link_flows.total(e)).abs()).sum();
    Ok(sum / agg.links as f64)
}

/// Average delay of one class: `sum f (c - u) / sum x`, with costs induced by
/// the given flows.
pub fn average_delay(
    network: &Network,
    demand: &OdMatrix,
    path_sets: &PathSets,
    flows: &PathFlows,
    class: usize,
) -> Result<f64> {
    check_shapes(network, demand, path_sets)?;
    let total = demand.class_total(class);
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("average delay of a class without demand"));
    }
    let snap = CostSnapshot::at_path_flows(network, path_sets, flows)?;
    let mut sum = 0.0;
    for (r, set) in path_sets.iter().enumerate() {
        for s in 0..set.paths.len() {
            let f = flows.get(r, class, s);
            if f > 0.0 && !set.pad_mask[s] {
                sum += f * (snap.path_cost(r, class, s) - snap.min_cost(r, class));
            }
        }
    }
    Ok(sum / total)
}

/// Demand-weighted mean experienced path cost of one class, `sum f c / sum f`.
pub fn mean_path_cost(network: &Network, path_sets: &PathSets, flows: &PathFlows, class: usize) -> Result<f64> {
    let snap = CostSnapshot::at_path_flows(network, path_sets, flows)?;
    let (mut fc, mut ft) = (0.0, 0.0);
    for (r, set) in path_sets.iter().enumerate() {
        for s in 0..set.paths.len() {
            let f = flows.get(r, class, s);
            if f > 0.0 && !set.pad_mask[s] {
                fc += f * snap.path_cost(r, class, s);
                ft += f;
            }
        }
    }
    if ft > 0.0 {
        Ok(fc / ft)
    } else {
        Err(Error::UndefinedMetric("mean path cost without flow"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_manhattan, Link, VehicleClass};
    use crate::paths::build_path_sets;

    fn parallel(t1: f64, t2: f64) -> Network {
        // two parallel routes 0 -> 1 (via node 2 for the second, keeping links unique)
        Network::single_class(
            3,
            vec![
                Link { id: 0, tail: 0, head: 1, length: 1.0, capacity: 1000.0, freeflow_time: t1 },
                Link { id: 1, tail: 0, head: 2, length: 1.0, capacity: 1000.0, freeflow_time: t2 },
                Link { id: 2, tail: 2, head: 1, length: 1.0, capacity: 1e12, freeflow_time: 1e-12 },
            ],
        )
        .unwrap()
    }

    fn single_od(net: &Network, x: f64) -> OdMatrix {
        let mut d = OdMatrix::zeros(net.node_count(), net.class_count());
        d.set(0, 1, 0, x).unwrap();
        d
    }

    #[test]
    fn symmetric_split() {
        let net = parallel(1.0, 1.0 - 1e-12);
        let sets = build_path_sets(&net, 3);
        let cfg = SolverConfig { rel_gap_tol: 1e-12, ..SolverConfig::default() };
        let sol = solve_ue(&net, &single_od(&net, 2000.0), &sets, &cfg).unwrap();
        assert!((sol.link_flows.total(0) - 1000.0).abs() < 1e-3);
        assert!((sol.link_flows.total(1) - 1000.0).abs() < 1e-3);
        assert!(sol.rel_gap < 1e-10);
    }

    #[test]
    fn zero_demand_is_trivial() {
        let net = generate_manhattan(3, 3, 2).unwrap();
        let sets = build_path_sets(&net, 3);
        let d = OdMatrix::zeros(9, 1);
        let sol = solve_ue(&net, &d, &sets, &SolverConfig::default()).unwrap();
        assert_eq!(sol.rel_gap, 0.0);
        assert!(sol.path_flows.flow.iter().all(|&f| f == 0.0));
        assert!(sol.converged);
        assert_eq!(relative_gap(&net, &d, &sets, &sol.path_flows).unwrap(), 0.0);
    }

    #[test]
    fn infeasible_instance_lists_pairs() {
        let net = parallel(1.0, 2.0);
        let sets = build_path_sets(&net, 3);
        let mut d = OdMatrix::zeros(3, 1);
        d.set(1, 0, 0, 5.0).unwrap();
        assert_eq!(solve_ue(&net, &d, &sets, &SolverConfig::default()), Err(Error::Infeasible(vec![(1, 0)])));
    }

    #[test]
    fn perturbed_solution_has_positive_gap_and_exact_kkt() {
        let net = parallel(1.0, 2.0);
        let sets = build_path_sets(&net, 3);
        let d = single_od(&net, 2000.0);
        let cfg = SolverConfig { rel_gap_tol: 1e-12, ..SolverConfig::default() };
        let sol = solve_ue(&net, &d, &sets, &cfg).unwrap();
        assert!(sol.kkt_residual < 1e-6, "{}", sol.kkt_residual);
        let mut bad = sol.path_flows.clone();
        let r = d.pair_index(0, 1);
        let shift = 0.1 * 2000.0;
        let f0 = bad.get(r, 0, 0);
        bad.set(r, 0, 0, f0 - shift);
        let f1 = bad.get(r, 0, 1);
        bad.set(r, 0, 1, f1 + shift);
        assert!(relative_gap(&net, &d, &sets, &bad).unwrap() > 0.0);

        // all flow on the worst path: residual is f (c_worst - c_best) / (|R| n)
        let mut worst = PathFlows::zeros(9, 1, 3);
        worst.set(r, 0, 1, 2000.0);
        let snap = CostSnapshot::at_path_flows(&net, &sets, &worst).unwrap();
        let expected = 2000.0 * (snap.path_cost(r, 0, 1) - snap.path_cost(r, 0, 0));
        let got = kkt_residual(&net, &d, &sets, &worst).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn od_and_link_residuals() {
        let mut d = OdMatrix::zeros(4, 1);
        let mut pf = PathFlows::zeros(16, 1, 3);
        let mut count = 0;
        for o in 0..4 {
            for t in 0..4 {
                if o != t && count < 10 {
                    d.set(o, t, 0, 100.0).unwrap();
                    pf.set(o * 4 + t, 0, 0, 100.0);
                    count += 1;
                }
            }
        }
        assert_eq!(od_conservation_residual(&d, &pf).unwrap(), 0.0);
        pf.set(1, 0, 0, 90.0);
        assert!((od_conservation_residual(&d, &pf).unwrap() - 1.0).abs() < 1e-12);

        let net = generate_manhattan(2, 2, 3).unwrap();
        let sets = build_path_sets(&net, 3);
        let mut pf = PathFlows::zeros(16, 1, 3);
        pf.set(3, 0, 0, 12.0);
        pf.set(3, 0, 1, 5.5);
        let lf = aggregate_link_flows(&net, &sets, &pf).unwrap();
        assert_eq!(link_aggregation_residual(&net, &sets, &pf, &lf).unwrap(), 0.0);
        let mut off = lf.clone();
        off.flow[2] += 8.0 * 0.1;
        assert!((link_aggregation_residual(&net, &sets, &pf, &off).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn average_delay_behaviour() {
        let net = parallel(1.0, 2.0);
        let sets = build_path_sets(&net, 3);
        let d = single_od(&net, 10.0);
        let mut pf = PathFlows::zeros(9, 1, 3);
        pf.set(1, 0, 0, 10.0);
        // uncongested, all on the shortest path
        assert!(average_delay(&net, &d, &sets, &pf, 0).unwrap().abs() < 1e-15);
        let empty = OdMatrix::zeros(3, 1);
        assert!(matches!(average_delay(&net, &empty, &sets, &pf, 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn simplex_projection() {
        let mut v = [0.5, 0.3, 0.2];
        project_simplex(&mut v, 1.0);
        assert_eq!(v, [0.5, 0.3, 0.2]);
        let mut w = [2.0, -1.0, 0.5];
        project_simplex(&mut w, 1.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn step_rules_all_converge_on_a_grid() {
        let net = generate_manhattan(3, 3, 4).unwrap();
        let sets = build_path_sets(&net, 3);
        let mut d = OdMatrix::zeros(9, 1);
        for o in 0..9 {
            for t in 0..9 {
                if o != t {
                    d.set(o, t, 0, 150.0 + 10.0 * ((o * 7 + t * 3) % 11) as f64).unwrap();
                }
            }
        }
        for rule in [StepRule::Fixed, StepRule::LineSearch, StepRule::Diminishing] {
            let cfg = SolverConfig { step_rule: rule, rel_gap_tol: 1e-6, ..SolverConfig::default() };
            let sol = solve_ue(&net, &d, &sets, &cfg).unwrap();
            assert!(sol.converged, "{rule:?} gap {}", sol.rel_gap);
            if rule == StepRule::LineSearch {
                for w in sol.potential_trace.windows(2) {
                    assert!(w[1] <= w[0] * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn multiclass_truck_costs_are_scaled() {
        let net = generate_manhattan(3, 3, 8)
            .unwrap()
            .with_classes(alloc::vec![VehicleClass::car(), VehicleClass::truck()])
            .unwrap();
        let sets = build_path_sets(&net, 3);
        let mut d = OdMatrix::zeros(9, 2);
        for o in 0..9 {
            for t in 0..9 {
                if o != t {
                    d.set(o, t, 0, 400.0).unwrap();
                    d.set(o, t, 1, 200.0).unwrap();
                }
            }
        }
        let sol = solve_ue(&net, &d, &sets, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        let snap = CostSnapshot::at_path_flows(&net, &sets, &sol.path_flows).unwrap();
        for (r, set) in sets.iter().enumerate() {
            for s in 0..3 {
                if !set.pad_mask[s] {
                    assert_eq!(snap.path_cost(r, 1, s), 1.5 * snap.path_cost(r, 0, s));
                }
            }
        }
    }
}
