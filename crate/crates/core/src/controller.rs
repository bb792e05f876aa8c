//! Per-round control: device-side estimation of gradient variance and norm,
//! and the coordinator's alternating solve for update probabilities `rho`
//! and compression ratios `theta`.
//!
//! The per-round problem minimises
//! `sum_n [(2 - theta_n) rho_n (sigma2 + G2) + 3 (1 - rho_n)^2 G2]`
//! under the projected time and energy constraints. The time constraint is a
//! max over clusters and devices, so it splits into one cap per device; the
//! energy constraint couples all devices through a single linear budget.
//!
//! * Fixed `rho`: a linear program in `theta`, a bounded fractional knapsack
//!   solved exactly by a ratio-ordered greedy fill.
//! * Fixed `theta`: a separable convex quadratic in `rho` with one coupling
//!   constraint, solved by bisection on its multiplier.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{DeviceState, ProjectedConstraints};
use crate::data::sample_indices;
use crate::error::{Error, Result};
use crate::model::{LocalObjective, ModelVector};

/// Lower bounds replacing the open intervals `0 < rho, theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub rho_min: f64,
    pub theta_min: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self { rho_min: 1e-3, theta_min: 1e-3 }
    }
}

/// Stopping rule and initialisation of the alternating solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub eps: f64,
    pub max_iterations: usize,
    /// Start from the previous round's decision instead of `(1, 1)`.
    pub warm_start: bool,
    pub bounds: Bounds,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { eps: 1e-4, max_iterations: 50, warm_start: false, bounds: Bounds::default() }
    }
}

/// Everything the coordinator needs for one round's decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParams {
    /// Device-average of the variance estimates.
    pub sigma2: f64,
    /// Device-average of the squared-norm estimates.
    pub g2: f64,
    pub states: Vec<DeviceState>,
    pub constraints: ProjectedConstraints,
    pub bounds: Bounds,
}

impl ControlParams {
    pub fn new(states: Vec<DeviceState>, constraints: ProjectedConstraints, bounds: Bounds) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidParameter("no devices".into()));
        }
        if constraints.cluster_of.len() != states.len() {
            return Err(Error::DimensionMismatch { expected: states.len(), actual: constraints.cluster_of.len() });
        }
        for s in &states {
            s.validate()?;
        }
        let n = states.len() as f64;
        let sigma2 = states.iter().map(|s| s.sigma2_hat).sum::<f64>() / n;
        let g2 = states.iter().map(|s| s.g2_hat).sum::<f64>() / n;
        Ok(Self { sigma2, g2, states, constraints, bounds })
    }

    pub fn n_devices(&self) -> usize {
        self.states.len()
    }

    fn tau(&self) -> f64 {
        self.constraints.tau as f64
    }

    pub fn is_feasible(&self, rho: &[f64], theta: &[f64]) -> bool {
        self.constraints.is_feasible(&self.states, rho, theta)
    }
}

/// Output of one subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub values: Vec<f64>,
    pub feasible: bool,
}

/// Per-round decision for every device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub rho: Vec<f64>,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub feasible: bool,
    pub iterations: usize,
    /// Objective after each full pass; empty for closed-form decisions.
    pub objective_history: Vec<f64>,
}

impl ControlDecision {
    fn closed_form(params: &ControlParams, rho: Vec<f64>, theta: Vec<f64>, iterations: usize) -> Self {
        let objective = p2_objective(params, &rho, &theta);
        let feasible = params.is_feasible(&rho, &theta);
        Self { rho, theta, objective, feasible, iterations, objective_history: Vec::new() }
    }

    /// Every device at `(rho_min, theta_min)`.
    pub fn floor(params: &ControlParams) -> Self {
        let n = params.n_devices();
        Self::closed_form(params, vec![params.bounds.rho_min; n], vec![params.bounds.theta_min; n], 0)
    }
}

/// `sum_n [(2 - theta_n) rho_n (sigma2 + G2) + 3 (1 - rho_n)^2 G2]`.
pub fn p2_objective(params: &ControlParams, rho: &[f64], theta: &[f64]) -> f64 {
    let s = params.sigma2 + params.g2;
    rho.iter()
        .zip(theta)
        .map(|(&r, &t)| (2.0 - t) * r * s + 3.0 * (1.0 - r) * (1.0 - r) * params.g2)
        .sum()
}

/// Per-device variance and squared-norm estimates from `n_probes`
/// mini-batch gradients at `model`. Returns `(sigma2, g2)`.
///
/// `g2` is the mean of `|g|^2` over probes and `sigma2` the unbiased sample
/// variance of the probes around their mean, summed over coordinates. When a
/// batch would cover the whole local dataset the gradient is exact:
/// `sigma2 = 0` and `g2 = |grad F|^2`.
pub fn estimate_sigma_g<O, R>(
    objective: &O,
    model: &ModelVector,
    n_probes: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<(f64, f64)>
where
    O: LocalObjective + ?Sized,
    R: Rng,
{
    if n_probes < 2 {
        return Err(Error::InvalidParameter(format!("n_probes must be at least 2, got {n_probes}")));
    }
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = objective.n_samples();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if batch_size >= n {
        return Ok((0.0, objective.full_gradient(model)?.norm_sq()));
    }
    let probes = (0..n_probes)
        .map(|_| objective.gradient_at(model, &sample_indices(rng, n, batch_size)))
        .collect::<Result<Vec<_>>>()?;
    let d = objective.dim();
    let mut mean = vec![0.0; d];
    for g in &probes {
        for (m, v) in mean.iter_mut().zip(g.as_slice()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_probes as f64);
    let mut spread = 0.0;
    let mut g2 = 0.0;
    for g in &probes {
        g2 += g.norm_sq();
        spread += g.as_slice().iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
    }
    Ok((spread / (n_probes - 1) as f64, g2 / n_probes as f64))
}

fn check_len(params: &ControlParams, v: &[f64]) -> Result<()> {
    if v.len() != params.n_devices() {
        return Err(Error::DimensionMismatch { expected: params.n_devices(), actual: v.len() });
    }
    Ok(())
}

/// Absolute slack tolerated when a bound is hit exactly.
const BOUND_SLACK: f64 = 1e-12;

/// Compression ratios for fixed `rho`: maximises `sum_n rho_n theta_n`,
/// which minimises the objective's `theta` terms.
///
/// Every device starts at `theta_min`; remaining energy is then spent on the
/// devices with the best objective gain per joule, `rho_n / (p_n nu_n)`,
/// each up to its time cap. This greedy fill is exact for a single knapsack
/// constraint with box bounds.
pub fn solve_p21(params: &ControlParams, rho: &[f64]) -> Result<SubproblemSolution> {
    check_len(params, rho)?;
    let n = params.n_devices();
    let tmin = params.bounds.theta_min;
    let infeasible = || SubproblemSolution { values: vec![tmin; n], feasible: false };
    let caps = params.constraints.device_time_caps();
    let tau = params.tau();

    let mut upper = Vec::with_capacity(n);
    for (k, s) in params.states.iter().enumerate() {
        let u = ((caps[k] - rho[k] * tau * s.mu) / s.nu).min(1.0);
        if u < tmin - BOUND_SLACK || u.is_nan() {
            return Ok(infeasible());
        }
        upper.push(u.max(tmin));
    }
    let room = p21_energy_room(params, rho);
    if room < -BOUND_SLACK * params.constraints.energy_cap().abs().max(1.0) || room.is_nan() {
        return Ok(infeasible());
    }
    Ok(SubproblemSolution { values: fill_theta(params, rho, &upper, room.max(0.0)), feasible: true })
}

/// Energy left for uploads above `theta_min` once computation is paid for.
fn p21_energy_room(params: &ControlParams, rho: &[f64]) -> f64 {
    let tau = params.tau();
    let compute: f64 = params.states.iter().zip(rho).map(|(s, r)| r * tau * s.alpha).sum();
    let floor_comm: f64 = params.states.iter().map(|s| s.power * s.nu * params.bounds.theta_min).sum();
    params.constraints.energy_cap() - compute - floor_comm
}

/// Greedy fractional knapsack: raise `theta` from its floor in decreasing
/// order of `rho_n / (p_n nu_n)` up to `upper`, spending at most `room`.
fn fill_theta(params: &ControlParams, rho: &[f64], upper: &[f64], mut room: f64) -> Vec<f64> {
    let n = params.n_devices();
    let tmin = params.bounds.theta_min;
    let mut order: Vec<usize> = (0..n).collect();
    let gain = |k: usize| {
        let w = params.states[k].power * params.states[k].nu;
        if w > 0.0 { rho[k] / w } else { f64::INFINITY }
    };
    order.sort_by(|&a, &b| gain(b).total_cmp(&gain(a)).then(a.cmp(&b)));

    let mut theta = vec![tmin; n];
    for k in order {
        let w = params.states[k].power * params.states[k].nu;
        let headroom = upper[k] - tmin;
        let step = if w > 0.0 { headroom.min(room / w) } else { headroom };
        theta[k] += step;
        if w > 0.0 {
            room = (room - step * w).max(0.0);
        }
    }
    theta
}

/// P2.1 at full computation with the constraints no `theta` can meet
/// dropped: a device whose time cap is exceeded by computation alone may
/// upload in full, and an energy budget already exceeded by computation
/// stops limiting uploads. Matches [`solve_p21`] when that is feasible.
fn p21_full_compute(params: &ControlParams) -> SubproblemSolution {
    let n = params.n_devices();
    let ones = vec![1.0; n];
    let tmin = params.bounds.theta_min;
    let caps = params.constraints.device_time_caps();
    let tau = params.tau();
    let upper: Vec<f64> = params
        .states
        .iter()
        .zip(&caps)
        .map(|(s, cap)| {
            let u = (cap - tau * s.mu) / s.nu;
            if u < tmin - BOUND_SLACK || u.is_nan() { 1.0 } else { u.clamp(tmin, 1.0) }
        })
        .collect();
    let room = p21_energy_room(params, &ones);
    let room = if room < 0.0 || room.is_nan() { f64::INFINITY } else { room };
    let values = fill_theta(params, &ones, &upper, room);
    let feasible = params.is_feasible(&ones, &values);
    SubproblemSolution { values, feasible }
}

/// Update probabilities for fixed `theta`: minimises
/// `sum_n [3 G2 rho_n^2 + C_n rho_n]` with
/// `C_n = (2 - theta_n) sigma2 - (4 + theta_n) G2`.
///
/// For a multiplier `lambda >= 0` on the energy budget the minimiser is
/// `rho_n = clamp((-C_n - lambda tau alpha_n) / (6 G2), rho_min, cap_n)`;
/// `lambda` is found by bisection on the budget.
pub fn solve_p22(params: &ControlParams, theta: &[f64]) -> Result<SubproblemSolution> {
    check_len(params, theta)?;
    if !(params.g2 > 0.0) {
        return Err(Error::InvalidParameter(format!("G2 must be positive, got {}", params.g2)));
    }
    let n = params.n_devices();
    let rmin = params.bounds.rho_min;
    let infeasible = || SubproblemSolution { values: vec![rmin; n], feasible: false };
    let caps = params.constraints.device_time_caps();
    let tau = params.tau();
    let g6 = 6.0 * params.g2;

    let mut upper = Vec::with_capacity(n);
    for (k, s) in params.states.iter().enumerate() {
        let u = ((caps[k] - theta[k] * s.nu) / (tau * s.mu)).min(1.0);
        if u < rmin - BOUND_SLACK || u.is_nan() {
            return Ok(infeasible());
        }
        upper.push(u.max(rmin));
    }
    let weight: Vec<f64> = params.states.iter().map(|s| tau * s.alpha).collect();
    let comm: f64 = params.states.iter().zip(theta).map(|(s, t)| s.power * s.nu * t).sum();
    let room = params.constraints.energy_cap() - comm;
    let floor: f64 = weight.iter().map(|w| w * rmin).sum();
    if floor > room + BOUND_SLACK * room.abs().max(1.0) || room.is_nan() {
        return Ok(infeasible());
    }

    let neg_c: Vec<f64> = theta
        .iter()
        .map(|t| -((2.0 - t) * params.sigma2 - (4.0 + t) * params.g2))
        .collect();
    let rho_at = |lambda: f64| -> Vec<f64> {
        (0..n)
            .map(|k| ((neg_c[k] - lambda * weight[k]) / g6).clamp(rmin, upper[k]))
            .collect()
    };
    let spend = |r: &[f64]| -> f64 { r.iter().zip(&weight).map(|(r, w)| r * w).sum() };

    let free = rho_at(0.0);
    if spend(&free) <= room {
        return Ok(SubproblemSolution { values: free, feasible: true });
    }
    // every device is at rho_min once lambda exceeds this
    let mut hi = (0..n)
        .map(|k| (neg_c[k] - g6 * rmin) / weight[k])
        .fold(0.0, f64::max);
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if spend(&rho_at(mid)) <= room {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SubproblemSolution { values: rho_at(hi), feasible: true })
}

fn z_distance(rho_a: &[f64], theta_a: &[f64], rho_b: &[f64], theta_b: &[f64]) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    (sq(rho_a, rho_b) + sq(theta_a, theta_b)).sqrt()
}

/// Alternates the two subproblems from `init` (default all ones) until
/// successive iterates move less than `eps` or `max_iterations` passes have
/// run. At least one pass always runs. The returned `feasible` flag comes
/// from evaluating the final iterate against the projected constraints.
///
/// When the budgets bind, a single alternation from all ones tends to stall:
/// the compression step sees no time left and drops to `theta_min`, then the
/// update step spends the whole per-device time cap on `rho`, and neither
/// block can move afterwards. The alternation is therefore repeated from a
/// few extra starting points and the best run is kept, a feasible run always
/// beating an infeasible one. The extra starts are `rho` at its floor, `rho`
/// at the middle of its range, and the minimiser of the Lagrangian that
/// prices energy at the smallest multiplier meeting the energy budget.
/// Each feasible run is polished by exact line searches along single
/// coordinates and along directions that keep the energy or one device's
/// time constant; the polished objective is appended to the history. The returned history and iteration count belong to the
/// kept run.
pub fn alternating_solve(
    params: &ControlParams,
    settings: &SolverSettings,
    init: Option<(&[f64], &[f64])>,
) -> Result<ControlDecision> {
    if !(settings.eps > 0.0) || settings.max_iterations == 0 {
        return Err(Error::InvalidParameter("eps must be positive and max_iterations at least 1".into()));
    }
    let n = params.n_devices();
    let first = match init {
        Some((r, t)) => {
            check_len(params, r)?;
            check_len(params, t)?;
            (r.to_vec(), t.to_vec())
        }
        None => (vec![1.0; n], vec![1.0; n]),
    };
    let rmin = params.bounds.rho_min;
    let mut starts = vec![
        first,
        (vec![rmin; n], vec![1.0; n]),
        (vec![0.5 * (1.0 + rmin); n], vec![1.0; n]),
    ];
    starts.extend(dual_start(params));
    let mut best: Option<ControlDecision> = None;
    for (rho, theta) in starts {
        let mut run = alternate(params, settings, rho, theta)?;
        if run.feasible {
            let (rho, theta) = refine(params, &run.rho, &run.theta);
            let objective = p2_objective(params, &rho, &theta);
            if objective < run.objective && params.is_feasible(&rho, &theta) {
                run.rho = rho;
                run.theta = theta;
                run.objective = objective;
                run.objective_history.push(objective);
            }
        }
        let better = match &best {
            None => true,
            Some(b) => (run.feasible && !b.feasible) || (run.feasible == b.feasible && run.objective < b.objective),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

const REFINE_PARTNERS: usize = 4;

/// Line-search polish of a feasible point. Variables are `rho` followed by
/// `theta`; along any line the objective is a quadratic in the step.
fn refine(params: &ControlParams, rho: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = params.n_devices();
    let (s, g2, tau) = (params.sigma2 + params.g2, params.g2, params.tau());
    let caps = params.constraints.device_time_caps();
    let cap_e = params.constraints.energy_cap();
    let mut z: Vec<f64> = rho.iter().chain(theta).copied().collect();
    let lo: Vec<f64> = (0..2 * n).map(|v| if v < n { params.bounds.rho_min } else { params.bounds.theta_min }).collect();
    let energy_w: Vec<f64> = (0..2 * n)
        .map(|v| if v < n { tau * params.states[v].alpha } else { params.states[v - n].power * params.states[v - n].nu })
        .collect();
    let time_w = |v: usize| if v < n { tau * params.states[v].mu } else { params.states[v - n].nu };
    let device = |v: usize| if v < n { v } else { v - n };

    let grad = |z: &[f64], v: usize| {
        let k = device(v);
        if v < n { (2.0 - z[n + k]) * s - 6.0 * g2 * (1.0 - z[k]) } else { -z[k] * s }
    };

    for _ in 0..1000 {
        let mut gained = 0.0;
        let mut energy: f64 = z.iter().zip(&energy_w).map(|(x, w)| x * w).sum();
        // Energy-neutral moves pair each variable with the partners whose
        // marginal objective per joule is most extreme; with few variables
        // that is every pair.
        let mut by_ratio: Vec<usize> = (0..2 * n).collect();
        by_ratio.sort_by(|&a, &b| (grad(&z, a) / energy_w[a]).total_cmp(&(grad(&z, b) / energy_w[b])));
        let mut partners: Vec<usize> =
            by_ratio.iter().take(REFINE_PARTNERS).chain(by_ratio.iter().rev().take(REFINE_PARTNERS)).copied().collect();
        partners.sort_unstable();
        partners.dedup();

        let mut directions: Vec<Vec<(usize, f64)>> = Vec::new();
        for v in 0..2 * n {
            directions.push(vec![(v, 1.0)]);
            for &u in partners.iter().filter(|&&u| u != v) {
                directions.push(vec![(v, energy_w[u]), (u, -energy_w[v])]);
            }
        }
        for k in 0..n {
            let (dr, dt) = (time_w(n + k), -time_w(k));
            directions.push(vec![(k, dr), (n + k, dt)]);
            // same move with the energy change absorbed by another variable
            let spent = dr * energy_w[k] + dt * energy_w[n + k];
            for &j in partners.iter().filter(|&&j| device(j) != k) {
                directions.push(vec![(k, dr), (n + k, dt), (j, -spent / energy_w[j])]);
            }
        }
        for d in &directions {
            let (mut t_lo, mut t_hi) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut limit = |slack: f64, rate: f64| {
                if rate > 0.0 {
                    t_hi = t_hi.min(slack.max(0.0) / rate);
                } else if rate < 0.0 {
                    t_lo = t_lo.max(-slack.max(0.0) / -rate);
                }
            };
            for &(v, dv) in d {
                limit(1.0 - z[v], dv);
                limit(z[v] - lo[v], -dv);
            }
            let mut touched: Vec<usize> = d.iter().map(|&(v, _)| device(v)).collect();
            touched.sort_unstable();
            touched.dedup();
            for &k in &touched {
                let used = z[k] * time_w(k) + z[n + k] * time_w(n + k);
                let rate: f64 = d.iter().filter(|&&(v, _)| device(v) == k).map(|&(v, dv)| dv * time_w(v)).sum();
                limit(caps[k] - used, rate);
            }
            let e_rate: f64 = d.iter().map(|&(v, dv)| dv * energy_w[v]).sum();
            limit(cap_e - energy, e_rate);
            if !(t_lo <= t_hi) || (t_hi - t_lo) == 0.0 {
                continue;
            }

            let mut slope = 0.0;
            let mut curve = 0.0;
            for &k in &touched {
                let dr: f64 = d.iter().filter(|&&(v, _)| v == k).map(|&(_, dv)| dv).sum();
                let dt: f64 = d.iter().filter(|&&(v, _)| v == n + k).map(|&(_, dv)| dv).sum();
                let (r, t) = (z[k], z[n + k]);
                slope += ((2.0 - t) * s - 6.0 * g2 * (1.0 - r)) * dr - r * s * dt;
                curve += 6.0 * g2 * dr * dr - 2.0 * s * dr * dt;
            }
            let along = |t: f64| slope * t + 0.5 * curve * t * t;
            let mut best_t = 0.0;
            let mut best_v = 0.0;
            let mut consider = |t: f64| {
                if t.is_finite() && along(t) < best_v {
                    best_v = along(t);
                    best_t = t;
                }
            };
            consider(t_lo);
            consider(t_hi);
            if curve > 0.0 {
                consider((-slope / curve).clamp(t_lo, t_hi));
            }
            if best_v < -1e-13 {
                for &(v, dv) in d {
                    z[v] = (z[v] + best_t * dv).clamp(lo[v], 1.0);
                }
                energy += best_t * e_rate;
                gained -= best_v;
            }
        }
        if gained <= 1e-12 {
            break;
        }
    }
    let theta = z.split_off(n);
    (z, theta)
}

/// Exact minimiser of one device's Lagrangian
/// `(2 - theta) rho S + 3 G2 (1 - rho)^2 + lambda (rho tau alpha + p theta nu)`
/// over its box and time cap. The Lagrangian is linear in `theta`, so
/// `theta` sits at `theta_min` or at its upper bound `min(1, (cap - rho tau mu) / nu)`;
/// on each of those pieces it is a convex quadratic in `rho`, so the
/// minimum is at a piece endpoint or a clamped stationary point.
fn device_lagrangian_min(params: &ControlParams, k: usize, cap: f64, lambda: f64) -> Option<(f64, f64)> {
    let st = &params.states[k];
    let (rmin, tmin) = (params.bounds.rho_min, params.bounds.theta_min);
    let (s, g2, tau) = (params.sigma2 + params.g2, params.g2, params.tau());
    let rmax = ((cap - tmin * st.nu) / (tau * st.mu)).min(1.0);
    if !(rmax >= rmin) {
        return None;
    }
    let upper = |r: f64| ((cap - r * tau * st.mu) / st.nu).min(1.0).max(tmin);
    let value =
        |r: f64, t: f64| (2.0 - t) * r * s + 3.0 * g2 * (1.0 - r) * (1.0 - r) + lambda * (r * tau * st.alpha + st.power * t * st.nu);
    let slope = tau * st.mu / st.nu;
    let mut candidates = vec![
        rmin,
        rmax,
        1.0 - ((2.0 - tmin) * s + lambda * tau * st.alpha) / (6.0 * g2),
        1.0 - (s + lambda * tau * st.alpha) / (6.0 * g2),
        (6.0 * g2 - (2.0 - cap / st.nu) * s - lambda * tau * st.alpha + lambda * st.power * st.nu * slope)
            / (2.0 * slope * s + 6.0 * g2),
    ];
    let knee = (cap - st.nu) / (tau * st.mu);
    if knee > rmin && knee < rmax {
        candidates.push(knee);
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for r in candidates {
        if !r.is_finite() {
            continue;
        }
        let r = r.clamp(rmin, rmax);
        for t in [tmin, upper(r)] {
            let v = value(r, t);
            if best.is_none_or(|b| v < b.0) {
                best = Some((v, r, t));
            }
        }
    }
    best.map(|(_, r, t)| (r, t))
}

/// Starting point from pricing the energy budget: the per-device
/// Lagrangian minimisers at the smallest multiplier whose total energy fits.
fn dual_start(params: &ControlParams) -> Option<(Vec<f64>, Vec<f64>)> {
    if !(params.g2 > 0.0) {
        return None;
    }
    let n = params.n_devices();
    let caps = params.constraints.device_time_caps();
    let tau = params.tau();
    let cap_e = params.constraints.energy_cap();
    let at = |lambda: f64| -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let mut rho = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n);
        let mut energy = 0.0;
        for k in 0..n {
            let (r, t) = device_lagrangian_min(params, k, caps[k], lambda)?;
            let st = &params.states[k];
            energy += r * tau * st.alpha + st.power * t * st.nu;
            rho.push(r);
            theta.push(t);
        }
        Some((rho, theta, energy))
    };
    let (rho, theta, energy) = at(0.0)?;
    if energy <= cap_e {
        return Some((rho, theta));
    }
    let mut hi = 1.0;
    let mut found = None;
    for _ in 0..200 {
        let (r, t, e) = at(hi)?;
        if e <= cap_e {
            found = Some((r, t));
            break;
        }
        hi *= 2.0;
    }
    let mut found = found?;
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let (r, t, e) = at(mid)?;
        if e <= cap_e {
            hi = mid;
            found = (r, t);
        } else {
            lo = mid;
        }
    }
    Some(found)
}

fn alternate(
    params: &ControlParams,
    settings: &SolverSettings,
    mut rho: Vec<f64>,
    mut theta: Vec<f64>,
) -> Result<ControlDecision> {
    let mut history = Vec::new();
    let mut sub_feasible;
    let mut iterations = 0;
    loop {
        let p21 = solve_p21(params, &rho)?;
        let p22 = solve_p22(params, &p21.values)?;
        sub_feasible = p21.feasible && p22.feasible;
        iterations += 1;
        let moved = z_distance(&p22.values, &p21.values, &rho, &theta);
        rho = p22.values;
        theta = p21.values;
        history.push(p2_objective(params, &rho, &theta));
        if moved <= settings.eps || iterations >= settings.max_iterations {
            break;
        }
    }
    let objective = p2_objective(params, &rho, &theta);
    let feasible = sub_feasible && params.is_feasible(&rho, &theta);
    Ok(ControlDecision { rho, theta, objective, feasible, iterations, objective_history: history })
}

/// Device-selection scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "HCEF")]
    Hcef,
    /// Every device computes and uploads in full.
    #[serde(rename = "CEF")]
    Cef,
    /// Full uploads, optimised update probabilities.
    #[serde(rename = "CEF-F")]
    CefF,
    /// Full computation, optimised compression.
    #[serde(rename = "CEF-C")]
    CefC,
    /// Update probability inversely proportional to compute energy.
    #[serde(rename = "MLL-SGD")]
    MllSgd,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Hcef, Scheme::Cef, Scheme::CefF, Scheme::CefC, Scheme::MllSgd];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Hcef => "HCEF",
            Scheme::Cef => "CEF",
            Scheme::CefF => "CEF-F",
            Scheme::CefC => "CEF-C",
            Scheme::MllSgd => "MLL-SGD",
        }
    }

    /// Whether the scheme needs the gradient estimates.
    pub fn uses_estimates(self) -> bool {
        matches!(self, Scheme::Hcef | Scheme::CefF)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown scheme {s:?}")))
    }
}

/// Decision of a baseline scheme. `Scheme::Hcef` is rejected here; use
/// [`decide`] for dispatch.
///
/// CEF-C keeps full computation even when that breaks the budgets, so it
/// compresses only against the constraints compression can still meet.
/// MLL-SGD uses `rho_n = (1/alpha_n) / sum_k (1/alpha_k)` over all devices,
/// which becomes small for large device counts; values are floored at
/// `rho_min`.
pub fn baseline_policy(scheme: Scheme, params: &ControlParams) -> Result<ControlDecision> {
    let n = params.n_devices();
    let ones = vec![1.0; n];
    match scheme {
        Scheme::Hcef => Err(Error::InvalidParameter("HCEF is not a baseline".into())),
        Scheme::Cef => Ok(ControlDecision::closed_form(params, ones.clone(), ones, 0)),
        Scheme::CefF => {
            let sol = solve_p22(params, &ones)?;
            let mut d = ControlDecision::closed_form(params, sol.values, ones, 1);
            d.feasible &= sol.feasible;
            Ok(d)
        }
        Scheme::CefC => {
            let sol = p21_full_compute(params);
            let mut d = ControlDecision::closed_form(params, ones, sol.values, 1);
            d.feasible &= sol.feasible;
            Ok(d)
        }
        Scheme::MllSgd => {
            let total: f64 = params.states.iter().map(|s| 1.0 / s.alpha).sum();
            let rho = params
                .states
                .iter()
                .map(|s| ((1.0 / s.alpha) / total).max(params.bounds.rho_min))
                .collect();
            Ok(ControlDecision::closed_form(params, rho, ones, 0))
        }
    }
}

/// Decision for any scheme; `previous` seeds a warm start when enabled.
pub fn decide(
    scheme: Scheme,
    params: &ControlParams,
    settings: &SolverSettings,
    previous: Option<&ControlDecision>,
) -> Result<ControlDecision> {
    match scheme {
        Scheme::Hcef => {
            let init = previous
                .filter(|_| settings.warm_start)
                .map(|d| (d.rho.as_slice(), d.theta.as_slice()));
            alternating_solve(params, settings, init)
        }
        other => baseline_policy(other, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::BudgetLedger;
    use crate::rng::{stream, Purpose};

    fn state(mu: f64, nu: f64, alpha: f64, p: f64, sigma2: f64, g2: f64) -> DeviceState {
        DeviceState::new(mu, nu, alpha, p).unwrap().with_estimates(sigma2, g2)
    }

    fn unbounded(states: Vec<DeviceState>, tau: usize) -> ControlParams {
        let n = states.len();
        ControlParams::new(states, ProjectedConstraints::unconstrained(n, tau), Bounds::default()).unwrap()
    }

    fn budgeted(states: Vec<DeviceState>, tau: usize, time: f64, energy: f64) -> ControlParams {
        let n = states.len();
        let mut pc = ProjectedConstraints::unconstrained(n, tau);
        pc.time_budget = time;
        pc.energy_budget = energy;
        ControlParams::new(states, pc, Bounds::default()).unwrap()
    }

    #[test]
    fn test_p21_unbounded_gives_full_uploads() {
        let p = unbounded(vec![state(1.0, 2.0, 1.0, 0.5, 1.0, 1.0); 3], 5);
        let sol = solve_p21(&p, &[0.2, 0.5, 1.0]).unwrap();
        assert!(sol.feasible);
        assert_eq!(sol.values, vec![1.0; 3]);
    }

    #[test]
    fn test_p21_single_device_energy_binding() {
        // compute uses tau * rho * alpha = 5 * 0.5 * 2 = 5 J of a 6 J budget
        let s = state(1.0, 4.0, 2.0, 0.5, 0.0, 1.0);
        let p = budgeted(vec![s], 5, f64::INFINITY, 6.0);
        let sol = solve_p21(&p, &[0.5]).unwrap();
        let room: f64 = 6.0 - 5.0;
        let expected = (room / (0.5 * 4.0)).min(1.0);
        assert!((sol.values[0] - expected).abs() < 1e-12);
        assert!(p.is_feasible(&[0.5], &sol.values));
        // a finer scan of feasible theta never does better
        let best = (1..=10_000)
            .map(|i| i as f64 * 1e-4)
            .filter(|&t| p.is_feasible(&[0.5], &[t]))
            .fold(0.0, f64::max);
        assert!(sol.values[0] >= best - 1e-12);
    }

    #[test]
    fn test_p21_infeasible_returns_floor() {
        let s = state(10.0, 4.0, 2.0, 0.5, 0.0, 1.0);
        let p = budgeted(vec![s], 5, 1.0, f64::INFINITY);
        let sol = solve_p21(&p, &[1.0]).unwrap();
        assert!(!sol.feasible);
        assert_eq!(sol.values, vec![1e-3]);
    }

    #[test]
    fn test_p22_closed_form_five_sixths() {
        let p = unbounded(vec![state(1.0, 1.0, 1.0, 1.0, 0.0, 2.0); 4], 5);
        let sol = solve_p22(&p, &[1.0; 4]).unwrap();
        assert!(sol.feasible);
        for r in sol.values {
            assert!((r - 5.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_p22_large_variance_gives_floor() {
        // C = (2 - 1) * 100 - 5 * 1 > 0
        let p = unbounded(vec![state(1.0, 1.0, 1.0, 1.0, 100.0, 1.0); 2], 5);
        let sol = solve_p22(&p, &[1.0, 1.0]).unwrap();
        assert_eq!(sol.values, vec![1e-3, 1e-3]);
    }

    #[test]
    fn test_p22_rejects_zero_g2() {
        let p = unbounded(vec![state(1.0, 1.0, 1.0, 1.0, 1.0, 0.0)], 5);
        assert!(solve_p22(&p, &[1.0]).is_err());
    }

    #[test]
    fn test_p22_energy_binding_matches_scan() {
        let s = state(1.0, 1.0, 2.0, 0.5, 0.0, 1.0);
        let p = budgeted(vec![s], 5, f64::INFINITY, 4.0 + 0.5);
        let sol = solve_p22(&p, &[1.0]).unwrap();
        // energy 10 rho + 0.5 <= 4.5 gives rho <= 0.4 < 5/6
        assert!((sol.values[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn test_alternating_fixed_point() {
        let p = unbounded(vec![state(1.0, 1.0, 1.0, 1.0, 0.0, 3.0); 5], 5);
        let d = alternating_solve(&p, &SolverSettings::default(), None).unwrap();
        assert!(d.feasible);
        assert!(d.iterations <= 2);
        for (r, t) in d.rho.iter().zip(&d.theta) {
            assert!((r - 5.0 / 6.0).abs() < 1e-6);
            assert_eq!(*t, 1.0);
        }
    }

    #[test]
    fn test_infinite_eps_runs_one_pass() {
        let p = budgeted(vec![state(2.0, 3.0, 1.0, 0.5, 0.5, 1.0); 2], 5, 20.0, 25.0);
        let settings = SolverSettings { eps: f64::INFINITY, ..Default::default() };
        let d = alternating_solve(&p, &settings, None).unwrap();
        assert_eq!(d.iterations, 1);
        assert!(d.feasible);
        assert!(p.is_feasible(&d.rho, &d.theta));
    }

    #[test]
    fn test_invalid_settings() {
        let p = unbounded(vec![state(1.0, 1.0, 1.0, 1.0, 0.0, 1.0)], 5);
        let bad = SolverSettings { max_iterations: 0, ..Default::default() };
        assert!(alternating_solve(&p, &bad, None).is_err());
        let bad = SolverSettings { eps: 0.0, ..Default::default() };
        assert!(alternating_solve(&p, &bad, None).is_err());
    }

    #[test]
    fn test_baselines() {
        let states = vec![state(1.0, 1.0, 1.0, 1.0, 0.0, 1.0), state(1.0, 1.0, 1.0, 1.0, 0.0, 1.0)];
        let p = unbounded(states, 5);
        let cef = baseline_policy(Scheme::Cef, &p).unwrap();
        assert_eq!((cef.rho.clone(), cef.theta.clone()), (vec![1.0; 2], vec![1.0; 2]));
        let mll = baseline_policy(Scheme::MllSgd, &p).unwrap();
        assert_eq!(mll.rho, vec![0.5, 0.5]);
        assert_eq!(mll.theta, vec![1.0, 1.0]);
        let cefc = baseline_policy(Scheme::CefC, &p).unwrap();
        assert_eq!(cefc.theta, vec![1.0, 1.0]);
        assert_eq!(cefc.rho, vec![1.0, 1.0]);
        let ceff = baseline_policy(Scheme::CefF, &p).unwrap();
        assert_eq!(ceff.theta, vec![1.0, 1.0]);
        assert!((ceff.rho[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!(baseline_policy(Scheme::Hcef, &p).is_err());
    }

    #[test]
    fn test_cef_c_drops_unmeetable_time_caps() {
        // device 0 breaks the cap by computing alone; device 1 has room for half an upload
        let states = vec![state(10.0, 30.0, 1.0, 1.0, 0.0, 1.0), state(1.0, 30.0, 1.0, 1.0, 0.0, 1.0)];
        let p = budgeted(states, 5, 20.0, f64::INFINITY);
        assert!(!solve_p21(&p, &[1.0, 1.0]).unwrap().feasible);
        let d = baseline_policy(Scheme::CefC, &p).unwrap();
        assert_eq!(d.rho, vec![1.0, 1.0]);
        assert_eq!(d.theta[0], 1.0);
        assert!((d.theta[1] - 0.5).abs() < 1e-12, "{:?}", d.theta);
        assert!(!d.feasible);
    }

    #[test]
    fn test_mll_sgd_inverse_energy() {
        let states = vec![state(1.0, 1.0, 1.0, 1.0, 0.0, 1.0), state(1.0, 1.0, 3.0, 1.0, 0.0, 1.0)];
        let d = baseline_policy(Scheme::MllSgd, &unbounded(states, 5)).unwrap();
        assert!((d.rho[0] - 0.75).abs() < 1e-15 && (d.rho[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn test_scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
            assert_eq!(s.to_string(), s.name());
        }
        assert!("FedAvg".parse::<Scheme>().is_err());
    }

    #[test]
    fn test_decision_respects_ledger_projection() {
        let states = vec![state(2.0, 1.0, 1.0, 0.5, 0.2, 1.0), state(1.0, 3.0, 2.0, 1.0, 0.1, 2.0)];
        let mut ledger = BudgetLedger::new(200.0, 150.0, 2).unwrap();
        ledger.record_edge_round(&[5.0, 7.0], 9.0).unwrap();
        let pc = crate::cost::project_constraints(&ledger, 3, 4, 2, &[0, 1], &[0.5, 0.5]).unwrap();
        let p = ControlParams::new(states, pc, Bounds::default()).unwrap();
        let d = alternating_solve(&p, &SolverSettings::default(), None).unwrap();
        assert!(d.feasible);
        assert!(p.constraints.time_lhs(&p.states, &d.rho, &d.theta) <= 200.0 + 1e-6);
        assert!(p.constraints.energy_lhs(&p.states, &d.rho, &d.theta) <= 150.0 + 1e-6);
    }

    /// Least squares `0.5 (x.w - y)^2` with Gaussian design and label noise.
    struct LeastSquares {
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
    }

    impl LocalObjective for LeastSquares {
        fn dim(&self) -> usize {
            self.x[0].len()
        }

        fn n_samples(&self) -> usize {
            self.x.len()
        }

        fn gradient_at(&self, model: &ModelVector, indices: &[usize]) -> Result<ModelVector> {
            let w = model.as_slice();
            let mut g = vec![0.0; w.len()];
            for &i in indices {
                let r: f64 = self.x[i].iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - self.y[i];
                for (gj, xj) in g.iter_mut().zip(&self.x[i]) {
                    *gj += r * xj / indices.len() as f64;
                }
            }
            ModelVector::new(g)
        }
    }

    #[test]
    fn test_sigma_estimate_matches_least_squares_variance() {
        use rand_distr::{Distribution, StandardNormal};
        let (d, n, b, noise) = (10, 20_000, 20, 0.5);
        let mut rng = stream(3, Purpose::Data, &[]);
        let w_true: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xi: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps: f64 = StandardNormal.sample(&mut rng);
            y.push(xi.iter().zip(&w_true).map(|(a, c)| a * c).sum::<f64>() + noise * eps);
            x.push(xi);
        }
        let obj = LeastSquares { x, y };
        // at w_true each per-sample gradient is -eps_i x_i with covariance
        // noise^2 I, so a batch of b has total variance noise^2 d / b
        // (finite-population correction included)
        let analytic = noise * noise * d as f64 / b as f64 * (n - b) as f64 / (n - 1) as f64;
        let model = ModelVector::new(w_true).unwrap();
        let mut probe_rng = stream(3, Purpose::Probe, &[]);
        let (sigma2, g2) = estimate_sigma_g(&obj, &model, 50, b, &mut probe_rng).unwrap();
        assert!((sigma2 / analytic - 1.0).abs() < 0.2, "sigma2 {sigma2} vs {analytic}");
        assert!(g2 >= sigma2 * 0.5);
    }

    #[test]
    fn test_sigma_zero_for_identical_samples_and_full_batch() {
        let obj = LeastSquares { x: vec![vec![1.0, 2.0]; 30], y: vec![1.0; 30] };
        let model = ModelVector::new(vec![0.3, -0.1]).unwrap();
        let mut rng = stream(0, Purpose::Probe, &[]);
        let (s, g) = estimate_sigma_g(&obj, &model, 5, 4, &mut rng).unwrap();
        assert!(s.abs() < 1e-24);
        let full = obj.full_gradient(&model).unwrap().norm_sq();
        assert!((g - full).abs() < 1e-12);

        let varied = LeastSquares { x: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], y: vec![1.0, -1.0, 0.5] };
        let (s, g) = estimate_sigma_g(&varied, &model, 5, 3, &mut rng).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(g, varied.full_gradient(&model).unwrap().norm_sq());
        assert!(estimate_sigma_g(&varied, &model, 1, 2, &mut rng).is_err());
    }
}
