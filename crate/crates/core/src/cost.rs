//! Time and energy models, per-round device-state sampling and the budget
//! ledger used to extrapolate the remaining-budget constraints.
//!
//! Expected cost of device `n` in one edge round with update probability
//! `rho` and compression ratio `theta`:
//!
//! * time: `rho * tau * mu + theta * nu`
//! * energy: `rho * tau * alpha + p * theta * nu`
//!
//! A cluster's round time is the max over its devices; a global round adds
//! the slowest backhaul exchange of the cluster and the global round time is
//! the max over clusters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use rand::Rng;

/// Per-device, per-round quantities reported to the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    /// Seconds per local iteration.
    pub mu: f64,
    /// Seconds to upload one full model.
    pub nu: f64,
    /// Joules per mini-batch SGD step.
    pub alpha: f64,
    /// Transmit power in watts.
    pub power: f64,
    /// Estimated stochastic-gradient variance.
    pub sigma2_hat: f64,
    /// Estimated squared gradient norm.
    pub g2_hat: f64,
}

impl DeviceState {
    pub fn new(mu: f64, nu: f64, alpha: f64, power: f64) -> Result<Self> {
        let state = Self { mu, nu, alpha, power, sigma2_hat: 0.0, g2_hat: 0.0 };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.mu, self.nu, self.alpha];
        let non_negative = [self.power, self.sigma2_hat, self.g2_hat];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || non_negative.iter().any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidParameter(format!("invalid device state {self:?}")));
        }
        Ok(())
    }

    pub fn with_estimates(mut self, sigma2_hat: f64, g2_hat: f64) -> Self {
        self.sigma2_hat = sigma2_hat;
        self.g2_hat = g2_hat;
        self
    }

    pub fn expected_time(&self, rho: f64, theta: f64, tau: usize) -> f64 {
        rho * tau as f64 * self.mu + theta * self.nu
    }

    pub fn expected_energy(&self, rho: f64, theta: f64, tau: usize) -> f64 {
        rho * tau as f64 * self.alpha + self.power * theta * self.nu
    }
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn lerp(&self, t: f64) -> f64 {
        self.lo + (self.hi - self.lo) * t
    }

    fn is_valid(&self) -> bool {
        self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()
    }
}

/// Ranges and mixing rules for sampling device states.
///
/// CPU frequency `f` drives both compute time and compute energy:
/// `mu = compute_seconds_at_1ghz / f` and `alpha = compute_joules_at_1ghz * f^2`.
/// With the defaults this gives `mu` in [75, 150] s and `alpha` in
/// [1.5, 6.0] J. Each sampled quantity blends a persistent per-device draw
/// (weight `persistence`) with a fresh per-round draw, which keeps fast and
/// slow devices recognisable while their state fluctuates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeterogeneityProfile {
    pub cpu_ghz: Interval,
    pub compute_seconds_at_1ghz: f64,
    pub compute_joules_at_1ghz: f64,
    pub power_w: Interval,
    pub bandwidth_mbps: Interval,
    pub backhaul_mbps: f64,
    pub bits_per_param: f64,
    /// Model size charged for uploads and backhaul transfers. `None` charges
    /// the simulated model's own parameter count.
    pub charged_params: Option<usize>,
    pub persistence: f64,
    pub seed: u64,
}

impl Default for HeterogeneityProfile {
    fn default() -> Self {
        Self {
            cpu_ghz: Interval::new(1.0, 2.0),
            compute_seconds_at_1ghz: 150.0,
            compute_joules_at_1ghz: 1.5,
            power_w: Interval::new(0.1, 1.0),
            bandwidth_mbps: Interval::new(1.0, 5.0),
            backhaul_mbps: 50.0,
            bits_per_param: 32.0,
            charged_params: None,
            persistence: 0.7,
            seed: 0,
        }
    }
}

impl HeterogeneityProfile {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.cpu_ghz, self.power_w, self.bandwidth_mbps];
        let scalars = [self.compute_seconds_at_1ghz, self.compute_joules_at_1ghz, self.backhaul_mbps, self.bits_per_param];
        if ranges.iter().any(|r| !r.is_valid()) || scalars.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("heterogeneity ranges must be positive and ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(Error::InvalidParameter(format!(
                "persistence must be in [0, 1], got {}",
                self.persistence
            )));
        }
        if self.charged_params == Some(0) {
            return Err(Error::InvalidParameter("charged_params must be positive".into()));
        }
        Ok(())
    }

    /// Bits in one full-model transfer for a model with `model_params` parameters.
    pub fn model_bits(&self, model_params: usize) -> f64 {
        self.charged_params.unwrap_or(model_params) as f64 * self.bits_per_param
    }

    /// Seconds to send one full model over one backhaul link.
    pub fn backhaul_link_time(&self, model_params: usize) -> f64 {
        self.model_bits(model_params) / (self.backhaul_mbps * 1e6)
    }
}

/// Cost fields of a device's state at edge round `(l, r)`; the estimates
/// are left at zero. Deterministic in `(profile.seed, device, l, r)`.
pub fn sample_device_state(
    profile: &HeterogeneityProfile,
    device: usize,
    l: usize,
    r: usize,
    model_params: usize,
) -> DeviceState {
    let mut persistent = stream(profile.seed, Purpose::DeviceProfile, &[device as u64]);
    let mut fresh = stream(profile.seed, Purpose::DeviceRound, &[device as u64, l as u64, r as u64]);
    let w = profile.persistence;
    let mut blend = || w * persistent.random::<f64>() + (1.0 - w) * fresh.random::<f64>();
    let freq = profile.cpu_ghz.lerp(blend());
    let bandwidth = profile.bandwidth_mbps.lerp(blend());
    let power = profile.power_w.lerp(blend());
    DeviceState {
        mu: profile.compute_seconds_at_1ghz / freq,
        nu: profile.model_bits(model_params) / (bandwidth * 1e6),
        alpha: profile.compute_joules_at_1ghz * freq * freq,
        power,
        sigma2_hat: 0.0,
        g2_hat: 0.0,
    }
}

fn check_aligned(states: &[DeviceState], rho: &[f64], theta: &[f64]) -> Result<()> {
    for v in [rho.len(), theta.len()] {
        if v != states.len() {
            return Err(Error::DimensionMismatch { expected: states.len(), actual: v });
        }
    }
    Ok(())
}

/// Expected time of one cluster's edge round: the slowest device's
/// `rho tau mu + theta nu`, plus the slowest backhaul exchange when the
/// round closes a global round (`backhaul` empty otherwise).
pub fn round_time(states: &[DeviceState], rho: &[f64], theta: &[f64], tau: usize, backhaul: &[f64]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyCluster(0));
    }
    check_aligned(states, rho, theta)?;
    let compute = states
        .iter()
        .zip(rho.iter().zip(theta))
        .map(|(s, (&r, &t))| s.expected_time(r, t, tau))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(compute + backhaul.iter().copied().fold(0.0, f64::max))
}

/// Expected energy of one edge round summed over all devices.
pub fn round_energy(states: &[DeviceState], rho: &[f64], theta: &[f64], tau: usize) -> Result<f64> {
    check_aligned(states, rho, theta)?;
    Ok(states
        .iter()
        .zip(rho.iter().zip(theta))
        .map(|(s, (&r, &t))| s.expected_energy(r, t, tau))
        .sum())
}

/// Per-cluster intra-round times `max_{n in S_i} (rho tau mu + theta nu)`.
pub fn cluster_round_times(
    clusters: &[Vec<usize>],
    states: &[DeviceState],
    rho: &[f64],
    theta: &[f64],
    tau: usize,
) -> Result<Vec<f64>> {
    check_aligned(states, rho, theta)?;
    clusters
        .iter()
        .enumerate()
        .map(|(i, members)| {
            if members.is_empty() {
                return Err(Error::EmptyCluster(i));
            }
            Ok(members
                .iter()
                .map(|&n| states[n].expected_time(rho[n], theta[n], tau))
                .fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// Running account of simulated time and energy against the budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    time_budget: f64,
    energy_budget: f64,
    /// Sum of completed global-round times.
    past_time: f64,
    /// Sum of completed global-round energies.
    past_energy: f64,
    /// Per-cluster time spent in the current global round.
    cluster_partial: Vec<f64>,
    /// Energy spent in the current global round.
    energy_partial: f64,
    global_round: usize,
    edge_round: usize,
}

impl BudgetLedger {
    pub fn new(time_budget: f64, energy_budget: f64, n_clusters: usize) -> Result<Self> {
        if !(time_budget > 0.0) || !(energy_budget > 0.0) {
            return Err(Error::InvalidParameter("budgets must be positive".into()));
        }
        Ok(Self {
            time_budget,
            energy_budget,
            past_time: 0.0,
            past_energy: 0.0,
            cluster_partial: vec![0.0; n_clusters],
            energy_partial: 0.0,
            global_round: 0,
            edge_round: 0,
        })
    }

    pub fn time_budget(&self) -> f64 {
        self.time_budget
    }

    pub fn energy_budget(&self) -> f64 {
        self.energy_budget
    }

    /// `(l, r)` of the next edge round.
    pub fn position(&self) -> (usize, usize) {
        (self.global_round, self.edge_round)
    }

    pub fn past_time(&self) -> f64 {
        self.past_time
    }

    pub fn past_energy(&self) -> f64 {
        self.past_energy
    }

    pub fn cluster_partial(&self) -> &[f64] {
        &self.cluster_partial
    }

    pub fn energy_partial(&self) -> f64 {
        self.energy_partial
    }

    /// Wall-clock time so far: completed global rounds plus the slowest
    /// cluster's progress in the current one.
    pub fn elapsed_time(&self) -> f64 {
        self.past_time + self.cluster_partial.iter().copied().fold(0.0, f64::max)
    }

    pub fn consumed_energy(&self) -> f64 {
        self.past_energy + self.energy_partial
    }

    pub fn record_edge_round(&mut self, cluster_times: &[f64], energy: f64) -> Result<()> {
        if cluster_times.len() != self.cluster_partial.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cluster_partial.len(),
                actual: cluster_times.len(),
            });
        }
        if cluster_times.iter().chain([&energy]).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("round costs must be finite and non-negative".into()));
        }
        for (p, t) in self.cluster_partial.iter_mut().zip(cluster_times) {
            *p += t;
        }
        self.energy_partial += energy;
        self.edge_round += 1;
        Ok(())
    }

    /// Ends the current global round: its time is the max over clusters of
    /// partial time plus the cluster's backhaul time. Returns that time.
    pub fn close_global_round(&mut self, backhaul: &[f64]) -> Result<f64> {
        if backhaul.len() != self.cluster_partial.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cluster_partial.len(),
                actual: backhaul.len(),
            });
        }
        let round_time = self
            .cluster_partial
            .iter()
            .zip(backhaul)
            .map(|(h, b)| h + b)
            .fold(0.0, f64::max);
        self.past_time += round_time;
        self.past_energy += self.energy_partial;
        self.cluster_partial.iter_mut().for_each(|p| *p = 0.0);
        self.energy_partial = 0.0;
        self.global_round += 1;
        self.edge_round = 0;
        Ok(round_time)
    }
}

/// Left-hand sides of the remaining-budget constraints at edge round
/// `(l, r)`: the current round's cost is extrapolated over the remaining
/// `q - r` edge rounds and `phi - l` global rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedConstraints {
    /// `phi - l`
    pub remaining_global: f64,
    /// `q - r`
    pub remaining_edge: f64,
    pub tau: usize,
    pub cluster_of: Vec<usize>,
    /// Per cluster: time already spent in this global round plus its
    /// backhaul time.
    pub cluster_offsets: Vec<f64>,
    pub past_time: f64,
    pub time_budget: f64,
    pub energy_partial: f64,
    pub past_energy: f64,
    pub energy_budget: f64,
}

/// Relative slack accepted when checking constraints numerically.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

fn within(lhs: f64, budget: f64) -> bool {
    lhs <= budget + FEASIBILITY_TOLERANCE * budget.abs().max(1.0)
}

impl ProjectedConstraints {
    /// Infinite budgets, every device in one cluster, first round of a
    /// single-round run.
    pub fn unconstrained(n_devices: usize, tau: usize) -> Self {
        Self {
            remaining_global: 1.0,
            remaining_edge: 1.0,
            tau,
            cluster_of: vec![0; n_devices],
            cluster_offsets: vec![0.0],
            past_time: 0.0,
            time_budget: f64::INFINITY,
            energy_partial: 0.0,
            past_energy: 0.0,
            energy_budget: f64::INFINITY,
        }
    }

    /// `(phi - l) max_i {(q - r) max_{n in S_i}(rho tau mu + theta nu) + H_i + B_i} + P`.
    pub fn time_lhs(&self, states: &[DeviceState], rho: &[f64], theta: &[f64]) -> f64 {
        let mut per_cluster = vec![f64::NEG_INFINITY; self.cluster_offsets.len()];
        for (n, s) in states.iter().enumerate() {
            let c = self.cluster_of[n];
            per_cluster[c] = per_cluster[c].max(s.expected_time(rho[n], theta[n], self.tau));
        }
        let worst = per_cluster
            .iter()
            .zip(&self.cluster_offsets)
            .map(|(t, off)| self.remaining_edge * t + off)
            .fold(f64::NEG_INFINITY, f64::max);
        self.remaining_global * worst + self.past_time
    }

    /// `(phi - l) [(q - r) sum_n (rho tau alpha + p theta nu) + E_partial] + E_past`.
    pub fn energy_lhs(&self, states: &[DeviceState], rho: &[f64], theta: &[f64]) -> f64 {
        let round: f64 = states
            .iter()
            .enumerate()
            .map(|(n, s)| s.expected_energy(rho[n], theta[n], self.tau))
            .sum();
        self.remaining_global * (self.remaining_edge * round + self.energy_partial) + self.past_energy
    }

    pub fn is_feasible(&self, states: &[DeviceState], rho: &[f64], theta: &[f64]) -> bool {
        within(self.time_lhs(states, rho, theta), self.time_budget)
            && within(self.energy_lhs(states, rho, theta), self.energy_budget)
    }

    /// Equivalent per-device form of the time constraint:
    /// `rho_n tau mu_n + theta_n nu_n <= cap_n`.
    pub fn device_time_caps(&self) -> Vec<f64> {
        let per_global = (self.time_budget - self.past_time) / self.remaining_global;
        self.cluster_of
            .iter()
            .map(|&c| (per_global - self.cluster_offsets[c]) / self.remaining_edge)
            .collect()
    }

    /// Equivalent form of the energy constraint:
    /// `sum_n (rho_n tau alpha_n + p_n theta_n nu_n) <= cap`.
    pub fn energy_cap(&self) -> f64 {
        ((self.energy_budget - self.past_energy) / self.remaining_global - self.energy_partial) / self.remaining_edge
    }
}

/// Builds the projected constraints for the ledger's current position.
/// `backhaul[i]` is cluster `i`'s slowest backhaul exchange.
pub fn project_constraints(
    ledger: &BudgetLedger,
    phi: usize,
    q: usize,
    tau: usize,
    cluster_of: &[usize],
    backhaul: &[f64],
) -> Result<ProjectedConstraints> {
    let (l, r) = ledger.position();
    if l >= phi || r >= q {
        return Err(Error::InvalidParameter(format!("round ({l}, {r}) outside phi = {phi}, q = {q}")));
    }
    if backhaul.len() != ledger.cluster_partial.len() {
        return Err(Error::DimensionMismatch { expected: ledger.cluster_partial.len(), actual: backhaul.len() });
    }
    Ok(ProjectedConstraints {
        remaining_global: (phi - l) as f64,
        remaining_edge: (q - r) as f64,
        tau,
        cluster_of: cluster_of.to_vec(),
        cluster_offsets: ledger.cluster_partial.iter().zip(backhaul).map(|(h, b)| h + b).collect(),
        past_time: ledger.past_time,
        time_budget: ledger.time_budget,
        energy_partial: ledger.energy_partial,
        past_energy: ledger.past_energy,
        energy_budget: ledger.energy_budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(mu: f64, nu: f64, alpha: f64, power: f64) -> DeviceState {
        DeviceState::new(mu, nu, alpha, power).unwrap()
    }

    #[test]
    fn test_default_profile_ranges() {
        let p = HeterogeneityProfile::default();
        for device in 0..40 {
            for round in 0..10 {
                let s = sample_device_state(&p, device, round / 3, round % 3, 1000);
                assert!((75.0..=150.0).contains(&s.mu), "mu {}", s.mu);
                assert!((1.5..=6.0).contains(&s.alpha), "alpha {}", s.alpha);
                assert!((0.1..=1.0).contains(&s.power));
                let bandwidth = 1000.0 * 32.0 / s.nu / 1e6;
                assert!((1.0 - 1e-9..=5.0 + 1e-9).contains(&bandwidth));
            }
        }
    }

    #[test]
    fn test_sampling_is_deterministic() {
        let p = HeterogeneityProfile { seed: 5, ..Default::default() };
        assert_eq!(sample_device_state(&p, 3, 2, 1, 10), sample_device_state(&p, 3, 2, 1, 10));
        assert_ne!(sample_device_state(&p, 3, 2, 1, 10), sample_device_state(&p, 3, 2, 2, 10));
    }

    #[test]
    fn test_upload_time_arithmetic() {
        let p = HeterogeneityProfile { bandwidth_mbps: Interval::new(1.0, 1.0), ..Default::default() };
        let s = sample_device_state(&p, 0, 0, 0, 10_000);
        assert!((s.nu - 0.32).abs() < 1e-12);
        let charged = HeterogeneityProfile { charged_params: Some(20_000), ..p };
        assert!((sample_device_state(&charged, 0, 0, 0, 10).nu - 0.64).abs() < 1e-12);
        assert!((p.backhaul_link_time(10_000) - 0.0064).abs() < 1e-15);
    }

    #[test]
    fn test_round_time_examples() {
        // (rho tau mu, theta nu) = (10, 2) and (6, 8)
        let states = [st(10.0, 2.0, 1.0, 1.0), st(6.0, 8.0, 1.0, 1.0)];
        assert_eq!(round_time(&states, &[1.0, 1.0], &[1.0, 1.0], 1, &[]).unwrap(), 14.0);
        assert_eq!(round_time(&states, &[1.0, 1.0], &[1.0, 1.0], 1, &[0.5, 3.0]).unwrap(), 17.0);
        let single = [st(3.0, 4.0, 1.0, 1.0)];
        assert_eq!(round_time(&single, &[1.0], &[1.0], 5, &[]).unwrap(), 19.0);
        assert!(round_time(&[], &[], &[], 5, &[]).is_err());
        // vanishing rho and theta leave only the slowest uploader
        let t = round_time(&states, &[1e-12, 1e-12], &[1e-3, 1e-3], 1, &[]).unwrap();
        assert!((t - 8e-3).abs() < 1e-9);
    }

    #[test]
    fn test_round_energy_examples() {
        let single = [st(1.0, 2.0, 3.0, 0.5)];
        assert_eq!(round_energy(&single, &[1.0], &[1.0], 4).unwrap(), 4.0 * 3.0 + 0.5 * 2.0);
        let pair = [st(1.0, 10.0, 2.0, 0.5), st(1.0, 2.0, 1.0, 1.0)];
        let e = round_energy(&pair, &[0.5, 1.0], &[0.4, 1.0], 5).unwrap();
        assert!((e - 14.0).abs() < 1e-12);
        assert!(round_energy(&pair, &[1.0], &[1.0, 1.0], 5).is_err());
    }

    #[test]
    fn test_invalid_state() {
        assert!(DeviceState::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(DeviceState::new(1.0, 1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn test_ledger_accounting() {
        let mut ledger = BudgetLedger::new(100.0, 50.0, 2).unwrap();
        ledger.record_edge_round(&[3.0, 5.0], 2.0).unwrap();
        assert_eq!(ledger.elapsed_time(), 5.0);
        ledger.record_edge_round(&[4.0, 1.0], 1.0).unwrap();
        assert_eq!(ledger.elapsed_time(), 7.0);
        assert_eq!(ledger.position(), (0, 2));
        let t = ledger.close_global_round(&[0.5, 0.25]).unwrap();
        assert_eq!(t, 7.5);
        assert_eq!(ledger.elapsed_time(), 7.5);
        assert_eq!(ledger.consumed_energy(), 3.0);
        assert_eq!(ledger.position(), (1, 0));
        assert!(ledger.record_edge_round(&[1.0], 1.0).is_err());
    }

    #[test]
    fn test_projection_at_start_reduces_to_full_extrapolation() {
        let states = [st(2.0, 1.0, 1.0, 0.5), st(1.0, 3.0, 2.0, 1.0), st(1.5, 0.5, 0.5, 0.2)];
        let (rho, theta) = ([0.5, 1.0, 0.7], [1.0, 0.2, 0.9]);
        let (phi, q, tau) = (4, 3, 2);
        let ledger = BudgetLedger::new(1e3, 1e3, 2).unwrap();
        let cluster_of = [0, 0, 1];
        let backhaul = [0.1, 0.3];
        let pc = project_constraints(&ledger, phi, q, tau, &cluster_of, &backhaul).unwrap();
        let c0 = (states[0].expected_time(rho[0], theta[0], tau)).max(states[1].expected_time(rho[1], theta[1], tau));
        let c1 = states[2].expected_time(rho[2], theta[2], tau);
        let expected_time = 4.0 * (3.0 * c0 + 0.1).max(3.0 * c1 + 0.3);
        assert!((pc.time_lhs(&states, &rho, &theta) - expected_time).abs() < 1e-12);
        let e = round_energy(&states, &rho, &theta, tau).unwrap();
        assert!((pc.energy_lhs(&states, &rho, &theta) - 12.0 * e).abs() < 1e-12);
    }

    #[test]
    fn test_projection_multipliers_at_last_round() {
        let mut ledger = BudgetLedger::new(1e3, 1e3, 1).unwrap();
        let (phi, q) = (2, 2);
        for _ in 0..q {
            ledger.record_edge_round(&[1.0], 1.0).unwrap();
        }
        ledger.close_global_round(&[0.0]).unwrap();
        ledger.record_edge_round(&[1.0], 1.0).unwrap();
        let pc = project_constraints(&ledger, phi, q, 1, &[0], &[0.0]).unwrap();
        assert_eq!((pc.remaining_global, pc.remaining_edge), (1.0, 1.0));
        ledger.record_edge_round(&[1.0], 1.0).unwrap();
        ledger.close_global_round(&[0.0]).unwrap();
        assert!(project_constraints(&ledger, phi, q, 1, &[0], &[0.0]).is_err());
    }

    #[test]
    fn test_caps_agree_with_lhs() {
        let states = [st(2.0, 1.0, 1.0, 0.5), st(1.0, 3.0, 2.0, 1.0)];
        let mut ledger = BudgetLedger::new(60.0, 40.0, 2).unwrap();
        ledger.record_edge_round(&[2.0, 1.0], 3.0).unwrap();
        let pc = project_constraints(&ledger, 3, 4, 2, &[0, 1], &[0.5, 0.5]).unwrap();
        let caps = pc.device_time_caps();
        // put device 0 exactly on its cap and device 1 well under: time binds
        let theta = [0.5, 0.1];
        let rho0 = (caps[0] - theta[0] * states[0].nu) / (2.0 * states[0].mu);
        let rho = [rho0, 0.01];
        assert!((pc.time_lhs(&states, &rho, &theta) - 60.0).abs() < 1e-9);
        let e_round: f64 = round_energy(&states, &rho, &theta, 2).unwrap();
        assert!((pc.energy_lhs(&states, &rho, &theta) - 40.0 <= 0.0) == (e_round <= pc.energy_cap()));
    }
}
