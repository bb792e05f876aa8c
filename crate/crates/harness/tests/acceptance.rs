//! Acceptance gate. Runs every criterion at its pinned tolerance and prints
//! one PASS/FAIL line each. Criteria in `KNOWN_RED` are reported but do not
//! fail the process; see the README for why criterion 8 is red.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use hcef_core::compression::{random_k, top_k, CompressionRatio};
use hcef_core::controller::{alternating_solve, Bounds, ControlParams, Scheme, SolverSettings};
use hcef_core::cost::{DeviceState, ProjectedConstraints};
use hcef_core::data::DeviceObjective;
use hcef_core::model::{sgd_step, Batch, BatchSampler, LocalObjective, LossModel, ModelVector};
use hcef_core::protocol::{inter_cluster_gossip, Budgets, DataConfig, DataSource, Simulation, SimulationConfig};
use hcef_core::rng::{stream, Purpose};
use hcef_harness::config::{parse_config, ExperimentSpec, OracleSettings};
use hcef_harness::experiment::run_experiment;
use hcef_harness::oracle::run_oracle;
use hcef_harness::plotdata::{read_run_traces, time_to_target, TraceFile};
use nalgebra::DMatrix;
use rand::Rng;

const KNOWN_RED: [u32; 1] = [8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian_vector(rng: &mut impl Rng, d: usize) -> ModelVector {
    // Box-Muller keeps this free of extra dependencies
    let v = (0..d)
        .map(|_| {
            let (u1, u2): (f64, f64) = (1.0 - rng.random::<f64>(), rng.random());
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    ModelVector::new(v).unwrap()
}

fn contraction() -> Outcome {
    let mut rng = stream(101, Purpose::Data, &[]);
    let thetas = [0.1, 0.5, 0.9];
    let mut violations = 0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=400);
        let x = gaussian_vector(&mut rng, d);
        for &theta in &thetas {
            let ratio = CompressionRatio::new(theta).unwrap();
            let k = ratio.kept(d);
            let residual = x.distance_sq(&top_k(&x, ratio).unwrap().densify()).unwrap();
            // exact arithmetic gives the bound; allow only rounding
            if residual > (1.0 - k as f64 / d as f64) * x.norm_sq() * (1.0 + 1e-12) {
                violations += 1;
            }
        }
    }

    let d = 50;
    let x = gaussian_vector(&mut rng, d);
    let mut worst: f64 = 0.0;
    for &theta in &thetas {
        let ratio = CompressionRatio::new(theta).unwrap();
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            sum += x.distance_sq(&random_k(&x, ratio, &mut rng).unwrap().densify()).unwrap();
        }
        let expected = (1.0 - ratio.kept(d) as f64 / d as f64) * x.norm_sq();
        worst = worst.max((sum / draws as f64 / expected - 1.0).abs());
    }
    outcome(
        violations == 0 && worst <= 0.02,
        format!("top_k violations {violations} of 3000; random_k worst relative error of the mean residual {worst:.4}"),
    )
}

fn stochasticity_error(h: &DMatrix<f64>) -> f64 {
    let rows = h.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let cols = h.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    let asym = (h - h.transpose()).amax();
    let negative = h.iter().fold(0.0f64, |a, &v| a.max(-v));
    rows.max(cols).max(asym).max(negative)
}

fn disagreement(models: &[ModelVector]) -> f64 {
    let m = models.len() as f64;
    let d = models[0].len();
    let mean: Vec<f64> = (0..d).map(|j| models.iter().map(|y| y.as_slice()[j]).sum::<f64>() / m).collect();
    models
        .iter()
        .map(|y| y.as_slice().iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn mixing() -> Outcome {
    use hcef_core::topology::{build_complete, build_erdos_renyi, build_ring, metropolis_mixing, validate_mixing};
    let mut graphs = Vec::new();
    for m in [2, 3, 5, 8, 16] {
        graphs.push(build_ring(m).unwrap());
        graphs.push(build_complete(m).unwrap());
        for (i, p) in [0.2, 0.5, 1.0].into_iter().enumerate() {
            graphs.push(build_erdos_renyi(m, p, 7 * m as u64 + i as u64).unwrap());
        }
    }
    let mut worst_stochastic: f64 = 0.0;
    let mut all_valid = true;
    for g in &graphs {
        let h = metropolis_mixing(g);
        worst_stochastic = worst_stochastic.max(stochasticity_error(&h));
        all_valid &= validate_mixing(&h, g).is_ok();
    }

    let ring = build_ring(8).unwrap();
    let ring_zeta = validate_mixing(&metropolis_mixing(&ring), &ring).unwrap();
    let ring_oracle = 1.0 / 3.0 + 2.0 / 3.0 * (std::f64::consts::PI / 4.0).cos();
    let complete = build_complete(8).unwrap();
    let complete_zeta = validate_mixing(&metropolis_mixing(&complete), &complete).unwrap();

    let mut rng = stream(202, Purpose::Data, &[]);
    let mut worst_ratio: f64 = 0.0;
    let mut contraction_ok = true;
    for trial in 0..100u64 {
        let m = rng.random_range(2..=12);
        let g = match trial % 3 {
            0 => build_ring(m).unwrap(),
            1 => build_complete(m).unwrap(),
            _ => build_erdos_renyi(m, rng.random_range(0.2..=1.0), trial).unwrap(),
        };
        let h = metropolis_mixing(&g);
        let zeta = validate_mixing(&h, &g).unwrap();
        let d = rng.random_range(1..20);
        let models: Vec<ModelVector> = (0..m).map(|_| gaussian_vector(&mut rng, d)).collect();
        let before = disagreement(&models);
        let after = disagreement(&inter_cluster_gossip(&models, &h).unwrap());
        contraction_ok &= after <= zeta * before + 1e-12 * before.max(1.0);
        // complete graphs have zeta at rounding level; the ratio means nothing there
        if zeta > 1e-6 {
            worst_ratio = worst_ratio.max(after / before / zeta);
        }
    }

    let pass = all_valid
        && worst_stochastic <= 1e-12
        && (ring_zeta - ring_oracle).abs() <= 1e-9
        && complete_zeta < 1e-9
        && contraction_ok;
    outcome(
        pass,
        format!(
            "{} graphs, worst stochasticity error {worst_stochastic:.1e}; ring-8 zeta error {:.1e}; complete zeta {complete_zeta:.1e}; worst contraction / zeta {worst_ratio:.4} (zeta > 1e-6)",
            graphs.len(),
            (ring_zeta - ring_oracle).abs()
        ),
    )
}

fn oracle() -> Outcome {
    let settings = OracleSettings::default();
    let r = run_oracle(&settings, &SolverSettings::default()).unwrap();
    outcome(
        r.within_tolerance >= 95 && r.all_monotone && r.all_feasibility_verified,
        format!(
            "{}/{} within {} of the grid optimum; monotone {}; feasibility verified {}",
            r.within_tolerance, settings.instances, settings.tolerance, r.all_monotone, r.all_feasibility_verified
        ),
    )
}

fn fixed_point() -> Outcome {
    let mut rng = stream(303, Purpose::Data, &[]);
    let tau = 5;
    let states: Vec<DeviceState> = (0..20)
        .map(|_| {
            DeviceState::new(rng.random_range(75.0..150.0), rng.random_range(1.0..10.0), rng.random_range(1.5..6.0), rng.random_range(0.1..1.0))
                .unwrap()
                .with_estimates(0.0, rng.random_range(0.1..10.0))
        })
        .collect();
    let n = states.len();
    let params = ControlParams::new(states, ProjectedConstraints::unconstrained(n, tau), Bounds::default()).unwrap();
    let d = alternating_solve(&params, &SolverSettings::default(), None).unwrap();
    let err = d.rho.iter().map(|r| (r - 5.0 / 6.0).abs()).fold(0.0, f64::max);
    let theta_one = d.theta.iter().all(|&t| t == 1.0);
    outcome(err <= 1e-6 && theta_one, format!("{n} devices, max |rho - 5/6| {err:.1e}; theta all 1 {theta_one}"))
}

fn fedavg() -> Outcome {
    let cfg = SimulationConfig {
        n_devices: 8,
        n_clusters: 1,
        phi: 20,
        q: 1,
        tau: 3,
        eta: 0.1,
        batch_size: 16,
        scheme: Scheme::Cef,
        budgets: Some(Budgets::UNLIMITED),
        seed: 5,
        data: DataConfig {
            source: DataSource::Synthetic { n_classes: 4, feature_dim: 6, n_samples: 1600, class_sep: 2.0 },
            ..Default::default()
        },
        allow_large_learning_rate: true,
        ..Default::default()
    };
    let sim = Simulation::new(cfg.clone()).unwrap();
    let out = sim.run().unwrap();

    // plain FedAvg: every device runs tau SGD steps from the global model,
    // the server adds the mean update
    let n = cfg.n_devices;
    let mut samplers: Vec<BatchSampler> = (0..n)
        .map(|k| BatchSampler::new(sim.shards()[k].len(), stream(cfg.seed, Purpose::BatchSampler, &[k as u64])))
        .collect();
    let mut w = sim.initial_model().clone();
    let mut mismatches = 0;
    for t in 0..cfg.phi {
        let mut sum = vec![0.0; w.len()];
        for (k, sampler) in samplers.iter_mut().enumerate() {
            let obj = DeviceObjective { data: &sim.shards()[k], loss: sim.loss_model() };
            let mut x = w.clone();
            for _ in 0..cfg.tau {
                let batch = sampler.next_batch(cfg.batch_size);
                x = sgd_step(&x, &obj.gradient_at(&x, &batch).unwrap(), cfg.eta).unwrap();
            }
            for (s, v) in sum.iter_mut().zip(x.sub(&w).unwrap().as_slice()) {
                *s += v;
            }
        }
        w = ModelVector::new(w.as_slice().iter().zip(&sum).map(|(a, s)| a + s / n as f64).collect()).unwrap();
        let eval = sim.evaluate(&w).unwrap();
        let row = &out.traces[t];
        let same = row.loss.to_bits() == eval.loss.to_bits()
            && row.accuracy.to_bits() == eval.accuracy.to_bits()
            && row.mean_rho == 1.0
            && row.mean_theta == 1.0;
        if !same {
            mismatches += 1;
        }
    }
    let model_equal = out.final_model.as_slice().iter().zip(w.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    let pass = out.traces.len() == cfg.phi && mismatches == 0 && model_equal;
    outcome(pass, format!("{} rounds, {mismatches} rows differ; final model bitwise equal {model_equal}", out.traces.len()))
}

fn fd_error(loss: &LossModel, model: &ModelVector, batch: &Batch) -> f64 {
    let h = 1e-5;
    let analytic = loss.stochastic_gradient(model, batch).unwrap();
    let base = model.as_slice();
    let numeric: Vec<f64> = (0..base.len())
        .map(|j| {
            let (mut plus, mut minus) = (base.to_vec(), base.to_vec());
            plus[j] += h;
            minus[j] -= h;
            let lp = loss.loss(&ModelVector::new(plus).unwrap(), batch).unwrap();
            let lm = loss.loss(&ModelVector::new(minus).unwrap(), batch).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect();
    let diff = analytic.as_slice().iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.norm_sq().sqrt().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-8);
    diff / scale
}

fn gradients() -> Outcome {
    let mut rng = stream(606, Purpose::Data, &[]);
    let mut worst = [0.0f64; 2];
    for (family, slot) in worst.iter_mut().enumerate() {
        for pair in 0..50u64 {
            let f = rng.random_range(2..8);
            let c = rng.random_range(2..6);
            let loss = if family == 0 { LossModel::logistic(f, c) } else { LossModel::mlp(f, 5, c) }.unwrap();
            let model = loss.init(&mut stream(606, Purpose::ModelInit, &[family as u64, pair]));
            let model = model.scale(rng.random_range(1.0..5.0)).unwrap();
            let rows = rng.random_range(1..10);
            let features = gaussian_vector(&mut rng, rows * f).into_vec();
            let labels = (0..rows).map(|_| rng.random_range(0..c)).collect();
            let batch = Batch::new(features, labels, f).unwrap();
            *slot = slot.max(fd_error(&loss, &model, &batch));
        }
    }
    outcome(
        worst.iter().all(|&e| e < 1e-4),
        format!("worst relative error logistic {:.1e}, mlp {:.1e} over 50 pairs each", worst[0], worst[1]),
    )
}

fn default_spec() -> ExperimentSpec {
    parse_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")).unwrap()
}

fn trace_path(run_dir: &Path, label: &str) -> std::path::PathBuf {
    run_dir.join("traces").join(format!("{label}.csv"))
}

/// Twelve cells under tight budgets. Each run may overrun a budget by at
/// most the cost of one round at `(rho_min, theta_min)`.
fn budget_safety(run_dir: &Path) -> Outcome {
    let mut spec = default_spec();
    spec.name = "budget-safety".into();
    spec.base.budgets = Some(Budgets { time: 20_000.0, energy: 35_000.0 });
    spec.sweep.schemes = Some(vec![Scheme::Hcef, Scheme::Cef, Scheme::CefF, Scheme::CefC]);
    spec.sweep.betas = Some(vec![0.1, 1.0, 10.0]);
    spec.sweep.seeds = Some(vec![0]);
    let report = run_experiment(&spec, run_dir).unwrap();
    let cells = spec.cells().unwrap();
    let mut violations = Vec::new();
    let mut stopped = 0;
    for cell in &cells {
        let sim = Simulation::new(cell.config.clone()).unwrap();
        let trace = hcef_harness::plotdata::read_trace(&trace_path(run_dir, &cell.run_label())).unwrap();
        let last = trace.rows.last().unwrap();
        let states = sim.device_states(last.global_round, last.edge_round);
        let (tau, lo) = (cell.config.tau, cell.config.solver.bounds);
        let floor_time = states.iter().map(|s| s.expected_time(lo.rho_min, lo.theta_min, tau)).fold(0.0, f64::max)
            + sim.backhaul_times().iter().copied().fold(0.0, f64::max);
        let floor_energy: f64 = states.iter().map(|s| s.expected_energy(lo.rho_min, lo.theta_min, tau)).sum();
        let b = cell.config.budgets.unwrap();
        if last.cumulative_time > b.time + floor_time + 1e-9 || last.cumulative_energy > b.energy + floor_energy + 1e-9 {
            violations.push(cell.run_label());
        }
        stopped += usize::from(last.floor_round);
    }
    outcome(
        report.failures.is_empty() && cells.len() == 12 && violations.is_empty(),
        format!("{} cells, {stopped} stopped on a budget, violations {violations:?}", cells.len()),
    )
}

fn medians(traces: &[TraceFile], spec: &ExperimentSpec, scheme: &str, cell_contains: &str) -> (f64, f64) {
    let hits: Vec<(f64, f64)> = traces
        .iter()
        .filter(|t| t.meta.scheme == scheme && t.meta.cell.contains(cell_contains))
        .map(|t| time_to_target(&t.rows, &spec.targets).unwrap_or((f64::INFINITY, f64::INFINITY)))
        .collect();
    let (times, energies): (Vec<f64>, Vec<f64>) = hits.into_iter().unzip();
    (hcef_harness::experiment::median(&times), hcef_harness::experiment::median(&energies))
}

fn directional(root: &Path) -> Outcome {
    let spec = default_spec();
    let main_dir = root.join("schemes");
    run_experiment(&spec, &main_dir).unwrap();
    let traces = read_run_traces(&main_dir).unwrap();
    let (hcef_t, hcef_e) = medians(&traces, &spec, "HCEF", "");
    let (cef_t, cef_e) = medians(&traces, &spec, "CEF", "");
    let (ceff_t, _) = medians(&traces, &spec, "CEF-F", "");
    let (cefc_t, _) = medians(&traces, &spec, "CEF-C", "");
    let (mll_t, _) = medians(&traces, &spec, "MLL-SGD", "");
    let a = hcef_t < cef_t && hcef_e < cef_e;
    let b = ceff_t < cefc_t && mll_t < cefc_t;

    let mut topo = spec.clone();
    topo.name = "p-edge".into();
    topo.sweep.schemes = Some(vec![Scheme::Hcef]);
    topo.sweep.p_edges = Some(vec![0.2, 1.0]);
    let topo_dir = root.join("p_edge");
    run_experiment(&topo, &topo_dir).unwrap();
    let traces = read_run_traces(&topo_dir).unwrap();
    let (sparse_t, _) = medians(&traces, &topo, "HCEF", "_p0.2_");
    let (dense_t, _) = medians(&traces, &topo, "HCEF", "_p1_");
    let c = dense_t <= sparse_t;

    let mark = |ok: bool| if ok { "pass" } else { "fail" };
    outcome(
        a && b && c,
        format!(
            "(a) {}: HCEF time {hcef_t:.0} energy {hcef_e:.0} vs CEF time {cef_t:.0} energy {cef_e:.0}; \
             (b) {}: time CEF-F {ceff_t:.0}, MLL-SGD {mll_t:.0} vs CEF-C {cefc_t:.0}; \
             (c) {}: HCEF time p_edge 0.2 {sparse_t:.0} vs 1.0 {dense_t:.0}",
            mark(a),
            mark(b),
            mark(c)
        ),
    )
}

/// Re-runs the budget-safety sweep from its resolved config.
fn determinism(first: &Path, second: &Path) -> Outcome {
    let spec = parse_config(&first.join("config.resolved.json")).unwrap();
    run_experiment(&spec, second).unwrap();
    let list = |dir: &Path| {
        let mut v: Vec<_> = fs::read_dir(dir.join("traces")).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let names = list(first);
    let same_names = names == list(second);
    let differing: Vec<String> = names
        .iter()
        .filter(|n| fs::read(first.join("traces").join(n)).ok() != fs::read(second.join("traces").join(n)).ok())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    outcome(
        same_names && !names.is_empty() && differing.is_empty(),
        format!("{} trace files re-run, {} differ", names.len(), differing.len()),
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().unwrap();
    let budget_dir = scratch.path().join("budget");
    let rerun_dir = scratch.path().join("rerun");
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "compression contraction", Box::new(contraction)),
        (2, "mixing matrices", Box::new(mixing)),
        (3, "controller oracle", Box::new(oracle)),
        (4, "closed-form fixed point", Box::new(fixed_point)),
        (5, "FedAvg reduction", Box::new(fedavg)),
        (6, "gradient correctness", Box::new(gradients)),
        (7, "budget safety", Box::new(|| budget_safety(&budget_dir))),
        (8, "directional reproduction", Box::new(|| directional(scratch.path()))),
        (9, "determinism", Box::new(|| determinism(&budget_dir, &rerun_dir))),
    ];

    let mut unexpected = Vec::new();
    for (id, name, check) in &criteria {
        let start = Instant::now();
        let r = check();
        let secs = start.elapsed().as_secs_f64();
        let verdict = match (r.pass, KNOWN_RED.contains(id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known red)",
            (false, false) => "FAIL",
        };
        println!("criterion {id} {name}: {verdict}  {}  [{secs:.1} s]", r.detail);
        if !r.pass && !KNOWN_RED.contains(id) {
            unexpected.push(*id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
