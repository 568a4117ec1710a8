//! Centralized shrunken primal-dual subgradient iterations for the
//! deterministic valley-filling problem and its chance-constrained variant.
//!
//! The objective is carried in watts squared so the default step sizes apply
//! unchanged. Constraint terms enter the Lagrangian multiplied by a scale
//! (`chance_scale` for probabilities, `voltage_scale` for squared per-unit
//! voltages) that converts them to the same unit.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::{project_box_sum_into, Fleet, PrivateKey};
use crate::gaussian::{adjusted_mvncdf_gradient, mvn_cdf, sub_seed, GaussianVector, MvnOptions};
use crate::network::{build_network_matrices, yhat_distribution, BaselineLoadModel, FeederModel, NetworkMatrices};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Stopping {
    Fixed,
    /// Stop once `||U+ - U|| / ||U+||` stays below `tol` for `patience`
    /// consecutive iterations.
    RelativeChange { tol: f64, patience: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_u: f64,
    pub tau_lambda: f64,
    pub d_lambda: f64,
    /// Control-effort weight (W^2). `None` means `1e-3 * mean(pbar)^2`.
    pub rho: Option<f64>,
    pub delta: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub stopping: Stopping,
    /// Lagrangian weight of a unit of probability shortfall (W^2).
    pub chance_scale: f64,
    /// Lagrangian weight of a unit of squared per-unit voltage (W^2 / pu^2 is
    /// folded into the multiplier). `None` means `v_base^2`.
    pub voltage_scale: Option<f64>,
    pub mvn_tol: f64,
    pub mvn_max_points: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-11,
            beta: 2.0,
            tau_u: 0.974,
            tau_lambda: 0.974,
            d_lambda: 5e5,
            rho: None,
            delta: 0.9,
            max_iters: 50,
            seed: 1,
            stopping: Stopping::Fixed,
            chance_scale: 1e5,
            voltage_scale: None,
            mvn_tol: 1e-4,
            mvn_max_points: 1 << 14,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos("alpha", self.alpha)?;
        pos("beta", self.beta)?;
        pos("d_lambda", self.d_lambda)?;
        pos("chance_scale", self.chance_scale)?;
        pos("mvn_tol", self.mvn_tol)?;
        for (name, t) in [("tau_u", self.tau_u), ("tau_lambda", self.tau_lambda)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if let Some(r) = self.rho {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::Config(format!("rho must be nonnegative, got {r}")));
            }
        }
        if let Some(v) = self.voltage_scale {
            pos("voltage_scale", v)?;
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.mvn_max_points < 16 {
            return Err(Error::Config("mvn_max_points must be at least 16".into()));
        }
        if let Stopping::RelativeChange { tol, patience } = self.stopping {
            pos("stopping tolerance", tol)?;
            if patience == 0 {
                return Err(Error::Config("stopping patience must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn rho_for(&self, problem: &Problem) -> f64 {
        self.rho.unwrap_or_else(|| {
            let n = problem.pbar_w.len();
            if n == 0 {
                0.0
            } else {
                let m = problem.pbar_w.iter().sum::<f64>() / n as f64;
                1e-3 * m * m
            }
        })
    }

    pub fn voltage_scale_for(&self, problem: &Problem) -> f64 {
        self.voltage_scale.unwrap_or_else(|| {
            let v = problem.feeder.bases().v_base_v;
            v * v
        })
    }

    /// MVN options for evaluation `slot` of iteration `iter`.
    pub(crate) fn mvn_options(&self, iter: usize, stream: u64) -> MvnOptions {
        MvnOptions {
            abs_tol: self.mvn_tol,
            max_points: self.mvn_max_points,
            min_points: 64.min(self.mvn_max_points),
            ..MvnOptions::default()
        }
        .with_seed(sub_seed(sub_seed(self.seed, iter as u64), stream))
    }
}

/// Which constraint the solver enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Joint nodal chance constraint per slot, adjusted MVNCDF gradient.
    ChanceConstrained,
    /// Per-node voltage inequality at the mean baseline, linear gradient.
    Deterministic,
}

/// Everything the iterations need, derived once from the models.
#[derive(Debug, Clone)]
pub struct Problem {
    pub feeder: FeederModel,
    pub fleet: Fleet,
    pub loads: BaselineLoadModel,
    pub nm: NetworkMatrices,
    pub yhat: Vec<GaussianVector>,
    pub nu_lower: f64,
    /// Control sum per EV.
    pub required: Vec<f64>,
    pub pbar_w: Vec<f64>,
    /// Downstream node of each EV, 0-based.
    pub ev_node: Vec<usize>,
    /// Mean total baseline per slot (W).
    pub mean_total_w: Vec<f64>,
}

impl Problem {
    /// `loads` is per-unit; EVs must match the feeder's houses node by node.
    pub fn new(feeder: FeederModel, fleet: Fleet, loads: BaselineLoadModel, nu_lower: f64) -> Result<Self> {
        let h = feeder.node_count();
        let counts = fleet.counts_per_node(h);
        if fleet.evs().iter().any(|e| e.node == 0 || e.node > h) {
            return Err(Error::Config("EV assigned to a node outside the feeder".into()));
        }
        if counts != feeder.houses_per_node() {
            let node = counts
                .iter()
                .zip(feeder.houses_per_node())
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            return Err(Error::Config(format!(
                "node {} has {} houses but {} EVs",
                feeder.name(node + 1),
                feeder.houses_per_node()[node],
                counts[node]
            )));
        }
        if loads.house_count() != fleet.len() {
            return Err(Error::dim("baseline houses", fleet.len(), loads.house_count()));
        }
        if !(nu_lower > 0.0 && nu_lower < 1.0) {
            return Err(Error::Domain(format!("voltage bound must lie in (0, 1), got {nu_lower}")));
        }
        let horizon = loads.horizon();
        let required = fleet.required_sums(horizon)?;
        let s_base = feeder.bases().s_base_va;
        let pbar_w: Vec<f64> = fleet.evs().iter().map(|e| e.pbar_w()).collect();
        let pbar_pu: Vec<f64> = pbar_w.iter().map(|p| p / s_base).collect();
        let nm = build_network_matrices(&feeder, &pbar_pu)?;
        let yhat = yhat_distribution(&nm, &loads, nu_lower, feeder.v0_sq())?;
        let ev_node = fleet.evs().iter().map(|e| e.node - 1).collect();
        let mean_total_w = loads.total_mean().iter().map(|m| m * s_base).collect();
        Ok(Self {
            feeder,
            fleet,
            loads,
            nm,
            yhat,
            nu_lower,
            required,
            pbar_w,
            ev_node,
            mean_total_w,
        })
    }

    pub fn horizon(&self) -> usize {
        self.loads.horizon()
    }

    pub fn ev_count(&self) -> usize {
        self.pbar_w.len()
    }

    pub fn node_count(&self) -> usize {
        self.feeder.node_count()
    }

    pub fn private_key(&self, ev: usize) -> Result<PrivateKey> {
        PrivateKey::new(&self.nm, ev, self.horizon())
    }

    /// Zero profiles of the right shape.
    pub fn zero_profiles(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.horizon()]; self.ev_count()]
    }
}

/// Running sums of EV charging kept by whoever coordinates the fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    /// Total EV power per slot (W).
    pub total_w: Vec<f64>,
    /// EV power per node and slot (per-unit), h x K.
    pub nodal_pu: DMatrix<f64>,
}

impl Aggregates {
    pub fn zero(problem: &Problem) -> Self {
        Self {
            total_w: vec![0.0; problem.horizon()],
            nodal_pu: DMatrix::zeros(problem.node_count(), problem.horizon()),
        }
    }

    /// Adds one EV's change in charging power (W per slot).
    pub fn absorb(&mut self, problem: &Problem, ev: usize, delta_w: &[f64]) {
        let s_base = problem.feeder.bases().s_base_va;
        let node = problem.ev_node[ev];
        for (t, &dw) in delta_w.iter().enumerate() {
            self.total_w[t] += dw;
            self.nodal_pu[(node, t)] += dw / s_base;
        }
    }

    pub fn from_profiles(problem: &Problem, u: &[Vec<f64>]) -> Self {
        let mut agg = Self::zero(problem);
        for (i, ui) in u.iter().enumerate() {
            let d: Vec<f64> = ui.iter().map(|x| problem.pbar_w[i] * x).collect();
            agg.absorb(problem, i, &d);
        }
        agg
    }

    /// `z_k = sum_i D_i u_i(k) = -2 R (nodal EV power)_k`, as an h x K matrix.
    pub fn z_blocks(&self, problem: &Problem) -> DMatrix<f64> {
        &problem.nm.r * &self.nodal_pu * -2.0
    }
}

/// `P̄ (m + P̃U) + rho U` for every EV (W^2 per unit control).
pub fn objective_mean_gradient(problem: &Problem, u: &[Vec<f64>], rho: f64) -> Result<Vec<Vec<f64>>> {
    check_profiles(problem, u)?;
    let agg = Aggregates::from_profiles(problem, u);
    let mean_total = mean_total_load(problem, &agg);
    Ok(u.iter()
        .enumerate()
        .map(|(i, ui)| {
            ui.iter()
                .zip(&mean_total)
                .map(|(&x, &m)| problem.pbar_w[i] * m + rho * x)
                .collect()
        })
        .collect())
}

/// `0.5 sum_t (m_t + P̃U_t)^2` and the same plus `0.5 rho ||U||^2`.
pub fn objective_mean(problem: &Problem, u: &[Vec<f64>], rho: f64) -> (f64, f64) {
    let agg = Aggregates::from_profiles(problem, u);
    let base: f64 = mean_total_load(problem, &agg).iter().map(|x| 0.5 * x * x).sum();
    let effort: f64 = u.iter().flatten().map(|x| 0.5 * rho * x * x).sum();
    (base, base + effort)
}

/// Baseline mean plus EV charging per slot (W).
pub fn mean_total_load(problem: &Problem, agg: &Aggregates) -> Vec<f64> {
    problem
        .mean_total_w
        .iter()
        .zip(&agg.total_w)
        .map(|(m, a)| m + a)
        .collect()
}

fn check_profiles(problem: &Problem, u: &[Vec<f64>]) -> Result<()> {
    if u.len() != problem.ev_count() {
        return Err(Error::dim("EV profiles", problem.ev_count(), u.len()));
    }
    if let Some(bad) = u.iter().find(|x| x.len() != problem.horizon()) {
        return Err(Error::dim("profile length", problem.horizon(), bad.len()));
    }
    Ok(())
}

/// `d_k = delta - Pr(Y_k <= z_k)` for each slot; `z` is h x K.
pub fn chance_constraint_value(
    z: &DMatrix<f64>,
    yhat: &[GaussianVector],
    delta: f64,
    opts: &dyn Fn(usize) -> MvnOptions,
) -> Result<Vec<f64>> {
    if z.ncols() != yhat.len() {
        return Err(Error::dim("constraint slots", yhat.len(), z.ncols()));
    }
    (0..yhat.len())
        .map(|k| {
            let zk = z.column(k).into_owned();
            Ok(delta - mvn_cdf(&zk, &yhat[k], &opts(k))?.value)
        })
        .collect()
}

/// Deterministic constraint at the mean baseline, `E[Y_k] - z_k` per node.
pub fn deterministic_constraint_value(z: &DMatrix<f64>, yhat: &[GaussianVector]) -> Result<DMatrix<f64>> {
    if z.ncols() != yhat.len() {
        return Err(Error::dim("constraint slots", yhat.len(), z.ncols()));
    }
    let mut d = DMatrix::zeros(z.nrows(), z.ncols());
    for k in 0..z.ncols() {
        d.set_column(k, &(yhat[k].mean() - z.column(k)));
    }
    Ok(d)
}

/// Constraint values and the weighted gradient blocks broadcast to EVs.
#[derive(Debug, Clone)]
pub struct ConstraintEval {
    /// Raw constraint values, one row per slot (1 column for the chance
    /// constraint, h for the deterministic one).
    pub d: DMatrix<f64>,
    /// `w_k` such that the constraint part of an EV's gradient at slot `k` is
    /// `-D_i^T w_k`; h x K, all entries >= 0.
    pub weights: DMatrix<f64>,
}

/// Evaluates constraints at the current aggregates and builds the weighted
/// blocks for the current multipliers.
pub fn evaluate_constraints(
    problem: &Problem,
    config: &SolverConfig,
    mode: Mode,
    agg: &Aggregates,
    lambda: &DMatrix<f64>,
    iter: usize,
) -> Result<ConstraintEval> {
    let z = agg.z_blocks(problem);
    let kk = problem.horizon();
    let h = problem.node_count();
    match mode {
        Mode::ChanceConstrained => {
            let vals = chance_constraint_value(&z, &problem.yhat, config.delta, &|k| {
                config.mvn_options(iter, 2 * k as u64)
            })?;
            let mut weights = DMatrix::zeros(h, kk);
            for k in 0..kk {
                let l = lambda[(k, 0)];
                if l > 0.0 {
                    let zk = z.column(k).into_owned();
                    let opts = config.mvn_options(iter, 2 * k as u64 + 1);
                    let g = adjusted_mvncdf_gradient(&zk, &problem.yhat[k], &opts)?;
                    weights.set_column(k, &(g * (l * config.chance_scale)));
                }
            }
            Ok(ConstraintEval {
                d: DMatrix::from_column_slice(kk, 1, &vals),
                weights,
            })
        }
        Mode::Deterministic => {
            let d = deterministic_constraint_value(&z, &problem.yhat)?.transpose();
            let weights = lambda.transpose() * config.voltage_scale_for(problem);
            Ok(ConstraintEval { d, weights })
        }
    }
}

/// Gradient of the Lagrangian for one EV, from public data (mean total load,
/// weighted blocks) and its private sensitivity column.
pub fn ev_gradient(
    pbar_w: f64,
    key_column: &DVector<f64>,
    u: &[f64],
    mean_total_w: &[f64],
    weights: &DMatrix<f64>,
    rho: f64,
) -> Vec<f64> {
    u.iter()
        .enumerate()
        .map(|(t, &x)| pbar_w * mean_total_w[t] + rho * x - key_column.dot(&weights.column(t)))
        .collect()
}

/// `Π_U((1/τ) Π_{τU}(τ u - α g))` for one EV with control sum `s`.
pub fn primal_update(u: &[f64], g: &[f64], s: f64, alpha: f64, tau: f64) -> Result<Vec<f64>> {
    if g.len() != u.len() {
        return Err(Error::dim("gradient length", u.len(), g.len()));
    }
    let v: Vec<f64> = u.iter().zip(g).map(|(x, gx)| tau * x - alpha * gx).collect();
    let mut inner = vec![0.0; u.len()];
    project_box_sum_into(&v, tau * s, tau, &mut inner)?;
    for x in &mut inner {
        *x /= tau;
    }
    let mut out = vec![0.0; u.len()];
    project_box_sum_into(&inner, s, 1.0, &mut out)?;
    Ok(out)
}

/// Primal step for the whole fleet given per-EV gradients.
pub fn primal_step(state: &SolverState, config: &SolverConfig, problem: &Problem, gradients: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if gradients.len() != state.u.len() {
        return Err(Error::dim("gradient blocks", state.u.len(), gradients.len()));
    }
    state
        .u
        .iter()
        .zip(gradients)
        .zip(&problem.required)
        .map(|((u, g), &s)| primal_update(u, g, s, config.alpha, config.tau_u))
        .collect()
}

/// `Π_D((1/τ) Π_{τD}(τ λ + β d))` entrywise with `D = [0, d_lambda]`.
/// `d` must already carry any Lagrangian scale.
pub fn dual_step(lambda: &DMatrix<f64>, config: &SolverConfig, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if lambda.shape() != d.shape() {
        return Err(Error::dim("constraint values", lambda.len(), d.len()));
    }
    let tau = config.tau_lambda;
    let cap = config.d_lambda;
    Ok(lambda.zip_map(d, |l, dv| {
        let inner = tau * l + config.beta * dv;
        // (tau cap) / tau can round below cap.
        if inner >= tau * cap {
            cap
        } else {
            (inner.max(0.0) / tau).clamp(0.0, cap)
        }
    }))
}

/// Scale that converts raw constraint values into Lagrangian units.
pub fn constraint_scale(problem: &Problem, config: &SolverConfig, mode: Mode) -> f64 {
    match mode {
        Mode::ChanceConstrained => config.chance_scale,
        Mode::Deterministic => config.voltage_scale_for(problem),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Mean total load after the update (W per slot).
    pub total_load_w: Vec<f64>,
    /// Raw constraint values at the start of the iteration, per slot
    /// (maximum over nodes for the deterministic constraint).
    pub d: Vec<f64>,
    /// Multipliers after the update, per slot (sum over nodes for the
    /// deterministic constraint).
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub objective_with_rho: f64,
    pub max_constraint: f64,
    pub primal_step_norm: f64,
    pub dual_step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    /// One K-vector per EV.
    pub u: Vec<Vec<f64>>,
    /// K x 1 (chance-constrained) or K x h (deterministic).
    pub lambda: DMatrix<f64>,
    pub iter: usize,
    pub history: Vec<IterationRecord>,
    pub(crate) small_steps: usize,
}

impl SolverState {
    pub fn initial(problem: &Problem, mode: Mode) -> Self {
        let cols = match mode {
            Mode::ChanceConstrained => 1,
            Mode::Deterministic => problem.node_count(),
        };
        Self {
            u: problem.zero_profiles(),
            lambda: DMatrix::zeros(problem.horizon(), cols),
            iter: 0,
            history: Vec::new(),
            small_steps: 0,
        }
    }

    /// Updates the stopping counter; returns true when the run should stop.
    pub(crate) fn register_step(&mut self, config: &SolverConfig, step_sq: f64, norm_sq: f64) -> bool {
        should_stop(config, self.iter, &mut self.small_steps, step_sq, norm_sq)
    }
}

pub(crate) fn should_stop(config: &SolverConfig, iter: usize, small_steps: &mut usize, step_sq: f64, norm_sq: f64) -> bool {
    if let Stopping::RelativeChange { tol, patience } = config.stopping {
        if step_sq.sqrt() <= tol * norm_sq.sqrt().max(f64::MIN_POSITIVE) {
            *small_steps += 1;
        } else {
            *small_steps = 0;
        }
        if *small_steps >= patience {
            return true;
        }
    }
    iter >= config.max_iters
}

#[derive(Debug, Clone)]
pub struct SolverRun {
    pub state: SolverState,
    pub mode: Mode,
    pub elapsed_s: f64,
}

/// Builds the history entry for a finished iteration. `step_sq` and
/// `norm_sq` are `||U+ - U||^2` and `||U+||^2` summed in EV order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn make_record(
    problem: &Problem,
    iter: usize,
    agg: &Aggregates,
    rho: f64,
    d: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    old_lambda: &DMatrix<f64>,
    step_sq: f64,
    norm_sq: f64,
) -> IterationRecord {
    let total = mean_total_load(problem, agg);
    let objective: f64 = total.iter().map(|x| 0.5 * x * x).sum();
    let per_slot_max: Vec<f64> = d
        .row_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    IterationRecord {
        iter,
        total_load_w: total,
        max_constraint: per_slot_max.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        d: per_slot_max,
        lambda: lambda.row_iter().map(|r| r.sum()).collect(),
        objective,
        objective_with_rho: objective + 0.5 * rho * norm_sq,
        primal_step_norm: step_sq.sqrt(),
        dual_step_norm: (lambda - old_lambda).norm(),
    }
}

/// Runs the iterations from zero initial iterates.
pub fn run(problem: &Problem, config: &SolverConfig, mode: Mode) -> Result<SolverRun> {
    config.validate()?;
    let start = Instant::now();
    let rho = config.rho_for(problem);
    let scale = constraint_scale(problem, config, mode);
    let keys: Vec<PrivateKey> = (0..problem.ev_count())
        .map(|i| problem.private_key(i))
        .collect::<Result<_>>()?;
    let mut state = SolverState::initial(problem, mode);
    let mut agg = Aggregates::zero(problem);
    loop {
        let eval = evaluate_constraints(problem, config, mode, &agg, &state.lambda, state.iter)?;
        let mean_total = mean_total_load(problem, &agg);
        let (mut step_sq, mut norm_sq) = (0.0, 0.0);
        for i in 0..problem.ev_count() {
            let u = &state.u[i];
            let g = ev_gradient(problem.pbar_w[i], keys[i].column(), u, &mean_total, &eval.weights, rho);
            let next = primal_update(u, &g, problem.required[i], config.alpha, config.tau_u)?;
            let delta: Vec<f64> = next.iter().zip(u).map(|(a, b)| problem.pbar_w[i] * (a - b)).collect();
            step_sq += next.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            norm_sq += next.iter().map(|a| a * a).sum::<f64>();
            agg.absorb(problem, i, &delta);
            state.u[i] = next;
        }
        let old_lambda = state.lambda.clone();
        state.lambda = dual_step(&state.lambda, config, &(&eval.d * scale))?;
        state.iter += 1;
        let rec = make_record(problem, state.iter, &agg, rho, &eval.d, &state.lambda, &old_lambda, step_sq, norm_sq);
        state.history.push(rec);
        if state.register_step(config, step_sq, norm_sq) {
            break;
        }
    }
    Ok(SolverRun {
        state,
        mode,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

pub fn run_ccspds(problem: &Problem, config: &SolverConfig) -> Result<SolverRun> {
    run(problem, config, Mode::ChanceConstrained)
}

pub fn run_spds_deterministic(problem: &Problem, config: &SolverConfig) -> Result<SolverRun> {
    run(problem, config, Mode::Deterministic)
}
