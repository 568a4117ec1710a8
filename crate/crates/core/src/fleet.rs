//! EV charging dynamics, the per-EV feasible set (unit box plus a fixed
//! control sum) and Euclidean projection onto it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::NetworkMatrices;

/// Tolerance on the control-sum residual after projection.
pub const SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvSpec {
    /// Downstream node (1-based; 0 is the feeder head).
    pub node: usize,
    /// Position among the EVs of the same node.
    pub slot: usize,
    pub eta: f64,
    pub pbar_kw: f64,
    pub capacity_kwh: f64,
    pub soc0: f64,
    pub soc_target: f64,
}

impl EvSpec {
    /// Energy per unit of control over one step, `-eta * dt * pbar` (kWh).
    pub fn b(&self, dt_h: f64) -> f64 {
        -self.eta * dt_h * self.pbar_kw
    }

    /// Energy still to be charged at the start of the horizon (kWh).
    pub fn required_energy(&self) -> f64 {
        (self.soc_target - self.soc0) * self.capacity_kwh
    }

    pub fn pbar_w(&self) -> f64 {
        self.pbar_kw * 1e3
    }

    pub fn label(&self) -> String {
        format!("EV {} at node {}", self.slot, self.node)
    }

    fn check_parameters(&self) -> Option<String> {
        let l = self.label();
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Some(format!("{l}: efficiency {} outside (0, 1]", self.eta));
        }
        if !(self.pbar_kw > 0.0) || !self.pbar_kw.is_finite() {
            return Some(format!("{l}: maximum power must be positive"));
        }
        if !(self.capacity_kwh > 0.0) || !self.capacity_kwh.is_finite() {
            return Some(format!("{l}: capacity must be positive"));
        }
        for (what, v) in [("initial", self.soc0), ("target", self.soc_target)] {
            if !(0.0..=1.0).contains(&v) {
                return Some(format!("{l}: {what} state of charge {v} outside [0, 1]"));
            }
        }
        if self.soc_target < self.soc0 {
            return Some(format!(
                "{l}: target state of charge {} below initial {}",
                self.soc_target, self.soc0
            ));
        }
        None
    }
}

/// One step of the remaining-energy dynamics, `x + B u`.
pub fn dynamics_step(x_kwh: f64, u: f64, ev: &EvSpec, dt_h: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("control {u} outside [0, 1]")));
    }
    Ok(x_kwh + ev.b(dt_h) * u)
}

/// Control sum `x / (eta dt pbar)` that delivers the required energy.
pub fn required_sum(ev: &EvSpec, k: usize, dt_h: f64) -> Result<f64> {
    if let Some(msg) = ev.check_parameters() {
        return Err(Error::Infeasible(vec![msg]));
    }
    let s = ev.required_energy() / (-ev.b(dt_h));
    if s > k as f64 {
        return Err(Error::Infeasible(vec![format!(
            "{}: needs {s:.4} full-power steps but the horizon has {k}",
            ev.label()
        )]));
    }
    Ok(s)
}

/// Fleet of EVs ordered node-major, matching the house order of the feeder.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Fleet {
    evs: Vec<EvSpec>,
    dt_h: f64,
}

impl Fleet {
    /// Sorts EVs by node (stable), renumbers slots and checks every EV,
    /// reporting all problems at once.
    pub fn new(mut evs: Vec<EvSpec>, dt_h: f64, horizon: usize) -> Result<Self> {
        if !(dt_h > 0.0) || !dt_h.is_finite() {
            return Err(Error::Domain(format!("time step must be positive, got {dt_h}")));
        }
        evs.sort_by_key(|e| e.node);
        let mut counter = std::collections::HashMap::new();
        for e in &mut evs {
            let c = counter.entry(e.node).or_insert(0);
            e.slot = *c;
            *c += 1;
        }
        let problems: Vec<String> = evs
            .iter()
            .filter_map(|e| required_sum(e, horizon, dt_h).err())
            .flat_map(|e| match e {
                Error::Infeasible(v) => v,
                other => vec![other.to_string()],
            })
            .collect();
        if !problems.is_empty() {
            return Err(Error::Infeasible(problems));
        }
        Ok(Self { evs, dt_h })
    }

    pub fn evs(&self) -> &[EvSpec] {
        &self.evs
    }

    pub fn len(&self) -> usize {
        self.evs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evs.is_empty()
    }

    pub fn dt_h(&self) -> f64 {
        self.dt_h
    }

    /// Number of EVs at each of `h` downstream nodes.
    pub fn counts_per_node(&self, h: usize) -> Vec<usize> {
        let mut c = vec![0; h];
        for e in &self.evs {
            if (1..=h).contains(&e.node) {
                c[e.node - 1] += 1;
            }
        }
        c
    }

    pub fn required_sums(&self, horizon: usize) -> Result<Vec<f64>> {
        self.evs
            .iter()
            .map(|e| required_sum(e, horizon, self.dt_h))
            .collect()
    }
}

/// Euclidean projection onto `{0 <= u <= 1, sum u = s}`.
pub fn project_onto_u(v: &[f64], s: f64) -> Result<Vec<f64>> {
    project_box_sum(v, s, 1.0)
}

/// Euclidean projection onto `{0 <= u <= ub, sum u = s}`, by bisection on the
/// shift `theta` in `u = clip(v + theta, 0, ub)` followed by an exact solve on
/// the identified free set.
pub fn project_box_sum(v: &[f64], s: f64, ub: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; v.len()];
    project_box_sum_into(v, s, ub, &mut out)?;
    Ok(out)
}

pub(crate) fn project_box_sum_into(v: &[f64], s: f64, ub: f64, out: &mut [f64]) -> Result<()> {
    let k = v.len();
    let cap = ub * k as f64;
    if !(ub > 0.0) || !(s >= -SUM_TOL) || s > cap + SUM_TOL * cap.max(1.0) {
        return Err(Error::Infeasible(vec![format!(
            "control sum {s} outside [0, {cap}]"
        )]));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite point passed to projection".into()));
    }
    if s <= 0.0 {
        out.fill(0.0);
        return Ok(());
    }
    if s >= cap {
        out.fill(ub);
        return Ok(());
    }
    if v.iter().all(|&x| (0.0..=ub).contains(&x)) && (v.iter().sum::<f64>() - s).abs() <= SUM_TOL {
        out.copy_from_slice(v);
        return Ok(());
    }
    let clipped_sum = |theta: f64| v.iter().map(|&x| (x + theta).clamp(0.0, ub)).sum::<f64>();
    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
    // sum(lo) = 0 and sum(hi) = cap bracket the target.
    let (mut lo, mut hi) = (-vmax, ub - vmin);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let sm = clipped_sum(mid);
        if (sm - s).abs() <= SUM_TOL {
            lo = mid;
            hi = mid;
            break;
        }
        if sm > s {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
            break;
        }
    }
    let theta = 0.5 * (lo + hi);
    // Refine: with the active set fixed, the sum is affine in theta.
    let (mut free, mut free_sum, mut at_ub) = (0usize, 0.0, 0usize);
    for &x in v {
        let y = x + theta;
        if y >= ub {
            at_ub += 1;
        } else if y > 0.0 {
            free += 1;
            free_sum += x;
        }
    }
    let mut theta_ref = theta;
    if free > 0 {
        let t = (s - at_ub as f64 * ub - free_sum) / free as f64;
        if (clipped_sum(t) - s).abs() <= (clipped_sum(theta) - s).abs() {
            theta_ref = t;
        }
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x + theta_ref).clamp(0.0, ub);
    }
    Ok(())
}

/// KKT residual of `u` as a projection of `v` onto the box-sum set: the
/// spread of the shift `u - v` over free coordinates plus sign violations at
/// the bounds, plus the sum and box residuals.
pub fn projection_kkt_residual(v: &[f64], u: &[f64], s: f64, ub: f64) -> f64 {
    let sum_res = (u.iter().sum::<f64>() - s).abs();
    let box_res = u
        .iter()
        .map(|&x| (-x).max(x - ub).max(0.0))
        .fold(0.0, f64::max);
    let free: Vec<f64> = u
        .iter()
        .zip(v)
        .filter(|(&x, _)| x > 1e-12 && x < ub - 1e-12)
        .map(|(&x, &y)| x - y)
        .collect();
    let theta = if free.is_empty() {
        // Any shift between the bound multipliers works; take the midpoint.
        let lo = u
            .iter()
            .zip(v)
            .filter(|(&x, _)| x >= ub - 1e-12)
            .map(|(_, &y)| ub - y)
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = u
            .iter()
            .zip(v)
            .filter(|(&x, _)| x <= 1e-12)
            .map(|(_, &y)| -y)
            .fold(f64::INFINITY, f64::min);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            _ => 0.0,
        }
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    let mut stat: f64 = 0.0;
    for (&x, &y) in u.iter().zip(v) {
        let g = x - y - theta;
        let viol = if x <= 1e-12 {
            // multiplier of the lower bound must be >= 0: g >= 0
            (-g).max(0.0)
        } else if x >= ub - 1e-12 {
            g.max(0.0)
        } else {
            g.abs()
        };
        stat = stat.max(viol);
    }
    stat.max(sum_res).max(box_res)
}

/// Private sensitivity of one EV: its column of `D`, repeated on the block
/// diagonal over the horizon. Never materialized.
#[derive(Debug, Clone)]
pub struct PrivateKey {
    column: DVector<f64>,
    horizon: usize,
}

impl PrivateKey {
    pub fn new(nm: &NetworkMatrices, ev: usize, horizon: usize) -> Result<Self> {
        if ev >= nm.d.ncols() {
            return Err(Error::Domain(format!(
                "EV index {ev} out of range for {} EVs",
                nm.d.ncols()
            )));
        }
        Ok(Self {
            column: nm.d.column(ev).into_owned(),
            horizon,
        })
    }

    pub fn column(&self) -> &DVector<f64> {
        &self.column
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `(D u)_k = column * u_k`, returned as an h x K matrix.
    pub fn apply(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        if u.len() != self.horizon {
            return Err(Error::dim("control profile", self.horizon, u.len()));
        }
        Ok(&self.column * DVector::from_column_slice(u).transpose())
    }

    /// `D^T w` for an h x K block matrix `w`: one number per step.
    pub fn apply_transpose(&self, w: &DMatrix<f64>) -> Result<Vec<f64>> {
        if w.nrows() != self.column.len() || w.ncols() != self.horizon {
            return Err(Error::dim("gradient blocks", self.horizon, w.ncols()));
        }
        Ok((0..self.horizon).map(|k| self.column.dot(&w.column(k))).collect())
    }

    /// Dense `hK x K` form, for tests on small instances.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let h = self.column.len();
        let mut m = DMatrix::zeros(h * self.horizon, self.horizon);
        for k in 0..self.horizon {
            m.view_mut((k * h, k), (h, 1)).copy_from(&self.column);
        }
        m
    }
}
