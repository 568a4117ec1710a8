//! Monte Carlo evaluation of nodal voltages under random baseline demand.
//!
//! Only nodal sums of house demand enter the power flow, so each sample draws
//! the per-node sum directly: with independent houses it is normal with mean
//! `sum mu` and variance `n_i sigma^2`, the exact law of the house-level draw.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::sub_seed;
use crate::solver::Problem;

/// Percentile summary of one (slot, node) voltage magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

impl BoxStats {
    /// Linear-interpolated percentiles of `values` (sorted in place).
    pub fn from_samples(values: &mut [f64]) -> Self {
        values.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (values.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
        };
        Self {
            min: values[0],
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            max: values[values.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationStats {
    pub samples: usize,
    /// `counts[s][k]`: violating nodes in slot `k` of sample `s`.
    pub counts: Vec<Vec<usize>>,
    /// `histogram[j]`: slot observations with exactly `j` violating nodes.
    pub histogram: Vec<usize>,
    /// Fraction of samples with at least one violating node, per slot.
    pub joint_violation_rate: Vec<f64>,
    /// Per slot, per node voltage magnitude summary (K x h).
    pub voltage_box: Vec<Vec<BoxStats>>,
}

impl ViolationStats {
    /// Violating node-slots averaged over samples.
    pub fn mean_node_slot_violations(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        total as f64 / self.samples as f64
    }

    /// Fraction of slot observations with at most `m` violating nodes.
    pub fn fraction_at_most(&self, m: usize) -> f64 {
        let total: usize = self.histogram.iter().sum();
        let ok: usize = self.histogram.iter().take(m + 1).sum();
        ok as f64 / total as f64
    }
}

/// Draws `samples` baseline realizations, runs the linearized power flow for
/// the EV profiles `u` and counts nodes below the voltage bound.
pub fn monte_carlo_violations(problem: &Problem, u: &[Vec<f64>], samples: usize, seed: u64) -> Result<ViolationStats> {
    if samples == 0 {
        return Err(Error::Config("Monte Carlo needs at least one sample".into()));
    }
    let kk = problem.horizon();
    let h = problem.node_count();
    if u.len() != problem.ev_count() || u.iter().any(|x| x.len() != kk) {
        return Err(Error::dim("EV profiles", problem.ev_count(), u.len()));
    }
    let feeder = &problem.feeder;
    let s_base = feeder.bases().s_base_va;
    let gamma = feeder.gamma();
    let v0 = feeder.v0_sq();
    let nu2 = problem.nu_lower * problem.nu_lower;
    let sigma = problem.loads.sigma_p();

    // Nodal EV power (pu) and nodal baseline mean (pu), h x K.
    let mut ev_nodal = DMatrix::<f64>::zeros(h, kk);
    let mut base_nodal = DMatrix::<f64>::zeros(h, kk);
    for (i, ui) in u.iter().enumerate() {
        let node = problem.ev_node[i];
        for t in 0..kk {
            ev_nodal[(node, t)] += problem.pbar_w[i] * ui[t] / s_base;
            base_nodal[(node, t)] += problem.loads.mu()[(t, i)];
        }
    }
    let node_sd: Vec<f64> = feeder
        .houses_per_node()
        .iter()
        .map(|&c| sigma * (c as f64).sqrt())
        .collect();
    let r2 = &problem.nm.r * 2.0;
    let x2 = &problem.nm.x * 2.0;

    let mut counts = vec![vec![0usize; kk]; samples];
    let mut mags = vec![vec![Vec::with_capacity(samples); h]; kk];
    for (s, row) in counts.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, s as u64));
        for t in 0..kk {
            let base = DVector::from_iterator(
                h,
                (0..h).map(|i| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    base_nodal[(i, t)] + node_sd[i] * eps
                }),
            );
            let p = &base + ev_nodal.column(t);
            let v = DVector::from_element(h, v0) - &r2 * p - &x2 * (&base * gamma);
            for i in 0..h {
                if v[i] < nu2 {
                    row[t] += 1;
                }
                mags[t][i].push(v[i].max(0.0).sqrt());
            }
        }
    }
    let mut histogram = vec![0usize; h + 1];
    for c in counts.iter().flatten() {
        histogram[*c] += 1;
    }
    let joint_violation_rate = (0..kk)
        .map(|t| counts.iter().filter(|r| r[t] > 0).count() as f64 / samples as f64)
        .collect();
    let voltage_box = mags
        .iter_mut()
        .map(|slot| slot.iter_mut().map(|v| BoxStats::from_samples(v)).collect())
        .collect();
    Ok(ViolationStats {
        samples,
        counts,
        histogram,
        joint_violation_rate,
        voltage_box,
    })
}
