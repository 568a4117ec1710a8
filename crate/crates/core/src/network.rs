//! Radial feeder model, LinDistFlow sensitivities and the Gaussian law of the
//! voltage-constraint offsets induced by random baseline load.
//!
//! Node `0` is the feeder head; downstream nodes are `1..=h`. Matrices are
//! indexed by downstream node `i - 1`. All quantities are per-unit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianVector;

/// One line segment `parent -> child`, impedance in per-unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub parent: usize,
    pub child: usize,
    pub r: f64,
    pub x: f64,
}

/// Base quantities used to convert file values into per-unit.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Bases {
    pub s_base_va: f64,
    pub v_base_v: f64,
}

impl Bases {
    pub fn z_base_ohm(&self) -> f64 {
        self.v_base_v * self.v_base_v / self.s_base_va
    }
}

impl Default for Bases {
    fn default() -> Self {
        Self {
            s_base_va: 5e6,
            v_base_v: 4160.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeederModel {
    node_count: usize,
    lines: Vec<Line>,
    /// `parent[i]` for downstream node `i` (index 0 unused).
    parent: Vec<usize>,
    /// Index into `lines` of the segment feeding node `i`.
    feeding_line: Vec<usize>,
    v0_sq: f64,
    gamma: f64,
    houses_per_node: Vec<usize>,
    names: Vec<String>,
    bases: Bases,
}

impl FeederModel {
    /// Validates that `lines` form a tree rooted at node 0 spanning all `h`
    /// downstream nodes. `names` has `h + 1` entries, head first.
    pub fn new(
        names: Vec<String>,
        lines: Vec<Line>,
        v0_sq: f64,
        gamma: f64,
        houses_per_node: Vec<usize>,
        bases: Bases,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Structure("feeder has no head node".into()));
        }
        let h = names.len() - 1;
        if lines.len() != h {
            return Err(Error::Structure(format!(
                "{} line segments for {h} downstream nodes",
                lines.len()
            )));
        }
        if houses_per_node.len() != h {
            return Err(Error::dim("houses per node", h, houses_per_node.len()));
        }
        if !(v0_sq > 0.0) || !v0_sq.is_finite() {
            return Err(Error::Domain(format!("v0_sq must be positive, got {v0_sq}")));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be nonnegative, got {gamma}")));
        }
        let mut parent = vec![usize::MAX; h + 1];
        let mut feeding_line = vec![usize::MAX; h + 1];
        for (k, l) in lines.iter().enumerate() {
            if l.child == 0 || l.child > h || l.parent > h {
                return Err(Error::Structure(format!(
                    "segment {k} ({} -> {}) references an unknown node",
                    l.parent, l.child
                )));
            }
            if l.parent == l.child {
                return Err(Error::Structure(format!("segment {k} is a self loop")));
            }
            if !(l.r > 0.0 && l.x > 0.0) {
                return Err(Error::Domain(format!(
                    "segment {} -> {} needs positive r and x",
                    names[l.parent], names[l.child]
                )));
            }
            if parent[l.child] != usize::MAX {
                return Err(Error::Structure(format!(
                    "node {} is fed by more than one segment",
                    names[l.child]
                )));
            }
            parent[l.child] = l.parent;
            feeding_line[l.child] = k;
        }
        // Every node must reach the head without revisiting a node.
        for start in 1..=h {
            let mut node = start;
            let mut steps = 0;
            while node != 0 {
                node = parent[node];
                steps += 1;
                if node == usize::MAX || steps > h {
                    return Err(Error::Structure(format!(
                        "node {} is not connected to the feeder head",
                        names[start]
                    )));
                }
            }
        }
        Ok(Self {
            node_count: h,
            lines,
            parent,
            feeding_line,
            v0_sq,
            gamma,
            houses_per_node,
            names,
            bases,
        })
    }

    /// Number of downstream nodes `h`.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn v0_sq(&self) -> f64 {
        self.v0_sq
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn houses_per_node(&self) -> &[usize] {
        &self.houses_per_node
    }

    pub fn house_count(&self) -> usize {
        self.houses_per_node.iter().sum()
    }

    /// Name of node `i` (0 is the head).
    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bases(&self) -> Bases {
        self.bases
    }

    /// Parent of downstream node `i`.
    pub fn parent(&self, i: usize) -> usize {
        self.parent[i]
    }

    /// Downstream node of each house, in house order (node-major).
    pub fn house_nodes(&self) -> Vec<usize> {
        self.houses_per_node
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat_n(i + 1, n))
            .collect()
    }

    /// Same topology with a different house distribution.
    pub fn with_houses(&self, houses_per_node: Vec<usize>) -> Result<Self> {
        Self::new(
            self.names.clone(),
            self.lines.clone(),
            self.v0_sq,
            self.gamma,
            houses_per_node,
            self.bases,
        )
    }

    /// Cumulative (r, x) from the head down to node `i`.
    fn cumulative_impedance(&self) -> Vec<(f64, f64)> {
        let mut acc = vec![(0.0, 0.0); self.node_count + 1];
        let mut done = vec![false; self.node_count + 1];
        done[0] = true;
        for start in 1..=self.node_count {
            let mut stack = vec![start];
            while let Some(&n) = stack.last() {
                let p = self.parent[n];
                if done[p] {
                    let l = &self.lines[self.feeding_line[n]];
                    acc[n] = (acc[p].0 + l.r, acc[p].1 + l.x);
                    done[n] = true;
                    stack.pop();
                } else {
                    stack.push(p);
                }
            }
        }
        acc
    }

    fn ancestors(&self, mut i: usize) -> Vec<usize> {
        let mut out = vec![i];
        while i != 0 {
            i = self.parent[i];
            out.push(i);
        }
        out
    }
}

/// Path-intersection impedance matrices and the derived sensitivities.
#[derive(Debug, Clone)]
pub struct NetworkMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// Nodal aggregation, one all-ones row block per node.
    pub g: DMatrix<f64>,
    /// `2 (R + gamma X) G`: squared-voltage drop per unit of house load.
    pub h: DMatrix<f64>,
    /// `-2 R G diag(pbar)`: squared-voltage change per unit of EV control.
    pub d: DMatrix<f64>,
}

/// `R_ij` is the resistance shared by the head-to-`i` and head-to-`j` paths,
/// i.e. the cumulative resistance down to their lowest common ancestor.
pub fn build_network_matrices(feeder: &FeederModel, pbar: &[f64]) -> Result<NetworkMatrices> {
    let h = feeder.node_count();
    let n = feeder.house_count();
    if pbar.len() != n {
        return Err(Error::dim("per-EV maximum powers", n, pbar.len()));
    }
    if let Some(bad) = pbar.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Domain(format!("EV {bad} has non-positive maximum power")));
    }
    let cum = feeder.cumulative_impedance();
    let anc: Vec<Vec<usize>> = (0..=h).map(|i| feeder.ancestors(i)).collect();
    let mut r = DMatrix::zeros(h, h);
    let mut x = DMatrix::zeros(h, h);
    for i in 1..=h {
        for j in i..=h {
            let lca = *anc[i].iter().find(|a| anc[j].contains(a)).unwrap_or(&0);
            let (rv, xv) = cum[lca];
            r[(i - 1, j - 1)] = rv;
            r[(j - 1, i - 1)] = rv;
            x[(i - 1, j - 1)] = xv;
            x[(j - 1, i - 1)] = xv;
        }
    }
    let mut g = DMatrix::zeros(h, n);
    for (k, node) in feeder.house_nodes().into_iter().enumerate() {
        g[(node - 1, k)] = 1.0;
    }
    let hm = (&r + &x * feeder.gamma()) * &g * 2.0;
    let mut d = &r * &g * -2.0;
    for (k, &p) in pbar.iter().enumerate() {
        d.column_mut(k).scale_mut(p);
    }
    Ok(NetworkMatrices { r, x, g, h: hm, d })
}

/// Squared nodal voltages `V0 - 2 R p - 2 X q`.
pub fn lindistflow_voltages(
    nm: &NetworkMatrices,
    feeder: &FeederModel,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    let h = feeder.node_count();
    if nm.r.nrows() != h {
        return Err(Error::dim("network matrices", h, nm.r.nrows()));
    }
    if p.len() != h {
        return Err(Error::dim("nodal real power", h, p.len()));
    }
    if q.len() != h {
        return Err(Error::dim("nodal reactive power", h, q.len()));
    }
    let drop = &nm.r * p * 2.0 + &nm.x * q * 2.0;
    Ok(DVector::from_element(h, feeder.v0_sq()) - drop)
}

/// Per-house baseline real power: mean per slot (K x n, per-unit) and a
/// common standard deviation.
#[derive(Debug, Clone)]
pub struct BaselineLoadModel {
    mu: DMatrix<f64>,
    sigma_p: f64,
}

impl BaselineLoadModel {
    /// `sigma_p == 0` is accepted as the deterministic limit.
    pub fn new(mu: DMatrix<f64>, sigma_p: f64) -> Result<Self> {
        if mu.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain("baseline means must be finite and nonnegative".into()));
        }
        if !(sigma_p >= 0.0) || !sigma_p.is_finite() {
            return Err(Error::Domain(format!("sigma_p must be nonnegative, got {sigma_p}")));
        }
        Ok(Self { mu, sigma_p })
    }

    pub fn horizon(&self) -> usize {
        self.mu.nrows()
    }

    pub fn house_count(&self) -> usize {
        self.mu.ncols()
    }

    /// K x n matrix of per-house means.
    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }

    /// Means of slot `k` as an n-vector.
    pub fn slot_mean(&self, k: usize) -> DVector<f64> {
        self.mu.row(k).transpose()
    }

    /// `m_t = ||mu(t)||_1`, the mean total baseline per slot.
    pub fn total_mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.horizon(), self.mu.row_iter().map(|r| r.sum()))
    }
}

/// Law of the constraint offsets `Y_k` for every slot: mean
/// `(nu^2 - 1) v0_sq + H mu(k)`, covariance `sigma_p^2 H H^T` (shared).
pub fn yhat_distribution(
    nm: &NetworkMatrices,
    loads: &BaselineLoadModel,
    nu_lower: f64,
    v0_sq: f64,
) -> Result<Vec<GaussianVector>> {
    let h = nm.h.nrows();
    if loads.house_count() != nm.h.ncols() {
        return Err(Error::dim("baseline houses", nm.h.ncols(), loads.house_count()));
    }
    let s2 = loads.sigma_p() * loads.sigma_p();
    let cov = &nm.h * nm.h.transpose() * s2;
    let cov = (&cov + cov.transpose()) * 0.5;
    let offset = (nu_lower * nu_lower - 1.0) * v0_sq;
    let mut out = Vec::with_capacity(loads.horizon());
    let mut shared: Option<GaussianVector> = None;
    for k in 0..loads.horizon() {
        let mean = nm.h.clone() * loads.slot_mean(k) + DVector::from_element(h, offset);
        let g = match &shared {
            Some(g) => g.with_mean(mean)?,
            None => {
                let g = GaussianVector::new(mean, cov.clone())?;
                shared = Some(g.clone());
                g
            }
        };
        out.push(g);
    }
    Ok(out)
}
