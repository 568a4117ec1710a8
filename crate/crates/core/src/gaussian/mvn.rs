//! Multivariate normal distribution function by separation of variables with
//! randomized lattice quasi-Monte Carlo (Genz' method).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::univariate::{std_cdf, std_pdf, std_quantile};
use super::GaussianVector;
use crate::error::{Error, Result};

/// Knobs for [`mvn_cdf`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvnOptions {
    /// Target absolute error (three standard errors across shifts).
    pub abs_tol: f64,
    /// Alternative target relative to the estimate; 0 disables it.
    pub rel_tol: f64,
    /// Number of independent random shifts of the lattice.
    pub shifts: usize,
    /// Lattice points per shift in the first round.
    pub min_points: usize,
    /// Upper bound on lattice points per shift.
    pub max_points: usize,
    pub seed: u64,
    /// Reorder variables so the most constrained ones are integrated first.
    pub reorder: bool,
}

impl Default for MvnOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-4,
            rel_tol: 0.0,
            shifts: 8,
            min_points: 64,
            max_points: 1 << 16,
            seed: 0x5eed,
            reorder: true,
        }
    }
}

impl MvnOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Every evaluation uses exactly `points` lattice points per shift. Two
    /// evaluations with equal options then share their random numbers, which
    /// makes differences between nearby arguments smooth.
    pub fn fixed(points: usize, shifts: usize, seed: u64) -> Self {
        Self {
            abs_tol: 0.0,
            rel_tol: 0.0,
            shifts,
            min_points: points,
            max_points: points,
            seed,
            reorder: false,
        }
    }
}

/// Estimate with its error bound (three standard errors over the shifts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvnEstimate {
    pub value: f64,
    pub error: f64,
    pub points: usize,
}

/// `Pr(xi <= z)` componentwise for `xi ~ g`.
pub fn mvn_cdf(z: &DVector<f64>, g: &GaussianVector, opts: &MvnOptions) -> Result<MvnEstimate> {
    let s = g.dim();
    if z.len() != s {
        return Err(Error::dim("mvn_cdf argument", s, z.len()));
    }
    if s == 0 {
        return Ok(MvnEstimate {
            value: 1.0,
            error: 0.0,
            points: 0,
        });
    }
    if opts.shifts < 2 || opts.min_points == 0 || opts.max_points < opts.min_points {
        return Err(Error::Config(format!("bad MVN options {opts:?}")));
    }
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in MVN argument".into()));
    }
    let upper: Vec<f64> = z.iter().zip(g.mean().iter()).map(|(a, b)| a - b).collect();
    if s == 1 {
        let sd = g.cov()[(0, 0)].sqrt();
        return Ok(MvnEstimate {
            value: bounded_prob(upper[0], sd),
            error: 0.0,
            points: 0,
        });
    }
    let (chol, upper) = ordered_cholesky(g.cov(), &upper, opts.reorder);
    let integrand = Integrand::new(&chol, &upper);
    if integrand.is_exact() {
        return Ok(MvnEstimate {
            value: integrand.eval(&vec![0.5; s - 1]),
            error: 0.0,
            points: 0,
        });
    }

    let generators = lattice_generators(s - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shifts: Vec<Vec<f64>> = (0..opts.shifts)
        .map(|_| (0..s - 1).map(|_| rng.random::<f64>()).collect())
        .collect();

    // The first n lattice points are a prefix of the first 2n, so each round
    // only adds the new ones to the running sums.
    let mut points = opts.min_points;
    let mut done = 0;
    let mut acc = vec![0.0; opts.shifts];
    let mut w = vec![0.0; s - 1];
    loop {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for (shift, acc) in shifts.iter().zip(acc.iter_mut()) {
            for k in done + 1..=points {
                for (i, wi) in w.iter_mut().enumerate() {
                    let u = (k as f64 * generators[i] + shift[i]).fract();
                    *wi = (2.0 * u - 1.0).abs();
                }
                *acc += integrand.eval(&w);
            }
            let est = *acc / points as f64;
            sum += est;
            sum_sq += est * est;
        }
        done = points;
        let m = opts.shifts as f64;
        let mean = sum / m;
        let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
        let error = 3.0 * (var / m).sqrt();
        if error <= opts.abs_tol.max(opts.rel_tol * mean.abs()) || points >= opts.max_points {
            return Ok(MvnEstimate {
                value: mean.clamp(0.0, 1.0),
                error,
                points: points * opts.shifts,
            });
        }
        points = (points * 2).min(opts.max_points);
    }
}

fn bounded_prob(upper: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        std_cdf(upper / sd)
    } else if upper >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Lower Cholesky factor of `cov`, optionally with the Genz-Bretz variable
/// prioritization, returned together with the permuted upper limits.
fn ordered_cholesky(cov: &DMatrix<f64>, upper: &[f64], reorder: bool) -> (DMatrix<f64>, Vec<f64>) {
    let s = upper.len();
    let mut a = cov.clone();
    let mut b = upper.to_vec();
    let mut l = DMatrix::<f64>::zeros(s, s);
    let mut y = vec![0.0; s];
    for i in 0..s {
        if reorder {
            let mut best = i;
            let mut best_p = f64::INFINITY;
            for j in i..s {
                let partial: f64 = (0..i).map(|m| l[(j, m)] * l[(j, m)]).sum();
                let sd = (a[(j, j)] - partial).max(0.0).sqrt();
                let shift: f64 = (0..i).map(|m| l[(j, m)] * y[m]).sum();
                let p = bounded_prob(b[j] - shift, sd);
                if p < best_p {
                    best_p = p;
                    best = j;
                }
            }
            if best != i {
                a.swap_rows(i, best);
                a.swap_columns(i, best);
                l.swap_rows(i, best);
                b.swap(i, best);
            }
        }
        let partial: f64 = (0..i).map(|m| l[(i, m)] * l[(i, m)]).sum();
        let d = a[(i, i)] - partial;
        let lii = if d > 0.0 { d.sqrt() } else { 0.0 };
        l[(i, i)] = lii;
        for k in i + 1..s {
            let dot: f64 = (0..i).map(|m| l[(i, m)] * l[(k, m)]).sum();
            l[(k, i)] = if lii > 0.0 { (a[(k, i)] - dot) / lii } else { 0.0 };
        }
        // Conditional expectation of the standardized variable, used only to
        // rank the remaining variables.
        let shift: f64 = (0..i).map(|m| l[(i, m)] * y[m]).sum();
        y[i] = if lii > 0.0 {
            let t = (b[i] - shift) / lii;
            let p = std_cdf(t);
            if p > 1e-300 {
                -std_pdf(t) / p
            } else {
                t
            }
        } else {
            0.0
        };
    }
    (l, b)
}

/// The transformed integrand over the unit cube of dimension `s - 1`.
struct Integrand<'a> {
    chol: &'a DMatrix<f64>,
    upper: &'a [f64],
}

impl<'a> Integrand<'a> {
    fn new(chol: &'a DMatrix<f64>, upper: &'a [f64]) -> Self {
        Self { chol, upper }
    }

    /// True when no variable after the first carries randomness of its own
    /// and the first variable alone decides the probability.
    fn is_exact(&self) -> bool {
        (1..self.upper.len()).all(|i| (0..=i).all(|m| self.chol[(i, m)] == 0.0))
    }

    #[inline]
    fn eval(&self, w: &[f64]) -> f64 {
        let s = self.upper.len();
        let mut y = [0.0f64; 64];
        let mut y_heap;
        let y: &mut [f64] = if s <= 64 {
            &mut y[..s]
        } else {
            y_heap = vec![0.0; s];
            &mut y_heap
        };
        let mut f = 1.0;
        for i in 0..s {
            let mut shift = 0.0;
            for m in 0..i {
                shift += self.chol[(i, m)] * y[m];
            }
            let lii = self.chol[(i, i)];
            let e = if lii > 0.0 {
                std_cdf((self.upper[i] - shift) / lii)
            } else if self.upper[i] - shift >= 0.0 {
                1.0
            } else {
                0.0
            };
            f *= e;
            if f == 0.0 {
                return 0.0;
            }
            if i + 1 < s {
                y[i] = if lii > 0.0 { std_quantile(w[i] * e) } else { 0.0 };
            }
        }
        f
    }
}

/// Square roots of the first `n` primes (Richtmyer lattice generators).
fn lattice_generators(n: usize) -> Vec<f64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes.into_iter().map(|p| (p as f64).sqrt()).collect()
}
