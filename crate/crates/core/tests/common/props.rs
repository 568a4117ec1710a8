//! Property suites, one function per invariant, each over `CASES` random
//! cases from a fixed-seed runner. Shared by the `invariants` target and the
//! acceptance report.
#![allow(dead_code)]

use std::fs;

use ccspds::fleet::{dynamics_step, project_box_sum, project_onto_u, required_sum, EvSpec, SUM_TOL};
use ccspds::gaussian::{
    adjusted_cdf, adjusted_mvncdf_gradient, mvn_cdf, mvncdf_gradient, normal_cdf, GaussianVector, MvnOptions,
};
use ccspds::network::{
    build_network_matrices, lindistflow_voltages, yhat_distribution, Bases, BaselineLoadModel, FeederModel, Line,
};
use ccspds::protocol::{run_decentralized_mode, Direction};
use ccspds::report::{emit_report, execute, ModeSelection};
use ccspds::scenario::{Scenario, Settings};
use ccspds::solver::{
    chance_constraint_value, dual_step, ev_gradient, evaluate_constraints, objective_mean, run, Aggregates, Mode,
    Problem, SolverConfig,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseResult, TestRng, TestRunner};
use rand::Rng;

use super::*;

pub const CASES: u32 = 200;

pub type Outcome = std::result::Result<(), String>;

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> TestCaseResult) -> Outcome {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail<E: std::fmt::Display>(e: E) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

/// Every suite with its name.
pub fn all() -> Vec<(&'static str, fn() -> Outcome)> {
    vec![
        ("network: voltages are linear in injections", network_linearity),
        ("network: constraint-offset covariance is PSD", network_covariance_psd),
        ("network: more load never raises a voltage", network_monotone),
        ("network: R and X equal the common-path oracle", network_path_oracle),
        ("fleet: projection is non-expansive", fleet_nonexpansive),
        ("fleet: projection output is feasible", fleet_projection_feasible),
        ("fleet: projected controls deliver the energy", fleet_augmentation),
        ("gaussian: cdf is monotone", gaussian_monotone),
        ("gaussian: cdf is bounded with correct limits", gaussian_bounds),
        ("gaussian: gradient signs", gaussian_gradient_signs),
        ("gaussian: reflected scalar cdf dominates", gaussian_adjusted_cdf),
        ("gaussian: gradient matches finite differences", gaussian_finite_differences),
        ("solver: iterates stay feasible", solver_feasibility),
        ("solver: inactive constraints give plain projected gradient", solver_inactive),
        ("solver: positive constraint value raises the multiplier", solver_monotone_pressure),
        ("solver: constraint gradient matches finite differences", solver_gradient),
        ("solver: runs are deterministic", solver_determinism),
        ("protocol: decentralized run equals centralized run", protocol_equivalence),
        ("protocol: message counts and sizes", protocol_message_complexity),
        ("cli: reports are deterministic", cli_determinism),
        ("cli: charging fills the valley", cli_valley_filling),
    ]
}

fn random_feeder(r: &mut ChaCha8Rng, h: usize, houses: Vec<usize>) -> (FeederModel, Vec<Line>) {
    let lines = random_lines(r, h, 0.05);
    let f = FeederModel::new(names(h), lines.clone(), 1.0, r.random_range(0.0..0.5), houses, Bases::default()).unwrap();
    (f, lines)
}

pub fn network_linearity() -> Outcome {
    check((1usize..=8, any::<u64>()), |(h, seed)| {
        let mut r = rng(seed);
        let (f, _) = random_feeder(&mut r, h, vec![1; h]);
        let nm = build_network_matrices(&f, &vec![1e-3; h]).map_err(fail)?;
        let mut vec = || DVector::from_fn(h, |_, _| r.random_range(-0.01..0.01));
        let (p1, q1, p2, q2) = (vec(), vec(), vec(), vec());
        let v0 = DVector::from_element(h, f.v0_sq());
        let v = |p: &DVector<f64>, q: &DVector<f64>| lindistflow_voltages(&nm, &f, p, q).unwrap() - &v0;
        let sum = v(&(&p1 + &p2), &(&q1 + &q2));
        let parts = v(&p1, &q1) + v(&p2, &q2);
        // Removing V0 leaves rounding at the scale of V0 itself.
        let scale = sum.amax().max(parts.amax()) + f.v0_sq();
        prop_assert!((sum - parts).amax() <= 1e-12 * scale);
        Ok(())
    })
}

pub fn network_covariance_psd() -> Outcome {
    check((1usize..=8, any::<u64>()), |(h, seed)| {
        let mut r = rng(seed);
        let houses: Vec<usize> = (0..h).map(|_| r.random_range(1..=4)).collect();
        let n: usize = houses.iter().sum();
        let (f, _) = random_feeder(&mut r, h, houses);
        let nm = build_network_matrices(&f, &vec![1e-3; n]).map_err(fail)?;
        let mu = DMatrix::from_fn(2, n, |_, _| r.random_range(0.0..3e-4));
        let loads = BaselineLoadModel::new(mu, r.random_range(1e-6..1e-4)).map_err(fail)?;
        let y = yhat_distribution(&nm, &loads, 0.95, 1.0).map_err(fail)?;
        let cov = y[0].cov();
        let norm = cov.norm();
        prop_assert!((cov - cov.transpose()).amax() <= 1e-12 * norm.max(1e-300));
        let eig = cov.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * norm);
        Ok(())
    })
}

pub fn network_monotone() -> Outcome {
    check((1usize..=8, any::<u64>()), |(h, seed)| {
        let mut r = rng(seed);
        let (f, _) = random_feeder(&mut r, h, vec![1; h]);
        let nm = build_network_matrices(&f, &vec![1e-3; h]).map_err(fail)?;
        let p = DVector::from_fn(h, |_, _| r.random_range(-0.01..0.02));
        let q = DVector::from_fn(h, |_, _| r.random_range(-0.01..0.01));
        let mut p2 = p.clone();
        p2[r.random_range(0..h)] += r.random_range(0.0..0.01);
        let before = lindistflow_voltages(&nm, &f, &p, &q).map_err(fail)?;
        let after = lindistflow_voltages(&nm, &f, &p2, &q).map_err(fail)?;
        for i in 0..h {
            prop_assert!(after[i] <= before[i] + 1e-15);
        }
        Ok(())
    })
}

pub fn network_path_oracle() -> Outcome {
    check((1usize..=12, any::<u64>()), |(h, seed)| {
        let mut r = rng(seed);
        // Dyadic impedances keep every partial sum exact.
        let lines: Vec<Line> = (1..=h)
            .map(|c| Line {
                parent: r.random_range(0..c),
                child: c,
                r: r.random_range(1..64) as f64 / 64.0,
                x: r.random_range(1..64) as f64 / 64.0,
            })
            .collect();
        let f = FeederModel::new(names(h), lines.clone(), 1.0, 0.3, vec![1; h], Bases::default()).map_err(fail)?;
        let nm = build_network_matrices(&f, &vec![1.0; h]).map_err(fail)?;
        let (ro, xo) = path_walk_rx(&lines, h);
        prop_assert_eq!(nm.r, ro);
        prop_assert_eq!(nm.x, xo);
        Ok(())
    })
}

fn projection_case() -> impl Strategy<Value = (usize, u64)> {
    (1usize..=12, any::<u64>())
}

fn random_target(r: &mut ChaCha8Rng, k: usize) -> (f64, f64) {
    let ub = if r.random_bool(0.5) { 1.0 } else { r.random_range(0.2..1.0) };
    let s = match r.random_range(0..6) {
        0 => 0.0,
        1 => k as f64 * ub,
        _ => r.random_range(0.0..=k as f64 * ub),
    };
    (s, ub)
}

fn random_point(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| r.random_range(-2.0..3.0)).collect()
}

pub fn fleet_nonexpansive() -> Outcome {
    check(projection_case(), |(k, seed)| {
        let mut r = rng(seed);
        let (s, ub) = random_target(&mut r, k);
        let v1 = random_point(&mut r, k);
        let v2 = random_point(&mut r, k);
        let a = project_box_sum(&v1, s, ub).map_err(fail)?;
        let b = project_box_sum(&v2, s, ub).map_err(fail)?;
        let d_out: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let d_in: f64 = v1.iter().zip(&v2).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assert!(d_out <= d_in + 1e-12, "{} > {}", d_out, d_in);
        Ok(())
    })
}

pub fn fleet_projection_feasible() -> Outcome {
    check(projection_case(), |(k, seed)| {
        let mut r = rng(seed);
        let (s, ub) = random_target(&mut r, k);
        let v = random_point(&mut r, k);
        let u = project_box_sum(&v, s, ub).map_err(fail)?;
        prop_assert!(u.iter().all(|&x| (0.0..=ub).contains(&x)));
        prop_assert!((u.iter().sum::<f64>() - s).abs() <= SUM_TOL);
        Ok(())
    })
}

pub fn fleet_augmentation() -> Outcome {
    check((1usize..=52, any::<u64>()), |(k, seed)| {
        let mut r = rng(seed);
        let dt = 0.25;
        let eta = r.random_range(0.85..0.95);
        let pbar = r.random_range(3.3..7.2);
        let cap = r.random_range(20.0..60.0);
        let soc0 = r.random_range(0.0..0.8);
        // Reachable targets only.
        let max_gain = (k as f64 * eta * dt * pbar / cap).min(1.0 - soc0);
        let e = EvSpec {
            node: 1,
            slot: 0,
            eta,
            pbar_kw: pbar,
            capacity_kwh: cap,
            soc0,
            soc_target: soc0 + r.random_range(0.0..=1.0) * max_gain,
        };
        let s = required_sum(&e, k, dt).map_err(fail)?;
        let u = project_onto_u(&random_point(&mut r, k), s).map_err(fail)?;
        let mut x = e.required_energy();
        for &ut in &u {
            x = dynamics_step(x, ut, &e, dt).map_err(fail)?;
        }
        prop_assert!(x.abs() <= 1e-9 * cap, "residual energy {}", x);
        Ok(())
    })
}

fn random_gaussian(r: &mut ChaCha8Rng, d: usize) -> GaussianVector {
    let cov = random_spd(r, d);
    let mean = DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0));
    GaussianVector::new(mean, cov).unwrap()
}

fn random_z(r: &mut ChaCha8Rng, g: &GaussianVector, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(g.dim(), |j, _| g.mean()[j] + g.std_dev(j) * r.random_range(lo..hi))
}

pub fn gaussian_monotone() -> Outcome {
    check((2usize..=6, any::<u64>()), |(d, seed)| {
        let mut r = rng(seed);
        let g = random_gaussian(&mut r, d);
        let z = random_z(&mut r, &g, -2.0, 2.0);
        let z2 = DVector::from_fn(d, |j, _| z[j] + if r.random_bool(0.5) { r.random_range(0.0..1.0) } else { 0.0 });
        let opts = MvnOptions::default();
        let a = mvn_cdf(&z, &g, &opts).map_err(fail)?;
        let b = mvn_cdf(&z2, &g, &opts).map_err(fail)?;
        prop_assert!(a.value <= b.value + a.error + b.error + 1e-12, "{:?} vs {:?}", a, b);
        Ok(())
    })
}

pub fn gaussian_bounds() -> Outcome {
    check((2usize..=6, any::<u64>()), |(d, seed)| {
        let mut r = rng(seed);
        let g = random_gaussian(&mut r, d);
        let opts = MvnOptions::default();
        let v = mvn_cdf(&random_z(&mut r, &g, -3.0, 3.0), &g, &opts).map_err(fail)?.value;
        prop_assert!((0.0..=1.0).contains(&v));
        let hi = mvn_cdf(&random_z(&mut r, &g, 40.0, 50.0), &g, &opts).map_err(fail)?.value;
        let lo = mvn_cdf(&random_z(&mut r, &g, -50.0, -40.0), &g, &opts).map_err(fail)?.value;
        prop_assert!(hi >= 1.0 - 1e-9 && lo <= 1e-9, "hi {} lo {}", hi, lo);
        Ok(())
    })
}

pub fn gaussian_gradient_signs() -> Outcome {
    check((1usize..=6, any::<u64>()), |(d, seed)| {
        let mut r = rng(seed);
        let g = random_gaussian(&mut r, d);
        let z = random_z(&mut r, &g, -9.0, 3.0);
        let opts = MvnOptions::default();
        let plain = mvncdf_gradient(&z, &g, &opts).map_err(fail)?;
        let adj = adjusted_mvncdf_gradient(&z, &g, &opts).map_err(fail)?;
        prop_assert!(plain.iter().all(|&x| x >= 0.0), "{}", plain);
        prop_assert!(adj.iter().all(|&x| x > 0.0), "{}", adj);
        Ok(())
    })
}

pub fn gaussian_adjusted_cdf() -> Outcome {
    check((-5.0f64..5.0, 0.01f64..5.0, -40.0f64..40.0), |(mu, sigma, z)| {
        let a = adjusted_cdf(z, mu, sigma).map_err(fail)?;
        let f = normal_cdf(z, mu, sigma).map_err(fail)?;
        if z < mu {
            prop_assert!(a >= f);
        } else {
            prop_assert_eq!(a, f);
        }
        Ok(())
    })
}

/// Central differences of a fixed-lattice cdf against the analytic gradient.
/// For each component the other variables are ordered most constrained first
/// and the differentiated one goes last, where its limit only enters the
/// final, smooth factor of the integrand. Both sides of a difference share
/// the ordering and the random numbers.
const FD_REPLICATES: usize = 6;

/// Mean of a common-random-number difference quotient over independent
/// fixed-lattice replicates. Points double until three standard errors of
/// the mean fall below 0.3% of it (or the lattice reaches 2^18 points).
fn replicated_difference(
    seed: u64,
    quotient: impl Fn(&MvnOptions) -> std::result::Result<f64, String>,
) -> std::result::Result<f64, String> {
    let mut points = 1 << 12;
    loop {
        let mut reps = Vec::with_capacity(FD_REPLICATES);
        for rep in 0..FD_REPLICATES {
            reps.push(quotient(&MvnOptions::fixed(points, 2, seed ^ (rep as u64) << 32))?);
        }
        let n = reps.len() as f64;
        let mean = reps.iter().sum::<f64>() / n;
        let se = (reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        if 3.0 * se <= 3e-3 * mean.abs() || points >= 1 << 18 {
            return Ok(mean);
        }
        points *= 2;
    }
}

pub fn fd_gradient_check(g: &GaussianVector, z: &DVector<f64>, seed: u64) -> std::result::Result<f64, String> {
    let exact = mvncdf_gradient(
        z,
        g,
        &MvnOptions {
            abs_tol: 1e-10,
            rel_tol: 1e-4,
            max_points: 1 << 18,
            ..MvnOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let d = g.dim();
    let standardized = |j: usize| (z[j] - g.mean()[j]) / g.std_dev(j);
    let mut worst: f64 = 0.0;
    for j in 0..d {
        if exact[j].abs() <= 1e-6 {
            continue;
        }
        let mut ord: Vec<usize> = (0..d).filter(|&i| i != j).collect();
        ord.sort_by(|&a, &b| standardized(a).total_cmp(&standardized(b)));
        ord.push(j);
        let gp = GaussianVector::new(
            DVector::from_fn(d, |i, _| g.mean()[ord[i]]),
            DMatrix::from_fn(d, d, |i, k| g.cov()[(ord[i], ord[k])]),
        )
        .map_err(|e| e.to_string())?;
        let step = 1e-4 * g.std_dev(j);
        let mut zp = DVector::from_fn(d, |i, _| z[ord[i]]);
        let mut zm = zp.clone();
        zp[d - 1] += step;
        zm[d - 1] -= step;
        let fd = replicated_difference(seed ^ j as u64, |fixed| {
            let fp = mvn_cdf(&zp, &gp, fixed).map_err(|e| e.to_string())?.value;
            let fm = mvn_cdf(&zm, &gp, fixed).map_err(|e| e.to_string())?.value;
            Ok((fp - fm) / (2.0 * step))
        })?;
        worst = worst.max((fd - exact[j]).abs() / exact[j].abs());
    }
    Ok(worst)
}

pub fn gaussian_finite_differences() -> Outcome {
    check((2usize..=6, any::<u64>()), |(d, seed)| {
        let mut r = rng(seed);
        let g = random_gaussian(&mut r, d);
        let z = random_z(&mut r, &g, -1.5, 1.5);
        let worst = fd_gradient_check(&g, &z, seed).map_err(fail)?;
        prop_assert!(worst <= 1e-2, "relative error {}", worst);
        Ok(())
    })
}

/// Step sizes and scales that keep the small random problems well behaved.
pub fn random_config(r: &mut ChaCha8Rng, iters: usize) -> SolverConfig {
    let tau = r.random_range(0.8..0.999);
    SolverConfig {
        alpha: r.random_range(1e-10..2e-9),
        beta: r.random_range(0.5..5.0),
        tau_u: tau,
        tau_lambda: tau,
        d_lambda: r.random_range(1.0..1e6),
        delta: r.random_range(0.5..0.95),
        max_iters: iters,
        seed: r.random(),
        chance_scale: r.random_range(1e2..1e5),
        ..SolverConfig::default()
    }
}

fn mode_of(cc: bool) -> Mode {
    if cc {
        Mode::ChanceConstrained
    } else {
        Mode::Deterministic
    }
}

pub fn solver_feasibility() -> Outcome {
    check((any::<u64>(), 1usize..=15, any::<bool>()), |(seed, iters, cc)| {
        let mut r = rng(seed);
        let p = random_problem(seed, 4, 8);
        let cfg = random_config(&mut r, iters);
        let out = run(&p, &cfg, mode_of(cc)).map_err(fail)?;
        for (u, &s) in out.state.u.iter().zip(&p.required) {
            prop_assert!(u.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((u.iter().sum::<f64>() - s).abs() <= SUM_TOL);
        }
        prop_assert!(out.state.lambda.iter().all(|&l| (0.0..=cfg.d_lambda).contains(&l)));
        Ok(())
    })
}

/// Shrunken projected gradient on the valley objective alone, with the
/// projections done by the active-set oracle.
pub fn plain_projected_gradient(p: &Problem, cfg: &SolverConfig, iters: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let rho = cfg.rho_for(p);
    let tau = cfg.tau_u;
    let kk = p.horizon();
    let mut u = p.zero_profiles();
    let mut totals = Vec::new();
    for _ in 0..iters {
        let total: Vec<f64> = (0..kk)
            .map(|t| p.mean_total_w[t] + (0..u.len()).map(|i| p.pbar_w[i] * u[i][t]).sum::<f64>())
            .collect();
        u = u
            .iter()
            .enumerate()
            .map(|(i, ui)| {
                let v: Vec<f64> = (0..kk)
                    .map(|t| tau * ui[t] - cfg.alpha * (p.pbar_w[i] * total[t] + rho * ui[t]))
                    .collect();
                let inner: Vec<f64> = qp_projection(&v, tau * p.required[i], tau).iter().map(|x| x / tau).collect();
                qp_projection(&inner, p.required[i], 1.0)
            })
            .collect();
        totals.push(
            (0..kk)
                .map(|t| p.mean_total_w[t] + (0..u.len()).map(|i| p.pbar_w[i] * u[i][t]).sum::<f64>())
                .collect(),
        );
    }
    (u, totals)
}

pub fn solver_inactive() -> Outcome {
    check((any::<u64>(), 1usize..=10, any::<bool>()), |(seed, iters, cc)| {
        let mut r = rng(seed);
        let mut p = random_problem(seed, 4, 8);
        // A bound far below any reachable voltage.
        p.nu_lower = 0.3;
        p.yhat = yhat_distribution(&p.nm, &p.loads, p.nu_lower, p.feeder.v0_sq()).map_err(fail)?;
        let cfg = random_config(&mut r, iters);
        let out = run(&p, &cfg, mode_of(cc)).map_err(fail)?;
        prop_assert!(out.state.history.iter().all(|h| h.lambda.iter().all(|&l| l == 0.0)));
        let (u, totals) = plain_projected_gradient(&p, &cfg, iters);
        for (a, b) in out.state.u.iter().flatten().zip(u.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
        for (h, t) in out.state.history.iter().zip(&totals) {
            for (a, b) in h.total_load_w.iter().zip(t) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
        Ok(())
    })
}

pub fn solver_monotone_pressure() -> Outcome {
    check((any::<u64>(), 1usize..=8), |(seed, k)| {
        let mut r = rng(seed);
        let cfg = random_config(&mut r, 1);
        let cap = cfg.d_lambda;
        let mut lambda = DMatrix::from_fn(k, 1, |_, _| r.random_range(0.0..cap));
        // Pressure beats the (1 - tau) lambda leak of the contraction.
        let leak = (1.0 - cfg.tau_lambda) * cap / cfg.beta;
        let d = DMatrix::from_fn(k, 1, |_, _| leak * r.random_range(1.01..20.0));
        let more = d.map(|v| v * r.random_range(1.0..3.0));
        for _ in 0..200 {
            let next = dual_step(&lambda, &cfg, &d).map_err(fail)?;
            let pushed = dual_step(&lambda, &cfg, &more).map_err(fail)?;
            for i in 0..k {
                prop_assert!(pushed[i] >= next[i]);
                if lambda[i] < cap {
                    prop_assert!(next[i] > lambda[i], "{} -> {}", lambda[i], next[i]);
                } else {
                    prop_assert_eq!(next[i], cap);
                }
            }
            lambda = next;
        }
        Ok(())
    })
}

/// Draws feasible profiles for every EV of `p`.
pub fn random_profiles(r: &mut ChaCha8Rng, p: &Problem) -> Vec<Vec<f64>> {
    p.required
        .iter()
        .map(|&s| project_onto_u(&random_point(r, p.horizon()), s).unwrap())
        .collect()
}

pub fn solver_gradient() -> Outcome {
    check(any::<u64>(), |seed| {
        let mut r = rng(seed);
        let p = random_problem(seed, 3, 4);
        let u = random_profiles(&mut r, &p);
        let p = with_margin(p, &u, r.random_range(0.3..2.5));
        let kk = p.horizon();
        let cfg = SolverConfig {
            mvn_tol: 1e-8,
            mvn_max_points: 1 << 18,
            rho: Some(r.random_range(0.0..1e6)),
            ..random_config(&mut r, 1)
        };
        let rho = cfg.rho_for(&p);
        let lambda = DMatrix::from_fn(kk, 1, |_, _| r.random_range(0.1..10.0));
        let agg = Aggregates::from_profiles(&p, &u);
        // The identity region of the reflection: plain and reflected
        // gradients coincide in every slot.
        let z = agg.z_blocks(&p);
        let opts = MvnOptions::default();
        for k in 0..kk {
            let zk = z.column(k).into_owned();
            let a = mvncdf_gradient(&zk, &p.yhat[k], &opts).map_err(fail)?;
            let b = adjusted_mvncdf_gradient(&zk, &p.yhat[k], &opts).map_err(fail)?;
            prop_assume!((&a - &b).amax() <= 1e-12 * b.amax());
        }
        let eval = evaluate_constraints(&p, &cfg, Mode::ChanceConstrained, &agg, &lambda, 0).map_err(fail)?;
        let mean_total: Vec<f64> = (0..kk).map(|t| p.mean_total_w[t] + agg.total_w[t]).collect();
        // A control in slot t moves only that slot's term of the penalty.
        let penalty = |u: &[Vec<f64>], t: usize, fixed: &MvnOptions| -> f64 {
            let z = Aggregates::from_profiles(&p, u).z_blocks(&p).columns(t, 1).into_owned();
            let d = chance_constraint_value(&z, &p.yhat[t..=t], cfg.delta, &|_| *fixed).unwrap();
            lambda[(t, 0)] * cfg.chance_scale * d[0]
        };
        let i = r.random_range(0..p.ev_count());
        let key = p.private_key(i).map_err(fail)?;
        let g = ev_gradient(p.pbar_w[i], key.column(), &u[i], &mean_total, &eval.weights, rho);
        let obj_part: Vec<f64> = (0..kk).map(|t| p.pbar_w[i] * mean_total[t] + rho * u[i][t]).collect();
        let step = 1e-3;
        for t in 0..kk {
            let mut up = u.clone();
            let mut um = u.clone();
            up[i][t] += step;
            um[i][t] -= step;
            let fd_obj = (objective_mean(&p, &up, rho).1 - objective_mean(&p, &um, rho).1) / (2.0 * step);
            prop_assert!((fd_obj - obj_part[t]).abs() <= 1e-6 * obj_part[t].abs().max(1.0));
            let fd_pen = replicated_difference(seed ^ t as u64, |fixed| {
                Ok((penalty(&up, t, fixed) - penalty(&um, t, fixed)) / (2.0 * step))
            })
            .map_err(fail)?;
            let pen = g[t] - obj_part[t];
            let scale = pen.abs().max(fd_pen.abs());
            if scale > 1e-6 * obj_part[t].abs().max(1.0) {
                prop_assert!((fd_pen - pen).abs() <= 1e-2 * scale, "slot {}: fd {} vs {}", t, fd_pen, pen);
            }
        }
        Ok(())
    })
}

pub fn solver_determinism() -> Outcome {
    check((any::<u64>(), 1usize..=8, any::<bool>()), |(seed, iters, cc)| {
        let mut r = rng(seed);
        let p = random_problem(seed, 4, 8);
        let cfg = random_config(&mut r, iters);
        let a = run(&p, &cfg, mode_of(cc)).map_err(fail)?;
        let b = run(&p, &cfg, mode_of(cc)).map_err(fail)?;
        prop_assert_eq!(&a.state.history, &b.state.history);
        prop_assert_eq!(&a.state.u, &b.state.u);
        prop_assert_eq!(&a.state.lambda, &b.state.lambda);
        Ok(())
    })
}

pub fn protocol_equivalence() -> Outcome {
    check((any::<u64>(), 1usize..=10, any::<bool>()), |(seed, iters, cc)| {
        let mut r = rng(seed);
        let p = random_problem(seed, 4, 8);
        let cfg = random_config(&mut r, iters);
        let central = run(&p, &cfg, mode_of(cc)).map_err(fail)?;
        let dec = run_decentralized_mode(&p, &cfg, mode_of(cc)).map_err(fail)?;
        prop_assert_eq!(&central.state.u, &dec.u);
        prop_assert_eq!(&central.state.lambda, &dec.lambda);
        prop_assert_eq!(&central.state.history, &dec.history);
        Ok(())
    })
}

pub fn protocol_message_complexity() -> Outcome {
    check((any::<u64>(), 1usize..=6, any::<bool>()), |(seed, iters, cc)| {
        let mut r = rng(seed);
        let p = random_problem(seed, 4, 8);
        let cfg = random_config(&mut r, iters);
        let dec = run_decentralized_mode(&p, &cfg, mode_of(cc)).map_err(fail)?;
        let (kk, h, n) = (p.horizon(), p.node_count(), p.ev_count());
        prop_assert_eq!(dec.log.len(), 2 * iters);
        for (it, pair) in dec.log.chunks(2).enumerate() {
            let (down, up) = (&pair[0], &pair[1]);
            prop_assert_eq!(down.iter, it + 1);
            prop_assert_eq!(down.direction, Direction::Downlink);
            prop_assert_eq!(down.messages, 1);
            prop_assert_eq!(down.payload_elements, kk + kk * h);
            prop_assert_eq!(up.direction, Direction::Uplink);
            prop_assert_eq!(up.messages, n);
            prop_assert_eq!(up.payload_elements, n * (kk + 2));
        }
        Ok(())
    })
}

/// Random small scenario with a window starting at midnight.
pub fn random_scenario(seed: u64, iters: usize, mc_samples: usize) -> Scenario {
    let mut r = rng(seed);
    let p = random_problem(seed, 3, 6);
    let kk = p.horizon();
    let settings = Settings {
        name: format!("random-{seed}"),
        nu_lower: p.nu_lower,
        sigma_p_w: p.loads.sigma_p() * p.feeder.bases().s_base_va,
        window_start: "00:00".into(),
        window_end: format!("{:02}:{:02}", kk * 15 / 60, kk * 15 % 60),
        mc_samples,
        seed: r.random(),
        solver: random_config(&mut r, iters),
        ..Settings::default()
    };
    let baseline = p.loads.mu() * p.feeder.bases().s_base_va;
    Scenario::from_parts(settings, p.feeder, p.fleet, baseline).unwrap()
}

fn read_csvs(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "json") && !p.ends_with("timing.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

pub fn cli_determinism() -> Outcome {
    check((any::<u64>(), 1usize..=6), |(seed, iters)| {
        let sc = random_scenario(seed, iters, 8);
        let a = execute(&sc, ModeSelection::Both).map_err(fail)?;
        let b = execute(&sc, ModeSelection::Both).map_err(fail)?;
        for res in &a.results {
            prop_assert_eq!(res.mc.histogram.iter().sum::<usize>(), sc.horizon() * 8);
        }
        let da = tempfile::tempdir().map_err(fail)?;
        let db = tempfile::tempdir().map_err(fail)?;
        emit_report(&a, da.path()).map_err(fail)?;
        emit_report(&b, db.path()).map_err(fail)?;
        let (fa, fb) = (read_csvs(da.path()), read_csvs(db.path()));
        prop_assert_eq!(fa.len(), 6);
        prop_assert!(fa == fb, "reports differ");
        Ok(())
    })
}

pub fn cli_valley_filling() -> Outcome {
    check((any::<u64>(), 1usize..=3, 4usize..=16), |(seed, h, kk)| {
        let mut r = rng(seed);
        let lines = random_lines(&mut r, h, 2.0);
        let houses: Vec<usize> = (0..h).map(|_| r.random_range(1..=3)).collect();
        let mut evs = Vec::new();
        for (i, &c) in houses.iter().enumerate() {
            for _ in 0..c {
                let soc0 = r.random_range(0.1..0.5);
                let pbar = r.random_range(3.3..7.2);
                // At most 60% of what the charger can deliver over the horizon.
                let reach = kk as f64 * 0.9 * 0.25 * pbar / 24.0;
                evs.push(ev(i + 1, pbar, 24.0, soc0, (soc0 + reach * r.random_range(0.1..0.6)).min(0.95)));
            }
        }
        // Evening peak decaying into an overnight trough.
        let depth = r.random_range(0.3..0.7);
        let profile: Vec<f64> = (0..kk)
            .map(|t| 1500.0 * (1.0 - depth * (std::f64::consts::PI * t as f64 / kk as f64).sin()))
            .collect();
        let base = DMatrix::from_fn(kk, evs.len(), |t, _| profile[t]);
        let p = problem(lines, houses, evs, 0.25, &base, 400.0, 0.9);
        let cfg = SolverConfig {
            alpha: 1e-9,
            max_iters: 200,
            ..SolverConfig::default()
        };
        let out = run(&p, &cfg, Mode::ChanceConstrained).map_err(fail)?;
        let total = &out.state.history.last().unwrap().total_load_w;
        prop_assert!(std_dev(total) < std_dev(&p.mean_total_w), "{} vs {}", std_dev(total), std_dev(&p.mean_total_w));
        Ok(())
    })
}
