//! Acceptance suite. Each test prints one `PASS`/`FAIL` line.
//!
//! The end-to-end reconstruction check reports its verdict without failing
//! the suite unless `CLAMP_STRICT=1` is set; see the README.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use clamp_core::dense::{
    exact_em_surrogate_dense, exact_nll_dense, exact_posterior, operator_matrix,
};
use clamp_core::em::{
    mu_gradient_step, mu_relative_residual, prox_cubic_scalar, prox_quadratic_scalar, EmParams,
    LookState, ProxKind,
};
use clamp_core::forward::speckle_average;
use clamp_core::io::{
    decode_volume, dump_config, encode_volume, parse_config, RunConfig, Volume, VOLUME_HEADER_LEN,
};
use clamp_core::mace::{run_clamp_with, EngineConfig, FnAgent};
use clamp_core::metrics::{
    brute_force_nearest, cloud_metrics, nrmse_at, psnr_at, psnr_scaled, GeometryParams, KdTree,
    Point, PointCloud,
};
use clamp_core::prior::PriorAgent;
use clamp_core::sim::{make_phantom, simulate_looks_with, SimParams};
use clamp_core::theory::{validate_majorized_mace, ToyConsensusProblem, ValidationConfig};
use clamp_core::volume::{make_aperture, ApertureMask};
use clamp_core::{Complex64, ComplexVolume, Dims, ForwardOperator, RealVolume};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(name: &str, ok: bool, elapsed: Duration, budget_s: f64, detail: &str) -> bool {
    let t = elapsed.as_secs_f64();
    let pass = ok && t < budget_s;
    println!(
        "{} {name}: {detail}; {t:.2} s of {budget_s} s",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn complex(d: Dims, rng: &mut ChaCha8Rng) -> ComplexVolume {
    ComplexVolume::from_fn(d, |_| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

fn positive(d: Dims, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> RealVolume {
    RealVolume::from_fn(d, |_| rng.random_range(lo..hi))
}

#[test]
fn operator_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let d = Dims::new(16, 16, 8).unwrap();
    let op = ForwardOperator::new(make_aperture(d, 0.5).unwrap(), 1e-3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut adj, mut idem) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = complex(d, &mut rng);
        let y = complex(d, &mut rng);
        let lhs = op.apply(&x).unwrap().inner(&y).unwrap();
        let rhs = x.inner(&op.adjoint(&y).unwrap()).unwrap();
        adj = adj.max((lhs - rhs).norm() / (x.norm() * y.norm()));
        let p = op.normal(&x).unwrap();
        idem = idem.max(op.normal(&p).unwrap().distance(&p).unwrap() / x.norm());
    }
    let ok = adj <= 1e-9 && idem <= 1e-10;
    let detail = format!("adjoint gap {adj:.2e}, idempotence gap {idem:.2e}");
    assert!(verdict(
        "operator correctness",
        ok,
        start.elapsed(),
        5.0,
        &detail
    ));
}

/// `d/dr_j [log det S + y^H S^-1 y] = (A^H S^-1 A)_jj - |(A^H S^-1 y)_j|^2`.
fn nll_gradient(r: &[f64], y: &[Complex64], a: &DMatrix<Complex64>, sigma_w2: f64) -> Vec<f64> {
    let n = r.len();
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        r.iter().map(|&v| Complex64::new(v, 0.0)),
    ));
    let s = a * d * a.adjoint() + DMatrix::identity(n, n) * Complex64::new(sigma_w2, 0.0);
    let s_inv = s.try_inverse().unwrap();
    let m = a.adjoint() * &s_inv * a;
    let z = a.adjoint() * &s_inv * DVector::from_column_slice(y);
    (0..n).map(|j| m[(j, j)].re - z[j].norm_sqr()).collect()
}

#[test]
fn surrogate_validity_dense() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let d = Dims::new(2, 2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sigma_w2 = 0.05;
    let (mut major, mut tangent) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..100 {
        let mut open: Vec<bool> = (0..8).map(|_| rng.random_bool(0.6)).collect();
        open[0] = true;
        let op =
            ForwardOperator::new(ApertureMask::from_bools(d, open).unwrap(), sigma_w2).unwrap();
        let a = operator_matrix(&op).unwrap();
        let r: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..2.0)).collect();
        let rp: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..2.0)).collect();
        let y: Vec<Complex64> = complex(d, &mut rng).into_vec();

        let nll = |v: &[f64]| exact_nll_dense(v, &y, &a, sigma_w2).unwrap();
        let q = |v: &[f64]| exact_em_surrogate_dense(v, &rp, &y, &a, sigma_w2).unwrap();
        // f(r) - f(r') <= Q(r; r') - Q(r'; r')
        let gap = (nll(&r) - nll(&rp)) - (q(&r) - q(&rp));
        major = major.max(gap);

        let (mu, c) = exact_posterior(&rp, &y, &a, sigma_w2).unwrap();
        let grad_q: Vec<f64> = (0..8)
            .map(|j| (rp[j] - (mu[j].norm_sqr() + c[j])) / (rp[j] * rp[j]))
            .collect();
        let grad_f = nll_gradient(&rp, &y, &a, sigma_w2);
        for (gq, gf) in grad_q.iter().zip(&grad_f) {
            tangent = tangent.max((gq - gf).abs() / gf.abs().max(1.0));
        }
    }
    let ok = major <= 1e-8 && tangent <= 1e-8;
    let detail = format!("max majorization violation {major:.2e}, max tangency gap {tangent:.2e}");
    assert!(verdict(
        "surrogate validity at n = 8",
        ok,
        start.elapsed(),
        30.0,
        &detail
    ));
}

#[test]
fn mean_solver_reaches_closed_form() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let d = Dims::new(8, 8, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut worst_err, mut worst_steps, mut worst_res) = (0.0f64, 0usize, 0.0f64);
    let mut monotone = true;
    for &sigma_w2 in &[1e-3, 1e-2, 0.1, 1.0] {
        let op = ForwardOperator::new(ApertureMask::full(d), sigma_w2).unwrap();
        let params = EmParams::new(sigma_w2, 0.1, op.alpha()).unwrap();
        let y = complex(d, &mut rng);
        let rp = positive(d, &mut rng, 0.01, 2.0);
        let back = op.adjoint(&y).unwrap();
        let exact = ComplexVolume::from_fn(d, |j| {
            let v = rp[j] + sigma_w2;
            back[j] * (v / (v + sigma_w2))
        });
        let mut state =
            LookState::new(y.clone(), ComplexVolume::zeros(d), rp.clone(), &params).unwrap();
        let mut prev = f64::INFINITY;
        let mut steps = None;
        let mut res = prev;
        for k in 1..=50 {
            state.mu = mu_gradient_step(&state, &rp, &op, &params).unwrap();
            res = mu_relative_residual(&state.mu, &y, &rp, &op, &params).unwrap();
            // Below 1e-13 the residual is rounding noise.
            monotone &= res <= prev || prev < 1e-13;
            prev = res;
            if steps.is_none() && state.mu.distance(&exact).unwrap() <= 1e-8 * exact.norm() {
                steps = Some(k);
            }
        }
        worst_err = worst_err.max(state.mu.distance(&exact).unwrap() / exact.norm());
        worst_steps = worst_steps.max(steps.unwrap_or(usize::MAX));
        worst_res = worst_res.max(res);
    }
    let ok = worst_steps <= 50 && monotone && worst_res < 1e-6;
    let detail = format!(
        "relative error {worst_err:.2e} within {worst_steps} steps, final residual {worst_res:.2e}, monotone {monotone}"
    );
    assert!(verdict("mean solver", ok, start.elapsed(), 10.0, &detail));
}

/// `f(r) - f(r0)` for the per-voxel prox objective, in a form free of
/// cancellation so that golden-section search resolves the minimizer to
/// near machine precision.
fn prox_delta(r: f64, r0: f64, v: f64, s: f64, sigma2: f64) -> f64 {
    let h = r - r0;
    (h / r0).ln_1p() - s * h / (r * r0) + h * (r + r0 - 2.0 * v) / (2.0 * sigma2)
}

fn golden_prox(v: f64, s: f64, sigma2: f64) -> f64 {
    // Dense scan to bracket the global minimum, then golden-section refinement.
    let hi = v.max(0.0) + s + 1.0;
    let n = 4000;
    let grid = |i: usize| hi * (i as f64 + 0.5) / n as f64;
    let r0 = grid(0);
    let best = (0..n)
        .min_by(|&i, &j| {
            prox_delta(grid(i), r0, v, s, sigma2).total_cmp(&prox_delta(grid(j), r0, v, s, sigma2))
        })
        .unwrap();
    let anchor = grid(best);
    let f = |r: f64| prox_delta(r, anchor, v, s, sigma2);
    let (mut a, mut b) = (
        grid(best.saturating_sub(1)) * if best == 0 { 1e-6 } else { 1.0 },
        grid(best + 1),
    );
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
        if b - a <= 1e-15 * b {
            break;
        }
    }
    0.5 * (a + b)
}

/// Number of positive roots of `r^3 - v r^2 + sigma2 r - sigma2 s`: one when
/// `v <= 0` (one sign change), otherwise three exactly when the discriminant
/// is positive.
fn positive_roots(v: f64, s: f64, sigma2: f64) -> usize {
    let (b, c, d) = (-v, sigma2, -sigma2 * s);
    let disc =
        18.0 * b * c * d - 4.0 * b.powi(3) * d + b * b * c * c - 4.0 * c.powi(3) - 27.0 * d * d;
    if v > 0.0 && disc > 0.0 {
        3
    } else {
        1
    }
}

#[test]
fn prox_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut iter_gap, mut golden_gap, mut max_steps) = (0.0f64, 0.0f64, 0usize);
    let (mut single, mut multi, mut other_min) = (0, 0, 0);
    while single < 1000 {
        let v = rng.random_range(-1.0..3.0);
        let s = rng.random_range(0.01..3.0);
        let sigma2 = 10f64.powf(rng.random_range(-3.0..0.0));
        let cubic = prox_cubic_scalar(v, s, sigma2);
        golden_gap = golden_gap.max((golden_prox(v, s, sigma2) - cubic).abs() / cubic.max(1.0));
        let mut r = s;
        let mut steps = 200;
        for k in 1..=200 {
            let next = prox_quadratic_scalar(v, r, s, sigma2, 1.5);
            let done = (next - r).abs() <= 1e-15 * r;
            r = next;
            if done {
                steps = k;
                break;
            }
        }
        let gap = (r - cubic).abs() / cubic.max(1.0);
        if positive_roots(v, s, sigma2) == 1 {
            single += 1;
            iter_gap = iter_gap.max(gap);
            max_steps = max_steps.max(steps);
        } else {
            // Two local minima: the descent iteration may settle in either.
            multi += 1;
            other_min += usize::from(gap > 1e-6);
        }
    }
    let ok = iter_gap <= 1e-6 && golden_gap <= 1e-8;
    let detail = format!(
        "iterated quadratic gap {iter_gap:.2e} within {max_steps} steps on 1000 single-minimum voxels \
         ({other_min} of {multi} two-minimum voxels settled in the other minimum), golden-section gap {golden_gap:.2e}"
    );
    assert!(verdict(
        "prox equivalence",
        ok,
        start.elapsed(),
        10.0,
        &detail
    ));
}

#[test]
fn majorized_consensus_theory() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = ValidationConfig::default();
    let (mut kkt, mut rise, mut failures) = (0.0f64, f64::NEG_INFINITY, 0);
    for k in 0..50 {
        let agents = rng.random_range(2..=4);
        let dim = rng.random_range(1..=8);
        let p = ToyConsensusProblem::random(agents, dim, 1000 + k).unwrap();
        let rep = validate_majorized_mace(&p, &cfg).unwrap();
        let inc = rep
            .lyapunov
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        kkt = kkt.max(rep.kkt_distance);
        rise = rise.max(inc);
        if !(rep.kkt_distance <= 1e-6 && inc <= 1e-12) {
            failures += 1;
        }
    }
    let detail = format!(
        "50 problems, {failures} failing, max KKT distance {kkt:.2e}, max Lyapunov rise {rise:.2e}"
    );
    assert!(verdict(
        "majorized consensus theory",
        failures == 0,
        start.elapsed(),
        60.0,
        &detail
    ));
}

#[test]
fn surrogate_and_exact_fixed_points_agree() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let d = Dims::new(8, 8, 4).unwrap();
    let op = Arc::new(ForwardOperator::new(ApertureMask::full(d), 1e-3).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let truth = positive(d, &mut rng, 0.2, 1.0);
    let params = SimParams {
        looks: 4,
        noise_var: 1e-3,
        seed: 16,
        dims: d,
        aperture_fraction: 1.0,
    };
    let ys = simulate_looks_with(&truth, &op, &params).unwrap();
    let em = EmParams::new(1e-3, 1e-3, op.alpha()).unwrap();
    let run = |prox: ProxKind| {
        let cfg = EngineConfig {
            max_iters: 2000,
            data_prox: prox,
            early_stop: true,
            tol: 1e-9,
            ..EngineConfig::default()
        };
        let prior = Box::new(FnAgent(|v: &RealVolume| Ok(v.clone())));
        run_clamp_with(&ys, op.clone(), prior, &em, &cfg).unwrap()
    };
    let (wq, tq) = run(ProxKind::Quadratic);
    let (wc, tc) = run(ProxKind::Cubic);
    let gap = wq.distance(&wc).unwrap() / wc.norm();
    let eq = tq.last().unwrap().convergence_error;
    let ec = tc.last().unwrap().convergence_error;
    let detail = format!(
        "relative gap {gap:.2e}; final errors {eq:.1e} after {} and {ec:.1e} after {} iterations",
        tq.len(),
        tc.len()
    );
    assert!(verdict(
        "surrogate fixed point equals exact",
        gap <= 1e-4,
        start.elapsed(),
        60.0,
        &detail
    ));
}

#[test]
fn end_to_end_synthetic() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let cfg = RunConfig::default();
    let truth = make_phantom(&cfg.phantom().unwrap()).unwrap();
    let op = cfg.operator().unwrap();
    let ys = simulate_looks_with(&truth, &op, &cfg.sim_params().unwrap()).unwrap();
    let baseline = psnr_scaled(&speckle_average(&ys, &op).unwrap(), &truth)
        .unwrap()
        .db;

    let run = |op: ForwardOperator| {
        let em = cfg.em_params(&op).unwrap();
        let prior = PriorAgent::new(cfg.prior.clone()).unwrap();
        let (r, trace) =
            run_clamp_with(&ys, Arc::new(op), Box::new(prior), &em, &cfg.engine).unwrap();
        (
            psnr_scaled(&r, &truth).unwrap().db,
            trace.last().unwrap().convergence_error,
        )
    };
    let (psnr_ap, err) = run(op.clone());
    let (psnr_noap, _) = run(op.without_aperture());

    let converged = err < 1e-3;
    let gain = psnr_ap - baseline;
    let ordered = psnr_ap >= psnr_noap;
    let ok = converged && gain >= 2.0 && ordered;
    let detail = format!(
        "convergence error {err:.2e} (need < 1e-3), PSNR {psnr_ap:.2} dB vs baseline {baseline:.2} dB \
         (gain {gain:+.2}, need >= 2), no-aperture PSNR {psnr_noap:.2} dB"
    );
    let pass = verdict("end-to-end synthetic", ok, start.elapsed(), 600.0, &detail);
    if std::env::var("CLAMP_STRICT").is_ok_and(|v| v == "1") {
        assert!(pass);
    }
}

#[test]
fn metrics_oracles() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut nn_mismatch = 0;
    for lattice in [false, true] {
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [0, 1, 2].map(|_| {
                    if lattice {
                        rng.random_range(0..6) as f64
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
            })
            .collect();
        let tree = KdTree::new(pts.clone());
        for _ in 0..1000 {
            let q = [0, 1, 2].map(|_| rng.random_range(-0.5..6.5));
            if tree.nearest(&q) != brute_force_nearest(&pts, &q) {
                nn_mismatch += 1;
            }
        }
    }

    let d = Dims::new(6, 6, 6).unwrap();
    let truth = positive(d, &mut rng, 0.0, 1.0);
    let recon = positive(d, &mut rng, 0.0, 3.0);
    let best = psnr_scaled(&recon, &truth).unwrap();
    let mut psnr_excess = f64::NEG_INFINITY;
    for i in -5000..=5000 {
        let beta = best.beta + i as f64 * 1e-4;
        psnr_excess = psnr_excess.max(psnr_at(&recon, &truth, beta).unwrap() - best.db);
    }

    let cloud = |rs: &[f64]| PointCloud {
        points: rs
            .iter()
            .enumerate()
            .map(|(i, &r)| Point {
                pos: [i as f64, 0.0, 0.0],
                r,
            })
            .collect(),
    };
    let rp: Vec<f64> = (0..200).map(|_| rng.random_range(0.1..2.0)).collect();
    let rt: Vec<f64> = rp
        .iter()
        .map(|r| 0.4 * r + rng.random_range(-0.05..0.05))
        .collect();
    let m = cloud_metrics(&cloud(&rp), &cloud(&rt), 0.1).unwrap();
    let pairs: Vec<(f64, f64)> = rp.iter().copied().zip(rt.iter().copied()).collect();
    let (beta, nrmse) = (m.beta.unwrap(), m.nrmse.unwrap());
    let mut nrmse_excess = (nrmse_at(&pairs, beta) - nrmse).abs();
    for i in -5000..=5000 {
        nrmse_excess = nrmse_excess.max(nrmse - nrmse_at(&pairs, beta + i as f64 * 1e-5));
    }

    let rayleigh_cm = GeometryParams::default().rayleigh() * 100.0;
    let ok = nn_mismatch == 0
        && psnr_excess <= 1e-9
        && nrmse_excess <= 1e-9
        && (rayleigh_cm - 1.56).abs() <= 0.05;
    let detail = format!(
        "{nn_mismatch} nearest-neighbour mismatches, PSNR scan excess {psnr_excess:.1e}, \
         NRMSE scan excess {nrmse_excess:.1e}, Rayleigh {rayleigh_cm:.3} cm"
    );
    assert!(verdict(
        "metrics oracles",
        ok,
        start.elapsed(),
        10.0,
        &detail
    ));
}

#[test]
fn formats_round_trip_and_reject_corruption() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let d = Dims::padded([5, 4, 3], clamp_core::PadFactor::THREE_HALVES).unwrap();
    let c = ComplexVolume::from_fn(d, |_| {
        Complex64::new(
            rng.random_range(-1.0f32..1.0) as f64,
            rng.random_range(-1.0f32..1.0) as f64,
        )
    });
    let r = RealVolume::from_fn(d, |j| c[j].im);
    let mut exact = true;
    for v in [Volume::Real(r), Volume::Complex(c)] {
        let bytes = encode_volume(&v).unwrap();
        let back = decode_volume(&bytes).unwrap();
        exact &= back == v && encode_volume(&back).unwrap() == bytes;
    }

    let mut cfg = RunConfig::default();
    cfg.sim.seed = 0xDEAD_BEEF;
    cfg.engine.rho = 0.3;
    cfg.forward.q = 1.5;
    let text = dump_config(&cfg).unwrap();
    let back = parse_config(&text).unwrap();
    exact &= back == cfg && dump_config(&back).unwrap() == text;

    use clamp_core::error::FormatError as F;
    let good = encode_volume(&Volume::Real(RealVolume::filled(
        Dims::new(2, 3, 4).unwrap(),
        1.5,
    )))
    .unwrap();
    let corrupt = |at: usize, val: u8| {
        let mut b = good.clone();
        b[at] = val;
        decode_volume(&b).unwrap_err()
    };
    let cfg_err = parse_config("[engine]\nrho = 0.5\nbogus = 1\n").unwrap_err();
    let errors = [
        matches!(corrupt(0, b'X'), F::BadMagic(_)),
        matches!(corrupt(4, 99), F::UnsupportedVersion(99)),
        matches!(corrupt(5, 7), F::UnknownDtype(7)),
        matches!(corrupt(6, 9), F::LengthMismatch { .. }),
        matches!(corrupt(6, 1), F::BadHeader(_)),
        matches!(corrupt(18, 0), F::BadHeader(_)),
        matches!(
            decode_volume(&good[..VOLUME_HEADER_LEN - 1]).unwrap_err(),
            F::Truncated { .. }
        ),
        matches!(
            decode_volume(&good[..good.len() - 4]).unwrap_err(),
            F::Truncated { .. } | F::LengthMismatch { .. }
        ),
        matches!(&cfg_err, clamp_core::Error::Config(e) if e.line == Some(3)),
    ];
    let rejected = errors.iter().filter(|&&e| e).count();

    let ok = exact && rejected == errors.len();
    let detail = format!(
        "round trips exact {exact}, {rejected}/{} corruptions rejected as specified",
        errors.len()
    );
    assert!(verdict("formats", ok, start.elapsed(), 5.0, &detail));
}
