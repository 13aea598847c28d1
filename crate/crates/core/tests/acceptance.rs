//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kernel_flows::data::{self, SplitSpec, SplitStrategy};
use kernel_flows::kernels::{center_test, center_train, eval_kernel, gram_matrix};
use kernel_flows::kflow::{self, FlowModel, KFConfig, LossKind};
use kernel_flows::models;
use kernel_flows::{KernelFamily, KernelSpec, KernelTerm};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);
type Loss = Box<dyn Fn(&[f64]) -> kernel_flows::Result<f64> + Sync>;

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 kernel formulas", kernel_formulas, Duration::from_secs(5)),
        (
            "2 centering identities",
            centering_identities,
            Duration::from_secs(5),
        ),
        (
            "3 kpcr vs linear pcr",
            kpcr_vs_linear_pcr,
            Duration::from_secs(30),
        ),
        ("4 loo loss vs refit", loo_vs_refit, Duration::from_secs(60)),
        ("5 norm-ratio bounds", norm_ratio_bounds, Duration::MAX),
        (
            "6 gradient consistency",
            gradient_consistency,
            Duration::MAX,
        ),
        ("7 width recovery", width_recovery, Duration::from_secs(120)),
        ("8 loss swap", loss_swap, Duration::MAX),
        ("9 determinism", determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > budget => {
                Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}"))
            }
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{elapsed:.2?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{elapsed:.2?}]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(r: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal))
}

fn normal_vector(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample(StandardNormal))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Scalar reference formulas written against the distance r, not r².
fn oracle_kernel(family: KernelFamily, r: f64, s: f64) -> f64 {
    match family {
        KernelFamily::Gaussian => (-0.5 * (r / s).powi(2)).exp(),
        KernelFamily::Cauchy => s * s / (s * s + r * r),
        KernelFamily::Matern12 => (-r / s).exp(),
        KernelFamily::Matern32 => {
            let a = 3f64.sqrt() * r / s;
            (1.0 + a) / a.exp()
        }
        KernelFamily::Matern52 => {
            let a = 5f64.sqrt() * r / s;
            (1.0 + a + a * a / 3.0) / a.exp()
        }
        _ => unreachable!(),
    }
}

fn kernel_formulas() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for family in KernelFamily::ALL {
        for _ in 0..1000 {
            let p = r.random_range(1..=8);
            let x: Vec<f64> = (0..p).map(|_| r.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..p).map(|_| r.random_range(-3.0..3.0)).collect();
            let sigma = 10f64.powf(r.random_range(-1.0..1.0));
            let dist = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let expect = oracle_kernel(family, dist, sigma);
            let spec = KernelSpec::single(family, sigma).map_err(|e| e.to_string())?;
            let got = eval_kernel(&spec, &x, &y).map_err(|e| e.to_string())?;
            // Relative error, with a floor for values that underflow to tiny magnitudes.
            let rel = (got - expect).abs() / expect.abs().max(1e-300);
            worst = worst.max(rel);
            ensure(rel <= 1e-12, || {
                format!(
                    "{} sigma={sigma} r={dist}: got {got}, oracle {expect}",
                    family.name()
                )
            })?;
        }
    }
    // k(x, x) equals the amplitude sum exactly.
    for trial in 0..200 {
        let terms: Vec<KernelTerm> = KernelFamily::ALL
            .iter()
            .map(|&f| KernelTerm::new(f, r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)))
            .take(1 + trial % 5)
            .collect();
        let spec = KernelSpec::new(terms.clone()).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-5.0..5.0)).collect();
        let amp: f64 = terms.iter().map(|t| t.amplitude()).sum();
        let got = eval_kernel(&spec, &x, &x).map_err(|e| e.to_string())?;
        ensure(got == amp, || {
            format!("k(x,x) = {got}, amplitude sum {amp}")
        })?;
    }
    Ok(format!(
        "5000 triples, worst relative error {worst:.2e}; k(x,x) exact"
    ))
}

fn centering_identities() -> Outcome {
    let mut r = rng(2);
    let (mut worst_sum, mut worst_diff) = (0.0f64, 0.0f64);
    for t in 0..100 {
        let n = r.random_range(2..=50);
        let p = r.random_range(1..=6);
        let x = normal_matrix(&mut r, n, p);
        let family = KernelFamily::ALL[t % 5];
        let spec =
            KernelSpec::single(family, r.random_range(0.3..3.0)).map_err(|e| e.to_string())?;
        let k = gram_matrix(&spec, &x);
        let (kc, stats) = center_train(&k).map_err(|e| e.to_string())?;
        let scale = k.abs().max().max(f64::MIN_POSITIVE) * n as f64;
        for i in 0..n {
            let rs = kc.row(i).sum().abs() / scale;
            let cs = kc.column(i).sum().abs() / scale;
            worst_sum = worst_sum.max(rs).max(cs);
        }
        let kt = center_test(&k, &stats).map_err(|e| e.to_string())?;
        worst_diff = worst_diff.max((&kt - &kc).abs().max());
    }
    ensure(worst_sum < 1e-9, || {
        format!("row/column sum {worst_sum:.2e}")
    })?;
    ensure(worst_diff <= 1e-12, || {
        format!("center_test differs by {worst_diff:.2e}")
    })?;
    Ok(format!(
        "100 matrices, max relative row/col sum {worst_sum:.2e}, train/test gap {worst_diff:.2e}"
    ))
}

/// Linear PCR from the eigenvectors of Xcᵀ Xc.
fn oracle_linear_pcr(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: usize,
    x_new: &DMatrix<f64>,
) -> DVector<f64> {
    let n = x.nrows();
    let mu = x.row_mean();
    let xc = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mu[j]);
    let ybar = y.mean();
    let eig = (xc.transpose() * &xc).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let v = DMatrix::from_fn(x.ncols(), h, |r, k| eig.eigenvectors[(r, order[k])]);
    let t = &xc * &v;
    // Scores are orthogonal, so the latent fit is a per-column projection.
    let yc = y.add_scalar(-ybar);
    let c = DVector::from_fn(h, |k, _| t.column(k).dot(&yc) / t.column(k).norm_squared());
    let beta = &v * c;
    DVector::from_fn(x_new.nrows(), |i, _| {
        (0..x.ncols())
            .map(|j| (x_new[(i, j)] - mu[j]) * beta[j])
            .sum::<f64>()
            + ybar
    })
}

fn kpcr_vs_linear_pcr() -> Outcome {
    let mut r = rng(3);
    let spec = KernelSpec::new(vec![KernelTerm::new(KernelFamily::Linear, 0.0, 0.0)])
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for d in 0..50 {
        let p = 6;
        let xall = normal_matrix(&mut r, 15, p);
        let yall = normal_vector(&mut r, 15);
        let x_new = normal_matrix(&mut r, 5, p);
        for n in 5..=15 {
            let x = xall.rows(0, n).into_owned();
            let y = yall.rows(0, n).into_owned();
            for h in 1..=4 {
                let (m, _) = models::fit_kpcr(&x, &y, &spec, h)
                    .map_err(|e| format!("dataset {d}, N={n}, H={h}: {e}"))?;
                let (lin, _) = models::fit_linear_pcr(&x, &y, h)
                    .map_err(|e| format!("dataset {d}, N={n}, H={h}: {e}"))?;
                let a = m.predict(&x_new).map_err(|e| e.to_string())?;
                let b = lin.predict(&x_new).map_err(|e| e.to_string())?;
                let c = oracle_linear_pcr(&x, &y, h, &x_new);
                for i in 0..x_new.nrows() {
                    let tol = 1e-8 * c[i].abs().max(1.0);
                    let err = (a[i] - c[i]).abs().max((b[i] - c[i]).abs());
                    worst = worst.max(err);
                    ensure(err <= tol, || {
                        format!(
                            "dataset {d}, N={n}, H={h}: kpcr {} linear {} oracle {}",
                            a[i], b[i], c[i]
                        )
                    })?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} (dataset, N, H) cases, worst gap {worst:.2e}"
    ))
}

fn loo_vs_refit() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for family in KernelFamily::ALL {
        for n in 4..=12 {
            let x = normal_matrix(&mut r, n, 3);
            let y = normal_vector(&mut r, n);
            let spec =
                KernelSpec::single(family, r.random_range(0.8..2.5)).map_err(|e| e.to_string())?;
            for h in 1..=2 {
                for kind in [FlowModel::Kpcr, FlowModel::Kpls] {
                    let got = kflow::loo_loss(&spec, &x, &y, h, kind).map_err(|e| e.to_string())?;
                    let mut expect = 0.0;
                    for held in 0..n {
                        let idx: Vec<usize> = (0..n).filter(|&i| i != held).collect();
                        let xt = x.select_rows(&idx);
                        let yt = DVector::from_iterator(n - 1, idx.iter().map(|&i| y[i]));
                        let (m, _) = match kind {
                            FlowModel::Kpcr => models::fit_kpcr(&xt, &yt, &spec, h),
                            _ => models::fit_kpls(&xt, &yt, &spec, h),
                        }
                        .map_err(|e| e.to_string())?;
                        let pred = m
                            .predict(&x.rows(held, 1).into_owned())
                            .map_err(|e| e.to_string())?;
                        expect += (y[held] - pred[0]).abs();
                    }
                    let err = (got - expect).abs() / expect.abs().max(1.0);
                    worst = worst.max(err);
                    ensure(err <= 1e-10, || {
                        format!(
                            "{} N={n} H={h} {kind:?}: loss {got}, refit {expect}",
                            family.name()
                        )
                    })?;
                    cases += 1;
                }
            }
        }
    }
    Ok(format!(
        "{cases} cases over 5 families, worst gap {worst:.2e}"
    ))
}

fn norm_ratio_bounds() -> Outcome {
    let mut r = rng(5);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..100 {
        let n = r.random_range(4..=30);
        let x = normal_matrix(&mut r, n, 3);
        let y = normal_vector(&mut r, n);
        let spec = KernelSpec::single(KernelFamily::ALL[t % 5], r.random_range(0.3..3.0))
            .map_err(|e| e.to_string())?;
        let count = r.random_range(1..=5);
        let size = r.random_range(2..=n);
        let subs: Vec<Vec<usize>> = (0..count)
            .map(|_| {
                let mut idx = rand::seq::index::sample(&mut r, n, size).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect();
        let rho = kflow::norm_ratio_loss(&spec, &x, &y, &subs, FlowModel::GprWeights, 1, 1e-6)
            .map_err(|e| e.to_string())?;
        lo = lo.min(rho);
        hi = hi.max(rho);
        ensure((0.0..=1.0).contains(&rho), || {
            format!("draw {t}: rho = {rho}")
        })?;
        let full = vec![(0..n).collect::<Vec<_>>()];
        let rho0 = kflow::norm_ratio_loss(&spec, &x, &y, &full, FlowModel::GprWeights, 1, 1e-6)
            .map_err(|e| e.to_string())?;
        ensure(rho0 == 0.0, || {
            format!("draw {t}: full sub-batch gives {rho0}")
        })?;
    }
    Ok(format!(
        "100 draws, rho in [{lo:.4}, {hi:.4}]; full sub-batch gives 0"
    ))
}

fn gradient_consistency() -> Outcome {
    let smooth: Vec<(&str, Loss)> = {
        let ds = data::synth_nonlinear(24, 2, 0.01, 6).map_err(|e| e.to_string())?;
        let spec = KernelSpec::new(vec![
            KernelTerm::new(KernelFamily::Gaussian, 0.3, 0.0),
            KernelTerm::new(KernelFamily::Matern52, 0.6, -0.5),
        ])
        .map_err(|e| e.to_string())?;
        let subs = vec![(0..12).collect::<Vec<usize>>(), (6..18).collect()];
        vec![
            (
                "sin-exp",
                Box::new(|t: &[f64]| Ok(t[0].sin() * t[1].exp() + t[0].powi(3))),
            ),
            (
                "norm-ratio",
                Box::new(move |t: &[f64]| {
                    kflow::norm_ratio_loss(
                        &spec.with_params(t)?,
                        &ds.x,
                        &ds.y,
                        &subs,
                        FlowModel::GprWeights,
                        1,
                        1e-3,
                    )
                }),
            ),
        ]
    };
    let mut ratios = Vec::new();
    for (name, f) in &smooth {
        let theta: Vec<f64> = match *name {
            "sin-exp" => vec![0.7, -0.3],
            _ => vec![0.3, 0.0, 0.6, -0.5],
        };
        let h = 0.1;
        let g1 = kflow::fd_gradient(f, &theta, h).map_err(|e| e.to_string())?;
        let g2 = kflow::fd_gradient(f, &theta, h / 2.0).map_err(|e| e.to_string())?;
        let g3 = kflow::fd_gradient(f, &theta, h / 4.0).map_err(|e| e.to_string())?;
        for j in 0..theta.len() {
            let d1 = (g1[j] - g2[j]).abs();
            let d2 = (g2[j] - g3[j]).abs();
            if d2 < 1e-9 {
                // Coordinate too flat to measure an order.
                continue;
            }
            let ratio = d1 / d2;
            ratios.push(ratio);
            ensure((3.0..=5.0).contains(&ratio), || {
                format!("{name} coordinate {j}: ratio {ratio}")
            })?;
        }
    }
    ensure(!ratios.is_empty(), || "no measurable coordinate".into())?;

    let theta = [0.5, -1.25, 3.0, 1e-3];
    let g = kflow::fd_gradient(|t: &[f64]| Ok(t.iter().map(|v| v * v).sum()), &theta, 1e-4)
        .map_err(|e| e.to_string())?;
    let err = theta
        .iter()
        .zip(&g)
        .map(|(t, g)| (g - 2.0 * t).abs())
        .fold(0.0, f64::max);
    ensure(err <= 1e-6, || format!("quadratic gradient off by {err:e}"))?;
    let (rmin, rmax) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    Ok(format!(
        "{} ratios in [{rmin:.3}, {rmax:.3}]; quadratic error {err:.1e}",
        ratios.len()
    ))
}

const RECOVERY_SEED: u64 = 1;

fn width_recovery() -> Outcome {
    let ds = data::synth_nonlinear(120, 2, 0.01, RECOVERY_SEED).map_err(|e| e.to_string())?;
    let h = 6;
    // Grid scan of the full-data loss over log-width.
    let grid: Vec<f64> = (0..=30).map(|k| (-1.2 + 0.08 * k as f64).exp()).collect();
    let mut best = (f64::INFINITY, 0.0);
    for &s in &grid {
        let spec = KernelSpec::single(KernelFamily::Gaussian, s).map_err(|e| e.to_string())?;
        let l =
            kflow::loo_loss(&spec, &ds.x, &ds.y, h, FlowModel::Kpcr).map_err(|e| e.to_string())?;
        if l < best.0 {
            best = (l, s);
        }
    }
    let grid_min = best.1;
    ensure((1.4..=2.9).contains(&grid_min), || {
        format!(
            "grid-scan minimum at width {grid_min:.3}, outside [1.4, 2.9]; optimizer not trusted"
        )
    })?;

    let config = KFConfig {
        iterations: 300,
        batch_size: 32,
        n_components: h,
        learning_rate: 0.05,
        rng_seed: RECOVERY_SEED,
        learn_amplitudes: false,
        ..Default::default()
    };
    let spec0 = KernelSpec::single(KernelFamily::Gaussian, 0.3).map_err(|e| e.to_string())?;
    let (spec, trace) =
        kflow::optimize(&ds.x, &ds.y, &spec0, &config).map_err(|e| e.to_string())?;
    let width = spec.terms()[0].width();
    ensure((1.4..=2.9).contains(&width), || {
        format!("learned width {width:.3}")
    })?;
    let best_so_far = trace.best_so_far();
    ensure(best_so_far.windows(2).all(|w| w[1] <= w[0]), || {
        "best-so-far loss increased".into()
    })?;
    let (first, last) = (best_so_far[0], *best_so_far.last().unwrap());
    ensure(last < first, || {
        format!("best-so-far loss never improved from {first}")
    })?;
    Ok(format!(
        "grid minimum {grid_min:.3}, learned width {width:.3} from 0.3; best-so-far loss {first:.3} -> {last:.3}"
    ))
}

fn loss_swap() -> Outcome {
    let h = 6;
    let (mut base_sum, mut loo_sum, mut nr_sum) = (0.0, 0.0, 0.0);
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let ds = data::synth_nonlinear(160, 2, 0.01, 100 + seed).map_err(|e| e.to_string())?;
        let split = SplitSpec {
            test_fraction: 0.25,
            seed,
            strategy: SplitStrategy::Random,
        };
        let (train, test) = data::split(&ds, &split).map_err(|e| e.to_string())?;
        let test_r2 = |s: &KernelSpec| -> Result<f64, String> {
            let (m, _) = models::fit_kpcr(&train.x, &train.y, s, h).map_err(|e| e.to_string())?;
            let p = m.predict(&test.x).map_err(|e| e.to_string())?;
            models::r2(test.y.as_slice(), p.as_slice()).map_err(|e| e.to_string())
        };
        let spec0 = KernelSpec::single(KernelFamily::Gaussian, 1.0).map_err(|e| e.to_string())?;
        let common = KFConfig {
            iterations: 200,
            batch_size: 32,
            n_components: h,
            learning_rate: 0.05,
            rng_seed: seed,
            learn_amplitudes: false,
            ..Default::default()
        };
        let (s_loo, _) =
            kflow::optimize(&train.x, &train.y, &spec0, &common).map_err(|e| e.to_string())?;
        let nr = KFConfig {
            loss: LossKind::NormRatio,
            model_kind: FlowModel::GprWeights,
            jitter: 1e-2,
            ..common
        };
        let (s_nr, _) =
            kflow::optimize(&train.x, &train.y, &spec0, &nr).map_err(|e| e.to_string())?;
        let (b, l, n) = (test_r2(&spec0)?, test_r2(&s_loo)?, test_r2(&s_nr)?);
        base_sum += b;
        loo_sum += l;
        nr_sum += n;
        lines.push(format!("seed {seed}: {b:.4}/{l:.4}/{n:.4}"));
    }
    let (b, l, n) = (base_sum / 5.0, loo_sum / 5.0, nr_sum / 5.0);
    let summary = format!(
        "mean test R2 baseline {b:.4}, LOO {l:.4}, norm-ratio {n:.4} ({})",
        lines.join("; ")
    );
    ensure(l >= n && n > b && l > b, || summary.clone())?;
    Ok(summary)
}

fn in_process_pipeline(threads: usize) -> Result<(String, Vec<f64>), String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let ds = data::synth_nonlinear(80, 3, 0.05, 11).map_err(|e| e.to_string())?;
        let spec0 = KernelSpec::new(vec![
            KernelTerm::new(KernelFamily::Gaussian, 0.0, 0.0),
            KernelTerm::new(KernelFamily::Matern32, 0.5, -1.0),
        ])
        .map_err(|e| e.to_string())?;
        let mut traces = String::new();
        let mut preds = Vec::new();
        for (loss, model_kind) in [
            (LossKind::LooPredictionError, FlowModel::Kpls),
            (LossKind::NormRatio, FlowModel::GprWeights),
        ] {
            let config = KFConfig {
                loss,
                model_kind,
                iterations: 15,
                batch_size: 24,
                n_components: 3,
                rng_seed: 99,
                jitter: 1e-3,
                momentum: kflow::Momentum::Nesterov(0.5),
                ..Default::default()
            };
            let (spec, trace) =
                kflow::optimize(&ds.x, &ds.y, &spec0, &config).map_err(|e| e.to_string())?;
            traces.push_str(&trace.to_csv());
            let (m, _) = models::fit_kpls(&ds.x, &ds.y, &spec, 3).map_err(|e| e.to_string())?;
            preds.extend(m.predict(&ds.x).map_err(|e| e.to_string())?.iter());
        }
        Ok((traces, preds))
    })
}

fn run_cli(dir: &Path, threads: usize, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_kflows"))
        .current_dir(dir)
        .args(args)
        .args(["--threads", &threads.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!(
            "kflows {args:?} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        )
    })
}

fn cli_pipeline(threads: usize) -> Result<Vec<Vec<u8>>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    run_cli(
        d,
        threads,
        &[
            "synth",
            "--kind",
            "nonlinear",
            "--n",
            "60",
            "--p",
            "3",
            "--noise",
            "0.05",
            "--seed",
            "4",
            "--out",
            "data.csv",
        ],
    )?;
    std::fs::write(
        d.join("run.json"),
        r#"{
  "data": "data.csv",
  "response_column": "y",
  "split": {"test_fraction": 0.25, "seed": 3},
  "model": "kpcr",
  "n_components": 4,
  "kernel": [{"family": "gaussian", "log_width": 0.0}, {"family": "cauchy", "log_width": 0.5}],
  "kflow": {"iterations": 12, "batch_size": 20, "learning_rate": 0.05, "rng_seed": 8}
}"#,
    )
    .map_err(|e| e.to_string())?;
    run_cli(
        d,
        threads,
        &["optimize", "--config", "run.json", "--out", "opt"],
    )?;
    run_cli(
        d,
        threads,
        &[
            "fit",
            "--config",
            "run.json",
            "--spec",
            "opt/spec.json",
            "--out",
            "fit",
        ],
    )?;
    run_cli(
        d,
        threads,
        &[
            "predict",
            "--model",
            "fit/model.json",
            "--data",
            "fit/test.csv",
            "--out",
            "pred.csv",
        ],
    )?;
    let files = [
        "opt/trace.csv",
        "opt/spec.json",
        "fit/model.json",
        "fit/train_predictions.csv",
        "pred.csv",
    ];
    files
        .iter()
        .map(|f| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn determinism() -> Outcome {
    let reference = in_process_pipeline(1)?;
    for threads in [1, 2, 4, 7] {
        let again = in_process_pipeline(threads)?;
        ensure(again.0 == reference.0, || {
            format!("trace differs with {threads} threads")
        })?;
        let same = again
            .1
            .iter()
            .zip(&reference.1)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || {
            format!("predictions differ with {threads} threads")
        })?;
    }
    let cli_ref = cli_pipeline(1)?;
    for threads in [1, 3, 8] {
        let again = cli_pipeline(threads)?;
        ensure(again == cli_ref, || {
            format!("CLI outputs differ with --threads {threads}")
        })?;
    }
    Ok("in-process traces and predictions bit-identical at 1/2/4/7 threads; CLI trace, spec, model and prediction files byte-identical at 1/3/8 threads".into())
}
