//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing the harness capture) before asserting.

use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pnp_unmix::denoise::{Denoiser, DenoiserSpec};
use pnp_unmix::io;
use pnp_unmix::model::{
    add_noise_snr, measured_snr_db, psnr, psnr_parts, reconstruction_error, rmse,
};
use pnp_unmix::pnp::{nlm_low_snr_preset, reconstruct, PnpConfig, Unmixer};
use pnp_unmix::qp::{fcls, solve_simplex_qp, QpOptions, QpProblem};
use pnp_unmix::synth::{make_scene, Scene, SceneSpec};
use pnp_unmix::{unfold, HsiCube, Mode, PixelMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] criterion {id:>2} {verdict}: {name} ({detail})\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {name} ({detail})");
}

fn scene(
    rows: usize,
    cols: usize,
    endmembers: usize,
    bands: usize,
    snr_db: f64,
    seed: u64,
) -> Scene {
    let spec = SceneSpec {
        rows,
        cols,
        endmembers,
        bands,
        snr_db,
        seed,
        ..SceneSpec::default()
    };
    make_scene(&spec).expect("scene")
}

#[test]
fn criterion_01_fcls_exact_recovery() {
    let start = Instant::now();
    let s = scene(32, 32, 4, 64, f64::INFINITY, 11);
    let out = fcls(&s.endmembers, &unfold(&s.noisy), QpOptions::default()).unwrap();
    let err = rmse(&s.truth, &out.abundances).unwrap();
    let elapsed = start.elapsed();
    report(
        1,
        "FCLS exact recovery on a noiseless 32x32 scene",
        err < 1e-6 && elapsed < Duration::from_secs(5),
        format!("rmse {err:.3e} < 1e-6, {:.2}s < 5s", elapsed.as_secs_f64()),
    );
}

fn grid_minimum(q: &DMatrix<f64>, f: &DVector<f64>, step: f64) -> f64 {
    let n = (1.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let a = DVector::from_vec(vec![
                i as f64 * step,
                j as f64 * step,
                (n - i - j) as f64 * step,
            ]);
            best = best.min(0.5 * a.dot(&(q * &a)) + f.dot(&a));
        }
    }
    best
}

#[test]
fn criterion_02_qp_matches_grid_search() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for _ in 0..100 {
        let b = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let q = b.transpose() * &b;
        let f = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let sol = solve_simplex_qp(
            &QpProblem {
                q: q.clone(),
                f: f.clone(),
            },
            QpOptions::default(),
        )
        .unwrap();
        let gap = sol.objective - grid_minimum(&q, &f, 1e-3);
        worst = worst.max(gap);
        if gap > 1e-6 {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        2,
        "simplex QP never worse than a 1e-3 grid search",
        failures == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{failures}/100 above grid + 1e-6, worst gap {worst:.2e}, {:.2}s < 30s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_identity_prior_is_fcls() {
    let start = Instant::now();
    let s = scene(16, 16, 3, 64, 20.0, 3);
    let y = unfold(&s.noisy);
    let reference = fcls(&s.endmembers, &y, QpOptions::default())
        .unwrap()
        .abundances;
    let mut gaps = Vec::new();
    for mode in [Mode::ProH, Mode::ProA] {
        // With the identity prior each A-step is a proximal step towards FCLS,
        // damped by rho; a large rho0 (the Pro-A default is 5, growing by 1.1)
        // needs far more than 20 steps to close the gap.
        let mut cfg = PnpConfig::new(mode)
            .with_denoiser(DenoiserSpec::Identity)
            .with_penalty(0.05, 1e-4);
        cfg.stop_tol = 0.0;
        let out = Unmixer::new(&cfg).run(&y, &s.endmembers).unwrap();
        assert_eq!(out.state.iter, 20);
        gaps.push(rmse(&reference, &out.abundances).unwrap());
    }
    let elapsed = start.elapsed();
    report(
        3,
        "identity prior reproduces FCLS after 20 iterations",
        gaps.iter().all(|&g| g < 1e-6) && elapsed < Duration::from_secs(10),
        format!(
            "rmse to FCLS pro-h {:.2e}, pro-a {:.2e}, {:.2}s < 10s",
            gaps[0],
            gaps[1],
            elapsed.as_secs_f64()
        ),
    );
}

/// Records every σ handed to the wrapped denoiser.
struct Recording {
    inner: DenoiserSpec,
    sigmas: Mutex<Vec<f64>>,
}

impl Denoiser for Recording {
    fn denoise(&self, volume: &HsiCube, sigma: f64) -> HsiCube {
        self.sigmas.lock().unwrap().push(sigma);
        self.inner.denoise(volume, sigma)
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

struct NlmRun {
    mode: Mode,
    snr_db: f64,
    cfg: PnpConfig,
    fcls_rmse: f64,
    fcls_psnr: f64,
    rmse: f64,
    psnr: f64,
    rmse_trace: Vec<f64>,
    sigmas: Vec<f64>,
    history: Vec<pnp_unmix::pnp::IterationRecord>,
}

struct NlmSuite {
    runs: Vec<NlmRun>,
    elapsed: Duration,
}

const NLM_SCENE_SEED: u64 = 0;

fn nlm_suite() -> &'static NlmSuite {
    static SUITE: OnceLock<NlmSuite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let start = Instant::now();
        let mut runs = Vec::new();
        for snr_db in [5.0, 10.0] {
            let s = scene(64, 64, 4, 64, snr_db, NLM_SCENE_SEED);
            let y = unfold(&s.noisy);
            let clean = unfold(&s.clean);
            let base = fcls(&s.endmembers, &y, QpOptions::default())
                .unwrap()
                .abundances;
            let fcls_rmse = rmse(&s.truth, &base).unwrap();
            let fcls_psnr = psnr(&reconstruct(&s.endmembers, &base).unwrap(), &clean).unwrap();
            for mode in [Mode::ProH, Mode::ProA] {
                let (rho0, lambda) = nlm_low_snr_preset(mode, snr_db).unwrap();
                let mut cfg = PnpConfig::new(mode)
                    .with_denoiser(DenoiserSpec::nlm())
                    .with_penalty(rho0, lambda);
                cfg.stop_tol = 0.0;
                let recorder = Arc::new(Recording {
                    inner: cfg.denoiser.clone(),
                    sigmas: Mutex::new(Vec::new()),
                });
                let out = Unmixer::new(&cfg)
                    .with_denoiser(recorder.clone())
                    .with_truth(&s.truth)
                    .run(&y, &s.endmembers)
                    .unwrap();
                let estimate_psnr = psnr(
                    &reconstruct(&s.endmembers, &out.abundances).unwrap(),
                    &clean,
                )
                .unwrap();
                runs.push(NlmRun {
                    mode,
                    snr_db,
                    fcls_rmse,
                    fcls_psnr,
                    rmse: rmse(&s.truth, &out.abundances).unwrap(),
                    psnr: estimate_psnr,
                    rmse_trace: out.state.rmse_trace().unwrap(),
                    sigmas: recorder.sigmas.lock().unwrap().clone(),
                    history: out.state.history.clone(),
                    cfg,
                });
            }
        }
        NlmSuite {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_04_nlm_beats_fcls_rmse() {
    let suite = nlm_suite();
    let mut ok = suite.elapsed < Duration::from_secs(180);
    let mut parts = Vec::new();
    for r in &suite.runs {
        let ratio = r.rmse / r.fcls_rmse;
        ok &= ratio <= 0.9;
        parts.push(format!(
            "{}@{}dB {:.4}/{:.4}={:.3}",
            r.mode, r.snr_db, r.rmse, r.fcls_rmse, ratio
        ));
    }
    report(
        4,
        "NLM prior at least 10% below FCLS RMSE at 5 and 10 dB",
        ok,
        format!(
            "{}, {:.1}s < 180s",
            parts.join(", "),
            suite.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_nlm_beats_fcls_psnr() {
    let suite = nlm_suite();
    let mut ok = true;
    let mut parts = Vec::new();
    for r in suite.runs.iter().filter(|r| r.snr_db == 5.0) {
        let gain = r.psnr - r.fcls_psnr;
        ok &= gain >= 0.5;
        parts.push(format!(
            "{} {:.3} vs {:.3} dB (+{gain:.2})",
            r.mode, r.psnr, r.fcls_psnr
        ));
    }
    report(
        5,
        "reconstruction PSNR at least 0.5 dB above FCLS at 5 dB",
        ok,
        parts.join(", "),
    );
}

#[test]
fn criterion_06_schedule_and_feasibility() {
    let suite = nlm_suite();
    let mut ok = true;
    let mut worst_sum: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    let mut worst_sigma: f64 = 0.0;
    for r in &suite.runs {
        let cfg = &r.cfg;
        ok &= r.history.len() == cfg.max_iter && r.sigmas.len() == cfg.max_iter;
        let mut rho = cfg.rho0;
        for (k, rec) in r.history.iter().enumerate() {
            ok &= rec.rho == cfg.rho0 * cfg.alpha.powi(k as i32) && rec.rho == cfg.rho_at(k);
            // The running product and the closed form agree to rounding.
            ok &= (rec.rho - rho).abs() <= 1e-12 * rho;
            rho *= cfg.alpha;
            let expected = (cfg.lambda / rec.rho).sqrt();
            worst_sigma = worst_sigma.max((r.sigmas[k] - expected).abs());
            ok &= r.sigmas[k] == rec.sigma && rec.sigma == expected;
            if k > 0 {
                ok &= r.sigmas[k] <= r.sigmas[k - 1];
            }
            worst_sum = worst_sum.max(rec.max_sum_deviation);
            min_entry = min_entry.min(rec.min_abundance);
        }
    }
    ok &= worst_sum <= 1e-8 && min_entry >= 0.0;
    report(
        6,
        "rho schedule, sigma = sqrt(lambda/rho) and simplex feasibility of every iterate",
        ok,
        format!("max |sum-1| {worst_sum:.1e}, min entry {min_entry:.1e}, max sigma error {worst_sigma:.1e}"),
    );
}

#[test]
fn criterion_07_early_progress() {
    let suite = nlm_suite();
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &suite.runs {
        let ratio = r.rmse_trace[2] / r.rmse_trace[19];
        ok &= ratio <= 1.10;
        parts.push(format!("{}@{}dB {ratio:.3}", r.mode, r.snr_db));
    }
    report(
        7,
        "RMSE after 3 iterations within 10% of RMSE after 20",
        ok,
        parts.join(", "),
    );
}

#[test]
fn criterion_08_noise_calibration() {
    let s = scene(64, 64, 4, 50, f64::INFINITY, 8);
    let clean = unfold(&s.clean);
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, target) in [5.0, 10.0, 20.0, 30.0].into_iter().enumerate() {
        let noisy = add_noise_snr(&clean, target, 100 + i as u64).unwrap();
        let got = measured_snr_db(clean.data(), noisy.data());
        ok &= (got - target).abs() <= 0.1;
        parts.push(format!("{target}->{got:.3}"));
    }
    report(
        8,
        "empirical SNR within 0.1 dB of the request",
        ok,
        parts.join(", "),
    );
}

#[test]
fn criterion_09_metric_hand_cases() {
    let ones = PixelMatrix::new(2, 1, 2, vec![1.0; 4]).unwrap();
    let zeros = PixelMatrix::zeros(2, 1, 2);
    let r = rmse(&ones, &zeros).unwrap();

    let y_ref = PixelMatrix::new(1, 1, 1, vec![1.0]).unwrap();
    let y_hat = PixelMatrix::new(1, 1, 1, vec![2.0]).unwrap();
    let p = psnr_parts(&y_hat, &y_ref).unwrap();

    let y = PixelMatrix::new(2, 1, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let y_re = PixelMatrix::new(2, 1, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    let re = reconstruction_error(&y, &y_re).unwrap();

    let ok = r == 1.0 && (p.db - 6.020599913279624).abs() < 1e-12 && re == 0.5;
    report(
        9,
        "metric hand cases",
        ok,
        format!("rmse {r}, psnr {:.4} dB, re {re}", p.db),
    );
}

fn run_pipeline(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let spec = SceneSpec {
        rows: 24,
        cols: 20,
        endmembers: 3,
        bands: 32,
        snr_db: 15.0,
        seed: 77,
        ..SceneSpec::default()
    };
    let s = make_scene(&spec).unwrap();
    io::write_cube(&dir.join("noisy.cube"), &s.noisy).unwrap();
    io::write_endmembers(&dir.join("endmembers.csv"), &s.endmembers).unwrap();
    io::write_scene_spec(&dir.join("scene.cfg"), &spec).unwrap();
    let y = unfold(&io::read_cube(&dir.join("noisy.cube")).unwrap());
    let m = io::read_endmembers(&dir.join("endmembers.csv")).unwrap();
    let cfg = PnpConfig::new(Mode::ProA)
        .with_denoiser(DenoiserSpec::nlm())
        .with_penalty(1.0, 0.0225);
    let out = Unmixer::new(&cfg).with_truth(&s.truth).run(&y, &m).unwrap();
    io::write_abundances(&dir.join("abundances.cube"), &out.abundances).unwrap();
    io::write_trace(&dir.join("trace.csv"), &out.state.history).unwrap();
    for j in 0..3 {
        io::write_map(
            &dir.join(format!("map_{j}.pgm")),
            &out.abundances.channel_plane(j),
        )
        .unwrap();
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            !p.file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("trace")
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    // Timings differ between runs; compare the trace without its last two columns.
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    let stable: String = trace
        .lines()
        .map(|l| l.rsplitn(3, ',').last().unwrap().to_string() + "\n")
        .collect();
    files.push(("trace.csv".into(), stable.into_bytes()));
    files.sort();
    files
}

#[test]
fn criterion_10_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut checks = Vec::new();

    // Cube: values survive at f32 precision; a second write is byte-identical.
    let s = scene(12, 9, 3, 10, 20.0, 5);
    let cube_path = dir.path().join("a.cube");
    io::write_cube(&cube_path, &s.noisy).unwrap();
    let back = io::read_cube(&cube_path).unwrap();
    let cube_ok = back.dims() == s.noisy.dims()
        && back
            .data()
            .iter()
            .zip(s.noisy.data())
            .all(|(b, o)| *b == (*o as f32) as f64);
    io::write_cube(&dir.path().join("b.cube"), &back).unwrap();
    let rewrite_ok =
        std::fs::read(&cube_path).unwrap() == std::fs::read(dir.path().join("b.cube")).unwrap();
    checks.push(("cube", cube_ok && rewrite_ok));

    // Abundances: stay on the simplex after the f32 trip.
    let ab_path = dir.path().join("ab.cube");
    io::write_abundances(&ab_path, &s.truth).unwrap();
    let ab = io::read_abundances(&ab_path).unwrap();
    let (sum_dev, min_entry) = ab.simplex_violation();
    checks.push((
        "abundances",
        sum_dev <= 1e-8 && min_entry >= 0.0 && rmse(&s.truth, &ab).unwrap() < 1e-7,
    ));

    // Endmembers: exact.
    let em_path = dir.path().join("em.csv");
    io::write_endmembers(&em_path, &s.endmembers).unwrap();
    checks.push((
        "endmembers",
        io::read_endmembers(&em_path).unwrap() == s.endmembers,
    ));

    // Graymap: dimensions and quantisation.
    let plane = s.truth.channel_plane(0);
    let pgm_path = dir.path().join("m.pgm");
    io::write_map(&pgm_path, &plane).unwrap();
    let (w, h, px) = io::read_pgm(&pgm_path).unwrap();
    let pgm_ok = w == plane.cols()
        && h == plane.rows()
        && (0..h).all(|m| {
            (0..w).all(|k| px[m * w + k] == (255.0 * plane.get(m, k) + 0.5).floor() as u8)
        });
    checks.push(("graymap", pgm_ok));

    // Same-seed pipelines produce identical files.
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    checks.push((
        "same-seed runs",
        run_pipeline(d1.path()) == run_pipeline(d2.path()),
    ));

    let ok = checks.iter().all(|(_, c)| *c);
    let detail: Vec<String> = checks
        .iter()
        .map(|(n, c)| format!("{n} {}", if *c { "ok" } else { "MISMATCH" }))
        .collect();
    report(
        10,
        "file formats round-trip and same-seed runs are byte-identical",
        ok,
        detail.join(", "),
    );
}
