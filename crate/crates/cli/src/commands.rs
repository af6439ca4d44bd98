use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pnp_unmix::denoise::{Denoiser, DenoiserSpec};
use pnp_unmix::io;
use pnp_unmix::model::MetricsReport;
use pnp_unmix::pnp::{reconstruct, Unmixer};
use pnp_unmix::qp::fcls;
use pnp_unmix::synth::make_scene;
use pnp_unmix::{fold, unfold, AbundanceMatrix, Error, PixelMatrix};

use crate::{at, DenoiseArgs, DenoiserParams, EvalArgs, Failure, SynthArgs, UnmixArgs};

type Kv = BTreeMap<String, String>;

/// Loads the config file (if any) and lays the given flags over it.
fn merge(
    config: Option<&Path>,
    flags: Vec<(&str, &Option<String>)>,
) -> Result<(Kv, PathBuf), Failure> {
    let (mut kv, origin) = match config {
        Some(p) => (
            io::read_key_values(p).map_err(at("config"))?,
            p.to_path_buf(),
        ),
        None => (Kv::new(), PathBuf::from("<flags>")),
    };
    for (key, value) in flags {
        if let Some(v) = value {
            kv.insert(key.to_string(), v.clone());
        }
    }
    Ok((kv, origin))
}

fn denoiser_flags(p: &DenoiserParams) -> Vec<(&'static str, &Option<String>)> {
    vec![
        ("kernel-sigma", &p.kernel_sigma),
        ("patch-size", &p.patch_size),
        ("search-size", &p.search_size),
        ("h-factor", &p.h_factor),
        ("tv-iters", &p.tv_iters),
        ("tv-weight", &p.tv_weight),
    ]
}

fn required(kv: &Kv, key: &str, origin: &Path) -> Result<PathBuf, Failure> {
    kv.get(key).map(PathBuf::from).ok_or_else(|| {
        at("config")(Error::Parse {
            path: origin.to_path_buf(),
            message: format!("missing {key}"),
        })
    })
}

fn flag(kv: &Kv, key: &str, default: bool, origin: &Path) -> Result<bool, Failure> {
    match kv.get(key).map(|s| s.to_ascii_lowercase()) {
        None => Ok(default),
        Some(v) if ["true", "yes", "1", "on"].contains(&v.as_str()) => Ok(true),
        Some(v) if ["false", "no", "0", "off"].contains(&v.as_str()) => Ok(false),
        Some(v) => Err(at("config")(Error::Parse {
            path: origin.to_path_buf(),
            message: format!("bad boolean {v:?} for {key}"),
        })),
    }
}

fn number(kv: &Kv, key: &str, origin: &Path) -> Result<Option<f64>, Failure> {
    kv.get(key)
        .map(|v| match v.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            s => s.parse().map_err(|_| {
                at("config")(Error::Parse {
                    path: origin.to_path_buf(),
                    message: format!("bad number {v:?} for {key}"),
                })
            }),
        })
        .transpose()
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let (kv, origin) = merge(
        a.config.as_deref(),
        vec![
            ("out", &a.out),
            ("rows", &a.rows),
            ("cols", &a.cols),
            ("endmembers", &a.endmembers),
            ("bands", &a.bands),
            ("smoothness", &a.smoothness),
            ("pure-fraction", &a.pure_fraction),
            ("snr", &a.snr),
            ("seed", &a.seed),
        ],
    )?;
    let out = required(&kv, "out", &origin)?;
    let spec = io::scene_spec_from_kv(&kv, &origin).map_err(at("config"))?;
    let scene = make_scene(&spec).map_err(at("synthesis"))?;
    io::write_cube(&out.join("noisy.cube"), &scene.noisy).map_err(at("output"))?;
    io::write_cube(&out.join("clean.cube"), &scene.clean).map_err(at("output"))?;
    io::write_abundances(&out.join("truth.cube"), &scene.truth).map_err(at("output"))?;
    io::write_endmembers(&out.join("endmembers.csv"), &scene.endmembers).map_err(at("output"))?;
    io::write_scene_spec(&out.join("scene.cfg"), &spec).map_err(at("output"))?;
    log::info!("wrote scene to {}", out.display());
    Ok(())
}

fn check_pixels(what: &str, m: &PixelMatrix, y: &PixelMatrix) -> Result<(), Failure> {
    if m.rows() != y.rows() || m.cols() != y.cols() {
        return Err(at("input")(Error::Shape(format!(
            "{what} is {}x{}, cube is {}x{}",
            m.rows(),
            m.cols(),
            y.rows(),
            y.cols()
        ))));
    }
    Ok(())
}

fn map_file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("map_{index:02}_{clean}.pgm")
}

pub fn unmix(a: UnmixArgs) -> Result<(), Failure> {
    let mut flags = vec![
        ("cube", &a.cube),
        ("endmembers", &a.endmembers),
        ("truth", &a.truth),
        ("clean", &a.clean),
        ("out", &a.out),
        ("method", &a.method),
        ("mode", &a.mode),
        ("denoiser", &a.denoiser),
        ("preset", &a.preset),
        ("snr", &a.snr),
        ("rho", &a.rho),
        ("lambda", &a.lambda),
        ("alpha", &a.alpha),
        ("iters", &a.iters),
        ("stop-tol", &a.stop_tol),
        ("qp-tol", &a.qp_tol),
        ("qp-max-iter", &a.qp_max_iter),
        ("seed", &a.seed),
        ("maps", &a.maps),
        ("metrics", &a.metrics),
        ("trace", &a.trace),
    ];
    flags.extend(denoiser_flags(&a.denoiser_params));
    let (kv, origin) = merge(a.config.as_deref(), flags)?;

    let out = required(&kv, "out", &origin)?;
    let method = kv
        .get("method")
        .map(String::as_str)
        .unwrap_or("pnp")
        .to_string();
    if method != "pnp" && method != "fcls" {
        return Err(at("config")(Error::Parse {
            path: origin,
            message: format!("unknown method {method:?} (pnp, fcls)"),
        }));
    }
    let cfg = io::pnp_config_from_kv(&kv, &origin).map_err(at("config"))?;
    let (emit_maps, emit_metrics, emit_trace) = (
        flag(&kv, "maps", true, &origin)?,
        flag(&kv, "metrics", true, &origin)?,
        flag(&kv, "trace", true, &origin)?,
    );
    let snr_label = number(&kv, "snr", &origin)?;

    // Every input is read and checked before any computation.
    let y = unfold(&io::read_cube(&required(&kv, "cube", &origin)?).map_err(at("input"))?);
    let m = io::read_endmembers(&required(&kv, "endmembers", &origin)?).map_err(at("input"))?;
    if m.bands() != y.channels() {
        return Err(at("input")(Error::Shape(format!(
            "cube has {} bands, endmembers have {}",
            y.channels(),
            m.bands()
        ))));
    }
    let truth = kv
        .get("truth")
        .map(|p| io::read_abundances(Path::new(p)))
        .transpose()
        .map_err(at("input"))?;
    let clean = kv
        .get("clean")
        .map(|p| io::read_cube(Path::new(p)).map(|c| unfold(&c)))
        .transpose()
        .map_err(at("input"))?;
    if let Some(t) = &truth {
        check_pixels("truth", t, &y)?;
        if t.channels() != m.endmembers() {
            return Err(at("input")(Error::Shape(format!(
                "truth has {} endmembers, endmember file has {}",
                t.channels(),
                m.endmembers()
            ))));
        }
    }
    if let Some(c) = &clean {
        if !c.same_shape(&y) {
            return Err(at("input")(Error::Shape(format!(
                "clean cube is {}, cube is {}",
                c.shape_str(),
                y.shape_str()
            ))));
        }
    }

    let (estimate, history, label): (AbundanceMatrix, _, String) = if method == "fcls" {
        let r = fcls(&m, &y, cfg.qp).map_err(at("abundance estimation"))?;
        (r.abundances, None, "fcls".into())
    } else {
        let mut runner = Unmixer::new(&cfg);
        if let Some(t) = &truth {
            runner = runner.with_truth(t);
        }
        let r = runner.run(&y, &m).map_err(at("unmixing"))?;
        let label = format!("{}-{}", cfg.mode, cfg.denoiser.kind());
        (r.abundances, Some(r.state.history), label)
    };

    io::write_abundances(&out.join("abundances.cube"), &estimate).map_err(at("output"))?;
    let y_hat = reconstruct(&m, &estimate).map_err(at("reconstruction"))?;
    io::write_cube(&out.join("reconstruction.cube"), &fold(&y_hat)).map_err(at("output"))?;
    let mut resolved = io::pnp_config_to_kv(&cfg);
    resolved.insert("method".into(), method.clone());
    std::fs::write(
        out.join("run.cfg"),
        format!("# resolved run\n{}", io::format_key_values(&resolved)),
    )
    .map_err(|e| {
        at("output")(Error::Io {
            path: out.join("run.cfg"),
            source: e,
        })
    })?;
    if emit_metrics {
        let mut report =
            MetricsReport::compute(&m, &estimate, &y, truth.as_deref(), clean.as_ref())
                .map_err(at("evaluation"))?;
        report.method = Some(label);
        report.snr_db = snr_label;
        report.per_iteration_rmse = history
            .as_ref()
            .filter(|_| truth.is_some())
            .map(|h| h.iter().filter_map(|r| r.rmse).collect());
        io::write_metrics(&out.join("metrics.json"), &report).map_err(at("output"))?;
    }
    if emit_trace {
        if let Some(h) = &history {
            io::write_trace(&out.join("trace.csv"), h).map_err(at("output"))?;
        }
    }
    if emit_maps {
        for (j, name) in m.names().iter().enumerate() {
            io::write_map(
                &out.join(map_file_name(j, name)),
                &estimate.channel_plane(j),
            )
            .map_err(at("output"))?;
        }
    }
    log::info!("wrote results to {}", out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let (kv, origin) = merge(
        a.config.as_deref(),
        vec![
            ("estimate", &a.estimate),
            ("endmembers", &a.endmembers),
            ("cube", &a.cube),
            ("truth", &a.truth),
            ("clean", &a.clean),
            ("method", &a.method),
            ("snr", &a.snr),
            ("out", &a.out),
        ],
    )?;
    let snr_label = number(&kv, "snr", &origin)?;
    let estimate =
        io::read_abundances(&required(&kv, "estimate", &origin)?).map_err(at("input"))?;
    let m = io::read_endmembers(&required(&kv, "endmembers", &origin)?).map_err(at("input"))?;
    let y = unfold(&io::read_cube(&required(&kv, "cube", &origin)?).map_err(at("input"))?);
    let truth = kv
        .get("truth")
        .map(|p| io::read_abundances(Path::new(p)))
        .transpose()
        .map_err(at("input"))?;
    let clean = kv
        .get("clean")
        .map(|p| io::read_cube(Path::new(p)).map(|c| unfold(&c)))
        .transpose()
        .map_err(at("input"))?;
    check_pixels("estimate", &estimate, &y)?;
    let mut report = MetricsReport::compute(&m, &estimate, &y, truth.as_deref(), clean.as_ref())
        .map_err(at("evaluation"))?;
    report.method = kv.get("method").cloned();
    report.snr_db = snr_label;
    match kv.get("out") {
        Some(p) => io::write_metrics(Path::new(p), &report).map_err(at("output"))?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("metrics serialise")
        ),
    }
    Ok(())
}

pub fn denoise(a: DenoiseArgs) -> Result<(), Failure> {
    let mut flags = vec![
        ("cube", &a.cube),
        ("out", &a.out),
        ("denoiser", &a.denoiser),
        ("sigma", &a.sigma),
    ];
    flags.extend(denoiser_flags(&a.denoiser_params));
    let (kv, origin) = merge(a.config.as_deref(), flags)?;
    let name = kv.get("denoiser").map(String::as_str).unwrap_or("nlm");
    let spec = DenoiserSpec::from_name_with(name, &kv).map_err(at("config"))?;
    let sigma = number(&kv, "sigma", &origin)?.ok_or_else(|| {
        at("config")(Error::Parse {
            path: origin.clone(),
            message: "missing sigma".into(),
        })
    })?;
    let out = required(&kv, "out", &origin)?;
    let cube = io::read_cube(&required(&kv, "cube", &origin)?).map_err(at("input"))?;
    let result = spec.denoise(&cube, sigma);
    if !result.is_finite() {
        return Err(at("denoising")(Error::NonFinite {
            step: "denoising",
            iteration: 0,
        }));
    }
    io::write_cube(&out, &result).map_err(at("output"))
}
