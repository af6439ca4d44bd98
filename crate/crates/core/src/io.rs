//! File formats.
//!
//! * Cube files: a raw payload of little-endian `f32` values, band-major with
//!   column-major spatial order (`n = col * rows + row`), plus a textual
//!   sidecar header at `<payload>.hdr` of `key = value` lines.
//! * Endmember CSV: a header row of names, then one row per band and one
//!   column per endmember.
//! * Abundance maps: binary 8-bit PGM (`P5`), `v -> round(255 * clamp(v, 0, 1))`.
//! * Run and scene configuration: flat `key = value` text, `#` comments.
//! * Metrics: JSON. Iteration traces: CSV.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::denoise::DenoiserSpec;
use crate::error::{Error, Result};
use crate::model::{EndmemberMatrix, MetricsReport, ASC_TOLERANCE};
use crate::pnp::{nlm_benchmark_preset, nlm_low_snr_preset, IterationRecord, PnpConfig};
use crate::qp::Mode;
use crate::synth::SceneSpec;
use crate::tensor::{fold, unfold, HsiCube, PixelMatrix, Plane};
use crate::AbundanceMatrix;

pub const CUBE_DTYPE: &str = "float32";
pub const CUBE_LAYOUT: &str = "band-major,column-major-spatial";
pub const CUBE_ENDIANNESS: &str = "little";

/// Sidecar header path for a cube payload.
pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes a cube payload and its header. Values are narrowed to `f32`.
pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    let (bands, rows, cols) = cube.dims();
    let header = format!(
        "# pnp-unmix cube\nchannels = {bands}\nrows = {rows}\ncols = {cols}\ndtype = {CUBE_DTYPE}\n\
         layout = {CUBE_LAYOUT}\nendianness = {CUBE_ENDIANNESS}\n"
    );
    let mut payload = Vec::with_capacity(cube.data().len() * 4);
    for &v in cube.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(&header_path(path), header.as_bytes())?;
    write_file(path, &payload)
}

/// Reads a cube written by [`write_cube`] (or converted into that layout).
pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let hdr_path = header_path(path);
    let header = parse_key_values(&read_text(&hdr_path)?, &hdr_path)?;
    let field = |key: &str| -> Result<&String> {
        header
            .get(key)
            .ok_or_else(|| Error::parse(&hdr_path, format!("missing key {key:?}")))
    };
    let dim = |key: &str| -> Result<usize> {
        let v = field(key)?;
        v.parse()
            .map_err(|_| Error::parse(&hdr_path, format!("bad {key} {v:?}")))
    };
    let (bands, rows, cols) = (dim("channels")?, dim("rows")?, dim("cols")?);
    for (key, expected) in [
        ("dtype", CUBE_DTYPE),
        ("layout", CUBE_LAYOUT),
        ("endianness", CUBE_ENDIANNESS),
    ] {
        let got = field(key)?.replace(' ', "");
        if got != expected {
            return Err(Error::parse(
                &hdr_path,
                format!("unsupported {key} {got:?} (expected {expected})"),
            ));
        }
    }
    let payload = read_file(path)?;
    let expected = bands * rows * cols * 4;
    if payload.len() != expected {
        return Err(Error::parse(
            path,
            format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    HsiCube::new(bands, rows, cols, data).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes abundances as a `P`-channel cube.
pub fn write_abundances(path: &Path, abundances: &PixelMatrix) -> Result<()> {
    write_cube(path, &fold(abundances))
}

/// Reads an abundance cube. Columns within `1e-5` of the simplex (the `f32`
/// storage error) are renormalised; anything further off is rejected.
pub fn read_abundances(path: &Path) -> Result<AbundanceMatrix> {
    let mut m = unfold(&read_cube(path)?);
    let p = m.channels();
    for (n, col) in m.data_mut().chunks_exact_mut(p).enumerate() {
        let sum: f64 = col.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || col.iter().any(|&v| v < -1e-6) {
            return Err(Error::parse(
                path,
                format!("pixel {n} is not on the simplex (sum {sum})"),
            ));
        }
        col.iter_mut().for_each(|v| *v = v.max(0.0));
        let s: f64 = col.iter().sum();
        col.iter_mut().for_each(|v| *v /= s);
    }
    debug_assert!(crate::model::simplex_violation(&m).0 <= ASC_TOLERANCE);
    AbundanceMatrix::new(m).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_endmembers(path: &Path, endmembers: &EndmemberMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(endmembers.names()).map_err(csv_err)?;
    for l in 0..endmembers.bands() {
        let row: Vec<String> = (0..endmembers.endmembers())
            .map(|j| endmembers.get(l, j).to_string())
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    write_file(path, &bytes)
}

pub fn read_endmembers(path: &Path) -> Result<EndmemberMatrix> {
    let bytes = read_file(path)?;
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let names: Vec<String> = r
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let p = names.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, format!("row {}: {e}", i + 2)))?;
        if rec.len() != p {
            return Err(Error::parse(
                path,
                format!("row {} has {} fields, expected {p}", i + 2, rec.len()),
            ));
        }
        let vals = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("row {}: bad number {s:?}", i + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    let l = rows.len();
    let data = (0..p)
        .flat_map(|j| rows.iter().map(move |r| r[j]))
        .collect();
    EndmemberMatrix::with_names(l, p, data, names).map_err(|e| match e {
        Error::Shape(m) | Error::InvalidInput(m) => Error::parse(path, m),
        other => other,
    })
}

/// Quantises a plane to an 8-bit binary graymap. Returns how many values
/// had to be clamped into `[0, 1]`.
pub fn encode_pgm(plane: &Plane) -> (Vec<u8>, usize) {
    let (rows, cols) = (plane.rows(), plane.cols());
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let mut clamped = 0;
    for m in 0..rows {
        for k in 0..cols {
            let v = plane.get(m, k);
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((255.0 * c + 0.5).floor() as u8);
        }
    }
    (out, clamped)
}

pub fn write_map(path: &Path, plane: &Plane) -> Result<()> {
    let (bytes, clamped) = encode_pgm(plane);
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} values into [0, 1]", path.display());
    }
    write_file(path, &bytes)
}

/// Decodes a binary graymap into `(width, height, pixels)`; pixels are row-major.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let bad = |m: &str| Error::parse(path, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit binary graymap"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let payload = &bytes[pos + 1..];
    if payload.len() != w * h {
        return Err(bad("payload size does not match header"));
    }
    Ok((w, h, payload.to_vec()))
}

/// Normalises a config key: lowercase, `_` becomes `-`.
pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(
                origin,
                format!("line {}: expected key = value", i + 1),
            ));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::parse(origin, format!("line {}: empty key", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::parse(
                origin,
                format!("line {}: duplicate key {key:?}", i + 1),
            ));
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_key_values(&read_text(path)?, path)
}

pub fn format_key_values(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn format_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn parse_value<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
    origin: &Path,
) -> Result<Option<T>> {
    kv.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::parse(origin, format!("bad value {v:?} for {key}")))
        })
        .transpose()
}

fn parse_f64(kv: &BTreeMap<String, String>, key: &str, origin: &Path) -> Result<Option<f64>> {
    match kv.get(key).map(|v| v.to_ascii_lowercase()) {
        Some(v) if v == "inf" || v == "+inf" || v == "infinity" => Ok(Some(f64::INFINITY)),
        _ => parse_value(kv, key, origin),
    }
}

/// Keys understood by [`scene_spec_from_kv`].
pub const SCENE_KEYS: [&str; 8] = [
    "rows",
    "cols",
    "endmembers",
    "bands",
    "smoothness",
    "pure-fraction",
    "snr",
    "seed",
];

pub fn scene_spec_to_kv(spec: &SceneSpec) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("rows".into(), spec.rows.to_string()),
        ("cols".into(), spec.cols.to_string()),
        ("endmembers".into(), spec.endmembers.to_string()),
        ("bands".into(), spec.bands.to_string()),
        ("smoothness".into(), format_f64(spec.field_smoothness)),
        ("pure-fraction".into(), format_f64(spec.pure_pixel_fraction)),
        ("snr".into(), format_f64(spec.snr_db)),
        ("seed".into(), spec.seed.to_string()),
    ])
}

/// Missing keys keep their [`SceneSpec::default`] values; unknown keys are ignored.
pub fn scene_spec_from_kv(kv: &BTreeMap<String, String>, origin: &Path) -> Result<SceneSpec> {
    let d = SceneSpec::default();
    let spec = SceneSpec {
        rows: parse_value(kv, "rows", origin)?.unwrap_or(d.rows),
        cols: parse_value(kv, "cols", origin)?.unwrap_or(d.cols),
        endmembers: parse_value(kv, "endmembers", origin)?.unwrap_or(d.endmembers),
        bands: parse_value(kv, "bands", origin)?.unwrap_or(d.bands),
        field_smoothness: parse_f64(kv, "smoothness", origin)?.unwrap_or(d.field_smoothness),
        pure_pixel_fraction: parse_f64(kv, "pure-fraction", origin)?
            .unwrap_or(d.pure_pixel_fraction),
        snr_db: parse_f64(kv, "snr", origin)?.unwrap_or(d.snr_db),
        seed: parse_value(kv, "seed", origin)?.unwrap_or(d.seed),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn write_scene_spec(path: &Path, spec: &SceneSpec) -> Result<()> {
    let text = format!(
        "# pnp-unmix scene\n{}",
        format_key_values(&scene_spec_to_kv(spec))
    );
    write_file(path, text.as_bytes())
}

pub fn read_scene_spec(path: &Path) -> Result<SceneSpec> {
    scene_spec_from_kv(&read_key_values(path)?, path)
}

/// Solver keys understood by [`pnp_config_from_kv`]; denoiser parameter
/// keys (`patch-size`, `search-size`, `h-factor`, `kernel-sigma`,
/// `tv-iters`, `tv-weight`) are accepted too.
///
/// `preset` selects a `(rho, lambda)` row for the SNR given by `snr`:
/// `table` for the 5/10/20/30 dB benchmark pairs, `low-snr` for the 5/10 dB
/// pairs tuned to the built-in NLM. Explicit `rho`/`lambda` still win.
pub const PNP_KEYS: [&str; 12] = [
    "mode",
    "denoiser",
    "preset",
    "snr",
    "rho",
    "lambda",
    "alpha",
    "iters",
    "stop-tol",
    "qp-tol",
    "qp-max-iter",
    "seed",
];

pub fn pnp_config_to_kv(cfg: &PnpConfig) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::from([
        ("mode".into(), cfg.mode.to_string()),
        ("denoiser".into(), cfg.denoiser.kind().to_string()),
        ("rho".into(), format_f64(cfg.rho0)),
        ("lambda".into(), format_f64(cfg.lambda)),
        ("alpha".into(), format_f64(cfg.alpha)),
        ("iters".into(), cfg.max_iter.to_string()),
        ("stop-tol".into(), format_f64(cfg.stop_tol)),
        ("qp-tol".into(), format_f64(cfg.qp.tol)),
        ("qp-max-iter".into(), cfg.qp.max_iter.to_string()),
        ("seed".into(), cfg.seed.to_string()),
    ]);
    kv.extend(cfg.denoiser.params());
    kv
}

/// Builds a solver configuration. Missing keys take the mode defaults of
/// [`PnpConfig::new`]; `alpha` defaults per mode.
pub fn pnp_config_from_kv(kv: &BTreeMap<String, String>, origin: &Path) -> Result<PnpConfig> {
    let mode: Mode = match kv.get("mode") {
        Some(m) => m
            .parse()
            .map_err(|e: Error| Error::parse(origin, e.to_string()))?,
        None => Mode::ProH,
    };
    let mut cfg = PnpConfig::new(mode);
    if let Some(name) = kv.get("denoiser") {
        cfg.denoiser = DenoiserSpec::from_name_with(name, kv)
            .map_err(|e| Error::parse(origin, e.to_string()))?;
    }
    if let Some(preset) = kv.get("preset") {
        let snr = parse_f64(kv, "snr", origin)?
            .ok_or_else(|| Error::parse(origin, "preset needs an snr".to_string()))?;
        let pair = match preset.as_str() {
            "table" => nlm_benchmark_preset(mode, snr),
            "low-snr" => nlm_low_snr_preset(mode, snr),
            other => {
                return Err(Error::parse(
                    origin,
                    format!("unknown preset {other:?} (table, low-snr)"),
                ))
            }
        };
        (cfg.rho0, cfg.lambda) = pair.ok_or_else(|| {
            Error::parse(origin, format!("preset {preset} has no row for {snr} dB"))
        })?;
    }
    if let Some(v) = parse_f64(kv, "rho", origin)? {
        cfg.rho0 = v;
    }
    if let Some(v) = parse_f64(kv, "lambda", origin)? {
        cfg.lambda = v;
    }
    if let Some(v) = parse_f64(kv, "alpha", origin)? {
        cfg.alpha = v;
    }
    if let Some(v) = parse_value(kv, "iters", origin)? {
        cfg.max_iter = v;
    }
    if let Some(v) = parse_f64(kv, "stop-tol", origin)? {
        cfg.stop_tol = v;
    }
    if let Some(v) = parse_f64(kv, "qp-tol", origin)? {
        cfg.qp.tol = v;
    }
    if let Some(v) = parse_value(kv, "qp-max-iter", origin)? {
        cfg.qp.max_iter = v;
    }
    if let Some(v) = parse_value(kv, "seed", origin)? {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let text =
        serde_json::to_string_pretty(report).map_err(|e| Error::parse(path, e.to_string()))?;
    write_file(path, format!("{text}\n").as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e.to_string()))
}

pub const TRACE_HEADER: [&str; 11] = [
    "iter",
    "rho",
    "sigma",
    "primal_residual",
    "dual_residual",
    "rmse",
    "max_sum_deviation",
    "min_abundance",
    "qp_unconverged",
    "a_step_secs",
    "z_step_secs",
];

pub fn write_trace(path: &Path, history: &[IterationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", TRACE_HEADER.join(",")).expect("in-memory write");
    for r in history {
        let rmse = r.rmse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.rho,
            r.sigma,
            r.primal_residual,
            r.dual_residual,
            rmse,
            r.max_sum_deviation,
            r.min_abundance,
            r.qp_unconverged,
            r.a_step_secs,
            r.z_step_secs
        )
        .expect("in-memory write");
    }
    write_file(path, &buf)
}
