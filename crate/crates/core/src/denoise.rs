//! Denoisers used as the prior step.
//!
//! Every denoiser consumes a 3D volume and a noise level and returns a
//! volume of the same shape. The built-in ones work band by band; anything
//! implementing [`Denoiser`] (for instance a wrapper around an external
//! volumetric denoiser) can be plugged into the unmixing loop instead.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{HsiCube, Plane};

/// A Gaussian denoiser for volumes.
pub trait Denoiser: Send + Sync {
    /// Removes noise of standard deviation `sigma` from `volume`.
    fn denoise(&self, volume: &HsiCube, sigma: f64) -> HsiCube;

    fn name(&self) -> String;
}

/// Parameters of a built-in denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DenoiserSpec {
    Identity,
    /// Fixed-width Gaussian smoothing; any positive noise level triggers it.
    Gaussian {
        kernel_sigma: f64,
    },
    /// Non-local means with bandwidth `h = h_factor * sigma`.
    Nlm {
        patch_size: usize,
        search_size: usize,
        h_factor: f64,
    },
    /// ROF total variation with weight `weight_factor * sigma`.
    Tv {
        iters: usize,
        weight_factor: f64,
    },
}

pub const DEFAULT_KERNEL_SIGMA: f64 = 1.0;
pub const DEFAULT_PATCH_SIZE: usize = 3;
pub const DEFAULT_SEARCH_SIZE: usize = 7;
pub const DEFAULT_H_FACTOR: f64 = 10.0;
pub const DEFAULT_TV_ITERS: usize = 50;
pub const DEFAULT_TV_WEIGHT_FACTOR: f64 = 1.0;

/// Names accepted by [`DenoiserSpec::from_name`].
pub const BUILTIN_NAMES: [&str; 4] = ["identity", "gaussian", "nlm", "tv"];

impl DenoiserSpec {
    pub fn identity() -> Self {
        DenoiserSpec::Identity
    }

    pub fn gaussian() -> Self {
        DenoiserSpec::Gaussian {
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
        }
    }

    pub fn nlm() -> Self {
        DenoiserSpec::Nlm {
            patch_size: DEFAULT_PATCH_SIZE,
            search_size: DEFAULT_SEARCH_SIZE,
            h_factor: DEFAULT_H_FACTOR,
        }
    }

    pub fn tv() -> Self {
        DenoiserSpec::Tv {
            iters: DEFAULT_TV_ITERS,
            weight_factor: DEFAULT_TV_WEIGHT_FACTOR,
        }
    }

    /// Default parameters for a registered name.
    pub fn from_name(name: &str) -> Result<Self> {
        Self::from_name_with(name, &BTreeMap::new())
    }

    /// Builds a spec from a name plus string parameters. Recognised keys:
    /// `kernel-sigma`; `patch-size`, `search-size`, `h-factor`; `tv-iters`,
    /// `tv-weight`. Keys that do not apply to the chosen kind are ignored.
    pub fn from_name_with(name: &str, params: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(
            p: &BTreeMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T> {
            match p.get(key) {
                None => Ok(default),
                Some(v) => v.trim().parse().map_err(|_| {
                    Error::invalid(format!("bad value {v:?} for denoiser parameter {key}"))
                }),
            }
        }
        let spec = match name.trim().to_ascii_lowercase().as_str() {
            "identity" | "id" | "none" => DenoiserSpec::Identity,
            "gaussian" => DenoiserSpec::Gaussian {
                kernel_sigma: get(params, "kernel-sigma", DEFAULT_KERNEL_SIGMA)?,
            },
            "nlm" => DenoiserSpec::Nlm {
                patch_size: get(params, "patch-size", DEFAULT_PATCH_SIZE)?,
                search_size: get(params, "search-size", DEFAULT_SEARCH_SIZE)?,
                h_factor: get(params, "h-factor", DEFAULT_H_FACTOR)?,
            },
            "tv" => DenoiserSpec::Tv {
                iters: get(params, "tv-iters", DEFAULT_TV_ITERS)?,
                weight_factor: get(params, "tv-weight", DEFAULT_TV_WEIGHT_FACTOR)?,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown denoiser {other:?} (built-ins: {})",
                    BUILTIN_NAMES.join(", ")
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DenoiserSpec::Identity => "identity",
            DenoiserSpec::Gaussian { .. } => "gaussian",
            DenoiserSpec::Nlm { .. } => "nlm",
            DenoiserSpec::Tv { .. } => "tv",
        }
    }

    /// Key/value view of the parameters, the inverse of [`DenoiserSpec::from_name_with`].
    pub fn params(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match *self {
            DenoiserSpec::Identity => {}
            DenoiserSpec::Gaussian { kernel_sigma } => {
                m.insert("kernel-sigma".into(), kernel_sigma.to_string());
            }
            DenoiserSpec::Nlm {
                patch_size,
                search_size,
                h_factor,
            } => {
                m.insert("patch-size".into(), patch_size.to_string());
                m.insert("search-size".into(), search_size.to_string());
                m.insert("h-factor".into(), h_factor.to_string());
            }
            DenoiserSpec::Tv {
                iters,
                weight_factor,
            } => {
                m.insert("tv-iters".into(), iters.to_string());
                m.insert("tv-weight".into(), weight_factor.to_string());
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |what: &str, v: usize| {
            if v == 0 || v.is_multiple_of(2) {
                Err(Error::invalid(format!(
                    "{what} must be odd and at least 1, got {v}"
                )))
            } else {
                Ok(())
            }
        };
        let positive = |what: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be positive, got {v}")))
            }
        };
        match *self {
            DenoiserSpec::Identity => Ok(()),
            DenoiserSpec::Gaussian { kernel_sigma } => positive("kernel sigma", kernel_sigma),
            DenoiserSpec::Nlm {
                patch_size,
                search_size,
                h_factor,
            } => {
                odd("patch size", patch_size)?;
                odd("search size", search_size)?;
                positive("h factor", h_factor)
            }
            DenoiserSpec::Tv {
                iters,
                weight_factor,
            } => {
                if iters == 0 {
                    return Err(Error::invalid("TV iteration budget must be at least 1"));
                }
                positive("TV weight factor", weight_factor)
            }
        }
    }

    /// Denoises one 2D plane at noise level `sigma`.
    pub fn denoise_plane(&self, plane: &Plane, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return plane.clone();
        }
        match *self {
            DenoiserSpec::Identity => plane.clone(),
            DenoiserSpec::Gaussian { kernel_sigma } => gaussian_filter(plane, kernel_sigma),
            DenoiserSpec::Nlm {
                patch_size,
                search_size,
                h_factor,
            } => nlm_filter(plane, h_factor * sigma, patch_size / 2, search_size / 2),
            DenoiserSpec::Tv {
                iters,
                weight_factor,
            } => tv_denoise(plane, weight_factor * sigma, iters),
        }
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())?;
        let params = self.params();
        if !params.is_empty() {
            let joined: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, "({})", joined.join(", "))?;
        }
        Ok(())
    }
}

impl Denoiser for DenoiserSpec {
    fn denoise(&self, volume: &HsiCube, sigma: f64) -> HsiCube {
        if matches!(self, DenoiserSpec::Identity) {
            return volume.clone();
        }
        map_bands(volume, |plane| self.denoise_plane(plane, sigma))
    }

    fn name(&self) -> String {
        self.to_string()
    }
}

/// Applies a 2D operation to every band independently.
pub fn map_bands<F>(volume: &HsiCube, f: F) -> HsiCube
where
    F: Fn(&Plane) -> Plane + Sync + Send,
{
    let (bands, rows, cols) = volume.dims();
    let planes = par::map_range(bands, |b| f(&volume.band_plane(b)).into_data());
    let mut data = Vec::with_capacity(bands * rows * cols);
    for p in planes {
        data.extend_from_slice(&p);
    }
    HsiCube::from_raw(bands, rows, cols, data)
}

/// Denoisers selectable by name. Starts with the built-ins; external
/// implementations register under their own names.
#[derive(Clone)]
pub struct DenoiserRegistry {
    entries: BTreeMap<String, Arc<dyn Denoiser>>,
}

impl DenoiserRegistry {
    pub fn with_builtins() -> Self {
        let mut entries: BTreeMap<String, Arc<dyn Denoiser>> = BTreeMap::new();
        for name in BUILTIN_NAMES {
            let spec = DenoiserSpec::from_name(name).expect("built-in defaults are valid");
            entries.insert(name.to_string(), Arc::new(spec));
        }
        Self { entries }
    }

    pub fn register(&mut self, name: impl Into<String>, denoiser: Arc<dyn Denoiser>) {
        self.entries.insert(name.into(), denoiser);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Denoiser>> {
        self.entries.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl Default for DenoiserRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl fmt::Debug for DenoiserRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

/// Normalised Gaussian kernel truncated at `±ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian convolution with replicate borders.
pub fn gaussian_filter(plane: &Plane, sigma_spatial: f64) -> Plane {
    assert!(sigma_spatial > 0.0, "spatial sigma must be positive");
    let kernel = gaussian_kernel(sigma_spatial);
    let r = (kernel.len() / 2) as isize;
    let (rows, cols) = (plane.rows(), plane.cols());
    // Along rows (vertical direction) first, then along columns.
    let vertical = Plane::from_fn(rows, cols, |m, k| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, w)| w * plane.get_clamped(m as isize + i as isize - r, k as isize))
            .sum()
    });
    Plane::from_fn(rows, cols, |m, k| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, w)| w * vertical.get_clamped(m as isize, k as isize + i as isize - r))
            .sum()
    })
}

/// Non-local means. Each output pixel is the weighted mean of the pixels in
/// its `(2 search_radius + 1)²` window, with weights
/// `exp(-d² / h²)` where `d²` is the mean squared difference between the
/// `(2 patch_radius + 1)²` patches around the two pixels. Borders replicate.
pub fn nlm_filter(plane: &Plane, h: f64, patch_radius: usize, search_radius: usize) -> Plane {
    if h <= 0.0 {
        return plane.clone();
    }
    let (rows, cols) = (plane.rows(), plane.cols());
    let pr = patch_radius as isize;
    let sr = search_radius as isize;
    let pad = pr + sr;
    let pr_rows = rows + 2 * pad as usize;
    let pr_cols = cols + 2 * pad as usize;
    // Padded copy, row-major for the inner loops.
    let mut padded = vec![0.0; pr_rows * pr_cols];
    for i in 0..pr_rows {
        for j in 0..pr_cols {
            padded[i * pr_cols + j] = plane.get_clamped(i as isize - pad, j as isize - pad);
        }
    }
    let at = |i: isize, j: isize| padded[(i + pad) as usize * pr_cols + (j + pad) as usize];

    // Region over which squared differences are needed: the image grown by the patch radius.
    let ext_rows = rows + 2 * patch_radius;
    let ext_cols = cols + 2 * patch_radius;
    let patch_area = ((2 * pr + 1) * (2 * pr + 1)) as f64;
    let inv_h2 = 1.0 / (h * h);

    let mut acc = vec![0.0; rows * cols];
    let mut wsum = vec![0.0; rows * cols];
    let mut diff = vec![0.0; ext_rows * ext_cols];
    let mut rowsum = vec![0.0; ext_rows * cols];

    for di in -sr..=sr {
        for dj in -sr..=sr {
            for i in 0..ext_rows {
                for j in 0..ext_cols {
                    let (y, x) = (i as isize - pr, j as isize - pr);
                    let d = at(y, x) - at(y + di, x + dj);
                    diff[i * ext_cols + j] = d * d;
                }
            }
            // Box sums: horizontal then vertical.
            let w = (2 * pr + 1) as usize;
            for i in 0..ext_rows {
                let row = &diff[i * ext_cols..(i + 1) * ext_cols];
                let mut s: f64 = row[..w].iter().sum();
                rowsum[i * cols] = s;
                for j in 1..cols {
                    s += row[j + w - 1] - row[j - 1];
                    rowsum[i * cols + j] = s;
                }
            }
            for j in 0..cols {
                for i in 0..rows {
                    let mut s = 0.0;
                    for t in 0..w {
                        s += rowsum[(i + t) * cols + j];
                    }
                    let weight = (-(s / patch_area) * inv_h2).exp();
                    let idx = j * rows + i;
                    acc[idx] += weight * at(i as isize + di, j as isize + dj);
                    wsum[idx] += weight;
                }
            }
        }
    }
    let data = acc.iter().zip(&wsum).map(|(a, w)| a / w).collect();
    Plane::from_raw(rows, cols, data)
}

fn forward_gradient(u: &Plane, gx: &mut [f64], gy: &mut [f64]) {
    let (rows, cols) = (u.rows(), u.cols());
    for k in 0..cols {
        for m in 0..rows {
            let idx = k * rows + m;
            gx[idx] = if m + 1 < rows {
                u.get(m + 1, k) - u.get(m, k)
            } else {
                0.0
            };
            gy[idx] = if k + 1 < cols {
                u.get(m, k + 1) - u.get(m, k)
            } else {
                0.0
            };
        }
    }
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(px: &[f64], py: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for k in 0..cols {
        for m in 0..rows {
            let idx = k * rows + m;
            let dx = if rows == 1 {
                0.0
            } else if m == 0 {
                px[idx]
            } else if m + 1 == rows {
                -px[idx - 1]
            } else {
                px[idx] - px[idx - 1]
            };
            let dy = if cols == 1 {
                0.0
            } else if k == 0 {
                py[idx]
            } else if k + 1 == cols {
                -py[idx - rows]
            } else {
                py[idx] - py[idx - rows]
            };
            out[idx] = dx + dy;
        }
    }
}

/// Isotropic total variation of a plane (forward differences, Neumann borders).
pub fn total_variation(u: &Plane) -> f64 {
    let n = u.rows() * u.cols();
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    forward_gradient(u, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum()
}

/// `½‖u - f‖² + weight · TV(u)`.
pub fn rof_energy(u: &Plane, f: &Plane, weight: f64) -> f64 {
    let fit: f64 = u
        .data()
        .iter()
        .zip(f.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    0.5 * fit + weight * total_variation(u)
}

/// ROF denoising by projected gradient on the dual field with step 1/8.
/// Returns the lowest-energy primal iterate, clipped to the input range
/// (clipping never raises the energy).
pub fn tv_denoise(plane: &Plane, weight: f64, iters: usize) -> Plane {
    if weight <= 0.0 {
        return plane.clone();
    }
    const STEP: f64 = 1.0 / 8.0;
    let (rows, cols) = (plane.rows(), plane.cols());
    let n = rows * cols;
    let (lo, hi) = plane.min_max();
    let f = plane.data();
    let (mut px, mut py) = (vec![0.0; n], vec![0.0; n]);
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    let mut div = vec![0.0; n];
    let mut best = plane.clone();
    let mut best_energy = rof_energy(plane, plane, weight);

    for _ in 0..iters {
        divergence(&px, &py, rows, cols, &mut div);
        let u = Plane::from_raw(
            rows,
            cols,
            f.iter().zip(&div).map(|(fv, d)| fv - weight * d).collect(),
        );
        forward_gradient(&u, &mut gx, &mut gy);
        for i in 0..n {
            let qx = px[i] - STEP * gx[i] / weight;
            let qy = py[i] - STEP * gy[i] / weight;
            let norm = qx.hypot(qy).max(1.0);
            px[i] = qx / norm;
            py[i] = qy / norm;
        }
        divergence(&px, &py, rows, cols, &mut div);
        let u = Plane::from_raw(
            rows,
            cols,
            f.iter()
                .zip(&div)
                .map(|(fv, d)| (fv - weight * d).clamp(lo, hi))
                .collect(),
        );
        let e = rof_energy(&u, plane, weight);
        if e <= best_energy {
            best_energy = e;
            best = u;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_region(rows: usize, cols: usize) -> Plane {
        Plane::from_fn(rows, cols, |_, k| if k < cols / 2 { 0.2 } else { 0.8 })
    }

    fn add_noise(p: &Plane, sigma: f64, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, sigma).unwrap();
        Plane::new(
            p.rows(),
            p.cols(),
            p.data().iter().map(|v| v + nd.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    fn mse(a: &Plane, b: &Plane) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.data().len() as f64
    }

    #[test]
    fn spec_validation() {
        assert!(DenoiserSpec::Nlm {
            patch_size: 2,
            search_size: 7,
            h_factor: 10.0
        }
        .validate()
        .is_err());
        assert!(DenoiserSpec::Nlm {
            patch_size: 3,
            search_size: 0,
            h_factor: 10.0
        }
        .validate()
        .is_err());
        assert!(DenoiserSpec::Tv {
            iters: 0,
            weight_factor: 1.0
        }
        .validate()
        .is_err());
        assert!(DenoiserSpec::Gaussian { kernel_sigma: 0.0 }
            .validate()
            .is_err());
        assert!(DenoiserSpec::from_name("bm3d").is_err());
        for name in BUILTIN_NAMES {
            let spec = DenoiserSpec::from_name(name).unwrap();
            assert_eq!(
                DenoiserSpec::from_name_with(spec.kind(), &spec.params()).unwrap(),
                spec
            );
        }
    }

    #[test]
    fn identity_returns_input() {
        let cube = HsiCube::new(2, 3, 3, (0..18).map(|i| i as f64 * 0.1).collect()).unwrap();
        for s in [0.0, 0.5, 10.0] {
            assert_eq!(DenoiserSpec::Identity.denoise(&cube, s), cube);
        }
        for name in BUILTIN_NAMES {
            assert_eq!(
                DenoiserSpec::from_name(name).unwrap().denoise(&cube, 0.0),
                cube
            );
        }
    }

    #[test]
    fn gaussian_impulse_and_constant() {
        let sigma = 1.2;
        let kernel = gaussian_kernel(sigma);
        assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let r = kernel.len() / 2;
        let size = 2 * r + 5;
        let c = size / 2;
        let impulse = Plane::from_fn(size, size, |m, k| if m == c && k == c { 1.0 } else { 0.0 });
        let out = gaussian_filter(&impulse, sigma);
        for m in 0..size {
            for k in 0..size {
                let (dm, dk) = (m as isize - c as isize, k as isize - c as isize);
                let expected = if dm.unsigned_abs() <= r && dk.unsigned_abs() <= r {
                    kernel[(dm + r as isize) as usize] * kernel[(dk + r as isize) as usize]
                } else {
                    0.0
                };
                assert!((out.get(m, k) - expected).abs() < 1e-15);
            }
        }
        let constant = Plane::from_fn(9, 7, |_, _| 0.37);
        for (a, b) in gaussian_filter(&constant, 2.0)
            .data()
            .iter()
            .zip(constant.data())
        {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_preserves_interior_ramp() {
        let sigma = 1.0;
        let r = gaussian_kernel(sigma).len() / 2;
        let ramp = Plane::from_fn(3, 20, |_, k| 0.1 * k as f64);
        let out = gaussian_filter(&ramp, sigma);
        for k in r..20 - r {
            for m in 0..3 {
                assert!((out.get(m, k) - ramp.get(m, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_denoiser_preserves_dc_band() {
        let cube = HsiCube::new(2, 6, 5, [vec![0.4; 30], vec![0.9; 30]].concat()).unwrap();
        let out = DenoiserSpec::gaussian().denoise(&cube, 0.1);
        for (a, b) in out.data().iter().zip(cube.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn nlm_constant_and_convex_bounds() {
        let constant = Plane::from_fn(8, 8, |_, _| 0.3);
        for (a, b) in nlm_filter(&constant, 0.5, 1, 3)
            .data()
            .iter()
            .zip(constant.data())
        {
            assert!((a - b).abs() < 1e-15);
        }
        let noisy = add_noise(&two_region(16, 16), 0.1, 1);
        let (pr, sr) = (1usize, 2usize);
        let out = nlm_filter(&noisy, 0.5, pr, sr);
        for m in 0..16isize {
            for k in 0..16isize {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for dm in -(sr as isize)..=sr as isize {
                    for dk in -(sr as isize)..=sr as isize {
                        let v = noisy.get_clamped(m + dm, k + dk);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let o = out.get(m as usize, k as usize);
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    /// Reference NLM evaluated pixel by pixel straight from the definition.
    fn nlm_reference(p: &Plane, h: f64, pr: isize, sr: isize) -> Plane {
        let area = ((2 * pr + 1) * (2 * pr + 1)) as f64;
        Plane::from_fn(p.rows(), p.cols(), |m, k| {
            let (m, k) = (m as isize, k as isize);
            let (mut acc, mut ws) = (0.0, 0.0);
            for dm in -sr..=sr {
                for dk in -sr..=sr {
                    let mut d2 = 0.0;
                    for a in -pr..=pr {
                        for b in -pr..=pr {
                            let d =
                                p.get_clamped(m + a, k + b) - p.get_clamped(m + dm + a, k + dk + b);
                            d2 += d * d;
                        }
                    }
                    let w = (-(d2 / area) / (h * h)).exp();
                    acc += w * p.get_clamped(m + dm, k + dk);
                    ws += w;
                }
            }
            acc / ws
        })
    }

    #[test]
    fn nlm_matches_direct_definition() {
        let noisy = add_noise(&two_region(9, 11), 0.1, 4);
        let fast = nlm_filter(&noisy, 0.3, 1, 2);
        let slow = nlm_reference(&noisy, 0.3, 1, 2);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn nlm_flattens_regions() {
        let clean = two_region(64, 64);
        let noisy = add_noise(&clean, 0.05, 2);
        let out = nlm_filter(&noisy, DEFAULT_H_FACTOR * 0.05, 1, 3);
        // Interior of the left region, away from the edge.
        let variance = |p: &Plane| {
            let vals: Vec<f64> = (8..56)
                .flat_map(|m| (4..24).map(move |k| (m, k)))
                .map(|(m, k)| p.get(m, k))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
        };
        assert!(variance(&out) * 2.0 <= variance(&noisy));
        assert!(mse(&out, &clean) < mse(&noisy, &clean));
    }

    #[test]
    fn tv_small_weight_is_near_identity() {
        let noisy = add_noise(&two_region(16, 16), 0.1, 3);
        let out = tv_denoise(&noisy, 1e-8, 50);
        let dev = out
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-6);
    }

    #[test]
    fn tv_constant_and_energy_descent() {
        let constant = Plane::from_fn(8, 8, |_, _| 0.6);
        assert_eq!(tv_denoise(&constant, 0.5, 20), constant);
        for seed in 0..5 {
            let noisy = add_noise(&two_region(24, 24), 0.1, seed);
            let w = 0.1;
            let out = tv_denoise(&noisy, w, 50);
            assert!(rof_energy(&out, &noisy, w) <= rof_energy(&noisy, &noisy, w));
            let (lo, hi) = noisy.min_max();
            assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn tv_energy_decreases_with_budget() {
        let noisy = add_noise(&two_region(24, 24), 0.1, 7);
        let w = 0.08;
        let mut last = rof_energy(&noisy, &noisy, w);
        for iters in [1, 2, 5, 10, 20, 50, 100] {
            let e = rof_energy(&tv_denoise(&noisy, w, iters), &noisy, w);
            assert!(e <= last + 1e-12);
            last = e;
        }
    }

    #[test]
    fn nlm_and_tv_reduce_error() {
        let clean = Plane::from_fn(64, 64, |m, k| match (m < 32, k < 40) {
            (true, true) => 0.1,
            (true, false) => 0.5,
            (false, true) => 0.7,
            (false, false) => 0.3,
        });
        let sigma = 0.08;
        let noisy = add_noise(&clean, sigma, 6);
        for spec in [DenoiserSpec::nlm(), DenoiserSpec::tv()] {
            let out = spec.denoise_plane(&noisy, sigma);
            assert!(mse(&out, &clean) < mse(&noisy, &clean), "{spec}");
        }
    }

    #[test]
    fn bandwise_permutation_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nd = Normal::new(0.5, 0.1).unwrap();
        let data: Vec<f64> = (0..3 * 10 * 12).map(|_| nd.sample(&mut rng)).collect();
        let cube = HsiCube::new(3, 10, 12, data.clone()).unwrap();
        let n = 120;
        let swapped: Vec<f64> = [&data[2 * n..], &data[n..2 * n], &data[..n]].concat();
        let swapped = HsiCube::new(3, 10, 12, swapped).unwrap();
        for spec in [
            DenoiserSpec::gaussian(),
            DenoiserSpec::nlm(),
            DenoiserSpec::tv(),
        ] {
            let a = spec.denoise(&cube, 0.1);
            assert_eq!(a.dims(), cube.dims());
            assert_eq!(a, spec.denoise(&cube, 0.1));
            let b = spec.denoise(&swapped, 0.1);
            assert_eq!(a.band(0), b.band(2));
            assert_eq!(a.band(2), b.band(0));
        }
    }

    #[test]
    fn registry_lookup_and_extension() {
        struct Halve;
        impl Denoiser for Halve {
            fn denoise(&self, v: &HsiCube, _sigma: f64) -> HsiCube {
                let (b, r, c) = v.dims();
                HsiCube::new(b, r, c, v.data().iter().map(|x| x * 0.5).collect()).unwrap()
            }
            fn name(&self) -> String {
                "halve".into()
            }
        }
        let mut reg = DenoiserRegistry::with_builtins();
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            vec!["gaussian", "identity", "nlm", "tv"]
        );
        reg.register("halve", Arc::new(Halve));
        let cube = HsiCube::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(
            reg.get("halve").unwrap().denoise(&cube, 1.0).data(),
            &[0.5, 1.0]
        );
        assert!(reg.get("bm3d").is_none());
    }
}
