//! Synthetic scenes: smooth Gaussian-field abundances on the simplex, random
//! smooth endmember spectra, and SNR-calibrated noise.

use nalgebra::SVD;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoise::gaussian_filter;
use crate::error::{Error, Result};
use crate::model::{self, dot, AbundanceMatrix, EndmemberMatrix};
use crate::tensor::{fold, HsiCube, PixelMatrix, Plane};

/// Standardised fields are multiplied by this before the softmax.
pub const FIELD_GAIN: f64 = 2.0;
/// Smallest allowed spectral angle between generated endmembers, in degrees.
pub const MIN_SPECTRAL_ANGLE_DEG: f64 = 5.0;
const ENDMEMBER_ATTEMPTS: usize = 1000;

const STREAM_PURE: u64 = 1;
const STREAM_ENDMEMBERS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_FIELDS: u64 = 0x100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub endmembers: usize,
    pub bands: usize,
    /// Width (pixels) of the Gaussian kernel that correlates the fields.
    pub field_smoothness: f64,
    /// Share of pixels overwritten with pure (one-hot) abundances.
    pub pure_pixel_fraction: f64,
    /// `+inf` means no noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            endmembers: 4,
            bands: 64,
            field_smoothness: 6.0,
            pure_pixel_fraction: 0.02,
            snr_db: 20.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.endmembers < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 endmembers, got {}",
                self.endmembers
            )));
        }
        if self.rows < 8 || self.cols < 8 {
            return Err(Error::invalid(format!(
                "scene must be at least 8x8, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.bands < self.endmembers {
            return Err(Error::invalid(format!(
                "need at least as many bands ({}) as endmembers ({})",
                self.bands, self.endmembers
            )));
        }
        if !(self.field_smoothness.is_finite() && self.field_smoothness > 0.0) {
            return Err(Error::invalid(format!(
                "field smoothness must be positive, got {}",
                self.field_smoothness
            )));
        }
        if !(0.0..=1.0).contains(&self.pure_pixel_fraction) {
            return Err(Error::invalid(format!(
                "pure pixel fraction must lie in [0, 1], got {}",
                self.pure_pixel_fraction
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::invalid(format!(
                "SNR {} dB is not usable",
                self.snr_db
            )));
        }
        Ok(())
    }

    /// Seeds of the per-endmember Gaussian fields.
    pub fn field_seeds(&self) -> Vec<u64> {
        (0..self.endmembers as u64)
            .map(|j| derive_seed(self.seed, STREAM_FIELDS + j))
            .collect()
    }
}

/// SplitMix64 finaliser over `seed` and a stream id.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// White noise smoothed by a Gaussian kernel, standardised to zero mean and
/// unit variance.
pub fn gaussian_field(rows: usize, cols: usize, smoothness: f64, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = Plane::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let smooth = gaussian_filter(&white, smoothness);
    let n = (rows * cols) as f64;
    let mean = smooth.data().iter().sum::<f64>() / n;
    let var = smooth
        .data()
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(f64::MIN_POSITIVE);
    let data = smooth.data().iter().map(|v| (v - mean) / sd).collect();
    Plane::new(rows, cols, data).expect("same shape")
}

/// Abundances drawn from the scene's field seeds.
pub fn generate_abundances(spec: &SceneSpec) -> Result<AbundanceMatrix> {
    abundances_from_field_seeds(spec, &spec.field_seeds())
}

/// Softmax of one smooth field per endmember, then a `pure_pixel_fraction`
/// share of pixels is replaced by the basis vector of its dominant
/// endmember.
pub fn abundances_from_field_seeds(spec: &SceneSpec, seeds: &[u64]) -> Result<AbundanceMatrix> {
    spec.validate()?;
    let p = spec.endmembers;
    if seeds.len() != p {
        return Err(Error::invalid(format!(
            "{} field seeds for {p} endmembers",
            seeds.len()
        )));
    }
    let (rows, cols) = (spec.rows, spec.cols);
    let fields: Vec<Plane> = seeds
        .iter()
        .map(|&s| gaussian_field(rows, cols, spec.field_smoothness, s))
        .collect();
    let n = rows * cols;
    let mut a = PixelMatrix::zeros(p, rows, cols);
    for i in 0..n {
        let col = a.pixel_mut(i);
        let logits: Vec<f64> = fields.iter().map(|f| FIELD_GAIN * f.data()[i]).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (c, l) in col.iter_mut().zip(&logits) {
            *c = (l - top).exp();
        }
        let s: f64 = col.iter().sum();
        col.iter_mut().for_each(|v| *v /= s);
    }
    let pure = (spec.pure_pixel_fraction * n as f64).round() as usize;
    if pure > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_PURE));
        for i in index::sample(&mut rng, n, pure.min(n)) {
            let col = a.pixel_mut(i);
            let mut best = 0;
            for j in 1..p {
                if col[j] > col[best] {
                    best = j;
                }
            }
            col.iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v = if j == best { 1.0 } else { 0.0 });
        }
    }
    AbundanceMatrix::new(a)
}

/// Angle between two spectra in degrees.
pub fn spectral_angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// `P` smooth positive spectra in `[0, 1]` built from Gaussian bumps over the
/// band axis, pairwise at least [`MIN_SPECTRAL_ANGLE_DEG`] apart.
pub fn generate_endmembers(bands: usize, endmembers: usize, seed: u64) -> Result<EndmemberMatrix> {
    if bands < endmembers || endmembers == 0 {
        return Err(Error::Generation(format!(
            "cannot build {endmembers} endmembers over {bands} bands"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra: Vec<Vec<f64>> = Vec::with_capacity(endmembers);
    let l = bands as f64;
    while spectra.len() < endmembers {
        let mut accepted = false;
        for _ in 0..ENDMEMBER_ATTEMPTS {
            let baseline = rng.random_range(0.05..0.3);
            let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=5))
                .map(|_| {
                    (
                        rng.random_range(0.0..l),
                        rng.random_range((l / 20.0).max(0.5)..(l / 4.0).max(1.0)),
                        rng.random_range(0.1..0.6),
                    )
                })
                .collect();
            let mut s: Vec<f64> = (0..bands)
                .map(|b| {
                    let x = b as f64;
                    baseline
                        + bumps
                            .iter()
                            .map(|(c, w, h)| h * (-(x - c).powi(2) / (2.0 * w * w)).exp())
                            .sum::<f64>()
                })
                .collect();
            let top = s.iter().copied().fold(0.0, f64::max);
            if top > 0.95 {
                s.iter_mut().for_each(|v| *v *= 0.95 / top);
            }
            if spectra
                .iter()
                .all(|t| spectral_angle_deg(t, &s) >= MIN_SPECTRAL_ANGLE_DEG)
            {
                spectra.push(s);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Generation(format!(
                "no spectrum {} degrees away from the others after {ENDMEMBER_ATTEMPTS} attempts \
                 ({bands} bands, {endmembers} endmembers)",
                MIN_SPECTRAL_ANGLE_DEG
            )));
        }
    }
    let m = EndmemberMatrix::new(bands, endmembers, spectra.concat())?;
    log::debug!(
        "generated endmembers, cond(MᵀM) = {:.3e}",
        gram_condition_number(&m)
    );
    Ok(m)
}

/// Condition number of `MᵀM`.
pub fn gram_condition_number(m: &EndmemberMatrix) -> f64 {
    let sv = SVD::new(m.gram(), false, false).singular_values;
    sv.max() / sv.min()
}

/// A generated scene with its ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub endmembers: EndmemberMatrix,
    pub truth: AbundanceMatrix,
    pub clean: HsiCube,
    pub noisy: HsiCube,
}

pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let endmembers = generate_endmembers(
        spec.bands,
        spec.endmembers,
        derive_seed(spec.seed, STREAM_ENDMEMBERS),
    )?;
    let truth = generate_abundances(spec)?;
    let clean = model::mix(&endmembers, &truth)?;
    let noisy = model::add_noise_snr(&clean, spec.snr_db, derive_seed(spec.seed, STREAM_NOISE))?;
    Ok(Scene {
        spec: spec.clone(),
        endmembers,
        truth,
        clean: fold(&clean),
        noisy: fold(&noisy),
    })
}
