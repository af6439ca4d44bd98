//! Linear mixing model, calibrated noise injection and evaluation metrics.

use std::ops::Deref;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PixelMatrix;

/// Entries this far below zero are treated as rounding and clamped.
pub const ANC_TOLERANCE: f64 = 1e-12;
/// Allowed deviation of an abundance column sum from one.
pub const ASC_TOLERANCE: f64 = 1e-8;

/// `bands x endmembers` library of pure spectra, one column per endmember.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberMatrix {
    bands: usize,
    endmembers: usize,
    /// Column-major: entry `(l, j)` at `j * bands + l`.
    data: Vec<f64>,
    names: Vec<String>,
}

impl EndmemberMatrix {
    /// `data` is column-major (one spectrum after another).
    pub fn new(bands: usize, endmembers: usize, data: Vec<f64>) -> Result<Self> {
        let names = (0..endmembers).map(|j| format!("em{}", j + 1)).collect();
        Self::with_names(bands, endmembers, data, names)
    }

    pub fn with_names(
        bands: usize,
        endmembers: usize,
        data: Vec<f64>,
        names: Vec<String>,
    ) -> Result<Self> {
        if bands == 0 || endmembers == 0 {
            return Err(Error::shape(format!(
                "endmember matrix {bands}x{endmembers} is empty"
            )));
        }
        if data.len() != bands * endmembers {
            return Err(Error::shape(format!(
                "endmember matrix {bands}x{endmembers} needs {} values, got {}",
                bands * endmembers,
                data.len()
            )));
        }
        if names.len() != endmembers {
            return Err(Error::shape(format!(
                "{} names for {endmembers} endmembers",
                names.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "endmember matrix contains non-finite values",
            ));
        }
        let cols: Vec<&[f64]> = data.chunks_exact(bands).collect();
        for (j, c) in cols.iter().enumerate() {
            if c.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("endmember {j} is all zero")));
            }
            for (i, d) in cols[..j].iter().enumerate() {
                if d == c {
                    return Err(Error::invalid(format!(
                        "endmembers {i} and {j} are identical"
                    )));
                }
            }
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            log::warn!("endmember reflectances fall outside [0, 1]");
        }
        if bands < endmembers {
            log::warn!("fewer bands ({bands}) than endmembers ({endmembers}); abundances are not identifiable");
        }
        Ok(Self {
            bands,
            endmembers,
            data,
            names,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn endmembers(&self) -> usize {
        self.endmembers
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.bands..(j + 1) * self.bands]
    }

    pub fn get(&self, band: usize, endmember: usize) -> f64 {
        self.data[endmember * self.bands + band]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.bands, self.endmembers, &self.data)
    }

    /// `M^T M`.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.to_dmatrix();
        m.transpose() * m
    }

    /// Computes `M^T v` into `out` (length P) for a length-L vector.
    pub fn transpose_apply(&self, v: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(self.column(j), v);
        }
    }

    /// Computes `M a` into `out` (length L) for a length-P vector.
    pub fn apply(&self, a: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &aj) in a.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.column(j)) {
                *o += m * aj;
            }
        }
    }

    /// Returns a copy with columns reordered so that new column `i` is old column `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let data = perm
            .iter()
            .flat_map(|&j| self.column(j).iter().copied())
            .collect();
        let names = perm.iter().map(|&j| self.names[j].clone()).collect();
        Self::with_names(self.bands, self.endmembers, data, names)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-pixel abundances on the unit simplex, `endmembers x pixels`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix {
    inner: PixelMatrix,
}

impl AbundanceMatrix {
    /// Validates non-negativity and sum-to-one, clamping entries within
    /// [`ANC_TOLERANCE`] below zero.
    pub fn new(mut matrix: PixelMatrix) -> Result<Self> {
        let p = matrix.channels();
        for (n, col) in matrix.data_mut().chunks_exact_mut(p).enumerate() {
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > ASC_TOLERANCE {
                return Err(Error::invalid(format!(
                    "abundance column {n} sums to {sum}"
                )));
            }
            for v in col.iter_mut() {
                if *v < -ANC_TOLERANCE || !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "abundance column {n} has entry {v}"
                    )));
                }
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(Self { inner: matrix })
    }

    pub(crate) fn from_matrix_unchecked(matrix: PixelMatrix) -> Self {
        Self { inner: matrix }
    }

    pub fn endmembers(&self) -> usize {
        self.inner.channels()
    }

    pub fn as_matrix(&self) -> &PixelMatrix {
        &self.inner
    }

    pub fn into_matrix(self) -> PixelMatrix {
        self.inner
    }

    /// Largest column-sum deviation from one and the smallest entry.
    pub fn simplex_violation(&self) -> (f64, f64) {
        simplex_violation(&self.inner)
    }
}

/// Largest `|sum - 1|` over columns and the smallest entry of a matrix.
pub fn simplex_violation(m: &PixelMatrix) -> (f64, f64) {
    m.data()
        .chunks_exact(m.channels())
        .fold((0.0f64, f64::INFINITY), |(dev, lo), col| {
            let s: f64 = col.iter().sum();
            let cmin = col.iter().copied().fold(f64::INFINITY, f64::min);
            (dev.max((s - 1.0).abs()), lo.min(cmin))
        })
}

impl Deref for AbundanceMatrix {
    type Target = PixelMatrix;

    fn deref(&self) -> &PixelMatrix {
        &self.inner
    }
}

/// `Y = M A`.
pub fn mix(endmembers: &EndmemberMatrix, abundances: &PixelMatrix) -> Result<PixelMatrix> {
    if abundances.channels() != endmembers.endmembers() {
        return Err(Error::shape(format!(
            "endmember matrix has {} columns but abundances have {} rows",
            endmembers.endmembers(),
            abundances.channels()
        )));
    }
    let l = endmembers.bands();
    let mut out = PixelMatrix::zeros(l, abundances.rows(), abundances.cols());
    for (n, y) in out.data_mut().chunks_exact_mut(l).enumerate() {
        endmembers.apply(abundances.pixel(n), y);
    }
    Ok(out)
}

/// Adds i.i.d. zero-mean Gaussian noise scaled so that the total signal to
/// noise energy ratio is `snr_db`. Samples come from a ChaCha8 stream seeded
/// with `seed`, drawn in storage order through the ziggurat normal sampler.
/// `snr_db = +inf` returns the input unchanged.
pub fn add_noise_snr(y: &PixelMatrix, snr_db: f64, seed: u64) -> Result<PixelMatrix> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("SNR {snr_db} dB is not usable")));
    }
    if snr_db == f64::INFINITY {
        return Ok(y.clone());
    }
    let sigma = noise_sigma_for_snr(y, snr_db);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = y.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    Ok(out)
}

/// Noise standard deviation giving `snr_db` for signal `y`.
pub fn noise_sigma_for_snr(y: &PixelMatrix, snr_db: f64) -> f64 {
    let energy: f64 = y.data().iter().map(|v| v * v).sum();
    (energy / (y.data().len() as f64 * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `10 log10(||clean||^2 / ||noisy - clean||^2)`.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let signal: f64 = clean.iter().map(|v| v * v).sum();
    let noise: f64 = clean.iter().zip(noisy).map(|(c, n)| (n - c).powi(2)).sum();
    10.0 * (signal / noise).log10()
}

fn check_same(a: &PixelMatrix, b: &PixelMatrix, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "{what}: {} vs {}",
            a.shape_str(),
            b.shape_str()
        )));
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Abundance RMSE, `sqrt(sum_i ||a_i - â_i||^2 / (N P))`.
pub fn rmse(truth: &PixelMatrix, estimate: &PixelMatrix) -> Result<f64> {
    check_same(truth, estimate, "rmse")?;
    Ok((squared_distance(truth.data(), estimate.data()) / truth.data().len() as f64).sqrt())
}

/// Reconstruction error, `sqrt(sum_i ||y_i - ŷ_i||^2 / (N L))`.
pub fn reconstruction_error(y: &PixelMatrix, y_hat: &PixelMatrix) -> Result<f64> {
    check_same(y, y_hat, "reconstruction error")?;
    Ok((squared_distance(y.data(), y_hat.data()) / y.data().len() as f64).sqrt())
}

/// The pieces of a reconstruction PSNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    /// `10 log10(MAX^2 / MSE)`, `+inf` when MSE is zero.
    pub db: f64,
    /// Largest entry of the estimate.
    pub max: f64,
    /// Sum over spatial positions of squared spectral-vector errors,
    /// divided by the number of positions only (not by the band count).
    pub mse: f64,
}

pub fn psnr_parts(y_hat: &PixelMatrix, y_ref: &PixelMatrix) -> Result<Psnr> {
    check_same(y_hat, y_ref, "psnr")?;
    let max = y_hat
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mse = squared_distance(y_hat.data(), y_ref.data()) / y_hat.pixels() as f64;
    let db = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max * max / mse).log10()
    };
    Ok(Psnr { db, max, mse })
}

/// Reconstruction PSNR in dB; `+inf` when the images are identical.
pub fn psnr(y_hat: &PixelMatrix, y_ref: &PixelMatrix) -> Result<f64> {
    psnr_parts(y_hat, y_ref).map(|p| p.db)
}

/// Evaluation record. Infinite PSNR is written as the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub rmse: Option<f64>,
    #[serde(with = "opt_float_or_inf")]
    pub psnr: Option<f64>,
    /// The MAX used inside the PSNR.
    pub psnr_max: Option<f64>,
    pub psnr_mse: Option<f64>,
    pub re: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_iteration_rmse: Option<Vec<f64>>,
}

impl MetricsReport {
    /// Computes every metric the inputs allow. `y` is the observed data,
    /// `y_ref` the noiseless reference image for PSNR.
    pub fn compute(
        endmembers: &EndmemberMatrix,
        estimate: &PixelMatrix,
        y: &PixelMatrix,
        truth: Option<&PixelMatrix>,
        y_ref: Option<&PixelMatrix>,
    ) -> Result<Self> {
        let y_hat = mix(endmembers, estimate)?;
        let re = reconstruction_error(y, &y_hat)?;
        let rmse = truth.map(|t| rmse(t, estimate)).transpose()?;
        let reference = match (truth, y_ref) {
            (Some(t), _) => Some(mix(endmembers, t)?),
            (None, Some(r)) => Some(r.clone()),
            (None, None) => None,
        };
        let parts = reference
            .as_ref()
            .map(|r| psnr_parts(&y_hat, r))
            .transpose()?;
        Ok(Self {
            method: None,
            snr_db: None,
            rmse,
            psnr: parts.map(|p| p.db),
            psnr_max: parts.map(|p| p.max),
            psnr_mse: parts.map(|p| p.mse),
            re,
            per_iteration_rmse: None,
        })
    }
}

mod opt_float_or_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() => s.serialize_some(if *x > 0.0 { "inf" } else { "-inf" }),
            Some(x) => s.serialize_some(x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!(
                    "bad PSNR value {other:?}"
                ))),
            },
        }
    }
}
