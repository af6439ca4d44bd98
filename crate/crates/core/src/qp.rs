//! Simplex-constrained quadratic programs:
//!
//! ```text
//! minimize ½ aᵀQa + fᵀa   subject to  a ≥ 0,  Σ a = 1
//! ```
//!
//! solved with a primal active-set method. The working set holds the
//! coordinates pinned at zero; each step solves the equality-constrained
//! problem on the free coordinates through its KKT system, then either
//! takes the longest feasible step towards it (pinning the blocking
//! coordinate) or, at a stationary point, frees the coordinate with the most
//! negative multiplier. A projected-gradient loop takes over if a KKT
//! system turns out singular.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, AbundanceMatrix, EndmemberMatrix};
use crate::par;
use crate::tensor::PixelMatrix;

/// Which quantity the prior acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// `H = M`: the denoiser sees reconstructed spectra (L channels).
    ProH,
    /// `H = I`: the denoiser sees abundance maps (P channels).
    ProA,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ProH => "pro-h",
            Mode::ProA => "pro-a",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "pro-h" | "proh" | "h" => Ok(Mode::ProH),
            "pro-a" | "proa" | "a" => Ok(Mode::ProA),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected pro-h or pro-a)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    /// Relative KKT tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

/// One per-pixel subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub f: DVector<f64>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, a: &[f64]) -> f64 {
        objective(&self.q, self.f.as_slice(), a)
    }
}

/// `Q = MᵀM + ρHᵀH` for the given mode.
pub fn subproblem_matrix(gram: &DMatrix<f64>, mode: Mode, rho: f64) -> DMatrix<f64> {
    match mode {
        Mode::ProH => gram * (1.0 + rho),
        Mode::ProA => {
            let p = gram.nrows();
            gram + DMatrix::identity(p, p) * rho
        }
    }
}

/// Assembles the data-fit plus proximal subproblem for one pixel:
/// `Q = MᵀM + ρHᵀH`, `f = -(Mᵀy + ρHᵀx̃)`.
pub fn build_subproblem(
    endmembers: &EndmemberMatrix,
    mode: Mode,
    y: &[f64],
    x_tilde: &[f64],
    rho: f64,
) -> Result<QpProblem> {
    let (l, p) = (endmembers.bands(), endmembers.endmembers());
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::invalid(format!(
            "penalty {rho} must be non-negative"
        )));
    }
    let anchor_len = match mode {
        Mode::ProH => l,
        Mode::ProA => p,
    };
    if y.len() != l || x_tilde.len() != anchor_len {
        return Err(Error::shape(format!(
            "pixel of length {} and anchor of length {} for {l} bands, {p} endmembers in {mode}",
            y.len(),
            x_tilde.len()
        )));
    }
    let q = subproblem_matrix(&endmembers.gram(), mode, rho);
    let mut f = vec![0.0; p];
    linear_term(endmembers, mode, y, x_tilde, rho, &mut f);
    Ok(QpProblem {
        q,
        f: DVector::from_vec(f),
    })
}

pub(crate) fn linear_term(
    endmembers: &EndmemberMatrix,
    mode: Mode,
    y: &[f64],
    x_tilde: &[f64],
    rho: f64,
    out: &mut [f64],
) {
    for (j, o) in out.iter_mut().enumerate() {
        let col = endmembers.column(j);
        let prox = match mode {
            Mode::ProH => dot(col, x_tilde),
            Mode::ProA => x_tilde[j],
        };
        *o = -(dot(col, y) + rho * prox);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub a: Vec<f64>,
    /// Infinity norm of the projected gradient over the active face,
    /// relative to `max(1, |Q|, |f|)`.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

fn objective(q: &DMatrix<f64>, f: &[f64], a: &[f64]) -> f64 {
    let p = a.len();
    let mut quad = 0.0;
    for j in 0..p {
        let mut row = 0.0;
        for i in 0..p {
            row += q[(i, j)] * a[i];
        }
        quad += a[j] * row;
    }
    0.5 * quad + dot(f, a)
}

fn gradient(q: &DMatrix<f64>, f: &[f64], a: &[f64], out: &mut [f64]) {
    let p = a.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = f[i];
        for j in 0..p {
            s += q[(i, j)] * a[j];
        }
        *o = s;
    }
}

/// A validated quadratic term shared by many linear terms.
#[derive(Debug, Clone)]
pub struct SimplexQp {
    q: DMatrix<f64>,
    q_scale: f64,
    lipschitz: f64,
    regularized: bool,
}

impl SimplexQp {
    /// Checks symmetry and semi-definiteness. A rank-deficient `Q` gets a
    /// Tikhonov shift of `1e-10 * trace(Q) / P` and is reported through
    /// [`SimplexQp::regularized`].
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let p = q.nrows();
        if p == 0 || q.ncols() != p {
            return Err(Error::shape(format!(
                "quadratic term is {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("quadratic term has non-finite entries"));
        }
        let q_scale = q.amax().max(1.0);
        let asym = (0..p)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| (q[(i, j)] - q[(j, i)]).abs())
            .fold(0.0, f64::max);
        if asym > 1e-10 * q_scale {
            return Err(Error::invalid(format!(
                "quadratic term is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let sym = (&q + q.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let min_eig = eig.eigenvalues.min();
        let max_eig = eig.eigenvalues.max();
        if min_eig < -1e-10 * q_scale {
            return Err(Error::Indefinite {
                min_eigenvalue: min_eig,
            });
        }
        let mut q = sym;
        let mut regularized = false;
        if min_eig <= 1e-12 * max_eig.max(f64::MIN_POSITIVE) {
            let shift = 1e-10 * q.trace() / p as f64;
            let shift = if shift > 0.0 { shift } else { 1e-10 };
            for i in 0..p {
                q[(i, i)] += shift;
            }
            regularized = true;
            log::debug!("rank-deficient quadratic term, applied shift {shift:e}");
        }
        Ok(Self {
            q,
            q_scale,
            lipschitz: max_eig.max(1e-300),
            regularized,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn solve(&self, f: &[f64], warm_start: Option<&[f64]>, opts: QpOptions) -> QpSolution {
        self.solve_inner(f, warm_start, opts, None)
    }

    /// Like [`SimplexQp::solve`], also recording the objective after every iterate.
    pub fn solve_traced(
        &self,
        f: &[f64],
        warm_start: Option<&[f64]>,
        opts: QpOptions,
    ) -> (QpSolution, Vec<f64>) {
        let mut trace = Vec::new();
        let sol = self.solve_inner(f, warm_start, opts, Some(&mut trace));
        (sol, trace)
    }

    fn scale(&self, f: &[f64]) -> f64 {
        f.iter().fold(self.q_scale, |m, v| m.max(v.abs()))
    }

    fn solve_inner(
        &self,
        f: &[f64],
        warm_start: Option<&[f64]>,
        opts: QpOptions,
        mut trace: Option<&mut Vec<f64>>,
    ) -> QpSolution {
        let p = self.dim();
        assert_eq!(f.len(), p, "linear term length");
        let scale = self.scale(f);
        let mut a = match warm_start {
            Some(w) if w.len() == p && w.iter().all(|v| v.is_finite()) => project_simplex(w),
            _ => vec![1.0 / p as f64; p],
        };
        let mut pinned: Vec<bool> = a.iter().map(|&v| v <= 0.0).collect();
        let mut obj = objective(&self.q, f, &a);
        if let Some(t) = trace.as_deref_mut() {
            t.push(obj);
        }
        let mut grad = vec![0.0; p];
        let mut iterations = 0;
        let mut converged = false;
        let mut fallback = false;

        while iterations < opts.max_iter {
            iterations += 1;
            let free: Vec<usize> = (0..p).filter(|&j| !pinned[j]).collect();
            let Some((target, nu)) = self.face_minimizer(f, &free) else {
                fallback = true;
                break;
            };
            let mut step = vec![0.0; p];
            for (&j, &x) in free.iter().zip(&target) {
                step[j] = x - a[j];
            }
            let step_norm = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if step_norm <= 1e-14 {
                // Stationary on this face: check the multipliers of the pinned set.
                gradient(&self.q, f, &a, &mut grad);
                let mut worst: Option<(usize, f64)> = None;
                for j in (0..p).filter(|&j| pinned[j]) {
                    let mu = grad[j] + nu;
                    if worst.is_none_or(|(_, w)| mu < w) {
                        worst = Some((j, mu));
                    }
                }
                match worst {
                    Some((j, mu)) if mu < -opts.tol * scale => pinned[j] = false,
                    _ => {
                        converged = true;
                        break;
                    }
                }
                continue;
            }
            let mut alpha = 1.0;
            let mut blocking = None;
            for &j in &free {
                if step[j] < 0.0 {
                    let r = -a[j] / step[j];
                    if r < alpha {
                        alpha = r;
                        blocking = Some(j);
                    }
                }
            }
            let mut next: Vec<f64> = a.iter().zip(&step).map(|(x, s)| x + alpha * s).collect();
            if let Some(j) = blocking {
                next[j] = 0.0;
                pinned[j] = true;
            }
            let next_obj = objective(&self.q, f, &next);
            if next_obj.is_nan() || next_obj > obj + 1e-12 * scale.max(obj.abs()) {
                // Rounding has made the face solve unreliable; hand over.
                fallback = true;
                break;
            }
            a = next;
            obj = next_obj;
            if let Some(t) = trace.as_deref_mut() {
                t.push(obj);
            }
        }

        if fallback && !converged {
            let remaining = opts.max_iter.saturating_sub(iterations).max(1);
            let (pa, its) = self.projected_gradient(f, a, remaining, opts.tol * scale, trace);
            a = pa;
            iterations += its;
        }

        finalize(&mut a);
        let kkt = kkt_residual(&self.q, f, &a) / scale;
        let converged = kkt <= opts.tol.max(1e-13);
        QpSolution {
            objective: objective(&self.q, f, &a),
            a,
            kkt_residual: kkt,
            iterations,
            converged,
        }
    }

    /// Minimizer of the objective over `{a : a_j = 0 off `free`, Σ a = 1}`,
    /// with the multiplier of the sum constraint.
    fn face_minimizer(&self, f: &[f64], free: &[usize]) -> Option<(Vec<f64>, f64)> {
        let k = free.len();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        let mut rhs = DVector::zeros(k + 1);
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                kkt[(r, c)] = self.q[(i, j)];
            }
            kkt[(r, k)] = 1.0;
            kkt[(k, r)] = 1.0;
            rhs[r] = -f[i];
        }
        rhs[k] = 1.0;
        let sol = kkt.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let nu = sol[k];
        Some((sol.as_slice()[..k].to_vec(), nu))
    }

    fn projected_gradient(
        &self,
        f: &[f64],
        mut a: Vec<f64>,
        max_iter: usize,
        tol: f64,
        mut trace: Option<&mut Vec<f64>>,
    ) -> (Vec<f64>, usize) {
        let p = a.len();
        let step = 1.0 / self.lipschitz;
        let mut grad = vec![0.0; p];
        let mut obj = objective(&self.q, f, &a);
        for it in 0..max_iter {
            gradient(&self.q, f, &a, &mut grad);
            let trial: Vec<f64> = a.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
            let next = project_simplex(&trial);
            let next_obj = objective(&self.q, f, &next);
            if next_obj > obj {
                return (a, it + 1);
            }
            a = next;
            obj = next_obj;
            if let Some(t) = trace.as_deref_mut() {
                t.push(obj);
            }
            if kkt_residual(&self.q, f, &a) <= tol {
                return (a, it + 1);
            }
        }
        (a, max_iter)
    }
}

/// Clamps rounding-level negatives and restores the unit sum.
fn finalize(a: &mut [f64]) {
    for v in a.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s: f64 = a.iter().sum();
    if s > 0.0 {
        a.iter_mut().for_each(|v| *v /= s);
    } else {
        let p = a.len() as f64;
        a.iter_mut().for_each(|v| *v = 1.0 / p);
    }
}

/// Projected-gradient norm on the simplex: on the support the gradient must
/// be constant, off the support it must not undercut that constant.
fn kkt_residual(q: &DMatrix<f64>, f: &[f64], a: &[f64]) -> f64 {
    let mut g = vec![0.0; a.len()];
    gradient(q, f, a, &mut g);
    let support: Vec<usize> = (0..a.len()).filter(|&j| a[j] > 0.0).collect();
    if support.is_empty() {
        return f64::INFINITY;
    }
    let level = support.iter().map(|&j| g[j]).sum::<f64>() / support.len() as f64;
    (0..a.len()).fold(0.0f64, |m, j| {
        let r = if a[j] > 0.0 {
            (g[j] - level).abs()
        } else {
            (level - g[j]).max(0.0)
        };
        m.max(r)
    })
}

/// Euclidean projection onto the unit simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Solves one standalone problem.
pub fn solve_simplex_qp(problem: &QpProblem, opts: QpOptions) -> Result<QpSolution> {
    if problem.q.nrows() != problem.f.len() {
        return Err(Error::shape(format!(
            "quadratic term {}x{} with linear term of length {}",
            problem.q.nrows(),
            problem.q.ncols(),
            problem.f.len()
        )));
    }
    let solver = SimplexQp::new(problem.q.clone())?;
    Ok(solver.solve(problem.f.as_slice(), None, opts))
}

/// Outcome of a batch of per-pixel solves.
#[derive(Debug, Clone)]
pub struct FclsResult {
    pub abundances: AbundanceMatrix,
    /// Pixels whose solve hit the iteration cap; they carry the best
    /// feasible iterate.
    pub unconverged: Vec<usize>,
    pub regularized: bool,
}

/// Fully constrained least squares: each column minimizes `½‖y - Ma‖²` on
/// the simplex.
pub fn fcls(endmembers: &EndmemberMatrix, y: &PixelMatrix, opts: QpOptions) -> Result<FclsResult> {
    if y.channels() != endmembers.bands() {
        return Err(Error::shape(format!(
            "cube has {} bands, endmembers have {}",
            y.channels(),
            endmembers.bands()
        )));
    }
    let solver = SimplexQp::new(endmembers.gram())?;
    let p = endmembers.endmembers();
    let mut out = PixelMatrix::zeros(p, y.rows(), y.cols());
    let mut flags = vec![false; y.pixels()];
    solve_pixels(
        &solver,
        out.data_mut(),
        &mut flags,
        p,
        |n, f| {
            endmembers.transpose_apply(y.pixel(n), f);
            f.iter_mut().for_each(|v| *v = -*v);
        },
        None,
        opts,
    );
    let unconverged: Vec<usize> = flags
        .iter()
        .enumerate()
        .filter(|(_, &u)| u)
        .map(|(i, _)| i)
        .collect();
    if !unconverged.is_empty() {
        log::warn!(
            "{} of {} pixel solves hit the iteration cap",
            unconverged.len(),
            y.pixels()
        );
    }
    Ok(FclsResult {
        abundances: AbundanceMatrix::from_matrix_unchecked(out),
        unconverged,
        regularized: solver.regularized(),
    })
}

/// Fills `out` (column per pixel) by solving one QP per pixel with the
/// linear term produced by `linear(pixel, f)`. Marks non-converged pixels in
/// `flags`.
pub(crate) fn solve_pixels<F>(
    solver: &SimplexQp,
    out: &mut [f64],
    flags: &mut [bool],
    p: usize,
    linear: F,
    warm: Option<&PixelMatrix>,
    opts: QpOptions,
) where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    const PIXELS_PER_TASK: usize = 64;
    let results = par::map_range(out.len().div_ceil(p * PIXELS_PER_TASK), |task| {
        let start = task * PIXELS_PER_TASK;
        let end = (start + PIXELS_PER_TASK).min(out.len() / p);
        let mut f = vec![0.0; p];
        let mut block = Vec::with_capacity((end - start) * p);
        let mut block_flags = Vec::with_capacity(end - start);
        for n in start..end {
            linear(n, &mut f);
            let sol = solver.solve(&f, warm.map(|w| w.pixel(n)), opts);
            block.extend_from_slice(&sol.a);
            block_flags.push(!sol.converged);
        }
        (block, block_flags)
    });
    let mut offset = 0;
    for (block, block_flags) in results {
        out[offset * p..offset * p + block.len()].copy_from_slice(&block);
        flags[offset..offset + block_flags.len()].copy_from_slice(&block_flags);
        offset += block_flags.len();
    }
}
