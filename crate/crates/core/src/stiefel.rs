//! Feasible descent on the Stiefel manifold `St(d, r) = {P ∈ ℝ^{r×d} : PᵀP = I_d}`.
//!
//! Steps follow the Cayley curve `P(τ) = (I + τ/2·A)⁻¹(I − τ/2·A)·P` with the skew
//! generator `A = G·Pᵀ − P·Gᵀ` built from the Euclidean gradient `G`. The curve stays
//! on the manifold for every real `τ`. Step sizes come from Barzilai–Borwein
//! estimates safeguarded by a Zhang–Hager nonmonotone backtracking search.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FilmError, Result};
use crate::scalar::Real;

/// A matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint<T: Real>(DMatrix<T>);

impl<T: Real> StiefelPoint<T> {
    /// Wraps `m` after checking `‖mᵀm − I‖_F ≤ tol`.
    pub fn new(m: DMatrix<T>, tol: f64) -> Result<Self> {
        if m.ncols() > m.nrows() {
            return Err(FilmError::Shape(format!("{}×{} cannot have orthonormal columns", m.nrows(), m.ncols())));
        }
        let p = Self(m);
        let err = p.feasibility_error().as_f64();
        if !(err <= tol) {
            return Err(FilmError::Numerical(format!("columns are not orthonormal (‖PᵀP − I‖ = {err:e})")));
        }
        Ok(p)
    }

    /// Orthonormal factor of a Gaussian `r × d` matrix.
    pub fn random<R: Rng + ?Sized>(r: usize, d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || d > r {
            return Err(FilmError::Shape(format!("St({d}, {r}) requires 1 <= d <= r")));
        }
        let g = DMatrix::from_fn(r, d, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
        Ok(Self(orthonormalize(g)))
    }

    /// The `r × d` matrix of the first `d` columns of the identity.
    pub fn identity(r: usize, d: usize) -> Self {
        Self(DMatrix::identity(r, d))
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.0
    }

    /// Ambient dimension `r`.
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    /// Number of frame vectors `d`.
    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    /// `‖PᵀP − I‖_F`.
    pub fn feasibility_error(&self) -> T {
        let gram = self.0.tr_mul(&self.0);
        (gram - DMatrix::identity(self.cols(), self.cols())).norm()
    }
}

/// Q factor of a thin QR with columns sign-normalized so `diag(R) ≥ 0`.
pub(crate) fn orthonormalize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn check_pair<T: Real>(p: &StiefelPoint<T>, grad: &DMatrix<T>) -> Result<()> {
    if grad.shape() != p.0.shape() {
        return Err(FilmError::Shape(format!(
            "gradient is {}×{}, point is {}×{}",
            grad.nrows(),
            grad.ncols(),
            p.rows(),
            p.cols()
        )));
    }
    if grad.iter().chain(p.0.iter()).any(|v| !v.finite()) {
        return Err(FilmError::Numerical("nonfinite entry in point or gradient".into()));
    }
    Ok(())
}

/// Gradient of the Lagrangian, `ℱ(P) = G − P·Gᵀ·P`.
pub fn lagrangian_gradient<T: Real>(p: &StiefelPoint<T>, grad: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_pair(p, grad)?;
    let gtp = grad.tr_mul(&p.0);
    Ok(grad - &p.0 * gtp)
}

/// Skew generator `A = W − Wᵀ` with `W = G·Pᵀ`; skew-symmetric bit for bit.
pub fn skew_generator<T: Real>(p: &StiefelPoint<T>, grad: &DMatrix<T>) -> DMatrix<T> {
    let w = grad * p.0.transpose();
    &w - w.transpose()
}

/// Cayley step through the `r × r` system `(I + τ/2·A)·P⁺ = (I − τ/2·A)·P`.
pub fn cayley_update_direct<T: Real>(p: &StiefelPoint<T>, grad: &DMatrix<T>, tau: T) -> Result<StiefelPoint<T>> {
    check_pair(p, grad)?;
    check_tau(tau)?;
    let r = p.rows();
    let half = tau * T::lit(0.5);
    let a = skew_generator(p, grad) * half;
    let eye = DMatrix::<T>::identity(r, r);
    let lhs = &eye + &a;
    let rhs = (&eye - &a) * &p.0;
    let next = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| FilmError::Numerical("I + τ/2·A is singular".into()))?;
    finite_point(next)
}

/// Cayley step through the Sherman–Morrison–Woodbury form
/// `P⁺ = P − τ·F·(I₂d + τ/2·GᵀF)⁻¹·Gᵀ·P` with `F = [∇, P]`, `G = [P, −∇]`.
pub fn cayley_update_smw<T: Real>(p: &StiefelPoint<T>, grad: &DMatrix<T>, tau: T) -> Result<StiefelPoint<T>> {
    check_pair(p, grad)?;
    check_tau(tau)?;
    let (r, d) = (p.rows(), p.cols());
    let mut f = DMatrix::<T>::zeros(r, 2 * d);
    f.columns_mut(0, d).copy_from(grad);
    f.columns_mut(d, d).copy_from(&p.0);
    let mut g = DMatrix::<T>::zeros(r, 2 * d);
    g.columns_mut(0, d).copy_from(&p.0);
    g.columns_mut(d, d).copy_from(&(-grad));
    let small = DMatrix::<T>::identity(2 * d, 2 * d) + g.tr_mul(&f) * (tau * T::lit(0.5));
    let rhs = g.tr_mul(&p.0);
    let x = small
        .lu()
        .solve(&rhs)
        .ok_or_else(|| FilmError::Numerical("I + τ/2·GᵀF is singular".into()))?;
    finite_point(&p.0 - f * x * tau)
}

/// Cayley step used by the optimizer.
///
/// When `2d ≤ r` the generator is restricted to the span of `[P, G]`, which contains
/// its range, so only a `2d × 2d` skew matrix is transformed; otherwise the full
/// `r × r` generator is. Either way the Cayley map is evaluated through a real Schur
/// form with exact rotation blocks, which keeps the result orthonormal for any `τ`
/// where the closed-form solves above lose accuracy as `τ·‖A‖` grows.
pub fn cayley_update<T: Real>(p: &StiefelPoint<T>, grad: &DMatrix<T>, tau: T) -> Result<StiefelPoint<T>> {
    check_pair(p, grad)?;
    check_tau(tau)?;
    let (r, d) = (p.rows(), p.cols());
    let basis = if 2 * d <= r {
        let mut span = DMatrix::<T>::zeros(r, 2 * d);
        span.columns_mut(0, d).copy_from(&p.0);
        span.columns_mut(d, d).copy_from(grad);
        span.qr().q()
    } else {
        DMatrix::identity(r, r)
    };
    let coords = basis.tr_mul(&p.0);
    let w = basis.tr_mul(grad) * coords.transpose();
    let m = &w - w.transpose();
    let Some(delta) = skew_cayley_offset(&m, tau) else {
        return if 2 * d <= r { cayley_update_smw(p, grad, tau) } else { cayley_update_direct(p, grad, tau) };
    };
    finite_point(&p.0 + basis * (delta * coords))
}

/// `(I + τ/2·M)⁻¹(I − τ/2·M) − I` for skew `M`, assembled from the real Schur form
/// `M = Q·T·Qᵀ` with each `2 × 2` block of `T` mapped to its exact rotation.
fn skew_cayley_offset<T: Real>(m: &DMatrix<T>, tau: T) -> Option<DMatrix<T>> {
    let n = m.nrows();
    let (q, t) = nalgebra::linalg::Schur::try_new(m.clone(), T::default_epsilon(), 10_000)?.unpack();
    let tol = t.norm() * T::default_epsilon() * T::lit(64.0);
    let half = tau * T::lit(0.5);
    let mut c = DMatrix::<T>::zeros(n, n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > tol {
            let beta = (t[(i, i + 1)] - t[(i + 1, i)]) * T::lit(0.5) * half;
            let den = T::one() + beta * beta;
            let cos = -(beta * beta + beta * beta) / den;
            let sin = (beta + beta) / den;
            c[(i, i)] = cos;
            c[(i, i + 1)] = -sin;
            c[(i + 1, i)] = sin;
            c[(i + 1, i + 1)] = cos;
            i += 2;
        } else {
            i += 1;
        }
    }
    Some(&q * c * q.transpose())
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if tau.finite() {
        Ok(())
    } else {
        Err(FilmError::Numerical(format!("step size {tau} is not finite")))
    }
}

fn finite_point<T: Real>(m: DMatrix<T>) -> Result<StiefelPoint<T>> {
    if m.iter().any(|v| !v.finite()) {
        return Err(FilmError::Numerical("Cayley step produced nonfinite entries".into()));
    }
    Ok(StiefelPoint(m))
}

/// Frobenius inner product `tr(AᵀB)`.
pub fn trace_inner<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.dot(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BbVariant {
    /// `tr(ΔPᵀΔP) / |tr(ΔPᵀΔℱ)|`
    Long,
    /// `|tr(ΔPᵀΔℱ)| / tr(ΔℱᵀΔℱ)`
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBounds {
    pub tau_min: f64,
    pub tau_max: f64,
    pub fallback: f64,
}

impl Default for StepBounds {
    fn default() -> Self {
        Self { tau_min: 1e-10, tau_max: 1e10, fallback: 1e-3 }
    }
}

/// Barzilai–Borwein step from successive iterate and Lagrangian-gradient differences,
/// clamped to `[tau_min, tau_max]`. Returns `fallback` when the curvature pairing
/// `tr(ΔPᵀΔℱ)` vanishes relative to `‖ΔP‖·‖Δℱ‖`.
pub fn bb_step<T: Real>(dp: &DMatrix<T>, df: &DMatrix<T>, variant: BbVariant, bounds: &StepBounds) -> Result<T> {
    if dp.shape() != df.shape() {
        return Err(FilmError::Shape("ΔP and Δℱ differ in shape".into()));
    }
    let ss = trace_inner(dp, dp).as_f64();
    let yy = trace_inner(df, df).as_f64();
    let sy = trace_inner(dp, df).as_f64().abs();
    let degenerate = !(sy > f64::EPSILON * (ss * yy).sqrt()) || !ss.is_finite() || !yy.is_finite();
    if degenerate {
        return Ok(T::lit(bounds.fallback));
    }
    let tau = match variant {
        BbVariant::Long => ss / sy,
        BbVariant::Short => sy / yy,
    };
    Ok(T::lit(tau.clamp(bounds.tau_min, bounds.tau_max)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonmonotoneConfig {
    /// Averaging weight of the reference value.
    pub eta: f64,
    /// Sufficient-decrease coefficient.
    pub rho: f64,
    /// Backtracking shrink factor.
    pub delta: f64,
    pub max_backtracks: usize,
}

impl Default for NonmonotoneConfig {
    fn default() -> Self {
        Self { eta: 0.85, rho: 1e-4, delta: 0.5, max_backtracks: 20 }
    }
}

/// Zhang–Hager reference value `C_k` with its weight `Q_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonmonotoneReference<T> {
    pub value: T,
    weight: T,
}

impl<T: Real> NonmonotoneReference<T> {
    pub fn new(initial: T) -> Self {
        Self { value: initial, weight: T::one() }
    }

    /// `Q ← ηQ + 1`, `C ← (ηQ_old·C + f) / Q`.
    pub fn absorb(&mut self, f: T, eta: f64) {
        let eta = T::lit(eta);
        let weight = eta * self.weight + T::one();
        self.value = (eta * self.weight * self.value + f) / weight;
        self.weight = weight;
    }

    /// Restores `C ≥ f` after the objective itself has changed.
    pub fn lift(&mut self, f: T) {
        if f > self.value {
            self.value = f;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStatus {
    Accepted,
    /// No candidate met the decrease condition; the smallest step was taken.
    Exhausted,
    /// Every candidate evaluated to a nonfinite objective; the point is unchanged.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T: Real> {
    pub point: StiefelPoint<T>,
    pub tau: T,
    pub value: T,
    pub backtracks: usize,
    pub status: SearchStatus,
}

/// Backtracks along the Cayley curve from `tau0` until
/// `f(P(τ)) ≤ C − ρ·τ·‖ℱ(P)‖²_F`, shrinking `τ ← δτ`.
pub fn nonmonotone_search<T: Real, F>(
    p: &StiefelPoint<T>,
    grad: &DMatrix<T>,
    mut objective: F,
    tau0: T,
    reference: &NonmonotoneReference<T>,
    config: &NonmonotoneConfig,
) -> Result<SearchOutcome<T>>
where
    F: FnMut(&StiefelPoint<T>) -> T,
{
    let lag = lagrangian_gradient(p, grad)?;
    let lag_sq = lag.norm_squared();
    if lag_sq == T::zero() {
        let value = objective(p);
        return Ok(SearchOutcome { point: p.clone(), tau: tau0, value, backtracks: 0, status: SearchStatus::Accepted });
    }
    let rho = T::lit(config.rho);
    let delta = T::lit(config.delta);
    let mut tau = tau0;
    let mut backtracks = 0;
    loop {
        let candidate = cayley_update(p, grad, tau)?;
        let value = objective(&candidate);
        let finite = value.finite();
        if finite && value <= reference.value - rho * tau * lag_sq {
            return Ok(SearchOutcome { point: candidate, tau, value, backtracks, status: SearchStatus::Accepted });
        }
        if backtracks == config.max_backtracks {
            return Ok(if finite {
                SearchOutcome { point: candidate, tau, value, backtracks, status: SearchStatus::Exhausted }
            } else {
                SearchOutcome { point: p.clone(), tau, value, backtracks, status: SearchStatus::Stalled }
            });
        }
        tau *= delta;
        backtracks += 1;
    }
}

/// Step-size memory carried between iterations: the previous point and Lagrangian
/// gradient for the BB secant pair, the alternation counter, and the reference value.
#[derive(Debug, Clone)]
pub struct CayleyState<T: Real> {
    pub previous: Option<(DMatrix<T>, DMatrix<T>)>,
    pub tau: T,
    pub iteration: usize,
    pub reference: Option<NonmonotoneReference<T>>,
}

impl<T: Real> CayleyState<T> {
    pub fn new(bounds: &StepBounds) -> Self {
        Self { previous: None, tau: T::lit(bounds.fallback), iteration: 0, reference: None }
    }

    /// Initial step for the current iteration: alternating BB long/short steps once a
    /// secant pair exists, the fallback otherwise.
    pub fn propose(&self, p: &StiefelPoint<T>, lag: &DMatrix<T>, bounds: &StepBounds) -> Result<T> {
        match &self.previous {
            None => Ok(T::lit(bounds.fallback)),
            Some((p_prev, lag_prev)) => {
                let dp = p.matrix() - p_prev;
                let df = lag - lag_prev;
                let variant = if self.iteration % 2 == 1 { BbVariant::Long } else { BbVariant::Short };
                bb_step(&dp, &df, variant, bounds)
            }
        }
    }

    pub fn remember(&mut self, p: &StiefelPoint<T>, lag: DMatrix<T>, tau: T) {
        self.previous = Some((p.matrix().clone(), lag));
        self.tau = tau;
        self.iteration += 1;
    }
}
