//! Low-rank metric learning from triplet constraints.
//!
//! With the thin SVD `X = UΣVᵀ`, the representation `Y = √S·Pᵀ·Vᵀ` is parameterized
//! by a Stiefel point `P ∈ St(d, r)` and nonnegative scales `s`. The kernels here
//! evaluate the active set, the working matrix `K = −VᵀCTΛV`, the smoothed objective
//! `f₂`, its gradient and the closed-form scales without forming any `n × n` product.

mod fit;
mod svd;

pub use fit::{
    fit, fit_minibatch, per_iteration_costs, BatchConfig, CostReport, FitResult, IterationRecord, KindCost,
    SolverConfig, Termination, TrainingTrace, UpdateTimings,
};
pub use svd::{thin_svd, SvdConfig, SvdFactors};

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::error::{FilmError, Result};
use crate::scalar::Real;
use crate::sparse::CscMatrix;
use crate::stiefel::StiefelPoint;
use crate::triplets::{AnchorWeights, ConstraintMatrix};

/// `μ(x) = log(1 + eˣ)`, the smooth surrogate of `max(0, x)`.
pub fn smooth_hinge<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `σ(x) = 1 / (1 + e⁻ˣ)`, the derivative of [`smooth_hinge`].
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// The constant `W = VᵀCT`, kept only for anchors (columns of `C` with entries).
#[derive(Debug, Clone)]
pub struct ConstraintProjection<T: Real> {
    n: usize,
    anchors: Vec<usize>,
    /// `r × m`: column `a` is `W[:, anchors[a]]`.
    w: DMatrix<T>,
    /// `m × r`: row `a` is `V[anchors[a], :]`.
    v_rows: DMatrix<T>,
}

impl<T: Real> ConstraintProjection<T> {
    pub fn new(v: &DMatrix<T>, c: &ConstraintMatrix<T>, t: &AnchorWeights<T>) -> Result<Self> {
        let n = v.nrows();
        if c.n() != n || t.len() != n {
            return Err(FilmError::Shape(format!(
                "V has {n} rows but C is {}×{} and T has {} entries",
                c.n(),
                c.n(),
                t.len()
            )));
        }
        let cm: &CscMatrix<T> = c.matrix();
        let anchors: Vec<usize> = (0..n).filter(|&i| !cm.column(i).0.is_empty()).collect();
        let r = v.ncols();
        let mut w = DMatrix::zeros(r, anchors.len());
        for (a, &i) in anchors.iter().enumerate() {
            let (rows, vals) = cm.column(i);
            let mut col = w.column_mut(a);
            for (&row, &val) in rows.iter().zip(vals) {
                col.axpy(val, &v.row(row).transpose(), T::one());
            }
            col.scale_mut(t.as_slice()[i]);
        }
        let v_rows = v.select_rows(&anchors);
        Ok(Self { n, anchors, w, v_rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.w.nrows()
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    /// Dense `VᵀCT` (`r × n`), for inspection and small problems.
    pub fn to_dense(&self) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.rank(), self.n);
        for (a, &i) in self.anchors.iter().enumerate() {
            out.set_column(i, &self.w.column(a));
        }
        out
    }

    /// Bytes held by the working matrices.
    pub fn working_bytes(&self) -> usize {
        (self.w.len() + self.v_rows.len()) * std::mem::size_of::<T>() + self.anchors.len() * std::mem::size_of::<usize>()
    }
}

/// Margin violations `z` and activity flags `λ_i = [z_i + m > 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet<T> {
    pub z: Vec<T>,
    pub active: Vec<bool>,
    pub margin: T,
}

impl<T: Real> ActiveSet<T> {
    pub fn from_violations(z: Vec<T>, margin: T) -> Self {
        let active = z.iter().map(|&zi| zi + margin > T::zero()).collect();
        Self { z, active, margin }
    }

    /// `tr(Λ)`.
    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// `z = diag(−V·PSPᵀ·VᵀCT)`, evaluated per anchor as
/// `z_i = −Σ_a s_a (V_i P)_a (Pᵀ W_i)_a` in `O(nrd)`.
pub fn update_active_set<T: Real>(
    proj: &ConstraintProjection<T>,
    p: &StiefelPoint<T>,
    s: &ScaleVector<T>,
    margin: T,
) -> Result<ActiveSet<T>> {
    if p.rows() != proj.rank() || s.len() != p.cols() {
        return Err(FilmError::Shape(format!(
            "P is {}×{}, s has {} entries, V has rank {}",
            p.rows(),
            p.cols(),
            s.len(),
            proj.rank()
        )));
    }
    let vp = &proj.v_rows * p.matrix(); // m × d
    let ptw = p.matrix().tr_mul(&proj.w); // d × m
    let mut z = vec![T::zero(); proj.n];
    for (a, &i) in proj.anchors.iter().enumerate() {
        let mut acc = T::zero();
        for (k, &sk) in s.as_slice().iter().enumerate() {
            acc += sk * vp[(a, k)] * ptw[(k, a)];
        }
        z[i] = -acc;
    }
    Ok(ActiveSet::from_violations(z, margin))
}

/// `K = −VᵀCTΛV` (`r × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingMatrix<T: Real>(pub DMatrix<T>);

impl<T: Real> WorkingMatrix<T> {
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    /// `k_i = −p_iᵀ K p_i` for every column of `P`.
    pub fn curvatures(&self, p: &StiefelPoint<T>) -> Vec<T> {
        let kp = &self.0 * p.matrix();
        (0..p.cols()).map(|i| -p.matrix().column(i).dot(&kp.column(i))).collect()
    }
}

/// `K = −(VᵀCT)·(ΛV)` restricted to active anchors, `O(nr²)`.
pub fn update_working_matrix<T: Real>(proj: &ConstraintProjection<T>, active: &ActiveSet<T>) -> Result<WorkingMatrix<T>> {
    if active.active.len() != proj.n {
        return Err(FilmError::Shape(format!("active set has {} flags, expected {}", active.active.len(), proj.n)));
    }
    let keep: Vec<usize> = (0..proj.anchors.len()).filter(|&a| active.active[proj.anchors[a]]).collect();
    let r = proj.rank();
    if keep.is_empty() {
        return Ok(WorkingMatrix(DMatrix::zeros(r, r)));
    }
    let w = proj.w.select_columns(&keep);
    let v = proj.v_rows.select_rows(&keep);
    Ok(WorkingMatrix(-(w * v)))
}

/// Nonnegative scales `s` of `BᵀB = PSPᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector<T>(Vec<T>);

impl<T: Real> ScaleVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= T::zero()) || !v.finite()) {
            return Err(FilmError::Numerical("scales must be finite and nonnegative".into()));
        }
        Ok(Self(values))
    }

    pub fn ones(d: usize) -> Self {
        Self(vec![T::one(); d])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `s_i* = max(0, −p_iᵀKp_i)`.
pub fn closed_form_scales<T: Real>(p: &StiefelPoint<T>, k: &WorkingMatrix<T>) -> ScaleVector<T> {
    ScaleVector(k.curvatures(p).into_iter().map(|ki| ki.max(T::zero())).collect())
}

fn check_working<T: Real>(p: &StiefelPoint<T>, k: &WorkingMatrix<T>) -> Result<()> {
    if k.0.nrows() != p.rows() || k.0.ncols() != p.rows() {
        return Err(FilmError::Shape(format!("K is {}×{}, P has {} rows", k.0.nrows(), k.0.ncols(), p.rows())));
    }
    if k.0.iter().any(|v| !v.finite()) {
        return Err(FilmError::Numerical("working matrix has nonfinite entries".into()));
    }
    Ok(())
}

/// Smoothed objective `f₂(P) = −½ Σ k_i μ(k_i) + m·tr(Λ)`.
pub fn objective_f2<T: Real>(p: &StiefelPoint<T>, k: &WorkingMatrix<T>, active: &ActiveSet<T>) -> Result<T> {
    check_working(p, k)?;
    Ok(smoothed_value(&k.curvatures(p), active))
}

pub(crate) fn smoothed_value<T: Real>(curv: &[T], active: &ActiveSet<T>) -> T {
    let half = T::lit(0.5);
    let smooth = curv.iter().fold(T::zero(), |acc, &ki| acc - half * ki * smooth_hinge(ki));
    smooth + margin_term(active)
}

/// Unsmoothed `f₁(P) = ½ Σ (p_iᵀKp_i)·max(0, −p_iᵀKp_i) + m·tr(Λ)`.
pub fn objective_f1<T: Real>(p: &StiefelPoint<T>, k: &WorkingMatrix<T>, active: &ActiveSet<T>) -> Result<T> {
    check_working(p, k)?;
    let half = T::lit(0.5);
    let hinge = k.curvatures(p).into_iter().fold(T::zero(), |acc, ki| acc + half * (-ki) * ki.max(T::zero()));
    Ok(hinge + margin_term(active))
}

/// Hinge objective `Σ_i (z_i + m)·λ_i = −tr(YᵀYCTΛ) + m·tr(Λ)` at the current active set.
pub fn hinge_objective<T: Real>(active: &ActiveSet<T>) -> T {
    active
        .z
        .iter()
        .zip(&active.active)
        .filter(|(_, &a)| a)
        .fold(T::zero(), |acc, (&z, _)| acc + z + active.margin)
}

fn margin_term<T: Real>(active: &ActiveSet<T>) -> T {
    active.margin * T::lit(active.count() as f64)
}

/// `∇f₂(P) = −(K + Kᵀ)·P·diag(q)` with `q_i = −½(μ(k_i) + k_i σ(k_i))`, `Λ` held fixed.
pub fn gradient_f2<T: Real>(p: &StiefelPoint<T>, k: &WorkingMatrix<T>) -> Result<DMatrix<T>> {
    check_working(p, k)?;
    let half = T::lit(0.5);
    let q: Vec<T> = k
        .curvatures(p)
        .into_iter()
        .map(|ki| -half * (smooth_hinge(ki) + ki * sigmoid(ki)))
        .collect();
    let sym = &k.0 + k.0.transpose();
    let mut g = -(sym * p.matrix());
    for (j, qj) in q.into_iter().enumerate() {
        g.column_mut(j).scale_mut(qj);
    }
    Ok(g)
}

const MODEL_MAGIC: &[u8; 8] = b"FILMMAP\0";
const MODEL_VERSION: u32 = 1;

/// Learned projection `L = √S·Pᵀ·Σ⁻¹·Uᵀ` (`d × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMap<T: Real> {
    l: DMatrix<T>,
}

impl<T: Real> MetricMap<T> {
    pub fn new(l: DMatrix<T>) -> Result<Self> {
        if l.iter().any(|v| !v.finite()) {
            return Err(FilmError::Numerical("metric map has nonfinite entries".into()));
        }
        Ok(Self { l })
    }

    /// Minimum-norm map for `Y = √S·Pᵀ·Vᵀ`.
    pub fn from_factors(svd: &SvdFactors<T>, p: &StiefelPoint<T>, s: &ScaleVector<T>) -> Result<Self> {
        let mut left = p.matrix().transpose(); // d × r
        for (i, &si) in s.as_slice().iter().enumerate() {
            left.row_mut(i).scale_mut(si.sqrt());
        }
        for (j, &sj) in svd.sigma.iter().enumerate() {
            left.column_mut(j).scale_mut(T::one() / sj);
        }
        Self::new(left * svd.u.transpose())
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.l
    }

    /// Output dimension `d`.
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Input dimension `D`.
    pub fn input_dim(&self) -> usize {
        self.l.ncols()
    }

    /// `L·X` for sparse `X`.
    pub fn apply(&self, x: &CscMatrix<T>) -> Result<DMatrix<T>> {
        if x.nrows() != self.input_dim() {
            return Err(FilmError::Shape(format!("features have {} rows, map expects {}", x.nrows(), self.input_dim())));
        }
        Ok(x.left_mul_dense(&self.l))
    }

    pub fn cast<U: Real>(&self) -> MetricMap<U> {
        MetricMap { l: self.l.map(|v| U::lit(v.as_f64())) }
    }

    /// Binary layout: magic, version, `d`, `D`, seed, 32-byte config digest, then
    /// `L` row-major as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W, seed: u64, digest: &[u8; 32]) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u64::<LittleEndian>(self.dim() as u64)?;
        w.write_u64::<LittleEndian>(self.input_dim() as u64)?;
        w.write_u64::<LittleEndian>(seed)?;
        w.write_all(digest)?;
        for i in 0..self.dim() {
            for j in 0..self.input_dim() {
                w.write_f64::<LittleEndian>(self.l[(i, j)].as_f64())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`MetricMap::write_to`]; returns the map, seed and digest.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, u64, [u8; 32])> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(FilmError::Format("not a metric map file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(FilmError::Format(format!("unsupported metric map version {version}")));
        }
        let d = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u64::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest)?;
        let mut l = DMatrix::zeros(d, dim);
        for i in 0..d {
            for j in 0..dim {
                l[(i, j)] = T::lit(r.read_f64::<LittleEndian>()?);
            }
        }
        Ok((Self::new(l)?, seed, digest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplets::{Triplet, TripletSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn hinge_and_sigmoid_values() {
        assert!((smooth_hinge(0.0_f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(0.0_f64), 0.5);
        // log(1 + e^10) = 10 + log1p(e^-10)
        assert!((smooth_hinge(10.0_f64) - 10.000_045_398_899_218).abs() < 1e-12);
        assert!((smooth_hinge(-10.0_f64) - 4.539_889_921_686_465e-5).abs() < 1e-17);
        assert!(smooth_hinge(800.0_f64).is_finite() && smooth_hinge(-800.0_f64) >= 0.0);
        assert_eq!(sigmoid(-800.0_f64), 0.0);
        assert_eq!(sigmoid(800.0_f64), 1.0);
    }

    #[test]
    fn hinge_derivative_is_sigmoid() {
        for &x in &[-3.0_f64, -0.2, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (smooth_hinge(x + h) - smooth_hinge(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-9);
        }
    }

    fn projection(n: usize, r: usize, ts: &TripletSet, rng: &mut ChaCha8Rng) -> ConstraintProjection<f64> {
        let v = crate::stiefel::orthonormalize(gaussian(n, r, rng));
        let c = ConstraintMatrix::build(ts, n).unwrap();
        let t = AnchorWeights::build(ts, n).unwrap();
        ConstraintProjection::new(&v, &c, &t).unwrap()
    }

    #[test]
    fn empty_constraints_give_zero_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = projection(6, 4, &TripletSet::default(), &mut rng);
        let p = StiefelPoint::random(4, 2, &mut rng).unwrap();
        let act = update_active_set(&proj, &p, &ScaleVector::ones(2), 1.0).unwrap();
        assert!(act.z.iter().all(|&z| z == 0.0));
        assert_eq!(act.count(), 6);
        let act0 = update_active_set(&proj, &p, &ScaleVector::ones(2), 0.0).unwrap();
        assert_eq!(act0.count(), 0);
        let k = update_working_matrix(&proj, &act).unwrap();
        assert_eq!(k.0.norm(), 0.0);
    }

    #[test]
    fn zero_scales_give_zero_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ts = TripletSet::new(vec![Triplet::new(0, 1, 2).unwrap(), Triplet::new(3, 4, 5).unwrap()]);
        let proj = projection(6, 4, &ts, &mut rng);
        let p = StiefelPoint::random(4, 2, &mut rng).unwrap();
        let act = update_active_set(&proj, &p, &ScaleVector::new(vec![0.0, 0.0]).unwrap(), 0.5).unwrap();
        assert!(act.z.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn inactive_set_zeroes_working_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = TripletSet::new(vec![Triplet::new(0, 1, 2).unwrap()]);
        let proj = projection(5, 3, &ts, &mut rng);
        let act = ActiveSet::from_violations(vec![-2.0; 5], 1.0);
        assert_eq!(update_working_matrix(&proj, &act).unwrap().0.norm(), 0.0);
    }

    #[test]
    fn objective_with_zero_working_matrix() {
        let p = StiefelPoint::<f64>::identity(4, 2);
        let k = WorkingMatrix(DMatrix::zeros(4, 4));
        let act = ActiveSet::from_violations(vec![0.0, -3.0, 0.5], 2.0);
        assert_eq!(objective_f2(&p, &k, &act).unwrap(), 2.0 * 2.0);
        let none = ActiveSet::from_violations(vec![-1.0; 3], 0.5);
        assert_eq!(objective_f2(&p, &k, &none).unwrap(), 0.0);
        let g = gradient_f2(&p, &k).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn objective_matches_scalar_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = StiefelPoint::random(7, 3, &mut rng).unwrap();
        let k = WorkingMatrix(gaussian(7, 7, &mut rng));
        let act = ActiveSet::from_violations(vec![0.1, -5.0, 2.0, -0.3], 0.4);
        let mut want = 0.4 * 3.0;
        for i in 0..3 {
            let pi = p.matrix().column(i);
            let ki = -(pi.transpose() * &k.0 * pi)[(0, 0)];
            want += -0.5 * ki * (1.0 + ki.exp()).ln();
        }
        let got = objective_f2(&p, &k, &act).unwrap();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn gradient_on_eigenvectors_is_scaled_eigenvectors() {
        // K = −diag(3, 2, 1, 0.5); P = first two basis vectors
        let k = WorkingMatrix(-DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0, 0.5])));
        let p = StiefelPoint::identity(4, 2);
        let g = gradient_f2(&p, &k).unwrap();
        for (j, lam) in [3.0_f64, 2.0].into_iter().enumerate() {
            let q = -0.5 * (smooth_hinge(lam) + lam * sigmoid(lam));
            // −(K + Kᵀ) p_j q_j = 2λ q_j e_j
            let mut want = nalgebra::DVector::zeros(4);
            want[j] = 2.0 * lam * q;
            assert!((g.column(j) - want).norm() < 1e-14);
        }
    }

    #[test]
    fn scales_identity_cases() {
        let p = StiefelPoint::<f64>::identity(5, 3);
        let pos = closed_form_scales(&p, &WorkingMatrix(DMatrix::identity(5, 5)));
        assert_eq!(pos.as_slice(), &[0.0; 3]);
        let neg = closed_form_scales(&p, &WorkingMatrix(-DMatrix::identity(5, 5)));
        assert_eq!(neg.as_slice(), &[1.0; 3]);
    }

    #[test]
    fn nonfinite_working_matrix_is_rejected() {
        let p = StiefelPoint::<f64>::identity(3, 1);
        let mut k = DMatrix::zeros(3, 3);
        k[(0, 1)] = f64::INFINITY;
        let act = ActiveSet::from_violations(vec![0.0], 1.0);
        assert!(objective_f2(&p, &WorkingMatrix(k), &act).is_err());
    }

    #[test]
    fn metric_map_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = MetricMap::new(gaussian(3, 7, &mut rng)).unwrap();
        let mut buf = Vec::new();
        map.write_to(&mut buf, 42, &[7u8; 32]).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 * 3 + 32 + 8 * 21);
        let (back, seed, digest) = MetricMap::<f64>::read_from(&buf[..]).unwrap();
        assert_eq!(back, map);
        assert_eq!((seed, digest), (42, [7u8; 32]));
        assert!(MetricMap::<f64>::read_from(&b"NOTAMAP\0...."[..]).is_err());
    }
}
