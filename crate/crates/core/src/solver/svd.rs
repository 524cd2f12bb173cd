//! Thin SVD of the sparse feature matrix.
//!
//! Small problems are factored exactly from a dense copy. When `max_rank` caps the
//! rank below `min(D, n)`, a seeded randomized range finder with power iterations
//! builds an orthonormal basis `Q`, and the projected `QᵀX` is factored through a QR
//! of its transpose so the right factor stays orthonormal to working precision.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FilmError, Result};
use crate::scalar::Real;
use crate::stiefel::orthonormalize;
use crate::vectorizer::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdConfig {
    /// Singular values at or below `rank_tol · σ_max` are discarded.
    pub rank_tol: f64,
    /// Cap on the retained rank; `None` computes the exact thin SVD.
    pub max_rank: Option<usize>,
    pub oversample: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self { rank_tol: 1e-10, max_rank: None, oversample: 10, power_iters: 4, seed: 0 }
    }
}

/// `X ≈ U·diag(σ)·Vᵀ` with `σ` strictly positive and descending.
#[derive(Debug, Clone)]
pub struct SvdFactors<T: Real> {
    pub u: DMatrix<T>,
    pub sigma: Vec<T>,
    pub v: DMatrix<T>,
}

impl<T: Real> SvdFactors<T> {
    /// Effective rank `r`.
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut us = self.u.clone();
        for (j, &s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(s);
        }
        us * self.v.transpose()
    }

    /// Rejects a rank below the requested representation dimension.
    pub fn require_rank(&self, d: usize) -> Result<()> {
        if self.rank() < d {
            return Err(FilmError::RankTooSmall { rank: self.rank(), d });
        }
        Ok(())
    }
}

pub fn thin_svd<T: Real>(x: &FeatureMatrix<T>, config: &SvdConfig) -> Result<SvdFactors<T>> {
    if x.nnz() == 0 {
        return Err(FilmError::Numerical("feature matrix is all zero".into()));
    }
    if x.values().iter().any(|v| !v.finite()) {
        return Err(FilmError::Numerical("feature matrix has nonfinite entries".into()));
    }
    let full = x.nrows().min(x.ncols());
    let (u, sigma, v) = match config.max_rank {
        Some(k) if k == 0 => return Err(FilmError::Config("max_rank must be positive".into())),
        Some(k) if k < full => randomized(x, k, config),
        _ => exact(x),
    }?;
    truncate(u, sigma, v, config.rank_tol)
}

fn exact<T: Real>(x: &FeatureMatrix<T>) -> Result<(DMatrix<T>, Vec<T>, DMatrix<T>)> {
    let dense = x.to_dense();
    let svd = dense.svd(true, true);
    let u = svd.u.ok_or_else(|| FilmError::Numerical("SVD did not return U".into()))?;
    let vt = svd.v_t.ok_or_else(|| FilmError::Numerical("SVD did not return Vᵀ".into()))?;
    Ok((u, svd.singular_values.iter().copied().collect(), vt.transpose()))
}

fn randomized<T: Real>(x: &FeatureMatrix<T>, rank: usize, config: &SvdConfig) -> Result<(DMatrix<T>, Vec<T>, DMatrix<T>)> {
    let full = x.nrows().min(x.ncols());
    let k = (rank + config.oversample).min(full);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let omega = DMatrix::from_fn(x.ncols(), k, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
    let mut q = orthonormalize(x.mul_dense(&omega));
    for _ in 0..config.power_iters {
        let z = orthonormalize(x.tr_mul_dense(&q));
        q = orthonormalize(x.mul_dense(&z));
    }
    // Bᵀ = XᵀQ = Q₂R₂, so B = R₂ᵀQ₂ᵀ and an SVD of the small R₂ᵀ finishes the job.
    let bt = x.tr_mul_dense(&q);
    let qr = bt.qr();
    let (q2, r2) = (qr.q(), qr.r());
    let small = r2.transpose().svd(true, true);
    let ub = small.u.ok_or_else(|| FilmError::Numerical("SVD did not return U".into()))?;
    let wt = small.v_t.ok_or_else(|| FilmError::Numerical("SVD did not return Vᵀ".into()))?;
    let mut order: Vec<usize> = (0..small.singular_values.len()).collect();
    order.sort_by(|&a, &b| small.singular_values[b].partial_cmp(&small.singular_values[a]).unwrap());
    order.truncate(rank);
    let u = &q * ub.select_columns(&order);
    let v = q2 * wt.transpose().select_columns(&order);
    let sigma = order.iter().map(|&i| small.singular_values[i]).collect();
    Ok((u, sigma, v))
}

fn truncate<T: Real>(u: DMatrix<T>, sigma: Vec<T>, v: DMatrix<T>, rank_tol: f64) -> Result<SvdFactors<T>> {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap().then(a.cmp(&b)));
    let smax = sigma[order[0]];
    if !(smax > T::zero()) {
        return Err(FilmError::Numerical("feature matrix has no positive singular value".into()));
    }
    let cut = smax * T::lit(rank_tol);
    order.retain(|&i| sigma[i] > cut);
    let mut u = u.select_columns(&order);
    let mut v = v.select_columns(&order);
    // sign convention: the largest-magnitude entry of each left vector is positive
    for j in 0..u.ncols() {
        let col = u.column(j);
        let pivot = col.iter().copied().fold(T::zero(), |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < T::zero() {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
    Ok(SvdFactors { u, sigma: order.iter().map(|&i| sigma[i]).collect(), v })
}
