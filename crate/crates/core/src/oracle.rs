//! Brute-force dense reference implementations.
//!
//! Everything here materializes the full matrices (`C`, `T`, `Λ`, `K`, `ỹ_i`) and
//! evaluates formulas literally, one triplet or one entry at a time. It shares no
//! kernels with [`crate::solver`] and is meant for tests and desk-scale checks only.

use nalgebra::{DMatrix, DVector};

use crate::error::{FilmError, Result};
use crate::triplets::TripletSet;

/// Largest sample count accepted by the oracle.
pub const MAX_SAMPLES: usize = 64;
/// Largest feature dimension accepted by the oracle.
pub const MAX_FEATURES: usize = 128;

fn ln1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

/// A desk-scale problem with every intermediate stored densely.
#[derive(Debug, Clone)]
pub struct DenseInstance {
    pub x: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub triplets: TripletSet,
    pub p: DMatrix<f64>,
    pub s: Vec<f64>,
    pub margin: f64,
    pub c: DMatrix<f64>,
    pub t: DMatrix<f64>,
    /// `Y = diag(√s)·Pᵀ·Vᵀ`, `d × n`.
    pub y: DMatrix<f64>,
    /// Column `i` is `ỹ_i = Σ_{t ∈ T_i} (y_k − y_j)`.
    pub y_tilde: DMatrix<f64>,
}

/// Intermediates of one alternating cycle, all computed densely.
#[derive(Debug, Clone)]
pub struct DenseIntermediates {
    pub z: Vec<f64>,
    pub lambda: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub scales: Vec<f64>,
    pub f1: f64,
    pub f2: f64,
    pub grad_f2: DMatrix<f64>,
}

impl DenseInstance {
    /// `x` is `D × n`, `v` is `n × r`, `p` is `r × d`, `s` has `d` entries.
    pub fn new(
        x: DMatrix<f64>,
        v: DMatrix<f64>,
        triplets: TripletSet,
        p: DMatrix<f64>,
        s: Vec<f64>,
        margin: f64,
    ) -> Result<Self> {
        let n = x.ncols();
        if n > MAX_SAMPLES || x.nrows() > MAX_FEATURES {
            return Err(FilmError::Config(format!(
                "oracle is limited to n <= {MAX_SAMPLES} and D <= {MAX_FEATURES}"
            )));
        }
        if v.nrows() != n || p.nrows() != v.ncols() || s.len() != p.ncols() {
            return Err(FilmError::Shape("oracle inputs do not conform".into()));
        }
        if triplets.min_samples() > n {
            return Err(FilmError::Bounds { index: triplets.min_samples() - 1, len: n });
        }
        let mut c = DMatrix::zeros(n, n);
        for t in triplets.triplets() {
            c[(t.positive, t.anchor)] += 1.0;
            c[(t.negative, t.anchor)] -= 1.0;
        }
        let mut t = DMatrix::zeros(n, n);
        for i in 0..n {
            t[(i, i)] = 1.0 / (triplets.anchor_count(i) as f64 + 1.0);
        }
        let d = p.ncols();
        let mut y = DMatrix::zeros(d, n);
        for a in 0..d {
            for i in 0..n {
                let mut acc = 0.0;
                for q in 0..p.nrows() {
                    acc += p[(q, a)] * v[(i, q)];
                }
                y[(a, i)] = s[a].sqrt() * acc;
            }
        }
        let mut y_tilde = DMatrix::zeros(d, n);
        for trip in triplets.triplets() {
            for a in 0..d {
                y_tilde[(a, trip.anchor)] += y[(a, trip.negative)] - y[(a, trip.positive)];
            }
        }
        Ok(Self { x, v, triplets, p, s, margin, c, t, y, y_tilde })
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// `z_i = T_ii · y_iᵀ ỹ_i`.
    pub fn violations(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.t[(i, i)] * self.y.column(i).dot(&self.y_tilde.column(i))).collect()
    }

    /// `diag(−YᵀY·C·T)` from the full `n × n` product.
    pub fn violations_from_gram(&self) -> Vec<f64> {
        let m = -(self.y.transpose() * &self.y) * &self.c * &self.t;
        m.diagonal().iter().copied().collect()
    }

    /// Runs every step of the cycle densely.
    pub fn pipeline(&self) -> DenseIntermediates {
        let n = self.n();
        let z = self.violations();
        let mut lambda = DMatrix::zeros(n, n);
        for i in 0..n {
            if z[i] + self.margin > 0.0 {
                lambda[(i, i)] = 1.0;
            }
        }
        let k = -(self.v.transpose() * &self.c * &self.t * &lambda * &self.v);
        let d = self.p.ncols();
        let curv: Vec<f64> = (0..d)
            .map(|a| {
                let pa = self.p.column(a);
                -(pa.transpose() * &k * pa)[(0, 0)]
            })
            .collect();
        let scales: Vec<f64> = curv.iter().map(|&c| c.max(0.0)).collect();
        let margin_term = self.margin * lambda.trace();

        // f₁ from the matrix form with B = √S*·Pᵀ, including the ½‖s*‖² penalty
        let mut b = self.p.transpose();
        for a in 0..d {
            b.row_mut(a).scale_mut(scales[a].sqrt());
        }
        let btb = b.transpose() * &b;
        let vctlv = self.v.transpose() * &self.c * &self.t * &lambda * &self.v;
        let penalty: f64 = scales.iter().map(|s| 0.5 * s * s).sum();
        let f1 = -(btb * vctlv).trace() + penalty + margin_term;

        let mut f2 = margin_term;
        for &c in &curv {
            f2 -= 0.5 * c * ln1p_exp(c);
        }

        let r = self.p.nrows();
        let mut grad_f2 = DMatrix::zeros(r, d);
        for a in 0..d {
            let q = -0.5 * (ln1p_exp(curv[a]) + curv[a] * logistic(curv[a]));
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..r {
                    acc += (k[(i, j)] + k[(j, i)]) * self.p[(j, a)];
                }
                grad_f2[(i, a)] = -acc * q;
            }
        }
        DenseIntermediates { z, lambda, k, scales, f1, f2, grad_f2 }
    }
}

enum Order {
    Forward,
    Reverse,
}

fn triplet_loss(y: &DMatrix<f64>, ts: &TripletSet, margin: f64, order: Order) -> f64 {
    let sim = |a: usize, b: usize| y.column(a).dot(&y.column(b));
    let mut anchors: Vec<usize> = ts.anchors().collect();
    if let Order::Reverse = order {
        anchors.reverse();
    }
    let mut total = 0.0;
    for i in anchors {
        let mut group: Vec<_> = ts.anchored_at(i).collect();
        if let Order::Reverse = order {
            group.reverse();
        }
        let mut sum = 0.0;
        for t in &group {
            sum += sim(i, t.negative) + margin - sim(i, t.positive);
        }
        total += (sum / (group.len() as f64 + 1.0)).max(0.0);
    }
    total
}

/// `Σ_i max(0, (1/(|T_i|+1))·Σ_{T_i} (sim(y_i, y_k) + m − sim(y_i, y_j)))`, one triplet at a time.
pub fn triplet_loss_direct(y: &DMatrix<f64>, ts: &TripletSet, margin: f64) -> f64 {
    triplet_loss(y, ts, margin, Order::Forward)
}

/// [`triplet_loss_direct`] accumulated in reverse anchor and triplet order.
pub fn triplet_loss_direct_reversed(y: &DMatrix<f64>, ts: &TripletSet, margin: f64) -> f64 {
    triplet_loss(y, ts, margin, Order::Reverse)
}

/// `Σ_i Σ_{t ∈ T_i} (sim(y_i, y_k) − sim(y_i, y_j))`.
pub fn triplet_double_sum(y: &DMatrix<f64>, ts: &TripletSet) -> f64 {
    ts.triplets()
        .iter()
        .map(|t| {
            let (yi, yj, yk) = (y.column(t.anchor), y.column(t.positive), y.column(t.negative));
            yi.dot(&yk) - yi.dot(&yj)
        })
        .sum()
}

/// `tr(−YᵀY·C)` with a dense `C`.
pub fn trace_form(y: &DMatrix<f64>, ts: &TripletSet) -> f64 {
    let n = y.ncols();
    let mut c = DMatrix::zeros(n, n);
    for t in ts.triplets() {
        c[(t.positive, t.anchor)] += 1.0;
        c[(t.negative, t.anchor)] -= 1.0;
    }
    -((y.transpose() * y) * c).trace()
}

/// Central differences of `f` at every entry of `p`.
pub fn finite_difference_grad<F>(p: &DMatrix<f64>, mut f: F, h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> f64,
{
    if !(1e-8..=1e-4).contains(&h) {
        return Err(FilmError::Config(format!("step {h:e} outside [1e-8, 1e-4]")));
    }
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    let mut probe = p.clone();
    for j in 0..p.ncols() {
        for i in 0..p.nrows() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe);
            probe[(i, j)] = orig - h;
            let down = f(&probe);
            probe[(i, j)] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(FilmError::Numerical(format!("nonfinite evaluation at ({i}, {j})")));
            }
            out[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Minimizer of `½s² + c·s` over `s ≥ 0` by a grid scan followed by golden-section refinement.
pub fn scalar_min_nonneg(c: f64) -> f64 {
    let g = |s: f64| 0.5 * s * s + c * s;
    let hi = 2.0 * c.abs() + 1.0;
    let steps = 2000;
    let mut best = 0;
    for i in 0..=steps {
        if g(hi * i as f64 / steps as f64) < g(hi * best as f64 / steps as f64) {
            best = i;
        }
    }
    let h = hi / steps as f64;
    let (mut lo, mut up) = ((best as f64 - 1.0).max(0.0) * h, (best as f64 + 1.0) * h);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = up - ratio * (up - lo);
        let b = lo + ratio * (up - lo);
        if g(a) <= g(b) {
            up = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + up)
}

/// Mean binary cross-entropy of `σ(a·x + b)` against `labels`, probabilities clipped to `[eps, 1 − eps]`.
pub fn logistic_cross_entropy(scores: &[f64], labels: &[u8], a: f64, b: f64, eps: f64) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let p = logistic(a * x + b).clamp(eps, 1.0 - eps);
            if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    total / scores.len() as f64
}

/// Grid search over `a ∈ [0, a_max]`, `b ∈ [−b_max, b_max]` followed by successive
/// local grid refinements; returns `(a, b, cross-entropy)`.
pub fn logistic_grid_fit(scores: &[f64], labels: &[u8], a_max: f64, b_max: f64, eps: f64) -> (f64, f64, f64) {
    let ce = |a: f64, b: f64| logistic_cross_entropy(scores, labels, a, b, eps);
    let (mut a_lo, mut a_hi, mut b_lo, mut b_hi) = (0.0, a_max, -b_max, b_max);
    let mut best = (0.0, 0.0, f64::INFINITY);
    let steps = 60;
    for _ in 0..40 {
        for i in 0..=steps {
            let a = a_lo + (a_hi - a_lo) * i as f64 / steps as f64;
            for j in 0..=steps {
                let b = b_lo + (b_hi - b_lo) * j as f64 / steps as f64;
                let v = ce(a, b);
                if v < best.2 {
                    best = (a, b, v);
                }
            }
        }
        let (da, db) = (2.0 * (a_hi - a_lo) / steps as f64, 2.0 * (b_hi - b_lo) / steps as f64);
        a_lo = (best.0 - da).max(0.0);
        a_hi = best.0 + da;
        b_lo = best.1 - db;
        b_hi = best.1 + db;
    }
    best
}

/// Pearson correlation from explicit means, covariance and standard deviations.
pub fn pearson_direct(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Cosine similarity of two columns, 0 when either is the zero vector.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 { 0.0 } else { a.dot(b) / (na * nb) }
}
