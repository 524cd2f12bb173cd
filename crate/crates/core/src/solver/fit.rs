use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    closed_form_scales, gradient_f2, objective_f2, smoothed_value, thin_svd, update_active_set,
    update_working_matrix, ConstraintProjection, MetricMap, ScaleVector, SvdConfig, SvdFactors,
};
use crate::error::{FilmError, Result};
use crate::scalar::Real;
use crate::stiefel::{
    lagrangian_gradient, nonmonotone_search, CayleyState, NonmonotoneConfig, NonmonotoneReference, SearchStatus,
    StepBounds, StiefelPoint,
};
use crate::triplets::{AnchorWeights, ConstraintMatrix, TripletSet};
use crate::vectorizer::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { batch_size: 4096, epochs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Target dimension `d`.
    pub d: usize,
    pub margin: f64,
    pub max_iters: usize,
    /// Stop once `‖ℱ(P)‖_F < grad_tol`.
    pub grad_tol: f64,
    pub svd: SvdConfig,
    pub seed: u64,
    pub bounds: StepBounds,
    pub search: NonmonotoneConfig,
    pub batch: BatchConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            d: 2,
            margin: 1.0,
            max_iters: 500,
            grad_tol: 1e-4,
            svd: SvdConfig::default(),
            seed: 0,
            bounds: StepBounds::default(),
            search: NonmonotoneConfig::default(),
            batch: BatchConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(FilmError::Config("d must be at least 1".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(FilmError::Config("margin must be finite and nonnegative".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(FilmError::Config("grad_tol must be positive".into()));
        }
        if self.batch.batch_size == 0 {
            return Err(FilmError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical `key=value` rendering, the input of the model file's config digest.
    pub fn canonical(&self) -> String {
        format!(
            "d={}\nmargin={:e}\nmax_iters={}\ngrad_tol={:e}\nrank_tol={:e}\nmax_rank={:?}\noversample={}\npower_iters={}\n\
             svd_seed={}\nseed={}\ntau_min={:e}\ntau_max={:e}\ntau0={:e}\neta={:e}\nrho={:e}\ndelta={:e}\n\
             max_backtracks={}\nbatch_size={}\nepochs={}\n",
            self.d,
            self.margin,
            self.max_iters,
            self.grad_tol,
            self.svd.rank_tol,
            self.svd.max_rank,
            self.svd.oversample,
            self.svd.power_iters,
            self.svd.seed,
            self.seed,
            self.bounds.tau_min,
            self.bounds.tau_max,
            self.bounds.fallback,
            self.search.eta,
            self.search.rho,
            self.search.delta,
            self.search.max_backtracks,
            self.batch.batch_size,
            self.batch.epochs,
        )
    }

    /// SHA-256 of [`Self::canonical`].
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

/// Wall time spent in each update of one iteration, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateTimings {
    pub active_set: f64,
    pub working_matrix: f64,
    pub gradient: f64,
    pub point: f64,
    pub scales: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// `f₂` at the start of the iteration.
    pub f2: f64,
    pub grad_norm: f64,
    pub tau: f64,
    pub active_count: usize,
    pub ms: f64,
    pub timings: UpdateTimings,
    pub backtracks: usize,
    /// Largest `‖PᵀP − I‖_F` seen by this iteration.
    pub feasibility: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<IterationRecord>,
    pub peak_working_bytes: usize,
}

impl TrainingTrace {
    /// One `iter \t f2 \t grad_norm \t tau \t active_count \t ms` line per iteration.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            writeln!(w, "{}\t{:e}\t{:e}\t{:e}\t{}\t{:.3}", r.iter, r.f2, r.grad_norm, r.tau, r.active_count, r.ms)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// The line search rejected every candidate.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub map: MetricMap<T>,
    pub point: StiefelPoint<T>,
    pub scales: ScaleVector<T>,
    pub svd: SvdFactors<T>,
    pub trace: TrainingTrace,
    pub termination: Termination,
    /// The random starting point; the starting scales are all ones.
    pub initial_point: StiefelPoint<T>,
    /// `f₂` at the random initialization.
    pub initial_objective: f64,
    /// `f₂` at the returned point, with `Λ` refreshed there.
    pub final_objective: f64,
}

struct Iterate<T: Real> {
    p: StiefelPoint<T>,
    s: ScaleVector<T>,
    state: CayleyState<T>,
    reference: Option<NonmonotoneReference<T>>,
}

enum CycleOutcome {
    Converged,
    Stepped,
    Stalled,
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// One alternating cycle: `Λ`, `K`, `∇f₂`, Cayley/BB step on `P`, then `s = s*`.
fn cycle<T: Real>(
    proj: &ConstraintProjection<T>,
    it: &mut Iterate<T>,
    cfg: &SolverConfig,
    iter: usize,
) -> Result<(IterationRecord, CycleOutcome)> {
    let start = Instant::now();
    let margin = T::lit(cfg.margin);
    let mut timings = UpdateTimings::default();

    let t = Instant::now();
    let active = update_active_set(proj, &it.p, &it.s, margin)?;
    timings.active_set = elapsed(t);

    let t = Instant::now();
    let k = update_working_matrix(proj, &active)?;
    timings.working_matrix = elapsed(t);

    let t = Instant::now();
    let grad = gradient_f2(&it.p, &k)?;
    let lag = lagrangian_gradient(&it.p, &grad)?;
    timings.gradient = elapsed(t);

    let f2 = objective_f2(&it.p, &k, &active)?;
    if !f2.finite() {
        return Err(FilmError::Numerical(format!("objective is not finite at iteration {iter}")));
    }
    let grad_norm = lag.norm().as_f64();
    // Λ was recomputed, so the reference may stem from a different objective
    let reference = {
        let r = it.reference.get_or_insert_with(|| NonmonotoneReference::new(f2));
        r.lift(f2);
        *r
    };

    let mut record = IterationRecord {
        iter,
        f2: f2.as_f64(),
        grad_norm,
        tau: 0.0,
        active_count: active.count(),
        ms: 0.0,
        timings,
        backtracks: 0,
        feasibility: it.p.feasibility_error().as_f64(),
    };

    if grad_norm < cfg.grad_tol {
        let t = Instant::now();
        it.s = closed_form_scales(&it.p, &k);
        record.timings.scales = elapsed(t);
        record.ms = elapsed(start) * 1e3;
        return Ok((record, CycleOutcome::Converged));
    }

    let t = Instant::now();
    let tau0 = it.state.propose(&it.p, &lag, &cfg.bounds)?;
    let outcome = nonmonotone_search(
        &it.p,
        &grad,
        |q| smoothed_value(&k.curvatures(q), &active),
        tau0,
        &reference,
        &cfg.search,
    )?;
    record.timings.point = elapsed(t);
    record.tau = outcome.tau.as_f64();
    record.backtracks = outcome.backtracks;
    if outcome.status == SearchStatus::Stalled {
        record.ms = elapsed(start) * 1e3;
        return Ok((record, CycleOutcome::Stalled));
    }
    it.state.remember(&it.p, lag, outcome.tau);
    if let Some(r) = it.reference.as_mut() {
        r.absorb(outcome.value, cfg.search.eta);
    }
    it.p = outcome.point;
    record.feasibility = record.feasibility.max(it.p.feasibility_error().as_f64());

    let t = Instant::now();
    it.s = closed_form_scales(&it.p, &k);
    record.timings.scales = elapsed(t);
    record.ms = elapsed(start) * 1e3;
    Ok((record, CycleOutcome::Stepped))
}

struct Prepared<T: Real> {
    svd: SvdFactors<T>,
    start: StiefelPoint<T>,
    it: Iterate<T>,
}

fn prepare<T: Real>(x: &FeatureMatrix<T>, ts: &TripletSet, cfg: &SolverConfig) -> Result<Prepared<T>> {
    cfg.validate()?;
    if ts.is_empty() {
        return Err(FilmError::Config("cannot fit without triplets".into()));
    }
    if ts.min_samples() > x.ncols() {
        return Err(FilmError::Bounds { index: ts.min_samples() - 1, len: x.ncols() });
    }
    let svd = thin_svd(x, &cfg.svd)?;
    svd.require_rank(cfg.d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = StiefelPoint::random(svd.rank(), cfg.d, &mut rng)?;
    let it = Iterate { p: p.clone(), s: ScaleVector::ones(cfg.d), state: CayleyState::new(&cfg.bounds), reference: None };
    Ok(Prepared { svd, start: p, it })
}

fn projection_for<T: Real>(svd: &SvdFactors<T>, ts: &TripletSet) -> Result<ConstraintProjection<T>> {
    let n = svd.v.nrows();
    let c = ConstraintMatrix::build(ts, n)?;
    let t = AnchorWeights::build(ts, n)?;
    ConstraintProjection::new(&svd.v, &c, &t)
}

fn objective_at<T: Real>(proj: &ConstraintProjection<T>, it: &Iterate<T>, margin: f64) -> Result<f64> {
    let active = update_active_set(proj, &it.p, &it.s, T::lit(margin))?;
    let k = update_working_matrix(proj, &active)?;
    Ok(objective_f2(&it.p, &k, &active)?.as_f64())
}

fn finish<T: Real>(
    prep: Prepared<T>,
    trace: TrainingTrace,
    termination: Termination,
    initial_objective: f64,
    final_objective: f64,
) -> Result<FitResult<T>> {
    let Prepared { svd, start, it } = prep;
    let map = MetricMap::from_factors(&svd, &it.p, &it.s)?;
    Ok(FitResult {
        map,
        point: it.p,
        scales: it.s,
        svd,
        trace,
        termination,
        initial_point: start,
        initial_objective,
        final_objective,
    })
}

/// Learns `L ∈ ℝ^{d×D}` from the feature matrix and the full triplet set.
pub fn fit<T: Real>(x: &FeatureMatrix<T>, ts: &TripletSet, cfg: &SolverConfig) -> Result<FitResult<T>> {
    let mut prep = prepare(x, ts, cfg)?;
    let proj = projection_for(&prep.svd, ts)?;
    let mut trace = TrainingTrace { records: Vec::new(), peak_working_bytes: proj.working_bytes() };
    let initial_objective = objective_at(&proj, &prep.it, cfg.margin)?;
    let mut termination = Termination::MaxIterations;
    for iter in 0..cfg.max_iters {
        let (record, outcome) = match cycle(&proj, &mut prep.it, cfg, iter) {
            Ok(v) => v,
            Err(FilmError::Numerical(msg)) => {
                return Err(FilmError::Diverged { message: msg, trace: Box::new(trace) });
            }
            Err(e) => return Err(e),
        };
        trace.records.push(record);
        match outcome {
            CycleOutcome::Converged => {
                termination = Termination::Converged;
                break;
            }
            CycleOutcome::Stalled => {
                termination = Termination::Stalled;
                break;
            }
            CycleOutcome::Stepped => {}
        }
    }
    let final_objective = objective_at(&proj, &prep.it, cfg.margin)?;
    finish(prep, trace, termination, initial_objective, final_objective)
}

/// Mini-batch variant: each epoch shuffles the triplets (seeded), splits them into
/// batches of `batch_size`, and runs one full cycle per batch against that batch's
/// `C_b` and `T_b` on the fixed global `V`.
pub fn fit_minibatch<T: Real>(x: &FeatureMatrix<T>, ts: &TripletSet, cfg: &SolverConfig) -> Result<FitResult<T>> {
    let mut prep = prepare(x, ts, cfg)?;
    let full = projection_for(&prep.svd, ts)?;
    let initial_objective = objective_at(&full, &prep.it, cfg.margin)?;
    let full_bytes = full.working_bytes();
    drop(full);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d69_6e69_6261_7463);
    let mut positions: Vec<usize> = (0..ts.len()).collect();
    let mut trace = TrainingTrace::default();
    let mut termination = Termination::MaxIterations;
    let mut step = 0;
    'epochs: for _ in 0..cfg.batch.epochs {
        positions.shuffle(&mut order_rng);
        let mut epoch_converged = true;
        for chunk in positions.chunks(cfg.batch.batch_size) {
            let mut members = chunk.to_vec();
            members.sort_unstable();
            let proj = projection_for(&prep.svd, &ts.subset(&members))?;
            trace.peak_working_bytes = trace.peak_working_bytes.max(proj.working_bytes());
            let (record, outcome) = match cycle(&proj, &mut prep.it, cfg, step) {
                Ok(v) => v,
                Err(FilmError::Numerical(msg)) => {
                    return Err(FilmError::Diverged { message: msg, trace: Box::new(trace) });
                }
                Err(e) => return Err(e),
            };
            trace.records.push(record);
            step += 1;
            match outcome {
                CycleOutcome::Converged => {}
                CycleOutcome::Stepped => epoch_converged = false,
                CycleOutcome::Stalled => {
                    termination = Termination::Stalled;
                    break 'epochs;
                }
            }
        }
        if epoch_converged {
            termination = Termination::Converged;
            break;
        }
    }
    let full = projection_for(&prep.svd, ts)?;
    let final_objective = objective_at(&full, &prep.it, cfg.margin)?;
    log::debug!("mini-batch peak working set {} bytes (full {full_bytes})", trace.peak_working_bytes);
    finish(prep, trace, termination, initial_objective, final_objective)
}

/// Median and mean wall time of one update kind.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KindCost {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
}

impl KindCost {
    fn from_samples(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self { count: n, median, mean: v.iter().sum::<f64>() / n as f64 }
    }
}

/// Measured wall time per update kind, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostReport {
    pub active_set: KindCost,
    pub working_matrix: KindCost,
    pub gradient: KindCost,
    pub point: KindCost,
    pub scales: KindCost,
}

impl CostReport {
    pub fn is_empty(&self) -> bool {
        self.active_set.count == 0
    }
}

pub fn per_iteration_costs(trace: &TrainingTrace) -> CostReport {
    let pick = |f: fn(&UpdateTimings) -> f64| KindCost::from_samples(trace.records.iter().map(|r| f(&r.timings)).collect());
    // a converged final iteration takes no step, so it does not count toward the point update
    let stepped: Vec<f64> = trace.records.iter().filter(|r| r.tau > 0.0).map(|r| r.timings.point).collect();
    CostReport {
        active_set: pick(|t| t.active_set),
        working_matrix: pick(|t| t.working_matrix),
        gradient: pick(|t| t.gradient),
        point: KindCost::from_samples(stepped),
        scales: pick(|t| t.scales),
    }
}
