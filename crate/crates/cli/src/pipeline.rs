//! In-process pipeline stages shared by the subcommands.

use std::time::Instant;

use film::matcher::{self, KSelection, MetricKind, Prediction};
use film::solver::{fit, fit_minibatch, per_iteration_costs, CostReport, SvdConfig, Termination};
use film::triplets::{generate_triplets, GenerationStatus, LabeledPair, TripletConfig};
use film::vectorizer::VectorizerConfig;
use film::{CscMatrix, EmbeddedSet, MatchModel, MetricReport, Rule, SolverConfig, TrainingTrace, Vocabulary};

use crate::data::{Corpus, PairRecord};
use crate::error::{CliError, CliResult};
use crate::synth::Planted;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub solver: SolverConfig,
    pub triplets: TripletConfig,
    pub min_df: usize,
    pub minibatch: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let solver = SolverConfig {
            d: 32,
            margin: 1e-3,
            max_iters: 200,
            svd: SvdConfig { max_rank: Some(256), ..SvdConfig::default() },
            ..SolverConfig::default()
        };
        Self { solver, triplets: TripletConfig::default(), min_df: 1, minibatch: false }
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: MatchModel<f64>,
    pub trace: TrainingTrace,
    pub sentences: usize,
    pub features: usize,
    pub triplets: usize,
    pub rank: usize,
    pub termination: Termination,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub seconds: f64,
}

fn labels_of(records: &[PairRecord]) -> CliResult<Vec<u8>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.label.ok_or_else(|| CliError::Input(format!("pair {i} has no label"))))
        .collect()
}

/// Labeled pairs over the corpus' sentence indices.
pub fn labeled_pairs(corpus: &Corpus, labels: &[u8]) -> Vec<LabeledPair> {
    corpus.pairs.iter().zip(labels).map(|(&(a, b), &l)| LabeledPair::new(a, b, l)).collect()
}

pub fn fit_vocabulary(corpus: &Corpus, min_df: usize) -> CliResult<Vocabulary> {
    Ok(Vocabulary::fit(&corpus.tokens, VectorizerConfig { min_df })?)
}

/// Vectorizes the training sentences, generates triplets and fits the metric.
pub fn train(records: &[PairRecord], settings: &TrainSettings) -> CliResult<TrainOutput> {
    let start = Instant::now();
    let labels = labels_of(records)?;
    let corpus = Corpus::from_records(records);
    let vocab = fit_vocabulary(&corpus, settings.min_df)?;
    let x: CscMatrix<f64> = vocab.transform(&corpus.tokens);
    let generation = generate_triplets(&labeled_pairs(&corpus, &labels), corpus.len(), Some(&x), &settings.triplets)?;
    if generation.status == GenerationStatus::NoPositives || generation.set.is_empty() {
        return Err(CliError::Input("training pairs contain no positive pair, so no triplets can be formed".into()));
    }
    let result = if settings.minibatch {
        fit_minibatch(&x, &generation.set, &settings.solver)?
    } else {
        fit(&x, &generation.set, &settings.solver)?
    };
    let mut model = MatchModel::new(result.map, vocab)?;
    model.seed = settings.solver.seed;
    model.digest = settings.solver.digest();
    Ok(TrainOutput {
        model,
        sentences: corpus.len(),
        features: x.nrows(),
        triplets: generation.set.len(),
        rank: result.svd.rank(),
        termination: result.termination,
        initial_objective: result.initial_objective,
        final_objective: result.final_objective,
        trace: result.trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Embeds the sentences of `records`.
pub fn embed_records(model: &MatchModel<f64>, records: &[PairRecord]) -> CliResult<(EmbeddedSet<f64>, Vec<(usize, usize)>)> {
    let corpus = Corpus::from_records(records);
    let y = matcher::embed(model, &corpus.tokens)?;
    Ok((EmbeddedSet::new(y, corpus.ids)?, corpus.pairs))
}

pub fn pair_scores(set: &EmbeddedSet<f64>, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(a, b)| set.cosine(a, b)).collect()
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub model: MatchModel<f64>,
    pub table: KSelection,
}

/// Picks `k` on labeled validation pairs and calibrates probabilities on their cosines.
pub fn select_k(model: &MatchModel<f64>, records: &[PairRecord], ks: &[usize], rule: Rule) -> CliResult<Selection> {
    let labels = labels_of(records)?;
    let (set, pairs) = embed_records(model, records)?;
    if set.len() < 2 {
        return Err(CliError::Input("validation set needs at least two sentences".into()));
    }
    let usable: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k < set.len()).collect();
    if usable.len() < ks.len() {
        log::warn!("k values of at least {} sentences were dropped", set.len());
    }
    if usable.is_empty() {
        return Err(CliError::Usage(format!("no k in the requested range is below the {} validation sentences", set.len())));
    }
    let table = matcher::select_k(&set, &pairs, &labels, &usable, rule)?;
    let calibration = matcher::calibrate(&pair_scores(&set, &pairs), &labels)?;
    let mut chosen = model.clone();
    chosen.k = table.k;
    chosen.rule = rule;
    chosen.calibration = calibration;
    Ok(Selection { model: chosen, table })
}

/// kNN labels and calibrated probabilities; pair ids are row positions.
pub fn predict(model: &MatchModel<f64>, records: &[PairRecord]) -> CliResult<Vec<Prediction>> {
    let (set, pairs) = embed_records(model, records)?;
    if set.len() < 2 {
        return Err(CliError::Input("prediction needs at least two distinct sentences".into()));
    }
    let k = if model.k >= set.len() {
        log::warn!("k = {} exceeds the {} sentences available; using {}", model.k, set.len(), set.len() - 1);
        set.len() - 1
    } else {
        model.k
    };
    let labels = matcher::pairwise_knn_decide(&set, &pairs, k, model.rule)?;
    Ok(pair_scores(&set, &pairs)
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (score, label))| Prediction { pair_id: i.to_string(), probability: model.calibration.probability(score), label })
        .collect())
}

pub const ALL_METRICS: [MetricKind; 4] = [MetricKind::LogLoss, MetricKind::Accuracy, MetricKind::Rates, MetricKind::Pearson];

pub fn parse_metric(name: &str) -> CliResult<MetricKind> {
    match name {
        "logloss" => Ok(MetricKind::LogLoss),
        "accuracy" => Ok(MetricKind::Accuracy),
        "rates" => Ok(MetricKind::Rates),
        "pearson" => Ok(MetricKind::Pearson),
        other => Err(CliError::Usage(format!("unknown metric {other:?} (expected logloss, accuracy, rates, pearson)"))),
    }
}

/// Joins predictions to labeled rows by pair id and scores them.
pub fn evaluate(preds: &[Prediction], records: &[PairRecord], kinds: &[MetricKind]) -> CliResult<MetricReport> {
    let labels = labels_of(records)?;
    let mut slots: Vec<Option<&Prediction>> = vec![None; labels.len()];
    for p in preds {
        let i: usize = p
            .pair_id
            .parse()
            .ok()
            .filter(|&i| i < labels.len())
            .ok_or_else(|| CliError::Input(format!("prediction for unknown pair {:?}", p.pair_id)))?;
        if slots[i].replace(p).is_some() {
            return Err(CliError::Input(format!("duplicate prediction for pair {i}")));
        }
    }
    let mut probs = Vec::with_capacity(labels.len());
    let mut hard = Vec::with_capacity(labels.len());
    for (i, slot) in slots.iter().enumerate() {
        let p = slot.ok_or_else(|| CliError::Input(format!("no prediction for pair {i}")))?;
        probs.push(p.probability);
        hard.push(p.label);
    }
    Ok(matcher::evaluate(&probs, Some(&hard), &labels, kinds)?)
}

/// Settings of the update-cost scaling study.
#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub n: usize,
    /// Feature count; with `n ≥ features` this is the retained rank `r`.
    pub rank: usize,
    pub d: usize,
    pub triplets_per_sample: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { n: 8000, rank: 64, d: 8, triplets_per_sample: 2, iters: 25, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScalingReport {
    pub base: CostReport,
    pub double_n: CostReport,
    pub double_d: CostReport,
}

impl ScalingReport {
    /// Median active-set update time at `2n` over that at `n`.
    pub fn active_set_ratio(&self) -> f64 {
        self.double_n.active_set.median / self.base.active_set.median
    }

    /// Median point update time at `2d` over that at `d`.
    pub fn point_ratio(&self) -> f64 {
        self.double_d.point.median / self.base.point.median
    }
}

fn timed_run(n: usize, d: usize, cfg: &ScalingConfig) -> CliResult<CostReport> {
    let planted = Planted::new(n, cfg.rank, cfg.rank.min(16), cfg.seed);
    let ts = planted.triplets(n * cfg.triplets_per_sample, cfg.seed + 1);
    let solver = SolverConfig { d, margin: 1e-3, max_iters: cfg.iters, grad_tol: 1e-12, seed: cfg.seed, ..SolverConfig::default() };
    let res = fit(&CscMatrix::from_dense(&planted.x), &ts, &solver)?;
    Ok(per_iteration_costs(&res.trace))
}

/// Times the solver updates at `(n, d)`, `(2n, d)` and `(n, 2d)` with the rank held fixed.
pub fn scaling_study(cfg: &ScalingConfig) -> CliResult<ScalingReport> {
    if cfg.d * 2 > cfg.rank || cfg.rank > cfg.n {
        return Err(CliError::Usage("scaling study needs 2d <= rank <= n".into()));
    }
    Ok(ScalingReport {
        base: timed_run(cfg.n, cfg.d, cfg)?,
        double_n: timed_run(2 * cfg.n, cfg.d, cfg)?,
        double_d: timed_run(cfg.n, 2 * cfg.d, cfg)?,
    })
}
