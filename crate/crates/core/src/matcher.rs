//! Sentence-pair matching in the learned space.
//!
//! A pair `(a, b)` is declared similar when `b` is among the `k` cosine-nearest
//! neighbours of `a` or vice versa (`Rule::Either`), or when both containments
//! hold (`Rule::Both`). Neighbour search is exact brute force; ties go to the
//! lower index and zero vectors neither have nor are neighbours.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{FilmError, Result};
use crate::scalar::Real;
use crate::solver::{sigmoid, MetricMap};
use crate::vectorizer::Vocabulary;

/// Probability clip used by every log-loss computation.
pub const PROB_CLIP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Either,
    Both,
}

impl std::str::FromStr for Rule {
    type Err = FilmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "either" => Ok(Rule::Either),
            "both" => Ok(Rule::Both),
            other => Err(FilmError::Config(format!("unknown rule {other:?} (expected either|both)"))),
        }
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::Either => "either",
            Rule::Both => "both",
        })
    }
}

/// `p = σ(a·cos + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { a: 0.0, b: 0.0 }
    }
}

impl Calibration {
    pub fn probability(&self, score: f64) -> f64 {
        sigmoid(self.a * score + self.b)
    }
}

/// Embedded sentences (`d × n`) with their ids.
#[derive(Debug, Clone)]
pub struct EmbeddedSet<T: Real> {
    y: DMatrix<T>,
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> EmbeddedSet<T> {
    pub fn new(y: DMatrix<T>, ids: Vec<String>) -> Result<Self> {
        if ids.len() != y.ncols() {
            return Err(FilmError::Shape(format!("{} ids for {} columns", ids.len(), y.ncols())));
        }
        if y.iter().any(|v| !v.finite()) {
            return Err(FilmError::Numerical("embedding has nonfinite entries".into()));
        }
        let lookup: HashMap<String, usize> = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        if lookup.len() != ids.len() {
            return Err(FilmError::Config("duplicate sentence ids".into()));
        }
        Ok(Self { y, ids, lookup })
    }

    /// Columns named `0..n`.
    pub fn anonymous(y: DMatrix<T>) -> Result<Self> {
        let ids = (0..y.ncols()).map(|i| i.to_string()).collect();
        Self::new(y, ids)
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.y.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    /// Cosine similarity of columns `a` and `b`; 0 if either is zero.
    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (ya, yb) = (self.y.column(a), self.y.column(b));
        let (na, nb) = (ya.norm().as_f64(), yb.norm().as_f64());
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            ya.dot(&yb).as_f64() / (na * nb)
        }
    }
}

/// Trained matcher: projection, vectorizer, neighbour count, rule and calibration.
#[derive(Debug, Clone)]
pub struct MatchModel<T: Real> {
    pub map: MetricMap<T>,
    pub vocab: Vocabulary,
    pub k: usize,
    pub rule: Rule,
    pub calibration: Calibration,
    pub seed: u64,
    pub digest: [u8; 32],
}

impl<T: Real> MatchModel<T> {
    pub fn new(map: MetricMap<T>, vocab: Vocabulary) -> Result<Self> {
        if map.input_dim() != vocab.len() {
            return Err(FilmError::Shape(format!(
                "metric map expects {} features, vocabulary has {}",
                map.input_dim(),
                vocab.len()
            )));
        }
        Ok(Self { map, vocab, k: 1, rule: Rule::Either, calibration: Calibration::default(), seed: 0, digest: [0; 32] })
    }

    /// Metric map section, length-prefixed vocabulary section, then `k`, rule and calibration.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.map.write_to(&mut w, self.seed, &self.digest)?;
        let mut vocab = Vec::new();
        self.vocab.write_to(&mut vocab)?;
        w.write_u64::<LittleEndian>(vocab.len() as u64)?;
        w.write_all(&vocab)?;
        w.write_u64::<LittleEndian>(self.k as u64)?;
        w.write_u8(match self.rule {
            Rule::Either => 0,
            Rule::Both => 1,
        })?;
        w.write_f64::<LittleEndian>(self.calibration.a)?;
        w.write_f64::<LittleEndian>(self.calibration.b)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let (map, seed, digest) = MetricMap::read_from(&mut r)?;
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut vocab = vec![0u8; len];
        r.read_exact(&mut vocab)?;
        let vocab = Vocabulary::read_from(&vocab[..])?;
        let mut model = Self::new(map, vocab)
            .map_err(|e| FilmError::Format(format!("model and vocabulary do not match: {e}")))?;
        model.k = r.read_u64::<LittleEndian>()? as usize;
        model.rule = match r.read_u8()? {
            0 => Rule::Either,
            1 => Rule::Both,
            other => return Err(FilmError::Format(format!("unknown rule tag {other}"))),
        };
        model.calibration = Calibration { a: r.read_f64::<LittleEndian>()?, b: r.read_f64::<LittleEndian>()? };
        if model.k == 0 || !(model.calibration.a.is_finite() && model.calibration.b.is_finite()) {
            return Err(FilmError::Format("invalid matcher parameters".into()));
        }
        model.seed = seed;
        model.digest = digest;
        Ok(model)
    }
}

/// `Y = L · transform(vocab, sentences)`.
pub fn embed<T: Real, S: AsRef<str> + Sync>(model: &MatchModel<T>, sentences: &[Vec<S>]) -> Result<DMatrix<T>> {
    let x = model.vocab.transform::<T, S>(sentences);
    model.map.apply(&x)
}

/// Neighbour ranks for the sentences referenced by pairs.
struct NeighbourRanks {
    lists: HashMap<usize, Vec<usize>>,
}

impl NeighbourRanks {
    fn build<T: Real>(y: &EmbeddedSet<T>, queries: &[usize], depth: usize) -> Self {
        let n = y.len();
        let norms: Vec<f64> = (0..n).map(|i| y.y.column(i).norm().as_f64()).collect();
        let unit: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let s = if norms[i] > 0.0 { 1.0 / norms[i] } else { 0.0 };
                y.y.column(i).iter().map(|v| v.as_f64() * s).collect()
            })
            .collect();
        let lists = queries
            .par_iter()
            .map(|&q| {
                if norms[q] == 0.0 {
                    return (q, Vec::new());
                }
                let mut scored: Vec<(f64, usize)> = (0..n)
                    .filter(|&c| c != q && norms[c] > 0.0)
                    .map(|c| (unit[q].iter().zip(&unit[c]).map(|(a, b)| a * b).sum(), c))
                    .collect();
                let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
                let keep = depth.min(scored.len());
                if keep < scored.len() {
                    scored.select_nth_unstable_by(keep, cmp);
                    scored.truncate(keep);
                }
                scored.sort_by(cmp);
                (q, scored.into_iter().map(|(_, c)| c).collect())
            })
            .collect();
        Self { lists }
    }

    /// 0-based rank of `b` in `a`'s list, `usize::MAX` if absent.
    fn rank(&self, a: usize, b: usize) -> usize {
        self.lists[&a].iter().position(|&c| c == b).unwrap_or(usize::MAX)
    }
}

fn check_pairs<T: Real>(y: &EmbeddedSet<T>, pairs: &[(usize, usize)]) -> Result<Vec<usize>> {
    let n = y.len();
    let mut queries = Vec::with_capacity(2 * pairs.len());
    for &(a, b) in pairs {
        let top = a.max(b);
        if top >= n {
            return Err(FilmError::Bounds { index: top, len: n });
        }
        queries.push(a);
        queries.push(b);
    }
    queries.sort_unstable();
    queries.dedup();
    Ok(queries)
}

/// For every pair, the ranks `(rank of b among a's neighbours, rank of a among b's)`.
fn pair_ranks<T: Real>(y: &EmbeddedSet<T>, pairs: &[(usize, usize)], depth: usize) -> Result<Vec<(usize, usize)>> {
    let queries = check_pairs(y, pairs)?;
    let ranks = NeighbourRanks::build(y, &queries, depth);
    Ok(pairs.iter().map(|&(a, b)| (ranks.rank(a, b), ranks.rank(b, a))).collect())
}

fn decide(ranks: (usize, usize), k: usize, rule: Rule) -> u8 {
    let (ab, ba) = ranks;
    let hit = match rule {
        Rule::Either => ab < k || ba < k,
        Rule::Both => ab < k && ba < k,
    };
    hit as u8
}

/// Pairwise kNN labels.
pub fn pairwise_knn_decide<T: Real>(y: &EmbeddedSet<T>, pairs: &[(usize, usize)], k: usize, rule: Rule) -> Result<Vec<u8>> {
    if k == 0 || k >= y.len() {
        return Err(FilmError::Config(format!("k = {k} must satisfy 1 <= k < n = {}", y.len())));
    }
    Ok(pair_ranks(y, pairs, k)?.into_iter().map(|r| decide(r, k, rule)).collect())
}

/// Confusion counts of binary predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(pred: &[u8], gold: &[u8]) -> Result<Self> {
        check_lengths(pred.len(), gold.len())?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 { 0.0 } else { num as f64 / den as f64 }
    }

    pub fn tpr(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }
    pub fn tnr(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }
    pub fn fpr(&self) -> f64 {
        Self::ratio(self.fp, self.fp + self.tn)
    }
    pub fn fnr(&self) -> f64 {
        Self::ratio(self.fn_, self.fn_ + self.tp)
    }
    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(FilmError::Shape(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// Mean clipped binary cross-entropy.
pub fn log_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(FilmError::Config("log loss of an empty set".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One row of the per-`k` validation table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KRow {
    pub k: usize,
    /// Cross-entropy of the hard decisions under [`PROB_CLIP`].
    pub ce: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: usize,
    pub table: Vec<KRow>,
}

impl KSelection {
    /// Tab-separated table with a header row.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k\tce\taccuracy\ttp\ttn\tfp\tfn\ttpr\ttnr\tfpr\tfnr")?;
        for row in &self.table {
            let c = row.confusion;
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                row.k,
                row.ce,
                c.accuracy(),
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                c.tpr(),
                c.tnr(),
                c.fpr(),
                c.fnr()
            )?;
        }
        Ok(())
    }
}

/// Elbow point of a cross-entropy profile ordered by `k`: the first entry whose best
/// improvement over the next five entries is below 1% of its own value.
pub fn elbow_index(ce: &[f64]) -> usize {
    const LOOKAHEAD: usize = 5;
    const REL: f64 = 0.01;
    for i in 0..ce.len() {
        let ahead = &ce[i + 1..(i + 1 + LOOKAHEAD).min(ce.len())];
        let best = ahead.iter().copied().fold(f64::INFINITY, f64::min);
        let gain = if ahead.is_empty() { 0.0 } else { ce[i] - best };
        if gain <= 0.0 || gain < REL * ce[i].abs() {
            return i;
        }
    }
    ce.len().saturating_sub(1)
}

/// Evaluates the pairwise rule for every `k` in `k_range` and picks the elbow `k`.
pub fn select_k<T: Real>(
    y: &EmbeddedSet<T>,
    pairs: &[(usize, usize)],
    labels: &[u8],
    k_range: &[usize],
    rule: Rule,
) -> Result<KSelection> {
    check_lengths(pairs.len(), labels.len())?;
    if pairs.is_empty() {
        return Err(FilmError::Config("validation set is empty".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(FilmError::Config("validation labels must be binary".into()));
    }
    let mut ks: Vec<usize> = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 || *ks.last().unwrap() >= y.len() {
        return Err(FilmError::Config(format!("k range must lie in [1, n) with n = {}", y.len())));
    }
    let ranks = pair_ranks(y, pairs, *ks.last().unwrap())?;
    let hard = |l: u8| if l == 1 { 1.0 } else { 0.0 };
    let mut table = Vec::with_capacity(ks.len());
    for &k in &ks {
        let pred: Vec<u8> = ranks.iter().map(|&r| decide(r, k, rule)).collect();
        let probs: Vec<f64> = pred.iter().map(|&l| hard(l)).collect();
        table.push(KRow { k, ce: log_loss(&probs, labels)?, confusion: Confusion::from_labels(&pred, labels)? });
    }
    let ce: Vec<f64> = table.iter().map(|r| r.ce).collect();
    Ok(KSelection { k: table[elbow_index(&ce)].k, table })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    crate::solver::smooth_hinge(x)
}

/// Mean unclipped cross-entropy of `σ(a·x + b)`.
fn calibration_loss(scores: &[f64], labels: &[u8], a: f64, b: f64) -> f64 {
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let t = a * x + b;
            if y == 1 { softplus(-t) } else { softplus(t) }
        })
        .sum::<f64>()
        / n
}

/// Fits `p = σ(a·score + b)` by damped Newton on the cross-entropy with `a ≥ 0`.
/// A single-class set yields `(0, logit(base rate))` with the rate clipped to
/// `[PROB_CLIP, 1 − PROB_CLIP]`.
pub fn calibrate(scores: &[f64], labels: &[u8]) -> Result<Calibration> {
    check_lengths(scores.len(), labels.len())?;
    if scores.is_empty() {
        return Err(FilmError::Config("cannot calibrate on an empty set".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FilmError::Numerical("calibration scores must be finite".into()));
    }
    let n = scores.len() as f64;
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let base = Calibration { a: 0.0, b: logit((positives / n).clamp(PROB_CLIP, 1.0 - PROB_CLIP)) };
    if positives == 0.0 || positives == n {
        return Ok(base);
    }
    let (mut a, mut b) = (0.0, base.b);
    let mut loss = calibration_loss(scores, labels, a, b);
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in scores.iter().zip(labels) {
            let p = sigmoid(a * x + b);
            let r = p - y as f64;
            let w = p * (1.0 - p);
            ga += r * x;
            gb += r;
            haa += w * x * x;
            hab += w * x;
            hbb += w;
        }
        let (ga, gb) = (ga / n, gb / n);
        if (ga * ga + gb * gb).sqrt() < 1e-12 {
            break;
        }
        let (haa, hab, hbb) = (haa / n + 1e-12, hab / n, hbb / n + 1e-12);
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if det > 0.0 {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            (-ga, -gb)
        };
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let (na, nb) = ((a + step * da).max(0.0), b + step * db);
            let nl = calibration_loss(scores, labels, na, nb);
            if nl < loss {
                a = na;
                b = nb;
                loss = nl;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            // projected gradient fallback when the Newton direction stalls on the a = 0 face
            da = -ga;
            db = -gb;
            let mut step = 1.0;
            for _ in 0..60 {
                let (na, nb) = ((a + step * da).max(0.0), b + step * db);
                let nl = calibration_loss(scores, labels, na, nb);
                if nl < loss {
                    a = na;
                    b = nb;
                    loss = nl;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
    }
    Ok(Calibration { a, b })
}

/// Named metric values in a fixed key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    fn push(&mut self, key: &str, value: f64) {
        self.entries.push((key.to_owned(), value));
    }

    /// `key \t value` lines.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "{k}\t{v}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut out = Self::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| FilmError::Format(format!("line {}: expected key\\tvalue", i + 1)))?;
            let v: f64 = v.parse().map_err(|_| FilmError::Format(format!("line {}: bad value", i + 1)))?;
            out.push(k, v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    LogLoss,
    Accuracy,
    Rates,
    Pearson,
}

/// Evaluates probabilistic predictions against binary labels. Hard labels are
/// `probability ≥ 0.5` unless given explicitly.
pub fn evaluate(probs: &[f64], hard: Option<&[u8]>, labels: &[u8], kinds: &[MetricKind]) -> Result<MetricReport> {
    check_lengths(probs.len(), labels.len())?;
    let derived: Vec<u8>;
    let hard = match hard {
        Some(h) => {
            check_lengths(h.len(), labels.len())?;
            h
        }
        None => {
            derived = probs.iter().map(|&p| (p >= 0.5) as u8).collect();
            &derived
        }
    };
    let confusion = Confusion::from_labels(hard, labels)?;
    let mut report = MetricReport::default();
    for kind in kinds {
        match kind {
            MetricKind::LogLoss => report.push("logloss", log_loss(probs, labels)?),
            MetricKind::Accuracy => report.push("accuracy", confusion.accuracy()),
            MetricKind::Rates => {
                report.push("tpr", confusion.tpr());
                report.push("tnr", confusion.tnr());
                report.push("fpr", confusion.fpr());
                report.push("fnr", confusion.fnr());
                report.push("tp", confusion.tp as f64);
                report.push("tn", confusion.tn as f64);
                report.push("fp", confusion.fp as f64);
                report.push("fn", confusion.fn_ as f64);
            }
            MetricKind::Pearson => {
                let gold: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
                report.push("pearson", pearson(probs, &gold)?);
            }
        }
    }
    Ok(report)
}

/// One prediction: pair id, calibrated probability and kNN label.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pair_id: String,
    pub probability: f64,
    pub label: u8,
}

pub fn write_predictions<W: Write>(preds: &[Prediction], mut w: W) -> Result<()> {
    for p in preds {
        writeln!(w, "{}\t{}\t{}", p.pair_id, p.probability, p.label)?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || FilmError::Format(format!("line {}: expected pair_id\\tprobability\\tlabel01", i + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let probability: f64 = parts[1].parse().map_err(|_| bad())?;
        let label = match parts[2] {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad()),
        };
        out.push(Prediction { pair_id: parts[0].to_owned(), probability, label });
    }
    Ok(out)
}
