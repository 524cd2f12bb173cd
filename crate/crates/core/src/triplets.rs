//! Triplet constraints and the constant matrices derived from them.
//!
//! A triplet `(i, j, k)` states that sample `i` is more similar to `j` than to `k`.
//! The constraint matrix `C` accumulates `+1` at `(j, i)` and `-1` at `(k, i)` for
//! every triplet; the anchor weights are `1 / (|T_i| + 1)`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{FilmError, Result};
use crate::scalar::Real;
use crate::sparse::CscMatrix;
use crate::vectorizer::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Result<Self> {
        if anchor == positive || anchor == negative || positive == negative {
            return Err(FilmError::Config(format!(
                "triplet ({anchor}, {positive}, {negative}) must have distinct indices"
            )));
        }
        Ok(Self { anchor, positive, negative })
    }

    fn max_index(&self) -> usize {
        self.anchor.max(self.positive).max(self.negative)
    }
}

/// Triplets together with their grouping by anchor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletSet {
    triplets: Vec<Triplet>,
    per_anchor: BTreeMap<usize, Vec<usize>>,
}

impl TripletSet {
    pub fn new(triplets: Vec<Triplet>) -> Self {
        let mut per_anchor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (t, trip) in triplets.iter().enumerate() {
            per_anchor.entry(trip.anchor).or_default().push(t);
        }
        Self { triplets, per_anchor }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Triplets whose first component is `anchor`.
    pub fn anchored_at(&self, anchor: usize) -> impl Iterator<Item = &Triplet> {
        self.per_anchor.get(&anchor).into_iter().flatten().map(move |&t| &self.triplets[t])
    }

    pub fn anchor_count(&self, anchor: usize) -> usize {
        self.per_anchor.get(&anchor).map_or(0, Vec::len)
    }

    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_anchor.keys().copied()
    }

    /// Largest sample index referenced plus one (0 when empty).
    pub fn min_samples(&self) -> usize {
        self.triplets.iter().map(|t| t.max_index() + 1).max().unwrap_or(0)
    }

    /// Subset in the given order of triplet positions.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self::new(positions.iter().map(|&p| self.triplets[p]).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.triplets {
            writeln!(w, "{}\t{}\t{}", t.anchor, t.positive, t.negative)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut triplets = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v = parse_usizes::<3>(&line, lineno + 1)?;
            triplets.push(
                Triplet::new(v[0], v[1], v[2])
                    .map_err(|e| FilmError::Format(format!("line {}: {e}", lineno + 1)))?,
            );
        }
        Ok(Self::new(triplets))
    }
}

/// `C = Σ_t C^(t)` as an `n × n` sparse matrix whose column `i` holds anchor `i`'s entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix<T> {
    matrix: CscMatrix<T>,
}

impl<T: Real> ConstraintMatrix<T> {
    pub fn build(ts: &TripletSet, n: usize) -> Result<Self> {
        let mut columns: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for t in ts.triplets() {
            let top = t.max_index();
            if top >= n {
                return Err(FilmError::Bounds { index: top, len: n });
            }
            columns[t.anchor].push((t.positive, T::one()));
            columns[t.anchor].push((t.negative, -T::one()));
        }
        Ok(Self { matrix: CscMatrix::from_columns(n, columns)? })
    }

    pub fn n(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &CscMatrix<T> {
        &self.matrix
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.matrix.get(row, col)
    }
}

/// Diagonal of `T`: entry `i` is `1 / (|T_i| + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorWeights<T>(Vec<T>);

impl<T: Real> AnchorWeights<T> {
    pub fn build(ts: &TripletSet, n: usize) -> Result<Self> {
        if let Some(a) = ts.anchors().find(|&a| a >= n) {
            return Err(FilmError::Bounds { index: a, len: n });
        }
        Ok(Self((0..n).map(|i| T::one() / T::lit((ts.anchor_count(i) + 1) as f64)).collect()))
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

/// A labeled sentence pair: `label` is 1 for similar, 0 for dissimilar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub label: u8,
}

impl LabeledPair {
    pub fn new(a: usize, b: usize, label: u8) -> Self {
        Self { a, b, label }
    }
}

pub fn write_pairs<W: Write>(pairs: &[LabeledPair], mut w: W) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.a, p.b, p.label)?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_usizes::<3>(&line, lineno + 1)?;
        if v[2] > 1 {
            return Err(FilmError::Format(format!("line {}: label must be 0 or 1", lineno + 1)));
        }
        out.push(LabeledPair::new(v[0], v[1], v[2] as u8));
    }
    Ok(out)
}

fn parse_usizes<const N: usize>(line: &str, lineno: usize) -> Result<[usize; N]> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != N {
        return Err(FilmError::Format(format!("line {lineno}: expected {N} tab-separated fields")));
    }
    let mut out = [0usize; N];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| FilmError::Format(format!("line {lineno}: cannot parse {p:?} as an index")))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub negatives_per_positive: usize,
    /// Fraction of each positive's negatives taken as the most TF-IDF-similar non-positives.
    pub hard_fraction: f64,
    /// Emit `(j, i, k)` alongside `(i, j, k)` for every positive pair.
    pub symmetric: bool,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { negatives_per_positive: 3, hard_fraction: 0.5, symmetric: true, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationStatus {
    Ok,
    /// No positive pair was labeled; the triplet set is empty.
    NoPositives,
}

#[derive(Debug, Clone)]
pub struct TripletGeneration {
    pub set: TripletSet,
    pub status: GenerationStatus,
}

/// Generates triplets from labeled pairs over `n` samples.
///
/// Positive pairs are closed transitively into clusters. For each positive pair,
/// anchored in both directions when `symmetric`, negatives come from outside the
/// anchor's cluster: the hard share is the highest-cosine candidates under
/// `features` (when supplied), the rest are drawn without replacement from a
/// stream seeded by `(seed, anchor, positive)`.
pub fn generate_triplets(
    pairs: &[LabeledPair],
    n: usize,
    features: Option<&FeatureMatrix<f64>>,
    config: &TripletConfig,
) -> Result<TripletGeneration> {
    if !(0.0..=1.0).contains(&config.hard_fraction) {
        return Err(FilmError::Config("hard_fraction must lie in [0, 1]".into()));
    }
    for p in pairs {
        if p.label > 1 {
            return Err(FilmError::Config(format!("label {} is not binary", p.label)));
        }
        let top = p.a.max(p.b);
        if top >= n {
            return Err(FilmError::Bounds { index: top, len: n });
        }
    }
    if let Some(x) = features {
        if x.ncols() != n {
            return Err(FilmError::Shape(format!("features have {} columns, expected {n}", x.ncols())));
        }
    }

    let mut clusters = UnionFind::new(n);
    let mut positives: Vec<(usize, usize)> = Vec::new();
    for p in pairs.iter().filter(|p| p.label == 1 && p.a != p.b) {
        clusters.union(p.a, p.b);
        positives.push((p.a, p.b));
        if config.symmetric {
            positives.push((p.b, p.a));
        }
    }
    if positives.is_empty() {
        log::warn!("no positive pairs; triplet set is empty");
        return Ok(TripletGeneration { set: TripletSet::default(), status: GenerationStatus::NoPositives });
    }
    let roots: Vec<usize> = (0..n).map(|i| clusters.find(i)).collect();
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &r) in roots.iter().enumerate() {
        members.entry(r).or_default().push(i);
    }

    let npp = config.negatives_per_positive;
    let hard_quota = match features {
        Some(_) => (npp as f64 * config.hard_fraction).round() as usize,
        None => 0,
    };

    // hard negatives depend only on the anchor
    let mut anchors: Vec<usize> = positives.iter().map(|&(a, _)| a).collect();
    anchors.sort_unstable();
    anchors.dedup();
    let hard: BTreeMap<usize, Vec<usize>> = match (features, hard_quota) {
        (Some(x), q) if q > 0 => {
            let rows = x.row_lists();
            anchors
                .par_iter()
                .map(|&a| (a, hardest_negatives(x, &rows, a, &roots, q)))
                .collect::<Vec<_>>()
                .into_iter()
                .collect()
        }
        _ => BTreeMap::new(),
    };

    let per_positive: Vec<Vec<Triplet>> = positives
        .par_iter()
        .map(|&(a, p)| {
            let cluster = &members[&roots[a]];
            let pool = n - cluster.len();
            let hard_a: &[usize] = hard.get(&a).map_or(&[], Vec::as_slice);
            let hard_take = hard_a.len().min(npp);
            let want_random = (npp - hard_take).min(pool - hard_take);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, a, p));
            let excluded = |c: usize| roots[c] == roots[a] || hard_a[..hard_take].contains(&c);
            let random = sample_outside(n, pool - hard_take, want_random, &excluded, &mut rng);
            hard_a[..hard_take]
                .iter()
                .chain(random.iter())
                .map(|&k| Triplet { anchor: a, positive: p, negative: k })
                .collect()
        })
        .collect();

    let set = TripletSet::new(per_positive.into_iter().flatten().collect());
    Ok(TripletGeneration { set, status: GenerationStatus::Ok })
}

/// Top-`quota` samples outside the anchor's cluster by cosine similarity, ties to lower index.
fn hardest_negatives(
    x: &FeatureMatrix<f64>,
    rows: &[Vec<(usize, f64)>],
    anchor: usize,
    roots: &[usize],
    quota: usize,
) -> Vec<usize> {
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    let (feats, weights) = x.column(anchor);
    for (&f, &w) in feats.iter().zip(weights) {
        for &(c, v) in &rows[f] {
            if roots[c] != roots[anchor] {
                *scores.entry(c).or_insert(0.0) += w * v;
            }
        }
    }
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().filter(|&(_, s)| s > 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(quota).map(|(c, _)| c).collect()
}

/// Draws `want` distinct indices from `0..n` that are not `excluded`; `available`
/// is the number of admissible indices.
fn sample_outside(
    n: usize,
    available: usize,
    want: usize,
    excluded: &dyn Fn(usize) -> bool,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if want == 0 {
        return Vec::new();
    }
    if want >= available || available < 4 * want || n < 64 {
        let admissible: Vec<usize> = (0..n).filter(|&c| !excluded(c)).collect();
        if want >= admissible.len() {
            return admissible;
        }
        let mut picked: Vec<usize> =
            index::sample(rng, admissible.len(), want).into_iter().map(|i| admissible[i]).collect();
        picked.sort_unstable();
        return picked;
    }
    let mut seen = HashSet::with_capacity(want);
    let mut picked = Vec::with_capacity(want);
    while picked.len() < want {
        let c = rng.random_range(0..n);
        if !excluded(c) && seen.insert(c) {
            picked.push(c);
        }
    }
    picked.sort_unstable();
    picked
}

fn stream_seed(seed: u64, anchor: usize, positive: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [anchor as u64, positive as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ts: &[(usize, usize, usize)]) -> TripletSet {
        TripletSet::new(ts.iter().map(|&(i, j, k)| Triplet::new(i, j, k).unwrap()).collect())
    }

    #[test]
    fn single_positive_single_negative() {
        let pairs = [LabeledPair::new(0, 1, 1), LabeledPair::new(0, 2, 0)];
        let g = generate_triplets(&pairs, 3, None, &TripletConfig::default()).unwrap();
        assert_eq!(g.status, GenerationStatus::Ok);
        let mut got: Vec<_> = g.set.triplets().to_vec();
        got.sort();
        assert_eq!(got, vec![Triplet::new(0, 1, 2).unwrap(), Triplet::new(1, 0, 2).unwrap()]);
    }

    #[test]
    fn no_positives_gives_empty_set() {
        let g = generate_triplets(&[LabeledPair::new(0, 1, 0)], 2, None, &TripletConfig::default()).unwrap();
        assert!(g.set.is_empty());
        assert_eq!(g.status, GenerationStatus::NoPositives);
    }

    #[test]
    fn two_positives_three_negatives_per_anchor() {
        // anchor 0: positives 1, 2; negatives 3, 4, 5
        let pairs = [
            LabeledPair::new(0, 1, 1),
            LabeledPair::new(0, 2, 1),
            LabeledPair::new(0, 3, 0),
            LabeledPair::new(0, 4, 0),
            LabeledPair::new(0, 5, 0),
        ];
        let cfg = TripletConfig { symmetric: false, ..Default::default() };
        let g = generate_triplets(&pairs, 6, None, &cfg).unwrap();
        assert_eq!(g.set.anchor_count(0), 6);
        // the cluster {0,1,2} never supplies negatives
        assert!(g.set.triplets().iter().all(|t| t.negative >= 3));
    }

    #[test]
    fn hard_negatives_follow_cosine() {
        // sample 3 shares the anchor's term; 4 and 5 do not
        let x = FeatureMatrix::<f64>::from_columns(
            3,
            vec![
                vec![(0, 1.0)],
                vec![(0, 0.6), (1, 0.8)],
                vec![(1, 1.0)],
                vec![(0, 0.8), (2, 0.6)],
                vec![(2, 1.0)],
                vec![(1, 1.0)],
            ],
        )
        .unwrap();
        let pairs = [LabeledPair::new(0, 1, 1)];
        let cfg = TripletConfig { negatives_per_positive: 1, hard_fraction: 1.0, symmetric: false, seed: 9 };
        let g = generate_triplets(&pairs, 6, Some(&x), &cfg).unwrap();
        assert_eq!(g.set.triplets(), &[Triplet::new(0, 1, 3).unwrap()]);
    }

    #[test]
    fn seeds_reproduce_and_preserve_count() {
        let pairs: Vec<_> = (0..20).map(|i| LabeledPair::new(2 * i, 2 * i + 1, (i % 3 == 0) as u8)).collect();
        let cfg = TripletConfig::default();
        let a = generate_triplets(&pairs, 200, None, &cfg).unwrap();
        let b = generate_triplets(&pairs, 200, None, &cfg).unwrap();
        assert_eq!(a.set, b.set);
        let c = generate_triplets(&pairs, 200, None, &TripletConfig { seed: 77, ..cfg }).unwrap();
        assert_eq!(a.set.len(), c.set.len());
        assert_ne!(a.set, c.set);
    }

    #[test]
    fn constraint_matrix_entries() {
        let c = ConstraintMatrix::<f64>::build(&set(&[(0, 1, 2)]), 3).unwrap();
        assert_eq!(c.get(1, 0), 1.0);
        assert_eq!(c.get(2, 0), -1.0);
        assert_eq!(c.matrix().nnz(), 2);

        let empty = ConstraintMatrix::<f64>::build(&TripletSet::default(), 3).unwrap();
        assert_eq!(empty.matrix().nnz(), 0);

        let dup = ConstraintMatrix::<f64>::build(&set(&[(0, 1, 2), (0, 1, 2)]), 3).unwrap();
        assert_eq!(dup.get(1, 0), 2.0);
        assert_eq!(dup.get(2, 0), -2.0);
    }

    #[test]
    fn constraint_matrix_bounds() {
        let err = ConstraintMatrix::<f64>::build(&set(&[(0, 1, 5)]), 3).unwrap_err();
        assert!(matches!(err, FilmError::Bounds { index: 5, len: 3 }));
    }

    #[test]
    fn anchor_weights() {
        let w = AnchorWeights::<f64>::build(&set(&[(0, 1, 2)]), 3).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 1.0, 1.0]);
        let w = AnchorWeights::<f64>::build(&TripletSet::default(), 2).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0]);
        let w = AnchorWeights::<f64>::build(&set(&[(0, 1, 2), (0, 2, 1), (0, 1, 3)]), 4).unwrap();
        assert_eq!(w.as_slice()[0], 0.25);
    }

    #[test]
    fn degenerate_triplet_rejected() {
        assert!(Triplet::new(1, 1, 2).is_err());
    }

    #[test]
    fn triplet_and_pair_files() {
        let ts = set(&[(0, 1, 2), (3, 4, 5)]);
        let mut buf = Vec::new();
        ts.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf), "0\t1\t2\n3\t4\t5\n");
        assert_eq!(TripletSet::read_from(&buf[..]).unwrap(), ts);

        let pairs = read_pairs(&b"0\t1\t1\n2\t3\t0\n"[..]).unwrap();
        assert_eq!(pairs, vec![LabeledPair::new(0, 1, 1), LabeledPair::new(2, 3, 0)]);
        assert!(read_pairs(&b"0\t1\t2\n"[..]).is_err());
        assert!(read_pairs(&b"0\t1\n"[..]).is_err());
    }
}
