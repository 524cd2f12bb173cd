use film::matcher::{calibrate, embed, log_loss, Calibration, Rule};
use film::oracle::logistic_grid_fit;
use film::solver::{fit, fit_minibatch, SolverConfig, Termination};
use film::triplets::{generate_triplets, LabeledPair, Triplet, TripletConfig};
use film::vectorizer::{tokenize, VectorizerConfig};
use film::{CscMatrix, FilmError, MatchModel, MetricMap, TripletSet, Vocabulary};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian features with triplets labeled by a hidden linear map.
fn planted(n: usize, features: usize, hidden: usize, count: usize, seed: u64) -> (DMatrix<f64>, TripletSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(features, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let l = DMatrix::from_fn(hidden, features, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = &l * &x;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let (i, j, k) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n));
        let Ok(t) = Triplet::new(i, j, k) else { continue };
        let closer = y.column(i).dot(&y.column(j)) > y.column(i).dot(&y.column(k));
        out.push(if closer { t } else { Triplet::new(i, k, j).unwrap() });
    }
    (x, TripletSet::new(out))
}

fn config(d: usize, margin: f64, iters: usize) -> SolverConfig {
    SolverConfig { d, margin, max_iters: iters, seed: 3, ..SolverConfig::default() }
}

#[test]
fn fit_keeps_every_iterate_feasible_and_lowers_f2() {
    let (x, ts) = planted(60, 20, 5, 600, 11);
    let res = fit(&CscMatrix::from_dense(&x), &ts, &config(4, 0.01, 80)).unwrap();
    assert!(!res.trace.records.is_empty());
    for rec in &res.trace.records {
        assert!(rec.feasibility <= 1e-8, "iteration {}: {}", rec.iter, rec.feasibility);
    }
    assert!(res.final_objective < res.initial_objective);
    assert_eq!(res.map.dim(), 4);
    assert_eq!(res.map.input_dim(), 20);
}

#[test]
fn single_precision_fit_tracks_double() {
    let (x, ts) = planted(40, 12, 4, 300, 5);
    let cfg = config(3, 0.01, 30);
    let a = fit(&CscMatrix::from_dense(&x), &ts, &cfg).unwrap();
    let b = fit(&CscMatrix::from_dense(&x.map(|v| v as f32)), &ts, &cfg).unwrap();
    for rec in &b.trace.records {
        assert!(rec.feasibility <= 1e-4);
    }
    assert!(b.final_objective < b.initial_objective);
    assert!((a.initial_objective - b.initial_objective).abs() <= 1e-3 * a.initial_objective.abs().max(1.0));
}

#[test]
fn rank_below_target_dimension_is_reported() {
    let x = DMatrix::from_fn(6, 10, |i, j| if i < 2 { (i + j) as f64 } else { 0.0 });
    let ts = TripletSet::new(vec![Triplet::new(0, 1, 2).unwrap()]);
    let err = fit(&CscMatrix::from_dense(&x), &ts, &config(3, 0.1, 5)).unwrap_err();
    assert!(matches!(err, FilmError::RankTooSmall { rank: 2, d: 3 }), "{err}");
    assert!(err.to_string().contains("d <= 2"));
}

#[test]
fn one_full_batch_epoch_is_one_iteration() {
    let (x, ts) = planted(30, 10, 3, 120, 8);
    let x = CscMatrix::from_dense(&x);
    let mut cfg = config(3, 0.05, 1);
    cfg.batch.batch_size = ts.len();
    cfg.batch.epochs = 1;
    let full = fit(&x, &ts, &cfg).unwrap();
    let mini = fit_minibatch(&x, &ts, &cfg).unwrap();
    assert_eq!(full.point.matrix(), mini.point.matrix());
    assert_eq!(full.scales.as_slice(), mini.scales.as_slice());
    assert_eq!(full.map.matrix(), mini.map.matrix());
}

#[test]
fn termination_reasons() {
    let (x, ts) = planted(30, 10, 3, 120, 9);
    let x = CscMatrix::from_dense(&x);
    let mut cfg = config(2, 0.05, 3);
    assert_eq!(fit(&x, &ts, &cfg).unwrap().termination, Termination::MaxIterations);
    cfg.grad_tol = 1e6;
    let res = fit(&x, &ts, &cfg).unwrap();
    assert_eq!(res.termination, Termination::Converged);
    assert_eq!(res.trace.records.len(), 1);
}

fn corpus() -> Vec<Vec<String>> {
    ["how do i learn rust", "what is the best way to learn rust", "how to cook rice", "rice cooking tips", ""]
        .iter()
        .map(|s| tokenize(s))
        .collect()
}

#[test]
fn embedding_matches_dense_product() {
    let docs = corpus();
    let vocab = Vocabulary::fit(&docs, VectorizerConfig::default()).unwrap();
    let l = DMatrix::from_fn(3, vocab.len(), |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let model = MatchModel::new(MetricMap::new(l.clone()).unwrap(), vocab.clone()).unwrap();
    let y = embed(&model, &docs).unwrap();
    let x = vocab.transform::<f64, _>(&docs).to_dense();
    assert!((&y - &l * &x).amax() < 1e-12);
    assert_eq!(y.column(4).amax(), 0.0);

    let zero = MatchModel::new(MetricMap::new(DMatrix::<f64>::zeros(2, vocab.len())).unwrap(), vocab.clone()).unwrap();
    assert_eq!(embed(&zero, &docs).unwrap().amax(), 0.0);
    let one = embed(&model, &docs[..1]).unwrap();
    assert_eq!(one.shape(), (3, 1));

    assert!(MatchModel::new(MetricMap::new(DMatrix::<f64>::zeros(2, vocab.len() + 1)).unwrap(), vocab).is_err());
}

#[test]
fn model_file_round_trip_and_mismatch() {
    let docs = corpus();
    let vocab = Vocabulary::fit(&docs, VectorizerConfig::default()).unwrap();
    let l = DMatrix::from_fn(2, vocab.len(), |i, j| (i as f64 + 1.0) / (j as f64 + 2.0));
    let mut model = MatchModel::new(MetricMap::new(l).unwrap(), vocab).unwrap();
    model.k = 4;
    model.rule = Rule::Both;
    model.calibration = Calibration { a: 3.5, b: -1.25 };
    model.seed = 42;
    model.digest = config(2, 0.1, 3).digest();
    let mut buf = Vec::new();
    model.write_to(&mut buf).unwrap();
    let back = MatchModel::<f64>::read_from(&buf[..]).unwrap();
    assert_eq!(back.map.matrix(), model.map.matrix());
    assert_eq!(back.vocab, model.vocab);
    assert_eq!((back.k, back.rule, back.calibration, back.seed, back.digest), (4, Rule::Both, model.calibration, 42, model.digest));

    let mut other = Vec::new();
    model.write_to(&mut other).unwrap();
    assert_eq!(buf, other);

    // a vocabulary of a different size behind the same map
    let small = Vocabulary::fit(&[vec!["lone"]], VectorizerConfig::default()).unwrap();
    let mut vocab_bytes = Vec::new();
    small.write_to(&mut vocab_bytes).unwrap();
    let mut forged = Vec::new();
    model.map.write_to(&mut forged, 42, &model.digest).unwrap();
    forged.extend_from_slice(&(vocab_bytes.len() as u64).to_le_bytes());
    forged.extend_from_slice(&vocab_bytes);
    forged.extend_from_slice(&4u64.to_le_bytes());
    forged.push(0);
    forged.extend_from_slice(&1.0f64.to_le_bytes());
    forged.extend_from_slice(&0.0f64.to_le_bytes());
    assert!(matches!(MatchModel::<f64>::read_from(&forged[..]), Err(FilmError::Format(_))));
}

#[test]
fn calibration_matches_grid_oracle() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<u8> =
            scores.iter().map(|&s| (rng.random::<f64>() < 1.0 / (1.0 + (-(2.0 * s - 0.3)).exp())) as u8).collect();
        let fitted = calibrate(&scores, &labels).unwrap();
        let probs: Vec<f64> = scores.iter().map(|&s| fitted.probability(s)).collect();
        let ours = log_loss(&probs, &labels).unwrap();
        let (_, _, oracle) = logistic_grid_fit(&scores, &labels, 20.0, 20.0, film::matcher::PROB_CLIP);
        assert!(ours <= oracle + 1e-6, "seed {seed}: {ours} vs {oracle}");
        assert!((ours - oracle).abs() <= 1e-6, "seed {seed}: {ours} vs {oracle}");
    }
}

#[test]
fn generated_triplets_feed_the_solver() {
    let texts = [
        "how do i learn rust quickly",
        "fastest way to learn rust",
        "best rice cooker",
        "which rice cooker is best",
        "how tall is everest",
        "height of mount everest",
        "learn to cook rice",
        "rust borrow checker help",
    ];
    let docs: Vec<Vec<String>> = texts.iter().map(|s| tokenize(s)).collect();
    let vocab = Vocabulary::fit(&docs, VectorizerConfig::default()).unwrap();
    let x = vocab.transform::<f64, _>(&docs);
    let pairs = vec![LabeledPair::new(0, 1, 1), LabeledPair::new(2, 3, 1), LabeledPair::new(4, 5, 1), LabeledPair::new(0, 7, 0)];
    let gen = generate_triplets(&pairs, docs.len(), Some(&x), &TripletConfig::default()).unwrap();
    assert!(!gen.set.is_empty());
    let res = fit(&x, &gen.set, &config(2, 0.01, 50)).unwrap();
    assert!(res.final_objective <= res.initial_objective);
}
