use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use film::matcher::{read_predictions, write_predictions};
use film::solver::per_iteration_costs;
use film::triplets::generate_triplets;
use film::{CscMatrix, MatchModel, Rule};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigFile;
use crate::data::{write_atomic, Corpus, PairFile};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, ScalingConfig, TrainSettings, ALL_METRICS};

#[derive(Debug, Parser)]
#[command(name = "film", version, about = "Low-rank triplet metric learning and pairwise kNN sentence matching")]
pub struct Cli {
    /// key=value settings file; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a labeled pair file into train.tsv and val.tsv
    Split(SplitArgs),
    /// Fit the TF-IDF vocabulary of a pair file
    Vectorize(VectorizeArgs),
    /// Generate triplet constraints from labeled pairs
    Triplets(TripletArgs),
    /// Train a model on labeled pairs
    Train(TrainArgs),
    /// Choose k and calibrate on labeled validation pairs
    SelectK(SelectKArgs),
    /// Label pairs with a trained model
    Predict(PredictArgs),
    /// Score predictions against labels
    Evaluate(EvaluateArgs),
    /// Measure how solver update costs scale with n and d
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Training share, strictly between 0 and 1 [default: 0.8]
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VectorizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Vocabulary output file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_df: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct TripletFlags {
    #[arg(long)]
    pub negatives_per_positive: Option<usize>,
    #[arg(long)]
    pub hard_fraction: Option<f64>,
    /// Only emit triplets anchored at the first sentence of each positive pair
    #[arg(long)]
    pub one_sided: bool,
}

#[derive(Debug, Args)]
pub struct TripletArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_df: Option<usize>,
    #[command(flatten)]
    pub triplets: TripletFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Model output file
    #[arg(long)]
    pub model: PathBuf,
    /// Per-iteration trace output file
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rank cap of the truncated SVD; 0 computes the exact decomposition
    #[arg(long)]
    pub max_rank: Option<usize>,
    #[arg(long)]
    pub min_df: Option<usize>,
    /// Train on shuffled triplet batches
    #[arg(long)]
    pub minibatch: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Print per-update timing medians
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub triplets: TripletFlags,
}

#[derive(Debug, Args)]
pub struct SelectKArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Model output carrying the chosen k and calibration
    #[arg(long)]
    pub out_model: PathBuf,
    /// Per-k metric table output
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// either | both
    #[arg(long)]
    pub rule: Option<Rule>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Labeled pair file the predictions were made for
    #[arg(long)]
    pub input: PathBuf,
    /// Report output; printed to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of logloss,accuracy,rates,pearson
    #[arg(long)]
    pub metrics: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report output; printed to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Split(a) => split(a, &config),
        Command::Vectorize(a) => vectorize(a, &config),
        Command::Triplets(a) => triplets(a, &config),
        Command::Train(a) => train(a, &config),
        Command::SelectK(a) => select_k(a, &config),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a, &config),
        Command::Bench(a) => bench(a, &config),
    }
}

fn read_model(path: &Path) -> CliResult<MatchModel<f64>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    MatchModel::read_from(BufReader::new(file)).map_err(|e| match e {
        film::FilmError::Io(source) => CliError::Io { path: path.to_owned(), source },
        other => CliError::Input(format!("{}: {other}", path.display())),
    })
}

fn write_model(path: &Path, model: &MatchModel<f64>) -> CliResult<()> {
    write_atomic(path, |w| model.write_to(w))
}

fn split(a: SplitArgs, cfg: &ConfigFile) -> CliResult<()> {
    let ratio = cfg.resolve(a.ratio, "ratio", 0.8)?;
    let seed = cfg.resolve(a.seed, "seed", 0)?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CliError::Usage(format!("ratio must lie strictly between 0 and 1, got {ratio}")));
    }
    let file = PairFile::read(&a.input)?;
    let n = file.records.len();
    let n_train = (ratio * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(CliError::Usage(format!("ratio {ratio} of {n} pairs leaves an empty side")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut train, mut val) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    val.sort_unstable();
    file.write(&a.out_dir.join("train.tsv"), &train)?;
    file.write(&a.out_dir.join("val.tsv"), &val)?;
    println!("train {} val {}", train.len(), val.len());
    Ok(())
}

fn vectorize(a: VectorizeArgs, cfg: &ConfigFile) -> CliResult<()> {
    let min_df = cfg.resolve(a.min_df, "min-df", 1)?;
    let file = PairFile::read(&a.input)?;
    let corpus = Corpus::from_records(&file.records);
    let vocab = pipeline::fit_vocabulary(&corpus, min_df)?;
    write_atomic(&a.out, |w| vocab.write_to(w))?;
    println!("sentences {} features {}", corpus.len(), vocab.len());
    Ok(())
}

fn triplet_config(flags: &TripletFlags, seed: u64, cfg: &ConfigFile) -> CliResult<film::TripletConfig> {
    let defaults = film::TripletConfig::default();
    let config = film::TripletConfig {
        negatives_per_positive: cfg.resolve(flags.negatives_per_positive, "negatives-per-positive", defaults.negatives_per_positive)?,
        hard_fraction: cfg.resolve(flags.hard_fraction, "hard-fraction", defaults.hard_fraction)?,
        symmetric: !cfg.switch(flags.one_sided, "one-sided")?,
        seed,
    };
    if !(0.0..=1.0).contains(&config.hard_fraction) {
        return Err(CliError::Usage("hard-fraction must lie in [0, 1]".into()));
    }
    Ok(config)
}

fn triplets(a: TripletArgs, cfg: &ConfigFile) -> CliResult<()> {
    let seed = cfg.resolve(a.seed, "seed", 0)?;
    let tcfg = triplet_config(&a.triplets, seed, cfg)?;
    let min_df = cfg.resolve(a.min_df, "min-df", 1)?;
    let file = PairFile::read(&a.input)?;
    let labels = file.labels(&a.input)?;
    let corpus = Corpus::from_records(&file.records);
    let vocab = pipeline::fit_vocabulary(&corpus, min_df)?;
    let x: CscMatrix<f64> = vocab.transform(&corpus.tokens);
    let generation = generate_triplets(&pipeline::labeled_pairs(&corpus, &labels), corpus.len(), Some(&x), &tcfg)?;
    write_atomic(&a.out, |w| generation.set.write_to(w))?;
    println!("sentences {} triplets {} status {:?}", corpus.len(), generation.set.len(), generation.status);
    Ok(())
}

fn train(a: TrainArgs, cfg: &ConfigFile) -> CliResult<()> {
    let mut s = TrainSettings::default();
    let seed = cfg.resolve(a.seed, "seed", s.solver.seed)?;
    s.solver.seed = seed;
    s.solver.svd.seed = seed;
    s.solver.d = cfg.resolve(a.d, "d", s.solver.d)?;
    s.solver.margin = cfg.resolve(a.margin, "margin", s.solver.margin)?;
    s.solver.max_iters = cfg.resolve(a.max_iters, "max-iters", s.solver.max_iters)?;
    s.solver.grad_tol = cfg.resolve(a.grad_tol, "grad-tol", s.solver.grad_tol)?;
    let max_rank = cfg.resolve(a.max_rank, "max-rank", s.solver.svd.max_rank.unwrap_or(0))?;
    s.solver.svd.max_rank = (max_rank > 0).then_some(max_rank);
    s.solver.batch.batch_size = cfg.resolve(a.batch_size, "batch-size", s.solver.batch.batch_size)?;
    s.solver.batch.epochs = cfg.resolve(a.epochs, "epochs", s.solver.batch.epochs)?;
    s.minibatch = cfg.switch(a.minibatch, "minibatch")?;
    s.min_df = cfg.resolve(a.min_df, "min-df", s.min_df)?;
    s.triplets = triplet_config(&a.triplets, seed, cfg)?;
    let timing = cfg.switch(a.timing, "timing")?;
    s.solver.validate()?;

    let file = PairFile::read(&a.input)?;
    let out = pipeline::train(&file.records, &s)?;
    if let Some(path) = &a.trace {
        write_atomic(path, |w| out.trace.write_to(w))?;
    }
    write_model(&a.model, &out.model)?;
    println!(
        "sentences {} features {} rank {} triplets {} iterations {} termination {:?}",
        out.sentences,
        out.features,
        out.rank,
        out.triplets,
        out.trace.records.len(),
        out.termination
    );
    println!("f2 {:.6e} -> {:.6e}", out.initial_objective, out.final_objective);
    println!("wall-clock {:.3} s", out.seconds);
    if timing {
        print_costs(&mut std::io::stdout(), &per_iteration_costs(&out.trace)).map_err(CliError::io("stdout"))?;
    }
    Ok(())
}

fn print_costs<W: Write>(w: &mut W, c: &film::solver::CostReport) -> std::io::Result<()> {
    writeln!(w, "update\tcount\tmedian_s\tmean_s")?;
    for (name, k) in [
        ("active_set", c.active_set),
        ("working_matrix", c.working_matrix),
        ("gradient", c.gradient),
        ("point", c.point),
        ("scales", c.scales),
    ] {
        writeln!(w, "{name}\t{}\t{:.6e}\t{:.6e}", k.count, k.median, k.mean)?;
    }
    Ok(())
}

fn select_k(a: SelectKArgs, cfg: &ConfigFile) -> CliResult<()> {
    let k_min = cfg.resolve(a.k_min, "k-min", 1)?;
    let k_max = cfg.resolve(a.k_max, "k-max", 55)?;
    let rule = cfg.resolve(a.rule, "rule", Rule::Either)?;
    if k_min == 0 || k_min > k_max {
        return Err(CliError::Usage(format!("k range {k_min}..={k_max} is empty or starts at 0")));
    }
    let model = read_model(&a.model)?;
    let file = PairFile::read(&a.input)?;
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let sel = pipeline::select_k(&model, &file.records, &ks, rule)?;
    write_atomic(&a.table, |w| sel.table.write_table(w))?;
    write_model(&a.out_model, &sel.model)?;
    println!(
        "k {} rule {} calibration a {:.6} b {:.6}",
        sel.model.k, sel.model.rule, sel.model.calibration.a, sel.model.calibration.b
    );
    Ok(())
}

fn predict(a: PredictArgs) -> CliResult<()> {
    let model = read_model(&a.model)?;
    let file = PairFile::read(&a.input)?;
    let preds = pipeline::predict(&model, &file.records)?;
    write_atomic(&a.out, |w| write_predictions(&preds, w))?;
    println!("pairs {} positive {}", preds.len(), preds.iter().filter(|p| p.label == 1).count());
    Ok(())
}

fn evaluate(a: EvaluateArgs, cfg: &ConfigFile) -> CliResult<()> {
    let metrics = cfg.resolve(a.metrics, "metrics", "logloss,accuracy,rates,pearson".to_owned())?;
    let kinds = if metrics == "all" {
        ALL_METRICS.to_vec()
    } else {
        metrics.split(',').map(|m| pipeline::parse_metric(m.trim())).collect::<CliResult<Vec<_>>>()?
    };
    let preds = {
        let f = File::open(&a.predictions).map_err(CliError::io(&a.predictions))?;
        read_predictions(BufReader::new(f)).map_err(|e| CliError::Input(format!("{}: {e}", a.predictions.display())))?
    };
    let file = PairFile::read(&a.input)?;
    let report = pipeline::evaluate(&preds, &file.records, &kinds)?;
    match &a.out {
        Some(path) => write_atomic(path, |w| report.write_to(w))?,
        None => report.write_to(std::io::stdout().lock())?,
    }
    Ok(())
}

fn bench(a: BenchArgs, cfg: &ConfigFile) -> CliResult<()> {
    let d = ScalingConfig::default();
    let sc = ScalingConfig {
        n: cfg.resolve(a.n, "n", d.n)?,
        rank: cfg.resolve(a.rank, "rank", d.rank)?,
        d: cfg.resolve(a.d, "d", d.d)?,
        iters: cfg.resolve(a.iters, "iters", d.iters)?,
        seed: cfg.resolve(a.seed, "seed", d.seed)?,
        ..d
    };
    let report = pipeline::scaling_study(&sc)?;
    let render = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "case\tn\td\tactive_set_s\tworking_matrix_s\tgradient_s\tpoint_s\tscales_s")?;
        for (name, n, dd, c) in [
            ("base", sc.n, sc.d, report.base),
            ("double_n", 2 * sc.n, sc.d, report.double_n),
            ("double_d", sc.n, 2 * sc.d, report.double_d),
        ] {
            writeln!(
                w,
                "{name}\t{n}\t{dd}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
                c.active_set.median, c.working_matrix.median, c.gradient.median, c.point.median, c.scales.median
            )?;
        }
        writeln!(w, "active_set_ratio_2n\t{:.3}", report.active_set_ratio())?;
        writeln!(w, "point_ratio_2d\t{:.3}", report.point_ratio())
    };
    match &a.out {
        Some(path) => write_atomic(path, |w| render(w).map_err(Into::into))?,
        None => render(&mut std::io::stdout().lock()).map_err(CliError::io("stdout"))?,
    }
    Ok(())
}
