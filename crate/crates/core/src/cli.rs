use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cavprobe::data::{self, Attribute, Dataset, EmbeddingFormat, EmbeddingRecord};
use cavprobe::debias::{self, MixMode, SweepTarget};
use cavprobe::probe::{Cav, StepRule, TrainerConfig};
use cavprobe::report::{self, AuditReport, RunMetadata};
use cavprobe::sampler::{build_split, ConceptSpec, ConceptSplit};
use cavprobe::selftest::{self, SelftestConfig};
use cavprobe::synth::{self, SynthConfig};
use cavprobe::tcav::{self, GenreSelection, ProtocolConfig};
use cavprobe::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_STRICT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "cavprobe", version, about = "Concept probes and TCAV bias audits for embedding spaces")]
pub struct Cli {
    /// Master seed for splits and replicate subsets.
    #[arg(long, global = true, env = "CAVPROBE_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Exit with status 3 when degenerate statistics or attrition are reported.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate embeddings + metadata and print a summary.
    Ingest(DatasetArgs),
    /// Convert embeddings to another format.
    Export(ExportArgs),
    /// Build a balanced train/test split for one concept.
    Split(SplitArgs),
    /// Fit one CAV on the training side of a saved split.
    Train(TrainArgs),
    /// Run the replicate TCAV protocol and write a report.
    Score(ScoreArgs),
    /// Sweep the interpolation weight between two CAVs and track a demographic ratio.
    Debias(DebiasArgs),
    /// Generate a synthetic dataset with known geometry.
    Synth(SynthArgs),
    /// Run the end-to-end synthetic self-check.
    Selftest(SelftestArgs),
    /// Recompute significance flags of a report and its CSV tables.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Embedding file (.csv, .jsonl or .cave).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Metadata CSV with columns id,genre,gender,language.
    #[arg(long)]
    pub meta: PathBuf,
    /// Embedding format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<EmbeddingFormat>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub input: DatasetArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub out_format: Option<EmbeddingFormat>,
    /// Also write the metadata of the kept records.
    #[arg(long)]
    pub out_meta: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    pub input: DatasetArgs,
    /// Concept as attribute=value, e.g. gender=female.
    #[arg(long)]
    pub concept: ConceptSpec,
    #[arg(long, default_value_t = 50)]
    pub cell_cap: usize,
    /// Stratification attribute (default: genre, or gender for genre concepts).
    #[arg(long)]
    pub stratify_by: Option<Attribute>,
    #[arg(long)]
    pub split_out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainerArgs {
    #[arg(long, default_value_t = 1.0)]
    pub l2_lambda: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub gradient_tolerance: f64,
    /// Use a fixed gradient step instead of L-BFGS with line search.
    #[arg(long)]
    pub fixed_step: Option<f64>,
    /// Replicates below this test accuracy are dropped.
    #[arg(long, default_value_t = 0.65)]
    pub reliability_threshold: f64,
    /// Fit on standardised features.
    #[arg(long)]
    pub standardize: bool,
}

impl TrainerArgs {
    fn config(&self) -> TrainerConfig {
        let mut c = TrainerConfig {
            l2_lambda: self.l2_lambda,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            reliability_threshold: self.reliability_threshold,
            standardize: self.standardize,
            ..TrainerConfig::default()
        };
        if let Some(step) = self.fixed_step {
            c.step_rule = StepRule::Fixed;
            c.step_size = step;
        }
        c
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: DatasetArgs,
    #[arg(long)]
    pub split: PathBuf,
    #[command(flatten)]
    pub trainer: TrainerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: DatasetArgs,
    /// Concept as attribute=value; repeat for several.
    #[arg(long = "concept")]
    pub concepts: Vec<ConceptSpec>,
    /// One concept per gender/language value with enough positives.
    #[arg(long)]
    pub concepts_all: bool,
    #[arg(long, default_value_t = 50)]
    pub min_support: usize,
    /// `all` or a comma-separated list.
    #[arg(long, default_value = "all")]
    pub genres: String,
    #[arg(long, default_value_t = 500)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 50)]
    pub cell_cap: usize,
    #[command(flatten)]
    pub trainer: TrainerArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for tcav_<concept>.csv and scores_<concept>.csv tables.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    /// Raw replicate × genre score matrix.
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
    /// Directory receiving one split JSON per concept.
    #[arg(long)]
    pub split_out: Option<PathBuf>,
    /// Leave the timestamp out of the report.
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Args, Debug)]
pub struct DebiasArgs {
    #[command(flatten)]
    pub input: DatasetArgs,
    /// CAV JSON of the direction being adjusted.
    #[arg(long)]
    pub base: PathBuf,
    /// CAV JSON of the concept mixed in.
    #[arg(long)]
    pub adjust: PathBuf,
    #[arg(long, default_value = "add")]
    pub mode: MixMode,
    /// `all`, attribute=value filters joined by commas, or @file with one id per line.
    #[arg(long, default_value = "all")]
    pub pool: String,
    #[arg(long, default_value = "0:1:0.05")]
    pub lambdas: String,
    #[arg(long, default_value_t = 0.5)]
    pub top_fraction: f64,
    /// attribute=value whose share among the top-ranked records is tracked.
    #[arg(long, default_value = "gender=male")]
    pub track: String,
    /// Scale both CAVs to unit norm before mixing.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON world description; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_emb: PathBuf,
    #[arg(long)]
    pub out_meta: PathBuf,
    #[arg(long)]
    pub out_truth: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<EmbeddingFormat>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    #[arg(long)]
    pub no_timestamp: bool,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

/// Parses `argv` and runs the command, returning the process exit status.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_DATA;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = std::result::Result<i32, Failure>;

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Export(a) => export(a),
        Command::Split(a) => split(cli, a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(cli, a),
        Command::Debias(a) => debias_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Selftest(a) => selftest_cmd(cli, a),
        Command::Check(a) => check(a),
    }
}

fn format_of(path: &Path, explicit: Option<EmbeddingFormat>) -> std::result::Result<EmbeddingFormat, Failure> {
    explicit
        .or_else(|| EmbeddingFormat::from_path(path))
        .ok_or_else(|| Failure::Usage(format!("cannot infer format of {}; pass --format", path.display())))
}

fn load(a: &DatasetArgs) -> std::result::Result<Dataset, Failure> {
    let format = format_of(&a.dataset, a.format)?;
    let ingested = data::ingest(&a.dataset, format, &a.meta)?;
    if !ingested.dropped.is_empty() {
        log::warn!("{} embeddings without metadata were dropped", ingested.dropped.len());
    }
    Ok(ingested.dataset)
}

fn ingest(a: &DatasetArgs) -> Outcome {
    let format = format_of(&a.dataset, a.format)?;
    let ingested = data::ingest(&a.dataset, format, &a.meta)?;
    let ds = &ingested.dataset;
    let summary = serde_json::json!({
        "records": ds.len(),
        "dimension": ds.dimension(),
        "dropped": ingested.dropped,
        "vocabulary": ds.attribute_vocabulary(),
        "fingerprint": ds.fingerprint(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(EXIT_OK)
}

fn export(a: &ExportArgs) -> Outcome {
    let ds = load(&a.input)?;
    let format = format_of(&a.out, a.out_format)?;
    let rows: Vec<(&str, &[f64])> = ds.records().iter().map(|r| (r.id.as_str(), r.vector.as_slice())).collect();
    data::write_embeddings(&a.out, format, ds.dimension(), &rows)?;
    if let Some(meta) = &a.out_meta {
        data::write_metadata(meta, ds.records())?;
    }
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(EXIT_OK)
}

fn concept_spec(cli: &Cli, spec: &ConceptSpec, cell_cap: usize) -> ConceptSpec {
    spec.clone().with_seed(cli.seed).with_cell_cap(cell_cap)
}

fn split(cli: &Cli, a: &SplitArgs) -> Outcome {
    let ds = load(&a.input)?;
    let mut spec = concept_spec(cli, &a.concept, a.cell_cap);
    if let Some(attr) = a.stratify_by {
        spec = spec.with_stratify_by(attr);
    }
    let split = build_split(&ds, &spec)?;
    split.save(&a.split_out)?;
    println!("{split}");
    Ok(EXIT_OK)
}

fn train(a: &TrainArgs) -> Outcome {
    let ds = load(&a.input)?;
    let split = ConceptSplit::load(&a.split)?;
    let cav = tcav::fit_split(&ds, &split, &a.trainer.config())?;
    cav.save(&a.out)?;
    println!(
        "{}: train accuracy {:.4}, test accuracy {}, converged {} after {} iterations",
        cav.concept_name,
        cav.train_accuracy,
        cav.test_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
        cav.converged,
        cav.iterations
    );
    Ok(EXIT_OK)
}

fn all_concepts(ds: &Dataset, min_support: usize) -> Vec<ConceptSpec> {
    let mut out = Vec::new();
    for attr in [Attribute::Gender, Attribute::Language] {
        let Some(values) = ds.vocabulary(attr) else { continue };
        if values.len() < 2 {
            continue;
        }
        for v in values {
            let support = ds.records().iter().filter(|r| r.attribute(attr) == Some(v.as_str())).count();
            if support >= min_support {
                out.push(ConceptSpec::new(attr, v.clone()));
            }
        }
    }
    out
}

fn score(cli: &Cli, a: &ScoreArgs) -> Outcome {
    if a.concepts.is_empty() && !a.concepts_all {
        return Err(Failure::Usage("give at least one --concept or --concepts-all".into()));
    }
    let ds = load(&a.input)?;
    let mut specs: Vec<ConceptSpec> = a.concepts.clone();
    if a.concepts_all {
        for c in all_concepts(&ds, a.min_support) {
            if !specs.iter().any(|s| s.name == c.name) {
                specs.push(c);
            }
        }
    }
    let specs: Vec<ConceptSpec> = specs.iter().map(|s| concept_spec(cli, s, a.cell_cap)).collect();
    let splits = specs.iter().map(|s| build_split(&ds, s)).collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &a.split_out {
        std::fs::create_dir_all(dir).map_err(|e| Error::IoFailure { path: dir.clone(), source: e })?;
        for s in &splits {
            s.save(&dir.join(format!("split_{}.json", report::file_stem(&s.concept.name))))?;
        }
    }
    let genres = if a.genres == "all" {
        GenreSelection::All
    } else {
        GenreSelection::Named(a.genres.split(',').map(|g| g.trim().to_string()).collect())
    };
    let protocol = ProtocolConfig {
        replicates: a.replicates,
        fraction: a.fraction,
        alpha: a.alpha,
        trainer: a.trainer.config(),
    };
    protocol.validate()?;
    let audit = tcav::run_audit(&ds, &splits, &genres, &protocol)?;
    let echo = serde_json::json!({
        "command": "score",
        "concepts": specs,
        "genres": a.genres,
        "protocol": protocol,
        "cell_cap": a.cell_cap,
        "strict": cli.strict,
    });
    let mut meta = RunMetadata::new(cli.seed, echo, audit.family_size, a.alpha, !a.no_timestamp);
    meta.dataset_fingerprint = Some(ds.fingerprint());
    let report = AuditReport::from_audit(meta, &audit, a.replicates);
    report::emit(&report, &a.out, a.csv_dir.as_deref())?;
    if let Some(path) = &a.scores_out {
        for run in &audit.runs {
            let target = if audit.runs.len() == 1 {
                path.clone()
            } else {
                suffixed(path, &report::file_stem(&run.concept_name))
            };
            let results: Vec<_> = run.results.iter().collect();
            let ids: Vec<u64> = run.score_matrix().iter().map(|(i, _)| *i).collect();
            std::fs::write(&target, report::scores_csv(&results, &ids))
                .map_err(|e| Error::IoFailure { path: target.clone(), source: e })?;
        }
    }
    for r in &report.tcav {
        println!(
            "{} {}: mean {:.4} p_bonf {} {}",
            r.concept_name,
            r.genre,
            r.mean,
            r.p_bonferroni.map_or("n/a".into(), |p| format!("{p:.3e}")),
            if r.significant { format!("{:?}", r.direction).to_lowercase() } else { "ns".into() }
        );
    }
    let degenerate = report.tcav.iter().any(|r| r.degenerate || r.ci_outside_unit);
    let attrition = !audit.failures.is_empty() || report.attrition.iter().any(|a| a.n_unreliable > 0);
    if cli.strict && (degenerate || attrition) {
        eprintln!("strict: degenerate statistics or replicate attrition reported");
        return Ok(EXIT_STRICT);
    }
    Ok(EXIT_OK)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scores");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

fn parse_pair(s: &str) -> std::result::Result<(Attribute, String), Failure> {
    let (attr, value) = s
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("expected attribute=value, got `{s}`")))?;
    let attr: Attribute = attr.trim().parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    Ok((attr, value.trim().to_string()))
}

fn select_pool<'a>(ds: &'a Dataset, spec: &str) -> std::result::Result<Vec<&'a EmbeddingRecord>, Failure> {
    if spec == "all" {
        return Ok(ds.records().iter().collect());
    }
    if let Some(file) = spec.strip_prefix('@') {
        let path = Path::new(file);
        let text = std::fs::read_to_string(path).map_err(|e| Error::IoFailure { path: path.into(), source: e })?;
        return text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|id| ds.get(id).ok_or_else(|| Failure::Data(Error::UnknownId(id.to_string()))))
            .collect();
    }
    let filters = spec.split(',').map(parse_pair).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ds
        .records()
        .iter()
        .filter(|r| filters.iter().all(|(a, v)| r.attribute(*a) == Some(v.as_str())))
        .collect())
}

fn debias_cmd(a: &DebiasArgs) -> Outcome {
    let ds = load(&a.input)?;
    let base = Cav::load(&a.base)?;
    let adjustment = Cav::load(&a.adjust)?;
    let pool = select_pool(&ds, &a.pool)?;
    let lambdas = debias::parse_lambda_grid(&a.lambdas)?;
    let (attribute, value) = parse_pair(&a.track)?;
    let target = SweepTarget {
        attribute,
        value: &value,
        top_fraction: a.top_fraction,
    };
    let curve = debias::sweep(&base, &adjustment, a.mode, &pool, &ds, &lambdas, &target, a.normalize)?;
    curve.write_csv(&a.out)?;
    for (l, r) in curve.lambdas.iter().zip(&curve.ratios) {
        println!("{l:.3} {r:.4}");
    }
    Ok(EXIT_OK)
}

fn synth_cmd(a: &SynthArgs) -> Outcome {
    let config = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    let (ds, truth) = synth::generate(&config)?;
    let format = format_of(&a.out_emb, a.format)?;
    let rows: Vec<(&str, &[f64])> = ds.records().iter().map(|r| (r.id.as_str(), r.vector.as_slice())).collect();
    data::write_embeddings(&a.out_emb, format, ds.dimension(), &rows)?;
    data::write_metadata(&a.out_meta, ds.records())?;
    if let Some(t) = &a.out_truth {
        truth.save(t)?;
    }
    println!("wrote {} records of dimension {}", ds.len(), ds.dimension());
    Ok(EXIT_OK)
}

fn selftest_cmd(cli: &Cli, a: &SelftestArgs) -> Outcome {
    let cfg = SelftestConfig {
        seed: cli.seed,
        replicates: a.replicates,
        ..SelftestConfig::default()
    };
    let report = selftest::run(&cfg, !a.no_timestamp)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(out) = &a.out {
        report::emit(&report, out, a.csv_dir.as_deref())?;
    }
    if !selftest::all_passed(&report) {
        return Ok(EXIT_DATA);
    }
    if cli.strict && report.tcav.iter().any(|r| r.degenerate || r.ci_outside_unit) {
        return Ok(EXIT_STRICT);
    }
    Ok(EXIT_OK)
}

fn check(a: &CheckArgs) -> Outcome {
    let report = AuditReport::load(&a.report)?;
    let mut problems = report.consistency_problems();
    if let Some(dir) = &a.csv_dir {
        let concepts: std::collections::BTreeSet<&str> =
            report.tcav.iter().map(|r| r.concept_name.as_str()).collect();
        for c in concepts {
            let path = dir.join(format!("tcav_{}.csv", report::file_stem(c)));
            problems.extend(report::verify_tcav_csv(&path, report.run_metadata.m, report.run_metadata.alpha)?);
        }
    }
    if problems.is_empty() {
        println!("consistent: {} results, m = {}", report.tcav.len(), report.run_metadata.m);
        Ok(EXIT_OK)
    } else {
        for p in &problems {
            eprintln!("{p}");
        }
        Ok(EXIT_DATA)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with(["cavprobe", "score"]), EXIT_USAGE);
        assert_eq!(main_with(["cavprobe", "bogus"]), EXIT_USAGE);
        assert_eq!(main_with(["cavprobe", "--help"]), EXIT_OK);
    }

    #[test]
    fn pool_filters() {
        let recs = (0..4)
            .map(|i| EmbeddingRecord {
                id: format!("r{i}"),
                vector: vec![i as f64],
                genre: if i < 2 { "rock" } else { "pop" }.into(),
                gender: Some(if i % 2 == 0 { "male" } else { "female" }.into()),
                language: None,
            })
            .collect();
        let ds = Dataset::new(recs).unwrap();
        assert_eq!(select_pool(&ds, "all").ok().unwrap().len(), 4);
        assert_eq!(select_pool(&ds, "genre=rock").ok().unwrap().len(), 2);
        assert_eq!(select_pool(&ds, "genre=rock,gender=male").ok().unwrap().len(), 1);
        assert!(select_pool(&ds, "nonsense").is_err());
    }
}
