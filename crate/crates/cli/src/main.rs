use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sentikern::bowe::{build_histograms, load_histograms, pq_kernel_cross, pq_kernel_matrix, pq_kernel_matrix_raw, save_histograms};
use sentikern::cluster::{cluster_size_report, kmeans_fit, som_fit, Codebook, SomConfig, VectorSet};
use sentikern::corpus::{corpus_stats, preprocess, split_train_test, Corpus, Review};
use sentikern::embed::{doc_vectors, load_contextual_dump, load_embeddings, save_contextual_dump, train_cbow, CbowConfig, TrainMode};
use sentikern::hisk::{compute_hisk_cross, compute_hisk_matrix, NgramRange};
use sentikern::kernel::normalize_kernel;
use sentikern::learn::{fuse_kernels, kfold_cv, ovr_predict, ovr_train, EvalReport, OvrModel, Protocol, SvmParams};
use sentikern::pipeline::{run_pipeline, KernelMethod, RunConfig, RunProtocol};
use sentikern::{Error, KernelMatrix, Result};

#[derive(Parser)]
#[command(name = "sentikern", version, about = "String-kernel and bag-of-word-embeddings text classification")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect, split and import corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train, check and apply word embeddings.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Fit codebooks and report cluster occupancy.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Build bag-of-word-embeddings histograms.
    #[command(subcommand)]
    Bowe(BoweCmd),
    /// Compute, cross and fuse kernel matrices.
    #[command(subcommand)]
    Kernel(KernelCmd),
    /// Train an SVM on a precomputed kernel.
    Train(TrainArgs),
    /// Evaluate on a test kernel or by cross-validation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run a whole pipeline from a TOML configuration.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Print corpus statistics as JSON.
    Stats { path: PathBuf },
    /// Stratified train/test split.
    Split {
        path: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Convert LaRoSeDa JSON files into one JSONL corpus. With several
    /// inputs, ids are prefixed with the file stem.
    ImportLaroseda {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    /// Train CBOW vectors on a corpus and write word2vec text format.
    Train(EmbedTrainArgs),
    /// Validate a word2vec text file and print its shape.
    Check { path: PathBuf },
    /// Look up every document's tokens and write a token-vector dump.
    Vectors {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EmbedTrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 300)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.025)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    min_count: u64,
    #[arg(long, default_value_t = 1e-3)]
    subsample: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Asynchronous training with this many workers (not reproducible).
    #[arg(long)]
    hogwild: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kmeans,
    Som,
}

#[derive(Subcommand)]
enum ClusterCmd {
    /// Fit a k-means or SOM codebook on a token-vector dump.
    Fit {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, default_value_t = 500)]
        k: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// SOM grid as ROWSxCOLS (default: near-square for k).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster occupancy against the Zipf reference, as CSV.
    Report {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BoweCmd {
    /// One histogram per document of a token-vector dump.
    Build {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct NormalizeFlags {
    /// Normalize to unit self-similarity (the default).
    #[arg(long, conflicts_with = "raw")]
    normalize: bool,
    /// Keep raw kernel values.
    #[arg(long)]
    raw: bool,
}

#[derive(Subcommand)]
enum KernelCmd {
    /// Square HISK matrix over a corpus.
    Hisk {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "3,4,5")]
        ngrams: String,
        #[command(flatten)]
        norm: NormalizeFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// HISK block between two corpora (rows x cols, e.g. test x train).
    HiskCross {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        cols: PathBuf,
        #[arg(long, default_value = "3,4,5")]
        ngrams: String,
        #[command(flatten)]
        norm: NormalizeFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// PQ matrix over histograms; with --cross, the block against those.
    Pq {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        cross: Option<PathBuf>,
        #[command(flatten)]
        norm: NormalizeFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entrywise sum of kernels with identical manifests.
    Fuse {
        #[arg(long = "in", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long = "C", default_value_t = 1000.0)]
    c: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Predict a test x train kernel with a trained model.
    Test {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cross: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Stratified k-fold cross-validation on a square kernel.
    Cv {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "C", default_value_t = 1000.0)]
        c: f64,
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMethodArg {
    Hisk,
    Bowe,
    #[value(name = "hisk+bowe")]
    HiskBowe,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    TrainTest,
    Kfold,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<RunMethodArg>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let (corpus, report) = Corpus::load(path)?;
    if report.neutral_skipped > 0 {
        eprintln!("{}: skipped {} neutral reviews", path.display(), report.neutral_skipped);
    }
    Ok(corpus)
}

/// Class index of every kernel row, looked up by id in the corpus.
fn labels_for(ids: &[String], corpus: &Corpus, classes: &[String]) -> Result<Vec<usize>> {
    let by_id: HashMap<&str, &str> = corpus.reviews().iter().map(|r| (r.id.as_str(), r.label.as_str())).collect();
    ids.iter()
        .map(|id| {
            let label = by_id.get(id.as_str()).ok_or_else(|| Error::ManifestMismatch(format!("id {id:?} is not in the label corpus")))?;
            classes
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| Error::DegenerateLabels(format!("label {label:?} is unknown to the model")))
        })
        .collect()
}

fn write_confusion(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        report.write_confusion_csv(BufWriter::new(fs::File::create(p)?))?;
    }
    Ok(())
}

fn maybe_normalize(k: KernelMatrix, norm: &NormalizeFlags) -> Result<KernelMatrix> {
    if norm.raw {
        Ok(k)
    } else {
        normalize_kernel(&k)
    }
}

fn corpus_cmd(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Stats { path } => print_json(&corpus_stats(&load_corpus(&path)?)),
        CorpusCmd::Split {
            path,
            fraction,
            seed,
            out_train,
            out_test,
        } => {
            let (train, test) = split_train_test(&load_corpus(&path)?, fraction, seed)?;
            train.save(&out_train)?;
            test.save(&out_test)?;
            print_json(&serde_json::json!({ "train": train.len(), "test": test.len() }))
        }
        CorpusCmd::ImportLaroseda { inputs, out } => {
            let prefix = inputs.len() > 1;
            let mut reviews: Vec<Review> = Vec::new();
            let mut neutral = 0;
            for p in &inputs {
                let (c, report) = Corpus::from_laroseda_json(&fs::read_to_string(p)?)?;
                neutral += report.neutral_skipped;
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                reviews.extend(c.reviews().iter().cloned().map(|mut r| {
                    if prefix {
                        r.id = format!("{stem}-{}", r.id);
                    }
                    r
                }));
            }
            let corpus = Corpus::new(reviews)?;
            corpus.save(&out)?;
            print_json(&serde_json::json!({ "loaded": corpus.len(), "neutral_skipped": neutral }))
        }
    }
}

fn embed_cmd(cmd: EmbedCmd) -> Result<()> {
    match cmd {
        EmbedCmd::Train(a) => {
            let config = CbowConfig {
                dim: a.dim,
                window: a.window,
                negatives: a.negatives,
                epochs: a.epochs,
                initial_lr: a.lr,
                min_count: a.min_count,
                subsample_threshold: a.subsample,
                seed: a.seed,
                mode: match a.hogwild {
                    Some(workers) => TrainMode::Hogwild { workers },
                    None => TrainMode::Deterministic,
                },
            };
            let (table, stats) = train_cbow(&load_corpus(&a.input)?, &config)?;
            table.save(&a.out)?;
            print_json(&stats)
        }
        EmbedCmd::Check { path } => {
            let t = load_embeddings(&path)?;
            print_json(&serde_json::json!({ "vocab": t.len(), "dim": t.dim() }))
        }
        EmbedCmd::Vectors { corpus, embeddings, out } => {
            let corpus = load_corpus(&corpus)?;
            let table = load_embeddings(&embeddings)?;
            let mut skipped = 0;
            let docs: Vec<_> = corpus
                .reviews()
                .iter()
                .map(|r| {
                    let (d, s) = doc_vectors(&r.id, &preprocess(&r.text), &table);
                    skipped += s;
                    d
                })
                .collect();
            save_contextual_dump(&docs, &out)?;
            print_json(&serde_json::json!({ "documents": docs.len(), "oov_skipped": skipped }))
        }
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("grid must look like 25x20, got {s:?}"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn cluster_cmd(cmd: ClusterCmd) -> Result<()> {
    match cmd {
        ClusterCmd::Fit {
            method,
            k,
            input,
            seed,
            grid,
            epochs,
            out,
        } => {
            let vectors = VectorSet::pool(&load_contextual_dump(&input)?)?;
            let codebook = match method {
                MethodArg::Kmeans => kmeans_fit(&vectors, k, seed)?,
                MethodArg::Som => {
                    let mut cfg = match grid {
                        Some(g) => {
                            let (r, c) = parse_grid(&g)?;
                            SomConfig::new(r, c, seed)
                        }
                        None => SomConfig::for_k(k, seed),
                    };
                    if cfg.k != k {
                        return Err(Error::InvalidConfig(format!("grid {}x{} does not hold k = {k}", cfg.grid_rows, cfg.grid_cols)));
                    }
                    if let Some(e) = epochs {
                        cfg.epochs = e;
                    }
                    som_fit(&vectors, &cfg)?
                }
            };
            codebook.save(&out)?;
            print_json(&serde_json::json!({ "method": codebook.method(), "k": codebook.k(), "dim": codebook.dim(), "vectors": vectors.len() }))
        }
        ClusterCmd::Report { codebook, input, out } => {
            let codebook = Codebook::load(&codebook)?;
            let vectors = VectorSet::pool(&load_contextual_dump(&input)?)?;
            let report = cluster_size_report(&codebook, &vectors)?;
            report.write_csv(BufWriter::new(fs::File::create(&out)?))?;
            print_json(&serde_json::json!({ "zipf_l1": report.zipf_l1, "total": report.total() }))
        }
    }
}

fn kernel_cmd(cmd: KernelCmd) -> Result<()> {
    let (k, out) = match cmd {
        KernelCmd::Hisk { input, ngrams, norm, out } => {
            let c = load_corpus(&input)?;
            let raw = compute_hisk_matrix(c.ids(), &c.documents(), &NgramRange::parse(&ngrams)?)?;
            (maybe_normalize(raw, &norm)?, out)
        }
        KernelCmd::HiskCross {
            rows,
            cols,
            ngrams,
            norm,
            out,
        } => {
            let (r, c) = (load_corpus(&rows)?, load_corpus(&cols)?);
            let ck = compute_hisk_cross(r.ids(), &r.documents(), c.ids(), &c.documents(), &NgramRange::parse(&ngrams)?)?;
            (if norm.raw { ck.matrix } else { ck.normalized()? }, out)
        }
        KernelCmd::Pq { input, cross, norm, out } => {
            let rows = load_histograms(&input)?;
            let k = match cross {
                Some(cols) => {
                    let ck = pq_kernel_cross(&rows, &load_histograms(&cols)?)?;
                    if norm.raw {
                        ck.matrix
                    } else {
                        ck.normalized()?
                    }
                }
                None if norm.raw => pq_kernel_matrix_raw(&rows)?,
                None => pq_kernel_matrix(&rows)?,
            };
            (k, out)
        }
        KernelCmd::Fuse { inputs, out } => {
            let ks = inputs.iter().map(KernelMatrix::load).collect::<Result<Vec<_>>>()?;
            (fuse_kernels(&ks)?, out)
        }
    };
    k.save(&out)?;
    print_json(&serde_json::json!({ "rows": k.rows(), "cols": k.cols() }))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let k = KernelMatrix::load(&a.kernel)?;
    let corpus = load_corpus(&a.labels)?;
    let classes = corpus.label_set().to_vec();
    let labels = labels_for(k.row_ids(), &corpus, &classes)?;
    let mut model = ovr_train(&k, &labels, &classes, &SvmParams::with_c(a.c))?;
    let recipe = a.kernel.display().to_string();
    for m in &mut model.models {
        m.kernel = Some(recipe.clone());
    }
    model.save(&a.out)?;
    let support: Vec<usize> = model.models.iter().map(|m| m.support_ids.len()).collect();
    print_json(&serde_json::json!({ "classes": model.classes, "support_vectors": support }))
}

fn eval_cmd(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Test {
            model,
            cross,
            labels,
            confusion,
        } => {
            let model = OvrModel::load(&model)?;
            let k = KernelMatrix::load(&cross)?;
            let truth = labels_for(k.row_ids(), &load_corpus(&labels)?, &model.classes)?;
            let predicted = ovr_predict(&model, &k)?;
            let n = model.classes.len();
            let mut matrix = vec![vec![0u64; n]; n];
            for (&t, &p) in truth.iter().zip(&predicted) {
                matrix[t][p] += 1;
            }
            let correct: u64 = (0..n).map(|i| matrix[i][i]).sum();
            let report = EvalReport {
                protocol: Protocol::TrainTest,
                accuracy: correct as f64 / truth.len().max(1) as f64,
                per_fold: None,
                confusion: matrix,
                labels: model.classes.clone(),
                seed: 0,
            };
            write_confusion(&report, confusion.as_deref())?;
            print_json(&report)
        }
        EvalCmd::Cv {
            kernel,
            labels,
            folds,
            seed,
            c,
            confusion,
        } => {
            let k = KernelMatrix::load(&kernel)?;
            let corpus = load_corpus(&labels)?;
            let classes = corpus.label_set().to_vec();
            let y = labels_for(k.row_ids(), &corpus, &classes)?;
            let report = kfold_cv(&k, &y, &classes, folds, seed, &SvmParams::with_c(c))?;
            write_confusion(&report, confusion.as_deref())?;
            print_json(&report)
        }
    }
}

fn run_cmd(a: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.method {
        cfg.method = match m {
            RunMethodArg::Hisk => KernelMethod::Hisk,
            RunMethodArg::Bowe => KernelMethod::Bowe,
            RunMethodArg::HiskBowe => KernelMethod::HiskBowe,
        };
    }
    if let Some(p) = a.protocol {
        cfg.protocol = match p {
            ProtocolArg::TrainTest => RunProtocol::TrainTest,
            ProtocolArg::Kfold => RunProtocol::Kfold,
        };
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    if let Some(c) = a.c {
        cfg.c = c;
    }
    if let Some(d) = a.cache_dir {
        cfg.cache_dir = d;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    let out = run_pipeline(&cfg)?;
    print_json(&out)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Corpus(_) => "corpus",
        Command::Embed(_) => "embed",
        Command::Cluster(_) => "cluster",
        Command::Bowe(_) => "bowe",
        Command::Kernel(_) => "kernel",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Run(_) => "run",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    let jobs = cli.jobs.or_else(|| match &cli.command {
        Command::Run(a) => RunConfig::load(&a.config).ok().and_then(|c| c.jobs),
        _ => None,
    });
    if let Some(n) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({ "stage": "setup", "error": e.to_string() }));
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Corpus(c) => corpus_cmd(c),
        Command::Embed(c) => embed_cmd(c),
        Command::Cluster(c) => cluster_cmd(c),
        Command::Bowe(BoweCmd::Build { codebook, vectors, out }) => (|| {
            let codebook = Codebook::load(&codebook)?;
            let hs = build_histograms(&load_contextual_dump(&vectors)?, &codebook)?;
            save_histograms(&hs, &out)?;
            print_json(&serde_json::json!({ "documents": hs.len(), "k": codebook.k() }))
        })(),
        Command::Kernel(c) => kernel_cmd(c),
        Command::Train(a) => train_cmd(a),
        Command::Eval(c) => eval_cmd(c),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage().unwrap_or(name).to_string();
            eprintln!("{}", serde_json::json!({ "stage": stage, "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
