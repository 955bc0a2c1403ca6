//! The `hidec` command-line tool. [`run`] parses arguments, dispatches to the
//! subcommand and maps failures to exit codes: 2 for usage errors, 1 for
//! domain errors (reported with the library's error name).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use hidec_core::checkpoint::{checkpoint_precision, load_checkpoint, save_checkpoint};
use hidec_core::codec::{build_subhierarchy, deserialize, parse_notation, serialize, to_notation, Token};
use hidec_core::corpus::{gold_sets, read_jsonl, write_jsonl, Document};
use hidec_core::datagen::{generate_corpus, generate_taxonomy, SynthSpec};
use hidec_core::decoder::AttentionKind;
use hidec_core::encoder::TextEncoder;
use hidec_core::inference::predict;
use hidec_core::metrics::{evaluate, EvalReport};
use hidec_core::training::{fit, log_to_csv, ModelBundle, Precision, TrainConfig};
use hidec_core::{Element, Error, Graph, Result, Taxonomy};

pub const MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CONFIG: &str = "config.cfg";

#[derive(Parser, Debug)]
#[command(name = "hidec", version, about = "Hierarchical text classification by sub-hierarchy decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Taxonomy file utilities.
    #[command(subcommand)]
    Taxonomy(TaxonomyCommand),
    /// Convert between label sets and token sequences.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Generate a synthetic taxonomy and corpus.
    SynthData(SynthArgs),
    /// Train a model and keep the best checkpoint.
    Train(TrainArgs),
    /// Predict label sets for a JSONL corpus.
    Predict(PredictArgs),
    /// Score a checkpoint against a labeled corpus.
    Evaluate(EvaluateArgs),
    /// Export decoder attention weights for one document as CSV.
    InspectAttention(InspectArgs),
}

#[derive(Subcommand, Debug)]
enum TaxonomyCommand {
    /// Load a taxonomy and report its size and depth.
    Validate {
        #[arg(long)]
        taxonomy: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum CodecCommand {
    /// Print the token sequence of a label set.
    Encode {
        #[arg(long)]
        taxonomy: PathBuf,
        /// Comma-separated label names.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<String>,
    },
    /// Print the assigned labels of a token sequence.
    Decode {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        sequence: String,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    branching_min: usize,
    #[arg(long, default_value_t = 3)]
    branching_max: usize,
    /// Keywords owned by each label.
    #[arg(long, default_value_t = 3)]
    keywords: usize,
    /// Keywords drawn per label of a document.
    #[arg(long, default_value_t = 2)]
    words_per_label: usize,
    #[arg(long, default_value_t = 200)]
    noise_vocab: usize,
    /// Fraction of noise tokens per document.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 2.0)]
    avg_labels: f64,
    #[arg(long, default_value_t = 800)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    dev: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// Training corpus (JSONL).
    #[arg(long)]
    train: PathBuf,
    /// Dev corpus for model selection. Without it the last epoch is kept.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    /// Train this many seeds (seed, seed+1, ...) and report mean±std.
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Require the checkpoint to match this taxonomy file.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Score raw label sets, without adding ancestors.
    #[arg(long)]
    no_closure: bool,
    /// Also write report.json and levels.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Index of the document in the corpus.
    #[arg(long, default_value_t = 0)]
    doc: usize,
    /// Use the gold labels instead of the decoded ones.
    #[arg(long)]
    gold: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.name());
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Taxonomy(TaxonomyCommand::Validate { taxonomy }) => {
            let t = Taxonomy::load(taxonomy)?;
            println!("labels\t{}", t.len());
            println!("depth\t{}", t.max_depth());
            println!("root\t{}", t.name(t.root()));
            Ok(())
        }
        Command::Codec(CodecCommand::Encode { taxonomy, labels }) => {
            let t = Taxonomy::load(taxonomy)?;
            let ids = labels.iter().map(|n| t.id(n.trim())).collect::<Result<Vec<_>>>()?;
            let seq = serialize(&t, &build_subhierarchy(&t, ids)?)?;
            println!("{}", to_notation(&t, &seq.tokens));
            Ok(())
        }
        Command::Codec(CodecCommand::Decode { taxonomy, sequence }) => {
            let t = Taxonomy::load(taxonomy)?;
            let sh = deserialize(&t, &parse_notation(&t, &sequence)?)?;
            let names: Vec<&str> = sh.assigned.iter().map(|&v| t.name(v)).collect();
            println!("{}", names.join(","));
            Ok(())
        }
        Command::SynthData(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => with_precision(&a.model, |p| match p {
            Precision::F32 => predict_cmd::<f32>(&a),
            Precision::F64 => predict_cmd::<f64>(&a),
        }),
        Command::Evaluate(a) => with_precision(&a.model, |p| match p {
            Precision::F32 => evaluate_cmd::<f32>(&a),
            Precision::F64 => evaluate_cmd::<f64>(&a),
        }),
        Command::InspectAttention(a) => with_precision(&a.model, |p| match p {
            Precision::F32 => inspect_cmd::<f32>(&a),
            Precision::F64 => inspect_cmd::<f64>(&a),
        }),
    }
}

fn with_precision(m: &CheckpointArgs, f: impl FnOnce(Precision) -> Result<()>) -> Result<()> {
    f(checkpoint_precision(checkpoint_path(&m.checkpoint))?)
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn load_bundle<F: Element>(m: &CheckpointArgs) -> Result<(ModelBundle<F>, f64)> {
    let expected = m.taxonomy.as_ref().map(Taxonomy::load).transpose()?;
    let bundle = load_checkpoint::<F>(checkpoint_path(&m.checkpoint), expected.as_ref())?;
    let threshold = m.threshold.unwrap_or(bundle.config.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok((bundle, threshold))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).map(|p| p != Path::new(MANIFEST)).unwrap_or(false) {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists every file under `out` as `path<TAB>bytes<TAB>sha256`.
fn write_manifest(out: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.sort();
    let mut text = String::new();
    for f in files {
        let bytes = fs::read(&f)?;
        let rel = f.strip_prefix(out).expect("under out").to_string_lossy().replace('\\', "/");
        let _ = writeln!(text, "{rel}\t{}\t{}", bytes.len(), sha256_hex(&bytes));
    }
    fs::write(out.join(MANIFEST), text)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        depth: a.depth,
        branching_min: a.branching_min,
        branching_max: a.branching_max,
        keywords_per_label: a.keywords,
        words_per_label: a.words_per_label,
        noise_vocab: a.noise_vocab,
        noise_ratio: a.noise,
        avg_labels: a.avg_labels,
        train_docs: a.train,
        dev_docs: a.dev,
        test_docs: a.test,
        seed: a.seed,
    };
    let t = generate_taxonomy(&spec)?;
    let c = generate_corpus(&spec, &t)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("taxonomy.tsv"), t.to_tsv())?;
    write_jsonl(a.out.join("train.jsonl"), &c.train)?;
    write_jsonl(a.out.join("dev.jsonl"), &c.dev)?;
    write_jsonl(a.out.join("test.jsonl"), &c.test)?;
    fs::write(a.out.join("synth.cfg"), format!("{spec:#?}\n"))?;
    write_manifest(&a.out)?;
    println!("labels\t{}\ndepth\t{}\ndocs\t{}/{}/{}", t.len(), t.max_depth(), a.train, a.dev, a.test);
    Ok(())
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn effective_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_kv(&fs::read_to_string(p)?)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = &a.precision {
        cfg.precision = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Best-epoch dev scores of one run, if a dev set was given.
type RunScores = (usize, Option<f64>, Option<f64>);

fn train_one<F: Element>(
    t: &Taxonomy,
    train: &[Document],
    dev: &[Document],
    cfg: &TrainConfig,
    out: &Path,
) -> Result<RunScores> {
    let outcome = fit::<F>(t, train, dev, cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG), cfg.to_kv())?;
    fs::write(out.join(TRAIN_LOG), log_to_csv(&outcome.log))?;
    save_checkpoint(&outcome.best, out.join(CHECKPOINT))?;
    let best = &outcome.log[outcome.best_epoch - 1];
    Ok((outcome.best_epoch, best.dev_micro_f1, best.dev_macro_f1))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = effective_config(&a)?;
    if a.replicas == 0 {
        return Err(Error::InvalidConfig("--replicas must be at least 1".into()));
    }
    let t = Taxonomy::load(&a.taxonomy)?;
    let train = read_jsonl(&a.train)?;
    let dev = a.dev.as_ref().map(read_jsonl).transpose()?.unwrap_or_default();
    if a.replicas > 1 && dev.is_empty() {
        return Err(Error::InvalidConfig("--replicas needs a non-empty --dev corpus".into()));
    }
    fs::create_dir_all(&a.out)?;
    let run_one = |cfg: &TrainConfig, dir: &Path| match cfg.precision {
        Precision::F32 => train_one::<f32>(&t, &train, &dev, cfg, dir),
        Precision::F64 => train_one::<f64>(&t, &train, &dev, cfg, dir),
    };
    if a.replicas == 1 {
        let (epoch, micro, macro_) = run_one(&cfg, &a.out)?;
        write_manifest(&a.out)?;
        println!("best_epoch\t{epoch}");
        if let (Some(mi), Some(ma)) = (micro, macro_) {
            println!("dev_micro_f1\t{mi}\ndev_macro_f1\t{ma}");
        }
        return Ok(());
    }
    fs::write(a.out.join(CONFIG), cfg.to_kv())?;
    let mut csv = String::from("replica,seed,best_epoch,dev_micro_f1,dev_macro_f1\n");
    let (mut micros, mut macros) = (Vec::new(), Vec::new());
    for r in 0..a.replicas {
        let rc = TrainConfig { seed: cfg.seed.wrapping_add(r as u64), ..cfg.clone() };
        let (epoch, micro, macro_) = run_one(&rc, &a.out.join(format!("replica{r}")))?;
        let (mi, ma) = (micro.unwrap_or(0.0), macro_.unwrap_or(0.0));
        let _ = writeln!(csv, "{r},{},{epoch},{mi},{ma}", rc.seed);
        micros.push(mi);
        macros.push(ma);
    }
    let (mm, ms) = mean_std(&micros);
    let (am, as_) = mean_std(&macros);
    let _ = writeln!(csv, "mean,,,{mm},{am}\nstd,,,{ms},{as_}");
    fs::write(a.out.join("replicas.csv"), csv)?;
    write_manifest(&a.out)?;
    println!("dev_micro_f1\t{mm:.4} ± {ms:.4}\ndev_macro_f1\t{am:.4} ± {as_:.4}");
    Ok(())
}

fn predict_cmd<F: Element>(a: &PredictArgs) -> Result<()> {
    let (b, threshold) = load_bundle::<F>(&a.model)?;
    let docs = read_jsonl(&a.corpus)?;
    let mut text = String::new();
    for d in &docs {
        let p = predict(&b.store, &b.model, &b.taxonomy, &b.encode_text(&d.text), threshold)?;
        let labels: Vec<&str> = p.labels.iter().map(|&v| b.taxonomy.name(v)).collect();
        let line = serde_json::json!({ "labels": labels, "fallback_steps": p.fallback_steps });
        let _ = writeln!(text, "{line}");
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("predictions.jsonl"), text)?;
    write_manifest(&a.out)?;
    Ok(())
}

fn evaluate_cmd<F: Element>(a: &EvaluateArgs) -> Result<()> {
    let (b, threshold) = load_bundle::<F>(&a.model)?;
    let docs = read_jsonl(&a.corpus)?;
    let gold = gold_sets(&docs, &b.taxonomy)?;
    let pred = docs
        .iter()
        .map(|d| Ok(predict(&b.store, &b.model, &b.taxonomy, &b.encode_text(&d.text), threshold)?.labels))
        .collect::<Result<Vec<_>>>()?;
    let report: EvalReport = evaluate(&gold, &pred, &b.taxonomy, !a.no_closure)?;
    let json = report.to_json()?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.json"), format!("{json}\n"))?;
        fs::write(out.join("levels.csv"), report.per_level_csv())?;
        write_manifest(out)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn inspect_cmd<F: Element>(a: &InspectArgs) -> Result<()> {
    let (b, threshold) = load_bundle::<F>(&a.model)?;
    let docs = read_jsonl(&a.corpus)?;
    let doc = docs
        .get(a.doc)
        .ok_or_else(|| Error::InvalidConfig(format!("corpus has {} documents, no index {}", docs.len(), a.doc)))?;
    let t = &b.taxonomy;
    let ids = b.encode_text(&doc.text);
    let labels = if a.gold {
        let set = doc.label_ids(t)?;
        if set.is_empty() {
            return Err(Error::MissingLabels(a.doc));
        }
        set
    } else {
        predict(&b.store, &b.model, t, &ids, threshold)?.labels
    };
    let seq = serialize(t, &build_subhierarchy(t, labels)?)?;
    let mut g = Graph::eval(&b.store);
    let h = b.model.encoder.encode(&mut g, &ids)?;
    let out = b.model.decoder.forward(&mut g, t, &seq, h)?;

    let tok = |x: Token| match x {
        Token::Open => "(".to_string(),
        Token::Close => ")".to_string(),
        Token::End => "[END]".to_string(),
        Token::Label(v) => t.name(v).to_string(),
    };
    let queries: Vec<String> = seq.tokens.iter().map(|&x| tok(x)).collect();
    let words: Vec<String> = ids.iter().map(|&i| b.vocab.token(i).unwrap_or("<unk>").to_string()).collect();
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("sequence.txt"), format!("{}\n", to_notation(t, &seq.tokens)))?;
    for tr in &out.attention {
        let (kind, keys) = match tr.kind {
            AttentionKind::SelfAttention => ("self", &queries),
            AttentionKind::CrossAttention => ("cross", &words),
        };
        let w = g.value(tr.weights);
        let mut csv = String::from("query");
        for k in keys {
            csv.push(',');
            csv.push_str(&csv_field(k));
        }
        csv.push('\n');
        for (q, row) in queries.iter().zip(w.rows()) {
            csv.push_str(&csv_field(q));
            for x in row {
                let _ = write!(csv, ",{x}");
            }
            csv.push('\n');
        }
        fs::write(a.out.join(format!("layer{}_head{}_{kind}.csv", tr.layer, tr.head)), csv)?;
    }
    write_manifest(&a.out)?;
    Ok(())
}
