//! Command-line harness: synthetic corpus generation, single-stage
//! training, ablation grids with a shared pretraining cache, and
//! checkpoint evaluation. Exit codes: 0 success, 2 configuration or
//! schema error, 3 training divergence, 1 anything else.

mod ablate;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use litr::checkpoint::{load_model, save_model};
use litr::config::DEFAULT_RERANK_K;
use litr::data::{
    generate_bundle, import_tsv, load_bundle, save_bundle, CorpusConfig, DeskBundle, Split,
};
use litr::error::{Error, Result};
use litr::eval::{
    embed_corpus, evaluate, recall_at_k, similarity_matrix, timing_benchmark, BenchReport,
    DirectionRecalls, Recalls, RetrievalDirection, STANDARD_KS,
};
use litr::model::{Model, ModelConfig};
use litr::trainer::{train, Stage, TrainConfig};

/// Desk runs use single precision; the exact-arithmetic checks live in the
/// library's 64-bit test suites.
pub(crate) type F = f32;

#[derive(Parser)]
#[command(name = "litr", version, about = "Dual + cross encoder retrieval at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic paired corpus as one TSV per split.
    GenCorpus {
        /// Output directory for the corpus_<split>.tsv files.
        #[arg(long)]
        out: PathBuf,
        /// Corpus config JSON; defaults to the desk-scale corpus.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one stage, then write report.json and a checkpoint.
    Train {
        /// Training config JSON, field names mirroring the report's config.
        config: PathBuf,
        /// Output directory for model.litr and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed (and the parameter init).
        #[arg(long)]
        seed: Option<u64>,
        /// Start from an existing checkpoint instead of a fresh init.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Corpus directory from gen-corpus; defaults to the built-in desk corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Model geometry JSON; defaults to the desk model.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Run an ablation grid and aggregate one CSV row per arm and seed.
    Ablate {
        /// Grid JSON: axis, seeds, base run spec, and per-arm patches.
        grid: PathBuf,
        /// Output directory for ablation.csv, per-cell reports, and the
        /// pretraining cache.
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory from gen-corpus; defaults to the built-in desk corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Model geometry JSON; defaults to the desk model.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus split; metrics JSON on stdout.
    Eval {
        /// Checkpoint file written by train or ablate.
        checkpoint: PathBuf,
        /// Corpus TSV file (one split's export).
        corpus: PathBuf,
        /// dual | rerank:<k> | cross
        #[arg(long, default_value = "rerank:16")]
        mode: String,
        /// Model geometry JSON; defaults to the desk model.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_divergence() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::GenCorpus { out, config } => cmd_gen_corpus(&out, config.as_deref()),
        Cmd::Train { config, out, seed, init_checkpoint, corpus, model_config } => {
            cmd_train(&config, &out, seed, init_checkpoint.as_deref(), corpus.as_deref(), model_config.as_deref())
        }
        Cmd::Ablate { grid, out, corpus, model_config } => {
            ablate::cmd_ablate(&grid, &out, corpus.as_deref(), model_config.as_deref())
        }
        Cmd::Eval { checkpoint, corpus, mode, model_config } => {
            cmd_eval(&checkpoint, &corpus, &mode, model_config.as_deref())
        }
    }
}

/// Parses a JSON file, tagging errors with the path so exit-2 messages
/// name the offending file and field.
pub(crate) fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::ConfigParse(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::ConfigParse(format!("{what} {}: {e}", path.display())))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::ConfigParse(e.to_string()))?;
    bytes.push(b'\n');
    Ok(fs::write(path, bytes)?)
}

pub(crate) fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => read_json(p, "model config"),
        None => Ok(ModelConfig::default()),
    }
}

pub(crate) fn load_corpus(path: Option<&Path>) -> Result<DeskBundle> {
    match path {
        Some(dir) => load_bundle(dir),
        None => generate_bundle(&CorpusConfig::default()),
    }
}

fn cmd_gen_corpus(out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => read_json::<CorpusConfig>(p, "corpus config")?,
        None => CorpusConfig::default(),
    };
    let bundle = generate_bundle(&cfg)?;
    save_bundle(&bundle, out)?;
    write_json(&cfg, &out.join("corpus_config.json"))?;
    for split in Split::ALL {
        println!("corpus_{}.tsv: {} pairs", split.name(), bundle.split(split).len());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    init: Option<&Path>,
    corpus: Option<&Path>,
    model_config: Option<&Path>,
) -> Result<ExitCode> {
    let mut cfg: TrainConfig = read_json(config, "train config")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let model_cfg = load_model_config(model_config)?;
    let bundle = load_corpus(corpus)?;
    let mut model = Model::<F>::new(model_cfg, cfg.seed)?;
    if let Some(p) = init {
        load_model(p, &mut model)?;
    }
    let split = match cfg.stage {
        Stage::Pretrain => &bundle.pretrain,
        Stage::Finetune => &bundle.train,
    };
    fs::create_dir_all(out)?;

    let mut report = train(&mut model, split, &cfg)?;
    let ckpt = out.join("model.litr");
    save_model(&model, &ckpt)?;
    report.checkpoint_path = Some(ckpt.display().to_string());
    if report.diverged.is_none() {
        report.final_metrics = Some(evaluate(&model, &bundle.val, DEFAULT_RERANK_K)?.metrics);
    }
    write_json(&report, &out.join("report.json"))?;
    println!("report: {}", out.join("report.json").display());

    if let Some(msg) = &report.diverged {
        eprintln!("training diverged: {msg}");
        return Ok(ExitCode::from(3));
    }
    if let Some(m) = &report.final_metrics {
        println!("dual  TR R@1 {:>6.2}  IR R@1 {:>6.2}", m.dual.tr.r1, m.dual.ir.r1);
        println!("cross TR R@1 {:>6.2}  IR R@1 {:>6.2}  (rerank k={})", m.cross.tr.r1, m.cross.ir.r1, m.rerank_k);
    }
    Ok(ExitCode::SUCCESS)
}

enum EvalMode {
    Dual,
    Rerank(usize),
    Cross,
}

fn parse_mode(s: &str) -> Result<EvalMode> {
    match s {
        "dual" => return Ok(EvalMode::Dual),
        "cross" => return Ok(EvalMode::Cross),
        _ => {}
    }
    if let Some(k) = s.strip_prefix("rerank:") {
        if let Ok(k) = k.parse::<usize>() {
            if k >= 1 {
                return Ok(EvalMode::Rerank(k));
            }
        }
    }
    Err(Error::InvalidTrainConfig {
        field: "mode".into(),
        msg: format!("expected dual, cross, or rerank:<k>, got \"{s}\""),
    })
}

#[derive(Serialize)]
struct EvalOutput {
    mode: String,
    items: usize,
    dual: DirectionRecalls,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross: Option<DirectionRecalls>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rerank_k: Option<usize>,
    cross_pairs_scored: usize,
    timing: BenchReport,
}

fn cmd_eval(ckpt: &Path, corpus_path: &Path, mode: &str, model_config: Option<&Path>) -> Result<ExitCode> {
    let mode_parsed = parse_mode(mode)?;
    let model_cfg = load_model_config(model_config)?;
    let mut model = Model::<F>::new(model_cfg, 0)?;
    load_model(ckpt, &mut model)?;
    let corpus = {
        let f = fs::File::open(corpus_path)
            .map_err(|e| Error::ConfigParse(format!("corpus {}: {e}", corpus_path.display())))?;
        import_tsv(Split::Test, &mut BufReader::new(f))?
    };
    let n = corpus.len();

    let (dual, cross, rerank_k, pairs) = match mode_parsed {
        EvalMode::Dual => {
            // Tower embeddings only; no cross-encoder pass is run.
            let (img, txt) = embed_corpus(&model, &corpus)?;
            let sim = similarity_matrix(&img, &txt, n, model.cfg.embed_dim)?;
            let mut sim_t = vec![0.0; sim.len()];
            for i in 0..n {
                for j in 0..n {
                    sim_t[j * n + i] = sim[i * n + j];
                }
            }
            let gt: Vec<usize> = (0..n).collect();
            let tr = recall_at_k(&sim, n, n, &gt, &STANDARD_KS, RetrievalDirection::Tr)?;
            let ir = recall_at_k(&sim_t, n, n, &gt, &STANDARD_KS, RetrievalDirection::Ir)?;
            let dual = DirectionRecalls { tr: Recalls::from_result(&tr), ir: Recalls::from_result(&ir) };
            (dual, None, None, 0)
        }
        EvalMode::Rerank(k) => {
            let rep = evaluate(&model, &corpus, k)?;
            (rep.metrics.dual, Some(rep.metrics.cross), Some(rep.metrics.rerank_k), rep.cross_pairs_scored)
        }
        EvalMode::Cross => {
            let rep = evaluate(&model, &corpus, n)?;
            (rep.metrics.dual, Some(rep.metrics.cross), Some(rep.metrics.rerank_k), rep.cross_pairs_scored)
        }
    };

    // Timing block on a bounded subset so exhaustive cross scoring stays
    // affordable at any corpus size.
    let bq = n.min(32);
    let bc = n.min(64);
    let bk = rerank_k.unwrap_or(1).min(bc);
    let timing = timing_benchmark(&model, &corpus, bq, bc, bk)?;

    let out = EvalOutput {
        mode: mode.to_string(),
        items: n,
        dual,
        cross,
        rerank_k,
        cross_pairs_scored: pairs,
        timing,
    };
    let text = serde_json::to_string_pretty(&out).map_err(|e| Error::ConfigParse(e.to_string()))?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}
