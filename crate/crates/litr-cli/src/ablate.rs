//! Ablation grid runner. Validates the grid, trains each distinct
//! pretraining configuration once into a shared cache, then runs every
//! arm x seed cell (fine-tune, evaluate) and writes one CSV row per
//! successful cell. A failing cell is logged to failures.tsv and the grid
//! continues. Worker count is capped by LITR_THREADS (default 1); row
//! order is arm-major then seed regardless of scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use litr::checkpoint::{load_model, save_model};
use litr::config::{AblationGrid, RunSpec};
use litr::data::{export_tsv, DeskBundle};
use litr::error::{Error, Result};
use litr::eval::{evaluate, FinalMetrics};
use litr::model::{Model, ModelConfig};
use litr::teacher::TeacherMode;
use litr::trainer::{config_digest, train, RunReport, TrainConfig};

use crate::{load_corpus, load_model_config, read_json, write_json, F};

pub(crate) fn threads_from_env() -> Result<usize> {
    match std::env::var("LITR_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::InvalidTrainConfig { field: "LITR_THREADS".into(), msg: e.to_string() }),
        Ok(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidTrainConfig {
                field: "LITR_THREADS".into(),
                msg: format!("expected a positive integer, got \"{s}\""),
            }),
        },
    }
}

/// Applies `f` to each job on a bounded worker pool; results come back in
/// job order.
fn run_pool<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, T)>> = Mutex::new(Vec::with_capacity(jobs.len()));
    let workers = threads.min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut v = results.into_inner().unwrap();
    v.sort_by_key(|&(i, _)| i);
    v.into_iter().map(|(_, r)| r).collect()
}

struct Cell<'a> {
    arm_name: &'a str,
    seed: u64,
    /// Resolved run spec with this cell's seed injected into both stages.
    spec: RunSpec,
    /// Cache key of the pretraining job this cell consumes, if any.
    pre_key: Option<String>,
}

struct CellOutcome {
    pre: Option<RunReport>,
    fin: Option<RunReport>,
    metrics: Option<FinalMetrics>,
    failure: Option<String>,
}

#[derive(serde::Serialize)]
struct CellReport<'a> {
    axis: &'a str,
    arm: &'a str,
    seed: u64,
    pretrain: Option<&'a RunReport>,
    finetune: Option<&'a RunReport>,
    metrics: Option<&'a FinalMetrics>,
}

pub(crate) fn cmd_ablate(
    grid_path: &Path,
    out: &Path,
    corpus: Option<&Path>,
    model_config: Option<&Path>,
) -> Result<ExitCode> {
    let grid: AblationGrid = read_json(grid_path, "ablation grid")?;
    let specs = grid.validate()?;
    let threads = threads_from_env()?;
    let model_cfg = load_model_config(model_config)?;
    let bundle = load_corpus(corpus)?;
    let cache_dir = out.join("cache");
    let reports_dir = out.join("reports");
    fs::create_dir_all(&cache_dir)?;
    fs::create_dir_all(&reports_dir)?;

    // Corpus identity for the pretraining cache: a digest of the exported
    // pretraining split.
    let mut tsv = Vec::new();
    export_tsv(&bundle.pretrain, &mut tsv)?;
    let corpus_tag = config_digest(&String::from_utf8_lossy(&tsv).into_owned())?;

    // Expand cells and deduplicate pretraining jobs: arms that share a
    // pretraining config (for a given seed) train it once.
    let mut cells: Vec<Cell> = Vec::new();
    let mut pre_jobs: BTreeMap<String, TrainConfig> = BTreeMap::new();
    for (arm, spec) in grid.arms.iter().zip(&specs) {
        for &seed in &grid.seeds {
            let mut spec = spec.clone();
            if let Some(p) = spec.pretrain.as_mut() {
                p.seed = seed;
            }
            if let Some(f) = spec.finetune.as_mut() {
                f.seed = seed;
            }
            let pre_key = match &spec.pretrain {
                Some(p) => {
                    let key = config_digest(&(&model_cfg, p, &corpus_tag))?;
                    pre_jobs.entry(key.clone()).or_insert_with(|| p.clone());
                    Some(key)
                }
                None => None,
            };
            cells.push(Cell { arm_name: &arm.name, seed, spec, pre_key });
        }
    }

    // Phase 1: train each distinct pretraining configuration once.
    let jobs: Vec<(&String, &TrainConfig)> = pre_jobs.iter().collect();
    if !jobs.is_empty() {
        println!("pretraining: {} distinct job(s), {} thread(s)", jobs.len(), threads);
    }
    let pre_results: Vec<(String, Result<RunReport, String>)> = run_pool(&jobs, threads, |(key, cfg)| {
        let run = run_pretrain(&model_cfg, &bundle, cfg, key, &cache_dir).map_err(|e| e.to_string());
        ((*key).clone(), run)
    });
    let pre_map: BTreeMap<String, Result<RunReport, String>> = pre_results.into_iter().collect();

    // Phase 2: fine-tune and evaluate every cell.
    println!("cells: {} ({} arm(s) x {} seed(s))", cells.len(), grid.arms.len(), grid.seeds.len());
    let outcomes = run_pool(&cells, threads, |cell| {
        run_cell(&model_cfg, &bundle, cell, &pre_map, &cache_dir)
    });

    let mut csv = String::from(
        "axis,arm,seed,dual_TR@1,dual_IR@1,cross_TR@1,cross_IR@1,extra_fwd_pairs,wall_clock\n",
    );
    let mut failures: Vec<String> = Vec::new();
    let mut rows = 0usize;
    for (cell, outcome) in cells.iter().zip(&outcomes) {
        write_json(
            &CellReport {
                axis: &grid.axis,
                arm: cell.arm_name,
                seed: cell.seed,
                pretrain: outcome.pre.as_ref(),
                finetune: outcome.fin.as_ref(),
                metrics: outcome.metrics.as_ref(),
            },
            &reports_dir.join(format!("{}-s{}.json", cell.arm_name, cell.seed)),
        )?;
        match (&outcome.metrics, &outcome.failure) {
            (Some(m), None) => {
                let mut parts: Vec<(&RunReport, &TrainConfig)> = Vec::new();
                if let (Some(r), Some(c)) = (&outcome.pre, &cell.spec.pretrain) {
                    parts.push((r, c));
                }
                if let (Some(r), Some(c)) = (&outcome.fin, &cell.spec.finetune) {
                    parts.push((r, c));
                }
                let extra = extra_rate(&parts);
                let wall: f64 = parts.iter().map(|(r, _)| r.wall_clock_s).sum();
                csv.push_str(&format!(
                    "{},{},{},{:.2},{:.2},{:.2},{:.2},{},{:.3}\n",
                    grid.axis,
                    cell.arm_name,
                    cell.seed,
                    m.dual.tr.r1,
                    m.dual.ir.r1,
                    m.cross.tr.r1,
                    m.cross.ir.r1,
                    extra,
                    wall,
                ));
                rows += 1;
            }
            (_, Some(msg)) => failures.push(format!("{}\t{}\t{}", cell.arm_name, cell.seed, msg)),
            _ => failures.push(format!("{}\t{}\tinternal: cell produced no outcome", cell.arm_name, cell.seed)),
        }
    }
    fs::write(out.join("ablation.csv"), &csv)?;
    if !failures.is_empty() {
        fs::write(out.join("failures.tsv"), failures.join("\n") + "\n")?;
        eprintln!(
            "{} of {} cell(s) failed; see {}",
            failures.len(),
            cells.len(),
            out.join("failures.tsv").display()
        );
    }
    println!("{} row(s) -> {}", rows, out.join("ablation.csv").display());
    Ok(ExitCode::SUCCESS)
}

/// Teacher extras normalized per direction per positive, summed over the
/// distillation-enabled stages of a cell. Hard online mining with pass
/// reuse makes this exactly m - 1.
fn extra_rate(parts: &[(&RunReport, &TrainConfig)]) -> f64 {
    let mut extras = 0usize;
    let mut positives = 0usize;
    for (report, cfg) in parts {
        if !cfg.distillation.enabled {
            continue;
        }
        let (want_txt, want_img) = cfg.distillation.negative_type.directions();
        let directions = usize::from(want_txt) + usize::from(want_img);
        extras += report.teacher_extra_pairs;
        positives += report.steps * cfg.batch_size * directions;
    }
    if positives == 0 {
        return 0.0;
    }
    extras as f64 / positives as f64
}

fn run_pretrain(
    model_cfg: &ModelConfig,
    bundle: &DeskBundle,
    cfg: &TrainConfig,
    key: &str,
    cache_dir: &Path,
) -> Result<RunReport> {
    let ckpt = cache_dir.join(format!("pre-{key}.litr"));
    let report_path = cache_dir.join(format!("pre-{key}.json"));
    if ckpt.exists() && report_path.exists() {
        return read_json(&report_path, "cached pretraining report");
    }
    let mut model = Model::<F>::new(model_cfg.clone(), cfg.seed)?;
    let mut report = train(&mut model, &bundle.pretrain, cfg)?;
    if report.diverged.is_none() {
        save_model(&model, &ckpt)?;
        report.checkpoint_path = Some(ckpt.display().to_string());
    }
    write_json(&report, &report_path)?;
    Ok(report)
}

fn run_cell(
    model_cfg: &ModelConfig,
    bundle: &DeskBundle,
    cell: &Cell,
    pre_map: &BTreeMap<String, Result<RunReport, String>>,
    cache_dir: &Path,
) -> CellOutcome {
    let fail = |msg: String| CellOutcome { pre: None, fin: None, metrics: None, failure: Some(msg) };

    let mut model = match Model::<F>::new(model_cfg.clone(), cell.seed) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };

    let mut pre_report = None;
    if let Some(key) = &cell.pre_key {
        match pre_map.get(key) {
            Some(Ok(rep)) => {
                if let Some(msg) = &rep.diverged {
                    return CellOutcome {
                        pre: Some(rep.clone()),
                        fin: None,
                        metrics: None,
                        failure: Some(format!("pretraining diverged: {msg}")),
                    };
                }
                let ckpt = cache_dir.join(format!("pre-{key}.litr"));
                if let Err(e) = load_model(&ckpt, &mut model) {
                    return fail(e.to_string());
                }
                pre_report = Some(rep.clone());
            }
            Some(Err(msg)) => return fail(format!("pretraining failed: {msg}")),
            None => return fail("internal: pretraining job missing from cache".into()),
        }
    }

    let mut fin_report = None;
    if let Some(fin) = &cell.spec.finetune {
        let mut fin = fin.clone();
        // An offline teacher with a relative checkpoint path means "this
        // arm's own pretrained model"; resolve it to the cached file.
        let teacher = &mut fin.distillation.teacher;
        if fin.distillation.enabled && teacher.mode == TeacherMode::Offline {
            if let Some(p) = &teacher.checkpoint {
                if p.is_relative() {
                    let Some(key) = &cell.pre_key else {
                        return fail(
                            "offline teacher with a relative checkpoint path needs a pretraining stage"
                                .into(),
                        );
                    };
                    teacher.checkpoint = Some(cache_dir.join(format!("pre-{key}.litr")));
                }
            }
        }
        match train(&mut model, &bundle.train, &fin) {
            Ok(rep) => {
                if let Some(msg) = &rep.diverged {
                    let failure = format!("fine-tuning diverged: {msg}");
                    return CellOutcome { pre: pre_report, fin: Some(rep), metrics: None, failure: Some(failure) };
                }
                fin_report = Some(rep);
            }
            Err(e) => return fail(e.to_string()),
        }
    }

    match evaluate(&model, &bundle.val, cell.spec.rerank_k) {
        Ok(rep) => CellOutcome { pre: pre_report, fin: fin_report, metrics: Some(rep.metrics), failure: None },
        Err(e) => fail(e.to_string()),
    }
}
