//! Joint optimization loop: contrastive alignment, pair matching with mined
//! negatives, masked-token prediction fused onto the matching pass, and
//! cross-to-dual distillation with a warmed weight. AdamW with decoupled
//! decay, linear warmup into cosine decay, global-norm clipping, and a
//! deterministic step pipeline keyed by (seed, step).
//!
//! Every per-step random decision (mask positions, matching negatives,
//! distillation negatives) is recorded in a `StepPlan`, and `run_step` can
//! replay a plan against perturbed parameters. Replay with frozen teacher
//! probabilities rebuilds exactly the graph whose analytic gradient the
//! detached teacher produces, which is what finite-difference checks need.

use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_batches, mask_tokens, PairedCorpus};
use crate::error::{Error, Result};
use crate::eval::FinalMetrics;
use crate::model::{keyed_rng, with_cls, Modality, Model, Param, STREAM_STEP, TAU_MAX, TAU_MIN};
use crate::negatives::{itm_negatives, NegMethod};
use crate::objectives::{
    build_distill_sets, distill_loss, itc_loss, itm_loss, mlm_loss, plan_distill, total_loss,
    DistillPlan, LossNodes, LossValues, QSource, TeacherScorer,
};
use crate::tape::{Real, Tape};
use crate::teacher::{
    OnlineTeacher, PairLogitCache, ShadowTeacher, TeacherMode, TeacherState, COPY_PERIOD_DEFAULT,
    MOMENTUM_DEFAULT,
};

/// Global gradient-norm ceiling applied before every optimizer step.
pub const GRAD_CLIP: f64 = 5.0;
/// Fraction of content text tokens replaced by the mask id.
pub const MLM_RATE: f64 = 0.15;
/// Adam denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Which retrieval directions contribute distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeType {
    Image,
    Text,
    Both,
}

impl NegativeType {
    /// (text direction wanted, image direction wanted).
    pub fn directions(self) -> (bool, bool) {
        match self {
            NegativeType::Text => (true, false),
            NegativeType::Image => (false, true),
            NegativeType::Both => (true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    /// Shadow blend kept per update in momentum mode.
    pub momentum: f64,
    /// Live-to-shadow copy interval in periodic mode.
    pub copy_period: usize,
    /// Checkpoint the offline teacher loads.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            mode: TeacherMode::Online,
            momentum: MOMENTUM_DEFAULT,
            copy_period: COPY_PERIOD_DEFAULT,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub enabled: bool,
    /// Negatives per positive and direction; slot 0 is always the positive.
    pub m: usize,
    pub negative_type: NegativeType,
    pub sampling: NegMethod,
    /// Detach teacher probabilities from the graph.
    pub stop_grad: bool,
    pub teacher: TeacherConfig,
    /// Reuse matching-pass logits for teacher scoring instead of fresh
    /// cross passes wherever the pair coincides.
    pub reuse_m1: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            enabled: true,
            m: 4,
            negative_type: NegativeType::Both,
            sampling: NegMethod::Hard,
            stop_grad: true,
            teacher: TeacherConfig::default(),
            reuse_m1: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentConfig {
    /// Train the cross encoder (matching loss).
    pub use_cross: bool,
    /// Train the dual towers contrastively.
    pub use_dual: bool,
    pub use_mlm: bool,
    pub itm_negative_method: NegMethod,
}

impl Default for ComponentConfig {
    fn default() -> Self {
        ComponentConfig {
            use_cross: true,
            use_dual: true,
            use_mlm: true,
            itm_negative_method: NegMethod::Hard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub distillation: DistillConfig,
    pub components: ComponentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Pretraining defaults at desk scale.
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            distillation: DistillConfig::default(),
            components: ComponentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: shorter and an order of magnitude cooler.
    pub fn finetune_default() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            epochs: 10,
            base_lr: 1e-5,
            min_lr: 1e-6,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| -> Result<()> {
            Err(Error::InvalidTrainConfig { field: field.into(), msg })
        };
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size", "negative mining needs at least 2 items".into());
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return fail("base_lr", format!("must be finite and positive, got {}", self.base_lr));
        }
        if !self.min_lr.is_finite() || self.min_lr < 0.0 {
            return fail("min_lr", format!("must be finite and non-negative, got {}", self.min_lr));
        }
        if self.min_lr > self.base_lr {
            return fail(
                "min_lr",
                format!("floor {} exceeds base rate {}", self.min_lr, self.base_lr),
            );
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return fail(name, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !self.components.use_cross && !self.components.use_dual {
            return fail("components", "at least one of use_cross/use_dual must stay enabled".into());
        }
        let d = &self.distillation;
        if d.enabled {
            if d.m == 0 {
                return fail("distillation.m", "need at least one negative per positive".into());
            }
            if !self.components.use_cross {
                return fail(
                    "distillation",
                    "teacher scores come from the cross encoder; enable use_cross".into(),
                );
            }
            if !d.stop_grad && d.teacher.mode != TeacherMode::Online {
                return fail(
                    "distillation.stop_grad",
                    "gradients can reach the teacher only in online mode; shadow copies bind non-trainably".into(),
                );
            }
            match d.teacher.mode {
                TeacherMode::Momentum => {
                    if !(0.0..=1.0).contains(&d.teacher.momentum) || !d.teacher.momentum.is_finite() {
                        return fail(
                            "distillation.teacher.momentum",
                            format!("must lie in [0, 1], got {}", d.teacher.momentum),
                        );
                    }
                }
                TeacherMode::Periodic => {
                    if d.teacher.copy_period == 0 {
                        return fail("distillation.teacher.copy_period", "must be at least 1".into());
                    }
                }
                TeacherMode::Offline => {
                    if d.teacher.checkpoint.is_none() {
                        return fail(
                            "distillation.teacher.checkpoint",
                            "offline teacher needs a checkpoint path".into(),
                        );
                    }
                }
                TeacherMode::Online => {}
            }
        }
        Ok(())
    }
}

// ── Schedules ───────────────────────────────────────────────────────────

/// Linear warmup to the base rate, then cosine decay to the floor over the
/// remaining steps. `step` is 0-based and must lie below `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let denom = total_steps.saturating_sub(1).saturating_sub(cfg.warmup_steps).max(1);
    let t = ((step - cfg.warmup_steps) as f64 / denom as f64).clamp(0.0, 1.0);
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Distillation weight: ramps linearly over the first epoch, then stays 1.
pub fn distill_weight(epoch_fraction: f64) -> f64 {
    epoch_fraction.clamp(0.0, 1.0)
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// AdamW with decoupled decay. Moment math runs in 64-bit regardless of the
/// parameter precision; each parameter keeps its own step count, and a
/// parameter whose gradient is absent is skipped entirely (no moment decay,
/// no weight decay), matching the common reference behaviour.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new<F: Real>(params: &[Param<F>], cfg: &TrainConfig) -> AdamW {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            m: params.iter().map(|p| vec![0.0; p.tensor.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.data.len()]).collect(),
            t: vec![0; params.len()],
        }
    }

    /// One update over `params` with `grads` parallel to them; `None`
    /// entries are untouched. Decay applies before the Adam step, and only
    /// to decay-flagged parameters.
    pub fn step<F: Real>(
        &mut self,
        params: &mut [Param<F>],
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidTrainConfig {
                field: "lr".into(),
                msg: format!("learning rate must be finite and non-negative, got {lr}"),
            });
        }
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            if g.len() != p.tensor.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    detail: format!("{}: {} gradient values for {} weights", p.name, g.len(), p.tensor.data.len()),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput { op: "optimizer_step" });
            }
            if p.decay && self.weight_decay > 0.0 {
                for w in p.tensor.data.iter_mut() {
                    let x = Real::to_f64(*w);
                    *w = F::from_f64(x - lr * self.weight_decay * x);
                }
            }
            self.t[i] += 1;
            let bc1 = 1.0 - self.beta1.powi(self.t[i] as i32);
            let bc2 = 1.0 - self.beta2.powi(self.t[i] as i32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.tensor.data.iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let x = Real::to_f64(*w);
                *w = F::from_f64(x - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm. Non-finite gradients are rejected.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> Result<f64> {
    let mut sumsq = 0.0;
    for g in grads.iter().flatten() {
        for &v in g {
            sumsq += v * v;
        }
    }
    if !sumsq.is_finite() {
        return Err(Error::NonFiniteInput { op: "clip_global_norm" });
    }
    let norm = sumsq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Keeps the shared temperature inside its legal band after every step.
pub fn clamp_tau<F: Real>(model: &mut Model<F>) {
    if let Some(p) = model.param_mut("tau") {
        let x = Real::to_f64(p.tensor.data[0]).clamp(TAU_MIN, TAU_MAX);
        p.tensor.data[0] = F::from_f64(x);
    }
}

// ── Step pipeline ───────────────────────────────────────────────────────

/// Content token streams for one batch, CLS not yet applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub img_content: Vec<Vec<usize>>,
    pub txt_content: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_corpus(corpus: &PairedCorpus, indices: &[usize]) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= corpus.len()) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                detail: format!("item index {bad} out of {} items", corpus.len()),
            });
        }
        Ok(Batch {
            img_content: indices.iter().map(|&i| corpus.items[i].img_tokens.clone()).collect(),
            txt_content: indices.iter().map(|&i| corpus.items[i].txt_tokens.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.img_content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.img_content.is_empty()
    }
}

/// One item's frozen mask decision, in content coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Every random decision one step makes, in draw order: mask positions per
/// item, then matching negatives, then distillation negatives.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepPlan {
    pub masks: Option<Vec<MaskPlan>>,
    /// (negative text per image anchor, negative image per text anchor).
    pub itm: Option<(Vec<usize>, Vec<usize>)>,
    pub distill: Option<DistillPlan>,
}

/// How `run_step` decides its randomness.
pub enum StepMode<'a, F: Real> {
    /// Draw fresh decisions from the step generator and record them.
    Fresh(&'a mut ChaCha8Rng),
    /// Rebuild the graph from a recorded plan. `q_txt`/`q_img` inject
    /// frozen post-softmax teacher rows (n x (m+1)); pass them when
    /// checking gradients under a detached teacher, since a finite
    /// difference must not see the teacher respond to the perturbation.
    /// With `None` the teacher is re-scored live, which is what a
    /// non-detached check needs.
    Replay { plan: &'a StepPlan, q_txt: Option<&'a [F]>, q_img: Option<&'a [F]> },
}

/// Everything one forward pass produced, gradients not yet computed.
pub struct StepResult<F: Real> {
    pub tape: Tape<F>,
    pub binding: crate::model::Binding,
    pub nodes: LossNodes,
    pub values: LossValues,
    pub plan: StepPlan,
    /// Teacher probability rows actually used, per direction.
    pub q_txt: Option<Vec<F>>,
    pub q_img: Option<Vec<F>>,
    /// Pairs forwarded through the live cross encoder this step.
    pub cross_pairs: usize,
    /// Pairs forwarded only to obtain teacher scores (any teacher).
    pub teacher_extras: usize,
}

/// Builds one training step's graph: towers, similarity, matching passes
/// with the masked-token head fused onto the positive pass, and the planned
/// distillation terms. The contrastive tower always reads clean text; every
/// cross pass reads the masked stream so teacher and student score the same
/// inputs.
pub fn run_step<F: Real>(
    model: &Model<F>,
    cfg: &TrainConfig,
    teacher: Option<&TeacherState<F>>,
    batch: &Batch,
    lambda: f64,
    mode: StepMode<F>,
) -> Result<StepResult<F>> {
    let n = batch.len();
    if n < 2 || batch.txt_content.len() != n {
        return Err(Error::ShapeMismatch {
            op: "run_step",
            detail: format!("{} image vs {} text items", n, batch.txt_content.len()),
        });
    }
    let comp = &cfg.components;
    let dist = &cfg.distillation;
    if dist.enabled && teacher.is_none() {
        return Err(Error::InvalidTrainConfig {
            field: "distillation".into(),
            msg: "distillation enabled but no teacher state supplied".into(),
        });
    }

    let mut t = Tape::<F>::new();
    let binding = model.bind(&mut t, true)?;
    let img_seqs = with_cls(&batch.img_content, model.cfg.img_cls());
    let img_seq = model.encode_image(&mut t, &binding, &img_seqs)?;
    let txt_clean_seqs = with_cls(&batch.txt_content, model.cfg.txt_cls());
    let txt_clean = model.encode_text(&mut t, &binding, &txt_clean_seqs)?;
    let img_pool = model.pool_project(&mut t, &binding, img_seq, n, Modality::Img)?;
    let txt_pool = model.pool_project(&mut t, &binding, txt_clean, n, Modality::Txt)?;
    let sim = model.similarity(&mut t, img_pool, txt_pool)?;
    let tau = binding.get(model, "tau")?;
    let sim_vals = t.value(sim).to_vec();

    // Fix every random decision up front, in one documented draw order:
    // mask positions, matching negatives, distillation negatives.
    let mut frozen_q: Option<(Option<&[F]>, Option<&[F]>)> = None;
    let plan: StepPlan = match mode {
        StepMode::Fresh(rng) => {
            let masks = if comp.use_mlm {
                Some(
                    batch
                        .txt_content
                        .iter()
                        .map(|toks| {
                            let (_, positions, targets) =
                                mask_tokens(toks, MLM_RATE, model.cfg.txt_mask(), rng);
                            MaskPlan { positions, targets }
                        })
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let itm = if comp.use_cross {
                Some(itm_negatives(&sim_vals, n, comp.itm_negative_method, rng)?)
            } else {
                None
            };
            let distill = if dist.enabled {
                let (want_txt, want_img) = dist.negative_type.directions();
                Some(plan_distill(&sim_vals, n, dist.m, dist.sampling, rng, want_txt, want_img)?)
            } else {
                None
            };
            StepPlan { masks, itm, distill }
        }
        StepMode::Replay { plan, q_txt, q_img } => {
            if q_txt.is_some() || q_img.is_some() {
                frozen_q = Some((q_txt, q_img));
            }
            plan.clone()
        }
    };

    // Masked text stream: the cross encoder and any teacher score it; the
    // contrastive path above already consumed the clean stream.
    let (txt_cross_seqs, txt_cross) = if let Some(masks) = &plan.masks {
        let masked: Vec<Vec<usize>> = batch
            .txt_content
            .iter()
            .zip(masks)
            .map(|(toks, mp)| {
                let mut m = toks.clone();
                for &p in &mp.positions {
                    m[p] = model.cfg.txt_mask();
                }
                m
            })
            .collect();
        let seqs = with_cls(&masked, model.cfg.txt_cls());
        let node = model.encode_text(&mut t, &binding, &seqs)?;
        (seqs, node)
    } else {
        (txt_clean_seqs.clone(), txt_clean)
    };

    let mut cross_pairs = 0usize;
    let zero = t.scalar(F::zero());

    // Matching passes; the positive pass doubles as the masked-token head's
    // input.
    let mut pos_out = None;
    let mut caches: Option<(PairLogitCache, PairLogitCache)> = None;
    let itm = if let Some((txt_choice, img_choice)) = &plan.itm {
        let pos_pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let txt_pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, txt_choice[i])).collect();
        let img_pairs: Vec<(usize, usize)> = (0..n).map(|i| (img_choice[i], i)).collect();
        let pos = model.cross_encode(&mut t, &binding, img_seq, n, txt_cross, n, &pos_pairs)?;
        let txt_neg = model.cross_encode(&mut t, &binding, img_seq, n, txt_cross, n, &txt_pairs)?;
        let img_neg = model.cross_encode(&mut t, &binding, img_seq, n, txt_cross, n, &img_pairs)?;
        cross_pairs += 3 * n;
        let loss = itm_loss(&mut t, pos.itm_logits, txt_neg.itm_logits, img_neg.itm_logits)?;
        if dist.enabled && dist.reuse_m1 {
            let mut txt_cache = PairLogitCache::new();
            txt_cache.insert(pos.itm_logits, &pos_pairs);
            txt_cache.insert(txt_neg.itm_logits, &txt_pairs);
            let mut img_cache = PairLogitCache::new();
            img_cache.insert(pos.itm_logits, &pos_pairs);
            img_cache.insert(img_neg.itm_logits, &img_pairs);
            caches = Some((txt_cache, img_cache));
        }
        pos_out = Some(pos);
        loss
    } else {
        zero
    };

    // Masked-token loss: logits from the positive matching pass when the
    // cross encoder runs, otherwise from the masked tower output.
    let mlm = if let Some(masks) = &plan.masks {
        let l_t = model.cfg.len_txt;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, mp) in masks.iter().enumerate() {
            for (&p, &orig) in mp.positions.iter().zip(&mp.targets) {
                rows.push(i * l_t + 1 + p);
                targets.push(orig);
            }
        }
        let logits = if rows.is_empty() {
            None
        } else {
            let stream = match &pos_out {
                Some(pos) => pos.txt_final,
                None => txt_cross,
            };
            Some(model.mlm_logits(&mut t, &binding, stream, &rows)?)
        };
        mlm_loss(&mut t, logits, &targets)?
    } else {
        zero
    };

    let itc = if comp.use_dual { itc_loss(&mut t, sim, tau)? } else { zero };

    // Distillation: student rows from the live similarity, teacher rows per
    // the configured regime or injected frozen probabilities.
    let mut teacher_extras = 0usize;
    let (d_txt, d_img, q_txt, q_img) = if let Some(dplan) = &plan.distill {
        let sets = if let Some((ft, fi)) = frozen_q {
            build_distill_sets(&mut t, sim, tau, dplan, QSource::Frozen { txt: ft, img: fi })?
        } else {
            let state = teacher.expect("validated above");
            let mut online;
            let mut shadow;
            let scorer: &mut dyn TeacherScorer<F> = if state.is_online() {
                let (txt_cache, img_cache) =
                    caches.take().unwrap_or_else(|| (PairLogitCache::new(), PairLogitCache::new()));
                online = OnlineTeacher::new(model, &binding, img_seq, txt_cross, n, txt_cache, img_cache);
                &mut online
            } else {
                let sm = state.shadow().ok_or_else(|| Error::InvalidTrainConfig {
                    field: "distillation.teacher".into(),
                    msg: "non-online teacher is missing its shadow parameters".into(),
                })?;
                shadow = ShadowTeacher::new(&mut t, sm, &img_seqs, &txt_cross_seqs)?;
                &mut shadow
            };
            let sets = build_distill_sets(
                &mut t,
                sim,
                tau,
                dplan,
                QSource::Teacher { scorer, stop_grad: dist.stop_grad },
            )?;
            teacher_extras = scorer.extra_pairs();
            if state.is_online() {
                cross_pairs += teacher_extras;
            }
            sets
        };
        let (lt, li) = distill_loss(&mut t, &sets)?;
        let q_of = |t: &Tape<F>, d: Option<crate::objectives::DirectionSet>| {
            d.map(|d| t.value(d.q).to_vec())
        };
        (lt, li, q_of(&t, sets.txt), q_of(&t, sets.img))
    } else {
        (zero, zero, None, None)
    };

    let nodes = total_loss(&mut t, itc, itm, mlm, d_txt, d_img, lambda)?;
    let values = nodes.values(&t);
    Ok(StepResult {
        tape: t,
        binding,
        nodes,
        values,
        plan,
        q_txt,
        q_img,
        cross_pairs,
        teacher_extras,
    })
}

// ── Run loop and report ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub distill_txt: f64,
    pub distill_img: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub seed: u64,
    pub stage: Stage,
    /// Mean component losses per epoch.
    pub epoch_losses: Vec<EpochLosses>,
    pub final_metrics: Option<FinalMetrics>,
    pub wall_clock_s: f64,
    pub checkpoint_path: Option<String>,
    /// Pairs forwarded through the live cross encoder over the whole run.
    pub cross_pair_forwards: usize,
    /// Pairs forwarded purely for teacher scoring.
    pub teacher_extra_pairs: usize,
    pub steps: usize,
    /// Set when a numeric blow-up ended the run early; the losses recorded
    /// up to that point are kept.
    pub diverged: Option<String>,
}

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Checks the corpus geometry against the model before training starts.
fn check_corpus_fit<F: Real>(model: &Model<F>, corpus: &PairedCorpus) -> Result<()> {
    let fail = |msg: String| Error::InvalidTrainConfig { field: "corpus".into(), msg };
    let item = corpus.items.first().ok_or_else(|| fail("corpus is empty".into()))?;
    if item.img_tokens.len() + 1 != model.cfg.len_img {
        return Err(fail(format!(
            "image length {} + CLS does not fit model length {}",
            item.img_tokens.len(),
            model.cfg.len_img
        )));
    }
    if item.txt_tokens.len() + 1 != model.cfg.len_txt {
        return Err(fail(format!(
            "text length {} + CLS does not fit model length {}",
            item.txt_tokens.len(),
            model.cfg.len_txt
        )));
    }
    for it in &corpus.items {
        if it.img_tokens.iter().any(|&v| v >= model.cfg.vocab_img)
            || it.txt_tokens.iter().any(|&v| v >= model.cfg.vocab_txt)
        {
            return Err(fail(format!("pair {} holds tokens outside the model vocabulary", it.pair_id)));
        }
    }
    Ok(())
}

/// Runs the full optimization loop over `corpus`, mutating `model` in
/// place. A numeric blow-up ends the run early and is reported in
/// `diverged` rather than as an error; everything else propagates.
pub fn train<F: Real>(
    model: &mut Model<F>,
    corpus: &PairedCorpus,
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    check_corpus_fit(model, corpus)?;

    let start = Instant::now();
    let mut teacher = if cfg.distillation.enabled {
        let tc = &cfg.distillation.teacher;
        Some(match tc.mode {
            TeacherMode::Online => TeacherState::online(),
            TeacherMode::Momentum => TeacherState::momentum(model, tc.momentum)?,
            TeacherMode::Periodic => TeacherState::periodic(model, tc.copy_period)?,
            TeacherMode::Offline => {
                let path = tc.checkpoint.as_ref().ok_or_else(|| Error::InvalidTrainConfig {
                    field: "distillation.teacher.checkpoint".into(),
                    msg: "offline teacher needs a checkpoint path".into(),
                })?;
                TeacherState::offline(&model.cfg, path)?
            }
        })
    } else {
        None
    };

    let steps_per_epoch = corpus.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::BatchTooLarge { n: cfg.batch_size, items: corpus.len() });
    }
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&model.params, cfg);

    let mut report = RunReport {
        config_digest: config_digest(cfg)?,
        seed: cfg.seed,
        stage: cfg.stage,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        final_metrics: None,
        wall_clock_s: 0.0,
        checkpoint_path: None,
        cross_pair_forwards: 0,
        teacher_extra_pairs: 0,
        steps: 0,
        diverged: None,
    };

    let mut global_step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let batches = make_batches(corpus, cfg.batch_size, cfg.seed, epoch)?;
        let mut acc = [0.0f64; 6];
        let mut steps_in_epoch = 0usize;
        for indices in &batches {
            let batch = Batch::from_corpus(corpus, indices)?;
            let lambda = if cfg.distillation.enabled {
                distill_weight(global_step as f64 / steps_per_epoch as f64)
            } else {
                0.0
            };
            let lr = lr_schedule(global_step, total_steps, cfg);
            let outcome = (|| -> Result<(LossValues, usize, usize)> {
                let mut rng = keyed_rng(cfg.seed, STREAM_STEP, global_step as u64);
                let mut step =
                    run_step(model, cfg, teacher.as_ref(), &batch, lambda, StepMode::Fresh(&mut rng))?;
                step.tape.backward(step.nodes.total)?;
                let mut grads: Vec<Option<Vec<f64>>> = step
                    .binding
                    .ids
                    .iter()
                    .map(|&id| step.tape.grad(id).map(|g| g.iter().map(|&v| Real::to_f64(v)).collect()))
                    .collect();
                clip_global_norm(&mut grads, GRAD_CLIP)?;
                opt.step(&mut model.params, &grads, lr)?;
                clamp_tau(model);
                if let Some(ts) = teacher.as_mut() {
                    ts.update(model, global_step);
                }
                Ok((step.values, step.cross_pairs, step.teacher_extras))
            })();
            match outcome {
                Ok((values, cross, extras)) => {
                    acc[0] += values.itc;
                    acc[1] += values.itm;
                    acc[2] += values.mlm;
                    acc[3] += values.distill_txt;
                    acc[4] += values.distill_img;
                    acc[5] += values.total;
                    report.cross_pair_forwards += cross;
                    report.teacher_extra_pairs += extras;
                    steps_in_epoch += 1;
                    global_step += 1;
                }
                Err(e) if e.is_numeric() => {
                    report.diverged = Some(format!("step {global_step}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if steps_in_epoch > 0 {
            let d = steps_in_epoch as f64;
            report.epoch_losses.push(EpochLosses {
                epoch,
                itc: acc[0] / d,
                itm: acc[1] / d,
                mlm: acc[2] / d,
                distill_txt: acc[3] / d,
                distill_img: acc[4] / d,
                total: acc[5] / d,
            });
        }
    }
    report.steps = global_step;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            width: 16,
            heads: 2,
            depth_img: 1,
            depth_txt: 1,
            depth_cross: 1,
            embed_dim: 8,
            ffn_mult: 2,
            vocab_img: 16,
            vocab_txt: 16,
            len_img: 5,
            len_txt: 4,
        }
    }

    fn tiny_corpus(per_class: usize) -> PairedCorpus {
        let cfg = crate::data::CorpusConfig {
            num_classes: 4,
            pairs_per_class_pretrain: 1,
            pairs_per_class_train: per_class,
            pairs_per_class_val: 1,
            pairs_per_class_test: 1,
            vocab_img: 16,
            vocab_txt: 16,
            content_len_img: 4,
            content_len_txt: 3,
            noise: 0.2,
            seed: 3,
        };
        crate::data::generate_corpus(&cfg, crate::data::Split::Train).unwrap()
    }

    fn quick_cfg(epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            warmup_steps: 2,
            distillation: DistillConfig { m: 2, ..DistillConfig::default() },
            ..TrainConfig::default()
        }
    }

    // ── Config ──────────────────────────────────────────────────────────

    #[test]
    fn config_serde_round_trip_and_partial_fill() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);

        // Partial JSON fills defaults.
        let partial: TrainConfig =
            serde_json::from_str(r#"{"epochs": 3, "distillation": {"m": 9}}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.distillation.m, 9);
        assert_eq!(partial.batch_size, 32);
        assert!(partial.distillation.enabled);

        // Unknown fields are rejected.
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"distillation": {"mm": 1}}"#).is_err());
    }

    #[test]
    fn config_validation_table() {
        let cases: Vec<(&str, Box<dyn Fn(&mut TrainConfig)>)> = vec![
            ("epochs", Box::new(|c| c.epochs = 0)),
            ("batch_size", Box::new(|c| c.batch_size = 1)),
            ("base_lr", Box::new(|c| c.base_lr = 0.0)),
            ("base_lr", Box::new(|c| c.base_lr = f64::NAN)),
            ("min_lr", Box::new(|c| c.min_lr = -1e-9)),
            ("min_lr", Box::new(|c| c.min_lr = 1.0)),
            ("weight_decay", Box::new(|c| c.weight_decay = -0.1)),
            ("beta1", Box::new(|c| c.beta1 = 1.0)),
            ("beta2", Box::new(|c| c.beta2 = -0.2)),
            ("components", Box::new(|c| {
                c.components.use_cross = false;
                c.components.use_dual = false;
                c.distillation.enabled = false;
            })),
            ("distillation.m", Box::new(|c| c.distillation.m = 0)),
            ("distillation", Box::new(|c| c.components.use_cross = false)),
            ("distillation.stop_grad", Box::new(|c| {
                c.distillation.stop_grad = false;
                c.distillation.teacher.mode = TeacherMode::Momentum;
            })),
            ("distillation.teacher.momentum", Box::new(|c| {
                c.distillation.teacher.mode = TeacherMode::Momentum;
                c.distillation.teacher.momentum = 1.5;
            })),
            ("distillation.teacher.copy_period", Box::new(|c| {
                c.distillation.teacher.mode = TeacherMode::Periodic;
                c.distillation.teacher.copy_period = 0;
            })),
            ("distillation.teacher.checkpoint", Box::new(|c| {
                c.distillation.teacher.mode = TeacherMode::Offline;
            })),
        ];
        for (field, mutate) in cases {
            let mut cfg = TrainConfig::default();
            mutate(&mut cfg);
            match cfg.validate() {
                Err(Error::InvalidTrainConfig { field: f, .. }) => {
                    assert_eq!(f, field, "wrong field reported")
                }
                other => panic!("{field}: expected rejection, got {other:?}"),
            }
        }
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::finetune_default().validate().is_ok());
        // Disabling distillation lifts its constraints.
        let mut ok = TrainConfig::default();
        ok.distillation.enabled = false;
        ok.components.use_cross = false;
        assert!(ok.validate().is_ok());
    }

    // ── Schedules ───────────────────────────────────────────────────────

    #[test]
    fn lr_schedule_hits_the_documented_points() {
        let cfg = TrainConfig::default();
        let total = 1000;
        // Warmup ramps linearly and ends at the base rate.
        assert!((lr_schedule(0, total, &cfg) - 1e-4 / 100.0).abs() < 1e-18);
        assert!((lr_schedule(99, total, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(100, total, &cfg) - 1e-4).abs() < 1e-18);
        // Final step lands on the floor.
        assert!((lr_schedule(999, total, &cfg) - 1e-5).abs() < 1e-18);
        // Post-warmup midpoint: cos(pi/2) = 0.
        let mid_cfg = TrainConfig { warmup_steps: 0, ..TrainConfig::default() };
        let mid = lr_schedule(500, 1001, &mid_cfg);
        assert!((mid - 5.5e-5).abs() < 1e-12, "midpoint {mid}");
        // Monotone non-increasing after warmup.
        let mut prev = f64::INFINITY;
        for step in 100..1000 {
            let lr = lr_schedule(step, total, &cfg);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        // Warmup ramp is increasing.
        for step in 1..100 {
            assert!(lr_schedule(step, total, &cfg) > lr_schedule(step - 1, total, &cfg));
        }
    }

    #[test]
    fn distill_weight_ramps_over_one_epoch() {
        assert_eq!(distill_weight(0.0), 0.0);
        assert_eq!(distill_weight(0.5), 0.5);
        assert_eq!(distill_weight(1.0), 1.0);
        assert_eq!(distill_weight(3.2), 1.0);
    }

    // ── Optimizer ───────────────────────────────────────────────────────

    fn scalar_param(v: f64, decay: bool) -> Param<f64> {
        Param { name: "x".into(), tensor: crate::tape::Tensor::scalar(v), decay }
    }

    #[test]
    fn adam_first_step_has_the_closed_form_magnitude() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut params = vec![scalar_param(3.0, false)];
        let mut opt = AdamW::new(&params, &cfg);
        let lr = 1e-3;
        opt.step(&mut params, &[Some(vec![1.0])], lr).unwrap();
        // First step with g = 1: m_hat = 1, v_hat = 1, so the update is
        // exactly lr / (1 + eps).
        let want = 3.0 - lr / (1.0 + ADAM_EPS);
        assert!((params[0].tensor.data[0] - want).abs() < 1e-18);
    }

    #[test]
    fn adam_matches_an_independent_reference_over_a_quadratic() {
        // Minimize 0.5 x^2 (gradient = x) for 100 steps; the reference
        // below follows the published AdamW update rule directly.
        let cfg = TrainConfig { weight_decay: 0.02, ..TrainConfig::default() };
        let mut params = vec![scalar_param(3.0, true), scalar_param(-2.0, false)];
        let mut opt = AdamW::new(&params, &cfg);
        let lr = 0.05;

        let mut reference = [3.0f64, -2.0];
        let decays = [true, false];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for step in 1..=100 {
            let grads: Vec<Option<Vec<f64>>> =
                params.iter().map(|p| Some(vec![p.tensor.data[0]])).collect();
            opt.step(&mut params, &grads, lr).unwrap();

            for i in 0..2 {
                let g = reference[i];
                if decays[i] {
                    reference[i] -= lr * 0.02 * reference[i];
                }
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let m_hat = m[i] / (1.0 - 0.9f64.powi(step));
                let v_hat = v[i] / (1.0 - 0.999f64.powi(step));
                reference[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            for i in 0..2 {
                assert!(
                    (params[i].tensor.data[0] - reference[i]).abs() < 1e-12,
                    "step {step} param {i}"
                );
            }
        }
        // Both trajectories moved toward the origin.
        assert!(reference[0].abs() < 3.0 && reference[1].abs() < 2.0);
    }

    #[test]
    fn adam_skips_params_without_gradients_entirely() {
        let cfg = TrainConfig::default();
        let mut params = vec![scalar_param(1.5, true), scalar_param(0.5, true)];
        let mut opt = AdamW::new(&params, &cfg);
        // Three steps where only param 0 has a gradient.
        for _ in 0..3 {
            opt.step(&mut params, &[Some(vec![0.3]), None], 0.01).unwrap();
        }
        assert_eq!(params[1].tensor.data[0], 0.5, "absent gradient must not decay or step");

        // When its gradient finally appears, it behaves like a first step.
        let mut fresh_params = vec![scalar_param(0.5, true)];
        let mut fresh = AdamW::new(&fresh_params, &cfg);
        fresh.step(&mut fresh_params, &[Some(vec![0.7])], 0.01).unwrap();
        opt.step(&mut params, &[None, Some(vec![0.7])], 0.01).unwrap();
        assert_eq!(params[1].tensor.data[0], fresh_params[0].tensor.data[0]);
    }

    #[test]
    fn adam_rejects_non_finite_and_mismatched_gradients() {
        let cfg = TrainConfig::default();
        let mut params = vec![scalar_param(1.0, false)];
        let mut opt = AdamW::new(&params, &cfg);
        assert!(matches!(
            opt.step(&mut params, &[Some(vec![f64::NAN])], 0.01),
            Err(Error::NonFiniteInput { .. })
        ));
        assert!(opt.step(&mut params, &[Some(vec![1.0, 2.0])], 0.01).is_err());
        assert!(opt.step(&mut params, &[], 0.01).is_err());
    }

    #[test]
    fn clip_rescales_only_above_the_ceiling() {
        let mut grads = vec![Some(vec![3.0, 4.0]), None];
        let norm = clip_global_norm(&mut grads, 10.0).unwrap();
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].as_ref().unwrap(), &vec![3.0, 4.0]);

        let mut grads = vec![Some(vec![30.0, 40.0])];
        let norm = clip_global_norm(&mut grads, 5.0).unwrap();
        assert_eq!(norm, 50.0);
        let clipped = grads[0].as_ref().unwrap();
        let new_norm = (clipped[0] * clipped[0] + clipped[1] * clipped[1]).sqrt();
        assert!((new_norm - 5.0).abs() < 1e-12);

        let mut bad = vec![Some(vec![f64::INFINITY])];
        assert!(clip_global_norm(&mut bad, 5.0).is_err());
    }

    #[test]
    fn tau_clamps_at_both_ends() {
        let mut model = Model::<f64>::new(tiny_model_cfg(), 0).unwrap();
        model.param_mut("tau").unwrap().tensor.data[0] = 10.0;
        clamp_tau(&mut model);
        assert_eq!(model.tau(), TAU_MAX);
        model.param_mut("tau").unwrap().tensor.data[0] = 1e-9;
        clamp_tau(&mut model);
        assert_eq!(model.tau(), TAU_MIN);
        model.param_mut("tau").unwrap().tensor.data[0] = 0.07;
        clamp_tau(&mut model);
        assert_eq!(model.tau(), 0.07);
    }

    // ── Step pipeline ───────────────────────────────────────────────────

    fn batch_of(corpus: &PairedCorpus, n: usize) -> Batch {
        Batch::from_corpus(corpus, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn step_counts_cross_pairs_per_the_reuse_rule() {
        let model = Model::<f64>::new(tiny_model_cfg(), 1).unwrap();
        let corpus = tiny_corpus(2);
        let n = 6;
        let batch = batch_of(&corpus, n);
        let teacher = TeacherState::online();

        // Distillation disabled: exactly the three matching passes.
        let mut cfg = quick_cfg(1, n);
        cfg.distillation.enabled = false;
        let mut rng = keyed_rng(0, STREAM_STEP, 0);
        let r = run_step(&model, &cfg, None, &batch, 0.0, StepMode::Fresh(&mut rng)).unwrap();
        assert_eq!(r.cross_pairs, 3 * n);
        assert_eq!(r.teacher_extras, 0);

        // Hard distillation with reuse: m - 1 extras per direction per
        // positive, all through the live encoder.
        for m in [1usize, 2, 4] {
            let mut cfg = quick_cfg(1, n);
            cfg.distillation.m = m;
            let mut rng = keyed_rng(0, STREAM_STEP, 0);
            let r =
                run_step(&model, &cfg, Some(&teacher), &batch, 1.0, StepMode::Fresh(&mut rng)).unwrap();
            assert_eq!(r.teacher_extras, 2 * n * (m - 1), "m={m}");
            assert_eq!(r.cross_pairs, 3 * n + 2 * n * (m - 1), "m={m}");
        }

        // Without reuse every requested pair is forwarded fresh.
        let mut cfg = quick_cfg(1, n);
        cfg.distillation.m = 1;
        cfg.distillation.reuse_m1 = false;
        let mut rng = keyed_rng(0, STREAM_STEP, 0);
        let r = run_step(&model, &cfg, Some(&teacher), &batch, 1.0, StepMode::Fresh(&mut rng)).unwrap();
        assert_eq!(r.teacher_extras, 2 * n * 2);
        assert_eq!(r.cross_pairs, 3 * n + 4 * n);
    }

    #[test]
    fn step_respects_direction_selection() {
        let model = Model::<f64>::new(tiny_model_cfg(), 1).unwrap();
        let corpus = tiny_corpus(2);
        let n = 4;
        let batch = batch_of(&corpus, n);
        let teacher = TeacherState::online();
        let mut cfg = quick_cfg(1, n);
        cfg.distillation.negative_type = NegativeType::Text;
        let mut rng = keyed_rng(0, STREAM_STEP, 0);
        let r = run_step(&model, &cfg, Some(&teacher), &batch, 1.0, StepMode::Fresh(&mut rng)).unwrap();
        assert!(r.values.distill_txt > 0.0);
        assert_eq!(r.values.distill_img, 0.0);
        assert!(r.q_txt.is_some() && r.q_img.is_none());
        // One direction's extras only.
        assert_eq!(r.teacher_extras, n * (cfg.distillation.m - 1));
    }

    #[test]
    fn replay_reproduces_the_fresh_step_bit_for_bit() {
        let model = Model::<f64>::new(tiny_model_cfg(), 2).unwrap();
        let corpus = tiny_corpus(2);
        let n = 5;
        let batch = batch_of(&corpus, n);
        let teacher = TeacherState::online();
        let cfg = quick_cfg(1, n);

        let mut rng = keyed_rng(7, STREAM_STEP, 0);
        let mut fresh =
            run_step(&model, &cfg, Some(&teacher), &batch, 0.7, StepMode::Fresh(&mut rng)).unwrap();
        fresh.tape.backward(fresh.nodes.total).unwrap();
        let fresh_grads: Vec<Option<Vec<f64>>> = fresh
            .binding
            .ids
            .iter()
            .map(|&id| fresh.tape.grad(id).map(|g| g.to_vec()))
            .collect();

        // Replay with frozen teacher rows: identical losses and identical
        // parameter gradients (the teacher was detached either way).
        let mut replay = run_step(
            &model,
            &cfg,
            Some(&teacher),
            &batch,
            0.7,
            StepMode::Replay {
                plan: &fresh.plan,
                q_txt: fresh.q_txt.as_deref(),
                q_img: fresh.q_img.as_deref(),
            },
        )
        .unwrap();
        assert_eq!(replay.values, fresh.values);
        assert_eq!(replay.teacher_extras, 0, "frozen rows need no teacher passes");
        replay.tape.backward(replay.nodes.total).unwrap();
        for (i, &id) in replay.binding.ids.iter().enumerate() {
            let got = replay.tape.grad(id).map(|g| g.to_vec());
            assert_eq!(got, fresh_grads[i], "param {}", model.params[i].name);
        }

        // Replay with a live teacher re-derives the same probabilities.
        let live = run_step(
            &model,
            &cfg,
            Some(&teacher),
            &batch,
            0.7,
            StepMode::Replay { plan: &fresh.plan, q_txt: None, q_img: None },
        )
        .unwrap();
        assert_eq!(live.values, fresh.values);
        assert_eq!(live.q_txt, fresh.q_txt);
        assert_eq!(live.q_img, fresh.q_img);
    }

    #[test]
    fn fresh_mode_advances_the_caller_generator() {
        let model = Model::<f64>::new(tiny_model_cfg(), 2).unwrap();
        let corpus = tiny_corpus(2);
        let n = 4;
        let batch = batch_of(&corpus, n);
        let mut cfg = quick_cfg(1, n);
        cfg.distillation.enabled = false;
        cfg.components.itm_negative_method = NegMethod::Random;

        // Two consecutive fresh steps from one generator must differ in
        // their random choices (overwhelmingly likely for random mining).
        let mut rng = keyed_rng(3, STREAM_STEP, 0);
        let a = run_step(&model, &cfg, None, &batch, 0.0, StepMode::Fresh(&mut rng)).unwrap();
        let b = run_step(&model, &cfg, None, &batch, 0.0, StepMode::Fresh(&mut rng)).unwrap();
        assert_ne!(a.plan, b.plan);

        // The same keyed generator replays the same plan.
        let mut rng2 = keyed_rng(3, STREAM_STEP, 0);
        let c = run_step(&model, &cfg, None, &batch, 0.0, StepMode::Fresh(&mut rng2)).unwrap();
        assert_eq!(a.plan, c.plan);
    }

    #[test]
    fn step_handles_component_switches() {
        let model = Model::<f64>::new(tiny_model_cfg(), 3).unwrap();
        let corpus = tiny_corpus(2);
        let n = 4;
        let batch = batch_of(&corpus, n);

        // Dual only: no cross passes at all.
        let mut cfg = quick_cfg(1, n);
        cfg.distillation.enabled = false;
        cfg.components.use_cross = false;
        cfg.components.use_mlm = true;
        let mut rng = keyed_rng(0, STREAM_STEP, 0);
        let r = run_step(&model, &cfg, None, &batch, 0.0, StepMode::Fresh(&mut rng)).unwrap();
        assert_eq!(r.cross_pairs, 0);
        assert_eq!(r.values.itm, 0.0);
        assert!(r.values.mlm > 0.0, "masked-token head reads the tower output");
        assert!(r.values.itc > 0.0);

        // Cross only: contrastive term zero, matching trained.
        let mut cfg = quick_cfg(1, n);
        cfg.distillation.enabled = false;
        cfg.components.use_dual = false;
        let mut rng = keyed_rng(0, STREAM_STEP, 0);
        let r = run_step(&model, &cfg, None, &batch, 0.0, StepMode::Fresh(&mut rng)).unwrap();
        assert_eq!(r.values.itc, 0.0);
        assert!(r.values.itm > 0.0);

        // MLM off: no mask plan recorded, mlm exactly zero.
        let mut cfg = quick_cfg(1, n);
        cfg.distillation.enabled = false;
        cfg.components.use_mlm = false;
        let mut rng = keyed_rng(0, STREAM_STEP, 0);
        let r = run_step(&model, &cfg, None, &batch, 0.0, StepMode::Fresh(&mut rng)).unwrap();
        assert!(r.plan.masks.is_none());
        assert_eq!(r.values.mlm, 0.0);
    }

    // ── Full runs ───────────────────────────────────────────────────────

    #[test]
    fn training_runs_deterministically_and_counts_pairs() {
        let corpus = tiny_corpus(4);
        let n = 4;
        let mut cfg = quick_cfg(2, n);
        cfg.distillation.m = 2;
        cfg.seed = 11;

        let run = || {
            let mut model = Model::<f64>::new(tiny_model_cfg(), 5).unwrap();
            let report = train(&mut model, &corpus, &cfg).unwrap();
            (model, report)
        };
        let (m1, r1) = run();
        let (m2, mut r2) = run();

        assert!(r1.diverged.is_none());
        let steps_per_epoch = corpus.len() / n;
        assert_eq!(r1.steps, steps_per_epoch * 2);
        assert_eq!(r1.epoch_losses.len(), 2);
        for e in &r1.epoch_losses {
            for v in [e.itc, e.itm, e.mlm, e.distill_txt, e.distill_img, e.total] {
                assert!(v.is_finite());
            }
        }
        // Pair accounting: 3n matching + 2n(m-1) teacher extras per step.
        let per_step = 3 * n + 2 * n * (cfg.distillation.m - 1);
        assert_eq!(r1.cross_pair_forwards, per_step * r1.steps);
        assert_eq!(r1.teacher_extra_pairs, 2 * n * (cfg.distillation.m - 1) * r1.steps);

        // Determinism: bit-identical parameters and reports (wall clock is
        // the one timing field and is excluded by overwriting).
        for (a, b) in m1.params.iter().zip(&m2.params) {
            assert_eq!(a.tensor.data, b.tensor.data, "{}", a.name);
        }
        r2.wall_clock_s = r1.wall_clock_s;
        assert_eq!(r1, r2);
        assert_eq!(r1.config_digest, config_digest(&cfg).unwrap());
    }

    #[test]
    fn momentum_teacher_trains_and_tracks() {
        let corpus = tiny_corpus(2);
        let mut cfg = quick_cfg(1, 4);
        cfg.distillation.m = 1;
        cfg.distillation.teacher.mode = TeacherMode::Momentum;
        cfg.distillation.teacher.momentum = 0.5;
        let mut model = Model::<f64>::new(tiny_model_cfg(), 6).unwrap();
        let report = train(&mut model, &corpus, &cfg).unwrap();
        assert!(report.diverged.is_none());
        assert!(report.teacher_extra_pairs > 0, "shadow teacher reuses nothing");
        // Shadow passes are not live-encoder work.
        assert_eq!(report.cross_pair_forwards, 3 * 4 * report.steps);
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let corpus = tiny_corpus(2);
        let cfg = quick_cfg(1, 4);
        let mut model = Model::<f64>::new(tiny_model_cfg(), 7).unwrap();
        model.param_mut("tau").unwrap().tensor.data[0] = f64::NAN;
        let report = train(&mut model, &corpus, &cfg).unwrap();
        let msg = report.diverged.expect("NaN parameter must surface as divergence");
        assert!(msg.starts_with("step 0:"), "{msg}");
        assert_eq!(report.steps, 0);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn train_rejects_incompatible_corpus_and_config() {
        let corpus = tiny_corpus(2);
        let mut model = Model::<f64>::new(ModelConfig::default(), 0).unwrap();
        // Desk-default model expects longer sequences than the tiny corpus.
        assert!(matches!(
            train(&mut model, &corpus, &quick_cfg(1, 4)),
            Err(Error::InvalidTrainConfig { .. })
        ));
        // Batch larger than the corpus.
        let mut tiny = Model::<f64>::new(tiny_model_cfg(), 0).unwrap();
        assert!(train(&mut tiny, &corpus, &quick_cfg(1, 64)).is_err());
        // Invalid config is rejected before any work.
        let mut bad = quick_cfg(1, 4);
        bad.epochs = 0;
        assert!(matches!(
            train(&mut tiny, &corpus, &bad),
            Err(Error::InvalidTrainConfig { .. })
        ));
    }

    #[test]
    fn digest_is_stable_and_field_sensitive() {
        let a = config_digest(&TrainConfig::default()).unwrap();
        let b = config_digest(&TrainConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let c = config_digest(&TrainConfig { seed: 1, ..TrainConfig::default() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_materialization_checks_bounds() {
        let corpus = tiny_corpus(1);
        assert!(Batch::from_corpus(&corpus, &[0, 99]).is_err());
        let b = Batch::from_corpus(&corpus, &[1, 0]).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.img_content[0], corpus.items[1].img_tokens);
    }
}
