//! Teacher-score provisioning for distillation.
//!
//! Four regimes: `online` reuses the live matching pass (zero extra
//! parameters, extra pair-forwards only for negatives the matching pass did
//! not already score), `momentum` keeps an exponential moving average of the
//! live parameters, `periodic` copies them every fixed number of steps, and
//! `offline` loads a frozen checkpoint. Shadow regimes mirror the full
//! scoring path (both towers plus the cross encoder) and never receive
//! gradients.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{Binding, Model, ModelConfig};
use crate::negatives::Direction;
use crate::objectives::TeacherScorer;
use crate::tape::{real, NodeId, Real, Tape};

pub const MOMENTUM_DEFAULT: f64 = 0.995;
pub const COPY_PERIOD_DEFAULT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    Online,
    Momentum,
    Periodic,
    Offline,
}

#[derive(Clone, Debug)]
enum Regime {
    Online,
    Momentum { mu: f64 },
    Periodic { period: usize },
    Offline,
}

/// Teacher parameters and their tracking rule. Online holds no shadow.
#[derive(Clone, Debug)]
pub struct TeacherState<F: Real> {
    regime: Regime,
    shadow: Option<Model<F>>,
}

impl<F: Real> TeacherState<F> {
    pub fn online() -> Self {
        TeacherState { regime: Regime::Online, shadow: None }
    }

    /// Shadow starts as a copy of the live model and tracks it as
    /// shadow <- mu * shadow + (1 - mu) * live after every step.
    pub fn momentum(live: &Model<F>, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidTrainConfig {
                field: "distillation.teacher.momentum".into(),
                msg: format!("must lie in [0, 1], got {mu}"),
            });
        }
        Ok(TeacherState { regime: Regime::Momentum { mu }, shadow: Some(live.clone()) })
    }

    /// Shadow is overwritten by the live parameters whenever
    /// step % period == 0.
    pub fn periodic(live: &Model<F>, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidTrainConfig {
                field: "distillation.teacher.copy_period".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(TeacherState { regime: Regime::Periodic { period }, shadow: Some(live.clone()) })
    }

    /// Frozen teacher from a checkpoint; shapes must match `cfg`.
    pub fn offline(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut shadow = Model::new(cfg.clone(), 0)?;
        checkpoint::load_model(path, &mut shadow)?;
        Ok(TeacherState { regime: Regime::Offline, shadow: Some(shadow) })
    }

    pub fn mode(&self) -> TeacherMode {
        match self.regime {
            Regime::Online => TeacherMode::Online,
            Regime::Momentum { .. } => TeacherMode::Momentum,
            Regime::Periodic { .. } => TeacherMode::Periodic,
            Regime::Offline => TeacherMode::Offline,
        }
    }

    pub fn is_online(&self) -> bool {
        self.shadow.is_none()
    }

    pub fn shadow(&self) -> Option<&Model<F>> {
        self.shadow.as_ref()
    }

    /// Parameters held beyond the live model: zero for online, a full
    /// mirror otherwise.
    pub fn extra_param_footprint(&self) -> usize {
        self.shadow.as_ref().map_or(0, Model::actual_param_count)
    }

    /// Tracking update; call once per optimizer step, after the live
    /// parameters moved. `step` is the 0-based index of the completed step.
    pub fn update(&mut self, live: &Model<F>, step: usize) {
        match self.regime {
            Regime::Online | Regime::Offline => {}
            Regime::Momentum { mu } => {
                let shadow = self.shadow.as_mut().expect("momentum holds a shadow");
                let (keep, blend) = (real::<F>(mu), real::<F>(1.0 - mu));
                for (sp, lp) in shadow.params.iter_mut().zip(live.params.iter()) {
                    debug_assert_eq!(sp.tensor.shape, lp.tensor.shape, "{}", sp.name);
                    for (s, &l) in sp.tensor.data.iter_mut().zip(lp.tensor.data.iter()) {
                        *s = keep * *s + blend * l;
                    }
                }
            }
            Regime::Periodic { period } => {
                if step % period == 0 {
                    let shadow = self.shadow.as_mut().expect("periodic holds a shadow");
                    for (sp, lp) in shadow.params.iter_mut().zip(live.params.iter()) {
                        sp.tensor.data.copy_from_slice(&lp.tensor.data);
                    }
                }
            }
        }
    }
}

/// Matching logits already computed this step, keyed by (image, text)
/// indices. Each entry names a [k, 2] logits node and a row within it.
#[derive(Clone, Debug, Default)]
pub struct PairLogitCache {
    entries: HashMap<(usize, usize), (NodeId, usize)>,
}

impl PairLogitCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a matching pass: row r of `logits` scored `pairs[r]`.
    pub fn insert(&mut self, logits: NodeId, pairs: &[(usize, usize)]) {
        for (row, &p) in pairs.iter().enumerate() {
            self.entries.insert(p, (logits, row));
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, pair: (usize, usize)) -> Option<(NodeId, usize)> {
        self.entries.get(&pair).copied()
    }
}

/// Serves teacher scores from the live model, reusing this step's matching
/// passes where allowed and batching the rest into one extra cross forward
/// per call.
///
/// Reuse is per direction: a request may only draw on the positive pass and
/// on its own direction's negative pass, never on the other direction's,
/// even when the latter happens to have scored the same pair. That keeps
/// the extra-forward count at exactly m-1 per direction per positive under
/// hard mining instead of drifting with incidental collisions.
pub struct OnlineTeacher<'a, F: Real> {
    model: &'a Model<F>,
    binding: &'a Binding,
    img_seq: NodeId,
    txt_seq: NodeId,
    n: usize,
    txt_cache: PairLogitCache,
    img_cache: PairLogitCache,
    extras: usize,
}

impl<'a, F: Real> OnlineTeacher<'a, F> {
    /// `img_seq`/`txt_seq` are the live tower outputs the matching passes
    /// consumed, holding `n` blocks each. Each cache should carry the
    /// positive pass plus that direction's negative pass.
    pub fn new(
        model: &'a Model<F>,
        binding: &'a Binding,
        img_seq: NodeId,
        txt_seq: NodeId,
        n: usize,
        txt_cache: PairLogitCache,
        img_cache: PairLogitCache,
    ) -> Self {
        OnlineTeacher { model, binding, img_seq, txt_seq, n, txt_cache, img_cache, extras: 0 }
    }
}

impl<F: Real> TeacherScorer<F> for OnlineTeacher<'_, F> {
    fn scores(&mut self, t: &mut Tape<F>, direction: Direction, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let cache = match direction {
            Direction::Txt => &self.txt_cache,
            Direction::Img => &self.img_cache,
        };
        let missing: Vec<(usize, usize)> =
            pairs.iter().copied().filter(|p| cache.get(*p).is_none()).collect();
        let fresh = if missing.is_empty() {
            None
        } else {
            let out = self.model.cross_encode(
                t,
                self.binding,
                self.img_seq,
                self.n,
                self.txt_seq,
                self.n,
                &missing,
            )?;
            Some(out.itm_logits)
        };
        self.extras += missing.len();
        let mut fresh_rows: HashMap<(usize, usize), usize> = HashMap::new();
        for (row, &p) in missing.iter().enumerate() {
            fresh_rows.insert(p, row);
        }

        // Stack the source logit nodes once, then gather the matched-class
        // column in request order; gathering copies values verbatim, so
        // cached entries stay bit-identical to the matching pass.
        let locate = |p: (usize, usize)| -> (NodeId, usize) {
            cache.get(p).unwrap_or_else(|| (fresh.expect("missing pairs were forwarded"), fresh_rows[&p]))
        };
        let mut sources: Vec<NodeId> = Vec::new();
        let mut offsets: HashMap<NodeId, usize> = HashMap::new();
        let mut total_rows = 0usize;
        for &p in pairs {
            let (node, _) = locate(p);
            if let std::collections::hash_map::Entry::Vacant(e) = offsets.entry(node) {
                e.insert(total_rows);
                total_rows += t.shape(node).0;
                sources.push(node);
            }
        }
        let stacked = t.concat_rows(&sources)?;
        let idx: Vec<usize> = pairs
            .iter()
            .map(|&p| {
                let (node, row) = locate(p);
                (offsets[&node] + row) * 2
            })
            .collect();
        t.gather_elems(stacked, &idx, pairs.len(), 1)
    }

    fn extra_pairs(&self) -> usize {
        self.extras
    }
}

/// Serves teacher scores from a shadow model bound non-trainably on the
/// step tape; every requested pair costs one cross forward.
pub struct ShadowTeacher<'a, F: Real> {
    model: &'a Model<F>,
    binding: Binding,
    img_seq: NodeId,
    txt_seq: NodeId,
    n: usize,
    extras: usize,
}

impl<'a, F: Real> ShadowTeacher<'a, F> {
    /// Binds the shadow parameters and runs its towers once over the same
    /// prepared (CLS-prefixed, text already masked) batch the live step
    /// uses.
    pub fn new(
        t: &mut Tape<F>,
        model: &'a Model<F>,
        img_tokens: &[Vec<usize>],
        txt_tokens: &[Vec<usize>],
    ) -> Result<Self> {
        if img_tokens.len() != txt_tokens.len() {
            return Err(Error::ShapeMismatch {
                op: "ShadowTeacher::new",
                detail: format!("{} image vs {} text sequences", img_tokens.len(), txt_tokens.len()),
            });
        }
        let binding = model.bind(t, false)?;
        let img_seq = model.encode_image(t, &binding, img_tokens)?;
        let txt_seq = model.encode_text(t, &binding, txt_tokens)?;
        Ok(ShadowTeacher { model, binding, img_seq, txt_seq, n: img_tokens.len(), extras: 0 })
    }

    pub fn binding(&self) -> &Binding {
        &self.binding
    }
}

impl<F: Real> TeacherScorer<F> for ShadowTeacher<'_, F> {
    fn scores(&mut self, t: &mut Tape<F>, _direction: Direction, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let out =
            self.model.cross_encode(t, &self.binding, self.img_seq, self.n, self.txt_seq, self.n, pairs)?;
        self.extras += pairs.len();
        let idx: Vec<usize> = (0..pairs.len()).map(|r| r * 2).collect();
        t.gather_elems(out.itm_logits, &idx, pairs.len(), 1)
    }

    fn extra_pairs(&self) -> usize {
        self.extras
    }
}
