//! Experiment-level configuration: a two-stage run specification and the
//! ablation grid format. A grid names one axis, a shared base spec, and a
//! list of arms given as JSON patches; validation guarantees every arm
//! differs from the base only along the named axis and that the grid keeps
//! a distillation-free baseline arm to compare against.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trainer::{Stage, TrainConfig};

/// Default shortlist depth when reranking dual retrieval with the cross
/// encoder.
pub const DEFAULT_RERANK_K: usize = 16;

/// The seven supported ablation axes.
pub const AXES: [&str; 7] = [
    "num_negatives",
    "negative_type",
    "sampling",
    "staging",
    "teacher",
    "components",
    "stop_grad",
];

/// A full experiment: optional pretraining stage, optional fine-tuning
/// stage (each stage explicitly `null` to skip), and the rerank depth used
/// for the final metrics. `{}` parses to the standard two-stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub pretrain: Option<TrainConfig>,
    pub finetune: Option<TrainConfig>,
    pub rerank_k: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            pretrain: Some(TrainConfig::default()),
            finetune: Some(TrainConfig::finetune_default()),
            rerank_k: DEFAULT_RERANK_K,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: String, msg: String| -> Result<()> {
            Err(Error::InvalidTrainConfig { field, msg })
        };
        if self.pretrain.is_none() && self.finetune.is_none() {
            return fail("run".into(), "every stage is null; nothing to run".into());
        }
        if self.rerank_k == 0 {
            return fail("rerank_k".into(), "rerank depth must be at least 1".into());
        }
        for (name, want, cfg) in [
            ("pretrain", Stage::Pretrain, &self.pretrain),
            ("finetune", Stage::Finetune, &self.finetune),
        ] {
            if let Some(cfg) = cfg {
                if cfg.stage != want {
                    return fail(
                        format!("{name}.stage"),
                        format!("stage tag must be \"{name}\""),
                    );
                }
                if let Err(e) = cfg.validate() {
                    return Err(match e {
                        Error::InvalidTrainConfig { field, msg } => Error::InvalidTrainConfig {
                            field: format!("{name}.{field}"),
                            msg,
                        },
                        other => other,
                    });
                }
            }
        }
        Ok(())
    }

    /// True when no present stage runs distillation; the property the
    /// grid's baseline arm must satisfy.
    pub fn distillation_free(&self) -> bool {
        let off = |s: &Option<TrainConfig>| s.as_ref().is_none_or(|c| !c.distillation.enabled);
        off(&self.pretrain) && off(&self.finetune)
    }
}

/// One grid arm: a name for reporting and a JSON object patched over the
/// base spec (objects merge key-wise, everything else replaces).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default = "empty_object")]
    pub patch: Value,
}

fn empty_object() -> Value {
    Value::Object(serde_json::Map::new())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub axis: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunSpec,
    pub arms: Vec<ArmSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// The config paths an axis's arms may touch, or None for an unknown axis.
/// Every axis admits toggling `distillation.enabled` so each grid can carry
/// its distillation-free baseline arm.
pub fn axis_allowed_paths(axis: &str) -> Option<Vec<String>> {
    let extra: &[&str] = match axis {
        "num_negatives" => &["distillation.m"],
        "negative_type" => &["distillation.negative_type"],
        "sampling" => &["distillation.sampling"],
        "staging" => &[],
        "teacher" => &[
            "distillation.teacher.mode",
            "distillation.teacher.momentum",
            "distillation.teacher.copy_period",
            "distillation.teacher.checkpoint",
        ],
        "components" => &[
            "components.use_cross",
            "components.use_dual",
            "components.use_mlm",
            "components.itm_negative_method",
        ],
        "stop_grad" => &["distillation.stop_grad"],
        _ => return None,
    };
    let mut paths = Vec::new();
    for stage in ["pretrain", "finetune"] {
        paths.push(format!("{stage}.distillation.enabled"));
        for f in extra {
            paths.push(format!("{stage}.{f}"));
        }
    }
    Some(paths)
}

/// Key-wise recursive merge: objects merge, anything else (scalars,
/// arrays, null) replaces the base value.
pub fn apply_patch(base: &Value, patch: &Value) -> Value {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let mut out = b.clone();
            for (k, pv) in p {
                let merged = match out.get(k) {
                    Some(bv) => apply_patch(bv, pv),
                    None => pv.clone(),
                };
                out.insert(k.clone(), merged);
            }
            Value::Object(out)
        }
        _ => patch.clone(),
    }
}

/// Dot-joined paths of every leaf a patch sets. Empty objects merge
/// nothing and contribute no paths.
fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl ArmSpec {
    /// Applies the arm's patch to the base and parses the result. Schema
    /// violations surface with the arm's name attached.
    pub fn resolve(&self, base: &RunSpec) -> Result<RunSpec> {
        let base_v = serde_json::to_value(base).map_err(|e| Error::InvalidGrid {
            field: "base".into(),
            msg: e.to_string(),
        })?;
        let merged = apply_patch(&base_v, &self.patch);
        serde_json::from_value(merged).map_err(|e| Error::InvalidGrid {
            field: format!("arms.{}", self.name),
            msg: e.to_string(),
        })
    }
}

impl AblationGrid {
    /// Full structural check; returns each arm's resolved spec in arm
    /// order on success.
    pub fn validate(&self) -> Result<Vec<RunSpec>> {
        let fail = |field: String, msg: String| Error::InvalidGrid { field, msg };
        let allowed = axis_allowed_paths(&self.axis).ok_or_else(|| {
            fail(
                "axis".into(),
                format!("unknown axis \"{}\"; known axes: {}", self.axis, AXES.join(", ")),
            )
        })?;
        if self.seeds.is_empty() {
            return Err(fail("seeds".into(), "need at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(fail("seeds".into(), "seeds must be distinct".into()));
        }
        if self.arms.is_empty() {
            return Err(fail("arms".into(), "need at least one arm".into()));
        }
        let mut names: Vec<&str> = Vec::new();
        for (i, arm) in self.arms.iter().enumerate() {
            let ok_name = !arm.name.is_empty()
                && arm.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok_name {
                return Err(fail(
                    format!("arms.{i}.name"),
                    "arm names must be non-empty and use only [A-Za-z0-9_-]".into(),
                ));
            }
            if names.contains(&arm.name.as_str()) {
                return Err(fail(
                    format!("arms.{i}.name"),
                    format!("duplicate arm name \"{}\"", arm.name),
                ));
            }
            names.push(&arm.name);
        }
        self.base.validate().map_err(|e| match e {
            Error::InvalidTrainConfig { field, msg } => fail(format!("base.{field}"), msg),
            other => other,
        })?;

        let mut resolved = Vec::with_capacity(self.arms.len());
        for arm in &self.arms {
            if !arm.patch.is_object() {
                return Err(fail(
                    format!("arms.{}", arm.name),
                    "patch must be a JSON object".into(),
                ));
            }
            let mut paths = Vec::new();
            leaf_paths(&arm.patch, "", &mut paths);
            for p in &paths {
                if !allowed.contains(p) {
                    return Err(fail(
                        format!("arms.{}", arm.name),
                        format!(
                            "patch path \"{p}\" is outside the \"{}\" axis (allowed: {})",
                            self.axis,
                            allowed.join(", ")
                        ),
                    ));
                }
            }
            let spec = arm.resolve(&self.base)?;
            spec.validate().map_err(|e| match e {
                Error::InvalidTrainConfig { field, msg } => {
                    fail(format!("arms.{}.{field}", arm.name), msg)
                }
                other => other,
            })?;
            resolved.push(spec);
        }

        if !resolved.iter().any(RunSpec::distillation_free) {
            return Err(fail(
                "arms".into(),
                "grid has no distillation-free baseline arm".into(),
            ));
        }
        Ok(resolved)
    }
}
