//! Training objectives as tape graphs: two-way contrastive loss, two-class
//! matching loss, masked-token loss, cross-to-dual distillation, and their
//! weighted total.
//!
//! One temperature node parameterizes the contrastive softmax and both
//! distillation softmaxes; callers pass the same `tau` NodeId everywhere,
//! and the step builder asserts that identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::negatives::{mine_hard, sample_random, Direction, NegMethod};
use crate::tape::{real, NodeId, Real, Tape};
use crate::tape::transpose_node;

/// Supplies teacher matching scores (the positive-class logit) for requested
/// (image, text) pairs as a column node, reusing already-computed scores
/// where the regime allows, and counts the genuinely extra pair-forwards.
/// `direction` names the distillation direction the request serves; an
/// online teacher may only reuse that direction's own matching passes.
pub trait TeacherScorer<F: Real> {
    fn scores(&mut self, t: &mut Tape<F>, direction: Direction, pairs: &[(usize, usize)]) -> Result<NodeId>;
    /// Cumulative cross-encoder pair-forwards beyond the matching pass.
    fn extra_pairs(&self) -> usize;
}

/// Two-way InfoNCE over a square similarity matrix with positives on the
/// diagonal: L = -sum_i (log p_i2t[i][i] + log p_t2i[i][i]), row and column
/// softmaxes at the shared temperature.
pub fn itc_loss<F: Real>(t: &mut Tape<F>, sim: NodeId, tau: NodeId) -> Result<NodeId> {
    let (n, cols) = t.shape(sim);
    if n != cols {
        return Err(Error::ShapeMismatch {
            op: "itc_loss",
            detail: format!("similarity must be square, got {n}x{cols}"),
        });
    }
    let diag: Vec<usize> = (0..n).collect();
    let p_i2t = t.softmax_rows(sim, Some(tau))?;
    let ce_i2t = t.ce_hard(p_i2t, &diag)?;
    let sim_t = transpose_node(t, sim)?;
    let p_t2i = t.softmax_rows(sim_t, Some(tau))?;
    let ce_t2i = t.ce_hard(p_t2i, &diag)?;
    let s1 = t.sum(ce_i2t)?;
    let s2 = t.sum(ce_t2i)?;
    t.add(s1, s2)
}

/// Matching loss over three logit sets (positives, text negatives, image
/// negatives), each n x 2 with class 0 = matched: the summed negative log
/// probability of the correct class for all 3n classifications.
pub fn itm_loss<F: Real>(
    t: &mut Tape<F>,
    pos_logits: NodeId,
    txt_neg_logits: NodeId,
    img_neg_logits: NodeId,
) -> Result<NodeId> {
    let (n, c) = t.shape(pos_logits);
    for (id, name) in [(pos_logits, "positive"), (txt_neg_logits, "text-negative"), (img_neg_logits, "image-negative")] {
        let (r, cc) = t.shape(id);
        if cc != 2 || r != n {
            return Err(Error::ShapeMismatch {
                op: "itm_loss",
                detail: format!("{name} logits are {r}x{cc}, want {n}x2"),
            });
        }
    }
    debug_assert_eq!(c, 2);
    let mut parts = Vec::with_capacity(3);
    for (id, target) in [(pos_logits, 0usize), (txt_neg_logits, 1), (img_neg_logits, 1)] {
        let p = t.softmax_rows(id, None)?;
        let ce = t.ce_hard(p, &vec![target; n])?;
        parts.push(t.sum(ce)?);
    }
    let s = t.add(parts[0], parts[1])?;
    t.add(s, parts[2])
}

/// Mean masked-token cross-entropy over the content vocabulary; zero masked
/// positions yields an exact zero.
pub fn mlm_loss<F: Real>(t: &mut Tape<F>, logits: Option<NodeId>, targets: &[usize]) -> Result<NodeId> {
    let logits = match logits {
        Some(l) => l,
        None => {
            if !targets.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "mlm_loss",
                    detail: format!("{} targets but no predictions", targets.len()),
                });
            }
            return Ok(t.scalar(F::zero()));
        }
    };
    let (rows, _) = t.shape(logits);
    if rows != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "mlm_loss",
            detail: format!("{} predictions for {} targets", rows, targets.len()),
        });
    }
    if targets.is_empty() {
        return Ok(t.scalar(F::zero()));
    }
    let p = t.softmax_rows(logits, None)?;
    let ce = t.ce_hard(p, targets)?;
    let s = t.sum(ce)?;
    t.scale(s, real(1.0 / targets.len() as f64))
}

/// Frozen negative selections for one step's distillation, per direction.
/// A `None` direction is excluded from the loss (and never queries the
/// teacher); `Some` holds the chosen negatives per anchor in selection
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistillPlan {
    pub m: usize,
    pub txt: Option<Vec<Vec<usize>>>,
    pub img: Option<Vec<Vec<usize>>>,
}

/// Selects distillation negatives from similarity values: top-m per anchor
/// (or the random control, drawn text-then-image per anchor). Selection is
/// separated from graph building so a recorded plan can be replayed against
/// perturbed parameters.
pub fn plan_distill<F: Real>(
    sim_values: &[F],
    n: usize,
    m: usize,
    method: NegMethod,
    rng: &mut impl Rng,
    want_txt: bool,
    want_img: bool,
) -> Result<DistillPlan> {
    if sim_values.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "plan_distill",
            detail: format!("{} values for {n}x{n} similarity", sim_values.len()),
        });
    }
    if m == 0 || m >= n {
        return Err(Error::InvalidNegativeCount { m, n });
    }
    let mut txt = want_txt.then(|| Vec::with_capacity(n));
    let mut img = want_img.then(|| Vec::with_capacity(n));
    for i in 0..n {
        if let Some(txt) = txt.as_mut() {
            txt.push(match method {
                NegMethod::Hard => mine_hard(sim_values, n, i, Direction::Txt, m)?.chosen,
                NegMethod::Random => sample_random::<F>(i, n, m, Direction::Txt, rng)?.chosen,
            });
        }
        if let Some(img) = img.as_mut() {
            img.push(match method {
                NegMethod::Hard => mine_hard(sim_values, n, i, Direction::Img, m)?.chosen,
                NegMethod::Random => sample_random::<F>(i, n, m, Direction::Img, rng)?.chosen,
            });
        }
    }
    Ok(DistillPlan { m, txt, img })
}

/// One direction's distillation rows: student and teacher probabilities
/// over m+1 slots, slot 0 = positive.
#[derive(Clone, Copy, Debug)]
pub struct DirectionSet {
    pub p: NodeId,
    /// Teacher rows; detached when stop_grad held, a constant leaf when
    /// replayed from frozen probabilities.
    pub q: NodeId,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DistillSets {
    pub txt: Option<DirectionSet>,
    pub img: Option<DirectionSet>,
}

/// Where teacher probability rows come from.
pub enum QSource<'a, F: Real> {
    /// Score requested pairs live; softmax at the shared temperature,
    /// detached iff `stop_grad`.
    Teacher { scorer: &'a mut dyn TeacherScorer<F>, stop_grad: bool },
    /// Previously recorded probability rows (n x (m+1), row-major), bound
    /// as constant leaves. Used to rebuild a step's graph for finite
    /// differences; inherently gradient-free, matching a detached teacher.
    Frozen { txt: Option<&'a [F]>, img: Option<&'a [F]> },
}

/// Builds the planned directions' distillation sets: student scores
/// gathered from the live similarity node, teacher rows per `q`, both
/// softmaxed at the same temperature node (frozen rows are already
/// probabilities).
pub fn build_distill_sets<F: Real>(
    t: &mut Tape<F>,
    sim: NodeId,
    tau: NodeId,
    plan: &DistillPlan,
    q: QSource<F>,
) -> Result<DistillSets> {
    let (n, cols) = t.shape(sim);
    if n != cols {
        return Err(Error::ShapeMismatch {
            op: "build_distill_sets",
            detail: format!("similarity must be square, got {n}x{cols}"),
        });
    }
    let m = plan.m;
    if m == 0 || m >= n {
        return Err(Error::InvalidNegativeCount { m, n });
    }
    let width = m + 1;
    let check_sel = |sel: &Vec<Vec<usize>>, dir: &str| -> Result<()> {
        if sel.len() != n || sel.iter().any(|s| s.len() != m) {
            return Err(Error::ShapeMismatch {
                op: "build_distill_sets",
                detail: format!("{dir} plan does not hold {m} negatives for each of {n} anchors"),
            });
        }
        Ok(())
    };

    // Similarity indices and teacher pairs per direction: slot 0 is the
    // positive, then the planned negatives. Text direction reads row i of
    // the similarity (image anchor), image direction reads column i (text
    // anchor).
    let layout = |sel: &[Vec<usize>], dir: Direction| {
        let mut idx = Vec::with_capacity(n * width);
        let mut pairs = Vec::with_capacity(n * width);
        for (i, negs) in sel.iter().enumerate() {
            idx.push(i * n + i);
            pairs.push((i, i));
            for &j in negs {
                match dir {
                    Direction::Txt => {
                        idx.push(i * n + j);
                        pairs.push((i, j));
                    }
                    Direction::Img => {
                        idx.push(j * n + i);
                        pairs.push((j, i));
                    }
                }
            }
        }
        (idx, pairs)
    };

    let build = |t: &mut Tape<F>,
                 q: &mut QSource<F>,
                 dir: Direction,
                     sel: &Vec<Vec<usize>>|
     -> Result<DirectionSet> {
        check_sel(sel, if dir == Direction::Txt { "text" } else { "image" })?;
        let (idx, pairs) = layout(sel, dir);
        let student = t.gather_elems(sim, &idx, n, width)?;
        let p = t.softmax_rows(student, Some(tau))?;
        let q_node = match q {
            QSource::Teacher { scorer, stop_grad } => {
                let raw_q = scorer.scores(t, dir, &pairs)?;
                let (qr, qc) = t.shape(raw_q);
                if (qr, qc) != (n * width, 1) {
                    return Err(Error::ShapeMismatch {
                        op: "build_distill_sets",
                        detail: format!("teacher returned {qr}x{qc}, want {}x1", n * width),
                    });
                }
                let rows: Vec<usize> = (0..n * width).collect();
                let q_mat = t.gather_elems(raw_q, &rows, n, width)?;
                let q_soft = t.softmax_rows(q_mat, Some(tau))?;
                if *stop_grad {
                    t.detach(q_soft)?
                } else {
                    q_soft
                }
            }
            QSource::Frozen { txt, img } => {
                let vals = match dir {
                    Direction::Txt => txt,
                    Direction::Img => img,
                }
                .ok_or_else(|| Error::ShapeMismatch {
                    op: "build_distill_sets",
                    detail: "plan includes a direction the frozen source lacks".into(),
                })?;
                t.leaf(n, width, vals.to_vec(), false)?
            }
        };
        Ok(DirectionSet { p, q: q_node })
    };

    let mut q = q;
    let txt = match &plan.txt {
        Some(sel) => Some(build(t, &mut q, Direction::Txt, sel)?),
        None => None,
    };
    let img = match &plan.img {
        Some(sel) => Some(build(t, &mut q, Direction::Img, sel)?),
        None => None,
    };
    Ok(DistillSets { txt, img })
}

/// Soft cross-entropy per direction, summed over anchors; an absent
/// direction contributes an exact zero.
pub fn distill_loss<F: Real>(t: &mut Tape<F>, sets: &DistillSets) -> Result<(NodeId, NodeId)> {
    let mut one = |dir: Option<DirectionSet>| -> Result<NodeId> {
        match dir {
            Some(d) => {
                let ce = t.ce_soft(d.p, d.q)?;
                t.sum(ce)
            }
            None => Ok(t.scalar(F::zero())),
        }
    };
    let l_txt = one(sets.txt)?;
    let l_img = one(sets.img)?;
    Ok((l_txt, l_img))
}

/// Scalar loss nodes for one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub itc: NodeId,
    pub itm: NodeId,
    pub mlm: NodeId,
    pub distill_txt: NodeId,
    pub distill_img: NodeId,
    pub lambda: f64,
    pub total: NodeId,
}

/// Component values extracted for reporting.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub distill_txt: f64,
    pub distill_img: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn values<F: Real>(&self, t: &Tape<F>) -> LossValues {
        let v = |id: NodeId| t.value(id)[0].to_f64();
        LossValues {
            itc: v(self.itc),
            itm: v(self.itm),
            mlm: v(self.mlm),
            distill_txt: v(self.distill_txt),
            distill_img: v(self.distill_img),
            lambda: self.lambda,
            total: v(self.total),
        }
    }
}

/// total = itc + itm + mlm + lambda * (distill_txt + distill_img), with every
/// component checked finite. Disabled components enter as zero scalars.
pub fn total_loss<F: Real>(
    t: &mut Tape<F>,
    itc: NodeId,
    itm: NodeId,
    mlm: NodeId,
    distill_txt: NodeId,
    distill_img: NodeId,
    lambda: f64,
) -> Result<LossNodes> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::InvalidTrainConfig {
            field: "lambda".into(),
            msg: format!("distillation weight must lie in [0, 1], got {lambda}"),
        });
    }
    for (id, name) in [
        (itc, "itc"),
        (itm, "itm"),
        (mlm, "mlm"),
        (distill_txt, "distill_txt"),
        (distill_img, "distill_img"),
    ] {
        let (r, c) = t.shape(id);
        if (r, c) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "total_loss",
                detail: format!("{name} must be scalar, got {r}x{c}"),
            });
        }
        if !t.value(id)[0].is_finite() {
            return Err(Error::NonFiniteLoss { what: name.into() });
        }
    }
    let s1 = t.add(itc, itm)?;
    let s2 = t.add(s1, mlm)?;
    let d = t.add(distill_txt, distill_img)?;
    let ds = t.scale(d, real(lambda))?;
    let total = t.add(s2, ds)?;
    if !t.value(total)[0].is_finite() {
        return Err(Error::NonFiniteLoss { what: "total".into() });
    }
    Ok(LossNodes { itc, itm, mlm, distill_txt, distill_img, lambda, total })
}
