//! Retrieval evaluation: recall from dual similarity, cross-encoder
//! reranking of dual shortlists, and a query-cost micro-benchmark.
//!
//! Evaluation is forward-only and side-effect free. Towers and cross passes
//! run in bounded chunks so a full split never builds one giant graph;
//! chunking cannot change values because items and pairs are independent.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::PairedCorpus;
use crate::error::{Error, Result};
use crate::model::{with_cls, Modality, Model};
use crate::tape::{Real, Tape};

/// Items per tower pass when embedding a corpus.
const EMBED_CHUNK: usize = 64;
/// Pairs per cross-encoder pass when scoring a pair list.
const CROSS_CHUNK: usize = 128;

/// Retrieval direction: TR ranks text candidates for an image query, IR
/// ranks image candidates for a text query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalDirection {
    Tr,
    Ir,
}

/// The reporting convention: R@1, R@5, R@10.
pub const STANDARD_KS: [usize; 3] = [1, 5, 10];

/// Per-query ranks of the true match plus recall percentages at each k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: RetrievalDirection,
    /// 1-based rank of the true match, one entry per query.
    pub ranks: Vec<usize>,
    pub ks: Vec<usize>,
    /// Percent of queries whose true match ranks within each k.
    pub recalls: Vec<f64>,
}

impl RetrievalResult {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }
}

/// Ranks every query's true match in a queries x candidates score matrix.
/// Rank = 1 + number of other candidates scoring >= the true match, so tied
/// candidates count as ranked ahead and a tie can only hurt recall.
pub fn recall_at_k(
    scores: &[f64],
    num_queries: usize,
    num_candidates: usize,
    ground_truth: &[usize],
    ks: &[usize],
    direction: RetrievalDirection,
) -> Result<RetrievalResult> {
    if scores.len() != num_queries * num_candidates || num_queries == 0 || num_candidates == 0 {
        return Err(Error::ShapeMismatch {
            op: "recall_at_k",
            detail: format!(
                "{} scores for {num_queries}x{num_candidates} matrix",
                scores.len()
            ),
        });
    }
    if ground_truth.len() != num_queries {
        return Err(Error::ShapeMismatch {
            op: "recall_at_k",
            detail: format!("{} ground-truth entries for {num_queries} queries", ground_truth.len()),
        });
    }
    if let Some(&bad) = ground_truth.iter().find(|&&g| g >= num_candidates) {
        return Err(Error::ShapeMismatch {
            op: "recall_at_k",
            detail: format!("ground-truth index {bad} out of {num_candidates} candidates"),
        });
    }
    if ks.is_empty() {
        return Err(Error::ShapeMismatch { op: "recall_at_k", detail: "no ks requested".into() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput { op: "recall_at_k" });
    }

    let mut ranks = Vec::with_capacity(num_queries);
    for (q, &gt) in ground_truth.iter().enumerate() {
        let row = &scores[q * num_candidates..(q + 1) * num_candidates];
        let s_true = row[gt];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(c, &s)| c != gt && s >= s_true)
            .count();
        ranks.push(1 + ahead);
    }
    let recalls = ks
        .iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / num_queries as f64)
        .collect();
    Ok(RetrievalResult { direction, ranks: ranks.clone(), ks: ks.to_vec(), recalls })
}

/// Reranks each query's dual top-k shortlist with an external pair scorer.
///
/// The shortlist (dual score descending, index ascending on ties) is
/// reordered by the scorer's values; candidates outside it keep their dual
/// ordering, affinely shifted to sit strictly below the reranked block. The
/// scorer receives all (query, candidate) pairs in one call, query-major.
/// k is clamped to the candidate count; k = 1 leaves the dual ranking
/// intact and k = candidates reproduces the pure scorer ranking.
pub fn rerank_topk(
    dual: &[f64],
    num_queries: usize,
    num_candidates: usize,
    k: usize,
    score_pairs: &mut dyn FnMut(&[(usize, usize)]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if dual.len() != num_queries * num_candidates || num_queries == 0 || num_candidates == 0 {
        return Err(Error::ShapeMismatch {
            op: "rerank_topk",
            detail: format!("{} scores for {num_queries}x{num_candidates} matrix", dual.len()),
        });
    }
    if k == 0 {
        return Err(Error::InvalidTrainConfig {
            field: "rerank_k".into(),
            msg: "rerank depth must be at least 1".into(),
        });
    }
    if dual.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput { op: "rerank_topk" });
    }
    let k = k.min(num_candidates);

    let mut shortlists = Vec::with_capacity(num_queries);
    let mut pairs = Vec::with_capacity(num_queries * k);
    for q in 0..num_queries {
        let row = &dual[q * num_candidates..(q + 1) * num_candidates];
        let mut order: Vec<usize> = (0..num_candidates).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let shortlist = order[..k].to_vec();
        pairs.extend(shortlist.iter().map(|&c| (q, c)));
        shortlists.push(shortlist);
    }
    let fresh = score_pairs(&pairs)?;
    if fresh.len() != pairs.len() {
        return Err(Error::ShapeMismatch {
            op: "rerank_topk",
            detail: format!("scorer returned {} values for {} pairs", fresh.len(), pairs.len()),
        });
    }
    if fresh.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput { op: "rerank_topk" });
    }

    let mut out = vec![0.0; num_queries * num_candidates];
    for (q, shortlist) in shortlists.iter().enumerate() {
        let row = &dual[q * num_candidates..(q + 1) * num_candidates];
        let new_row = &mut out[q * num_candidates..(q + 1) * num_candidates];
        let block = &fresh[q * k..(q + 1) * k];
        for (slot, &c) in shortlist.iter().enumerate() {
            new_row[c] = block[slot];
        }
        if k < num_candidates {
            // Everything outside the shortlist keeps its dual order but is
            // shifted to lie strictly below the block's minimum; an affine
            // shift preserves ties among the remainder.
            let block_min = block.iter().cloned().fold(f64::INFINITY, f64::min);
            let out_max = (0..num_candidates)
                .filter(|c| !shortlist.contains(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let shift = block_min - 1.0 - out_max;
            for c in 0..num_candidates {
                if !shortlist.contains(&c) {
                    new_row[c] = row[c] + shift;
                }
            }
        }
    }
    Ok(out)
}

/// CLS-pooled, projected, unit-norm embeddings for every item: image rows
/// then text rows, each num_items x embed_dim, computed in bounded chunks.
pub fn embed_corpus<F: Real>(
    model: &Model<F>,
    corpus: &PairedCorpus,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::ShapeMismatch { op: "embed_corpus", detail: "empty corpus".into() });
    }
    let dim = model.cfg.embed_dim;
    let mut img = Vec::with_capacity(corpus.len() * dim);
    let mut txt = Vec::with_capacity(corpus.len() * dim);
    for chunk in corpus.items.chunks(EMBED_CHUNK) {
        let img_tokens: Vec<Vec<usize>> = chunk.iter().map(|p| p.img_tokens.clone()).collect();
        let txt_tokens: Vec<Vec<usize>> = chunk.iter().map(|p| p.txt_tokens.clone()).collect();
        let img_seqs = with_cls(&img_tokens, model.cfg.img_cls());
        let txt_seqs = with_cls(&txt_tokens, model.cfg.txt_cls());
        let mut t = Tape::new();
        let b = model.bind(&mut t, false)?;
        let img_seq = model.encode_image(&mut t, &b, &img_seqs)?;
        let txt_seq = model.encode_text(&mut t, &b, &txt_seqs)?;
        let ip = model.pool_project(&mut t, &b, img_seq, chunk.len(), Modality::Img)?;
        let tp = model.pool_project(&mut t, &b, txt_seq, chunk.len(), Modality::Txt)?;
        img.extend(t.value(ip).iter().map(|&v| v.to_f64()));
        txt.extend(t.value(tp).iter().map(|&v| v.to_f64()));
    }
    Ok((img, txt))
}

/// Dense cosine matrix from unit-norm embeddings: entry (i, j) = img_i .
/// txt_j, accumulated in the same index order the training graph uses.
pub fn similarity_matrix(img: &[f64], txt: &[f64], n: usize, dim: usize) -> Result<Vec<f64>> {
    if img.len() != n * dim || txt.len() != n * dim {
        return Err(Error::ShapeMismatch {
            op: "similarity_matrix",
            detail: format!("{} and {} values for {n}x{dim}", img.len(), txt.len()),
        });
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for d in 0..dim {
                s += img[i * dim + d] * txt[j * dim + d];
            }
            out[i * n + j] = s;
        }
    }
    Ok(out)
}

/// Matched-class cross-encoder logits for explicit (image, text) item index
/// pairs, in request order, computed in bounded chunks.
pub fn cross_scores<F: Real>(
    model: &Model<F>,
    corpus: &PairedCorpus,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let n = corpus.len();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::ShapeMismatch {
            op: "cross_scores",
            detail: format!("pair ({i}, {j}) out of {n} items"),
        });
    }
    let img_tokens: Vec<Vec<usize>> = corpus.items.iter().map(|p| p.img_tokens.clone()).collect();
    let txt_tokens: Vec<Vec<usize>> = corpus.items.iter().map(|p| p.txt_tokens.clone()).collect();
    let img_seqs = with_cls(&img_tokens, model.cfg.img_cls());
    let txt_seqs = with_cls(&txt_tokens, model.cfg.txt_cls());

    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CROSS_CHUNK) {
        // Re-encode only the items this chunk touches; per-item
        // independence keeps the values identical to a whole-corpus pass.
        let mut used: Vec<usize> = chunk.iter().flat_map(|&(i, j)| [i, j]).collect();
        used.sort_unstable();
        used.dedup();
        let local: std::collections::HashMap<usize, usize> =
            used.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        let sub_img: Vec<Vec<usize>> = used.iter().map(|&g| img_seqs[g].clone()).collect();
        let sub_txt: Vec<Vec<usize>> = used.iter().map(|&g| txt_seqs[g].clone()).collect();
        let local_pairs: Vec<(usize, usize)> =
            chunk.iter().map(|&(i, j)| (local[&i], local[&j])).collect();

        let mut t = Tape::new();
        let b = model.bind(&mut t, false)?;
        let img_seq = model.encode_image(&mut t, &b, &sub_img)?;
        let txt_seq = model.encode_text(&mut t, &b, &sub_txt)?;
        let res =
            model.cross_encode(&mut t, &b, img_seq, used.len(), txt_seq, used.len(), &local_pairs)?;
        let vals = t.value(res.itm_logits);
        out.extend(local_pairs.iter().enumerate().map(|(r, _)| vals[r * 2].to_f64()));
    }
    Ok(out)
}

/// R@1/5/10 rounded to two decimals, the report convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    pub fn from_result(r: &RetrievalResult) -> Self {
        let pick = |k: usize| {
            let v = r.recall_at(k).unwrap_or(0.0);
            (v * 100.0).round() / 100.0
        };
        Recalls { r1: pick(1), r5: pick(5), r10: pick(10) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRecalls {
    pub tr: Recalls,
    pub ir: Recalls,
}

/// The metrics block a finished run reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub dual: DirectionRecalls,
    pub cross: DirectionRecalls,
    pub rerank_k: usize,
}

/// Full evaluation output: metrics plus per-query ranks for each arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: FinalMetrics,
    pub dual_tr: RetrievalResult,
    pub dual_ir: RetrievalResult,
    pub cross_tr: RetrievalResult,
    pub cross_ir: RetrievalResult,
    /// Cross-encoder pairs evaluated across both rerank directions.
    pub cross_pairs_scored: usize,
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Dual retrieval in both directions plus cross-encoder reranking of the
/// dual top-k. Ground truth is the paired item (index i matches index i).
pub fn evaluate<F: Real>(
    model: &Model<F>,
    corpus: &PairedCorpus,
    rerank_k: usize,
) -> Result<EvalReport> {
    let n = corpus.len();
    let (img, txt) = embed_corpus(model, corpus)?;
    let sim_tr = similarity_matrix(&img, &txt, n, model.cfg.embed_dim)?;
    let sim_ir = transpose(&sim_tr, n, n);
    let gt: Vec<usize> = (0..n).collect();

    let dual_tr = recall_at_k(&sim_tr, n, n, &gt, &STANDARD_KS, RetrievalDirection::Tr)?;
    let dual_ir = recall_at_k(&sim_ir, n, n, &gt, &STANDARD_KS, RetrievalDirection::Ir)?;

    let k = rerank_k.min(n);
    let mut scored = 0usize;
    let rr_tr = {
        let mut scorer = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
            scored += pairs.len();
            cross_scores(model, corpus, pairs)
        };
        rerank_topk(&sim_tr, n, n, k, &mut scorer)?
    };
    let rr_ir = {
        let mut scorer = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
            scored += pairs.len();
            // IR queries are texts, so the cross pair is (candidate image,
            // query text).
            let flipped: Vec<(usize, usize)> = pairs.iter().map(|&(q, c)| (c, q)).collect();
            cross_scores(model, corpus, &flipped)
        };
        rerank_topk(&sim_ir, n, n, k, &mut scorer)?
    };
    let cross_tr = recall_at_k(&rr_tr, n, n, &gt, &STANDARD_KS, RetrievalDirection::Tr)?;
    let cross_ir = recall_at_k(&rr_ir, n, n, &gt, &STANDARD_KS, RetrievalDirection::Ir)?;

    let metrics = FinalMetrics {
        dual: DirectionRecalls {
            tr: Recalls::from_result(&dual_tr),
            ir: Recalls::from_result(&dual_ir),
        },
        cross: DirectionRecalls {
            tr: Recalls::from_result(&cross_tr),
            ir: Recalls::from_result(&cross_ir),
        },
        rerank_k: k,
    };
    Ok(EvalReport { metrics, dual_tr, dual_ir, cross_tr, cross_ir, cross_pairs_scored: scored })
}

/// Wall-clock and pair-count comparison of the three query modes: dual
/// only, dual + top-k rerank, and exhaustive cross scoring. Queries are the
/// first `queries` items, candidates the first `candidates`. One warm-up
/// pass runs untimed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub queries: usize,
    pub candidates: usize,
    pub rerank_k: usize,
    pub embed_s: f64,
    pub dual_score_s: f64,
    pub rerank_s: f64,
    pub full_cross_s: f64,
    pub pairs_dual: usize,
    pub pairs_rerank: usize,
    pub pairs_full: usize,
}

pub fn timing_benchmark<F: Real>(
    model: &Model<F>,
    corpus: &PairedCorpus,
    queries: usize,
    candidates: usize,
    rerank_k: usize,
) -> Result<BenchReport> {
    let n = corpus.len();
    if queries == 0 || candidates == 0 || queries > n || candidates > n {
        return Err(Error::ShapeMismatch {
            op: "timing_benchmark",
            detail: format!("{queries} queries / {candidates} candidates from {n} items"),
        });
    }
    let k = rerank_k.max(1).min(candidates);
    let span = queries.max(candidates);
    let subset = PairedCorpus { split: corpus.split, items: corpus.items[..span].to_vec() };

    // Warm-up: touch both tower and cross paths once, untimed.
    let _ = embed_corpus(model, &PairedCorpus { split: corpus.split, items: corpus.items[..1].to_vec() })?;
    let _ = cross_scores(model, &subset, &[(0, 0)])?;

    let t0 = Instant::now();
    let (img, txt) = embed_corpus(model, &subset)?;
    let embed_s = t0.elapsed().as_secs_f64();

    let dim = model.cfg.embed_dim;
    let t1 = Instant::now();
    let full = similarity_matrix(&img, &txt, span, dim)?;
    let mut dual = vec![0.0; queries * candidates];
    for q in 0..queries {
        dual[q * candidates..(q + 1) * candidates]
            .copy_from_slice(&full[q * span..q * span + candidates]);
    }
    let dual_score_s = t1.elapsed().as_secs_f64();

    let mut rerank_pairs = 0usize;
    let t2 = Instant::now();
    let mut scorer = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        rerank_pairs += pairs.len();
        cross_scores(model, &subset, pairs)
    };
    let _ = rerank_topk(&dual, queries, candidates, k, &mut scorer)?;
    let rerank_s = t2.elapsed().as_secs_f64();

    let t3 = Instant::now();
    let all_pairs: Vec<(usize, usize)> =
        (0..queries).flat_map(|q| (0..candidates).map(move |c| (q, c))).collect();
    let _ = cross_scores(model, &subset, &all_pairs)?;
    let full_cross_s = t3.elapsed().as_secs_f64();

    debug_assert_eq!(rerank_pairs, queries * k);
    Ok(BenchReport {
        queries,
        candidates,
        rerank_k: k,
        embed_s,
        dual_score_s,
        rerank_s,
        full_cross_s,
        pairs_dual: 0,
        pairs_rerank: rerank_pairs,
        pairs_full: all_pairs.len(),
    })
}
