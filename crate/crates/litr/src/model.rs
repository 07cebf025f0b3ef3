//! Dual and cross encoders at desk scale.
//!
//! The dual side is two independent post-LN transformer towers (image and
//! text) with CLS pooling and linear projections onto a shared unit sphere.
//! The cross side reuses the towers' output sequences: the text sequence is
//! the query stream, the image sequence enters every cross-attention layer
//! as key and value, and a two-class matching head plus a masked-token head
//! read the final text states.
//!
//! Parameters live in a flat registry; registration order defines the
//! optimizer slot order and the checkpoint tensor order.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{real, NodeId, Real, Tape, Tensor};

/// Initial softmax temperature for the contrastive objective.
pub const TAU_INIT: f64 = 0.07;
/// Clamp range applied to the temperature after every optimizer step.
pub const TAU_MIN: f64 = 0.005;
pub const TAU_MAX: f64 = 0.5;
/// Truncated-normal init scale; draws beyond two sigma are redrawn.
pub const INIT_SIGMA: f64 = 0.02;

/// RNG stream ids; each purpose gets its own ChaCha stream so adding a
/// consumer never shifts another consumer's draws.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_PROTO: u64 = 2;
pub const STREAM_ITEMS: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_STEP: u64 = 5;

/// Seeded RNG on a purpose-keyed stream.
pub fn keyed_rng(seed: u64, stream: u64, substream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | (substream & 0xffff_ffff));
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Img,
    Txt,
}

/// Static architecture description. `vocab_*` counts content tokens only;
/// the image table appends CLS, the text table appends CLS and MASK.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub depth_img: usize,
    pub depth_txt: usize,
    pub depth_cross: usize,
    pub embed_dim: usize,
    pub ffn_mult: usize,
    pub vocab_img: usize,
    pub vocab_txt: usize,
    pub len_img: usize,
    pub len_txt: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            heads: 4,
            depth_img: 2,
            depth_txt: 2,
            depth_cross: 2,
            embed_dim: 32,
            ffn_mult: 2,
            vocab_img: 64,
            vocab_txt: 64,
            len_img: 17,
            len_txt: 9,
        }
    }
}

impl ModelConfig {
    pub fn img_cls(&self) -> usize {
        self.vocab_img
    }
    pub fn txt_cls(&self) -> usize {
        self.vocab_txt
    }
    pub fn txt_mask(&self) -> usize {
        self.vocab_txt + 1
    }
    pub fn img_table_rows(&self) -> usize {
        self.vocab_img + 1
    }
    pub fn txt_table_rows(&self) -> usize {
        self.vocab_txt + 2
    }
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field, msg: String| Err(Error::InvalidModelConfig { field, msg });
        if self.width == 0 {
            return field("width", "must be positive".into());
        }
        if self.heads == 0 {
            return field("heads", "must be positive".into());
        }
        if self.width % self.heads != 0 {
            return field("heads", format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.embed_dim == 0 {
            return field("embed_dim", "must be positive".into());
        }
        if self.ffn_mult == 0 {
            return field("ffn_mult", "must be positive".into());
        }
        if self.vocab_img == 0 || self.vocab_txt == 0 {
            return field("vocab", "both vocabularies must be positive".into());
        }
        // Every sequence is CLS plus at least one content position.
        if self.len_img < 2 {
            return field("len_img", "need CLS plus at least one content token".into());
        }
        if self.len_txt < 2 {
            return field("len_txt", "need CLS plus at least one content token".into());
        }
        Ok(())
    }

    /// Analytic trainable-parameter count; must equal the registry total.
    pub fn param_count(&self) -> usize {
        let w = self.width;
        let hid = self.ffn_hidden();
        let attn = 4 * w * w + 4 * w;
        let ln = 2 * w;
        let ffn = 2 * w * hid + hid + w;
        let enc_layer = attn + ln + ffn + ln;
        let cross_layer = attn + ln + attn + ln + ffn + ln;
        let mut total = 0;
        total += self.img_table_rows() * w + self.len_img * w;
        total += self.txt_table_rows() * w + self.len_txt * w;
        total += self.depth_img * enc_layer + self.depth_txt * enc_layer;
        total += 2 * (w * self.embed_dim + self.embed_dim);
        total += self.depth_cross * cross_layer;
        total += w * 2 + 2;
        total += w * self.vocab_txt + self.vocab_txt;
        total += 1;
        total
    }
}

/// One named parameter tensor. `decay` selects weight-decay treatment:
/// matrices decay, biases/norms/temperature do not.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

/// Tape leaves for one bound copy of the parameters, parallel to
/// `Model::params`. Bindings are cheap; a teacher and a student can bind the
/// same tape with different trainability.
#[derive(Clone, Debug)]
pub struct Binding {
    pub ids: Vec<NodeId>,
}

impl Binding {
    pub fn get<F: Real>(&self, model: &Model<F>, name: &str) -> Result<NodeId> {
        model
            .index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::ShapeMismatch { op: "binding", detail: format!("no parameter {name}") })
    }
}

struct AttnIds {
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
}

/// Output of a batched cross-encoder pass.
pub struct CrossOutput {
    /// Two-class matching logits, one row per pair; class 0 is "matched".
    pub itm_logits: NodeId,
    /// Final text stream, (pairs * len_txt) x width, for the masked-token head.
    pub txt_final: NodeId,
}

enum Init {
    TruncNormal,
    Zeros,
    Ones,
    Const(f64),
}

/// Builds the parameter registry during `Model::new`; draws follow
/// registration order exactly.
struct Registrar<F: Real> {
    model: Model<F>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<F: Real> Registrar<F> {
    fn trunc(&mut self) -> f64 {
        loop {
            let v = self.normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * INIT_SIGMA {
                return v;
            }
        }
    }

    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) {
        let data: Vec<F> = match init {
            Init::TruncNormal => (0..rows * cols).map(|_| real(self.trunc())).collect(),
            Init::Zeros => vec![F::zero(); rows * cols],
            Init::Ones => vec![F::one(); rows * cols],
            Init::Const(v) => vec![real(v); rows * cols],
        };
        let tensor = Tensor { shape: vec![rows, cols], data };
        self.model.index.insert(name.clone(), self.model.params.len());
        self.model.params.push(Param { name, tensor, decay });
    }

    fn attn(&mut self, prefix: &str, w: usize) {
        for part in ["q", "k", "v", "o"] {
            self.push(format!("{prefix}.w{part}"), w, w, Init::TruncNormal, true);
            self.push(format!("{prefix}.b{part}"), 1, w, Init::Zeros, false);
        }
    }

    fn ln(&mut self, prefix: &str, w: usize) {
        self.push(format!("{prefix}.gamma"), 1, w, Init::Ones, false);
        self.push(format!("{prefix}.beta"), 1, w, Init::Zeros, false);
    }

    fn ffn(&mut self, prefix: &str, w: usize, hid: usize) {
        self.push(format!("{prefix}.w1"), w, hid, Init::TruncNormal, true);
        self.push(format!("{prefix}.b1"), 1, hid, Init::Zeros, false);
        self.push(format!("{prefix}.w2"), hid, w, Init::TruncNormal, true);
        self.push(format!("{prefix}.b2"), 1, w, Init::Zeros, false);
    }
}

impl<F: Real> Model<F> {
    /// Fresh model with truncated-normal weights drawn on the init stream of
    /// `seed`. Draw order follows registration order, so parameter values
    /// are reproducible across runs and scalar types.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = Model { cfg: cfg.clone(), params: Vec::new(), index: HashMap::new() };
        let mut reg = Registrar {
            model,
            rng: keyed_rng(seed, STREAM_INIT, 0),
            normal: Normal::new(0.0f64, INIT_SIGMA).expect("valid sigma"),
        };
        let w = cfg.width;
        let hid = cfg.ffn_hidden();

        reg.push("img_embed.table".into(), cfg.img_table_rows(), w, Init::TruncNormal, true);
        reg.push("img_embed.pos".into(), cfg.len_img, w, Init::TruncNormal, true);
        reg.push("txt_embed.table".into(), cfg.txt_table_rows(), w, Init::TruncNormal, true);
        reg.push("txt_embed.pos".into(), cfg.len_txt, w, Init::TruncNormal, true);

        for (tower, depth) in [("img_enc", cfg.depth_img), ("txt_enc", cfg.depth_txt)] {
            for layer in 0..depth {
                let p = format!("{tower}.{layer}");
                reg.attn(&format!("{p}.attn"), w);
                reg.ln(&format!("{p}.ln1"), w);
                reg.ffn(&format!("{p}.ffn"), w, hid);
                reg.ln(&format!("{p}.ln2"), w);
            }
        }

        for proj in ["proj_img", "proj_txt"] {
            reg.push(format!("{proj}.w"), w, cfg.embed_dim, Init::TruncNormal, true);
            reg.push(format!("{proj}.b"), 1, cfg.embed_dim, Init::Zeros, false);
        }

        for layer in 0..cfg.depth_cross {
            let p = format!("cross.{layer}");
            reg.attn(&format!("{p}.self_attn"), w);
            reg.ln(&format!("{p}.ln1"), w);
            reg.attn(&format!("{p}.cross_attn"), w);
            reg.ln(&format!("{p}.ln2"), w);
            reg.ffn(&format!("{p}.ffn"), w, hid);
            reg.ln(&format!("{p}.ln3"), w);
        }

        reg.push("itm.w".into(), w, 2, Init::TruncNormal, true);
        reg.push("itm.b".into(), 1, 2, Init::Zeros, false);
        reg.push("mlm.w".into(), w, cfg.vocab_txt, Init::TruncNormal, true);
        reg.push("mlm.b".into(), 1, cfg.vocab_txt, Init::Zeros, false);
        reg.push("tau".into(), 1, 1, Init::Const(TAU_INIT), false);

        let model = reg.model;
        debug_assert_eq!(model.actual_param_count(), cfg.param_count());
        Ok(model)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        let i = self.param_index(name)?;
        Some(&mut self.params[i])
    }

    pub fn actual_param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.data.len()).sum()
    }

    pub fn tau(&self) -> F {
        self.param("tau").expect("tau registered").tensor.data[0]
    }

    /// Creates one tape leaf per parameter, in registry order.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(tape.leaf_tensor(&p.tensor, trainable)?);
        }
        Ok(Binding { ids })
    }

    fn attn_ids(&self, b: &Binding, prefix: &str) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: b.get(self, &format!("{prefix}.wq"))?,
            bq: b.get(self, &format!("{prefix}.bq"))?,
            wk: b.get(self, &format!("{prefix}.wk"))?,
            bk: b.get(self, &format!("{prefix}.bk"))?,
            wv: b.get(self, &format!("{prefix}.wv"))?,
            bv: b.get(self, &format!("{prefix}.bv"))?,
            wo: b.get(self, &format!("{prefix}.wo"))?,
            bo: b.get(self, &format!("{prefix}.bo"))?,
        })
    }

    /// Multi-head attention. The query stream holds `blocks` consecutive
    /// blocks of `lq` rows; block p attends over rows
    /// `kv_blocks[p]*lkv..+lkv` of `kv_src`. Output aligns with the query
    /// stream, ready for the residual add.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        t: &mut Tape<F>,
        x: NodeId,
        kv_src: NodeId,
        kv_blocks: &[usize],
        lq: usize,
        lkv: usize,
        ids: &AttnIds,
    ) -> Result<NodeId> {
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let inv_sqrt = real::<F>(1.0 / (dh as f64).sqrt());

        let q_all = self.linear(t, x, ids.wq, ids.bq)?;
        let k_all = self.linear(t, kv_src, ids.wk, ids.bk)?;
        let v_all = self.linear(t, kv_src, ids.wv, ids.bv)?;

        let mut ctx_parts = Vec::with_capacity(kv_blocks.len());
        for (p, &kb) in kv_blocks.iter().enumerate() {
            let q_rows = t.slice_rows(q_all, p * lq, lq)?;
            let k_rows = t.slice_rows(k_all, kb * lkv, lkv)?;
            let v_rows = t.slice_rows(v_all, kb * lkv, lkv)?;
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = t.slice_cols(q_rows, h * dh, dh)?;
                let kh = t.slice_cols(k_rows, h * dh, dh)?;
                let vh = t.slice_cols(v_rows, h * dh, dh)?;
                let scores = t.matmul_nt(qh, kh)?;
                let scores = t.scale(scores, inv_sqrt)?;
                let attn = t.softmax_rows(scores, None)?;
                per_head.push(t.matmul(attn, vh)?);
            }
            ctx_parts.push(t.concat_cols(&per_head)?);
        }
        let ctx = t.concat_rows(&ctx_parts)?;
        self.linear(t, ctx, ids.wo, ids.bo)
    }

    fn linear(&self, t: &mut Tape<F>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = t.matmul(x, w)?;
        t.add_bias(y, b)
    }

    fn ln(&self, t: &mut Tape<F>, b: &Binding, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = b.get(self, &format!("{prefix}.gamma"))?;
        let beta = b.get(self, &format!("{prefix}.beta"))?;
        t.layer_norm_rows(x, gamma, beta)
    }

    fn ffn(&self, t: &mut Tape<F>, b: &Binding, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w1 = b.get(self, &format!("{prefix}.w1"))?;
        let b1 = b.get(self, &format!("{prefix}.b1"))?;
        let w2 = b.get(self, &format!("{prefix}.w2"))?;
        let b2 = b.get(self, &format!("{prefix}.b2"))?;
        let h = self.linear(t, x, w1, b1)?;
        let h = t.gelu(h)?;
        self.linear(t, h, w2, b2)
    }

    /// Post-LN encoder block: x = LN(x + attn(x)); x = LN(x + ffn(x)).
    fn encoder_layer(
        &self,
        t: &mut Tape<F>,
        b: &Binding,
        x: NodeId,
        blocks: usize,
        l: usize,
        prefix: &str,
    ) -> Result<NodeId> {
        let ids = self.attn_ids(b, &format!("{prefix}.attn"))?;
        let self_blocks: Vec<usize> = (0..blocks).collect();
        let a = self.attention(t, x, x, &self_blocks, l, l, &ids)?;
        let x1 = t.add(x, a)?;
        let x1 = self.ln(t, b, x1, &format!("{prefix}.ln1"))?;
        let f = self.ffn(t, b, x1, &format!("{prefix}.ffn"))?;
        let x2 = t.add(x1, f)?;
        self.ln(t, b, x2, &format!("{prefix}.ln2"))
    }

    fn validate_batch(&self, seqs: &[Vec<usize>], modality: Modality) -> Result<()> {
        let (want_len, cls, vocab, allow_mask) = match modality {
            Modality::Img => (self.cfg.len_img, self.cfg.img_cls(), self.cfg.vocab_img, false),
            Modality::Txt => (self.cfg.len_txt, self.cfg.txt_cls(), self.cfg.vocab_txt, true),
        };
        if seqs.is_empty() {
            return Err(Error::ShapeMismatch { op: "encode", detail: "empty batch".into() });
        }
        for s in seqs {
            if s.len() != want_len {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    detail: format!("sequence length {} given, model wants {}", s.len(), want_len),
                });
            }
            if s[0] != cls {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    detail: format!("sequence must start with CLS id {}, got {}", cls, s[0]),
                });
            }
            for &tok in &s[1..] {
                let ok = tok < vocab || (allow_mask && tok == self.cfg.txt_mask());
                if !ok {
                    return Err(Error::TokenOutOfRange { token: tok, vocab });
                }
            }
        }
        Ok(())
    }

    fn encode_tower(
        &self,
        t: &mut Tape<F>,
        b: &Binding,
        seqs: &[Vec<usize>],
        modality: Modality,
    ) -> Result<NodeId> {
        self.validate_batch(seqs, modality)?;
        let (table, pos, tower, depth, l) = match modality {
            Modality::Img => ("img_embed.table", "img_embed.pos", "img_enc", self.cfg.depth_img, self.cfg.len_img),
            Modality::Txt => ("txt_embed.table", "txt_embed.pos", "txt_enc", self.cfg.depth_txt, self.cfg.len_txt),
        };
        let n = seqs.len();
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let table = b.get(self, table)?;
        let pos = b.get(self, pos)?;
        let tok = t.embed(table, &flat)?;
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
        let pos_rows = t.embed(pos, &pos_ids)?;
        let mut x = t.add(tok, pos_rows)?;
        for layer in 0..depth {
            x = self.encoder_layer(t, b, x, n, l, &format!("{tower}.{layer}"))?;
        }
        Ok(x)
    }

    /// Image tower over a batch of CLS-prefixed token sequences; output is
    /// (n * len_img) x width, one block of len_img rows per item.
    pub fn encode_image(&self, t: &mut Tape<F>, b: &Binding, seqs: &[Vec<usize>]) -> Result<NodeId> {
        self.encode_tower(t, b, seqs, Modality::Img)
    }

    /// Text tower; layout as `encode_image`. Content positions may hold the
    /// MASK token.
    pub fn encode_text(&self, t: &mut Tape<F>, b: &Binding, seqs: &[Vec<usize>]) -> Result<NodeId> {
        self.encode_tower(t, b, seqs, Modality::Txt)
    }

    /// CLS rows -> linear projection -> unit sphere; one row per block.
    pub fn pool_project(
        &self,
        t: &mut Tape<F>,
        b: &Binding,
        seq: NodeId,
        n: usize,
        modality: Modality,
    ) -> Result<NodeId> {
        let (rows, _) = t.shape(seq);
        if n == 0 || rows % n != 0 {
            return Err(Error::ShapeMismatch {
                op: "pool_project",
                detail: format!("{} rows do not split into {} blocks", rows, n),
            });
        }
        let l = rows / n;
        let cls_rows: Vec<usize> = (0..n).map(|i| i * l).collect();
        let pooled = t.gather_rows(seq, &cls_rows)?;
        let proj = match modality {
            Modality::Img => "proj_img",
            Modality::Txt => "proj_txt",
        };
        let w = b.get(self, &format!("{proj}.w"))?;
        let bias = b.get(self, &format!("{proj}.b"))?;
        let projected = self.linear(t, pooled, w, bias)?;
        t.l2_normalize_rows(projected)
    }

    /// Cosine similarity matrix between two batches of pooled embeddings:
    /// entry (i, j) is img_i . txt_j.
    pub fn similarity(&self, t: &mut Tape<F>, img_pool: NodeId, txt_pool: NodeId) -> Result<NodeId> {
        t.matmul_nt(img_pool, txt_pool)
    }

    /// Batched cross encoder. `img_seq`/`txt_seq` are tower outputs holding
    /// `n_img`/`n_txt` blocks; each pair (i, j) runs the text block j as the
    /// query stream with image block i as cross-attention key/value. Image
    /// key/value projections are computed once per layer over the whole
    /// image matrix and sliced per pair.
    pub fn cross_encode(
        &self,
        t: &mut Tape<F>,
        b: &Binding,
        img_seq: NodeId,
        n_img: usize,
        txt_seq: NodeId,
        n_txt: usize,
        pairs: &[(usize, usize)],
    ) -> Result<CrossOutput> {
        let li = self.cfg.len_img;
        let lt = self.cfg.len_txt;
        let (ir, _) = t.shape(img_seq);
        let (tr, _) = t.shape(txt_seq);
        if ir != n_img * li {
            return Err(Error::ShapeMismatch {
                op: "cross_encode",
                detail: format!("image matrix has {} rows, want {}x{}", ir, n_img, li),
            });
        }
        if tr != n_txt * lt {
            return Err(Error::ShapeMismatch {
                op: "cross_encode",
                detail: format!("text matrix has {} rows, want {}x{}", tr, n_txt, lt),
            });
        }
        if pairs.is_empty() {
            return Err(Error::ShapeMismatch { op: "cross_encode", detail: "no pairs".into() });
        }
        for &(i, j) in pairs {
            if i >= n_img || j >= n_txt {
                return Err(Error::ShapeMismatch {
                    op: "cross_encode",
                    detail: format!("pair ({i}, {j}) out of {n_img}x{n_txt} batch"),
                });
            }
        }

        // Assemble the query stream: text block j_p at stream position p.
        let p_count = pairs.len();
        let mut flat = Vec::with_capacity(p_count * lt);
        for &(_, j) in pairs {
            flat.extend(j * lt..(j + 1) * lt);
        }
        let mut x = t.gather_rows(txt_seq, &flat)?;

        let img_blocks: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let self_blocks: Vec<usize> = (0..p_count).collect();
        for layer in 0..self.cfg.depth_cross {
            let p = format!("cross.{layer}");
            let sa = self.attn_ids(b, &format!("{p}.self_attn"))?;
            let a = self.attention(t, x, x, &self_blocks, lt, lt, &sa)?;
            let x1 = t.add(x, a)?;
            let x1 = self.ln(t, b, x1, &format!("{p}.ln1"))?;

            let ca = self.attn_ids(b, &format!("{p}.cross_attn"))?;
            let c = self.attention(t, x1, img_seq, &img_blocks, lt, li, &ca)?;
            let x2 = t.add(x1, c)?;
            let x2 = self.ln(t, b, x2, &format!("{p}.ln2"))?;

            let f = self.ffn(t, b, x2, &format!("{p}.ffn"))?;
            let x3 = t.add(x2, f)?;
            x = self.ln(t, b, x3, &format!("{p}.ln3"))?;
        }

        let cls_rows: Vec<usize> = (0..p_count).map(|p| p * lt).collect();
        let cls = t.gather_rows(x, &cls_rows)?;
        let w = b.get(self, "itm.w")?;
        let bias = b.get(self, "itm.b")?;
        let itm_logits = self.linear(t, cls, w, bias)?;
        Ok(CrossOutput { itm_logits, txt_final: x })
    }

    /// Masked-token logits over the content vocabulary at the given flat row
    /// positions of a cross output's final text stream.
    pub fn mlm_logits(&self, t: &mut Tape<F>, b: &Binding, txt_final: NodeId, rows: &[usize]) -> Result<NodeId> {
        let picked = t.gather_rows(txt_final, rows)?;
        let w = b.get(self, "mlm.w")?;
        let bias = b.get(self, "mlm.b")?;
        self.linear(t, picked, w, bias)
    }
}

/// Prepends the CLS id to each content-token sequence.
pub fn with_cls(content: &[Vec<usize>], cls: usize) -> Vec<Vec<usize>> {
    content
        .iter()
        .map(|toks| {
            let mut s = Vec::with_capacity(toks.len() + 1);
            s.push(cls);
            s.extend_from_slice(toks);
            s
        })
        .collect()
}
