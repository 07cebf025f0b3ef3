//! Synthetic paired-modality corpus with known ground-truth alignment.
//!
//! Every class owns an image prototype and a text prototype (uniform random
//! token sequences). An item is its class prototype with each token
//! independently resampled from the full vocabulary with probability
//! `noise`; resampling can redraw the original token, so the observable
//! mismatch rate is noise * (V-1)/V. Same-class items are near-duplicates,
//! which is exactly what makes in-batch hard negatives informative here.
//!
//! Prototypes are drawn once per corpus seed and shared by all four splits,
//! so finetune/val/test items come from the same classes the pretrain split
//! taught.

use std::io::{BufRead, Write as IoWrite};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{keyed_rng, STREAM_ITEMS, STREAM_PROTO, STREAM_SHUFFLE};

/// Default corpus seed; independent of the training seed so reruns with a
/// new training seed keep the data fixed.
pub const DEFAULT_CORPUS_SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub pairs_per_class_pretrain: usize,
    pub pairs_per_class_train: usize,
    pub pairs_per_class_val: usize,
    pub pairs_per_class_test: usize,
    pub vocab_img: usize,
    pub vocab_txt: usize,
    /// Content tokens per image sequence (CLS excluded).
    pub content_len_img: usize,
    /// Content tokens per text sequence (CLS excluded).
    pub content_len_txt: usize,
    /// Per-token resample probability, in [0, 1).
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_classes: 32,
            pairs_per_class_pretrain: 64,
            pairs_per_class_train: 16,
            pairs_per_class_val: 8,
            pairs_per_class_test: 8,
            vocab_img: 64,
            vocab_txt: 64,
            content_len_img: 16,
            content_len_txt: 8,
            noise: 0.15,
            seed: DEFAULT_CORPUS_SEED,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field, msg: String| Err(Error::InvalidCorpusConfig { field, msg });
        if self.num_classes < 2 {
            return fail("num_classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail("noise", format!("must lie in [0, 1), got {}", self.noise));
        }
        if self.vocab_img < self.num_classes {
            return fail("vocab_img", format!("{} < {} classes", self.vocab_img, self.num_classes));
        }
        if self.vocab_txt < self.num_classes {
            return fail("vocab_txt", format!("{} < {} classes", self.vocab_txt, self.num_classes));
        }
        if self.content_len_img == 0 || self.content_len_txt == 0 {
            return fail("content_len", "sequences need at least one content token".into());
        }
        for (field, v) in [
            ("pairs_per_class_pretrain", self.pairs_per_class_pretrain),
            ("pairs_per_class_train", self.pairs_per_class_train),
            ("pairs_per_class_val", self.pairs_per_class_val),
            ("pairs_per_class_test", self.pairs_per_class_test),
        ] {
            if v == 0 {
                return fail(field, "must be positive".into());
            }
        }
        Ok(())
    }

    fn pairs_per_class(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pairs_per_class_pretrain,
            Split::Train => self.pairs_per_class_train,
            Split::Val => self.pairs_per_class_val,
            Split::Test => self.pairs_per_class_test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Pretrain => 0,
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    /// Pair ids are offset per split so they stay unique bundle-wide.
    fn id_base(self) -> u64 {
        self.index() * 1_000_000
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub pair_id: u64,
    pub class_id: usize,
    pub img_tokens: Vec<usize>,
    pub txt_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedCorpus {
    pub split: Split,
    pub items: Vec<PairItem>,
}

impl PairedCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// All four splits of one synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DeskBundle {
    pub pretrain: PairedCorpus,
    pub train: PairedCorpus,
    pub val: PairedCorpus,
    pub test: PairedCorpus,
}

impl DeskBundle {
    pub fn split(&self, split: Split) -> &PairedCorpus {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

struct Prototypes {
    img: Vec<Vec<usize>>,
    txt: Vec<Vec<usize>>,
}

fn prototypes(cfg: &CorpusConfig) -> Prototypes {
    let mut rng = keyed_rng(cfg.seed, STREAM_PROTO, 0);
    let mut img = Vec::with_capacity(cfg.num_classes);
    let mut txt = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        img.push((0..cfg.content_len_img).map(|_| rng.random_range(0..cfg.vocab_img)).collect());
        txt.push((0..cfg.content_len_txt).map(|_| rng.random_range(0..cfg.vocab_txt)).collect());
    }
    Prototypes { img, txt }
}

fn corrupt(proto: &[usize], vocab: usize, noise: f64, rng: &mut impl Rng) -> Vec<usize> {
    proto
        .iter()
        .map(|&tok| if rng.random::<f64>() < noise { rng.random_range(0..vocab) } else { tok })
        .collect()
}

/// One split of the corpus: class-major item order, exactly pairs-per-class
/// items per class, deterministic for (cfg.seed, split).
pub fn generate_corpus(cfg: &CorpusConfig, split: Split) -> Result<PairedCorpus> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let per_class = cfg.pairs_per_class(split);
    let mut rng = keyed_rng(cfg.seed, STREAM_ITEMS, split.index());
    let mut items = Vec::with_capacity(cfg.num_classes * per_class);
    for class_id in 0..cfg.num_classes {
        for _ in 0..per_class {
            let img_tokens = corrupt(&protos.img[class_id], cfg.vocab_img, cfg.noise, &mut rng);
            let txt_tokens = corrupt(&protos.txt[class_id], cfg.vocab_txt, cfg.noise, &mut rng);
            items.push(PairItem {
                pair_id: split.id_base() + items.len() as u64,
                class_id,
                img_tokens,
                txt_tokens,
            });
        }
    }
    Ok(PairedCorpus { split, items })
}

pub fn generate_bundle(cfg: &CorpusConfig) -> Result<DeskBundle> {
    Ok(DeskBundle {
        pretrain: generate_corpus(cfg, Split::Pretrain)?,
        train: generate_corpus(cfg, Split::Train)?,
        val: generate_corpus(cfg, Split::Val)?,
        test: generate_corpus(cfg, Split::Test)?,
    })
}

/// Epoch-wise shuffled batches of item indices; every batch holds `n`
/// distinct items, a final short batch is dropped. The shuffle is keyed by
/// (training seed, split, epoch).
pub fn make_batches(corpus: &PairedCorpus, n: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidTrainConfig { field: "batch_size".into(), msg: "must be positive".into() });
    }
    if n > corpus.len() {
        return Err(Error::BatchTooLarge { n, items: corpus.len() });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let substream = (corpus.split.index() << 40) | (epoch as u64 & 0xff_ffff_ffff);
    let mut rng = keyed_rng(seed, STREAM_SHUFFLE, substream);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(n).map(|c| c.to_vec()).collect())
}

/// Masks each content position independently with probability `rate`,
/// replacing it by `mask_id`. Returns (masked tokens, positions, originals);
/// zero masked positions is a legal outcome.
pub fn mask_tokens(
    tokens: &[usize],
    rate: f64,
    mask_id: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut masked = tokens.to_vec();
    let mut positions = Vec::new();
    let mut originals = Vec::new();
    for (i, slot) in masked.iter_mut().enumerate() {
        if rng.random::<f64>() < rate {
            positions.push(i);
            originals.push(*slot);
            *slot = mask_id;
        }
    }
    (masked, positions, originals)
}

// ── TSV export / import ─────────────────────────────────────────────────
// One record per line: pair_id <TAB> class_id <TAB> image tokens
// (space-separated) <TAB> text tokens. UTF-8, newline-terminated.

pub fn export_tsv(corpus: &PairedCorpus, w: &mut impl IoWrite) -> Result<()> {
    for item in &corpus.items {
        let img = item.img_tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let txt = item.txt_tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(w, "{}\t{}\t{}\t{}", item.pair_id, item.class_id, img, txt)?;
    }
    Ok(())
}

/// Parses a TSV split. Rejects malformed records with the 1-based line
/// number; all image rows must share one length, likewise text rows.
pub fn import_tsv(split: Split, r: &mut impl BufRead) -> Result<PairedCorpus> {
    let mut items: Vec<PairItem> = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let n = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::CorpusParse { line: n, msg: format!("expected 4 fields, got {}", fields.len()) });
        }
        let pair_id: u64 = fields[0]
            .parse()
            .map_err(|e| Error::CorpusParse { line: n, msg: format!("pair_id: {e}") })?;
        let class_id: usize = fields[1]
            .parse()
            .map_err(|e| Error::CorpusParse { line: n, msg: format!("class_id: {e}") })?;
        let parse_tokens = |field: &str, what: &str| -> Result<Vec<usize>> {
            if field.is_empty() {
                return Err(Error::CorpusParse { line: n, msg: format!("{what} tokens empty") });
            }
            field
                .split(' ')
                .map(|tok| {
                    tok.parse::<usize>()
                        .map_err(|e| Error::CorpusParse { line: n, msg: format!("{what} token {tok:?}: {e}") })
                })
                .collect()
        };
        let img_tokens = parse_tokens(fields[2], "image")?;
        let txt_tokens = parse_tokens(fields[3], "text")?;
        if let Some(first) = items.first() {
            if img_tokens.len() != first.img_tokens.len() || txt_tokens.len() != first.txt_tokens.len() {
                return Err(Error::CorpusParse {
                    line: n,
                    msg: format!(
                        "ragged lengths: ({}, {}) vs first record ({}, {})",
                        img_tokens.len(),
                        txt_tokens.len(),
                        first.img_tokens.len(),
                        first.txt_tokens.len()
                    ),
                });
            }
        }
        if !seen_ids.insert(pair_id) {
            return Err(Error::CorpusParse { line: n, msg: format!("duplicate pair_id {pair_id}") });
        }
        items.push(PairItem { pair_id, class_id, img_tokens, txt_tokens });
    }
    if items.is_empty() {
        return Err(Error::CorpusParse { line: 0, msg: "empty corpus".into() });
    }
    Ok(PairedCorpus { split, items })
}

/// Writes `corpus_<split>.tsv` files into `dir`.
pub fn save_bundle(bundle: &DeskBundle, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let path = dir.join(format!("corpus_{}.tsv", split.name()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        export_tsv(bundle.split(split), &mut f)?;
    }
    Ok(())
}

/// Reads the four `corpus_<split>.tsv` files from `dir`.
pub fn load_bundle(dir: &std::path::Path) -> Result<DeskBundle> {
    let read = |split: Split| -> Result<PairedCorpus> {
        let path = dir.join(format!("corpus_{}.tsv", split.name()));
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        import_tsv(split, &mut f)
    };
    Ok(DeskBundle {
        pretrain: read(Split::Pretrain)?,
        train: read(Split::Train)?,
        val: read(Split::Val)?,
        test: read(Split::Test)?,
    })
}
