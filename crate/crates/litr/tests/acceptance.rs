//! Release gate: one test per acceptance criterion. The `a0x` tests are
//! exact (finite differences, bit identities, closed forms, counting); the
//! `a1x` tests retrain small models on the default synthetic corpus and
//! check that the expected ablation orderings hold across seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use litr::checkpoint::{load_model, save_model};
use litr::config::DEFAULT_RERANK_K;
use litr::data::{generate_bundle, generate_corpus, CorpusConfig, PairedCorpus, Split};
use litr::eval::{cross_scores, evaluate, recall_at_k, Recalls, RetrievalDirection, STANDARD_KS};
use litr::model::{keyed_rng, Model, ModelConfig, STREAM_STEP};
use litr::negatives::{mine_hard, Direction, NegMethod};
use litr::objectives::{
    distill_loss, itc_loss, itm_loss, mlm_loss, plan_distill, DirectionSet, DistillSets,
    LossNodes, LossValues,
};
use litr::tape::Tape;
use litr::teacher::TeacherState;
use litr::trainer::{config_digest, run_step, train, Batch, StepMode, StepPlan, TrainConfig};

// ── Shared fixtures ─────────────────────────────────────────────────────

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

fn tiny_corpus_cfg() -> CorpusConfig {
    CorpusConfig {
        num_classes: 4,
        pairs_per_class_pretrain: 8,
        pairs_per_class_train: 6,
        pairs_per_class_val: 4,
        pairs_per_class_test: 4,
        vocab_img: 16,
        vocab_txt: 16,
        content_len_img: 4,
        content_len_txt: 3,
        noise: 0.2,
        seed: 3,
    }
}

fn tiny_batch(corpus: &PairedCorpus, n: usize) -> Batch {
    let idx: Vec<usize> = (0..n).collect();
    Batch::from_corpus(corpus, &idx).expect("batch")
}

/// Step config used by the graph-level checks: distillation on with the
/// given m, hard negatives in both directions, online teacher, stop-grad.
fn step_cfg(m: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.batch_size = 8;
    c.distillation.m = m;
    c
}

const LAMBDA: f64 = 0.5;
const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

const LOSS_NAMES: [&str; 6] = ["itc", "itm", "mlm", "distill_txt", "distill_img", "total"];

fn loss_node(nodes: &LossNodes, which: usize) -> litr::NodeId {
    match which {
        0 => nodes.itc,
        1 => nodes.itm,
        2 => nodes.mlm,
        3 => nodes.distill_txt,
        4 => nodes.distill_img,
        _ => nodes.total,
    }
}

fn loss_value(v: &LossValues, which: usize) -> f64 {
    match which {
        0 => v.itc,
        1 => v.itm,
        2 => v.mlm,
        3 => v.distill_txt,
        4 => v.distill_img,
        _ => v.total,
    }
}

/// Forward pass replaying a recorded plan under frozen teacher rows, so a
/// parameter perturbation never changes the teacher targets.
fn frozen_replay(
    model: &Model<f64>,
    cfg: &TrainConfig,
    batch: &Batch,
    plan: &StepPlan,
    qt: &[f64],
    qi: &[f64],
) -> litr::trainer::StepResult<f64> {
    run_step(
        model,
        cfg,
        Some(&TeacherState::online()),
        batch,
        LAMBDA,
        StepMode::Replay { plan, q_txt: Some(qt), q_img: Some(qi) },
    )
    .expect("replay step")
}

// ── Exact criteria ──────────────────────────────────────────────────────

#[test]
fn a01_every_loss_matches_central_finite_differences() {
    let corpus = generate_corpus(&tiny_corpus_cfg(), Split::Val).unwrap();
    let batch = tiny_batch(&corpus, 6);
    let cfg = step_cfg(2);

    for seed in 0..5u64 {
        let mut model = Model::<f64>::new(tiny_model_cfg(), 100 + seed).unwrap();

        // Record one fresh step whose plan includes masked positions, so
        // the masked-token loss is a live term and not a constant zero.
        let mut recorded = None;
        for substream in 0..10 {
            let mut rng = keyed_rng(seed, STREAM_STEP, substream);
            let res = run_step(
                &model,
                &cfg,
                Some(&TeacherState::online()),
                &batch,
                LAMBDA,
                StepMode::Fresh(&mut rng),
            )
            .unwrap();
            let masked = res
                .plan
                .masks
                .as_ref()
                .is_some_and(|ms| ms.iter().any(|m| !m.positions.is_empty()));
            if masked {
                recorded = Some((res.plan, res.q_txt.unwrap(), res.q_img.unwrap()));
                break;
            }
        }
        let (plan, qt, qi) = recorded.expect("a draw with masked positions");

        // Analytic gradients, one backward pass per loss head.
        let mut grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(6);
        for which in 0..6 {
            let mut res = frozen_replay(&model, &cfg, &batch, &plan, &qt, &qi);
            res.tape.backward(loss_node(&res.nodes, which)).unwrap();
            let per_param = model
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| match res.tape.grad(res.binding.ids[i]) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; p.tensor.data.len()],
                })
                .collect();
            grads.push(per_param);
        }

        // Probe every parameter at its strongest coordinate plus two
        // random ones; one central difference yields all six losses.
        let mut probe_rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        for pi in 0..model.params.len() {
            let len = model.params[pi].tensor.data.len();
            let strongest = (0..len)
                .max_by(|&a, &b| {
                    grads[5][pi][a].abs().partial_cmp(&grads[5][pi][b].abs()).unwrap()
                })
                .unwrap();
            let mut coords = BTreeSet::from([strongest]);
            coords.insert(probe_rng.random_range(0..len));
            coords.insert(probe_rng.random_range(0..len));

            for ci in coords {
                let orig = model.params[pi].tensor.data[ci];
                model.params[pi].tensor.data[ci] = orig + FD_EPS;
                let plus = frozen_replay(&model, &cfg, &batch, &plan, &qt, &qi).values;
                model.params[pi].tensor.data[ci] = orig - FD_EPS;
                let minus = frozen_replay(&model, &cfg, &batch, &plan, &qt, &qi).values;
                model.params[pi].tensor.data[ci] = orig;

                for which in 0..6 {
                    let fd =
                        (loss_value(&plus, which) - loss_value(&minus, which)) / (2.0 * FD_EPS);
                    let analytic = grads[which][pi][ci];
                    let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
                    assert!(
                        rel < FD_TOL,
                        "seed {} param {} coord {} loss {}: analytic {:e} vs fd {:e} (rel {:e})",
                        seed,
                        model.params[pi].name,
                        ci,
                        LOSS_NAMES[which],
                        analytic,
                        fd,
                        rel
                    );
                }
            }
        }
    }
}

#[test]
fn a02_stop_grad_detaches_the_teacher_path() {
    let corpus = generate_corpus(&tiny_corpus_cfg(), Split::Val).unwrap();
    let batch = tiny_batch(&corpus, 6);
    let model = Model::<f64>::new(tiny_model_cfg(), 42).unwrap();

    for stop in [true, false] {
        let mut cfg = step_cfg(2);
        cfg.distillation.stop_grad = stop;
        let mut rng = keyed_rng(7, STREAM_STEP, 0);
        let mut res = run_step(
            &model,
            &cfg,
            Some(&TeacherState::online()),
            &batch,
            LAMBDA,
            StepMode::Fresh(&mut rng),
        )
        .unwrap();
        let root = res.tape.add(res.nodes.distill_txt, res.nodes.distill_img).unwrap();
        res.tape.backward(root).unwrap();

        let mut any_nonzero = false;
        for (i, p) in model.params.iter().enumerate() {
            if !(p.name.starts_with("cross.") || p.name.starts_with("itm.")) {
                continue;
            }
            if let Some(g) = res.tape.grad(res.binding.ids[i]) {
                if g.iter().any(|&v| v != 0.0) {
                    assert!(
                        !stop,
                        "stop_grad=true leaked a distillation gradient into {}",
                        p.name
                    );
                    any_nonzero = true;
                }
            }
        }
        if !stop {
            assert!(
                any_nonzero,
                "stop_grad=false must reach at least one cross-encoder parameter"
            );
        }
    }
}

#[test]
fn a03_m1_reuse_is_free_and_bitwise_equal() {
    let corpus = generate_corpus(&tiny_corpus_cfg(), Split::Val).unwrap();
    let n = 6;
    let batch = tiny_batch(&corpus, n);
    // Clean text must reach the matching passes so the standalone rescoring
    // below sees the same inputs; masking is off for this check.
    let mut cfg = step_cfg(1);
    cfg.components.use_mlm = false;
    let model = Model::<f64>::new(tiny_model_cfg(), 103).unwrap();

    let mut rng = keyed_rng(3, STREAM_STEP, 0);
    let res = run_step(
        &model,
        &cfg,
        Some(&TeacherState::online()),
        &batch,
        LAMBDA,
        StepMode::Fresh(&mut rng),
    )
    .unwrap();
    assert_eq!(res.teacher_extras, 0, "m=1 with reuse must score no extra pairs");
    assert_eq!(res.cross_pairs, 3 * n);

    // Same draws without distillation: the live pair count must not move.
    let mut plain = cfg.clone();
    plain.distillation.enabled = false;
    let mut rng2 = keyed_rng(3, STREAM_STEP, 0);
    let base = run_step(&model, &plain, None, &batch, LAMBDA, StepMode::Fresh(&mut rng2)).unwrap();
    assert_eq!(res.cross_pairs, base.cross_pairs);

    // Teacher rows must equal a softmax over independently rescored
    // matching logits for the identical pairs, bit for bit.
    let (txt_choice, img_choice) = res.plan.itm.clone().unwrap();
    let tau = model.tau();
    let check = |pairs_neg: Vec<(usize, usize)>, got: &[f64]| {
        let pos: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let h_pos = cross_scores(&model, &corpus, &pos).unwrap();
        let h_neg = cross_scores(&model, &corpus, &pairs_neg).unwrap();
        let mut logits = Vec::with_capacity(2 * n);
        for i in 0..n {
            logits.push(h_pos[i]);
            logits.push(h_neg[i]);
        }
        let mut t = Tape::<f64>::new();
        let l = t.leaf(n, 2, logits, false).unwrap();
        let tau_node = t.leaf(1, 1, vec![tau], false).unwrap();
        let q = t.softmax_rows(l, Some(tau_node)).unwrap();
        let want: Vec<u64> = t.value(q).iter().map(|v| v.to_bits()).collect();
        let have: Vec<u64> = got.iter().map(|v| v.to_bits()).collect();
        assert_eq!(want, have, "teacher rows differ from rescored matching logits");
    };
    check(
        (0..n).map(|i| (i, txt_choice[i])).collect(),
        res.q_txt.as_deref().unwrap(),
    );
    check(
        (0..n).map(|i| (img_choice[i], i)).collect(),
        res.q_img.as_deref().unwrap(),
    );
}

#[test]
fn a04_teacher_extras_scale_as_m_minus_one() {
    let corpus = generate_corpus(&tiny_corpus_cfg(), Split::Val).unwrap();
    let n = 16;
    let batch = tiny_batch(&corpus, n);
    let model = Model::<f64>::new(tiny_model_cfg(), 11).unwrap();

    for m in [1usize, 4, 9, 14] {
        let cfg = step_cfg(m);
        let mut rng = keyed_rng(5, STREAM_STEP, m as u64);
        let res = run_step(
            &model,
            &cfg,
            Some(&TeacherState::online()),
            &batch,
            LAMBDA,
            StepMode::Fresh(&mut rng),
        )
        .unwrap();
        assert_eq!(
            res.teacher_extras,
            2 * n * (m - 1),
            "m={m}: want m-1 extra pairs per direction per positive"
        );
        assert_eq!(res.cross_pairs, 3 * n + res.teacher_extras, "m={m}");
    }
}

#[test]
fn a05_hard_mining_matches_an_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    // Independent reference: full descending sort over the other items,
    // ties broken toward the smaller index, truncated to m.
    let oracle = |sim: &[f64], n: usize, anchor: usize, dir: Direction, m: usize| -> Vec<usize> {
        let score = |j: usize| match dir {
            Direction::Txt => sim[anchor * n + j],
            Direction::Img => sim[j * n + anchor],
        };
        let mut cands: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
        cands.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
        cands.truncate(m);
        cands
    };

    for _ in 0..1000 {
        let n = rng.random_range(2..=16usize);
        let sim: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for anchor in 0..n {
            for m in 1..n {
                for dir in [Direction::Txt, Direction::Img] {
                    let want = oracle(&sim, n, anchor, dir, m);
                    let got = mine_hard(&sim, n, anchor, dir, m).unwrap();
                    assert_eq!(got.chosen, want, "n={n} anchor={anchor} m={m} {dir:?}");
                }
            }
        }
        // The planner must hand out exactly those rows.
        let m = rng.random_range(1..n);
        let plan = plan_distill(&sim, n, m, NegMethod::Hard, &mut rng, true, true).unwrap();
        for anchor in 0..n {
            assert_eq!(plan.txt.as_ref().unwrap()[anchor], oracle(&sim, n, anchor, Direction::Txt, m));
            assert_eq!(plan.img.as_ref().unwrap()[anchor], oracle(&sim, n, anchor, Direction::Img, m));
        }
    }
}

#[test]
fn a06_uniform_inputs_hit_the_closed_form_losses() {
    let tol = 1e-9;

    // Contrastive: indistinguishable similarities make both directions
    // uniform, costing ln n per query over 2n queries.
    let n = 7;
    let mut t = Tape::<f64>::new();
    let sim = t.leaf(n, n, vec![0.3; n * n], false).unwrap();
    let tau = t.leaf(1, 1, vec![0.07], false).unwrap();
    let itc = itc_loss(&mut t, sim, tau).unwrap();
    assert!((t.value(itc)[0] - 2.0 * n as f64 * (n as f64).ln()).abs() < tol);

    // Matching: three passes of n two-way decisions at even odds.
    let n = 5;
    let mut t = Tape::<f64>::new();
    let pos = t.leaf(n, 2, vec![0.4; 2 * n], false).unwrap();
    let tneg = t.leaf(n, 2, vec![0.4; 2 * n], false).unwrap();
    let ineg = t.leaf(n, 2, vec![0.4; 2 * n], false).unwrap();
    let itm = itm_loss(&mut t, pos, tneg, ineg).unwrap();
    assert!((t.value(itm)[0] - 3.0 * n as f64 * 2f64.ln()).abs() < tol);

    // Distillation: a uniform teacher against a uniform student costs
    // ln(slots) per anchor; an absent direction contributes exactly zero.
    let slots = 5;
    let mut t = Tape::<f64>::new();
    let logits = t.leaf(1, slots, vec![0.2; slots], false).unwrap();
    let p = t.softmax_rows(logits, None).unwrap();
    let q = t.leaf(1, slots, vec![1.0 / slots as f64; slots], false).unwrap();
    let (lt, li) = distill_loss(
        &mut t,
        &DistillSets { txt: Some(DirectionSet { p, q }), img: None },
    )
    .unwrap();
    assert!((t.value(lt)[0] - (slots as f64).ln()).abs() < tol);
    assert_eq!(t.value(li)[0], 0.0);

    // Per-anchor accounting: six anchors cost six times one anchor.
    let rows = 6;
    let mut t = Tape::<f64>::new();
    let logits = t.leaf(rows, slots, vec![0.2; rows * slots], false).unwrap();
    let p = t.softmax_rows(logits, None).unwrap();
    let q = t.leaf(rows, slots, vec![1.0 / slots as f64; rows * slots], false).unwrap();
    let (lt, _) = distill_loss(
        &mut t,
        &DistillSets { txt: Some(DirectionSet { p, q }), img: None },
    )
    .unwrap();
    assert!((t.value(lt)[0] - rows as f64 * (slots as f64).ln()).abs() < tol);

    // Masked tokens: uniform logits over the vocabulary cost ln V
    // regardless of how many rows are masked.
    let v = 32;
    let mut t = Tape::<f64>::new();
    let logits = t.leaf(4, v, vec![0.1; 4 * v], false).unwrap();
    let mlm = mlm_loss(&mut t, Some(logits), &[0, 5, 31, 7]).unwrap();
    assert!((t.value(mlm)[0] - (v as f64).ln()).abs() < tol);
}

#[test]
fn a07_rerank_depth_interpolates_between_dual_and_full_cross() {
    let corpus = generate_corpus(&tiny_corpus_cfg(), Split::Val).unwrap();
    let n = corpus.len();
    let model = Model::<f64>::new(tiny_model_cfg(), 7).unwrap();

    // Depth 1 cannot reorder anything: ranks equal the dual ranks.
    let ev1 = evaluate(&model, &corpus, 1).unwrap();
    assert_eq!(ev1.cross_tr.ranks, ev1.dual_tr.ranks);
    assert_eq!(ev1.cross_ir.ranks, ev1.dual_ir.ranks);
    assert_eq!(ev1.metrics.cross, ev1.metrics.dual);

    // Depth n is exhaustive: ranks equal scoring every pair directly.
    let evn = evaluate(&model, &corpus, n).unwrap();
    let gt: Vec<usize> = (0..n).collect();
    let all: Vec<(usize, usize)> = (0..n).flat_map(|q| (0..n).map(move |c| (q, c))).collect();
    let tr_scores = cross_scores(&model, &corpus, &all).unwrap();
    let flipped: Vec<(usize, usize)> = all.iter().map(|&(q, c)| (c, q)).collect();
    let ir_scores = cross_scores(&model, &corpus, &flipped).unwrap();
    let otr = recall_at_k(&tr_scores, n, n, &gt, &STANDARD_KS, RetrievalDirection::Tr).unwrap();
    let oir = recall_at_k(&ir_scores, n, n, &gt, &STANDARD_KS, RetrievalDirection::Ir).unwrap();
    assert_eq!(evn.cross_tr.ranks, otr.ranks);
    assert_eq!(evn.cross_ir.ranks, oir.ranks);
    assert_eq!(evn.metrics.cross.tr, Recalls::from_result(&otr));
    assert_eq!(evn.metrics.cross.ir, Recalls::from_result(&oir));
}

#[test]
fn a08_identical_runs_produce_identical_bytes() {
    let corpus = generate_corpus(&tiny_corpus_cfg(), Split::Pretrain).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.warmup_steps = 2;
    cfg.distillation.m = 2;
    cfg.seed = 11;

    let dir = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let mut model = Model::<f32>::new(tiny_model_cfg(), 11).unwrap();
        let mut report = train(&mut model, &corpus, &cfg).unwrap();
        assert!(report.diverged.is_none());
        // Wall-clock time is the one honest nondeterminism in a report;
        // byte comparison applies after zeroing it.
        report.wall_clock_s = 0.0;
        let path = dir.path().join(format!("run{run}.litr"));
        save_model(&model, &path).unwrap();
        artifacts.push((serde_json::to_vec(&report).unwrap(), std::fs::read(&path).unwrap()));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "reports differ between identical runs");
    assert_eq!(artifacts[0].1, artifacts[1].1, "checkpoints differ between identical runs");
}

#[test]
fn a09_checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a_path = dir.path().join("a.litr");
    let b_path = dir.path().join("b.litr");

    let a = Model::<f32>::new(tiny_model_cfg(), 5).unwrap();
    save_model(&a, &a_path).unwrap();
    let mut b = Model::<f32>::new(tiny_model_cfg(), 6).unwrap();
    load_model(&a_path, &mut b).unwrap();
    save_model(&b, &b_path).unwrap();
    assert_eq!(std::fs::read(&a_path).unwrap(), std::fs::read(&b_path).unwrap());
}

// ── Directional criteria ────────────────────────────────────────────────
//
// Every arm retrains the same slim model on the default corpus with the
// default epoch budget; a narrower, shallower network keeps each arm under
// the per-arm time budget while leaving the orderings intact. Results are
// computed once and shared by the a1x tests.

const DIR_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn dir_model_cfg() -> ModelConfig {
    ModelConfig {
        width: 32,
        heads: 4,
        depth_img: 1,
        depth_txt: 1,
        depth_cross: 1,
        embed_dim: 16,
        ffn_mult: 2,
        vocab_img: 64,
        vocab_txt: 64,
        len_img: 17,
        len_txt: 9,
    }
}

type Tweak = fn(&mut TrainConfig, &mut TrainConfig);

const ARMS: [(&str, Tweak); 9] = [
    ("full", |_, _| {}),
    ("none", |p, f| {
        p.distillation.enabled = false;
        f.distillation.enabled = false;
    }),
    ("pre-distill", |_, f| f.distillation.enabled = false),
    ("fin-distill", |p, _| p.distillation.enabled = false),
    ("random-negs", |p, f| {
        p.distillation.sampling = NegMethod::Random;
        f.distillation.sampling = NegMethod::Random;
    }),
    ("dual-only", |p, f| {
        for c in [p, f] {
            c.components.use_cross = false;
            c.components.use_mlm = false;
            c.distillation.enabled = false;
        }
    }),
    ("no-itc", |p, f| {
        p.components.use_dual = false;
        f.components.use_dual = false;
    }),
    ("random-itm", |p, f| {
        p.components.itm_negative_method = NegMethod::Random;
        f.components.itm_negative_method = NegMethod::Random;
    }),
    ("flow", |p, f| {
        p.distillation.stop_grad = false;
        f.distillation.stop_grad = false;
    }),
];

#[derive(Clone, Copy, Debug)]
struct ArmScores {
    dual_r1: f64,
    cross_r1: f64,
}

static DIRECTIONAL: LazyLock<BTreeMap<&'static str, Vec<ArmScores>>> = LazyLock::new(|| {
    let bundle = generate_bundle(&CorpusConfig::default()).expect("corpus");
    let mcfg = dir_model_cfg();
    let mut by_arm: BTreeMap<&'static str, Vec<ArmScores>> = BTreeMap::new();

    for &seed in &DIR_SEEDS {
        // Arms sharing a pretraining config share the pretrained model.
        let mut cache: BTreeMap<String, Model<f32>> = BTreeMap::new();
        for (name, tweak) in ARMS {
            let mut pre = TrainConfig::default();
            pre.seed = seed;
            let mut fin = TrainConfig::finetune_default();
            fin.seed = seed;
            tweak(&mut pre, &mut fin);

            let key = config_digest(&pre).unwrap();
            if !cache.contains_key(&key) {
                let mut m = Model::<f32>::new(mcfg.clone(), seed).unwrap();
                let rep = train(&mut m, &bundle.pretrain, &pre).unwrap();
                assert!(rep.diverged.is_none(), "{name} seed {seed} pretrain: {:?}", rep.diverged);
                cache.insert(key.clone(), m);
            }
            let mut model = cache.get(&key).unwrap().clone();
            let rep = train(&mut model, &bundle.train, &fin).unwrap();
            assert!(rep.diverged.is_none(), "{name} seed {seed} finetune: {:?}", rep.diverged);

            let m = evaluate(&model, &bundle.val, DEFAULT_RERANK_K).unwrap().metrics;
            by_arm.entry(name).or_default().push(ArmScores {
                dual_r1: (m.dual.tr.r1 + m.dual.ir.r1) / 2.0,
                cross_r1: (m.cross.tr.r1 + m.cross.ir.r1) / 2.0,
            });
        }
    }

    println!("arm           dual R@1 per seed            cross R@1 per seed");
    for (name, scores) in &by_arm {
        let d: Vec<String> = scores.iter().map(|s| format!("{:5.2}", s.dual_r1)).collect();
        let c: Vec<String> = scores.iter().map(|s| format!("{:5.2}", s.cross_r1)).collect();
        println!("{name:13} [{}]  [{}]", d.join(" "), c.join(" "));
    }
    by_arm
});

fn scores_of(arm: &str, metric: fn(&ArmScores) -> f64) -> Vec<f64> {
    DIRECTIONAL.get(arm).expect("arm ran")[..].iter().map(metric).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Asserts the ordering on the seed mean and in at least 4 of 5 seeds;
/// `strict` demands a real improvement, otherwise ties are wins.
fn assert_ordering(
    better: &str,
    worse: &str,
    metric: fn(&ArmScores) -> f64,
    label: &str,
    strict: bool,
) {
    let a = scores_of(better, metric);
    let b = scores_of(worse, metric);
    let (ma, mb) = (mean(&a), mean(&b));
    let wins = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| if strict { x > y } else { x >= y })
        .count();
    let mean_ok = if strict { ma > mb } else { ma >= mb };
    assert!(
        mean_ok && wins >= 4,
        "{label}: {better} (mean {ma:.2}, {a:?}) vs {worse} (mean {mb:.2}, {b:?}), \
         seed wins {wins}/{}",
        a.len()
    );
}

fn dual(s: &ArmScores) -> f64 {
    s.dual_r1
}

fn cross(s: &ArmScores) -> f64 {
    s.cross_r1
}

#[test]
fn a10_distillation_improves_dual_retrieval() {
    assert_ordering("full", "none", dual, "distillation vs none on dual R@1", true);
}

#[test]
fn a11_hard_negatives_beat_random_for_distillation() {
    assert_ordering("full", "random-negs", dual, "hard vs random distillation negatives", true);
}

#[test]
fn a12_both_stages_dominate_single_stage_dominates_none() {
    assert_ordering("full", "pre-distill", dual, "both stages vs pretrain-only", false);
    assert_ordering("pre-distill", "none", dual, "pretrain-only vs none", false);
    assert_ordering("full", "fin-distill", dual, "both stages vs finetune-only", false);
    assert_ordering("fin-distill", "none", dual, "finetune-only vs none", false);
}

#[test]
fn a13_joint_training_beats_solo_training() {
    assert_ordering("full", "dual-only", dual, "joint vs dual-only on dual R@1", true);
    assert_ordering("full", "no-itc", cross, "contrastive term helps reranking", true);
}

#[test]
fn a14_hard_matching_negatives_beat_random() {
    assert_ordering("full", "random-itm", cross, "hard vs random matching negatives", true);
}

#[test]
fn a15_stop_grad_is_no_worse_than_teacher_backprop() {
    assert_ordering("full", "flow", cross, "detached vs flowing teacher", false);
}
