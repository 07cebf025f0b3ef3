//! In-batch negative selection from the dual encoder's similarity matrix:
//! deterministic top-m hard mining, the random-sampling control arm, and the
//! per-positive ITM negative picks.
//!
//! Conventions: `sim` is the square n x n cosine matrix with entry (i, j) =
//! image i against text j and positives on the diagonal. The text direction
//! ranks candidate texts for an anchor image (row scan); the image direction
//! ranks candidate images for an anchor text (column scan).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Anchor is an image; candidates are texts (row of `sim`).
    Txt,
    /// Anchor is a text; candidates are images (column of `sim`).
    Img,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegMethod {
    Hard,
    Random,
}

/// One anchor's chosen negatives, in selection order (best-first for hard
/// mining, draw order for random sampling).
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSelection<F> {
    pub direction: Direction,
    pub anchor: usize,
    pub chosen: Vec<usize>,
    pub method: NegMethod,
    /// Ranking scores parallel to `chosen`; empty for random sampling,
    /// which never consults the similarity matrix.
    pub scores: Vec<F>,
}

fn validate<F: Real>(sim: &[F], n: usize, anchor: usize, m: usize) -> Result<()> {
    if sim.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "mine_hard",
            detail: format!("similarity length {} is not {}x{}", sim.len(), n, n),
        });
    }
    if anchor >= n {
        return Err(Error::ShapeMismatch {
            op: "mine_hard",
            detail: format!("anchor {} out of batch {}", anchor, n),
        });
    }
    if m == 0 || m > n.saturating_sub(1) {
        return Err(Error::InvalidNegativeCount { m, n });
    }
    Ok(())
}

fn candidate_score<F: Real>(sim: &[F], n: usize, anchor: usize, j: usize, direction: Direction) -> F {
    match direction {
        Direction::Txt => sim[anchor * n + j],
        Direction::Img => sim[j * n + anchor],
    }
}

/// Top-m negatives for one anchor, ranked by similarity, ties broken toward
/// the lower batch index. Purely a function of the scores: no rng involved,
/// and the m=k selection is always a prefix of the m=k+1 selection.
pub fn mine_hard<F: Real>(
    sim: &[F],
    n: usize,
    anchor: usize,
    direction: Direction,
    m: usize,
) -> Result<NegativeSelection<F>> {
    validate(sim, n, anchor, m)?;
    let mut cands: Vec<(usize, F)> = (0..n)
        .filter(|&j| j != anchor)
        .map(|j| (j, candidate_score(sim, n, anchor, j, direction)))
        .collect();
    if cands.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFiniteInput { op: "mine_hard" });
    }
    cands.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    cands.truncate(m);
    let (chosen, scores) = cands.into_iter().unzip();
    Ok(NegativeSelection { direction, anchor, chosen, method: NegMethod::Hard, scores })
}

/// Uniform sample of m negatives without replacement, excluding the anchor.
pub fn sample_random<F: Real>(
    anchor: usize,
    n: usize,
    m: usize,
    direction: Direction,
    rng: &mut impl Rng,
) -> Result<NegativeSelection<F>> {
    if anchor >= n {
        return Err(Error::ShapeMismatch {
            op: "sample_random",
            detail: format!("anchor {} out of batch {}", anchor, n),
        });
    }
    if m == 0 || m > n.saturating_sub(1) {
        return Err(Error::InvalidNegativeCount { m, n });
    }
    let cands: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
    let picks = rand::seq::index::sample(rng, cands.len(), m);
    let chosen = picks.into_iter().map(|k| cands[k]).collect();
    Ok(NegativeSelection { direction, anchor, chosen, method: NegMethod::Random, scores: Vec::new() })
}

/// The matching loss's per-positive negatives: one negative text and one
/// negative image for every anchor i. Draw order is fixed (text then image,
/// anchors ascending) so random selections replay exactly per seed.
pub fn itm_negatives<F: Real>(
    sim: &[F],
    n: usize,
    method: NegMethod,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidNegativeCount { m: 1, n });
    }
    let mut txt_negs = Vec::with_capacity(n);
    let mut img_negs = Vec::with_capacity(n);
    for i in 0..n {
        let (t, g) = match method {
            NegMethod::Hard => (
                mine_hard(sim, n, i, Direction::Txt, 1)?,
                mine_hard(sim, n, i, Direction::Img, 1)?,
            ),
            NegMethod::Random => (
                sample_random::<F>(i, n, 1, Direction::Txt, rng)?,
                sample_random::<F>(i, n, 1, Direction::Img, rng)?,
            ),
        };
        txt_negs.push(t.chosen[0]);
        img_negs.push(g.chosen[0]);
    }
    Ok((txt_negs, img_negs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: full sort of all candidates, no truncation tricks.
    fn oracle(sim: &[f64], n: usize, anchor: usize, dir: Direction, m: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
        all.sort_by(|&a, &b| {
            let sa = candidate_score(sim, n, anchor, a, dir);
            let sb = candidate_score(sim, n, anchor, b, dir);
            sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
        });
        all.truncate(m);
        all
    }

    #[test]
    fn hard_mining_orders_by_score() {
        let sim = vec![
            0.9, 0.8, 0.1, 0.7, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        let sel = mine_hard(&sim, 4, 0, Direction::Txt, 2).unwrap();
        assert_eq!(sel.chosen, vec![1, 3]);
        assert_eq!(sel.scores, vec![0.8, 0.7]);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let sim = vec![0.9f64; 16];
        let sel = mine_hard(&sim, 4, 0, Direction::Txt, 2).unwrap();
        assert_eq!(sel.chosen, vec![1, 2]);
        let sel = mine_hard(&sim, 4, 2, Direction::Img, 3).unwrap();
        assert_eq!(sel.chosen, vec![0, 1, 3]);
    }

    #[test]
    fn image_direction_reads_columns() {
        // Column 0 holds the scores for texts' image candidates.
        let sim = vec![
            1.0, 0.0, //
            0.3, 1.0,
        ];
        let sel = mine_hard(&sim, 2, 1, Direction::Img, 1).unwrap();
        assert_eq!(sel.chosen, vec![0]);
        assert_eq!(sel.scores, vec![0.0], "uses sim[0][1], the column entry for anchor 1");
    }

    #[test]
    fn matches_exhaustive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.random_range(2..=10usize);
            let sim: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for anchor in 0..n {
                for m in 1..n {
                    for dir in [Direction::Txt, Direction::Img] {
                        let got = mine_hard(&sim, n, anchor, dir, m).unwrap().chosen;
                        assert_eq!(got, oracle(&sim, n, anchor, dir, m));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range_m_and_anchor() {
        let sim = vec![1.0f64; 9];
        assert!(matches!(
            mine_hard(&sim, 3, 0, Direction::Txt, 0),
            Err(Error::InvalidNegativeCount { m: 0, n: 3 })
        ));
        assert!(matches!(
            mine_hard(&sim, 3, 0, Direction::Txt, 3),
            Err(Error::InvalidNegativeCount { m: 3, n: 3 })
        ));
        assert!(mine_hard(&sim, 3, 5, Direction::Txt, 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_random::<f64>(0, 3, 3, Direction::Txt, &mut rng),
            Err(Error::InvalidNegativeCount { .. })
        ));
    }

    #[test]
    fn forced_random_choice_with_two_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = sample_random::<f64>(0, 2, 1, Direction::Txt, &mut rng).unwrap();
            assert_eq!(s.chosen, vec![1]);
            let s = sample_random::<f64>(1, 2, 1, Direction::Img, &mut rng).unwrap();
            assert_eq!(s.chosen, vec![0]);
        }
    }

    #[test]
    fn random_sampling_replays_per_seed() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..10)
                .map(|i| sample_random::<f64>(i % 5, 8, 3, Direction::Txt, &mut rng).unwrap().chosen)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn random_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, m, trials) = (8usize, 3usize, 100_000usize);
        let mut counts = vec![0usize; n];
        for _ in 0..trials {
            let s = sample_random::<f64>(0, n, m, Direction::Txt, &mut rng).unwrap();
            assert_eq!(s.chosen.len(), m);
            let mut sorted = s.chosen.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), m, "no replacement");
            assert!(!s.chosen.contains(&0), "anchor excluded");
            for &j in &s.chosen {
                counts[j] += 1;
            }
        }
        let want = m as f64 / (n - 1) as f64;
        for j in 1..n {
            let freq = counts[j] as f64 / trials as f64;
            assert!((freq - want).abs() < 0.01, "index {j}: {freq} vs {want}");
        }
    }

    #[test]
    fn itm_negatives_forced_and_consistent_with_top1() {
        let sim = vec![
            1.0, 0.2, //
            0.4, 1.0,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, g) = itm_negatives(&sim, 2, NegMethod::Hard, &mut rng).unwrap();
        assert_eq!(t, vec![1, 0]);
        assert_eq!(g, vec![1, 0]);
        let (t, g) = itm_negatives(&sim, 2, NegMethod::Random, &mut rng).unwrap();
        assert_eq!(t, vec![1, 0]);
        assert_eq!(g, vec![1, 0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim4: Vec<f64> = (0..16).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect();
        let (t, g) = itm_negatives(&sim4, 4, NegMethod::Hard, &mut rng).unwrap();
        for i in 0..4 {
            assert_eq!(t[i], mine_hard(&sim4, 4, i, Direction::Txt, 1).unwrap().chosen[0]);
            assert_eq!(g[i], mine_hard(&sim4, 4, i, Direction::Img, 1).unwrap().chosen[0]);
        }
        assert!(itm_negatives(&sim, 1, NegMethod::Hard, &mut rng).is_err());
    }

    #[test]
    fn random_itm_matches_replay_oracle() {
        // Oracle: replay the documented draw order (text then image per
        // anchor) against a fresh rng with the same seed.
        let sim: Vec<f64> = (0..36).map(|i| (i as f64).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (t, g) = itm_negatives(&sim, 6, NegMethod::Random, &mut rng).unwrap();
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..6 {
            let tt = sample_random::<f64>(i, 6, 1, Direction::Txt, &mut oracle_rng).unwrap();
            let gg = sample_random::<f64>(i, 6, 1, Direction::Img, &mut oracle_rng).unwrap();
            assert_eq!(t[i], tt.chosen[0]);
            assert_eq!(g[i], gg.chosen[0]);
        }
    }

    proptest! {
        #[test]
        fn top_m_sets_nest(values in proptest::collection::vec(-1.0f64..1.0, 25), anchor in 0usize..5) {
            let n = 5;
            for dir in [Direction::Txt, Direction::Img] {
                let mut prev: Vec<usize> = Vec::new();
                for m in 1..n {
                    let sel = mine_hard(&values, n, anchor, dir, m).unwrap();
                    prop_assert_eq!(&sel.chosen[..m - 1], &prev[..]);
                    prev = sel.chosen;
                }
            }
        }

        #[test]
        fn hard_mining_is_permutation_covariant(perm_seed in 0u64..1000, anchor in 0usize..6, m in 1usize..5) {
            // Distinct scores so the index tie-break never fires.
            let n = 6;
            let base: Vec<f64> = (0..n * n).map(|i| i as f64 * 0.01).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);

            // permuted[p(i)][p(j)] = base[i][j]
            let mut permuted = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    permuted[perm[i] * n + perm[j]] = base[i * n + j];
                }
            }
            for dir in [Direction::Txt, Direction::Img] {
                let sel = mine_hard(&base, n, anchor, dir, m).unwrap();
                let mapped: Vec<usize> = sel.chosen.iter().map(|&j| perm[j]).collect();
                let sel_p = mine_hard(&permuted, n, perm[anchor], dir, m).unwrap();
                prop_assert_eq!(mapped, sel_p.chosen);
            }
        }
    }
}
