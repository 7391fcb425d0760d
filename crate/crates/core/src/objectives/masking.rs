use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{EncodedSentence, TokenId, MASK, NUM_SPECIAL};

/// BERT-style corruption: each eligible token is selected with `mask_prob`;
/// a selected token becomes `[MASK]` with probability `sub_mask`, a random
/// word with probability `sub_random`, and is otherwise left as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub sub_mask: f64,
    pub sub_random: f64,
    pub force_min_one: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            sub_mask: 0.8,
            sub_random: 0.1,
            force_min_one: true,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::Config("mask_prob must lie in (0, 1]".into()));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.sub_mask) || !unit.contains(&self.sub_random) || self.sub_mask + self.sub_random > 1.0 {
            return Err(Error::Config("sub_mask and sub_random must be fractions summing to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSentence {
    pub corrupted: EncodedSentence,
    /// Sorted, all within `1..true_len`.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub target_ids: Vec<TokenId>,
}

pub fn apply_masking<R: Rng + ?Sized>(
    sentence: &EncodedSentence,
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSentence> {
    if sentence.true_len < 2 {
        return Err(Error::Invalid("masking needs at least one non-[CLS] token".into()));
    }
    cfg.validate()?;
    let mut positions: Vec<usize> = (1..sentence.true_len).filter(|_| rng.gen_bool(cfg.mask_prob)).collect();
    if positions.is_empty() && cfg.force_min_one {
        positions.push(rng.gen_range(1..sentence.true_len));
    }

    let mut corrupted = sentence.clone();
    let mut target_ids = Vec::with_capacity(positions.len());
    for &p in &positions {
        target_ids.push(sentence.ids[p]);
        let r: f64 = rng.gen();
        if r < cfg.sub_mask {
            corrupted.ids[p] = MASK;
        } else if r < cfg.sub_mask + cfg.sub_random {
            corrupted.ids[p] = if vocab_size > NUM_SPECIAL {
                rng.gen_range(NUM_SPECIAL as TokenId..vocab_size as TokenId)
            } else {
                MASK
            };
        }
    }
    Ok(MaskedSentence {
        corrupted,
        mask_positions: positions,
        target_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, PAD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sentence(n_words: usize, max_len: usize) -> EncodedSentence {
        let mut ids = vec![CLS];
        ids.extend((0..n_words).map(|i| 4 + i as TokenId));
        let true_len = ids.len();
        ids.resize(max_len, PAD);
        EncodedSentence { ids, true_len }
    }

    #[test]
    fn full_masking() {
        let s = sentence(6, 10);
        let cfg = MaskingConfig {
            mask_prob: 1.0,
            sub_mask: 1.0,
            sub_random: 0.0,
            force_min_one: true,
        };
        let m = apply_masking(&s, &cfg, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.mask_positions, (1..7).collect::<Vec<_>>());
        assert!(m.corrupted.ids[1..7].iter().all(|&id| id == MASK));
        assert_eq!(m.corrupted.ids[0], CLS);
        assert!(m.corrupted.ids[7..].iter().all(|&id| id == PAD));
        assert_eq!(m.target_ids, s.ids[1..7].to_vec());
    }

    #[test]
    fn seeded_masking_is_reproducible() {
        let s = sentence(12, 16);
        let cfg = MaskingConfig::default();
        let a = apply_masking(&s, &cfg, 30, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = apply_masking(&s, &cfg, 30, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn force_min_one_and_errors() {
        let s = sentence(1, 4);
        let cfg = MaskingConfig {
            mask_prob: 1e-9,
            ..MaskingConfig::default()
        };
        let m = apply_masking(&s, &cfg, 30, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.mask_positions, vec![1]);
        let only_cls = sentence(0, 4);
        assert!(apply_masking(&only_cls, &cfg, 30, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        let bad = MaskingConfig {
            sub_mask: 0.9,
            sub_random: 0.2,
            ..MaskingConfig::default()
        };
        assert!(apply_masking(&s, &bad, 30, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn random_replacements_are_words() {
        let s = sentence(30, 32);
        let cfg = MaskingConfig {
            mask_prob: 1.0,
            sub_mask: 0.0,
            sub_random: 1.0,
            force_min_one: true,
        };
        let m = apply_masking(&s, &cfg, 40, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(m.corrupted.ids[1..31].iter().all(|&id| (4..40).contains(&id)));
    }

    #[test]
    fn selection_rate_matches_binomial_mean() {
        // 20 eligible tokens at p = 0.15: mean 3.0, standard error of the
        // mean over 10^4 trials sqrt(20 * 0.15 * 0.85 / 10^4).
        let s = sentence(20, 24);
        let cfg = MaskingConfig {
            force_min_one: false,
            ..MaskingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| {
                let m = apply_masking(&s, &cfg, 40, &mut rng).unwrap();
                assert!(m.mask_positions.iter().all(|&p| (1..21).contains(&p)));
                m.mask_positions.len()
            })
            .sum();
        let mean = total as f64 / trials as f64;
        let se = (20.0 * 0.15 * 0.85 / trials as f64).sqrt();
        assert!((mean - 3.0).abs() <= 3.0 * se, "mean {mean}");
    }
}
