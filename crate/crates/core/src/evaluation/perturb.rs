// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{NxlError, Result};
use crate::model::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Replace the selected tokens with a mask id.
    Mask,
    /// Remove the selected tokens; survivors keep their order.
    Delete,
}

impl std::str::FromStr for PerturbationMode {
    type Err = NxlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(PerturbationMode::Mask),
            "delete" => Ok(PerturbationMode::Delete),
            other => Err(NxlError::Config(format!("unknown perturbation mode {other:?}"))),
        }
    }
}

/// Which tokens a faithfulness run perturbs, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub mode: PerturbationMode,
    /// Percentages in `(0, 100]`, strictly increasing.
    pub ratios: Vec<f64>,
    /// Replacement id; required in mask mode.
    pub mask_token_id: Option<usize>,
}

/// `10, 20, ..., 100`.
pub fn default_ratios() -> Vec<f64> {
    (1..=10).map(|k| f64::from(k * 10)).collect()
}

impl PerturbationSpec {
    pub fn mask(mask_token_id: usize, ratios: Vec<f64>) -> Result<Self> {
        Self::new(PerturbationMode::Mask, ratios, Some(mask_token_id))
    }

    pub fn delete(ratios: Vec<f64>) -> Result<Self> {
        Self::new(PerturbationMode::Delete, ratios, None)
    }

    pub fn new(mode: PerturbationMode, ratios: Vec<f64>, mask_token_id: Option<usize>) -> Result<Self> {
        let spec = PerturbationSpec {
            mode,
            ratios,
            mask_token_id,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(NxlError::Config("at least one perturbation ratio is required".into()));
        }
        if let Some(bad) = self.ratios.iter().find(|&&r| !(r > 0.0 && r <= 100.0)) {
            return Err(NxlError::Config(format!("perturbation ratio {bad} outside (0, 100]")));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NxlError::Config("perturbation ratios must be strictly increasing".into()));
        }
        if self.mode == PerturbationMode::Mask && self.mask_token_id.is_none() {
            return Err(NxlError::Config("mask mode needs a mask token id".into()));
        }
        Ok(())
    }

    /// Checks the mask id against a vocabulary size.
    pub fn validate_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.mask_token_id {
            Some(id) if self.mode == PerturbationMode::Mask && id >= vocab_size => {
                Err(NxlError::Vocabulary { id, vocab_size })
            }
            _ => Ok(()),
        }
    }
}

/// `ceil(ratio / 100 * eligible)`, computed so that e.g. 30% of 10 is 3.
pub fn perturbation_count(ratio: f64, eligible: usize) -> usize {
    let exact = ratio * eligible as f64 / 100.0;
    (exact.ceil() as usize).min(eligible)
}

/// Perturbs the top `ceil(K/100 * |ranking|)` positions of `ranking`.
pub fn perturb(seq: &TokenSequence, ranking: &[usize], ratio: f64, spec: &PerturbationSpec) -> Result<TokenSequence> {
    if !(ratio > 0.0 && ratio <= 100.0) {
        return Err(NxlError::Config(format!("perturbation ratio {ratio} outside (0, 100]")));
    }
    if let Some(&p) = ranking.iter().find(|&&p| p >= seq.len() || seq.is_special(p)) {
        return Err(NxlError::Index(format!("ranked position {p} is not an eligible position")));
    }
    let k = perturbation_count(ratio, ranking.len());
    let chosen = &ranking[..k];
    match spec.mode {
        PerturbationMode::Mask => {
            let mask = spec
                .mask_token_id
                .ok_or_else(|| NxlError::Config("mask mode needs a mask token id".into()))?;
            let mut out = seq.clone();
            for &p in chosen {
                out = out.with_token(p, mask);
            }
            Ok(out)
        }
        PerturbationMode::Delete => seq.without_positions(&chosen.iter().copied().collect::<BTreeSet<_>>()),
    }
}

/// A perturbed sequence with nothing left but special positions.
pub fn is_degenerate(seq: &TokenSequence) -> bool {
    seq.eligible_positions().is_empty()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn count_uses_ceiling() {
        assert_eq!(perturbation_count(34.0, 3), 2);
        assert_eq!(perturbation_count(10.0, 3), 1);
        assert_eq!(perturbation_count(30.0, 10), 3);
        assert_eq!(perturbation_count(70.0, 10), 7);
        assert_eq!(perturbation_count(100.0, 7), 7);
        for k in 1..=10 {
            assert_eq!(perturbation_count(f64::from(k * 10), 10), k as usize);
        }
    }

    #[test]
    fn mask_example() {
        // [a, b, c, d] with position 0 special, ranking [2, 1, 3], K = 34%
        let seq = TokenSequence::new(vec![10, 11, 12, 13], []).unwrap();
        let spec = PerturbationSpec::mask(99, vec![34.0]).unwrap();
        let out = perturb(&seq, &[2, 1, 3], 34.0, &spec).unwrap();
        assert_eq!(out.token_ids(), &[10, 99, 99, 13]);
    }

    #[test]
    fn delete_everything_leaves_specials() {
        let seq = TokenSequence::new(vec![10, 11, 1, 13], []).unwrap().with_mask_position(2).unwrap();
        let spec = PerturbationSpec::delete(vec![100.0]).unwrap();
        let out = perturb(&seq, &[3, 1], 100.0, &spec).unwrap();
        assert_eq!(out.token_ids(), &[10, 1]);
        assert_eq!(out.mask_position(), Some(1));
        assert!(is_degenerate(&out));
    }

    #[test]
    fn spec_validation() {
        assert!(PerturbationSpec::mask(1, vec![]).is_err());
        assert!(PerturbationSpec::mask(1, vec![0.0]).is_err());
        assert!(PerturbationSpec::mask(1, vec![20.0, 10.0]).is_err());
        assert!(PerturbationSpec::mask(1, vec![10.0, 10.0]).is_err());
        assert!(PerturbationSpec::mask(1, vec![100.5]).is_err());
        assert!(PerturbationSpec::new(PerturbationMode::Mask, vec![10.0], None).is_err());
        assert!(PerturbationSpec::mask(9, default_ratios()).unwrap().validate_vocab(9).is_err());
        assert_eq!(default_ratios().len(), 10);
        let seq = TokenSequence::new(vec![1, 2], []).unwrap();
        let spec = PerturbationSpec::delete(vec![50.0]).unwrap();
        assert!(perturb(&seq, &[0], 50.0, &spec).is_err());
    }

    proptest! {
        #[test]
        fn delete_survivors_match_filter_oracle(
            ids in prop::collection::vec(0usize..50, 2..16),
            ratio in 1u32..=100,
            shuffle_seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let seq = TokenSequence::new(ids.clone(), []).unwrap();
            let mut ranking = seq.eligible_positions();
            ranking.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
            let spec = PerturbationSpec::delete(vec![f64::from(ratio)]).unwrap();
            let out = perturb(&seq, &ranking, f64::from(ratio), &spec).unwrap();

            let k = (u64::from(ratio) * ranking.len() as u64).div_ceil(100) as usize;
            let removed: Vec<usize> = ranking[..k].to_vec();
            let expected: Vec<usize> = ids.iter().enumerate().filter(|(i, _)| !removed.contains(i)).map(|(_, &t)| t).collect();
            prop_assert_eq!(out.token_ids(), expected.as_slice());
            prop_assert!(out.is_special(0));

            let mspec = PerturbationSpec::mask(99, vec![f64::from(ratio)]).unwrap();
            let masked = perturb(&seq, &ranking, f64::from(ratio), &mspec).unwrap();
            prop_assert_eq!(masked.token_ids().iter().filter(|&&t| t == 99).count(), k);
        }
    }
}
