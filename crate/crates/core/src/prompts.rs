//! Source/target prompt alignment: common tokens, new tokens grouped into
//! edit phrases, and auxiliary prompts for negative tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub id: u32,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    /// Builds a sequence from `(surface, id)` pairs, numbering positions from 0.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, u32)>) -> Self {
        let tokens = pairs
            .into_iter()
            .enumerate()
            .map(|(position, (text, id))| Token {
                text: text.into(),
                id,
                position,
            })
            .collect();
        Self { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn renumbered(tokens: impl IntoIterator<Item = Token>) -> Self {
        Self::from_pairs(tokens.into_iter().map(|t| (t.text, t.id)))
    }
}

/// One edit phrase: contiguous new target positions sharing a weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub positions: Vec<usize>,
    pub weight: f64,
}

/// A negative token phrase substituted into the target prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativePrompt {
    pub phrase: TokenSequence,
    /// Target prompt with the first edit phrase replaced by `phrase`.
    pub prompt: TokenSequence,
    /// Positions of the negative tokens inside `prompt`.
    pub positions: Vec<usize>,
    /// `(source_pos, aux_pos)` pairs carried over from the target alignment.
    pub common: Vec<(usize, usize)>,
}

impl NegativePrompt {
    /// Positions whose maps come from the auxiliary pass itself.
    pub fn own_positions(&self) -> Vec<usize> {
        let common: std::collections::BTreeSet<_> = self.common.iter().map(|&(_, a)| a).collect();
        (0..self.prompt.len()).filter(|p| !common.contains(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub source: TokenSequence,
    pub target: TokenSequence,
    /// `(source_pos, target_pos)` pairs of the token alignment.
    pub common: Vec<(usize, usize)>,
    /// Target positions outside the alignment, ascending.
    pub new_target: Vec<usize>,
    pub groups: Vec<TokenGroup>,
    pub negatives: Vec<NegativePrompt>,
}

const WEIGHT_TOL: f64 = 1e-9;

/// Longest-common-subsequence alignment over token ids.
///
/// Ties between skipping a source token and skipping a target token are
/// broken by skipping the token with the larger id, which makes the matched
/// id multiset independent of argument order.
pub fn align_prompts(source: &TokenSequence, target: &TokenSequence) -> Result<PromptPair> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("align_prompts needs non-empty sequences"));
    }
    let common = lcs_pairs(&source.ids(), &target.ids());
    let matched: std::collections::BTreeSet<_> = common.iter().map(|&(_, t)| t).collect();
    let new_target: Vec<usize> = (0..target.len()).filter(|p| !matched.contains(p)).collect();
    let groups = contiguous_runs(&new_target);
    let n = groups.len();
    let groups = groups
        .into_iter()
        .map(|positions| TokenGroup {
            positions,
            weight: 1.0 / n as f64,
        })
        .collect();
    Ok(PromptPair {
        source: source.clone(),
        target: target.clone(),
        common,
        new_target,
        groups,
        negatives: Vec::new(),
    })
}

fn lcs_pairs(a: &[u32], b: &[u32]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix[i][j] = LCS length of a[i..] and b[j..]
    let mut suffix = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if a[i] == b[j] {
                suffix[i + 1][j + 1] + 1
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut pairs = Vec::with_capacity(suffix[0][0]);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            pairs.push((i, j));
            i += 1;
            j += 1;
            continue;
        }
        let skip_a = suffix[i + 1][j];
        let skip_b = suffix[i][j + 1];
        if skip_a > skip_b || (skip_a == skip_b && a[i] > b[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

fn contiguous_runs(positions: &[usize]) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for &p in positions {
        match runs.last_mut() {
            Some(run) if *run.last().unwrap() + 1 == p => run.push(p),
            _ => runs.push(vec![p]),
        }
    }
    runs
}

pub(crate) fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config(format!("weights must be finite and >= 0: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if !weights.is_empty() && (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::config(format!("weights must sum to 1, got {sum}")));
    }
    Ok(())
}

impl PromptPair {
    /// Replaces the per-group weights, keeping the default grouping.
    pub fn with_weights(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.groups.len() {
            return Err(Error::config(format!(
                "{} weights given for {} edit groups",
                weights.len(),
                self.groups.len()
            )));
        }
        validate_weights(weights)?;
        for (g, &w) in self.groups.iter_mut().zip(weights) {
            g.weight = w;
        }
        Ok(self)
    }

    /// Replaces the grouping of new tokens. Groups must be disjoint subsets of
    /// `new_target`; positions left out still take their maps from the editing
    /// branch but are not constrained.
    pub fn with_groups(mut self, groups: Vec<Vec<usize>>, weights: &[f64]) -> Result<Self> {
        if groups.len() != weights.len() {
            return Err(Error::config("group and weight counts differ"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            if g.is_empty() {
                return Err(Error::config("empty edit group"));
            }
            for p in g {
                if !self.new_target.contains(p) {
                    return Err(Error::config(format!("position {p} is not a new target token")));
                }
                if !seen.insert(*p) {
                    return Err(Error::config(format!("position {p} appears in two groups")));
                }
            }
        }
        validate_weights(weights)?;
        self.groups = groups
            .into_iter()
            .zip(weights)
            .map(|(positions, &weight)| TokenGroup { positions, weight })
            .collect();
        Ok(self)
    }

    pub fn common_target_positions(&self) -> Vec<usize> {
        self.common.iter().map(|&(_, t)| t).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.weight).collect()
    }

    /// Surface text of the new tokens, used as the edit phrase for scoring.
    pub fn edit_phrase(&self) -> String {
        self.new_target
            .iter()
            .map(|&p| self.target.tokens()[p].text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![0u8; self.target.len()];
        for &(s, t) in &self.common {
            if s >= self.source.len() || t >= self.target.len() {
                return Err(Error::contract(format!("common pair ({s}, {t}) out of range")));
            }
            covered[t] += 1;
        }
        for &t in &self.new_target {
            if t >= self.target.len() {
                return Err(Error::contract(format!("new position {t} out of range")));
            }
            covered[t] += 1;
        }
        if let Some(p) = covered.iter().position(|&c| c != 1) {
            return Err(Error::contract(format!(
                "target position {p} must be exactly one of common/new"
            )));
        }
        if self.groups.len() > 1 {
            validate_weights(&self.weights())?;
        }
        Ok(())
    }
}

/// Builds one auxiliary prompt per negative phrase by substituting it for the
/// first edit phrase of the target.
pub fn attach_negative_tokens(pair: PromptPair, negatives: &[TokenSequence]) -> Result<PromptPair> {
    if negatives.is_empty() {
        return Ok(pair);
    }
    let span = pair
        .groups
        .first()
        .map(|g| g.positions.clone())
        .ok_or_else(|| Error::contract("negative tokens need at least one new target token"))?;
    let start = span[0];
    let end = *span.last().unwrap() + 1;
    if end - start != span.len() {
        return Err(Error::contract("first edit group is not contiguous"));
    }
    let new_ids: Vec<u32> = span.iter().map(|&p| pair.target.tokens()[p].id).collect();

    let mut built = Vec::with_capacity(negatives.len());
    for neg in negatives {
        if neg.is_empty() {
            return Err(Error::contract("negative phrase tokenized to zero tokens"));
        }
        if let Some(tok) = neg.tokens().iter().find(|t| new_ids.contains(&t.id)) {
            return Err(Error::contract(format!(
                "negative token '{}' equals a new token and would cancel itself",
                tok.text
            )));
        }
        let t = pair.target.tokens();
        let prompt = TokenSequence::renumbered(
            t[..start]
                .iter()
                .cloned()
                .chain(neg.tokens().iter().cloned())
                .chain(t[end..].iter().cloned()),
        );
        let shift = |p: usize| if p < start { p } else { p - span.len() + neg.len() };
        let common = pair.common.iter().map(|&(s, tp)| (s, shift(tp))).collect();
        built.push(NegativePrompt {
            phrase: TokenSequence::renumbered(neg.tokens().iter().cloned()),
            positions: (start..start + neg.len()).collect(),
            prompt,
            common,
        });
    }
    Ok(PromptPair {
        negatives: built,
        ..pair
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(words: &str) -> TokenSequence {
        TokenSequence::from_pairs(words.split_whitespace().map(|w| {
            let id = w.bytes().fold(7u32, |h, b| h.wrapping_mul(31).wrapping_add(b as u32));
            (w.to_string(), id)
        }))
    }

    #[test]
    fn identical_prompts_are_all_common() {
        let s = seq("a green sofa");
        let pair = align_prompts(&s, &s).unwrap();
        assert_eq!(pair.common, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(pair.new_target.is_empty());
        assert!(pair.groups.is_empty());
    }

    #[test]
    fn single_word_swap() {
        let pair = align_prompts(&seq("a green sofa"), &seq("a blue sofa")).unwrap();
        assert_eq!(pair.common, vec![(0, 0), (2, 2)]);
        assert_eq!(pair.new_target, vec![1]);
        assert_eq!(pair.edit_phrase(), "blue");
        pair.validate().unwrap();
    }

    #[test]
    fn disjoint_vocabularies() {
        let pair = align_prompts(&seq("red car"), &seq("a blue house here")).unwrap();
        assert!(pair.common.is_empty());
        assert_eq!(pair.new_target, vec![0, 1, 2, 3]);
        assert_eq!(pair.groups.len(), 1);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(align_prompts(&TokenSequence::default(), &seq("a")).is_err());
        assert!(align_prompts(&seq("a"), &TokenSequence::default()).is_err());
    }

    #[test]
    fn phrases_group_contiguously() {
        let pair =
            align_prompts(&seq("a man in a jacket and hat"), &seq("a man in a denim jacket and red hat"))
                .unwrap();
        assert_eq!(pair.new_target, vec![4, 7]);
        assert_eq!(pair.groups.len(), 2);
        assert_eq!(pair.groups[0].weight, 0.5);
        let pair = pair.with_weights(&[0.3, 0.7]).unwrap();
        assert_eq!(pair.weights(), vec![0.3, 0.7]);
        assert!(pair.clone().with_weights(&[0.3, 0.3]).is_err());
        assert!(pair.with_weights(&[1.0]).is_err());
    }

    #[test]
    fn custom_groups_are_validated() {
        let pair = align_prompts(&seq("a car"), &seq("a red big car")).unwrap();
        assert_eq!(pair.groups.len(), 1);
        let split = pair.clone().with_groups(vec![vec![1], vec![2]], &[1.0, 0.0]).unwrap();
        assert_eq!(split.groups.len(), 2);
        assert!(pair.clone().with_groups(vec![vec![0]], &[1.0]).is_err());
        assert!(pair.clone().with_groups(vec![vec![1], vec![1]], &[0.5, 0.5]).is_err());
        assert!(pair.with_groups(vec![vec![1]], &[0.9]).is_err());
    }

    #[test]
    fn negative_substitution() {
        let pair = align_prompts(&seq("black T-shirt"), &seq("white T-shirt")).unwrap();
        let pair = attach_negative_tokens(pair, &[seq("black")]).unwrap();
        let neg = &pair.negatives[0];
        assert_eq!(neg.prompt.text(), "black T-shirt");
        assert_eq!(neg.positions, vec![0]);
        assert_eq!(neg.common, vec![(1, 1)]);
        assert_eq!(neg.own_positions(), vec![0]);
    }

    #[test]
    fn no_negatives_leaves_pair_unchanged() {
        let pair = align_prompts(&seq("a green sofa"), &seq("a blue sofa")).unwrap();
        assert_eq!(attach_negative_tokens(pair.clone(), &[]).unwrap(), pair);
    }

    #[test]
    fn two_negatives_share_the_substitution_position() {
        let pair = align_prompts(&seq("a man wears a T-shirt"), &seq("a man wears a white T-shirt")).unwrap();
        let pair = attach_negative_tokens(pair, &[seq("black"), seq("dark grey")]).unwrap();
        assert_eq!(pair.negatives.len(), 2);
        assert_eq!(pair.negatives[0].prompt.text(), "a man wears a black T-shirt");
        assert_eq!(pair.negatives[1].prompt.text(), "a man wears a dark grey T-shirt");
        assert_eq!(pair.negatives[0].positions, vec![4]);
        assert_eq!(pair.negatives[1].positions, vec![4, 5]);
        // the trailing common token shifts with the longer phrase
        assert_eq!(*pair.negatives[1].common.last().unwrap(), (4, 6));
    }

    #[test]
    fn negative_equal_to_new_token_is_rejected() {
        let pair = align_prompts(&seq("black T-shirt"), &seq("white T-shirt")).unwrap();
        assert!(attach_negative_tokens(pair, &[seq("white")]).is_err());
    }

    #[test]
    fn negatives_without_new_tokens_are_rejected() {
        let pair = align_prompts(&seq("a sofa"), &seq("a sofa")).unwrap();
        assert!(attach_negative_tokens(pair, &[seq("red")]).is_err());
    }

    fn words() -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(0u32..6, 1..10)
    }

    fn ids_seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_pairs(ids.iter().map(|&i| (format!("w{i}"), i)))
    }

    proptest! {
        #[test]
        fn alignment_partitions_target(a in words(), b in words()) {
            let pair = align_prompts(&ids_seq(&a), &ids_seq(&b)).unwrap();
            pair.validate().unwrap();
            for &(s, t) in &pair.common {
                prop_assert_eq!(a[s], b[t]);
            }
            prop_assert!(pair.common.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        }

        #[test]
        fn alignment_is_symmetric_on_matched_ids(a in words(), b in words()) {
            let ab = align_prompts(&ids_seq(&a), &ids_seq(&b)).unwrap();
            let ba = align_prompts(&ids_seq(&b), &ids_seq(&a)).unwrap();
            let mut m1: Vec<u32> = ab.common.iter().map(|&(s, _)| a[s]).collect();
            let mut m2: Vec<u32> = ba.common.iter().map(|&(s, _)| b[s]).collect();
            m1.sort();
            m2.sort();
            prop_assert_eq!(m1, m2);
        }

        #[test]
        fn realignment_is_idempotent(a in words(), b in words()) {
            let pair = align_prompts(&ids_seq(&a), &ids_seq(&b)).unwrap();
            let again = align_prompts(&pair.source, &pair.target).unwrap();
            prop_assert_eq!(pair, again);
        }
    }
}
