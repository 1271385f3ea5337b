use super::TrainingInstance;
use crate::error::{Error, Result};

/// Anything that occupies a number of (unpadded) token positions in a batch.
pub trait TokenCount {
    fn token_count(&self) -> usize;
}

impl TokenCount for TrainingInstance {
    fn token_count(&self) -> usize {
        self.len()
    }
}

/// A batch whose unpadded token total stays within `token_budget`.
/// Members are padded to `padded_len`; positions at or beyond a member's
/// own length are padding and must be masked out of attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBudgetBatch<T = TrainingInstance> {
    pub items: Vec<T>,
    pub token_budget: usize,
    pub padded_len: usize,
}

impl<T: TokenCount> TokenBudgetBatch<T> {
    fn new(items: Vec<T>, token_budget: usize) -> Self {
        let padded_len = items.iter().map(T::token_count).max().unwrap_or(0);
        TokenBudgetBatch {
            items,
            token_budget,
            padded_len,
        }
    }

    pub fn unpadded_tokens(&self) -> usize {
        self.items.iter().map(T::token_count).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.items.iter().map(T::token_count).collect()
    }

    /// Row-major `items.len() x padded_len` mask; `true` marks real tokens.
    pub fn attention_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.items.len() * self.padded_len);
        for item in &self.items {
            let n = item.token_count();
            mask.extend((0..self.padded_len).map(|p| p < n));
        }
        mask
    }
}

/// Greedy fill: a batch is emitted as soon as the next item would push the
/// unpadded total past `token_budget`.
pub fn batch_by_tokens<T: TokenCount>(
    items: impl IntoIterator<Item = T>,
    token_budget: usize,
) -> Result<Vec<TokenBudgetBatch<T>>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for item in items {
        let n = item.token_count();
        if n > token_budget {
            return Err(Error::Argument(format!(
                "instance of {n} tokens exceeds the token budget {token_budget}"
            )));
        }
        if used + n > token_budget {
            out.push(TokenBudgetBatch::new(std::mem::take(&mut current), token_budget));
            used = 0;
        }
        used += n;
        current.push(item);
    }
    if !current.is_empty() {
        out.push(TokenBudgetBatch::new(current, token_budget));
    }
    Ok(out)
}

/// Fixed number of sequences per batch (the last batch may be smaller).
pub fn batch_by_count<T: TokenCount>(
    items: impl IntoIterator<Item = T>,
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<TokenBudgetBatch<T>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let budget = batch_size * max_len;
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(batch_size);
    for item in items {
        current.push(item);
        if current.len() == batch_size {
            out.push(TokenBudgetBatch::new(std::mem::take(&mut current), budget));
        }
    }
    if !current.is_empty() {
        out.push(TokenBudgetBatch::new(current, budget));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Len(usize);

    impl TokenCount for Len {
        fn token_count(&self) -> usize {
            self.0
        }
    }

    #[test]
    fn greedy_fill_matches_example() {
        let batches = batch_by_tokens([512, 512, 512].map(Len), 1024).unwrap();
        let shape: Vec<Vec<usize>> = batches
            .iter()
            .map(|b| b.items.iter().map(|l| l.0).collect())
            .collect();
        assert_eq!(shape, vec![vec![512, 512], vec![512]]);
    }

    #[test]
    fn oversized_item_is_an_error() {
        assert!(batch_by_tokens([Len(9)], 8).is_err());
    }

    #[test]
    fn padding_mask_marks_tail() {
        let b = &batch_by_tokens([Len(2), Len(3)], 10).unwrap()[0];
        assert_eq!(b.padded_len, 3);
        assert_eq!(b.attention_mask(), vec![true, true, false, true, true, true]);
    }

    proptest! {
        #[test]
        fn batches_respect_budget(lens in proptest::collection::vec(1usize..64, 0..200), budget in 64usize..512) {
            let total: usize = lens.iter().sum();
            let batches = batch_by_tokens(lens.into_iter().map(Len), budget).unwrap();
            let mut seen = 0;
            for b in &batches {
                prop_assert!(!b.items.is_empty());
                prop_assert!(b.unpadded_tokens() <= budget);
                seen += b.unpadded_tokens();
            }
            prop_assert_eq!(seen, total);
        }
    }
}
