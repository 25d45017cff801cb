//! Turn-level attention mask: every `[T]` row sees only its own span, all
//! other rows see the whole sequence.

use ndarray::Array2;

use crate::preprocess::EncodedSequence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    /// `allow[[q, k]]`: query position `q` may attend to key position `k`.
    pub allow: Array2<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        AttentionMask {
            allow: Array2::from_elem((n, n), true),
        }
    }

    pub fn len(&self) -> usize {
        self.allow.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.allow.nrows() == 0
    }

    pub fn row_sum(&self, row: usize) -> usize {
        self.allow.row(row).iter().filter(|&&b| b).count()
    }

    /// 0/1 grid, one row per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in self.allow.rows() {
            out.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

/// Builds the mask for `seq`. With `enabled == false` (the no-mask ablation)
/// the result is all-true.
pub fn build_turn_mask(seq: &EncodedSequence, enabled: bool) -> AttentionMask {
    let mut mask = AttentionMask::full(seq.len());
    if !enabled {
        return mask;
    }
    for (&tau, &(start, end)) in seq.tau_positions.iter().zip(&seq.spans) {
        let mut row = mask.allow.row_mut(tau);
        row.fill(false);
        row.slice_mut(ndarray::s![start..end]).fill(true);
    }
    mask
}

/// Extends `mask` to `padded_len` and disallows every key column at or past
/// `valid_len`.
pub fn apply_padding(mask: &AttentionMask, valid_len: usize, padded_len: usize) -> AttentionMask {
    assert!(
        valid_len <= padded_len,
        "valid_len {valid_len} > padded_len {padded_len}"
    );
    let n = mask.len();
    let mut allow = Array2::from_elem((padded_len, padded_len), true);
    for q in 0..padded_len {
        for k in 0..padded_len {
            let inner = if q < n && k < n {
                mask.allow[[q, k]]
            } else {
                true
            };
            allow[[q, k]] = inner && k < valid_len;
        }
    }
    AttentionMask { allow }
}
