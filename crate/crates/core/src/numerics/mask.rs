//! Boolean attention masks and the three mask families used by the drafter:
//! full attention over the layer axis, causal attention over tokens, and the
//! K-step cross-attention mask that hides target activations a drafted
//! position could not have seen at inference time.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    LsaFull,
    SaCausal,
    CaKStep,
}

impl AttentionMask {
    /// Builds a mask from a predicate; every row must allow at least one column.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!("empty mask {rows}x{cols}")));
        }
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let before = allowed.len();
            allowed.extend((0..cols).map(|j| f(i, j)));
            if !allowed[before..].iter().any(|&a| a) {
                return Err(Error::Contract(format!("mask row {i} allows no column")));
            }
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Result<Self> {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn causal(n: usize) -> Result<Self> {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Rows attend only within their own consecutive block of `block` rows.
    pub fn block_diagonal(blocks: usize, block: usize) -> Result<Self> {
        Self::from_fn(blocks * block, blocks * block, |i, j| i / block == j / block)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    /// Allowed column indices of row `i`, ascending.
    pub fn row_cols(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| a.then_some(j))
            .collect()
    }

    /// Additive score mask: 0 where allowed, negative infinity elsewhere.
    pub fn additive(&self) -> Vec<f32> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f32::NEG_INFINITY })
            .collect()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| !self.allowed(i, j) || j <= i))
    }
}

/// Builds one of the drafter masks.
///
/// `size` is the layer count for [`MaskKind::LsaFull`] and the sequence length
/// otherwise. For [`MaskKind::CaKStep`], prompt rows attend causally within
/// the prompt; every later row `i` sees the columns before the largest break
/// point `<= i`, with the prompt length acting as the first break.
pub fn make_masks(
    kind: MaskKind,
    size: usize,
    prompt_len: usize,
    break_points: &[usize],
) -> Result<AttentionMask> {
    if size == 0 {
        return Err(Error::Dimension("empty sequence".into()));
    }
    match kind {
        MaskKind::LsaFull => AttentionMask::full(size, size),
        MaskKind::SaCausal => AttentionMask::causal(size),
        MaskKind::CaKStep => {
            if prompt_len == 0 {
                return Err(Error::Dimension("k-step mask needs a non-empty prompt".into()));
            }
            let mut prev = prompt_len;
            for (n, &b) in break_points.iter().enumerate() {
                if b < prompt_len || (n > 0 && b <= prev) {
                    return Err(Error::Contract(format!(
                        "break points {break_points:?} must be strictly increasing and >= {prompt_len}"
                    )));
                }
                prev = b;
            }
            let visible = |i: usize| visible_prefix(i, prompt_len, break_points);
            AttentionMask::from_fn(size, size, |i, j| {
                if i < prompt_len {
                    j <= i
                } else {
                    j < visible(i)
                }
            })
        }
    }
}

/// Number of verified positions visible to row `i` (`i >= prompt_len`) under
/// the K-step schedule: the largest break point `<= i`, or the prompt length.
pub fn visible_prefix(i: usize, prompt_len: usize, break_points: &[usize]) -> usize {
    break_points
        .iter()
        .copied()
        .filter(|&b| b <= i)
        .max()
        .unwrap_or(prompt_len)
        .max(prompt_len)
}
