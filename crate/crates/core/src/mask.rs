//! Additive attention masks with entries in {0, −∞}.

use crate::error::{Error, Result};

/// Additive value standing in for −∞. Large enough that `exp` underflows to
/// exactly zero, finite so that gradients never see `−∞ · 0`.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from a visibility predicate. Every row must see something.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut visible = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            visible.extend((0..cols).map(|j| f(i, j)));
        }
        let mask = AttentionMask { rows, cols, visible };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&v| v) {
                return Err(Error::InvalidMask { row: i });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.visible[i * self.cols..(i + 1) * self.cols]
    }

    /// The additive entry: 0 for visible, [`MASKED`] otherwise.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if self.is_visible(i, j) {
            0.0
        } else {
            MASKED
        }
    }

    pub fn masked_count(&self) -> usize {
        self.visible.iter().filter(|&&v| !v).count()
    }
}

/// Full bidirectional visibility over `n` positions.
pub fn build_encoder_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Contract("encoder mask needs n >= 1".into()));
    }
    AttentionMask::from_fn(n, n, |_, _| true)
}

/// Decoder visibility: every reused column is visible, decoder column `j`
/// (decoder-relative) is visible to row `i` iff `j <= i`.
pub fn build_decoder_mask(reuse_len: usize, dec_len: usize) -> Result<AttentionMask> {
    if dec_len == 0 {
        return Err(Error::Contract("decoder mask needs dec_len >= 1".into()));
    }
    AttentionMask::from_fn(dec_len, reuse_len + dec_len, |i, j| {
        j < reuse_len || j - reuse_len <= i
    })
}
