use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{ModelConfig, RowsOut};

/// Per-layer key and value rows for the verified prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    kv_width: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize, kv_width: usize) -> Self {
        Self {
            kv_width,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer_count(&self) -> usize {
        self.keys.len()
    }

    pub fn kv_width(&self) -> usize {
        self.kv_width
    }

    /// Keys of 0-based layer `l`, row-major `[len, kv_width]`.
    pub fn keys(&self, l: usize) -> &[f32] {
        &self.keys[l]
    }

    pub fn values(&self, l: usize) -> &[f32] {
        &self.values[l]
    }

    pub fn key_row(&self, l: usize, pos: usize) -> &[f32] {
        &self.keys[l][pos * self.kv_width..(pos + 1) * self.kv_width]
    }

    pub fn value_row(&self, l: usize, pos: usize) -> &[f32] {
        &self.values[l][pos * self.kv_width..(pos + 1) * self.kv_width]
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self, l: usize) -> &mut [f32] {
        &mut self.values[l]
    }

    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.len {
            return Err(Error::Contract(format!(
                "cannot truncate cache of {} to {len}",
                self.len
            )));
        }
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.kv_width);
            v.truncate(len * self.kv_width);
        }
        self.len = len;
        Ok(())
    }

    fn append(&mut self, keys: &[Tensor<f32>], values: &[Tensor<f32>], rows: &[usize]) {
        for l in 0..self.keys.len() {
            for &r in rows {
                self.keys[l].extend_from_slice(keys[l].row(r));
                self.values[l].extend_from_slice(values[l].row(r));
            }
        }
        self.len += rows.len();
    }
}

/// Target state after a verified prefix: KV cache, activation taps and tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub cache: KvCache,
    embed: usize,
    /// Tap level `l` (1-based, up to `L + 1`) lives at index `l - 1`.
    taps: Vec<Vec<f32>>,
    pub tokens: Vec<u32>,
}

impl StateSnapshot {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            cache: KvCache::new(config.layers, config.kv_embed),
            embed: config.embed,
            taps: vec![Vec::new(); config.layers + 1],
            tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Activation at tap `level` for position `pos`.
    pub fn tap(&self, level: usize, pos: usize) -> &[f32] {
        &self.taps[level - 1][pos * self.embed..(pos + 1) * self.embed]
    }

    /// `[end - start, embed]` rows of tap `level`.
    pub fn tap_rows(&self, level: usize, start: usize, end: usize) -> Tensor<f32> {
        let data = self.taps[level - 1][start * self.embed..end * self.embed].to_vec();
        Tensor::new(vec![end - start, self.embed], data).expect("tap rows")
    }

    pub fn truncate(&mut self, len: usize) -> Result<()> {
        self.cache.truncate(len)?;
        for t in &mut self.taps {
            t.truncate(len * self.embed);
        }
        self.tokens.truncate(len);
        Ok(())
    }

    /// Commits the selected rows of a forward output, in order.
    pub fn append_rows(&mut self, out: &RowsOut, rows: &[usize], tokens: &[u32]) -> Result<()> {
        if rows.len() != tokens.len() || out.taps.len() != self.taps.len() {
            return Err(Error::Dimension(format!(
                "committing {} rows with {} tokens",
                rows.len(),
                tokens.len()
            )));
        }
        self.cache.append(&out.keys, &out.values, rows);
        for (dst, src) in self.taps.iter_mut().zip(&out.taps) {
            for &r in rows {
                dst.extend_from_slice(src.row(r));
            }
        }
        self.tokens.extend_from_slice(tokens);
        Ok(())
    }
}
