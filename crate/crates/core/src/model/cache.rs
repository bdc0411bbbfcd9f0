use crate::tensor::Tensor;

/// Per-layer attention keys (already rotated) and values for the tokens a
/// sequence has consumed so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    width: usize,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self { keys: vec![Vec::new(); n_layers], values: vec![Vec::new(); n_layers], width: d_model, len: 0 }
    }

    /// Number of tokens consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub(crate) fn layer(&self, layer: usize) -> Option<(Tensor, Tensor)> {
        if self.len == 0 {
            return None;
        }
        let shape = vec![self.len, self.width];
        Some((
            Tensor::new(shape.clone(), self.keys[layer].clone()).expect("cache shape"),
            Tensor::new(shape, self.values[layer].clone()).expect("cache shape"),
        ))
    }

    pub(crate) fn append(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    pub(crate) fn advance(&mut self, tokens: usize) {
        self.len += tokens;
        debug_assert!(self.keys.iter().all(|k| k.len() == self.len * self.width));
    }

    /// Drops every position at or after `len`. Speculative decoding uses this
    /// to discard keys computed for rejected draft tokens.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.width);
            v.truncate(len * self.width);
        }
        self.len = len;
    }
}
