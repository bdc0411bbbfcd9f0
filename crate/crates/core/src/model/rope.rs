//! Rotary position embedding with linear position interpolation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotation angle of dimension pair `pair` at position `position`:
/// `(position / scale) · base^(−2·pair / head_dim)`.
pub fn rope_angle(position: usize, pair: usize, head_dim: usize, base: f64, scale: f64) -> f64 {
    (position as f64 / scale) * base.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Per-row cosine/sine tables laid out as `[row · head_dim/2 + pair]`.
pub struct RopeTables {
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

impl RopeTables {
    pub fn new(positions: &[usize], head_dim: usize, base: f64, scale: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary positions need an even head dim, got {head_dim}")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &m in positions {
            for i in 0..half {
                let a = rope_angle(m, i, head_dim, base, scale);
                cos.push(a.cos() as f32);
                sin.push(a.sin() as f32);
            }
        }
        Ok(Self { cos, sin })
    }
}

/// Rotates the rows of `x[rows, n_heads·head_dim]`, row `r` sitting at
/// `positions[r]`. Apply to queries and keys alike.
pub fn apply_rope(x: &Tensor, positions: &[usize], n_heads: usize, base: f64, scale: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != positions.len() || n_heads == 0 || !shape[1].is_multiple_of(n_heads) {
        return Err(Error::Dimension(format!(
            "rope input {shape:?} does not match {} positions and {n_heads} heads",
            positions.len()
        )));
    }
    let tables = RopeTables::new(positions, shape[1] / n_heads, base, scale)?;
    let mut g = crate::tensor::Graph::new();
    let v = g.constant(x.clone());
    let out = g.rope(v, n_heads, &tables.cos, &tables.sin)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::dot;
    use rand::SeedableRng;

    #[test]
    fn position_zero_is_identity() {
        let x = Tensor::from_rows(&[&[0.3, -1.2, 2.0, 0.7]]);
        for (base, scale) in [(10_000.0, 1.0), (500.0, 4.0)] {
            assert_eq!(apply_rope(&x, &[0], 1, base, scale).unwrap(), x);
        }
    }

    #[test]
    fn first_pair_angle_at_position_one() {
        assert_eq!(rope_angle(1, 0, 16, 10_000.0, 1.0), 1.0);
        let x = Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0]]);
        let r = apply_rope(&x, &[1], 1, 10_000.0, 1.0).unwrap();
        assert!((r.data()[0] - 1f32.cos()).abs() < 1e-7);
        assert!((r.data()[1] - 1f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn interpolation_halves_positions() {
        for i in 0..4 {
            assert_eq!(rope_angle(2, i, 8, 10_000.0, 2.0), rope_angle(1, i, 8, 10_000.0, 1.0));
        }
    }

    #[test]
    fn odd_head_dim_is_rejected() {
        let x = Tensor::zeros(&[1, 6]);
        assert!(matches!(apply_rope(&x, &[0], 2, 10_000.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn scores_depend_on_relative_position() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 8], 1.0, &mut rng);
        for scale in [1.0, 2.0, 3.0] {
            let score = |m: usize, n: usize| {
                let qr = apply_rope(&q, &[m], 1, 10_000.0, scale).unwrap();
                let kr = apply_rope(&k, &[n], 1, 10_000.0, scale).unwrap();
                dot(qr.data(), kr.data())
            };
            let base = score(7, 3);
            for shift in [1, 5, 20] {
                assert!((score(7 + shift, 3 + shift) - base).abs() < 1e-4);
            }
        }
    }
}
