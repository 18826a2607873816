use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, MlpParams, VectorAttentionParams};
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::config::FeatureMode;

/// Every attention weight used by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    /// Points to first-level proxies, then first to second level.
    pub aggregate: [VectorAttentionParams<T>; 2],
    /// One entry per proxy-learning round.
    pub point_self: Vec<VectorAttentionParams<T>>,
    pub pixel_self: Vec<AttentionParams<T>>,
    pub cross_to_pixels: Vec<AttentionParams<T>>,
    pub cross_to_points: Vec<AttentionParams<T>>,
    /// First-level point features into the full pixel grid.
    pub grid_cross: AttentionParams<T>,
    /// Batch points into batch pixels before fine matching.
    pub fine_cross: AttentionParams<T>,
}

/// Shape of one tensor in the flat parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Real> ModelParams<T> {
    /// Averaging aggregation and silent residual layers: features pass
    /// through proxy learning unchanged.
    pub fn pass_through(d: usize, rounds: usize) -> Self {
        Self {
            aggregate: [VectorAttentionParams::averaging(d), VectorAttentionParams::averaging(d)],
            point_self: vec![VectorAttentionParams::silent(d); rounds],
            pixel_self: vec![AttentionParams::silent(d); rounds],
            cross_to_pixels: vec![AttentionParams::silent(d); rounds],
            cross_to_points: vec![AttentionParams::silent(d); rounds],
            grid_cross: AttentionParams::silent(d),
            fine_cross: AttentionParams::silent(d),
        }
    }

    pub fn random<R: Rng + ?Sized>(d: usize, rounds: usize, rng: &mut R) -> Self {
        Self {
            aggregate: [VectorAttentionParams::random(d, d, rng), VectorAttentionParams::random(d, d, rng)],
            point_self: (0..rounds).map(|_| VectorAttentionParams::random(d, d, rng)).collect(),
            pixel_self: (0..rounds).map(|_| AttentionParams::random(d, rng)).collect(),
            cross_to_pixels: (0..rounds).map(|_| AttentionParams::random(d, rng)).collect(),
            cross_to_points: (0..rounds).map(|_| AttentionParams::random(d, rng)).collect(),
            grid_cross: AttentionParams::random(d, rng),
            fine_cross: AttentionParams::random(d, rng),
        }
    }

    pub fn for_mode<R: Rng + ?Sized>(mode: FeatureMode, d: usize, rounds: usize, rng: &mut R) -> Self {
        match mode {
            FeatureMode::Oracle => Self::pass_through(d, rounds),
            FeatureMode::Random => Self::random(d, rounds, rng),
        }
    }

    pub fn rounds(&self) -> usize {
        self.point_self.len()
    }

    fn visit(&mut self, f: &mut dyn FnMut(String, usize, usize, &mut [T])) {
        fn mlp<T: Real>(prefix: &str, m: &mut MlpParams<T>, f: &mut dyn FnMut(String, usize, usize, &mut [T])) {
            for (i, l) in m.layers.iter_mut().enumerate() {
                let (r, c) = (l.weight.rows(), l.weight.cols());
                f(format!("{prefix}.{i}.weight"), r, c, l.weight.as_mut_slice());
                let n = l.bias.len();
                f(format!("{prefix}.{i}.bias"), 1, n, &mut l.bias);
            }
        }
        fn vector<T: Real>(
            prefix: &str,
            p: &mut VectorAttentionParams<T>,
            f: &mut dyn FnMut(String, usize, usize, &mut [T]),
        ) {
            mlp(&format!("{prefix}.gamma"), &mut p.gamma, f);
            mlp(&format!("{prefix}.phi"), &mut p.phi, f);
            mlp(&format!("{prefix}.psi"), &mut p.psi, f);
            mlp(&format!("{prefix}.alpha"), &mut p.alpha, f);
            mlp(&format!("{prefix}.theta"), &mut p.theta, f);
        }
        fn scalar<T: Real>(prefix: &str, p: &mut AttentionParams<T>, f: &mut dyn FnMut(String, usize, usize, &mut [T])) {
            for (name, m) in [("w_q", &mut p.w_q), ("w_k", &mut p.w_k), ("w_v", &mut p.w_v)] {
                let (r, c) = (m.rows(), m.cols());
                f(format!("{prefix}.{name}"), r, c, m.as_mut_slice());
            }
        }
        for (i, p) in self.aggregate.iter_mut().enumerate() {
            vector(&format!("aggregate.{i}"), p, f);
        }
        for (i, p) in self.point_self.iter_mut().enumerate() {
            vector(&format!("point_self.{i}"), p, f);
        }
        for (i, p) in self.pixel_self.iter_mut().enumerate() {
            scalar(&format!("pixel_self.{i}"), p, f);
        }
        for (i, p) in self.cross_to_pixels.iter_mut().enumerate() {
            scalar(&format!("cross_to_pixels.{i}"), p, f);
        }
        for (i, p) in self.cross_to_points.iter_mut().enumerate() {
            scalar(&format!("cross_to_points.{i}"), p, f);
        }
        scalar("grid_cross", &mut self.grid_cross, f);
        scalar("fine_cross", &mut self.fine_cross, f);
    }

    /// All values in a fixed order with the matching shapes.
    pub fn to_flat(&self) -> (Vec<T>, Vec<TensorShape>) {
        let mut copy = self.clone();
        let mut values = Vec::new();
        let mut shapes = Vec::new();
        copy.visit(&mut |name, rows, cols, data| {
            values.extend_from_slice(data);
            shapes.push(TensorShape { name, rows, cols });
        });
        (values, shapes)
    }

    /// Overwrites every tensor from a flat vector laid out as [`to_flat`](Self::to_flat).
    pub fn load_flat(&mut self, values: &[T], shapes: &[TensorShape]) -> Result<()> {
        let (_, expected) = self.to_flat();
        if expected != shapes {
            return Err(Error::DimensionMismatch("parameter layout differs".into()));
        }
        let total: usize = shapes.iter().map(|s| s.rows * s.cols).sum();
        if values.len() != total {
            return Err(Error::DimensionMismatch(format!("{} values for {total} parameters", values.len())));
        }
        let mut offset = 0;
        self.visit(&mut |_, _, _, data| {
            data.copy_from_slice(&values[offset..offset + data.len()]);
            offset += data.len();
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::<f64>::random(8, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let (values, shapes) = p.to_flat();
        let mut q = ModelParams::pass_through(8, 2);
        q.load_flat(&values, &shapes).unwrap();
        assert_eq!(p, q);
        assert!(q.load_flat(&values[1..], &shapes).is_err());
    }
}
