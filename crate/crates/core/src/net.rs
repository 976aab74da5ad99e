//! Compact dual-branch pose regressor.
//!
//! A 2-D branch encodes the slice, a 3-D branch encodes a cubic thumbnail of
//! the current volume. Each branch is three stride-2 3×3(×3) convolutions
//! with ReLU, followed by global average pooling. The pooled features, the
//! normalized slice position and a one-hot orientation code feed a two-layer
//! head whose output passes through `tanh` and is scaled to
//! `±max_deg` / `±max_mm`.

use autodiff::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rigid::RigidTransform;
use crate::volume::{Boundary, Orientation, Slice2D, VoxelGrid3D};

const EXTRA_FEATURES: usize = 4;

#[derive(Debug, Clone)]
pub struct LocalizationNet {
    pub channels: usize,
    pub hidden: usize,
    pub max_deg: f64,
    pub max_mm: f64,
    /// Parameter tensors, in the order of [`LocalizationNet::shapes`].
    pub params: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

/// Per-slice inputs of the 2-D branch and the extra features.
#[derive(Debug, Clone)]
pub struct SliceInput {
    /// `[1, 1, nv, nu]` image scaled to unit maximum.
    pub image: Vec<f64>,
    pub dims: [usize; 2],
    /// Slice position in `[−1, 1]` along the stack.
    pub position: f64,
    pub orientation: Orientation,
}

impl SliceInput {
    pub fn new(slice: &Slice2D, k: usize, n: usize, orientation: Orientation) -> Self {
        let peak = slice.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        let position = if n > 1 {
            2.0 * k as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        };
        Self {
            image: slice.data.iter().map(|v| v * scale).collect(),
            dims: slice.dims,
            position,
            orientation,
        }
    }
}

/// `grid` resampled on a `size³` lattice spanning its extent, scaled to
/// unit maximum, as a `[1, size, size, size]` tensor.
pub fn thumbnail(grid: &VoxelGrid3D, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size * size);
    let step = grid.dims.map(|d| {
        if size > 1 {
            (d as f64 - 1.0) / (size as f64 - 1.0)
        } else {
            0.0
        }
    });
    for k in 0..size {
        for j in 0..size {
            for i in 0..size {
                let p = [i as f64 * step[0], j as f64 * step[1], k as f64 * step[2]];
                out.push(grid.sample_index(p, Boundary::Clamp));
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

impl LocalizationNet {
    pub fn new(channels: usize, hidden: usize, max_deg: f64, max_mm: f64, seed: u64) -> Result<Self> {
        if channels == 0 || hidden == 0 {
            return Err(Error::input("network widths must be positive"));
        }
        if !(max_deg > 0.0 && max_mm > 0.0) {
            return Err(Error::input("output bounds must be positive"));
        }
        let c = channels;
        let feat = 2 * c + EXTRA_FEATURES;
        let mut shapes = Vec::new();
        for (cin, kd) in [(1, 1), (c, 1), (c, 1), (1, 3), (c, 3), (c, 3)] {
            shapes.push(vec![c, cin, kd, 3, 3]);
            shapes.push(vec![c]);
        }
        shapes.push(vec![hidden, feat]);
        shapes.push(vec![hidden]);
        shapes.push(vec![6, hidden]);
        shapes.push(vec![6]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                if s.len() == 1 || i >= last {
                    // biases and the output layer start at zero
                    return vec![0.0; n];
                }
                let fan_in: usize = s[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            })
            .collect();
        Ok(Self {
            channels,
            hidden,
            max_deg,
            max_mm,
            params,
            shapes,
        })
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn encoder(
        tape: &mut Tape,
        mut x: Var,
        weights: &[Var],
        spatial3d: bool,
    ) -> Result<Var> {
        let (stride, pad) = if spatial3d {
            ([2, 2, 2], [1, 1, 1])
        } else {
            ([1, 2, 2], [0, 1, 1])
        };
        for pair in weights.chunks_exact(2) {
            x = tape.conv(x, pair[0], stride, pad)?;
            x = tape.add_bias(x, pair[1])?;
            x = tape.relu(x);
        }
        Ok(tape.channel_mean(x)?)
    }

    /// Records the forward pass; returns the `[6]` pose node and the
    /// parameter leaves (as `param` nodes when `trainable`).
    pub fn record(
        &self,
        tape: &mut Tape,
        input: &SliceInput,
        thumb: &[f64],
        thumb_size: usize,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = self
            .params
            .iter()
            .zip(&self.shapes)
            .map(|(v, s)| {
                if trainable {
                    tape.param(s, v.clone())
                } else {
                    tape.constant(s, v.clone())
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let [nu, nv] = input.dims;
        let img = tape.constant(&[1, 1, nv, nu], input.image.clone())?;
        let t = thumb_size;
        if thumb.len() != t * t * t {
            return Err(Error::input("thumbnail size mismatch"));
        }
        let vol = tape.constant(&[1, t, t, t], thumb.to_vec())?;
        let f2 = Self::encoder(tape, img, &vars[0..6], false)?;
        let f3 = Self::encoder(tape, vol, &vars[6..12], true)?;
        let mut extra = vec![input.position, 0.0, 0.0, 0.0];
        let slot = match input.orientation {
            Orientation::Axial => 1,
            Orientation::Coronal => 2,
            Orientation::Sagittal => 3,
        };
        extra[slot] = 1.0;
        let extra = tape.constant(&[EXTRA_FEATURES], extra)?;
        let feat = tape.concat(&[f2, f3, extra], 0)?;
        let h = tape.channel_mix(vars[12], feat)?;
        let h = tape.add_bias(h, vars[13])?;
        let h = tape.relu(h);
        let o = tape.channel_mix(vars[14], h)?;
        let o = tape.add_bias(o, vars[15])?;
        let o = tape.tanh(o);
        let (a, m) = (self.max_deg, self.max_mm);
        let bounds = tape.constant(&[6], vec![a, a, a, m, m, m])?;
        let pose = tape.mul(o, bounds)?;
        Ok((pose, vars))
    }

    /// Pose hypothesis for one slice.
    pub fn predict_transform(
        &self,
        input: &SliceInput,
        thumb: &[f64],
        thumb_size: usize,
    ) -> Result<RigidTransform> {
        let mut tape = Tape::new();
        let (pose, _) = self.record(&mut tape, input, thumb, thumb_size, false)?;
        let p = tape.value(pose);
        Ok(RigidTransform::from_params([p[0], p[1], p[2], p[3], p[4], p[5]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64) -> SliceInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16 * 12).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = Slice2D::new([16, 12], [1.0, 1.0], 2.0, data).unwrap();
        SliceInput::new(&s, 3, 8, Orientation::Coronal)
    }

    #[test]
    fn zero_head_predicts_identity() {
        let net = LocalizationNet::new(8, 16, 15.0, 15.0, 1).unwrap();
        let thumb = vec![0.5; 8 * 8 * 8];
        let t = net.predict_transform(&input(0), &thumb, 8).unwrap();
        assert_eq!(t.params(), [0.0; 6]);
    }

    #[test]
    fn output_is_bounded() {
        let mut net = LocalizationNet::new(8, 16, 15.0, 10.0, 2).unwrap();
        let n = net.params.len();
        // huge output layer saturates the tanh
        net.params[n - 2].iter_mut().enumerate().for_each(|(i, w)| *w = if i % 2 == 0 { 1e4 } else { -1e4 });
        let thumb = vec![0.5; 8 * 8 * 8];
        let p = net.predict_transform(&input(1), &thumb, 8).unwrap().params();
        for (i, v) in p.iter().enumerate() {
            let bound = if i < 3 { 15.0 } else { 10.0 };
            assert!(v.abs() <= bound + 1e-12, "{p:?}");
        }
    }

    #[test]
    fn gradients_reach_every_layer() {
        let mut net = LocalizationNet::new(4, 8, 15.0, 15.0, 3).unwrap();
        let n = net.params.len();
        net.params[n - 2].iter_mut().for_each(|w| *w = 0.1);
        let thumb: Vec<f64> = (0..512).map(|i| (i % 7) as f64 / 7.0).collect();
        let mut tape = Tape::new();
        let (pose, vars) = net.record(&mut tape, &input(2), &thumb, 8, true).unwrap();
        let loss = tape.sum(pose);
        tape.backward(loss).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let g = tape.grad(*v).unwrap();
            assert!(g.iter().any(|x| *x != 0.0), "layer {i} has no gradient");
        }
    }

    #[test]
    fn thumbnail_spans_grid() {
        let mut g = VoxelGrid3D::zeros([5, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = (i % 5) as f64;
        }
        let t = thumbnail(&g, 3);
        assert_eq!(t.len(), 27);
        assert!((t[0] - 0.0).abs() < 1e-12 && (t[1] - 0.5).abs() < 1e-12 && (t[2] - 1.0).abs() < 1e-12);
    }
}
