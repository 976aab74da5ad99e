//! Under-parameterized deep decoder mapping a fixed noise tensor to a volume.
//!
//! Each level doubles the spatial size (trilinear), mixes channels with a
//! 1×1×1 map, applies ReLU and per-channel normalization. A final 1×1×1 map
//! to one channel and a sigmoid produce values in (0, 1).

use autodiff::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub levels: usize,
    pub channels: usize,
    /// Upper bound of the uniform seed noise `z ~ U(0, z_scale)`.
    pub z_scale: f64,
    /// Perturbation standard deviation as a multiple of `std(z)`.
    pub sigma_v_factor: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            channels: 64,
            z_scale: 0.1,
            sigma_v_factor: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeepDecoder {
    pub levels: usize,
    pub channels: usize,
    /// Output `[nx, ny, nz]`.
    pub out_dims: [usize; 3],
    /// Seed noise `[C, nz/2^L, ny/2^L, nx/2^L]`; never modified.
    z: Vec<f64>,
    pub sigma_v: f64,
    /// Per level: mix `[C, C]`, gain `[C]`, bias `[C]`; then the output
    /// projection `[1, C]` and its bias `[1]`.
    pub params: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl DeepDecoder {
    pub fn new(out_dims: [usize; 3], cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        let f = 1usize
            .checked_shl(cfg.levels as u32)
            .filter(|_| cfg.levels < 16)
            .ok_or_else(|| Error::input("too many decoder levels"))?;
        if cfg.channels == 0 {
            return Err(Error::input("decoder needs at least one channel"));
        }
        if out_dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::input(format!(
                "output dims {out_dims:?} are not positive multiples of 2^{} = {f}",
                cfg.levels
            )));
        }
        if !(cfg.z_scale > 0.0 && cfg.sigma_v_factor >= 0.0) {
            return Err(Error::input("z_scale must be positive and sigma_v_factor non-negative"));
        }
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zn = c * out_dims.iter().map(|d| d / f).product::<usize>();
        let z: Vec<f64> = (0..zn).map(|_| rng.random_range(0.0..cfg.z_scale)).collect();
        let mean = z.iter().sum::<f64>() / zn as f64;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / zn as f64).sqrt();
        let mut shapes = Vec::new();
        let mut params = Vec::new();
        let bound = (3.0 / c as f64).sqrt();
        for _ in 0..cfg.levels {
            shapes.push(vec![c, c]);
            params.push((0..c * c).map(|_| rng.random_range(-bound..bound)).collect());
            shapes.push(vec![c]);
            params.push(vec![1.0; c]);
            shapes.push(vec![c]);
            params.push(vec![0.0; c]);
        }
        shapes.push(vec![1, c]);
        params.push((0..c).map(|_| rng.random_range(-bound..bound)).collect());
        shapes.push(vec![1]);
        params.push(vec![0.0]);
        Ok(Self {
            levels: cfg.levels,
            channels: c,
            out_dims,
            z,
            sigma_v: cfg.sigma_v_factor * std,
            params,
            shapes,
        })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn num_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Parameter count over output voxel count.
    pub fn param_ratio(&self) -> f64 {
        self.num_params() as f64 / self.num_voxels() as f64
    }

    fn z_shape(&self) -> [usize; 4] {
        let f = 1 << self.levels;
        let [nx, ny, nz] = self.out_dims;
        [self.channels, nz / f, ny / f, nx / f]
    }

    /// Records the decoder; returns the `[nz, ny, nx]` output node and the
    /// parameter leaves. With `perturb`, fresh `v ~ N(0, σ_v²)` is added to
    /// `z`.
    pub fn record(
        &self,
        tape: &mut Tape,
        perturb: Option<&mut ChaCha8Rng>,
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
        let out = self.forward(tape, &vars, perturb)?;
        Ok((out, vars))
    }

    /// Decoder output for parameter nodes `vars` (shapes as in
    /// [`DeepDecoder::shapes`]).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], perturb: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if vars.len() != self.shapes.len() {
            return Err(Error::input("decoder parameter count mismatch"));
        }
        let mut input = self.z.clone();
        if let Some(rng) = perturb {
            if self.sigma_v > 0.0 {
                let normal = Normal::new(0.0, self.sigma_v).expect("positive std");
                input.iter_mut().for_each(|v| *v += normal.sample(rng));
            }
        }
        let mut x = tape.constant(&self.z_shape(), input)?;
        for l in 0..self.levels {
            x = tape.upsample2x(x)?;
            x = tape.channel_mix(vars[3 * l], x)?;
            x = tape.relu(x);
            x = tape.channel_norm(x, vars[3 * l + 1], vars[3 * l + 2], NORM_EPS)?;
        }
        let n = vars.len();
        x = tape.channel_mix(vars[n - 2], x)?;
        x = tape.add_bias(x, vars[n - 1])?;
        x = tape.sigmoid(x);
        let [nx, ny, nz] = self.out_dims;
        Ok(tape.reshape(x, &[nz, ny, nx])?)
    }

    /// Output values in `[k, j, i]` order without perturbation.
    pub fn decode(&self) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (out, _) = self.record(&mut tape, None, false)?;
        Ok(tape.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DeepDecoder {
        let cfg = DecoderConfig {
            levels: 2,
            channels: 4,
            ..DecoderConfig::default()
        };
        DeepDecoder::new([8, 4, 12], &cfg, 7).unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let d = small();
        let v = d.decode().unwrap();
        assert_eq!(v.len(), 8 * 4 * 12);
        assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0));
        assert_eq!(d.z().len(), 4 * 2 * 1 * 3);
    }

    #[test]
    fn deterministic_without_perturbation() {
        let d = small();
        assert_eq!(d.decode().unwrap(), d.decode().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let (a, _) = d.record(&mut tape, Some(&mut rng), false).unwrap();
        let (b, _) = d.record(&mut tape, Some(&mut rng), false).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn zero_sigma_v_is_pure() {
        let cfg = DecoderConfig {
            levels: 1,
            channels: 3,
            sigma_v_factor: 0.0,
            ..DecoderConfig::default()
        };
        let d = DeepDecoder::new([4, 4, 4], &cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let (a, _) = d.record(&mut tape, Some(&mut rng), false).unwrap();
        let (b, _) = d.record(&mut tape, Some(&mut rng), false).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn default_preset_is_under_parameterized() {
        let d = DeepDecoder::new([64; 3], &DecoderConfig::default(), 0).unwrap();
        // four levels of 64·64 + 2·64, plus 64 + 1 for the projection
        assert_eq!(d.num_params(), 4 * (64 * 64 + 128) + 65);
        assert!(d.param_ratio() < 1.0);
    }

    #[test]
    fn rejects_indivisible_dims() {
        let cfg = DecoderConfig::default();
        assert!(DeepDecoder::new([64, 64, 60], &cfg, 0).is_err());
    }
}
