//! Super-resolution reconstruction: a deep decoder fitted to the observed
//! slices through the forward model, with total-variation regularization,
//! learnable per-slice outlier weights and intensity scales.

use autodiff::{adam_step, Adam, AdamConfig, AdamState, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{draw_psf_offsets, PsfLattice, PsfMode, PsfModel, SliceGeometry, SliceSampler};
use crate::decoder::{DecoderConfig, DeepDecoder};
use crate::error::{Error, Result};
use crate::simulate::derive_seed;
use crate::volume::{Boundary, SliceStack, VoxelGrid3D};

/// Smoothing of `|·|` in the total variation.
pub const TV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `mse/(2w²) + log w` per slice with learnable `w = exp(ρ)`.
    GaussianOutlier,
    /// `mse/2` per slice.
    PlainL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrrConfig {
    /// TV weight `λ`.
    pub tv_weight: f64,
    /// Perturb the decoder input with fresh noise every epoch.
    pub perturb: bool,
    pub epochs: usize,
    pub lr: f64,
    /// Decoder step decays along a half cosine from `lr` to
    /// `lr·lr_final_frac` over `epochs`.
    pub lr_final_frac: f64,
    /// Step of the log outlier weights.
    pub rho_lr: f64,
    /// Step of the intensity scales.
    pub scale_lr: f64,
    /// Bound on the relative change of an intensity scale per epoch.
    pub scale_clip: f64,
    pub learn_intensity: bool,
    /// Stack whose first slice keeps its intensity scale fixed.
    pub target_stack: usize,
    pub weight_floor: f64,
    pub loss: LossForm,
    /// Average (rather than sum) squared residuals over pixels.
    pub mean_residual: bool,
    /// Observed intensities are scaled so their maximum maps here.
    pub intensity_peak: f64,
    pub psf: PsfMode,
    pub pixel_stride: usize,
    pub decoder: DecoderConfig,
    /// Outlier-weight snapshot interval in the trace (0 disables).
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for SrrConfig {
    fn default() -> Self {
        Self {
            tv_weight: 1e-4,
            perturb: true,
            epochs: 250,
            lr: 0.01,
            lr_final_frac: 0.1,
            rho_lr: 0.03,
            scale_lr: 1e-3,
            scale_clip: 0.1,
            learn_intensity: true,
            target_stack: 0,
            weight_floor: 1e-4,
            loss: LossForm::GaussianOutlier,
            mean_residual: true,
            intensity_peak: 0.9,
            psf: PsfMode::Deterministic {
                lattice: PsfLattice::Uniform,
                points: [3, 3, 9],
            },
            pixel_stride: 1,
            decoder: DecoderConfig::default(),
            snapshot_every: 50,
            seed: 0,
        }
    }
}

impl SrrConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tv_weight >= 0.0) {
            return bad("tv_weight must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.rho_lr >= 0.0 && self.scale_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_final_frac > 0.0 && self.lr_final_frac <= 1.0) {
            return bad("lr_final_frac must lie in (0, 1]");
        }
        if !(self.scale_clip > 0.0 && self.scale_clip < 1.0) {
            return bad("scale_clip must lie in (0, 1)");
        }
        if !(self.weight_floor > 0.0) {
            return bad("weight_floor must be positive");
        }
        if !(self.intensity_peak > 0.0 && self.intensity_peak < 1.0) {
            return bad("intensity_peak must lie in (0, 1)");
        }
        if self.pixel_stride == 0 {
            return bad("pixel_stride must be at least 1");
        }
        if !(self.decoder.sigma_v_factor >= 0.0) {
            return bad("sigma_v_factor must be non-negative");
        }
        Ok(())
    }
}

/// Anisotropic TV of a `[nz, ny, nx]` node: `Σ_axis Σ |forward difference|`
/// with `|·|` smoothed by [`TV_EPS`]. Axes of length one contribute nothing.
pub fn record_total_variation(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut total: Option<Var> = None;
    for axis in 0..shape.len() {
        if shape[axis] < 2 {
            continue;
        }
        let d = tape.forward_diff(x, axis)?;
        let a = tape.abs_smooth(d, TV_EPS);
        let s = tape.sum(a);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar_const(0.0)))
}

/// [`record_total_variation`] evaluated on a volume.
pub fn total_variation(grid: &VoxelGrid3D) -> f64 {
    let mut tape = Tape::new();
    let x = tape
        .constant(&grid.tensor_shape(), grid.data.clone())
        .expect("grid data matches its shape");
    let tv = record_total_variation(&mut tape, x).expect("valid volume node");
    tape.scalar(tv)
}

/// Per-slice residual term. With `rho = Some(ρ)`:
/// `r/(2w²) + log w`, `w = exp(ρ)`; otherwise `r/2`. `r` is the mean (or
/// sum) of squared residuals.
pub fn record_residual_loss(
    tape: &mut Tape,
    observed: Var,
    predicted: Var,
    rho: Option<Var>,
    mean: bool,
) -> Result<Var> {
    let d = tape.sub(predicted, observed)?;
    let sq = tape.square(d);
    let r = if mean { tape.mean(sq) } else { tape.sum(sq) };
    match rho {
        Some(rho) => {
            let m2 = tape.scalar_mul(rho, -2.0);
            let inv = tape.exp(m2);
            let t = tape.mul(r, inv)?;
            let t = tape.scalar_mul(t, 0.5);
            Ok(tape.add(t, rho)?)
        }
        None => Ok(tape.scalar_mul(r, 0.5)),
    }
}

/// Minimizes the outlier term over `w` for frozen mean squared residuals
/// (Adam on `ρ = log w`, step decaying geometrically to `lr·1e-3`).
pub fn fit_outlier_weights(mse: &[f64], steps: usize, lr: f64, floor: f64) -> Result<Vec<f64>> {
    if mse.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::input("squared residuals must be non-negative"));
    }
    let mut rho = vec![0.0; mse.len()];
    let mut state = AdamState::new(mse.len());
    let lo = floor.ln();
    for it in 0..steps {
        let grad: Vec<f64> = mse
            .iter()
            .zip(&rho)
            .map(|(r, p)| {
                let mut tape = Tape::new();
                let p = tape.param(&[], vec![*p]).expect("scalar");
                let m2 = tape.scalar_mul(p, -2.0);
                let inv = tape.exp(m2);
                let rv = tape.scalar_const(*r);
                let t = tape.mul(rv, inv).expect("scalars");
                let t = tape.scalar_mul(t, 0.5);
                let l = tape.add(t, p).expect("scalars");
                tape.backward(l).expect("scalar loss");
                tape.grad(p).expect("param")[0]
            })
            .collect();
        let frac = if steps > 1 { it as f64 / (steps - 1) as f64 } else { 0.0 };
        let cfg = AdamConfig {
            lr: lr * 1e-3f64.powf(frac),
            ..AdamConfig::default()
        };
        adam_step(&mut rho, &grad, &mut state, &cfg)?;
        rho.iter_mut().for_each(|p| *p = p.max(lo));
    }
    Ok(rho.into_iter().map(f64::exp).collect())
}

/// Decoder output geometry: `hint` with every dim rounded to the nearest
/// positive multiple of `2^levels`, keeping center, spacing and axes.
pub fn decoder_grid(hint: &VoxelGrid3D, levels: usize) -> Result<VoxelGrid3D> {
    let f = 1usize << levels.min(15);
    let dims = hint.dims.map(|d| (((d as f64) / f as f64).round() as usize).max(1) * f);
    let c = hint.center();
    let lin = hint.axes * nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::from(hint.spacing));
    let half = nalgebra::Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    );
    let origin = c - lin * half;
    let mut g = VoxelGrid3D::zeros(dims, hint.spacing, [origin.x, origin.y, origin.z])?;
    g.axes = hint.axes;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SrrEpoch {
    pub epoch: usize,
    /// Sum of the per-slice residual terms.
    pub data: f64,
    /// Unweighted TV of the normalized output.
    pub tv: f64,
    pub total: f64,
    /// Exponential moving average of `total` (factor 0.98).
    pub ema: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SrrTrace {
    pub epochs: Vec<SrrEpoch>,
    /// `(epoch, w per slice)` snapshots.
    pub weights: Vec<(usize, Vec<f64>)>,
}

impl SrrTrace {
    /// `epoch,data,tv,total,ema` rows, then one `w,epoch,w0,w1,...` row per
    /// snapshot.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,data,tv,total,ema\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.12e},{:.12e},{:.12e},{:.12e}\n", e.epoch, e.data, e.tv, e.total, e.ema));
        }
        for (epoch, w) in &self.weights {
            out.push_str(&format!("w,{epoch}"));
            for v in w {
                out.push_str(&format!(",{v:.9e}"));
            }
            out.push('\n');
        }
        out
    }
}

struct SliceTerm {
    global: usize,
    sampler: SliceSampler,
    observed: Vec<f64>,
    points: Vec<f64>,
}

/// Decoder, outlier weights, intensity scales and optimizer state; kept
/// across the alternating schedule.
#[derive(Debug, Clone)]
pub struct SrrState {
    pub decoder: DeepDecoder,
    /// Decoder output geometry.
    pub grid: VoxelGrid3D,
    /// Export geometry.
    pub target: VoxelGrid3D,
    /// `ρ = log w` per slice (all stacks, in order).
    pub rho: Vec<f64>,
    /// Intensity scale per slice.
    pub scale: Vec<f64>,
    /// Observed intensities are divided by this before fitting.
    pub norm: f64,
    pub epochs_done: usize,
    pub trace: SrrTrace,
    frozen: Option<usize>,
    adam: Adam,
    rho_state: AdamState,
    scale_state: AdamState,
    rng: ChaCha8Rng,
    config: SrrConfig,
}

fn slice_count(stacks: &[SliceStack]) -> usize {
    stacks.iter().map(SliceStack::len).sum()
}

impl SrrState {
    /// Initializes from the stacks' current outlier weights and intensity
    /// scales; `target` fixes the export geometry.
    pub fn new(stacks: &[SliceStack], target: &VoxelGrid3D, cfg: &SrrConfig) -> Result<Self> {
        cfg.validate()?;
        if stacks.is_empty() || stacks.iter().any(SliceStack::is_empty) {
            return Err(Error::input("need at least one non-empty stack"));
        }
        if cfg.target_stack >= stacks.len() {
            return Err(Error::Config(format!(
                "target_stack {} out of range for {} stacks",
                cfg.target_stack,
                stacks.len()
            )));
        }
        let grid = decoder_grid(target, cfg.decoder.levels)?;
        let decoder = DeepDecoder::new(grid.dims, &cfg.decoder, cfg.seed)?;
        let mut rho = Vec::new();
        let mut scale = Vec::new();
        let mut peak = 0.0f64;
        for stack in stacks {
            for (slice, state) in &stack.slices {
                rho.push(state.outlier_weight.max(cfg.weight_floor).ln());
                scale.push(state.intensity_scale);
                if !state.excluded {
                    let m = slice.data.iter().cloned().fold(0.0f64, f64::max);
                    peak = peak.max(m / state.intensity_scale);
                }
            }
        }
        if !(peak > 0.0) || !peak.is_finite() {
            return Err(Error::input("observed slices have no positive intensity"));
        }
        let first = stacks[..cfg.target_stack].iter().map(SliceStack::len).sum::<usize>();
        let sizes: Vec<usize> = decoder.params.iter().map(Vec::len).collect();
        let n = rho.len();
        Ok(Self {
            adam: Adam::new(
                AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
                &sizes,
            ),
            decoder,
            grid,
            target: target.clone(),
            rho,
            scale,
            norm: peak / cfg.intensity_peak,
            epochs_done: 0,
            trace: SrrTrace::default(),
            frozen: Some(first),
            rho_state: AdamState::new(n),
            scale_state: AdamState::new(n),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5a)),
            config: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SrrConfig {
        &self.config
    }

    /// Decoder step size at the current epoch.
    pub fn decoder_lr(&self) -> f64 {
        let c = &self.config;
        let t = (self.epochs_done as f64 / c.epochs as f64).min(1.0);
        c.lr * (c.lr_final_frac + (1.0 - c.lr_final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }

    pub fn weights(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r.exp()).collect()
    }

    fn terms(&self, stacks: &[SliceStack]) -> Result<Vec<SliceTerm>> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let mut global = 0usize;
        for stack in stacks {
            for (k, (slice, state)) in stack.slices.iter().enumerate() {
                global += 1;
                if state.excluded {
                    continue;
                }
                let psf = PsfModel::for_slice(slice, cfg.psf, cfg.seed)?;
                let offsets = draw_psf_offsets(&psf, global as u64);
                let geom = SliceGeometry::from_stack(stack, k);
                let sampler = SliceSampler::with_stride(geom, &offsets, cfg.pixel_stride);
                let observed = sampler.gather(slice).into_iter().map(|v| v / self.norm).collect();
                let points = sampler.index_points(&state.transform, &self.grid);
                out.push(SliceTerm {
                    global: global - 1,
                    sampler,
                    observed,
                    points,
                });
            }
        }
        if out.is_empty() {
            return Err(Error::input("every slice is excluded"));
        }
        Ok(out)
    }

    /// Runs `epochs` optimization steps against the stacks' current
    /// transforms.
    pub fn fit(&mut self, stacks: &[SliceStack], epochs: usize) -> Result<()> {
        if slice_count(stacks) != self.rho.len() {
            return Err(Error::input("stack layout changed since the state was created"));
        }
        let terms = self.terms(stacks)?;
        let cfg = self.config.clone();
        let outlier = cfg.loss == LossForm::GaussianOutlier;
        let rho_cfg = AdamConfig {
            lr: cfg.rho_lr,
            ..AdamConfig::default()
        };
        let scale_cfg = AdamConfig {
            lr: cfg.scale_lr,
            ..AdamConfig::default()
        };
        let floor = cfg.weight_floor.ln();
        for _ in 0..epochs {
            let mut tape = Tape::new();
            let perturb = if cfg.perturb { Some(&mut self.rng) } else { None };
            let (x, vars) = self.decoder.record(&mut tape, perturb, true)?;
            let mut data: Option<Var> = None;
            let mut rho_vars = Vec::with_capacity(terms.len());
            let mut scale_vars = Vec::with_capacity(terms.len());
            for t in &terms {
                let pred = t.sampler.record_points(&mut tape, x, t.points.clone())?;
                let c = tape.param(&[], vec![self.scale[t.global]])?;
                let pred = tape.scale_by(pred, c)?;
                let obs = tape.constant(&[t.observed.len()], t.observed.clone())?;
                let rho = if outlier {
                    Some(tape.param(&[], vec![self.rho[t.global]])?)
                } else {
                    None
                };
                let term = record_residual_loss(&mut tape, obs, pred, rho, cfg.mean_residual)?;
                rho_vars.push(rho);
                scale_vars.push(c);
                data = Some(match data {
                    Some(d) => tape.add(d, term)?,
                    None => term,
                });
            }
            let data = data.expect("at least one slice");
            let tv = record_total_variation(&mut tape, x)?;
            let wtv = tape.scalar_mul(tv, cfg.tv_weight);
            let total = tape.add(data, wtv)?;
            let (dv, tvv, tot) = (tape.scalar(data), tape.scalar(tv), tape.scalar(total));
            if !tot.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite SRR loss at epoch {} (data {dv}, tv {tvv})",
                    self.epochs_done
                )));
            }
            tape.backward(total)?;
            self.adam.config.lr = self.decoder_lr();
            for (slot, v) in vars.iter().enumerate() {
                let g = tape.grad(*v).expect("trainable").to_vec();
                self.adam.step(slot, &mut self.decoder.params[slot], &g)?;
            }
            let n = self.rho.len();
            if outlier && cfg.rho_lr > 0.0 {
                let mut g = vec![0.0; n];
                for (t, r) in terms.iter().zip(&rho_vars) {
                    g[t.global] = tape.grad(r.expect("outlier mode")).expect("param")[0];
                }
                adam_step(&mut self.rho, &g, &mut self.rho_state, &rho_cfg)?;
                self.rho.iter_mut().for_each(|r| *r = r.max(floor));
            }
            if cfg.learn_intensity && cfg.scale_lr > 0.0 {
                let mut g = vec![0.0; n];
                for (t, c) in terms.iter().zip(&scale_vars) {
                    if Some(t.global) != self.frozen {
                        g[t.global] = tape.grad(*c).expect("param")[0];
                    }
                }
                let old = self.scale.clone();
                adam_step(&mut self.scale, &g, &mut self.scale_state, &scale_cfg)?;
                for (s, o) in self.scale.iter_mut().zip(old) {
                    *s = s.clamp(o * (1.0 - cfg.scale_clip), o * (1.0 + cfg.scale_clip));
                }
            }
            let ema = match self.trace.epochs.last() {
                Some(p) => 0.98 * p.ema + 0.02 * tot,
                None => tot,
            };
            self.trace.epochs.push(SrrEpoch {
                epoch: self.epochs_done,
                data: dv,
                tv: tvv,
                total: tot,
                ema,
            });
            if cfg.snapshot_every > 0 && self.epochs_done % cfg.snapshot_every == 0 {
                self.trace.weights.push((self.epochs_done, self.weights()));
            }
            self.epochs_done += 1;
        }
        Ok(())
    }

    /// Decoded volume (no perturbation) on the decoder grid, in observed
    /// intensity units.
    pub fn decoded(&self) -> Result<VoxelGrid3D> {
        let v = self.decoder.decode()?;
        self.grid.with_data(v.into_iter().map(|x| x * self.norm).collect())
    }

    /// [`SrrState::decoded`] resampled onto the export geometry.
    pub fn volume(&self) -> Result<VoxelGrid3D> {
        let d = self.decoded()?;
        if d.dims == self.target.dims && d.origin == self.target.origin && d.spacing == self.target.spacing {
            return Ok(d);
        }
        Ok(d.resample_like(&self.target, Boundary::Zero))
    }

    /// Writes the learned outlier weights and intensity scales back.
    pub fn apply_to(&self, stacks: &mut [SliceStack]) {
        let mut g = 0;
        for stack in stacks {
            for (_, state) in stack.slices.iter_mut() {
                state.outlier_weight = self.rho[g].exp();
                state.intensity_scale = self.scale[g];
                g += 1;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SrrOutcome {
    pub volume: VoxelGrid3D,
    pub trace: SrrTrace,
}

/// One-shot fit of `cfg.epochs` epochs; writes `w` and `C` back to the
/// stacks.
pub fn fit_srr(stacks: &mut [SliceStack], target: &VoxelGrid3D, cfg: &SrrConfig) -> Result<SrrOutcome> {
    let mut state = SrrState::new(stacks, target, cfg)?;
    state.fit(stacks, cfg.epochs)?;
    state.apply_to(stacks);
    Ok(SrrOutcome {
        volume: state.volume()?,
        trace: state.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_of_constant_and_step() {
        let n = 6;
        let g = VoxelGrid3D::zeros([n; 3], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(total_variation(&g.with_data(vec![0.7; n * n * n]).unwrap()), 0.0);
        let step: Vec<f64> = (0..n * n * n).map(|i| if i % n >= n / 2 { 2.5 } else { 0.0 }).collect();
        let tv = total_variation(&g.with_data(step).unwrap());
        assert!((tv - (n * n) as f64 * 2.5).abs() < 1e-6);
    }

    #[test]
    fn tv_is_homogeneous() {
        let g = VoxelGrid3D::zeros([4, 5, 3], [1.0; 3], [0.0; 3]).unwrap();
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 * 0.1).collect();
        let a = total_variation(&g.with_data(x.clone()).unwrap());
        let b = total_variation(&g.with_data(x.iter().map(|v| -3.0 * v).collect()).unwrap());
        assert!((b - 3.0 * a).abs() < 1e-6 * b);
    }

    #[test]
    fn outlier_weight_stationary_at_rms() {
        let w = fit_outlier_weights(&[0.04, 4e-4], 4000, 0.05, 1e-4).unwrap();
        assert!((w[0] - 0.2).abs() / 0.2 < 1e-3, "{w:?}");
        assert!((w[1] - 0.02).abs() / 0.02 < 1e-3, "{w:?}");
    }

    #[test]
    fn residual_loss_minimum_value() {
        let r: f64 = 0.3;
        let mut tape = Tape::new();
        let obs = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        let pred = tape.constant(&[2], vec![r, -r]).unwrap();
        let rho = tape.param(&[], vec![r.ln()]).unwrap();
        let l = record_residual_loss(&mut tape, obs, pred, Some(rho), true).unwrap();
        assert!((tape.scalar(l) - (0.5 + 0.5 * (r * r).ln())).abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(rho).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn decoder_grid_rounds_to_nearest_multiple() {
        let hint = VoxelGrid3D::zeros([65, 70, 57], [0.8; 3], [1.0, 2.0, 3.0]).unwrap();
        let g = decoder_grid(&hint, 4).unwrap();
        assert_eq!(g.dims, [64, 64, 64]);
        assert!((g.center() - hint.center()).norm() < 1e-12);
    }
}
