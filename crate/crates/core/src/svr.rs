//! Slice-to-volume registration by maximizing normalized cross-correlation
//! between each observed slice and its prediction through the forward model.

use autodiff::{adam_step, AdamConfig, AdamState, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{draw_psf_offsets, PsfMode, PsfModel, SliceGeometry, SliceSampler};
use crate::error::{Error, Result};
use crate::net::{thumbnail, LocalizationNet, SliceInput};
use crate::rigid::RigidTransform;
use crate::volume::{gaussian_kernel, separable_filter, Slice2D, SliceStack, VoxelGrid3D};

/// Pearson correlation and whether the inputs were too flat to define it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ncc {
    pub value: f64,
    pub degenerate: bool,
}

/// Pearson correlation of `a` and `b` over the pixels where `mask` is true.
/// Inputs whose per-pixel standard deviations multiply to at most `eps`
/// yield `0` with the `degenerate` flag set.
pub fn ncc(a: &[f64], b: &[f64], mask: Option<&[bool]>, eps: f64) -> Result<Ncc> {
    if a.len() != b.len() || mask.is_some_and(|m| m.len() != a.len()) {
        return Err(Error::input("ncc inputs must have equal lengths"));
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let n = (0..a.len()).filter(|&i| keep(i)).count();
    if n < 2 {
        return Err(Error::input("ncc needs at least two unmasked samples"));
    }
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in (0..a.len()).filter(|&i| keep(i)) {
        sa += a[i];
        sb += b[i];
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in (0..a.len()).filter(|&i| keep(i)) {
        let (x, y) = (a[i] - ma, b[i] - mb);
        cov += x * y;
        va += x * x;
        vb += y * y;
    }
    if !((va * vb).sqrt() / n as f64 > eps) {
        return Ok(Ncc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Ncc {
        value: (cov / (va * vb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `1 − ncc(y, ŷ)`; flat inputs give `1`.
pub fn svr_loss(y: &[f64], y_hat: &[f64], eps: f64) -> Result<f64> {
    Ok(1.0 - ncc(y, y_hat, None, eps)?.value)
}

/// Records `ncc(a, b)` on a tape; `None` when the current values are
/// degenerate in the sense of [`ncc`].
pub fn record_ncc(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Option<Var>> {
    let n = tape.value(a).len();
    if n != tape.value(b).len() || n < 2 {
        return Err(Error::input("ncc inputs must have equal lengths of at least two"));
    }
    let center = |tape: &mut Tape, v: Var| -> Result<Var> {
        let m = tape.mean(v);
        let neg = tape.scalar_mul(m, -1.0);
        Ok(tape.shift_by(v, neg)?)
    };
    let ac = center(tape, a)?;
    let bc = center(tape, b)?;
    let prod = tape.mul(ac, bc)?;
    let cov = tape.sum(prod);
    let sa = tape.square(ac);
    let va = tape.sum(sa);
    let sb = tape.square(bc);
    let vb = tape.sum(sb);
    let vv = tape.mul(va, vb)?;
    if !(tape.scalar(vv).sqrt() / n as f64 > eps) {
        return Ok(None);
    }
    let den = tape.sqrt(vv);
    Ok(Some(tape.div(cov, den)?))
}

/// Records `1 − ncc(a, b)`, or a constant `1` for degenerate inputs.
pub fn record_svr_loss(tape: &mut Tape, observed: Var, predicted: Var, eps: f64) -> Result<(Var, bool)> {
    match record_ncc(tape, observed, predicted, eps)? {
        Some(c) => {
            let neg = tape.scalar_mul(c, -1.0);
            Ok((tape.add_const(neg, 1.0), false))
        }
        None => Ok((tape.scalar_const(1.0), true)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvrMode {
    Amortized,
    Direct,
    AmortizedThenDirect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrConfig {
    pub mode: SvrMode,
    /// Initial step of the direct refinement (degrees / mm).
    pub lr: f64,
    /// Ratio of the final to the initial direct step.
    pub lr_decay: f64,
    /// Direct refinement iterations per smoothing level.
    pub iterations: usize,
    /// Gaussian smoothing (voxels) of the volume for each coarse-to-fine
    /// level; `0` is the unsmoothed volume.
    pub smoothing: Vec<f64>,
    pub grad_tol: f64,
    pub net_lr: f64,
    pub net_epochs: usize,
    pub net_channels: usize,
    pub net_hidden: usize,
    pub max_deg: f64,
    pub max_mm: f64,
    pub ncc_eps: f64,
    /// Edge length of the volume thumbnail fed to the 3-D branch.
    pub thumbnail: usize,
    /// Use every n-th pixel along each in-plane axis.
    pub pixel_stride: usize,
    pub psf: PsfMode,
    /// Slices whose final loss exceeds this are flagged in the report.
    pub flag_threshold: f64,
    /// Also mark flagged slices as excluded.
    pub exclude_flagged: bool,
    /// Passes that restart a slice from an adjacent slice's pose when that
    /// pose already scores better (refining modes only).
    pub neighbor_sweeps: usize,
    pub seed: u64,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            mode: SvrMode::AmortizedThenDirect,
            lr: 0.3,
            lr_decay: 0.05,
            iterations: 60,
            smoothing: vec![1.0, 0.0],
            grad_tol: 1e-7,
            net_lr: 1e-3,
            net_epochs: 10,
            net_channels: 32,
            net_hidden: 64,
            max_deg: 15.0,
            max_mm: 15.0,
            ncc_eps: 1e-12,
            thumbnail: 32,
            pixel_stride: 1,
            psf: PsfMode::default(),
            flag_threshold: 0.5,
            exclude_flagged: false,
            neighbor_sweeps: 2,
            seed: 0,
        }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.pixel_stride == 0 || self.thumbnail < 4 {
            return Err(Error::Config(
                "svr: iterations and pixel_stride must be >= 1, thumbnail >= 4".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.net_lr > 0.0) {
            return Err(Error::Config("svr: learning rates must be positive".into()));
        }
        if self.smoothing.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("svr: smoothing must be >= 0".into()));
        }
        if self.mode != SvrMode::Direct && self.net_epochs == 0 {
            return Err(Error::Config("svr: network modes need net_epochs >= 1".into()));
        }
        Ok(())
    }
}

/// The volume smoothed at each level of `sigmas` (in voxels).
pub fn smoothing_pyramid(x: &VoxelGrid3D, sigmas: &[f64]) -> Vec<VoxelGrid3D> {
    let mut out: Vec<VoxelGrid3D> = sigmas
        .iter()
        .map(|&s| {
            if s <= 0.0 {
                return x.clone();
            }
            let k = gaussian_kernel(s, (3.0 * s).ceil() as usize);
            let data = separable_filter(&x.data, x.dims, [&k, &k, &k], true);
            x.with_data(data).expect("same geometry")
        })
        .collect();
    if sigmas.last().is_none_or(|s| *s > 0.0) {
        out.push(x.clone());
    }
    out
}

/// Loss and pose gradient of one slice at `params`.
pub fn pose_loss(
    observed: &[f64],
    sampler: &SliceSampler,
    grid: &VoxelGrid3D,
    params: [f64; 6],
    eps: f64,
) -> Result<(f64, [f64; 6], bool)> {
    let mut tape = Tape::new();
    let vol = tape.constant(&grid.tensor_shape(), grid.data.clone())?;
    let p = tape.param(&[6], params.to_vec())?;
    let pred = sampler.record_pose(&mut tape, vol, p, grid)?;
    let obs = tape.constant(&[observed.len()], observed.to_vec())?;
    let (loss, degenerate) = record_svr_loss(&mut tape, obs, pred, eps)?;
    let value = tape.scalar(loss);
    let mut g = [0.0; 6];
    if !degenerate {
        tape.backward(loss)?;
        g.copy_from_slice(tape.grad(p).expect("pose is a parameter"));
    }
    Ok((value, g, degenerate))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutcome {
    pub transform: RigidTransform,
    pub loss: f64,
    pub initial_loss: f64,
    pub evaluations: usize,
    /// Stopped after the loss rose on consecutive evaluations.
    pub diverged: bool,
    pub degenerate: bool,
}

/// Gradient descent (Adam with a geometric step decay) on the six pose
/// parameters of one slice, coarse to fine over `levels`. The result is
/// the best pose seen on the last level and never worse than `t0`.
pub fn direct_refine(
    observed: &[f64],
    sampler: &SliceSampler,
    levels: &[VoxelGrid3D],
    t0: &RigidTransform,
    cfg: &SvrConfig,
) -> Result<RefineOutcome> {
    let fine = levels.last().ok_or_else(|| Error::input("empty volume pyramid"))?;
    if !t0.is_finite() {
        return Err(Error::input("non-finite initial transform"));
    }
    let mut p = t0.params();
    let (initial_loss, _, degenerate) = pose_loss(observed, sampler, fine, p, cfg.ncc_eps)?;
    let mut best = (initial_loss, p);
    let mut evaluations = 1;
    let mut diverged = false;
    let n = cfg.iterations;
    for (li, grid) in levels.iter().enumerate() {
        let last_level = li + 1 == levels.len();
        let mut state = AdamState::new(6);
        let mut prev = f64::INFINITY;
        let mut rises = 0;
        for it in 0..n {
            let (loss, g, deg) = pose_loss(observed, sampler, grid, p, cfg.ncc_eps)?;
            evaluations += 1;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("non-finite SVR loss or gradient"));
            }
            if last_level && loss < best.0 {
                best = (loss, p);
            }
            if deg || g.iter().map(|v| v * v).sum::<f64>().sqrt() < cfg.grad_tol {
                break;
            }
            rises = if loss > prev { rises + 1 } else { 0 };
            prev = loss;
            if rises >= 5 {
                diverged = true;
                break;
            }
            let frac = if n > 1 { it as f64 / (n - 1) as f64 } else { 0.0 };
            let lr = cfg.lr * cfg.lr_decay.powf(frac);
            let ac = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            adam_step(&mut p, &g, &mut state, &ac)?;
        }
        if last_level {
            let (loss, _, _) = pose_loss(observed, sampler, grid, p, cfg.ncc_eps)?;
            evaluations += 1;
            if loss < best.0 {
                best = (loss, p);
            }
        }
    }
    Ok(RefineOutcome {
        transform: RigidTransform::from_params(best.1),
        loss: best.0,
        initial_loss,
        evaluations,
        diverged,
        degenerate,
    })
}

/// Where a slice's final transform came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    Kept,
    Network,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceRecord {
    pub stack: usize,
    pub slice: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Final loss of refining from the current transform alone (direct
    /// and amortized-then-direct modes).
    pub direct_loss: Option<f64>,
    pub source: PoseSource,
    pub flagged: bool,
    pub diverged: bool,
    pub degenerate: bool,
    /// A numerical failure during refinement; the transform was kept.
    pub aborted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SvrReport {
    pub slices: Vec<SliceRecord>,
    /// Mean network loss per training epoch.
    pub net_trace: Vec<f64>,
}

struct Entry {
    stack: usize,
    slice: usize,
    sampler: SliceSampler,
    observed: Vec<f64>,
    input: SliceInput,
}

fn build_entries(stacks: &[SliceStack], cfg: &SvrConfig) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut stream = 0u64;
    for (si, stack) in stacks.iter().enumerate() {
        for (k, (slice, state)) in stack.slices.iter().enumerate() {
            stream += 1;
            if state.excluded {
                continue;
            }
            let psf = PsfModel::for_slice(slice, cfg.psf, cfg.seed)?;
            let offsets = draw_psf_offsets(&psf, stream);
            let geom = SliceGeometry::from_stack(stack, k);
            let sampler = SliceSampler::with_stride(geom, &offsets, cfg.pixel_stride);
            let observed = sampler.gather(slice);
            let input = SliceInput::new(slice, k, stack.len(), stack.nominal_orientation);
            out.push(Entry {
                stack: si,
                slice: k,
                sampler,
                observed,
                input,
            });
        }
    }
    Ok(out)
}

/// Fits `net` on all slices (one shared network, slices visited in a seeded
/// shuffled order). Returns the mean loss per epoch.
fn train_net(
    net: &mut LocalizationNet,
    entries: &[Entry],
    x: &VoxelGrid3D,
    thumb: &[f64],
    cfg: &SvrConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let sizes: Vec<usize> = net.params.iter().map(Vec::len).collect();
    let mut states: Vec<AdamState> = sizes.iter().map(|&n| AdamState::new(n)).collect();
    let ac = AdamConfig {
        lr: cfg.net_lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut trace = Vec::with_capacity(cfg.net_epochs);
    for _ in 0..cfg.net_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let e = &entries[i];
            let mut tape = Tape::new();
            let (pose, vars) = net.record(&mut tape, &e.input, thumb, cfg.thumbnail, true)?;
            let vol = tape.constant(&x.tensor_shape(), x.data.clone())?;
            let pred = e.sampler.record_pose(&mut tape, vol, pose, x)?;
            let obs = tape.constant(&[e.observed.len()], e.observed.clone())?;
            let (loss, degenerate) = record_svr_loss(&mut tape, obs, pred, cfg.ncc_eps)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::numerical("non-finite network loss"));
            }
            total += value;
            if degenerate {
                continue;
            }
            tape.backward(loss)?;
            for (slot, v) in vars.iter().enumerate() {
                let g = tape.grad(*v).expect("trainable").to_vec();
                adam_step(&mut net.params[slot], &g, &mut states[slot], &ac)?;
            }
        }
        trace.push(total / entries.len().max(1) as f64);
    }
    Ok(trace)
}

/// Registers every non-excluded slice against `x` and writes the new
/// transforms into the stacks. `net` is created on first use and keeps its
/// weights across calls.
pub fn fit_svr(
    stacks: &mut [SliceStack],
    x: &VoxelGrid3D,
    cfg: &SvrConfig,
    net: &mut Option<LocalizationNet>,
) -> Result<SvrReport> {
    cfg.validate()?;
    let entries = build_entries(stacks, cfg)?;
    let levels = smoothing_pyramid(x, &cfg.smoothing);
    let mut report = SvrReport::default();
    let hypotheses: Option<Vec<RigidTransform>> = if cfg.mode == SvrMode::Direct {
        None
    } else {
        let thumb = thumbnail(x, cfg.thumbnail);
        if net.is_none() {
            *net = Some(LocalizationNet::new(
                cfg.net_channels,
                cfg.net_hidden,
                cfg.max_deg,
                cfg.max_mm,
                cfg.seed,
            )?);
        }
        let model = net.as_mut().expect("initialized above");
        report.net_trace = train_net(model, &entries, x, &thumb, cfg)?;
        Some(
            entries
                .iter()
                .map(|e| model.predict_transform(&e.input, &thumb, cfg.thumbnail))
                .collect::<Result<_>>()?,
        )
    };
    let outcomes: Vec<(RigidTransform, SliceRecord)> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let current = stacks[e.stack].slices[e.slice].1.transform;
            register_one(e, &current, hypotheses.as_ref().map(|h| h[i]), &levels, cfg)
        })
        .collect::<Result<_>>()?;
    let mut outcomes = outcomes;
    if cfg.mode != SvrMode::Amortized {
        for _ in 0..cfg.neighbor_sweeps {
            if !propagate(&entries, &mut outcomes, &levels, cfg)? {
                break;
            }
        }
    }
    for (t, rec) in outcomes {
        let state = &mut stacks[rec.stack].slices[rec.slice].1;
        state.transform = t;
        if rec.flagged && cfg.exclude_flagged {
            state.excluded = true;
        }
        report.slices.push(rec);
    }
    Ok(report)
}

/// One neighbor sweep; returns whether any slice improved.
fn propagate(
    entries: &[Entry],
    outcomes: &mut [(RigidTransform, SliceRecord)],
    levels: &[VoxelGrid3D],
    cfg: &SvrConfig,
) -> Result<bool> {
    let fine = levels.last().expect("pyramid is never empty");
    let snapshot: Vec<RigidTransform> = outcomes.iter().map(|o| o.0).collect();
    let updates: Vec<Option<(RigidTransform, f64, bool)>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut best: Option<(RigidTransform, f64, bool)> = None;
            let mut floor = outcomes[i].1.final_loss;
            for j in [i.wrapping_sub(1), i + 1] {
                let Some(n) = entries.get(j) else { continue };
                if n.stack != e.stack || n.slice.abs_diff(e.slice) != 1 {
                    continue;
                }
                let t0 = snapshot[j];
                let (l0, _, _) = pose_loss(&e.observed, &e.sampler, fine, t0.params(), cfg.ncc_eps)?;
                if !(l0 < floor) {
                    continue;
                }
                match direct_refine(&e.observed, &e.sampler, levels, &t0, cfg) {
                    Ok(o) if o.loss < floor => {
                        floor = o.loss;
                        best = Some((o.transform, o.loss, o.diverged));
                    }
                    Ok(_) => {}
                    Err(err) if err.is_numerical() => {}
                    Err(err) => return Err(err),
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let mut changed = false;
    for ((t, rec), u) in outcomes.iter_mut().zip(updates) {
        if let Some((nt, loss, diverged)) = u {
            *t = nt;
            rec.final_loss = loss;
            rec.source = PoseSource::Refined;
            rec.diverged |= diverged;
            rec.flagged = loss > cfg.flag_threshold;
            changed = true;
        }
    }
    Ok(changed)
}

fn register_one(
    e: &Entry,
    current: &RigidTransform,
    hypothesis: Option<RigidTransform>,
    levels: &[VoxelGrid3D],
    cfg: &SvrConfig,
) -> Result<(RigidTransform, SliceRecord)> {
    let fine = levels.last().expect("pyramid is never empty");
    let loss_at = |t: &RigidTransform| -> Result<(f64, bool)> {
        let (l, _, d) = pose_loss(&e.observed, &e.sampler, fine, t.params(), cfg.ncc_eps)?;
        Ok((l, d))
    };
    let (initial_loss, degenerate) = loss_at(current)?;
    let mut rec = SliceRecord {
        stack: e.stack,
        slice: e.slice,
        initial_loss,
        final_loss: initial_loss,
        direct_loss: None,
        source: PoseSource::Kept,
        flagged: false,
        diverged: false,
        degenerate,
        aborted: false,
    };
    let mut best = *current;
    let mut consider = |t: RigidTransform, loss: f64, source: PoseSource, rec: &mut SliceRecord| {
        if loss < rec.final_loss {
            rec.final_loss = loss;
            rec.source = source;
            best = t;
        }
    };
    let refine = |t0: &RigidTransform, rec: &mut SliceRecord| -> Result<Option<RefineOutcome>> {
        match direct_refine(&e.observed, &e.sampler, levels, t0, cfg) {
            Ok(o) => {
                rec.diverged |= o.diverged;
                Ok(Some(o))
            }
            Err(err) if err.is_numerical() => {
                rec.aborted = true;
                Ok(None)
            }
            Err(err) => Err(err),
        }
    };
    if cfg.mode != SvrMode::Amortized {
        if let Some(o) = refine(current, &mut rec)? {
            rec.direct_loss = Some(o.loss);
            consider(o.transform, o.loss, PoseSource::Refined, &mut rec);
        }
    }
    if let Some(h) = hypothesis {
        let (hl, _) = loss_at(&h)?;
        consider(h, hl, PoseSource::Network, &mut rec);
        if cfg.mode == SvrMode::AmortizedThenDirect {
            if let Some(o) = refine(&h, &mut rec)? {
                consider(o.transform, o.loss, PoseSource::Refined, &mut rec);
            }
        }
    }
    rec.flagged = rec.final_loss > cfg.flag_threshold;
    Ok((best, rec))
}

/// Per-slice transform table: `stack slice αx αy αz dx dy dz loss`.
pub fn transform_table(stacks: &[SliceStack], report: &SvrReport) -> String {
    let mut out = String::from("# stack slice ax ay az dx dy dz loss\n");
    for r in &report.slices {
        let t = stacks[r.stack].slices[r.slice].1.transform;
        out.push_str(&format!("{} {} {} {:.9}\n", r.stack, r.slice, t, r.final_loss));
    }
    out
}

/// Builds the sampler and observed pixels for slice `k` of `stack`, with
/// the same PSF offsets [`fit_svr`] would use for global slice `stream`.
pub fn slice_sampler(
    stack: &SliceStack,
    k: usize,
    cfg: &SvrConfig,
    stream: u64,
) -> Result<(SliceSampler, Vec<f64>)> {
    let slice: &Slice2D = &stack.slices[k].0;
    let psf = PsfModel::for_slice(slice, cfg.psf, cfg.seed)?;
    let offsets = draw_psf_offsets(&psf, stream);
    let sampler = SliceSampler::with_stride(SliceGeometry::from_stack(stack, k), &offsets, cfg.pixel_stride);
    let observed = sampler.gather(slice);
    Ok((sampler, observed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::predict_slice;
    use crate::volume::{Orientation, SliceState};
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> VoxelGrid3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = VoxelGrid3D::zeros([n; 3], [1.0; 3], [0.0; 3]).unwrap();
        let c: Vec<([f64; 3], f64, f64)> = (0..8)
            .map(|_| {
                (
                    [0, 1, 2].map(|_| rng.random_range(0.25..0.75) * n as f64),
                    rng.random_range(2.0..4.0),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let p = [i as f64, j as f64, k as f64];
                    let v: f64 = c
                        .iter()
                        .map(|(m, s, a)| {
                            let d2: f64 = (0..3).map(|a| (p[a] - m[a]).powi(2)).sum();
                            a * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum();
                    let o = g.offset(i, j, k);
                    g.data[o] = v;
                }
            }
        }
        g
    }

    fn stack_of(gt: &VoxelGrid3D, motion: &[RigidTransform], thickness: f64) -> SliceStack {
        let n = gt.dims[0];
        let pose = RigidTransform::from_rotation_translation(
            &Orientation::Axial.frame(),
            &gt.center(),
        )
        .unwrap();
        let blank: Vec<Slice2D> = motion
            .iter()
            .map(|_| Slice2D::new([n, n], [1.0, 1.0], thickness, vec![0.0; n * n]).unwrap())
            .collect();
        let mut stack = SliceStack::new(blank, Orientation::Axial, pose).unwrap();
        for k in 0..motion.len() {
            let geom = SliceGeometry::from_stack(&stack, k);
            let psf = PsfModel::for_slice(&stack.slices[k].0, PsfMode::default(), 0).unwrap();
            let off = draw_psf_offsets(&psf, 0);
            let state = SliceState {
                transform: motion[k],
                ..SliceState::default()
            };
            stack.slices[k].0 = predict_slice(gt, &geom, &state, &off).unwrap();
        }
        stack
    }

    #[test]
    fn ncc_identities() {
        let a: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let aff: Vec<f64> = a.iter().map(|v| 3.0 * v + 5.0).collect();
        assert!((ncc(&a, &a, None, 1e-12).unwrap().value - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &neg, None, 1e-12).unwrap().value + 1.0).abs() < 1e-12);
        assert!((ncc(&a, &aff, None, 1e-12).unwrap().value - 1.0).abs() < 1e-12);
        let flat = vec![2.0; 50];
        let r = ncc(&a, &flat, None, 1e-12).unwrap();
        assert!(r.degenerate && r.value == 0.0);
        assert!(ncc(&a[..1], &a[..1], None, 1e-12).is_err());
        let mask: Vec<bool> = (0..50).map(|i| i < 25).collect();
        let mut b = a.clone();
        b[30] = 1e6;
        assert!((ncc(&a, &b, Some(&mask), 1e-12).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_ncc_matches_direct() {
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.29).cos() + 0.1 * i as f64).collect();
        let mut tape = Tape::new();
        let va = tape.constant(&[40], a.clone()).unwrap();
        let vb = tape.param(&[40], b.clone()).unwrap();
        let c = record_ncc(&mut tape, va, vb, 1e-12).unwrap().unwrap();
        let direct = ncc(&a, &b, None, 1e-12).unwrap().value;
        assert!((tape.scalar(c) - direct).abs() < 1e-14);
    }

    #[test]
    fn loss_is_zero_at_truth_and_scale_invariant() {
        let gt = blobs(24, 1);
        let stack = stack_of(&gt, &[RigidTransform::identity(); 4], 2.0);
        let cfg = SvrConfig::default();
        let (sampler, obs) = slice_sampler(&stack, 1, &cfg, 0).unwrap();
        let (l0, _, _) = pose_loss(&obs, &sampler, &gt, [0.0; 6], 1e-12).unwrap();
        assert!(l0.abs() < 1e-12, "{l0}");
        let scaled: Vec<f64> = obs.iter().map(|v| 2.7 * v).collect();
        let t = RigidTransform::new([1.0, -2.0, 0.5], [0.3, 1.0, -0.7]);
        let (a, _, _) = pose_loss(&obs, &sampler, &gt, t.params(), 1e-12).unwrap();
        let (b, _, _) = pose_loss(&scaled, &sampler, &gt, t.params(), 1e-12).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn refine_recovers_translation() {
        let gt = blobs(32, 2);
        let truth = RigidTransform::new([0.0; 3], [2.0, -1.5, 1.0]);
        let stack = stack_of(&gt, &[truth; 3], 2.0);
        let cfg = SvrConfig {
            iterations: 80,
            ..SvrConfig::default()
        };
        let (sampler, obs) = slice_sampler(&stack, 1, &cfg, 0).unwrap();
        let levels = smoothing_pyramid(&gt, &cfg.smoothing);
        let o = direct_refine(&obs, &sampler, &levels, &RigidTransform::identity(), &cfg).unwrap();
        assert!(o.loss <= o.initial_loss);
        let d = o.transform.d();
        let err = (0..3).map(|a| (d[a] - truth.d()[a]).powi(2)).sum::<f64>().sqrt();
        assert!(err < 0.2, "{:?} loss {}", o.transform, o.loss);
    }

    #[test]
    fn refine_from_truth_stays() {
        let gt = blobs(24, 3);
        let truth = RigidTransform::new([1.0, -1.0, 2.0], [0.5, 0.5, -0.5]);
        let stack = stack_of(&gt, &[truth; 3], 2.0);
        let cfg = SvrConfig::default();
        let (sampler, obs) = slice_sampler(&stack, 1, &cfg, 0).unwrap();
        let levels = smoothing_pyramid(&gt, &[0.0]);
        let o = direct_refine(&obs, &sampler, &levels, &truth, &cfg).unwrap();
        let d = o.transform.d();
        let err = (0..3).map(|a| (d[a] - truth.d()[a]).powi(2)).sum::<f64>().sqrt();
        assert!(err < 0.05 && o.loss <= o.initial_loss);
    }
}
