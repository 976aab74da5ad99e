//! End-to-end reconstruction: intensity normalization, stack-to-stack
//! alignment, scattered initialization and the alternating SVR/SRR
//! schedule.

use std::path::Path;
use std::time::Instant;

use autodiff::{adam_step, AdamConfig, AdamState, Tape};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::acquisition::{footprint_grid, scatter_init_volume, scatter_into, SliceGeometry};
use crate::error::{Error, Result};
use crate::net::LocalizationNet;
use crate::rigid::{rotation_partials, RigidTransform};
use crate::srr::{SrrConfig, SrrState, SrrTrace};
use crate::svr::{fit_svr, ncc, record_svr_loss, SvrConfig, SvrReport};
use crate::volume::{gaussian_kernel, separable_filter, Boundary, SliceStack, VoxelGrid3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct V2vConfig {
    pub enabled: bool,
    /// Thumbnail spacing (mm).
    pub spacing: f64,
    /// Gaussian smoothing of the thumbnails (voxels).
    pub smoothing: f64,
    pub iterations: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub ncc_eps: f64,
}

impl Default for V2vConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            spacing: 2.0,
            smoothing: 1.0,
            iterations: 150,
            lr: 0.5,
            lr_decay: 0.05,
            ncc_eps: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// Isotropic spacing of the exported volume (mm).
    pub target_spacing: f64,
    pub total_epochs: usize,
    /// SRR epochs between SVR passes.
    pub svr_interval: usize,
    /// Reference stack for intensity normalization and alignment.
    pub target_stack: usize,
    pub normalize_intensities: bool,
    /// Stop when the data term improves by less than `early_stop_tol`
    /// (relative) over three SVR intervals.
    pub early_stop: bool,
    pub early_stop_tol: f64,
    pub v2v: V2vConfig,
    pub svr: SvrConfig,
    pub srr: SrrConfig,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            target_spacing: 0.8,
            total_epochs: 2000,
            svr_interval: 250,
            target_stack: 0,
            normalize_intensities: true,
            early_stop: false,
            early_stop_tol: 1e-5,
            v2v: V2vConfig::default(),
            svr: SvrConfig::default(),
            srr: SrrConfig::default(),
        }
    }
}

impl ReconstructionConfig {
    /// The schedule of the original description: 8000 epochs, SVR every 500.
    pub fn full_schedule() -> Self {
        Self {
            total_epochs: 8000,
            svr_interval: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.svr_interval == 0 || self.total_epochs < self.svr_interval {
            return Err(Error::Config(
                "need total_epochs >= svr_interval >= 1".into(),
            ));
        }
        if !(self.target_spacing > 0.0) {
            return Err(Error::Config("target_spacing must be positive".into()));
        }
        if !(self.v2v.spacing > 0.0 && self.v2v.smoothing >= 0.0) {
            return Err(Error::Config("v2v spacing must be positive".into()));
        }
        self.svr.validate()?;
        self.srr.validate()
    }

    /// Number of SVR passes the schedule runs: `⌈total / interval⌉`.
    pub fn svr_passes(&self) -> usize {
        self.total_epochs.div_ceil(self.svr_interval)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NormalizationReport {
    /// Least-squares factor `c` with `c·y ≈ r` per slice, by stack.
    pub factors: Vec<Vec<f64>>,
    /// `(stack, slice)` pairs that did not use their own least-squares fit.
    pub fallback: Vec<(usize, usize)>,
}

fn median_positive(v: impl Iterator<Item = f64>) -> Option<f64> {
    let mut p: Vec<f64> = v.filter(|x| *x > 0.0 && x.is_finite()).collect();
    if p.is_empty() {
        return None;
    }
    p.sort_by(f64::total_cmp);
    Some(p[p.len() / 2])
}

/// Fits `c_i = ⟨y_i, r_i⟩/⟨y_i, y_i⟩` for each slice of the non-target
/// stacks, `r_i` being the target stack sampled at the slice's pixels where
/// they overlap it. Slices whose overlap carries little reference signal
/// (`⟨r_i, r_i⟩` under a tenth of the stack median) or give a non-positive
/// fit take the stack's pooled factor `Σ⟨y, r⟩/Σ⟨y, y⟩` and are reported; a
/// stack without any usable overlap falls back to the ratio of positive
/// medians. The forward-model scale of each slice becomes `1/c_i`;
/// target-stack slices get 1.
pub fn normalize_stack_intensities(stacks: &mut [SliceStack], target: usize) -> Result<NormalizationReport> {
    if target >= stacks.len() {
        return Err(Error::input(format!("target stack {target} out of range")));
    }
    let reference = stacks[target].to_grid();
    let ref_median = median_positive(reference.data.iter().copied())
        .ok_or_else(|| Error::input("target stack has no positive intensity"))?;
    let mut report = NormalizationReport::default();
    for (si, stack) in stacks.iter_mut().enumerate() {
        if si == target {
            stack.slices.iter_mut().for_each(|s| s.1.intensity_scale = 1.0);
            report.factors.push(vec![1.0; stack.len()]);
            continue;
        }
        // (⟨y,r⟩, ⟨y,y⟩, ⟨r,r⟩) over each slice's overlap
        let sums: Vec<[f64; 3]> = (0..stack.len())
            .map(|k| {
                let geom = SliceGeometry::from_stack(stack, k);
                let (slice, state) = &stack.slices[k];
                let (q, tau) = geom.slice_to_world(&state.transform);
                let mut acc = [0.0; 3];
                for b in 0..geom.dims[1] {
                    for a in 0..geom.dims[0] {
                        let w = q * geom.pixel_position(a, b) + tau;
                        let ijk = reference.index_from_world(w);
                        let inside = (0..3).all(|ax| ijk[ax] >= 0.0 && ijk[ax] <= (reference.dims[ax] - 1) as f64);
                        if !inside {
                            continue;
                        }
                        let y = slice.data[a + geom.dims[0] * b];
                        let r = reference.sample_index([ijk.x, ijk.y, ijk.z], Boundary::Clamp);
                        acc[0] += y * r;
                        acc[1] += y * y;
                        acc[2] += r * r;
                    }
                }
                acc
            })
            .collect();
        let mut energies: Vec<f64> = sums.iter().map(|s| s[2]).filter(|e| *e > 0.0).collect();
        energies.sort_by(f64::total_cmp);
        let min_energy = energies.get(energies.len() / 2).map_or(f64::INFINITY, |m| 0.1 * m);
        let usable = |s: &[f64; 3]| s[1] > 0.0 && s[2] > 0.0 && s[2] >= min_energy;
        let (yr, yy) = sums.iter().filter(|s| usable(s)).fold((0.0, 0.0), |a, s| (a.0 + s[0], a.1 + s[1]));
        let pooled = Some(yr / yy).filter(|c| *c > 0.0 && c.is_finite());
        let mut factors = Vec::with_capacity(stack.len());
        for (k, s) in sums.iter().enumerate() {
            let own = Some(s[0] / s[1]).filter(|c| usable(s) && *c > 0.0 && c.is_finite());
            let c = match own {
                Some(c) => c,
                None => {
                    report.fallback.push((si, k));
                    match pooled {
                        Some(c) => c,
                        None => match median_positive(stack.slices[k].0.data.iter().copied()) {
                            Some(m) => ref_median / m,
                            None => 1.0,
                        },
                    }
                }
            };
            stack.slices[k].1.intensity_scale = 1.0 / c;
            factors.push(c);
        }
        report.factors.push(factors);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct V2vRecord {
    pub stack: usize,
    pub initial_ncc: f64,
    pub final_ncc: f64,
    /// Correction applied to the stack pose, `[αx, αy, αz, dx, dy, dz]`
    /// about the thumbnail center.
    pub correction: [f64; 6],
    /// NCC undefined; the pose was kept.
    pub flagged: bool,
}

fn thumbnail_of(stacks: &[SliceStack], grid: &VoxelGrid3D, smoothing: f64) -> Result<VoxelGrid3D> {
    let mut g = grid.clone();
    scatter_into(stacks, &mut g)?;
    if smoothing > 0.0 {
        let k = gaussian_kernel(smoothing, (3.0 * smoothing).ceil() as usize);
        g.data = separable_filter(&g.data, g.dims, [&k, &k, &k], true);
    }
    Ok(g)
}

/// Index-space affine of `p ↦ M(S(p))` sampled on the reference lattice,
/// `S(p) = R(p − c) + c + d`, and its Jacobian w.r.t. `(α, d)`.
fn v2v_affine(params: [f64; 6], grid: &VoxelGrid3D) -> ([f64; 12], Vec<f64>) {
    let t = RigidTransform::from_params(params);
    let l = grid.world_to_index_linear();
    let w = grid.axes * Matrix3::from_diagonal(&Vector3::from(grid.spacing));
    let c = grid.center();
    let o = Vector3::from(grid.origin);
    let r = t.rotation_matrix();
    let lin = l * r * w;
    let off = l * (r * (o - c) + c + t.translation_vector() - o);
    let mut m = [0.0; 12];
    let mut jac = vec![0.0; 72];
    for i in 0..3 {
        for j in 0..3 {
            m[4 * i + j] = lin[(i, j)];
        }
        m[4 * i + 3] = off[i];
    }
    for (p, dr) in rotation_partials(t.alpha()).iter().enumerate() {
        let dlin = l * dr * w;
        let doff = l * dr * (o - c);
        for i in 0..3 {
            for j in 0..3 {
                jac[(4 * i + j) * 6 + p] = dlin[(i, j)];
            }
            jac[(4 * i + 3) * 6 + p] = doff[i];
        }
    }
    for j in 0..3 {
        for i in 0..3 {
            jac[(4 * i + 3) * 6 + 3 + j] = l[(i, j)];
        }
    }
    (m, jac)
}

fn v2v_loss(
    moving: &VoxelGrid3D,
    points: &[f64],
    fixed: &[f64],
    params: [f64; 6],
    eps: f64,
) -> Result<(f64, [f64; 6], bool)> {
    let (m, jac) = v2v_affine(params, moving);
    let mut tape = Tape::new();
    let p = tape.param(&[6], params.to_vec())?;
    let mv = tape.jacobian_map(p, &[3, 4], m.to_vec(), jac)?;
    let pts = tape.constant(&[points.len() / 3, 3], points.to_vec())?;
    let moved = tape.affine_points(mv, pts)?;
    let vol = tape.constant(&moving.tensor_shape(), moving.data.clone())?;
    let s = tape.grid_sample(vol, moved)?;
    let f = tape.constant(&[fixed.len()], fixed.to_vec())?;
    let (loss, degenerate) = record_svr_loss(&mut tape, f, s, eps)?;
    let value = tape.scalar(loss);
    let mut g = [0.0; 6];
    if !degenerate {
        tape.backward(loss)?;
        g.copy_from_slice(tape.grad(p).expect("param"));
    }
    Ok((value, g, degenerate))
}

/// Rigidly aligns every other stack to the target stack by gradient descent
/// on `1 − NCC` between smoothed scattered thumbnails. A result that does
/// not improve the NCC is discarded.
pub fn register_stacks_v2v(stacks: &mut [SliceStack], target: usize, cfg: &V2vConfig) -> Result<Vec<V2vRecord>> {
    if stacks.len() < 2 {
        return Ok(Vec::new());
    }
    if target >= stacks.len() {
        return Err(Error::input(format!("target stack {target} out of range")));
    }
    let grid = footprint_grid(stacks, cfg.spacing, 1)?;
    let fixed_grid = thumbnail_of(&stacks[target..=target], &grid, cfg.smoothing)?;
    let mut points = Vec::new();
    let mut fixed = Vec::new();
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let v = fixed_grid.get(i, j, k);
                if v != 0.0 {
                    points.extend([i as f64, j as f64, k as f64]);
                    fixed.push(v);
                }
            }
        }
    }
    let mut out = Vec::new();
    for si in 0..stacks.len() {
        if si == target {
            continue;
        }
        let moving = thumbnail_of(&stacks[si..=si], &grid, cfg.smoothing)?;
        let mut rec = V2vRecord {
            stack: si,
            initial_ncc: 0.0,
            final_ncc: 0.0,
            correction: [0.0; 6],
            flagged: false,
        };
        if fixed.len() < 2 {
            rec.flagged = true;
            out.push(rec);
            continue;
        }
        let (l0, _, deg) = v2v_loss(&moving, &points, &fixed, [0.0; 6], cfg.ncc_eps)?;
        rec.initial_ncc = 1.0 - l0;
        rec.final_ncc = rec.initial_ncc;
        if deg {
            rec.flagged = true;
            out.push(rec);
            continue;
        }
        let mut p = [0.0; 6];
        let mut best = (l0, p);
        let mut state = AdamState::new(6);
        let n = cfg.iterations;
        for it in 0..n {
            let (l, g, deg) = v2v_loss(&moving, &points, &fixed, p, cfg.ncc_eps)?;
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("non-finite stack registration loss"));
            }
            if l < best.0 {
                best = (l, p);
            }
            if deg {
                break;
            }
            let frac = if n > 1 { it as f64 / (n - 1) as f64 } else { 0.0 };
            let ac = AdamConfig {
                lr: cfg.lr * cfg.lr_decay.powf(frac),
                ..AdamConfig::default()
            };
            adam_step(&mut p, &g, &mut state, &ac)?;
        }
        let (l, _, _) = v2v_loss(&moving, &points, &fixed, p, cfg.ncc_eps)?;
        if l < best.0 {
            best = (l, p);
        }
        if best.0 < l0 {
            // the moving content is sampled at S(p), i.e. moved by S⁻¹
            let s = RigidTransform::from_params(best.1).about_center(grid.center());
            let stack = &mut stacks[si];
            stack.stack_pose = s.inverse().compose(&stack.stack_pose);
            rec.correction = best.1;
            rec.final_ncc = 1.0 - best.0;
        }
        out.push(rec);
    }
    Ok(out)
}

/// A stack upsampled trilinearly onto `grid` (nominal geometry, edge
/// clamped), divided by its first slice's intensity scale.
pub fn upsample_stack(stack: &SliceStack, grid: &VoxelGrid3D) -> VoxelGrid3D {
    let mut g = stack.to_grid().resample_like(grid, Boundary::Clamp);
    let c = stack.slices[0].1.intensity_scale;
    g.data.iter_mut().for_each(|v| *v /= c);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassRecord {
    pub pass: usize,
    pub svr_mean_loss: f64,
    pub flagged_slices: usize,
    pub srr_epochs: usize,
    /// Data term at the end of the pass.
    pub data_loss: f64,
    /// Lowest data term so far.
    pub best_data_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceSummary {
    pub stack: usize,
    pub slice: usize,
    pub transform: [f64; 6],
    pub intensity_scale: f64,
    pub outlier_weight: f64,
    pub excluded: bool,
    pub svr_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub preprocess_s: f64,
    pub svr_s: f64,
    pub srr_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub svr_passes: usize,
    pub srr_epochs: usize,
    pub stopped_early: bool,
    pub normalization: NormalizationReport,
    pub v2v: Vec<V2vRecord>,
    pub passes: Vec<PassRecord>,
    pub slices: Vec<SliceSummary>,
    pub decoder_params: usize,
    pub decoder_ratio: f64,
    #[serde(skip)]
    pub srr_trace: SrrTrace,
    #[serde(skip)]
    pub svr_reports: Vec<SvrReport>,
    pub timing: Timing,
    /// FNV-1a over the final transforms, weights, scales and volume.
    pub checksum: String,
}

#[derive(Debug)]
pub struct Reconstruction {
    pub volume: VoxelGrid3D,
    /// Scattered initialization on the export grid.
    pub initial: VoxelGrid3D,
    pub stacks: Vec<SliceStack>,
    pub report: RunReport,
}

/// A failed run with whatever had been computed.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub volume: Option<VoxelGrid3D>,
    pub report: RunReport,
}

fn fnv1a(bytes: impl Iterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn checksum(stacks: &[SliceStack], volume: &VoxelGrid3D) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325;
    for s in stacks {
        for (_, st) in &s.slices {
            let vals = st.transform.params().into_iter().chain([st.intensity_scale, st.outlier_weight]);
            h = fnv1a(vals.flat_map(f64::to_le_bytes), h);
        }
    }
    fnv1a(volume.data.iter().flat_map(|v| v.to_le_bytes()), h)
}

fn summarize(stacks: &[SliceStack], svr: Option<&SvrReport>) -> Vec<SliceSummary> {
    let mut out = Vec::new();
    for (si, s) in stacks.iter().enumerate() {
        for (k, (_, st)) in s.slices.iter().enumerate() {
            let svr_loss = svr
                .and_then(|r| r.slices.iter().find(|x| x.stack == si && x.slice == k))
                .map_or(f64::NAN, |x| x.final_loss);
            out.push(SliceSummary {
                stack: si,
                slice: k,
                transform: st.transform.params(),
                intensity_scale: st.intensity_scale,
                outlier_weight: st.outlier_weight,
                excluded: st.excluded,
                svr_loss,
            });
        }
    }
    out
}

/// Runs normalize → stack alignment → scattered init → ⌈total/interval⌉
/// rounds of {SVR against the current volume, SRR for `interval` epochs}
/// and exports the decoded volume on the scattered-init grid. Input stacks
/// are not modified.
pub fn reconstruct(input: &[SliceStack], cfg: &ReconstructionConfig) -> std::result::Result<Reconstruction, Box<RunFailure>> {
    let mut report = RunReport::default();
    let fail = |error: Error, volume: Option<VoxelGrid3D>, report: &RunReport| {
        Box::new(RunFailure {
            error,
            volume,
            report: report.clone(),
        })
    };
    let t_start = Instant::now();
    if let Err(e) = cfg.validate() {
        return Err(fail(e.in_stage("config"), None, &report));
    }
    if input.is_empty() || input.iter().any(SliceStack::is_empty) {
        return Err(fail(Error::input("need at least one non-empty stack"), None, &report));
    }
    if cfg.target_stack >= input.len() {
        return Err(fail(Error::Config("target_stack out of range".into()), None, &report));
    }
    let mut stacks = input.to_vec();
    if cfg.normalize_intensities {
        match normalize_stack_intensities(&mut stacks, cfg.target_stack) {
            Ok(r) => report.normalization = r,
            Err(e) => return Err(fail(e.in_stage("normalize"), None, &report)),
        }
    }
    if cfg.v2v.enabled {
        match register_stacks_v2v(&mut stacks, cfg.target_stack, &cfg.v2v) {
            Ok(r) => report.v2v = r,
            Err(e) => return Err(fail(e.in_stage("v2v"), None, &report)),
        }
    }
    let initial = match scatter_init_volume(&stacks, cfg.target_spacing) {
        Ok(g) => g,
        Err(e) => return Err(fail(e.in_stage("scatter_init"), None, &report)),
    };
    let srr_cfg = SrrConfig {
        target_stack: cfg.target_stack,
        epochs: cfg.total_epochs,
        ..cfg.srr.clone()
    };
    let mut srr = match SrrState::new(&stacks, &initial, &srr_cfg) {
        Ok(s) => s,
        Err(e) => return Err(fail(e.in_stage("srr"), Some(initial), &report)),
    };
    report.decoder_params = srr.decoder.num_params();
    report.decoder_ratio = srr.decoder.param_ratio();
    report.timing.preprocess_s = t_start.elapsed().as_secs_f64();
    let mut net: Option<LocalizationNet> = None;
    let mut done = 0;
    let mut best = f64::INFINITY;
    let mut x = initial.clone();
    for pass in 0..cfg.svr_passes() {
        let t = Instant::now();
        let svr = match fit_svr(&mut stacks, &x, &cfg.svr, &mut net) {
            Ok(r) => r,
            Err(e) => return Err(fail(e.in_stage("svr"), Some(x), &report)),
        };
        report.timing.svr_s += t.elapsed().as_secs_f64();
        report.svr_passes += 1;
        let epochs = cfg.svr_interval.min(cfg.total_epochs - done);
        let t = Instant::now();
        if let Err(e) = srr.fit(&stacks, epochs) {
            return Err(fail(e.in_stage("srr"), Some(x), &report));
        }
        report.timing.srr_s += t.elapsed().as_secs_f64();
        done += epochs;
        srr.apply_to(&mut stacks);
        let data = srr.trace.epochs.last().map_or(f64::NAN, |e| e.data);
        best = best.min(data);
        let n = svr.slices.len().max(1) as f64;
        report.passes.push(PassRecord {
            pass,
            svr_mean_loss: svr.slices.iter().map(|s| s.final_loss).sum::<f64>() / n,
            flagged_slices: svr.slices.iter().filter(|s| s.flagged).count(),
            srr_epochs: epochs,
            data_loss: data,
            best_data_loss: best,
        });
        report.svr_reports.push(svr);
        x = match srr.decoded() {
            Ok(v) => v,
            Err(e) => return Err(fail(e.in_stage("srr"), None, &report)),
        };
        if cfg.early_stop && report.passes.len() > 3 {
            let old = report.passes[report.passes.len() - 4].best_data_loss;
            if (old - best) <= cfg.early_stop_tol * old.abs() {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.srr_epochs = done;
    let volume = match srr.volume() {
        Ok(v) => v,
        Err(e) => return Err(fail(e.in_stage("export"), None, &report)),
    };
    report.slices = summarize(&stacks, report.svr_reports.last());
    report.srr_trace = srr.trace.clone();
    report.checksum = format!("{:016x}", checksum(&stacks, &volume));
    report.timing.total_s = t_start.elapsed().as_secs_f64();
    Ok(Reconstruction {
        volume,
        initial,
        stacks,
        report,
    })
}

/// Writes `report.toml`, `srr_trace.csv` and `transforms.txt` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string(report).map_err(|e| Error::input(e.to_string()))?;
    std::fs::write(dir.join("report.toml"), text)?;
    std::fs::write(dir.join("srr_trace.csv"), report.srr_trace.to_csv())?;
    let mut t = String::from("# stack slice ax ay az dx dy dz scale weight excluded svr_loss\n");
    for s in &report.slices {
        let p = s.transform;
        t.push_str(&format!(
            "{} {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {} {:.9}\n",
            s.stack, s.slice, p[0], p[1], p[2], p[3], p[4], p[5], s.intensity_scale, s.outlier_weight, s.excluded, s.svr_loss
        ));
    }
    std::fs::write(dir.join("transforms.txt"), t)?;
    Ok(())
}

/// Pearson correlation of two stacks' scattered thumbnails on a shared grid.
pub fn stack_ncc(a: &SliceStack, b: &SliceStack, spacing: f64) -> Result<f64> {
    let pair = [a.clone(), b.clone()];
    let grid = footprint_grid(&pair, spacing, 1)?;
    let ga = thumbnail_of(&pair[0..1], &grid, 0.0)?;
    let gb = thumbnail_of(&pair[1..2], &grid, 0.0)?;
    let mask: Vec<bool> = ga.data.iter().zip(&gb.data).map(|(x, y)| *x != 0.0 && *y != 0.0).collect();
    Ok(ncc(&ga.data, &gb.data, Some(&mask), 1e-300)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{make_smooth_phantom, simulate_stack, MotionConfig, StackSpec};
    use crate::volume::Orientation;

    fn still() -> MotionConfig {
        MotionConfig {
            range: 0.0,
            ..MotionConfig::default()
        }
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = ReconstructionConfig {
            total_epochs: 1000,
            svr_interval: 100,
            ..ReconstructionConfig::default()
        };
        assert_eq!(cfg.svr_passes(), 10);
        assert_eq!(ReconstructionConfig::default().svr_passes(), 8);
        assert_eq!(ReconstructionConfig::full_schedule().svr_passes(), 16);
        let bad = ReconstructionConfig {
            svr_interval: 0,
            ..ReconstructionConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ReconstructionConfig::default();
        let back = ReconstructionConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = ReconstructionConfig::from_toml("total_epochs = 40\nsvr_interval = 20\n[srr]\ntv_weight = 0.5\n").unwrap();
        assert_eq!(partial.svr_passes(), 2);
        assert_eq!(partial.srr.tv_weight, 0.5);
        assert!(ReconstructionConfig::from_toml("no_such_key = 1").is_err());
    }

    #[test]
    fn doubled_stack_gets_half_factor() {
        let gt = make_smooth_phantom([24; 3], 1.0, 20, 1).unwrap();
        let spec = StackSpec {
            in_plane: 1.0,
            thickness: 2.0,
            noise_frac: 0.0,
            ..StackSpec::default()
        };
        let a = simulate_stack(&gt, &spec, &still()).unwrap().stack;
        let mut b = a.clone();
        b.slices.iter_mut().for_each(|(s, _)| s.data.iter_mut().for_each(|v| *v *= 2.0));
        let mut stacks = vec![a.clone(), b, a];
        let r = normalize_stack_intensities(&mut stacks, 0).unwrap();
        for c in &r.factors[1] {
            assert!((c - 0.5).abs() < 0.005, "{c}");
        }
        for c in &r.factors[2] {
            assert!((c - 1.0).abs() < 0.01, "{c}");
        }
        assert!((stacks[1].slices[0].1.intensity_scale - 2.0).abs() < 0.02);
    }

    #[test]
    fn background_slice_takes_pooled_factor() {
        let gt = make_smooth_phantom([24; 3], 1.0, 20, 1).unwrap();
        let spec = StackSpec {
            in_plane: 1.0,
            thickness: 2.0,
            noise_frac: 0.0,
            ..StackSpec::default()
        };
        let mut a = simulate_stack(&gt, &spec, &still()).unwrap().stack;
        let mut b = a.clone();
        b.slices.iter_mut().for_each(|(s, _)| s.data.iter_mut().for_each(|v| *v *= 2.0));
        let k = a.len() / 2;
        a.slices[k].0.data.iter_mut().for_each(|v| *v = 0.0);
        let mut stacks = vec![a, b];
        let r = normalize_stack_intensities(&mut stacks, 0).unwrap();
        assert!(r.fallback.contains(&(1, k)));
        assert!((r.factors[1][k] - 0.5).abs() < 0.01, "{}", r.factors[1][k]);
    }

    #[test]
    fn disjoint_stack_uses_fallback() {
        let gt = make_smooth_phantom([16; 3], 1.0, 10, 2).unwrap();
        let spec = StackSpec {
            in_plane: 1.0,
            thickness: 2.0,
            noise_frac: 0.0,
            ..StackSpec::default()
        };
        let a = simulate_stack(&gt, &spec, &still()).unwrap().stack;
        let mut far = a.clone();
        far.stack_pose = RigidTransform::translation([500.0, 0.0, 0.0]).compose(&far.stack_pose);
        let mut stacks = vec![a, far];
        let r = normalize_stack_intensities(&mut stacks, 0).unwrap();
        assert_eq!(r.fallback.len(), stacks[1].len());
    }

    #[test]
    fn v2v_recovers_known_shift() {
        let gt = make_smooth_phantom([40; 3], 1.0, 80, 3).unwrap();
        let mk = |o: Orientation, seed: u64| {
            let spec = StackSpec {
                orientation: o,
                in_plane: 1.0,
                thickness: 2.0,
                noise_frac: 0.0,
                seed,
                ..StackSpec::default()
            };
            simulate_stack(&gt, &spec, &still()).unwrap().stack
        };
        let a = mk(Orientation::Axial, 1);
        let b = mk(Orientation::Coronal, 2);
        let shift = [3.0, 0.0, 0.0];
        let mut moved = b.clone();
        moved.stack_pose = RigidTransform::translation(shift).compose(&moved.stack_pose);
        let mut stacks = vec![a.clone(), moved];
        let rec = register_stacks_v2v(&mut stacks, 0, &V2vConfig::default()).unwrap();
        assert!(rec[0].final_ncc >= rec[0].initial_ncc);
        let err = stacks[1].stack_pose.translation_vector() - b.stack_pose.translation_vector();
        assert!(err.norm() < 0.5, "residual {err:?}");

        let mut aligned = vec![a, b.clone()];
        register_stacks_v2v(&mut aligned, 0, &V2vConfig::default()).unwrap();
        let d = aligned[1].stack_pose.translation_vector() - b.stack_pose.translation_vector();
        assert!(d.norm() < 0.1, "{d:?}");
        let rot = crate::rigid::geodesic_rotation_deg(&aligned[1].stack_pose, &b.stack_pose);
        assert!(rot < 0.1, "{rot}");
    }
}
