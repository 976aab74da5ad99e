//! Phantoms and motion-corrupted stack synthesis with known per-slice
//! transforms.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{draw_psf_offsets, predict_slice, PsfLattice, PsfMode, PsfModel, SliceGeometry};
use crate::error::{Error, Result};
use crate::nifti::write_nifti;
use crate::rigid::RigidTransform;
use crate::volume::{gaussian_kernel, separable_filter, Orientation, Slice2D, SliceStack, SliceState, VoxelGrid3D};

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Means of the three tissue classes (inner, cortical, fluid).
    pub class_means: [f64; 3],
    /// Standard deviation of the smooth within-class texture.
    pub texture_std: f64,
    /// Peak relative amplitude of the multiplicative smooth bias.
    pub bias_amplitude: f64,
    /// Gaussian blur (voxels) applied to the labeled image.
    pub blur_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            spacing: [0.8; 3],
            seed: 0,
            class_means: [0.3, 0.55, 0.85],
            texture_std: 0.01,
            bias_amplitude: 0.03,
            blur_sigma: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub grid: VoxelGrid3D,
    /// 0 background, 1..=3 tissue classes.
    pub labels: Vec<u8>,
    /// Intensities before the final blur.
    pub sharp: Vec<f64>,
}

/// Smooth zero-mean random field with unit standard deviation.
fn smooth_field(dims: [usize; 3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = dims.iter().product();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let k = gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
    let mut f = separable_filter(&white, dims, [&k, &k, &k], true);
    let mean = f.iter().sum::<f64>() / n as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd.max(1e-300));
    f
}

/// Three-class head-like phantom: a fluid rim, a folded cortical shell, an
/// inner core with asymmetric fluid cavities and cortical nuclei, smooth
/// texture and a smooth multiplicative bias, then a light blur.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    if spec.dims.iter().any(|&d| d < 16) {
        return Err(Error::input("phantom needs at least 16 voxels per axis"));
    }
    let [nx, ny, nz] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
    let radii = [0.86 + jitter(&mut rng, 0.04), 0.76 + jitter(&mut rng, 0.04), 0.8 + jitter(&mut rng, 0.04)];
    let fold = [rng.random_range(3.0..6.0), rng.random_range(3.0..6.0), rng.random_range(0.0..std::f64::consts::TAU)];
    let cavities: Vec<([f64; 3], [f64; 3], u8)> = vec![
        ([-0.18 + jitter(&mut rng, 0.05), 0.05 + jitter(&mut rng, 0.05), 0.05], [0.1, 0.26, 0.12], 3),
        ([0.2 + jitter(&mut rng, 0.05), 0.1 + jitter(&mut rng, 0.05), 0.0], [0.08, 0.2, 0.1], 3),
        ([-0.15, -0.3 + jitter(&mut rng, 0.05), -0.2], [0.12, 0.1, 0.1], 2),
        ([0.16, -0.25, -0.22 + jitter(&mut rng, 0.05)], [0.1, 0.12, 0.09], 2),
    ];
    let mut labels = vec![0u8; nx * ny * nz];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [
                    2.0 * i as f64 / (nx - 1) as f64 - 1.0,
                    2.0 * j as f64 / (ny - 1) as f64 - 1.0,
                    2.0 * k as f64 / (nz - 1) as f64 - 1.0,
                ];
                let q = [p[0] / radii[0], p[1] / radii[1], p[2] / radii[2]];
                let s = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let theta = q[1].atan2(q[0]);
                let phi = (q[2] / s.max(1e-12)).clamp(-1.0, 1.0).acos();
                let wave = (fold[0] * theta + fold[2]).sin() * (fold[1] * phi).cos();
                let label = if s > 1.0 {
                    0
                } else if s > 0.88 {
                    3
                } else if s > 0.68 + 0.07 * wave {
                    2
                } else {
                    cavities
                        .iter()
                        .find(|(c, r, _)| {
                            (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() < 1.0
                        })
                        .map_or(1, |c| c.2)
                };
                labels[i + nx * (j + ny * k)] = label;
            }
        }
    }
    let texture = smooth_field(spec.dims, 2.0, &mut rng);
    let bias_field = smooth_field(spec.dims, (nx.min(ny).min(nz) as f64) / 4.0, &mut rng);
    let sharp: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(o, &l)| {
            if l == 0 {
                return 0.0;
            }
            let base = spec.class_means[l as usize - 1] + spec.texture_std * texture[o];
            let bias = 1.0 + spec.bias_amplitude * (bias_field[o] / 3.0).clamp(-1.0, 1.0);
            (base * bias).clamp(0.0, 1.0)
        })
        .collect();
    let data = if spec.blur_sigma > 0.0 {
        let k = gaussian_kernel(spec.blur_sigma, (3.0 * spec.blur_sigma).ceil() as usize);
        separable_filter(&sharp, spec.dims, [&k, &k, &k], true)
    } else {
        sharp.clone()
    };
    let origin = [0, 1, 2].map(|a| -(spec.dims[a] as f64 - 1.0) / 2.0 * spec.spacing[a]);
    let grid = VoxelGrid3D::zeros(spec.dims, spec.spacing, origin)?.with_data(data)?;
    Ok(Phantom { grid, labels, sharp })
}

/// Sum of random isotropic Gaussian blobs spread over the whole grid,
/// centered on the world origin. Smooth and asymmetric.
pub fn make_smooth_phantom(dims: [usize; 3], spacing: f64, blobs: usize, seed: u64) -> Result<VoxelGrid3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.map(|d| d as f64);
    let scale = n[0].min(n[1]).min(n[2]);
    let params: Vec<([f64; 3], f64, f64)> = (0..blobs)
        .map(|_| {
            (
                [0, 1, 2].map(|a| rng.random_range(0.0..1.0) * (n[a] - 1.0)),
                rng.random_range(0.025..0.06) * scale,
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [i as f64, j as f64, k as f64];
                let v: f64 = params
                    .iter()
                    .map(|(c, s, a)| {
                        let d2: f64 = (0..3).map(|x| (p[x] - c[x]).powi(2)).sum();
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                data.push(v);
            }
        }
    }
    let peak = data.iter().cloned().fold(0.0, f64::max);
    data.iter_mut().for_each(|v| *v /= peak);
    let origin = [0, 1, 2].map(|a| -(n[a] - 1.0) / 2.0 * spacing);
    VoxelGrid3D::zeros(dims, [spacing; 3], origin)?.with_data(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Catmull-Rom through the control points.
    Spline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WalkMode {
    /// Each control point adds a fresh `U(−i, i)` offset to the previous one.
    #[default]
    Incremental,
    /// Each control point is an independent `U(−i, i)` offset.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Offset range `i` (degrees for rotations, mm for translations).
    pub range: f64,
    pub stride: usize,
    pub seed: u64,
    pub interpolation: Interpolation,
    pub mode: WalkMode,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            range: 4.0,
            stride: 4,
            seed: 0,
            interpolation: Interpolation::Linear,
            mode: WalkMode::Incremental,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transforms: Vec<RigidTransform>,
    /// Control-point parameters; point `j` sits at slice `j·stride`.
    pub control_points: Vec<[f64; 6]>,
    /// The `U(−i, i)` draws behind each control point.
    pub increments: Vec<[f64; 6]>,
}

/// Draw from the open interval `(−i, i)`; `0` when `i = 0`.
fn open_uniform(rng: &mut ChaCha8Rng, i: f64) -> f64 {
    if i <= 0.0 {
        return 0.0;
    }
    loop {
        let v = rng.random_range(-i..i);
        if v > -i {
            return v;
        }
    }
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3)
}

/// Control-point random walk with per-slice interpolation.
pub fn random_walk_trajectory(n_slices: usize, cfg: &MotionConfig) -> Result<Trajectory> {
    if n_slices == 0 || cfg.stride == 0 || !(cfg.range >= 0.0) {
        return Err(Error::input("trajectory needs n_slices, stride >= 1 and range >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // control points cover every slice plus one past the end
    let count = (n_slices - 1) / cfg.stride + 2;
    let mut increments = Vec::with_capacity(count);
    let mut control_points: Vec<[f64; 6]> = Vec::with_capacity(count);
    for j in 0..count {
        let inc = [0; 6].map(|_| open_uniform(&mut rng, cfg.range));
        let point = match (cfg.mode, j) {
            (WalkMode::Incremental, j) if j > 0 => {
                let prev = control_points[j - 1];
                [0, 1, 2, 3, 4, 5].map(|a| prev[a] + inc[a])
            }
            _ => inc,
        };
        increments.push(inc);
        control_points.push(point);
    }
    let cp = &control_points;
    let transforms = (0..n_slices)
        .map(|s| {
            let j = s / cfg.stride;
            let t = (s % cfg.stride) as f64 / cfg.stride as f64;
            let p = [0, 1, 2, 3, 4, 5].map(|a| match cfg.interpolation {
                Interpolation::Linear => cp[j][a] + t * (cp[j + 1][a] - cp[j][a]),
                Interpolation::Spline => {
                    let p0 = cp[j.saturating_sub(1)][a];
                    let p3 = cp[(j + 2).min(cp.len() - 1)][a];
                    catmull_rom(p0, cp[j][a], cp[j + 1][a], p3, t)
                }
            });
            RigidTransform::from_params(p)
        })
        .collect();
    Ok(Trajectory {
        transforms,
        control_points,
        increments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackSpec {
    pub orientation: Orientation,
    pub in_plane: f64,
    pub thickness: f64,
    pub gap: f64,
    /// Noise standard deviation as a fraction of the ground-truth maximum.
    pub noise_frac: f64,
    pub psf: PsfMode,
    pub seed: u64,
    /// Slices per stack; by default as many as fit in the volume extent.
    pub n_slices: Option<usize>,
}

impl Default for StackSpec {
    fn default() -> Self {
        Self {
            orientation: Orientation::Axial,
            in_plane: 0.8,
            thickness: 6.0,
            gap: 0.0,
            noise_frac: 0.05,
            psf: PsfMode::Deterministic {
                lattice: PsfLattice::Uniform,
                points: [5, 5, 15],
            },
            seed: 0,
            n_slices: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedStack {
    /// Noisy slices; every state reset to the identity.
    pub stack: SliceStack,
    pub truth: Vec<RigidTransform>,
    pub trajectory: Trajectory,
    /// Noiseless slices.
    pub clean: Vec<Slice2D>,
}

/// Extent (mm) of `gt` along world direction `dir`.
fn extent_along(gt: &VoxelGrid3D, dir: Vector3<f64>) -> f64 {
    (0..3)
        .map(|a| (gt.axes.column(a).dot(&dir)).abs() * gt.dims[a] as f64 * gt.spacing[a])
        .sum()
}

/// Empty stack of `spec`'s geometry centered on `gt`.
pub fn stack_geometry(gt: &VoxelGrid3D, spec: &StackSpec) -> Result<SliceStack> {
    if !(spec.thickness >= spec.in_plane && spec.in_plane > 0.0) {
        return Err(Error::geometry("stack needs thickness >= in-plane spacing > 0"));
    }
    let frame = gt.axes * spec.orientation.frame();
    let [u, v, w] = [0, 1, 2].map(|c| frame.column(c).into_owned());
    let nu = ((extent_along(gt, u) - spec.in_plane) / spec.in_plane).round().max(0.0) as usize + 1;
    let nv = ((extent_along(gt, v) - spec.in_plane) / spec.in_plane).round().max(0.0) as usize + 1;
    let ns = spec.n_slices.unwrap_or_else(|| {
        ((extent_along(gt, w) / (spec.thickness + spec.gap)) + 1e-9).floor().max(1.0) as usize
    });
    let pose = RigidTransform::from_rotation_translation(&frame, &gt.center())?;
    let blank = (0..ns)
        .map(|_| Slice2D::new([nu, nv], [spec.in_plane; 2], spec.thickness, vec![0.0; nu * nv]))
        .collect::<Result<Vec<_>>>()?;
    let mut stack = SliceStack::new(blank, spec.orientation, pose)?;
    stack.gap = spec.gap;
    Ok(stack)
}

/// Acquires one stack from `gt`: each slice is the forward model at its
/// trajectory pose with unit intensity scale, plus Gaussian noise.
pub fn simulate_stack(gt: &VoxelGrid3D, spec: &StackSpec, motion: &MotionConfig) -> Result<SimulatedStack> {
    if !(spec.noise_frac >= 0.0) {
        return Err(Error::input("noise fraction must be >= 0"));
    }
    let mut stack = stack_geometry(gt, spec)?;
    let trajectory = random_walk_trajectory(stack.len(), motion)?;
    let psf = PsfModel::for_slice(&stack.slices[0].0, spec.psf, spec.seed)?;
    let (_, peak) = gt.min_max();
    let sd = spec.noise_frac * peak;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xA0153));
    let mut clean = Vec::with_capacity(stack.len());
    for k in 0..stack.len() {
        let geom = SliceGeometry::from_stack(&stack, k);
        let state = SliceState {
            transform: trajectory.transforms[k],
            ..SliceState::default()
        };
        let offsets = draw_psf_offsets(&psf, k as u64);
        let s = predict_slice(gt, &geom, &state, &offsets)?;
        let mut noisy = s.clone();
        if sd > 0.0 {
            noisy.data.iter_mut().for_each(|v| *v += sd * normal.sample(&mut rng));
        }
        stack.slices[k].0 = noisy;
        clean.push(s);
    }
    Ok(SimulatedStack {
        stack,
        truth: trajectory.transforms.clone(),
        trajectory,
        clean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl Group {
    /// Offset range (mm and degrees).
    pub fn range(self) -> f64 {
        match self {
            Self::A => 4.0,
            Self::B => 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub group: Group,
    pub seed: u64,
    pub in_plane: f64,
    pub thickness: f64,
    pub noise_frac: f64,
    pub stride: usize,
    pub interpolation: Interpolation,
    pub mode: WalkMode,
    pub psf: PsfMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = StackSpec::default();
        Self {
            group: Group::A,
            seed: 0,
            in_plane: s.in_plane,
            thickness: s.thickness,
            noise_frac: s.noise_frac,
            stride: 4,
            interpolation: Interpolation::Linear,
            mode: WalkMode::Incremental,
            psf: s.psf,
        }
    }
}

impl DatasetConfig {
    /// Thickness / in-plane variant of an otherwise default configuration,
    /// for the varied-resolution preset (thickness in {3, 4.5, 6} mm,
    /// in-plane in {0.8, 1.0, 1.2} mm).
    pub fn varied_resolution(thickness: f64, in_plane: f64, seed: u64) -> Result<Self> {
        if ![3.0, 4.5, 6.0].contains(&thickness) || ![0.8, 1.0, 1.2].contains(&in_plane) {
            return Err(Error::Config("varied-resolution preset: unsupported thickness or in-plane".into()));
        }
        Ok(Self {
            thickness,
            in_plane,
            seed,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStack {
    pub orientation: Orientation,
    pub file: String,
    pub seed: u64,
    pub motion_seed: u64,
    pub slices: usize,
    pub transforms: Vec<[f64; 6]>,
    pub increments: Vec<[f64; 6]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub stacks: Vec<ManifestStack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub range: f64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn num_stacks(&self) -> usize {
        self.entries.iter().map(|e| e.stacks.len()).sum()
    }
}

/// Simulated stacks for one ground truth, all three orientations.
pub fn simulate_subject(
    gt: &VoxelGrid3D,
    cfg: &DatasetConfig,
    index: u64,
) -> Result<Vec<(SimulatedStack, u64, u64)>> {
    let base = derive_seed(cfg.seed, index);
    Orientation::ALL
        .iter()
        .enumerate()
        .map(|(o, &orientation)| {
            let seed = derive_seed(base, 2 * o as u64);
            let motion_seed = derive_seed(base, 2 * o as u64 + 1);
            let spec = StackSpec {
                orientation,
                in_plane: cfg.in_plane,
                thickness: cfg.thickness,
                noise_frac: cfg.noise_frac,
                psf: cfg.psf,
                seed,
                ..StackSpec::default()
            };
            let motion = MotionConfig {
                range: cfg.group.range(),
                stride: cfg.stride,
                seed: motion_seed,
                interpolation: cfg.interpolation,
                mode: cfg.mode,
            };
            Ok((simulate_stack(gt, &spec, &motion)?, seed, motion_seed))
        })
        .collect()
}

/// Writes `<root>/<id>/<orientation>.nii`, `<root>/<id>/transforms_gt.txt`
/// and `<root>/manifest.toml`. Subjects are simulated in parallel with
/// seeds derived from their position in `gts`.
pub fn simulate_dataset(root: &Path, gts: &[(String, VoxelGrid3D)], cfg: &DatasetConfig) -> Result<Manifest> {
    if gts.is_empty() {
        return Err(Error::input("dataset needs at least one ground truth"));
    }
    let subjects: Vec<Vec<(SimulatedStack, u64, u64)>> = gts
        .par_iter()
        .enumerate()
        .map(|(i, (_, gt))| simulate_subject(gt, cfg, i as u64))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(gts.len());
    for ((id, _), stacks) in gts.iter().zip(subjects) {
        let dir = root.join(id);
        fs::create_dir_all(&dir)?;
        let mut table = String::from("# orientation slice ax ay az dx dy dz\n");
        let mut listed = Vec::with_capacity(stacks.len());
        for (sim, seed, motion_seed) in stacks {
            let o = sim.stack.nominal_orientation;
            let file = format!("{}.nii", o.name());
            write_nifti(&sim.stack.to_grid(), dir.join(&file))?;
            for (k, t) in sim.truth.iter().enumerate() {
                table.push_str(&format!("{} {k} {t}\n", o.name()));
            }
            listed.push(ManifestStack {
                orientation: o,
                file: format!("{id}/{file}"),
                seed,
                motion_seed,
                slices: sim.stack.len(),
                transforms: sim.truth.iter().map(RigidTransform::params).collect(),
                increments: sim.trajectory.increments.clone(),
            });
        }
        fs::write(dir.join("transforms_gt.txt"), table)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            stacks: listed,
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        range: cfg.group.range(),
        entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(root.join("manifest.toml"), text)?;
    Ok(manifest)
}
