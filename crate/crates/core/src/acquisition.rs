//! Slice acquisition forward model: `ŷ_k = C_k · A(T(x, t_k); Σ_k)`.
//!
//! `A` is an oriented Gaussian interpolation: every pixel is the
//! self-normalized, weighted average of trilinear volume samples taken at
//! PSF offsets. Offsets live in the slice frame (third axis along the slice
//! normal) and are rotated into world space together with the pixel.

use std::f64::consts::{LN_2, PI};

use autodiff::{Tape, Var};
use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rigid::{rotation_partials, RigidTransform};
use crate::volume::{Boundary, Slice2D, SliceStack, SliceState, VoxelGrid3D};

/// Diagonal PSF covariance `(σ1², σ2², σ3²)` in mm² for in-plane spacing
/// `s1, s2` and slice thickness `s3`: in-plane FWHM `1.2·s`, through-plane
/// FWHM `s3`.
pub fn psf_covariance(s1: f64, s2: f64, s3: f64) -> Result<[f64; 3]> {
    if [s1, s2, s3].iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::geometry(format!(
            "PSF needs positive spacing, got ({s1}, {s2}, {s3})"
        )));
    }
    let k = 8.0 * LN_2;
    Ok([(1.2 * s1).powi(2) / k, (1.2 * s2).powi(2) / k, s3 * s3 / k])
}

/// Density of `N(0, diag(sigma2))` at `u`.
pub fn gaussian_weight(u: [f64; 3], sigma2: [f64; 3]) -> f64 {
    let det: f64 = sigma2.iter().product();
    let q: f64 = u.iter().zip(&sigma2).map(|(x, s)| x * x / s).sum();
    (2.0 * PI).powf(-1.5) / det.sqrt() * (-0.5 * q).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsfLattice {
    /// Gauss–Hermite nodes and weights per axis: matches the first
    /// `2n − 1` moments of the Gaussian exactly. With three points the
    /// nodes sit at `0, ±√3·σ`; larger rules reach past `±2.5σ`.
    GaussHermite,
    /// Evenly spaced nodes on `±2.5σ` weighted by the Gaussian density.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PsfMode {
    Deterministic { lattice: PsfLattice, points: [usize; 3] },
    Stochastic { samples: usize },
}

impl Default for PsfMode {
    fn default() -> Self {
        Self::Deterministic {
            lattice: PsfLattice::GaussHermite,
            points: [3, 3, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfModel {
    pub sigma2: [f64; 3],
    pub mode: PsfMode,
    pub seed: u64,
    /// Self-normalize the weights (partition of unity). When false the
    /// stochastic estimator weights each draw by `g(u, Σ)/S`.
    pub normalized: bool,
}

impl PsfModel {
    pub fn new(sigma2: [f64; 3], mode: PsfMode, seed: u64) -> Result<Self> {
        if sigma2.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::geometry("PSF variances must be positive"));
        }
        match mode {
            PsfMode::Deterministic { points, .. } if points.contains(&0) => {
                return Err(Error::input("PSF lattice needs at least one point per axis"))
            }
            PsfMode::Stochastic { samples: 0 } => {
                return Err(Error::input("PSF needs at least one sample"))
            }
            _ => {}
        }
        Ok(Self {
            sigma2,
            mode,
            seed,
            normalized: true,
        })
    }

    /// PSF of a slice from its spacing and thickness.
    pub fn for_slice(slice: &Slice2D, mode: PsfMode, seed: u64) -> Result<Self> {
        let s = psf_covariance(slice.spacing[0], slice.spacing[1], slice.thickness)?;
        Self::new(s, mode, seed)
    }

    pub fn num_samples(&self) -> usize {
        match self.mode {
            PsfMode::Deterministic { points, .. } => points.iter().product(),
            PsfMode::Stochastic { samples } => samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfSample {
    /// Slice-frame offset in mm.
    pub offset: [f64; 3],
    pub weight: f64,
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for the standard
/// normal (Golub–Welsch).
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut j = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        let b = ((i + 1) as f64).sqrt();
        j[(i, i + 1)] = b;
        j[(i + 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize away eigen-solver rounding
    for i in 0..n / 2 {
        let (x, w) = (pairs[n - 1 - i].0 - pairs[i].0, pairs[i].1 + pairs[n - 1 - i].1);
        pairs[i] = (-x / 2.0, w / 2.0);
        pairs[n - 1 - i] = (x / 2.0, w / 2.0);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

fn uniform_nodes(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -2.5 + 5.0 * i as f64 / (n - 1) as f64).collect()
}

/// PSF offsets and weights for one slice. `stream` selects an independent
/// random stream in stochastic mode (typically the slice index); the
/// deterministic lattices ignore it.
pub fn draw_psf_offsets(psf: &PsfModel, stream: u64) -> Vec<PsfSample> {
    let sd = psf.sigma2.map(f64::sqrt);
    let mut out = Vec::with_capacity(psf.num_samples());
    match psf.mode {
        PsfMode::Deterministic { lattice, points } => {
            let per_axis: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
                .map(|a| match lattice {
                    PsfLattice::GaussHermite => gauss_hermite(points[a]),
                    PsfLattice::Uniform => {
                        let x = uniform_nodes(points[a]);
                        let w = x.iter().map(|v| (-0.5 * v * v).exp()).collect();
                        (x, w)
                    }
                })
                .collect();
            for (z, wz) in per_axis[2].0.iter().zip(&per_axis[2].1) {
                for (y, wy) in per_axis[1].0.iter().zip(&per_axis[1].1) {
                    for (x, wx) in per_axis[0].0.iter().zip(&per_axis[0].1) {
                        out.push(PsfSample {
                            offset: [x * sd[0], y * sd[1], z * sd[2]],
                            weight: wx * wy * wz,
                        });
                    }
                }
            }
            if psf.normalized {
                let total: f64 = out.iter().map(|s| s.weight).sum();
                out.iter_mut().for_each(|s| s.weight /= total);
            }
        }
        PsfMode::Stochastic { samples } => {
            let mut rng = ChaCha8Rng::seed_from_u64(
                psf.seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for _ in 0..samples {
                let u = [0, 1, 2].map(|a| normal.sample(&mut rng) * sd[a]);
                let weight = if psf.normalized {
                    1.0 / samples as f64
                } else {
                    gaussian_weight(u, psf.sigma2) / samples as f64
                };
                out.push(PsfSample { offset: u, weight });
            }
        }
    }
    out
}

/// Placement of one slice: nominal slice-frame → world pose plus the center
/// about which its motion acts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceGeometry {
    pub dims: [usize; 2],
    pub spacing: [f64; 2],
    pub thickness: f64,
    pub nominal: RigidTransform,
    pub center: Vector3<f64>,
}

impl SliceGeometry {
    pub fn from_stack(stack: &SliceStack, k: usize) -> Self {
        let (slice, _) = &stack.slices[k];
        let nominal = stack
            .stack_pose
            .compose(&RigidTransform::translation([0.0, 0.0, stack.slice_offset(k)]));
        Self {
            dims: slice.dims,
            spacing: slice.spacing,
            thickness: slice.thickness,
            nominal,
            center: stack.center(),
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Slice-frame position of pixel `(a, b)`.
    pub fn pixel_position(&self, a: usize, b: usize) -> Vector3<f64> {
        Vector3::new(
            (a as f64 - (self.dims[0] as f64 - 1.0) / 2.0) * self.spacing[0],
            (b as f64 - (self.dims[1] as f64 - 1.0) / 2.0) * self.spacing[1],
            0.0,
        )
    }

    /// `(Q, τ)` with `world = Q·q + τ` under motion `t`.
    pub fn slice_to_world(&self, t: &RigidTransform) -> (Matrix3<f64>, Vector3<f64>) {
        let r = t.rotation_matrix();
        let q = r * self.nominal.rotation_matrix();
        let tau = r * (self.nominal.translation_vector() - self.center)
            + self.center
            + t.translation_vector();
        (q, tau)
    }

    /// Row-major 3×4 map from slice-frame mm to continuous voxel indices of
    /// `grid`.
    pub fn index_affine(&self, t: &RigidTransform, grid: &VoxelGrid3D) -> [f64; 12] {
        let l = grid.world_to_index_linear();
        let (q, tau) = self.slice_to_world(t);
        let lin = l * q;
        let off = l * (tau - Vector3::from(grid.origin));
        let mut m = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                m[4 * r + c] = lin[(r, c)];
            }
            m[4 * r + 3] = off[r];
        }
        m
    }

    /// `∂ index_affine / ∂ (αx, αy, αz, dx, dy, dz)` as a row-major 12×6
    /// matrix.
    pub fn index_affine_jacobian(&self, t: &RigidTransform, grid: &VoxelGrid3D) -> Vec<f64> {
        let l = grid.world_to_index_linear();
        let q0 = self.nominal.rotation_matrix();
        let arm = self.nominal.translation_vector() - self.center;
        let mut jac = vec![0.0; 72];
        for (i, dr) in rotation_partials(t.alpha()).iter().enumerate() {
            let dlin = l * dr * q0;
            let doff = l * dr * arm;
            for r in 0..3 {
                for c in 0..3 {
                    jac[(4 * r + c) * 6 + i] = dlin[(r, c)];
                }
                jac[(4 * r + 3) * 6 + i] = doff[r];
            }
        }
        for j in 0..3 {
            for r in 0..3 {
                jac[(4 * r + 3) * 6 + 3 + j] = l[(r, j)];
            }
        }
        jac
    }
}

#[inline]
fn apply_affine(m: &[f64; 12], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[4 * r] * p[0] + m[4 * r + 1] * p[1] + m[4 * r + 2] * p[2] + m[4 * r + 3])
}

/// Self-normalized PSF-weighted average of trilinear samples around the
/// world point `p`, with slice-frame offsets rotated by `rotation`.
pub fn oriented_gaussian_sample(
    grid: &VoxelGrid3D,
    p: Vector3<f64>,
    offsets: &[PsfSample],
    rotation: &Matrix3<f64>,
) -> Result<f64> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::input("non-finite sample point"));
    }
    let (mut acc, mut wsum) = (0.0, 0.0);
    for s in offsets {
        let w = p + rotation * Vector3::from(s.offset);
        let ijk = grid.index_from_world(w);
        acc += s.weight * grid.sample_index([ijk.x, ijk.y, ijk.z], Boundary::Zero);
        wsum += s.weight;
    }
    Ok(acc / wsum)
}

/// Forward model for one slice (no noise): `C_k · A(T(x, t_k); Σ)`.
pub fn predict_slice(
    grid: &VoxelGrid3D,
    geom: &SliceGeometry,
    state: &SliceState,
    offsets: &[PsfSample],
) -> Result<Slice2D> {
    if !state.transform.is_finite() {
        return Err(Error::numerical("non-finite slice transform"));
    }
    if offsets.is_empty() {
        return Err(Error::input("empty PSF offset set"));
    }
    let m = geom.index_affine(&state.transform, grid);
    let mut data = Vec::with_capacity(geom.num_pixels());
    for b in 0..geom.dims[1] {
        for a in 0..geom.dims[0] {
            let q = geom.pixel_position(a, b);
            let mut acc = 0.0;
            for s in offsets {
                let u = s.offset;
                let ijk = apply_affine(&m, [q.x + u[0], q.y + u[1], u[2]]);
                acc += s.weight * grid.sample_index(ijk, Boundary::Zero);
            }
            data.push(state.intensity_scale * acc);
        }
    }
    Slice2D::new(geom.dims, geom.spacing, geom.thickness, data)
}

/// Precomputed slice-frame sample positions for recording slice predictions
/// on a [`Tape`].
#[derive(Debug, Clone)]
pub struct SliceSampler {
    pub geom: SliceGeometry,
    /// Pixel indices (`a + nu·b`) this sampler predicts.
    pub pixels: Vec<usize>,
    /// `[pixels·S, 3]` slice-frame points, grouped per pixel.
    base: Vec<f64>,
    weights: Vec<f64>,
}

impl SliceSampler {
    pub fn new(geom: SliceGeometry, offsets: &[PsfSample]) -> Self {
        Self::with_stride(geom, offsets, 1)
    }

    /// Uses every `stride`-th pixel along both in-plane axes.
    pub fn with_stride(geom: SliceGeometry, offsets: &[PsfSample], stride: usize) -> Self {
        let stride = stride.max(1);
        let mut pixels = Vec::new();
        for b in (0..geom.dims[1]).step_by(stride) {
            for a in (0..geom.dims[0]).step_by(stride) {
                pixels.push(a + geom.dims[0] * b);
            }
        }
        let mut base = Vec::with_capacity(pixels.len() * offsets.len() * 3);
        for &p in &pixels {
            let q = geom.pixel_position(p % geom.dims[0], p / geom.dims[0]);
            for s in offsets {
                base.extend_from_slice(&[q.x + s.offset[0], q.y + s.offset[1], s.offset[2]]);
            }
        }
        let total: f64 = offsets.iter().map(|s| s.weight).sum();
        let weights = offsets.iter().map(|s| s.weight / total).collect();
        Self {
            geom,
            pixels,
            base,
            weights,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.pixels.len()
    }

    /// Observed values of `slice` at this sampler's pixels.
    pub fn gather(&self, slice: &Slice2D) -> Vec<f64> {
        self.pixels.iter().map(|&p| slice.data[p]).collect()
    }

    /// Continuous voxel indices of every sample under motion `t`.
    pub fn index_points(&self, t: &RigidTransform, grid: &VoxelGrid3D) -> Vec<f64> {
        let m = self.geom.index_affine(t, grid);
        self.base
            .chunks_exact(3)
            .flat_map(|p| apply_affine(&m, [p[0], p[1], p[2]]))
            .collect()
    }

    /// Records `A(x)` at a fixed pose; `volume` is a `[nz, ny, nx]` (or
    /// `[1, nz, ny, nx]`) node. Returns a `[pixels]` node.
    pub fn record_fixed(
        &self,
        tape: &mut Tape,
        volume: Var,
        t: &RigidTransform,
        grid: &VoxelGrid3D,
    ) -> Result<Var> {
        self.record_points(tape, volume, self.index_points(t, grid))
    }

    /// Records `A(x)` at precomputed [`SliceSampler::index_points`].
    pub fn record_points(&self, tape: &mut Tape, volume: Var, points: Vec<f64>) -> Result<Var> {
        let n = self.base.len() / 3;
        let pts = tape.constant(&[n, 3], points)?;
        let s = tape.grid_sample(volume, pts)?;
        Ok(tape.weighted_group_sum(s, &self.weights)?)
    }

    /// Records `A(x)` with the pose as a differentiable `[6]` node
    /// `(αx, αy, αz, dx, dy, dz)`.
    pub fn record_pose(
        &self,
        tape: &mut Tape,
        volume: Var,
        params: Var,
        grid: &VoxelGrid3D,
    ) -> Result<Var> {
        let p = tape.value(params);
        if p.len() != 6 {
            return Err(Error::input("pose node must hold 6 parameters"));
        }
        let t = RigidTransform::from_params([p[0], p[1], p[2], p[3], p[4], p[5]]);
        let m = self.geom.index_affine(&t, grid).to_vec();
        let jac = self.geom.index_affine_jacobian(&t, grid);
        let mvar = tape.jacobian_map(params, &[3, 4], m, jac)?;
        let n = self.base.len() / 3;
        let base = tape.constant(&[n, 3], self.base.clone())?;
        let pts = tape.affine_points(mvar, base)?;
        let s = tape.grid_sample(volume, pts)?;
        Ok(tape.weighted_group_sum(s, &self.weights)?)
    }
}

/// Gaussian-weighted lattice used for splatting: dense enough along each
/// axis that consecutive samples are at most half a target voxel apart.
fn splat_offsets(sigma2: [f64; 3], extent: [f64; 3], target: f64) -> Vec<PsfSample> {
    let mut points = [1usize; 3];
    for a in 0..3 {
        if extent[a] > target * 1.001 {
            let span = 5.0 * sigma2[a].sqrt();
            points[a] = ((span / (0.5 * target)).ceil() as usize + 1) | 1;
        }
    }
    let psf = PsfModel {
        sigma2,
        mode: PsfMode::Deterministic {
            lattice: PsfLattice::Uniform,
            points,
        },
        seed: 0,
        normalized: true,
    };
    draw_psf_offsets(&psf, 0)
}

/// World-axis-aligned grid at `spacing` covering every slice footprint
/// (under the slices' current transforms), with dims padded up to a
/// multiple of `multiple`.
pub fn footprint_grid(stacks: &[SliceStack], spacing: f64, multiple: usize) -> Result<VoxelGrid3D> {
    if stacks.is_empty() || stacks.iter().any(|s| s.is_empty()) {
        return Err(Error::input("need at least one non-empty stack"));
    }
    if !(spacing > 0.0) {
        return Err(Error::geometry("target spacing must be positive"));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for stack in stacks {
        for (k, (_, state)) in stack.slices.iter().enumerate() {
            let g = SliceGeometry::from_stack(stack, k);
            let (q, tau) = g.slice_to_world(&state.transform);
            let h = Vector3::new(
                (g.dims[0] as f64 - 1.0) / 2.0 * g.spacing[0],
                (g.dims[1] as f64 - 1.0) / 2.0 * g.spacing[1],
                g.thickness / 2.0,
            );
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        let w = q * Vector3::new(sx * h.x, sy * h.y, sz * h.z) + tau;
                        lo = lo.inf(&w);
                        hi = hi.sup(&w);
                    }
                }
            }
        }
    }
    let m = multiple.max(1);
    let mut dims = [0usize; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let n = ((hi[a] - lo[a]) / spacing - 1e-9).ceil() as usize + 1;
        let n = n.div_ceil(m) * m;
        let extent = (n - 1) as f64 * spacing;
        origin[a] = (lo[a] + hi[a]) / 2.0 - extent / 2.0;
        dims[a] = n;
    }
    VoxelGrid3D::zeros(dims, [spacing; 3], origin)
}

/// PSF-weighted scattered average of all slice pixels onto `grid`
/// (trilinear splatting). Voxels receiving no weight are set to 0.
/// Slices flagged `excluded` are skipped; intensity scales divide out.
pub fn scatter_into(stacks: &[SliceStack], grid: &mut VoxelGrid3D) -> Result<()> {
    let n = grid.len();
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    let target = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let [nx, ny, nz] = grid.dims;
    for stack in stacks {
        let first = &stack.slices[0].0;
        let sigma2 = psf_covariance(first.spacing[0], first.spacing[1], first.thickness)?;
        let extent = [first.spacing[0], first.spacing[1], first.thickness + stack.gap];
        let offsets = splat_offsets(sigma2, extent, target);
        for (k, (slice, state)) in stack.slices.iter().enumerate() {
            if state.excluded {
                continue;
            }
            let geom = SliceGeometry::from_stack(stack, k);
            let m = geom.index_affine(&state.transform, grid);
            let c = state.intensity_scale;
            for b in 0..geom.dims[1] {
                for a in 0..geom.dims[0] {
                    let v = slice.data[a + geom.dims[0] * b] / c;
                    let q = geom.pixel_position(a, b);
                    for s in &offsets {
                        let u = s.offset;
                        let p = apply_affine(&m, [q.x + u[0], q.y + u[1], u[2]]);
                        let base = p.map(f64::floor);
                        let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
                        for dz in 0..2 {
                            let z = base[2] as i64 + dz;
                            if z < 0 || z >= nz as i64 {
                                continue;
                            }
                            let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
                            for dy in 0..2 {
                                let y = base[1] as i64 + dy;
                                if y < 0 || y >= ny as i64 {
                                    continue;
                                }
                                let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
                                for dx in 0..2 {
                                    let x = base[0] as i64 + dx;
                                    if x < 0 || x >= nx as i64 {
                                        continue;
                                    }
                                    let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
                                    let w = s.weight * wx * wy * wz;
                                    let o = (z as usize * ny + y as usize) * nx + x as usize;
                                    num[o] += w * v;
                                    den[o] += w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let wmax = den.iter().cloned().fold(0.0, f64::max);
    for i in 0..n {
        grid.data[i] = if den[i] > 1e-9 * wmax { num[i] / den[i] } else { 0.0 };
    }
    Ok(())
}

/// Initial volume: [`footprint_grid`] at `target_spacing` filled by
/// [`scatter_into`].
pub fn scatter_init_volume(stacks: &[SliceStack], target_spacing: f64) -> Result<VoxelGrid3D> {
    let mut grid = footprint_grid(stacks, target_spacing, 1)?;
    scatter_into(stacks, &mut grid)?;
    Ok(grid)
}
