//! Voxel grids, slices and slice stacks.
//!
//! Samples are node-centered: voxel `(i, j, k)` sits at
//! `origin + axes·(i·sx, j·sy, k·sz)`. Data is stored with `i` varying
//! fastest, so a grid maps onto a `[nz, ny, nx]` tensor.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rigid::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Zero,
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid3D {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// Columns are the world directions of the i, j and k axes.
    pub axes: Matrix3<f64>,
    pub data: Vec<f64>,
}

impl VoxelGrid3D {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        axes: Matrix3<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::geometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::geometry(format!("spacing must be > 0, got {spacing:?}")));
        }
        let ortho = (axes.transpose() * axes - Matrix3::identity()).amax();
        if !(ortho < 1e-9) {
            return Err(Error::geometry(format!("axes not orthonormal (error {ortho:.2e})")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::geometry(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            axes,
            data,
        })
    }

    /// Axis-aligned grid filled with zeros.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, Matrix3::identity(), vec![0.0; n])
    }

    /// Same geometry, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, self.axes, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    /// `[nz, ny, nx]`, the tensor shape of this grid.
    pub fn tensor_shape(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn world_from_index(&self, ijk: Vector3<f64>) -> Vector3<f64> {
        Vector3::from(self.origin) + self.axes * ijk.component_mul(&Vector3::from(self.spacing))
    }

    pub fn index_from_world(&self, p: Vector3<f64>) -> Vector3<f64> {
        (self.axes.transpose() * (p - Vector3::from(self.origin)))
            .component_div(&Vector3::from(self.spacing))
    }

    /// `L` such that `index = L·(world − origin)`.
    pub fn world_to_index_linear(&self) -> Matrix3<f64> {
        let inv = Matrix3::from_diagonal(&Vector3::from(self.spacing).map(|s| 1.0 / s));
        inv * self.axes.transpose()
    }

    /// World position of the grid's geometric center.
    pub fn center(&self) -> Vector3<f64> {
        let mid = Vector3::from(self.dims.map(|d| (d as f64 - 1.0) / 2.0));
        self.world_from_index(mid)
    }

    /// Trilinear interpolation at a continuous index.
    pub fn sample_index(&self, ijk: [f64; 3], boundary: Boundary) -> f64 {
        let [nx, ny, nz] = self.dims;
        let mut p = ijk;
        if boundary == Boundary::Clamp {
            for (a, n) in p.iter_mut().zip([nx, ny, nz]) {
                *a = a.clamp(0.0, (n - 1) as f64);
            }
        }
        let (x0, y0, z0) = (p[0].floor(), p[1].floor(), p[2].floor());
        let (fx, fy, fz) = (p[0] - x0, p[1] - y0, p[2] - z0);
        let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
            let z = z0 + dz;
            if wz == 0.0 || z < 0 || z >= nz as i64 {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let y = y0 + dy;
                if wy == 0.0 || y < 0 || y >= ny as i64 {
                    continue;
                }
                let row = (z as usize * ny + y as usize) * nx;
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let x = x0 + dx;
                    if wx == 0.0 || x < 0 || x >= nx as i64 {
                        continue;
                    }
                    acc += wx * wy * wz * self.data[row + x as usize];
                }
            }
        }
        acc
    }

    /// Trilinear interpolation at a world point.
    pub fn trilinear_sample(&self, xyz: Vector3<f64>, boundary: Boundary) -> Result<f64> {
        if !xyz.iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("non-finite sample point {xyz:?}")));
        }
        let ijk = self.index_from_world(xyz);
        Ok(self.sample_index([ijk.x, ijk.y, ijk.z], boundary))
    }

    /// Resamples this grid onto the geometry of `target`.
    pub fn resample_like(&self, target: &VoxelGrid3D, boundary: Boundary) -> VoxelGrid3D {
        let mut data = Vec::with_capacity(target.len());
        for k in 0..target.dims[2] {
            for j in 0..target.dims[1] {
                for i in 0..target.dims[0] {
                    let w = target.world_from_index(Vector3::new(i as f64, j as f64, k as f64));
                    let ijk = self.index_from_world(w);
                    data.push(self.sample_index([ijk.x, ijk.y, ijk.z], boundary));
                }
            }
        }
        target.with_data(data).expect("geometry copied from a valid grid")
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Sampled, unnormalized Gaussian on `−radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable correlation of an `i`-fastest 3-D array with one odd-length
/// kernel per axis. Taps falling outside the array are dropped; with
/// `renormalize` each output is divided by the kernel mass that remained
/// inside, otherwise by the full kernel mass.
pub fn separable_filter(
    data: &[f64],
    dims: [usize; 3],
    kernels: [&[f64]; 3],
    renormalize: bool,
) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut next = vec![0.0; cur.len()];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let k = kernels[axis];
        let r = (k.len() / 2) as i64;
        let total: f64 = k.iter().sum();
        let n = dims[axis] as i64;
        let st = strides[axis];
        for (o, out) in next.iter_mut().enumerate() {
            let pos = ((o / st) % dims[axis]) as i64;
            let base = o - pos as usize * st;
            let (mut acc, mut mass) = (0.0, 0.0);
            for (t, w) in k.iter().enumerate() {
                let q = pos + t as i64 - r;
                if q >= 0 && q < n {
                    acc += w * cur[base + q as usize * st];
                    mass += w;
                }
            }
            *out = if renormalize { acc / mass } else { acc / total };
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// One acquired 2-D slice. Pixel `(a, b)` is stored at `a + nu·b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub dims: [usize; 2],
    pub spacing: [f64; 2],
    pub thickness: f64,
    pub data: Vec<f64>,
}

impl Slice2D {
    pub fn new(dims: [usize; 2], spacing: [f64; 2], thickness: f64, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::geometry(format!("slice dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().chain([&thickness]).any(|&s| !(s > 0.0)) {
            return Err(Error::geometry("slice spacing and thickness must be > 0"));
        }
        if data.len() != dims[0] * dims[1] {
            return Err(Error::geometry("slice data length does not match dims"));
        }
        Ok(Self {
            dims,
            spacing,
            thickness,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Mutable per-slice reconstruction state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceState {
    pub transform: RigidTransform,
    /// Forward-model intensity factor: predicted slice = scale · A(x).
    pub intensity_scale: f64,
    pub outlier_weight: f64,
    pub excluded: bool,
}

impl Default for SliceState {
    fn default() -> Self {
        Self {
            transform: RigidTransform::identity(),
            intensity_scale: 1.0,
            outlier_weight: 1.0,
            excluded: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Self::Axial, Self::Coronal, Self::Sagittal];

    /// Columns: in-plane u, in-plane v, slice normal.
    pub fn frame(self) -> Matrix3<f64> {
        match self {
            Self::Axial => Matrix3::identity(),
            Self::Coronal => Matrix3::from_columns(&[
                Vector3::x(),
                Vector3::z(),
                -Vector3::y(),
            ]),
            Self::Sagittal => Matrix3::from_columns(&[
                Vector3::y(),
                Vector3::z(),
                Vector3::x(),
            ]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Axial => "axial",
            Self::Coronal => "coronal",
            Self::Sagittal => "sagittal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    /// The orientation whose normal is closest to `normal`.
    pub fn closest(normal: Vector3<f64>) -> Self {
        let n = normal.map(f64::abs);
        if n.z >= n.x && n.z >= n.y {
            Self::Axial
        } else if n.y >= n.x {
            Self::Coronal
        } else {
            Self::Sagittal
        }
    }
}

/// A stack of parallel slices.
///
/// In the slice frame, pixel `(a, b)` of slice `k` sits at
/// `((a − (nu−1)/2)·s1, (b − (nv−1)/2)·s2, (k − (ns−1)/2)·(thickness + gap))`.
/// `stack_pose` maps that frame into world space; its translation is the
/// stack center, which is also the center about which per-slice motion
/// `t_k` acts: `world = c + R_k·(nominal − c) + d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<(Slice2D, SliceState)>,
    pub nominal_orientation: Orientation,
    pub stack_pose: RigidTransform,
    pub gap: f64,
}

impl SliceStack {
    pub fn new(
        slices: Vec<Slice2D>,
        nominal_orientation: Orientation,
        stack_pose: RigidTransform,
    ) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::input("stack has no slices"))?;
        for s in &slices {
            if s.dims != first.dims || s.spacing != first.spacing || s.thickness != first.thickness {
                return Err(Error::geometry("slices in a stack must share dims, spacing and thickness"));
            }
        }
        Ok(Self {
            slices: slices.into_iter().map(|s| (s, SliceState::default())).collect(),
            nominal_orientation,
            stack_pose,
            gap: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice_dims(&self) -> [usize; 2] {
        self.slices[0].0.dims
    }

    pub fn in_plane_spacing(&self) -> [f64; 2] {
        self.slices[0].0.spacing
    }

    pub fn thickness(&self) -> f64 {
        self.slices[0].0.thickness
    }

    pub fn center(&self) -> Vector3<f64> {
        self.stack_pose.translation_vector()
    }

    /// Slice-frame offset of slice `k` along the normal.
    pub fn slice_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.len() as f64 - 1.0) / 2.0) * (self.thickness() + self.gap)
    }

    pub fn states(&self) -> Vec<SliceState> {
        self.slices.iter().map(|(_, s)| *s).collect()
    }

    pub fn transforms(&self) -> Vec<RigidTransform> {
        self.slices.iter().map(|(_, s)| s.transform).collect()
    }

    /// The stack as a volume at its nominal (motion-free) position:
    /// dims `(nu, nv, ns)`, spacing `(s1, s2, thickness + gap)`.
    pub fn to_grid(&self) -> VoxelGrid3D {
        let [nu, nv] = self.slice_dims();
        let [s1, s2] = self.in_plane_spacing();
        let ns = self.len();
        let sz = self.thickness() + self.gap;
        let frame = self.stack_pose.rotation_matrix();
        let corner = Vector3::new(
            -(nu as f64 - 1.0) / 2.0 * s1,
            -(nv as f64 - 1.0) / 2.0 * s2,
            -(ns as f64 - 1.0) / 2.0 * sz,
        );
        let origin = self.stack_pose.apply(corner);
        let data = self.slices.iter().flat_map(|(s, _)| s.data.iter().copied()).collect();
        VoxelGrid3D::new([nu, nv, ns], [s1, s2, sz], origin.into(), frame, data)
            .expect("stack geometry is valid")
    }

    /// Inverse of [`SliceStack::to_grid`]; the third grid axis is the slice
    /// normal and its spacing is taken as the thickness (no gap).
    pub fn from_grid(grid: &VoxelGrid3D) -> Result<Self> {
        let [nu, nv, ns] = grid.dims;
        let [s1, s2, sz] = grid.spacing;
        let slices = (0..ns)
            .map(|k| {
                let data = grid.data[k * nu * nv..(k + 1) * nu * nv].to_vec();
                Slice2D::new([nu, nv], [s1, s2], sz, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut frame = grid.axes;
        if frame.determinant() < 0.0 {
            return Err(Error::geometry("stack axes must form a right-handed frame"));
        }
        // guard against rounding in files: re-orthonormalize
        let svd = frame.svd(true, true);
        frame = svd.u.unwrap() * svd.v_t.unwrap();
        let center = grid.center();
        let pose = RigidTransform::from_rotation_translation(&frame, &center)?;
        let orientation = Orientation::closest(frame.column(2).into_owned());
        SliceStack::new(slices, orientation, pose)
    }
}
