//! Single-file NIfTI-1 (`.nii`) reading and writing for 3-D scalar volumes.
//!
//! Reads float32 and int16 (with `scl_slope`/`scl_inter`) in either byte
//! order; writes little-endian float32 or int16. Geometry comes from the
//! sform rows when `sform_code > 0`, else from the qform quaternion, else
//! from `pixdim` alone.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::volume::VoxelGrid3D;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("header size field is {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("bad magic {0:?}, expected \"n+1\" or \"ni1\"")]
    BadMagic([u8; 4]),
    #[error("dim[0] is not in 1..=7 in either byte order")]
    BadByteOrder,
    #[error("unsupported dimensions {0:?}")]
    BadDims([i16; 8]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: expected {expected} bytes of voxel data, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unusable geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NiftiError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            Self::BadHeaderSize(_) => 1,
            Self::BadMagic(_) => 2,
            Self::BadByteOrder => 3,
            Self::BadDims(_) => 4,
            Self::UnsupportedDatatype(_) => 5,
            Self::Truncated { .. } => 6,
            Self::Geometry(_) => 7,
            Self::Io(_) => 8,
        }
    }
}

type NResult<T> = std::result::Result<T, NiftiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NiftiDtype {
    #[default]
    Float32,
    /// Linearly quantized to the full int16 range via `scl_slope`/`scl_inter`.
    Int16,
}

struct Fields<'a, B: ByteOrder> {
    h: &'a [u8],
    _b: std::marker::PhantomData<B>,
}

impl<B: ByteOrder> Fields<'_, B> {
    fn i16(&self, at: usize) -> i16 {
        B::read_i16(&self.h[at..])
    }
    fn i32(&self, at: usize) -> i32 {
        B::read_i32(&self.h[at..])
    }
    fn f32(&self, at: usize) -> f64 {
        B::read_f32(&self.h[at..]) as f64
    }
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    spacing: [f64; 3],
    axes: Matrix3<f64>,
    origin: [f64; 3],
    big_endian: bool,
}

fn parse_header<B: ByteOrder>(h: &[u8], big_endian: bool) -> NResult<Header> {
    let f = Fields::<B> {
        h,
        _b: std::marker::PhantomData,
    };
    let size = f.i32(0);
    if size != HEADER_SIZE as i32 {
        return Err(NiftiError::BadHeaderSize(size));
    }
    let magic: [u8; 4] = h[344..348].try_into().unwrap();
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(NiftiError::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = f.i16(40 + 2 * i);
    }
    let nd = dim[0] as usize;
    let extra_ok = (4..=nd).all(|i| dim[i] == 1);
    if !(1..=7).contains(&nd) || (1..=nd.min(3)).any(|i| dim[i] < 1) || !extra_ok {
        return Err(NiftiError::BadDims(dim));
    }
    let dims = [0, 1, 2].map(|i| if i < nd { dim[i + 1] as usize } else { 1 });
    let datatype = f.i16(70);
    if datatype != DT_FLOAT32 && datatype != DT_INT16 {
        return Err(NiftiError::UnsupportedDatatype(datatype));
    }
    let vox = f.f32(108);
    let vox_offset = if vox >= HEADER_SIZE as f64 { vox as usize } else { VOX_OFFSET };
    let mut slope = f.f32(112);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = f.f32(116);
    let inter = if inter.is_finite() { inter } else { 0.0 };
    let pixdim = [f.f32(80), f.f32(84), f.f32(88)];
    let qform_code = f.i16(252);
    let sform_code = f.i16(254);

    let (columns, origin) = if sform_code > 0 {
        let row = |at: usize| [f.f32(at), f.f32(at + 4), f.f32(at + 8), f.f32(at + 12)];
        let (x, y, z) = (row(280), row(296), row(312));
        let cols = Matrix3::new(x[0], x[1], x[2], y[0], y[1], y[2], z[0], z[1], z[2]);
        (cols, [x[3], y[3], z[3]])
    } else if qform_code > 0 {
        let (b, c, d) = (f.f32(256), f.f32(260), f.f32(264));
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = UnitQuaternion::from_quaternion(Quaternion::new(a, b, c, d)).to_rotation_matrix();
        let qfac = if f.f32(76) < 0.0 { -1.0 } else { 1.0 };
        let scale = Matrix3::from_diagonal(&Vector3::new(
            pixdim[0].abs(),
            pixdim[1].abs(),
            qfac * pixdim[2].abs(),
        ));
        (r.matrix() * scale, [f.f32(268), f.f32(272), f.f32(276)])
    } else {
        let s = pixdim.map(|p| if p > 0.0 { p } else { 1.0 });
        (Matrix3::from_diagonal(&Vector3::from(s)), [0.0; 3])
    };
    let spacing = [0, 1, 2].map(|i| columns.column(i).norm());
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(NiftiError::Geometry(format!("degenerate voxel spacing {spacing:?}")));
    }
    let mut axes = columns;
    for i in 0..3 {
        axes.column_mut(i).scale_mut(1.0 / spacing[i]);
    }
    let ortho = (axes.transpose() * axes - Matrix3::identity()).amax();
    if ortho > 1e-4 {
        return Err(NiftiError::Geometry(format!("sheared affine (orthonormality error {ortho:.1e})")));
    }
    if ortho > 0.0 {
        let svd = axes.svd(true, true);
        axes = svd.u.unwrap() * svd.v_t.unwrap();
    }
    Ok(Header {
        dims,
        datatype,
        vox_offset,
        slope,
        inter,
        spacing,
        axes,
        origin,
        big_endian,
    })
}

pub fn read_nifti(path: impl AsRef<Path>) -> NResult<VoxelGrid3D> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_nifti(&bytes)
}

/// Parses an in-memory `.nii` image.
pub fn decode_nifti(bytes: &[u8]) -> NResult<VoxelGrid3D> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let h = &bytes[..HEADER_SIZE];
    let le = LittleEndian::read_i16(&h[40..]);
    let be = BigEndian::read_i16(&h[40..]);
    let hdr = if (1..=7).contains(&le) {
        parse_header::<LittleEndian>(h, false)?
    } else if (1..=7).contains(&be) {
        parse_header::<BigEndian>(h, true)?
    } else {
        return Err(NiftiError::BadByteOrder);
    };
    let n: usize = hdr.dims.iter().product();
    let width = if hdr.datatype == DT_FLOAT32 { 4 } else { 2 };
    let body = bytes.get(hdr.vox_offset..).unwrap_or(&[]);
    if body.len() < n * width {
        return Err(NiftiError::Truncated {
            expected: n * width,
            found: body.len(),
        });
    }
    let raw: Vec<f64> = match (hdr.datatype, hdr.big_endian) {
        (DT_FLOAT32, false) => body.chunks_exact(4).take(n).map(|c| LittleEndian::read_f32(c) as f64).collect(),
        (DT_FLOAT32, true) => body.chunks_exact(4).take(n).map(|c| BigEndian::read_f32(c) as f64).collect(),
        (_, false) => body.chunks_exact(2).take(n).map(|c| LittleEndian::read_i16(c) as f64).collect(),
        (_, true) => body.chunks_exact(2).take(n).map(|c| BigEndian::read_i16(c) as f64).collect(),
    };
    let data = if hdr.slope == 1.0 && hdr.inter == 0.0 {
        raw
    } else {
        raw.into_iter().map(|v| v * hdr.slope + hdr.inter).collect()
    };
    VoxelGrid3D::new(hdr.dims, hdr.spacing, hdr.origin, hdr.axes, data)
        .map_err(|e| NiftiError::Geometry(e.to_string()))
}

pub fn write_nifti(grid: &VoxelGrid3D, path: impl AsRef<Path>) -> NResult<()> {
    write_nifti_as(grid, path, NiftiDtype::Float32)
}

pub fn write_nifti_as(grid: &VoxelGrid3D, path: impl AsRef<Path>, dtype: NiftiDtype) -> NResult<()> {
    let bytes = encode_nifti(grid, dtype);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Serializes a grid as a little-endian `.nii` image.
pub fn encode_nifti(grid: &VoxelGrid3D, dtype: NiftiDtype) -> Vec<u8> {
    type E = LittleEndian;
    let mut h = vec![0u8; VOX_OFFSET];
    E::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3, grid.dims[0] as i16, grid.dims[1] as i16, grid.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        E::write_i16(&mut h[40 + 2 * i..], *d);
    }
    let (code, bitpix) = match dtype {
        NiftiDtype::Float32 => (DT_FLOAT32, 32),
        NiftiDtype::Int16 => (DT_INT16, 16),
    };
    E::write_i16(&mut h[70..], code);
    E::write_i16(&mut h[72..], bitpix);

    let mut axes = grid.axes;
    let mut qfac = 1.0f32;
    if axes.determinant() < 0.0 {
        axes.column_mut(2).neg_mut();
        qfac = -1.0;
    }
    let pixdim = [qfac, grid.spacing[0] as f32, grid.spacing[1] as f32, grid.spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[76 + 4 * i..], *p);
    }
    E::write_f32(&mut h[108..], VOX_OFFSET as f32);

    let (slope, inter, payload): (f32, f32, Vec<u8>) = match dtype {
        NiftiDtype::Float32 => {
            let mut p = vec![0u8; grid.len() * 4];
            for (c, v) in p.chunks_exact_mut(4).zip(&grid.data) {
                E::write_f32(c, *v as f32);
            }
            (1.0, 0.0, p)
        }
        NiftiDtype::Int16 => {
            let (lo, hi) = grid.min_max();
            let slope = if hi > lo { (hi - lo) / 65534.0 } else { 1.0 };
            let inter = (lo + hi) / 2.0;
            let mut p = vec![0u8; grid.len() * 2];
            for (c, v) in p.chunks_exact_mut(2).zip(&grid.data) {
                let q = ((v - inter) / slope).round().clamp(-32767.0, 32767.0);
                E::write_i16(c, q as i16);
            }
            (slope as f32, inter as f32, p)
        }
    };
    E::write_f32(&mut h[112..], slope);
    E::write_f32(&mut h[116..], inter);
    h[123] = 2; // millimetres
    E::write_i16(&mut h[252..], 1);
    E::write_i16(&mut h[254..], 1);

    let q = UnitQuaternion::from_matrix(&axes);
    let qv = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    for (i, v) in [qv.i, qv.j, qv.k].iter().enumerate() {
        E::write_f32(&mut h[256 + 4 * i..], *v as f32);
    }
    for i in 0..3 {
        E::write_f32(&mut h[268 + 4 * i..], grid.origin[i] as f32);
    }
    for r in 0..3 {
        for c in 0..3 {
            let v = grid.axes[(r, c)] * grid.spacing[c];
            E::write_f32(&mut h[280 + 16 * r + 4 * c..], v as f32);
        }
        E::write_f32(&mut h[280 + 16 * r + 12..], grid.origin[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(&payload);
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_grid() -> VoxelGrid3D {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let data = (0..512).map(|_| rng.random::<f32>() as f64).collect();
        let axes = crate::rigid::rotation_matrix([0.0, 0.0, 90.0]);
        let axes = axes.map(|v| v.round());
        VoxelGrid3D::new([8, 8, 8], [0.8, 0.8, 6.0].map(|v: f64| v as f32 as f64), [-3.5, 2.0, 10.25], axes, data)
            .unwrap()
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let g = random_grid();
        let back = decode_nifti(&encode_nifti(&g, NiftiDtype::Float32)).unwrap();
        assert_eq!(back.dims, g.dims);
        assert_eq!(back.spacing, g.spacing);
        assert_eq!(back.origin, g.origin);
        assert_eq!(back.axes, g.axes);
        assert_eq!(back.data, g.data);
    }

    #[test]
    fn int16_round_trip_within_quantization() {
        let g = random_grid();
        let back = decode_nifti(&encode_nifti(&g, NiftiDtype::Int16)).unwrap();
        let step = 1.0 / 65534.0;
        for (a, b) in g.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= step, "{a} {b}");
        }
    }

    #[test]
    fn qform_used_without_sform() {
        let g = random_grid();
        let mut bytes = encode_nifti(&g, NiftiDtype::Float32);
        LittleEndian::write_i16(&mut bytes[254..], 0);
        for b in &mut bytes[280..328] {
            *b = 0;
        }
        let back = decode_nifti(&bytes).unwrap();
        assert!((back.axes - g.axes).amax() < 1e-6);
        assert_eq!(back.origin, g.origin);
    }

    #[test]
    fn big_endian_header_detected() {
        // hand-built 2×1×1 float32 image in big-endian order
        let mut h = vec![0u8; 352 + 8];
        BigEndian::write_i32(&mut h[0..], 348);
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            BigEndian::write_i16(&mut h[40 + 2 * i..], *d);
        }
        BigEndian::write_i16(&mut h[70..], DT_FLOAT32);
        for (i, p) in [1.0f32, 2.0, 3.0, 4.0].iter().enumerate() {
            BigEndian::write_f32(&mut h[76 + 4 * i..], *p);
        }
        BigEndian::write_f32(&mut h[108..], 352.0);
        h[344..348].copy_from_slice(b"n+1\0");
        BigEndian::write_f32(&mut h[352..], 1.5);
        BigEndian::write_f32(&mut h[356..], -2.0);
        let g = decode_nifti(&h).unwrap();
        assert_eq!(g.dims, [2, 1, 1]);
        assert_eq!(g.spacing, [2.0, 3.0, 4.0]);
        assert_eq!(g.data, vec![1.5, -2.0]);
    }

    #[test]
    fn malformed_headers_have_distinct_codes() {
        let good = encode_nifti(&random_grid(), NiftiDtype::Float32);
        let mut codes = Vec::new();

        let mut b = good.clone();
        b[344..348].copy_from_slice(b"abc\0");
        codes.push(decode_nifti(&b).unwrap_err().code());

        let mut b = good.clone();
        LittleEndian::write_i16(&mut b[70..], 64);
        codes.push(decode_nifti(&b).unwrap_err().code());

        let b = good[..good.len() - 10].to_vec();
        codes.push(decode_nifti(&b).unwrap_err().code());

        let mut b = good.clone();
        LittleEndian::write_i32(&mut b[0..], 540);
        codes.push(decode_nifti(&b).unwrap_err().code());

        let mut b = good.clone();
        LittleEndian::write_i16(&mut b[40..], 0);
        codes.push(decode_nifti(&b).unwrap_err().code());

        let mut b = good.clone();
        LittleEndian::write_i16(&mut b[48..], 3);
        LittleEndian::write_i16(&mut b[40..], 4);
        codes.push(decode_nifti(&b).unwrap_err().code());

        let mut sorted = codes.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len(), "{codes:?}");
    }
}
