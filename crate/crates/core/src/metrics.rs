//! Image similarity and motion-recovery metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rigid::{geodesic_rotation_deg, RigidTransform};
use crate::svr::ncc;
use crate::volume::{gaussian_kernel, separable_filter, VoxelGrid3D};

fn check_same(x: &VoxelGrid3D, reference: &VoxelGrid3D) -> Result<()> {
    if x.dims != reference.dims {
        return Err(Error::input(format!(
            "volumes differ in shape: {:?} vs {:?}",
            x.dims, reference.dims
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with `MAX` the dynamic range of
/// `reference` over the mask. Identical inputs give `+∞`.
pub fn psnr(x: &VoxelGrid3D, reference: &VoxelGrid3D, mask: Option<&[bool]>) -> Result<f64> {
    check_same(x, reference)?;
    if mask.is_some_and(|m| m.len() != x.len()) {
        return Err(Error::input("mask length does not match volume"));
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut lo, mut hi, mut se, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for i in (0..x.len()).filter(|&i| keep(i)) {
        let r = reference.data[i];
        lo = lo.min(r);
        hi = hi.max(r);
        se += (x.data[i] - r).powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::input("empty mask"));
    }
    Ok(psnr_from(hi - lo, se / n as f64))
}

/// `10·log10(max²/mse)`, `+∞` for zero error.
pub fn psnr_from(max: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max * max / mse).log10()
    }
}

/// Mean structural similarity with an 11³ Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and `L` the dynamic range of `reference`.
/// Windows are truncated at the volume border and renormalized.
pub fn ssim(x: &VoxelGrid3D, reference: &VoxelGrid3D) -> Result<f64> {
    check_same(x, reference)?;
    let (lo, hi) = reference.min_max();
    let l = hi - lo;
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let k = gaussian_kernel(1.5, 5);
    let blur = |v: &[f64]| separable_filter(v, x.dims, [&k, &k, &k], true);
    let a = &x.data;
    let b = &reference.data;
    let mu_a = blur(a);
    let mu_b = blur(b);
    let aa = blur(&a.iter().map(|v| v * v).collect::<Vec<_>>());
    let bb = blur(&b.iter().map(|v| v * v).collect::<Vec<_>>());
    let ab = blur(&a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>());
    let mut total = 0.0;
    for i in 0..a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += if den == 0.0 { 1.0 } else { num / den };
    }
    Ok(total / a.len() as f64)
}

/// Pearson correlation of two volumes.
pub fn ncc_volume(x: &VoxelGrid3D, reference: &VoxelGrid3D) -> Result<f64> {
    check_same(x, reference)?;
    Ok(ncc(&x.data, &reference.data, None, 1e-300)?.value)
}

/// Motion-recovery errors over slices. Rotation errors are given both as
/// the norm of the wrapped Euler-angle difference and as the geodesic angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotionError {
    pub translation_mae: f64,
    pub translation_rmse: f64,
    pub rotation_euler_mae: f64,
    pub rotation_euler_rmse: f64,
    pub rotation_geodesic_mae: f64,
    pub rotation_geodesic_rmse: f64,
    /// Mean absolute wrapped difference of each Euler angle.
    pub rotation_axis_mae: [f64; 3],
}

fn wrap_deg(a: f64) -> f64 {
    let r = (a + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

pub fn motion_error(pred: &[RigidTransform], truth: &[RigidTransform]) -> Result<MotionError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::input(format!(
            "motion_error needs equal, non-zero lengths ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mut e = MotionError {
        translation_mae: 0.0,
        translation_rmse: 0.0,
        rotation_euler_mae: 0.0,
        rotation_euler_rmse: 0.0,
        rotation_geodesic_mae: 0.0,
        rotation_geodesic_rmse: 0.0,
        rotation_axis_mae: [0.0; 3],
    };
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p.d(), t.d());
        let tr = (0..3).map(|a| (dp[a] - dt[a]).powi(2)).sum::<f64>().sqrt();
        let diff = [0, 1, 2].map(|a| wrap_deg(p.alpha()[a] - t.alpha()[a]));
        let eu = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let geo = geodesic_rotation_deg(p, t);
        e.translation_mae += tr / n;
        e.translation_rmse += tr * tr / n;
        e.rotation_euler_mae += eu / n;
        e.rotation_euler_rmse += eu * eu / n;
        e.rotation_geodesic_mae += geo / n;
        e.rotation_geodesic_rmse += geo * geo / n;
        for a in 0..3 {
            e.rotation_axis_mae[a] += diff[a].abs() / n;
        }
    }
    e.translation_rmse = e.translation_rmse.sqrt();
    e.rotation_euler_rmse = e.rotation_euler_rmse.sqrt();
    e.rotation_geodesic_rmse = e.rotation_geodesic_rmse.sqrt();
    Ok(e)
}
