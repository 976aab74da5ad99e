use crate::{grad_buf, AdError, Node, Op, Result, Tape, Var};

/// One axis of a row-major tensor seen as `outer × n × inner`.
fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Doubles one axis with half-pixel (align-corners-false) linear weights.
fn upsample_axis(x: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(dims, axis);
    let mut out = vec![0.0; outer * 2 * n * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for i in 0..n {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(n - 1);
            let (c, p, q) = (&src[i * inner..][..inner], &src[prev * inner..][..inner], &src[next * inner..][..inner]);
            let (lo, hi) = dst[2 * i * inner..(2 * i + 2) * inner].split_at_mut(inner);
            for t in 0..inner {
                lo[t] = 0.75 * c[t] + 0.25 * p[t];
                hi[t] = 0.75 * c[t] + 0.25 * q[t];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`]; `dims` are the *input* dims.
fn upsample_axis_adjoint(g: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(dims, axis);
    let mut gin = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let src = &g[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut gin[o * n * inner..(o + 1) * n * inner];
        for i in 0..n {
            let prev = i.saturating_sub(1);
            let next = (i + 1).min(n - 1);
            for t in 0..inner {
                let lo = src[2 * i * inner + t];
                let hi = src[(2 * i + 1) * inner + t];
                dst[i * inner + t] += 0.75 * (lo + hi);
                dst[prev * inner + t] += 0.25 * lo;
                dst[next * inner + t] += 0.25 * hi;
            }
        }
    }
    gin
}

#[inline]
fn cell(p: f64) -> (i64, f64) {
    let f = p.floor();
    (f as i64, p - f)
}

/// Trilinear weights and flat indices of the (up to 8) in-bounds corners
/// around `pt = (w, h, d)` in a `[D, H, W]` lattice; corners outside the
/// lattice contribute zero.
#[inline]
fn for_each_corner(
    pt: [f64; 3],
    [d, h, w]: [usize; 3],
    mut f: impl FnMut(usize, [f64; 3], [bool; 3]),
) {
    let (x0, fx) = cell(pt[0]);
    let (y0, fy) = cell(pt[1]);
    let (z0, fz) = cell(pt[2]);
    for cz in 0..2 {
        let z = z0 + cz;
        if z < 0 || z >= d as i64 {
            continue;
        }
        for cy in 0..2 {
            let y = y0 + cy;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for cx in 0..2 {
                let x = x0 + cx;
                if x < 0 || x >= w as i64 {
                    continue;
                }
                let idx = ((z as usize) * h + y as usize) * w + x as usize;
                let wx = if cx == 1 { fx } else { 1.0 - fx };
                let wy = if cy == 1 { fy } else { 1.0 - fy };
                let wz = if cz == 1 { fz } else { 1.0 - fz };
                f(idx, [wx, wy, wz], [cx == 1, cy == 1, cz == 1]);
            }
        }
    }
}

fn volume_dims(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [d, h, w] => Some([*d, *h, *w]),
        [1, d, h, w] => Some([*d, *h, *w]),
        _ => None,
    }
}

impl Tape {
    /// Doubles every spatial axis of `[C, D, H, W]` (trilinear,
    /// align-corners-false, edge-clamped).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(AdError::InvalidArgument {
                op: "upsample2x",
                msg: format!("expected [C, D, H, W], got {shape:?}"),
            });
        }
        let mut dims = shape;
        let mut v = upsample_axis(&self.nodes[x.0].value, &dims, 1);
        dims[1] *= 2;
        v = upsample_axis(&v, &dims, 2);
        dims[2] *= 2;
        v = upsample_axis(&v, &dims, 3);
        dims[3] *= 2;
        Ok(self.push(dims, v, Op::Upsample2x(x)))
    }

    /// Samples a `[D, H, W]` (or `[1, D, H, W]`) volume at `[N, 3]` continuous
    /// index coordinates `(w, h, d)`, zero outside the lattice.
    /// Differentiable w.r.t. both the volume and the points.
    pub fn grid_sample(&mut self, volume: Var, points: Var) -> Result<Var> {
        let dims = volume_dims(&self.nodes[volume.0].shape).ok_or_else(|| {
            AdError::InvalidArgument {
                op: "grid_sample",
                msg: format!("expected a volume, got {:?}", self.nodes[volume.0].shape),
            }
        })?;
        let ps = &self.nodes[points.0].shape;
        if ps.len() != 2 || ps[1] != 3 {
            return Err(AdError::ShapeMismatch {
                op: "grid_sample",
                lhs: vec![0, 3],
                rhs: ps.clone(),
            });
        }
        let pts = &self.nodes[points.0].value;
        if pts.iter().any(|p| !p.is_finite()) {
            return Err(AdError::NonFinite("grid_sample points"));
        }
        let vol = &self.nodes[volume.0].value;
        let out: Vec<f64> = pts
            .chunks_exact(3)
            .map(|p| {
                let mut acc = 0.0;
                for_each_corner([p[0], p[1], p[2]], dims, |i, w, _| {
                    acc += w[0] * w[1] * w[2] * vol[i]
                });
                acc
            })
            .collect();
        let n = out.len();
        Ok(self.push(vec![n], out, Op::GridSample(volume, points)))
    }

    /// Forward difference `x[i+1] - x[i]` along `axis`; that axis shrinks by one.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || shape[axis] < 2 {
            return Err(AdError::InvalidArgument {
                op: "forward_diff",
                msg: format!("axis {axis} unusable for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n - 1 {
                for t in 0..inner {
                    out.push(v[base + (i + 1) * inner + t] - v[base + i * inner + t]);
                }
            }
        }
        let mut s = shape;
        s[axis] -= 1;
        Ok(self.push(s, out, Op::ForwardDiff(x, axis)))
    }

    /// Applies a `[3, 4]` affine matrix to every row of an `[N, 3]` point set.
    pub fn affine_points(&mut self, matrix: Var, points: Var) -> Result<Var> {
        let (ms, ps) = (&self.nodes[matrix.0].shape, &self.nodes[points.0].shape);
        if ms != &[3, 4] || ps.len() != 2 || ps[1] != 3 {
            return Err(AdError::ShapeMismatch {
                op: "affine_points",
                lhs: ms.clone(),
                rhs: ps.clone(),
            });
        }
        let m = &self.nodes[matrix.0].value;
        let out: Vec<f64> = self.nodes[points.0]
            .value
            .chunks_exact(3)
            .flat_map(|p| {
                (0..3).map(move |r| m[r * 4] * p[0] + m[r * 4 + 1] * p[1] + m[r * 4 + 2] * p[2] + m[r * 4 + 3])
            })
            .collect();
        let shape = ps.clone();
        Ok(self.push(shape, out, Op::AffinePoints(matrix, points)))
    }

    /// Records `value = f(x)` computed outside the tape, given its Jacobian
    /// (`value.len() × x.len()`, row-major). Lets callers splice analytic
    /// maps (e.g. Euler angles to rotation matrices) into the graph.
    pub fn jacobian_map(
        &mut self,
        x: Var,
        shape: &[usize],
        value: Vec<f64>,
        jacobian: Vec<f64>,
    ) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if crate::numel(shape) != value.len() || jacobian.len() != value.len() * n {
            return Err(AdError::InvalidArgument {
                op: "jacobian_map",
                msg: format!(
                    "value {} / jacobian {} inconsistent with input {n}",
                    value.len(),
                    jacobian.len()
                ),
            });
        }
        Ok(self.push(shape.to_vec(), value, Op::Jacobian(x, jacobian)))
    }
}

pub(crate) fn upsample_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    g: &[f64],
) {
    if !nodes[x.0].needs_grad {
        return;
    }
    let d0 = nodes[x.0].shape.clone();
    let mut d2 = d0.clone();
    d2[1] *= 2;
    d2[2] *= 2;
    let mut d1 = d0.clone();
    d1[1] *= 2;
    let g2 = upsample_axis_adjoint(g, &d2, 3);
    let g1 = upsample_axis_adjoint(&g2, &d1, 2);
    let g0 = upsample_axis_adjoint(&g1, &d0, 1);
    if let Some(gx) = grad_buf(nodes, grads, x) {
        gx.iter_mut().zip(&g0).for_each(|(a, b)| *a += b);
    }
}

pub(crate) fn grid_sample_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    vol: Var,
    pts: Var,
    g: &[f64],
) {
    let dims = volume_dims(&nodes[vol.0].shape).expect("validated in forward");
    let pv = &nodes[pts.0].value;
    if let Some(gv) = grad_buf(nodes, grads, vol) {
        for (p, gi) in pv.chunks_exact(3).zip(g) {
            if *gi == 0.0 {
                continue;
            }
            for_each_corner([p[0], p[1], p[2]], dims, |i, w, _| {
                gv[i] += gi * w[0] * w[1] * w[2]
            });
        }
    }
    let vv = &nodes[vol.0].value;
    if let Some(gp) = grad_buf(nodes, grads, pts) {
        for ((p, gi), out) in pv.chunks_exact(3).zip(g).zip(gp.chunks_exact_mut(3)) {
            let mut d = [0.0; 3];
            for_each_corner([p[0], p[1], p[2]], dims, |i, w, hi| {
                let v = vv[i];
                let s = |b: bool| if b { 1.0 } else { -1.0 };
                d[0] += s(hi[0]) * w[1] * w[2] * v;
                d[1] += s(hi[1]) * w[0] * w[2] * v;
                d[2] += s(hi[2]) * w[0] * w[1] * v;
            });
            for k in 0..3 {
                out[k] += gi * d[k];
            }
        }
    }
}

pub(crate) fn forward_diff_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    axis: usize,
    g: &[f64],
) {
    let shape = &nodes[x.0].shape;
    let (outer, n, inner) = axis_split(shape, axis);
    if let Some(gx) = grad_buf(nodes, grads, x) {
        for o in 0..outer {
            let base = o * n * inner;
            let gbase = o * (n - 1) * inner;
            for i in 0..n - 1 {
                for t in 0..inner {
                    let gi = g[gbase + i * inner + t];
                    gx[base + (i + 1) * inner + t] += gi;
                    gx[base + i * inner + t] -= gi;
                }
            }
        }
    }
}

pub(crate) fn affine_points_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    m: Var,
    p: Var,
    g: &[f64],
) {
    let pv = &nodes[p.0].value;
    let mv = &nodes[m.0].value;
    if let Some(gm) = grad_buf(nodes, grads, m) {
        for (pt, go) in pv.chunks_exact(3).zip(g.chunks_exact(3)) {
            for r in 0..3 {
                gm[r * 4] += go[r] * pt[0];
                gm[r * 4 + 1] += go[r] * pt[1];
                gm[r * 4 + 2] += go[r] * pt[2];
                gm[r * 4 + 3] += go[r];
            }
        }
    }
    if let Some(gp) = grad_buf(nodes, grads, p) {
        for (out, go) in gp.chunks_exact_mut(3).zip(g.chunks_exact(3)) {
            for c in 0..3 {
                out[c] += (0..3).map(|r| mv[r * 4 + c] * go[r]).sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::Tape;

    #[test]
    fn upsample_constant_stays_constant() {
        let mut t = Tape::new();
        let x = t.constant(&[2, 2, 3, 1], vec![4.0; 12]).unwrap();
        let y = t.upsample2x(x).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 6, 2]);
        assert!(t.value(y).iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn upsample_half_pixel_weights() {
        // 1-D ramp along W: [0, 1] -> [0, 0.25, 0.75, 1]
        let mut t = Tape::new();
        let x = t.constant(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = t.upsample2x(x).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2, 4]);
        assert_eq!(&t.value(y)[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn grid_sample_ramp_value_and_point_gradient() {
        // f(w, h, d) = w on a 4^3 lattice
        let mut t = Tape::new();
        let vol: Vec<f64> = (0..64).map(|i| (i % 4) as f64).collect();
        let v = t.constant(&[4, 4, 4], vol).unwrap();
        let p = t.param(&[1, 3], vec![1.3, 2.2, 0.7]).unwrap();
        let s = t.grid_sample(v, p).unwrap();
        assert!((t.value(s)[0] - 1.3).abs() < 1e-12);
        let l = t.sum(s);
        t.backward(l).unwrap();
        let g = t.grad(p).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12 && g[1].abs() < 1e-12 && g[2].abs() < 1e-12);
    }

    #[test]
    fn grid_sample_zero_padding() {
        let mut t = Tape::new();
        let v = t.constant(&[2, 2, 2], vec![1.0; 8]).unwrap();
        let p = t
            .constant(&[3, 3], vec![-0.5, 0.0, 0.0, 5.0, 0.0, 0.0, 0.5, 0.5, 0.5])
            .unwrap();
        let s = t.grid_sample(v, p).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn grid_sample_rejects_nan_points() {
        let mut t = Tape::new();
        let v = t.constant(&[2, 2, 2], vec![1.0; 8]).unwrap();
        let p = t.constant(&[1, 3], vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(t.grid_sample(v, p).is_err());
    }

    #[test]
    fn forward_diff_along_each_axis() {
        let mut t = Tape::new();
        // value = 100 d + 10 h + w on [2, 2, 2]
        let vals: Vec<f64> = (0..8)
            .map(|i| (100 * (i / 4) + 10 * ((i / 2) % 2) + i % 2) as f64)
            .collect();
        let x = t.constant(&[2, 2, 2], vals).unwrap();
        for (axis, step) in [(0, 100.0), (1, 10.0), (2, 1.0)] {
            let d = t.forward_diff(x, axis).unwrap();
            assert_eq!(t.value(d).len(), 4);
            assert!(t.value(d).iter().all(|&v| v == step));
        }
    }
}
