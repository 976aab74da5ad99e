use crate::{grad_buf, numel, AdError, Node, Op, Result, Tape, Var};

/// `c = a·b + beta·c` for dense strided matrices (`m×k` times `k×n`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every strided access for the
    // row-major / transposed layouts used in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn transposed(rows_of_original: usize) -> (isize, isize) {
    // Viewing a row-major (r × c) matrix as its (c × r) transpose.
    (1, rows_of_original as isize)
}

impl Tape {
    /// 1×1×1 channel mixing: `[C_out, C_in] × [C_in, ...] -> [C_out, ...]`.
    pub fn channel_mix(&mut self, weights: Var, x: Var) -> Result<Var> {
        let (ws, xs) = (&self.nodes[weights.0].shape, &self.nodes[x.0].shape);
        if ws.len() != 2 || xs.is_empty() || ws[1] != xs[0] {
            return Err(AdError::ShapeMismatch {
                op: "channel_mix",
                lhs: ws.clone(),
                rhs: xs.clone(),
            });
        }
        let (co, ci) = (ws[0], ws[1]);
        let n = numel(&xs[1..]);
        let mut shape = xs.clone();
        shape[0] = co;
        let mut out = vec![0.0; co * n];
        gemm(
            co,
            ci,
            n,
            &self.nodes[weights.0].value,
            row_major(ci),
            &self.nodes[x.0].value,
            row_major(n),
            0.0,
            &mut out,
        );
        Ok(self.push(shape, out, Op::ChannelMix(weights, x)))
    }

    /// Adds a per-channel bias `[C]` to `[C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if xs.is_empty() || bs.len() != 1 || bs[0] != xs[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_bias",
                lhs: xs.clone(),
                rhs: bs.clone(),
            });
        }
        let per = numel(&xs[1..]);
        let b = &self.nodes[bias.0].value;
        let value = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / per])
            .collect();
        let shape = xs.clone();
        Ok(self.push(shape, value, Op::AddBias(x, bias)))
    }

    /// Per-channel standardization over all non-channel axes followed by a
    /// learnable affine map: `gain·(x-μ)/sqrt(var+eps) + bias`.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let c = *xs.first().ok_or(AdError::InvalidArgument {
            op: "channel_norm",
            msg: "scalar input".into(),
        })?;
        for p in [gain, bias] {
            if self.nodes[p.0].shape != [c] {
                return Err(AdError::ShapeMismatch {
                    op: "channel_norm",
                    lhs: xs.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let per = numel(&xs[1..]);
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut mean = Vec::with_capacity(c);
        let mut inv_std = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(xv.len());
        for ch in 0..c {
            let seg = &xv[ch * per..(ch + 1) * per];
            let mu = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            out.extend(seg.iter().map(|v| gv[ch] * (v - mu) * is + bv[ch]));
            mean.push(mu);
            inv_std.push(is);
        }
        Ok(self.push(
            xs,
            out,
            Op::ChannelNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
        ))
    }

    /// Strided convolution of `[C_in, D, H, W]` with `[C_out, C_in, KD, KH, KW]`
    /// and zero padding. 2-D inputs use `D = KD = 1`.
    pub fn conv(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        let geom = ConvGeom::new(xs, ws, stride, pad)?;
        let cols = geom.im2col(&self.nodes[x.0].value);
        let (co, k, p) = (geom.co, geom.k(), geom.positions());
        let mut out = vec![0.0; co * p];
        gemm(
            co,
            k,
            p,
            &self.nodes[w.0].value,
            row_major(k),
            &cols,
            row_major(p),
            0.0,
            &mut out,
        );
        let shape = vec![co, geom.out[0], geom.out[1], geom.out[2]];
        Ok(self.push(shape, out, Op::Conv { x, w, stride, pad }))
    }
}

struct ConvGeom {
    ci: usize,
    co: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[1] {
            return Err(AdError::ShapeMismatch {
                op: "conv",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = xs[a + 1] + 2 * pad[a];
            if stride[a] == 0 || padded < ws[a + 2] {
                return Err(AdError::InvalidArgument {
                    op: "conv",
                    msg: format!("kernel {:?} does not fit input {:?}", &ws[2..], &xs[1..]),
                });
            }
            out[a] = (padded - ws[a + 2]) / stride[a] + 1;
        }
        Ok(Self {
            ci: xs[0],
            co: ws[0],
            input: [xs[1], xs[2], xs[3]],
            kernel: [ws[2], ws[3], ws[4]],
            out,
            stride,
            pad,
        })
    }

    fn k(&self) -> usize {
        self.ci * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(row, col, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let mut row = 0;
        for c in 0..self.ci {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let mut col = 0;
                        for z in 0..od {
                            let zz = (z * self.stride[0] + a) as isize - self.pad[0] as isize;
                            for y in 0..oh {
                                let yy = (y * self.stride[1] + b) as isize - self.pad[1] as isize;
                                for x in 0..ow {
                                    let xx =
                                        (x * self.stride[2] + e) as isize - self.pad[2] as isize;
                                    if zz >= 0
                                        && yy >= 0
                                        && xx >= 0
                                        && (zz as usize) < id
                                        && (yy as usize) < ih
                                        && (xx as usize) < iw
                                    {
                                        let idx = ((c * id + zz as usize) * ih + yy as usize) * iw
                                            + xx as usize;
                                        f(row, col, idx);
                                    }
                                    col += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.k() * p];
        self.for_each_tap(|r, c, i| cols[r * p + c] = x[i]);
        cols
    }
}

pub(crate) fn channel_mix_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    w: Var,
    x: Var,
    g: &[f64],
) {
    let ws = &nodes[w.0].shape;
    let (co, ci) = (ws[0], ws[1]);
    let n = g.len() / co;
    let (wv, xv) = (&nodes[w.0].value, &nodes[x.0].value);
    if let Some(gw) = grad_buf(nodes, grads, w) {
        // gW[co, ci] += G[co, n] · Xᵀ[n, ci]
        gemm(co, n, ci, g, row_major(n), xv, transposed(n), 1.0, gw);
    }
    if let Some(gx) = grad_buf(nodes, grads, x) {
        // gX[ci, n] += Wᵀ[ci, co] · G[co, n]
        gemm(ci, co, n, wv, transposed(ci), g, row_major(n), 1.0, gx);
    }
}

pub(crate) fn add_bias_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    b: Var,
    g: &[f64],
) {
    if let Some(gx) = grad_buf(nodes, grads, x) {
        gx.iter_mut().zip(g).for_each(|(a, gi)| *a += gi);
    }
    let c = nodes[b.0].value.len();
    let per = g.len() / c;
    if let Some(gb) = grad_buf(nodes, grads, b) {
        for (ch, v) in gb.iter_mut().enumerate() {
            *v += g[ch * per..(ch + 1) * per].iter().sum::<f64>();
        }
    }
}

pub(crate) fn channel_norm_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    [x, gain, bias]: [Var; 3],
    mean: &[f64],
    inv_std: &[f64],
    g: &[f64],
) {
    let c = mean.len();
    let per = g.len() / c;
    let xv = &nodes[x.0].value;
    let gv = &nodes[gain.0].value;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let seg = ch * per..(ch + 1) * per;
        for (gi, xi) in g[seg.clone()].iter().zip(&xv[seg]) {
            sum_g[ch] += gi;
            sum_gx[ch] += gi * (xi - mu) * is;
        }
    }
    if let Some(gb) = grad_buf(nodes, grads, bias) {
        gb.iter_mut().zip(&sum_g).for_each(|(a, s)| *a += s);
    }
    if let Some(gg) = grad_buf(nodes, grads, gain) {
        gg.iter_mut().zip(&sum_gx).for_each(|(a, s)| *a += s);
    }
    if let Some(gx) = grad_buf(nodes, grads, x) {
        let n = per as f64;
        for ch in 0..c {
            let (mu, is, gamma) = (mean[ch], inv_std[ch], gv[ch]);
            let (mg, mgx) = (sum_g[ch] / n, sum_gx[ch] / n);
            let seg = ch * per..(ch + 1) * per;
            for ((d, gi), xi) in gx[seg.clone()].iter_mut().zip(&g[seg.clone()]).zip(&xv[seg]) {
                let xhat = (xi - mu) * is;
                *d += gamma * is * (gi - mg - xhat * mgx);
            }
        }
    }
}

pub(crate) fn conv_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    w: Var,
    stride: [usize; 3],
    pad: [usize; 3],
    g: &[f64],
) {
    let geom = ConvGeom::new(&nodes[x.0].shape, &nodes[w.0].shape, stride, pad)
        .expect("shapes validated in forward");
    let (co, k, p) = (geom.co, geom.k(), geom.positions());
    if nodes[w.0].needs_grad {
        let cols = geom.im2col(&nodes[x.0].value);
        if let Some(gw) = grad_buf(nodes, grads, w) {
            // gW[co, k] += G[co, p] · colsᵀ[p, k]
            gemm(co, p, k, g, row_major(p), &cols, transposed(p), 1.0, gw);
        }
    }
    if nodes[x.0].needs_grad {
        let mut gcols = vec![0.0; k * p];
        // gcols[k, p] = Wᵀ[k, co] · G[co, p]
        gemm(k, co, p, &nodes[w.0].value, transposed(k), g, row_major(p), 0.0, &mut gcols);
        if let Some(gx) = grad_buf(nodes, grads, x) {
            geom.for_each_tap(|r, c, i| gx[i] += gcols[r * p + c]);
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::Tape;

    #[test]
    fn channel_mix_matches_manual_product() {
        let mut t = Tape::new();
        let w = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
        let x = t
            .constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let y = t.channel_mix(w, x).unwrap();
        // row 0: 1*[1,2] + 2*[3,4] + 3*[5,6] = [22, 28]
        // row 1: -1*[1,2] + 0.5*[5,6] = [1.5, 1]
        assert_eq!(t.value(y), &[22.0, 28.0, 1.5, 1.0]);
    }

    #[test]
    fn channel_norm_standardizes() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = t.constant(&[1], vec![1.0]).unwrap();
        let b = t.constant(&[1], vec![0.0]).unwrap();
        let y = t.channel_norm(x, g, b, 0.0).unwrap();
        let v = t.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_norm_zero_variance_is_finite() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 3], vec![2.0; 3]).unwrap();
        let g = t.constant(&[1], vec![1.0]).unwrap();
        let b = t.constant(&[1], vec![0.5]).unwrap();
        let y = t.channel_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(t.value(y), &[0.5; 3]);
    }

    #[test]
    fn conv_identity_kernel_with_stride() {
        let mut t = Tape::new();
        let x = t
            .constant(&[1, 1, 4, 4], (0..16).map(f64::from).collect())
            .unwrap();
        // 3x3 kernel with a single centre tap.
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t.constant(&[1, 1, 1, 3, 3], k).unwrap();
        let y = t.conv(x, w, [1, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y), &[0.0, 2.0, 8.0, 10.0]);
    }
}
