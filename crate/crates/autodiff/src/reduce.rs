use crate::{grad_buf, numel, AdError, Node, Op, Result, Tape, Var};

impl Tape {
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![m], Op::Mean(a))
    }

    /// Extracts element `i` (flat index) as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if i >= v.len() {
            return Err(AdError::InvalidArgument {
                op: "index",
                msg: format!("index {i} out of range for {} elements", v.len()),
            });
        }
        let x = v[i];
        Ok(self.push(Vec::new(), vec![x], Op::Index(a, i)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = &self.nodes[a.0].shape;
        if numel(old) != numel(shape) {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: old.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a)))
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(AdError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(AdError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = &self.nodes[p.0];
                let block = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, value, Op::Concat(parts.to_vec(), axis)))
    }

    /// Global average over all non-channel axes: `[C, ...] -> [C]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        if shape.is_empty() {
            return Err(AdError::InvalidArgument {
                op: "channel_mean",
                msg: "scalar input".into(),
            });
        }
        let c = shape[0];
        let per = numel(&shape[1..]);
        let v = &self.nodes[a.0].value;
        let value = (0..c)
            .map(|ch| v[ch * per..(ch + 1) * per].iter().sum::<f64>() / per as f64)
            .collect();
        Ok(self.push(vec![c], value, Op::ChannelMean(a)))
    }

    /// Treats `a` as consecutive groups of `weights.len()` values and returns
    /// the weighted sum of each group.
    pub fn weighted_group_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let s = weights.len();
        if s == 0 || v.len() % s != 0 {
            return Err(AdError::InvalidArgument {
                op: "weighted_group_sum",
                msg: format!("{} values not divisible into groups of {s}", v.len()),
            });
        }
        let value = v
            .chunks_exact(s)
            .map(|grp| grp.iter().zip(weights).map(|(x, w)| x * w).sum())
            .collect();
        let n = v.len() / s;
        Ok(self.push(
            vec![n],
            value,
            Op::WeightedGroupSum(a, weights.to_vec()),
        ))
    }
}

pub(crate) fn concat_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    parts: &[Var],
    axis: usize,
    g: &[f64],
) {
    let base = &nodes[parts[0].0].shape;
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| nodes[p.0].shape[axis]).sum();
    let mut offset = 0;
    for p in parts {
        let block = nodes[p.0].shape[axis] * inner;
        if let Some(gp) = grad_buf(nodes, grads, *p) {
            for o in 0..outer {
                let src = &g[o * total * inner + offset..][..block];
                for (d, s) in gp[o * block..(o + 1) * block].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        offset += block;
    }
}

pub(crate) fn channel_mean_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    g: &[f64],
) {
    let per = numel(&nodes[a.0].shape[1..]);
    if let Some(ga) = grad_buf(nodes, grads, a) {
        for (ch, gc) in g.iter().enumerate() {
            let gi = gc / per as f64;
            ga[ch * per..(ch + 1) * per].iter_mut().for_each(|x| *x += gi);
        }
    }
}

pub(crate) fn weighted_group_sum_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    w: &[f64],
    g: &[f64],
) {
    if let Some(ga) = grad_buf(nodes, grads, a) {
        for (grp, gi) in ga.chunks_exact_mut(w.len()).zip(g) {
            for (x, wi) in grp.iter_mut().zip(w) {
                *x += wi * gi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::Tape;

    #[test]
    fn concat_middle_axis() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        assert_eq!(t.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn weighted_group_sum_groups() {
        let mut t = Tape::new();
        let a = t.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.weighted_group_sum(a, &[0.25, 0.75]).unwrap();
        assert_eq!(t.value(s), &[1.75, 3.75]);
    }
}
