use crate::{grad_buf, AdError, Node, Op, Result, Tape, Var};

pub(crate) fn acc(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if let Some(buf) = grad_buf(nodes, grads, v) {
        for (i, (b, gi)) in buf.iter_mut().zip(g).enumerate() {
            *b += f(i, *gi);
        }
    }
}

impl Tape {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(AdError::ShapeMismatch {
                op: name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = sa.clone();
        Ok(self.push(shape, value, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::ScalarMul(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// `sqrt(x² + eps²) - eps`: zero at zero, |x| elsewhere up to `eps`.
    pub fn abs_smooth(&mut self, a: Var, eps: f64) -> Var {
        self.unary(
            a,
            |x| (x * x + eps * eps).sqrt() - eps,
            Op::AbsSmooth(a, eps),
        )
    }

    /// Multiplies every element of `a` by the single-element variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("scale_by", s)?;
        Ok(self.unary(a, |x| x * sv, Op::ScaleBy(a, s)))
    }

    /// Adds the single-element variable `s` to every element of `a`.
    pub fn shift_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("shift_by", s)?;
        Ok(self.unary(a, |x| x + sv, Op::ShiftBy(a, s)))
    }

    pub(crate) fn scalar_of(&self, op: &'static str, s: Var) -> Result<f64> {
        let n = &self.nodes[s.0];
        if n.value.len() != 1 {
            return Err(AdError::InvalidArgument {
                op,
                msg: format!("expected a single-element operand, got {:?}", n.shape),
            });
        }
        Ok(n.value[0])
    }
}

#[cfg(test)]
mod tests {
    use crate::Tape;

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![-800.0, 0.0, 800.0]).unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.value(y), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn abs_smooth_is_zero_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![0.0, -2.0, 3.0]).unwrap();
        let y = t.abs_smooth(x, 1e-8);
        let v = t.value(y);
        assert_eq!(v[0], 0.0);
        // within eps of |x|
        assert!((v[1] - 2.0).abs() <= 1e-8 + 1e-15 && (v[2] - 3.0).abs() <= 1e-8 + 1e-15);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut t = Tape::new();
        let a = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn scale_by_requires_scalar() {
        let mut t = Tape::new();
        let a = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        assert!(t.scale_by(a, a).is_err());
    }
}
