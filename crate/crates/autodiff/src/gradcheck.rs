//! Central finite-difference verification of tape gradients.
//!
//! Piecewise-smooth ops (relu, smoothed abs, trilinear sampling) have kinks.
//! A difference quotient that straddles one measures a different derivative
//! than the one-sided analytic gradient, so each probe compares
//! [`Tape::region_signature`] at `x ± ε` with the base point and halves the
//! step until all three sit in the same smooth region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{AdError, Result, Tape, Var};

/// One differentiable input to a checked function.
#[derive(Debug, Clone)]
pub struct Input {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Input {
    pub fn new(shape: &[usize], value: Vec<f64>) -> Self {
        Self {
            shape: shape.to_vec(),
            value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// `‖g_tape − g_fd‖ / max(‖g_fd‖, ‖g_tape‖)` over all checked entries.
    pub rel_error: f64,
    pub checked: usize,
    /// Entries where no step kept `x ± ε` inside one smooth region.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol && self.checked > 0 && self.skipped * 10 <= self.checked
    }
}

/// Settings for [`check`].
#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub eps: f64,
    /// How many times the step may be halved before giving up on an entry.
    pub max_halvings: u32,
    /// Check at most this many entries per input (evenly strided), 0 = all.
    pub max_entries_per_input: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_halvings: 12,
            max_entries_per_input: 0,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Input]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|i| tape.constant(&i.shape, i.value.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape.scalar(out), tape.region_signature()))
}

/// Compares tape gradients of the scalar function `f` against central
/// differences at `inputs`.
pub fn check<F>(name: &str, inputs: &[Input], cfg: FdConfig, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|i| tape.param(&i.shape, i.value.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.first_non_finite().is_some() {
        return Err(AdError::NonFinite("gradcheck forward"));
    }
    tape.backward(out)?;
    let base_sig = {
        let (_, s) = evaluate(&f, inputs)?;
        s
    };

    let mut work = inputs.to_vec();
    let (mut diff2, mut fd2, mut ad2) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].value.len();
        let analytic: Vec<f64> = tape
            .grad(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = match cfg.max_entries_per_input {
            0 => 1,
            m => n.div_ceil(m).max(1),
        };
        for j in (0..n).step_by(stride) {
            let x0 = inputs[k].value[j];
            let mut eps = cfg.eps * x0.abs().max(1.0);
            let mut estimate = None;
            for _ in 0..=cfg.max_halvings {
                work[k].value[j] = x0 + eps;
                let (fp, sp) = evaluate(&f, &work)?;
                work[k].value[j] = x0 - eps;
                let (fm, sm) = evaluate(&f, &work)?;
                if sp == base_sig && sm == base_sig {
                    estimate = Some((fp - fm) / (2.0 * eps));
                    break;
                }
                eps *= 0.5;
            }
            work[k].value[j] = x0;
            match estimate {
                Some(fd) => {
                    let ad = analytic[j];
                    diff2 += (ad - fd) * (ad - fd);
                    fd2 += fd * fd;
                    ad2 += ad * ad;
                    checked += 1;
                }
                None => skipped += 1,
            }
        }
    }
    let scale = fd2.max(ad2).sqrt();
    let rel_error = if scale > 0.0 { diff2.sqrt() / scale } else { diff2.sqrt() };
    Ok(GradCheck {
        name: name.to_string(),
        rel_error,
        checked,
        skipped,
    })
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so relu / |·| kinks are not straddled.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output element contributes to the scalar under test.
fn contract(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t.value(y).len();
    let shape = t.shape(y).to_vec();
    let w = t.constant(&shape, uniform(&mut rng, n, -1.0, 1.0))?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Runs [`check`] on every primitive op with seeded random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FdConfig::default();
    let mut out = Vec::new();
    let s = seed.wrapping_add(1);

    let a = Input::new(&[2, 3], uniform(&mut rng, 6, -1.0, 1.0));
    let b = Input::new(&[2, 3], uniform(&mut rng, 6, -1.0, 1.0));
    let pos = Input::new(&[2, 3], uniform(&mut rng, 6, 0.5, 2.0));
    let kinked = Input::new(&[2, 3], off_zero(&mut rng, 6));
    let sc = Input::new(&[1], vec![rng.random_range(0.5..1.5)]);

    macro_rules! unary {
        ($name:expr, $inp:expr, $body:expr) => {{
            let body = $body;
            out.push(check($name, &[$inp.clone()], cfg, |t, v| {
                let y = body(t, v[0])?;
                contract(t, y, s)
            })?);
        }};
    }
    macro_rules! binary {
        ($name:expr, $x:expr, $y:expr, $body:expr) => {{
            let body = $body;
            out.push(check($name, &[$x.clone(), $y.clone()], cfg, |t, v| {
                let y = body(t, v[0], v[1])?;
                contract(t, y, s)
            })?);
        }};
    }

    binary!("add", a, b, |t: &mut Tape, x, y| t.add(x, y));
    binary!("sub", a, b, |t: &mut Tape, x, y| t.sub(x, y));
    binary!("mul", a, b, |t: &mut Tape, x, y| t.mul(x, y));
    binary!("div", a, pos, |t: &mut Tape, x, y| t.div(x, y));
    unary!("scalar_mul", a, |t: &mut Tape, x| Ok(t.scalar_mul(x, -1.7)));
    unary!("add_const", a, |t: &mut Tape, x| Ok(t.add_const(x, 0.3)));
    unary!("square", a, |t: &mut Tape, x| Ok(t.square(x)));
    unary!("sqrt", pos, |t: &mut Tape, x| Ok(t.sqrt(x)));
    unary!("log", pos, |t: &mut Tape, x| Ok(t.log(x)));
    unary!("exp", a, |t: &mut Tape, x| Ok(t.exp(x)));
    unary!("relu", kinked, |t: &mut Tape, x| Ok(t.relu(x)));
    unary!("sigmoid", a, |t: &mut Tape, x| Ok(t.sigmoid(x)));
    unary!("tanh", a, |t: &mut Tape, x| Ok(t.tanh(x)));
    unary!("abs_smooth", kinked, |t: &mut Tape, x| Ok(t.abs_smooth(x, 1e-3)));
    binary!("scale_by", a, sc, |t: &mut Tape, x, c| t.scale_by(x, c));
    binary!("shift_by", a, sc, |t: &mut Tape, x, c| t.shift_by(x, c));
    out.push(check("sum", &[a.clone()], cfg, |t, v| {
        let y = t.square(v[0]);
        Ok(t.sum(y))
    })?);
    out.push(check("mean", &[a.clone()], cfg, |t, v| {
        let y = t.square(v[0]);
        Ok(t.mean(y))
    })?);
    out.push(check("index", &[a.clone()], cfg, |t, v| {
        let y = t.square(v[0]);
        t.index(y, 4)
    })?);
    unary!("reshape", a, |t: &mut Tape, x| t.reshape(x, &[3, 2]));
    binary!("concat", a, b, |t: &mut Tape, x, y| t.concat(&[x, y], 1));
    unary!("channel_mean", a, |t: &mut Tape, x| t.channel_mean(x));
    unary!("weighted_group_sum", a, |t: &mut Tape, x| t
        .weighted_group_sum(x, &[0.2, -0.5, 1.3]));

    let w = Input::new(&[3, 2], uniform(&mut rng, 6, -1.0, 1.0));
    let feat = Input::new(&[2, 2, 2, 3], uniform(&mut rng, 24, -1.0, 1.0));
    binary!("channel_mix", w, feat, |t: &mut Tape, w, x| t.channel_mix(w, x));
    let bias = Input::new(&[2], uniform(&mut rng, 2, -1.0, 1.0));
    binary!("add_bias", feat, bias, |t: &mut Tape, x, b| t.add_bias(x, b));
    let gain = Input::new(&[2], uniform(&mut rng, 2, 0.5, 1.5));
    out.push(check(
        "channel_norm",
        &[feat.clone(), gain.clone(), bias.clone()],
        cfg,
        |t, v| {
            let y = t.channel_norm(v[0], v[1], v[2], 1e-6)?;
            contract(t, y, s)
        },
    )?);
    let img = Input::new(&[2, 3, 4, 5], uniform(&mut rng, 120, -1.0, 1.0));
    let kernel = Input::new(&[3, 2, 3, 3, 3], uniform(&mut rng, 162, -0.5, 0.5));
    binary!("conv", img, kernel, |t: &mut Tape, x, w| t
        .conv(x, w, [2, 2, 2], [1, 1, 1]));
    unary!("upsample2x", feat, |t: &mut Tape, x| t.upsample2x(x));

    let vol = Input::new(&[3, 4, 5], uniform(&mut rng, 60, -1.0, 1.0));
    let mut pts = Vec::new();
    for _ in 0..6 {
        pts.push(rng.random_range(-0.7..4.7));
        pts.push(rng.random_range(-0.7..3.7));
        pts.push(rng.random_range(-0.7..2.7));
    }
    let pts = Input::new(&[6, 3], pts);
    binary!("grid_sample", vol, pts, |t: &mut Tape, v, p| t.grid_sample(v, p));
    unary!("forward_diff", img, |t: &mut Tape, x| t.forward_diff(x, 2));
    let m = Input::new(&[3, 4], uniform(&mut rng, 12, -1.0, 1.0));
    binary!("affine_points", m, pts, |t: &mut Tape, m, p| t.affine_points(m, p));
    // f(x) = (x0·x1, sin x0) with its exact Jacobian
    let xy = Input::new(&[2], uniform(&mut rng, 2, -1.0, 1.0));
    unary!("jacobian_map", xy, |t: &mut Tape, x| {
        let v = t.value(x).to_vec();
        let value = vec![v[0] * v[1], v[0].sin()];
        let jac = vec![v[1], v[0], v[0].cos(), 0.0];
        t.jacobian_map(x, &[2], value, jac)
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // jacobian_map with a deliberately wrong derivative
        let x = Input::new(&[1], vec![0.7]);
        let r = check("wrong", &[x], FdConfig::default(), |t, v| {
            let x0 = t.value(v[0])[0];
            let y = t.jacobian_map(v[0], &[1], vec![x0 * x0], vec![3.0 * x0])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.rel_error > 0.1);
    }
}
