use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;
use crate::labels::LabelMap;

/// Compares the analytic gradient of a scalar function against central
/// differences. Returns the largest per-element relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T, F>(f: F, input: &Tensor<T>, eps: T) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(grad) => grad.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; input.numel()],
    };

    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item().as_f64())
    };

    let mut worst = 0.0f64;
    let two_eps = 2.0 * eps.as_f64();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / two_eps;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckCase {
    pub name: String,
    pub shape: Vec<usize>,
    pub seed: u64,
    pub rel_error: f64,
}

/// Step used by the suites; the checks run at `f64`.
pub const SUITE_EPS: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values kept 0.05 away from every kink, so relu and clamp are smooth
/// within the finite-difference step.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > 0.05) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Reduces any output to a scalar through a fixed random projection, so no
/// output element's gradient can cancel against another's.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

struct Suite {
    seed: u64,
    cases: Vec<GradCheckCase>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, input: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let seed = self.seed;
        let rel_error = grad_check(
            |g, x| {
                let y = f(g, x)?;
                project(g, y, seed)
            },
            input,
            SUITE_EPS,
        )?;
        self.cases.push(GradCheckCase {
            name: name.to_string(),
            shape: input.shape().to_vec(),
            seed,
            rel_error,
        });
        Ok(())
    }
}

/// Checks every graph primitive, with respect to every differentiable
/// input, on two or more shapes.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut s = Suite { seed, cases: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for shape in [[1, 2, 4, 4], [2, 3, 6, 6]] {
        let x = away_from(&mut rng, &shape, &[0.0, -1.0, 1.0]);
        let o = rand_tensor(&mut rng, &shape, -1.5, 1.5);
        s.check("add", &x, |g, x| {
            let b = g.constant(o.clone());
            g.add(x, b)
        })?;
        s.check("add(rhs)", &x, |g, x| {
            let a = g.constant(o.clone());
            g.add(a, x)
        })?;
        s.check("sub", &x, |g, x| {
            let b = g.constant(o.clone());
            g.sub(x, b)
        })?;
        s.check("sub(rhs)", &x, |g, x| {
            let a = g.constant(o.clone());
            g.sub(a, x)
        })?;
        s.check("mul", &x, |g, x| {
            let b = g.constant(o.clone());
            g.mul(x, b)
        })?;
        s.check("mul(self)", &x, |g, x| g.mul(x, x))?;
        s.check("tanh", &x, |g, x| Ok(g.tanh(x)))?;
        s.check("relu", &x, |g, x| Ok(g.relu(x)))?;
        s.check("scale", &x, |g, x| Ok(g.scale(x, -2.5)))?;
        s.check("add_scalar", &x, |g, x| Ok(g.add_scalar(x, 3.0)))?;
        s.check("clamp", &x, |g, x| Ok(g.clamp(x, -1.0, 1.0)))?;
        s.check("sum", &x, |g, x| Ok(g.sum(x)))?;
        let n = x.numel();
        s.check("reshape", &x, |g, x| g.reshape(x, &[n]))?;
    }
    for (shape, c_out, k, stride, pad) in [([1, 2, 5, 5], 4, 3, 1, 1), ([2, 3, 6, 6], 5, 3, 2, 1), ([1, 2, 4, 4], 3, 1, 1, 0)] {
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[c_out, shape[1], k, k], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[c_out], -0.5, 0.5);
        s.check("conv2d(input)", &x, |g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(x, w, b, stride, pad)
        })?;
        s.check("conv2d(weight)", &w, |g, w| {
            let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d(x, w, b, stride, pad)
        })?;
        s.check("conv2d(bias)", &b, |g, b| {
            let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(x, w, b, stride, pad)
        })?;
    }
    for shape in [[1, 2, 4, 4], [2, 3, 6, 6]] {
        let x = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        s.check("maxpool2d", &x, |g, x| g.maxpool2d(x, 2))?;
        s.check("upsample_bilinear", &x, |g, x| g.upsample_bilinear(x, 2))?;
        let o = rand_tensor(&mut rng, &[shape[0], 2, shape[2], shape[3]], -1.0, 1.0);
        s.check("concat_channels(a)", &x, |g, x| {
            let b = g.constant(o.clone());
            g.concat_channels(x, b)
        })?;
        s.check("concat_channels(b)", &x, |g, x| {
            let a = g.constant(o.clone());
            g.concat_channels(a, x)
        })?;
        s.check("slice_channels", &x, |g, x| g.slice_channels(x, 1, shape[1] - 1))?;
    }
    for shape in [[1, 3, 3, 3], [2, 5, 4, 4]] {
        let x = rand_tensor(&mut rng, &shape, -3.0, 3.0);
        let m = shape[2] * shape[3];
        let labels: Vec<LabelMap> = (0..shape[0])
            .map(|_| LabelMap::new(shape[2], shape[3], (0..m).map(|_| rng.random_range(0..shape[1] as u8)).collect()))
            .collect::<Result<_>>()?;
        let weights: Vec<f64> = (0..shape[0] * m).map(|_| rng.random_range(0.0..2.0)).collect();
        let rel_error = grad_check(|g, x| g.cross_entropy_pixelwise(x, &labels, &weights), &x, SUITE_EPS)?;
        s.cases.push(GradCheckCase {
            name: "cross_entropy_pixelwise".into(),
            shape: shape.to_vec(),
            seed,
            rel_error,
        });
    }
    Ok(s.cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::new(&[3], vec![0.5, -1.0, 4.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0);
                let s = g.sum(z);
                Ok(g.add_scalar(s, 7.0))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
