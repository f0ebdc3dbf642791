//! Central finite-difference verification of the graph's backward rules.
//!
//! Each differentiable operation is exercised through a scalar probe
//! `L = sum(op(inputs) * W)` with a fixed random `W`, so the whole Jacobian is
//! covered. Numerical derivatives only ever call the forward pass on
//! constants; they share no code with the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvSpec, Graph, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-2)`; the floor keeps near-zero
/// derivatives from dominating with pure round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Central differences of a scalar function of several tensors.
pub fn numerical_gradients<F>(inputs: &[Tensor], f: F, step: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[t].numel());
        for i in 0..inputs[t].numel() {
            let original = inputs[t].data()[i];
            work[t].data_mut()[i] = original + step;
            let plus = f(&work);
            work[t].data_mut()[i] = original - step;
            let minus = f(&work);
            work[t].data_mut()[i] = original;
            grad.push((plus - minus) / (2.0 * step));
        }
        out.push(grad);
    }
    out
}

type OpFn = for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>;
type InputFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

/// One differentiable operation under test.
pub struct OpCase {
    pub name: &'static str,
    inputs: InputFn,
    op: OpFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for kinks (relu) and poles (div, log).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(lo..hi);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn pair_same(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = dims(rng, 2, 1, 4);
    vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)]
}

fn single(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = dims(rng, 3, 1, 3);
    vec![uniform(rng, &s, -2.0, 2.0)]
}

/// The standard suite covering every differentiable op of the graph.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            inputs: pair_same,
            op: |_, v| v[0].add(v[1]),
        },
        OpCase {
            name: "sub",
            inputs: pair_same,
            op: |_, v| v[0].sub(v[1]),
        },
        OpCase {
            name: "mul",
            inputs: pair_same,
            op: |_, v| v[0].mul(v[1]),
        },
        OpCase {
            name: "div",
            inputs: |rng| {
                let s = dims(rng, 2, 1, 4);
                vec![uniform(rng, &s, -2.0, 2.0), away_from_zero(rng, &s, 0.5, 2.0)]
            },
            op: |_, v| v[0].div(v[1]),
        },
        OpCase {
            name: "div_scalar",
            inputs: |rng| {
                let s = dims(rng, 2, 1, 4);
                vec![uniform(rng, &s, -2.0, 2.0), away_from_zero(rng, &[], 0.5, 2.0)]
            },
            op: |_, v| v[0].div(v[1]),
        },
        OpCase {
            name: "mul_channel",
            inputs: |rng| {
                let s = dims(rng, 4, 1, 3);
                vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &[s[1]], -2.0, 2.0)]
            },
            op: |_, v| v[0].mul(v[1]),
        },
        OpCase {
            name: "relu",
            inputs: |rng| {
                let s = dims(rng, 3, 1, 3);
                vec![away_from_zero(rng, &s, 0.01, 2.0)]
            },
            op: |_, v| Ok(v[0].relu()),
        },
        OpCase {
            name: "exp",
            inputs: single,
            op: |_, v| Ok(v[0].exp()),
        },
        OpCase {
            name: "log",
            inputs: |rng| {
                let s = dims(rng, 3, 1, 3);
                vec![uniform(rng, &s, 0.2, 3.0)]
            },
            op: |_, v| Ok(v[0].log()),
        },
        OpCase {
            name: "sqrt",
            inputs: |rng| {
                let s = dims(rng, 3, 1, 3);
                vec![uniform(rng, &s, 0.2, 3.0)]
            },
            op: |_, v| Ok(v[0].sqrt()),
        },
        OpCase {
            name: "neg",
            inputs: single,
            op: |_, v| Ok(v[0].neg()),
        },
        OpCase {
            name: "scale",
            inputs: single,
            op: |_, v| Ok(v[0].scale(-1.7)),
        },
        OpCase {
            name: "matmul",
            inputs: |rng| {
                let d = dims(rng, 3, 1, 5);
                vec![
                    uniform(rng, &[d[0], d[1]], -1.0, 1.0),
                    uniform(rng, &[d[1], d[2]], -1.0, 1.0),
                ]
            },
            op: |_, v| v[0].matmul(v[1]),
        },
        OpCase {
            name: "conv2d",
            inputs: |rng| {
                let c = rng.gen_range(1..=2);
                let o = rng.gen_range(1..=3);
                let h = rng.gen_range(5..=7);
                vec![
                    uniform(rng, &[1, c, h, h], -1.0, 1.0),
                    uniform(rng, &[o, c, 3, 3], -1.0, 1.0),
                    uniform(rng, &[o], -1.0, 1.0),
                ]
            },
            op: |_, v| v[0].conv2d(v[1], Some(v[2]), ConvSpec::new(1, 2, 1)),
        },
        OpCase {
            name: "conv2d_strided",
            inputs: |rng| {
                let b = rng.gen_range(1..=2);
                vec![
                    uniform(rng, &[b, 2, 6, 6], -1.0, 1.0),
                    uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(rng, &[3], -1.0, 1.0),
                ]
            },
            op: |_, v| v[0].conv2d(v[1], Some(v[2]), ConvSpec::new(2, 1, 1)),
        },
        OpCase {
            name: "conv2d_pointwise",
            inputs: |rng| {
                let c = rng.gen_range(1..=4);
                vec![
                    uniform(rng, &[2, c, 3, 3], -1.0, 1.0),
                    uniform(rng, &[3, c, 1, 1], -1.0, 1.0),
                ]
            },
            op: |_, v| v[0].conv2d(v[1], None, ConvSpec::POINTWISE),
        },
        OpCase {
            name: "avg_pool2d",
            inputs: |rng| {
                let h = 2 * rng.gen_range(1..=3);
                vec![uniform(rng, &[1, 2, h, 2 * h], -1.0, 1.0)]
            },
            op: |_, v| v[0].avg_pool2d(2),
        },
        OpCase {
            name: "softmax",
            inputs: |rng| vec![uniform(rng, &[2, 5], -3.0, 3.0)],
            op: |_, v| v[0].softmax(1),
        },
        OpCase {
            name: "softmax_axis0",
            inputs: |rng| {
                let s = dims(rng, 3, 1, 3);
                vec![uniform(rng, &s, -3.0, 3.0)]
            },
            op: |_, v| v[0].softmax(0),
        },
        OpCase {
            name: "resize_bilinear",
            inputs: |rng| vec![uniform(rng, &[1, 1, 4, 4], -1.0, 1.0)],
            op: |_, v| v[0].resize_bilinear(7, 7),
        },
        OpCase {
            name: "resize_bilinear_down",
            inputs: |rng| vec![uniform(rng, &[1, 2, 6, 5], -1.0, 1.0)],
            op: |_, v| v[0].resize_bilinear(3, 4),
        },
        OpCase {
            name: "sum",
            inputs: single,
            op: |_, v| Ok(v[0].sum()),
        },
        OpCase {
            name: "mean",
            inputs: single,
            op: |_, v| Ok(v[0].mean()),
        },
        OpCase {
            name: "l2_norm",
            inputs: single,
            op: |_, v| Ok(v[0].l2_norm()),
        },
        OpCase {
            name: "reshape",
            inputs: |rng| vec![uniform(rng, &[2, 6], -1.0, 1.0)],
            op: |_, v| v[0].reshape(&[3, 4]),
        },
        OpCase {
            name: "transpose",
            inputs: |rng| {
                let s = dims(rng, 2, 1, 5);
                vec![uniform(rng, &s, -1.0, 1.0)]
            },
            op: |_, v| v[0].transpose(),
        },
        OpCase {
            name: "narrow",
            inputs: |rng| vec![uniform(rng, &[2, 4, 3], -1.0, 1.0)],
            op: |_, v| v[0].narrow(1, 1, 2),
        },
        OpCase {
            name: "concat",
            inputs: |rng| vec![uniform(rng, &[2, 1, 3], -1.0, 1.0), uniform(rng, &[2, 3, 3], -1.0, 1.0)],
            op: |g, v| g.concat(&[v[0], v[1]], 1),
        },
        OpCase {
            name: "inverse_2x2",
            inputs: |rng| {
                // Diagonally dominant, hence well conditioned.
                let mut t = uniform(rng, &[2, 2], -0.5, 0.5);
                t.data_mut()[0] += 2.0;
                t.data_mut()[3] += 2.0;
                vec![t]
            },
            op: |_, v| v[0].inverse_2x2(),
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: |rng| vec![uniform(rng, &[2, 3, 2, 2], -2.0, 2.0)],
            op: |_, v| v[0].softmax_cross_entropy(&[0, 1, 2, 1, 2, 0, 0, 1]),
        },
    ]
}

fn probe<'g>(graph: &'g Graph, out: Var<'g>, weights: &Tensor) -> Result<Var<'g>, TensorError> {
    let w = graph.constant(weights.clone().reshape(&out.shape())?);
    Ok(out.mul(w)?.sum())
}

impl OpCase {
    /// Runs one randomized instance and returns its maximum relative error.
    pub fn check_instance(&self, seed: u64, step: f64) -> Result<f64, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (self.inputs)(&mut rng);

        let graph = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.variable(t.clone())).collect();
        let out = (self.op)(&graph, &vars)?;
        let weights = uniform(&mut rng, &[out.value().numel()], -1.0, 1.0);
        let loss = probe(&graph, out, &weights)?;
        let grads = graph.backward(loss)?;

        let op = self.op;
        let numeric = numerical_gradients(
            &inputs,
            |ts| {
                let g = Graph::new();
                let vs: Vec<Var<'_>> = ts.iter().map(|t| g.constant(t.clone())).collect();
                let out = op(&g, &vs).expect("forward succeeded once");
                probe(&g, out, &weights).expect("probe").item()
            },
            step,
        );

        let mut worst: f64 = 0.0;
        for (var, num) in vars.iter().zip(&numeric) {
            let analytic = grads.tensor(*var);
            for (a, n) in analytic.data().iter().zip(num) {
                worst = worst.max(relative_error(*a, *n));
            }
        }
        Ok(worst)
    }

    /// Runs `instances` seeds starting at `base_seed`.
    pub fn check(&self, base_seed: u64, instances: usize, step: f64) -> Result<OpCheck, TensorError> {
        let mut max_rel_error: f64 = 0.0;
        for i in 0..instances {
            let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            max_rel_error = max_rel_error.max(self.check_instance(seed, step)?);
        }
        Ok(OpCheck {
            name: self.name,
            instances,
            max_rel_error,
        })
    }
}
