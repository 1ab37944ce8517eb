//! Finite-difference verification of the backward rules.
//!
//! [`finite_diff_check`] compares the analytic gradient of a scalar function
//! against central differences. [`run_suite`] applies it to every op (in
//! every argument position) and to a set of second-order functions whose
//! gradients flow through `create_graph` gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GradError, Graph, Tensor, Var};

/// Guard in the relative-error denominator.
const REL_GUARD: f64 = 1e-12;

/// Max over coordinates of `|analytic − central| / (|central| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, GradError>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, GradError>,
{
    let analytic = {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let y = f(&g, xv)?;
        let grads = g.grad(y, &[xv], false)?;
        (*grads.grads[0].value()).clone()
    };
    let eval = |probe: &Tensor| -> Result<f64, GradError> {
        let g = Graph::new();
        let xv = g.param(probe.clone());
        let y = f(&g, xv)?;
        let v = y.item();
        if !v.is_finite() {
            return Err(GradError::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * h);
        let err = (analytic.data()[i] - central).abs() / (central.abs() + REL_GUARD);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Worst error over all trials (relative for finite-difference checks,
    /// absolute for the closed-form ones).
    pub max_err: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tolerance
    }
}

/// Relative-error threshold every op must meet.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Absolute threshold for the closed-form double-backward check.
pub const QUADRATIC_TOLERANCE: f64 = 1e-8;
/// Absolute threshold for backward linearity.
pub const LINEARITY_TOLERANCE: f64 = 1e-10;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Dist {
    /// Uniform on [-2, 2].
    Signed,
    /// Uniform on ±[0.1, 2]; keeps relu/abs away from their kink.
    AwayFromZero,
    /// Uniform on [0.5, 2].
    Positive,
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], dist: Dist) -> Tensor {
    Tensor::from_fn(shape, |_| match dist {
        Dist::Signed => rng.gen_range(-2.0..2.0),
        Dist::AwayFromZero => {
            let m: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        }
        Dist::Positive => rng.gen_range(0.5..2.0),
    })
}

/// `Σ r ⊙ y` for a fixed random `r`, turning any op output into a scalar
/// whose gradient exercises every output element.
fn weighted_sum<'g>(y: Var<'g>, r: &Tensor) -> Result<Var<'g>, GradError> {
    let rv = y.graph().constant(r.clone().reshaped(&y.shape())?);
    y.mul(rv)?.sum()
}

type Body = dyn for<'g> Fn(&'g Graph, Var<'g>, &[Tensor]) -> Result<Var<'g>, GradError>;

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    dist: Dist,
    /// Shapes and distributions of auxiliary constant inputs.
    aux: Vec<(Vec<usize>, Dist)>,
    out_numel: usize,
    body: Box<Body>,
}

fn case(
    name: &'static str,
    shape: &[usize],
    dist: Dist,
    aux: &[(&[usize], Dist)],
    out_numel: usize,
    body: impl for<'g> Fn(&'g Graph, Var<'g>, &[Tensor]) -> Result<Var<'g>, GradError> + 'static,
) -> Case {
    Case {
        name,
        shape: shape.to_vec(),
        dist,
        aux: aux.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        out_numel,
        body: Box::new(body),
    }
}

fn c<'g>(g: &'g Graph, t: &Tensor) -> Var<'g> {
    g.constant(t.clone())
}

fn first_order_cases() -> Vec<Case> {
    use Dist::*;
    vec![
        case("add", &[3, 4], Signed, &[(&[3, 4], Signed)], 12, |g, x, a| x.add(c(g, &a[0]))),
        case("sub/lhs", &[3, 4], Signed, &[(&[3, 4], Signed)], 12, |g, x, a| x.sub(c(g, &a[0]))),
        case("sub/rhs", &[3, 4], Signed, &[(&[3, 4], Signed)], 12, |g, x, a| c(g, &a[0]).sub(x)),
        case("mul", &[3, 4], Signed, &[(&[3, 4], Signed)], 12, |g, x, a| c(g, &a[0]).mul(x)),
        case("mul/self", &[5], Signed, &[], 5, |_, x, _| x.mul(x)),
        case("scale", &[6], Signed, &[], 6, |_, x, _| x.scale(-1.7)),
        case("add_scalar", &[6], Signed, &[], 6, |_, x, _| x.add_scalar(0.3)),
        case("matmul/lhs", &[3, 4], Signed, &[(&[4, 2], Signed)], 6, |g, x, a| x.matmul(c(g, &a[0]))),
        case("matmul/rhs", &[4, 2], Signed, &[(&[3, 4], Signed)], 6, |g, x, a| c(g, &a[0]).matmul(x)),
        case("transpose", &[3, 5], Signed, &[], 15, |_, x, _| x.transpose()),
        case("conv2d/input s1", &[2, 2, 5, 5], Signed, &[(&[3, 2, 3, 3], Signed)], 150, |g, x, a| {
            x.conv2d(c(g, &a[0]), 1, 1)
        }),
        case("conv2d/weight s1", &[3, 2, 3, 3], Signed, &[(&[2, 2, 5, 5], Signed)], 150, |g, w, a| {
            c(g, &a[0]).conv2d(w, 1, 1)
        }),
        case("conv2d/input s2", &[2, 2, 6, 6], Signed, &[(&[3, 2, 3, 3], Signed)], 54, |g, x, a| {
            x.conv2d(c(g, &a[0]), 2, 1)
        }),
        case("conv2d/weight s2", &[3, 2, 3, 3], Signed, &[(&[2, 2, 6, 6], Signed)], 54, |g, w, a| {
            c(g, &a[0]).conv2d(w, 2, 1)
        }),
        case("conv2d/1x1", &[2, 3, 4, 4], Signed, &[(&[2, 3, 1, 1], Signed)], 64, |g, x, a| {
            x.conv2d(c(g, &a[0]), 1, 0)
        }),
        case("conv2d_input_grad/grad", &[2, 3, 3, 3], Signed, &[(&[3, 2, 3, 3], Signed)], 144, |g, x, a| {
            x.conv2d_input_grad(c(g, &a[0]), 2, 1, 6, 6)
        }),
        case("conv2d_input_grad/weight", &[3, 2, 3, 3], Signed, &[(&[2, 3, 3, 3], Signed)], 144, |g, w, a| {
            c(g, &a[0]).conv2d_input_grad(w, 2, 1, 6, 6)
        }),
        case("conv2d_weight_grad/input", &[2, 2, 6, 6], Signed, &[(&[2, 3, 3, 3], Signed)], 54, |g, x, a| {
            x.conv2d_weight_grad(c(g, &a[0]), 2, 1, 3)
        }),
        case("conv2d_weight_grad/grad", &[2, 3, 3, 3], Signed, &[(&[2, 2, 6, 6], Signed)], 54, |g, gr, a| {
            c(g, &a[0]).conv2d_weight_grad(gr, 2, 1, 3)
        }),
        case("upsample2", &[2, 2, 3, 3], Signed, &[], 144, |_, x, _| x.upsample2()),
        case("sum_pool2", &[2, 2, 4, 4], Signed, &[], 16, |_, x, _| x.sum_pool2()),
        case("relu", &[10], AwayFromZero, &[], 10, |_, x, _| x.relu()),
        case("clamp_min", &[10], AwayFromZero, &[], 10, |_, x, _| x.clamp_min(0.05)),
        case("sigmoid", &[8], Signed, &[], 8, |_, x, _| x.sigmoid()),
        case("exp", &[8], Signed, &[], 8, |_, x, _| x.exp()),
        case("log_softmax", &[3, 5], Signed, &[], 15, |_, x, _| x.log_softmax()),
        case("square", &[8], Signed, &[], 8, |_, x, _| x.square()),
        case("sqrt", &[8], Positive, &[], 8, |_, x, _| x.sqrt()),
        case("abs", &[8], AwayFromZero, &[], 8, |_, x, _| x.abs()),
        case("div/numerator", &[6], Signed, &[(&[6], Positive)], 6, |g, x, a| x.div(c(g, &a[0]), 0.1)),
        case("div/denominator", &[6], Positive, &[(&[6], Signed)], 6, |g, x, a| c(g, &a[0]).div(x, 0.1)),
        case("reshape", &[2, 6], Signed, &[], 12, |_, x, _| x.reshape(&[3, 4])),
        case("concat/first", &[2, 2, 3, 3], Signed, &[(&[2, 3, 3, 3], Signed)], 90, |g, x, a| {
            Var::concat(&[x, c(g, &a[0])], 1)
        }),
        case("concat/second", &[2, 3, 3, 3], Signed, &[(&[2, 2, 3, 3], Signed)], 90, |g, x, a| {
            Var::concat(&[c(g, &a[0]), x], 1)
        }),
        case("narrow", &[3, 7], Signed, &[], 9, |_, x, _| x.narrow(1, 2, 3)),
        case("pad", &[3, 2], Signed, &[], 15, |_, x, _| x.pad_axis(1, 1, 5)),
        case("spatial_mean", &[2, 3, 4, 4], Signed, &[], 6, |_, x, _| x.spatial_mean()),
        case("spatial_expand", &[2, 3], Signed, &[], 24, |_, x, _| x.spatial_expand(2, 2)),
        case("sum", &[7], Signed, &[], 1, |_, x, _| x.sum()),
        case("mean", &[7], Signed, &[], 1, |_, x, _| x.mean()),
        case("expand_scalar", &[1], Signed, &[], 6, |_, x, _| x.expand_scalar(&[2, 3])),
        case("sum_per_sample", &[3, 2, 2], Signed, &[], 3, |_, x, _| x.sum_per_sample()),
        case("mean_per_sample", &[3, 4], Signed, &[], 3, |_, x, _| x.mean_per_sample()),
        case("expand_per_sample", &[3], Signed, &[], 12, |_, x, _| x.expand_per_sample(&[3, 2, 2])),
        case("sum_to_channel", &[2, 3, 2, 2], Signed, &[], 3, |_, x, _| x.sum_to_channel()),
        case("broadcast_channel", &[3], Signed, &[], 24, |_, x, _| x.broadcast_channel(&[2, 3, 2, 2])),
        case("l2_norm", &[6], Signed, &[], 1, |_, x, _| x.l2_norm()),
        case("l2_norm_per_sample", &[3, 4], Signed, &[], 3, |_, x, _| x.l2_norm_per_sample()),
    ]
}

/// Second-order cases: scalar functions built from a `create_graph`
/// gradient, so their own gradient runs through double backward.
fn second_order_cases() -> Vec<Case> {
    use Dist::*;
    vec![
        // ½‖∇ₓ φ‖² with φ = Σ r·σ(conv(x, W)), differentiated in x.
        case("hvp/conv-sigmoid wrt input", &[1, 2, 4, 4], Signed, &[(&[3, 2, 3, 3], Signed), (&[1, 3, 2, 2], Signed)], 1, |g, x, a| {
            let phi = weighted_sum(x.conv2d(c(g, &a[0]), 2, 1)?.sigmoid()?, &a[1])?;
            let gx = g.grad(phi, &[x], true)?.grads[0];
            gx.square()?.sum()?.scale(0.5)
        }),
        // Same, differentiated in the weight: the double-backprop path RLAR uses.
        case("hvp/conv-sigmoid-conv wrt weight", &[3, 2, 3, 3], Signed, &[(&[2, 2, 4, 4], Signed), (&[3, 2, 3, 3], Signed), (&[2, 2, 4, 4], Signed)], 1, |g, w, a| {
            let x = g.param(a[0].clone());
            let hmid = x.conv2d(w, 1, 1)?.sigmoid()?;
            let y = hmid.conv2d_input_grad(c(g, &a[1]), 1, 1, 4, 4)?.sigmoid()?;
            let phi = weighted_sum(y, &a[2])?;
            let gx = g.grad(phi, &[x], true)?.grads[0];
            gx.square()?.sum()?.scale(0.5)
        }),
        case("hvp/upsample-concat-spatial_mean", &[2, 2, 2, 2], Signed, &[(&[3, 4, 3, 3], Signed), (&[2, 3], Signed)], 1, |g, w, a| {
            let z = g.param(Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.37).sin()));
            let up = Var::concat(&[z.upsample2()?, w.upsample2()?], 1)?;
            let y = up.conv2d(c(g, &a[0]), 1, 1)?.sigmoid()?.spatial_mean()?;
            let phi = weighted_sum(y, &a[1])?;
            let gz = g.grad(phi, &[z], true)?.grads[0];
            gz.square()?.sum()?.scale(0.5)
        }),
        case("hvp/log_softmax-matmul", &[4, 3], Signed, &[(&[2, 4], Signed), (&[2, 3], Signed)], 1, |g, w, a| {
            let h = g.param(a[0].clone());
            let logits = h.matmul(w)?;
            let phi = weighted_sum(logits.log_softmax()?, &a[1])?;
            let gh = g.grad(phi, &[h], true)?.grads[0];
            gh.square()?.sum()?.scale(0.5)
        }),
        // Cosine of two create-graph gradients, as in the alignment penalty.
        case("hvp/abs-cosine of gradients", &[3, 2, 3, 3], Signed, &[(&[2, 2, 4, 4], Signed), (&[2, 3, 4, 4], Signed), (&[2, 3, 4, 4], Signed)], 1, |g, w, a| {
            let x = g.param(a[0].clone());
            let y = x.conv2d(w, 1, 1)?.sigmoid()?;
            let l1 = weighted_sum(y, &a[1])?;
            let l2 = weighted_sum(y.square()?, &a[2])?;
            let g1 = g.grad(l1, &[x], true)?.grads[0];
            let g2 = g.grad(l2, &[x], true)?.grads[0];
            let n1 = g1.l2_norm()?.expand_scalar(&g1.shape())?;
            let n2 = g2.l2_norm()?.expand_scalar(&g2.shape())?;
            let d1 = g1.div(n1, 1e-8)?;
            let d2 = g2.div(n2, 1e-8)?;
            let dot = d1.mul(d2)?.sum_per_sample()?;
            let den = d1.l2_norm_per_sample()?.mul(d2.l2_norm_per_sample()?)?;
            dot.abs()?.div(den, 1e-12)?.mean()
        }),
    ]
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng, trials: usize) -> CheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = sample(rng, &case.shape, case.dist);
        let aux: Vec<Tensor> = case.aux.iter().map(|(s, d)| sample(rng, s, *d)).collect();
        let r = sample(rng, &[case.out_numel], Dist::Signed);
        let body = &case.body;
        let result = finite_diff_check(
            |g, xv| {
                let y = body(g, xv, &aux)?;
                if y.value().is_scalar() && case.out_numel == 1 {
                    Ok(y)
                } else {
                    weighted_sum(y, &r)
                }
            },
            &x,
            FD_STEP,
        );
        worst = worst.max(result.unwrap_or(f64::INFINITY));
    }
    CheckReport { name: case.name.to_string(), max_err: worst, tolerance: OP_TOLERANCE, trials }
}

/// For `f(x) = ½ xᵀAx` with symmetric `A`, the gradient of `½‖∇f‖²` is
/// `AᵀA x`; compares double backward against that closed form.
pub fn double_backward_quadratic(rng: &mut ChaCha8Rng, trials: usize) -> CheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=6);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-2.0..2.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut expected = vec![0.0; n];
        let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
        for (i, e) in expected.iter_mut().enumerate() {
            *e = (0..n).map(|j| a[j * n + i] * ax[j]).sum();
        }
        let err = (|| -> Result<f64, GradError> {
            let g = Graph::new();
            let xv = g.param(Tensor::new(vec![n, 1], x.clone())?);
            let av = g.constant(Tensor::new(vec![n, n], a.clone())?);
            let f = xv.transpose()?.matmul(av.matmul(xv)?)?.sum()?.scale(0.5)?;
            let gx = g.grad(f, &[xv], true)?.grads[0];
            let gn = gx.square()?.sum()?.scale(0.5)?;
            let h = g.grad(gn, &[xv], false)?.grads[0].value();
            Ok(h.data().iter().zip(&expected).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
        })()
        .unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    CheckReport {
        name: "double_backward/quadratic".into(),
        max_err: worst,
        tolerance: QUADRATIC_TOLERANCE,
        trials,
    }
}

/// Backward of `L1 + L2` against the sum of the separate backwards on a
/// random small conv graph.
pub fn backward_linearity(rng: &mut ChaCha8Rng, trials: usize) -> CheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = sample(rng, &[2, 2, 4, 4], Dist::Signed);
        let w = sample(rng, &[3, 2, 3, 3], Dist::Signed);
        let r1 = sample(rng, &[2 * 3 * 4 * 4], Dist::Signed);
        let r2 = sample(rng, &[2 * 3 * 4 * 4], Dist::Signed);
        let err = (|| -> Result<f64, GradError> {
            let g = Graph::new();
            let wv = g.param(w.clone());
            let y = g.constant(x.clone()).conv2d(wv, 1, 1)?.sigmoid()?;
            let l1 = weighted_sum(y, &r1)?;
            let l2 = weighted_sum(y.square()?, &r2)?;
            let total = g.grad(l1.add(l2)?, &[wv], false)?.grads[0].value();
            let g1 = g.grad(l1, &[wv], false)?.grads[0].value();
            let g2 = g.grad(l2, &[wv], false)?.grads[0].value();
            let sum = g1.zip_map(&g2, |a, b| a + b);
            Ok(total.max_abs_diff(&sum))
        })()
        .unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    CheckReport { name: "backward/linearity".into(), max_err: worst, tolerance: LINEARITY_TOLERANCE, trials }
}

/// The complete gradient verification suite: every op in every argument
/// position, second-order compositions, the closed-form quadratic and the
/// linearity check.
pub fn run_suite(seed: u64, trials: usize) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<CheckReport> = first_order_cases()
        .iter()
        .chain(second_order_cases().iter())
        .map(|c| run_case(c, &mut rng, trials))
        .collect();
    reports.push(double_backward_quadratic(&mut rng, trials));
    reports.push(backward_linearity(&mut rng, trials));
    reports
}
