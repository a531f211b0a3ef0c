//! Finite-difference gradient checking.
//!
//! [`grad_check`] compares a graph's reverse-mode gradients against central
//! differences `(f(x+h) - f(x-h)) / 2h` over every scalar of every parameter,
//! in 64-bit arithmetic. [`standard_suite`] runs the check across randomized
//! shapes for each differentiable op, which is what the `gradcheck` CLI
//! subcommand and the acceptance gate execute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{GradStore, Graph, ParamSet};

/// Default central-difference step.
pub const DEFAULT_H: f64 = 1e-5;
/// Default pass tolerance on the max relative error.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Floor for the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    fn new(op_name: &str, max_rel_error: f64, tolerance: f64) -> Self {
        GradReport {
            op_name: op_name.to_string(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

/// Checks the analytic gradient of `eval` against central differences.
///
/// `eval` must build a graph over the current parameter values and return the
/// scalar objective together with its full gradient store. Relative error per
/// scalar is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(op_name: &str, params: &mut ParamSet, eval: F, h: f64, tol: f64) -> GradReport
where
    F: Fn(&ParamSet) -> (f64, GradStore),
{
    grad_check_scaled(op_name, params, eval, h, tol, 1.0)
}

/// Same as [`grad_check`] but multiplies the analytic gradient by
/// `analytic_scale` first. Anything other than 1.0 simulates a broken
/// backward pass; the detector-sanity tests use 1.01.
pub fn grad_check_scaled<F>(
    op_name: &str,
    params: &mut ParamSet,
    eval: F,
    h: f64,
    tol: f64,
    analytic_scale: f64,
) -> GradReport
where
    F: Fn(&ParamSet) -> (f64, GradStore),
{
    let (_, analytic) = eval(params);
    let ids: Vec<_> = params.ids().collect();
    let mut max_rel = 0.0_f64;
    for pid in ids {
        let n = params.get(pid).value.numel();
        for j in 0..n {
            let orig = params.get(pid).value.data[j];
            params.get_mut(pid).value.data[j] = orig + h;
            let (f_plus, _) = eval(params);
            params.get_mut(pid).value.data[j] = orig - h;
            let (f_minus, _) = eval(params);
            params.get_mut(pid).value.data[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic.grad(pid)[j] * analytic_scale;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    GradReport::new(op_name, max_rel, tol)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform values bounded away from zero, for ops with a kink at 0.
fn uniform_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * (0.01 + 0.99 * rng.gen_range(0.0..1.0))
        })
        .collect()
}

type CaseFn = Box<dyn Fn(&mut ChaCha8Rng, f64, f64, f64) -> GradReport>;

fn check_case<F>(
    name: &str,
    mut params: ParamSet,
    wire: F,
    h: f64,
    tol: f64,
    scale: f64,
) -> GradReport
where
    F: Fn(&ParamSet, &mut Graph) -> crate::graph::VarId,
{
    let eval = |p: &ParamSet| {
        let mut g = Graph::new(p);
        let root = wire(p, &mut g);
        let value = g.value(root).scalar().expect("root must be scalar");
        let store = g.backward(root).expect("backward failed");
        (value, store)
    };
    grad_check_scaled(name, &mut params, eval, h, tol, scale)
}

fn suite_cases() -> Vec<(&'static str, CaseFn)> {
    let mut cases: Vec<(&'static str, CaseFn)> = Vec::new();

    cases.push((
        "pointwise_conv",
        Box::new(|rng, h, tol, scale| {
            let (b, c_in, c_out, t) = (
                rng.gen_range(1..=2),
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(3..=9),
            );
            let mut params = ParamSet::new();
            let data = uniform(rng, b * c_in * t, -1.0, 1.0);
            let x = params.add("x", &[b, c_in, t], data);
            let w = params.add("w", &[c_out, c_in], uniform(rng, c_out * c_in, -1.0, 1.0));
            let bias = params.add("bias", &[c_out], uniform(rng, c_out, -0.5, 0.5));
            check_case(
                "pointwise_conv",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let y = g.pointwise_conv(xv, w, bias).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "linear_per_timestep",
        Box::new(|rng, h, tol, scale| {
            let (b, c_in, c_out, t) = (
                rng.gen_range(1..=2),
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(3..=9),
            );
            let mut params = ParamSet::new();
            let x = params.add("x", &[b, c_in, t], uniform(rng, b * c_in * t, -1.0, 1.0));
            let w = params.add("w", &[c_out, c_in], uniform(rng, c_out * c_in, -1.0, 1.0));
            let bias = params.add("bias", &[c_out], uniform(rng, c_out, -0.5, 0.5));
            check_case(
                "linear_per_timestep",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let y = g.linear_per_timestep(xv, w, bias).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "depthwise_temporal_conv",
        Box::new(|rng, h, tol, scale| {
            let (b, c, k) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let t = rng.gen_range(k..=k + 7);
            let mut params = ParamSet::new();
            let x = params.add("x", &[b, c, t], uniform(rng, b * c * t, -1.0, 1.0));
            let w = params.add("w", &[c, k], uniform(rng, c * k, -1.0, 1.0));
            let bias = params.add("bias", &[c], uniform(rng, c, -0.5, 0.5));
            check_case(
                "depthwise_temporal_conv",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let y = g.depthwise_conv(xv, w, bias).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "temporal_conv",
        Box::new(|rng, h, tol, scale| {
            let (b, c_in, c_out, k) = (
                rng.gen_range(1..=2),
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(1..=4),
            );
            let t = rng.gen_range(k..=k + 7);
            let mut params = ParamSet::new();
            let x = params.add("x", &[b, c_in, t], uniform(rng, b * c_in * t, -1.0, 1.0));
            let w = params.add(
                "w",
                &[c_out, c_in, k],
                uniform(rng, c_out * c_in * k, -1.0, 1.0),
            );
            let bias = params.add("bias", &[c_out], uniform(rng, c_out, -0.5, 0.5));
            check_case(
                "temporal_conv",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let y = g.temporal_conv(xv, w, bias).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "layer_norm",
        Box::new(|rng, h, tol, scale| {
            let (b, c, t) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=7));
            let mut params = ParamSet::new();
            let x = params.add("x", &[b, c, t], uniform(rng, b * c * t, -1.0, 1.0));
            let gamma = params.add("gamma", &[c], uniform(rng, c, 0.5, 1.5));
            let beta = params.add("beta", &[c], uniform(rng, c, -0.5, 0.5));
            check_case(
                "layer_norm",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let y = g.layer_norm(xv, gamma, beta).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "leaky_relu",
        Box::new(|rng, h, tol, scale| {
            let (b, c, t) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(2..=8));
            let mut params = ParamSet::new();
            // keep inputs away from the kink at 0 so +-h stays on one branch
            let x = params.add("x", &[b, c, t], uniform_off_zero(rng, b * c * t));
            let w = params.add("w", &[1, c], uniform(rng, c, -1.0, 1.0));
            let bias = params.add("bias", &[1], uniform(rng, 1, -0.5, 0.5));
            check_case(
                "leaky_relu",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let y = g.leaky_relu(xv, 0.01);
                    // mix channels so each element carries a distinct weight
                    let z = g.pointwise_conv(y, w, bias).unwrap();
                    g.sum_all(z)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "causal_pad",
        Box::new(|rng, h, tol, scale| {
            let (b, c, t) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=8));
            let amount = rng.gen_range(0..=3);
            let k = rng.gen_range(1..=(amount + 1).min(t));
            let mut params = ParamSet::new();
            let x = params.add("x", &[b, c, t], uniform(rng, b * c * t, -1.0, 1.0));
            let w = params.add("w", &[c, k], uniform(rng, c * k, -1.0, 1.0));
            let bias = params.add("bias", &[c], uniform(rng, c, -0.5, 0.5));
            check_case(
                "causal_pad",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let padded = g.causal_pad(xv, amount);
                    // follow with a conv so a mis-sliced pad gradient is visible
                    let y = g.depthwise_conv(padded, w, bias).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "concat_channels",
        Box::new(|rng, h, tol, scale| {
            let (b, c1, c2, t) = (
                rng.gen_range(1..=2),
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(2..=7),
            );
            let mut params = ParamSet::new();
            let x1 = params.add("x1", &[b, c1, t], uniform(rng, b * c1 * t, -1.0, 1.0));
            let x2 = params.add("x2", &[b, c2, t], uniform(rng, b * c2 * t, -1.0, 1.0));
            let c = c1 + c2;
            let w = params.add("w", &[2, c], uniform(rng, 2 * c, -1.0, 1.0));
            let bias = params.add("bias", &[2], uniform(rng, 2, -0.5, 0.5));
            check_case(
                "concat_channels",
                params,
                move |_, g| {
                    let v1 = g.param_input(x1);
                    let v2 = g.param_input(x2);
                    let cat = g.concat_channels(&[v1, v2]).unwrap();
                    let y = g.pointwise_conv(cat, w, bias).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "spatial_attention",
        Box::new(|rng, h, tol, scale| {
            let (b, c, t) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=7));
            let mut params = ParamSet::new();
            let x = params.add("x", &[b, c, t], uniform(rng, b * c * t, -1.0, 1.0));
            let w = params.add("w", &[c, c], uniform(rng, c * c, -1.0, 1.0));
            let bias = params.add("bias", &[c], uniform(rng, c, -0.5, 0.5));
            check_case(
                "spatial_attention",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    let y = g.spatial_attention(xv, w, bias).unwrap();
                    g.sum_all(y)
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases.push((
        "pearson_loss",
        Box::new(|rng, h, tol, scale| {
            let (b, c, t) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(4..=12));
            let mut params = ParamSet::new();
            let x = params.add("pred", &[b, c, t], uniform(rng, b * c * t, -1.0, 1.0));
            let target = crate::tensor::Tensor3::from_vec(b, c, t, uniform(rng, b * c * t, -1.0, 1.0));
            check_case(
                "pearson_loss",
                params,
                move |_, g| {
                    let xv = g.param_input(x);
                    g.pearson_loss(xv, &target).unwrap()
                },
                h,
                tol,
                scale,
            )
        }),
    ));

    cases
}

/// Runs `cases_per_op` randomized gradient checks for every differentiable op
/// (including the composed Pearson loss) and returns one aggregated report
/// per op, with the max relative error across that op's cases.
pub fn standard_suite(seed: u64, cases_per_op: usize) -> Vec<GradReport> {
    standard_suite_scaled(seed, cases_per_op, 1.0)
}

/// [`standard_suite`] with the analytic gradients multiplied by `scale`;
/// used to prove the checker detects a corrupted backward pass.
pub fn standard_suite_scaled(seed: u64, cases_per_op: usize, scale: f64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, case) in suite_cases() {
        let mut max_rel = 0.0_f64;
        for _ in 0..cases_per_op {
            let report = case(&mut rng, DEFAULT_H, DEFAULT_TOL, scale);
            if report.max_rel_error > max_rel {
                max_rel = report.max_rel_error;
            }
        }
        out.push(GradReport::new(name, max_rel, DEFAULT_TOL));
    }
    out
}

/// Op names covered by [`standard_suite`], in suite order.
pub fn standard_suite_ops() -> Vec<&'static str> {
    suite_cases().into_iter().map(|(name, _)| name).collect()
}
