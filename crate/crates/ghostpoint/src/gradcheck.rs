//! Central-finite-difference verification of reverse-mode gradients.

use crate::attention::{self, AttentionConfig, AttentionError, PositionalMode};
use crate::geom::Vec3;
use crate::optim::{ParamBinding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, TensorId};
use crate::util::rng_stream;
use rand::Rng;

/// Result of a finite-difference sweep: the worst coordinate's relative
/// error and where it occurred.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport<F> {
    pub max_rel_err: F,
    pub worst_input: usize,
    pub worst_coord: usize,
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences at the given point.
///
/// `build` constructs the graph from differentiable leaves created from
/// `inputs` (shape, data) and returns the scalar output. Every coordinate of
/// every input is perturbed by ±`step`, and the reported error is
///
/// ```text
/// max over coords of |analytic − (f₊ − f₋)/2·step| / max(1, |analytic|)
/// ```
pub fn grad_check<F, B>(
    inputs: &[(Vec<usize>, Vec<F>)],
    step: F,
    build: B,
) -> Result<GradCheckReport<F>, TensorError>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    // One analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(shape, data)| g.param(shape, data.clone()))
        .collect::<Result<_, _>>()?;
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<F>> = ids
        .iter()
        .map(|id| g.grad(*id).map(|opt| opt.unwrap_or(&[]).to_vec()))
        .collect::<Result<_, _>>()?;

    let eval = |point: &[(Vec<usize>, Vec<F>)]| -> Result<F, TensorError> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = point
            .iter()
            .map(|(shape, data)| g.constant(shape, data.clone()))
            .collect::<Result<_, _>>()?;
        let out = build(&mut g, &ids)?;
        Ok(g.scalar_value(out))
    };

    let mut report = GradCheckReport { max_rel_err: F::zero(), worst_input: 0, worst_coord: 0 };
    let mut point = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for c in 0..grads.len() {
            let base = point[i].1[c];
            point[i].1[c] = base + step;
            let f_plus = eval(&point)?;
            point[i].1[c] = base - step;
            let f_minus = eval(&point)?;
            point[i].1[c] = base;
            let numeric = (f_plus - f_minus) / (step + step);
            let denom = F::one().max(grads[c].abs());
            let rel = (grads[c] - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report = GradCheckReport { max_rel_err: rel, worst_input: i, worst_coord: c };
            }
        }
    }
    Ok(report)
}

/// Default step size used by the verification suites.
pub fn default_step<F: Scalar>() -> F {
    F::from_f64(1e-5)
}

/// Default pass threshold for the relative error.
pub fn default_tolerance<F: Scalar>() -> F {
    F::from_f64(1e-4)
}

/// Outcome of one named check from [`standard_battery`].
#[derive(Debug, Clone)]
pub struct BatteryReport {
    pub name: &'static str,
    pub seeds: usize,
    /// Worst relative error over all seeds and coordinates.
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Sum of `y` weighted by a fixed random tensor, so that no coordinate's
/// gradient path is hidden by accidental symmetry.
fn weighted_sum(g: &mut Graph<f64>, y: TensorId, w: &[f64]) -> Result<TensorId, TensorError> {
    let shape = g.shape(y).to_vec();
    let wt = g.constant(&shape, w.to_vec())?;
    let p = g.mul(y, wt)?;
    g.sum(p)
}

fn randv(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor_err(e: AttentionError) -> TensorError {
    match e {
        AttentionError::Tensor(t) => t,
        // The battery builds valid configs with matching position counts,
        // so structural attention errors cannot occur here.
        other => unreachable!("attention stack build failed structurally: {other}"),
    }
}

/// Check every differentiable graph operation — plus the full two-layer
/// weight-tied attention stack applied at two chained stages — against
/// central finite differences, at `seeds` random points each.
///
/// Inputs, weightings, and structural choices (gather indices, targets,
/// rotation angles) are drawn from per-check deterministic streams, so the
/// battery is reproducible. Each report passes when the worst relative
/// error stays below [`default_tolerance`] with [`default_step`].
pub fn standard_battery(seeds: usize) -> Result<Vec<BatteryReport>, TensorError> {
    let step = default_step::<f64>();
    let tol = default_tolerance::<f64>();
    type Check = Box<dyn Fn(u64) -> Result<f64, TensorError>>;
    let mut checks: Vec<(&'static str, Check)> = Vec::new();

    // Elementwise and linear ops: random point, random output weighting.
    fn binary(
        checks: &mut Vec<(&'static str, Check)>,
        name: &'static str,
        step: f64,
        op: impl Fn(&mut Graph<f64>, TensorId, TensorId) -> Result<TensorId, TensorError> + 'static,
    ) {
        checks.push((
            name,
            Box::new(move |s| {
                let mut rng = rng_stream(s, name, 0);
                let a = randv(&mut rng, 6);
                let b = randv(&mut rng, 6);
                let w = randv(&mut rng, 6);
                let r = grad_check(&[(vec![2, 3], a), (vec![2, 3], b)], step, |g, ids| {
                    let y = op(g, ids[0], ids[1])?;
                    weighted_sum(g, y, &w)
                })?;
                Ok(r.max_rel_err)
            }),
        ));
    }
    fn unary(
        checks: &mut Vec<(&'static str, Check)>,
        name: &'static str,
        step: f64,
        shape: Vec<usize>,
        op: impl Fn(&mut Graph<f64>, TensorId) -> Result<TensorId, TensorError> + 'static,
    ) {
        let n: usize = shape.iter().product();
        checks.push((
            name,
            Box::new(move |s| {
                let mut rng = rng_stream(s, name, 0);
                let x = randv(&mut rng, n);
                let w = randv(&mut rng, 128);
                let r = grad_check(&[(shape.clone(), x)], step, |g, ids| {
                    let y = op(g, ids[0])?;
                    let ny: usize = g.shape(y).iter().product();
                    weighted_sum(g, y, &w[..ny])
                })?;
                Ok(r.max_rel_err)
            }),
        ));
    }

    binary(&mut checks, "add", step, |g, a, b| g.add(a, b));
    binary(&mut checks, "sub", step, |g, a, b| g.sub(a, b));
    binary(&mut checks, "mul", step, |g, a, b| g.mul(a, b));
    unary(&mut checks, "scale", step, vec![2, 3], |g, x| g.scale(x, -1.7));
    unary(&mut checks, "transpose", step, vec![3, 2], |g, x| g.transpose(x));
    unary(&mut checks, "reshape", step, vec![2, 6], |g, x| g.reshape(x, &[3, 4]));
    unary(&mut checks, "slice_rows", step, vec![5, 3], |g, x| g.slice_rows(x, 1, 3));
    unary(&mut checks, "slice_cols", step, vec![3, 7], |g, x| g.slice_cols(x, 2, 3));
    unary(&mut checks, "repeat_row", step, vec![1, 4], |g, x| g.repeat_row(x, 5));
    unary(&mut checks, "softmax", step, vec![3, 5], |g, x| g.softmax(x));
    unary(&mut checks, "l2_normalize", step, vec![3, 4], |g, x| g.l2_normalize(x, 1e-9));
    unary(&mut checks, "gelu", step, vec![2, 5], |g, x| g.gelu(x));
    unary(&mut checks, "sigmoid", step, vec![2, 5], |g, x| g.sigmoid(x));
    unary(&mut checks, "sum", step, vec![3, 4], |g, x| g.sum(x));
    unary(&mut checks, "mean", step, vec![3, 4], |g, x| g.mean(x));
    unary(&mut checks, "upsample_nearest2", step, vec![2, 3, 3], |g, x| g.upsample_nearest2(x));
    unary(&mut checks, "chw_to_rows", step, vec![3, 2, 2], |g, x| g.chw_to_rows(x));

    checks.push((
        "add_bias",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "add_bias", 0);
            let x = randv(&mut rng, 12);
            let b = randv(&mut rng, 4);
            let w = randv(&mut rng, 12);
            let r = grad_check(&[(vec![3, 4], x), (vec![4], b)], step, |g, ids| {
                let y = g.add_bias(ids[0], ids[1])?;
                weighted_sum(g, y, &w)
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "matmul",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "matmul", 0);
            let a = randv(&mut rng, 6);
            let b = randv(&mut rng, 12);
            let w = randv(&mut rng, 8);
            let r = grad_check(&[(vec![2, 3], a), (vec![3, 4], b)], step, |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                weighted_sum(g, y, &w)
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "concat_rows",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "concat_rows", 0);
            let a = randv(&mut rng, 6);
            let b = randv(&mut rng, 9);
            let w = randv(&mut rng, 15);
            let r = grad_check(&[(vec![2, 3], a), (vec![3, 3], b)], step, |g, ids| {
                let y = g.concat_rows(&[ids[0], ids[1]])?;
                weighted_sum(g, y, &w)
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "concat_cols",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "concat_cols", 0);
            let a = randv(&mut rng, 6);
            let b = randv(&mut rng, 4);
            let w = randv(&mut rng, 10);
            let r = grad_check(&[(vec![2, 3], a), (vec![2, 2], b)], step, |g, ids| {
                let y = g.concat_cols(&[ids[0], ids[1]])?;
                weighted_sum(g, y, &w)
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        // Duplicate indices exercise the scatter-add backward rule.
        "gather_rows",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "gather_rows", 0);
            let table = randv(&mut rng, 18);
            let indices: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
            let w = randv(&mut rng, 15);
            let r = grad_check(&[(vec![6, 3], table)], step, |g, ids| {
                let y = g.gather_rows(ids[0], &indices)?;
                weighted_sum(g, y, &w)
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        // Angles enter as constants; only the rotated features carry grads.
        "rotate_pairs",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "rotate_pairs", 0);
            let x = randv(&mut rng, 18);
            let angles: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
            let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
            let w = randv(&mut rng, 18);
            let r = grad_check(&[(vec![3, 6], x)], step, |g, ids| {
                let c = g.constant(&[3, 3], cos.clone())?;
                let sn = g.constant(&[3, 3], sin.clone())?;
                let y = g.rotate_pairs(ids[0], c, sn)?;
                weighted_sum(g, y, &w)
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "layer_norm",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "layer_norm", 0);
            let x = randv(&mut rng, 18);
            let gain: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
            let bias = randv(&mut rng, 6);
            let w = randv(&mut rng, 18);
            let r = grad_check(
                &[(vec![3, 6], x), (vec![6], gain), (vec![6], bias)],
                step,
                |g, ids| {
                    let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                    weighted_sum(g, y, &w)
                },
            )?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "mse",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "mse", 0);
            let a = randv(&mut rng, 6);
            let b = randv(&mut rng, 6);
            let r = grad_check(&[(vec![2, 3], a), (vec![2, 3], b)], step, |g, ids| {
                g.mse(ids[0], ids[1])
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "cross_entropy",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "cross_entropy", 0);
            let logits = randv(&mut rng, 7);
            let target = rng.gen_range(0..7);
            let r = grad_check(&[(vec![7], logits)], step, |g, ids| {
                g.cross_entropy(ids[0], target)
            })?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        // Probabilities stay in (0.2, 0.8) so ± the fd step cannot leave
        // the op's open-interval domain.
        "bce",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "bce", 0);
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..0.8)).collect();
            let target = f64::from(u8::from(rng.gen_bool(0.5)));
            let r = grad_check(&[(vec![3], p)], step, |g, ids| g.bce(ids[0], target))?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "bce_logits",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "bce_logits", 0);
            let z = randv(&mut rng, 3);
            let target = f64::from(u8::from(rng.gen_bool(0.5)));
            let r = grad_check(&[(vec![3], z)], step, |g, ids| g.bce_logits(ids[0], target))?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        "conv2d",
        Box::new(move |s| {
            let mut rng = rng_stream(s, "conv2d", 0);
            let x = randv(&mut rng, 2 * 5 * 5);
            let w = randv(&mut rng, 3 * 2 * 3 * 3);
            let b = randv(&mut rng, 3);
            let out_w = randv(&mut rng, 3 * 3 * 3);
            let r = grad_check(
                &[(vec![2, 5, 5], x), (vec![3, 2, 3, 3], w), (vec![3], b)],
                step,
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                    weighted_sum(g, y, &out_w)
                },
            )?;
            Ok(r.max_rel_err)
        }),
    ));
    checks.push((
        // The full cross-attention stack — two layers, rotary positions,
        // one position-free context row — applied twice through the same
        // weights, exactly as the weight-tied stages use it. Every stack
        // parameter and both feature clouds are differentiable inputs.
        "attention-stack-2layer-tied",
        Box::new(move |s| {
            let cfg = AttentionConfig {
                d: 6,
                heads: 1,
                layers: 2,
                positional: PositionalMode::Rotary,
            };
            let mut rng = rng_stream(s, "attention-stack", 0);
            let mut store = ParamStore::<f64>::new();
            attention::register_params(&mut store, &cfg, "attn.", &mut rng)
                .map_err(tensor_err)?;
            let names: Vec<String> = store.iter().map(|e| e.name.clone()).collect();
            let mut inputs: Vec<(Vec<usize>, Vec<f64>)> = store
                .iter()
                .map(|e| (e.shape.clone(), e.value.clone()))
                .collect();
            // Nudge every value (including the freshly-initialized unit
            // gains and zero biases) off its symmetric starting point.
            for (_, data) in &mut inputs {
                for v in data {
                    *v += rng.gen_range(-0.05..0.05);
                }
            }
            let n_params = inputs.len();
            inputs.push((vec![2, 6], randv(&mut rng, 12)));
            inputs.push((vec![4, 6], randv(&mut rng, 24)));
            inputs.push((vec![3, 6], randv(&mut rng, 18)));
            let mut pos = |n: usize| -> Vec<Vec3<f64>> {
                (0..n)
                    .map(|_| {
                        Vec3::new(
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(0.0..0.6),
                        )
                    })
                    .collect()
            };
            let qp1 = pos(2);
            let qp2 = pos(2);
            let mut cp1: Vec<Option<Vec3<f64>>> = pos(3).into_iter().map(Some).collect();
            cp1.push(None);
            let cp2: Vec<Option<Vec3<f64>>> = pos(3).into_iter().map(Some).collect();
            let w = randv(&mut rng, 12);
            let r = grad_check(&inputs, step, |g, ids| {
                let binding = ParamBinding::from_pairs(
                    names.iter().cloned().zip(ids[..n_params].iter().copied()),
                );
                let q = attention::cross_attend(
                    g, &binding, &cfg, "attn.", ids[n_params], &qp1, ids[n_params + 1], &cp1,
                )
                .map_err(tensor_err)?;
                let q = attention::cross_attend(
                    g, &binding, &cfg, "attn.", q, &qp2, ids[n_params + 2], &cp2,
                )
                .map_err(tensor_err)?;
                weighted_sum(g, q, &w)
            })?;
            Ok(r.max_rel_err)
        }),
    ));

    let mut reports = Vec::with_capacity(checks.len());
    for (name, check) in &checks {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            worst = worst.max(check(s as u64)?);
        }
        reports.push(BatteryReport { name, seeds, max_rel_err: worst, pass: worst < tol });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let report = grad_check(
            &[(vec![3], vec![0.3, -0.2, 0.9])],
            default_step(),
            |g, ids| {
                let w = g.constant(&[3], vec![2.0, -1.0, 0.5])?;
                let prod = g.mul(ids[0], w)?;
                g.sum(prod)
            },
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-10, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let report = grad_check(
            &[(vec![4], vec![0.4, -1.2, 0.7, 0.1])],
            default_step(),
            |g, ids| g.cross_entropy(ids[0], 2),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn battery_covers_every_op_and_passes() {
        let reports = standard_battery(2).unwrap();
        // One entry per differentiable graph op, plus the tied stack.
        assert_eq!(reports.len(), 30);
        for r in &reports {
            assert!(r.pass, "{}: rel err {:.3e}", r.name, r.max_rel_err);
        }
        let names: Vec<_> = reports.iter().map(|r| r.name).collect();
        assert!(names.contains(&"conv2d"));
        assert!(names.contains(&"attention-stack-2layer-tied"));
    }

    #[test]
    fn battery_is_deterministic() {
        let a = standard_battery(1).unwrap();
        let b = standard_battery(1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits(), "{}", x.name);
        }
    }

    #[test]
    fn report_identifies_worst_coordinate() {
        // Gradient of x·x is exact for fd in one coordinate only when the
        // function is quadratic — all coordinates agree, so the worst index
        // is still a valid coordinate.
        let report = grad_check(
            &[(vec![2], vec![1.0, 2.0]), (vec![1], vec![3.0])],
            default_step(),
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let s = g.sum(sq)?;
                let t = g.mul(ids[1], ids[1])?;
                let t = g.sum(t)?;
                g.add(s, t)
            },
        )
        .unwrap();
        assert!(report.worst_input < 2);
        assert!(report.max_rel_err < 1e-9);
    }
}
