use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fault, NumericsError, OpKind, Tape, Tensor, Var};

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F, E>(f: &F, point: &Tensor<f64>, eps: f64) -> Result<Vec<f64>, E>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, E>,
    E: From<NumericsError>,
{
    let eval = |p: Tensor<f64>| -> Result<f64, E> {
        let tape = Tape::new();
        let out = f(tape.leaf(p))?;
        let v = out.item();
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F, E>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64, E>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, E>,
    E: From<NumericsError>,
{
    grad_check_with_fault(f, point, eps, None)
}

/// [`grad_check`] with an optional corrupted backward rule on the analytic side.
pub fn grad_check_with_fault<F, E>(
    f: F,
    point: &Tensor<f64>,
    eps: f64,
    fault: Option<Fault>,
) -> Result<f64, E>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, E>,
    E: From<NumericsError>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(NumericsError::Contract(format!("grad_check step {eps} outside [1e-4, 1e-2]")).into());
    }
    if !point.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" }.into());
    }
    let tape = Tape::new();
    if let Some(fault) = fault {
        tape.inject_fault(fault);
    }
    let x = tape.leaf(point.clone());
    let out = f(x)?;
    let grads = tape.backward(out).map_err(E::from)?;
    let analytic = grads
        .wrt(&x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let numeric = central_difference(&f, point, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

type CheckFn = for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError>;

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Keep clear of the clamp kinks at 0 and 1.
    AwayFromUnitBounds,
}

struct OpCase {
    kind: OpKind,
    len: usize,
    domain: Domain,
    f: CheckFn,
}

/// Contracts the output against a fixed non-trivial pattern so every entry matters.
fn weighted<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.7 + 0.3).sin()).collect();
    let c = y.tape().constant(Tensor::from_f64(&shape, &w)?);
    y.mul(c)?.sum()
}

fn split<'t>(
    x: Var<'t, f64>,
    start: usize,
    shape: &[usize],
) -> Result<Var<'t, f64>, NumericsError> {
    x.narrow(0, start, shape.iter().product())?.reshape(shape)
}

fn case_matmul<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let a = split(x, 0, &[2, 2, 3])?;
    let b = split(x, 12, &[3, 2])?;
    let batched = split(x, 18, &[2, 3, 2])?;
    weighted(a.matmul(b)?)?.add(weighted(a.matmul(batched)?)?)
}

fn case_add<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let a = split(x, 0, &[2, 3])?;
    let b = split(x, 6, &[3])?;
    let c = split(x, 9, &[2, 3])?;
    weighted(a.add(b)?.add(c)?)
}

fn case_mul<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let a = split(x, 0, &[2, 3])?;
    let b = split(x, 6, &[3])?;
    let c = split(x, 9, &[2, 3])?;
    weighted(b.mul(a)?.mul(c)?)
}

fn case_affine<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.affine(-2.5, 0.75)?)
}

fn case_concat<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let a = split(x, 0, &[2, 2])?;
    let b = split(x, 4, &[2, 3])?;
    let c = split(x, 10, &[1, 2])?;
    let last = Var::concat_last(&[a, b])?;
    let rows = Var::concat(&[a, c], 0)?;
    weighted(last)?.add(weighted(rows)?)
}

fn case_softmax<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.reshape(&[2, 4])?.softmax()?)
}

fn case_log_softmax<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.reshape(&[2, 4])?.log_softmax()?)
}

fn case_layer_norm<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let rows = split(x, 0, &[2, 5])?;
    let gamma = split(x, 10, &[5])?;
    let beta = split(x, 15, &[5])?;
    weighted(rows.layer_norm(gamma, beta, 1e-5)?)
}

fn case_tanh<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.tanh()?)
}

fn case_sigmoid<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.sigmoid()?)
}

fn case_gelu<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.gelu()?)
}

fn case_exp<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.exp()?)
}

fn case_log<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.log()?)
}

fn case_clamp<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.clamp(0.0, 1.0)?)
}

fn case_sum<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let s = x.sum()?;
    s.mul(s)
}

fn case_sum_last<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.reshape(&[3, 2])?.sum_last()?)
}

fn case_mean<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    let m = x.mean()?;
    m.mul(m)
}

fn case_reshape<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.reshape(&[2, 3])?)
}

fn case_permute<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.reshape(&[2, 3, 2])?.permute(&[2, 0, 1])?)
}

fn case_narrow<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.reshape(&[3, 4])?.narrow(1, 1, 2)?)
}

fn case_expand<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.expand(&[3])?)
}

fn case_expand_last<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
    weighted(x.expand_last(3)?)
}

fn cases() -> Vec<OpCase> {
    use Domain::*;
    use OpKind::*;
    let case = |kind, len, domain, f: CheckFn| OpCase { kind, len, domain, f };
    vec![
        case(MatMul, 30, Any, case_matmul),
        case(Add, 15, Any, case_add),
        case(Mul, 15, Any, case_mul),
        case(Affine, 4, Any, case_affine),
        case(Concat, 12, Any, case_concat),
        case(SoftmaxRows, 8, Any, case_softmax),
        case(LogSoftmaxRows, 8, Any, case_log_softmax),
        case(LayerNorm, 20, Any, case_layer_norm),
        case(Tanh, 5, Any, case_tanh),
        case(Sigmoid, 5, Any, case_sigmoid),
        case(Gelu, 5, Any, case_gelu),
        case(Exp, 5, Any, case_exp),
        case(Log, 5, Positive, case_log),
        case(Clamp, 6, AwayFromUnitBounds, case_clamp),
        case(Sum, 4, Any, case_sum),
        case(SumLast, 6, Any, case_sum_last),
        case(Mean, 4, Any, case_mean),
        case(Reshape, 6, Any, case_reshape),
        case(Permute, 12, Any, case_permute),
        case(Narrow, 12, Any, case_narrow),
        case(Expand, 4, Any, case_expand),
        case(ExpandLast, 4, Any, case_expand_last),
    ]
}

fn sample_point(rng: &mut ChaCha8Rng, len: usize, domain: Domain, eps: f64) -> Tensor<f64> {
    let margin = 10.0 * eps;
    let values: Vec<f64> = (0..len)
        .map(|_| match domain {
            Domain::Any => rng.gen_range(-2.0..2.0),
            Domain::Positive => rng.gen_range(0.2..3.0),
            Domain::AwayFromUnitBounds => loop {
                let v: f64 = rng.gen_range(-0.5..1.5);
                if v.abs() > margin && (v - 1.0).abs() > margin {
                    break v;
                }
            },
        })
        .collect();
    Tensor::from_f64(&[len], &values).expect("non-empty point")
}

/// Worst relative error for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub kind: OpKind,
    pub max_rel_error: f64,
}

/// Runs the finite-difference check for every [`OpKind`] at `points` random points.
pub fn op_suite(seed: u64, points: usize, eps: f64, fault: Option<Fault>) -> Result<Vec<OpCheck>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for _ in 0..points {
                let p = sample_point(&mut rng, c.len, c.domain, eps);
                worst = worst.max(grad_check_with_fault(c.f, &p, eps, fault)?);
            }
            Ok(OpCheck {
                kind: c.kind,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let p = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let err = grad_check::<_, NumericsError>(|x| x.mul(x)?.sum(), &p, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tanh_sum_at_random_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_point(&mut rng, 6, Domain::Any, 1e-3);
        let err = grad_check::<_, NumericsError>(|x| x.tanh()?.sum(), &p, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn softmax_then_kl_composite() {
        // KL(p || softmax(x)) with a fixed reference p.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = sample_point(&mut rng, 5, Domain::Any, 1e-3);
        fn kl<'t>(x: Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError> {
            let tape = x.tape();
            let reference = tape.constant(Tensor::from_f64(&[1, 5], &[-1.0, 0.5, 0.2, 2.0, -0.3])?);
            let y = reference.softmax()?;
            let log_y = reference.log_softmax()?;
            let log_yhat = x.reshape(&[1, 5])?.softmax()?.log()?;
            y.mul(log_y.sub(log_yhat)?)?.sum()
        }
        let err = grad_check(kl, &p, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let p = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check::<_, NumericsError>(|x| x.sum(), &p, 0.5).is_err());
    }

    #[test]
    fn every_op_kind_passes_once() {
        let report = op_suite(5, 10, 1e-3, None).unwrap();
        assert_eq!(report.len(), OpKind::ALL.len());
        for (check, kind) in report.iter().zip(OpKind::ALL) {
            assert_eq!(check.kind, kind);
            assert!(check.max_rel_error < 1e-3, "{:?}: {}", kind, check.max_rel_error);
        }
    }

    #[test]
    fn corrupted_tanh_is_detected() {
        let report = op_suite(5, 2, 1e-3, Some(Fault::TanhBackward)).unwrap();
        let tanh = report.iter().find(|c| c.kind == OpKind::Tanh).unwrap();
        assert!(tanh.max_rel_error > 1e-2);
    }
}
