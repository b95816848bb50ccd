//! Central finite differences as an independent check on backward rules.
//!
//! The numeric side only ever evaluates the forward function, so it shares no
//! code path with the recorded backward rules it is compared against.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Magnitudes below this are compared absolutely rather than relatively.
const ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// `(f(x + h·e) − f(x − h·e)) / 2h` for one element of one input.
pub fn finite_difference<F>(f: &F, inputs: &[Tensor], input: usize, elem: usize, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut shifted = inputs.to_vec();
    let x0 = inputs[input].data()[elem];
    shifted[input].data_mut()[elem] = x0 + h;
    let plus = eval(f, &shifted)?;
    shifted[input].data_mut()[elem] = x0 - h;
    let minus = eval(f, &shifted)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares the tape gradient of a scalar function against central
/// differences for every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.get(*v).unwrap_or(&zeros);
        for (e, &a) in analytic.iter().enumerate() {
            let n = finite_difference(&f, inputs, i, e, h)?;
            report.record(i, e, a, n);
        }
    }
    Ok(report)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output element contributes a distinct gradient.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(random(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

type Case = (
    &'static str,
    Vec<Tensor>,
    Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>,
);

/// Central-difference checks of every differentiable op on small random
/// inputs, as `(op name, report)`.
pub fn op_suite(h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let target = Arc::new(Tensor::new(
        &[2, 3, 4, 4],
        (0..96).map(|i| f64::from((i * 7) % 3 == 0)).collect(),
    )?);
    let (t1, t2) = (Arc::clone(&target), target);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![random(&[2, 3, 4], 1), random(&[4, 2], 2)],
            Box::new(|t, v| project(t, v[0].matmul(v[1])?, 3)),
        ),
        (
            "conv2d",
            vec![random(&[2, 3, 5, 4], 4), random(&[4, 3, 3, 3], 5), random(&[4], 6)],
            Box::new(|t, v| project(t, v[0].conv2d(v[1], Some(v[2]), 2, 1)?, 7)),
        ),
        (
            "upsample_nearest",
            vec![random(&[1, 2, 2, 3], 8)],
            Box::new(|t, v| project(t, v[0].upsample_nearest_hw(2, 3)?, 9)),
        ),
        (
            "avg_pool2d",
            vec![random(&[1, 2, 4, 4], 10)],
            Box::new(|t, v| project(t, v[0].avg_pool2d(2)?, 11)),
        ),
        (
            "max_pool2d",
            vec![random(&[1, 2, 4, 4], 12)],
            Box::new(|t, v| project(t, v[0].max_pool2d()?, 13)),
        ),
        (
            "batch_norm_train",
            vec![random(&[3, 2, 2, 3], 14), random(&[2], 15), random(&[2], 16)],
            Box::new(|t, v| project(t, v[0].batch_norm_train(v[1], v[2], 1, 1e-5)?.0, 17)),
        ),
        (
            "batch_norm_eval",
            vec![random(&[3, 2, 2, 2], 18), random(&[2], 19), random(&[2], 20)],
            Box::new(|t, v| {
                project(
                    t,
                    v[0].batch_norm_eval(v[1], v[2], 1, 1e-5, &[0.1, -0.2], &[0.5, 2.0])?,
                    21,
                )
            }),
        ),
        (
            "softmax",
            vec![random(&[2, 3, 4], 22)],
            Box::new(|t, v| project(t, v[0].softmax(1)?, 23)),
        ),
        (
            "relu",
            vec![random(&[3, 5], 24)],
            Box::new(|t, v| project(t, v[0].relu(), 25)),
        ),
        (
            "hardswish",
            vec![random(&[3, 5], 26)],
            Box::new(|t, v| project(t, v[0].scale(4.0).hardswish(), 27)),
        ),
        (
            "sigmoid",
            vec![random(&[3, 5], 28)],
            Box::new(|t, v| project(t, v[0].sigmoid(), 29)),
        ),
        (
            "gelu",
            vec![random(&[3, 5], 30)],
            Box::new(|t, v| project(t, v[0].gelu(), 31)),
        ),
        (
            "concat/permute/reshape/index_select",
            vec![random(&[2, 2, 3], 32), random(&[2, 3, 3], 33)],
            Box::new(|t, v| {
                let c = Var::concat(&[v[0], v[1]], 1)?.permute(&[0, 2, 1])?.reshape(&[2, 15])?;
                project(t, c.index_select(1, &[0, 3, 3, 14])?, 34)
            }),
        ),
        (
            "add/sub/mul/scale/add_scalar/mean",
            vec![random(&[3, 2, 4], 35), random(&[2, 4], 36)],
            Box::new(|t, v| {
                let y = v[0].add(v[1])?.sub(v[0].scale(0.3))?.mul(v[0])?;
                project(t, y, 37)?.add(v[1].mean().add_scalar(1.0))
            }),
        ),
        (
            "binary_cross_entropy",
            vec![random(&[2, 3, 4, 4], 38)],
            Box::new(move |_, v| v[0].sigmoid().binary_cross_entropy(Arc::clone(&t1))),
        ),
        (
            "soft_dice_loss",
            vec![random(&[2, 3, 4, 4], 39)],
            Box::new(move |_, v| v[0].sigmoid().soft_dice_loss(Arc::clone(&t2), 1.0)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_gradients(f, &inputs, h)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_central_difference() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let report = check_gradients(|_, v| Ok(v[0].mul(v[0])?.sum()), &[x], 1e-5).unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.passes(1e-8), "{report:?}");
    }

    #[test]
    fn floor_keeps_tiny_gradients_absolute() {
        assert!(relative_error(0.0, 1e-12) < 1e-5);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_op_passes_the_suite() {
        for (name, report) in op_suite(1e-5).unwrap() {
            assert!(report.checked > 0, "{name}");
            assert!(report.passes(1e-4), "{name}: {report:?}");
        }
    }
}
