//! Finite-difference verification of reverse-mode gradients.
//!
//! [`grad_check`] compares analytic gradients against central differences
//! for an arbitrary scalar-valued closure over a set of parameters and
//! returns the worst relative error seen. [`builtin_suite`] sweeps every
//! differentiable operation over many randomized instances; the library's
//! test suite and the CLI both run it, so a build can be checked on the
//! target machine.

use rand_chacha::ChaCha8Rng;

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{EqInvError, Result};
use crate::rng;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Step used by [`builtin_suite`]; near the float64 optimum `cbrt(machine
/// epsilon)`, where truncation and rounding error balance.
pub const SUITE_EPS: f64 = 1e-5;
/// Relative-error denominators never drop below this.
const DENOM_FLOOR: f64 = 1e-8;
/// Root seed for the randomized suite instances.
const SUITE_SEED: u64 = 0x6e76_4344;

/// Worst relative error between analytic and central-difference gradients.
///
/// `f` must rebuild the computation from scratch on the tape it is given and
/// return a scalar. Every tensor in `params` must require gradients. The
/// relative error for one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[&Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    for p in params {
        if !p.needs_grad() {
            return Err(EqInvError::Contract(
                "grad_check: every checked parameter must require gradients".into(),
            ));
        }
        p.zero_grad();
    }

    let eval = |tape: &Tape| -> Result<Tensor> {
        let out = f(tape)?;
        if !out.all_finite() {
            return Err(EqInvError::Numeric("grad_check: function produced a non-finite value".into()));
        }
        Ok(out)
    };

    let tape = Tape::new();
    let loss = eval(&tape)?;
    tape.backward(&loss)?;

    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad_vec().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];

            p.with_data_mut(|d| d[j] = orig + eps);
            let up = eval(&Tape::new())?.item();
            p.with_data_mut(|d| d[j] = orig - eps);
            let down = eval(&Tape::new())?.item();
            p.with_data_mut(|d| d[j] = orig);

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(rel);
        }
    }

    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}

/// Worst relative error for one named operation, aggregated over all
/// randomized instances.
pub struct CheckCase {
    pub name: &'static str,
    pub worst_rel_err: f64,
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng::unit_f64(rng)).collect();
    Tensor::from_vec(data, shape).unwrap().requires_grad(true)
}

/// Values bounded away from zero, so kinked ops (relu) see no coordinate
/// within a finite-difference step of their kink.
fn param_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng::unit_f64(rng) < 0.5 { -1.0 } else { 1.0 };
            sign * (min_abs + (max_abs - min_abs) * rng::unit_f64(rng))
        })
        .collect();
    Tensor::from_vec(data, shape).unwrap().requires_grad(true)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    lo + rng::index(rng, hi - lo + 1)
}

/// Sweep every differentiable operation over `instances` randomized shapes
/// and values, returning the per-operation worst relative error. Everything
/// should sit well below 1e-5 with [`SUITE_EPS`].
pub fn builtin_suite(instances: usize) -> Result<Vec<CheckCase>> {
    let mut cases: Vec<CheckCase> = Vec::new();
    let eps = SUITE_EPS;

    let mut run = |name: &'static str,
                   instance: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0_f64;
        for i in 0..instances {
            let tag = i.to_string();
            let mut rng = rng::stream(SUITE_SEED, &["gradcheck", name, &tag]);
            worst = worst.max(instance(&mut rng)?);
        }
        cases.push(CheckCase { name, worst_rel_err: worst });
        Ok(())
    };

    run("matmul", &mut |rng| {
        let (m, k, n) = (dim(rng, 2, 5), dim(rng, 2, 5), dim(rng, 2, 5));
        let a = param(rng, &[m, k], -1.0, 1.0);
        let b = param(rng, &[k, n], -1.0, 1.0);
        grad_check(
            |t| {
                let c = t.matmul(&a, &b)?;
                t.sum(&t.mul(&c, &t.offset(&c, 0.3)?)?)
            },
            &[&a, &b],
            eps,
        )
    })?;

    run("matmul_nt", &mut |rng| {
        let (m, k, n) = (dim(rng, 2, 5), dim(rng, 2, 5), dim(rng, 2, 5));
        let a = param(rng, &[m, k], -1.0, 1.0);
        let b = param(rng, &[n, k], -1.0, 1.0);
        grad_check(
            |t| {
                let c = t.matmul_nt(&a, &b)?;
                t.sum(&t.mul(&c, &t.offset(&c, 0.3)?)?)
            },
            &[&a, &b],
            eps,
        )
    })?;

    run("matvec", &mut |rng| {
        let (m, n) = (dim(rng, 2, 5), dim(rng, 2, 5));
        let a = param(rng, &[m, n], -1.0, 1.0);
        let v = param(rng, &[n], -1.0, 1.0);
        grad_check(
            |t| {
                let o = t.matvec(&a, &v)?;
                t.sum(&t.mul(&o, &t.offset(&o, 0.3)?)?)
            },
            &[&a, &v],
            eps,
        )
    })?;

    run("add", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param(rng, &[r, c], -1.0, 1.0);
        let y = param(rng, &[r, c], -1.0, 1.0);
        grad_check(
            |t| {
                let s = t.add(&x, &y)?;
                t.sum(&t.mul(&s, &t.offset(&s, 0.7)?)?)
            },
            &[&x, &y],
            eps,
        )
    })?;

    run("sub", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param(rng, &[r, c], -1.0, 1.0);
        let y = param(rng, &[r, c], -1.0, 1.0);
        grad_check(
            |t| {
                let s = t.sub(&x, &y)?;
                t.sum(&t.mul(&s, &t.offset(&s, 0.7)?)?)
            },
            &[&x, &y],
            eps,
        )
    })?;

    run("mul", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param(rng, &[r, c], 0.2, 1.2);
        let y = param(rng, &[r, c], 0.2, 1.2);
        grad_check(|t| t.sum(&t.mul(&t.mul(&x, &y)?, &x)?), &[&x, &y], eps)
    })?;

    run("add_row_broadcast", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param(rng, &[r, c], -1.0, 1.0);
        let v = param(rng, &[c], -1.0, 1.0);
        grad_check(
            |t| {
                let s = t.add_row_broadcast(&x, &v)?;
                t.sum(&t.mul(&s, &s)?)
            },
            &[&x, &v],
            eps,
        )
    })?;

    run("mul_row_broadcast", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param(rng, &[r, c], 0.2, 1.2);
        let v = param(rng, &[c], 0.2, 1.2);
        grad_check(
            |t| {
                let s = t.mul_row_broadcast(&x, &v)?;
                t.sum(&t.mul(&s, &s)?)
            },
            &[&x, &v],
            eps,
        )
    })?;

    run("mul_col_broadcast", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param(rng, &[r, c], 0.2, 1.2);
        let u = param(rng, &[r], 0.2, 1.2);
        grad_check(
            |t| {
                let s = t.mul_col_broadcast(&x, &u)?;
                t.sum(&t.mul(&s, &s)?)
            },
            &[&x, &u],
            eps,
        )
    })?;

    run("scale", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -1.0, 1.0);
        grad_check(|t| t.sum(&t.scale(&t.mul(&x, &x)?, -2.5)?), &[&x], eps)
    })?;

    run("offset", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -1.0, 1.0);
        grad_check(
            |t| {
                let s = t.offset(&x, 1.5)?;
                t.sum(&t.mul(&s, &s)?)
            },
            &[&x],
            eps,
        )
    })?;

    run("mul_scalar", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -1.0, 1.0);
        let s = param(rng, &[1], 0.3, 1.5);
        grad_check(
            |t| {
                let m = t.mul_scalar(&x, &s)?;
                t.sum(&t.mul(&m, &m)?)
            },
            &[&x, &s],
            eps,
        )
    })?;

    run("sub_scalar", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -1.0, 1.0);
        let s = param(rng, &[1], 0.3, 1.5);
        grad_check(
            |t| {
                let m = t.sub_scalar(&x, &s)?;
                t.sum(&t.mul(&m, &m)?)
            },
            &[&x, &s],
            eps,
        )
    })?;

    run("exp", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -2.0, 2.0);
        grad_check(|t| t.sum(&t.exp(&x)?), &[&x], eps)
    })?;

    run("log", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], 0.2, 3.0);
        grad_check(|t| t.sum(&t.log(&x)?), &[&x], eps)
    })?;

    run("relu", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param_off_zero(rng, &[r, c], 0.05, 1.0);
        grad_check(
            |t| {
                let s = t.relu(&x)?;
                t.sum(&t.mul(&s, &t.offset(&s, 0.4)?)?)
            },
            &[&x],
            eps,
        )
    })?;

    run("sum", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -1.0, 1.0);
        grad_check(|t| t.sum(&t.mul(&x, &x)?), &[&x], eps)
    })?;

    run("mean", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -1.0, 1.0);
        grad_check(|t| t.mean(&t.mul(&x, &x)?), &[&x], eps)
    })?;

    run("variance", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -1.0, 1.0);
        grad_check(|t| t.variance(&t.mul(&x, &x)?), &[&x], eps)
    })?;

    run("log_sum_exp", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], -2.0, 2.0);
        grad_check(|t| t.log_sum_exp(&x), &[&x], eps)
    })?;

    run("l2_normalize_rows", &mut |rng| {
        let (r, c) = (dim(rng, 2, 4), dim(rng, 2, 5));
        let x = param_off_zero(rng, &[r, c], 0.1, 1.0);
        grad_check(
            |t| {
                let n = t.l2_normalize_rows(&x)?;
                t.sum(&t.mul(&n, &t.offset(&n, 0.5)?)?)
            },
            &[&x],
            eps,
        )
    })?;

    run("select_rows", &mut |rng| {
        let (r, c) = (dim(rng, 3, 5), dim(rng, 2, 5));
        let x = param(rng, &[r, c], -1.0, 1.0);
        let picks: Vec<usize> = (0..r + 2).map(|_| rng::index(rng, r)).collect();
        grad_check(
            |t| {
                let s = t.select_rows(&x, &picks)?;
                t.sum(&t.mul(&s, &t.offset(&s, 0.2)?)?)
            },
            &[&x],
            eps,
        )
    })?;

    run("row", &mut |rng| {
        let (r, c) = (dim(rng, 2, 5), dim(rng, 2, 5));
        let x = param(rng, &[r, c], -1.0, 1.0);
        let i = rng::index(rng, r);
        grad_check(
            |t| {
                let v = t.row(&x, i)?;
                t.sum(&t.mul(&v, &t.offset(&v, 0.2)?)?)
            },
            &[&x],
            eps,
        )
    })?;

    run("vec_element", &mut |rng| {
        let n = dim(rng, 3, 8);
        let x = param(rng, &[n], 0.3, 1.3);
        let i = rng::index(rng, n);
        grad_check(
            |t| {
                let e = t.vec_element(&x, i)?;
                t.mul(&e, &e)
            },
            &[&x],
            eps,
        )
    })?;

    run("concat_vecs", &mut |rng| {
        let (n1, n2) = (dim(rng, 2, 5), dim(rng, 2, 5));
        let a = param(rng, &[n1], -1.0, 1.0);
        let b = param(rng, &[n2], -1.0, 1.0);
        grad_check(
            |t| {
                let cc = t.concat_vecs(&[&a, &b])?;
                t.sum(&t.mul(&cc, &t.offset(&cc, 0.2)?)?)
            },
            &[&a, &b],
            eps,
        )
    })?;

    run("concat_rows", &mut |rng| {
        let (r1, r2, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 5));
        let a = param(rng, &[r1, c], -1.0, 1.0);
        let b = param(rng, &[r2, c], -1.0, 1.0);
        grad_check(
            |t| {
                let cc = t.concat_rows(&[&a, &b])?;
                t.sum(&t.mul(&cc, &t.offset(&cc, 0.2)?)?)
            },
            &[&a, &b],
            eps,
        )
    })?;

    run("stack_scalars", &mut |rng| {
        let a = param(rng, &[1], -1.0, 1.0);
        let b = param(rng, &[1], -1.0, 1.0);
        let c = param(rng, &[1], -1.0, 1.0);
        grad_check(
            |t| {
                let s = t.stack_scalars(&[&a, &b, &c])?;
                t.sum(&t.mul(&s, &t.offset(&s, 0.2)?)?)
            },
            &[&a, &b, &c],
            eps,
        )
    })?;

    run("softmax_cross_entropy", &mut |rng| {
        let (b, c) = (dim(rng, 2, 5), dim(rng, 2, 5));
        let logits = param(rng, &[b, c], -2.0, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng::index(rng, c)).collect();
        grad_check(|t| t.softmax_cross_entropy(&logits, &labels), &[&logits], eps)
    })?;

    // Composite chain: normalize, mask, project, classify. Exercises op
    // chaining the way the training losses do.
    run("masked_classifier_chain", &mut |rng| {
        let (b, d, c) = (dim(rng, 2, 4), dim(rng, 3, 6), dim(rng, 2, 4));
        let feats = param_off_zero(rng, &[b, d], 0.1, 1.0);
        let mask = param(rng, &[d], 0.3, 1.0);
        let wcls = param(rng, &[c, d], -0.8, 0.8);
        let labels: Vec<usize> = (0..b).map(|_| rng::index(rng, c)).collect();
        grad_check(
            |t| {
                let z = t.l2_normalize_rows(&feats)?;
                let m = t.mul_row_broadcast(&z, &mask)?;
                let logits = t.matmul_nt(&m, &wcls)?;
                t.softmax_cross_entropy(&logits, &labels)
            },
            &[&feats, &mask, &wcls],
            eps,
        )
    })?;

    Ok(cases)
}
