//! Analytic adapter gradients, the SGD stepper, the closed-form two-step
//! increment, and a central-difference oracle.
//!
//! For a single example x with upstream sensitivities delta = dL/dw at the
//! adapter output w = scaling * b * a * x, the chain rule gives
//!
//!   dL/da[k][j] = scaling * sum_i delta[i] * b[i][k] * x[j]
//!   dL/db[i][k] = scaling * delta[i] * sum_j a[k][j] * x[j]
//!
//! i.e. da = scaling * (b^T delta) x^T and db = scaling * delta (a x)^T.
//! The base weight never receives gradients.

use crate::adapters::LowRankAdapter;
use crate::error::{CoreError, Result};
use crate::linalg::{Matrix, Vector};

/// Per-output loss sensitivities dL/dw.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGradient {
    pub delta: Vector,
}

impl UpstreamGradient {
    pub fn new(delta: Vector) -> UpstreamGradient {
        UpstreamGradient { delta }
    }

    /// Constant sensitivity across all outputs.
    pub fn constant(value: f64, p_out: usize) -> Result<UpstreamGradient> {
        Ok(UpstreamGradient {
            delta: Vector::new(vec![value; p_out])?,
        })
    }
}

/// Gradients mirroring the adapter's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub da: Matrix,
    pub db: Matrix,
}

impl AdapterGrads {
    pub fn max_abs_diff(&self, other: &AdapterGrads) -> f64 {
        let d1 = self
            .da
            .as_slice()
            .iter()
            .zip(other.da.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let d2 = self
            .db
            .as_slice()
            .iter()
            .zip(other.db.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        d1.max(d2)
    }
}

/// SGD hyperparameters. `batch = 0` means full batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Hyperparams {
    pub fn new(lr: f64, steps: usize, batch: usize) -> Result<Hyperparams> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "learning rate must be finite and > 0, got {lr}"
            )));
        }
        Ok(Hyperparams { lr, steps, batch })
    }
}

/// Analytic gradients for one example.
pub fn grad_adapter(
    adapter: &LowRankAdapter,
    x: &Vector,
    up: &UpstreamGradient,
) -> Result<AdapterGrads> {
    if x.len() != adapter.p_in() {
        return Err(CoreError::Dimension {
            op: "grad_adapter",
            left: format!("adapter p_in {}", adapter.p_in()),
            right: format!("x length {}", x.len()),
        });
    }
    if up.delta.len() != adapter.p_out() {
        return Err(CoreError::Dimension {
            op: "grad_adapter",
            left: format!("adapter p_out {}", adapter.p_out()),
            right: format!("delta length {}", up.delta.len()),
        });
    }
    let gamma = adapter.scaling();
    let bt_delta = adapter.b.matvec_t(&up.delta)?; // length r
    let ax = adapter.a.matvec(x)?; // length r
    let r = adapter.rank();
    let (p_in, p_out) = (adapter.p_in(), adapter.p_out());

    let mut da = vec![0.0; r * p_in];
    for k in 0..r {
        let coeff = gamma * bt_delta.get(k);
        for j in 0..p_in {
            da[k * p_in + j] = coeff * x.get(j);
        }
    }
    let mut db = vec![0.0; p_out * r];
    for i in 0..p_out {
        let coeff = gamma * up.delta.get(i);
        for k in 0..r {
            db[i * r + k] = coeff * ax.get(k);
        }
    }
    Ok(AdapterGrads {
        da: Matrix::new(r, p_in, da)?,
        db: Matrix::new(p_out, r, db)?,
    })
}

/// Analytic gradients summed over a batch of examples.
///
/// Columns of `xs` are inputs, columns of `deltas` the matching upstream
/// sensitivities. Averaging conventions live in the loss derivative, so this
/// is a plain sum: db = scaling * deltas (a xs)^T, da = scaling * b^T deltas xs^T.
pub fn grad_adapter_batch(
    adapter: &LowRankAdapter,
    xs: &Matrix,
    deltas: &Matrix,
) -> Result<AdapterGrads> {
    if xs.rows() != adapter.p_in() || deltas.rows() != adapter.p_out() || xs.cols() != deltas.cols()
    {
        return Err(CoreError::Dimension {
            op: "grad_adapter_batch",
            left: format!("xs {}x{}", xs.rows(), xs.cols()),
            right: format!("deltas {}x{}", deltas.rows(), deltas.cols()),
        });
    }
    let gamma = adapter.scaling();
    let down = adapter.a.matmul(xs)?; // r x m
    let db = matmul_abt(deltas, &down)?.scale(gamma); // p_out x r
    let bt_deltas = matmul_atb(&adapter.b, deltas)?; // r x m
    let da = matmul_abt(&bt_deltas, xs)?.scale(gamma); // r x p_in
    Ok(AdapterGrads { da, db })
}

/// a * b^T without materializing the transpose.
pub(crate) fn matmul_abt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(CoreError::Dimension {
            op: "matmul_abt",
            left: format!("{}x{}", a.rows(), a.cols()),
            right: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    let mut out = vec![0.0; a.rows() * b.rows()];
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            let brow = b.row(j);
            out[i * b.rows() + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Matrix::new(a.rows(), b.rows(), out)
}

/// a^T * b without materializing the transpose.
pub(crate) fn matmul_atb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(CoreError::Dimension {
            op: "matmul_atb",
            left: format!("{}x{}", a.rows(), a.cols()),
            right: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    let mut out = vec![0.0; a.cols() * b.cols()];
    for k in 0..a.rows() {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let o = &mut out[i * b.cols()..(i + 1) * b.cols()];
            for (j, &bkj) in brow.iter().enumerate() {
                o[j] += aki * bkj;
            }
        }
    }
    Matrix::new(a.cols(), b.cols(), out)
}

/// Central-difference gradients of `loss_fn` over the adapter contribution.
///
/// `loss_fn` maps the adapter output (the increment vector) to a scalar; the
/// frozen base term is an additive constant in the forward pass, so any loss
/// of the full output can be rephrased this way. Each parameter of `a` and
/// `b` is perturbed by +/- h.
pub fn finite_diff_grad(
    adapter: &LowRankAdapter,
    x: &Vector,
    loss_fn: &dyn Fn(&Vector) -> f64,
    h: f64,
) -> Result<AdapterGrads> {
    if !(h.is_finite() && h > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "finite-difference step must be finite and > 0, got {h}"
        )));
    }
    let eval = |adapter: &LowRankAdapter| -> Result<f64> {
        let loss = loss_fn(&adapter.increment(x)?);
        if !loss.is_finite() {
            return Err(CoreError::NonFinite {
                op: "finite_diff_grad",
                detail: format!("loss = {loss}"),
            });
        }
        Ok(loss)
    };
    let perturb_a = |base: &LowRankAdapter, k: usize, j: usize, eps: f64| -> Result<LowRankAdapter> {
        let mut data = base.a.as_slice().to_vec();
        data[k * base.p_in() + j] += eps;
        LowRankAdapter::from_parts(
            Matrix::new(base.rank(), base.p_in(), data)?,
            base.b.clone(),
            base.scaling(),
        )
    };
    let perturb_b = |base: &LowRankAdapter, i: usize, k: usize, eps: f64| -> Result<LowRankAdapter> {
        let mut data = base.b.as_slice().to_vec();
        data[i * base.rank() + k] += eps;
        LowRankAdapter::from_parts(
            base.a.clone(),
            Matrix::new(base.p_out(), base.rank(), data)?,
            base.scaling(),
        )
    };

    let (r, p_in, p_out) = (adapter.rank(), adapter.p_in(), adapter.p_out());
    let mut da = vec![0.0; r * p_in];
    for k in 0..r {
        for j in 0..p_in {
            let plus = eval(&perturb_a(adapter, k, j, h)?)?;
            let minus = eval(&perturb_a(adapter, k, j, -h)?)?;
            da[k * p_in + j] = (plus - minus) / (2.0 * h);
        }
    }
    let mut db = vec![0.0; p_out * r];
    for i in 0..p_out {
        for k in 0..r {
            let plus = eval(&perturb_b(adapter, i, k, h)?)?;
            let minus = eval(&perturb_b(adapter, i, k, -h)?)?;
            db[i * r + k] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(AdapterGrads {
        da: Matrix::new(r, p_in, da)?,
        db: Matrix::new(p_out, r, db)?,
    })
}

/// One SGD step on the adapter; returns the updated adapter.
///
/// `freeze_a` holds the down-projection fixed, reproducing the first-step
/// regime where only `b` moves from its zero initialization.
pub fn sgd_step(
    adapter: &LowRankAdapter,
    grads: &AdapterGrads,
    lr: f64,
    freeze_a: bool,
) -> Result<LowRankAdapter> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    let b = adapter.b.add_scaled(&grads.db, -lr)?;
    let a = if freeze_a {
        adapter.a.clone()
    } else {
        adapter.a.add_scaled(&grads.da, -lr)?
    };
    LowRankAdapter::from_parts(a, b, adapter.scaling())
}

/// Aggregate outcome of randomized analytic-vs-numeric gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    /// Parameters whose analytic and central-difference gradients disagreed
    /// beyond tolerance.
    pub failures: usize,
    /// Worst disagreement as a fraction of the floored scale: the maximum of
    /// |analytic - numeric| / (ABS_FLOOR / REL_TOL + max(|analytic|, |numeric|)),
    /// so values below REL_TOL mean every parameter passed.
    pub max_rel_error: f64,
}

/// Tolerances for [`gradcheck`]: central differences with h = 1e-5, relative
/// tolerance 1e-6 with an absolute floor of 1e-9.
pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_REL_TOL: f64 = 1e-6;
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-9;

/// Run `trials` randomized gradient checks over ranks {1, 2, 4, 8} and
/// widths 2..=32, alternating a linear and a quadratic loss.
pub fn gradcheck(trials: usize, seed: crate::linalg::RngSeed) -> Result<GradcheckReport> {
    use crate::linalg::{gaussian_matrix_from, gaussian_vector_from, SeededRng};
    let mut rng = SeededRng::new(seed);
    let mut failures = 0usize;
    let mut max_rel = 0.0f64;
    for trial in 0..trials {
        let p_in = 2 + rng.below(31);
        let p_out = 2 + rng.below(31);
        let allowed: Vec<usize> = [1usize, 2, 4, 8]
            .into_iter()
            .filter(|&r| r <= p_in.min(p_out))
            .collect();
        let r = allowed[rng.below(allowed.len())];
        let scaling = 0.25 + 1.75 * rng.uniform();
        // fan-in scaled parameters keep losses O(1), the regime training
        // actually runs in; huge losses would drown the h=1e-5 differences
        // in rounding noise
        let a = gaussian_matrix_from(r, p_in, 0.0, 1.0 / (p_in as f64).sqrt(), &mut rng)?;
        let b = gaussian_matrix_from(p_out, r, 0.0, 1.0 / (r as f64).sqrt(), &mut rng)?;
        let adapter = LowRankAdapter::from_parts(a, b, scaling)?;
        let x = gaussian_vector_from(p_in, 0.0, 1.0, &mut rng)?;

        let (analytic, numeric) = if trial % 2 == 0 {
            // linear loss: dL/dw is the fixed coefficient vector
            let delta = gaussian_vector_from(p_out, 0.0, 1.0, &mut rng)?;
            let analytic = grad_adapter(&adapter, &x, &UpstreamGradient::new(delta.clone()))?;
            let loss = move |w: &Vector| w.dot(&delta).expect("shapes match");
            let numeric = finite_diff_grad(&adapter, &x, &loss, GRADCHECK_H)?;
            (analytic, numeric)
        } else {
            // quadratic loss: dL/dw = w - target at the current parameters
            let target = gaussian_vector_from(p_out, 0.0, 1.0, &mut rng)?;
            let w0 = adapter.increment(&x)?;
            let delta = w0.add(&target.scale(-1.0))?;
            let analytic = grad_adapter(&adapter, &x, &UpstreamGradient::new(delta))?;
            let loss = move |w: &Vector| {
                let d = w.add(&target.scale(-1.0)).expect("shapes match");
                0.5 * d.dot(&d).expect("shapes match")
            };
            let numeric = finite_diff_grad(&adapter, &x, &loss, GRADCHECK_H)?;
            (analytic, numeric)
        };

        for (g, n) in analytic
            .da
            .as_slice()
            .iter()
            .zip(numeric.da.as_slice())
            .chain(analytic.db.as_slice().iter().zip(numeric.db.as_slice()))
        {
            let diff = (g - n).abs();
            let scale = g.abs().max(n.abs());
            if diff > GRADCHECK_ABS_FLOOR + GRADCHECK_REL_TOL * scale {
                failures += 1;
            }
            max_rel = max_rel.max(diff / (GRADCHECK_ABS_FLOOR / GRADCHECK_REL_TOL + scale));
        }
    }
    Ok(GradcheckReport {
        trials,
        failures,
        max_rel_error: max_rel,
    })
}

/// Closed-form adapter output after one SGD step on `b` from zero init.
///
/// Starting from b = 0, the gradient step at input `x_t` with sensitivities
/// `delta` sets b = -lr * scaling * delta (a x_t)^T; feeding `x_t1` through
/// the updated adapter then yields
///
///   w[i] = -lr * delta[i] * scaling^2 * (a x_t) . (a x_t1)
///
/// which is what this evaluates directly. It must agree with the composed
/// init -> grad -> step -> increment pipeline to floating-point accuracy.
pub fn two_step_increment(
    a: &Matrix,
    x_t: &Vector,
    x_t1: &Vector,
    lr: f64,
    delta: &Vector,
    scaling: f64,
) -> Result<Vector> {
    let u = a.matvec(x_t)?;
    let v = a.matvec(x_t1)?;
    let s = u.dot(&v)?;
    let coeff = -lr * scaling * scaling * s;
    Ok(delta.scale(coeff))
}
