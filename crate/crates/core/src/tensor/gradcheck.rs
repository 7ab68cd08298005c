use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over elements of |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn scalar_of(tape: &Tape<f64>, out: Var, context: &str) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            format!("function must return a scalar, got shape {:?}", v.shape()),
        ));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite {
            context: context.to_string(),
            index: 0,
        });
    }
    Ok(s)
}

/// Checks the tape gradient of a scalar function `f` at `x` against central
/// differences with step `h`, in double precision.
///
/// `f` receives a fresh tape and the leaf holding `x` (or a perturbed copy) and
/// must return a scalar variable.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    if let Some(i) = x.first_non_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_check input".into(),
            index: i,
        });
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad(true));
    let out = f(&mut tape, leaf)?;
    scalar_of(&tape, out, "finite_diff_check value")?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<f64> = match grads.take(leaf) {
        Some(g) => g.into_data(),
        // output does not depend on x
        None => vec![0.0; x.numel()],
    };
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "analytic gradient".into(),
            index: i,
        });
    }

    let eval = |data: Vec<f64>, idx: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out, "perturbed value").map_err(|e| match e {
            Error::NonFinite { context, .. } => Error::NonFinite {
                context,
                index: idx,
            },
            other => other,
        })
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let d = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - d).abs() / 1f64.max(a.abs()).max(d.abs());
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(d);
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
