//! Finite-difference verification of reverse-mode gradients.
//!
//! The check runs two independent routes: analytic gradients from one taped
//! backward pass, and a central difference per parameter coordinate from
//! value-only forward passes. The builder closure must be a pure function of
//! the parameter values (fix any dropout mask or batch statistics before
//! checking).

use super::{NumError, Tape, Tensor, Var};

/// Maximum relative error between analytic and central-difference gradients
/// over every coordinate of `params`. `build` constructs the scalar objective
/// on a fresh tape from leaves that mirror `params` in order.
///
/// Relative error per coordinate is `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<F>(params: &[Tensor], h: f64, build: F) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumError::Domain {
            op: "grad_check",
            detail: format!("step size must lie in [1e-7, 1e-3], got {h}"),
        });
    }
    if params.iter().any(|p| !p.requires_grad()) {
        return Err(NumError::Domain {
            op: "grad_check",
            detail: "every checked parameter must require gradients".into(),
        });
    }

    // Analytic route.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let root = build(&mut tape, &vars)?;
    if tape.value(root)?.len() != 1 {
        return Err(NumError::NonScalarRoot { shape: tape.shape_of(root)?.to_vec() });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(vars.iter())
        .map(|(p, v)| grads.of(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    // Finite-difference route: evaluate with frozen copies so no nodes are
    // recorded during the probe passes.
    let eval = |probe: &[Tensor]| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe
            .iter()
            .map(|p| {
                let mut frozen = p.clone();
                frozen.set_requires_grad(false);
                tape.leaf(&frozen)
            })
            .collect();
        let root = build(&mut tape, &vars)?;
        tape.scalar_value(root)
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.len() {
            let base = param.data()[ci];
            let mut bumped = param.data().to_vec();
            bumped[ci] = base + h;
            probe[pi].set_data(&bumped)?;
            let plus = eval(&probe)?;
            bumped[ci] = base - h;
            probe[pi].set_data(&bumped)?;
            let minus = eval(&probe)?;
            bumped[ci] = base;
            probe[pi].set_data(&bumped)?;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ci];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
