//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many coordinates per parameter tensor (sampled).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Parameters whose name starts with one of these are not checked.
    pub skip_prefixes: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            skip_prefixes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max of |analytic - numeric| / max(1, |analytic|).
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate where the max was reached.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Checks the gradient of `f` with respect to `params` by central differences.
///
/// Returns the maximum relative error over all coordinates.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let opts = GradCheckOptions {
        epsilon,
        ..Default::default()
    };
    let names: Vec<String> = (0..params.len()).map(|i| format!("param[{i}]")).collect();
    grad_check_named(f, &names, params, &opts).map(|r| r.max_rel_error)
}

pub fn grad_check_named<F>(
    f: F,
    names: &[String],
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        ensure_finite_scalar(&loss, "loss at base point")?;
        tape.grad(loss, &vars, false)?
            .iter()
            .map(|g| (*g.value()).clone())
            .collect::<Vec<_>>()
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.leaf(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    finite_difference(names, params.to_vec(), &analytic, opts, eval)
}

/// Compares reverse-mode gradients of `f` against central differences of
/// `reference`, for objectives whose stop-gradient operands must be held at
/// their base-point values while perturbing.
pub fn grad_check_surrogate<F, G>(
    f: F,
    reference: G,
    names: &[String],
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    G: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        ensure_finite_scalar(&loss, "loss at base point")?;
        let reference_value = reference(&tape, &vars)?.item();
        if (reference_value - loss.item()).abs() > 1e-9 * loss.item().abs().max(1.0) {
            return Err(Error::Contract(
                "reference disagrees with the objective at the base point".into(),
            ));
        }
        tape.grad(loss, &vars, false)?
            .iter()
            .map(|g| (*g.value()).clone())
            .collect::<Vec<_>>()
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.leaf(p.clone())).collect();
        Ok(reference(&tape, &vars)?.item())
    };
    finite_difference(names, params.to_vec(), &analytic, opts, eval)
}

/// Gradient check over every parameter of a store, bound as trainable.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let bound = Bound::new(&tape, store, true);
        let loss = f(&bound)?;
        ensure_finite_scalar(&loss, "loss at base point")?;
        let grads = tape.backward(loss)?;
        store
            .ids()
            .map(|id| bound.grad_of(id, &grads))
            .collect::<Vec<_>>()
    };
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
    let eval = |values: &[Tensor]| -> Result<f64> {
        let perturbed = store.with_values(values.to_vec())?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &perturbed, true);
        Ok(f(&bound)?.item())
    };
    finite_difference(&names, store.values().to_vec(), &analytic, opts, eval)
}

fn ensure_finite_scalar(v: &Var<'_>, what: &str) -> Result<()> {
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "{what}: function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

fn finite_difference(
    names: &[String],
    mut values: Vec<Tensor>,
    analytic: &[Tensor],
    opts: &GradCheckOptions,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::Contract(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }
    let eps = opts.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        if opts
            .skip_prefixes
            .iter()
            .any(|p| name.starts_with(p.as_str()))
        {
            continue;
        }
        let n = values[pi].numel();
        if !analytic[pi].is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of `{name}`")));
        }
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + eps;
            let plus = eval(&values)?;
            values[pi].data_mut()[j] = orig - eps;
            let minus = eval(&values)?;
            values[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while perturbing `{name}`[{j}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let params = vec![
            Tensor::new(vec![2, 2], vec![0.3, -0.8, 0.1, 0.9]).unwrap(),
            Tensor::vector(&[0.5, -0.25]),
        ];
        let err = grad_check(
            |_, p| p[0].square().sum().add(p[1].square().sum()),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn huber_gradient_at_half() {
        let err = grad_check(
            |t, p| super::super::tape::huber(p[0], t.constant(Tensor::scalar(0.0)), 1.0),
            &[Tensor::scalar(0.5)],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8);
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let r = grad_check(|_, p| Ok(p[0].sum()), &[Tensor::scalar(1.0)], 1e-1);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_names_the_parameter() {
        let opts = GradCheckOptions::default();
        let r = grad_check_named(
            |t, p| {
                // finite at the base point, infinite once perturbed
                let v = p[0].item();
                if v == 1.0 {
                    Ok(p[0].sum())
                } else {
                    Ok(t.scalar(f64::INFINITY).add(p[0].sum())?)
                }
            },
            &["weights".to_string()],
            &[Tensor::scalar(1.0)],
            &opts,
        );
        match r {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("weights"), "{msg}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
