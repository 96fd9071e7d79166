use super::{Graph, ParamId, ParameterStore, Scalar, Var};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// How numeric derivatives are estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdMethod {
    /// `(f(θ+ε) - f(θ-ε)) / 2ε`.
    Central { epsilon: f64 },
    /// Ridders' polynomial extrapolation of central differences over a
    /// shrinking step sequence starting at `initial_step`; each coordinate
    /// keeps the extrapolant with the smallest internal error estimate.
    Ridders { initial_step: f64 },
}

/// Checks every coordinate of every parameter in `store` with central
/// differences of step `epsilon`.
///
/// `build` must construct the loss deterministically from the store (no
/// training-mode dropout unless its seed is fixed inside `build`).
pub fn finite_difference_check<F, B>(
    store: &mut ParameterStore<F>,
    epsilon: f64,
    build: B,
) -> Result<GradCheckReport>
where
    F: Scalar,
    B: Fn(&ParameterStore<F>) -> Result<(Graph<F>, Var)>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_difference_check_params(store, &ids, FdMethod::Central { epsilon }, build)
}

/// Like [`finite_difference_check`] but restricted to `ids` and with a
/// choice of estimator.
pub fn finite_difference_check_params<F, B>(
    store: &mut ParameterStore<F>,
    ids: &[ParamId],
    method: FdMethod,
    build: B,
) -> Result<GradCheckReport>
where
    F: Scalar,
    B: Fn(&ParameterStore<F>) -> Result<(Graph<F>, Var)>,
{
    store.zero_grads();
    let (g, loss) = build(store)?;
    g.backward(loss, store)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for &id in ids {
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];
            // Symmetric difference at step h, using the step actually representable.
            let mut central = |h: f64| -> Result<f64> {
                let h = F::from_f64(h);
                store.value_mut(id).data_mut()[k] = original + h;
                let plus = eval(&build, store)?;
                store.value_mut(id).data_mut()[k] = original - h;
                let minus = eval(&build, store)?;
                store.value_mut(id).data_mut()[k] = original;
                let step = (original + h).as_f64() - (original - h).as_f64();
                Ok((plus - minus) / step)
            };
            let numeric = match method {
                FdMethod::Central { epsilon } => central(epsilon)?,
                FdMethod::Ridders { initial_step } => ridders(central, initial_step)?,
            };
            let analytic = store.grad(id).data()[k].as_f64();
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn eval<F, B>(build: &B, store: &ParameterStore<F>) -> Result<f64>
where
    F: Scalar,
    B: Fn(&ParameterStore<F>) -> Result<(Graph<F>, Var)>,
{
    let (g, loss) = build(store)?;
    Ok(g.value(loss).item().as_f64())
}

/// Ridders' extrapolation (step ratio 1.4, at most 10 steps, stopping once
/// the extrapolation error grows past twice the best seen).
fn ridders(mut central: impl FnMut(f64) -> Result<f64>, initial_step: f64) -> Result<f64> {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = initial_step;
    a[0][0] = central(h)?;
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = central(h)?;
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let errt = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if errt <= err {
                err = errt;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok(best)
}
