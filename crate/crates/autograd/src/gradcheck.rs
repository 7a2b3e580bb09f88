//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterSet};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub per_param: usize,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is zero are judged by absolute error.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Coordinates over tolerance are measured again with `step / refine`
    /// when set. A kink (such as the L1 norm at zero) lying within `step`
    /// of the point spoils only the coarse estimate.
    pub refine: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            per_param: 8,
            floor: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            refine: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Coordinate>,
    pub tolerance: f64,
    /// Coordinates judged on the refined step.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of `loss` against central differences on a
/// random subsample of parameter coordinates. Mismatches are reported in
/// the returned report rather than raised.
///
/// `loss` must be deterministic: it is re-run twice per sampled coordinate.
pub fn finite_diff_check<E, F>(
    params: &mut ParameterSet,
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    E: From<Error>,
    F: for<'a> Fn(&'a Tape<'a>) -> Result<Var<'a>, E>,
{
    let (base_loss, analytic) = {
        let tape = Tape::new(params);
        let l = loss(&tape)?;
        let value = l.item()?;
        let grads = tape.backward(l)?;
        let analytic: Vec<Option<Vec<f64>>> = params
            .ids()
            .map(|id| grads.get(id).map(|g| g.data().to_vec()))
            .collect();
        (value, analytic)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.value(id).len();
        if n <= opts.per_param {
            coords.extend((0..n).map(|i| (id, i)));
        } else {
            let mut picked = sample(&mut rng, n, opts.per_param).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|i| (id, i)));
        }
    }

    let mut report = GradCheckReport {
        loss: base_loss,
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        tolerance: opts.tolerance,
        refined: 0,
    };
    for (id, index) in coords {
        let analytic_value = analytic[id.index()].as_ref().map_or(0.0, |g| g[index]);
        let mut numeric = central_difference(params, &loss, id, index, opts.step)?;
        let mut rel_err = relative_error(analytic_value, numeric, opts.floor);
        if let Some(factor) = opts.refine.filter(|_| rel_err >= opts.tolerance) {
            numeric = central_difference(params, &loss, id, index, opts.step / factor)?;
            rel_err = relative_error(analytic_value, numeric, opts.floor);
            report.refined += 1;
        }
        report.checked += 1;
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(Coordinate {
                param: params.name(id).to_string(),
                index,
                analytic: analytic_value,
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}

fn central_difference<E, F>(params: &mut ParameterSet, loss: &F, id: ParamId, index: usize, step: f64) -> Result<f64, E>
where
    E: From<Error>,
    F: for<'a> Fn(&'a Tape<'a>) -> Result<Var<'a>, E>,
{
    let original = params.value(id).data()[index];
    params.value_mut(id).data_mut()[index] = original + step;
    let plus = eval(params, loss);
    params.value_mut(id).data_mut()[index] = original - step;
    let minus = eval(params, loss);
    params.value_mut(id).data_mut()[index] = original;
    Ok((plus? - minus?) / (2.0 * step))
}

fn eval<E, F>(params: &ParameterSet, loss: &F) -> Result<f64, E>
where
    E: From<Error>,
    F: for<'a> Fn(&'a Tape<'a>) -> Result<Var<'a>, E>,
{
    let tape = Tape::new(params);
    let l = loss(&tape)?;
    Ok(l.item()?)
}
