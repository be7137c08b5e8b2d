use super::tape::{Parameter, Tape, TensorId};
use crate::error::{Error, Result};
use crate::rng;

/// Settings for [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FdCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the max relative error.
    pub tolerance: f64,
    /// Cap on coordinates checked per parameter (seeded sample); `None`
    /// checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Expected ratio analytic/numeric. `-1.0` checks a composition whose
    /// entire gradient path runs through a reversal layer, where the
    /// analytic gradient is the negation of what finite differences see.
    pub sign: f64,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        FdCheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords_per_param: None,
            seed: 0,
            sign: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub per_param: Vec<FdParamReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compare analytic gradients of a scalar-valued build against central
/// finite differences, parameter by parameter.
///
/// `build` receives a fresh double-precision tape plus one bound leaf per
/// parameter (same order as `params`) and returns the scalar loss node.
/// It must be deterministic; two differing evaluations are an error.
pub fn finite_difference_check<F>(
    params: &[Parameter],
    build: F,
    cfg: &FdCheckConfig,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    finite_difference_check_with_oracle(params, &build, &build, cfg)
}

/// Like [`finite_difference_check`], but differences a separate scalar
/// function. Needed when the recorded graph routes through a reversal
/// layer: the training gradient is then not the gradient of the loss value
/// itself, and the matching oracle is the surrogate whose adversarial term
/// enters with a flipped sign.
pub fn finite_difference_check_with_oracle<F, G>(
    params: &[Parameter],
    analytic_build: &F,
    value_build: &G,
    cfg: &FdCheckConfig,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
    G: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if cfg.step <= 0.0 {
        return Err(Error::config("step", "must be positive"));
    }

    let eval = |ps: &[Parameter]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ps.iter().map(|p| tape.param(p)).collect::<Result<_>>()?;
        let loss = value_build(&mut tape, &ids)?;
        if tape.tensor(loss).numel() != 1 {
            return Err(Error::autodiff("finite_difference_check: loss not scalar"));
        }
        Ok(tape.values(loss)[0])
    };

    let v0 = eval(params)?;
    let v1 = eval(params)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::autodiff(format!(
            "finite_difference_check: non-deterministic function ({v0} vs {v1})"
        )));
    }

    // Analytic gradients from a single recorded pass.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p)).collect::<Result<_>>()?;
        let loss = analytic_build(&mut tape, &ids)?;
        tape.backward(loss)?;
        ids.iter()
            .zip(params)
            .map(|(&id, p)| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect()
    };

    let mut work: Vec<Parameter> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut global_max: f64 = 0.0;

    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if p.numel() > k => {
                let mut rng = rng::substream(cfg.seed, "fd-coords", pi as u64);
                rand::seq::index::sample(&mut rng, p.numel(), k).into_vec()
            }
            _ => (0..p.numel()).collect(),
        };

        let mut max_rel: f64 = 0.0;
        for &c in &coords {
            let orig = work[pi].values[c];
            work[pi].values[c] = orig + cfg.step;
            let plus = eval(&work)?;
            work[pi].values[c] = orig - cfg.step;
            let minus = eval(&work)?;
            work[pi].values[c] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel = (analytic[pi][c] - cfg.sign * numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        global_max = global_max.max(max_rel);
        per_param.push(FdParamReport {
            name: p.name.clone(),
            max_rel_err: max_rel,
            coords_checked: coords.len(),
        });
    }

    Ok(FdReport {
        per_param,
        max_rel_err: global_max,
        tolerance: cfg.tolerance,
        pass: global_max <= cfg.tolerance,
    })
}
