//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Gradients smaller than this in magnitude are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index, analytic and numeric value at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `f` against central differences.
///
/// `f` is called once for the analytic pass and twice per checked coordinate;
/// it must be deterministic (rebuild any random stream from a fixed seed).
pub fn finite_difference_check<F>(mut f: F, params: &mut ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |f: &mut F, p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, p)?;
        let v = g.value(root);
        if v.numel() != 1 {
            return Err(Error::shape("finite_difference_check", "objective must be scalar"));
        }
        Ok(v.item())
    };

    params.zero_grads();
    {
        let mut g = Graph::new();
        let root = f(&mut g, params)?;
        g.backward(root, params)?;
    }

    let mut pick = SeedStream::new(opts.seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let n = params.value(&name)?.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c = pick.permutation(n);
                c.truncate(m);
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for &i in &coords {
            let analytic = params.grad(&name)?.data()[i];
            let orig = params.value(&name)?.data()[i];
            params.get_mut(&name)?.value.data_mut()[i] = orig + opts.step;
            let plus = eval(&mut f, params)?;
            params.get_mut(&name)?.value.data_mut()[i] = orig - opts.step;
            let minus = eval(&mut f, params)?;
            params.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic, numeric, opts.abs_floor);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((i, analytic, numeric));
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}
