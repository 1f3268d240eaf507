//! Central finite-difference checking of tape gradients.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of a probe run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a small absolute floor, so entries whose true
/// derivative is ~0 are judged on absolute agreement.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences at `probes` randomly chosen input coordinates.
///
/// `f` receives a fresh tape and the inputs bound as leaves, and must return
/// a scalar.
pub fn check<F>(inputs: &[Tensor], probes: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.iter().cloned().map(Tensor::trainable).collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| grads.for_tensor(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("gradient check with no inputs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        probes,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work = inputs.clone();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + FD_STEP;
        let up = eval(&work)?;
        work[which].data_mut()[flat] = orig - FD_STEP;
        let down = eval(&work)?;
        work[which].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[which][flat];
        let e = rel_err(a, numeric);
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((which, flat, a, numeric));
        }
    }
    Ok(report)
}
