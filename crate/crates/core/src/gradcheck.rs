//! Central finite differences and a tape-vs-oracle gradient checker.

use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_coords(&mut f, x, step, &coords)?;
    Tensor::new(x.shape(), g)
}

fn finite_diff_coords<F>(f: &mut F, x: &Tensor, step: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(invalid!("finite-difference step must be positive, got {step}"));
    }
    let mut out = alloc::vec![0.0; x.numel()];
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        out[i] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

/// Gradient magnitudes below this are treated as zero when normalizing.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Relative error `max|a - b| / max(max|a|, max|b|, SCALE_FLOOR)` over the
/// given coordinates.
pub fn relative_error(a: &[f64], b: &[f64], coords: &[usize]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = SCALE_FLOOR;
    for &i in coords {
        diff = diff.max(libm::fabs(a[i] - b[i]));
        scale = scale.max(libm::fabs(a[i])).max(libm::fabs(b[i]));
    }
    diff / scale
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on probed coordinates per input; `None` probes all.
    pub max_coords: Option<usize>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_coords: Some(64),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Worst relative error over all inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub probed: usize,
    pub passed: bool,
}

/// Compare the tape gradient of `build` against central differences.
///
/// `build` receives a tape plus one leaf per input and returns a scalar. The
/// differenced evaluations replay the stop-gradient values and discrete
/// choices of the base evaluation, so the oracle differentiates the same
/// surrogate as the backward pass.
pub fn check<B>(inputs: &[Tensor], build: B, cfg: CheckConfig, rng: &mut Rng) -> Result<CheckReport>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::recording();
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|t| tape.try_leaf(t.clone()))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;
    let frozen = Rc::new(tape.frozen());

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probed = 0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(leaves[k]);
        let coords = match cfg.max_coords {
            Some(m) if m < x.numel() => {
                let mut c = rng.choose_distinct(x.numel(), m);
                c.sort_unstable();
                c
            }
            _ => (0..x.numel()).collect(),
        };
        let mut eval = |probe: &Tensor| -> Result<f64> {
            let mut t = Tape::replaying(frozen.clone());
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.try_leaf(if j == k { probe.clone() } else { v.clone() }))
                .collect::<Result<_>>()?;
            let o = build(&mut t, &vars)?;
            Ok(t.item(o))
        };
        let numeric = finite_diff_coords(&mut eval, x, cfg.step, &coords)?;
        per_input.push(relative_error(analytic.data(), &numeric, &coords));
        probed += coords.len();
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(CheckReport {
        max_rel_error,
        per_input,
        probed,
        passed: max_rel_error <= cfg.tolerance,
    })
}
