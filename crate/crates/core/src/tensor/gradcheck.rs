//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Cancellation allowance for central differences taken with a reduced step,
/// in units of the output's rounding error divided by the step.
pub const ROUNDING_ULPS: f64 = 64.0;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    /// Number of scalar partials compared.
    pub checked: usize,
    /// Partials left out because the probe straddled a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar-valued computation against central
/// differences for every element of every input.
///
/// `build` receives the inputs as gradient-tracked leaves and must return a
/// single-element output.
pub fn check<F>(name: &str, inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_impl(name, inputs, step, false, build)
}

/// Like [`check`], for piecewise-smooth functions (relu, max pooling, argmax
/// targets). A partial whose error exceeds [`KINK_SCREEN`] and whose one-sided
/// differences disagree is re-probed with up to three tenfold smaller steps.
/// While the one-sided gap keeps shrinking, the smallest-step difference is
/// compared; if it stops shrinking, the point sits on a kink and the partial
/// is counted in `skipped`.
pub fn check_piecewise<F>(name: &str, inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_impl(name, inputs, step, true, build)
}

/// Relative error above which a piecewise check probes for a kink.
pub const KINK_SCREEN: f64 = 1e-5;

/// One-sided gaps below this are rounding noise, not kinks.
const GAP_FLOOR: f64 = 1e-7;

fn check_impl<F>(name: &str, inputs: &[Tensor], step: f64, skip_kinks: bool, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let center = g.value(out).item()?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            probe[ti].data[ei] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data[ei] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data[ei] = orig;
            let mut numeric = (plus - minus) / (2.0 * step);
            let mut gap = ((plus - center) - (center - minus)).abs() / step;
            let mut h = step;
            if skip_kinks && relative_error(analytic[ti].data()[ei], numeric) > KINK_SCREEN {
                // shrink the step until the neighbourhood is smooth (a small
                // one-sided gap) or the gap stops shrinking (a kink at the point)
                let mut on_kink = false;
                for _ in 0..3 {
                    if gap <= (1e-4 * numeric.abs()).max(GAP_FLOOR) {
                        break;
                    }
                    h /= 10.0;
                    probe[ti].data[ei] = orig + h;
                    let p = eval(&probe)?;
                    probe[ti].data[ei] = orig - h;
                    let m = eval(&probe)?;
                    probe[ti].data[ei] = orig;
                    let narrow = ((p - center) - (center - m)).abs() / h;
                    if narrow > 0.5 * gap {
                        on_kink = true;
                        break;
                    }
                    numeric = (p - m) / (2.0 * h);
                    gap = narrow;
                }
                if on_kink {
                    skipped += 1;
                    continue;
                }
            }
            let a = analytic[ti].data()[ei];
            // a shrunken step amplifies cancellation error; allow for it
            let rounding = if h < step {
                ROUNDING_ULPS * f64::EPSILON * center.abs().max(1.0) / h
            } else {
                0.0
            };
            let e = ((a - numeric).abs() - rounding).max(0.0) / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked,
        skipped,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_sum_gradient_matches_differences() {
        let a = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let b = Tensor::new(vec![5], vec![1.1, 0.4, -0.9, 2.5, 0.05]).unwrap();
        let r = check("sum(a*b)", &[a, b], FD_STEP, |g, v| {
            let p = g.mul(v[0], v[1])?;
            g.sum(p, None)
        })
        .unwrap();
        assert_eq!(r.checked, 10);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn kinks_are_skipped_only_when_asked() {
        // relu probed at exactly its kink: the central difference is 1/2
        let x = Tensor::new(vec![2], vec![0.0, 0.7]).unwrap();
        let relu = |g: &mut Graph, v: &[Var]| {
            let r = g.relu(v[0])?;
            g.sum(r, None)
        };
        let strict = check("relu", &[x.clone()], FD_STEP, relu).unwrap();
        assert!(strict.max_rel_error > 0.5);
        let lenient = check_piecewise("relu", &[x], FD_STEP, relu).unwrap();
        assert_eq!((lenient.checked, lenient.skipped), (1, 1));
        assert!(lenient.max_rel_error < 1e-6);
    }

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);
    }
}
