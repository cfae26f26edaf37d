//! Central finite-difference checks of analytic gradients, in `f64`.

use rand::seq::index::sample;
use rand::Rng;

use super::{Mode, Sequential};
use crate::error::Result;

/// Relative step: `h = STEP * max(|theta|, 1)`.
pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Label of the entry with the largest error.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error && !other.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic` with central differences of `loss` at every
/// coordinate of `theta`.
pub fn check_function(
    label: &str,
    theta: &mut [f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len());
    let mut report = GradCheckReport::default();
    for i in 0..theta.len() {
        let orig = theta[i];
        let h = STEP * orig.abs().max(1.0);
        theta[i] = orig + h;
        let up = loss(theta);
        theta[i] = orig - h;
        let down = loss(theta);
        theta[i] = orig;
        report.record(|| format!("{label}[{i}]"), analytic[i], (up - down) / (2.0 * h));
    }
    report
}

/// Scalar objective on a network output: returns the loss and its gradient
/// with respect to the output.
pub type OutputLoss<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

fn run_chain(nets: &[&mut Sequential<f64>], x: &[f64], batch: usize, loss: &OutputLoss<'_>) -> Result<f64> {
    let mut a = x.to_vec();
    for net in nets {
        a = net.forward_pass(a, batch, Mode::Train, false)?.0;
    }
    Ok(loss(&a)?.0)
}

/// Checks every trainable parameter (or a random subset of at most
/// `max_per_tensor` entries per tensor) and, optionally, the input of a chain
/// of networks run in train mode, against central differences of `loss`.
pub fn check_chain(
    nets: &mut [&mut Sequential<f64>],
    x: &[f64],
    batch: usize,
    loss: &OutputLoss<'_>,
    check_input: bool,
    max_per_tensor: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let mut tapes = Vec::with_capacity(nets.len());
    let mut a = x.to_vec();
    for net in nets.iter_mut() {
        net.zero_grad();
        let (out, tape) = net.forward_pass(a, batch, Mode::Train, true)?;
        tapes.push(tape);
        a = out;
    }
    let (_, mut g) = loss(&a)?;
    for (i, net) in nets.iter_mut().enumerate().rev() {
        let need = i > 0 || check_input;
        match net.backward(&tapes[i], g, need)? {
            Some(next) => g = next,
            None => {
                g = Vec::new();
                break;
            }
        }
    }
    let input_grad = g;

    let mut report = GradCheckReport::default();
    for ni in 0..nets.len() {
        for pi in 0..nets[ni].params().len() {
            let p = &nets[ni].params()[pi];
            if !p.trainable() {
                continue;
            }
            let n = p.tensor.len();
            let analytic: Vec<f64> = p.tensor.grad().map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
            let name = p.name.clone();
            let idx: Vec<usize> = match max_per_tensor {
                Some(k) if k < n => {
                    let mut v = sample(rng, n, k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..n).collect(),
            };
            for j in idx {
                let orig = nets[ni].params()[pi].tensor.values()[j];
                let h = STEP * orig.abs().max(1.0);
                nets[ni].params_mut()[pi].tensor.values_mut()[j] = orig + h;
                let up = run_chain(nets, x, batch, loss)?;
                nets[ni].params_mut()[pi].tensor.values_mut()[j] = orig - h;
                let down = run_chain(nets, x, batch, loss)?;
                nets[ni].params_mut()[pi].tensor.values_mut()[j] = orig;
                report.record(|| format!("{name}[{j}]"), analytic[j], (up - down) / (2.0 * h));
            }
        }
    }
    if check_input {
        let mut xs = x.to_vec();
        let r = check_function("input", &mut xs, &input_grad, |xv| {
            run_chain(nets, xv, batch, loss).expect("shapes already validated")
        });
        report.merge(r);
    }
    Ok(report)
}
