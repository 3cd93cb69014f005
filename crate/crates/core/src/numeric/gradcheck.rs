//! Finite-difference validation of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// `(input, coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
}

fn eval<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars = points
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the analytic gradient of scalar `f` at `point` against central
/// differences and returns the worst relative error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        epsilon,
        ..Default::default()
    };
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), &opts).map(|r| r.max_relative_error)
}

/// Multi-input variant of [`grad_check`]. Coordinates where the left and
/// right one-sided slopes disagree are reported as
/// [`Error::NonSmoothPoint`] instead of being scored.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eps = opts.epsilon;
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("epsilon {eps:e} outside [1e-7, 1e-3]")));
    }

    let mut g = Graph::new();
    let vars = points
        .iter()
        .map(|p| g.input(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    let f0 = g.value(out).item()?;
    let grads = g.backward(out)?;
    // a central difference cannot resolve anything finer than the roundoff
    // in f itself, so disagreements below this bound are not scored
    let roundoff = 16.0 * f64::EPSILON * f0.abs().max(1.0) / eps;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: 0,
        worst: (0, 0),
    };
    for (pi, point) in points.iter().enumerate() {
        let analytic = grads
            .wrt(vars[pi])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; point.numel()]);
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < point.numel() => {
                let mut c = sample(&mut rng, point.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..point.numel()).collect(),
        };
        for idx in coords {
            let shifted = |delta: f64| -> Result<f64> {
                let mut pts = points.to_vec();
                pts[pi].data_mut()[idx] += delta;
                eval(&f, &pts)
            };
            let fp = shifted(eps)?;
            let fm = shifted(-eps)?;
            let right = (fp - f0) / eps;
            let left = (f0 - fm) / eps;
            let gap = (right - left).abs();
            if gap > 1e-6 && gap > 1e-2 * right.abs().max(left.abs()) {
                // curvature makes the gap shrink with the step; a kink does not
                let half_gap = ((shifted(eps / 2.0)? - f0) - (f0 - shifted(-eps / 2.0)?)).abs() / (eps / 2.0);
                if half_gap > 0.75 * gap {
                    return Err(Error::NonSmoothPoint { index: idx, left, right });
                }
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[idx];
            let diff = (a - numeric).abs();
            let rel = if diff <= roundoff {
                0.0
            } else {
                diff / a.abs().max(numeric.abs()).max(1e-8)
            };
            report.coords_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, idx);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.square(v)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn l1_kink_is_reported() {
        let x = Tensor::new(vec![3], vec![1.0, 0.0, -2.0]).unwrap();
        let res = grad_check(
            |g, v| {
                let a = g.abs(v)?;
                g.sum(a)
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonSmoothPoint { index: 1, .. })), "{res:?}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_epsilon() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|g, v| g.square(v), &x, 1e-5).is_err());
        assert!(grad_check(|g, v| g.sum(v), &x, 1e-1).is_err());
    }
}
