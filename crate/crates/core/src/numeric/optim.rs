//! Adam and the warmup / inverse-square-root learning-rate schedule.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global L2-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `names` is only used to label errors. Nothing is modified when any
/// gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    names: &[String],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() || params.len() != state.second_moment.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() || p.shape() != state.second_moment[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: name });
        }
    }

    let clip = match cfg.clip_norm {
        Some(max_norm) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|x| {
                    let v = x.to_f64_lossy();
                    v * v
                })
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let bc1 = T::c(1.0 - cfg.beta1.powi(t));
    let bc2 = T::c(1.0 - cfg.beta2.powi(t));
    let (lr, eps, clip) = (T::c(lr), T::c(cfg.eps), T::c(clip));

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
            let gi = gi * clip;
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Peak-normalised warmup then inverse-square-root decay:
/// `peak_lr * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: u64, warmup_steps: u64, peak_lr: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("lr_schedule: step must be >= 1"));
    }
    if warmup_steps == 0 {
        return Err(Error::invalid("lr_schedule: warmup_steps must be >= 1"));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    Ok(peak_lr * (s / w).min((w / s).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![x]).unwrap()
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut params = vec![Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap()];
        let before = params.clone();
        let grads = vec![Tensor::zeros(vec![2, 2])];
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &grads, &mut state, &[], 1e-2, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn descends_a_convex_quadratic() {
        let mut params = vec![scalar(3.0)];
        let mut state = OptimizerState::new(&params);
        let mut prev = 3.0;
        for _ in 0..50 {
            let grads = vec![scalar(1.0)];
            adam_step(&mut params, &grads, &mut state, &[], 0.05, &AdamConfig::default()).unwrap();
            let now = params[0].data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // f(p) = p^2 from p = 1, grad = 2p. Step 1 moves by exactly lr since
        // m_hat / sqrt(v_hat) = 1; step 2 by lr * 1.8947 / 1.90258.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut p_ref = 1.0_f64;
        let (mut m, mut v) = (0.0, 0.0);
        let mut trace = Vec::new();
        for t in 1..=2 {
            let g = 2.0 * p_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p_ref -= lr * mh / (vh.sqrt() + eps);
            trace.push(p_ref);
        }
        assert!((trace[0] - 0.9).abs() < 1e-8);
        assert!((trace[1] - 0.800_413).abs() < 1e-5, "{}", trace[1]);

        let mut params = vec![scalar(1.0)];
        let mut state = OptimizerState::new(&params);
        for expected in trace {
            let grads = vec![scalar(2.0 * params[0].data()[0])];
            adam_step(&mut params, &grads, &mut state, &[], lr, &AdamConfig::default()).unwrap();
            assert_eq!(params[0].data()[0], expected);
        }
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn rejects_non_finite_gradient_by_name() {
        let mut params = vec![scalar(1.0)];
        let mut state = OptimizerState::new(&params);
        let err = adam_step(
            &mut params,
            &[scalar(f64::NAN)],
            &mut state,
            &["decoder.w".to_string()],
            0.1,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("decoder.w"));
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut params = vec![Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap()];
            let mut state = OptimizerState::new(&params);
            for k in 0..5 {
                let g = Tensor::new(vec![3], vec![0.3 * k as f64, -1.0, 0.7]).unwrap();
                adam_step(&mut params, &[g], &mut state, &[], 1e-3, &AdamConfig::default()).unwrap();
            }
            (params, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_corners() {
        let (w, peak) = (100, 3.5e-4);
        assert_eq!(lr_schedule(w, w, peak).unwrap(), peak);
        assert!((lr_schedule(w / 4, w, peak).unwrap() - peak / 4.0).abs() < 1e-18);
        assert!((lr_schedule(4 * w, w, peak).unwrap() - peak / 2.0).abs() < 1e-18);
        assert!(lr_schedule(0, w, peak).is_err());
    }

    #[test]
    fn schedule_monotone_around_peak() {
        let w = 50;
        let lrs: Vec<f64> = (1..=200).map(|s| lr_schedule(s, w, 1.0).unwrap()).collect();
        for s in 1..w as usize {
            assert!(lrs[s] > lrs[s - 1]);
        }
        for s in w as usize..199 {
            assert!(lrs[s + 1] < lrs[s]);
        }
    }
}
