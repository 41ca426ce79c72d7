use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoupled weight decay pulling a parameter toward `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decay {
    pub coef: f64,
    pub center: f64,
}

impl Decay {
    pub const NONE: Decay = Decay { coef: 0.0, center: 0.0 };

    pub fn toward_zero(coef: f64) -> Self {
        Self { coef, center: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// AdamW with per-parameter moment buffers keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self, path: &str) -> u64 {
        self.state.get(path).map_or(0, |s| s.step)
    }

    /// Updates every parameter that has a gradient:
    /// `p ← p − lr·m̂/(√v̂ + ε) − lr·decay·(p − center)`.
    /// Parameters whose gradient is `None` are left untouched. The whole
    /// step is rejected, before any parameter changes, if a gradient is
    /// not finite.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &[Option<&[f64]>],
        lr: f64,
        decay: impl Fn(&str) -> Decay,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} parameters and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((path, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient { path: path.clone() });
                }
            }
        }
        for ((path, p), g) in params.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let st = self.state.entry(path.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let d = decay(&path);
            for (((w, &gi), m), v) in p.values_mut().iter_mut().zip(g.iter()).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let pull = d.coef * (*w - d.center);
                *w -= lr * (mhat / (vhat.sqrt() + self.eps)) + lr * pull;
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps followed by cosine decay to zero at
/// `total` steps.
pub fn cosine_schedule(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Warmup length in steps for a stage of `epochs` epochs: the configured
/// warmup epochs, capped at half the stage.
pub fn warmup_steps(warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> usize {
    warmup_epochs.min(epochs / 2) * steps_per_epoch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..100).map(|s| cosine_schedule(1.0, s, 100, 10)).collect();
        assert!(lrs[0] < lrs[9]);
        assert!((lrs[9] - 1.0).abs() < 1e-12);
        assert!(lrs[10..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut opt = AdamW::new(0.9, 0.999, 1e-8);
        let mut t = Tensor::vector(vec![1.0]).unwrap();
        let g = [f64::NAN];
        let err = opt
            .step(vec![("layer0/weight".into(), &mut t)], &[Some(&g[..])], 0.1, |_| Decay::NONE)
            .unwrap_err();
        assert!(err.to_string().contains("layer0/weight"));
        assert_eq!(t.values(), &[1.0]);
    }
}
