use super::{AutodiffError, Tensor};

pub const DEFAULT_BASE_LR: f64 = 0.01;

/// Inverse-decay factor `(1 + 10p)^-0.75` applied to the base learning rate.
pub fn lr_decay(p: f64) -> Result<f64, AutodiffError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AutodiffError::ProgressOutOfRange(p));
    }
    Ok((1.0 + 10.0 * p).powf(-0.75))
}

/// Learning rate at training progress `p`: `0.01 · (1 + 10p)^-0.75`.
pub fn lr_at(p: f64) -> Result<f64, AutodiffError> {
    Ok(DEFAULT_BASE_LR * lr_decay(p)?)
}

/// Which learning-rate multiplier a parameter receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    /// Freshly initialized heads (classifier, discriminator).
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub base_lr: f64,
    pub classifier_lr_multiplier: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            base_lr: DEFAULT_BASE_LR,
            classifier_lr_multiplier: 1.0,
            weight_decay: 0.0,
            nesterov: false,
        }
    }
}

/// SGD with classical (or optionally Nesterov) momentum.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub config: OptimizerConfig,
    velocity: Vec<Vec<f64>>,
    progress: f64,
}

impl SgdMomentum {
    pub fn new<'a>(config: OptimizerConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let velocity = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            velocity,
            progress: 0.0,
        }
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Advances training progress; it may never move backwards.
    pub fn set_progress(&mut self, p: f64) -> Result<(), AutodiffError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(AutodiffError::ProgressOutOfRange(p));
        }
        if p < self.progress {
            return Err(AutodiffError::ProgressDecreased {
                prev: self.progress,
                next: p,
            });
        }
        self.progress = p;
        Ok(())
    }

    /// Base learning rate at the current progress.
    pub fn lr(&self) -> f64 {
        self.config.base_lr * lr_decay(self.progress).expect("progress kept in range")
    }

    /// `v ← μ·v + g;  θ ← θ − η·v` for every parameter.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        groups: &[ParamGroup],
    ) -> Result<(), AutodiffError> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || groups.len() != params.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "sgd_momentum_step",
                reason: format!(
                    "{} params, {} grads, {} groups, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    groups.len(),
                    self.velocity.len()
                ),
            });
        }
        let lr = self.lr();
        let cfg = &self.config;
        for (((p, g), group), v) in params.iter_mut().zip(grads).zip(groups).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.numel() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "sgd_momentum_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let eta = match group {
                ParamGroup::Backbone => lr,
                ParamGroup::Head => lr * cfg.classifier_lr_multiplier,
            };
            for ((theta, &gk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let gk = gk + cfg.weight_decay * *theta;
                *vk = cfg.momentum * *vk + gk;
                let update = if cfg.nesterov { gk + cfg.momentum * *vk } else { *vk };
                *theta -= eta * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(0.0).unwrap(), 0.01);
        // 0.01 / 2^0.75 and 0.01 / 11^0.75, evaluated with mpmath at 30 digits.
        assert!(close(lr_at(0.1).unwrap(), 0.005946035575013605, 1e-15));
        assert!(close(lr_at(1.0).unwrap(), 0.0016556002607617017, 1e-15));
        assert!(lr_at(-0.01).is_err());
        assert!(lr_at(1.5).is_err());
    }

    #[test]
    fn momentum_free_step_is_plain_sgd() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.5, 0.25]);
        let cfg = OptimizerConfig {
            momentum: 0.0,
            ..Default::default()
        };
        let mut opt = SgdMomentum::new(cfg, [&p]);
        opt.step(&mut [&mut p], &[&g], &[ParamGroup::Backbone]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.01 * 0.5, -2.0 - 0.01 * 0.25]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![3.0, 4.0]);
        let g = Tensor::zeros(&[2]);
        let mut opt = SgdMomentum::new(OptimizerConfig::default(), [&p]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&g], &[ParamGroup::Backbone]).unwrap();
        }
        assert_eq!(p.data(), &[3.0, 4.0]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let g = 0.3;
        let mut p = Tensor::vector(vec![0.0]);
        let grad = Tensor::vector(vec![g]);
        let mut opt = SgdMomentum::new(OptimizerConfig::default(), [&p]);
        opt.step(&mut [&mut p], &[&grad], &[ParamGroup::Backbone]).unwrap();
        opt.step(&mut [&mut p], &[&grad], &[ParamGroup::Backbone]).unwrap();
        assert!(close(p.data()[0], -0.01 * (g + 1.9 * g), 1e-15));
    }

    #[test]
    fn head_multiplier_scales_update() {
        let mut a = Tensor::vector(vec![0.0]);
        let mut b = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        let cfg = OptimizerConfig {
            momentum: 0.0,
            classifier_lr_multiplier: 10.0,
            ..Default::default()
        };
        let mut opt = SgdMomentum::new(cfg, [&a, &b]);
        opt.step(&mut [&mut a, &mut b], &[&g, &g], &[ParamGroup::Backbone, ParamGroup::Head])
            .unwrap();
        assert!(close(b.data()[0], 10.0 * a.data()[0], 1e-15));
    }

    #[test]
    fn progress_is_monotone_and_bounded() {
        let p = Tensor::vector(vec![0.0]);
        let mut opt = SgdMomentum::new(OptimizerConfig::default(), [&p]);
        opt.set_progress(0.5).unwrap();
        assert!(matches!(opt.set_progress(0.4), Err(AutodiffError::ProgressDecreased { .. })));
        assert!(opt.set_progress(1.1).is_err());
        assert!(opt.velocity().iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut opt = SgdMomentum::new(OptimizerConfig::default(), [&p]);
        let err = opt.step(&mut [&mut p], &[&g], &[ParamGroup::Backbone]).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
    }
}
