use crate::{Float, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap applied before the update; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters are skipped even if a gradient is
    /// supplied. Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> f64 {
        let norm = global_norm(grads);
        let clip = match self.config.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let clip = T::from_f64(clip);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let i = id.index();
            let shape = grad.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(shape));
            let p = store.get_mut(*id);
            assert_eq!(p.shape(), grad.shape(), "gradient shape mismatch for {id:?}");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

pub fn global_norm<T: Float>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.sum_sq().to_f64())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_in_sign_direction() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64([3], &[1.0, -2.0, 0.5]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let g = Tensor::from_f64([3], &[4.0, -0.01, 0.0]);
        opt.step(&mut store, &[(id, g)]);
        let p = store.get(id).to_f64_vec();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-4);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("codebook", Tensor::from_f64([2], &[1.0, 2.0]));
        store.set_trainable(id, false);
        let before = store.get(id).clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut store, &[(id, Tensor::from_f64([2], &[1.0, 1.0]))]);
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn clipping_scales_the_update_input() {
        let grads = vec![(ParamId(0), Tensor::<f64>::from_f64([2], &[3.0, 4.0]))];
        assert!((global_norm(&grads) - 5.0).abs() < 1e-12);
    }
}
