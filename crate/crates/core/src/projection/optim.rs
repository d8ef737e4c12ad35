use super::network::Autoencoder;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-tensor learning-rate multipliers, in `Autoencoder::tensors` order.
    pub tensor_scale: Vec<f64>,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &Autoencoder, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tensor_scale: vec![1.0; zeros.len()],
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Scales the learning rate of every encoder tensor.
    pub fn set_encoder_scale(&mut self, model: &Autoencoder, scale: f64) {
        let n = model.encoder_tensor_count();
        for (i, s) in self.tensor_scale.iter_mut().enumerate() {
            *s = if i < n { scale } else { 1.0 };
        }
    }

    pub fn step(&mut self, model: &mut Autoencoder, grads: &Autoencoder) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
        let grads = grads.tensors();
        for ((((p, g), m), v), &scale) in model
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&self.tensor_scale)
        {
            let lr = lr * scale;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] *= 1.0 - lr * wd;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::network::init_model;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut model = init_model(32, 32, 0).unwrap();
        let before = model.clone();
        let mut grads = model.zeros_like();
        grads.tensors_mut()[0][0] = 3.0;
        grads.tensors_mut()[1][0] = -0.5;
        let mut opt = AdamW::new(&model, 0.01, 0.0);
        opt.step(&mut model, &grads);
        let d0 = model.tensors()[0][0] - before.tensors()[0][0];
        let d1 = model.tensors()[1][0] - before.tensors()[1][0];
        assert!((d0 + 0.01).abs() < 1e-6);
        assert!((d1 - 0.01).abs() < 1e-6);
        assert_eq!(model.tensors()[0][1], before.tensors()[0][1]);
    }

    #[test]
    fn encoder_scale_only_touches_encoder() {
        let mut model = init_model(32, 32, 0).unwrap();
        let before = model.clone();
        let mut grads = model.zeros_like();
        for t in grads.tensors_mut() {
            t.fill(1.0);
        }
        let mut opt = AdamW::new(&model, 0.01, 0.0);
        opt.set_encoder_scale(&model, 0.0);
        opt.step(&mut model, &grads);
        assert_eq!(model.encoder, before.encoder);
        assert_ne!(model.decoder, before.decoder);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut model = init_model(32, 32, 0).unwrap();
        let before = model.tensors()[0][5];
        let grads = model.zeros_like();
        let mut opt = AdamW::new(&model, 0.1, 0.5);
        opt.step(&mut model, &grads);
        assert!((model.tensors()[0][5] - before * 0.95).abs() < 1e-12);
    }
}
