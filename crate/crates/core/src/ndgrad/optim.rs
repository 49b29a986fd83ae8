use super::{Scalar, Tensor};

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f32> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    /// One buffer per registered parameter, same order and length.
    pub momentum_buffers: Vec<Vec<T>>,
}

/// A registered parameter set plus its optimizer state.
#[derive(Debug)]
pub struct Sgd<T: Scalar = f32> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    lr_scales: Vec<T>,
    pub state: OptimizerState<T>,
    skipped: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T, weight_decay: T) -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
            lr_scales: Vec::new(),
            state: OptimizerState {
                learning_rate,
                momentum,
                weight_decay,
                momentum_buffers: Vec::new(),
            },
            skipped: 0,
        }
    }

    pub fn register(&mut self, name: impl Into<String>, param: &Tensor<T>) {
        self.register_scaled(name, param, T::one());
    }

    /// Registers a parameter whose step uses `lr_scale × learning_rate`.
    pub fn register_scaled(&mut self, name: impl Into<String>, param: &Tensor<T>, lr_scale: T) {
        self.names.push(name.into());
        self.params.push(param.clone());
        self.lr_scales.push(lr_scale);
        self.state.momentum_buffers.push(vec![T::zero(); param.numel()]);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Total parameter updates skipped for lack of a gradient.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update and clears every gradient. Returns how many
    /// parameters had no gradient and were left untouched.
    pub fn step(&mut self) -> u64 {
        let OptimizerState { learning_rate, momentum, weight_decay, .. } = self.state;
        let mut skipped = 0;
        for ((param, buf), &scale) in self
            .params
            .iter()
            .zip(self.state.momentum_buffers.iter_mut())
            .zip(&self.lr_scales)
        {
            let Some(grad) = param.take_grad() else {
                skipped += 1;
                continue;
            };
            let lr = learning_rate * scale;
            param.update_data(|p| {
                for ((w, b), g) in p.iter_mut().zip(buf.iter_mut()).zip(grad) {
                    let g = g + weight_decay * *w;
                    *b = momentum * *b + g;
                    *w = *w - lr * *b;
                }
            });
        }
        self.skipped += skipped;
        skipped
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&self, max_norm: T) -> T {
        let grads: Vec<Option<Vec<T>>> = self.params.iter().map(Tensor::grad).collect();
        let norm = grads.iter().flatten().flatten().map(|&g| g * g).sum::<T>().sqrt();
        if norm > max_norm {
            let factor = max_norm / norm;
            for (p, g) in self.params.iter().zip(grads) {
                if let Some(g) = g {
                    p.zero_grad();
                    p.accumulate_grad(&g.iter().map(|&v| v * factor).collect::<Vec<_>>());
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_grad_norm_rescales_jointly() {
        let a = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        let b = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        a.accumulate_grad(&[3.0]);
        b.accumulate_grad(&[4.0]);
        let mut opt = Sgd::new(1.0, 0.0, 0.0);
        opt.register("a", &a);
        opt.register("b", &b);
        assert_eq!(opt.clip_grad_norm(1.0), 5.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-12);
        assert_eq!(opt.clip_grad_norm(10.0), 1.0);
    }

    fn unit_param() -> Tensor<f64> {
        Tensor::param(&[1], vec![1.0]).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let p = unit_param();
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.register("p", &p);
        p.accumulate_grad(&[0.0]);
        assert_eq!(opt.step(), 0);
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn plain_step() {
        let p = unit_param();
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        opt.register("p", &p);
        p.accumulate_grad(&[1.0]);
        opt.step();
        assert!((p.item() - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none(), "step clears gradients");
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let p = unit_param();
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.register("p", &p);
        for _ in 0..2 {
            p.accumulate_grad(&[1.0]);
            opt.step();
        }
        // 1 - 0.1·1 - 0.1·(0.9 + 1)
        assert!((p.item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let p = unit_param();
        let mut opt = Sgd::new(1.0, 0.0, 0.5);
        opt.register("p", &p);
        p.accumulate_grad(&[0.0]);
        opt.step();
        assert!((p.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_counted_and_skipped() {
        let p = unit_param();
        let q = unit_param();
        let mut opt = Sgd::new(0.1, 0.9, 5e-4);
        opt.register("p", &p);
        opt.register("q", &q);
        q.accumulate_grad(&[1.0]);
        assert_eq!(opt.step(), 1);
        assert_eq!(p.item(), 1.0);
        assert!(q.item() < 1.0);
        assert_eq!(opt.skipped(), 1);
    }
}
