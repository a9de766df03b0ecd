use std::collections::HashMap;

use ndarray::ArrayD;

use super::param::Param;

/// Plain SGD with momentum. Velocity buffers are keyed by parameter name so
/// the optimizer can be applied to any parameter group of the model.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: HashMap<String, ArrayD<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Param) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(param.value.raw_dim()));
        ndarray::Zip::from(v.view_mut())
            .and(&param.grad)
            .for_each(|vel, &g| {
                *vel = self.momentum * *vel + g;
            });
        ndarray::Zip::from(&mut param.value)
            .and(v.view())
            .for_each(|w, &vel| {
                *w -= self.lr * vel;
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(0.1, 0.9);
        let mut p = Param::zeros(&[1]);
        p.grad.fill(1.0);
        opt.step("p", &mut p);
        assert!((p.value[[0]] + 0.1).abs() < 1e-6); // v = 1, w = -0.1
        opt.step("p", &mut p);
        // v = 0.9 + 1 = 1.9, w = -0.1 - 0.19 = -0.29
        assert!((p.value[[0]] + 0.29).abs() < 1e-6);
    }
}
