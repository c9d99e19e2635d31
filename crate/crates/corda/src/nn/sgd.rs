use std::collections::HashMap;

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// `v = mu*v + g + wd*w; w -= lr*v`.
pub struct SgdMomentum {
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: HashMap<String, Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    /// Update one named parameter block. Velocity buffers are keyed by name and
    /// created lazily.
    pub fn update(&mut self, name: &str, lr: f32, data: &mut [f32], grad: &[f32]) {
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; data.len()]);
        debug_assert_eq!(buf.len(), data.len());
        let mu = self.momentum;
        let wd = self.weight_decay;
        for i in 0..data.len() {
            let v = mu * buf[i] + grad[i] + wd * data[i];
            buf[i] = v;
            data[i] -= lr * v;
        }
    }

    /// Export velocity buffers in a caller-specified name order.
    pub fn export_buffers(&self, names: &[String]) -> Vec<(String, Vec<f32>)> {
        names
            .iter()
            .filter_map(|n| self.buffers.get(n).map(|b| (n.clone(), b.clone())))
            .collect()
    }

    pub fn import_buffers(&mut self, blocks: Vec<(String, Vec<f32>)>) {
        for (name, buf) in blocks {
            self.buffers.insert(name, buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates_velocity() {
        let mut opt = SgdMomentum::new(0.9, 0.0);
        let mut w = vec![1.0f32];
        let g = vec![1.0f32];
        opt.update("p", 0.1, &mut w, &g);
        assert!((w[0] - 0.9).abs() < 1e-6);
        opt.update("p", 0.1, &mut w, &g);
        // v = 0.9*1 + 1 = 1.9; w = 0.9 - 0.19
        assert!((w[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut opt = SgdMomentum::new(0.0, 0.5);
        let mut w = vec![2.0f32];
        let g = vec![0.0f32];
        opt.update("p", 0.1, &mut w, &g);
        assert!((w[0] - 1.9).abs() < 1e-6);
    }
}
