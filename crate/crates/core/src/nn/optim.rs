use super::{ParamStore, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step: u64,
    first: Vec<Option<Vec<f32>>>,
    second: Vec<Option<Vec<f32>>>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is indexed like the store; `None` entries are skipped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id.index()).and_then(Option::as_ref) else {
                continue;
            };
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = params.get_mut(id).data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec([2, 1, 1, 1], vec![1.0, -1.0]), ParamKind::Weight);
        let mut adam = Adam::new(0.01);
        let g = Tensor::from_vec([2, 1, 1, 1], vec![3.0, -0.5]);
        adam.step(&mut store, &[Some(g)]);
        let w = store.get(id).data();
        assert!((w[0] - 0.99).abs() < 1e-5);
        assert!((w[1] + 0.99).abs() < 1e-5);
    }

    #[test]
    fn frozen_weights_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("backbone.w", Tensor::full([1, 1, 1, 1], 2.0), ParamKind::Weight);
        store.freeze_except(&["head."]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &[Some(Tensor::full([1, 1, 1, 1], 1.0))]);
        assert_eq!(store.get(id).data(), &[2.0]);
    }
}
