use crate::model::{ParamId, ParamStore};
use crate::tensor::Gradients;

use super::TrainError;

/// Adaptive-moment optimizer with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Sums the tape gradients per parameter. Parameters the loss did not
    /// reach are `None` and are left untouched by [`Adam::step`].
    pub fn collect(store: &ParamStore, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (p, g) in grads.params() {
            match &mut out[p] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.to_vec()),
            }
        }
        out
    }

    /// One update of every trainable parameter that has a gradient. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<(), TrainError> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFinite(format!(
                        "gradient of parameter {} is not finite",
                        store.get(ParamId(i)).name
                    )));
                }
            }
        }
        if self.m.len() != store.len() {
            self.m = store
                .iter()
                .map(|(_, p)| vec![0.0; if p.trainable { p.value.numel() } else { 0 }])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.get(ParamId(i)).trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.value_mut(ParamId(i)).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                w[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("x", Tensor::scalar(x), true);
        (s, id)
    }

    #[test]
    fn constant_positive_gradient_descends_monotonically() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut prev = 1.0;
        for _ in 0..20 {
            adam.step(&mut s, &[Some(vec![1.0])], 0.01).unwrap();
            let x = s.value(id).data()[0];
            assert!(x < prev);
            prev = x;
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = scalar_store(0.3);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam.step(&mut s, &[Some(vec![0.0])], 0.1).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 0.3);
    }

    #[test]
    fn minimizes_a_parabola() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..100 {
            let tape = Tape::new();
            let x = tape.parameter(s.value(id).clone(), id.0);
            let loss = x.mul(x).unwrap().sum();
            let grads = tape.backward(loss).unwrap();
            let g = Adam::collect(&s, &grads);
            drop(tape);
            adam.step(&mut s, &g, 0.1).unwrap();
        }
        assert!(s.value(id).data()[0].abs() < 0.05, "{}", s.value(id).data()[0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let err = Adam::new(0.9, 0.999, 1e-8)
            .step(&mut s, &[Some(vec![f64::NAN])], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("parameter x"), "{err}");
        assert_eq!(s.value(id).data()[0], 1.0);
    }
}
