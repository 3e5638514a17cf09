use crate::error::{invalid, Error, Result};
use crate::param::{GradBuffer, ParamStore};
use crate::tensor::{Element, Tensor};

pub trait Optimizer<T: Element = f64> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>) -> Result<()>;

    fn learning_rate(&self) -> f64;
}

fn check_finite<T: Element>(store: &ParamStore<T>, grads: &GradBuffer<T>) -> Result<()> {
    for (id, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return invalid("sgd", format!("learning rate must be positive, got {lr}"));
        }
        Ok(Self { lr })
    }
}

impl<T: Element> Optimizer<T> for Sgd {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>) -> Result<()> {
        check_finite(store, grads)?;
        let lr = T::lit(self.lr);
        for (id, g) in grads.iter() {
            store.get_mut(id).add_scaled(g, -lr);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first step.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f64> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return invalid("adam", format!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return invalid("adam", "betas must lie in [0, 1)");
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl<T: Element> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>) -> Result<()> {
        check_finite(store, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.step as i32);
        let c2 = T::one() - b2.powi(self.step as i32);
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (id, g) in grads.iter() {
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
