//! Parameter construction and the small layers every module shares.

use hamf_tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

/// Creates named parameters from a seeded stream. Values are drawn in f64 so a
/// given seed initializes f32 and f64 models identically (up to rounding).
pub struct ParamBuilder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.from_f64(name, shape, &data)
    }

    pub fn uniform_values(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }

    pub fn from_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> ParamId {
        self.store.add(name, Tensor::from_f64(shape, data).expect("parameter shape matches data"))
    }
}

/// Forward-pass context: the tape being recorded and the parameters read from.
pub struct Fwd<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self { tape, params }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        Ok(self.tape.constant(Tensor::from_f64(shape, data)?))
    }

    /// 0/1 constant of `shape` from a boolean mask over its leading elements,
    /// repeated `inner` times per entry.
    pub fn mask_const(&mut self, shape: &[usize], mask: &[bool], inner: usize) -> Result<Var> {
        let data: Vec<T> =
            mask.iter().flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, inner)).collect();
        Ok(self.tape.constant(Tensor::new(shape.to_vec(), data)?))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = pb.normal(&format!("{name}.w"), &[d_in, d_out], INIT_STD);
        let b = bias.then(|| pb.zeros(&format!("{name}.b"), &[d_out]));
        Linear { w, b, d_in, d_out }
    }

    /// `x @ W (+ b)` over the last axis.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let y = f.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.p(b);
                Ok(f.tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    /// Parameters of this layer, for tests that zero or inspect them.
    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        Norm { gamma: pb.ones(&format!("{name}.gamma"), &[dim]), beta: pb.zeros(&format!("{name}.beta"), &[dim]) }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        Ok(f.tape.layer_norm(x, g, b, NORM_EPS)?)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp2 {
            l1: Linear::new(pb, &format!("{name}.0"), d_in, hidden, true),
            l2: Linear::new(pb, &format!("{name}.1"), hidden, d_out, true),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(f, x)?;
        let h = f.tape.relu(h)?;
        self.l2.forward(f, h)
    }
}

/// Sets every listed parameter to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        store.data_mut(id).iter_mut().for_each(|v| *v = T::zero());
    }
}
