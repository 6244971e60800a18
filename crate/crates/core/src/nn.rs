//! Layers that read their weights from a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let fan_in = self.cin * self.kernel * self.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        store.insert(
            format!("{}.weight", self.name),
            Tensor::randn([self.cout, self.cin, self.kernel, self.kernel], std, rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros([self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let wname = format!("{}.weight", self.name);
        let bname = format!("{}.bias", self.name);
        let w = g.param(&wname, store.get(&wname)?, trainable);
        let b = g.param(&bname, store.get(&bname)?, trainable);
        g.conv2d(
            x,
            w,
            b,
            Conv2dSpec {
                stride: self.stride,
                pad: self.pad,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, std: f64, rng: &mut impl Rng) {
        store.insert(format!("{}.weight", self.name), Tensor::randn([self.din, self.dout], std, rng));
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros([self.dout]));
        }
    }

    /// `[n,din] -> [n,dout]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let wname = format!("{}.weight", self.name);
        let w = g.param(&wname, store.get(&wname)?, trainable);
        let y = g.matmul(x, w)?;
        if self.bias {
            let bname = format!("{}.bias", self.name);
            let b = g.param(&bname, store.get(&bname)?, trainable);
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

/// 1-D batch norm with running statistics kept as buffers next to the affine
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
    /// BNNeck keeps the shift fixed at zero.
    pub train_shift: bool,
}

impl BatchNorm1d {
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.gamma", self.name), Tensor::full([self.dim], T::one()));
        store.insert(format!("{}.beta", self.name), Tensor::zeros([self.dim]));
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros([self.dim]));
        store.insert(format!("{}.running_var", self.name), Tensor::full([self.dim], T::one()));
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    /// Batch-statistics forward. Running statistics are updated in `store`
    /// only when `update_running` is set.
    pub fn forward_train<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        trainable: bool,
        update_running: bool,
    ) -> Result<Var> {
        let gname = self.gamma_name();
        let bname = format!("{}.beta", self.name);
        let gamma = g.param(&gname, store.get(&gname)?, trainable);
        let beta = g.param(&bname, store.get(&bname)?, trainable && self.train_shift);
        let (y, stats) = g.batch_norm(x, gamma, beta, T::lit(self.eps))?;
        if update_running {
            let n = g.shape(x)[0];
            let unbias = T::from_usize_lossy(n) / T::from_usize_lossy(n - 1);
            let mom = T::lit(self.momentum);
            let keep = T::one() - mom;
            let rm = store.get_mut(&format!("{}.running_mean", self.name))?;
            for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + mom * m;
            }
            let rv = store.get_mut(&format!("{}.running_var", self.name))?;
            for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + mom * v * unbias;
            }
        }
        Ok(y)
    }

    /// Inference forward with running statistics folded into a row affine map.
    pub fn forward_eval<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = store.get(&self.gamma_name())?;
        let beta = store.get(&format!("{}.beta", self.name))?;
        let rm = store.get(&format!("{}.running_mean", self.name))?;
        let rv = store.get(&format!("{}.running_var", self.name))?;
        let eps = T::lit(self.eps);
        let scale: Vec<T> = (0..self.dim)
            .map(|j| gamma.data()[j] / (rv.data()[j] + eps).sqrt())
            .collect();
        let shift: Vec<T> = (0..self.dim)
            .map(|j| beta.data()[j] - rm.data()[j] * scale[j])
            .collect();
        let s = g.constant(Tensor::new([self.dim], scale)?);
        let b = g.constant(Tensor::new([self.dim], shift)?);
        let y = g.mul_row(x, s)?;
        g.add_row(y, b)
    }
}
