//! Stateful layer wrappers over the tape primitives: batchnorm with running
//! statistics, and the float conv/linear layers used by stems, classifiers
//! and skip projections. Each layer owns [`ParamId`]s inside a shared
//! [`ParamStore`] and offers both a tape `forward` and a tape-free `infer`.

use rand_chacha::ChaCha8Rng;

use super::kernels as k;
use super::{params_init, ConvSpec, ParamGroup, ParamId, ParamStore, Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Per-channel batch normalization over `[N, C, H, W]`.
///
/// Running statistics follow the usual EMA convention
/// `r = (1 - momentum) * r + momentum * stat` with the *unbiased* batch
/// variance feeding `running_var`. Supernets use `affine = false`; final
/// networks use `affine = true`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, affine: bool) -> Result<Self> {
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{prefix}.gamma"), vec![channels], vec![1.0; channels], ParamGroup::Weight)?),
                Some(store.add(format!("{prefix}.beta"), vec![channels], vec![0.0; channels], ParamGroup::Weight)?),
            )
        } else {
            (None, None)
        };
        let running_mean =
            store.add(format!("{prefix}.running_mean"), vec![channels], vec![0.0; channels], ParamGroup::Buffer)?;
        let running_var =
            store.add(format!("{prefix}.running_var"), vec![channels], vec![1.0; channels], ParamGroup::Buffer)?;
        Ok(BatchNorm2d { channels, gamma, beta, running_mean, running_var, momentum: 0.1, eps: 1e-5 })
    }

    /// Tape forward. In training mode this also updates the running
    /// statistics in the store, which is why the store is mutable here.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: TensorId, training: bool) -> Result<TensorId> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.channels {
            return Err(Error::shape("batchnorm2d", format!("input {:?}, layer has {} channels", xs, self.channels)));
        }
        let gamma = match self.gamma {
            Some(id) => Some(tape.param(store, id)?),
            None => None,
        };
        let beta = match self.beta {
            Some(id) => Some(tape.param(store, id)?),
            None => None,
        };
        if training {
            let (y, mean, var_biased) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
            let m = (xs[0] * xs[2] * xs[3]) as f32;
            let unbias = m / (m - 1.0);
            let mom = self.momentum;
            {
                let rm = &mut store.get_mut(self.running_mean).data;
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - mom) * *r + mom * b;
                }
            }
            {
                let rv = &mut store.get_mut(self.running_var).data;
                for (r, &b) in rv.iter_mut().zip(&var_biased) {
                    *r = (1.0 - mom) * *r + mom * b * unbias;
                }
            }
            Ok(y)
        } else {
            let mean = store.get(self.running_mean).data.clone();
            let var = store.get(self.running_var).data.clone();
            tape.batchnorm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }

    /// Tape-free eval-mode application using the running statistics.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 4 || x.shape[1] != self.channels {
            return Err(Error::shape("batchnorm2d", format!("input {:?}, layer has {} channels", x.shape, self.channels)));
        }
        let (n, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
        let mean = &store.get(self.running_mean).data;
        let var = &store.get(self.running_var).data;
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = self.gamma.map(|id| store.get(id).data.as_slice());
        let beta = self.beta.map(|id| store.get(id).data.as_slice());
        let data = k::bn_apply(&x.data, n, c, hw, mean, &invstd, gamma, beta);
        Tensor::new(x.shape.clone(), data)
    }
}

/// Plain float convolution, bias-free (batchnorm always follows).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub spec: ConvSpec,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        if in_ch % spec.groups != 0 || out_ch % spec.groups != 0 {
            return Err(Error::arg("conv2d_layer", format!("{name}: groups {} vs {in_ch}->{out_ch}", spec.groups)));
        }
        let shape = vec![out_ch, in_ch / spec.groups, kernel, kernel];
        let fan_in = (in_ch / spec.groups) * kernel * kernel;
        let data = params_init(rng, &shape, fan_in);
        let weight = store.add(name, shape, data, ParamGroup::Weight)?;
        Ok(Conv2dLayer { weight, spec })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let w = tape.param(store, self.weight)?;
        tape.conv2d(x, w, self.spec)
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let p = store.get(self.weight);
        let (data, shape) = k::conv2d(&x.data, &x.shape, &p.data, &p.shape, &self.spec)?;
        Tensor::new(shape, data)
    }
}

/// Fully-connected classifier head: `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let data = params_init(rng, &[out_features, in_features], in_features);
        let weight = store.add(format!("{prefix}.weight"), vec![out_features, in_features], data, ParamGroup::Weight)?;
        let bias =
            store.add(format!("{prefix}.bias"), vec![out_features], vec![0.0; out_features], ParamGroup::Weight)?;
        Ok(LinearLayer { weight, bias, in_features, out_features })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.linear(x, w, Some(b))
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[1] != self.in_features {
            return Err(Error::shape("linear", format!("input {:?}, want [*, {}]", x.shape, self.in_features)));
        }
        let m = x.shape[0];
        let w = &store.get(self.weight).data;
        let b = &store.get(self.bias).data;
        let mut out = vec![0.0f32; m * self.out_features];
        k::matmul_nt_acc(&x.data, w, m, self.in_features, self.out_features, &mut out);
        for row in out.chunks_exact_mut(self.out_features) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Tensor::new(vec![m, self.out_features], out)
    }
}
