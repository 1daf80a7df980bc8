//! The candidate layer registry S_B: seven binary-friendly kinds (Table 3
//! layout: binary convolutions, dilated variants, pools, Zeroise), their
//! edge-block realization, and per-kind cost accounting.
//!
//! Separable convolutions are deliberately absent from the canonical space;
//! the two `SepConv*` kinds exist only for the `with_sepconv` ablation and
//! the block-net comparison harness.

use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::binarize::{binconv_apply, BinConvParams, BinConvRunner};
use crate::ndtensor::{kernels, BatchNorm2d, ConvSpec, ParamStore, Tape, Tensor, TensorId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerType {
    Zeroise,
    MaxPool3,
    AvgPool3,
    BinConv3,
    BinConv5,
    BinDilConv3,
    BinDilConv5,
    SepConv3,
    SepConv5,
}

/// The canonical search space, in the column order used by arch logits.
/// Zeroise sits at index 0 so Eq. 5's p_z is always the first column.
pub const SEARCH_SPACE: [LayerType; 7] = [
    LayerType::Zeroise,
    LayerType::MaxPool3,
    LayerType::AvgPool3,
    LayerType::BinConv3,
    LayerType::BinConv5,
    LayerType::BinDilConv3,
    LayerType::BinDilConv5,
];

pub fn standard_space() -> Vec<LayerType> {
    SEARCH_SPACE.to_vec()
}

/// `no_dilconv` ablation: the canonical space minus the dilated kinds.
pub fn no_dilconv_space() -> Vec<LayerType> {
    SEARCH_SPACE.iter().copied().filter(|k| k.dilation() == 1).collect()
}

/// `with_sepconv` ablation: the canonical space plus separable kinds.
pub fn with_sepconv_space() -> Vec<LayerType> {
    let mut v = SEARCH_SPACE.to_vec();
    v.push(LayerType::SepConv3);
    v.push(LayerType::SepConv5);
    v
}

impl LayerType {
    pub fn name(self) -> &'static str {
        match self {
            LayerType::Zeroise => "zeroise",
            LayerType::MaxPool3 => "max_pool_3x3",
            LayerType::AvgPool3 => "avg_pool_3x3",
            LayerType::BinConv3 => "bin_conv_3x3",
            LayerType::BinConv5 => "bin_conv_5x5",
            LayerType::BinDilConv3 => "bin_dil_conv_3x3",
            LayerType::BinDilConv5 => "bin_dil_conv_5x5",
            LayerType::SepConv3 => "sep_conv_3x3",
            LayerType::SepConv5 => "sep_conv_5x5",
        }
    }

    pub fn from_name(s: &str) -> Option<LayerType> {
        let all = [
            LayerType::Zeroise,
            LayerType::MaxPool3,
            LayerType::AvgPool3,
            LayerType::BinConv3,
            LayerType::BinConv5,
            LayerType::BinDilConv3,
            LayerType::BinDilConv5,
            LayerType::SepConv3,
            LayerType::SepConv5,
        ];
        all.into_iter().find(|k| k.name() == s)
    }

    pub fn kernel_size(self) -> usize {
        match self {
            LayerType::Zeroise => 0,
            LayerType::MaxPool3 | LayerType::AvgPool3 => 3,
            LayerType::BinConv3 | LayerType::BinDilConv3 | LayerType::SepConv3 => 3,
            LayerType::BinConv5 | LayerType::BinDilConv5 | LayerType::SepConv5 => 5,
        }
    }

    pub fn dilation(self) -> usize {
        match self {
            LayerType::BinDilConv3 | LayerType::BinDilConv5 => 2,
            _ => 1,
        }
    }

    /// Symmetric padding that preserves spatial size at stride 1.
    pub fn padding(self) -> usize {
        match self {
            LayerType::Zeroise => 0,
            LayerType::MaxPool3 | LayerType::AvgPool3 => 1,
            LayerType::BinConv3 | LayerType::SepConv3 => 1,
            LayerType::BinConv5 | LayerType::SepConv5 => 2,
            LayerType::BinDilConv3 => 2,
            LayerType::BinDilConv5 => 4,
        }
    }

    /// True only for kinds that carry trainable weights.
    pub fn has_params(self) -> bool {
        matches!(
            self,
            LayerType::BinConv3
                | LayerType::BinConv5
                | LayerType::BinDilConv3
                | LayerType::BinDilConv5
                | LayerType::SepConv3
                | LayerType::SepConv5
        )
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerType::MaxPool3 | LayerType::AvgPool3)
    }

    /// Convolution geometry for the conv kinds at a given stride.
    pub fn conv_spec(self, stride: usize) -> ConvSpec {
        ConvSpec { stride, dilation: self.dilation(), padding: self.padding(), groups: 1 }
    }
}

impl Serialize for LayerType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LayerType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LayerType::from_name(&s).ok_or_else(|| D::Error::custom(format!("unknown layer type {s:?}")))
    }
}

/// Output extent of every kind along one spatial axis. All paddings are
/// chosen so the seven kinds agree: `(h - 1) / stride + 1`.
pub fn out_extent(input: usize, stride: usize) -> usize {
    (input - 1) / stride + 1
}

/// One realized edge operation: the layer kind plus its parameters.
///
/// Conv kinds are `[batchnorm -> binconv]` with the sign inside the binconv
/// (normalization must precede the sign, or the binarization threshold is
/// arbitrary). Pool kinds are `[pool3x3 -> batchnorm]`. Separable kinds
/// nest a depthwise and a pointwise binconv after one batchnorm.
pub struct OpBlock {
    pub layer: LayerType,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    body: Body,
}

enum Body {
    Zeroise,
    Pool { max: bool, bn: BatchNorm2d },
    Conv { bn: BatchNorm2d, conv: BinConvParams },
    Sep { bn: BatchNorm2d, dw: BinConvParams, pw: BinConvParams },
}

impl OpBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        layer: LayerType,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        affine: bool,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::arg("op_block", format!("stride {stride} not in {{1,2}}")));
        }
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::arg("op_block", "zero channel count"));
        }
        let body = match layer {
            LayerType::Zeroise => Body::Zeroise,
            LayerType::MaxPool3 | LayerType::AvgPool3 => {
                if in_ch != out_ch {
                    return Err(Error::arg("op_block", format!("pool cannot remap channels {in_ch}->{out_ch}")));
                }
                Body::Pool {
                    max: layer == LayerType::MaxPool3,
                    bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), out_ch, affine)?,
                }
            }
            LayerType::BinConv3 | LayerType::BinConv5 | LayerType::BinDilConv3 | LayerType::BinDilConv5 => {
                let k = layer.kernel_size();
                Body::Conv {
                    bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), in_ch, affine)?,
                    conv: BinConvParams::new(
                        store,
                        &format!("{prefix}.wbin"),
                        out_ch,
                        in_ch,
                        k,
                        k,
                        layer.conv_spec(stride),
                        rng,
                    )?,
                }
            }
            LayerType::SepConv3 | LayerType::SepConv5 => {
                let k = layer.kernel_size();
                let dw_spec = ConvSpec { groups: in_ch, ..layer.conv_spec(stride) };
                Body::Sep {
                    bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), in_ch, affine)?,
                    dw: BinConvParams::new(store, &format!("{prefix}.dw.wbin"), in_ch, in_ch, k, k, dw_spec, rng)?,
                    pw: BinConvParams::new(
                        store,
                        &format!("{prefix}.pw.wbin"),
                        out_ch,
                        in_ch,
                        1,
                        1,
                        ConvSpec::plain(1, 0),
                        rng,
                    )?,
                }
            }
        };
        Ok(OpBlock { layer, stride, in_ch, out_ch, body })
    }

    /// Tape forward. The store is mutable because batchnorm updates its
    /// running statistics in training mode.
    pub fn apply(&self, tape: &mut Tape, store: &mut ParamStore, x: TensorId, training: bool) -> Result<TensorId> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.in_ch {
            return Err(Error::shape("op_block", format!("input {:?}, block expects {} channels", xs, self.in_ch)));
        }
        match &self.body {
            Body::Zeroise => {
                let (oh, ow) = (out_extent(xs[2], self.stride), out_extent(xs[3], self.stride));
                tape.zeros(vec![xs[0], self.out_ch, oh, ow])
            }
            Body::Pool { max, bn } => {
                let pooled = if *max { tape.maxpool3(x, self.stride)? } else { tape.avgpool3(x, self.stride)? };
                bn.forward(tape, store, pooled, training)
            }
            Body::Conv { bn, conv } => {
                let normed = bn.forward(tape, store, x, training)?;
                binconv_apply(tape, store, normed, conv)
            }
            Body::Sep { bn, dw, pw } => {
                let normed = bn.forward(tape, store, x, training)?;
                let mid = binconv_apply(tape, store, normed, dw)?;
                binconv_apply(tape, store, mid, pw)
            }
        }
    }

    /// Tape-free eval forward; binary convolutions go through `runner`.
    pub fn infer(&self, store: &ParamStore, x: &Tensor, runner: &dyn BinConvRunner) -> Result<Tensor> {
        if x.shape.len() != 4 || x.shape[1] != self.in_ch {
            return Err(Error::shape("op_block", format!("input {:?}, block expects {} channels", x.shape, self.in_ch)));
        }
        match &self.body {
            Body::Zeroise => {
                let (oh, ow) = (out_extent(x.shape[2], self.stride), out_extent(x.shape[3], self.stride));
                Ok(Tensor::zeros(vec![x.shape[0], self.out_ch, oh, ow]))
            }
            Body::Pool { max, bn } => {
                let pooled = if *max {
                    let (data, shape, _) = kernels::maxpool3(&x.data, &x.shape, self.stride)?;
                    Tensor::new(shape, data)?
                } else {
                    let (data, shape) = kernels::avgpool3(&x.data, &x.shape, self.stride)?;
                    Tensor::new(shape, data)?
                };
                bn.infer(store, &pooled)
            }
            Body::Conv { bn, conv } => {
                let normed = bn.infer(store, x)?;
                runner.run(store, conv, &normed)
            }
            Body::Sep { bn, dw, pw } => {
                let normed = bn.infer(store, x)?;
                let mid = runner.run(store, dw, &normed)?;
                runner.run(store, pw, &mid)
            }
        }
    }

    /// Binary convolutions inside this block, in execution order (deploy
    /// packs them; everything else it copies as float).
    pub fn bin_convs(&self) -> Vec<&BinConvParams> {
        match &self.body {
            Body::Zeroise | Body::Pool { .. } => Vec::new(),
            Body::Conv { conv, .. } => vec![conv],
            Body::Sep { dw, pw, .. } => vec![dw, pw],
        }
    }
}

/// Cost of one op: multiply-accumulates split by arithmetic domain plus
/// stored parameter bits. `flops()` folds binary ops at the 64-wide
/// bit-parallel rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCost {
    pub binary_ops: u64,
    pub float_ops: u64,
    pub param_bits_binary: u64,
    pub param_bits_float: u64,
}

impl OpCost {
    pub fn param_bits(&self) -> u64 {
        self.param_bits_binary + self.param_bits_float
    }

    pub fn flops(&self) -> f64 {
        self.float_ops as f64 + self.binary_ops as f64 / 64.0
    }
}

impl std::ops::Add for OpCost {
    type Output = OpCost;
    fn add(self, o: OpCost) -> OpCost {
        OpCost {
            binary_ops: self.binary_ops + o.binary_ops,
            float_ops: self.float_ops + o.float_ops,
            param_bits_binary: self.param_bits_binary + o.param_bits_binary,
            param_bits_float: self.param_bits_float + o.param_bits_float,
        }
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::default(), |a, b| a + b)
    }
}

/// Cost of one edge op on an input of `spatial = (h, w)`.
///
/// Conv kinds count the binary correlation as binary_ops and the Eq. 3
/// plumbing (input batchnorm, the K map, the betaK scaling) as float_ops.
/// param_bits are 1 bit per latent weight plus 32 bits per beta; batchnorm
/// parameters are accounted once at the network level, not per edge.
pub fn op_cost(layer: LayerType, in_ch: usize, out_ch: usize, spatial: (usize, usize), stride: usize) -> OpCost {
    let (h, w) = spatial;
    let (oh, ow) = (out_extent(h, stride), out_extent(w, stride));
    let (opix, ipix) = ((oh * ow) as u64, (h * w) as u64);
    let (cin, cout) = (in_ch as u64, out_ch as u64);
    let bn_in = 2 * cin * ipix;
    match layer {
        LayerType::Zeroise => OpCost::default(),
        LayerType::MaxPool3 | LayerType::AvgPool3 => OpCost {
            binary_ops: 0,
            float_ops: 9 * cin * opix + 2 * cin * opix,
            param_bits_binary: 0,
            param_bits_float: 0,
        },
        LayerType::BinConv3 | LayerType::BinConv5 | LayerType::BinDilConv3 | LayerType::BinDilConv5 => {
            let k2 = (layer.kernel_size() * layer.kernel_size()) as u64;
            OpCost {
                binary_ops: cout * cin * k2 * opix,
                float_ops: bn_in + (cin * ipix + k2 * opix) + 2 * cout * opix,
                param_bits_binary: cout * cin * k2,
                param_bits_float: 32 * cout,
            }
        }
        LayerType::SepConv3 | LayerType::SepConv5 => {
            let k2 = (layer.kernel_size() * layer.kernel_size()) as u64;
            let dw_binary = cin * k2 * opix;
            let dw_float = bn_in + (cin * ipix + cin * k2 * opix) + 2 * cin * opix;
            let pw_binary = cin * cout * opix;
            let pw_float = (cin * opix + opix) + 2 * cout * opix;
            OpCost {
                binary_ops: dw_binary + pw_binary,
                float_ops: dw_float + pw_float,
                param_bits_binary: cin * k2 + cin * cout,
                param_bits_float: 32 * (cin + cout),
            }
        }
    }
}
