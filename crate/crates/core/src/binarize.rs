//! Binarization math: sign quantization with a straight-through estimator
//! and the XNOR-style convolution approximation
//!
//! ```text
//! W ∗ A ≈ βK ⊙ (B ∗ I),   B = sign(W), I = sign(A),
//! β = (1/n)‖W‖₁ per output filter (n = c·w·h),
//! K = D ∗ k,  D = channel mean of |A|,  k_ij = 1/(w·h).
//! ```
//!
//! sign(0) is defined as +1 throughout (it has to agree with the packed
//! bit representation in `deploy`). K is recomputed from the live
//! activation on every forward pass; β comes from the raw latent weights.

use rand_chacha::ChaCha8Rng;

use crate::ndtensor::{kernels, ConvSpec, ParamGroup, ParamId, ParamStore, Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Latent float weights of one binary convolution. β and B are derived
/// views of the latent tensor: β = per-filter mean of |W|, B = sign(W).
#[derive(Debug, Clone)]
pub struct BinConvParams {
    pub weight: ParamId,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub spec: ConvSpec,
}

impl BinConvParams {
    /// Registers a latent weight of shape [out, in/groups, kh, kw].
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cpg = in_ch / spec.groups;
        let shape = vec![out_ch, cpg, kh, kw];
        let fan_in = cpg * kh * kw;
        let data = crate::ndtensor::params_init(rng, &shape, fan_in);
        let weight = store.add(name, shape, data, ParamGroup::Weight)?;
        Ok(BinConvParams { weight, out_ch, in_ch, kh, kw, spec })
    }

    /// β per output filter, computed from the stored latent weights.
    pub fn beta(&self, store: &ParamStore) -> Vec<f32> {
        let p = store.get(self.weight);
        let n = p.shape[1] * p.shape[2] * p.shape[3];
        p.data
            .chunks_exact(n)
            .map(|f| f.iter().map(|v| v.abs()).sum::<f32>() / n as f32)
            .collect()
    }

    /// B = sign(W) with sign(0)=+1.
    pub fn sign_weights(&self, store: &ParamStore) -> Vec<f32> {
        store.get(self.weight).data.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect()
    }
}

/// Tape-level sign with the clipped straight-through surrogate: forward
/// sign(x) (sign(0)=+1), backward passes gradient where |x| ≤ 1.
pub fn sign_ste(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    tape.sign_ste(x)
}

/// β = (1/n)‖W‖₁ per output filter of a [O, c, kh, kw] weight.
pub fn compute_beta(tape: &mut Tape, w: TensorId) -> Result<TensorId> {
    let ws = tape.shape(w).to_vec();
    if ws.len() != 4 {
        return Err(Error::shape("compute_beta", format!("want 4-d weight, got {ws:?}")));
    }
    let n = ws[1] * ws[2] * ws[3];
    if n == 0 {
        return Err(Error::arg("compute_beta", "empty filter"));
    }
    let a = tape.abs(w)?;
    let flat = tape.reshape(a, vec![ws[0], n])?;
    tape.row_mean(flat)
}

/// K = D ∗ k for an activation [N, C, H, W]: D is the per-group channel
/// mean of |A| and k the kh×kw averaging kernel, convolved with the same
/// stride/dilation/padding as the main conv. Returns [N, groups, Oh, Ow].
pub fn compute_k(tape: &mut Tape, a: TensorId, kh: usize, kw: usize, spec: ConvSpec) -> Result<TensorId> {
    let abs_a = tape.abs(a)?;
    let d = tape.mean_groups(abs_a, spec.groups)?;
    let avg = vec![1.0 / (kh * kw) as f32; spec.groups * kh * kw];
    let kern = tape.leaf(vec![spec.groups, 1, kh, kw], avg)?;
    let dspec = ConvSpec { groups: spec.groups, ..spec };
    tape.conv2d(d, kern, dspec)
}

/// Eq. 3 forward: βK ⊙ (B ∗ sign(A)). Gradients flow into the latent
/// weights and into A through the STE and the |A| path of K.
pub fn binconv_forward(tape: &mut Tape, a: TensorId, w: TensorId, spec: ConvSpec) -> Result<TensorId> {
    let ws = tape.shape(w).to_vec();
    if ws.len() != 4 {
        return Err(Error::shape("binconv", format!("want 4-d weight, got {ws:?}")));
    }
    let (kh, kw) = (ws[2], ws[3]);
    let i = tape.sign_ste(a)?;
    let b = tape.sign_ste(w)?;
    let conv = tape.conv2d(i, b, spec)?;
    let k = compute_k(tape, a, kh, kw, spec)?;
    let scaled = tape.mul_groups(conv, k)?;
    let beta = compute_beta(tape, w)?;
    tape.scale_channels(scaled, beta)
}

/// Convenience wrapper over stored parameters.
pub fn binconv_apply(
    tape: &mut Tape,
    store: &ParamStore,
    a: TensorId,
    params: &BinConvParams,
) -> Result<TensorId> {
    let w = tape.param(store, params.weight)?;
    binconv_forward(tape, a, w, params.spec)
}

/// Mean squared difference between the float convolution W ∗ A and its
/// Eq. 3 binary approximation.
pub fn quantization_error(a: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<f32> {
    let mut tape = Tape::new();
    let ai = tape.leaf(a.shape.clone(), a.data.clone())?;
    let wi = tape.leaf(w.shape.clone(), w.data.clone())?;
    let reference = tape.conv2d(ai, wi, spec)?;
    let approx = binconv_forward(&mut tape, ai, wi, spec)?;
    mse(&mut tape, reference, approx)
}

/// Eq. 4 nested error for a separable convolution: the float reference is
/// the depthwise-then-pointwise composition; the binary approximation is
///
/// ```text
/// Sep(W ∗ A) ≈ β₂ (B₂ ∗ A₂),   A₂ = β₁K₁ ⊙ (B₁ ∗ I₁),
/// ```
///
/// i.e. the second stage binarizes its weights only — A₂ stays float and no
/// K₂ exists, exactly the paper's nested form. The first stage's error
/// propagates through the second convolution, which is what makes this
/// strictly worse than a single binary conv on average.
pub fn sep_quantization_error(a: &Tensor, w_dw: &Tensor, w_pw: &Tensor, spec: ConvSpec) -> Result<f32> {
    let c = a.shape.get(1).copied().unwrap_or(0);
    if w_dw.shape.len() != 4 || w_dw.shape[0] != c || w_dw.shape[1] != 1 {
        return Err(Error::shape(
            "sep_quantization_error",
            format!("depthwise weight {:?}, want [{c}, 1, kh, kw]", w_dw.shape),
        ));
    }
    if w_pw.shape.len() != 4 || w_pw.shape[1] != c || w_pw.shape[2] != 1 || w_pw.shape[3] != 1 {
        return Err(Error::shape(
            "sep_quantization_error",
            format!("pointwise weight {:?}, want [O, {c}, 1, 1]", w_pw.shape),
        ));
    }
    let dw_spec = ConvSpec { groups: c, ..spec };
    let pw_spec = ConvSpec::plain(1, 0);

    let mut tape = Tape::new();
    let ai = tape.leaf(a.shape.clone(), a.data.clone())?;
    let w1 = tape.leaf(w_dw.shape.clone(), w_dw.data.clone())?;
    let w2 = tape.leaf(w_pw.shape.clone(), w_pw.data.clone())?;

    let mid = tape.conv2d(ai, w1, dw_spec)?;
    let reference = tape.conv2d(mid, w2, pw_spec)?;

    let a2 = binconv_forward(&mut tape, ai, w1, dw_spec)?;
    let b2 = tape.sign_ste(w2)?;
    let conv2 = tape.conv2d(a2, b2, pw_spec)?;
    let beta2 = compute_beta(&mut tape, w2)?;
    let approx = tape.scale_channels(conv2, beta2)?;

    mse(&mut tape, reference, approx)
}

fn mse(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<f32> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean(sq)?;
    Ok(tape.data(m)[0])
}

/// Executes one binary convolution during tape-free inference. The float
/// runner signs the latent weights on the fly; the deploy module provides a
/// bit-packed runner keyed by the weight's parameter name.
pub trait BinConvRunner {
    fn run(&self, store: &ParamStore, conv: &BinConvParams, a: &Tensor) -> Result<Tensor>;
}

/// Reference runner: Eq. 3 in plain f32 over sign tensors.
pub struct FloatSignRunner;

impl BinConvRunner for FloatSignRunner {
    fn run(&self, store: &ParamStore, conv: &BinConvParams, a: &Tensor) -> Result<Tensor> {
        let wshape = store.get(conv.weight).shape.clone();
        binconv_infer(a, &conv.sign_weights(store), &conv.beta(store), &wshape, &conv.spec)
    }
}

/// Tape-free Eq. 3 forward over plain tensors; shares the conv kernels
/// with the tape path so eval-mode and training forwards agree bitwise.
pub fn binconv_infer(a: &Tensor, w_sign: &[f32], beta: &[f32], wshape: &[usize], spec: &ConvSpec) -> Result<Tensor> {
    let (kh, kw) = (wshape[2], wshape[3]);
    let sign_a: Vec<f32> = a.data.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
    let (conv, cshape) = kernels::conv2d(&sign_a, &a.shape, w_sign, wshape, spec)?;
    let k = infer_k(a, kh, kw, spec)?;
    Ok(apply_beta_k(&conv, &cshape, &k, spec.groups, beta))
}

/// K map for the tape-free path: [N, groups, Oh, Ow] flattened.
pub(crate) fn infer_k(a: &Tensor, kh: usize, kw: usize, spec: &ConvSpec) -> Result<Vec<f32>> {
    let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
    let g = spec.groups;
    let cpg = c / g;
    let hw = h * w;
    let mut d = vec![0.0f32; n * g * hw];
    for s in 0..n {
        for gi in 0..g {
            let dst = &mut d[(s * g + gi) * hw..(s * g + gi + 1) * hw];
            for ci in 0..cpg {
                let src = &a.data[(s * c + gi * cpg + ci) * hw..(s * c + gi * cpg + ci + 1) * hw];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v.abs();
                }
            }
            for o in dst.iter_mut() {
                *o /= cpg as f32;
            }
        }
    }
    let avg = vec![1.0 / (kh * kw) as f32; g * kh * kw];
    let dspec = ConvSpec { groups: g, ..*spec };
    let (k, _) = kernels::conv2d(&d, &[n, g, h, w], &avg, &[g, 1, kh, kw], &dspec)?;
    Ok(k)
}

/// out[o, p] = conv[o, p] · K[group(o), p] · β[o], matching the tape path's
/// multiply order so results agree bitwise.
pub(crate) fn apply_beta_k(conv: &[f32], cshape: &[usize], k: &[f32], groups: usize, beta: &[f32]) -> Tensor {
    let (n, o, hw) = (cshape[0], cshape[1], cshape[2] * cshape[3]);
    let opg = o / groups;
    let mut out = vec![0.0f32; conv.len()];
    for s in 0..n {
        for co in 0..o {
            let gi = co / opg;
            let kmap = &k[(s * groups + gi) * hw..(s * groups + gi + 1) * hw];
            let src = &conv[(s * o + co) * hw..(s * o + co + 1) * hw];
            let dst = &mut out[(s * o + co) * hw..(s * o + co + 1) * hw];
            let b = beta[co];
            for ((d, &v), &kk) in dst.iter_mut().zip(src).zip(kmap) {
                *d = v * kk * b;
            }
        }
    }
    Tensor { shape: cshape.to_vec(), data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
        Tensor { shape, data }
    }

    #[test]
    fn beta_direct_formula() {
        let mut tape = Tape::new();
        let w = tape.leaf(vec![1, 1, 2, 2], vec![0.5, -1.5, 2.0, -1.0]).unwrap();
        let beta = compute_beta(&mut tape, w).unwrap();
        assert!((tape.data(beta)[0] - 1.25).abs() < 1e-7);

        let mut tape2 = Tape::new();
        let z = tape2.leaf(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let beta0 = compute_beta(&mut tape2, z).unwrap();
        assert_eq!(tape2.data(beta0)[0], 0.0);
    }

    #[test]
    fn k_of_constant_magnitude_is_constant_interior() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1, 3, 5, 5], vec![-2.0; 75]).unwrap();
        let k = compute_k(&mut tape, a, 3, 3, ConvSpec::plain(1, 0)).unwrap();
        assert_eq!(tape.shape(k), &[1, 1, 3, 3]);
        for &v in tape.data(k) {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_by_one_approximation_is_exact() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let w = tape.leaf(vec![1, 1, 1, 1], vec![-0.5]).unwrap();
        let out = binconv_forward(&mut tape, a, w, ConvSpec::plain(1, 0)).unwrap();
        assert!((tape.data(out)[0] - -1.5).abs() < 1e-7);
    }

    #[test]
    fn exactly_representable_case_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor {
            shape: vec![1, 2, 4, 4],
            data: (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(),
        };
        let w = Tensor {
            shape: vec![3, 2, 3, 3],
            data: (0..54).map(|_| if rng.gen_bool(0.5) { 0.75 } else { -0.75 }).collect(),
        };
        let err = quantization_error(&a, &w, ConvSpec::plain(1, 0)).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn binconv_matches_naive_reference() {
        // Independent scalar-loop recomputation of Eq. 3 on a random case.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rng_tensor(&mut rng, vec![1, 4, 8, 8]);
        let w = rng_tensor(&mut rng, vec![4, 4, 3, 3]);
        let spec = ConvSpec::plain(1, 1);

        let mut tape = Tape::new();
        let ai = tape.leaf(a.shape.clone(), a.data.clone()).unwrap();
        let wi = tape.leaf(w.shape.clone(), w.data.clone()).unwrap();
        let got = binconv_forward(&mut tape, ai, wi, spec).unwrap();

        let naive = naive_binconv(&a, &w, &spec);
        let gd = tape.data(got);
        assert_eq!(gd.len(), naive.len());
        for (x, y) in gd.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }

        // The tape-free inference path agrees with the tape path bitwise.
        let beta: Vec<f32> = w.data.chunks_exact(36).map(|f| f.iter().map(|v| v.abs()).sum::<f32>() / 36.0).collect();
        let ws: Vec<f32> = w.data.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
        let inf = binconv_infer(&a, &ws, &beta, &w.shape, &spec).unwrap();
        assert_eq!(inf.data, gd);
    }

    fn naive_binconv(a: &Tensor, w: &Tensor, spec: &ConvSpec) -> Vec<f32> {
        let (n, c, h, wd) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        let (o, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(wd, kw);
        let nf = (c * kh * kw) as f32;
        let beta: Vec<f32> = w
            .data
            .chunks_exact(c * kh * kw)
            .map(|f| f.iter().map(|v| v.abs()).sum::<f32>() / nf)
            .collect();
        let sgn = |v: f32| if v >= 0.0 { 1.0f32 } else { -1.0 };
        let mut out = vec![0.0f32; n * o * oh * ow];
        for s in 0..n {
            // D and K maps
            let mut dmap = vec![0.0f32; h * wd];
            for ci in 0..c {
                for p in 0..h * wd {
                    dmap[p] += a.data[(s * c + ci) * h * wd + p].abs();
                }
            }
            for p in dmap.iter_mut() {
                *p /= c as f32;
            }
            for co in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        let mut kacc = 0.0f32;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                kacc += dmap[iy as usize * wd + ix as usize] / (kh * kw) as f32;
                                for ci in 0..c {
                                    let av = a.data[((s * c + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data[((co * c + ci) * kh + ky) * kw + kx];
                                    acc += sgn(av) * sgn(wv);
                                }
                            }
                        }
                        out[((s * o + co) * oh + oy) * ow + ox] = acc * kacc * beta[co];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scale_and_sign_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rng_tensor(&mut rng, vec![1, 2, 6, 6]);
        let w = rng_tensor(&mut rng, vec![2, 2, 3, 3]);
        let spec = ConvSpec::plain(1, 1);

        let run = |av: &Tensor, wv: &Tensor| -> Vec<f32> {
            let mut tape = Tape::new();
            let ai = tape.leaf(av.shape.clone(), av.data.clone()).unwrap();
            let wi = tape.leaf(wv.shape.clone(), wv.data.clone()).unwrap();
            let o = binconv_forward(&mut tape, ai, wi, spec).unwrap();
            tape.data(o).to_vec()
        };

        let base = run(&a, &w);
        let a3 = Tensor { shape: a.shape.clone(), data: a.data.iter().map(|v| v * 3.0).collect() };
        for (x, y) in run(&a3, &w).iter().zip(&base) {
            assert!((x - 3.0 * y).abs() < 3e-5 * y.abs().max(1.0));
        }
        let w2 = Tensor { shape: w.shape.clone(), data: w.data.iter().map(|v| v * 2.0).collect() };
        for (x, y) in run(&a, &w2).iter().zip(&base) {
            assert!((x - 2.0 * y).abs() < 2e-5 * y.abs().max(1.0));
        }
    }

    #[test]
    fn ste_gradient_vanishes_outside_unit_window() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let a = tape.leaf_grad(vec![1, 1, 1, 4], vec![0.3, -0.9, 1.7, -2.5]).unwrap();
        let w = tape.leaf(vec![1, 1, 1, 1], vec![0.8]).unwrap();
        let out = binconv_forward(&mut tape, a, w, ConvSpec::plain(1, 0)).unwrap();
        let loss = tape.sum(out).unwrap();
        let g = tape.backward(loss, &mut store).unwrap();
        let ga = g.of(a).unwrap();
        // |A| > 1 coordinates still receive gradient through the K path,
        // but the sign-path contribution is zero; probe it in isolation.
        let mut tape2 = Tape::new();
        let a2 = tape2.leaf_grad(vec![4], vec![0.3, -0.9, 1.7, -2.5]).unwrap();
        let s2 = tape2.sign_ste(a2).unwrap();
        let l2 = tape2.sum(s2).unwrap();
        let g2 = tape2.backward(l2, &mut store).unwrap();
        assert_eq!(g2.of(a2).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ga.len(), 4);
    }

    fn gauss_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
                let u2: f32 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            })
            .collect();
        Tensor { shape, data }
    }

    /// The module's headline property. Unit Gaussian entries make the
    /// shape-matched dense conv (cin·k² = 576-term sums) and the sep pair
    /// (9-term then 64-term) produce equal-variance references, so the raw
    /// MSE comparison is scale-fair; 64 channels concentrate each trial's
    /// error enough that the ~17% mean gap decides nearly every pair.
    #[test]
    fn sep_error_exceeds_plain_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ConvSpec::plain(1, 1);
        let mut sep_wins = 0;
        let (mut sep_sum, mut plain_sum) = (0.0f64, 0.0f64);
        let trials = 100;
        for _ in 0..trials {
            let a = gauss_tensor(&mut rng, vec![2, 64, 8, 8]);
            let w = gauss_tensor(&mut rng, vec![64, 64, 3, 3]);
            let w1 = gauss_tensor(&mut rng, vec![64, 1, 3, 3]);
            let w2 = gauss_tensor(&mut rng, vec![64, 64, 1, 1]);
            let plain = quantization_error(&a, &w, spec).unwrap();
            let sep = sep_quantization_error(&a, &w1, &w2, spec).unwrap();
            plain_sum += plain as f64;
            sep_sum += sep as f64;
            if sep > plain {
                sep_wins += 1;
            }
        }
        assert!(sep_sum > plain_sum, "mean sep {:.3} <= mean plain {:.3}", sep_sum / 100.0, plain_sum / 100.0);
        assert!(sep_wins >= 95, "sep error larger in only {sep_wins}/{trials} trials");
    }
}
