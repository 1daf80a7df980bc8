//! Shared test plumbing: deterministic probe data and a central-difference
//! gradient oracle driven through the public tape API. The per-primitive
//! sweeps live here so the focused gradient suite and the acceptance run
//! exercise the same instances.
#![allow(dead_code)] // each test target uses its own subset

use bnas_core::ndtensor::{ConvSpec, ParamStore, Tape, TensorId};
use bnas_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

/// Magnitudes in [lo, hi) with random sign: bounded away from zero so a ±ε
/// probe cannot cross the kink of |x|, relu, or a sign flip.
pub fn signed_away(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = r.gen_range(lo..hi);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Pairwise-distinct values with gaps ≥ step (and none within step/2 of
/// zero), shuffled: max-pool argmaxes stay put under a ±ε probe and never
/// tie with zero padding.
pub fn separated(r: &mut ChaCha8Rng, n: usize, step: f32) -> Vec<f32> {
    let mut v: Vec<f32> =
        (0..n).map(|i| (i as f32 - n as f32 / 2.0) * step + step / 2.0).collect();
    for i in (1..n).rev() {
        v.swap(i, r.gen_range(0..=i));
    }
    v
}

pub type Build = dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>;

pub const FD_EPS: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

/// Max relative error between tape gradients and central differences of a
/// weighted-sum loss, over every element of every input. `fd` lets the STE
/// check difference a smooth surrogate against the analytic path; everyone
/// else goes through [`check_grads`] with one builder for both roles.
pub fn check_grads_vs(name: &str, inputs: &[(Vec<usize>, Vec<f32>)], analytic: &Build, fd: &Build) {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let ids: Vec<TensorId> =
        inputs.iter().map(|(s, d)| tape.leaf_grad(s.clone(), d.clone()).unwrap()).collect();
    let out = analytic(&mut tape, &ids).unwrap();
    let w = loss_weights(tape.data(out).len());
    let wleaf = tape.leaf(tape.shape(out).to_vec(), w.clone()).unwrap();
    let prod = tape.mul(out, wleaf).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss, &mut store).unwrap();

    let mut worst = (0.0f64, String::new());
    for (ti, (_, data)) in inputs.iter().enumerate() {
        let an = grads.of(ids[ti]).expect("probe leaf missing its gradient");
        for j in 0..data.len() {
            let (mut hi, mut lo) = (data.clone(), data.clone());
            hi[j] += FD_EPS;
            lo[j] -= FD_EPS;
            let lp = fd_loss(inputs, ti, &hi, fd, &w);
            let lm = fd_loss(inputs, ti, &lo, fd, &w);
            let h = hi[j] as f64 - lo[j] as f64; // realized step
            let g = (lp - lm) / h;
            let a = an[j] as f64;
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1.0);
            if rel > worst.0 {
                worst = (rel, format!("{name}: input {ti} elem {j}: fd {g:.6e} vs tape {a:.6e}"));
            }
        }
    }
    assert!(worst.0 < FD_TOL, "{} (rel err {:.3e})", worst.1, worst.0);
}

pub fn check_grads(name: &str, inputs: &[(Vec<usize>, Vec<f32>)], build: &Build) {
    check_grads_vs(name, inputs, build, build);
}

fn fd_loss(
    inputs: &[(Vec<usize>, Vec<f32>)],
    ti: usize,
    probe: &[f32],
    build: &Build,
    w: &[f32],
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .enumerate()
        .map(|(i, (s, d))| {
            let d = if i == ti { probe.to_vec() } else { d.clone() };
            tape.leaf(s.clone(), d).unwrap()
        })
        .collect();
    let out = build(&mut tape, &ids).unwrap();
    tape.data(out).iter().zip(w).map(|(&o, &wi)| o as f64 * wi as f64).sum()
}

/// Fixed pseudo-random weights with |w| ∈ [0.3, 1): no output element gets
/// weighted out of the check.
fn loss_weights(n: usize) -> Vec<f32> {
    let mut r = rng(0x5EED_0001);
    signed_away(&mut r, n, 0.3, 1.0)
}

fn t(shape: &[usize], data: Vec<f32>) -> (Vec<usize>, Vec<f32>) {
    (shape.to_vec(), data)
}

// ── per-primitive sweeps ────────────────────────────────────────────────

pub fn sweep_elementwise() {
    let mut r = rng(11);
    let pair = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0)), t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0))];
    check_grads("add", &pair, &|tp, ids| tp.add(ids[0], ids[1]));
    check_grads("sub", &pair, &|tp, ids| tp.sub(ids[0], ids[1]));
    check_grads("mul", &pair, &|tp, ids| tp.mul(ids[0], ids[1]));
    let one = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0))];
    check_grads("scale", &one, &|tp, ids| tp.scale(ids[0], -1.7));
    let away = [t(&[3, 4], signed_away(&mut r, 12, 0.1, 1.0))];
    check_grads("abs", &away, &|tp, ids| tp.abs(ids[0]));
    check_grads("relu", &away, &|tp, ids| tp.relu(ids[0]));
}

/// sign_ste's forward is a step function, so its gradient is checked
/// against central differences of the clipped straight-through surrogate
/// hardtanh(x) = relu(x+1) − relu(x−1) − 1, which shares the STE's exact
/// derivative 1[|x| ≤ 1] away from the clip points. Probes cover both the
/// pass-through band and the clipped region, clear of |x| ∈ {0, 1}.
pub fn sweep_sign_ste() {
    let mut r = rng(13);
    let mut vals = signed_away(&mut r, 12, 0.1, 0.85);
    vals.extend(signed_away(&mut r, 12, 1.1, 1.8));
    let inputs = [t(&[4, 6], vals)];
    let surrogate: &Build = &|tp, ids| {
        let ones = tp.leaf(vec![4, 6], vec![1.0; 24])?;
        let up = tp.add(ids[0], ones)?;
        let down = tp.sub(ids[0], ones)?;
        let ru = tp.relu(up)?;
        let rd = tp.relu(down)?;
        let span = tp.sub(ru, rd)?;
        tp.sub(span, ones)
    };
    check_grads_vs("sign_ste", &inputs, &|tp, ids| tp.sign_ste(ids[0]), surrogate);
}

pub fn sweep_matmul_linear() {
    let mut r = rng(17);
    let mm = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0)), t(&[4, 2], uniform(&mut r, 8, -1.0, 1.0))];
    check_grads("matmul", &mm, &|tp, ids| tp.matmul(ids[0], ids[1]));
    let lin = [
        t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0)),
        t(&[5, 4], uniform(&mut r, 20, -1.0, 1.0)),
        t(&[5], uniform(&mut r, 5, -1.0, 1.0)),
    ];
    check_grads("linear", &lin, &|tp, ids| tp.linear(ids[0], ids[1], Some(ids[2])));
    let lin2 = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0)), t(&[5, 4], uniform(&mut r, 20, -1.0, 1.0))];
    check_grads("linear_no_bias", &lin2, &|tp, ids| tp.linear(ids[0], ids[1], None));
}

pub fn sweep_conv2d() {
    let mut r = rng(19);
    let cases: &[(&str, [usize; 4], [usize; 4], ConvSpec)] = &[
        ("conv3_s1", [2, 2, 4, 4], [3, 2, 3, 3], ConvSpec::plain(1, 1)),
        ("conv3_s2", [1, 2, 5, 5], [2, 2, 3, 3], ConvSpec::plain(2, 1)),
        ("conv5_s1", [1, 1, 6, 6], [1, 1, 5, 5], ConvSpec::plain(1, 2)),
        ("dil3_s1", [1, 1, 7, 7], [2, 1, 3, 3], ConvSpec { stride: 1, dilation: 2, padding: 2, groups: 1 }),
        ("dil3_s2", [1, 1, 7, 7], [1, 1, 3, 3], ConvSpec { stride: 2, dilation: 2, padding: 2, groups: 1 }),
        ("group2", [1, 4, 4, 4], [2, 2, 3, 3], ConvSpec { stride: 1, dilation: 1, padding: 1, groups: 2 }),
        ("depthwise", [1, 3, 4, 4], [3, 1, 3, 3], ConvSpec { stride: 1, dilation: 1, padding: 1, groups: 3 }),
        ("pointwise", [1, 4, 3, 3], [2, 4, 1, 1], ConvSpec::plain(1, 0)),
    ];
    for &(name, xs, ws, spec) in cases {
        let inputs = [
            t(&xs, uniform(&mut r, xs.iter().product(), -1.0, 1.0)),
            t(&ws, uniform(&mut r, ws.iter().product(), -1.0, 1.0)),
        ];
        check_grads(name, &inputs, &move |tp, ids| tp.conv2d(ids[0], ids[1], spec));
    }
}

pub fn sweep_pooling() {
    let mut r = rng(23);
    for stride in [1usize, 2] {
        let x = [t(&[1, 2, 5, 5], separated(&mut r, 50, 0.013))];
        check_grads(&format!("maxpool3_s{stride}"), &x, &move |tp, ids| tp.maxpool3(ids[0], stride));
        let y = [t(&[1, 2, 5, 5], uniform(&mut r, 50, -1.0, 1.0))];
        check_grads(&format!("avgpool3_s{stride}"), &y, &move |tp, ids| tp.avgpool3(ids[0], stride));
    }
}

pub fn sweep_batchnorm() {
    let mut r = rng(29);
    let affine = [
        t(&[3, 2, 3, 3], uniform(&mut r, 54, -1.2, 1.2)),
        t(&[2], uniform(&mut r, 2, 0.7, 1.3)),
        t(&[2], uniform(&mut r, 2, -0.3, 0.3)),
    ];
    check_grads("batchnorm_train", &affine, &|tp, ids| {
        Ok(tp.batchnorm_train(ids[0], Some(ids[1]), Some(ids[2]), 1e-5)?.0)
    });
    let plain = [t(&[4, 2, 2, 2], uniform(&mut r, 32, -1.2, 1.2))];
    check_grads("batchnorm_train_plain", &plain, &|tp, ids| {
        Ok(tp.batchnorm_train(ids[0], None, None, 1e-5)?.0)
    });
    let mean = uniform(&mut r, 3, -0.2, 0.2);
    let var = uniform(&mut r, 3, 0.5, 1.5);
    let eval = [
        t(&[2, 3, 2, 2], uniform(&mut r, 24, -1.0, 1.0)),
        t(&[3], uniform(&mut r, 3, 0.7, 1.3)),
        t(&[3], uniform(&mut r, 3, -0.3, 0.3)),
    ];
    check_grads("batchnorm_eval", &eval, &move |tp, ids| {
        tp.batchnorm_eval(ids[0], Some(ids[1]), Some(ids[2]), &mean, &var, 1e-5)
    });
}

pub fn sweep_shape_ops() {
    let mut r = rng(31);
    let cat = [
        t(&[2, 1, 3, 3], uniform(&mut r, 18, -1.0, 1.0)),
        t(&[2, 2, 3, 3], uniform(&mut r, 36, -1.0, 1.0)),
        t(&[2, 1, 3, 3], uniform(&mut r, 18, -1.0, 1.0)),
    ];
    check_grads("concat_channels", &cat, &|tp, ids| tp.concat_channels(ids));
    let crop = [t(&[1, 3, 4, 5], uniform(&mut r, 60, -1.0, 1.0))];
    check_grads("crop_offset", &crop, &|tp, ids| tp.crop_offset(ids[0], 1, 2));
    let rs = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0))];
    check_grads("reshape", &rs, &|tp, ids| tp.reshape(ids[0], vec![2, 6]));
}

pub fn sweep_reductions() {
    let mut r = rng(37);
    let x = [t(&[2, 3, 3, 3], uniform(&mut r, 54, -1.0, 1.0))];
    check_grads("global_avg_pool", &x, &|tp, ids| tp.global_avg_pool(ids[0]));
    for groups in [1usize, 2, 4] {
        let g = [t(&[2, 4, 2, 3], uniform(&mut r, 48, -1.0, 1.0))];
        check_grads(&format!("mean_groups_g{groups}"), &g, &move |tp, ids| {
            tp.mean_groups(ids[0], groups)
        });
    }
    let rm = [t(&[5, 7], uniform(&mut r, 35, -1.0, 1.0))];
    check_grads("row_mean", &rm, &|tp, ids| tp.row_mean(ids[0]));
    let s = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0))];
    check_grads("sum", &s, &|tp, ids| tp.sum(ids[0]));
    check_grads("mean", &s, &|tp, ids| tp.mean(ids[0]));
}

pub fn sweep_broadcast() {
    let mut r = rng(41);
    let sc = [t(&[2, 3, 2, 2], uniform(&mut r, 24, -1.0, 1.0)), t(&[3], uniform(&mut r, 3, -1.0, 1.0))];
    check_grads("scale_channels", &sc, &|tp, ids| tp.scale_channels(ids[0], ids[1]));
    for groups in [1usize, 2] {
        let mg = [
            t(&[1, 4, 3, 3], uniform(&mut r, 36, -1.0, 1.0)),
            t(&[1, groups, 3, 3], uniform(&mut r, groups * 9, -1.0, 1.0)),
        ];
        check_grads(&format!("mul_groups_g{groups}"), &mg, &|tp, ids| tp.mul_groups(ids[0], ids[1]));
    }
    let pk = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0))];
    check_grads("pick", &pk, &|tp, ids| tp.pick(ids[0], 7));
    let ms = [t(&[3, 4], uniform(&mut r, 12, -1.0, 1.0)), t(&[1], uniform(&mut r, 1, -1.0, 1.0))];
    check_grads("mul_scalar_t", &ms, &|tp, ids| tp.mul_scalar_t(ids[0], ids[1]));
}

pub fn sweep_softmax_loss() {
    let mut r = rng(43);
    let x = [t(&[4, 5], uniform(&mut r, 20, -1.5, 1.5))];
    check_grads("softmax_rows", &x, &|tp, ids| tp.softmax_rows(ids[0]));
    check_grads("log_softmax_rows", &x, &|tp, ids| tp.log_softmax_rows(ids[0]));
    let logits = [t(&[6, 5], uniform(&mut r, 30, -1.5, 1.5))];
    let labels: Vec<u32> = vec![0, 3, 2, 4, 1, 0];
    check_grads("cross_entropy", &logits, &move |tp, ids| tp.cross_entropy(ids[0], &labels));
}

/// Every autodiff primitive plus the STE surrogate, in one pass.
pub fn sweep_all_primitives() {
    sweep_elementwise();
    sweep_sign_ste();
    sweep_matmul_linear();
    sweep_conv2d();
    sweep_pooling();
    sweep_batchnorm();
    sweep_shape_ops();
    sweep_reductions();
    sweep_broadcast();
    sweep_softmax_loss();
}
