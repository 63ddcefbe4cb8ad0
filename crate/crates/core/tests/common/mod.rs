#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfusion_core::tensor::{Parameter, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values bounded away from zero, for ops with a kink at 0.
pub fn random_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights,
/// so every output element contributes to the checked gradient.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Var<'t> {
    let mut r = rng(seed ^ 0x5eed);
    let w = random_tensor(&mut r, &out.shape());
    let wv = out.tape().constant(w);
    out.mul(&wv).unwrap().sum()
}

/// Relative error with a small absolute floor so that near-zero
/// derivatives are judged on absolute agreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares tape gradients of `f` against central finite differences for
/// every element of every input. Returns the worst relative error.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let params: Vec<Parameter> =
        inputs.iter().enumerate().map(|(i, t)| Parameter::new(format!("in{i}"), t.clone())).collect();
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().item()
    };

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let g = &grads[&format!("in{i}")];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    worst
}

/// Straightforward nested-loop cross-correlation with explicit bounds tests.
pub fn conv2d_reference(x: &Tensor, k: &Tensor) -> Tensor {
    let s = x.shape();
    let ks = k.shape();
    let (b_n, ci_n, t_n, h_n, w_n) = (s[0], s[1], s[2], s[3], s[4]);
    let (co_n, kh, kw) = (ks[0], ks[2] as isize, ks[3] as isize);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = Tensor::zeros(&[b_n, co_n, t_n, h_n, w_n]);
    for b in 0..b_n {
        for co in 0..co_n {
            for t in 0..t_n {
                for y in 0..h_n as isize {
                    for xx in 0..w_n as isize {
                        let mut acc = 0.0;
                        for ci in 0..ci_n {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = y + dy - ph;
                                    let ix = xx + dx - pw;
                                    if iy < 0 || ix < 0 || iy >= h_n as isize || ix >= w_n as isize {
                                        continue;
                                    }
                                    let xi = (((b * ci_n + ci) * t_n + t) * h_n + iy as usize) * w_n + ix as usize;
                                    let ki = ((co * ci_n + ci) * kh as usize + dy as usize) * kw as usize + dx as usize;
                                    acc += x.data()[xi] * k.data()[ki];
                                }
                            }
                        }
                        let oi = (((b * co_n + co) * t_n + t) * h_n + y as usize) * w_n + xx as usize;
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn conv1d_reference(x: &Tensor, k: &Tensor) -> Tensor {
    let s = x.shape();
    let (b_n, ci_n, t_n, h_n, w_n) = (s[0], s[1], s[2], s[3], s[4]);
    let (co_n, kt) = (k.shape()[0], k.shape()[2] as isize);
    let pad = (kt - 1) / 2;
    let mut out = Tensor::zeros(&[b_n, co_n, t_n, h_n, w_n]);
    for b in 0..b_n {
        for co in 0..co_n {
            for t in 0..t_n as isize {
                for yx in 0..h_n * w_n {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for j in 0..kt {
                            let it = t + j - pad;
                            if it < 0 || it >= t_n as isize {
                                continue;
                            }
                            let xi = ((b * ci_n + ci) * t_n + it as usize) * h_n * w_n + yx;
                            acc += x.data()[xi] * k.data()[(co * ci_n + ci) * kt as usize + j as usize];
                        }
                    }
                    out.data_mut()[((b * co_n + co) * t_n + t as usize) * h_n * w_n + yx] = acc;
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
