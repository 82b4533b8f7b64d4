//! Dense linear algebra, activations, the Adam optimizer, the cosine learning
//! rate schedule and a central finite-difference gradient checker.
//!
//! Everything here is generic over [`Real`] so the same code path runs in
//! 32-bit (training) and 64-bit (verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, Range, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of every LeakyReLU in the field MLPs.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Scalar type of the numeric pipeline (`f32` for training, `f64` for verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> DenseMatrix<R> {
    pub fn new(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "matrix",
                format!("entry {i} is not finite"),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = R::one();
        }
        m
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> R {
        self.data[row * self.cols + col]
    }
}

/// `weights · input + bias`.
pub fn linear_forward<R: Real>(
    input: &[R],
    weights: &DenseMatrix<R>,
    bias: &[R],
) -> Result<Vec<R>> {
    if input.len() != weights.cols || bias.len() != weights.rows {
        return Err(Error::config(format!(
            "linear layer expects input {} and bias {}, got {} and {}",
            weights.cols,
            weights.rows,
            input.len(),
            bias.len()
        )));
    }
    let mut out = bias.to_vec();
    affine_into(&weights.data, bias, input, &mut out);
    Ok(out)
}

#[inline]
fn affine_into<R: Real>(weights: &[R], bias: &[R], input: &[R], out: &mut [R]) {
    let cols = input.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &weights[i * cols..(i + 1) * cols];
        let mut acc = bias[i];
        for (w, x) in row.iter().zip(input) {
            acc += *w * *x;
        }
        *o = acc;
    }
}

pub fn leaky_relu<R: Real>(x: &[R], slope: R) -> Vec<R> {
    x.iter()
        .map(|&v| if v >= R::zero() { v } else { slope * v })
        .collect()
}

/// Fully connected network with LeakyReLU between layers and a linear output.
///
/// Parameters live in one flat buffer; layer `l` stores its `out x in`
/// row-major weights followed by its `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<R> {
    widths: Vec<usize>,
    params: Vec<R>,
}

/// Post-activation values of every layer, recorded by [`Mlp::forward_traced`].
#[derive(Debug, Clone, Default)]
pub struct MlpTrace<R> {
    acts: Vec<Vec<R>>,
}

impl<R: Real> MlpTrace<R> {
    pub fn output(&self) -> &[R] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[R] {
        self.acts.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<R: Real> Mlp<R> {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("invalid MLP widths {widths:?}")));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![R::zero(); mlp_param_count(widths)],
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init<G: Rng>(widths: &[usize], rng: &mut G) -> Result<Self> {
        let mut mlp = Self::zeros(widths)?;
        for l in 0..mlp.num_layers() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = mlp.layer_ranges(l);
            for p in &mut mlp.params[w] {
                *p = R::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    pub fn from_params(widths: &[usize], params: Vec<R>) -> Result<Self> {
        if widths.len() < 2 || params.len() != mlp_param_count(widths) {
            return Err(Error::config(format!(
                "MLP widths {widths:?} need {} parameters, got {}",
                mlp_param_count(widths),
                params.len()
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    /// Weight and bias ranges of layer `l` inside the flat parameter buffer.
    pub fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let mut off = 0;
        for k in 0..l {
            off += self.widths[k] * self.widths[k + 1] + self.widths[k + 1];
        }
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    pub fn layer(&self, l: usize) -> (DenseMatrix<R>, Vec<R>) {
        let (w, b) = self.layer_ranges(l);
        (
            DenseMatrix {
                rows: self.widths[l + 1],
                cols: self.widths[l],
                data: self.params[w].to_vec(),
            },
            self.params[b].to_vec(),
        )
    }

    pub fn forward(&self, input: &[R]) -> Result<Vec<R>> {
        let mut trace = MlpTrace::default();
        self.forward_traced(input, &mut trace)?;
        Ok(trace.acts.pop().unwrap_or_default())
    }

    /// Forward pass recording every layer's activations; reuses `trace` buffers.
    pub fn forward_traced(&self, input: &[R], trace: &mut MlpTrace<R>) -> Result<()> {
        if input.len() != self.widths[0] {
            return Err(Error::config(format!(
                "MLP input width {} != {}",
                input.len(),
                self.widths[0]
            )));
        }
        let n = self.num_layers();
        trace.acts.resize_with(n + 1, Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);
        let slope = R::of(LEAKY_SLOPE);
        let mut off = 0;
        for l in 0..n {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let weights = &self.params[off..off + i * o];
            let bias = &self.params[off + i * o..off + i * o + o];
            off += i * o + o;
            let (prev, rest) = trace.acts.split_at_mut(l + 1);
            let out = &mut rest[0];
            out.resize(o, R::zero());
            affine_into(weights, bias, &prev[l], out);
            let hidden = l + 1 < n;
            for v in out.iter_mut() {
                if hidden && *v < R::zero() {
                    *v = *v * slope;
                }
                if !v.is_finite() {
                    return Err(Error::numerical(
                        format!("mlp layer {l}"),
                        "non-finite activation",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Reverse-mode pass: accumulates parameter gradients into `grad_params`
    /// and returns the gradient with respect to the input.
    pub fn backward(
        &self,
        trace: &MlpTrace<R>,
        grad_output: &[R],
        grad_params: &mut [R],
    ) -> Vec<R> {
        let n = self.num_layers();
        debug_assert_eq!(grad_output.len(), self.output_width());
        debug_assert_eq!(grad_params.len(), self.params.len());
        let slope = R::of(LEAKY_SLOPE);
        let mut delta = grad_output.to_vec();
        let mut offsets = Vec::with_capacity(n);
        let mut off = 0;
        for l in 0..n {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        for l in (0..n).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            if l + 1 < n {
                for (d, a) in delta.iter_mut().zip(&trace.acts[l + 1]) {
                    if *a < R::zero() {
                        *d *= slope;
                    }
                }
            }
            let input = &trace.acts[l];
            let off = offsets[l];
            let weights = &self.params[off..off + i * o];
            let (gw, gb) = grad_params[off..off + i * o + o].split_at_mut(i * o);
            let mut grad_in = vec![R::zero(); i];
            for r in 0..o {
                let d = delta[r];
                gb[r] += d;
                if d == R::zero() {
                    continue;
                }
                let row = &weights[r * i..(r + 1) * i];
                let grow = &mut gw[r * i..(r + 1) * i];
                for c in 0..i {
                    grow[c] += d * input[c];
                    grad_in[c] += d * row[c];
                }
            }
            delta = grad_in;
        }
        delta
    }
}

/// One combined forward and backward pass:
/// returns `(output, grad_params, grad_input)`.
pub fn mlp_forward_backward<R: Real>(
    mlp: &Mlp<R>,
    input: &[R],
    grad_output: &[R],
) -> Result<(Vec<R>, Vec<R>, Vec<R>)> {
    if grad_output.len() != mlp.output_width() {
        return Err(Error::config(format!(
            "grad_output width {} != {}",
            grad_output.len(),
            mlp.output_width()
        )));
    }
    let mut trace = MlpTrace::default();
    mlp.forward_traced(input, &mut trace)?;
    let mut grad_params = vec![R::zero(); mlp.params().len()];
    let grad_input = mlp.backward(&trace, grad_output, &mut grad_params);
    Ok((trace.output().to_vec(), grad_params, grad_input))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.96,
            epsilon: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<R: Real> AdamState<R> {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![R::zero(); len],
            v: vec![R::zero(); len],
            step: 0,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            epsilon: hyper.epsilon,
        }
    }

    /// Bias-corrected Adam update.
    ///
    /// Entries whose gradient is exactly zero are skipped (moments and
    /// parameter untouched), so hash-table rows that no sample touched stay put.
    pub fn step(&mut self, params: &mut [R], grads: &[R], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::config(format!(
                "adam lengths differ: params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if lr <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let (one_b1, one_b2) = (R::of(1.0 - self.beta1), R::of(1.0 - self.beta2));
        let step_size = R::of(lr / bc1);
        let inv_sqrt_bc2 = R::of(1.0 / bc2.sqrt());
        let eps = R::of(self.epsilon);
        for i in 0..params.len() {
            let g = grads[i];
            if g == R::zero() {
                continue;
            }
            let m = b1 * self.m[i] + one_b1 * g;
            let v = b2 * self.v[i] + one_b2 * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + phase.cos()))
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub h: f64,
    /// At most this many coordinates are probed per parameter block.
    pub max_coords_per_block: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            max_coords_per_block: 512,
            seed: 0,
        }
    }
}

/// Compares the analytic gradient of `loss_fn` at `params` with central
/// differences and returns the maximum of
/// `|analytic - fd| / max(1, |analytic|)` over the probed coordinates.
///
/// `loss_fn` returns the loss and its analytic gradient. `blocks` partitions
/// the parameter vector; an empty slice treats it as one block.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[f64],
    blocks: &[Range<usize>],
    opts: &FdOptions,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-6..=1e-3).contains(&opts.h) {
        return Err(Error::config(format!(
            "fd step {} outside [1e-6, 1e-3]",
            opts.h
        )));
    }
    let (value, analytic) = loss_fn(params)?;
    if !value.is_finite() {
        return Err(Error::numerical("finite_diff_check", "loss is not finite"));
    }
    if analytic.len() != params.len() {
        return Err(Error::config(
            "analytic gradient length differs from params",
        ));
    }
    let whole = [0..params.len()];
    let blocks = if blocks.is_empty() {
        &whole[..]
    } else {
        blocks
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for block in blocks {
        let len = block.len();
        if len == 0 {
            continue;
        }
        let picks: Vec<usize> = if len <= opts.max_coords_per_block {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.max_coords_per_block).into_vec()
        };
        for p in picks {
            let i = block.start + p;
            let orig = probe[i];
            probe[i] = orig + opts.h;
            let (plus, _) = loss_fn(&probe)?;
            probe[i] = orig - opts.h;
            let (minus, _) = loss_fn(&probe)?;
            probe[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numerical(
                    "finite_diff_check",
                    format!("loss not finite at coordinate {i}"),
                ));
            }
            let fd = (plus - minus) / (2.0 * opts.h);
            let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn linear_forward_cases() {
        let id = DenseMatrix::<f64>::identity(2);
        assert_eq!(
            linear_forward(&[1.0, 2.0], &id, &[0.0, 0.0]).unwrap(),
            vec![1.0, 2.0]
        );
        let zero = DenseMatrix::<f64>::zeros(1, 2);
        assert_eq!(
            linear_forward(&[7.0, -3.0], &zero, &[3.0]).unwrap(),
            vec![3.0]
        );
        let sum = DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(
            linear_forward(&[2.0, 3.0], &sum, &[0.0]).unwrap(),
            vec![5.0]
        );
        assert!(matches!(
            linear_forward(&[1.0], &sum, &[0.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn leaky_relu_cases() {
        assert_eq!(leaky_relu(&[1.0, -1.0], 0.01), vec![1.0, -0.01]);
        assert_eq!(leaky_relu(&[0.0], 0.3), vec![0.0]);
        assert!((leaky_relu(&[-2.0f64], 0.1)[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn one_layer_identity_net() {
        let mlp = Mlp::from_params(&[1, 1], vec![1.0f64, 0.0]).unwrap();
        let (out, gp, gi) = mlp_forward_backward(&mlp, &[0.7], &[1.0]).unwrap();
        assert_eq!(out, vec![0.7]);
        assert_eq!(gi, vec![1.0]);
        assert_eq!(gp, vec![0.7, 1.0]);
    }

    #[test]
    fn zero_input_zero_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::<f64>::init(&[4, 8, 3], &mut rng).unwrap();
        assert_eq!(mlp.forward(&[0.0; 4]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mlp = Mlp::<f64>::init(&[3, 5, 2], &mut rng).unwrap();
            let mut params = mlp.params().to_vec();
            for p in &mut params[mlp.layer_ranges(0).1] {
                *p = rng.gen_range(-0.5..0.5);
            }
            let input: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let go: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let widths = mlp.widths().to_vec();
            // Scalar loss <output, go> over parameters followed by inputs.
            let loss = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                let n = mlp_param_count(&widths);
                let net = Mlp::from_params(&widths, x[..n].to_vec())?;
                let (out, gp, gi) = mlp_forward_backward(&net, &x[n..], &go)?;
                let v = out.iter().zip(&go).map(|(a, b)| a * b).sum();
                Ok((v, gp.into_iter().chain(gi).collect()))
            };
            let mut x = params.clone();
            x.extend_from_slice(&input);
            let err = finite_diff_check(loss, &x, &[], &FdOptions::default()).unwrap();
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn nan_weights_name_the_layer() {
        let mut mlp = Mlp::<f64>::zeros(&[2, 2, 1]).unwrap();
        let (w, _) = mlp.layer_ranges(1);
        mlp.params_mut()[w.start] = f64::NAN;
        let err = mlp.forward(&[1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn adam_first_step_is_sign_of_gradient() {
        let mut st = AdamState::<f64>::new(1, AdamHyper::default());
        let mut p = [0.0];
        st.step(&mut p, &[1.0], 1e-3).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_two_constant_steps_stay_within_band() {
        let lr = 1e-3;
        let mut st = AdamState::<f64>::new(1, AdamHyper::default());
        let mut p = [0.0];
        let mut prev = 0.0;
        for _ in 0..2 {
            st.step(&mut p, &[1.0], lr).unwrap();
            let upd = (p[0] - prev).abs();
            assert!(upd >= 0.9 * lr && upd <= lr * (1.0 + 1e-12), "{upd}");
            prev = p[0];
        }
    }

    #[test]
    fn adam_rejects_nan_with_index() {
        let mut st = AdamState::<f32>::new(3, AdamHyper::default());
        let mut p = [0.0; 3];
        let err = st.step(&mut p, &[0.0, 0.0, f32::NAN], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 2 }));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01).unwrap(), 0.01);
        assert!(cosine_lr(100, 100, 0.01).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.01).unwrap() - 0.005).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.01), Err(Error::Config(_))));
    }

    #[test]
    fn fd_check_quadratic_and_constant() {
        let quad = |x: &[f64]| Ok((0.5 * x[0] * x[0], vec![x[0]]));
        assert!(finite_diff_check(quad, &[3.0], &[], &FdOptions::default()).unwrap() < 1e-9);
        let constant = |x: &[f64]| Ok((4.0, vec![0.0; x.len()]));
        assert_eq!(
            finite_diff_check(constant, &[1.0, 2.0], &[], &FdOptions::default()).unwrap(),
            0.0
        );
        let bad = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(finite_diff_check(bad, &[1.0], &[], &FdOptions::default()).is_err());
    }

    proptest! {
        #[test]
        fn adam_zero_gradient_is_identity(
            params in proptest::collection::vec(-10.0f64..10.0, 1..16),
            warm in proptest::collection::vec(-1.0f64..1.0, 16),
            lr in 1e-5f64..1e-1,
        ) {
            let n = params.len();
            let mut st = AdamState::<f64>::new(n, AdamHyper::default());
            let mut scratch = params.clone();
            st.step(&mut scratch, &warm[..n], lr).unwrap();
            let before = scratch.clone();
            st.step(&mut scratch, &vec![0.0; n], lr).unwrap();
            prop_assert_eq!(before, scratch);
        }

        #[test]
        fn cosine_is_non_increasing(total in 1usize..500, lr0 in 1e-6f64..1.0) {
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let lr = cosine_lr(s, total, lr0).unwrap();
                prop_assert!(lr <= prev + 1e-18);
                prev = lr;
            }
        }
    }
}
