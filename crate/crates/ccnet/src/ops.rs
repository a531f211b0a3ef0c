//! Forward and backward kernels for the layer ops.
//!
//! Every kernel is a pure function on [`Tensor3`] plus flat weight slices.
//! Inner loops run over the contiguous time axis (axpy/dot form) so the
//! compiler can vectorize them. Backward kernels take the upstream gradient
//! and return gradients for the input and the weights; pairing them with the
//! forward kernels is the job of the graph in [`crate::graph`].
//!
//! Weight layouts:
//! - pointwise: `[c_out][c_in]`
//! - depthwise: `[channels][kernel]`
//! - temporal:  `[c_out][c_in][kernel]`
//! - attention score map: `[channels][channels]` plus a bias per channel

use crate::tensor::{ShapeError, Tensor3};

/// Epsilon inside the layer-norm variance square root.
pub const EPS_LN: f64 = 1e-5;

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Cross-channel kernel-1 convolution: `out[b,o,t] = bias[o] + sum_i w[o,i] * x[b,i,t]`.
pub fn pointwise_conv(x: &Tensor3, w: &[f64], bias: &[f64]) -> Result<Tensor3, ShapeError> {
    let c_out = bias.len();
    assert!(c_out >= 1 && w.len() % c_out == 0, "weight/bias size mismatch");
    let c_in = w.len() / c_out;
    if x.channels() != c_in {
        return Err(ShapeError::ChannelMismatch {
            expected: c_in,
            got: x.channels(),
        });
    }
    let (b_n, _, t_n) = x.dims();
    let mut out = Tensor3::zeros(b_n, c_out, t_n);
    for b in 0..b_n {
        for o in 0..c_out {
            let row = out.row_mut(b, o);
            row.fill(bias[o]);
        }
        for i in 0..c_in {
            // x row is loaded once per (i, o) pair; time loop vectorizes.
            for o in 0..c_out {
                let wv = w[o * c_in + i];
                if wv != 0.0 {
                    let xrow_start = (b * c_in + i) * t_n;
                    let x_data = x.data();
                    let xrow = &x_data[xrow_start..xrow_start + t_n];
                    axpy(out.row_mut(b, o), wv, xrow);
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`pointwise_conv`]: returns `(dx, dw, dbias)`.
pub fn pointwise_conv_backward(
    x: &Tensor3,
    w: &[f64],
    c_out: usize,
    grad_out: &Tensor3,
) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let (b_n, c_in, t_n) = x.dims();
    debug_assert_eq!(grad_out.dims(), (b_n, c_out, t_n));
    let mut dx = Tensor3::zeros(b_n, c_in, t_n);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c_out];
    for b in 0..b_n {
        for o in 0..c_out {
            let grow = grad_out.row(b, o);
            db[o] += grow.iter().sum::<f64>();
            for i in 0..c_in {
                dw[o * c_in + i] += dot(grow, x.row(b, i));
                axpy(dx.row_mut(b, i), w[o * c_in + i], grow);
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel valid 1-D convolution (groups == channels):
/// `out[b,c,t] = bias[c] + sum_k w[c,k] * x[b,c,t+k]`, output time `T - K + 1`.
pub fn depthwise_temporal_conv(
    x: &Tensor3,
    w: &[f64],
    bias: &[f64],
    kernel: usize,
) -> Result<Tensor3, ShapeError> {
    let c = bias.len();
    assert!(kernel >= 1 && w.len() == c * kernel, "weight/bias size mismatch");
    if x.channels() != c {
        return Err(ShapeError::ChannelMismatch {
            expected: c,
            got: x.channels(),
        });
    }
    if x.time() < kernel {
        return Err(ShapeError::TimeTooShort {
            need: kernel,
            got: x.time(),
        });
    }
    let (b_n, _, t_in) = x.dims();
    let t_out = t_in - kernel + 1;
    let mut out = Tensor3::zeros(b_n, c, t_out);
    for b in 0..b_n {
        for ch in 0..c {
            let xrow = x.row(b, ch);
            let orow = out.row_mut(b, ch);
            orow.fill(bias[ch]);
            for k in 0..kernel {
                axpy(orow, w[ch * kernel + k], &xrow[k..k + t_out]);
            }
        }
    }
    Ok(out)
}

/// Backward of [`depthwise_temporal_conv`]: returns `(dx, dw, dbias)`.
pub fn depthwise_temporal_conv_backward(
    x: &Tensor3,
    w: &[f64],
    kernel: usize,
    grad_out: &Tensor3,
) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let (b_n, c, t_in) = x.dims();
    let t_out = t_in - kernel + 1;
    debug_assert_eq!(grad_out.dims(), (b_n, c, t_out));
    let mut dx = Tensor3::zeros(b_n, c, t_in);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c];
    for b in 0..b_n {
        for ch in 0..c {
            let grow = grad_out.row(b, ch);
            db[ch] += grow.iter().sum::<f64>();
            let xrow = x.row(b, ch);
            let dxrow = dx.row_mut(b, ch);
            for k in 0..kernel {
                dw[ch * kernel + k] += dot(grow, &xrow[k..k + t_out]);
                axpy(&mut dxrow[k..k + t_out], w[ch * kernel + k], grow);
            }
        }
    }
    (dx, dw, db)
}

/// Full valid temporal convolution:
/// `out[b,o,t] = bias[o] + sum_i sum_k w[o,i,k] * x[b,i,t+k]`, output time `T - K + 1`.
pub fn temporal_conv(
    x: &Tensor3,
    w: &[f64],
    bias: &[f64],
    c_in: usize,
    kernel: usize,
) -> Result<Tensor3, ShapeError> {
    let c_out = bias.len();
    assert!(
        kernel >= 1 && w.len() == c_out * c_in * kernel,
        "weight/bias size mismatch"
    );
    if x.channels() != c_in {
        return Err(ShapeError::ChannelMismatch {
            expected: c_in,
            got: x.channels(),
        });
    }
    if x.time() < kernel {
        return Err(ShapeError::TimeTooShort {
            need: kernel,
            got: x.time(),
        });
    }
    let (b_n, _, t_in) = x.dims();
    let t_out = t_in - kernel + 1;
    let mut out = Tensor3::zeros(b_n, c_out, t_out);
    for b in 0..b_n {
        for o in 0..c_out {
            out.row_mut(b, o).fill(bias[o]);
        }
        for i in 0..c_in {
            let xrow_start = (b * c_in + i) * t_in;
            for o in 0..c_out {
                let x_data = x.data();
                let xrow = &x_data[xrow_start..xrow_start + t_in];
                let orow = out.row_mut(b, o);
                for k in 0..kernel {
                    let wv = w[(o * c_in + i) * kernel + k];
                    if wv != 0.0 {
                        axpy(orow, wv, &xrow[k..k + t_out]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`temporal_conv`]: returns `(dx, dw, dbias)`.
pub fn temporal_conv_backward(
    x: &Tensor3,
    w: &[f64],
    c_out: usize,
    kernel: usize,
    grad_out: &Tensor3,
) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let (b_n, c_in, t_in) = x.dims();
    let t_out = t_in - kernel + 1;
    debug_assert_eq!(grad_out.dims(), (b_n, c_out, t_out));
    let mut dx = Tensor3::zeros(b_n, c_in, t_in);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c_out];
    for b in 0..b_n {
        for o in 0..c_out {
            let grow_start = (b * c_out + o) * t_out;
            db[o] += grad_out.data()[grow_start..grow_start + t_out]
                .iter()
                .sum::<f64>();
            for i in 0..c_in {
                let g_data = grad_out.data();
                let grow = &g_data[grow_start..grow_start + t_out];
                let xrow = x.row(b, i);
                for k in 0..kernel {
                    dw[(o * c_in + i) * kernel + k] += dot(grow, &xrow[k..k + t_out]);
                }
                let dxrow = dx.row_mut(b, i);
                for k in 0..kernel {
                    axpy(&mut dxrow[k..k + t_out], w[(o * c_in + i) * kernel + k], grow);
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-(batch, time) statistics saved by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormSaved {
    /// Channel mean at each (b, t), indexed `b * time + t`.
    pub mean: Vec<f64>,
    /// `1 / sqrt(var + EPS_LN)` at each (b, t).
    pub istd: Vec<f64>,
}

/// Channel-wise layer norm at each time step: subtract the channel mean,
/// divide by sqrt(population variance + 1e-5), then apply `gamma * . + beta`.
pub fn layer_norm(
    x: &Tensor3,
    gamma: &[f64],
    beta: &[f64],
) -> Result<(Tensor3, LayerNormSaved), ShapeError> {
    let (b_n, c_n, t_n) = x.dims();
    if gamma.len() != c_n || beta.len() != c_n {
        return Err(ShapeError::ChannelMismatch {
            expected: c_n,
            got: gamma.len(),
        });
    }
    let mut out = Tensor3::zeros(b_n, c_n, t_n);
    let mut mean = vec![0.0; b_n * t_n];
    let mut istd = vec![0.0; b_n * t_n];
    let inv_c = 1.0 / c_n as f64;
    for b in 0..b_n {
        for t in 0..t_n {
            let mut m = 0.0;
            for c in 0..c_n {
                m += x.get(b, c, t);
            }
            m *= inv_c;
            let mut var = 0.0;
            for c in 0..c_n {
                let d = x.get(b, c, t) - m;
                var += d * d;
            }
            var *= inv_c;
            let is = 1.0 / (var + EPS_LN).sqrt();
            mean[b * t_n + t] = m;
            istd[b * t_n + t] = is;
            for c in 0..c_n {
                let xn = (x.get(b, c, t) - m) * is;
                out.set(b, c, t, gamma[c] * xn + beta[c]);
            }
        }
    }
    Ok((out, LayerNormSaved { mean, istd }))
}

/// Backward of [`layer_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &Tensor3,
    gamma: &[f64],
    saved: &LayerNormSaved,
    grad_out: &Tensor3,
) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let (b_n, c_n, t_n) = x.dims();
    debug_assert_eq!(grad_out.dims(), (b_n, c_n, t_n));
    let mut dx = Tensor3::zeros(b_n, c_n, t_n);
    let mut dgamma = vec![0.0; c_n];
    let mut dbeta = vec![0.0; c_n];
    let inv_c = 1.0 / c_n as f64;
    for b in 0..b_n {
        for t in 0..t_n {
            let m = saved.mean[b * t_n + t];
            let is = saved.istd[b * t_n + t];
            // dxhat_c = g_c * gamma_c; then the standard LN reduction terms.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for c in 0..c_n {
                let g = grad_out.get(b, c, t);
                let xhat = (x.get(b, c, t) - m) * is;
                dgamma[c] += g * xhat;
                dbeta[c] += g;
                let dxhat = g * gamma[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for c in 0..c_n {
                let xhat = (x.get(b, c, t) - m) * is;
                let dxhat = grad_out.get(b, c, t) * gamma[c];
                let d = is * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                dx.set(b, c, t, d);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `x` where `x >= 0`, `slope * x` otherwise; shape-preserving.
pub fn leaky_relu(x: &Tensor3, slope: f64) -> Tensor3 {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Backward of [`leaky_relu`].
pub fn leaky_relu_backward(x: &Tensor3, slope: f64, grad_out: &Tensor3) -> Tensor3 {
    let mut dx = grad_out.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        if *v < 0.0 {
            *d *= slope;
        }
    }
    dx
}

/// Prepends `amount` zero samples on the time axis of every channel.
pub fn causal_pad(x: &Tensor3, amount: usize) -> Tensor3 {
    if amount == 0 {
        return x.clone();
    }
    let (b_n, c_n, t_n) = x.dims();
    let mut out = Tensor3::zeros(b_n, c_n, t_n + amount);
    for b in 0..b_n {
        for c in 0..c_n {
            out.row_mut(b, c)[amount..].copy_from_slice(x.row(b, c));
        }
    }
    out
}

/// Backward of [`causal_pad`]: drops the gradient of the zero prefix.
pub fn causal_pad_backward(amount: usize, grad_out: &Tensor3) -> Tensor3 {
    if amount == 0 {
        return grad_out.clone();
    }
    let (b_n, c_n, t_out) = grad_out.dims();
    let t_in = t_out - amount;
    let mut dx = Tensor3::zeros(b_n, c_n, t_in);
    for b in 0..b_n {
        for c in 0..c_n {
            dx.row_mut(b, c).copy_from_slice(&grad_out.row(b, c)[amount..]);
        }
    }
    dx
}

/// Concatenates along the channel axis, in list order.
pub fn concat_channels(parts: &[&Tensor3]) -> Result<Tensor3, ShapeError> {
    let first = parts.first().ok_or(ShapeError::EmptyList)?;
    let (b_n, _, t_n) = first.dims();
    let mut c_total = 0;
    for p in parts {
        if p.batch() != b_n || p.time() != t_n {
            return Err(ShapeError::BatchTimeMismatch {
                expected: (b_n, t_n),
                got: (p.batch(), p.time()),
            });
        }
        c_total += p.channels();
    }
    let mut out = Tensor3::zeros(b_n, c_total, t_n);
    for b in 0..b_n {
        let mut c_off = 0;
        for p in parts {
            for c in 0..p.channels() {
                out.row_mut(b, c_off + c).copy_from_slice(p.row(b, c));
            }
            c_off += p.channels();
        }
    }
    Ok(out)
}

/// Backward of [`concat_channels`]: splits the gradient back into parts.
pub fn concat_channels_backward(part_channels: &[usize], grad_out: &Tensor3) -> Vec<Tensor3> {
    let mut grads = Vec::with_capacity(part_channels.len());
    let mut c_off = 0;
    for &c in part_channels {
        grads.push(grad_out.slice_channels(c_off, c_off + c));
        c_off += c;
    }
    debug_assert_eq!(c_off, grad_out.channels());
    grads
}

/// Identical contract to [`pointwise_conv`]; kept as a distinct named op
/// because the block wiring treats the per-timestep linear as its own part.
pub fn linear_per_timestep(x: &Tensor3, w: &[f64], bias: &[f64]) -> Result<Tensor3, ShapeError> {
    pointwise_conv(x, w, bias)
}

/// Per-batch-item channel weights saved by [`spatial_attention`].
#[derive(Debug, Clone)]
pub struct AttentionSaved {
    /// Softmax scores per (b, channel), indexed `b * channels + c`; sum to 1 per item.
    pub score: Vec<f64>,
    /// Applied multiplier `channels * score` per (b, channel).
    pub mult: Vec<f64>,
    /// Channel means over time per (b, channel).
    pub mean: Vec<f64>,
}

/// Channel reweighting from time-averaged features:
/// `score = softmax(W * mean_t(x) + b)` per batch item, then
/// `out[b,c,t] = C * score[b,c] * x[b,c,t]`.
///
/// The multiplier is computed as `exp(z_c - max) * C / sum(exp)` so a uniform
/// score (zero map) yields exactly 1.0 and the op is the identity.
pub fn spatial_attention(
    x: &Tensor3,
    w: &[f64],
    bias: &[f64],
) -> Result<(Tensor3, AttentionSaved), ShapeError> {
    let (b_n, c_n, t_n) = x.dims();
    if bias.len() != c_n || w.len() != c_n * c_n {
        return Err(ShapeError::ChannelMismatch {
            expected: c_n,
            got: bias.len(),
        });
    }
    let mut out = Tensor3::zeros(b_n, c_n, t_n);
    let mut score = vec![0.0; b_n * c_n];
    let mut mult = vec![0.0; b_n * c_n];
    let mut mean = vec![0.0; b_n * c_n];
    let inv_t = 1.0 / t_n as f64;
    for b in 0..b_n {
        for c in 0..c_n {
            mean[b * c_n + c] = x.row(b, c).iter().sum::<f64>() * inv_t;
        }
        let mu = &mean[b * c_n..(b + 1) * c_n];
        let mut z = vec![0.0; c_n];
        for j in 0..c_n {
            z[j] = bias[j] + dot(&w[j * c_n..(j + 1) * c_n], mu);
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut esum = 0.0;
        let mut e = vec![0.0; c_n];
        for j in 0..c_n {
            e[j] = (z[j] - zmax).exp();
            esum += e[j];
        }
        for j in 0..c_n {
            score[b * c_n + j] = e[j] / esum;
            mult[b * c_n + j] = e[j] * c_n as f64 / esum;
        }
        for c in 0..c_n {
            let m = mult[b * c_n + c];
            for (o, v) in out.row_mut(b, c).iter_mut().zip(x.row(b, c)) {
                *o = m * v;
            }
        }
    }
    Ok((out, AttentionSaved { score, mult, mean }))
}

/// Backward of [`spatial_attention`]: returns `(dx, dw, dbias)`.
pub fn spatial_attention_backward(
    x: &Tensor3,
    w: &[f64],
    saved: &AttentionSaved,
    grad_out: &Tensor3,
) -> (Tensor3, Vec<f64>, Vec<f64>) {
    let (b_n, c_n, t_n) = x.dims();
    debug_assert_eq!(grad_out.dims(), (b_n, c_n, t_n));
    let mut dx = Tensor3::zeros(b_n, c_n, t_n);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c_n];
    let inv_t = 1.0 / t_n as f64;
    for b in 0..b_n {
        let score = &saved.score[b * c_n..(b + 1) * c_n];
        let mult = &saved.mult[b * c_n..(b + 1) * c_n];
        let mu = &saved.mean[b * c_n..(b + 1) * c_n];
        // dL/dmult_c and the direct x path
        let mut dmult = vec![0.0; c_n];
        for c in 0..c_n {
            let grow = grad_out.row(b, c);
            dmult[c] = dot(grow, x.row(b, c));
            axpy(dx.row_mut(b, c), mult[c], grow);
        }
        // mult_j = C * e_j / E: dz_i = dmult_i * mult_i - score_i * sum_j dmult_j * mult_j
        let total: f64 = dmult.iter().zip(mult).map(|(d, m)| d * m).sum();
        let mut dz = vec![0.0; c_n];
        for i in 0..c_n {
            dz[i] = dmult[i] * mult[i] - score[i] * total;
        }
        let mut dmu = vec![0.0; c_n];
        for j in 0..c_n {
            db[j] += dz[j];
            for i in 0..c_n {
                dw[j * c_n + i] += dz[j] * mu[i];
                dmu[i] += dz[j] * w[j * c_n + i];
            }
        }
        for i in 0..c_n {
            let add = dmu[i] * inv_t;
            for v in dx.row_mut(b, i) {
                *v += add;
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pointwise_identity_weights_pass_through() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]);
        let w = vec![1., 0., 0., 1.]; // 2x2 identity
        let out = pointwise_conv(&x, &w, &[0., 0.]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn pointwise_sums_channels() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]);
        let out = pointwise_conv(&x, &[1., 1.], &[0.]).unwrap();
        assert_eq!(out.dims(), (1, 1, 3));
        assert_eq!(out.row(0, 0), &[5., 7., 9.]);
    }

    #[test]
    fn pointwise_zero_map() {
        let x = Tensor3::from_rows(&[vec![1., -2., 3.], vec![4., 5., 6.]]);
        let out = pointwise_conv(&x, &[0., 0., 0., 0.], &[0., 0.]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_channel_mismatch() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3.]]);
        let err = pointwise_conv(&x, &[1., 1.], &[0.]).unwrap_err();
        assert!(matches!(err, ShapeError::ChannelMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn depthwise_unit_kernel_is_identity() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3.], vec![-1., 0., 1.]]);
        let out = depthwise_temporal_conv(&x, &[1., 1.], &[0., 0.], 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn depthwise_sliding_window_sum() {
        let x = Tensor3::from_rows(&[vec![0., 1., 2., 3.]]);
        let out = depthwise_temporal_conv(&x, &[1., 1.], &[0.], 2).unwrap();
        assert_eq!(out.row(0, 0), &[1., 3., 5.]);
    }

    #[test]
    fn depthwise_zero_weight_shrinks_time() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3., 4., 5.]]);
        let out = depthwise_temporal_conv(&x, &[0., 0., 0.], &[0.], 3).unwrap();
        assert_eq!(out.dims(), (1, 1, 3));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_time_too_short() {
        let x = Tensor3::from_rows(&[vec![1., 2.]]);
        let err = depthwise_temporal_conv(&x, &[1., 1., 1.], &[0.], 3).unwrap_err();
        assert!(matches!(err, ShapeError::TimeTooShort { need: 3, got: 2 }));
    }

    #[test]
    fn temporal_delayed_identity_tap() {
        let x = Tensor3::from_rows(&[vec![0., 1., 2., 3.]]);
        let out = temporal_conv(&x, &[0., 1.], &[0.], 1, 2).unwrap();
        assert_eq!(out.row(0, 0), &[1., 2., 3.]);
    }

    #[test]
    fn temporal_k1_reduces_to_pointwise() {
        let x = Tensor3::from_rows(&[vec![1., 2.], vec![3., 4.]]);
        let out = temporal_conv(&x, &[1., 1.], &[0.], 2, 1).unwrap();
        assert_eq!(out.row(0, 0), &[4., 6.]);
        let pw = pointwise_conv(&x, &[1., 1.], &[0.]).unwrap();
        assert_eq!(out, pw);
    }

    #[test]
    fn temporal_bias_only() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3., 4.]]);
        let out = temporal_conv(&x, &[0., 0.], &[5.], 1, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn layer_norm_constant_column_is_zero() {
        let x = Tensor3::from_vec(1, 3, 1, vec![5., 5., 5.]);
        let (out, _) = layer_norm(&x, &[1., 1., 1.], &[0., 0., 0.]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_hand_values() {
        let x = Tensor3::from_vec(1, 3, 1, vec![1., 2., 3.]);
        let (out, _) = layer_norm(&x, &[1., 1., 1.], &[0., 0., 0.]).unwrap();
        assert!(close(out.get(0, 0, 0), -1.22474, 1e-4));
        assert!(close(out.get(0, 1, 0), 0.0, 1e-6));
        assert!(close(out.get(0, 2, 0), 1.22474, 1e-4));
        let (out, _) = layer_norm(&x, &[2., 2., 2.], &[1., 1., 1.]).unwrap();
        assert!(close(out.get(0, 0, 0), -1.44949, 1e-4));
        assert!(close(out.get(0, 1, 0), 1.0, 1e-6));
        assert!(close(out.get(0, 2, 0), 3.44949, 1e-4));
    }

    #[test]
    fn layer_norm_normalizes_per_time_step() {
        // distinct stats per (b, t) column
        let x = Tensor3::from_vec(2, 4, 3, (0..24).map(|v| ((v * 7919) % 13) as f64).collect());
        let (out, _) = layer_norm(&x, &[1.; 4], &[0.; 4]).unwrap();
        for b in 0..2 {
            for t in 0..3 {
                let col: Vec<f64> = (0..4).map(|c| out.get(b, c, t)).collect();
                let mean: f64 = col.iter().sum::<f64>() / 4.0;
                let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-3); // EPS_LN shifts variance slightly
            }
        }
    }

    #[test]
    fn leaky_relu_examples() {
        let x = Tensor3::from_vec(1, 1, 3, vec![5., -1., 0.]);
        let out = leaky_relu(&x, 0.01);
        assert_eq!(out.data(), &[5., -0.01, 0.]);
    }

    #[test]
    fn causal_pad_prepends_zeros() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3.]]);
        let out = causal_pad(&x, 2);
        assert_eq!(out.row(0, 0), &[0., 0., 1., 2., 3.]);
        assert_eq!(causal_pad(&x, 0), x);
        let big = Tensor3::zeros(2, 3, 5);
        assert_eq!(causal_pad(&big, 7).dims(), (2, 3, 12));
    }

    #[test]
    fn pad_then_valid_conv_preserves_time() {
        let x = Tensor3::from_rows(&[vec![1., 2., 3., 4., 5.]]);
        for k in 1..=4 {
            let padded = causal_pad(&x, k - 1);
            let w = vec![1.0; k];
            let out = depthwise_temporal_conv(&padded, &w, &[0.], k).unwrap();
            assert_eq!(out.time(), x.time());
        }
    }

    #[test]
    fn concat_singleton_and_shapes() {
        let a = Tensor3::zeros(1, 64, 320);
        let cat = concat_channels(&[&a]).unwrap();
        assert_eq!(cat, a);
        let b = Tensor3::zeros(1, 64, 320);
        let c = Tensor3::zeros(1, 64, 320);
        let cat = concat_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(cat.dims(), (1, 192, 320));
    }

    #[test]
    fn concat_slice_round_trip() {
        let x = Tensor3::from_rows(&[vec![1., 2.], vec![3., 4.]]);
        let y = Tensor3::from_rows(&[vec![5., 6.]]);
        let cat = concat_channels(&[&x, &y]).unwrap();
        assert_eq!(cat.slice_channels(0, 2), x);
        assert_eq!(cat.slice_channels(2, 3), y);
    }

    #[test]
    fn concat_mismatch_errors() {
        let a = Tensor3::zeros(1, 2, 3);
        let b = Tensor3::zeros(1, 2, 4);
        assert!(concat_channels(&[&a, &b]).is_err());
        assert!(concat_channels(&[]).is_err());
    }

    #[test]
    fn concat_is_associative() {
        let a = Tensor3::from_rows(&[vec![1., 2.]]);
        let b = Tensor3::from_rows(&[vec![3., 4.], vec![5., 6.]]);
        let c = Tensor3::from_rows(&[vec![7., 8.]]);
        let bc = concat_channels(&[&b, &c]).unwrap();
        let left = concat_channels(&[&a, &bc]).unwrap();
        let right = concat_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn linear_equals_pointwise() {
        let x = Tensor3::from_rows(&[vec![1., 2.], vec![3., 4.]]);
        let w = [0.5, -1.0, 2.0, 0.25];
        let bias = [0.1, -0.2];
        let a = linear_per_timestep(&x, &w, &bias).unwrap();
        let b = pointwise_conv(&x, &w, &bias).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_zero_map_is_identity() {
        let x = Tensor3::from_rows(&[vec![1., -2., 3.], vec![0.5, 0.25, -4.0], vec![9., 9., 9.]]);
        let w = vec![0.0; 9];
        let (out, saved) = spatial_attention(&x, &w, &[0., 0., 0.]).unwrap();
        assert_eq!(out, x); // exact, including odd channel counts
        assert!(saved.mult.iter().all(|&m| m == 1.0));
        let ssum: f64 = saved.score.iter().sum();
        assert!((ssum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_hand_example() {
        // H=2, scores (0.75, 0.25): bias = (ln 3, 0) with zero weight map.
        let x = Tensor3::from_rows(&[vec![4., 4.], vec![8., 8.]]);
        let w = vec![0.0; 4];
        let bias = [3.0_f64.ln(), 0.0];
        let (out, saved) = spatial_attention(&x, &w, &bias).unwrap();
        assert!(close(saved.score[0], 0.75, 1e-12));
        assert!(close(saved.score[1], 0.25, 1e-12));
        assert!(close(out.get(0, 0, 0), 6.0, 1e-9));
        assert!(close(out.get(0, 0, 1), 6.0, 1e-9));
        assert!(close(out.get(0, 1, 0), 4.0, 1e-9));
        assert!(close(out.get(0, 1, 1), 4.0, 1e-9));
    }

    #[test]
    fn attention_scores_in_unit_interval() {
        let x = Tensor3::from_rows(&[vec![1., 2.], vec![3., -4.], vec![0.5, 2.5]]);
        let w: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let (_, saved) = spatial_attention(&x, &w, &[0.1, -0.2, 0.3]).unwrap();
        let ssum: f64 = saved.score.iter().sum();
        assert!((ssum - 1.0).abs() < 1e-12);
        assert!(saved.score.iter().all(|&s| s > 0.0 && s < 1.0));
    }
}
