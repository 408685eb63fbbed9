//! Layer primitives: HWC tensors, VALID 3x3 convolution via im2col + GEMM,
//! 2x2/stride-2 max pooling with recorded argmax routes, fully connected
//! products, ReLU, and a numerically stable softmax.

use super::CnnError;

/// Row-major, channel-last tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, CnnError> {
        if data.len() != h * w * c {
            return Err(CnnError::ShapeMismatch(format!(
                "{}x{}x{} tensor needs {} values, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        Ok(Tensor { h, w, c, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

/// c(m x n) += a(m x k) . b(k x n), row-major; `beta` scales c first.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c(m x n) += aT . b where a is stored row-major as (k x m).
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c(m x n) += a . bT where b is stored row-major as (n x k).
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unrolled 3x3 windows: row (y,x) holds the window in [ky][kx][ci] order,
/// matching the kernel layout, so convolution is one GEMM.
fn im2col3(input: &Tensor) -> (Vec<f64>, usize, usize) {
    let (h, w, c) = (input.h, input.w, input.c);
    let (oh, ow) = (h - 2, w - 2);
    let row_len = 9 * c;
    let mut cols = vec![0.0; oh * ow * row_len];
    for y in 0..oh {
        for x in 0..ow {
            let row = &mut cols[(y * ow + x) * row_len..][..row_len];
            for ky in 0..3 {
                // Three consecutive x positions are contiguous in HWC.
                let src = &input.data[((y + ky) * w + x) * c..][..3 * c];
                row[ky * 3 * c..(ky + 1) * 3 * c].copy_from_slice(src);
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-add of the unrolled gradient back onto the input grid.
fn col2im3(dcols: &[f64], h: usize, w: usize, c: usize) -> Tensor {
    let (oh, ow) = (h - 2, w - 2);
    let row_len = 9 * c;
    let mut out = Tensor::zeros(h, w, c);
    for y in 0..oh {
        for x in 0..ow {
            let row = &dcols[(y * ow + x) * row_len..][..row_len];
            for ky in 0..3 {
                let dst = &mut out.data[((y + ky) * w + x) * c..][..3 * c];
                for (d, s) in dst.iter_mut().zip(&row[ky * 3 * c..(ky + 1) * 3 * c]) {
                    *d += s;
                }
            }
        }
    }
    out
}

/// VALID cross-correlation with 3x3 kernels, stride 1. Kernel layout is
/// `[ky][kx][cin][cout]`, flattened.
pub fn conv2d_valid(
    input: &Tensor,
    kernels: &[f64],
    bias: &[f64],
    cout: usize,
) -> Result<Tensor, CnnError> {
    if input.h < 3 || input.w < 3 {
        return Err(CnnError::ShapeMismatch(format!(
            "conv needs at least 3x3 input, got {}x{}",
            input.h, input.w
        )));
    }
    if kernels.len() != 9 * input.c * cout || bias.len() != cout {
        return Err(CnnError::ShapeMismatch(format!(
            "kernel/bias sizes {}/{} do not fit 3x3x{}x{cout}",
            kernels.len(),
            bias.len(),
            input.c
        )));
    }
    let (cols, oh, ow) = im2col3(input);
    let mut out = Tensor::zeros(oh, ow, cout);
    gemm_nn(oh * ow, 9 * input.c, cout, &cols, kernels, 0.0, &mut out.data);
    for pixel in out.data.chunks_exact_mut(cout) {
        for (v, b) in pixel.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_valid`] at `input` for an upstream `delta`.
/// Returns (d_input, d_kernels, d_bias); the input gradient is skipped for
/// the first layer.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &[f64],
    cout: usize,
    delta: &Tensor,
    want_dinput: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let (cols, oh, ow) = im2col3(input);
    debug_assert_eq!((delta.h, delta.w, delta.c), (oh, ow, cout));
    let k = 9 * input.c;

    let mut d_kernels = vec![0.0; k * cout];
    gemm_tn(k, oh * ow, cout, &cols, &delta.data, 0.0, &mut d_kernels);

    let mut d_bias = vec![0.0; cout];
    for pixel in delta.data.chunks_exact(cout) {
        for (b, v) in d_bias.iter_mut().zip(pixel) {
            *b += v;
        }
    }

    let d_input = want_dinput.then(|| {
        let mut dcols = vec![0.0; oh * ow * k];
        gemm_nt(oh * ow, cout, k, &delta.data, kernels, 0.0, &mut dcols);
        col2im3(&dcols, input.h, input.w, input.c)
    });
    (d_input, d_kernels, d_bias)
}

/// 2x2 max pooling with stride 2 and VALID edges; ties take the first
/// window position in row-major order. The returned routes hold the flat
/// input index that produced each output value.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<u32>), CnnError> {
    if input.h < 2 || input.w < 2 {
        return Err(CnnError::ShapeMismatch(format!(
            "pool needs at least 2x2 input, got {}x{}",
            input.h, input.w
        )));
    }
    let (oh, ow) = ((input.h - 2) / 2 + 1, (input.w - 2) / 2 + 1);
    let c = input.c;
    let mut out = Tensor::zeros(oh, ow, c);
    let mut routes = vec![0u32; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((2 * y + dy) * input.w + 2 * x + dx) * c + ch;
                        let v = input.data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = (y * ow + x) * c + ch;
                out.data[o] = best;
                routes[o] = best_idx;
            }
        }
    }
    Ok((out, routes))
}

/// Route the pooled gradient back to the argmax positions.
pub fn maxpool2_backward(delta: &Tensor, routes: &[u32], h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(h, w, delta.c);
    for (d, &route) in delta.data.iter().zip(routes) {
        out.data[route as usize] += d;
    }
    out
}

pub fn relu_inplace(data: &mut [f64]) {
    for v in data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Mask the gradient by the post-activation sign (post > 0 iff pre > 0).
pub fn relu_backward_inplace(delta: &mut [f64], post: &[f64]) {
    for (d, &a) in delta.iter_mut().zip(post) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
}

/// y = x . W + b with W stored row-major as (din x dout).
pub fn fc_forward(x: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let dout = bias.len();
    let mut y = bias.to_vec();
    gemm_nn(1, x.len(), dout, x, weights, 1.0, &mut y);
    y
}

/// Gradients of [`fc_forward`]: (d_x, d_weights, d_bias).
pub fn fc_backward(x: &[f64], weights: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (din, dout) = (x.len(), delta.len());
    let mut dx = vec![0.0; din];
    gemm_nt(1, dout, din, delta, weights, 0.0, &mut dx);
    let mut dw = vec![0.0; din * dout];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * dout..(i + 1) * dout];
        for (w, &d) in row.iter_mut().zip(delta) {
            *w += xi * d;
        }
    }
    (dx, dw, delta.to_vec())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log(softmax(logits)[label]); used for the cross-entropy loss.
pub fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[label] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor {
            h,
            w,
            c,
            data: (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Quadruple-loop reference convolution.
    fn conv_oracle(input: &Tensor, kernels: &[f64], bias: &[f64], cout: usize) -> Tensor {
        let (oh, ow) = (input.h - 2, input.w - 2);
        let mut out = Tensor::zeros(oh, ow, cout);
        for y in 0..oh {
            for x in 0..ow {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for ci in 0..input.c {
                                acc += input.get(y + ky, x + kx, ci)
                                    * kernels[((ky * 3 + kx) * input.c + ci) * cout + co];
                            }
                        }
                    }
                    out.data[(y * ow + x) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_window() {
        let input = Tensor { h: 3, w: 3, c: 1, data: vec![1.0; 9] };
        let out = conv2d_valid(&input, &[1.0; 9], &[0.0], 1).unwrap();
        assert_eq!((out.h, out.w, out.c), (1, 1, 1));
        assert_eq!(out.data, vec![9.0]);
    }

    #[test]
    fn conv_shape_chain_holds() {
        let input = Tensor::zeros(512, 512, 1);
        let kernels = vec![0.0; 9 * 32];
        let out = conv2d_valid(&input, &kernels, &vec![0.0; 32], 32).unwrap();
        assert_eq!((out.h, out.w, out.c), (510, 510, 32));
    }

    #[test]
    fn conv_rejects_small_inputs() {
        let input = Tensor::zeros(2, 5, 1);
        assert!(matches!(
            conv2d_valid(&input, &[0.0; 9], &[0.0], 1),
            Err(CnnError::ShapeMismatch(_))
        ));
    }

    // Oracle: nested loops, to 1e-12.
    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(6, 6, 2, 2);
        let cout = 3;
        let kernels: Vec<f64> = (0..9 * 2 * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = conv2d_valid(&input, &kernels, &bias, cout).unwrap();
        let slow = conv_oracle(&input, &kernels, &bias, cout);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn pool_examples() {
        let input = Tensor { h: 2, w: 2, c: 1, data: vec![1.0, 2.0, 3.0, 4.0] };
        let (out, routes) = maxpool2(&input).unwrap();
        assert_eq!(out.data, vec![4.0]);
        assert_eq!(routes, vec![3]);
        // 510 -> 255 on the paper-scale chain.
        let big = Tensor::zeros(510, 510, 1);
        let (out, _) = maxpool2(&big).unwrap();
        assert_eq!((out.h, out.w), (255, 255));
    }

    #[test]
    fn pool_tie_takes_first_in_row_major_order() {
        let input = Tensor { h: 2, w: 2, c: 1, data: vec![5.0, 5.0, 5.0, 5.0] };
        let (_, routes) = maxpool2(&input).unwrap();
        assert_eq!(routes, vec![0]);
    }

    // Oracle: naive window scan.
    #[test]
    fn pool_matches_window_scan() {
        let input = random_tensor(9, 7, 3, 4);
        let (out, routes) = maxpool2(&input).unwrap();
        assert_eq!((out.h, out.w), (4, 3));
        for y in 0..out.h {
            for x in 0..out.w {
                for ch in 0..3 {
                    let window = [
                        input.get(2 * y, 2 * x, ch),
                        input.get(2 * y, 2 * x + 1, ch),
                        input.get(2 * y + 1, 2 * x, ch),
                        input.get(2 * y + 1, 2 * x + 1, ch),
                    ];
                    let best = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(out.get(y, x, ch), best);
                    let route = routes[(y * out.w + x) * 3 + ch] as usize;
                    assert_eq!(input.data[route], best);
                }
            }
        }
    }

    // Finite differences on a composite conv -> pool -> sum scalar.
    #[test]
    fn conv_and_pool_backward_match_finite_differences() {
        let input = random_tensor(6, 6, 2, 7);
        let cout = 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let kernels: Vec<f64> = (0..9 * 2 * cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
        // Fixed random projection makes the scalar sensitive to every output.
        let conv_out = conv2d_valid(&input, &kernels, &bias, cout).unwrap();
        let (pool_out, routes) = maxpool2(&conv_out).unwrap();
        let proj: Vec<f64> = (0..pool_out.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let scalar = |kernels: &[f64], input: &Tensor| -> f64 {
            let out = conv2d_valid(input, kernels, &bias, cout).unwrap();
            let (p, _) = maxpool2(&out).unwrap();
            p.data.iter().zip(&proj).map(|(a, b)| a * b).sum()
        };

        // Analytic gradient.
        let delta_pool = Tensor::from_data(pool_out.h, pool_out.w, cout, proj.clone()).unwrap();
        let delta_conv = maxpool2_backward(&delta_pool, &routes, conv_out.h, conv_out.w);
        let (dinput, dk, _db) = conv2d_backward(&input, &kernels, cout, &delta_conv, true);
        let dinput = dinput.unwrap();

        let h = 1e-5;
        for i in (0..kernels.len()).step_by(7) {
            let mut plus = kernels.clone();
            plus[i] += h;
            let mut minus = kernels.clone();
            minus[i] -= h;
            let fd = (scalar(&plus, &input) - scalar(&minus, &input)) / (2.0 * h);
            assert!((fd - dk[i]).abs() < 1e-6, "kernel {i}: fd {fd} vs {}", dk[i]);
        }
        for i in (0..input.data.len()).step_by(11) {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let fd = (scalar(&kernels, &plus) - scalar(&kernels, &minus)) / (2.0 * h);
            assert!((fd - dinput.data[i]).abs() < 1e-6, "input {i}: fd {fd} vs {}", dinput.data[i]);
        }
    }

    #[test]
    fn fc_round_trip_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let (din, dout) = (10, 4);
        let x: Vec<f64> = (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..din * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scalar = |x: &[f64], w: &[f64]| -> f64 {
            fc_forward(x, w, &b).iter().zip(&proj).map(|(a, p)| a * p).sum()
        };
        let (dx, dw, db) = fc_backward(&x, &w, &proj);
        assert_eq!(db, proj);
        let h = 1e-6;
        for i in 0..din {
            let mut plus = x.clone();
            plus[i] += h;
            let mut minus = x.clone();
            minus[i] -= h;
            let fd = (scalar(&plus, &w) - scalar(&minus, &w)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6);
        }
        for i in 0..din * dout {
            let mut plus = w.clone();
            plus[i] += h;
            let mut minus = w.clone();
            minus[i] -= h;
            let fd = (scalar(&x, &plus) - scalar(&x, &minus)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-7.0..7.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            let label = rng.gen_range(0..5);
            assert!((log_softmax_at(&logits, label) - p[label].ln()).abs() < 1e-9);
        }
        // Extreme logits saturate but never leave [0, 1] or break the sum.
        let p = softmax(&[-500.0, 0.0, 500.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(log_softmax_at(&[-500.0, 0.0, 500.0], 0).is_finite());
    }
}
