//! Differentiable building blocks with explicit forward/backward passes.
//!
//! Every layer reads its weights from a [`ParamStore`] and accumulates
//! weight gradients into a matching [`Grads`]. Backward functions return the
//! gradient with respect to the layer input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::ScaleTimeTensor;
use crate::error::{Error, Result};
use crate::real::Real;

type Stt<F> = ScaleTimeTensor<F>;

/// Axis a convolution or pooling slides along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvAxis {
    Scale,
    Time,
}

/// Row blocks `(dst_start, src_start, len)` such that `dst[p] <- src[p + shift]`
/// along `axis`, dropping positions that fall into the zero padding.
pub(crate) fn shifted_blocks(axis: ConvAxis, scales: usize, time: usize, shift: isize) -> Vec<(usize, usize, usize)> {
    let mag = shift.unsigned_abs();
    let (dst_off, src_off) = if shift >= 0 { (0, mag) } else { (mag, 0) };
    match axis {
        ConvAxis::Time => {
            if mag >= time {
                return Vec::new();
            }
            (0..scales)
                .map(|s| (s * time + dst_off, s * time + src_off, time - mag))
                .collect()
        }
        ConvAxis::Scale => {
            if mag >= scales {
                return Vec::new();
            }
            vec![(dst_off * time, src_off * time, (scales - mag) * time)]
        }
    }
}

fn gemm_acc<F: Real>(
    a: &ndarray::ArrayView2<'_, F>,
    b: &ndarray::ArrayView2<'_, F>,
    c: &mut ndarray::ArrayViewMut2<'_, F>,
) {
    general_mat_mul(F::one(), a, b, F::one(), c);
}

/// Pointwise (kernel-1) affine map `y = x W^T + b` over channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), vec![out_dim, in_dim], bound, rng);
        let bias = store.zeros(format!("{name}.bias"), vec![out_dim]);
        Self { in_dim, out_dim, weight, bias }
    }

    pub fn forward_rows<F: Real>(&self, params: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let w = params.matrix(self.weight);
        let mut y = Array2::zeros((x.nrows(), self.out_dim));
        y += &params.vector(self.bias);
        general_mat_mul(F::one(), &x.view(), &w.t(), F::one(), &mut y.view_mut());
        y
    }

    pub fn backward_rows<F: Real>(&self, params: &ParamStore<F>, x: &Array2<F>, dy: &Array2<F>, grads: &mut Grads<F>) -> Array2<F> {
        gemm_acc(&dy.t(), &x.view(), &mut grads.matrix_mut(self.weight));
        grads.vector_mut(self.bias).scaled_add(F::one(), &dy.sum_axis(Axis(0)));
        let mut dx = Array2::zeros((x.nrows(), self.in_dim));
        gemm_acc(&dy.view(), &params.matrix(self.weight), &mut dx.view_mut());
        dx
    }

    pub fn forward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>) -> Stt<F> {
        x.with_data(self.forward_rows(params, x.data()))
    }

    pub fn backward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>, dy: &Stt<F>, grads: &mut Grads<F>) -> Stt<F> {
        x.with_data(self.backward_rows(params, x.data(), dy.data(), grads))
    }
}

/// Dilated 1-D convolution along the scale or time axis with zero "same" padding.
/// Weights are stored as `(kernel, out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisConv {
    pub axis: ConvAxis,
    pub kernel: usize,
    pub dilation: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AxisConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        axis: ConvAxis,
        kernel: usize,
        dilation: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 || dilation == 0 {
            return Err(Error::validation(
                "convolution",
                format!("{name}: kernel {kernel} must be odd and dilation {dilation} positive"),
            ));
        }
        let bound = (6.0 / (in_dim * kernel) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), vec![kernel, out_dim, in_dim], bound, rng);
        let bias = store.zeros(format!("{name}.bias"), vec![out_dim]);
        Ok(Self { axis, kernel, dilation, in_dim, out_dim, weight, bias })
    }

    /// Offset of tap `j` along the conv axis.
    pub fn tap_shift(&self, j: usize) -> isize {
        (j as isize - (self.kernel / 2) as isize) * self.dilation as isize
    }

    /// Largest distance along the axis that can influence an output.
    pub fn radius(&self) -> usize {
        (self.kernel / 2) * self.dilation
    }

    pub fn forward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>) -> Stt<F> {
        let w = params.tensor3(self.weight);
        let mut y = Array2::zeros((x.data().nrows(), self.out_dim));
        y += &params.vector(self.bias);
        for j in 0..self.kernel {
            let wj = w.index_axis(Axis(0), j);
            for (dst, src, len) in shifted_blocks(self.axis, x.scales(), x.time(), self.tap_shift(j)) {
                let xs = x.data().slice(s![src..src + len, ..]);
                let mut ys = y.slice_mut(s![dst..dst + len, ..]);
                gemm_acc(&xs, &wj.t(), &mut ys);
            }
        }
        x.with_data(y)
    }

    pub fn backward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>, dy: &Stt<F>, grads: &mut Grads<F>) -> Stt<F> {
        let w = params.tensor3(self.weight);
        let mut dx = Array2::zeros((x.data().nrows(), self.in_dim));
        {
            let mut dw = grads.tensor3_mut(self.weight);
            for j in 0..self.kernel {
                let wj = w.index_axis(Axis(0), j);
                let mut dwj = dw.index_axis_mut(Axis(0), j);
                for (dst, src, len) in shifted_blocks(self.axis, x.scales(), x.time(), self.tap_shift(j)) {
                    let dys = dy.data().slice(s![dst..dst + len, ..]);
                    let xs = x.data().slice(s![src..src + len, ..]);
                    gemm_acc(&dys.t(), &xs, &mut dwj);
                    let mut dxs = dx.slice_mut(s![src..src + len, ..]);
                    gemm_acc(&dys, &wj, &mut dxs);
                }
            }
        }
        grads
            .vector_mut(self.bias)
            .scaled_add(F::one(), &dy.data().sum_axis(Axis(0)));
        x.with_data(dx)
    }
}

pub fn relu<F: Real>(x: &Stt<F>) -> Stt<F> {
    x.with_data(x.data().mapv(|v| v.max(F::zero())))
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<F: Real>(y: &Stt<F>, dy: &Stt<F>) -> Stt<F> {
    let mut dx = dy.data().clone();
    dx.zip_mut_with(y.data(), |d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    y.with_data(dx)
}

/// Stride-2, width-2 max pooling along time. Returns the pooled tensor and,
/// per output element, whether the right-hand input won.
pub fn max_pool_time<F: Real>(x: &Stt<F>) -> Result<(Stt<F>, Vec<bool>)> {
    if x.time() % 2 != 0 {
        return Err(Error::shape("max pool", format!("odd length {}", x.time())));
    }
    let (scales, time, ch) = x.shape();
    let half = time / 2;
    let mut y = Array2::zeros((scales * half, ch));
    let mut right = vec![false; scales * half * ch];
    for s in 0..scales {
        for t in 0..half {
            let a = x.cell(s, 2 * t);
            let b = x.cell(s, 2 * t + 1);
            let row = s * half + t;
            for c in 0..ch {
                let take_right = b[c] > a[c];
                right[row * ch + c] = take_right;
                y[[row, c]] = if take_right { b[c] } else { a[c] };
            }
        }
    }
    Ok((Stt::new(scales, half, y)?, right))
}

pub fn max_pool_time_backward<F: Real>(x_layout: &Stt<F>, right: &[bool], dy: &Stt<F>) -> Stt<F> {
    let (scales, time, ch) = x_layout.shape();
    let half = time / 2;
    let mut dx = Array2::zeros((scales * time, ch));
    for s in 0..scales {
        for t in 0..half {
            let row = s * half + t;
            for c in 0..ch {
                let src = if right[row * ch + c] { 2 * t + 1 } else { 2 * t };
                dx[[s * time + src, c]] = dy.data()[[row, c]];
            }
        }
    }
    x_layout.with_data(dx)
}

/// Zero-padded, stride-1 average pooling along `axis`; the divisor is always
/// the full kernel width. The operator is self-adjoint.
pub fn avg_pool_axis<F: Real>(x: &Stt<F>, axis: ConvAxis, kernel: usize) -> Stt<F> {
    let mut y = Array2::zeros(x.data().raw_dim());
    let inv = F::one() / F::c(kernel as f64);
    let half = (kernel / 2) as isize;
    for shift in -half..=half {
        for (dst, src, len) in shifted_blocks(axis, x.scales(), x.time(), shift) {
            y.slice_mut(s![dst..dst + len, ..])
                .scaled_add(inv, &x.data().slice(s![src..src + len, ..]));
        }
    }
    x.with_data(y)
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise softmax backward given the softmax output `p` and upstream `dp`.
pub fn softmax_rows_backward<F: Real>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((pr, dr), mut zr) in p.rows().into_iter().zip(dp.rows()).zip(dz.rows_mut()) {
        let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for ((z, &a), &b) in zr.iter_mut().zip(pr.iter()).zip(dr.iter()) {
            *z = a * (b - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stt(scales: usize, time: usize, ch: usize, seed: u64) -> Stt<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((scales * time, ch), |_| rng.random_range(-1.0..1.0));
        Stt::new(scales, time, data).unwrap()
    }

    /// Direct quadruple-loop convolution used as an oracle.
    fn conv_reference(conv: &AxisConv, params: &ParamStore<f64>, x: &Stt<f64>) -> Stt<f64> {
        let w = params.tensor3(conv.weight);
        let b = params.vector(conv.bias);
        let (scales, time, _) = x.shape();
        let mut y = Stt::zeros(scales, time, conv.out_dim);
        for s in 0..scales {
            for t in 0..time {
                for o in 0..conv.out_dim {
                    let mut acc = b[o];
                    for j in 0..conv.kernel {
                        let sh = conv.tap_shift(j);
                        let (ss, tt) = match conv.axis {
                            ConvAxis::Scale => (s as isize + sh, t as isize),
                            ConvAxis::Time => (s as isize, t as isize + sh),
                        };
                        if ss < 0 || tt < 0 || ss >= scales as isize || tt >= time as isize {
                            continue;
                        }
                        for i in 0..conv.in_dim {
                            acc += w[[j, o, i]] * x.at(ss as usize, tt as usize, i);
                        }
                    }
                    y.cell_mut(s, t)[o] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (axis, k, d) in [
            (ConvAxis::Time, 3, 1),
            (ConvAxis::Time, 5, 2),
            (ConvAxis::Scale, 3, 2),
            (ConvAxis::Scale, 5, 1),
            (ConvAxis::Scale, 3, 4),
        ] {
            let mut store = ParamStore::<f64>::new();
            let conv = AxisConv::new(&mut store, "c", axis, k, d, 3, 2, &mut rng).unwrap();
            store.slice_mut(conv.bias).copy_from_slice(&[0.25, -0.5]);
            let x = random_stt(4, 7, 3, 11);
            let y = conv.forward(&store, &x);
            let r = conv_reference(&conv, &store, &x);
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        assert!(AxisConv::new(&mut store, "c", ConvAxis::Time, 2, 1, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn avg_pool_is_self_adjoint() {
        let x = random_stt(5, 3, 2, 1);
        let y = random_stt(5, 3, 2, 2);
        let ax = avg_pool_axis(&x, ConvAxis::Scale, 5);
        let ay = avg_pool_axis(&y, ConvAxis::Scale, 5);
        let lhs: f64 = (ax.data() * y.data()).sum();
        let rhs: f64 = (x.data() * ay.data()).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_counts_padding() {
        let x = Stt::<f64>::new(5, 1, Array2::ones((5, 1))).unwrap();
        let y = avg_pool_axis(&x, ConvAxis::Scale, 5);
        let got: Vec<f64> = y.data().iter().copied().collect();
        for (g, e) in got.iter().zip([0.6, 0.8, 1.0, 0.8, 0.6]) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let x = Stt::<f64>::new(1, 4, Array2::from_shape_vec((4, 1), vec![1.0, 3.0, 5.0, 2.0]).unwrap()).unwrap();
        let (y, right) = max_pool_time(&x).unwrap();
        assert_eq!(y.data().iter().copied().collect::<Vec<_>>(), vec![3.0, 5.0]);
        let dy = y.with_data(Array2::from_shape_vec((2, 1), vec![10.0, 20.0]).unwrap());
        let dx = max_pool_time_backward(&x, &right, &dy);
        assert_eq!(dx.data().iter().copied().collect::<Vec<_>>(), vec![0.0, 10.0, 20.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Array2::from_shape_vec((2, 3), vec![1.0f64, 2.0, 3.0, -1e3, 0.0, 1e3]).unwrap();
        let p = softmax_rows(&z);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
