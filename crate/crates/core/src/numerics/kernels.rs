//! Pure tensor kernels.
//!
//! Every function here is a deterministic function of its inputs. The tape in
//! [`super::tape`] calls these for its forward values and reuses the
//! `*_backward` helpers for vector-Jacobian products.

use std::str::FromStr;

use crate::error::{Error, Result};

use super::Tensor;

/// Default epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Matrix products on raw row-major slices. All of them accumulate into `out`.

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

/// Four-lane dot product; the lane split is fixed so results are reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(a, "transpose")?;
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

// ---------------------------------------------------------------------------
// Linear layer

/// `y = x·W + b` along the last axis of `x`.
pub fn linear(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_in, d_out) = as_matrix(weights, "linear")?;
    if x.last_dim() != d_in || x.rank() == 0 {
        return Err(Error::shape("linear", x.shape(), weights.shape()));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape("linear", weights.shape(), bias.shape()));
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    matmul_nn(x.data(), weights.data(), &mut out, rows, d_in, d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = d_out;
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// Layer normalization

/// Per-row statistics kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Standardized input before the affine step.
    pub normalized: Tensor,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_cache(x, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_cache(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if d == 0 || x.rank() == 0 {
        return Err(Error::EmptyAxis("layer_norm"));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let rows = x.rows();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let n = (row[j] - mean) * inv;
            normalized[r * d + j] = n;
            out[r * d + j] = g[j] * n + b[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache {
            normalized: Tensor::new(x.shape().to_vec(), normalized)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    grad_out: &Tensor,
    gain: &Tensor,
    cache: &LayerNormCache,
) -> (Tensor, Tensor, Tensor) {
    let d = gain.len();
    let rows = grad_out.rows();
    let g = gain.data();
    let xhat = cache.normalized.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for r in 0..rows {
        let base = r * d;
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for j in 0..d {
            let dn = dy[base + j] * g[j];
            sum_dn += dn;
            sum_dn_n += dn * xhat[base + j];
            dgain[j] += dy[base + j] * xhat[base + j];
            dbias[j] += dy[base + j];
        }
        let inv = cache.inv_std[r];
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dn = dy[base + j] * g[j];
            dx[base + j] = inv * (dn - inv_d * sum_dn - xhat[base + j] * inv_d * sum_dn_n);
        }
    }
    (
        Tensor::new(grad_out.shape().to_vec(), dx).expect("same shape"),
        Tensor::from_vec(dgain),
        Tensor::from_vec(dbias),
    )
}

// ---------------------------------------------------------------------------
// Activations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// `x·Φ(x)` with the exact normal CDF.
    Gelu,
    Tanh,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Self::Gelu),
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Gelu => x * normal_cdf(x),
            Self::Tanh => x.tanh(),
            Self::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at `x`; `y` is the forward value at `x`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Self::Tanh => 1.0 - y * y,
            Self::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    x.map(|v| kind.eval(v))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Masked softmax

/// Softmax along the last axis, with `mask[j] == false` positions forced to 0.
pub fn masked_softmax(scores: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let n = scores.last_dim();
    if mask.len() != n || scores.rank() == 0 {
        return Err(Error::shape("masked_softmax", scores.shape(), &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateRow("masked_softmax"));
    }
    let mut out = vec![0.0; scores.len()];
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if mask[j] {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(scores.shape().to_vec(), out)
}

/// Plain softmax along the last axis.
pub fn softmax(scores: &Tensor) -> Result<Tensor> {
    let mask = vec![true; scores.last_dim()];
    masked_softmax(scores, &mask)
}

/// Vector-Jacobian product of a (masked) softmax given its output `probs`.
pub fn softmax_backward(grad_out: &Tensor, probs: &Tensor) -> Tensor {
    let n = probs.last_dim();
    let mut dx = vec![0.0; probs.len()];
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_out.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dx[r * n + j] = p[j] * (g[j] - inner);
        }
    }
    Tensor::new(probs.shape().to_vec(), dx).expect("same shape")
}

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding 1

pub const KERNEL: usize = 3;

/// Geometry of one 3x3 convolution over a batch of images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * KERNEL * KERNEL
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn check(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Self> {
        let [batch, cin, h, wd] = *x.shape() else {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        };
        let [cout, cin_w, kh, kw] = *w.shape() else {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        };
        if cin != cin_w || kh != KERNEL || kw != KERNEL || b.shape() != [cout] {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if stride == 0 || h == 0 || wd == 0 {
            return Err(Error::Config(format!("conv2d: stride {stride} on {h}x{wd}")));
        }
        Ok(Self {
            batch,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: wd,
            stride,
        })
    }
}

/// Unfolds one image `[C,H,W]` into patch columns `[C·9, Ho·Wo]`.
fn im2col(img: &[f64], geo: &ConvGeometry, cols: &mut [f64]) {
    let (h, w) = (geo.height as isize, geo.width as isize);
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let hw = ho * wo;
    for c in 0..geo.in_channels {
        let plane = &img[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geo.stride) as isize + ky as isize - 1;
                    for ox in 0..wo {
                        let ix = (ox * geo.stride) as isize + kx as isize - 1;
                        dst[oy * wo + ox] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Folds patch-column gradients back onto the image gradient (accumulating).
fn col2im(cols: &[f64], geo: &ConvGeometry, img: &mut [f64]) {
    let (h, w) = (geo.height as isize, geo.width as isize);
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let hw = ho * wo;
    for c in 0..geo.in_channels {
        let plane = &mut img[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geo.stride) as isize + ky as isize - 1;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geo.stride) as isize + kx as isize - 1;
                        if ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Unfolded inputs kept for the backward pass, one block per image.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub geometry: ConvGeometry,
    pub columns: Vec<f64>,
}

/// 3x3 convolution with zero padding 1 over `x[N,C,H,W]` with `w[Co,C,3,3]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    conv2d_with_cache(x, w, b, stride).map(|(y, _)| y)
}

pub fn conv2d_with_cache(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
) -> Result<(Tensor, ConvCache)> {
    let geo = ConvGeometry::check(x, w, b, stride)?;
    let (patch, pix) = (geo.patch_len(), geo.out_pixels());
    let in_size = geo.in_channels * geo.height * geo.width;
    let out_size = geo.out_channels * pix;
    let mut columns = vec![0.0; geo.batch * patch * pix];
    let mut out = vec![0.0; geo.batch * out_size];
    for n in 0..geo.batch {
        let cols = &mut columns[n * patch * pix..(n + 1) * patch * pix];
        im2col(&x.data()[n * in_size..(n + 1) * in_size], &geo, cols);
        let dst = &mut out[n * out_size..(n + 1) * out_size];
        for (co, chunk) in dst.chunks_mut(pix).enumerate() {
            chunk.fill(b.data()[co]);
        }
        matmul_nn(w.data(), cols, dst, geo.out_channels, patch, pix);
    }
    let y = Tensor::new(
        vec![geo.batch, geo.out_channels, geo.out_height(), geo.out_width()],
        out,
    )?;
    Ok((
        y,
        ConvCache {
            geometry: geo,
            columns,
        },
    ))
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_input` is false.
pub fn conv2d_backward(
    grad_out: &Tensor,
    w: &Tensor,
    cache: &ConvCache,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let geo = cache.geometry;
    let (patch, pix) = (geo.patch_len(), geo.out_pixels());
    let in_size = geo.in_channels * geo.height * geo.width;
    let out_size = geo.out_channels * pix;
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; geo.out_channels];
    let mut dx = need_input.then(|| vec![0.0; geo.batch * in_size]);
    let mut dcols = vec![0.0; patch * pix];
    for n in 0..geo.batch {
        let g = &grad_out.data()[n * out_size..(n + 1) * out_size];
        let cols = &cache.columns[n * patch * pix..(n + 1) * patch * pix];
        matmul_nt(g, cols, &mut dw, geo.out_channels, pix, patch);
        for (co, chunk) in g.chunks(pix).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            matmul_tn(w.data(), g, &mut dcols, patch, geo.out_channels, pix);
            col2im(&dcols, &geo, &mut dx[n * in_size..(n + 1) * in_size]);
        }
    }
    let dx = dx.map(|d| {
        Tensor::new(
            vec![geo.batch, geo.in_channels, geo.height, geo.width],
            d,
        )
        .expect("input shape")
    });
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).expect("weight shape"),
        Tensor::from_vec(db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_product() {
        let y = linear(&t(&[2], &[1.0, 2.0]), &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let w = t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]);
        let y = linear(&t(&[2], &[1.0, 0.0]), &w, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);

        let y = linear(&Tensor::zeros(&[2]), &w, &t(&[2], &[7.0, 9.0])).unwrap();
        assert_eq!(y.data(), &[7.0, 9.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear(&Tensor::zeros(&[3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::ones(&[3]);
        let zero = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[3], &[5.0, 5.0, 5.0]), &one, &zero, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let (g, b) = (Tensor::ones(&[2]), Tensor::zeros(&[2]));
        let y = layer_norm(&t(&[2], &[1.0, -1.0]), &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);

        let y = layer_norm(&t(&[2], &[1.0, -1.0]), &g, &t(&[2], &[3.0, 3.0]), 0.0).unwrap();
        assert_eq!(y.data(), &[4.0, 2.0]);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let x = Tensor::new(vec![2, 0], vec![]).unwrap();
        let e = Tensor::new(vec![0], vec![]).unwrap();
        assert!(matches!(
            layer_norm(&x, &e, &e, LAYER_NORM_EPS),
            Err(Error::EmptyAxis(_))
        ));
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Gelu.eval(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.eval(0.0), 0.5);
        // 3·Φ(3) evaluated with 30-digit arithmetic.
        assert!((Activation::Gelu.eval(3.0) - 2.995_950_305_905_109_7).abs() < 1e-12);
        assert!("relu".parse::<Activation>().is_err());
        assert_eq!("GELU".parse::<Activation>().unwrap(), Activation::Gelu);
    }

    #[test]
    fn masked_softmax_examples() {
        let y = masked_softmax(&t(&[2], &[0.0, 0.0]), &[true, true]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let y = masked_softmax(&t(&[2], &[10.0, 0.0]), &[true, false]).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let y = masked_softmax(&t(&[3], &[2f64.ln(), 0.0, 0.0]), &[true; 3]).unwrap();
        for (a, b) in y.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }

        assert!(matches!(
            masked_softmax(&t(&[2], &[1.0, 2.0]), &[false, false]),
            Err(Error::DegenerateRow(_))
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);

        let bt = transpose(&b).unwrap();
        let mut nt = vec![0.0; 4];
        matmul_nt(a.data(), bt.data(), &mut nt, 2, 3, 2);
        assert_eq!(nt, c.data());

        let at = transpose(&a).unwrap();
        let mut tn = vec![0.0; 4];
        matmul_tn(at.data(), b.data(), &mut tn, 2, 3, 2);
        assert_eq!(tn, c.data());
    }

    #[test]
    fn conv_matches_direct_summation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 2, 5, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[3], 1.0, &mut rng);
        for stride in [1, 2] {
            let y = conv2d(&x, &w, &b, stride).unwrap();
            let (ho, wo) = ((5 - 1) / stride + 1, (4 - 1) / stride + 1);
            assert_eq!(y.shape(), &[2, 3, ho, wo]);
            for n in 0..2 {
                for co in 0..3 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data()[co];
                            for ci in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                            acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                                * x.data()
                                                    [((n * 2 + ci) * 5 + iy as usize) * 4 + ix as usize];
                                        }
                                    }
                                }
                            }
                            let got = y.data()[((n * 3 + co) * ho + oy) * wo + ox];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
