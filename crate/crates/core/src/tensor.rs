//! Rank-4 `f32` tensors and the handful of layer kernels the detector needs,
//! each with its backward pass.
//!
//! Convolutions are lowered to matrix products (im2col / col2im) and run
//! through `matrixmultiply::sgemm`, single-threaded so results are
//! reproducible bit for bit.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("bad shape: {0}")]
    BadShape(String),
}

/// `(batch, channels, height, width)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::BadShape(format!(
                "{shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[f32] {
        let size = self.shape[1] * self.plane();
        &self.data[n * size..(n + 1) * size]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f32] {
        let size = self.shape[1] * self.plane();
        &mut self.data[n * size..(n + 1) * size]
    }

    /// One `height x width` plane.
    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor, TensorError> {
        let Some(first) = items.first() else {
            return Err(TensorError::BadShape("cannot stack zero tensors".into()));
        };
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(TensorError::BadShape(format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w);
        Tensor::from_vec([n, c, h, w], data)
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers sized for the given dimensions and
    // strides; `c` is row-major `m x n` and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[cin * k * k, h * w]` patch matrix for a stride-1, same-padded conv.
fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { line[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let dst = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let from = &src[y * w..(y + 1) * w];
                    for (x, v) in from.iter().enumerate() {
                        let sx = x as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            line[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a square, stride-1, same-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub fn conv2d(x: &Tensor, shape: ConvShape, weight: &[f32], bias: &[f32]) -> Result<Tensor, TensorError> {
    let [n, c, h, w] = x.shape;
    if c != shape.cin || weight.len() != shape.weight_len() || bias.len() != shape.cout {
        return Err(TensorError::BadShape(format!(
            "conv {shape:?} applied to input {:?}",
            x.shape
        )));
    }
    let hw = h * w;
    let kk = shape.patch();
    let mut out = Tensor::zeros([n, shape.cout, h, w]);
    let mut col = if shape.k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for b in 0..n {
        let xin = x.item(b);
        let patches: &[f32] = if shape.k == 1 {
            xin
        } else {
            im2col(xin, c, h, w, shape.k, &mut col);
            &col
        };
        let y = out.item_mut(b);
        gemm(shape.cout, kk, hw, weight, (kk as isize, 1), patches, (hw as isize, 1), 0.0, y);
        for (co, &bv) in bias.iter().enumerate() {
            for v in &mut y[co * hw..(co + 1) * hw] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Accumulates weight and bias gradients into `dw` / `db` and returns the
/// input gradient when `want_dx` is set.
pub fn conv2d_backward(
    x: &Tensor,
    dy: &Tensor,
    shape: ConvShape,
    weight: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    want_dx: bool,
) -> Option<Tensor> {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let kk = shape.patch();
    let mut col = if shape.k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    let mut dcol = vec![0.0; kk * hw];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape));
    for b in 0..n {
        let xin = x.item(b);
        let patches: &[f32] = if shape.k == 1 {
            xin
        } else {
            im2col(xin, c, h, w, shape.k, &mut col);
            &col
        };
        let g = dy.item(b);
        gemm(shape.cout, hw, kk, g, (hw as isize, 1), patches, (1, hw as isize), 1.0, dw);
        for (co, d) in db.iter_mut().enumerate() {
            *d += g[co * hw..(co + 1) * hw].iter().sum::<f32>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, shape.cout, hw, weight, (1, kk as isize), g, (hw as isize, 1), 0.0, &mut dcol);
            let target = dx.item_mut(b);
            if shape.k == 1 {
                target.copy_from_slice(&dcol);
            } else {
                col2im(&dcol, c, h, w, shape.k, target);
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward_inplace(dy: &mut Tensor, out: &Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2. Also returns, per output value, the flat
/// input index that won.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<u32>), TensorError> {
    let [n, c, h, w] = x.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::BadShape(format!("max pool needs even sides, got {:?}", x.shape)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut idx = vec![0u32; out.len()];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * y + dy) * w + 2 * xx + dx;
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = plane * oh * ow + y * ow + xx;
                out.data[o] = src[best];
                idx[o] = (plane * h * w + best) as u32;
            }
        }
    }
    Ok((out, idx))
}

pub fn max_pool2_backward(dy: &Tensor, idx: &[u32], input_shape: [usize; 4]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (g, &i) in dy.data.iter().zip(idx) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn unpool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn unpool2_backward(dy: &Tensor) -> Tensor {
    let [n, c, oh, ow] = dy.shape;
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &dy.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

/// Channel-axis concatenation `[a; b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let [n, ca, h, w] = a.shape;
    let [nb, cb, hb, wb] = b.shape;
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::BadShape(format!("concat {:?} with {:?}", a.shape, b.shape)));
    }
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        let dst = out.item_mut(i);
        let split = a.item(i).len();
        dst[..split].copy_from_slice(a.item(i));
        dst[split..].copy_from_slice(b.item(i));
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = dy.shape;
    let mut a = Tensor::zeros([n, ca, h, w]);
    let mut b = Tensor::zeros([n, c - ca, h, w]);
    for i in 0..n {
        let src = dy.item(i);
        let split = ca * h * w;
        a.item_mut(i).copy_from_slice(&src[..split]);
        b.item_mut(i).copy_from_slice(&src[split..]);
    }
    (a, b)
}

pub fn add_inplace(acc: &mut Tensor, other: &Tensor) {
    debug_assert_eq!(acc.shape, other.shape);
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: [usize; 4], scale: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 23) as f32 - 11.0) * scale).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as the reference.
    fn conv_naive(x: &Tensor, s: ConvShape, wt: &[f32], b: &[f32]) -> Tensor {
        let [n, _, h, w] = x.shape();
        let pad = (s.k / 2) as isize;
        let mut out = Tensor::zeros([n, s.cout, h, w]);
        for bi in 0..n {
            for co in 0..s.cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = b[co] as f64;
                        for ci in 0..s.cin {
                            for ky in 0..s.k {
                                for kx in 0..s.k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = wt[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                                    let xv = x.channel(bi, ci)[sy as usize * w + sx as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        out.channel_mut(bi, co)[y * w + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1, 3] {
            let s = ConvShape { cin: 3, cout: 4, k };
            let x = seq([2, 3, 5, 6], 0.1);
            let wt: Vec<f32> = (0..s.weight_len()).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.05).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let got = conv2d(&x, s, &wt, &b).unwrap();
            let want = conv_naive(&x, s, &wt, &b);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let s = ConvShape { cin: 2, cout: 1, k: 3 };
        let x = Tensor::zeros([1, 3, 4, 4]);
        assert!(conv2d(&x, s, &vec![0.0; s.weight_len()], &[0.0]).is_err());
    }

    /// Finite-difference check of conv -> relu -> conv under a
    /// sum-of-squares loss, in f64 accumulation over f32 kernels.
    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let s1 = ConvShape { cin: 1, cout: 2, k: 3 };
        let s2 = ConvShape { cin: 2, cout: 1, k: 3 };
        let wave = |n: usize, phase: f32, amp: f32| -> Vec<f32> {
            (0..n).map(|i| (i as f32 * 1.37 + phase).sin() * amp).collect()
        };
        let x = Tensor::from_vec([1, 1, 6, 6], wave(36, 0.3, 1.0)).unwrap();
        let w1 = wave(s1.weight_len(), 1.1, 0.5);
        let b1 = vec![0.05, -0.02];
        let w2 = wave(s2.weight_len(), 2.9, 0.5);
        let b2 = vec![0.01];

        let loss = |w1: &[f32]| -> f64 {
            let mut a = conv2d(&x, s1, w1, &b1).unwrap();
            relu_inplace(&mut a);
            let y = conv2d(&a, s2, &w2, &b2).unwrap();
            y.data().iter().map(|&v| 0.5 * (v as f64).powi(2)).sum()
        };

        let mut a = conv2d(&x, s1, &w1, &b1).unwrap();
        relu_inplace(&mut a);
        let y = conv2d(&a, s2, &w2, &b2).unwrap();
        let dy = y.clone();
        let mut dw2 = vec![0.0; w2.len()];
        let mut db2 = vec![0.0; 1];
        let mut da = conv2d_backward(&a, &dy, s2, &w2, &mut dw2, &mut db2, true).unwrap();
        relu_backward_inplace(&mut da, &a);
        let mut dw1 = vec![0.0; w1.len()];
        let mut db1 = vec![0.0; 2];
        conv2d_backward(&x, &da, s1, &w1, &mut dw1, &mut db1, false);

        let h = 1e-4f32;
        for i in 0..w1.len() {
            let mut p = w1.clone();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h as f64);
            let an = dw1[i] as f64;
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-3);
            assert!(rel < 1e-2, "w1[{i}]: analytic {an} fd {fd}");
        }
    }

    #[test]
    fn pool_and_unpool() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap();
        let (p, idx) = max_pool2(&x).unwrap();
        assert_eq!(p.data(), &[5.0, 7.0]);
        let dx = max_pool2_backward(&Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap(), &idx, x.shape());
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);

        let small = Tensor::from_vec([1, 2, 4, 4], (0..32).map(|v| v as f32).collect()).unwrap();
        let up = unpool2(&small);
        assert_eq!(up.shape(), [1, 2, 8, 8]);
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(up.channel(0, c)[y * 8 + x], small.channel(0, c)[(y / 2) * 4 + x / 2]);
                }
            }
        }
        let back = unpool2_backward(&Tensor::from_vec([1, 2, 8, 8], vec![1.0; 128]).unwrap());
        assert!(back.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_and_split() {
        let a = seq([2, 1, 2, 2], 1.0);
        let b = seq([2, 3, 2, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 4, 2, 2]);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!((a2, b2), (a, b));
    }
}
