//! Differentiable building blocks: convolution, instance normalization,
//! leaky ReLU, nearest upsampling and channel concatenation.

use crate::tensor::{gemm, Feature, Mat, Real};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Convolution geometry and the indices of its parameters in the store.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Multiply-accumulate count for one application at input size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_dims(h, w);
        (ho * wo * self.patch_len() * self.cout) as u64
    }

    fn im2col<T: Real>(&self, x: &Feature<T>) -> (Vec<T>, usize, usize) {
        let (ho, wo) = self.out_dims(x.height, x.width);
        let k = self.kernel;
        let pad = self.pad() as isize;
        let s = self.stride;
        let n = ho * wo;
        let mut cols = vec![T::zero(); self.patch_len() * n];
        for ci in 0..self.cin {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Feature<T> {
        let k = self.kernel;
        let pad = self.pad() as isize;
        let s = self.stride;
        let n = ho * wo;
        let mut dx = Feature::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, params: &[Vec<T>], x: &Feature<T>) -> Feature<T> {
        debug_assert_eq!(x.channels, self.cin);
        let (cols, ho, wo) = self.im2col(x);
        let n = ho * wo;
        let mut out = Feature::zeros(self.cout, ho, wo);
        if let Some(b) = self.bias {
            for (co, &bv) in params[b].iter().enumerate() {
                out.data[co * n..(co + 1) * n].fill(bv);
            }
        }
        gemm(
            Mat::new(&params[self.weight], self.cout, self.patch_len()),
            Mat::new(&cols, self.patch_len(), n),
            if self.bias.is_some() { T::one() } else { T::zero() },
            &mut out.data,
        );
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        params: &[Vec<T>],
        grads: &mut [Vec<T>],
        x: &Feature<T>,
        dy: &Feature<T>,
    ) -> Feature<T> {
        let (cols, ho, wo) = self.im2col(x);
        let n = ho * wo;
        debug_assert_eq!(dy.data.len(), self.cout * n);
        let kl = self.patch_len();
        gemm(
            Mat::new(&dy.data, self.cout, n),
            Mat::new(&cols, kl, n).t(),
            T::one(),
            &mut grads[self.weight],
        );
        if let Some(b) = self.bias {
            for (co, g) in grads[b].iter_mut().enumerate() {
                *g += dy.data[co * n..(co + 1) * n].iter().copied().sum::<T>();
            }
        }
        let mut dcols = cols;
        gemm(
            Mat::new(&params[self.weight], self.cout, kl).t(),
            Mat::new(&dy.data, self.cout, n),
            T::zero(),
            &mut dcols,
        );
        self.col2im(&dcols, x.height, x.width, ho, wo)
    }
}

/// Per-sample, per-channel normalization with optional affine parameters
/// (indices of gamma and beta).
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub affine: Option<(usize, usize)>,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Feature<T>,
    inv_std: Vec<T>,
}

impl InstanceNorm {
    pub fn forward<T: Real>(
        &self,
        params: &[Vec<T>],
        x: &Feature<T>,
        keep: bool,
    ) -> (Feature<T>, Option<NormCache<T>>) {
        let p = x.plane();
        let np = T::lit(p as f64);
        let eps = T::lit(NORM_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.channels);
        for c in 0..x.channels {
            let ch = &mut xhat.data[c * p..(c + 1) * p];
            let mean = ch.iter().copied().sum::<T>() / np;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / np;
            let is = T::one() / (var + eps).sqrt();
            for v in ch.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = match self.affine {
            Some((g, b)) => {
                let mut out = xhat.clone();
                for c in 0..x.channels {
                    let (gv, bv) = (params[g][c], params[b][c]);
                    for v in &mut out.data[c * p..(c + 1) * p] {
                        *v = gv * *v + bv;
                    }
                }
                out
            }
            None if keep => xhat.clone(),
            None => return (xhat, None),
        };
        let cache = keep.then_some(NormCache { xhat, inv_std });
        (out, cache)
    }

    pub fn backward<T: Real>(
        &self,
        params: &[Vec<T>],
        grads: &mut [Vec<T>],
        cache: &NormCache<T>,
        dy: &Feature<T>,
    ) -> Feature<T> {
        let xhat = &cache.xhat;
        let p = xhat.plane();
        let np = T::lit(p as f64);
        let mut dx = Feature::zeros(xhat.channels, xhat.height, xhat.width);
        for c in 0..xhat.channels {
            let xh = xhat.channel(c);
            let g = dy.channel(c);
            let gamma = match self.affine {
                Some((gi, bi)) => {
                    let dgamma: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    let dbeta: T = g.iter().copied().sum();
                    grads[gi][c] += dgamma;
                    grads[bi][c] += dbeta;
                    params[gi][c]
                }
                None => T::one(),
            };
            // dxhat = gamma * dy
            let sum_d: T = g.iter().copied().sum::<T>() * gamma;
            let sum_dx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * gamma;
            let scale = cache.inv_std[c] / np;
            for ((o, &gi), &xi) in dx.data[c * p..(c + 1) * p].iter_mut().zip(g).zip(xh) {
                *o = scale * (np * gamma * gi - sum_d - xi * sum_dx);
            }
        }
        dx
    }
}

pub fn leaky_relu<T: Real>(mut x: Feature<T>) -> Feature<T> {
    let slope = T::lit(LEAKY_SLOPE);
    for v in &mut x.data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
    x
}

/// Gradient through leaky ReLU given its output (sign is preserved).
pub fn leaky_relu_backward<T: Real>(out: &Feature<T>, mut dy: Feature<T>) -> Feature<T> {
    let slope = T::lit(LEAKY_SLOPE);
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o < T::zero() {
            *g *= slope;
        }
    }
    dy
}

pub fn upsample2<T: Real>(x: &Feature<T>) -> Feature<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Feature::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let row = &src[(y / 2) * x.width..(y / 2 + 1) * x.width];
            for (xo, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = row[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Feature<T>) -> Feature<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = Feature::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let src = dy.channel(c);
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..dy.height {
            for x in 0..dy.width {
                dst[(y / 2) * w + x / 2] += src[y * dy.width + x];
            }
        }
    }
    dx
}

pub fn concat<T: Real>(a: &Feature<T>, b: &Feature<T>) -> Feature<T> {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature::from_vec(a.channels + b.channels, a.height, a.width, data)
}

pub fn split_channels<T: Real>(x: Feature<T>, first: usize) -> (Feature<T>, Feature<T>) {
    let cut = first * x.plane();
    let (h, w, c) = (x.height, x.width, x.channels);
    let mut data = x.data;
    let rest = data.split_off(cut);
    (
        Feature::from_vec(first, h, w, data),
        Feature::from_vec(c - first, h, w, rest),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(conv: &Conv, w: &[f64], b: Option<&[f64]>, x: &Feature<f64>) -> Feature<f64> {
        let (ho, wo) = conv.out_dims(x.height, x.width);
        let k = conv.kernel;
        let pad = conv.pad() as isize;
        let mut out = Feature::zeros(conv.cout, ho, wo);
        for co in 0..conv.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - pad;
                                let ix = (ox * conv.stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                acc += w[((co * conv.cin + ci) * k + ky) * k + kx]
                                    * x.data[(ci * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(k, s) in &[(3, 1), (3, 2), (1, 2), (1, 1)] {
            let conv = Conv { weight: 0, bias: Some(1), cin: 2, cout: 3, kernel: k, stride: s };
            let params = vec![ramp(3 * 2 * k * k, 0.1), vec![0.5, -0.25, 0.0]];
            let x = Feature::from_vec(2, 6, 5, ramp(60, 0.05));
            let got = conv.forward(&params, &x);
            let want = direct_conv(&conv, &params[0], Some(&params[1]), &x);
            assert_eq!((got.height, got.width), (want.height, want.width));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = Conv { weight: 0, bias: Some(1), cin: 2, cout: 2, kernel: 3, stride: 2 };
        let mut params = vec![ramp(36, 0.1), vec![0.1, -0.2]];
        let x = Feature::from_vec(2, 5, 4, ramp(40, 0.07));
        let dy_seed = ramp(2 * 3 * 2, 0.3);
        let loss = |p: &[Vec<f64>], x: &Feature<f64>| -> f64 {
            conv.forward(p, x).data.iter().zip(&dy_seed).map(|(a, b)| a * b).sum()
        };
        let mut grads = vec![vec![0.0; 36], vec![0.0; 2]];
        let dy = Feature::from_vec(2, 3, 2, dy_seed.clone());
        let dx = conv.backward(&params, &mut grads, &x, &dy);
        let h = 1e-6;
        for (pi, i) in [(0usize, 0usize), (0, 17), (0, 35), (1, 0), (1, 1)] {
            let orig = params[pi][i];
            params[pi][i] = orig + h;
            let up = loss(&params, &x);
            params[pi][i] = orig - h;
            let dn = loss(&params, &x);
            params[pi][i] = orig;
            assert!(((up - dn) / (2.0 * h) - grads[pi][i]).abs() < 1e-6);
        }
        for i in [0usize, 7, 19, 39] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&params, &xp);
            xp.data[i] -= 2.0 * h;
            let dn = loss(&params, &xp);
            assert!(((up - dn) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let norm = InstanceNorm { affine: Some((0, 1)), channels: 2 };
        let params = vec![vec![1.5, 0.7], vec![0.2, -0.1]];
        let x = Feature::from_vec(2, 3, 3, ramp(18, 0.11));
        let dy_seed = ramp(18, 0.37);
        let loss = |x: &Feature<f64>| -> f64 {
            norm.forward(&params, x, false).0.data.iter().zip(&dy_seed).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = norm.forward(&params, &x, true);
        let mut grads = vec![vec![0.0; 2], vec![0.0; 2]];
        let dx = norm.backward(&params, &mut grads, cache.as_ref().unwrap(), &Feature::from_vec(2, 3, 3, dy_seed.clone()));
        let h = 1e-6;
        for i in 0..18 {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&xp);
            xp.data[i] -= 2.0 * h;
            let dn = loss(&xp);
            assert!(((up - dn) / (2.0 * h) - dx.data[i]).abs() < 1e-5, "elem {i}");
        }
    }

    #[test]
    fn normalized_channels_have_zero_mean_unit_variance() {
        let norm = InstanceNorm { affine: None, channels: 1 };
        let x = Feature::from_vec(1, 4, 4, ramp(16, 1.0));
        let (y, _) = norm.forward::<f64>(&[], &x, false);
        let mean: f64 = y.data.iter().sum::<f64>() / 16.0;
        let var: f64 = y.data.iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn upsample_and_concat_round_trip() {
        let x = Feature::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample2(&x);
        assert_eq!(up.data[..4], [1.0, 1.0, 2.0, 2.0]);
        let back = upsample2_backward(&up);
        assert_eq!(back.data, vec![4.0, 8.0, 12.0, 16.0]);
        let cat = concat(&x, &x);
        let (a, b) = split_channels(cat, 1);
        assert_eq!(a, x);
        assert_eq!(b, x);
    }
}
