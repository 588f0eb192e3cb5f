use rand::Rng;

use super::direct::{conv_forward, conv_weight_grad, flip_weights, pack_weights, Padded, DIRECT_MIN_WIDTH};
use super::Param;
use crate::tensor::{voxel_count, Dims3, Real, Tensor};

/// Stride-1 convolution with "same" zero padding.
///
/// Weight layout `[out, in, kd, kh, kw]`. Kernels of extent 1 along an axis do
/// not pad that axis, which is how the planar (D = 1) mode is expressed.
#[derive(Clone, Debug)]
pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: Dims3,
}

impl<T: Real> Conv3d<T> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, kernel: Dims3, bias: bool, rng: &mut R) -> Self {
        assert!(kernel.iter().all(|k| k % 2 == 1), "odd kernels only");
        let fan_in = in_ch * voxel_count(kernel);
        let weight = Param::kaiming(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel[0], kernel[1], kernel[2]],
            fan_in,
            rng,
        );
        let bias = bias.then(|| Param::constant(format!("{name}.bias"), vec![out_ch], T::zero()));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn taps(&self) -> usize {
        voxel_count(self.kernel)
    }

    fn is_pointwise(&self) -> bool {
        self.taps() == 1
    }

    fn pad(&self) -> Dims3 {
        self.kernel.map(|k| k / 2)
    }

    /// Rows at least one lane chunk wide go through the direct kernels; small
    /// grids are lowered to a matrix product instead.
    fn direct(&self, dims: Dims3) -> bool {
        !self.is_pointwise() && dims[2] >= DIRECT_MIN_WIDTH
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, d, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "{}: input channels", self.weight.name);
        let dims = [d, h, w];
        let v = d * h * w;
        let k = self.in_ch * self.taps();
        let mut y = Tensor::zeros([n, self.out_ch, d, h, w]);
        if self.direct(dims) {
            let packed = pack_weights(&self.weight.value, self.out_ch, k);
            for i in 0..n {
                let grid = Padded::new(x.sample(i), self.in_ch, dims, self.pad());
                let offs = grid.offsets(self.in_ch, self.kernel);
                conv_forward(&grid, &offs, &packed, self.out_ch, dims, y.sample_mut(i));
            }
        } else {
            let mut cols = if self.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k * v]
            };
            for i in 0..n {
                let src: &[T] = if self.is_pointwise() {
                    x.sample(i)
                } else {
                    im2col(x.sample(i), self.in_ch, dims, self.kernel, &mut cols);
                    &cols
                };
                T::gemm(
                    self.out_ch,
                    k,
                    v,
                    T::one(),
                    &self.weight.value,
                    k as isize,
                    1,
                    src,
                    v as isize,
                    1,
                    T::zero(),
                    y.sample_mut(i),
                    v as isize,
                    1,
                );
            }
        }
        if let Some(b) = &self.bias {
            for i in 0..n {
                for (o, &bo) in b.value.iter().enumerate() {
                    y.plane_mut(i, o).iter_mut().for_each(|e| *e += bo);
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, _, d, h, w] = x.shape();
        let dims = [d, h, w];
        let v = d * h * w;
        let taps = self.taps();
        let k = self.in_ch * taps;
        let mut dx = Tensor::zeros(x.shape());
        if let Some(b) = &mut self.bias {
            for i in 0..n {
                for (o, gb) in b.grad.iter_mut().enumerate() {
                    *gb += dy.plane(i, o).iter().fold(T::zero(), |acc, &e| acc + e);
                }
            }
        }
        if self.direct(dims) {
            let flipped = flip_weights(&self.weight.value, self.out_ch, self.in_ch, taps);
            let flipped = pack_weights(&flipped, self.in_ch, self.out_ch * taps);
            for i in 0..n {
                let g = dy.sample(i);
                let grid = Padded::new(x.sample(i), self.in_ch, dims, self.pad());
                let offs = grid.offsets(self.in_ch, self.kernel);
                conv_weight_grad(&grid, &offs, g, self.out_ch, dims, &mut self.weight.grad);
                let dgrid = Padded::new(g, self.out_ch, dims, self.pad());
                let doffs = dgrid.offsets(self.out_ch, self.kernel);
                conv_forward(&dgrid, &doffs, &flipped, self.in_ch, dims, dx.sample_mut(i));
            }
            return dx;
        }
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * v]
        };
        let mut dcols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * v]
        };
        for i in 0..n {
            let g = dy.sample(i);
            let src: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), self.in_ch, dims, self.kernel, &mut cols);
                &cols
            };
            // dW[o, k] += dy[o, v] · src[k, v]^T
            T::gemm(
                self.out_ch,
                v,
                k,
                T::one(),
                g,
                v as isize,
                1,
                src,
                1,
                v as isize,
                T::one(),
                &mut self.weight.grad,
                k as isize,
                1,
            );
            // dsrc[k, v] = W^T · dy
            let dst: &mut [T] = if self.is_pointwise() {
                dx.sample_mut(i)
            } else {
                &mut dcols
            };
            T::gemm(
                k,
                self.out_ch,
                v,
                T::one(),
                &self.weight.value,
                1,
                k as isize,
                g,
                v as isize,
                1,
                T::zero(),
                dst,
                v as isize,
                1,
            );
            if !self.is_pointwise() {
                col2im(&dcols, self.in_ch, dims, self.kernel, dx.sample_mut(i));
            }
        }
        dx
    }
}

/// For every (channel, tap) row and every output voxel, the input voxel at the
/// tap offset, or zero outside the volume.
fn im2col<T: Real>(x: &[T], channels: usize, dims: Dims3, kernel: Dims3, cols: &mut [T]) {
    let [d, h, w] = dims;
    let v = d * h * w;
    let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * v..(c + 1) * v];
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for e in 0..kernel[2] {
                    let out = &mut cols[row * v..(row + 1) * v];
                    let (lo, hi) = valid_range(w, e, pad[2]);
                    for z in 0..d {
                        let sz = z as isize + a as isize - pad[0] as isize;
                        for y in 0..h {
                            let sy = y as isize + b as isize - pad[1] as isize;
                            let o = &mut out[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                o.fill(T::zero());
                                continue;
                            }
                            let s = (sz as usize * h + sy as usize) * w;
                            o[..lo].fill(T::zero());
                            o[hi..].fill(T::zero());
                            let shift = e as isize - pad[2] as isize;
                            let from = (s as isize + lo as isize + shift) as usize;
                            o[lo..hi].copy_from_slice(&plane[from..from + (hi - lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add rows back onto the input grid.
fn col2im<T: Real>(cols: &[T], channels: usize, dims: Dims3, kernel: Dims3, dx: &mut [T]) {
    let [d, h, w] = dims;
    let v = d * h * w;
    let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dx[c * v..(c + 1) * v];
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for e in 0..kernel[2] {
                    let src = &cols[row * v..(row + 1) * v];
                    let (lo, hi) = valid_range(w, e, pad[2]);
                    let shift = e as isize - pad[2] as isize;
                    for z in 0..d {
                        let sz = z as isize + a as isize - pad[0] as isize;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + b as isize - pad[1] as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let s = (sz as usize * h + sy as usize) * w;
                            let from = (s as isize + lo as isize + shift) as usize;
                            let o = &src[(z * h + y) * w + lo..(z * h + y) * w + hi];
                            for (t, &g) in plane[from..from + (hi - lo)].iter_mut().zip(o) {
                                *t += g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `e` lands inside a row of width `w`.
fn valid_range(w: usize, e: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(e);
    let hi = (w + pad).saturating_sub(e).min(w);
    (lo.min(hi), hi)
}

/// Transposed convolution with kernel = stride = `factor` (non-overlapping
/// upsampling). Weight layout `[in, out, fd, fh, fw]`.
#[derive(Clone, Debug)]
pub struct UpConv3d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_ch: usize,
    out_ch: usize,
    factor: Dims3,
}

impl<T: Real> UpConv3d<T> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, factor: Dims3, rng: &mut R) -> Self {
        let weight = Param::kaiming(
            format!("{name}.weight"),
            vec![in_ch, out_ch, factor[0], factor[1], factor[2]],
            in_ch,
            rng,
        );
        let bias = Param::constant(format!("{name}.bias"), vec![out_ch], T::zero());
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            factor,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, d, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "{}: input channels", self.weight.name);
        let f = self.factor;
        let taps = voxel_count(f);
        let rows = self.out_ch * taps;
        let v = d * h * w;
        let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
        let mut y = Tensor::zeros([n, self.out_ch, od, oh, ow]);
        let mut tmp = vec![T::zero(); rows * v];
        for i in 0..n {
            T::gemm(
                rows,
                self.in_ch,
                v,
                T::one(),
                &self.weight.value,
                1,
                rows as isize,
                x.sample(i),
                v as isize,
                1,
                T::zero(),
                &mut tmp,
                v as isize,
                1,
            );
            for o in 0..self.out_ch {
                let bo = self.bias.value[o];
                let plane = y.plane_mut(i, o);
                for t in 0..taps {
                    let (a, b, e) = (t / (f[1] * f[2]), (t / f[2]) % f[1], t % f[2]);
                    let src = &tmp[(o * taps + t) * v..(o * taps + t + 1) * v];
                    for z in 0..d {
                        for yy in 0..h {
                            let base = ((z * f[0] + a) * oh + yy * f[1] + b) * ow + e;
                            let s = &src[(z * h + yy) * w..(z * h + yy + 1) * w];
                            for (xx, &val) in s.iter().enumerate() {
                                plane[base + xx * f[2]] = val + bo;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, _, d, h, w] = x.shape();
        let f = self.factor;
        let taps = voxel_count(f);
        let rows = self.out_ch * taps;
        let v = d * h * w;
        let (oh, ow) = (h * f[1], w * f[2]);
        let mut dx = Tensor::zeros(x.shape());
        let mut gathered = vec![T::zero(); rows * v];
        for i in 0..n {
            for o in 0..self.out_ch {
                let plane = dy.plane(i, o);
                self.bias.grad[o] += plane.iter().fold(T::zero(), |acc, &e| acc + e);
                for t in 0..taps {
                    let (a, b, e) = (t / (f[1] * f[2]), (t / f[2]) % f[1], t % f[2]);
                    let dst = &mut gathered[(o * taps + t) * v..(o * taps + t + 1) * v];
                    for z in 0..d {
                        for yy in 0..h {
                            let base = ((z * f[0] + a) * oh + yy * f[1] + b) * ow + e;
                            let out = &mut dst[(z * h + yy) * w..(z * h + yy + 1) * w];
                            for (xx, slot) in out.iter_mut().enumerate() {
                                *slot = plane[base + xx * f[2]];
                            }
                        }
                    }
                }
            }
            // dW[in, rows] += x[in, v] · g[rows, v]^T
            T::gemm(
                self.in_ch,
                v,
                rows,
                T::one(),
                x.sample(i),
                v as isize,
                1,
                &gathered,
                1,
                v as isize,
                T::one(),
                &mut self.weight.grad,
                rows as isize,
                1,
            );
            // dx[in, v] = W[in, rows] · g[rows, v]
            T::gemm(
                self.in_ch,
                rows,
                v,
                T::one(),
                &self.weight.value,
                rows as isize,
                1,
                &gathered,
                v as isize,
                1,
                T::zero(),
                dx.sample_mut(i),
                v as isize,
                1,
            );
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-summation reference for the same-padded convolution.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv3d<f64>) -> Tensor<f64> {
        let [n, ci, d, h, w] = x.shape();
        let k = conv.kernel;
        let co = conv.out_ch;
        let mut y = Tensor::zeros([n, co, d, h, w]);
        for i in 0..n {
            for o in 0..co {
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                            for c in 0..ci {
                                for a in 0..k[0] {
                                    for b in 0..k[1] {
                                        for e in 0..k[2] {
                                            let sz = z as isize + a as isize - (k[0] / 2) as isize;
                                            let sy = yy as isize + b as isize - (k[1] / 2) as isize;
                                            let sx = xx as isize + e as isize - (k[2] / 2) as isize;
                                            if sz < 0
                                                || sy < 0
                                                || sx < 0
                                                || sz >= d as isize
                                                || sy >= h as isize
                                                || sx >= w as isize
                                            {
                                                continue;
                                            }
                                            let widx = (((o * ci + c) * k[0] + a) * k[1] + b) * k[2] + e;
                                            let xidx = (sz as usize * h + sy as usize) * w + sx as usize;
                                            acc += conv.weight.value[widx] * x.plane(i, c)[xidx];
                                        }
                                    }
                                }
                            }
                            y.plane_mut(i, o)[(z * h + yy) * w + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel in [[3, 3, 3], [1, 3, 3], [1, 1, 1]] {
            let mut conv = Conv3d::<f64>::new("c", 2, 3, kernel, true, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value = vec![0.1, -0.2, 0.3];
            }
            let x = random_tensor([2, 2, 3, 4, 5], &mut rng);
            let got = conv.forward(&x);
            let want = naive_conv(&x, &conv);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> is linear in x and W: check dx and dW against it.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv3d::<f64>::new("c", 2, 2, [3, 3, 3], false, &mut rng);
        let x = random_tensor([1, 2, 3, 3, 4], &mut rng);
        let g = random_tensor([1, 2, 3, 3, 4], &mut rng);
        let dx = conv.backward(&x, &g);
        let inner = |conv: &Conv3d<f64>, x: &Tensor<f64>| -> f64 {
            conv.forward(x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let base = inner(&conv, &x);
        for idx in [0, 7, 20, 41] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += 1.0;
            assert!((inner(&conv, &xp) - base - dx.data()[idx]).abs() < 1e-10);
        }
        for idx in [0, 13, 50, 107] {
            let mut cp = conv.clone();
            cp.weight.value[idx] += 1.0;
            assert!((inner(&cp, &x) - base - conv.weight.grad[idx]).abs() < 1e-10);
        }
    }

    #[test]
    fn wide_rows_use_direct_kernels() {
        // widths past one lane chunk, channel counts that leave partial blocks
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kernel in [[3, 3, 3], [1, 3, 3]] {
            let mut conv = Conv3d::<f64>::new("c", 3, 10, kernel, false, &mut rng);
            let x = random_tensor([2, 3, 3, 2, 19], &mut rng);
            assert!(conv.direct([3, 2, 19]));
            let got = conv.forward(&x);
            let want = naive_conv(&x, &conv);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }

            let g = random_tensor(got.shape(), &mut rng);
            let dx = conv.backward(&x, &g);
            let inner = |conv: &Conv3d<f64>, x: &Tensor<f64>| -> f64 {
                naive_conv(x, conv)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let base = inner(&conv, &x);
            for idx in [0, 18, 19, 77, 113, x.data().len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += 1.0;
                assert!((inner(&conv, &xp) - base - dx.data()[idx]).abs() < 1e-9);
            }
            for idx in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight.value[idx] += 1.0;
                assert!((inner(&cp, &x) - base - conv.weight.grad[idx]).abs() < 1e-9, "{idx}");
            }
        }
    }

    #[test]
    fn upconv_places_each_input_in_its_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = UpConv3d::<f64>::new("u", 1, 1, [2, 2, 2], &mut rng);
        up.weight.value = (1..=8).map(|v| v as f64).collect();
        up.bias.value = vec![0.5];
        let x = Tensor::from_vec([1, 1, 1, 1, 2], vec![1.0, 10.0]).unwrap();
        let y = up.forward(&x);
        assert_eq!(y.shape(), [1, 1, 2, 2, 4]);
        // voxel (a, b, e) of block j gets w[a,b,e] * x[j] + bias
        assert_eq!(y.plane(0, 0)[0], 1.5);
        assert_eq!(y.plane(0, 0)[3], 20.5);
        assert_eq!(y.plane(0, 0)[(2 + 1) * 4 + 1], 8.5);
    }

    #[test]
    fn upconv_backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut up = UpConv3d::<f64>::new("u", 3, 2, [1, 2, 2], &mut rng);
        let x = random_tensor([2, 3, 1, 2, 3], &mut rng);
        let g = random_tensor([2, 2, 1, 4, 6], &mut rng);
        let dx = up.backward(&x, &g);
        let inner = |m: &UpConv3d<f64>, x: &Tensor<f64>| -> f64 {
            m.forward(x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let base = inner(&up, &x);
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += 1.0;
            assert!((inner(&up, &xp) - base - dx.data()[idx]).abs() < 1e-10);
        }
        for idx in 0..up.weight.len() {
            let mut mp = up.clone();
            mp.weight.value[idx] += 1.0;
            assert!((inner(&mp, &x) - base - up.weight.grad[idx]).abs() < 1e-10);
        }
    }
}
