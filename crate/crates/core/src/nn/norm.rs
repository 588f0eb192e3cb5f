use super::Param;
use crate::tensor::{Real, Tensor};

const EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization with a learned affine transform.
#[derive(Clone, Debug)]
pub struct InstanceNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

/// Normalized activations and inverse standard deviations from the forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> InstanceNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::constant(format!("{name}.gamma"), vec![channels], T::one()),
            beta: Param::constant(format!("{name}.beta"), vec![channels], T::zero()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let [n, c, ..] = x.shape();
        let v = x.voxels();
        let inv_v = 1.0 / v as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                let src = x.plane(i, ch);
                let mean = src.iter().map(|e| e.as_f64()).sum::<f64>() * inv_v;
                let var = src
                    .iter()
                    .map(|e| {
                        let d = e.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    * inv_v;
                let istd = 1.0 / (var + EPS).sqrt();
                let (m, s) = (T::from_f64(mean), T::from_f64(istd));
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                let xh = xhat.plane_mut(i, ch);
                for (o, &e) in xh.iter_mut().zip(src) {
                    *o = (e - m) * s;
                }
                for (o, &e) in y.plane_mut(i, ch).iter_mut().zip(xhat.plane(i, ch)) {
                    *o = g * e + b;
                }
                inv_std.push(s);
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, ..] = dy.shape();
        let v = dy.voxels();
        let inv_v = 1.0 / v as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..n {
            for ch in 0..c {
                let g = dy.plane(i, ch);
                let xh = cache.xhat.plane(i, ch);
                let (sum_g, sum_gx) = g.iter().zip(xh).fold((0.0, 0.0), |(a, b), (&gi, &xi)| {
                    (a + gi.as_f64(), b + gi.as_f64() * xi.as_f64())
                });
                self.gamma.grad[ch] += T::from_f64(sum_gx);
                self.beta.grad[ch] += T::from_f64(sum_g);
                let gamma = self.gamma.value[ch];
                let scale = gamma * cache.inv_std[i * c + ch];
                let mean_g = T::from_f64(sum_g * inv_v);
                let mean_gx = T::from_f64(sum_gx * inv_v);
                for ((o, &gi), &xi) in dx.plane_mut(i, ch).iter_mut().zip(g).zip(xh) {
                    *o = scale * (gi - mean_g - xi * mean_gx);
                }
            }
        }
        dx
    }
}
