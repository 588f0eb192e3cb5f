use crate::tensor::{Dims3, Real, Tensor};

/// Linear interpolation taps along one axis: output `i` reads
/// `w0 * in[i0] + w1 * in[i1]`.
#[derive(Clone, Debug)]
struct AxisTaps {
    src: usize,
    i0: Vec<usize>,
    i1: Vec<usize>,
    w1: Vec<f64>,
}

impl AxisTaps {
    /// Half-pixel-centre mapping (`align_corners = false`), clamped at the edges.
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut i0 = Vec::with_capacity(dst);
        let mut i1 = Vec::with_capacity(dst);
        let mut w1 = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            i0.push(lo);
            i1.push(hi);
            w1.push(frac);
        }
        Self { src, i0, i1, w1 }
    }

    fn dst(&self) -> usize {
        self.i0.len()
    }
}

/// Separable trilinear resampling between two fixed spatial shapes.
///
/// Each output voxel is a convex combination of input voxels, so resampling a
/// probability map channel by channel keeps every voxel on the simplex.
#[derive(Clone, Debug)]
pub struct Resize {
    from: Dims3,
    to: Dims3,
    axes: [AxisTaps; 3],
}

impl Resize {
    pub fn new(from: Dims3, to: Dims3) -> Self {
        Self {
            from,
            to,
            axes: [
                AxisTaps::new(from[0], to[0]),
                AxisTaps::new(from[1], to[1]),
                AxisTaps::new(from[2], to[2]),
            ],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.from == self.to
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.spatial(), self.from, "resize input shape");
        if self.is_identity() {
            return x.clone();
        }
        let mut cur = x.clone();
        for axis in (0..3).rev() {
            cur = apply_axis(&cur, axis, &self.axes[axis], false);
        }
        cur
    }

    /// Adjoint of [`Resize::forward`].
    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Tensor<T> {
        assert_eq!(dy.spatial(), self.to, "resize gradient shape");
        if self.is_identity() {
            return dy.clone();
        }
        let mut cur = dy.clone();
        for axis in 0..3 {
            cur = apply_axis(&cur, axis, &self.axes[axis], true);
        }
        cur
    }
}

fn apply_axis<T: Real>(x: &Tensor<T>, axis: usize, taps: &AxisTaps, adjoint: bool) -> Tensor<T> {
    let [n, c, ..] = x.shape();
    let dims = x.spatial();
    let (len_in, len_out) = if adjoint {
        (taps.dst(), taps.src)
    } else {
        (taps.src, taps.dst())
    };
    assert_eq!(dims[axis], len_in);
    let mut out_dims = dims;
    out_dims[axis] = len_out;
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut y = Tensor::zeros([n, c, out_dims[0], out_dims[1], out_dims[2]]);
    let w1: Vec<T> = taps.w1.iter().map(|&w| T::from_f64(w)).collect();
    let w0: Vec<T> = taps.w1.iter().map(|&w| T::from_f64(1.0 - w)).collect();
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = y.plane_mut(i, ch);
            for o in 0..outer {
                let sbase = o * len_in * inner;
                let dbase = o * len_out * inner;
                for t in 0..taps.dst() {
                    let (a, b) = (taps.i0[t], taps.i1[t]);
                    if adjoint {
                        let g = &src[sbase + t * inner..sbase + (t + 1) * inner];
                        for (k, &gv) in g.iter().enumerate() {
                            dst[dbase + a * inner + k] += w0[t] * gv;
                            dst[dbase + b * inner + k] += w1[t] * gv;
                        }
                    } else {
                        for k in 0..inner {
                            dst[dbase + t * inner + k] =
                                w0[t] * src[sbase + a * inner + k] + w1[t] * src[sbase + b * inner + k];
                        }
                    }
                }
            }
        }
    }
    y
}
