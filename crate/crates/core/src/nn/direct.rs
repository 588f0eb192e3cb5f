//! Register-blocked direct convolution kernels.
//!
//! The input is copied once into a zero-padded grid. Every (channel, tap)
//! pair then becomes a fixed offset into that grid, so an output row chunk is
//! a sum of shifted contiguous loads times scalar weights.

use crate::tensor::{Dims3, Real};

const LANES: usize = 16;
/// Narrower rows waste most of every lane chunk.
pub(crate) const DIRECT_MIN_WIDTH: usize = 16;
/// Output channels computed together in the forward kernel.
const OB: usize = 8;
/// Weight-gradient tile: output channels x (channel, tap) pairs.
const TO: usize = 4;
const TK: usize = 4;

/// Per-lane statements written out so that the accumulators can live in registers.
macro_rules! lanes {
    ($l:ident => $body:expr) => {
        lanes!(@ $l $body; 0 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15)
    };
    (@ $l:ident $body:expr; $($i:literal)*) => {
        $({
            let $l = $i;
            $body;
        })*
    };
}

#[inline(always)]
fn axpy<T: Real>(acc: &mut [T; LANES], w: T, s: &[T; LANES]) {
    lanes!(l => acc[l] = w.mul_add(s[l], acc[l]));
}

#[inline(always)]
fn fma<T: Real>(acc: &mut [T; LANES], a: &[T; LANES], b: &[T; LANES]) {
    lanes!(l => acc[l] = a[l].mul_add(b[l], acc[l]));
}

pub(crate) struct Padded<T> {
    data: Vec<T>,
    hp: usize,
    wp: usize,
    stride: usize,
}

impl<T: Real> Padded<T> {
    pub(crate) fn new(x: &[T], channels: usize, dims: Dims3, pad: Dims3) -> Self {
        let [d, h, w] = dims;
        let (dp, hp, wp) = (d + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]);
        let stride = dp * hp * wp;
        // chunks of the last row may read up to LANES past the grid
        let mut data = vec![T::zero(); channels * stride + 2 * LANES];
        let v = d * h * w;
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let src = &x[c * v + (z * h + y) * w..][..w];
                    let at = c * stride + ((z + pad[0]) * hp + y + pad[1]) * wp + pad[2];
                    data[at..at + w].copy_from_slice(src);
                }
            }
        }
        Self { data, hp, wp, stride }
    }

    /// Grid offset of every (channel, tap) pair, in weight order.
    pub(crate) fn offsets(&self, channels: usize, kernel: Dims3) -> Vec<usize> {
        let mut out = Vec::with_capacity(channels * kernel.iter().product::<usize>());
        for c in 0..channels {
            for a in 0..kernel[0] {
                for b in 0..kernel[1] {
                    for e in 0..kernel[2] {
                        out.push(c * self.stride + (a * self.hp + b) * self.wp + e);
                    }
                }
            }
        }
        out
    }

    fn row(&self, z: usize, y: usize) -> usize {
        (z * self.hp + y) * self.wp
    }
}

/// Repack `[out, k]` weights as `[out / OB][k][OB]`, zero-filling the last block.
pub(crate) fn pack_weights<T: Real>(w: &[T], out_ch: usize, k: usize) -> Vec<T> {
    let groups = out_ch.div_ceil(OB);
    let mut packed = vec![T::zero(); groups * k * OB];
    for o in 0..out_ch {
        let (g, j) = (o / OB, o % OB);
        for (t, &val) in w[o * k..(o + 1) * k].iter().enumerate() {
            packed[(g * k + t) * OB + j] = val;
        }
    }
    packed
}

/// `out[o, z, y, x] = sum_k packed[o, k] * grid[row(z, y) + x + offs[k]]`.
pub(crate) fn conv_forward<T: Real>(
    grid: &Padded<T>,
    offs: &[usize],
    packed: &[T],
    out_ch: usize,
    dims: Dims3,
    out: &mut [T],
) {
    let [d, h, w] = dims;
    let v = d * h * w;
    let k = offs.len();
    for g in 0..out_ch.div_ceil(OB) {
        let wg = &packed[g * k * OB..(g + 1) * k * OB];
        let live = (out_ch - g * OB).min(OB);
        for z in 0..d {
            for y in 0..h {
                let base = grid.row(z, y);
                for x0 in (0..w.div_ceil(LANES)).map(|c| c * LANES) {
                    let mut acc = [[T::zero(); LANES]; OB];
                    for (t, &off) in offs.iter().enumerate() {
                        let s: &[T; LANES] = grid.data[base + x0 + off..][..LANES].try_into().unwrap();
                        let wk: &[T; OB] = wg[t * OB..][..OB].try_into().unwrap();
                        // unrolled by hand so the vectorizer works along the lanes
                        axpy(&mut acc[0], wk[0], s);
                        axpy(&mut acc[1], wk[1], s);
                        axpy(&mut acc[2], wk[2], s);
                        axpy(&mut acc[3], wk[3], s);
                        axpy(&mut acc[4], wk[4], s);
                        axpy(&mut acc[5], wk[5], s);
                        axpy(&mut acc[6], wk[6], s);
                        axpy(&mut acc[7], wk[7], s);
                    }
                    let n = (w - x0).min(LANES);
                    for (o, a) in acc.iter().enumerate().take(live) {
                        let at = (g * OB + o) * v + (z * h + y) * w + x0;
                        out[at..at + n].copy_from_slice(&a[..n]);
                    }
                }
            }
        }
    }
}

/// Weights of the adjoint convolution: `[in, out, flipped taps]`.
pub(crate) fn flip_weights<T: Real>(w: &[T], out_ch: usize, in_ch: usize, taps: usize) -> Vec<T> {
    let mut f = vec![T::zero(); w.len()];
    for o in 0..out_ch {
        for c in 0..in_ch {
            for t in 0..taps {
                f[(c * out_ch + o) * taps + taps - 1 - t] = w[(o * in_ch + c) * taps + t];
            }
        }
    }
    f
}

/// `grad[o, k] += sum_{z,y,x} dy[o, z, y, x] * grid[row(z, y) + x + offs[k]]`.
pub(crate) fn conv_weight_grad<T: Real>(
    grid: &Padded<T>,
    offs: &[usize],
    dy: &[T],
    out_ch: usize,
    dims: Dims3,
    grad: &mut [T],
) {
    let [d, h, w] = dims;
    let v = d * h * w;
    let k = offs.len();
    // dy laid out on the padded grid (zero outside the volume), channels
    // rounded up to whole tiles
    let gstride = d * grid.hp * grid.wp + 2 * LANES;
    let oc = out_ch.div_ceil(TO) * TO;
    let mut g = vec![T::zero(); oc * gstride];
    for o in 0..out_ch {
        for z in 0..d {
            for y in 0..h {
                let at = o * gstride + grid.row(z, y);
                g[at..at + w].copy_from_slice(&dy[o * v + (z * h + y) * w..][..w]);
            }
        }
    }
    let mut offs_t = offs.to_vec();
    offs_t.resize(k.div_ceil(TK) * TK, 0);
    let span = (h * grid.wp).div_ceil(LANES) * LANES;
    for z in 0..d {
        let start = grid.row(z, 0);
        for ot in 0..oc / TO {
            let a: [&[T]; TO] = std::array::from_fn(|o| &g[(ot * TO + o) * gstride + start..][..span]);
            for kt in 0..offs_t.len() / TK {
                let b: [&[T]; TK] = std::array::from_fn(|j| &grid.data[start + offs_t[kt * TK + j]..][..span]);
                let acc = tile_dot(&a, &b);
                for (o, row) in acc.iter().enumerate() {
                    let oo = ot * TO + o;
                    if oo >= out_ch {
                        break;
                    }
                    for (j, cell) in row.iter().enumerate() {
                        let kk = kt * TK + j;
                        if kk < k {
                            grad[oo * k + kk] += cell.iter().fold(T::zero(), |s, &e| s + e);
                        }
                    }
                }
            }
        }
    }
}

/// Lane-wise partial dot products of every `a` row with every `b` row.
#[inline(never)]
fn tile_dot<T: Real>(a: &[&[T]; TO], b: &[&[T]; TK]) -> [[[T; LANES]; TK]; TO] {
    let mut acc = [[[T::zero(); LANES]; TK]; TO];
    let n = a[0].len() / LANES;
    for i in 0..n {
        let at = i * LANES;
        let a0: &[T; LANES] = a[0][at..at + LANES].try_into().unwrap();
        let a1: &[T; LANES] = a[1][at..at + LANES].try_into().unwrap();
        let a2: &[T; LANES] = a[2][at..at + LANES].try_into().unwrap();
        let a3: &[T; LANES] = a[3][at..at + LANES].try_into().unwrap();
        let b0: &[T; LANES] = b[0][at..at + LANES].try_into().unwrap();
        let b1: &[T; LANES] = b[1][at..at + LANES].try_into().unwrap();
        let b2: &[T; LANES] = b[2][at..at + LANES].try_into().unwrap();
        let b3: &[T; LANES] = b[3][at..at + LANES].try_into().unwrap();
        // unrolled by hand, see conv_forward
        fma(&mut acc[0][0], a0, b0);
        fma(&mut acc[0][1], a0, b1);
        fma(&mut acc[0][2], a0, b2);
        fma(&mut acc[0][3], a0, b3);
        fma(&mut acc[1][0], a1, b0);
        fma(&mut acc[1][1], a1, b1);
        fma(&mut acc[1][2], a1, b2);
        fma(&mut acc[1][3], a1, b3);
        fma(&mut acc[2][0], a2, b0);
        fma(&mut acc[2][1], a2, b1);
        fma(&mut acc[2][2], a2, b2);
        fma(&mut acc[2][3], a2, b3);
        fma(&mut acc[3][0], a3, b0);
        fma(&mut acc[3][1], a3, b1);
        fma(&mut acc[3][2], a3, b2);
        fma(&mut acc[3][3], a3, b3);
    }
    acc
}
