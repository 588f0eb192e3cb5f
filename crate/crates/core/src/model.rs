//! Pyramid prediction network: a UNet-style encoder/decoder with a softmax
//! prediction head after each of the `S` finest decoder levels.
//!
//! Head `s` reads the decoder feature map at resolution `1/2^s`, applies
//! (training only) channel dropout and multiplicative feature noise, a 1×1×1
//! convolution and a per-voxel softmax. The probabilities are then resampled
//! trilinearly to the input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    max_pool, max_pool_backward, relu, relu_backward, softmax_channels, softmax_channels_backward, Conv3d,
    InstanceNorm, NormCache, Param, Perturbation, PoolCache, Resize, UpConv3d,
};
use crate::tensor::{Dims3, Real, Tensor};

pub const MAX_SCALES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub num_scales: usize,
    pub base_channels: usize,
    /// Number of encoder levels, bottleneck included.
    pub depth: usize,
    pub dropout_rate: f64,
    pub noise_amplitude: f64,
    pub in_channels: usize,
    /// Treat the first spatial axis as a singleton: 3×3 kernels, no pooling along D.
    pub planar: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_scales: 4,
            base_channels: 16,
            depth: 5,
            dropout_rate: 0.3,
            noise_amplitude: 0.3,
            in_channels: 1,
            planar: false,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_scales == 0 || self.num_scales > MAX_SCALES {
            return fail(format!(
                "num_scales must be in [1, {MAX_SCALES}], got {}",
                self.num_scales
            ));
        }
        if self.depth == 0 {
            return fail("depth must be positive".into());
        }
        if self.num_scales > self.depth {
            return fail(format!(
                "num_scales ({}) exceeds depth ({})",
                self.num_scales, self.depth
            ));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return fail(format!("noise_amplitude must be >= 0, got {}", self.noise_amplitude));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn kernel(&self) -> Dims3 {
        if self.planar {
            [1, 3, 3]
        } else {
            [3, 3, 3]
        }
    }

    fn pool_factor(&self) -> Dims3 {
        if self.planar {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }

    /// Spatial extents the network can consume without padding must be
    /// multiples of this.
    pub fn size_multiple(&self) -> Dims3 {
        let m = 1 << (self.depth - 1);
        if self.planar {
            [1, m, m]
        } else {
            [m, m, m]
        }
    }

    /// Spatial shape of the decoder feature map feeding head `scale`.
    pub fn native_shape(&self, padded: Dims3, scale: usize) -> Dims3 {
        let f = self.pool_factor();
        [
            padded[0] / f[0].pow(scale as u32),
            padded[1] / f[1].pow(scale as u32),
            padded[2] / f[2].pow(scale as u32),
        ]
    }
}

/// Per-scale class probabilities, each resampled to the input resolution.
#[derive(Clone, Debug)]
pub struct PyramidPrediction<T> {
    /// `S` tensors of shape `N×C×D×H×W`; index 0 is the finest scale.
    pub probs: Vec<Tensor<T>>,
    /// Spatial shape of each head's output before resampling.
    pub native_shapes: Vec<Dims3>,
}

impl<T: Real> PyramidPrediction<T> {
    pub fn num_scales(&self) -> usize {
        self.probs.len()
    }

    /// Restrict every scale to samples `[start, end)`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        Self {
            probs: self.probs.iter().map(|p| p.slice_batch(start, end)).collect(),
            native_shapes: self.native_shapes.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Block<T> {
    conv1: Conv3d<T>,
    norm1: InstanceNorm<T>,
    conv2: Conv3d<T>,
    norm2: InstanceNorm<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Tensor<T>,
    norm1: NormCache<T>,
    mid: Tensor<T>,
    norm2: NormCache<T>,
    output: Tensor<T>,
}

impl<T: Real> Block<T> {
    fn new(name: &str, cin: usize, cout: usize, kernel: Dims3, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv3d::new(&format!("{name}.conv1"), cin, cout, kernel, false, rng),
            norm1: InstanceNorm::new(&format!("{name}.norm1"), cout),
            conv2: Conv3d::new(&format!("{name}.conv2"), cout, cout, kernel, false, rng),
            norm2: InstanceNorm::new(&format!("{name}.norm2"), cout),
        }
    }

    fn forward(&self, x: Tensor<T>) -> BlockCache<T> {
        let (mut mid, norm1) = self.norm1.forward(&self.conv1.forward(&x));
        relu(&mut mid);
        let (mut output, norm2) = self.norm2.forward(&self.conv2.forward(&mid));
        relu(&mut output);
        BlockCache {
            input: x,
            norm1,
            mid,
            norm2,
            output,
        }
    }

    fn backward(&mut self, cache: &BlockCache<T>, mut dy: Tensor<T>) -> Tensor<T> {
        relu_backward(&cache.output, &mut dy);
        let d = self.norm2.backward(&cache.norm2, &dy);
        let mut d = self.conv2.backward(&cache.mid, &d);
        relu_backward(&cache.mid, &mut d);
        let d = self.norm1.backward(&cache.norm1, &d);
        self.conv1.backward(&cache.input, &d)
    }

    fn params(&self) -> [&Param<T>; 6] {
        [
            &self.conv1.weight,
            &self.norm1.gamma,
            &self.norm1.beta,
            &self.conv2.weight,
            &self.norm2.gamma,
            &self.norm2.beta,
        ]
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 6] {
        [
            &mut self.conv1.weight,
            &mut self.norm1.gamma,
            &mut self.norm1.beta,
            &mut self.conv2.weight,
            &mut self.norm2.gamma,
            &mut self.norm2.beta,
        ]
    }
}

struct HeadCache<T> {
    perturbation: Option<Perturbation<T>>,
    input: Tensor<T>,
    native_probs: Tensor<T>,
    resize: Resize,
}

/// Everything the backward pass needs from one training forward pass.
pub struct Tape<T> {
    input_dims: Dims3,
    pad_before: Dims3,
    padded_dims: Dims3,
    enc: Vec<BlockCache<T>>,
    pools: Vec<PoolCache>,
    dec: Vec<BlockCache<T>>,
    heads: Vec<HeadCache<T>>,
}

/// How stochastic head perturbations are drawn for one forward pass.
#[derive(Clone, Debug)]
pub enum Mode {
    /// Dropout and noise are identity.
    Eval,
    /// One seed per batch sample; a sample's perturbations depend only on its seed.
    Train(Vec<u64>),
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    cfg: NetworkConfig,
    enc: Vec<Block<T>>,
    ups: Vec<UpConv3d<T>>,
    dec: Vec<Block<T>>,
    heads: Vec<Conv3d<T>>,
}

/// Mix two 64-bit values into one seed (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> Network<T> {
    /// Builds the network with deterministic initialization from `cfg.seed`.
    ///
    /// Parameters are drawn backbone first, then heads in scale order, so two
    /// configurations differing only in `num_scales` share all common weights.
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let kernel = cfg.kernel();
        let enc = (0..cfg.depth)
            .map(|l| {
                let cin = if l == 0 {
                    cfg.in_channels
                } else {
                    cfg.channels_at(l - 1)
                };
                Block::new(&format!("enc{l}"), cin, cfg.channels_at(l), kernel, &mut rng)
            })
            .collect();
        let ups = (0..cfg.depth - 1)
            .map(|l| {
                UpConv3d::new(
                    &format!("up{l}"),
                    cfg.channels_at(l + 1),
                    cfg.channels_at(l),
                    cfg.pool_factor(),
                    &mut rng,
                )
            })
            .collect();
        let dec = (0..cfg.depth - 1)
            .map(|l| {
                Block::new(
                    &format!("dec{l}"),
                    2 * cfg.channels_at(l),
                    cfg.channels_at(l),
                    kernel,
                    &mut rng,
                )
            })
            .collect();
        let heads = (0..cfg.num_scales)
            .map(|s| {
                Conv3d::new(
                    &format!("head{s}"),
                    cfg.channels_at(s),
                    cfg.num_classes,
                    [1, 1, 1],
                    true,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            cfg,
            enc,
            ups,
            dec,
            heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn num_scales(&self) -> usize {
        self.heads.len()
    }

    /// All trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = Vec::new();
        for b in &self.enc {
            out.extend(b.params());
        }
        for u in &self.ups {
            out.push(&u.weight);
            out.push(&u.bias);
        }
        for b in &self.dec {
            out.extend(b.params());
        }
        for h in &self.heads {
            out.push(&h.weight);
            out.extend(h.bias.as_ref());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        for b in &mut self.enc {
            out.extend(b.params_mut());
        }
        for u in &mut self.ups {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
        }
        for b in &mut self.dec {
            out.extend(b.params_mut());
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.extend(h.bias.as_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: &Mode) -> Result<PyramidPrediction<T>> {
        self.forward_with_tape(x, mode).map(|(p, _)| p)
    }

    /// Forward pass that also records the activations needed by [`Network::backward`].
    pub fn forward_with_tape(&self, x: &Tensor<T>, mode: &Mode) -> Result<(PyramidPrediction<T>, Tape<T>)> {
        let cfg = &self.cfg;
        if x.channels() != cfg.in_channels {
            return Err(Error::shape(format!("{} input channels", cfg.in_channels), x.shape()));
        }
        if x.batch() == 0 || x.voxels() == 0 {
            return Err(Error::Input("empty input".into()));
        }
        if !x.is_finite() {
            return Err(Error::Input("input contains non-finite values".into()));
        }
        if cfg.planar && x.spatial()[0] != 1 {
            return Err(Error::Input(format!(
                "planar network expects D = 1, got {:?}",
                x.spatial()
            )));
        }
        if let Mode::Train(seeds) = mode {
            if seeds.len() != x.batch() {
                return Err(Error::Input(format!(
                    "{} perturbation seeds for batch of {}",
                    seeds.len(),
                    x.batch()
                )));
            }
        }

        let input_dims = x.spatial();
        let mult = cfg.size_multiple();
        let mut pad_before = [0; 3];
        let mut pad_after = [0; 3];
        let mut padded_dims = [0; 3];
        for a in 0..3 {
            let total = input_dims[a].div_ceil(mult[a]) * mult[a] - input_dims[a];
            pad_before[a] = total / 2;
            pad_after[a] = total - total / 2;
            padded_dims[a] = input_dims[a] + total;
        }
        let xp = if padded_dims == input_dims {
            x.clone()
        } else {
            x.pad(pad_before, pad_after)
        };

        let depth = cfg.depth;
        let mut enc: Vec<BlockCache<T>> = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth.saturating_sub(1));
        enc.push(self.enc[0].forward(xp));
        for l in 1..depth {
            let (pooled, pc) = max_pool(&enc[l - 1].output, cfg.pool_factor());
            pools.push(pc);
            enc.push(self.enc[l].forward(pooled));
        }

        // dec[l] holds the decoder block at level l; built coarse to fine.
        let mut dec_rev: Vec<BlockCache<T>> = Vec::with_capacity(depth.saturating_sub(1));
        for l in (0..depth - 1).rev() {
            let below = if l + 1 == depth - 1 {
                &enc[depth - 1].output
            } else {
                &dec_rev.last().expect("coarser level decoded").output
            };
            let up = self.ups[l].forward(below);
            let cat = Tensor::cat_channels(&enc[l].output, &up)?;
            dec_rev.push(self.dec[l].forward(cat));
        }
        dec_rev.reverse();
        let dec = dec_rev;

        let mut probs = Vec::with_capacity(self.heads.len());
        let mut native_shapes = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for (s, head) in self.heads.iter().enumerate() {
            let feat = if s == depth - 1 { &enc[s].output } else { &dec[s].output };
            let perturbation = match mode {
                Mode::Eval => None,
                Mode::Train(seeds) => Some(self.draw_perturbation(feat.shape(), seeds, s)),
            };
            let input = match &perturbation {
                Some(p) => p.apply(feat),
                None => feat.clone(),
            };
            let native_probs = softmax_channels(&head.forward(&input));
            let native = native_probs.spatial();
            debug_assert_eq!(native, cfg.native_shape(padded_dims, s));
            let resize = Resize::new(native, padded_dims);
            let full = resize.forward(&native_probs);
            let full = if padded_dims == input_dims {
                full
            } else {
                full.crop(pad_before, input_dims)
            };
            probs.push(full);
            native_shapes.push(native);
            heads.push(HeadCache {
                perturbation,
                input,
                native_probs,
                resize,
            });
        }

        Ok((
            PyramidPrediction { probs, native_shapes },
            Tape {
                input_dims,
                pad_before,
                padded_dims,
                enc,
                pools,
                dec,
                heads,
            },
        ))
    }

    fn draw_perturbation(&self, shape: [usize; 5], seeds: &[u64], scale: usize) -> Perturbation<T> {
        let mut one = shape;
        one[0] = 1;
        let parts: Vec<Perturbation<T>> = seeds
            .iter()
            .map(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, scale as u64));
                Perturbation::draw(one, self.cfg.dropout_rate, self.cfg.noise_amplitude, &mut rng)
            })
            .collect();
        Perturbation::stack(&parts)
    }

    /// Accumulates parameter gradients given `dL/dp_s` for every scale
    /// (input resolution). Gradients are added to existing ones; call
    /// [`Network::zero_grad`] between steps.
    pub fn backward(&mut self, tape: &Tape<T>, grad_probs: &[Tensor<T>]) -> Result<()> {
        let depth = self.cfg.depth;
        if grad_probs.len() != self.heads.len() {
            return Err(Error::shape(self.heads.len(), grad_probs.len()));
        }
        let padded = tape.padded_dims;
        let after = [
            padded[0] - tape.input_dims[0] - tape.pad_before[0],
            padded[1] - tape.input_dims[1] - tape.pad_before[1],
            padded[2] - tape.input_dims[2] - tape.pad_before[2],
        ];

        // Gradient flowing into each level's decoder output (enc output at the bottleneck).
        let mut dfeat: Vec<Option<Tensor<T>>> = vec![None; depth];
        for (s, (head, cache)) in self.heads.iter_mut().zip(&tape.heads).enumerate() {
            let g = &grad_probs[s];
            if g.spatial() != tape.input_dims {
                return Err(Error::shape(tape.input_dims, g.spatial()));
            }
            let g = if padded == tape.input_dims {
                g.clone()
            } else {
                g.pad(tape.pad_before, after)
            };
            let dnative = cache.resize.backward(&g);
            let dlogits = softmax_channels_backward(&cache.native_probs, &dnative);
            let mut dh = head.backward(&cache.input, &dlogits);
            if let Some(p) = &cache.perturbation {
                dh = p.backward(&dh);
            }
            accumulate(&mut dfeat[s], dh);
        }

        let mut denc: Vec<Option<Tensor<T>>> = vec![None; depth];
        for l in 0..depth - 1 {
            let Some(d) = dfeat[l].take() else { continue };
            let dcat = self.dec[l].backward(&tape.dec[l], d);
            let (dskip, dup) = dcat.split_channels(self.cfg.channels_at(l));
            accumulate(&mut denc[l], dskip);
            let below = if l + 1 == depth - 1 {
                &tape.enc[depth - 1].output
            } else {
                &tape.dec[l + 1].output
            };
            let dbelow = self.ups[l].backward(below, &dup);
            accumulate(&mut dfeat[l + 1], dbelow);
        }
        if let Some(d) = dfeat[depth - 1].take() {
            accumulate(&mut denc[depth - 1], d);
        }
        for l in (0..depth).rev() {
            let Some(d) = denc[l].take() else { continue };
            let dx = self.enc[l].backward(&tape.enc[l], d);
            if l > 0 {
                accumulate(&mut denc[l - 1], max_pool_backward(&tape.pools[l - 1], &dx));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
