//! Small learnable building blocks: linear layers, 2-D/3-D convolutions,
//! layer-norm parameters, feed-forward blocks, and projected attention.
//!
//! There is no autograd here and none is needed: only the loss layer has a
//! backward pass (hand-written in `losses`), everything else is forward-only.
//! All parameters are initialized uniformly in `[-1/sqrt(fan_in),
//! +1/sqrt(fan_in)]` from a caller-supplied seeded generator, and biases
//! start at zero, so a given seed always produces the same network.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{attention, layer_norm, Tensor};

/// The one random-number generator type used across the crate. Seeding it
/// identically reproduces every weight, jitter, and mask draw bit for bit.
pub type SeedRng = ChaCha8Rng;

/// Creates the crate-wide RNG from a seed.
pub fn seeded_rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn init_values(rng: &mut SeedRng, fan_in: usize, len: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..len).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * bound).collect()
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    /// `[out_features, in_features]`
    pub weight: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.rank(), 2, "linear weight must be [out, in]");
        assert_eq!(bias.shape(), &[weight.shape()[0]], "bias must be [out]");
        Self { weight, bias }
    }

    pub fn init(rng: &mut SeedRng, in_features: usize, out_features: usize) -> Self {
        let weight = Tensor::new(
            &[out_features, in_features],
            init_values(rng, in_features, out_features * in_features),
        );
        Self { weight, bias: Tensor::zeros(&[out_features]) }
    }

    /// Identity map; requires square dimensions. Test helper.
    pub fn identity(features: usize) -> Self {
        let weight = Tensor::from_fn(&[features, features], |i| {
            if i / features == i % features { 1.0 } else { 0.0 }
        });
        Self { weight, bias: Tensor::zeros(&[features]) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let (out_f, in_f) = (self.out_features(), self.in_features());
        assert_eq!(x.len(), in_f, "linear input width mismatch");
        let w = self.weight.data();
        let mut out = Vec::with_capacity(out_f);
        for o in 0..out_f {
            let row = &w[o * in_f..(o + 1) * in_f];
            let mut acc = self.bias.data()[o];
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            out.push(acc);
        }
        out
    }

    /// Applies the layer to every row of an `[N, in]` tensor.
    pub fn apply_rows(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rank(), 2, "apply_rows expects [N, in]");
        let rows = x.shape()[0];
        let in_f = self.in_features();
        assert_eq!(x.shape()[1], in_f, "linear input width mismatch");
        let mut out = Tensor::zeros(&[rows, self.out_features()]);
        for r in 0..rows {
            let y = self.apply(&x.data()[r * in_f..(r + 1) * in_f]);
            let width = y.len();
            out.data_mut()[r * width..(r + 1) * width].copy_from_slice(&y);
        }
        out
    }
}

/// 2-D convolution over `[C_in, H, W]` maps with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn init(
        rng: &mut SeedRng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Tensor::new(
            &[out_channels, in_channels, kernel, kernel],
            init_values(rng, fan_in, out_channels * fan_in),
        );
        Self { weight, bias: Tensor::zeros(&[out_channels]), stride, padding }
    }

    /// Center-tap identity kernel (stride 1, same padding). Test helper.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "identity kernel must be odd");
        let mut weight = Tensor::zeros(&[channels, channels, kernel, kernel]);
        for c in 0..channels {
            weight.set4(c, c, kernel / 2, kernel / 2, 1.0);
        }
        Self { weight, bias: Tensor::zeros(&[channels]), stride: 1, padding: kernel / 2 }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rank(), 3, "conv2d expects [C, H, W]");
        let (in_c, height, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(in_c, self.weight.shape()[1], "conv2d channel mismatch");
        let kernel = self.weight.shape()[2];
        let out_h = (height + 2 * self.padding - kernel) / self.stride + 1;
        let out_w = (width + 2 * self.padding - kernel) / self.stride + 1;
        let out_c = self.out_channels();
        let mut out = Tensor::zeros(&[out_c, out_h, out_w]);
        for o in 0..out_c {
            for i in 0..out_h {
                for j in 0..out_w {
                    let mut acc = self.bias.data()[o];
                    for c in 0..in_c {
                        for ki in 0..kernel {
                            let src_i = (i * self.stride + ki) as isize - self.padding as isize;
                            if src_i < 0 || src_i >= height as isize {
                                continue;
                            }
                            for kj in 0..kernel {
                                let src_j =
                                    (j * self.stride + kj) as isize - self.padding as isize;
                                if src_j < 0 || src_j >= width as isize {
                                    continue;
                                }
                                acc += self.weight.at4(o, c, ki, kj)
                                    * x.at3(c, src_i as usize, src_j as usize);
                            }
                        }
                    }
                    out.set3(o, i, j, acc);
                }
            }
        }
        out
    }
}

/// 3-D convolution over `[C_in, X, Y, Z]` volumes with zero padding,
/// stride 1.
#[derive(Debug, Clone)]
pub struct Conv3d {
    /// `[out_channels, in_channels, k, k, k]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub padding: usize,
}

impl Conv3d {
    pub fn init(
        rng: &mut SeedRng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel * kernel;
        let weight = Tensor::new(
            &[out_channels, in_channels, kernel, kernel, kernel],
            init_values(rng, fan_in, out_channels * fan_in),
        );
        Self { weight, bias: Tensor::zeros(&[out_channels]), padding }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rank(), 4, "conv3d expects [C, X, Y, Z]");
        let (in_c, sx, sy, sz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(in_c, self.weight.shape()[1], "conv3d channel mismatch");
        let kernel = self.weight.shape()[2];
        let pad = self.padding as isize;
        let out_x = sx + 2 * self.padding - kernel + 1;
        let out_y = sy + 2 * self.padding - kernel + 1;
        let out_z = sz + 2 * self.padding - kernel + 1;
        let out_c = self.out_channels();
        let mut out = Tensor::zeros(&[out_c, out_x, out_y, out_z]);
        let w = self.weight.data();
        let xd = x.data();
        for o in 0..out_c {
            for i in 0..out_x {
                for j in 0..out_y {
                    for k in 0..out_z {
                        let mut acc = self.bias.data()[o];
                        for c in 0..in_c {
                            for ki in 0..kernel {
                                let src_i = i as isize + ki as isize - pad;
                                if src_i < 0 || src_i >= sx as isize {
                                    continue;
                                }
                                for kj in 0..kernel {
                                    let src_j = j as isize + kj as isize - pad;
                                    if src_j < 0 || src_j >= sy as isize {
                                        continue;
                                    }
                                    for kk in 0..kernel {
                                        let src_k = k as isize + kk as isize - pad;
                                        if src_k < 0 || src_k >= sz as isize {
                                            continue;
                                        }
                                        let wi = (((o * in_c + c) * kernel + ki) * kernel + kj)
                                            * kernel
                                            + kk;
                                        let xi = ((c * sx + src_i as usize) * sy
                                            + src_j as usize)
                                            * sz
                                            + src_k as usize;
                                        acc += w[wi] * xd[xi];
                                    }
                                }
                            }
                        }
                        out.set4(o, i, j, k, acc);
                    }
                }
            }
        }
        out
    }
}

/// Learnable gain/shift pair for layer normalization, initialized to the
/// identity transform.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Vec<f32>,
    pub shift: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(channels: usize) -> Self {
        Self { gain: vec![1.0; channels], shift: vec![0.0; channels] }
    }

    pub fn apply_rows(&self, x: &Tensor) -> Tensor {
        layer_norm(x, &self.gain, &self.shift)
    }

    pub fn apply_row(&self, x: &[f32]) -> Vec<f32> {
        let t = Tensor::new(&[1, x.len()], x.to_vec());
        layer_norm(&t, &self.gain, &self.shift).into_data()
    }
}

/// Transformer-style feed-forward block with one hidden layer (expansion
/// ratio 2), a residual connection, and layer normalization.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
    pub norm: LayerNormParams,
}

impl FeedForward {
    pub fn init(rng: &mut SeedRng, channels: usize) -> Self {
        Self {
            hidden: LinearLayer::init(rng, channels, channels * 2),
            output: LinearLayer::init(rng, channels * 2, channels),
            norm: LayerNormParams::identity(channels),
        }
    }

    pub fn apply_rows(&self, x: &Tensor) -> Tensor {
        let rows = x.shape()[0];
        let channels = x.shape()[1];
        let mut mixed = Tensor::zeros(&[rows, channels]);
        for r in 0..rows {
            let row = &x.data()[r * channels..(r + 1) * channels];
            let mut h = self.hidden.apply(row);
            for v in &mut h {
                *v = v.max(0.0);
            }
            let y = self.output.apply(&h);
            for c in 0..channels {
                mixed.set2(r, c, row[c] + y[c]);
            }
        }
        self.norm.apply_rows(&mixed)
    }
}

/// Single-head attention with learned query/key/value projections, a
/// residual connection from the raw query features, and layer norm.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query_proj: LinearLayer,
    pub key_proj: LinearLayer,
    pub value_proj: LinearLayer,
    pub norm: LayerNormParams,
}

impl AttentionBlock {
    pub fn init(rng: &mut SeedRng, channels: usize) -> Self {
        Self {
            query_proj: LinearLayer::init(rng, channels, channels),
            key_proj: LinearLayer::init(rng, channels, channels),
            value_proj: LinearLayer::init(rng, channels, channels),
            norm: LayerNormParams::identity(channels),
        }
    }

    /// Full self-attention among the rows of `features`.
    pub fn self_attend(&self, features: &Tensor) -> Tensor {
        self.cross_attend(features, features, None)
            .expect("self-attention never masks keys")
    }

    /// Rows of `features` attend over rows of `keys_src`; `mask[i] == true`
    /// drops key `i` before normalization.
    pub fn cross_attend(
        &self,
        features: &Tensor,
        keys_src: &Tensor,
        mask: Option<&[bool]>,
    ) -> crate::error::Result<Tensor> {
        let q = self.query_proj.apply_rows(features);
        let k = self.key_proj.apply_rows(keys_src);
        let v = self.value_proj.apply_rows(keys_src);
        let attended = attention(&q, &k, &v, mask)?;
        let residual = features.add(&attended)?;
        Ok(self.norm.apply_rows(&residual))
    }
}
