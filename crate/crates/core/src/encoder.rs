//! Convolutional backbone producing the feature pyramid.
//!
//! Block `j` (counting from the image) is `conv3x3 → ReLU → conv3x3/2 → ReLU`
//! with `base_channels · growth^j` channels, so every block halves the spatial
//! resolution exactly once. Pyramid index `i` refers to block `n_b − 1 − i`:
//! `f_0` is the deepest, smallest map and `f_{n_b−1}` sits at stride 2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSet};
use crate::tensor::{Element, Tensor};
use crate::types::ImageSample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_blocks: 5,
            base_channels: 8,
            channel_growth: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.base_channels == 0 || self.channel_growth == 0 {
            return Err(Error::Config(
                "encoder needs at least one block, one channel and growth >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channels produced by block `j`, counting from the image.
    pub fn block_channels(&self, j: usize) -> usize {
        self.base_channels * self.channel_growth.pow(j as u32)
    }

    /// Channels of pyramid level `f_i`.
    pub fn pyramid_channels(&self, i: usize) -> usize {
        self.block_channels(self.num_blocks - 1 - i)
    }

    /// Total downsampling factor `2^{n_b}`.
    pub fn stride(&self) -> usize {
        1 << self.num_blocks
    }

    /// Spatial size of `f_i` for an `h × w` input.
    pub fn pyramid_size(&self, i: usize, height: usize, width: usize) -> (usize, usize) {
        let s = 1 << (self.num_blocks - i);
        (height / s, width / s)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let s = self.stride();
        if height == 0 || width == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::Shape(format!(
                "image {height}x{width} is not divisible by 2^{} = {s}",
                self.num_blocks
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvIds {
    pub weight: usize,
    pub bias: usize,
}

impl ConvIds {
    pub fn register<F: Element>(
        params: &mut ParamSet<F>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add_init(format!("{name}.weight"), &[c_out, c_in, k, k], init, rng);
        let bias = params.add_init(format!("{name}.bias"), &[c_out], Init::Zeros, rng);
        ConvIds { weight, bias }
    }

    pub fn apply<F: Element>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet<F>,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = g.param(self.weight, params.get(self.weight));
        let b = g.param(self.bias, params.get(self.bias));
        g.conv2d(x, w, b, stride, pad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    blocks: Vec<(ConvIds, ConvIds)>,
}

impl EncoderParams {
    pub fn register<F: Element>(
        cfg: &EncoderConfig,
        params: &mut ParamSet<F>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c_in = 3;
        let blocks = (0..cfg.num_blocks)
            .map(|j| {
                let c = cfg.block_channels(j);
                let a = ConvIds::register(
                    params,
                    &format!("encoder.block{j}.conv_a"),
                    c,
                    c_in,
                    3,
                    Init::He { fan_in: c_in * 9 },
                    rng,
                );
                let b = ConvIds::register(
                    params,
                    &format!("encoder.block{j}.conv_b"),
                    c,
                    c,
                    3,
                    Init::He { fan_in: c * 9 },
                    rng,
                );
                c_in = c;
                (a, b)
            })
            .collect();
        EncoderParams { blocks }
    }
}

/// Per-level encoder activations, `features[0]` being the deepest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<F> {
    pub features: Vec<Tensor<F>>,
}

/// Records the encoder on `g` and returns `[f_0, …, f_{n_b−1}]`.
pub fn encode_graph<F: Element>(
    g: &mut Graph<F>,
    cfg: &EncoderConfig,
    ids: &EncoderParams,
    params: &ParamSet<F>,
    image: Var,
) -> Result<Vec<Var>> {
    let (_, h, w) = g.value(image).chw();
    cfg.check_input(h, w)?;
    let mut x = image;
    let mut outputs = Vec::with_capacity(cfg.num_blocks);
    for (a, b) in &ids.blocks {
        let y = a.apply(g, params, x, 1, 1)?;
        let y = g.relu(y);
        let y = b.apply(g, params, y, 2, 1)?;
        x = g.relu(y);
        outputs.push(x);
    }
    outputs.reverse();
    Ok(outputs)
}

/// 1×1 projection of a pyramid level to the channel count a decoder layer expects.
pub fn project<F: Element>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    projection: &ConvIds,
    feature: Var,
) -> Result<Var> {
    projection.apply(g, params, feature, 1, 0)
}

pub fn image_tensor<F: Element>(image: &ImageSample) -> Tensor<F> {
    let data = image.to_planar().into_iter().map(|v| F::of(v as f64)).collect();
    Tensor::from_vec(&[3, image.height, image.width], data).expect("image shape")
}

/// Forward-only encoder pass.
pub fn encode<F: Element>(
    image: &ImageSample,
    cfg: &EncoderConfig,
    ids: &EncoderParams,
    params: &ParamSet<F>,
) -> Result<FeaturePyramid<F>> {
    cfg.check_input(image.height, image.width)?;
    let mut g = Graph::new();
    let x = g.input(image_tensor(image));
    let vars = encode_graph(&mut g, cfg, ids, params, x)?;
    Ok(FeaturePyramid {
        features: vars.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &EncoderConfig) -> (EncoderParams, ParamSet<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let ids = EncoderParams::register(cfg, &mut params, &mut rng);
        (ids, params)
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn stride_ladder_64() {
        let cfg = EncoderConfig::default();
        let (ids, params) = setup(&cfg);
        let pyr = encode(&noise_image(64, 64, 1), &cfg, &ids, &params).unwrap();
        assert_eq!(pyr.features.len(), 5);
        assert_eq!(pyr.features[0].chw(), (cfg.pyramid_channels(0), 2, 2));
        assert_eq!(pyr.features[4].chw(), (cfg.pyramid_channels(4), 32, 32));
        for i in 0..4 {
            let (_, h0, w0) = pyr.features[i].chw();
            let (_, h1, w1) = pyr.features[i + 1].chw();
            assert_eq!((h1, w1), (2 * h0, 2 * w0));
        }
    }

    #[test]
    fn stride_ladder_256() {
        let cfg = EncoderConfig {
            base_channels: 2,
            ..EncoderConfig::default()
        };
        let (ids, params) = setup(&cfg);
        let pyr = encode(&noise_image(256, 256, 2), &cfg, &ids, &params).unwrap();
        assert_eq!(pyr.features[0].chw().1, 8);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = EncoderConfig::default();
        let (ids, params) = setup(&cfg);
        let err = encode(&noise_image(32, 48, 3), &cfg, &ids, &params).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig {
            num_blocks: 3,
            ..EncoderConfig::default()
        };
        let (ids, params) = setup(&cfg);
        let img = noise_image(16, 16, 4);
        assert_eq!(
            encode(&img, &cfg, &ids, &params).unwrap(),
            encode(&img, &cfg, &ids, &params).unwrap()
        );
    }

    #[test]
    fn projection_shapes_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::<f64>::new();
        let p32 = ConvIds::register(&mut params, "p32", 32, 256, 1, Init::Xavier { fan_in: 256, fan_out: 32 }, &mut rng);
        let p16 = ConvIds::register(&mut params, "p16", 16, 64, 1, Init::Xavier { fan_in: 64, fan_out: 16 }, &mut rng);
        let eye = ConvIds::register(&mut params, "eye", 4, 4, 1, Init::Zeros, &mut rng);
        for c in 0..4 {
            params.get_mut(eye.weight).data_mut()[c * 4 + c] = 1.0;
        }
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[256, 2, 2]));
        let b = g.input(Tensor::zeros(&[64, 8, 8]));
        let x = Tensor::from_vec(&[4, 3, 3], (0..36).map(|v| v as f64 * 0.1).collect()).unwrap();
        let c = g.input(x.clone());
        let sa = project(&mut g, &params, &p32, a).unwrap();
        let sb = project(&mut g, &params, &p16, b).unwrap();
        let sc = project(&mut g, &params, &eye, c).unwrap();
        assert_eq!(g.value(sa).chw(), (32, 2, 2));
        assert_eq!(g.value(sb).chw(), (16, 8, 8));
        assert_eq!(g.value(sc), &x);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            num_blocks: 2,
            base_channels: 2,
            channel_growth: 2,
        };
        let (ids, mut params) = setup(&cfg);
        let img = noise_image(16, 16, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // zero biases put dead-ReLU outputs exactly on the kink; move off it
        for id in 0..params.len() {
            for v in params.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        // scalar objective: weighted sum over both pyramid levels
        let probes: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                let (h, w) = cfg.pyramid_size(i, 16, 16);
                (0..cfg.pyramid_channels(i) * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()
            })
            .collect();
        let objective = |params: &ParamSet<f64>| -> f64 {
            let pyr = encode(&img, &cfg, &ids, params).unwrap();
            pyr.features
                .iter()
                .zip(&probes)
                .map(|(f, p)| f.data().iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let mut g = Graph::new();
        let x = g.input(image_tensor(&img));
        let vars = encode_graph(&mut g, &cfg, &ids, &params, x).unwrap();
        let seeds: Vec<_> = vars
            .iter()
            .zip(&probes)
            .map(|(&v, p)| (v, Tensor::from_vec(g.value(v).shape(), p.clone()).unwrap()))
            .collect();
        let grads = g.backward(&seeds);
        let analytic = g.param_grads(&grads, &params.shapes());
        let h = 1e-6;
        for id in 0..params.len() {
            for j in 0..params.get(id).len() {
                let mut plus = params.clone();
                plus.get_mut(id).data_mut()[j] += h;
                let mut minus = params.clone();
                minus.get_mut(id).data_mut()[j] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic[id].data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "{}[{j}]: {a} vs {numeric}", params.name(id));
            }
        }
    }
}
