//! Encoder + decoder bundle with its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{decode_step, project_pyramid, DecoderConfig, DecoderParams, DecoderState, StepOutput};
use crate::encoder::{encode_graph, image_tensor, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Element;
use crate::types::{BBox, Grid, ImageSample, InstancePrediction, PredictionSequence};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    encoder_ids: EncoderParams,
    decoder_ids: DecoderParams,
}

/// Recorded forward pass: the encoder ran once, decoder steps follow.
pub struct Unrolling {
    pub pyramid: Vec<Var>,
    pub skips: Vec<Option<Var>>,
    pub state: DecoderState,
    pub steps: Vec<StepOutput>,
    height: usize,
    width: usize,
}

impl<F: Element> Model<F> {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder_ids = EncoderParams::register(&config.encoder, &mut params, &mut rng);
        let decoder_ids =
            DecoderParams::register(&config.decoder, &config.encoder, &mut params, &mut rng);
        Ok(Model {
            config,
            params,
            encoder_ids,
            decoder_ids,
        })
    }

    /// Rebinds existing parameters; names and shapes must match what
    /// `config` would create.
    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        let template = Model::<F>::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((name, t), (got_name, got)) in template.params.iter().zip(params.iter()) {
            if name != got_name || t.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match stored {got_name} {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        Ok(Model { params, ..template })
    }

    pub fn cast<G: Element>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder_ids: self.encoder_ids.clone(),
            decoder_ids: self.decoder_ids.clone(),
        }
    }

    pub fn encoder_ids(&self) -> &EncoderParams {
        &self.encoder_ids
    }

    pub fn decoder_ids(&self) -> &DecoderParams {
        &self.decoder_ids
    }

    /// Encodes `image` and prepares a zero decoder state.
    pub fn begin(&self, g: &mut Graph<F>, image: &ImageSample) -> Result<Unrolling> {
        self.config.encoder.check_input(image.height, image.width)?;
        let x = g.input(image_tensor(image));
        let pyramid = encode_graph(g, &self.config.encoder, &self.encoder_ids, &self.params, x)?;
        let skips = project_pyramid(g, &self.decoder_ids, &self.params, &pyramid)?;
        let state = DecoderState::zeros(
            g,
            &self.config.decoder,
            &self.config.encoder,
            image.height,
            image.width,
        );
        Ok(Unrolling {
            pyramid,
            skips,
            state,
            steps: Vec::new(),
            height: image.height,
            width: image.width,
        })
    }

    /// Appends one decoder step to `run`.
    pub fn step(&self, g: &mut Graph<F>, run: &mut Unrolling) -> Result<StepOutput> {
        let (out, state) = decode_step(
            g,
            &self.config.decoder,
            &self.decoder_ids,
            &self.params,
            &run.skips,
            &run.state,
            run.height,
            run.width,
        )?;
        run.state = state;
        run.steps.push(out);
        Ok(out)
    }

    /// Records an encoder pass plus `steps` decoder steps.
    pub fn forward(&self, g: &mut Graph<F>, image: &ImageSample, steps: usize) -> Result<Unrolling> {
        let mut run = self.begin(g, image)?;
        for _ in 0..steps {
            self.step(g, &mut run)?;
        }
        Ok(run)
    }

    /// Runs exactly `steps` decoder steps.
    pub fn unroll(&self, image: &ImageSample, steps: usize) -> Result<PredictionSequence> {
        if steps == 0 {
            return Err(Error::Config("unroll needs at least one step".into()));
        }
        let mut g = Graph::new();
        let run = self.forward(&mut g, image, steps)?;
        Ok(PredictionSequence {
            steps: run.steps.iter().map(|s| read_prediction(&g, s)).collect(),
        })
    }

    /// Emits predictions until the first stop score below `stop_threshold`
    /// (excluded) or `max_steps` predictions.
    pub fn infer(
        &self,
        image: &ImageSample,
        stop_threshold: f64,
        max_steps: usize,
    ) -> Result<PredictionSequence> {
        let mut g = Graph::new();
        let mut run = self.begin(&mut g, image)?;
        let scores = std::iter::from_fn(|| {
            Some(self.step(&mut g, &mut run).map(|s| g.value(s.stop).data()[0].f64()))
        });
        let kept = retained_prefix(scores, stop_threshold, max_steps)?;
        Ok(PredictionSequence {
            steps: run.steps[..kept].iter().map(|s| read_prediction(&g, s)).collect(),
        })
    }
}

/// Number of leading steps kept by the stopping rule. Consumes scores lazily
/// so that no step past the first rejected one is computed.
pub fn retained_prefix(
    scores: impl IntoIterator<Item = Result<f64>>,
    stop_threshold: f64,
    max_steps: usize,
) -> Result<usize> {
    let mut kept = 0;
    for score in scores.into_iter().take(max_steps) {
        if score? < stop_threshold {
            break;
        }
        kept += 1;
    }
    Ok(kept)
}

/// Copies one step's outputs out of the graph as `f64` values.
pub fn read_prediction<F: Element>(g: &Graph<F>, step: &StepOutput) -> InstancePrediction {
    let mask = g.value(step.mask);
    let (_, h, w) = mask.chw();
    let b = g.value(step.bbox).data();
    InstancePrediction {
        mask: Grid {
            height: h,
            width: w,
            data: mask.data().iter().map(|v| v.f64()).collect(),
        },
        bbox: BBox([b[0].f64(), b[1].f64(), b[2].f64(), b[3].f64()]),
        class_probs: g.value(step.class_probs).data().iter().map(|v| v.f64()).collect(),
        stop_score: g.value(step.stop).data()[0].f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::SkipMode;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn cfg(n_b: usize, hidden: usize, skip: SkipMode) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_blocks: n_b,
                base_channels: 4,
                channel_growth: 2,
            },
            decoder: DecoderConfig {
                num_layers: n_b,
                hidden,
                skip_mode: skip,
                num_classes: 3,
            },
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_at_64() {
        let model = Model::<f32>::new(cfg(5, 8, SkipMode::Concat), 1).unwrap();
        let mut g = Graph::new();
        let run = model.forward(&mut g, &noise_image(64, 64, 1), 1).unwrap();
        assert_eq!(g.value(run.steps[0].mask).chw(), (1, 64, 64));
        assert_eq!(g.value(run.state.hidden[0]).chw(), (8, 2, 2));
        assert_eq!(g.value(run.state.hidden[4]).chw(), (2, 32, 32));
        assert_eq!(g.value(run.steps[0].pooled).len(), model.config.decoder.pooled_len());
    }

    #[test]
    fn heads_are_in_range() {
        let model = Model::<f64>::new(cfg(3, 4, SkipMode::Sum), 2).unwrap();
        let seq = model.unroll(&noise_image(16, 16, 2), 3).unwrap();
        for p in &seq.steps {
            assert!(p.mask.data.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(p.bbox.0.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.stop_score > 0.0 && p.stop_score < 1.0);
        }
    }

    #[test]
    fn unroll_prefix_consistency_and_determinism() {
        let model = Model::<f32>::new(cfg(3, 4, SkipMode::Concat), 3).unwrap();
        let img = noise_image(16, 16, 3);
        let five = model.unroll(&img, 5).unwrap();
        let three = model.unroll(&img, 3).unwrap();
        assert_eq!(five.len(), 5);
        assert_eq!(&five.steps[..3], &three.steps[..]);
        assert_eq!(five, model.unroll(&img, 5).unwrap());
        assert_eq!(model.unroll(&img, 1).unwrap().len(), 1);
    }

    #[test]
    fn state_changes_the_output() {
        let model = Model::<f64>::new(cfg(3, 4, SkipMode::Concat), 4).unwrap();
        let seq = model.unroll(&noise_image(16, 16, 4), 2).unwrap();
        let diff: f64 = seq.steps[0]
            .mask
            .data
            .iter()
            .zip(&seq.steps[1].mask.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn no_skip_ignores_shallow_features() {
        let model = Model::<f64>::new(cfg(3, 4, SkipMode::None), 5).unwrap();
        let img = noise_image(16, 16, 5);
        let mut g = Graph::new();
        let run = model.begin(&mut g, &img).unwrap();
        assert!(run.skips[1..].iter().all(Option::is_none));
        let junk: Vec<Option<Var>> = run
            .skips
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    *s
                } else {
                    let (h, w) = model.config.encoder.pyramid_size(i, 16, 16);
                    let shape = [model.config.decoder.channels(i - 1), h, w];
                    Some(g.input(Tensor::from_vec(&shape, vec![0.7; shape.iter().product()]).unwrap()))
                }
            })
            .collect();
        let dc = &model.config.decoder;
        let (a, _) =
            decode_step(&mut g, dc, model.decoder_ids(), &model.params, &run.skips, &run.state, 16, 16)
                .unwrap();
        let (b, _) =
            decode_step(&mut g, dc, model.decoder_ids(), &model.params, &junk, &run.state, 16, 16)
                .unwrap();
        assert_eq!(g.value(a.mask), g.value(b.mask));
        assert_eq!(g.value(a.stop), g.value(b.stop));
    }

    #[test]
    fn truncated_decoder_reaches_input_resolution() {
        let mut c = cfg(4, 8, SkipMode::Concat);
        c.decoder.num_layers = 2;
        let model = Model::<f32>::new(c, 6).unwrap();
        let seq = model.unroll(&noise_image(32, 32, 6), 1).unwrap();
        assert_eq!((seq.steps[0].mask.height, seq.steps[0].mask.width), (32, 32));
        assert!(model.params.id_of("decoder.proj2.weight").is_none());
    }

    #[test]
    fn stopping_rule() {
        let ok = |v: &[f64]| v.iter().map(|&s| Ok(s)).collect::<Vec<_>>();
        assert_eq!(retained_prefix(ok(&[0.9, 0.8, 0.3, 0.9]), 0.5, 10).unwrap(), 2);
        assert_eq!(retained_prefix(ok(&[0.2, 0.9]), 0.5, 10).unwrap(), 0);
        assert_eq!(retained_prefix(ok(&[0.9; 10]), 0.5, 4).unwrap(), 4);
    }

    #[test]
    fn infer_respects_cap() {
        let model = Model::<f32>::new(cfg(3, 4, SkipMode::Concat), 7).unwrap();
        let img = noise_image(16, 16, 7);
        assert_eq!(model.infer(&img, 1e-9, 3).unwrap().len(), 3);
        assert!(model.infer(&img, 1.0 - 1e-9, 3).unwrap().is_empty());
    }

    #[test]
    fn from_params_checks_layout() {
        let model = Model::<f32>::new(cfg(3, 4, SkipMode::Concat), 8).unwrap();
        let again = Model::from_params(model.config.clone(), model.params.clone()).unwrap();
        assert_eq!(again, model);
        assert!(Model::<f32>::from_params(cfg(3, 8, SkipMode::Concat), model.params.clone()).is_err());
    }
}
