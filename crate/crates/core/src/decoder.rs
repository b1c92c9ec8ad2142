//! Hierarchical ConvLSTM decoder.
//!
//! Layer 0 reads the projected deepest feature map alone. Every later layer
//! `i` reads the ×2 bilinear upsampling of layer `i−1`'s fresh hidden state,
//! merged with the projected skip `S_i` according to [`SkipMode`]. The last
//! hidden state becomes the mask through a 1×1 convolution, bilinear resize
//! to the input resolution and a sigmoid. The box, class and stop heads are
//! single fully connected layers over the concatenated channel-wise maxima of
//! all hidden states.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{project, ConvIds, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSet};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Concat,
    Sum,
    Mult,
    None,
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::Concat => "concat",
            SkipMode::Sum => "sum",
            SkipMode::Mult => "mult",
            SkipMode::None => "none",
        })
    }
}

impl FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(SkipMode::Concat),
            "sum" => Ok(SkipMode::Sum),
            "mult" => Ok(SkipMode::Mult),
            "none" => Ok(SkipMode::None),
            other => Err(Error::Config(format!(
                "unknown skip mode {other:?} (expected concat, sum, mult or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    /// Hidden channels of the first two ConvLSTM layers.
    pub hidden: usize,
    pub skip_mode: SkipMode,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 5,
            hidden: 32,
            skip_mode: SkipMode::Concat,
            num_classes: 3,
        }
    }
}

/// ConvLSTM kernel size; fixed.
pub const KERNEL: usize = 3;

impl DecoderConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.num_layers == 0 || self.num_layers > encoder.num_blocks {
            return Err(Error::Config(format!(
                "decoder layers must be in 1..={} (encoder blocks), got {}",
                encoder.num_blocks, self.num_layers
            )));
        }
        if self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::Config("decoder hidden size and class count must be positive".into()));
        }
        Ok(())
    }

    /// Hidden channels of ConvLSTM layer `i`: `D, D, D/2, D/4, …`, never below 2.
    pub fn channels(&self, i: usize) -> usize {
        let mut c = self.hidden;
        for _ in 2..=i {
            c = (c / 2).max(2);
        }
        c
    }

    pub fn pooled_len(&self) -> usize {
        (0..self.num_layers).map(|i| self.channels(i)).sum()
    }

    /// Output channels of the projection `S_i`, or `None` when layer `i`
    /// takes no skip input.
    pub fn projection_channels(&self, i: usize) -> Option<usize> {
        match (i, self.skip_mode) {
            (0, _) => Some(self.channels(0)),
            (_, SkipMode::Concat) => Some(self.channels(i)),
            (_, SkipMode::Sum | SkipMode::Mult) => Some(self.channels(i - 1)),
            (_, SkipMode::None) => None,
        }
    }

    /// Channels entering ConvLSTM layer `i` (excluding its own hidden state).
    pub fn input_channels(&self, i: usize) -> usize {
        match (i, self.skip_mode) {
            (0, _) => self.channels(0),
            (_, SkipMode::Concat) => self.channels(i - 1) + self.channels(i),
            _ => self.channels(i - 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: usize,
    pub bias: usize,
}

impl LinearIds {
    fn register<F: Element>(
        params: &mut ParamSet<F>,
        name: &str,
        n_out: usize,
        n_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add_init(
            format!("{name}.weight"),
            &[n_out, n_in],
            Init::Xavier {
                fan_in: n_in,
                fan_out: n_out,
            },
            rng,
        );
        let bias = params.add_init(format!("{name}.bias"), &[n_out], Init::Zeros, rng);
        LinearIds { weight, bias }
    }

    fn apply<F: Element>(&self, g: &mut Graph<F>, params: &ParamSet<F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight, params.get(self.weight));
        let b = g.param(self.bias, params.get(self.bias));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderParams {
    pub projections: Vec<Option<ConvIds>>,
    pub lstm: Vec<ConvIds>,
    pub mask: ConvIds,
    pub box_head: LinearIds,
    pub class_head: LinearIds,
    pub stop_head: LinearIds,
}

impl DecoderParams {
    pub fn register<F: Element>(
        cfg: &DecoderConfig,
        encoder: &EncoderConfig,
        params: &mut ParamSet<F>,
        rng: &mut impl Rng,
    ) -> Self {
        let projections = (0..cfg.num_layers)
            .map(|i| {
                cfg.projection_channels(i).map(|c_out| {
                    let c_in = encoder.pyramid_channels(i);
                    ConvIds::register(
                        params,
                        &format!("decoder.proj{i}"),
                        c_out,
                        c_in,
                        1,
                        Init::Xavier {
                            fan_in: c_in,
                            fan_out: c_out,
                        },
                        rng,
                    )
                })
            })
            .collect();
        let lstm = (0..cfg.num_layers)
            .map(|i| {
                let hid = cfg.channels(i);
                let c_in = cfg.input_channels(i) + hid;
                let ids = ConvIds::register(
                    params,
                    &format!("decoder.lstm{i}"),
                    4 * hid,
                    c_in,
                    KERNEL,
                    Init::Xavier {
                        fan_in: c_in * KERNEL * KERNEL,
                        fan_out: hid * KERNEL * KERNEL,
                    },
                    rng,
                );
                // forget-gate bias starts at 1
                let bias = params.get_mut(ids.bias).data_mut();
                bias[hid..2 * hid].fill(F::one());
                ids
            })
            .collect();
        let last = cfg.channels(cfg.num_layers - 1);
        let mask = ConvIds::register(
            params,
            "decoder.mask",
            1,
            last,
            1,
            Init::Xavier {
                fan_in: last,
                fan_out: 1,
            },
            rng,
        );
        let pooled = cfg.pooled_len();
        DecoderParams {
            projections,
            lstm,
            mask,
            box_head: LinearIds::register(params, "decoder.box_head", 4, pooled, rng),
            class_head: LinearIds::register(params, "decoder.class_head", cfg.num_classes, pooled, rng),
            stop_head: LinearIds::register(params, "decoder.stop_head", 1, pooled, rng),
        }
    }
}

/// Hidden and cell states of every layer, as graph nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

impl DecoderState {
    /// All-zero state; layer `i` has the spatial size of `f_i`.
    pub fn zeros<F: Element>(
        g: &mut Graph<F>,
        cfg: &DecoderConfig,
        encoder: &EncoderConfig,
        height: usize,
        width: usize,
    ) -> Self {
        let (mut hidden, mut cell) = (Vec::new(), Vec::new());
        for i in 0..cfg.num_layers {
            let (h, w) = encoder.pyramid_size(i, height, width);
            let shape = [cfg.channels(i), h, w];
            hidden.push(g.input(Tensor::zeros(&shape)));
            cell.push(g.input(Tensor::zeros(&shape)));
        }
        DecoderState { hidden, cell }
    }
}

/// Graph nodes of one step's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutput {
    /// `1 × H × W`, in (0, 1).
    pub mask: Var,
    /// 4 sigmoids.
    pub bbox: Var,
    /// Softmax over classes.
    pub class_probs: Var,
    /// Single sigmoid.
    pub stop: Var,
    /// Concatenated channel maxima the heads read.
    pub pooled: Var,
}

/// Peephole-free ConvLSTM update. Gates come from one 3×3 convolution over
/// `[input | h]`, laid out as `[i, f, o, g]`:
/// `c' = σ(f)⊙c + σ(i)⊙tanh(g)`, `h' = σ(o)⊙tanh(c')`.
pub fn convlstm_step<F: Element>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    ids: &ConvIds,
    input: Var,
    hidden: Var,
    cell: Var,
) -> Result<(Var, Var)> {
    let (_, ih, iw) = g.value(input).chw();
    let (hid, hh, hw) = g.value(hidden).chw();
    if (ih, iw) != (hh, hw) || g.value(cell).shape() != g.value(hidden).shape() {
        return Err(Error::Shape(format!(
            "convlstm input {ih}x{iw} vs state {hh}x{hw}"
        )));
    }
    let x = g.concat(&[input, hidden])?;
    let gates = ids.apply(g, params, x, 1, KERNEL / 2)?;
    if g.value(gates).chw().0 != 4 * hid {
        return Err(Error::Shape(format!(
            "convlstm weights produce {} gate channels, state needs {}",
            g.value(gates).chw().0,
            4 * hid
        )));
    }
    let i = g.slice(gates, 0, hid)?;
    let f = g.slice(gates, hid, hid)?;
    let o = g.slice(gates, 2 * hid, hid)?;
    let cand = g.slice(gates, 3 * hid, hid)?;
    let (i, f, o, cand) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(cand));
    let keep = g.mul(f, cell)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Projects the pyramid once; entry `i` is `S_i` or `None` for layers
/// without a skip.
pub fn project_pyramid<F: Element>(
    g: &mut Graph<F>,
    ids: &DecoderParams,
    params: &ParamSet<F>,
    pyramid: &[Var],
) -> Result<Vec<Option<Var>>> {
    ids.projections
        .iter()
        .enumerate()
        .map(|(i, p)| match p {
            Some(p) => project(g, params, p, pyramid[i]).map(Some),
            None => Ok(None),
        })
        .collect()
}

/// One decoder time step.
#[allow(clippy::too_many_arguments)]
pub fn decode_step<F: Element>(
    g: &mut Graph<F>,
    cfg: &DecoderConfig,
    ids: &DecoderParams,
    params: &ParamSet<F>,
    skips: &[Option<Var>],
    state: &DecoderState,
    out_height: usize,
    out_width: usize,
) -> Result<(StepOutput, DecoderState)> {
    if skips.len() != cfg.num_layers
        || state.hidden.len() != cfg.num_layers
        || state.cell.len() != cfg.num_layers
    {
        return Err(Error::Shape(format!(
            "decoder has {} layers but got {} skips and {} states",
            cfg.num_layers,
            skips.len(),
            state.hidden.len()
        )));
    }
    let mut next = DecoderState {
        hidden: Vec::with_capacity(cfg.num_layers),
        cell: Vec::with_capacity(cfg.num_layers),
    };
    for i in 0..cfg.num_layers {
        let input = if i == 0 {
            skips[0].ok_or_else(|| Error::Shape("layer 0 needs S_0".into()))?
        } else {
            let prev = next.hidden[i - 1];
            let (_, h, w) = g.value(prev).chw();
            let up = g.resize_bilinear(prev, 2 * h, 2 * w);
            match (cfg.skip_mode, skips[i]) {
                (SkipMode::Concat, Some(s)) => g.concat(&[up, s])?,
                (SkipMode::Sum, Some(s)) => g.add(up, s)?,
                (SkipMode::Mult, Some(s)) => g.mul(up, s)?,
                (SkipMode::None, _) => up,
                (mode, None) => {
                    return Err(Error::Shape(format!("skip mode {mode} needs S_{i}")))
                }
            }
        };
        let (h, c) = convlstm_step(g, params, &ids.lstm[i], input, state.hidden[i], state.cell[i])?;
        next.hidden.push(h);
        next.cell.push(c);
    }

    // The 1×1 mask convolution commutes with bilinear resizing (both are
    // per-pixel linear maps and resize weights sum to 1), so it runs at the
    // low resolution before upsampling the single logit channel.
    let last = *next.hidden.last().expect("at least one layer");
    let logits = ids.mask.apply(g, params, last, 1, 0)?;
    let logits = g.resize_bilinear(logits, out_height, out_width);
    let mask = g.sigmoid(logits);

    let maxima: Vec<Var> = next.hidden.iter().map(|&h| g.global_max(h)).collect();
    let pooled = g.concat(&maxima)?;
    let bbox = ids.box_head.apply(g, params, pooled)?;
    let bbox = g.sigmoid(bbox);
    let class_logits = ids.class_head.apply(g, params, pooled)?;
    let class_probs = g.softmax(class_logits);
    let stop = ids.stop_head.apply(g, params, pooled)?;
    let stop = g.sigmoid(stop);
    Ok((
        StepOutput {
            mask,
            bbox,
            class_probs,
            stop,
            pooled,
        },
        next,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn channel_schedule() {
        let cfg = DecoderConfig {
            hidden: 32,
            ..DecoderConfig::default()
        };
        let ch: Vec<_> = (0..5).map(|i| cfg.channels(i)).collect();
        assert_eq!(ch, vec![32, 32, 16, 8, 4]);
        let small = DecoderConfig {
            hidden: 4,
            num_layers: 5,
            ..DecoderConfig::default()
        };
        let ch: Vec<_> = (0..5).map(|i| small.channels(i)).collect();
        assert_eq!(ch, vec![4, 4, 2, 2, 2]);
        assert_eq!(small.pooled_len(), 14);
    }

    #[test]
    fn skip_projection_targets() {
        let enc = EncoderConfig::default();
        for mode in [SkipMode::Sum, SkipMode::Mult] {
            let cfg = DecoderConfig {
                skip_mode: mode,
                ..DecoderConfig::default()
            };
            cfg.validate(&enc).unwrap();
            for i in 1..cfg.num_layers {
                assert_eq!(cfg.projection_channels(i), Some(cfg.channels(i - 1)));
                assert_eq!(cfg.input_channels(i), cfg.channels(i - 1));
            }
        }
        let none = DecoderConfig {
            skip_mode: SkipMode::None,
            ..DecoderConfig::default()
        };
        assert_eq!(none.projection_channels(0), Some(32));
        assert_eq!(none.projection_channels(3), None);
    }

    #[test]
    fn skip_mode_parses() {
        for m in ["concat", "sum", "mult", "none"] {
            assert_eq!(m.parse::<SkipMode>().unwrap().to_string(), m);
        }
        assert!("avg".parse::<SkipMode>().is_err());
    }

    fn lstm_fixture(c_in: usize, hid: usize, zero: bool) -> (ParamSet<f64>, ConvIds) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let init = if zero {
            Init::Zeros
        } else {
            Init::Xavier {
                fan_in: (c_in + hid) * 9,
                fan_out: hid * 9,
            }
        };
        let ids = ConvIds::register(&mut params, "lstm", 4 * hid, c_in + hid, 3, init, &mut rng);
        if !zero {
            for v in params.get_mut(ids.bias).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        (params, ids)
    }

    #[test]
    fn convlstm_zero_everything_stays_zero() {
        let (params, ids) = lstm_fixture(3, 2, true);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 4, 4]));
        let h = g.input(Tensor::zeros(&[2, 4, 4]));
        let c = g.input(Tensor::zeros(&[2, 4, 4]));
        let (h2, c2) = convlstm_step(&mut g, &params, &ids, x, h, c).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_shapes_and_errors() {
        let (params, ids) = lstm_fixture(16, 8, false);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[16, 4, 4]));
        let h = g.input(Tensor::zeros(&[8, 4, 4]));
        let c = g.input(Tensor::zeros(&[8, 4, 4]));
        let (h2, c2) = convlstm_step(&mut g, &params, &ids, x, h, c).unwrap();
        assert_eq!(g.value(h2).chw(), (8, 4, 4));
        assert_eq!(g.value(c2).chw(), (8, 4, 4));
        let bad = g.input(Tensor::zeros(&[16, 2, 2]));
        assert!(matches!(
            convlstm_step(&mut g, &params, &ids, bad, h, c),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn convlstm_gradient_matches_finite_differences() {
        let (c_in, hid) = (3, 2);
        let (params, ids) = lstm_fixture(c_in, hid, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (x, h0, c0) = (rand(&[c_in, 4, 4]), rand(&[hid, 4, 4]), rand(&[hid, 4, 4]));
        let run = |params: &ParamSet<f64>| {
            let mut g = Graph::new();
            let (vx, vh, vc) = (g.input(x.clone()), g.input(h0.clone()), g.input(c0.clone()));
            let (h, _) = convlstm_step(&mut g, params, &ids, vx, vh, vc).unwrap();
            (g, h)
        };
        let norm2 = |params: &ParamSet<f64>| {
            let (g, h) = run(params);
            g.value(h).data().iter().map(|v| v * v).sum::<f64>()
        };
        let (g, h) = run(&params);
        let seed = g.value(h).map(|v| 2.0 * v);
        let grads = g.backward(&[(h, seed)]);
        let analytic = g.param_grads(&grads, &params.shapes());
        let step = 1e-6;
        for id in 0..params.len() {
            for j in 0..params.get(id).len() {
                let mut p = params.clone();
                p.get_mut(id).data_mut()[j] += step;
                let mut m = params.clone();
                m.get_mut(id).data_mut()[j] -= step;
                let numeric = (norm2(&p) - norm2(&m)) / (2.0 * step);
                let a = analytic[id].data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "param {id}[{j}]: {a} vs {numeric}");
            }
        }
    }
}
