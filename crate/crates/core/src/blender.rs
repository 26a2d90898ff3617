//! Cross-attention blending transformer fusing the text-conditioned and
//! body-conditioned hand streams.
//!
//! Both streams are embedded into a shared latent space with positional
//! encoding. The first block queries from the body stream and attends
//! over the text stream; every following block queries from the previous
//! block's output while the key/value source alternates between the two
//! streams. Training supervises the output against the convex combination
//! `w_body * x_body + w_text * x_text` under an L1 loss.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::motion_repr::HAND_CHANNELS;
use crate::nn::{
    positional_encoding, AdamW, Bound, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamSet,
};
use crate::denoisers::{TrainConfig, TrainReport};

/// Convex blending weights; must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBlendWeights", into = "RawBlendWeights")]
pub struct BlendWeights {
    w_body: f64,
    w_text: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawBlendWeights {
    w_body: f64,
    w_text: f64,
}

impl TryFrom<RawBlendWeights> for BlendWeights {
    type Error = String;
    fn try_from(raw: RawBlendWeights) -> std::result::Result<Self, String> {
        BlendWeights::new(raw.w_body, raw.w_text).map_err(|e| e.to_string())
    }
}

impl From<BlendWeights> for RawBlendWeights {
    fn from(w: BlendWeights) -> RawBlendWeights {
        RawBlendWeights {
            w_body: w.w_body,
            w_text: w.w_text,
        }
    }
}

impl BlendWeights {
    pub fn new(w_body: f64, w_text: f64) -> Result<BlendWeights> {
        if w_body < 0.0 || w_text < 0.0 {
            return Err(Error::ShapeMismatch(format!(
                "blend weights must be non-negative, got ({w_body}, {w_text})"
            )));
        }
        if (w_body + w_text - 1.0).abs() > 1e-9 {
            return Err(Error::ShapeMismatch(format!(
                "blend weights must sum to 1, got {w_body} + {w_text}"
            )));
        }
        Ok(BlendWeights { w_body, w_text })
    }

    pub fn w_body(&self) -> f64 {
        self.w_body
    }

    pub fn w_text(&self) -> f64 {
        self.w_text
    }
}

impl Default for BlendWeights {
    fn default() -> Self {
        BlendWeights {
            w_body: 0.8,
            w_text: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlenderConfig {
    pub blocks: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for BlenderConfig {
    fn default() -> Self {
        BlenderConfig {
            blocks: 4,
            latent_dim: 512,
            heads: 4,
            ff_dim: 1024,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Cross-attention blender parameter bundle.
#[derive(Debug, Clone)]
pub struct BlenderModel {
    pub config: BlenderConfig,
    pub params: ParamSet,
    input_embed: Linear,
    blocks: Vec<Block>,
    out_proj: Linear,
}

impl BlenderModel {
    pub fn new(config: BlenderConfig, seed: u64) -> BlenderModel {
        assert_eq!(config.latent_dim % config.heads, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.latent_dim;
        let input_embed = Linear::new(&mut params, "embed", HAND_CHANNELS, d, &mut rng);
        let blocks = (0..config.blocks)
            .map(|i| Block {
                ln_q: LayerNorm::new(&mut params, &format!("block{i}.ln_q"), d),
                ln_kv: LayerNorm::new(&mut params, &format!("block{i}.ln_kv"), d),
                attn: MultiHeadAttention::new(
                    &mut params,
                    &format!("block{i}.attn"),
                    d,
                    config.heads,
                    &mut rng,
                ),
                ln_ff: LayerNorm::new(&mut params, &format!("block{i}.ln_ff"), d),
                ff: FeedForward::new(&mut params, &format!("block{i}.ff"), d, config.ff_dim, &mut rng),
            })
            .collect();
        let out_proj = Linear::new(&mut params, "out_proj", d, HAND_CHANNELS, &mut rng);
        BlenderModel {
            config,
            params,
            input_embed,
            blocks,
            out_proj,
        }
    }

    pub fn from_params(config: BlenderConfig, params: ParamSet) -> BlenderModel {
        let mut model = BlenderModel::new(config, 0);
        assert_eq!(model.params.names, params.names, "parameter layout mismatch");
        model.params = params;
        model
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_text: &Array2<f64>,
        x_body: &Array2<f64>,
        mut attn_probe: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<Var> {
        if x_text.nrows() != x_body.nrows() {
            return Err(Error::FrameMismatch {
                a: x_text.nrows(),
                b: x_body.nrows(),
            });
        }
        if x_text.ncols() != HAND_CHANNELS || x_body.ncols() != HAND_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "blender expects {HAND_CHANNELS} hand channels, got {} and {}",
                x_text.ncols(),
                x_body.ncols()
            )));
        }
        let frames = x_text.nrows();
        let pe = tape.leaf(positional_encoding(frames, self.config.latent_dim));
        let vt = tape.leaf(x_text.clone());
        let vb = tape.leaf(x_body.clone());
        let et = self.input_embed.forward(tape, bound, vt);
        let h_text = tape.add(et, pe);
        let eb = self.input_embed.forward(tape, bound, vb);
        let h_body = tape.add(eb, pe);

        let mut h = h_body;
        for (i, block) in self.blocks.iter().enumerate() {
            // K/V source alternates, starting with the text stream
            let kv = if i % 2 == 0 { h_text } else { h_body };
            let qn = block.ln_q.forward(tape, bound, h);
            let kvn = block.ln_kv.forward(tape, bound, kv);
            let attn = block
                .attn
                .forward(tape, bound, qn, kvn, attn_probe.as_deref_mut());
            h = tape.add(h, attn);
            let hn = block.ln_ff.forward(tape, bound, h);
            let ff = block.ff.forward(tape, bound, hn);
            h = tape.add(h, ff);
        }
        Ok(self.out_proj.forward(tape, bound, h))
    }

    /// Smoothed-L1 loss against `target`, with analytic parameter
    /// gradients; the gradient-check entry point.
    pub fn loss_and_param_grads(
        &self,
        x_text: &Array2<f64>,
        x_body: &Array2<f64>,
        target: &Array2<f64>,
        smoothing: f64,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&self.params, &mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, x_text, x_body, None)?;
        let tgt = tape.leaf(target.clone());
        let diff = tape.sub(out, tgt);
        let loss = tape.mean_smooth_abs(diff, smoothing);
        let loss_val = tape.value(loss)[(0, 0)];
        let grads = tape.backward(loss);
        let mut grad_vec = crate::nn::zero_grads(&self.params);
        bound.accumulate(&grads, &mut grad_vec);
        Ok((loss_val, grad_vec))
    }
}

/// One cross-attention pass over the two streams.
pub fn blend_once(
    model: &BlenderModel,
    x_text: &Array2<f64>,
    x_body: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&model.params, &mut tape);
    let out = model.forward_on_tape(&mut tape, &bound, x_text, x_body, None)?;
    Ok(tape.value(out).clone())
}

/// `blend_once` that also returns every head's attention matrix.
pub fn blend_once_with_attention(
    model: &BlenderModel,
    x_text: &Array2<f64>,
    x_body: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&model.params, &mut tape);
    let mut probe = Vec::new();
    let out = model.forward_on_tape(&mut tape, &bound, x_text, x_body, Some(&mut probe))?;
    Ok((tape.value(out).clone(), probe))
}

/// Iterated blending: the previous output replaces the body-stream input
/// while the text stream stays fixed.
pub struct BlendResult {
    pub output: Array2<f64>,
    pub intermediates: Vec<Array2<f64>>,
}

pub fn blend_iterated(
    model: &BlenderModel,
    x_text: &Array2<f64>,
    x_body: &Array2<f64>,
    iterations: usize,
) -> Result<BlendResult> {
    if iterations == 0 {
        return Err(Error::ShapeMismatch("iterations must be >= 1".into()));
    }
    let mut intermediates = Vec::with_capacity(iterations);
    let mut current = blend_once(model, x_text, x_body)?;
    intermediates.push(current.clone());
    for _ in 1..iterations {
        current = blend_once(model, x_text, &current)?;
        intermediates.push(current.clone());
    }
    Ok(BlendResult {
        output: current,
        intermediates,
    })
}

/// `mean | x_s - (w_body x_body + w_text x_text) |` over all channels.
pub fn blend_loss(
    x_s: &Array2<f64>,
    x_body: &Array2<f64>,
    x_text: &Array2<f64>,
    w: &BlendWeights,
) -> Result<f64> {
    if x_s.dim() != x_body.dim() || x_s.dim() != x_text.dim() {
        return Err(Error::ShapeMismatch(format!(
            "blend_loss shapes {:?} / {:?} / {:?}",
            x_s.dim(),
            x_body.dim(),
            x_text.dim()
        )));
    }
    let target = x_body * w.w_body + x_text * w.w_text;
    Ok((x_s - &target).mapv(f64::abs).sum() / x_s.len() as f64)
}

/// Ablation substitute for the blending loss: mean L2 position distance
/// over a random, seeded subset of finger joints.
pub fn ablation_finger_loss(
    x_s: &Array2<f64>,
    target: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if x_s.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ablation loss shapes {:?} vs {:?}",
            x_s.dim(),
            target.dim()
        )));
    }
    let joints = x_s.ncols() / 9;
    let mut subset: Vec<usize> = (0..joints).filter(|_| rng.gen::<bool>()).collect();
    if subset.is_empty() {
        subset.push(rng.gen_range(0..joints));
    }
    finger_subset_loss(x_s, target, &subset)
}

/// Mean L2 position distance over an explicit joint subset.
pub fn finger_subset_loss(
    x_s: &Array2<f64>,
    target: &Array2<f64>,
    subset: &[usize],
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptyInput("joint subset".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for f in 0..x_s.nrows() {
        for &j in subset {
            let base = j * 9;
            let mut d2 = 0.0;
            for k in 0..3 {
                let d = x_s[(f, base + k)] - target[(f, base + k)];
                d2 += d * d;
            }
            acc += d2.sqrt();
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// A training pair produced by the two frozen stage-1 denoisers (or by
/// ground truth when so configured).
pub struct BlendPair {
    pub x_text: Array2<f64>,
    pub x_body: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendLossKind {
    /// The weighted L1 blending loss.
    Blend,
    /// Ablation: random-finger L2 distance against the same convex target.
    RandomFinger,
}

/// Gradient descent on the blending loss over fixed pairs.
pub fn train_blender(
    model: &mut BlenderModel,
    pairs: &[BlendPair],
    weights: &BlendWeights,
    loss_kind: BlendLossKind,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grad_acc = crate::nn::zero_grads(&model.params);
        let mut loss_acc = 0.0;
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            let target = &pair.x_body * weights.w_body + &pair.x_text * weights.w_text;

            let mut tape = Tape::new();
            let bound = Bound::bind(&model.params, &mut tape);
            let out =
                model.forward_on_tape(&mut tape, &bound, &pair.x_text, &pair.x_body, None)?;
            let loss = match loss_kind {
                BlendLossKind::Blend => {
                    let tgt = tape.leaf(target);
                    let diff = tape.sub(out, tgt);
                    tape.mean_abs(diff)
                }
                BlendLossKind::RandomFinger => {
                    // mask everything except the position channels of the
                    // sampled joints, then take the smooth L2 surrogate
                    let joints = HAND_CHANNELS / 9;
                    let mut subset: Vec<usize> =
                        (0..joints).filter(|_| rng.gen::<bool>()).collect();
                    if subset.is_empty() {
                        subset.push(rng.gen_range(0..joints));
                    }
                    let mut mask = Array2::zeros((pair.x_text.nrows(), HAND_CHANNELS));
                    for f in 0..pair.x_text.nrows() {
                        for &j in &subset {
                            for k in 0..3 {
                                mask[(f, j * 9 + k)] = 1.0;
                            }
                        }
                    }
                    let tgt = tape.leaf(target);
                    let diff = tape.sub(out, tgt);
                    let masked = tape.mul_const(diff, &mask);
                    tape.mean_sq(masked)
                }
            };
            let loss_val = tape.value(loss)[(0, 0)];
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    value: loss_val,
                });
            }
            loss_acc += loss_val;
            let grads = tape.backward(loss);
            bound.accumulate(&grads, &mut grad_acc);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for g in grad_acc.iter_mut() {
            *g *= inv;
        }
        opt.step(&mut model.params, &grad_acc);
        losses.push(loss_acc * inv);
    }
    Ok(TrainReport::from_trace(losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn tiny_config() -> BlenderConfig {
        BlenderConfig {
            blocks: 2,
            latent_dim: 16,
            heads: 2,
            ff_dim: 32,
        }
    }

    fn random_tensor(rows: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, HAND_CHANNELS), |_| {
            rng.sample::<f64, _>(StandardNormal)
        })
    }

    #[test]
    fn blend_weights_validation() {
        assert!(BlendWeights::new(0.8, 0.2).is_ok());
        assert!(BlendWeights::new(1.0, 0.0).is_ok());
        assert!(BlendWeights::new(0.5, 0.6).is_err());
        assert!(BlendWeights::new(-0.1, 1.1).is_err());
        assert!(BlendWeights::new(0.8, 0.2 + 1e-8).is_err());
    }

    #[test]
    fn blend_once_shape_contract() {
        let model = BlenderModel::new(tiny_config(), 1);
        for t in [1usize, 60] {
            let out = blend_once(&model, &random_tensor(t, 2), &random_tensor(t, 3)).unwrap();
            assert_eq!(out.dim(), (t, HAND_CHANNELS));
        }
    }

    #[test]
    fn blend_once_is_asymmetric_in_inputs() {
        let model = BlenderModel::new(tiny_config(), 7);
        let a = random_tensor(5, 2);
        let b = random_tensor(5, 3);
        let ab = blend_once(&model, &a, &b).unwrap();
        let ba = blend_once(&model, &b, &a).unwrap();
        let gap: f64 = ab.iter().zip(ba.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(gap.sqrt() > 1e-6);
    }

    #[test]
    fn blend_once_deterministic_at_eval() {
        let model = BlenderModel::new(tiny_config(), 9);
        let a = random_tensor(4, 2);
        let b = random_tensor(4, 3);
        assert_eq!(
            blend_once(&model, &a, &b).unwrap(),
            blend_once(&model, &a, &b).unwrap()
        );
    }

    #[test]
    fn blend_frame_mismatch() {
        let model = BlenderModel::new(tiny_config(), 1);
        assert!(matches!(
            blend_once(&model, &random_tensor(3, 2), &random_tensor(4, 3)),
            Err(Error::FrameMismatch { a: 3, b: 4 })
        ));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = BlenderModel::new(tiny_config(), 5);
        let (_, probe) =
            blend_once_with_attention(&model, &random_tensor(6, 2), &random_tensor(6, 3)).unwrap();
        assert_eq!(probe.len(), 2 * 2); // blocks x heads
        for attn in &probe {
            for row in attn.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blend_loss_examples() {
        let w = BlendWeights::new(0.8, 0.2).unwrap();
        let x = random_tensor(3, 1);
        // x_s = x_body = x_text -> 0 (up to 0.8x + 0.2x rounding)
        assert!(blend_loss(&x, &x, &x, &w).unwrap() < 1e-15);
        // w = (1, 0), x_s = x_body -> 0 regardless of x_text
        let w10 = BlendWeights::new(1.0, 0.0).unwrap();
        assert_eq!(blend_loss(&x, &x, &random_tensor(3, 9), &w10).unwrap(), 0.0);
        // hand-evaluated: x_s = 0, body = 1, text = -1, w = (0.8, 0.2)
        let zeros = Array2::zeros((2, HAND_CHANNELS));
        let ones = Array2::from_elem((2, HAND_CHANNELS), 1.0);
        let negs = Array2::from_elem((2, HAND_CHANNELS), -1.0);
        let l = blend_loss(&zeros, &ones, &negs, &w).unwrap();
        assert!((l - 0.6).abs() < 1e-12);
    }

    #[test]
    fn finger_loss_examples() {
        let a = random_tensor(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ablation_finger_loss(&a, &a, &mut rng).unwrap(), 0.0);
        // fixed seed twice -> identical loss
        let b = random_tensor(3, 5);
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            ablation_finger_loss(&a, &b, &mut r1).unwrap(),
            ablation_finger_loss(&a, &b, &mut r2).unwrap()
        );
        // subset = all joints equals the full mean L2 distance
        let all: Vec<usize> = (0..HAND_CHANNELS / 9).collect();
        let full = finger_subset_loss(&a, &b, &all).unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for f in 0..3 {
            for j in 0..HAND_CHANNELS / 9 {
                let mut d2 = 0.0;
                for k in 0..3 {
                    let d = a[(f, j * 9 + k)] - b[(f, j * 9 + k)];
                    d2 += d * d;
                }
                acc += d2.sqrt();
                n += 1;
            }
        }
        assert!((full - acc / n as f64).abs() < 1e-12);
    }

    #[test]
    fn blend_iterated_contract() {
        let model = BlenderModel::new(tiny_config(), 3);
        let a = random_tensor(4, 2);
        let b = random_tensor(4, 3);
        let once = blend_once(&model, &a, &b).unwrap();
        let r1 = blend_iterated(&model, &a, &b, 1).unwrap();
        assert_eq!(r1.output, once);
        let r3 = blend_iterated(&model, &a, &b, 3).unwrap();
        assert_eq!(r3.intermediates.len(), 3);
        for i in &r3.intermediates {
            assert_eq!(i.dim(), once.dim());
        }
        let gap: f64 = r3
            .output
            .iter()
            .zip(once.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(gap.sqrt() > 1e-6);
    }

    #[test]
    fn train_blender_empty_and_flat() {
        let mut model = BlenderModel::new(tiny_config(), 1);
        let w = BlendWeights::default();
        let cfg = TrainConfig {
            steps: 40,
            batch_size: 2,
            seed: 1,
            optimizer: crate::nn::OptimizerConfig {
                lr: 0.0,
                weight_decay: 0.0,
                ..Default::default()
            },
            cond_dropout: 0.0,
        };
        assert!(matches!(
            train_blender(&mut model, &[], &w, BlendLossKind::Blend, &cfg),
            Err(Error::EmptyDataset)
        ));
        let pairs = vec![BlendPair {
            x_text: random_tensor(4, 2),
            x_body: random_tensor(4, 3),
        }];
        let r = train_blender(&mut model, &pairs, &w, BlendLossKind::Blend, &cfg).unwrap();
        assert!((r.final_ema_loss - r.initial_ema_loss).abs() <= 0.02 * r.initial_ema_loss);
    }
}
