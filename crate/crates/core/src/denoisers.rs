//! The two condition-specific transformer denoisers.
//!
//! Both predict the clean hand tensor x0 directly. The body-conditioned
//! model consumes the noised global hands concatenated per frame with the
//! clean body condition; the text-conditioned model consumes the noised
//! wrist-local hands with the text token folded into the timestep token.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{q_sample, sample_loop, NoiseSchedule};
use crate::error::{Error, Result};
use crate::motion_repr::{BODY_CHANNELS, HAND_CHANNELS};
use crate::nn::{
    positional_encoding, timestep_embedding, AdamW, Bound, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, OptimizerConfig, ParamSet,
};

/// Width of the text-embedding interface; matches CLIP-style encoders so
/// externally computed embeddings plug in directly.
pub const TEXT_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Sinusoidal positional encoding on frame tokens; the only source of
    /// temporal order in the architecture.
    pub positional_encoding: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            blocks: 4,
            latent_dim: 512,
            heads: 4,
            ff_dim: 1024,
            dropout: 0.1,
            positional_encoding: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    BodyConditioned,
    TextConditioned,
}

impl std::fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DenoiserKind::BodyConditioned => write!(f, "body_conditioned"),
            DenoiserKind::TextConditioned => write!(f, "text_conditioned"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderSource {
    DeskHashEncoder,
    ExternalClip,
}

/// A single latent text token conditioning the text denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCondition {
    pub token: Vec<f64>,
    pub source: TextEncoderSource,
}

impl TextCondition {
    pub fn zero() -> TextCondition {
        TextCondition {
            token: vec![0.0; TEXT_EMBED_DIM],
            source: TextEncoderSource::DeskHashEncoder,
        }
    }

    pub fn external(embedding: Vec<f64>) -> TextCondition {
        TextCondition {
            token: embedding,
            source: TextEncoderSource::ExternalClip,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic offline text encoder: lowercase, whitespace-tokenize,
/// hash each token to a fixed pseudo-random vector, average, L2-normalize.
pub fn text_encode(prompt: &str) -> Result<TextCondition> {
    let folded = prompt.to_lowercase();
    let tokens: Vec<&str> = folded.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut acc = vec![0.0f64; TEXT_EMBED_DIM];
    for tok in &tokens {
        // the hash seeds a per-token rng, giving a fixed lookup-table entry
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok) ^ 0x746f6b656e);
        for a in acc.iter_mut() {
            *a += rng.sample::<f64, _>(StandardNormal);
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for a in acc.iter_mut() {
        *a /= norm;
    }
    Ok(TextCondition {
        token: acc,
        source: TextEncoderSource::DeskHashEncoder,
    })
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    input_proj: Linear,
    time_mlp1: Linear,
    time_mlp2: Linear,
    text_proj: Option<Linear>,
    blocks: Vec<Block>,
    out_proj: Linear,
}

/// Transformer denoiser parameter bundle.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub kind: DenoiserKind,
    pub params: ParamSet,
    layout: Layout,
}

fn build_layout(
    params: &mut ParamSet,
    config: &DenoiserConfig,
    kind: DenoiserKind,
    rng: &mut impl Rng,
) -> Layout {
    let d = config.latent_dim;
    let input_dim = match kind {
        DenoiserKind::BodyConditioned => HAND_CHANNELS + BODY_CHANNELS,
        DenoiserKind::TextConditioned => HAND_CHANNELS,
    };
    let text_proj = match kind {
        DenoiserKind::TextConditioned => {
            Some(Linear::new(params, "text_proj", TEXT_EMBED_DIM, d, rng))
        }
        DenoiserKind::BodyConditioned => None,
    };
    Layout {
        input_proj: Linear::new(params, "input_proj", input_dim, d, rng),
        time_mlp1: Linear::new(params, "time_mlp1", d, d, rng),
        time_mlp2: Linear::new(params, "time_mlp2", d, d, rng),
        text_proj,
        blocks: (0..config.blocks)
            .map(|i| Block {
                ln1: LayerNorm::new(params, &format!("block{i}.ln1"), d),
                attn: MultiHeadAttention::new(
                    params,
                    &format!("block{i}.attn"),
                    d,
                    config.heads,
                    rng,
                ),
                ln2: LayerNorm::new(params, &format!("block{i}.ln2"), d),
                ff: FeedForward::new(params, &format!("block{i}.ff"), d, config.ff_dim, rng),
            })
            .collect(),
        out_proj: Linear::new(params, "out_proj", d, HAND_CHANNELS, rng),
    }
}

/// Training vs. inference forward mode; training applies inverted dropout.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode) -> Var {
    match mode {
        Mode::Train { rng } if p > 0.0 => {
            let dim = tape.value(x).dim();
            let keep = 1.0 - p;
            let mask = Array2::from_shape_fn(dim, |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            tape.mul_const(x, &mask)
        }
        _ => x,
    }
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, kind: DenoiserKind, seed: u64) -> DenoiserModel {
        assert_eq!(config.latent_dim % config.heads, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layout = build_layout(&mut params, &config, kind, &mut rng);
        DenoiserModel {
            config,
            kind,
            params,
            layout,
        }
    }

    /// Rebuild the layout bookkeeping for parameters loaded from a
    /// checkpoint. Parameter creation order is deterministic, so a dummy
    /// build with the same config reproduces the ids; values are then
    /// swapped in.
    pub fn from_params(config: DenoiserConfig, kind: DenoiserKind, params: ParamSet) -> DenoiserModel {
        let mut model = DenoiserModel::new(config, kind, 0);
        assert_eq!(model.params.names, params.names, "parameter layout mismatch");
        model.params = params;
        model
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_t: &Array2<f64>,
        t: usize,
        condition: &DenoiserInput,
        mode: &mut Mode,
    ) -> Result<Var> {
        let frames = x_t.nrows();
        let d = self.config.latent_dim;
        let lay = &self.layout;

        let frame_input = match (self.kind, condition) {
            (DenoiserKind::BodyConditioned, DenoiserInput::Body(body)) => {
                if body.nrows() != frames {
                    return Err(Error::FrameMismatch {
                        a: frames,
                        b: body.nrows(),
                    });
                }
                let xv = tape.leaf(x_t.clone());
                let bv = tape.leaf((*body).clone());
                tape.concat_cols(&[xv, bv])
            }
            (DenoiserKind::TextConditioned, DenoiserInput::Text(_)) => tape.leaf(x_t.clone()),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "denoiser kind {} fed the wrong condition type",
                    self.kind
                )))
            }
        };

        let mut tokens = lay.input_proj.forward(tape, bound, frame_input);
        if self.config.positional_encoding {
            let pe = tape.leaf(positional_encoding(frames, d));
            tokens = tape.add(tokens, pe);
        }

        // timestep token, plus the projected text token for the text model
        let te = tape.leaf(timestep_embedding(t, d));
        let te = lay.time_mlp1.forward(tape, bound, te);
        let te = tape.gelu(te);
        let mut cond_token = lay.time_mlp2.forward(tape, bound, te);
        if let (Some(text_proj), DenoiserInput::Text(text)) = (&lay.text_proj, condition) {
            let tok = tape.leaf(Array2::from_shape_vec((1, TEXT_EMBED_DIM), text.token.clone())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?);
            let tok = text_proj.forward(tape, bound, tok);
            cond_token = tape.add(cond_token, tok);
        }

        let mut h = tape.concat_rows(&[cond_token, tokens]);
        for block in &lay.blocks {
            let normed = block.ln1.forward(tape, bound, h);
            let attn = block.attn.forward(tape, bound, normed, normed, None);
            let attn = dropout(tape, attn, self.config.dropout, mode);
            h = tape.add(h, attn);
            let normed = block.ln2.forward(tape, bound, h);
            let ff = block.ff.forward(tape, bound, normed);
            let ff = dropout(tape, ff, self.config.dropout, mode);
            h = tape.add(h, ff);
        }
        let frame_tokens = tape.slice_rows(h, 1, frames + 1);
        Ok(lay.out_proj.forward(tape, bound, frame_tokens))
    }

    /// Inference-mode x0 prediction.
    pub fn denoise(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        condition: &DenoiserInput,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&self.params, &mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, x_t, t, condition, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Smoothed-L1 loss against `target` for one fixed noisy input, with
    /// analytic parameter gradients; the gradient-check entry point.
    pub fn loss_and_param_grads(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        condition: &DenoiserInput,
        target: &Array2<f64>,
        smoothing: f64,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&self.params, &mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, x_t, t, condition, &mut Mode::Eval)?;
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

/// Condition input for one denoiser call.
pub enum DenoiserInput<'a> {
    Body(&'a Array2<f64>),
    Text(&'a TextCondition),
}

/// One training sample: normalized clean target hands plus its condition.
pub struct TrainSample {
    pub target: Array2<f64>,
    pub condition: OwnedCondition,
}

#[derive(Debug, Clone)]
pub enum OwnedCondition {
    Body(Array2<f64>),
    Text(TextCondition),
}

impl OwnedCondition {
    fn as_input(&self) -> DenoiserInput<'_> {
        match self {
            OwnedCondition::Body(b) => DenoiserInput::Body(b),
            OwnedCondition::Text(t) => DenoiserInput::Text(t),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Classifier-free-guidance condition dropout for the text model.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            cond_dropout: 0.1,
        }
    }
}

/// Per-step loss trace of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub steps: usize,
    pub initial_ema_loss: f64,
    pub final_ema_loss: f64,
}

impl TrainReport {
    pub fn from_trace(losses: Vec<f64>) -> TrainReport {
        let steps = losses.len();
        let window = (steps / 20).clamp(1, 50);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        TrainReport {
            initial_ema_loss: mean(&losses[..window.min(steps)]),
            final_ema_loss: mean(&losses[steps.saturating_sub(window)..]),
            steps,
            losses,
        }
    }
}

/// L1 diffusion training: sample clip and timestep, noise with `q_sample`,
/// predict x0, take an AdamW step on the mean absolute error.
pub fn train_denoiser(
    model: &mut DenoiserModel,
    dataset: &[TrainSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    let zero_text = TextCondition::zero();

    for step in 0..cfg.steps {
        let mut grad_acc = crate::nn::zero_grads(&model.params);
        let mut loss_acc = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = &dataset[rng.gen_range(0..dataset.len())];
            let t = rng.gen_range(0..sched.steps);
            let noise = Array2::from_shape_fn(sample.target.dim(), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let noisy = q_sample(&sample.target, t, &noise, sched)?;

            let dropped;
            let condition = match &sample.condition {
                OwnedCondition::Text(_) if rng.gen::<f64>() < cfg.cond_dropout => {
                    dropped = OwnedCondition::Text(zero_text.clone());
                    dropped.as_input()
                }
                other => {
                    dropped = other.clone();
                    dropped.as_input()
                }
            };

            let mut tape = Tape::new();
            let bound = Bound::bind(&model.params, &mut tape);
            let mut mode = Mode::Train { rng: &mut rng };
            let pred =
                model.forward_on_tape(&mut tape, &bound, &noisy.x_t, t, &condition, &mut mode)?;
            let target = tape.leaf(sample.target.clone());
            let diff = tape.sub(pred, target);
            let loss = tape.mean_abs(diff);
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

/// Ancestral sampling with one denoiser, with optional classifier-free
/// guidance for the text model (`guidance_scale` 1.0 = off).
pub fn sample_denoiser(
    model: &DenoiserModel,
    condition: &DenoiserInput,
    frames: usize,
    sched: &NoiseSchedule,
    guidance_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let zero_text = TextCondition::zero();
    sample_loop(
        |x_t, t| {
            let cond_pred = model.denoise(x_t, t, condition)?;
            if (guidance_scale - 1.0).abs() < 1e-12
                || !matches!(condition, DenoiserInput::Text(_))
            {
                return Ok(cond_pred);
            }
            let uncond = model.denoise(x_t, t, &DenoiserInput::Text(&zero_text))?;
            Ok(&uncond + (cond_pred - &uncond) * guidance_scale)
        },
        (frames, HAND_CHANNELS),
        sched,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            blocks: 1,
            latent_dim: 16,
            heads: 2,
            ff_dim: 32,
            dropout: 0.0,
            positional_encoding: true,
        }
    }

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn text_encode_deterministic_and_case_folded() {
        let a = text_encode("wave LEFT hand").unwrap();
        let b = text_encode("wave left hand").unwrap();
        assert_eq!(a, b);
        let c = text_encode("wave LEFT hand").unwrap();
        assert_eq!(a, c);
        let norm: f64 = a.token.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_encode_rejects_empty() {
        assert!(matches!(text_encode("   "), Err(Error::EmptyPrompt)));
        assert!(matches!(text_encode(""), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn disjoint_prompts_nearly_orthogonal() {
        let mut acc = 0.0;
        let n = 2000;
        for i in 0..n {
            let a = text_encode(&format!("alpha{i} beta{i}", i = i * 2)).unwrap();
            let b = text_encode(&format!("gamma{i} delta{i}", i = i * 2 + 1)).unwrap();
            let cos: f64 = a.token.iter().zip(&b.token).map(|(x, y)| x * y).sum();
            acc += cos.abs();
        }
        assert!(acc / (n as f64) < 0.1);
    }

    #[test]
    fn body_denoiser_shape_contract() {
        let model = DenoiserModel::new(tiny_config(), DenoiserKind::BodyConditioned, 1);
        for frames in [1usize, 60, 300] {
            let x = random_tensor(frames, HAND_CHANNELS, 2);
            let body = random_tensor(frames, BODY_CHANNELS, 3);
            let out = model.denoise(&x, 5, &DenoiserInput::Body(&body)).unwrap();
            assert_eq!(out.dim(), (frames, HAND_CHANNELS));
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn body_denoiser_frame_mismatch() {
        let model = DenoiserModel::new(tiny_config(), DenoiserKind::BodyConditioned, 1);
        let x = random_tensor(4, HAND_CHANNELS, 2);
        let body = random_tensor(3, BODY_CHANNELS, 3);
        assert!(matches!(
            model.denoise(&x, 0, &DenoiserInput::Body(&body)),
            Err(Error::FrameMismatch { a: 4, b: 3 })
        ));
    }

    #[test]
    fn text_denoiser_shape_and_zero_token() {
        let model = DenoiserModel::new(tiny_config(), DenoiserKind::TextConditioned, 1);
        let x = random_tensor(6, HAND_CHANNELS, 2);
        let cond = text_encode("curl the fingers").unwrap();
        let out = model.denoise(&x, 3, &DenoiserInput::Text(&cond)).unwrap();
        assert_eq!(out.dim(), (6, HAND_CHANNELS));
        // zero token is the unconditional CFG branch and must stay finite
        let zero = TextCondition::zero();
        let out0 = model.denoise(&x, 3, &DenoiserInput::Text(&zero)).unwrap();
        assert!(out0.iter().all(|v| v.is_finite()));
        assert_ne!(out, out0);
    }

    #[test]
    fn no_positional_encoding_gives_frame_permutation_equivariance() {
        let mut cfg = tiny_config();
        cfg.positional_encoding = false;
        let model = DenoiserModel::new(cfg, DenoiserKind::BodyConditioned, 5);
        let x = random_tensor(4, HAND_CHANNELS, 6);
        let body = random_tensor(4, BODY_CHANNELS, 7);
        let out = model.denoise(&x, 2, &DenoiserInput::Body(&body)).unwrap();
        // permute frames 0..4 -> [2,0,3,1]
        let perm = [2usize, 0, 3, 1];
        let permute = |a: &Array2<f64>| {
            let mut p = a.clone();
            for (dst, src) in perm.iter().enumerate() {
                p.row_mut(dst).assign(&a.row(*src));
            }
            p
        };
        let out_perm = model
            .denoise(&permute(&x), 2, &DenoiserInput::Body(&permute(&body)))
            .unwrap();
        let expect = permute(&out);
        for (a, b) in out_perm.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // with positional encoding the same probe must fail
        let model_pe = DenoiserModel::new(tiny_config(), DenoiserKind::BodyConditioned, 5);
        let o1 = model_pe.denoise(&x, 2, &DenoiserInput::Body(&body)).unwrap();
        let o2 = model_pe
            .denoise(&permute(&x), 2, &DenoiserInput::Body(&permute(&body)))
            .unwrap();
        let gap: f64 = permute(&o1)
            .iter()
            .zip(o2.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(gap > 1e-6);
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let mut model = DenoiserModel::new(tiny_config(), DenoiserKind::BodyConditioned, 1);
        let sched = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        assert!(matches!(
            train_denoiser(&mut model, &[], &sched, &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn zero_lr_is_flat_and_seeded_runs_repeat() {
        let sched = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let dataset = vec![TrainSample {
            target: random_tensor(4, HAND_CHANNELS, 11),
            condition: OwnedCondition::Body(random_tensor(4, BODY_CHANNELS, 12)),
        }];
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 2,
            seed: 3,
            optimizer: OptimizerConfig {
                lr: 0.0,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
            cond_dropout: 0.0,
        };
        let mut m1 = DenoiserModel::new(tiny_config(), DenoiserKind::BodyConditioned, 1);
        let r1 = train_denoiser(&mut m1, &dataset, &sched, &cfg).unwrap();
        let mut m2 = DenoiserModel::new(tiny_config(), DenoiserKind::BodyConditioned, 1);
        let r2 = train_denoiser(&mut m2, &dataset, &sched, &cfg).unwrap();
        assert_eq!(r1.losses, r2.losses);
        // no learning at lr = 0
        assert!(
            (r1.final_ema_loss - r1.initial_ema_loss).abs() <= 0.02 * r1.initial_ema_loss,
            "flat trace expected: {} -> {}",
            r1.initial_ema_loss,
            r1.final_ema_loss
        );
    }
}
