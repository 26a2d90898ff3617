//! Evaluation protocol: R-precision, FID, MM-Dist, Diversity and
//! MModality over learned 256-d features, each reported as
//! mean plus or minus twice the standard deviation over replicates.
//!
//! The feature extractor is deliberately minimal: a 2-layer
//! temporal-attention motion encoder and a matching condition encoder,
//! trained with a symmetric contrastive objective on matched pairs.
//! Numbers are comparable across runs of this repository only.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::denoisers::{TrainConfig, TrainReport, TEXT_EMBED_DIM};
use crate::error::{Error, Result};
use crate::motion_repr::{BODY_CHANNELS, HAND_CHANNELS};
use crate::nn::{
    positional_encoding, AdamW, Bound, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    ParamSet,
};

pub const FEATURE_DIM: usize = 256;
pub const EMBED_BLOCKS: usize = 2;
const CONTRASTIVE_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub latent_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            latent_dim: 128,
            heads: 4,
            ff_dim: 256,
        }
    }
}

#[derive(Debug, Clone)]
struct EncBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Encoder {
    input: Linear,
    text: Option<Linear>,
    blocks: Vec<EncBlock>,
    out: Linear,
}

fn build_encoder(
    params: &mut ParamSet,
    prefix: &str,
    in_dim: usize,
    with_text: bool,
    cfg: &EmbedderConfig,
    rng: &mut ChaCha8Rng,
) -> Encoder {
    let d = cfg.latent_dim;
    let input = Linear::new(params, &format!("{prefix}.input"), in_dim, d, rng);
    let text = with_text
        .then(|| Linear::new(params, &format!("{prefix}.text"), TEXT_EMBED_DIM, d, rng));
    let blocks = (0..EMBED_BLOCKS)
        .map(|i| EncBlock {
            ln1: LayerNorm::new(params, &format!("{prefix}.b{i}.ln1"), d),
            attn: MultiHeadAttention::new(params, &format!("{prefix}.b{i}.attn"), d, cfg.heads, rng),
            ln2: LayerNorm::new(params, &format!("{prefix}.b{i}.ln2"), d),
            ff: FeedForward::new(params, &format!("{prefix}.b{i}.ff"), d, cfg.ff_dim, rng),
        })
        .collect();
    let out = Linear::new(params, &format!("{prefix}.out"), d, FEATURE_DIM, rng);
    Encoder {
        input,
        text,
        blocks,
        out,
    }
}

impl Encoder {
    /// Temporal self-attention over the embedded frames (with an optional
    /// prepended text token), mean-pooled, projected and unit-normalized.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        frames: &Array2<f64>,
        text_token: Option<&[f64]>,
    ) -> Var {
        let t = frames.nrows();
        let x = tape.leaf(frames.clone());
        let mut h = self.input.forward(tape, bound, x);
        if let Some(token) = text_token {
            let proj = self.text.as_ref().expect("text projection");
            let tok = tape.leaf(Array2::from_shape_vec((1, token.len()), token.to_vec()).unwrap());
            let tok = proj.forward(tape, bound, tok);
            h = tape.concat_rows(&[tok, h]);
        }
        let rows = tape.value(h).nrows();
        let pe = tape.leaf(positional_encoding(rows, tape.value(h).ncols()));
        h = tape.add(h, pe);
        let _ = t;
        for block in &self.blocks {
            let hn = block.ln1.forward(tape, bound, h);
            let attn = block.attn.forward(tape, bound, hn, hn, None);
            h = tape.add(h, attn);
            let hn = block.ln2.forward(tape, bound, h);
            let ff = block.ff.forward(tape, bound, hn);
            h = tape.add(h, ff);
        }
        let pooled = tape.mean_rows(h);
        let feat = self.out.forward(tape, bound, pooled);
        tape.l2_normalize_rows(feat, 1e-12)
    }
}

/// Motion and condition feature encoders sharing one parameter set.
#[derive(Debug, Clone)]
pub struct FeatureEmbedders {
    pub config: EmbedderConfig,
    pub params: ParamSet,
    motion: Encoder,
    condition: Encoder,
}

impl FeatureEmbedders {
    pub fn new(config: EmbedderConfig, seed: u64) -> FeatureEmbedders {
        assert_eq!(config.latent_dim % config.heads, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let motion = build_encoder(&mut params, "motion", HAND_CHANNELS, false, &config, &mut rng);
        let condition =
            build_encoder(&mut params, "cond", BODY_CHANNELS, true, &config, &mut rng);
        FeatureEmbedders {
            config,
            params,
            motion,
            condition,
        }
    }

    pub fn from_params(config: EmbedderConfig, params: ParamSet) -> FeatureEmbedders {
        let mut e = FeatureEmbedders::new(config, 0);
        assert_eq!(e.params.names, params.names, "parameter layout mismatch");
        e.params = params;
        e
    }

    pub fn embed_motion(&self, hands: &Array2<f64>) -> Result<Vec<f64>> {
        if hands.ncols() != HAND_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "motion encoder expects {HAND_CHANNELS} channels, got {}",
                hands.ncols()
            )));
        }
        let mut tape = Tape::new();
        let bound = Bound::bind(&self.params, &mut tape);
        let v = self.motion.forward(&mut tape, &bound, hands, None);
        Ok(tape.value(v).row(0).to_vec())
    }

    pub fn embed_condition(&self, body: &Array2<f64>, text_token: &[f64]) -> Result<Vec<f64>> {
        if body.ncols() != BODY_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "condition encoder expects {BODY_CHANNELS} channels, got {}",
                body.ncols()
            )));
        }
        if text_token.len() != TEXT_EMBED_DIM {
            return Err(Error::ShapeMismatch(format!(
                "text token dim {} != {TEXT_EMBED_DIM}",
                text_token.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = Bound::bind(&self.params, &mut tape);
        let v = self
            .condition
            .forward(&mut tape, &bound, body, Some(text_token));
        Ok(tape.value(v).row(0).to_vec())
    }
}

/// One matched (hand motion, condition) training pair.
pub struct EmbedPair {
    pub hands: Array2<f64>,
    pub body: Array2<f64>,
    pub text_token: Vec<f64>,
}

/// Mean of the main diagonal of a square tape value.
fn mean_diag(tape: &mut Tape, x: Var, n: usize) -> Var {
    let eye = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let masked = tape.mul_const(x, &eye);
    let col_means = tape.mean_rows(masked);
    let col = tape.transpose(col_means);
    let scalar = tape.mean_rows(col);
    tape.scale(scalar, n as f64)
}

/// Symmetric contrastive training: matched pairs along the diagonal of the
/// cosine-similarity matrix are pushed up in both softmax directions.
pub fn train_embedders(
    config: EmbedderConfig,
    dataset: &[EmbedPair],
    cfg: &TrainConfig,
) -> Result<(FeatureEmbedders, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut embedders = FeatureEmbedders::new(config, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(cfg.optimizer, &embedders.params);
    let batch = cfg.batch_size.min(dataset.len()).max(2);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = Bound::bind(&embedders.params, &mut tape);
        let idx: Vec<usize> = rand::seq::index::sample(&mut rng, dataset.len(), batch).into_vec();
        let m_feats: Vec<Var> = idx
            .iter()
            .map(|&i| {
                embedders
                    .motion
                    .forward(&mut tape, &bound, &dataset[i].hands, None)
            })
            .collect();
        let c_feats: Vec<Var> = idx
            .iter()
            .map(|&i| {
                embedders.condition.forward(
                    &mut tape,
                    &bound,
                    &dataset[i].body,
                    Some(&dataset[i].text_token),
                )
            })
            .collect();
        let m = tape.concat_rows(&m_feats);
        let c = tape.concat_rows(&c_feats);
        let ct = tape.transpose(c);
        let sims = tape.matmul(m, ct);
        let logits = tape.scale(sims, 1.0 / CONTRASTIVE_TEMPERATURE);
        let lp_mc = tape.log_softmax_rows(logits);
        let logits_t = tape.transpose(logits);
        let lp_cm = tape.log_softmax_rows(logits_t);
        let d1 = mean_diag(&mut tape, lp_mc, batch);
        let d2 = mean_diag(&mut tape, lp_cm, batch);
        let both = tape.add(d1, d2);
        let loss = tape.scale(both, -0.5);
        let loss_val = tape.value(loss)[(0, 0)];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: loss_val,
            });
        }
        losses.push(loss_val);
        let grads = tape.backward(loss);
        let mut grad_vec = crate::nn::zero_grads(&embedders.params);
        bound.accumulate(&grads, &mut grad_vec);
        opt.step(&mut embedders.params, &grad_vec);
    }
    let report = TrainReport::from_trace(losses);
    Ok((embedders, report))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of motions whose true condition ranks in the top `k` of a
/// `pool_size`-way retrieval against random distractor conditions.
pub fn r_precision(
    motion_feats: &[Vec<f64>],
    cond_feats: &[Vec<f64>],
    pool_size: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if motion_feats.is_empty() {
        return Err(Error::EmptyInput("retrieval pairs".into()));
    }
    if motion_feats.len() != cond_feats.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} motions vs {} conditions",
            motion_feats.len(),
            cond_feats.len()
        )));
    }
    let n = motion_feats.len();
    if pool_size == 0 || pool_size > n {
        return Err(Error::PoolTooLarge { pool: pool_size, available: n });
    }
    let mut hits = 0usize;
    for i in 0..n {
        let true_sim = cosine(&motion_feats[i], &cond_feats[i]);
        let mut rank = 0usize;
        let mut drawn = 0usize;
        while drawn < pool_size - 1 {
            let j = rng.gen_range(0..n);
            if j == i {
                continue;
            }
            drawn += 1;
            if cosine(&motion_feats[i], &cond_feats[j]) > true_sim {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn mean_and_cov(feats: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.nrows();
    let d = feats.ncols();
    let mean = feats.mean_axis(Axis(0)).unwrap();
    let mut cov = DMatrix::zeros(d, d);
    for row in feats.rows() {
        let c: Vec<f64> = row.iter().zip(mean.iter()).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    (DVector::from_iterator(d, mean.iter().cloned()), cov)
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(sym, 1e-12, 10_000)
        .ok_or(Error::NonConvergentSqrt)?;
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussian fits:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn fid(real_feats: &Array2<f64>, gen_feats: &Array2<f64>) -> Result<f64> {
    if real_feats.ncols() != gen_feats.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            real_feats.ncols(),
            gen_feats.ncols()
        )));
    }
    for set in [real_feats, gen_feats] {
        if set.nrows() < 2 {
            return Err(Error::TooFewSamples {
                got: set.nrows(),
                need: 2,
            });
        }
    }
    let (mu1, s1) = mean_and_cov(real_feats);
    let (mu2, s2) = mean_and_cov(gen_feats);
    let s1_half = symmetric_sqrt(&s1)?;
    let inner = &s1_half * &s2 * &s1_half;
    let cross = symmetric_sqrt(&inner)?;
    let diff = &mu1 - &mu2;
    let val = diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if !val.is_finite() {
        return Err(Error::NonConvergentSqrt);
    }
    Ok(val.max(0.0))
}

/// Mean Euclidean distance between matched motion/condition features.
pub fn mm_dist(motion_feats: &[Vec<f64>], cond_feats: &[Vec<f64>]) -> Result<f64> {
    if motion_feats.is_empty() {
        return Err(Error::EmptyInput("matched pairs".into()));
    }
    if motion_feats.len() != cond_feats.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} motions vs {} conditions",
            motion_feats.len(),
            cond_feats.len()
        )));
    }
    let total: f64 = motion_feats
        .iter()
        .zip(cond_feats)
        .map(|(m, c)| euclid(m, c))
        .sum();
    Ok(total / motion_feats.len() as f64)
}

/// Mean Euclidean distance over `sample_pairs` random distinct-index pairs.
pub fn diversity(
    features: &[Vec<f64>],
    sample_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::TooFewSamples {
            got: features.len(),
            need: 2,
        });
    }
    if sample_pairs == 0 {
        return Err(Error::TooFewSamples {
            got: 0,
            need: 1,
        });
    }
    let n = features.len();
    let mut acc = 0.0;
    for _ in 0..sample_pairs {
        let i = rng.gen_range(0..n);
        let j = loop {
            let j = rng.gen_range(0..n);
            if j != i {
                break j;
            }
        };
        acc += euclid(&features[i], &features[j]);
    }
    Ok(acc / sample_pairs as f64)
}

/// Mean pairwise feature distance among `repeats` generations per
/// condition, averaged over conditions. The generator receives
/// (condition index, repeat index) and returns a feature vector.
pub fn mmodality<F>(mut generator: F, n_conditions: usize, repeats: usize) -> Result<f64>
where
    F: FnMut(usize, usize) -> Result<Vec<f64>>,
{
    if n_conditions == 0 {
        return Err(Error::EmptyInput("conditions".into()));
    }
    if repeats < 2 {
        return Err(Error::TooFewSamples {
            got: repeats,
            need: 2,
        });
    }
    let mut per_condition = 0.0;
    for c in 0..n_conditions {
        let feats: Vec<Vec<f64>> = (0..repeats)
            .map(|r| generator(c, r))
            .collect::<Result<_>>()?;
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..repeats {
            for j in (i + 1)..repeats {
                acc += euclid(&feats[i], &feats[j]);
                pairs += 1;
            }
        }
        per_condition += acc / pairs as f64;
    }
    Ok(per_condition / n_conditions as f64)
}

/// One metric summarized over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Twice the sample standard deviation.
    pub half_width: f64,
    pub replicates: usize,
}

pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.len() < 2 {
        return Err(Error::ReplicatesTooFew(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(MetricSummary {
        mean,
        half_width: 2.0 * var.sqrt(),
        replicates: values.len(),
    })
}

/// Metric values from a single seeded replicate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub r_precision_top1: f64,
    pub r_precision_top2: f64,
    pub r_precision_top3: f64,
    pub fid: f64,
    pub mm_dist: f64,
    pub diversity: f64,
    pub mmodality: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_precision_top1: MetricSummary,
    pub r_precision_top2: MetricSummary,
    pub r_precision_top3: MetricSummary,
    pub fid: MetricSummary,
    pub mm_dist: MetricSummary,
    pub diversity: MetricSummary,
    pub mmodality: MetricSummary,
}

impl MetricsReport {
    pub fn from_replicates(runs: &[ReplicateMetrics]) -> Result<MetricsReport> {
        let pick = |f: fn(&ReplicateMetrics) -> f64| -> Result<MetricSummary> {
            summarize(&runs.iter().map(f).collect::<Vec<_>>())
        };
        Ok(MetricsReport {
            r_precision_top1: pick(|r| r.r_precision_top1)?,
            r_precision_top2: pick(|r| r.r_precision_top2)?,
            r_precision_top3: pick(|r| r.r_precision_top3)?,
            fid: pick(|r| r.fid)?,
            mm_dist: pick(|r| r.mm_dist)?,
            diversity: pick(|r| r.diversity)?,
            mmodality: pick(|r| r.mmodality)?,
        })
    }

    pub fn rows(&self) -> Vec<(&'static str, MetricSummary)> {
        vec![
            ("r_precision_top1", self.r_precision_top1),
            ("r_precision_top2", self.r_precision_top2),
            ("r_precision_top3", self.r_precision_top3),
            ("fid", self.fid),
            ("mm_dist", self.mm_dist),
            ("diversity", self.diversity),
            ("mmodality", self.mmodality),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerConfig;
    use rand_distr::StandardNormal;

    fn tiny_config() -> EmbedderConfig {
        EmbedderConfig {
            latent_dim: 16,
            heads: 2,
            ff_dim: 32,
        }
    }

    fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= n;
        }
        v
    }

    /// Pairs whose hand motion is a deterministic function of the text
    /// token, so a contrastive objective has signal to latch onto.
    fn toy_pairs(n: usize, frames: usize, seed: u64) -> Vec<EmbedPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let token = random_unit(TEXT_EMBED_DIM, &mut rng);
                let hands = Array2::from_shape_fn((frames, HAND_CHANNELS), |(f, c)| {
                    token[c % TEXT_EMBED_DIM] * (1.0 + 0.1 * f as f64)
                });
                let body = Array2::from_shape_fn((frames, BODY_CHANNELS), |(f, c)| {
                    token[c % TEXT_EMBED_DIM] + 0.01 * f as f64
                });
                EmbedPair {
                    hands,
                    body,
                    text_token: token,
                }
            })
            .collect()
    }

    fn quick_train_cfg(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            seed,
            optimizer: OptimizerConfig {
                lr: 3e-3,
                ..Default::default()
            },
            cond_dropout: 0.0,
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = FeatureEmbedders::new(tiny_config(), 3);
        let pairs = toy_pairs(1, 5, 0);
        let m = e.embed_motion(&pairs[0].hands).unwrap();
        let c = e
            .embed_condition(&pairs[0].body, &pairs[0].text_token)
            .unwrap();
        for f in [&m, &c] {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(f.len(), FEATURE_DIM);
        }
    }

    #[test]
    fn contrastive_training_separates_matched_pairs() {
        let train = toy_pairs(24, 4, 1);
        let held_out = toy_pairs(16, 4, 2);
        let (e, report) =
            train_embedders(tiny_config(), &train, &quick_train_cfg(600, 7)).unwrap();
        assert!(report.final_ema_loss < report.initial_ema_loss);

        let m: Vec<Vec<f64>> = held_out
            .iter()
            .map(|p| e.embed_motion(&p.hands).unwrap())
            .collect();
        let c: Vec<Vec<f64>> = held_out
            .iter()
            .map(|p| e.embed_condition(&p.body, &p.text_token).unwrap())
            .collect();
        let n = held_out.len();
        let mut matched = 0.0;
        let mut mismatched = 0.0;
        let mut mis_count = 0usize;
        for i in 0..n {
            matched += cosine(&m[i], &c[i]);
            for j in 0..n {
                if j != i {
                    mismatched += cosine(&m[i], &c[j]);
                    mis_count += 1;
                }
            }
        }
        let gap = matched / n as f64 - mismatched / mis_count as f64;
        assert!(gap > 0.2, "matched/mismatched cosine gap {gap}");
    }

    #[test]
    fn embedder_training_is_deterministic() {
        let pairs = toy_pairs(6, 3, 5);
        let cfg = quick_train_cfg(5, 11);
        let (a, _) = train_embedders(tiny_config(), &pairs, &cfg).unwrap();
        let (b, _) = train_embedders(tiny_config(), &pairs, &cfg).unwrap();
        assert_eq!(a.params.values, b.params.values);
        assert!(matches!(
            train_embedders(tiny_config(), &[], &cfg),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn r_precision_pool_of_one_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Vec<Vec<f64>> = (0..10).map(|_| random_unit(8, &mut rng)).collect();
        let c: Vec<Vec<f64>> = (0..10).map(|_| random_unit(8, &mut rng)).collect();
        for k in 1..=3 {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            assert_eq!(r_precision(&m, &c, 1, k, &mut r).unwrap(), 1.0);
        }
    }

    #[test]
    fn r_precision_random_features_match_binomial_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let m: Vec<Vec<f64>> = (0..n).map(|_| random_unit(32, &mut rng)).collect();
        let c: Vec<Vec<f64>> = (0..n).map(|_| random_unit(32, &mut rng)).collect();
        let pool = 8;
        let mut prev = 0.0;
        for k in 1..=3usize {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let p = r_precision(&m, &c, pool, k, &mut r).unwrap();
            let null = k as f64 / pool as f64;
            let sigma = (null * (1.0 - null) / n as f64).sqrt();
            assert!((p - null).abs() < 3.0 * sigma, "k={k}: {p} vs null {null}");
            assert!(p >= prev, "top-k must be monotone in k");
            prev = p;
        }
    }

    #[test]
    fn r_precision_pool_too_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Vec<Vec<f64>> = (0..4).map(|_| random_unit(8, &mut rng)).collect();
        assert!(matches!(
            r_precision(&m, &m.clone(), 5, 1, &mut rng),
            Err(Error::PoolTooLarge { pool: 5, available: 4 })
        ));
    }

    #[test]
    fn fid_oracles() {
        // identical sets
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((64, 4), |_| rng.sample::<f64, _>(StandardNormal));
        assert!(fid(&a, &a).unwrap() < 1e-3);
        // 1-d sets with sample mean 0/1 and sample variance 1:
        // (0-1)^2 + (1 + 1 - 2) = 1
        let real = Array2::from_shape_vec((3, 1), vec![-1.0, 0.0, 1.0]).unwrap();
        let genr = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        assert!((fid(&real, &genr).unwrap() - 1.0).abs() < 1e-9);
        // symmetry
        let b = Array2::from_shape_fn((64, 4), |_| rng.sample::<f64, _>(StandardNormal) + 0.3);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
        // monotone under growing mean offset
        let mut last = fid(&a, &a).unwrap();
        for delta in [0.1, 0.5, 1.0] {
            let shifted = &a + delta;
            let f = fid(&a, &shifted).unwrap();
            assert!(f > last, "offset {delta}: {f} <= {last}");
            last = f;
        }
        // too few samples
        let one = Array2::zeros((1, 4));
        assert!(matches!(fid(&one, &a), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn mm_dist_oracles() {
        let m = vec![vec![1.0, 0.0]];
        assert_eq!(mm_dist(&m, &m.clone()).unwrap(), 0.0);
        // unit vectors at 60 degrees: chord length 2 sin(30) = 1
        let c = vec![vec![0.5, 3f64.sqrt() / 2.0]];
        assert!((mm_dist(&m, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(mm_dist(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn diversity_oracles() {
        let same = vec![vec![1.0, 2.0]; 8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(diversity(&same, 100, &mut rng).unwrap(), 0.0);

        // two clusters at distance d: brute-force mean over distinct pairs
        let d = 3.0;
        let mut feats = Vec::new();
        for i in 0..20 {
            feats.push(vec![if i % 2 == 0 { 0.0 } else { d }]);
        }
        let n = feats.len();
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += euclid(&feats[i], &feats[j]);
                    count += 1;
                }
            }
        }
        let exact = acc / count as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampled = diversity(&feats, 200_000, &mut rng).unwrap();
        assert!((sampled - exact).abs() < 0.02 * exact);

        // homogeneity: same seed, doubled features -> doubled diversity
        let doubled: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|x| 2.0 * x).collect()).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let base = diversity(&feats, 500, &mut r1).unwrap();
        let twice = diversity(&doubled, 500, &mut r2).unwrap();
        assert!((twice - 2.0 * base).abs() < 1e-12);

        assert!(matches!(
            diversity(&feats[..1], 10, &mut rng),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn mmodality_oracles() {
        // deterministic generator -> 0
        let v = mmodality(|_, _| Ok(vec![1.0, 2.0, 3.0]), 5, 4).unwrap();
        assert_eq!(v, 0.0);
        // i.i.d. standard normal 2-d features: E||X−Y|| = sqrt(pi)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = mmodality(
            |_, _| {
                Ok(vec![
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ])
            },
            300,
            10,
        )
        .unwrap();
        let expected = std::f64::consts::PI.sqrt();
        assert!((v - expected).abs() < 0.02 * expected, "{v} vs {expected}");
        // error cases
        assert!(matches!(
            mmodality(|_, _| Ok(vec![0.0]), 5, 1),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(matches!(
            mmodality(|_, _| Ok(vec![0.0]), 0, 4),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn summary_oracles() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!((s.half_width - 2.0).abs() < 1e-12);
        assert_eq!(s.replicates, 3);
        let perm = summarize(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(s, perm);
        let flat = summarize(&[0.5, 0.5]).unwrap();
        assert_eq!(flat.half_width, 0.0);
        assert!(matches!(
            summarize(&[1.0]),
            Err(Error::ReplicatesTooFew(1))
        ));
    }
}
