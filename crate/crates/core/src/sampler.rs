//! Masked auto-regressive generation with reconstruction-guided sampling.
//!
//! Tokens are produced a few at a time in a random order. Before each step
//! the already-sampled tokens are blended with the reconstruction adapter's
//! estimate to form the MAE input; the stored samples themselves are never
//! altered, so the output is always the raw per-step samples.

use std::f64::consts::FRAC_PI_2;
use std::io::Write as _;
use std::path::Path;

use ltm3d_autograd::Matrix;
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{mae_forward, MaskPlan};
use crate::checkpoint::ModelBundle;
use crate::condition::{encode_condition, prefix_forward, Prompt};
use crate::config::GenerationConfig;
use crate::data::PointCloudShape;
use crate::diffusion::{token_ddpm_sample, SampleOptions};
use crate::error::{Error, Result};
use crate::recon::reconstruct;
use crate::tokenizer::{detokenize, TokenSequence};

/// Weight given to a sampled token, by its 1-based position in the
/// sampling order: `fusion_ratio` up to `fusion_step`, then 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendSchedule {
    pub fusion_step: usize,
    pub fusion_ratio: f64,
}

impl Default for BlendSchedule {
    fn default() -> Self {
        Self { fusion_step: 30, fusion_ratio: 0.1 }
    }
}

impl BlendSchedule {
    pub fn new(fusion_step: usize, fusion_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fusion_ratio) {
            return Err(Error::Config(format!("fusion ratio {fusion_ratio} is outside [0, 1]")));
        }
        Ok(Self { fusion_step, fusion_ratio })
    }

    /// No blending: every weight is 1.
    pub fn off() -> Self {
        Self { fusion_step: 0, fusion_ratio: 1.0 }
    }

    pub fn from_config(gen: &GenerationConfig) -> Result<Self> {
        Self::new(gen.fusion_step, gen.fusion_ratio)
    }

    pub fn alpha(&self, order_index: usize) -> f64 {
        if order_index <= self.fusion_step { self.fusion_ratio } else { 1.0 }
    }

    /// Whether any weight differs from 1.
    pub fn is_active(&self) -> bool {
        self.fusion_step > 0 && self.fusion_ratio != 1.0
    }
}

/// `(1 − α)·recon + α·sampled` on filled slots, where `order_index[j]` is
/// the 1-based sampling position of slot `j`. Unfilled slots carry the
/// reconstruction (they are masked downstream). The endpoints `α = 1` and
/// `α = 0` copy exactly.
pub fn blend_tokens(recon: &Matrix, sampled: &Matrix, filled: &[bool], order_index: &[usize], blend: &BlendSchedule) -> Result<Matrix> {
    let n = recon.nrows();
    if sampled.dim() != recon.dim() || filled.len() != n || order_index.len() != n {
        return Err(Error::Shape(format!(
            "recon {:?}, sampled {:?}, {} fill flags, {} order indices",
            recon.dim(),
            sampled.dim(),
            filled.len(),
            order_index.len()
        )));
    }
    let mut fused = recon.clone();
    for j in (0..n).filter(|&j| filled[j]) {
        if order_index[j] == 0 {
            return Err(Error::Sampling(format!("filled slot {j} has no sampling position")));
        }
        let alpha = blend.alpha(order_index[j]);
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Sampling(format!("blend weight {alpha} is outside [0, 1]")));
        }
        let mut row = fused.row_mut(j);
        if alpha == 1.0 {
            row.assign(&sampled.row(j));
        } else if alpha != 0.0 {
            row.zip_mut_with(&sampled.row(j), |r, &s| *r = (1.0 - alpha) * *r + alpha * s);
        }
    }
    Ok(fused)
}

/// Tokens produced at each of (at most) `steps` iterations, following the
/// cosine masking schedule: after step `k` about `n·cos(π/2·(k+1)/K)`
/// slots remain masked. Every entry is at least 1 and the sum is `n`.
pub fn tokens_per_step(n: usize, steps: usize) -> Result<Vec<usize>> {
    if n == 0 || steps == 0 {
        return Err(Error::Config(format!("cannot schedule {n} tokens over {steps} steps")));
    }
    let mut remaining = n;
    let mut out = Vec::with_capacity(steps.min(n));
    for k in 0..steps {
        if remaining == 0 {
            break;
        }
        let next = if k + 1 == steps {
            0
        } else {
            let target = (n as f64 * (FRAC_PI_2 * (k + 1) as f64 / steps as f64).cos()).floor() as usize;
            target.max(1).min(remaining - 1)
        };
        out.push(remaining - next);
        remaining = next;
    }
    Ok(out)
}

/// One iteration of a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Slots sampled at this step, in sampling order.
    pub positions: Vec<usize>,
    /// Already-sampled slots fed to the MAE, in sampling order.
    pub blended_slots: Vec<usize>,
    /// Blend weight applied to each entry of `blended_slots`.
    pub blend_weights: Vec<f64>,
    /// SHA-256 of the raw sampled tokens fed in, before blending.
    pub input_hash: String,
    /// Raw tokens sampled at `positions`.
    pub sampled: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub ordering: Vec<usize>,
    pub steps: Vec<TraceStep>,
}

impl GenerationTrace {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn hash_rows(tokens: &Matrix, slots: &[usize]) -> String {
    let mut h = Sha256::new();
    for &s in slots {
        h.update((s as u64).to_le_bytes());
        for v in tokens.row(s) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Generates a full token sequence for `prompt`.
pub fn mar_generate(bundle: &ModelBundle, prompt: &Prompt, gen: &GenerationConfig) -> Result<(TokenSequence, GenerationTrace)> {
    gen.validate()?;
    if matches!(prompt, Prompt::Null) {
        return Err(Error::Sampling("generation needs a class or image prompt".into()));
    }
    let blend = BlendSchedule::from_config(gen)?;
    let (model, store) = (&bundle.model, &bundle.params);
    let n = bundle.config.token_count();
    let d = bundle.config.token_dim();

    if gen.fusion_step > 0 && !bundle.state.recon.trained {
        return Err(Error::Sampling(format!(
            "fusion_step {} needs a trained reconstruction adapter; run recon training or set fusion_step to 0",
            gen.fusion_step
        )));
    }
    let recon = if blend.is_active() {
        reconstruct(&model.recon, store, prompt)?
    } else {
        Matrix::zeros((n, d))
    };

    let condition = encode_condition(&model.condition, store, prompt)?;
    let prefix = prefix_forward(&model.condition, store, &condition)?;
    let guided = gen.cfg_scale != 1.0;
    let null_prefix = if guided {
        Some(prefix_forward(&model.condition, store, &encode_condition(&model.condition, store, &Prompt::Null)?)?)
    } else {
        None
    };
    let opts = SampleOptions { steps: gen.diffusion_steps, temperature: gen.temperature, cfg_scale: gen.cfg_scale };

    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
    let mut ordering: Vec<usize> = (0..n).collect();
    ordering.shuffle(&mut rng);

    let mut sampled = Matrix::zeros((n, d));
    let mut filled = vec![false; n];
    let mut order_index = vec![0usize; n];
    let mut steps = Vec::new();
    let mut start = 0;
    for (step, count) in tokens_per_step(n, gen.total_steps)?.into_iter().enumerate() {
        let done = &ordering[..start];
        let targets = &ordering[start..start + count];
        let fused = blend_tokens(&recon, &sampled, &filled, &order_index, &blend)?;
        let plan = MaskPlan::with_mask(ordering.clone(), filled.iter().map(|f| !f).collect())?;
        let masked = plan.masked_slots();
        let rows: Vec<usize> = targets.iter().map(|t| masked.binary_search(t).expect("targets are unfilled")).collect();
        let z = mae_forward(&model.mae, store, &fused, &prefix, &plan)?.select(Axis(0), &rows);
        let z_null = match &null_prefix {
            Some(p) => Some(mae_forward(&model.mae, store, &fused, p, &plan)?.select(Axis(0), &rows)),
            None => None,
        };
        let x = token_ddpm_sample(&model.denoise, store, &z, z_null.as_ref(), d, &bundle.schedule, &opts, &mut rng)?;
        let input_hash = hash_rows(&sampled, done);
        for (i, &slot) in targets.iter().enumerate() {
            sampled.row_mut(slot).assign(&x.row(i));
            filled[slot] = true;
            order_index[slot] = start + i + 1;
        }
        steps.push(TraceStep {
            step,
            positions: targets.to_vec(),
            blended_slots: done.to_vec(),
            blend_weights: done.iter().map(|&s| blend.alpha(order_index[s])).collect(),
            input_hash,
            sampled: x.outer_iter().map(|r| r.to_vec()).collect(),
        });
        start += count;
    }
    if let Some(slot) = filled.iter().position(|f| !f) {
        return Err(Error::Sampling(format!("slot {slot} was never sampled")));
    }
    Ok((TokenSequence::new(sampled)?, GenerationTrace { ordering, steps }))
}

/// Turns generated tokens into points, clamped to the unit cube.
pub fn tokens_to_shape(tokens: &TokenSequence, bundle: &ModelBundle) -> Result<PointCloudShape> {
    let clamped = TokenSequence::new(tokens.tokens.mapv(|v| v.clamp(-1.0, 1.0)))?;
    detokenize(&clamped, &bundle.config.tokenizer)
}

/// [`mar_generate`] followed by [`tokens_to_shape`].
pub fn generate_shape(bundle: &ModelBundle, prompt: &Prompt, gen: &GenerationConfig) -> Result<(PointCloudShape, GenerationTrace)> {
    let (tokens, trace) = mar_generate(bundle, prompt, gen)?;
    Ok((tokens_to_shape(&tokens, bundle)?, trace))
}
