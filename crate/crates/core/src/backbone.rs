//! Masked autoencoder over shape tokens.
//!
//! The encoder sees the prefix tokens followed by the visible tokens; the
//! decoder sees the full slot sequence with a learned mask token at every
//! masked slot and emits one condition vector `z` per masked slot.

use ltm3d_autograd::{Init, Matrix, ParamId, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::MaeConfig;
use crate::error::{Error, Result};
use crate::nn::{blocks, Block, LayerNorm, Linear, ParamBuilder};

/// Number of masked slots for a ratio: `⌈ratio·n⌉`, clamped to `[1, n]`.
/// The small offset keeps products such as `0.7 · 10` from rounding up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// A random generation order and the slots masked under it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ordering: Vec<usize>,
    pub ratio: f64,
    pub masked: Vec<bool>,
}

impl MaskPlan {
    /// Masks the last `⌈ratio·n⌉` slots of `ordering`.
    pub fn new(ordering: Vec<usize>, ratio: f64) -> Result<Self> {
        let n = ordering.len();
        check_permutation(&ordering)?;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Spec(format!("mask ratio {ratio} outside (0, 1]")));
        }
        let count = masked_count(n, ratio);
        let mut masked = vec![false; n];
        for &slot in &ordering[n - count..] {
            masked[slot] = true;
        }
        Ok(Self { ordering, ratio, masked })
    }

    /// A plan with an explicit mask, as used during generation.
    pub fn with_mask(ordering: Vec<usize>, masked: Vec<bool>) -> Result<Self> {
        check_permutation(&ordering)?;
        if masked.len() != ordering.len() {
            return Err(Error::Shape(format!("mask has {} slots, ordering {}", masked.len(), ordering.len())));
        }
        let ratio = masked.iter().filter(|&&m| m).count() as f64 / masked.len() as f64;
        Ok(Self { ordering, ratio, masked })
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn masked_slots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_slots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.masked[i]).collect()
    }
}

fn check_permutation(ordering: &[usize]) -> Result<()> {
    let mut seen = vec![false; ordering.len()];
    for &slot in ordering {
        if slot >= ordering.len() || std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Spec("ordering is not a permutation of the slots".into()));
        }
    }
    Ok(())
}

/// Uniform random ordering with a mask ratio drawn from `U[min, max]`.
pub fn sample_mask_plan_in<R: Rng + ?Sized>(n: usize, min: f64, max: f64, rng: &mut R) -> Result<MaskPlan> {
    if n < 2 {
        return Err(Error::Spec(format!("mask plans need at least 2 slots, got {n}")));
    }
    let mut ordering: Vec<usize> = (0..n).collect();
    ordering.shuffle(rng);
    let ratio = if min == max { min } else { rng.random_range(min..=max) };
    MaskPlan::new(ordering, ratio)
}

/// Training-time plan with the ratio drawn from `U[0.7, 1.0]`.
pub fn sample_mask_plan<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<MaskPlan> {
    sample_mask_plan_in(n, 0.7, 1.0, rng)
}

#[derive(Debug, Clone)]
pub struct Mae {
    pub prefix_len: usize,
    pub tokens: usize,
    pub width: usize,
    pub token_embed: Linear,
    pub enc_pos: ParamId,
    pub encoder: Vec<Block>,
    pub enc_norm: LayerNorm,
    pub dec_embed: Linear,
    pub mask_token: ParamId,
    pub dec_pos: ParamId,
    pub decoder: Vec<Block>,
    pub dec_norm: LayerNorm,
    /// Added to each output so the denoiser also sees its slot.
    pub out_pos: ParamId,
}

impl Mae {
    /// Parameters live under `mae/`.
    pub fn new(b: &mut ParamBuilder<'_>, config: &MaeConfig, prefix_len: usize, tokens: usize, token_dim: usize) -> Self {
        let mut b = b.sub("mae");
        let (w, seq) = (config.width, prefix_len + tokens);
        Self {
            prefix_len,
            tokens,
            width: w,
            token_embed: Linear::new(&mut b.sub("token_embed"), token_dim, w, true),
            enc_pos: b.param("enc_pos", seq, w, Init::Normal(0.02)),
            encoder: blocks(&mut b.sub("enc"), config.depth, w, config.heads, config.mlp_ratio),
            enc_norm: LayerNorm::new(&mut b.sub("enc_norm"), w),
            dec_embed: Linear::new(&mut b.sub("dec_embed"), w, w, true),
            mask_token: b.param("mask_token", 1, w, Init::Normal(0.02)),
            dec_pos: b.param("dec_pos", seq, w, Init::Normal(0.02)),
            decoder: blocks(&mut b.sub("dec"), config.depth, w, config.heads, config.mlp_ratio),
            dec_norm: LayerNorm::new(&mut b.sub("dec_norm"), w),
            out_pos: b.param("out_pos", tokens, w, Init::Normal(0.02)),
        }
    }

    /// Condition vectors for the masked slots of `plan`, in ascending slot
    /// order. Rows of `tokens` at masked slots are never read.
    pub fn forward<'t, 'p>(&self, prefix: Var<'t, 'p>, tokens: Var<'t, 'p>, plan: &MaskPlan) -> Result<Var<'t, 'p>> {
        let tape = prefix.tape();
        let (k, n) = (self.prefix_len, self.tokens);
        if prefix.shape() != (k, self.width) {
            return Err(Error::Shape(format!("prefix is {:?}, expected ({k}, {})", prefix.shape(), self.width)));
        }
        if tokens.rows() != n || plan.len() != n {
            return Err(Error::Shape(format!("{} tokens and a {}-slot plan for a {n}-slot model", tokens.rows(), plan.len())));
        }
        let visible = plan.visible_slots();
        let masked = plan.masked_slots();

        let mut enc_rows: Vec<usize> = (0..k).collect();
        enc_rows.extend(visible.iter().map(|&s| k + s));
        let mut x = if visible.is_empty() {
            prefix
        } else {
            tape.concat_rows(&[prefix, self.token_embed.forward(tokens.select_rows(&visible))])
        };
        x = x.add(tape.param(self.enc_pos).select_rows(&enc_rows));
        for block in &self.encoder {
            x = block.forward(x);
        }
        let encoded = self.dec_embed.forward(self.enc_norm.forward(x));

        // Scatter encoder outputs back to their slots; masked slots point at
        // the mask token appended after the encoded rows.
        let mask_row = k + visible.len();
        let mut gather: Vec<usize> = (0..k).collect();
        let mut next_visible = k;
        for slot in 0..n {
            if plan.masked[slot] {
                gather.push(mask_row);
            } else {
                gather.push(next_visible);
                next_visible += 1;
            }
        }
        let pool = tape.concat_rows(&[encoded, tape.param(self.mask_token)]);
        let mut h = pool.select_rows(&gather).add(tape.param(self.dec_pos));
        for block in &self.decoder {
            h = block.forward(h);
        }
        let h = self.dec_norm.forward(h);
        let out_rows: Vec<usize> = masked.iter().map(|&s| k + s).collect();
        Ok(h.select_rows(&out_rows).add(tape.param(self.out_pos).select_rows(&masked)))
    }
}

/// Evaluates [`Mae::forward`] outside of training.
pub fn mae_forward(mae: &Mae, store: &ParamStore, tokens: &Matrix, prefix: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
    let tape = Tape::new(store);
    Ok(mae.forward(tape.constant(prefix.clone()), tape.constant(tokens.clone()), plan)?.to_matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_params;
    use ltm3d_autograd::check::{check_input, check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(prefix: usize, n: usize, d: usize) -> (ParamStore, Mae) {
        let cfg = MaeConfig { width: 8, depth: 1, heads: 2, mlp_ratio: 2 };
        let mut store = ParamStore::new();
        let mae = build_params(&mut store, 3, |b| Mae::new(b, &cfg, prefix, n, d)).unwrap();
        (store, mae)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        Init::Normal(1.0).build(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn ceiling_arithmetic() {
        let plan = MaskPlan::new((0..10).collect(), 0.7).unwrap();
        assert_eq!(plan.masked_slots(), vec![3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(MaskPlan::new((0..10).rev().collect(), 1.0).unwrap().masked_slots().len(), 10);
        assert_eq!(masked_count(10, 0.71), 8);
        assert_eq!(masked_count(10, 0.01), 1);
        assert!(MaskPlan::new(vec![0, 0, 1], 0.5).is_err());
        assert!(sample_mask_plan(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sampled_ratio_mean_is_near_the_uniform_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let total: f64 = (0..10_000).map(|_| sample_mask_plan(16, &mut rng).unwrap().ratio).sum();
        let mean = total / 10_000.0;
        assert!((0.84..=0.86).contains(&mean), "mean ratio {mean}");
    }

    #[test]
    fn output_has_one_row_per_masked_slot() {
        let (store, mae) = tiny(2, 6, 3);
        let plan = MaskPlan::new(vec![5, 1, 0, 3, 2, 4], 0.5).unwrap();
        let z = mae_forward(&mae, &store, &random(6, 3, 1), &random(2, 8, 2), &plan).unwrap();
        assert_eq!(z.dim(), (3, 8));
        assert!(mae_forward(&mae, &store, &random(5, 3, 1), &random(2, 8, 2), &plan).is_err());
    }

    #[test]
    fn masked_inputs_are_never_read() {
        let (store, mae) = tiny(2, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prefix = random(2, 8, 5);
        for trial in 0..20 {
            let plan = sample_mask_plan(8, &mut rng).unwrap();
            let tokens = random(8, 3, 100 + trial);
            let mut scrambled = tokens.clone();
            for slot in plan.masked_slots() {
                scrambled.row_mut(slot).fill(1e6 * (trial as f64 + 1.0));
            }
            let a = mae_forward(&mae, &store, &tokens, &prefix, &plan).unwrap();
            let b = mae_forward(&mae, &store, &scrambled, &prefix, &plan).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fully_masked_output_ignores_all_tokens() {
        let (store, mae) = tiny(2, 6, 3);
        let plan = MaskPlan::new((0..6).collect(), 1.0).unwrap();
        let prefix = random(2, 8, 6);
        let a = mae_forward(&mae, &store, &random(6, 3, 7), &prefix, &plan).unwrap();
        let b = mae_forward(&mae, &store, &Matrix::zeros((6, 3)), &prefix, &plan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orderings_with_the_same_visible_set_agree() {
        let (store, mae) = tiny(2, 8, 3);
        let (tokens, prefix) = (random(8, 3, 8), random(2, 8, 9));
        // Both orderings leave {0, 2, 5} visible.
        let a = MaskPlan::new(vec![0, 2, 5, 1, 3, 4, 6, 7], 5.0 / 8.0).unwrap();
        let b = MaskPlan::new(vec![5, 0, 2, 7, 6, 4, 3, 1], 5.0 / 8.0).unwrap();
        assert_eq!(a.masked, b.masked);
        assert_eq!(mae_forward(&mae, &store, &tokens, &prefix, &a).unwrap(), mae_forward(&mae, &store, &tokens, &prefix, &b).unwrap());
    }

    #[test]
    fn prefix_changes_the_output() {
        let (store, mae) = tiny(2, 6, 3);
        let plan = MaskPlan::new(vec![3, 1, 0, 5, 2, 4], 0.7).unwrap();
        let tokens = random(6, 3, 10);
        let a = mae_forward(&mae, &store, &tokens, &random(2, 8, 11), &plan).unwrap();
        let b = mae_forward(&mae, &store, &tokens, &Matrix::zeros((2, 8)), &plan).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, mae) = tiny(2, 5, 3);
        let plan = MaskPlan::new(vec![4, 0, 2, 1, 3], 0.6).unwrap();
        let (tokens, prefix) = (random(5, 3, 12), random(2, 8, 13));
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(&store, &ids, |t| {
            mae.forward(t.constant(prefix.clone()), t.constant(tokens.clone()), &plan).unwrap().square().mean()
        });
        assert!(report.max_error() < 1e-3, "{:?}", report.worst());
        let report = check_input(&store, &prefix, |t, p| mae.forward(p, t.constant(tokens.clone()), &plan).unwrap().square().mean());
        assert!(report.max_error() < 1e-3, "{:?}", report.worst());
        let report = check_input(&store, &tokens, |t, x| mae.forward(t.constant(prefix.clone()), x, &plan).unwrap().square().mean());
        assert!(report.max_error() < 1e-3, "{:?}", report.worst());
    }
}
