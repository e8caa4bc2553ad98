//! Reconstruction adapter: maps condition tokens straight to estimated shape
//! tokens, `X̂ = Head(SelfAttn(CrossAttn(Q^S, C') + Q^S))`, trained with MSE
//! and used only to guide sampling.

use ltm3d_autograd::{Init, Matrix, ParamId, ParamStore, Tape, Var};

use crate::condition::{ConditionEncoder, Prompt};
use crate::config::{ConditionConfig, ReconConfig};
use crate::error::{Error, Result};
use crate::nn::{blocks, Attention, Block, Linear, ParamBuilder};

/// Namespace of every reconstruction parameter.
pub const RECON_PREFIX: &str = "recon/";
/// Namespace of the adapter's own (frozen) condition encoder.
pub const RECON_ENCODER_PREFIX: &str = "recon/enc/";

/// Whether a parameter is updated by reconstruction training.
pub fn is_recon_trainable(name: &str) -> bool {
    name.starts_with(RECON_PREFIX) && !name.starts_with(RECON_ENCODER_PREFIX)
}

#[derive(Debug, Clone)]
pub struct ReconAdapter {
    pub queries: ParamId,
    pub encoder: ConditionEncoder,
    pub project: Linear,
    pub cross: Attention,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

impl ReconAdapter {
    pub fn new(b: &mut ParamBuilder<'_>, config: &ReconConfig, condition: &ConditionConfig, tokens: usize, token_dim: usize) -> Self {
        let mut b = b.sub("recon");
        let d = config.dim;
        Self {
            queries: b.param("queries", tokens, d, Init::Normal(0.02)),
            encoder: ConditionEncoder::new(&mut b.sub("enc"), condition),
            project: Linear::new(&mut b.sub("proj"), condition.dim, d, true),
            cross: Attention::new(&mut b.sub("cross"), d, d, config.heads),
            blocks: blocks(&mut b.sub("blocks"), config.depth, d, config.heads, config.mlp_ratio),
            head: Linear::new(&mut b.sub("head"), d, token_dim, true),
        }
    }

    /// `n × d` reconstructed tokens from `m × d_c` condition tokens.
    pub fn forward<'t, 'p>(&self, condition: Var<'t, 'p>) -> Var<'t, 'p> {
        let q = condition.tape().param(self.queries);
        let mut x = self.cross.forward(q, self.project.forward(condition)).add(q);
        for block in &self.blocks {
            x = block.forward(x);
        }
        self.head.forward(x)
    }

    pub fn reconstruct_prompt<'t, 'p>(&self, tape: &'t Tape<'p>, prompt: &Prompt) -> Result<Var<'t, 'p>> {
        Ok(self.forward(self.encoder.encode(tape, prompt)?))
    }
}

/// Evaluates the adapter on already-encoded condition tokens.
pub fn recon_forward(adapter: &ReconAdapter, store: &ParamStore, condition: &Matrix) -> Result<Matrix> {
    if condition.ncols() != adapter.encoder.config.dim {
        return Err(Error::Shape(format!(
            "condition width {} does not match configured {}",
            condition.ncols(),
            adapter.encoder.config.dim
        )));
    }
    let tape = Tape::new(store);
    Ok(adapter.forward(tape.constant(condition.clone())).to_matrix())
}

/// Reconstructed tokens for a prompt, through the adapter's own encoder.
pub fn reconstruct(adapter: &ReconAdapter, store: &ParamStore, prompt: &Prompt) -> Result<Matrix> {
    let tape = Tape::new(store);
    Ok(adapter.reconstruct_prompt(&tape, prompt)?.to_matrix())
}

/// Mean over all entries of the squared difference.
pub fn recon_loss(estimate: &Matrix, target: &Matrix) -> Result<f64> {
    if estimate.dim() != target.dim() {
        return Err(Error::Shape(format!("estimate {:?} vs target {:?}", estimate.dim(), target.dim())));
    }
    Ok((estimate - target).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// [`recon_loss`] on the tape.
pub fn recon_loss_var<'t, 'p>(estimate: Var<'t, 'p>, target: &Matrix) -> Var<'t, 'p> {
    estimate.sub(estimate.tape().constant(target.clone())).square().mean()
}
