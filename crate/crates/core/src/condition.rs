//! Prompt encoders and the prefix adapter.
//!
//! A prompt (silhouette image or shape class) is encoded into condition
//! tokens `C` (`m × d_c`). The prefix adapter projects them to the MAE width
//! and computes `T = FF(CrossAttn(Q, C') + Q)` for a learned query bank `Q`.

use std::fmt;
use std::str::FromStr;

use ltm3d_autograd::{Init, Matrix, ParamId, ParamStore, Tape, Var};

use crate::config::{ConditionConfig, Modality};
use crate::data::{ShapeFamily, SilhouetteImage};
use crate::error::{Error, Result};
use crate::nn::{Attention, Linear, Mlp, ParamBuilder};

/// Class parameters are zero-padded to this length before projection.
pub const MAX_ARITY: usize = 3;

/// A generation prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Image(SilhouetteImage),
    Class { family: ShapeFamily, params: Vec<f64> },
    /// The learned null condition used for dropout and guidance.
    Null,
}

impl Prompt {
    pub fn modality(&self) -> Option<Modality> {
        match self {
            Prompt::Image(_) => Some(Modality::Image),
            Prompt::Class { .. } => Some(Modality::Class),
            Prompt::Null => None,
        }
    }
}

/// Parses `family:p1,p2,...`, e.g. `torus:0.8,0.3`.
impl FromStr for Prompt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, params) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("class condition `{s}` is not of the form family:p1,p2")))?;
        let family: ShapeFamily = family.trim().parse()?;
        let params = params
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad class parameter `{p}` in `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        crate::data::validate_params(family, &params)?;
        Ok(Prompt::Class { family, params })
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prompt::Image(img) => write!(f, "image(az={:.3}, el={:.3})", img.view.azimuth, img.view.elevation),
            Prompt::Class { family, params } => {
                let p: Vec<String> = params.iter().map(|v| v.to_string()).collect();
                write!(f, "{family}:{}", p.join(","))
            }
            Prompt::Null => f.write_str("null"),
        }
    }
}

/// Condition tokens `C` with their source modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    pub tokens: Matrix,
    pub modality: Option<Modality>,
}

/// Trainable stand-in for a frozen foundation encoder.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub config: ConditionConfig,
    pub patch: Option<Linear>,
    pub positions: Option<ParamId>,
    pub family: Option<ParamId>,
    pub class_params: Option<Linear>,
}

impl ConditionEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, config: &ConditionConfig) -> Self {
        let d = config.dim;
        let mut enc = Self { config: config.clone(), patch: None, positions: None, family: None, class_params: None };
        match config.modality {
            Modality::Image => {
                let p = config.patch_size;
                let patches = (config.resolution / p).pow(2);
                enc.patch = Some(Linear::new(&mut b.sub("patch"), p * p, d, true));
                if config.positional {
                    enc.positions = Some(b.param("pos", patches, d, Init::Normal(0.02)));
                }
            }
            Modality::Class => {
                let family_dim = d / 2;
                enc.family = Some(b.param("family", ShapeFamily::ALL.len(), family_dim, Init::Normal(1.0)));
                enc.class_params = Some(Linear::new(&mut b.sub("params"), MAX_ARITY, d - family_dim, true));
            }
        }
        enc
    }

    /// Row-major `patches × patch_size²` matrix of an image.
    pub fn patchify(&self, img: &SilhouetteImage) -> Result<Matrix> {
        let res = self.config.resolution;
        if img.resolution != res {
            return Err(Error::Shape(format!("image resolution {} does not match configured {res}", img.resolution)));
        }
        let p = self.config.patch_size;
        let per_side = res / p;
        Ok(Matrix::from_shape_fn((per_side * per_side, p * p), |(patch, k)| {
            let (pr, pc) = (patch / per_side, patch % per_side);
            img.get(pr * p + k / p, pc * p + k % p)
        }))
    }

    /// Encodes a prompt onto `tape`; returns `m × d_c`.
    pub fn encode<'t, 'p>(&self, tape: &'t Tape<'p>, prompt: &Prompt) -> Result<Var<'t, 'p>> {
        match (prompt, self.config.modality) {
            (Prompt::Image(img), Modality::Image) => {
                let patch = self.patch.as_ref().expect("image encoder has a patch embedding");
                let embedded = patch.forward(tape.constant(self.patchify(img)?));
                let global = embedded.mean_rows();
                let tokens = match self.positions {
                    Some(pos) => embedded.add(tape.param(pos)),
                    None => embedded,
                };
                Ok(tape.concat_rows(&[tokens, global]))
            }
            (Prompt::Class { family, params }, Modality::Class) => {
                crate::data::validate_params(*family, params)?;
                let table = tape.param(self.family.expect("class encoder has a family table"));
                let mut padded = Matrix::zeros((1, MAX_ARITY));
                for (k, v) in params.iter().enumerate() {
                    padded[[0, k]] = *v;
                }
                let projected = self.class_params.as_ref().expect("class encoder has a parameter projection").forward(tape.constant(padded));
                Ok(tape.concat_cols(&[table.select_rows(&[family.index()]), projected]))
            }
            (Prompt::Null, _) => Err(Error::Spec("the null prompt has no encoder; use ConditionModule::condition_tokens".into())),
            (other, modality) => Err(Error::Spec(format!("{other} prompt given to a {modality:?} condition encoder"))),
        }
    }
}

/// `T = FF(CrossAttn(Q, W·C) + Q)` with a two-layer GELU feed-forward.
#[derive(Debug, Clone)]
pub struct PrefixAdapter {
    pub queries: ParamId,
    pub project: Linear,
    pub attn: Attention,
    pub ff: Mlp,
}

impl PrefixAdapter {
    pub fn new(b: &mut ParamBuilder<'_>, config: &ConditionConfig, width: usize) -> Self {
        Self {
            queries: b.param("queries", config.prefix_tokens, width, Init::Normal(0.02)),
            project: Linear::new(&mut b.sub("proj"), config.dim, width, true),
            attn: Attention::new(&mut b.sub("attn"), width, width, config.heads),
            ff: Mlp::new(&mut b.sub("ff"), width, 4 * width),
        }
    }

    pub fn forward<'t, 'p>(&self, condition: Var<'t, 'p>) -> Var<'t, 'p> {
        let q = condition.tape().param(self.queries);
        let c = self.project.forward(condition);
        self.ff.forward(self.attn.forward(q, c).add(q))
    }
}

/// Encoder, null token and prefix adapter of the backbone's condition path.
#[derive(Debug, Clone)]
pub struct ConditionModule {
    pub encoder: ConditionEncoder,
    pub null: ParamId,
    pub prefix: PrefixAdapter,
}

impl ConditionModule {
    /// Parameters live under `cond/` and `prefix/`.
    pub fn new(b: &mut ParamBuilder<'_>, config: &ConditionConfig, width: usize) -> Self {
        let mut cond = b.sub("cond");
        let encoder = ConditionEncoder::new(&mut cond.sub("enc"), config);
        let null = cond.param("null", 1, config.dim, Init::Normal(0.02));
        let prefix = PrefixAdapter::new(&mut b.sub("prefix"), config, width);
        Self { encoder, null, prefix }
    }

    pub fn condition_tokens<'t, 'p>(&self, tape: &'t Tape<'p>, prompt: &Prompt) -> Result<Var<'t, 'p>> {
        match prompt {
            Prompt::Null => Ok(tape.param(self.null)),
            other => self.encoder.encode(tape, other),
        }
    }

    pub fn prefix_tokens<'t, 'p>(&self, tape: &'t Tape<'p>, prompt: &Prompt) -> Result<Var<'t, 'p>> {
        Ok(self.prefix.forward(self.condition_tokens(tape, prompt)?))
    }
}

/// Evaluates condition tokens for `prompt` outside of training.
pub fn encode_condition(module: &ConditionModule, store: &ParamStore, prompt: &Prompt) -> Result<ConditionTokens> {
    let tape = Tape::new(store);
    let tokens = module.condition_tokens(&tape, prompt)?.to_matrix();
    Ok(ConditionTokens { tokens, modality: prompt.modality() })
}

/// Evaluates prefix tokens `T` for already-encoded condition tokens.
pub fn prefix_forward(module: &ConditionModule, store: &ParamStore, condition: &ConditionTokens) -> Result<Matrix> {
    if condition.tokens.ncols() != module.encoder.config.dim {
        return Err(Error::Shape(format!(
            "condition width {} does not match configured {}",
            condition.tokens.ncols(),
            module.encoder.config.dim
        )));
    }
    let tape = Tape::new(store);
    Ok(module.prefix.forward(tape.constant(condition.tokens.clone())).to_matrix())
}
