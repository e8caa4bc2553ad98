//! Model bundle and its single-file checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the
//! raw little-endian `f64` bytes of every tensor in header order. The
//! header lists names, shapes and byte offsets, the model config and its
//! hash, the diffusion schedule and training state, and a SHA-256 checksum
//! over the payload and the rest of the header.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ltm3d_autograd::{AdamW, AdamWConfig, Matrix, ParamStore};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::Mae;
use crate::condition::ConditionModule;
use crate::config::ModelConfig;
use crate::diffusion::{build_schedule, DenoiseNet, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::nn::build_params;
use crate::recon::{ReconAdapter, RECON_PREFIX};

pub const FORMAT: &str = "ltm3d-checkpoint";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";

const OPTIM_PREFIX: &str = "optim/";
const EMA_PREFIX: &str = "ema/";

/// The four networks, as handles into the bundle's parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub condition: ConditionModule,
    pub mae: Mae,
    pub denoise: DenoiseNet,
    pub recon: ReconAdapter,
}

impl Model {
    /// Registers every parameter of `config` in `store`, keeping values that
    /// are already present.
    pub fn build(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (n, d, w) = (config.token_count(), config.token_dim(), config.mae.width);
        build_params(store, config.init_seed, |b| Self {
            condition: ConditionModule::new(b, &config.condition, w),
            mae: Mae::new(b, &config.mae, config.condition.prefix_tokens, n, d),
            denoise: DenoiseNet::new(b, &config.denoise, d, w),
            recon: ReconAdapter::new(b, &config.recon, &config.condition, n, d),
        })
    }
}

/// Progress of one training stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub trained: bool,
    /// Optimizer steps taken.
    pub step: u64,
    pub epochs: usize,
    /// Mean loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub backbone: StageState,
    pub recon: StageState,
    /// Where the reconstruction adapter's encoder weights came from:
    /// `"backbone"` (copied from the trained condition encoder) or `"init"`.
    pub recon_encoder_source: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub model: Model,
    pub schedule: DiffusionSchedule,
    pub state: TrainingState,
    /// Optimizer state per stage (`"backbone"`, `"recon"`).
    pub optimizers: BTreeMap<String, AdamW>,
    /// Exponential moving average of parameter values, when enabled.
    pub ema: Option<BTreeMap<String, Matrix>>,
}

impl ModelBundle {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let model = Model::build(&mut params, config)?;
        let schedule = build_schedule(config.schedule.steps, config.schedule.kind)?;
        Ok(Self {
            config: config.clone(),
            params,
            model,
            schedule,
            state: TrainingState::default(),
            optimizers: BTreeMap::new(),
            ema: None,
        })
    }

    /// Digest of every parameter outside the reconstruction namespace.
    pub fn backbone_hash(&self) -> String {
        self.params.digest(|name| !name.starts_with(RECON_PREFIX))
    }

    pub fn recon_hash(&self) -> String {
        self.params.digest(|name| name.starts_with(RECON_PREFIX))
    }

    /// A copy whose parameters are replaced by their moving averages.
    pub fn with_ema_weights(&self) -> Result<Self> {
        let ema = self.ema.as_ref().ok_or_else(|| Error::Checkpoint("bundle carries no weight average".into()))?;
        let mut out = self.clone();
        for (name, value) in ema {
            let id = out.params.id(name).ok_or_else(|| Error::Checkpoint(format!("averaged weight {name} has no parameter")))?;
            *out.params.get_mut(id) = value.clone();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    config_hash: String,
    schedule: DiffusionSchedule,
    state: TrainingState,
    optimizers: BTreeMap<String, OptimizerHeader>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    checksum: String,
}

fn checksum(header: &Header, payload: &[u8]) -> String {
    let mut unsigned = header.clone();
    unsigned.checksum.clear();
    let canonical: Value = serde_json::to_value(&unsigned).expect("header serializes");
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&canonical).expect("header serializes").as_bytes());
    h.update(payload);
    hex::encode(h.finalize())
}

fn named_tensors(bundle: &ModelBundle) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> = bundle.params.iter().map(|(_, name, m)| (name.to_string(), m)).collect();
    for (stage, opt) in &bundle.optimizers {
        for (name, m) in &opt.first {
            out.push((format!("{OPTIM_PREFIX}{stage}/first/{name}"), m));
        }
        for (name, m) in &opt.second {
            out.push((format!("{OPTIM_PREFIX}{stage}/second/{name}"), m));
        }
    }
    if let Some(ema) = &bundle.ema {
        for (name, m) in ema {
            out.push((format!("{EMA_PREFIX}{name}"), m));
        }
    }
    out
}

/// Serializes a bundle to bytes.
pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, m) in named_tensors(bundle) {
        tensors.push(TensorEntry { name, shape: [m.nrows(), m.ncols()], offset: payload.len() });
        for v in m.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let optimizers = bundle
        .optimizers
        .iter()
        .map(|(stage, o)| {
            let c = o.config;
            let h = OptimizerHeader { step: o.step, lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay };
            (stage.clone(), h)
        })
        .collect();
    let mut header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: DTYPE.into(),
        config: bundle.config.clone(),
        config_hash: bundle.config.hash(),
        schedule: bundle.schedule.clone(),
        state: bundle.state.clone(),
        optimizers,
        tensors,
        checksum: String::new(),
    };
    header.checksum = checksum(&header, &payload);
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically through a sibling temporary file.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = encode_bundle(bundle)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 8 {
        return Err(bad("file too short for a header".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if header_len > body.len() {
        return Err(bad(format!("header length {header_len} exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("unreadable header: {e}")))?;
    let payload = &body[header_len..];
    if header.format != FORMAT || header.dtype != DTYPE {
        return Err(bad(format!("not an {FORMAT} file with {DTYPE} tensors")));
    }
    if header.version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {} (expected {VERSION})", header.version)));
    }
    if checksum(&header, payload) != header.checksum {
        return Err(bad("checksum mismatch: the file is corrupted or was modified".into()));
    }
    if header.config.hash() != header.config_hash {
        return Err(Error::ConfigHash { expected: header.config_hash.clone(), found: header.config.hash() });
    }

    let mut params = ParamStore::new();
    let mut optimizers: BTreeMap<String, AdamW> = header
        .optimizers
        .iter()
        .map(|(stage, h)| {
            let config = AdamWConfig { lr: h.lr, beta1: h.beta1, beta2: h.beta2, eps: h.eps, weight_decay: h.weight_decay };
            (stage.clone(), AdamW { config, step: h.step, ..AdamW::default() })
        })
        .collect();
    let mut ema = BTreeMap::new();
    let mut expected_offset = 0;
    for t in &header.tensors {
        let [rows, cols] = t.shape;
        let len = rows * cols * 8;
        if t.offset != expected_offset || t.offset + len > payload.len() {
            return Err(bad(format!("tensor {} has an inconsistent offset", t.name)));
        }
        expected_offset += len;
        let values = payload[t.offset..t.offset + len].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let m = Matrix::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
        if let Some(rest) = t.name.strip_prefix(OPTIM_PREFIX) {
            let (stage, rest) = rest.split_once('/').ok_or_else(|| bad(format!("bad optimizer tensor {}", t.name)))?;
            let opt = optimizers.get_mut(stage).ok_or_else(|| bad(format!("moments for unknown optimizer {stage}")))?;
            match rest.split_once('/') {
                Some(("first", name)) => opt.first.insert(name.to_string(), m),
                Some(("second", name)) => opt.second.insert(name.to_string(), m),
                _ => return Err(bad(format!("bad optimizer tensor {}", t.name))),
            };
        } else if let Some(name) = t.name.strip_prefix(EMA_PREFIX) {
            ema.insert(name.to_string(), m);
        } else {
            params.insert(t.name.clone(), m);
        }
    }
    if expected_offset != payload.len() {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    let stored = params.len();
    let model = Model::build(&mut params, &header.config).map_err(|e| bad(format!("parameter shapes do not match the config: {e}")))?;
    if params.len() != stored {
        return Err(bad(format!("checkpoint lacks {} parameters required by its config", params.len() - stored)));
    }
    Ok(ModelBundle {
        config: header.config,
        params,
        model,
        schedule: header.schedule,
        state: header.state,
        optimizers,
        ema: (!ema.is_empty()).then_some(ema),
    })
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

/// Loads a bundle and refuses it unless its config hash equals `expected`'s.
pub fn load_bundle_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelBundle> {
    let bundle = load_bundle(path)?;
    let (want, found) = (expected.hash(), bundle.config.hash());
    if want != found {
        return Err(Error::ConfigHash { expected: want, found });
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DenoiseConfig, MaeConfig, ReconConfig};
    use crate::tokenizer::TokenizerConfig;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            n_points: 32,
            tokenizer: TokenizerConfig { group_size: 4 },
            mae: MaeConfig { width: 16, depth: 1, heads: 2, mlp_ratio: 2 },
            denoise: DenoiseConfig { width: 16, depth: 1, time_features: 8 },
            recon: ReconConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2 },
            ..ModelConfig::default()
        }
    }

    fn bundle_with_state() -> ModelBundle {
        let mut b = ModelBundle::new(&small_config()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, ..AdamWConfig::default() });
        opt.step = 7;
        opt.first.insert("mae/mask_token".into(), Matrix::from_elem((1, 16), 0.25));
        opt.second.insert("mae/mask_token".into(), Matrix::from_elem((1, 16), 1.0 / 3.0));
        b.optimizers.insert("backbone".into(), opt);
        b.state.backbone = StageState { trained: true, step: 7, epochs: 1, epoch_losses: vec![0.1 + 0.2] };
        b.ema = Some(BTreeMap::from([("mae/mask_token".to_string(), Matrix::from_elem((1, 16), -0.5))]));
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let bundle = bundle_with_state();
        save_bundle(&bundle, &path).unwrap();
        let back = load_bundle(&path).unwrap();
        assert_eq!(back.params, bundle.params);
        assert_eq!(back.optimizers, bundle.optimizers);
        assert_eq!(back.state, bundle.state);
        assert_eq!(back.schedule, bundle.schedule);
        assert_eq!(back.ema, bundle.ema);
        assert_eq!(back.config, bundle.config);
        assert_eq!(encode_bundle(&back).unwrap(), encode_bundle(&bundle).unwrap());
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = encode_bundle(&bundle_with_state()).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let positions = [8 + header_len + 3, bytes.len() - 1, 8 + header_len / 2, 2];
        for pos in positions {
            let mut tampered = bytes.clone();
            tampered[pos] ^= 0x01;
            assert!(decode_bundle(&tampered).is_err(), "byte {pos} accepted");
        }
        assert!(decode_bundle(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn tokenizer_mismatch_is_a_config_hash_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_bundle(&ModelBundle::new(&small_config()).unwrap(), &path).unwrap();
        let mut other = small_config();
        other.tokenizer.group_size = 2;
        assert!(matches!(load_bundle_expecting(&path, &other), Err(Error::ConfigHash { .. })));
        assert!(load_bundle_expecting(&path, &small_config()).is_ok());
    }

    #[test]
    fn hashes_split_backbone_and_recon() {
        let mut b = ModelBundle::new(&small_config()).unwrap();
        let (bb, rc) = (b.backbone_hash(), b.recon_hash());
        let head = b.model.recon.head.w;
        b.params.get_mut(head)[[0, 0]] += 1.0;
        assert_eq!(b.backbone_hash(), bb);
        assert_ne!(b.recon_hash(), rc);
    }

    #[test]
    fn ema_weights_swap_in() {
        let b = bundle_with_state();
        let swapped = b.with_ema_weights().unwrap();
        assert!(swapped.params.by_name("mae/mask_token").unwrap().iter().all(|&v| v == -0.5));
        assert!(ModelBundle::new(&small_config()).unwrap().with_ema_weights().is_err());
    }
}
