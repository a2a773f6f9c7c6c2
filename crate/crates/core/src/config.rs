//! Run configuration: one hierarchical TOML document covering every stage,
//! with `section.key=value` overrides and strict key checking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::Normalization;
use crate::d2r::{DensifyConfig, DsqParams};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::mfr::FastSource;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Prompt template; `[CLS]` is replaced by the class name.
pub const DEFAULT_TEMPLATE: &str = "a mmWave point cloud of a person [CLS]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub normalization: Normalization,
    /// Seed of the protocol split.
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            normalization: Normalization::DatasetLevel,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct D2rConfig {
    /// Master switch; off means repeat-fill to `p_goal` with no motion split.
    pub enabled: bool,
    /// Tri-branch densification; off keeps the motion split but repeat-fills.
    pub densify: bool,
    pub q_init: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub delta: f64,
    pub r: usize,
    pub p_goal: usize,
    pub seed: u64,
}

impl Default for D2rConfig {
    fn default() -> Self {
        let dsq = DsqParams::default();
        let dense = DensifyConfig::default();
        D2rConfig {
            enabled: true,
            densify: true,
            q_init: dsq.q,
            sigma: dsq.sigma,
            gamma: dsq.gamma,
            delta: dsq.delta,
            r: dense.r,
            p_goal: dense.p_goal,
            seed: 0,
        }
    }
}

impl D2rConfig {
    pub fn dsq(&self, q: f64) -> DsqParams {
        DsqParams {
            q,
            sigma: self.sigma,
            gamma: self.gamma,
            delta: self.delta,
        }
    }

    pub fn densify_config(&self) -> DensifyConfig {
        DensifyConfig {
            r: self.r,
            p_goal: self.p_goal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dsq(self.q_init).validate()?;
        self.densify_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfrConfig {
    pub enabled: bool,
    pub c_emb: usize,
    pub hidden: usize,
    pub fast_source: FastSource,
}

impl Default for MfrConfig {
    fn default() -> Self {
        MfrConfig {
            enabled: true,
            c_emb: 64,
            hidden: 64,
            fast_source: FastSource::PreDup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Registered backbone name.
    pub backbone: String,
    /// Global feature width.
    pub d: usize,
    /// Hidden width of the backbone's point MLP.
    pub hidden: usize,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: "reference".into(),
            d: 256,
            hidden: 128,
            seed: 0,
        }
    }
}

/// How the global feature is projected to one row per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// One MLP output of `K * C_text` values, reshaped to `K` rows.
    #[default]
    PerClass,
    /// One `C_text` row repeated for every class.
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TamConfig {
    pub enabled: bool,
    /// Fusion weight of the similarity scores.
    pub alpha: f64,
    pub c_text: usize,
    pub template: String,
    pub projection: Projection,
    pub hidden: usize,
    /// Text encoder used when no precomputed bank is given.
    pub encoder: String,
    /// Precomputed embedding bank archive.
    pub bank: Option<PathBuf>,
}

impl Default for TamConfig {
    fn default() -> Self {
        TamConfig {
            enabled: true,
            alpha: 1.0,
            c_text: 512,
            template: DEFAULT_TEMPLATE.into(),
            projection: Projection::PerClass,
            hidden: 256,
            encoder: "hash".into(),
            bank: None,
        }
    }
}

impl TamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("tam.alpha must be >= 0, got {}", self.alpha)));
        }
        if self.c_text == 0 || self.hidden == 0 {
            return Err(Error::Config("tam.c_text and tam.hidden must be at least 1".into()));
        }
        if self.encoder != "hash" {
            return Err(Error::Config(format!(
                "tam.encoder `{}` is not built in; use `hash` or give a precomputed tam.bank",
                self.encoder
            )));
        }
        if !self.template.contains("[CLS]") {
            return Err(Error::Config(format!(
                "tam.template `{}` has no [CLS] placeholder",
                self.template
            )));
        }
        Ok(())
    }
}

/// Everything the network needs to be built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub d2r: D2rConfig,
    pub mfr: MfrConfig,
    pub model: ModelConfig,
    pub tam: TamConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            d2r: D2rConfig::default(),
            mfr: MfrConfig::default(),
            model: ModelConfig::default(),
            tam: TamConfig::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        self.d2r.validate()?;
        self.tam.validate()?;
        if self.mfr.c_emb == 0 || self.mfr.hidden == 0 {
            return Err(Error::Config("mfr.c_emb and mfr.hidden must be at least 1".into()));
        }
        if self.model.d == 0 || self.model.hidden == 0 {
            return Err(Error::Config("model.d and model.hidden must be at least 1".into()));
        }
        Ok(())
    }
}

/// The whole run: every stage's settings in one document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub d2r: D2rConfig,
    pub mfr: MfrConfig,
    pub model: ModelConfig,
    pub tam: TamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

/// Every key with a one-line description. Keys under `synth.sources[]` and
/// `synth.classes[]` belong to each element of those arrays.
pub const KEYS: &[(&str, &str)] = &[
    ("data.normalization", "`none`, `dataset_level` (statistics fitted on the training split and stored with the checkpoint) or `clip_level`"),
    ("data.split_seed", "seed of the protocol split (used by the random protocol)"),
    ("d2r.enabled", "Doppler split and densification; off repeat-fills every frame to `d2r.p_goal`"),
    ("d2r.densify", "tri-branch densification; off keeps the Doppler split but repeat-fills"),
    ("d2r.q_init", "initial Doppler quantile; one learnable scalar shared by all frames"),
    ("d2r.sigma", "rank bandwidth of the soft quantile"),
    ("d2r.gamma", "temperature of the soft fast/slow gate"),
    ("d2r.delta", "hard threshold on the soft gate"),
    ("d2r.r", "duplication factor of fast points"),
    ("d2r.p_goal", "points per frame after densification"),
    ("d2r.seed", "seed of the densification draws"),
    ("mfr.enabled", "motion-aware feature recalibration (needs `d2r.enabled`)"),
    ("mfr.c_emb", "width of the per-point embedding"),
    ("mfr.hidden", "hidden width of the recalibration heads"),
    ("mfr.fast_source", "`pre_dup` (each fast point once) or `post_dup` (every duplicate)"),
    ("model.backbone", "registered backbone name"),
    ("model.d", "global feature width"),
    ("model.hidden", "hidden width of the backbone point MLP"),
    ("model.seed", "seed of the weight initialization"),
    ("tam.enabled", "text-aligned similarity head fused into the logits"),
    ("tam.alpha", "fusion weight of the similarity scores"),
    ("tam.c_text", "text embedding width"),
    ("tam.template", "prompt template; `[CLS]` is replaced by the class name"),
    ("tam.projection", "`per_class` or `broadcast` projection of the global feature"),
    ("tam.hidden", "hidden width of the projection MLP"),
    ("tam.encoder", "text encoder used when no bank is given; only `hash` is built in"),
    ("tam.bank", "optional path of a precomputed embedding bank archive"),
    ("train.epochs", "passes over the training split"),
    ("train.batch_size", "clips per optimizer step"),
    ("train.learning_rate", "base learning rate"),
    ("train.weight_decay", "L2 penalty on every parameter except the quantile"),
    ("train.momentum", "SGD momentum"),
    ("train.schedule", "`cosine` (per epoch, down to zero) or `constant`"),
    ("train.seed", "seed of the batch order"),
    ("train.device", "compute device hint; only `cpu`"),
    ("train.q_param", "`clamp` (step on q, then clamp) or `sigmoid` (step on its logit)"),
    ("train.class_weighting", "`none` or `inverse_frequency`"),
    ("train.relaxation", "`straight_through` (hard forward, soft backward) or `soft`"),
    ("train.grad_chunk", "clips whose gradients are held at once; results do not depend on it"),
    ("eval.mmd_bandwidth", "fixed Gaussian kernel bandwidth; unset uses the median heuristic"),
    ("eval.alignment", "`all` (train and test features) or `test` for the alignment statistics"),
    ("eval.max_alignment_samples", "per-source cap on samples entering the alignment statistics"),
    ("eval.seed", "seed of the subsampling under that cap"),
    ("synth.clips_per_class", "clips per class and source"),
    ("synth.seed", "seed of the benchmark"),
    ("synth.sources", "radar configurations, an array of tables"),
    ("synth.sources[].name", "source name written to the manifest"),
    ("synth.sources[].dataset_idx", "source slot 1, 2 or 3, which fixes the subject and scene layout"),
    ("synth.sources[].carrier_frequency", "carrier frequency in Hz"),
    ("synth.sources[].frame_rate", "frames per second"),
    ("synth.sources[].frames_per_clip", "raw frames recorded per clip"),
    ("synth.sources[].range_m", "distance from radar to subject in meters"),
    ("synth.sources[].range_jitter", "relative per-clip jitter of the range"),
    ("synth.sources[].density_scale", "expected body points per frame at 1 m; falls off as R^-4"),
    ("synth.sources[].noise_sigma_xyz", "position noise in meters"),
    ("synth.sources[].noise_sigma_doppler", "radial velocity noise in m/s"),
    ("synth.sources[].doppler_quantization", "radial velocity resolution in m/s"),
    ("synth.sources[].clutter_rate", "expected static clutter returns per frame"),
    ("synth.sources[].intensity_gain", "received power scale; intensity is gain / R^4"),
    ("synth.sources[].intensity_noise", "log-normal spread of the intensity"),
    ("synth.classes", "action classes, an array of tables"),
    ("synth.classes[].name", "class name"),
    ("synth.classes[].regions", "five oscillations for torso, left arm, right arm, left leg, right leg"),
    ("synth.classes[].regions[].amplitude", "peak displacement in meters"),
    ("synth.classes[].regions[].frequency", "oscillation frequency in Hz; must stay below half the frame rate"),
    ("synth.classes[].regions[].phase", "phase in radians"),
    ("synth.classes[].static_fraction", "share of body returns from parts that do not move"),
];

fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The effective configuration as TOML; loading it gives back `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            d2r: self.d2r.clone(),
            mfr: self.mfr.clone(),
            model: self.model.clone(),
            tam: self.tam.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.synth.validate()
    }

    /// Set `key` (dotted, array elements by index) to `value`, parsed as a
    /// TOML value or taken as a bare string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown config key `{key}`"));
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(unknown());
        }
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = match node {
                toml::Value::Table(t) => t.get_mut(*part).ok_or_else(unknown)?,
                toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)).ok_or_else(unknown)?,
                _ => return Err(unknown()),
            };
        }
        let last = parts[parts.len() - 1];
        let value = parse_value(value);
        match node {
            // absent optional keys are not in the serialized form, so
            // inserting is allowed and the typed parse below rejects strays
            toml::Value::Table(t) => {
                t.insert(last.to_string(), value);
            }
            toml::Value::Array(a) => {
                let slot = last.parse::<usize>().ok().and_then(|i| a.get_mut(i)).ok_or_else(unknown)?;
                *slot = value;
            }
            _ => return Err(unknown()),
        }
        let updated: RunConfig = root.try_into().map_err(|e: toml::de::Error| {
            if e.message().contains("unknown field") {
                unknown()
            } else {
                Error::Config(format!("config key `{key}`: {}", e.message()))
            }
        })?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Markdown reference of every key with its default.
    pub fn key_reference() -> String {
        let defaults = toml::Value::try_from(RunConfig::default()).expect("config serializes");
        let mut out = String::from("# Configuration keys\n\nEvery key can be set in the TOML config file or overridden with `--set key=value`.\n\n| key | default | description |\n|---|---|---|\n");
        for (key, doc) in KEYS {
            let default = lookup(&defaults, key).map_or_else(|| "unset".to_string(), |v| match v {
                toml::Value::Array(_) | toml::Value::Table(_) => "see below".to_string(),
                v => format!("`{v}`"),
            });
            out.push_str(&format!("| `{key}` | {default} | {doc} |\n"));
        }
        out
    }
}

/// Value at a documented key; `[]` steps into the first array element.
fn lookup<'a>(root: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    let mut node = root;
    for part in key.split('.') {
        let (name, index) = match part.strip_suffix("[]") {
            Some(n) => (n, true),
            None => (part, false),
        };
        node = node.get(name)?;
        if index {
            node = node.get(0)?;
        }
    }
    Some(node)
}

/// Every leaf key of a serialized config, with array elements folded to `[]`.
#[cfg(test)]
fn leaf_keys(prefix: &str, v: &toml::Value, out: &mut std::collections::BTreeSet<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(&key, child, out);
            }
        }
        toml::Value::Array(a) if a.iter().any(|e| e.is_table()) => {
            out.insert(prefix.to_string());
            for e in a {
                leaf_keys(&format!("{prefix}[]"), e, out);
            }
        }
        _ => {
            out.insert(prefix.to_string());
        }
    }
}
