//! Run configuration, presets and TOML loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::MotionConfig;
use crate::error::{Error, Result};
use crate::providers::SyntheticConfig;

/// Ablation switches, one per row of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop NSSM and attention over the body-aware features.
    pub no_body_aware_features: bool,
    /// Drop the pose initialization and its NSSM.
    pub no_pose_init: bool,
    /// Drop the camera initialization, its NSSM and its attention map.
    pub no_cam_init: bool,
    /// Skip LSTM refinement; the coarse estimate is final.
    pub no_lstm: bool,
    /// Add an attention map over the pose embedding.
    pub am_on_pose: bool,
    /// Run the LSTM over aggregated features before a single regression pass.
    pub lstm_on_features: bool,
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        let names = [
            (self.no_body_aware_features, "no_body_aware_features"),
            (self.no_pose_init, "no_pose_init"),
            (self.no_cam_init, "no_cam_init"),
            (self.no_lstm, "no_lstm"),
            (self.am_on_pose, "am_on_pose"),
            (self.lstm_on_features, "lstm_on_features"),
        ];
        for (on, name) in names {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// Nonlinearity between the two affine layers of the coarse regressor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseLoss {
    /// Distance between the 72-d axis-angle vectors.
    #[default]
    AxisAngle,
    /// Frobenius distance between the 24 rotation matrices.
    RotationMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_shape: f64,
    pub lambda_pose: f64,
    pub pose_loss: PoseLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 300.0,
            lambda2: 0.06,
            lambda3: 60.0,
            lambda_shape: 1.0,
            lambda_pose: 1.0,
            pose_loss: PoseLoss::AxisAngle,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda_shape, self.lambda_pose];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Architecture of the network; everything needed to rebuild a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub window: usize,
    /// Side of the feature grid fed to the model.
    pub grid: usize,
    pub feature_dim: usize,
    pub uplift_dim: usize,
    pub attn_dim: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub head_iterations: usize,
    pub head_activation: HeadActivation,
    /// Divide attention logits by the square root of their width.
    pub scale_attention: bool,
    /// Per-matrix min-max normalization of cosine similarity instead of `(cos+1)/2`.
    pub nssm_min_max: bool,
    /// Row softmax on the fused map.
    pub fused_softmax: bool,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            window: 16,
            grid: 8,
            feature_dim: 2048,
            uplift_dim: 512,
            attn_dim: 1024,
            lstm_layers: 3,
            lstm_hidden: 2048,
            head_hidden: 1024,
            head_iterations: 3,
            head_activation: HeadActivation::Tanh,
            scale_attention: true,
            nssm_min_max: false,
            fused_softmax: false,
            flags: AblationFlags::default(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            feature_dim: 256,
            uplift_dim: 64,
            attn_dim: 128,
            lstm_hidden: 128,
            head_hidden: 128,
            head_activation: HeadActivation::Identity,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window", self.window),
            ("grid", self.grid),
            ("feature_dim", self.feature_dim),
            ("uplift_dim", self.uplift_dim),
            ("attn_dim", self.attn_dim),
            ("lstm_layers", self.lstm_layers),
            ("lstm_hidden", self.lstm_hidden),
            ("head_hidden", self.head_hidden),
            ("head_iterations", self.head_iterations),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let f = &self.flags;
        if f.no_body_aware_features && f.no_pose_init && f.no_cam_init && !f.am_on_pose {
            return Err(Error::Config("every similarity and attention map is ablated".into()));
        }
        if f.am_on_pose && f.no_pose_init {
            return Err(Error::Config("am_on_pose needs the pose initialization".into()));
        }
        if f.lstm_on_features && f.no_lstm {
            return Err(Error::Config("lstm_on_features and no_lstm are exclusive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub lr_decay_factor: f64,
    pub patience: usize,
    /// Fraction of training sequences held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 35,
            max_steps: None,
            lr_decay_factor: 10.0,
            patience: 5,
            val_fraction: 0.1,
            seed: 0,
            loss: LossWeights::default(),
        }
    }

    /// Keypoints are in millimeters here, so the 2D weight carries a 1/1000 factor.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 40,
            loss: LossWeights {
                lambda3: 0.06,
                ..LossWeights::default()
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(Error::Config("lr_decay_factor must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_seqs: usize,
    pub length: usize,
    pub motion: MotionConfig,
    pub provider: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seqs: 40,
            length: 128,
            motion: MotionConfig::default(),
            provider: SyntheticConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn desk() -> Self {
        Self {
            length: 512,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub stride: usize,
    /// Worker threads for evaluation; `None` uses the environment or all cores.
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stride: 14,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            data: DataConfig::desk(),
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    /// Parses TOML; an optional top-level `preset` key picks the base that the
    /// remaining keys override.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut over: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match over.as_table_mut().and_then(|t| t.remove("preset")) {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => "paper".into(),
        };
        let base = Self::preset(&preset)?;
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, over);
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.motion.validate()?;
        if self.eval.stride == 0 || self.eval.stride > self.model.window {
            return Err(Error::Config(format!(
                "stride {} must lie in 1..={}",
                self.eval.stride, self.model.window
            )));
        }
        if self.data.provider.grid != self.model.grid {
            return Err(Error::Config(format!(
                "provider grid {} differs from model grid {}",
                self.data.provider.grid, self.model.grid
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = RunConfig::paper();
        assert_eq!(c.model.window, 16);
        assert_eq!((c.model.feature_dim, c.model.uplift_dim, c.model.attn_dim), (2048, 512, 1024));
        assert_eq!((c.model.lstm_layers, c.model.lstm_hidden), (3, 2048));
        assert_eq!(c.train.learning_rate, 5e-5);
        assert_eq!((c.train.batch_size, c.train.epochs, c.train.patience), (32, 35, 5));
        assert_eq!(c.train.lr_decay_factor, 10.0);
        let w = c.train.loss;
        assert_eq!((w.lambda1, w.lambda2, w.lambda3), (300.0, 0.06, 60.0));
        assert_eq!(c.eval.stride, 14);
        assert_eq!(c.model.head_activation, HeadActivation::Tanh);
        c.validate().unwrap();
    }

    #[test]
    fn toml_overrides_preset() {
        let c = RunConfig::from_toml_str(
            "preset = \"desk\"\n[model]\nwindow = 8\n[model.flags]\nno_lstm = true\n[eval]\nstride = 6\n",
        )
        .unwrap();
        assert_eq!(c.model.window, 8);
        assert_eq!(c.model.feature_dim, 256);
        assert!(c.model.flags.no_lstm);
        assert_eq!(c.eval.stride, 6);
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml_str("preset = \"huge\"").is_err());
        assert!(RunConfig::from_toml_str("[eval]\nstride = 17").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlearning_rate = -1.0").is_err());
        let all = "[model.flags]\nno_body_aware_features = true\nno_pose_init = true\nno_cam_init = true";
        assert!(matches!(RunConfig::from_toml_str(all), Err(Error::Config(_))));
    }

    #[test]
    fn labels() {
        assert_eq!(AblationFlags::default().label(), "full");
        let f = AblationFlags {
            no_lstm: true,
            ..Default::default()
        };
        assert_eq!(f.label(), "no_lstm");
    }
}
