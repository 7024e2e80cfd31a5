//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use thiserror::Error;

use crate::depthbin::Discretization;
use crate::dtr::AttentionKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("bad value {value:?} for {key}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Text form of one config value. Rendering then parsing is the identity.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}

scalar_value!(u64, usize, f64, bool);

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for AttentionKind {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Discretization {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($key:ident: $t:ty = $default:expr, $doc:literal;)*) => {
        /// Every tunable of the command-line driver. Defaults follow the
        /// paper's training constants with toy-sized shapes.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        /// `(key, description)` for every key, in dump order.
        pub const KEYS: &[(&str, &str)] = &[$((stringify!($key), $doc),)*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($key) => {
                        self.$key = <$t>::parse_value(value).map_err(|msg| ConfigError::Value {
                            key: key.to_string(),
                            value: value.to_string(),
                            msg,
                        })?;
                    })*
                    other => return Err(ConfigError::UnknownKey(other.to_string())),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.render()),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    seed: u64 = 0, "Run seed; every random stream derives from it.";
    channels: usize = 32, "Feature channels C (paper: 256).";
    height: usize = 12, "Feature map height H (paper: 36).";
    width: usize = 12, "Feature map width W (paper: 160).";
    stride: usize = 8, "Input pixels per feature cell.";
    input_channels: usize = 8, "Channels of the synthetic backbone input.";
    bins: usize = 24, "Depth bins D (paper: 96).";
    merge_scale: usize = 4, "Bins merged per group, r.";
    depth_min: f64 = 1.0, "Near end of the depth range, meters.";
    depth_max: f64 = 80.0, "Far end of the depth range, meters.";
    discretization: Discretization = Discretization::LinearIncreasing, "Depth bin spacing: UD, SID or LID.";
    heads: usize = 4, "Attention heads.";
    enc_layers: usize = 1, "Transformer encoder layers.";
    dec_layers: usize = 1, "Transformer decoder layers.";
    attention: AttentionKind = AttentionKind::Linear, "Attention kernel: linear or vanilla.";
    layer_norm: bool = false, "Layer norm after each residual.";
    use_dfe: bool = true, "Depth-aware feature enhancement; off passes backbone features through.";
    use_dpe: bool = true, "Depth positional encoding.";
    anchor_ratios: Vec<f64> = vec![0.5, 1.0, 1.5], "Anchor aspect ratios (width / height).";
    anchor_base: f64 = 24.0, "Smallest anchor height in pixels.";
    anchor_scales: usize = 16, "Anchor heights base * 2^(i/4) for i below this.";
    classes: Vec<String> = vec!["Car".to_string()], "Class names, in logit order.";
    w_cls: f64 = 1.0, "Classification loss weight.";
    w_reg: f64 = 1.0, "Regression loss weight.";
    w_dep: f64 = 1.0, "Depth loss weight.";
    focal_gamma: f64 = 2.0, "Focal loss gamma.";
    focal_alpha: f64 = 0.25, "Focal loss alpha.";
    lr: f64 = 1e-4, "Initial Adam learning rate, cosine-annealed to zero.";
    steps: usize = 500, "Training steps.";
    scenes: usize = 1, "Synthetic training scenes.";
    objects: usize = 2, "Objects per synthetic scene.";
    focal_length: f64 = 400.0, "Synthetic camera focal length in pixels.";
    score_thresh: f64 = 0.75, "Minimum detection score.";
    nms_iou: f64 = 0.4, "NMS 2D IoU threshold.";
    eval_ious: Vec<f64> = vec![0.7, 0.5], "IoU thresholds evaluated for every metric.";
    crop_top: usize = 100, "Rows cropped from the top of raw images.";
    raw_width: usize = 1242, "Raw image width.";
    raw_height: usize = 375, "Raw image height.";
    input_width: usize = 1280, "Network input width after resizing.";
    input_height: usize = 288, "Network input height after resizing.";
    bench_sizes: Vec<usize> = vec![512, 1024, 2048, 4096], "Token counts for the attention benchmark.";
    bench_dim: usize = 64, "Token width for the attention benchmark.";
    bench_runs: usize = 5, "Timed runs per benchmark cell.";
    gradcheck_seeds: usize = 100, "Seeds per gradient check.";
    gradcheck_tol: f64 = 1e-4, "Maximum relative gradient error.";
    gradcheck_corrupt: String = String::new(), "Check whose analytic gradient is deliberately scaled (testing only).";
    out_dir: String = "runs/toy".to_string(), "Output directory.";
    log_every: usize = 50, "Steps between progress log lines.";
    parallel: bool = false, "Parse evaluation files on several threads.";
}

impl RunConfig {
    /// Applies `key = value` lines. `#` starts a comment; a key may appear
    /// once per text.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            seen.push(key);
            self.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("unknown key {k:?}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            msg: format!("override {kv:?} is not key=value"),
        })?;
        self.set(k, v)
    }

    /// Every key with its effective value and description.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.stride == 0 || self.input_channels == 0 {
            return bad("shapes must be positive".into());
        }
        if self.merge_scale == 0 || self.bins % self.merge_scale != 0 {
            return bad(format!("bins {} not divisible by merge_scale {}", self.bins, self.merge_scale));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad("need 0 < depth_min < depth_max".into());
        }
        if self.anchor_ratios.is_empty() || self.anchor_scales == 0 || !(self.anchor_base > 0.0) {
            return bad("anchors need ratios, scales and a positive base".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("thresholds must lie in [0, 1]".into());
        }
        if self.crop_top >= self.raw_height {
            return bad("crop_top must be below raw_height".into());
        }
        Ok(())
    }

    pub fn focal(&self) -> crate::loss::FocalParams {
        crate::loss::FocalParams {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }

    pub fn loss_weights(&self) -> crate::detect::LossWeights {
        crate::detect::LossWeights {
            cls: self.w_cls,
            reg: self.w_reg,
            dep: self.w_dep,
        }
    }
}
