//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are errors. [`RunConfig::to_text`]
//! writes the full effective configuration in the same format.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use boq::data::synthetic::{SyntheticConfig, ViewJitter};
use boq::model::{InputMode, ModelConfig, Reduction};
use boq::retrieval::{MatchRule, DEFAULT_THRESHOLD_M};
use boq::training::{AdamWConfig, BatchSpec, LrSchedule, MsLossParams, TrainConfig};

/// Every key with a one-line description, in the order they are echoed.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for initialization, sampling, augmentation and synthesis"),
    ("image.height", "input image height in pixels"),
    ("image.width", "input image width in pixels"),
    ("model.input", "`image` (convolutional stem) or `features` (precomputed tokens)"),
    ("model.stem_channels", "comma-separated output channels of the stride-2 stem layers"),
    ("model.feature_dim", "token width in feature mode"),
    ("model.grid", "feature grid `ROWSxCOLS` in feature mode, or `none`"),
    ("model.num_blocks", "number of encoder + query-block stages (L)"),
    ("model.queries", "learnable queries per block (M)"),
    ("model.dim", "model width (d)"),
    ("model.heads", "attention heads"),
    ("model.ffn_mult", "encoder feed-forward width as a multiple of d"),
    ("model.channel_proj", "feature-axis projection width (c)"),
    ("model.row_proj", "query-axis projection width (r), 0 to skip it"),
    ("model.reduction", "`conv` (3x3) or `linear` channel reduction"),
    ("model.self_attention", "query self-attention inside each block"),
    ("model.output_norm", "layer-normalize block outputs"),
    ("batch.places", "places per batch (P)"),
    ("batch.images_per_place", "images per place (K)"),
    ("loss.alpha", "multi-similarity positive temperature"),
    ("loss.beta", "multi-similarity negative temperature"),
    ("loss.lambda", "multi-similarity threshold"),
    ("loss.epsilon", "multi-similarity mining margin"),
    ("optim.beta1", "AdamW first-moment decay"),
    ("optim.beta2", "AdamW second-moment decay"),
    ("optim.eps", "AdamW denominator epsilon"),
    ("optim.weight_decay", "AdamW decoupled weight decay"),
    ("schedule.base_lr", "learning rate after warmup"),
    ("schedule.warmup_epochs", "linear warmup epochs"),
    ("schedule.decay_factor", "multiplicative step decay"),
    ("schedule.decay_interval", "epochs between decays"),
    ("schedule.max_epochs", "training epochs"),
    ("train.augment", "jitter training images with the synth.jitter.* settings"),
    ("train.freeze_stem", "keep the convolutional stem at its initial weights"),
    ("synth.num_places", "training places"),
    ("synth.eval_places", "held-out places (references + queries)"),
    ("synth.views_per_place", "views rendered per place"),
    ("synth.reference_views", "views of each held-out place used as references"),
    ("synth.spacing_m", "distance between neighboring places, meters"),
    ("synth.position_jitter_m", "max view offset from its place per axis, meters"),
    ("synth.frame_stride", "frame-indexed ground truth with this stride, 0 for planar positions"),
    ("synth.jitter.max_shift", "max view shift in pixels"),
    ("synth.jitter.brightness", "max brightness offset"),
    ("synth.jitter.contrast", "max relative contrast change"),
    ("synth.jitter.noise_sigma", "pixel noise standard deviation"),
    ("eval.ks", "comma-separated, strictly ascending k values"),
    ("eval.threshold_m", "distance match threshold, meters"),
    ("eval.frame_threshold", "frame match window for frame-indexed manifests"),
    ("attn.block", "block whose cross-attention is exported"),
    ("attn.queries", "comma-separated query indices to export"),
    ("path.manifest", "dataset manifest for train, embed and eval"),
    ("path.checkpoint", "checkpoint for embed and attn"),
    ("path.image", "input for attn (P6 image or single-tensor file)"),
    ("path.queries", "query descriptor table for eval"),
    ("path.references", "reference descriptor table for eval"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Image,
    Features,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub input: InputKind,
    pub stem_channels: Vec<usize>,
    pub feature_dim: usize,
    pub grid: Option<(usize, usize)>,
    /// Everything but the input mode, which is assembled from the fields above.
    pub model: ModelConfig,
    pub batch: BatchSpec,
    pub loss: MsLossParams,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub augment: bool,
    pub freeze_stem: bool,
    pub synth: SyntheticConfig,
    pub ks: Vec<usize>,
    pub threshold_m: f64,
    pub frame_threshold: u64,
    pub attn_block: usize,
    pub attn_queries: Vec<usize>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub references: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let (height, width, stem_channels) = match &model.input {
            InputMode::Image {
                height,
                width,
                stem_channels,
            } => (*height, *width, stem_channels.clone()),
            InputMode::Features { .. } => unreachable!("default model reads images"),
        };
        RunConfig {
            seed: 0,
            height,
            width,
            input: InputKind::Image,
            stem_channels,
            feature_dim: 256,
            grid: None,
            model,
            batch: BatchSpec::default(),
            loss: MsLossParams::default(),
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule {
                base_lr: 4e-4,
                ..LrSchedule::default()
            },
            augment: false,
            freeze_stem: false,
            synth: SyntheticConfig::default(),
            ks: vec![1, 5, 10],
            threshold_m: DEFAULT_THRESHOLD_M,
            frame_threshold: 10,
            attn_block: 0,
            attn_queries: vec![0, 1, 2, 3],
            manifest: None,
            checkpoint: None,
            image: None,
            queries: None,
            references: None,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected `true` or `false`, got `{value}`")),
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(v.trim())).collect()
}

fn list<T: Display>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(format!("line {}: key `{key}` already set on line {prev}", i + 1));
            }
            cfg.set(key, value.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let wrap = |e: String| format!("key `{key}`: {e}");
        match key {
            "seed" => self.seed = parse(value).map_err(wrap)?,
            "image.height" => self.height = parse(value).map_err(wrap)?,
            "image.width" => self.width = parse(value).map_err(wrap)?,
            "model.input" => {
                self.input = match value {
                    "image" => InputKind::Image,
                    "features" => InputKind::Features,
                    _ => return Err(wrap(format!("expected `image` or `features`, got `{value}`"))),
                }
            }
            "model.stem_channels" => self.stem_channels = parse_list(value).map_err(wrap)?,
            "model.feature_dim" => self.feature_dim = parse(value).map_err(wrap)?,
            "model.grid" => {
                self.grid = if value == "none" {
                    None
                } else {
                    let (r, c) = value
                        .split_once('x')
                        .ok_or_else(|| wrap(format!("expected `ROWSxCOLS` or `none`, got `{value}`")))?;
                    Some((parse(r).map_err(wrap)?, parse(c).map_err(wrap)?))
                }
            }
            "model.num_blocks" => self.model.num_blocks = parse(value).map_err(wrap)?,
            "model.queries" => self.model.queries_per_block = parse(value).map_err(wrap)?,
            "model.dim" => self.model.model_dim = parse(value).map_err(wrap)?,
            "model.heads" => self.model.num_heads = parse(value).map_err(wrap)?,
            "model.ffn_mult" => self.model.ffn_mult = parse(value).map_err(wrap)?,
            "model.channel_proj" => self.model.channel_proj = parse(value).map_err(wrap)?,
            "model.row_proj" => {
                let r: usize = parse(value).map_err(wrap)?;
                self.model.row_proj = (r > 0).then_some(r);
            }
            "model.reduction" => {
                self.model.reduction = match value {
                    "conv" => Reduction::Conv3x3,
                    "linear" => Reduction::Linear,
                    _ => return Err(wrap(format!("expected `conv` or `linear`, got `{value}`"))),
                }
            }
            "model.self_attention" => self.model.self_attention = parse_bool(value).map_err(wrap)?,
            "model.output_norm" => self.model.output_norm = parse_bool(value).map_err(wrap)?,
            "batch.places" => self.batch.places_per_batch = parse(value).map_err(wrap)?,
            "batch.images_per_place" => self.batch.images_per_place = parse(value).map_err(wrap)?,
            "loss.alpha" => self.loss.alpha = parse(value).map_err(wrap)?,
            "loss.beta" => self.loss.beta = parse(value).map_err(wrap)?,
            "loss.lambda" => self.loss.lambda = parse(value).map_err(wrap)?,
            "loss.epsilon" => self.loss.epsilon = parse(value).map_err(wrap)?,
            "optim.beta1" => self.optimizer.beta1 = parse(value).map_err(wrap)?,
            "optim.beta2" => self.optimizer.beta2 = parse(value).map_err(wrap)?,
            "optim.eps" => self.optimizer.eps = parse(value).map_err(wrap)?,
            "optim.weight_decay" => self.optimizer.weight_decay = parse(value).map_err(wrap)?,
            "schedule.base_lr" => self.schedule.base_lr = parse(value).map_err(wrap)?,
            "schedule.warmup_epochs" => self.schedule.warmup_epochs = parse(value).map_err(wrap)?,
            "schedule.decay_factor" => self.schedule.decay_factor = parse(value).map_err(wrap)?,
            "schedule.decay_interval" => self.schedule.decay_interval = parse(value).map_err(wrap)?,
            "schedule.max_epochs" => self.schedule.max_epochs = parse(value).map_err(wrap)?,
            "train.augment" => self.augment = parse_bool(value).map_err(wrap)?,
            "train.freeze_stem" => self.freeze_stem = parse_bool(value).map_err(wrap)?,
            "synth.num_places" => self.synth.num_places = parse(value).map_err(wrap)?,
            "synth.eval_places" => self.synth.eval_places = parse(value).map_err(wrap)?,
            "synth.views_per_place" => self.synth.views_per_place = parse(value).map_err(wrap)?,
            "synth.reference_views" => self.synth.reference_views = parse(value).map_err(wrap)?,
            "synth.spacing_m" => self.synth.spacing_m = parse(value).map_err(wrap)?,
            "synth.position_jitter_m" => self.synth.position_jitter_m = parse(value).map_err(wrap)?,
            "synth.frame_stride" => {
                let s: u64 = parse(value).map_err(wrap)?;
                self.synth.frame_stride = (s > 0).then_some(s);
            }
            "synth.jitter.max_shift" => self.synth.jitter.max_shift = parse(value).map_err(wrap)?,
            "synth.jitter.brightness" => self.synth.jitter.brightness = parse(value).map_err(wrap)?,
            "synth.jitter.contrast" => self.synth.jitter.contrast = parse(value).map_err(wrap)?,
            "synth.jitter.noise_sigma" => self.synth.jitter.noise_sigma = parse(value).map_err(wrap)?,
            "eval.ks" => self.ks = parse_list(value).map_err(wrap)?,
            "eval.threshold_m" => self.threshold_m = parse(value).map_err(wrap)?,
            "eval.frame_threshold" => self.frame_threshold = parse(value).map_err(wrap)?,
            "attn.block" => self.attn_block = parse(value).map_err(wrap)?,
            "attn.queries" => self.attn_queries = parse_list(value).map_err(wrap)?,
            "path.manifest" => self.manifest = opt_path(value),
            "path.checkpoint" => self.checkpoint = opt_path(value),
            "path.image" => self.image = opt_path(value),
            "path.queries" => self.queries = opt_path(value),
            "path.references" => self.references = opt_path(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.synth;
        let values = vec![
            self.seed.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            match self.input {
                InputKind::Image => "image".into(),
                InputKind::Features => "features".into(),
            },
            list(&self.stem_channels),
            self.feature_dim.to_string(),
            self.grid.map(|(r, c)| format!("{r}x{c}")).unwrap_or_else(|| "none".into()),
            m.num_blocks.to_string(),
            m.queries_per_block.to_string(),
            m.model_dim.to_string(),
            m.num_heads.to_string(),
            m.ffn_mult.to_string(),
            m.channel_proj.to_string(),
            m.row_proj.unwrap_or(0).to_string(),
            match m.reduction {
                Reduction::Conv3x3 => "conv".into(),
                Reduction::Linear => "linear".into(),
            },
            m.self_attention.to_string(),
            m.output_norm.to_string(),
            self.batch.places_per_batch.to_string(),
            self.batch.images_per_place.to_string(),
            self.loss.alpha.to_string(),
            self.loss.beta.to_string(),
            self.loss.lambda.to_string(),
            self.loss.epsilon.to_string(),
            self.optimizer.beta1.to_string(),
            self.optimizer.beta2.to_string(),
            self.optimizer.eps.to_string(),
            self.optimizer.weight_decay.to_string(),
            self.schedule.base_lr.to_string(),
            self.schedule.warmup_epochs.to_string(),
            self.schedule.decay_factor.to_string(),
            self.schedule.decay_interval.to_string(),
            self.schedule.max_epochs.to_string(),
            self.augment.to_string(),
            self.freeze_stem.to_string(),
            s.num_places.to_string(),
            s.eval_places.to_string(),
            s.views_per_place.to_string(),
            s.reference_views.to_string(),
            s.spacing_m.to_string(),
            s.position_jitter_m.to_string(),
            s.frame_stride.unwrap_or(0).to_string(),
            s.jitter.max_shift.to_string(),
            s.jitter.brightness.to_string(),
            s.jitter.contrast.to_string(),
            s.jitter.noise_sigma.to_string(),
            list(&self.ks),
            self.threshold_m.to_string(),
            self.frame_threshold.to_string(),
            self.attn_block.to_string(),
            list(&self.attn_queries),
            path(&self.manifest),
            path(&self.checkpoint),
            path(&self.image),
            path(&self.queries),
            path(&self.references),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// The effective configuration as a parseable config file.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        let input = match self.input {
            InputKind::Image => InputMode::Image {
                height: self.height,
                width: self.width,
                stem_channels: self.stem_channels.clone(),
            },
            InputKind::Features => InputMode::Features {
                feature_dim: self.feature_dim,
                grid: self.grid,
            },
        };
        ModelConfig {
            input,
            ..self.model.clone()
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            height: self.height,
            width: self.width,
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self, rule: MatchRule) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            loss: self.loss,
            optimizer: self.optimizer,
            schedule: self.schedule,
            augment: self.augment.then_some(self.synth.jitter),
            freeze_stem: self.freeze_stem,
            match_rule: rule,
            seed: self.seed,
        }
    }

    /// Match rule for a manifest's ground-truth kind.
    pub fn match_rule(&self, gt_kind: Option<&str>) -> MatchRule {
        match gt_kind {
            Some("frame") => MatchRule::Frames {
                threshold: self.frame_threshold,
            },
            _ => MatchRule::Distance {
                threshold_m: self.threshold_m,
            },
        }
    }

    pub fn jitter(&self) -> ViewJitter {
        self.synth.jitter
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);

        let mut custom = RunConfig::default();
        for (k, v) in [
            ("model.input", "features"),
            ("model.grid", "4x5"),
            ("model.row_proj", "0"),
            ("model.reduction", "linear"),
            ("synth.frame_stride", "3"),
            ("path.manifest", "data/manifest.csv"),
            ("schedule.base_lr", "0.00012345678901234"),
            ("eval.ks", "1,2,3"),
        ] {
            custom.set(k, v).unwrap();
        }
        assert_eq!(RunConfig::parse(&custom.to_text()).unwrap(), custom);
    }

    #[test]
    fn every_key_is_settable_and_echoed_once() {
        let entries = RunConfig::default().entries();
        assert_eq!(entries.len(), KEYS.len());
        for (key, value) in entries {
            RunConfig::default().set(key, &value).unwrap();
        }
        let mut names: Vec<_> = KEYS.iter().map(|(k, _)| k).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
    }

    #[test]
    fn bad_input_is_reported_with_line_and_key() {
        let e = RunConfig::parse("seed = 1\nmodel.depth = 3\n").unwrap_err();
        assert_eq!(e, "line 2: unknown key `model.depth`");
        let e = RunConfig::parse("# c\n\nmodel.dim = x\n").unwrap_err();
        assert_eq!(e, "line 3: key `model.dim`: cannot parse `x`");
        let e = RunConfig::parse("seed = 1\nseed = 2").unwrap_err();
        assert_eq!(e, "line 2: key `seed` already set on line 1");
        assert!(RunConfig::parse("seed 1").unwrap_err().contains("expected `key = value`"));
        assert!(RunConfig::parse("model.self_attention = yes").is_err());
    }

    #[test]
    fn derived_configs() {
        let mut cfg = RunConfig::parse("model.input = features\nmodel.feature_dim = 12\nmodel.grid = 3x4\nseed = 9").unwrap();
        assert_eq!(
            cfg.model_config().input,
            InputMode::Features {
                feature_dim: 12,
                grid: Some((3, 4))
            }
        );
        assert_eq!(cfg.synthetic_config().seed, 9);
        assert_eq!(cfg.train_config(MatchRule::default()).seed, 9);
        assert_eq!(cfg.match_rule(Some("frame")), MatchRule::Frames { threshold: 10 });
        cfg.augment = true;
        assert_eq!(cfg.train_config(MatchRule::default()).augment, Some(cfg.jitter()));
    }
}
