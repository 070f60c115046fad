//! Training configuration and its plain-text `key = value` form.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::decoder::{DecoderConfig, NoiseConfig};
use crate::fixed_point::{SolverConfig, SolverMode};
use crate::grad::EstimatorKind;
use crate::losses::{FocalParams, LossWeights};
use crate::synth::DatasetSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Stacked non-shared refinement layers.
    Ffn,
    /// Weight-tied layer trained through time.
    Rnn,
    /// Weight-tied layer trained as an implicit fixed point.
    Deq,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ffn" => Ok(Self::Ffn),
            "rnn" => Ok(Self::Rnn),
            "deq" => Ok(Self::Deq),
            _ => Err("expected ffn, rnn or deq".into()),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ffn => "ffn",
            Self::Rnn => "rnn",
            Self::Deq => "deq",
        })
    }
}

/// Parses `exact`, `jfb` or `neumann:k`.
pub fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    match s {
        "exact" => Ok(EstimatorKind::exact()),
        "jfb" => Ok(EstimatorKind::Jfb),
        _ => {
            let k = s.strip_prefix("neumann:").ok_or("expected exact, jfb or neumann:k")?;
            let k: usize = k.parse().map_err(|_| format!("bad unroll depth `{k}`"))?;
            if k == 0 {
                return Err("unroll depth must be at least 1".into());
            }
            Ok(EstimatorKind::Neumann { k })
        }
    }
}

pub fn format_estimator(e: EstimatorKind) -> String {
    match e {
        EstimatorKind::ExactIft { .. } => "exact".into(),
        EstimatorKind::Jfb => "jfb".into(),
        EstimatorKind::Neumann { k } => format!("neumann:{k}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub t_train: usize,
    pub t_infer: usize,
    /// Supervision schedule `{1, C, 2C, ..., mC, T}`.
    pub sup_m: usize,
    pub sup_c: usize,
    /// Extra supervised refinement steps after the initialization layer.
    pub h: usize,
    /// Gradient estimator at each supervised snapshot; `neumann:k` unrolls
    /// `k` steps.
    pub estimator: EstimatorKind,
    pub noise: NoiseConfig,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub lr: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Refinement layers in ffn mode.
    pub ffn_layers: usize,
    pub decoder: DecoderConfig,
    pub data: DatasetSpec,
    pub eval_scenes: usize,
    /// Metrics row every this many steps.
    pub log_every: usize,
    /// Evaluate every this many epochs; 0 evaluates only after training.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Deq,
            t_train: 20,
            t_infer: 25,
            sup_m: 4,
            sup_c: 3,
            h: 2,
            estimator: EstimatorKind::rag(),
            noise: NoiseConfig::default(),
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            lr: 1e-3,
            cosine: true,
            weight_decay: 0.1,
            grad_clip: 0.0,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            solver: SolverConfig::fixed_steps(25),
            ffn_layers: 6,
            decoder: DecoderConfig::default(),
            data: DatasetSpec::default(),
            eval_scenes: 200,
            log_every: 1,
            eval_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

/// Every recognised key, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "mode",
    "t_train",
    "t_infer",
    "sup_m",
    "sup_c",
    "h",
    "estimator",
    "k",
    "perturb_prob",
    "sigma_q",
    "sigma_p_frac",
    "w_focal",
    "w_l1",
    "w_giou",
    "focal_gamma",
    "focal_alpha",
    "lr",
    "cosine",
    "weight_decay",
    "grad_clip",
    "batch_size",
    "epochs",
    "seed",
    "solver",
    "solver_tol",
    "anderson_m",
    "damping",
    "ffn_layers",
    "d_model",
    "num_queries",
    "num_classes",
    "points_refine",
    "points_init",
    "levels",
    "heads",
    "mix_channels",
    "image_height",
    "image_width",
    "num_scenes",
    "eval_scenes",
    "max_objects",
    "feature_noise",
    "log_every",
    "eval_every",
];

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let v = value;
        match key {
            "mode" => self.mode = parse(key, v)?,
            "t_train" => self.t_train = parse(key, v)?,
            "t_infer" => {
                self.t_infer = parse(key, v)?;
                self.solver.max_steps = self.t_infer;
            }
            "sup_m" => self.sup_m = parse(key, v)?,
            "sup_c" => self.sup_c = parse(key, v)?,
            "h" => self.h = parse(key, v)?,
            "estimator" => {
                self.estimator = parse_estimator(v).map_err(|reason| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    reason,
                })?
            }
            "k" => self.estimator = EstimatorKind::Neumann { k: parse(key, v)? },
            "perturb_prob" => self.noise.prob = parse(key, v)?,
            "sigma_q" => self.noise.sigma_q = parse(key, v)?,
            "sigma_p_frac" => self.noise.sigma_p_frac = parse(key, v)?,
            "w_focal" => self.weights.focal = parse(key, v)?,
            "w_l1" => self.weights.l1 = parse(key, v)?,
            "w_giou" => self.weights.giou = parse(key, v)?,
            "focal_gamma" => self.focal.gamma = parse(key, v)?,
            "focal_alpha" => self.focal.alpha = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "cosine" => self.cosine = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "solver" => {
                self.solver.mode = match v {
                    "naive" => SolverMode::Naive,
                    "anderson" => SolverMode::Anderson,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected naive or anderson".into(),
                        })
                    }
                }
            }
            "solver_tol" => {
                let tol: f64 = parse(key, v)?;
                self.solver.tol = (tol > 0.0).then_some(tol);
            }
            "anderson_m" => self.solver.anderson_m = parse(key, v)?,
            "damping" => self.solver.damping = parse(key, v)?,
            "ffn_layers" => self.ffn_layers = parse(key, v)?,
            "d_model" => self.decoder.d_model = parse(key, v)?,
            "num_queries" => self.decoder.num_queries = parse(key, v)?,
            "num_classes" => {
                self.decoder.num_classes = parse(key, v)?;
                self.data.num_classes = self.decoder.num_classes;
            }
            "points_refine" => self.decoder.points_refine = parse(key, v)?,
            "points_init" => self.decoder.points_init = parse(key, v)?,
            "levels" => self.decoder.levels = parse(key, v)?,
            "heads" => self.decoder.heads = parse(key, v)?,
            "mix_channels" => self.decoder.mix_channels = parse(key, v)?,
            "image_height" => {
                self.decoder.image_size.0 = parse(key, v)?;
                self.data.image_size.0 = self.decoder.image_size.0;
            }
            "image_width" => {
                self.decoder.image_size.1 = parse(key, v)?;
                self.data.image_size.1 = self.decoder.image_size.1;
            }
            "num_scenes" => self.data.num_scenes = parse(key, v)?,
            "eval_scenes" => self.eval_scenes = parse(key, v)?,
            "max_objects" => self.data.max_objects = parse(key, v)?,
            "feature_noise" => self.data.noise_std = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.decoder;
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("mode", self.mode.to_string());
        put("t_train", self.t_train.to_string());
        put("t_infer", self.t_infer.to_string());
        put("sup_m", self.sup_m.to_string());
        put("sup_c", self.sup_c.to_string());
        put("h", self.h.to_string());
        put("estimator", format_estimator(self.estimator));
        put("perturb_prob", self.noise.prob.to_string());
        put("sigma_q", self.noise.sigma_q.to_string());
        put("sigma_p_frac", self.noise.sigma_p_frac.to_string());
        put("w_focal", self.weights.focal.to_string());
        put("w_l1", self.weights.l1.to_string());
        put("w_giou", self.weights.giou.to_string());
        put("focal_gamma", self.focal.gamma.to_string());
        put("focal_alpha", self.focal.alpha.to_string());
        put("lr", self.lr.to_string());
        put("cosine", self.cosine.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put(
            "solver",
            match self.solver.mode {
                SolverMode::Naive => "naive".into(),
                SolverMode::Anderson => "anderson".into(),
            },
        );
        put("solver_tol", self.solver.tol.unwrap_or(0.0).to_string());
        put("anderson_m", self.solver.anderson_m.to_string());
        put("damping", self.solver.damping.to_string());
        put("ffn_layers", self.ffn_layers.to_string());
        put("d_model", d.d_model.to_string());
        put("num_queries", d.num_queries.to_string());
        put("num_classes", d.num_classes.to_string());
        put("points_refine", d.points_refine.to_string());
        put("points_init", d.points_init.to_string());
        put("levels", d.levels.to_string());
        put("heads", d.heads.to_string());
        put("mix_channels", d.mix_channels.to_string());
        put("image_height", d.image_size.0.to_string());
        put("image_width", d.image_size.1.to_string());
        put("num_scenes", self.data.num_scenes.to_string());
        put("eval_scenes", self.eval_scenes.to_string());
        put("max_objects", self.data.max_objects.to_string());
        put("feature_noise", self.data.noise_std.to_string());
        put("log_every", self.log_every.to_string());
        put("eval_every", self.eval_every.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.t_train == 0 || self.t_infer == 0 {
            return bad("t_train and t_infer must be at least 1".into());
        }
        if self.sup_c == 0 {
            return bad("sup_c must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise.prob) || !(0.0..=1.0).contains(&self.noise.sigma_q) {
            return bad("perturb_prob and sigma_q must lie in [0, 1]".into());
        }
        if !(self.noise.sigma_p_frac >= 0.0) {
            return bad("sigma_p_frac must be nonnegative".into());
        }
        if self.batch_size == 0 || self.ffn_layers == 0 || self.log_every == 0 {
            return bad("batch_size, ffn_layers and log_every must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("lr must be positive, weight_decay and grad_clip nonnegative".into());
        }
        if self.decoder.num_classes != self.data.num_classes || self.decoder.image_size != self.data.image_size {
            return bad("decoder and dataset disagree on classes or image size".into());
        }
        if self.eval_scenes == 0 {
            return bad("eval_scenes must be positive".into());
        }
        self.decoder_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.solver.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Decoder shape for this mode: `ffn_layers` independent refinement
    /// layers in ffn mode, one shared layer otherwise.
    pub fn decoder_config(&self) -> DecoderConfig {
        let layers = if self.mode == Mode::Ffn { self.ffn_layers } else { 1 };
        DecoderConfig { refine_layers: layers, ..self.decoder.clone() }
    }

    /// Refinement applications taped per scene in deq mode.
    pub fn unroll_depth(&self) -> usize {
        match self.estimator {
            EstimatorKind::Neumann { k } => k,
            EstimatorKind::Jfb => 1,
            EstimatorKind::ExactIft { .. } => 0,
        }
    }
}

/// `{1, C, 2C, ..., mC, T}` clamped to `T`, deduplicated and ascending.
pub fn supervision_positions(m: usize, c: usize, t: usize) -> Vec<usize> {
    let mut v: Vec<usize> = std::iter::once(1).chain((1..=m).map(|i| i * c)).chain(std::iter::once(t)).map(|p| p.min(t)).collect();
    v.sort_unstable();
    v.dedup();
    v
}
