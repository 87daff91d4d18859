//! Run configuration: a flat `key = value` file (UTF-8, `#` comments) whose
//! keys mirror the CLI flags. Unknown keys and malformed values are rejected
//! with the offending key named.

use crate::assembly::{HeadKind, ProbHeadKind};
use crate::bins::{AttractorConfig, AttractorVariant};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::CropKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterKind {
    Labeled,
    Trained,
    Auto,
}

impl RouterKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(RouterKind::Labeled),
            "trained" => Ok(RouterKind::Trained),
            "auto" => Ok(RouterKind::Auto),
            other => Err(Error::Config(format!("unknown router kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Labeled => "labeled",
            RouterKind::Trained => "trained",
            RouterKind::Auto => "auto",
        }
    }
}

/// Evaluation crop selection; `Auto` picks eigen for indoor rows and garg for
/// outdoor rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropChoice {
    Auto,
    Fixed(CropKind),
}

impl CropChoice {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(CropChoice::Auto)
        } else {
            Ok(CropChoice::Fixed(CropKind::parse(s)?))
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CropChoice::Auto => "auto",
            CropChoice::Fixed(k) => k.name(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // Stages.
    pub pretrain: bool,
    pub finetune: bool,
    // Training dataset.
    pub samples: usize,
    pub indoor_fraction: f64,
    pub data_seed: u64,
    pub height: usize,
    pub width: usize,
    pub labeled: bool,
    // Model.
    pub channels: usize,
    pub n_total: usize,
    pub head_kind: HeadKind,
    pub heads: usize,
    pub attractor: AttractorConfig,
    pub prob_head: ProbHeadKind,
    pub router: RouterKind,
    // Optimization.
    pub steps: usize,
    pub step_size: f64,
    pub batch: usize,
    pub pretrain_steps: usize,
    pub pretrain_step_size: f64,
    pub train_seed: u64,
    // Losses.
    pub loss: LossConfig,
    // Evaluation.
    pub eval_samples: usize,
    pub eval_indoor_fraction: f64,
    pub eval_seed: u64,
    pub eval_crop: CropChoice,
    pub flip_average: bool,
    pub cap_indoor: f64,
    pub cap_outdoor: f64,
    pub depth_floor: f64,
    // Outputs.
    pub out_checkpoint: String,
    pub out_metrics: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pretrain: false,
            finetune: true,
            samples: 2000,
            indoor_fraction: 0.5,
            data_seed: 1,
            height: 64,
            width: 64,
            labeled: true,
            channels: 32,
            n_total: 64,
            head_kind: HeadKind::Attractor,
            heads: 2,
            attractor: AttractorConfig::default(),
            prob_head: ProbHeadKind::Binomial,
            router: RouterKind::Labeled,
            steps: 400,
            step_size: 0.12,
            batch: 3,
            pretrain_steps: 150,
            pretrain_step_size: 0.05,
            train_seed: 0,
            loss: LossConfig::default(),
            eval_samples: 64,
            eval_indoor_fraction: 0.5,
            eval_seed: 9001,
            eval_crop: CropChoice::Auto,
            flip_average: false,
            cap_indoor: 10.0,
            cap_outdoor: 80.0,
            depth_floor: 1e-3,
            out_checkpoint: "out/model.zoec".into(),
            out_metrics: "out/metrics.csv".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected true/false, got '{value}'"))),
    }
}

impl RunConfig {
    /// Applies a single `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stage.pretrain" => self.pretrain = parse_bool(key, value)?,
            "stage.finetune" => self.finetune = parse_bool(key, value)?,
            "data.samples" => self.samples = parse_num(key, value)?,
            "data.indoor_fraction" => self.indoor_fraction = parse_num(key, value)?,
            "data.seed" => self.data_seed = parse_num(key, value)?,
            "data.height" => self.height = parse_num(key, value)?,
            "data.width" => self.width = parse_num(key, value)?,
            "data.labeled" => self.labeled = parse_bool(key, value)?,
            "model.channels" => self.channels = parse_num(key, value)?,
            "model.n_total" => self.n_total = parse_num(key, value)?,
            "model.head" => self.head_kind = HeadKind::parse(value)?,
            "model.heads" => self.heads = parse_num(key, value)?,
            "attractor.variant" => self.attractor.variant = AttractorVariant::parse(value)?,
            "attractor.alpha" => self.attractor.alpha = parse_num(key, value)?,
            "attractor.gamma" => self.attractor.gamma = parse_num(key, value)?,
            "attractor.counts" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "key '{key}': expected 4 comma-separated counts, got '{value}'"
                    )));
                }
                let mut counts = [0usize; 4];
                for (slot, part) in counts.iter_mut().zip(&parts) {
                    *slot = parse_num(key, part)?;
                }
                self.attractor.counts = counts;
            }
            "prob.head" => self.prob_head = ProbHeadKind::parse(value)?,
            "router.kind" => self.router = RouterKind::parse(value)?,
            "opt.steps" => self.steps = parse_num(key, value)?,
            "opt.step_size" => self.step_size = parse_num(key, value)?,
            "opt.batch" => self.batch = parse_num(key, value)?,
            "opt.pretrain_steps" => self.pretrain_steps = parse_num(key, value)?,
            "opt.pretrain_step_size" => self.pretrain_step_size = parse_num(key, value)?,
            "train.seed" => self.train_seed = parse_num(key, value)?,
            "loss.silog_lambda" => self.loss.silog_lambda = parse_num(key, value)?,
            "loss.silog_scale" => self.loss.silog_scale = parse_num(key, value)?,
            "loss.ssi_trim" => self.loss.ssi_trim = parse_num(key, value)?,
            "eval.samples" => self.eval_samples = parse_num(key, value)?,
            "eval.indoor_fraction" => self.eval_indoor_fraction = parse_num(key, value)?,
            "eval.seed" => self.eval_seed = parse_num(key, value)?,
            "eval.crop" => self.eval_crop = CropChoice::parse(value)?,
            "eval.flip_average" => self.flip_average = parse_bool(key, value)?,
            "eval.cap_indoor" => self.cap_indoor = parse_num(key, value)?,
            "eval.cap_outdoor" => self.cap_outdoor = parse_num(key, value)?,
            "eval.floor" => self.depth_floor = parse_num(key, value)?,
            "out.checkpoint" => self.out_checkpoint = value.to_string(),
            "out.metrics" => self.out_metrics = value.to_string(),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a whole config file body on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_str(text)?;
        Ok(cfg)
    }

    /// Applies assignments from a config file body onto `self`.
    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical serialization: fixed key order, parseable by `parse_str`.
    pub fn to_config_string(&self) -> String {
        let a = &self.attractor;
        format!(
            "stage.pretrain = {}\nstage.finetune = {}\n\
             data.samples = {}\ndata.indoor_fraction = {}\ndata.seed = {}\n\
             data.height = {}\ndata.width = {}\ndata.labeled = {}\n\
             model.channels = {}\nmodel.n_total = {}\nmodel.head = {}\nmodel.heads = {}\n\
             attractor.variant = {}\nattractor.alpha = {}\nattractor.gamma = {}\n\
             attractor.counts = {},{},{},{}\n\
             prob.head = {}\nrouter.kind = {}\n\
             opt.steps = {}\nopt.step_size = {}\nopt.batch = {}\n\
             opt.pretrain_steps = {}\nopt.pretrain_step_size = {}\ntrain.seed = {}\n\
             loss.silog_lambda = {}\nloss.silog_scale = {}\nloss.ssi_trim = {}\n\
             eval.samples = {}\neval.indoor_fraction = {}\neval.seed = {}\n\
             eval.crop = {}\neval.flip_average = {}\n\
             eval.cap_indoor = {}\neval.cap_outdoor = {}\neval.floor = {}\n\
             out.checkpoint = {}\nout.metrics = {}\n",
            self.pretrain,
            self.finetune,
            self.samples,
            self.indoor_fraction,
            self.data_seed,
            self.height,
            self.width,
            self.labeled,
            self.channels,
            self.n_total,
            self.head_kind.name(),
            self.heads,
            a.variant.name(),
            a.alpha,
            a.gamma,
            a.counts[0],
            a.counts[1],
            a.counts[2],
            a.counts[3],
            self.prob_head.name(),
            self.router.name(),
            self.steps,
            self.step_size,
            self.batch,
            self.pretrain_steps,
            self.pretrain_step_size,
            self.train_seed,
            self.loss.silog_lambda,
            self.loss.silog_scale,
            self.loss.ssi_trim,
            self.eval_samples,
            self.eval_indoor_fraction,
            self.eval_seed,
            self.eval_crop.name(),
            self.flip_average,
            self.cap_indoor,
            self.cap_outdoor,
            self.depth_floor,
            self.out_checkpoint,
            self.out_metrics,
        )
    }

    /// Cross-field validation, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("data.samples must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.indoor_fraction) {
            return Err(Error::Config("data.indoor_fraction must lie in [0,1]".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "data.height/data.width must be positive multiples of 32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels < 8 {
            return Err(Error::Config("model.channels must be at least 8".into()));
        }
        if self.n_total < 2 {
            return Err(Error::Config("model.n_total must be at least 2".into()));
        }
        if !(self.heads == 1 || self.heads == 2) {
            return Err(Error::Config(format!("model.heads must be 1 or 2, got {}", self.heads)));
        }
        self.attractor.validate()?;
        if !(0.0..=1.0).contains(&self.loss.silog_lambda) {
            return Err(Error::Config("loss.silog_lambda must lie in [0,1]".into()));
        }
        if self.loss.silog_scale <= 0.0 {
            return Err(Error::Config("loss.silog_scale must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.loss.ssi_trim) {
            return Err(Error::Config("loss.ssi_trim must lie in [0, 0.5)".into()));
        }
        if self.step_size <= 0.0 || self.pretrain_step_size <= 0.0 {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("opt.batch must be at least 1".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval.samples must be at least 1".into()));
        }
        if !(self.depth_floor > 0.0
            && self.cap_indoor > self.depth_floor
            && self.cap_outdoor > self.depth_floor)
        {
            return Err(Error::Config("eval caps must exceed eval.floor > 0".into()));
        }
        if self.finetune
            && !self.labeled
            && matches!(self.router, RouterKind::Labeled | RouterKind::Trained)
        {
            return Err(Error::Config(format!(
                "router.kind = {} requires labels, but data.labeled = false",
                self.router.name()
            )));
        }
        Ok(())
    }

    /// Depth range of head `index` under the current head count: two heads
    /// split indoor [0.5, 10] / outdoor [1, 80]; a single shared head covers
    /// [0.5, 80].
    pub fn head_depth_range(&self, index: usize) -> (f64, f64) {
        if self.heads == 1 {
            (0.5, 80.0)
        } else if index == 0 {
            (0.5, 10.0)
        } else {
            (1.0, 80.0)
        }
    }

    pub fn head_domain(&self, index: usize) -> &'static str {
        if self.heads == 1 {
            "shared"
        } else if index == 0 {
            "indoor"
        } else {
            "outdoor"
        }
    }
}
