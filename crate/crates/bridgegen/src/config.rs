//! Plain-text `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bridgegen_core::ballsim::{BoxParams, DatasetConfig, Layout};
use bridgegen_core::constraints::ConstraintSpec;
use bridgegen_core::gmm::GaussianMixture;
use bridgegen_core::nnet::LevelEmbedding;
use bridgegen_core::samplers::Method;
use bridgegen_core::schedules::{LossWeighting, TrainTimeDist};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("output paths must be distinct: `{0}` is used twice")]
    DuplicatePath(String),
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Gmm2d,
    Balls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Diffusion,
    FlowMatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Mbm,
    Mbmpp,
    Am,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub method: Method,
    pub seed: u64,

    pub dataset: PathBuf,
    pub pretrained: PathBuf,
    pub finetuned: PathBuf,
    pub samples: PathBuf,
    pub metrics: PathBuf,
    pub loss_log: PathBuf,
    pub plot: PathBuf,

    pub n_balls: usize,
    pub n_timesteps: usize,
    pub n_scenarios: usize,
    pub max_speed: f64,

    pub constraint_kind: String,
    pub constraint_radius: f64,
    pub constraint_box_halfwidth: f64,
    pub constraint_weights: [f64; 2],
    pub constraint_target: Vec<f64>,
    pub constraint_normal: Vec<f64>,
    pub constraint_offset: f64,

    pub gmm_weights: Vec<f64>,
    pub gmm_means: Vec<Vec<f64>>,
    pub gmm_vars: Vec<f64>,
    pub gmm_n: usize,

    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
    pub fm_steps: usize,
    pub s_churn: f64,
    pub train_time_dist: String,
    pub loss_weighting: String,
    pub logitnormal_mu: f64,
    pub logitnormal_sd: f64,

    pub backbone: Backbone,
    pub hidden: Vec<usize>,
    pub embed_n_freq: usize,
    pub embed_base: f64,
    pub embed_growth: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub grad_clip: f64,
    pub log_every: usize,

    pub mode: FinetuneMode,
    pub gamma_kappa: f64,
    pub bridge_hidden: Vec<usize>,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,

    pub guidance_rho: f64,

    pub am_hidden: Vec<usize>,
    pub am_outer: usize,
    pub am_batch: usize,
    pub am_lr: f64,
    pub am_terminal_weight: f64,
    /// Feed the control head the constraint gradient at the denoised estimate.
    pub am_guided: bool,

    pub n_samples: usize,
    pub relbo_k: usize,
    pub tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Balls,
            method: Method::DmBaseline,
            seed: 0,
            dataset: "out/dataset.csv".into(),
            pretrained: "out/pretrained.bgnet".into(),
            finetuned: "out/finetuned.bgnet".into(),
            samples: "out/samples.csv".into(),
            metrics: "out/metrics.csv".into(),
            loss_log: "out/loss.csv".into(),
            plot: "out/plot.svg".into(),
            n_balls: 3,
            n_timesteps: 20,
            n_scenarios: 5000,
            max_speed: 0.05,
            constraint_kind: "balls".into(),
            constraint_radius: 0.08,
            constraint_box_halfwidth: 1.0,
            constraint_weights: [1.0, 1.0],
            constraint_target: vec![0.0, 0.0],
            constraint_normal: vec![1.0, 0.0],
            constraint_offset: 0.0,
            gmm_weights: vec![0.3, 0.3, 0.4],
            gmm_means: vec![vec![-1.5, 0.0], vec![1.5, 0.5], vec![0.0, -1.5]],
            gmm_vars: vec![0.1, 0.1, 0.1],
            gmm_n: 500,
            sigma_min: 3e-5,
            sigma_max: 80.0,
            n_steps: 200,
            fm_steps: 50,
            s_churn: 10.0,
            train_time_dist: "log-uniform".into(),
            loss_weighting: "unit".into(),
            logitnormal_mu: -0.6,
            logitnormal_sd: 1.6,
            backbone: Backbone::Diffusion,
            hidden: vec![256; 4],
            embed_n_freq: 8,
            embed_base: 0.1,
            embed_growth: 2.0,
            batch_size: 32,
            lr: 3e-4,
            steps: 2000,
            grad_clip: 1.0,
            log_every: 10,
            mode: FinetuneMode::Mbmpp,
            gamma_kappa: 0.05,
            bridge_hidden: vec![128, 128],
            finetune_steps: 1000,
            finetune_lr: 3e-5,
            finetune_batch: 32,
            guidance_rho: 0.1,
            am_hidden: vec![128, 128],
            am_outer: 200,
            am_batch: 32,
            am_lr: 1e-3,
            am_terminal_weight: 100.0,
            am_guided: true,
            n_samples: 2000,
            relbo_k: 2000,
            tol: 1e-3,
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.to_string(), msg: msg.into() }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| bad(key, e.to_string()))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
}

fn vectors(key: &str, v: &str) -> Result<Vec<Vec<f64>>, ConfigError> {
    v.split(';').filter(|s| !s.trim().is_empty()).map(|s| list(key, s)).collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "task" => {
                self.task = match v {
                    "gmm2d" => Task::Gmm2d,
                    "balls" => Task::Balls,
                    _ => return Err(bad(key, "expected gmm2d or balls")),
                }
            }
            "method" => self.method = Method::parse(v).map_err(|e| bad(key, e.to_string()))?,
            "seed" => self.seed = num(key, v)?,
            "dataset" => self.dataset = v.into(),
            "pretrained" => self.pretrained = v.into(),
            "finetuned" => self.finetuned = v.into(),
            "samples" => self.samples = v.into(),
            "metrics" => self.metrics = v.into(),
            "loss_log" => self.loss_log = v.into(),
            "plot" => self.plot = v.into(),
            "n_balls" => self.n_balls = num(key, v)?,
            "n_timesteps" => self.n_timesteps = num(key, v)?,
            "n_scenarios" => self.n_scenarios = num(key, v)?,
            "max_speed" => self.max_speed = num(key, v)?,
            "constraint.kind" => self.constraint_kind = v.to_string(),
            "constraint.radius" => self.constraint_radius = num(key, v)?,
            "constraint.box_halfwidth" => self.constraint_box_halfwidth = num(key, v)?,
            "constraint.weights" => {
                let w: Vec<f64> = list(key, v)?;
                self.constraint_weights = w.try_into().map_err(|_| bad(key, "expected two weights"))?;
            }
            "constraint.target" => self.constraint_target = list(key, v)?,
            "constraint.normal" => self.constraint_normal = list(key, v)?,
            "constraint.offset" => self.constraint_offset = num(key, v)?,
            "gmm.weights" => self.gmm_weights = list(key, v)?,
            "gmm.means" => self.gmm_means = vectors(key, v)?,
            "gmm.vars" => self.gmm_vars = list(key, v)?,
            "gmm.n" => self.gmm_n = num(key, v)?,
            "sigma_min" => self.sigma_min = num(key, v)?,
            "sigma_max" => self.sigma_max = num(key, v)?,
            "n_steps" => self.n_steps = num(key, v)?,
            "fm_steps" => self.fm_steps = num(key, v)?,
            "s_churn" => self.s_churn = num(key, v)?,
            "train_time_dist" => self.train_time_dist = v.to_string(),
            "loss_weighting" => self.loss_weighting = v.to_string(),
            "logitnormal_mu" => self.logitnormal_mu = num(key, v)?,
            "logitnormal_sd" => self.logitnormal_sd = num(key, v)?,
            "backbone" => {
                self.backbone = match v {
                    "dm" => Backbone::Diffusion,
                    "fm" => Backbone::FlowMatching,
                    _ => return Err(bad(key, "expected dm or fm")),
                }
            }
            "hidden" => self.hidden = list(key, v)?,
            "embed.n_freq" => self.embed_n_freq = num(key, v)?,
            "embed.base" => self.embed_base = num(key, v)?,
            "embed.growth" => self.embed_growth = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "mode" => {
                self.mode = match v {
                    "mbm" => FinetuneMode::Mbm,
                    "mbmpp" => FinetuneMode::Mbmpp,
                    "am" => FinetuneMode::Am,
                    _ => return Err(bad(key, "expected mbm, mbmpp or am")),
                }
            }
            "gamma_kappa" => self.gamma_kappa = num(key, v)?,
            "bridge_hidden" => self.bridge_hidden = list(key, v)?,
            "finetune_steps" => self.finetune_steps = num(key, v)?,
            "finetune_lr" => self.finetune_lr = num(key, v)?,
            "finetune_batch" => self.finetune_batch = num(key, v)?,
            "guidance_rho" => self.guidance_rho = num(key, v)?,
            "am.hidden" => self.am_hidden = list(key, v)?,
            "am.outer" => self.am_outer = num(key, v)?,
            "am.batch" => self.am_batch = num(key, v)?,
            "am.lr" => self.am_lr = num(key, v)?,
            "am.terminal_weight" => self.am_terminal_weight = num(key, v)?,
            "am.guided" => self.am_guided = num(key, v)?,
            "n_samples" => self.n_samples = num(key, v)?,
            "relbo_k" => self.relbo_k = num(key, v)?,
            "tol" => self.tol = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Serializes every key; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let task = match self.task {
            Task::Gmm2d => "gmm2d",
            Task::Balls => "balls",
        };
        let backbone = match self.backbone {
            Backbone::Diffusion => "dm",
            Backbone::FlowMatching => "fm",
        };
        let mode = match self.mode {
            FinetuneMode::Mbm => "mbm",
            FinetuneMode::Mbmpp => "mbmpp",
            FinetuneMode::Am => "am",
        };
        let means = self.gmm_means.iter().map(|m| join(m)).collect::<Vec<_>>().join(";");
        let pairs: Vec<(&str, String)> = vec![
            ("task", task.into()),
            ("method", self.method.name().into()),
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("pretrained", self.pretrained.display().to_string()),
            ("finetuned", self.finetuned.display().to_string()),
            ("samples", self.samples.display().to_string()),
            ("metrics", self.metrics.display().to_string()),
            ("loss_log", self.loss_log.display().to_string()),
            ("plot", self.plot.display().to_string()),
            ("n_balls", self.n_balls.to_string()),
            ("n_timesteps", self.n_timesteps.to_string()),
            ("n_scenarios", self.n_scenarios.to_string()),
            ("max_speed", self.max_speed.to_string()),
            ("constraint.kind", self.constraint_kind.clone()),
            ("constraint.radius", self.constraint_radius.to_string()),
            ("constraint.box_halfwidth", self.constraint_box_halfwidth.to_string()),
            ("constraint.weights", join(&self.constraint_weights)),
            ("constraint.target", join(&self.constraint_target)),
            ("constraint.normal", join(&self.constraint_normal)),
            ("constraint.offset", self.constraint_offset.to_string()),
            ("gmm.weights", join(&self.gmm_weights)),
            ("gmm.means", means),
            ("gmm.vars", join(&self.gmm_vars)),
            ("gmm.n", self.gmm_n.to_string()),
            ("sigma_min", self.sigma_min.to_string()),
            ("sigma_max", self.sigma_max.to_string()),
            ("n_steps", self.n_steps.to_string()),
            ("fm_steps", self.fm_steps.to_string()),
            ("s_churn", self.s_churn.to_string()),
            ("train_time_dist", self.train_time_dist.clone()),
            ("loss_weighting", self.loss_weighting.clone()),
            ("logitnormal_mu", self.logitnormal_mu.to_string()),
            ("logitnormal_sd", self.logitnormal_sd.to_string()),
            ("backbone", backbone.into()),
            ("hidden", join(&self.hidden)),
            ("embed.n_freq", self.embed_n_freq.to_string()),
            ("embed.base", self.embed_base.to_string()),
            ("embed.growth", self.embed_growth.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("steps", self.steps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("log_every", self.log_every.to_string()),
            ("mode", mode.into()),
            ("gamma_kappa", self.gamma_kappa.to_string()),
            ("bridge_hidden", join(&self.bridge_hidden)),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_batch", self.finetune_batch.to_string()),
            ("guidance_rho", self.guidance_rho.to_string()),
            ("am.hidden", join(&self.am_hidden)),
            ("am.outer", self.am_outer.to_string()),
            ("am.batch", self.am_batch.to_string()),
            ("am.lr", self.am_lr.to_string()),
            ("am.terminal_weight", self.am_terminal_weight.to_string()),
            ("am.guided", self.am_guided.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("relbo_k", self.relbo_k.to_string()),
            ("tol", self.tol.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Checks cross-key invariants.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let outs = [&self.pretrained, &self.finetuned, &self.samples, &self.metrics, &self.loss_log, &self.plot];
        let mut seen = BTreeSet::new();
        for p in outs {
            if !seen.insert(p) {
                return Err(ConfigError::DuplicatePath(p.display().to_string()));
            }
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(bad("sigma_min", "need 0 < sigma_min < sigma_max"));
        }
        if self.n_steps < 2 || self.fm_steps < 2 {
            return Err(bad("n_steps", "need at least 2 sampler steps"));
        }
        if self.hidden.is_empty() {
            return Err(bad("hidden", "need at least one hidden layer"));
        }
        if !(self.gamma_kappa >= 0.0) {
            return Err(bad("gamma_kappa", "must be non-negative"));
        }
        if !(self.tol >= 0.0) {
            return Err(bad("tol", "must be non-negative"));
        }
        if self.task == Task::Gmm2d {
            self.mixture()?;
        }
        self.constraint()?;
        self.train_dist()?;
        self.weighting()?;
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout { n_balls: self.n_balls, n_steps: self.n_timesteps }
    }

    pub fn box_params(&self) -> BoxParams {
        BoxParams { radius: self.constraint_radius, half_width: self.constraint_box_halfwidth }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_scenarios: self.n_scenarios,
            layout: self.layout(),
            params: self.box_params(),
            max_speed: self.max_speed,
        }
    }

    pub fn dim(&self) -> usize {
        match self.task {
            Task::Balls => self.layout().dim(),
            Task::Gmm2d => 2,
        }
    }

    pub fn mixture(&self) -> Result<GaussianMixture, ConfigError> {
        GaussianMixture::isotropic(self.gmm_weights.clone(), self.gmm_means.clone(), self.gmm_vars.clone())
            .map_err(|e| bad("gmm.weights", e.to_string()))
    }

    pub fn constraint(&self) -> Result<ConstraintSpec, ConfigError> {
        match self.constraint_kind.as_str() {
            "balls" => Ok(ConstraintSpec::balls(
                self.layout(),
                self.constraint_radius,
                self.constraint_box_halfwidth,
                self.constraint_weights,
            )),
            "quadratic" => Ok(ConstraintSpec::QuadraticToPoint { target: self.constraint_target.clone() }),
            "halfplane" => {
                Ok(ConstraintSpec::HalfPlane { normal: self.constraint_normal.clone(), offset: self.constraint_offset })
            }
            other => Err(bad("constraint.kind", format!("unknown kind `{other}`"))),
        }
    }

    pub fn train_dist(&self) -> Result<TrainTimeDist, ConfigError> {
        match self.train_time_dist.as_str() {
            "log-uniform" => Ok(TrainTimeDist::LogUniformSigma { sigma_min: self.sigma_min, sigma_max: self.sigma_max }),
            "logit-normal" => Ok(TrainTimeDist::LogitNormal { mu: self.logitnormal_mu, sd: self.logitnormal_sd }),
            other => Err(bad("train_time_dist", format!("unknown distribution `{other}`"))),
        }
    }

    pub fn weighting(&self) -> Result<LossWeighting, ConfigError> {
        match self.loss_weighting.as_str() {
            "unit" => Ok(LossWeighting::Unit),
            "inverse-variance" => Ok(LossWeighting::InverseVariance),
            other => Err(bad("loss_weighting", format!("unknown weighting `{other}`"))),
        }
    }

    /// Training-level distribution actually used by a backbone objective:
    /// flow matching always draws logit-normal times.
    pub fn objective_dist(&self) -> Result<TrainTimeDist, ConfigError> {
        match self.backbone {
            Backbone::Diffusion => self.train_dist(),
            Backbone::FlowMatching => Ok(TrainTimeDist::LogitNormal { mu: self.logitnormal_mu, sd: self.logitnormal_sd }),
        }
    }

    pub fn embedding(&self) -> LevelEmbedding {
        LevelEmbedding { n_freq: self.embed_n_freq, base_freq: self.embed_base, growth: self.embed_growth }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.hidden = vec![32, 16];
        c.gmm_means = vec![vec![1.0, 2.0], vec![-0.5, 0.25]];
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert_eq!(RunConfig::from_text("nope = 1"), Err(ConfigError::UnknownKey("nope".into())));
        assert!(matches!(RunConfig::from_text("seed"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::from_text("seed = x"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::from_text("# run\nseed = 3 # master\n\nmethod = dm-mbmpp\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.method, Method::DmMbmpp);
        c.apply_override("lr=0.5").unwrap();
        assert_eq!(c.lr, 0.5);
    }

    #[test]
    fn duplicate_outputs_rejected() {
        let mut c = RunConfig::default();
        c.metrics = c.samples.clone();
        assert!(matches!(c.validate(), Err(ConfigError::DuplicatePath(_))));
        assert!(RunConfig::default().validate().is_ok());
    }
}
