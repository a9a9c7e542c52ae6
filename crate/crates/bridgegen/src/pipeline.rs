//! Experiment stages. Each stage has an in-memory form used by tests and a
//! file-backed `cmd_*` form used by the command line.

use anyhow::{bail, Context, Result};
use bridgegen_core::adjoint::{am_finetune, AmConfig, ControlContext, ControlNet, ControlledDenoiser, ScoreDrift, TimeGrid};
use bridgegen_core::ballsim::{generate_dataset, Scenario};
use bridgegen_core::constraints::{loss_value, ConstraintSpec};
use bridgegen_core::denoiser::Denoiser;
use bridgegen_core::metrics::{directed_hausdorff, infraction_rates, position_points, relbo, MetricsReport, RelboStream};
use bridgegen_core::nnet::{BridgeNet, DenoiserNet};
use bridgegen_core::objectives::{train, BridgedModel, Objective, TrainConfig};
use bridgegen_core::rng::{derive_seed, seeded};
use bridgegen_core::samplers::{sample, Guided, Method, ModelContext, ModelRef, SamplerSpec};
use bridgegen_core::schedules::{GammaSchedule, NoiseSchedule};

use crate::checkpoint::{Block, Checkpoint, ModelKind};
use crate::config::{Backbone, FinetuneMode, RunConfig, Task};
use crate::formats::{self, MetricsRow};

pub fn stage_seed(cfg: &RunConfig, stage: &str) -> u64 {
    derive_seed(cfg.seed, stage)
}

pub enum Dataset {
    Balls(Vec<Scenario>),
    Points(Vec<Vec<f64>>),
}

impl Dataset {
    pub fn states(&self) -> Vec<Vec<f64>> {
        match self {
            Dataset::Balls(s) => s.iter().map(|s| s.states.clone()).collect(),
            Dataset::Points(p) => p.clone(),
        }
    }
}

pub fn generate_data(cfg: &RunConfig) -> Result<Dataset> {
    let seed = stage_seed(cfg, "gen-data");
    Ok(match cfg.task {
        Task::Balls => Dataset::Balls(generate_dataset(&cfg.dataset_config(), seed)?),
        Task::Gmm2d => {
            let g = cfg.mixture()?;
            let mut r = seeded(seed);
            Dataset::Points((0..cfg.gmm_n).map(|_| g.sample(&mut r)).collect())
        }
    })
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    match generate_data(cfg)? {
        Dataset::Balls(s) => formats::write_ball_dataset(&cfg.dataset, &s),
        Dataset::Points(p) => formats::write_points(&cfg.dataset, &p),
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    match cfg.task {
        Task::Balls => formats::read_ball_dataset(&cfg.dataset, cfg.layout()),
        Task::Gmm2d => formats::read_points(&cfg.dataset),
    }
}

fn train_config(cfg: &RunConfig, steps: usize, lr: f64, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        lr,
        steps,
        max_grad_norm: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
    }
}

fn objective(cfg: &RunConfig) -> Result<Objective> {
    let dist = cfg.objective_dist()?;
    Ok(match cfg.backbone {
        Backbone::Diffusion => Objective::Dsm { dist, weighting: cfg.weighting()? },
        Backbone::FlowMatching => Objective::FlowMatching { dist, sigma_max: cfg.sigma_max },
    })
}

fn logger<'a>(cfg: &RunConfig, log: &'a mut Vec<(usize, f64)>) -> impl FnMut(usize, f64) + 'a {
    let every = cfg.log_every.max(1);
    move |step, loss| {
        if step % every == 0 {
            log.push((step, loss));
        }
    }
}

/// Pretrains a backbone with the configured objective; returns the network
/// and the logged losses.
pub fn pretrain(cfg: &RunConfig, data: &[Vec<f64>]) -> Result<(DenoiserNet, Vec<(usize, f64)>)> {
    let seed = stage_seed(cfg, "train");
    let net = DenoiserNet::new(cfg.dim(), cfg.embedding(), &cfg.hidden, &mut seeded(seed))?;
    let gamma = GammaSchedule::new(0.0, cfg.sigma_max)?;
    let mut model = BridgedModel::pretrain(net, cfg.constraint()?, gamma);
    let mut log = Vec::new();
    let tc = train_config(cfg, cfg.steps, cfg.lr, cfg.batch_size);
    train(&mut model, data, objective(cfg)?, tc, derive_seed(seed, "batches"), logger(cfg, &mut log))?;
    Ok((model.backbone, log))
}

pub fn pretrain_kind(cfg: &RunConfig) -> ModelKind {
    match cfg.backbone {
        Backbone::Diffusion => ModelKind::PretrainDm,
        Backbone::FlowMatching => ModelKind::PretrainFm,
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let (net, log) = pretrain(cfg, &data)?;
    Checkpoint { kind: pretrain_kind(cfg), kappa: 0.0, blocks: vec![Block::Backbone(net)] }.save(&cfg.pretrained)?;
    formats::write_loss_log(&cfg.loss_log, &log)
}

/// Fine-tunes a pretrained backbone with the configured mode.
pub fn finetune(cfg: &RunConfig, backbone: &DenoiserNet, data: &[Vec<f64>]) -> Result<(Checkpoint, Vec<(usize, f64)>)> {
    let seed = stage_seed(cfg, "finetune");
    let constraint = cfg.constraint()?;
    let gamma = GammaSchedule::new(cfg.gamma_kappa, cfg.sigma_max)?;
    let mut log = Vec::new();
    let tc = train_config(cfg, cfg.finetune_steps, cfg.finetune_lr, cfg.finetune_batch);
    let batches = derive_seed(seed, "batches");
    let ck = match cfg.mode {
        FinetuneMode::Mbm => {
            if cfg.backbone != Backbone::Diffusion {
                bail!("mode mbm fine-tunes a diffusion backbone");
            }
            let mut m = BridgedModel::mbm(backbone.clone(), constraint, gamma);
            train(&mut m, data, objective(cfg)?, tc, batches, logger(cfg, &mut log))?;
            Checkpoint { kind: ModelKind::Mbm, kappa: cfg.gamma_kappa, blocks: vec![Block::Backbone(m.backbone)] }
        }
        FinetuneMode::Mbmpp => {
            let bridge = BridgeNet::new(cfg.dim(), &cfg.bridge_hidden, backbone.embed_width(), &mut seeded(seed))?;
            let fm = cfg.backbone == Backbone::FlowMatching;
            let mut m = BridgedModel::mbmpp(backbone.clone(), bridge, constraint, gamma, fm)?;
            train(&mut m, data, objective(cfg)?, tc, batches, logger(cfg, &mut log))?;
            let kind = if fm { ModelKind::MbmppFm } else { ModelKind::MbmppDm };
            let bridge = m.bridge.take().expect("mbmpp has a bridge");
            Checkpoint { kind, kappa: cfg.gamma_kappa, blocks: vec![Block::Backbone(m.backbone), Block::Bridge(bridge)] }
        }
        FinetuneMode::Am => {
            let mut r = seeded(seed);
            let control = if cfg.am_guided {
                ControlNet::guided(cfg.dim(), cfg.embedding(), &cfg.am_hidden, am_guide(cfg)?, &mut r)?
            } else {
                ControlNet::new(cfg.dim(), cfg.embedding(), &cfg.am_hidden, &mut r)?
            };
            let drift = ScoreDrift { net: backbone };
            let sched = NoiseSchedule::new(cfg.sigma_min, cfg.sigma_max, cfg.n_steps)?;
            let mut ctx = ControlContext {
                drift: &drift,
                grid: TimeGrid::from_noise(&sched),
                control,
                terminal: constraint,
                terminal_weight: cfg.am_terminal_weight,
                running: None,
                init_std: cfg.sigma_max,
            };
            let am = AmConfig {
                n_outer: cfg.am_outer,
                batch: cfg.am_batch,
                lr: cfg.am_lr,
                max_grad_norm: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
                seed: batches,
            };
            am_finetune(&mut ctx, am, logger(cfg, &mut log))?;
            Checkpoint {
                kind: ModelKind::Am,
                kappa: 0.0,
                blocks: vec![Block::Backbone(backbone.clone()), Block::Control(ctx.control)],
            }
        }
    };
    Ok((ck, log))
}

/// Terminal cost `g` of the AM run, read by a guided control head.
fn am_guide(cfg: &RunConfig) -> Result<ConstraintSpec> {
    Ok(ConstraintSpec::Composite(vec![(cfg.am_terminal_weight, cfg.constraint()?)]))
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    let pre = Checkpoint::load(&cfg.pretrained).context("fine-tuning needs a pretrained checkpoint")?;
    let expected = pretrain_kind(cfg);
    if pre.kind != expected {
        bail!("pretrained checkpoint holds {:?}, config asks for {:?}", pre.kind, expected);
    }
    let data = load_data(cfg)?;
    let (ck, log) = finetune(cfg, pre.backbone()?, &data)?;
    ck.save(&cfg.finetuned)?;
    formats::write_loss_log(&cfg.loss_log, &log)
}

/// Checkpoint kind a sampling method runs on.
pub fn required_kind(method: Method) -> ModelKind {
    match method {
        Method::DmBaseline | Method::DmMpgd => ModelKind::PretrainDm,
        Method::FmBaseline | Method::FmTfGuided => ModelKind::PretrainFm,
        Method::DmMbm => ModelKind::Mbm,
        Method::DmMbmpp => ModelKind::MbmppDm,
        Method::FmMbmpp => ModelKind::MbmppFm,
        Method::Am => ModelKind::Am,
    }
}

/// A checkpoint assembled into the model a method samples from.
pub struct Loaded {
    pub method: Method,
    backbone: DenoiserNet,
    bridged: Option<BridgedModel>,
    control: Option<ControlNet>,
    constraint: ConstraintSpec,
}

impl Loaded {
    pub fn new(cfg: &RunConfig, method: Method, ck: &Checkpoint) -> Result<Self> {
        if ck.kind != required_kind(method) {
            bail!("method {method} needs a {:?} checkpoint, got {:?}", required_kind(method), ck.kind);
        }
        let constraint = cfg.constraint()?;
        let backbone = ck.backbone()?.clone();
        let gamma = GammaSchedule::new(ck.kappa, cfg.sigma_max)?;
        let bridged = match ck.kind {
            ModelKind::Mbm => Some(BridgedModel::mbm(backbone.clone(), constraint.clone(), gamma)),
            ModelKind::MbmppDm | ModelKind::MbmppFm => Some(BridgedModel::mbmpp(
                backbone.clone(),
                ck.bridge()?.clone(),
                constraint.clone(),
                gamma,
                ck.kind == ModelKind::MbmppFm,
            )?),
            _ => None,
        };
        let control = if ck.kind == ModelKind::Am { Some(ck.control()?.clone().with_guide(am_guide(cfg)?)) } else { None };
        Ok(Self { method, backbone, bridged, control, constraint })
    }

    pub fn context<'a>(&'a self, cfg: &RunConfig) -> ModelContext<'a> {
        let model = match (&self.bridged, &self.control) {
            (Some(m), _) => ModelRef::Bridged(m),
            (None, Some(c)) => ModelRef::Controlled { net: &self.backbone, control: c },
            (None, None) => ModelRef::Plain(&self.backbone),
        };
        ModelContext { model, constraint: Some(&self.constraint), sigma_min: cfg.sigma_min, sigma_max: cfg.sigma_max }
    }

    /// The denoiser whose per-level predictions the method effectively uses.
    pub fn effective_denoiser<'a>(&'a self, cfg: &RunConfig) -> Box<dyn Denoiser + 'a> {
        match (self.method, &self.bridged, &self.control) {
            (_, Some(m), _) => Box::new(m),
            (_, None, Some(c)) => Box::new(ControlledDenoiser { net: &self.backbone, control: c }),
            (Method::DmMpgd | Method::FmTfGuided, None, None) => {
                Box::new(Guided { base: &self.backbone, constraint: &self.constraint, rho: cfg.guidance_rho })
            }
            _ => Box::new(&self.backbone),
        }
    }
}

pub fn sampler_spec(cfg: &RunConfig, method: Method, seed: u64) -> Result<SamplerSpec> {
    let steps = if method.is_flow_matching() { cfg.fm_steps } else { cfg.n_steps };
    Ok(SamplerSpec::new(method, steps, cfg.s_churn, cfg.guidance_rho, seed)?)
}

pub fn draw_samples(cfg: &RunConfig, loaded: &Loaded, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let spec = sampler_spec(cfg, loaded.method, seed)?;
    Ok(sample(&spec, &loaded.context(cfg), n)?)
}

fn checkpoint_for(cfg: &RunConfig, method: Method) -> Result<Checkpoint> {
    let path = match required_kind(method) {
        ModelKind::PretrainDm | ModelKind::PretrainFm => &cfg.pretrained,
        _ => &cfg.finetuned,
    };
    Checkpoint::load(path)
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let ck = checkpoint_for(cfg, cfg.method)?;
    let loaded = Loaded::new(cfg, cfg.method, &ck)?;
    let samples = draw_samples(cfg, &loaded, cfg.n_samples, stage_seed(cfg, "sample"))?;
    formats::write_samples(&cfg.samples, &samples)
}

/// Infraction rates, directed Hausdorff distance to the reference and relbo
/// of the method's effective denoiser on the shared stream.
pub fn evaluate(
    cfg: &RunConfig,
    loaded: &Loaded,
    samples: &[Vec<f64>],
    reference: &[Vec<f64>],
) -> Result<MetricsReport> {
    let (collision_rate, boundary_rate, gen, refs) = match cfg.task {
        Task::Balls => {
            let r = infraction_rates(samples, cfg.layout(), cfg.box_params(), cfg.tol)?;
            (r.collision_rate, r.boundary_rate, position_points(samples), position_points(reference))
        }
        Task::Gmm2d => {
            let c = cfg.constraint()?;
            let mut bad = 0usize;
            for s in samples {
                if loss_value(&c, s)? > 0.5 * cfg.tol * cfg.tol {
                    bad += 1;
                }
            }
            let pts = |v: &[Vec<f64>]| v.iter().map(|p| [p[0], p[1]]).collect::<Vec<_>>();
            (bad as f64 / samples.len().max(1) as f64, 0.0, pts(samples), pts(reference))
        }
    };
    let hdh = directed_hausdorff(&gen, &refs)?;
    let stream = RelboStream {
        k: cfg.relbo_k,
        sigma_min: cfg.sigma_min,
        sigma_max: cfg.sigma_max,
        seed: stage_seed(cfg, "relbo"),
    };
    let den = loaded.effective_denoiser(cfg);
    let relbo = relbo(den.as_ref(), reference, stream)?;
    Ok(MetricsReport { collision_rate, boundary_rate, hdh, relbo, n_samples: samples.len() })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let ck = checkpoint_for(cfg, cfg.method)?;
    let loaded = Loaded::new(cfg, cfg.method, &ck)?;
    let samples = formats::read_samples(&cfg.samples)?;
    let reference = load_data(cfg)?;
    let report = evaluate(cfg, &loaded, &samples, &reference)?;
    let row = MetricsRow { method: cfg.method.name().to_string(), report, seed: cfg.seed };
    // one row per (method, seed); re-evaluating replaces the old row
    let mut rows = if cfg.metrics.exists() { formats::read_metrics(&cfg.metrics)? } else { Vec::new() };
    rows.retain(|r| r.method != row.method || r.seed != row.seed);
    rows.push(row);
    formats::write_metrics(&cfg.metrics, &rows)
}
