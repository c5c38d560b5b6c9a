//! Stage-wise training: atlas replay and the segmentation baselines.

mod importance;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use atlas_autodiff::{Adam, AdamConfig, Tape, Tensor};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::datagen::{derive_seed, Corpus, LabeledImage, TaskDataset};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::imageproc::{apply_rigid, Interp, RigidTransform};
use crate::io::Container;
use crate::prototypes::{select_prototype, Prototype, PrototypeAtlas};
use crate::regnet::{loss_ce_logits, loss_reg, Head, Header, RegNet, RegNetConfig, SegNet, UNet};

pub use importance::{ewc_penalty, rwalk_update, ImportanceState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    AtlasReplay,
    Sequential,
    Rehearsal,
    Ewc,
    Rwalk,
    /// All tasks at once; the upper reference for the segmentation methods.
    Joint,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::AtlasReplay,
        Method::Sequential,
        Method::Rehearsal,
        Method::Ewc,
        Method::Rwalk,
        Method::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AtlasReplay => "atlas-replay",
            Method::Sequential => "sequential",
            Method::Rehearsal => "rehearsal",
            Method::Ewc => "ewc",
            Method::Rwalk => "rwalk",
            Method::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    pub fn uses_atlas(self) -> bool {
        self == Method::AtlasReplay
    }
}

/// How the training-time prototype is picked for each sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// The prototype of the task's own domain.
    Tag,
    /// The best global-NCC match after rigid alignment.
    BestNcc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f32,
    pub ewc_lambda: f32,
    pub rwalk_alpha: f32,
    pub rwalk_lambda: f32,
    pub rwalk_update_every: usize,
    pub rwalk_xi: f32,
    pub rehearsal_per_task: usize,
    pub selection: Selection,
    /// Atlas replay: the prototype is moved by a random rigid transform of
    /// up to this many pixels per axis for every training sample.
    pub proto_jitter_px: f32,
    pub proto_jitter_deg: f32,
    /// Atlas replay: per sample, the same random gamma and polarity change is
    /// applied to the prototype and the scan.
    pub intensity_aug: bool,
    pub net: RegNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::AtlasReplay,
            epochs: 250,
            batch: 4,
            seed: 0,
            lr: 1e-4,
            ewc_lambda: 2.2,
            rwalk_alpha: 0.9,
            rwalk_lambda: 1.7,
            rwalk_update_every: 20,
            rwalk_xi: 1e-3,
            rehearsal_per_task: 7,
            selection: Selection::Tag,
            proto_jitter_px: 6.0,
            proto_jitter_deg: 10.0,
            intensity_aug: true,
            net: RegNetConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        let lambdas = [
            self.ewc_lambda,
            self.rwalk_lambda,
            self.rwalk_xi,
            self.proto_jitter_px,
            self.proto_jitter_deg,
        ];
        if lambdas.iter().any(|v| !(*v >= 0.0)) || !(0.0..=1.0).contains(&self.rwalk_alpha) {
            return Err(Error::Config(
                "lambdas and jitter ranges must be non-negative, rwalk_alpha in [0, 1]".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "method={}\nepochs={}\nbatch={}\nseed={}\nlr={}\newc_lambda={}\nrwalk_alpha={}\nrwalk_lambda={}\nrwalk_update_every={}\nrwalk_xi={}\nrehearsal_per_task={}\nselection={}\nproto_jitter_px={}\nproto_jitter_deg={}\nintensity_aug={}\n",
            self.method.as_str(),
            self.epochs,
            self.batch,
            self.seed,
            self.lr,
            self.ewc_lambda,
            self.rwalk_alpha,
            self.rwalk_lambda,
            self.rwalk_update_every,
            self.rwalk_xi,
            self.rehearsal_per_task,
            match self.selection {
                Selection::Tag => "tag",
                Selection::BestNcc => "best-ncc",
            },
            self.proto_jitter_px,
            self.proto_jitter_deg,
            self.intensity_aug
        );
        s.push_str(&self.net.to_text());
        s
    }

    /// Applies one `key=value` override, including network keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for {key}"));
        match key {
            "method" => self.method = Method::parse(value)?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "batch" => self.batch = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "lr" => self.lr = value.parse().map_err(|_| bad())?,
            "ewc_lambda" => self.ewc_lambda = value.parse().map_err(|_| bad())?,
            "rwalk_alpha" => self.rwalk_alpha = value.parse().map_err(|_| bad())?,
            "rwalk_lambda" => self.rwalk_lambda = value.parse().map_err(|_| bad())?,
            "rwalk_update_every" => self.rwalk_update_every = value.parse().map_err(|_| bad())?,
            "rwalk_xi" => self.rwalk_xi = value.parse().map_err(|_| bad())?,
            "rehearsal_per_task" => self.rehearsal_per_task = value.parse().map_err(|_| bad())?,
            "proto_jitter_px" => self.proto_jitter_px = value.parse().map_err(|_| bad())?,
            "proto_jitter_deg" => self.proto_jitter_deg = value.parse().map_err(|_| bad())?,
            "intensity_aug" => self.intensity_aug = value.parse().map_err(|_| bad())?,
            "selection" => {
                self.selection = match value {
                    "tag" => Selection::Tag,
                    "best-ncc" => Selection::BestNcc,
                    _ => return Err(bad()),
                }
            }
            _ => {
                if !self.net.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Reads flat `key=value` text, starting from `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in Header::parse(text)?.pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }
}

/// The network a method trains.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Reg(RegNet),
    Seg(SegNet),
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let seed = derive_seed(cfg.seed, "init", 0);
        Ok(if cfg.method.uses_atlas() {
            Model::Reg(RegNet::new(cfg.net.clone(), seed)?)
        } else {
            Model::Seg(SegNet::new(cfg.net.clone(), seed)?)
        })
    }

    pub fn unet(&self) -> &UNet {
        match self {
            Model::Reg(n) => &n.unet,
            Model::Seg(n) => &n.unet,
        }
    }

    pub fn unet_mut(&mut self) -> &mut UNet {
        match self {
            Model::Reg(n) => &mut n.unet,
            Model::Seg(n) => &mut n.unet,
        }
    }
}

/// Network parameters at the end of a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub method: Method,
    /// 1-based position in the training order.
    pub stage: usize,
    pub tag: String,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        self.model.unet().to_container(&format!(
            "method={}\nstage={}\ntag={}\nconfig_hash={}\n",
            self.method.as_str(),
            self.stage,
            self.tag,
            self.config_hash
        ))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (unet, header) = UNet::from_container(c)?;
        let model = match unet.head() {
            Head::Flow => Model::Reg(RegNet { unet }),
            Head::Sigmoid => Model::Seg(SegNet { unet }),
        };
        Ok(Self {
            model,
            method: Method::parse(header.require("method")?)?,
            stage: header
                .require("stage")?
                .parse()
                .map_err(|_| Error::Config("bad stage in checkpoint".into()))?,
            tag: header.require("tag")?.to_string(),
            config_hash: header.require("config_hash")?.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Mean loss terms over one epoch. Segmentation runs report only `ce`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub ncc: f64,
    pub ce: f64,
    pub smooth: f64,
    pub penalty: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,total,ncc,ce,smooth,penalty";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.8},{:.8},{:.8}",
            e.epoch, e.total, e.ncc, e.ce, e.smooth, e.penalty
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Where stage data comes from. Training asks for one stage at a time.
pub trait StageSource {
    fn load_stage(&self, stage: usize) -> Result<TaskDataset>;
}

impl StageSource for Corpus {
    fn load_stage(&self, stage: usize) -> Result<TaskDataset> {
        Corpus::load_stage(self, stage)
    }
}

impl StageSource for [TaskDataset] {
    fn load_stage(&self, stage: usize) -> Result<TaskDataset> {
        self.iter()
            .find(|t| t.stage == stage)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no stage {stage}")))
    }
}

impl StageSource for Vec<TaskDataset> {
    fn load_stage(&self, stage: usize) -> Result<TaskDataset> {
        self.as_slice().load_stage(stage)
    }
}

/// Stream index for rehearsal draws.
const REHEARSAL_STREAM: u64 = u64::MAX - 2;

/// `per_task` training cases from each task, drawn per domain from `seed`.
pub fn rehearsal_buffer(
    tasks_seen: &[&TaskDataset],
    per_task: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for t in tasks_seen {
        if per_task > t.train.len() {
            return Err(Error::InsufficientData(format!(
                "domain {} has {} training cases, rehearsal keeps {per_task}",
                t.tag,
                t.train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &t.tag, REHEARSAL_STREAM));
        let mut picks = index::sample(&mut rng, t.train.len(), per_task).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| t.train[i].clone()));
    }
    Ok(out)
}

fn stack_grids<'a>(grids: impl Iterator<Item = &'a Grid>) -> Result<Tensor> {
    let v: Vec<&Grid> = grids.collect();
    Grid::stack(&v)
}

/// Per-sample loss gradients and loss parts for one batch.
struct StepOut {
    grads: Vec<Tensor>,
    total: f64,
    ncc: f64,
    ce: f64,
    smooth: f64,
}

fn batch_step(
    model: &Model,
    batch: &[&LabeledImage],
    moving: &[(Grid, Grid)],
    net_cfg: &RegNetConfig,
) -> Result<StepOut> {
    let mut tape = Tape::new();
    let unet = model.unet();
    let bound = unet.bind(&mut tape);
    let scan = tape.constant(stack_grids(batch.iter().map(|c| &c.scan))?);
    let mask = tape.constant(stack_grids(batch.iter().map(|c| &c.mask))?);
    let (loss, ncc, ce, smooth) = match model {
        Model::Reg(net) => {
            let ps = tape.constant(stack_grids(moving.iter().map(|p| &p.0))?);
            let pm = tape.constant(stack_grids(moving.iter().map(|p| &p.1))?);
            let t = loss_reg(&mut tape, net, &bound, ps, pm, scan, mask, net_cfg)?;
            (
                t.total,
                tape.scalar(t.ncc)?,
                tape.scalar(t.ce)?,
                tape.scalar(t.smooth)?,
            )
        }
        Model::Seg(net) => {
            let logits = net.logits(&mut tape, &bound, scan)?;
            let l = loss_ce_logits(&mut tape, logits, mask)?;
            (l, 0.0, tape.scalar(l)?, 0.0)
        }
    };
    let total = tape.scalar(loss)?;
    if !total.is_finite() {
        return Err(Error::Contract(format!("non-finite training loss {total}")));
    }
    tape.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .cloned()
                .ok_or_else(|| Error::Contract("parameter without gradient".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepOut {
        grads,
        total,
        ncc,
        ce,
        smooth,
    })
}

/// The training-time prototype of every sample.
fn prototypes_for<'a>(
    data: &[&LabeledImage],
    atlas: Option<&'a PrototypeAtlas>,
    selection: Selection,
) -> Result<Vec<&'a Prototype>> {
    let Some(atlas) = atlas else {
        return Err(Error::Config("atlas replay needs an atlas".into()));
    };
    data.iter()
        .map(|c| match selection {
            Selection::Tag => atlas.get(&c.tag),
            Selection::BestNcc => select_prototype(&c.scan, atlas, None),
        })
        .collect()
}

/// The prototype under a random rigid transform, or unchanged when both
/// jitter ranges are zero.
fn jittered(p: &Prototype, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (Grid, Grid) {
    if cfg.proto_jitter_px == 0.0 && cfg.proto_jitter_deg == 0.0 {
        return (p.scan.clone(), p.mask.clone());
    }
    let mut draw = |r: f32| if r > 0.0 { rng.random_range(-r..=r) as f64 } else { 0.0 };
    let deg = draw(cfg.proto_jitter_deg);
    let tx = draw(cfg.proto_jitter_px);
    let ty = draw(cfg.proto_jitter_px);
    let t = RigidTransform::from_degrees(deg, tx, ty);
    (
        apply_rigid(&p.scan, &t, Interp::Bilinear),
        apply_rigid(&p.mask, &t, Interp::Bilinear),
    )
}

/// Gamma drawn log-uniformly from `[0.7, 1.4]`.
fn rng_gamma(rng: &mut ChaCha8Rng) -> f32 {
    rng.random_range(0.7f32.ln()..=1.4f32.ln()).exp()
}

/// Trains `model` on `data` for `cfg.epochs` epochs, visiting samples in a
/// freshly shuffled order every epoch.
fn train_on(
    model: &mut Model,
    data: &[&LabeledImage],
    atlas: Option<&PrototypeAtlas>,
    cfg: &TrainConfig,
    stage: usize,
    importance: &mut ImportanceState,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::InsufficientData(format!("stage {stage} has no training data")));
    }
    let protos = match model {
        Model::Reg(_) => prototypes_for(data, atlas, cfg.selection)?,
        Model::Seg(_) => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", stage as u64));
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "jitter", stage as u64));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.unet().params(),
    );
    let penalty_lambda = match cfg.method {
        Method::Ewc => cfg.ewc_lambda,
        Method::Rwalk => cfg.rwalk_lambda,
        _ => 0.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = EpochLog {
            epoch,
            ..EpochLog::default()
        };
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut batch: Vec<LabeledImage> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut bp: Vec<(Grid, Grid)> = if protos.is_empty() {
                Vec::new()
            } else {
                chunk
                    .iter()
                    .map(|&i| jittered(protos[i], cfg, &mut jitter_rng))
                    .collect()
            };
            if cfg.intensity_aug && !bp.is_empty() {
                for (case, (ps, _)) in batch.iter_mut().zip(&mut bp) {
                    let gamma = rng_gamma(&mut jitter_rng);
                    let flip = jitter_rng.random_bool(0.5);
                    let f = |v: f32| {
                        let g = v.clamp(0.0, 1.0).powf(gamma);
                        if flip { 1.0 - g } else { g }
                    };
                    case.scan = case.scan.map(f);
                    *ps = ps.map(f);
                }
            }
            let batch: Vec<&LabeledImage> = batch.iter().collect();
            let out = batch_step(model, &batch, &bp, &cfg.net)?;
            let task_grads = out.grads;
            let mut grads = task_grads.clone();
            let mut penalty = 0.0;
            if penalty_lambda > 0.0 {
                let params = model.unet().params();
                penalty = ewc_penalty(params, importance, penalty_lambda);
                importance.add_penalty_grad(params, &mut grads, penalty_lambda);
            }
            let refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
            adam.step(model.unet_mut().params_mut(), &refs)?;
            if cfg.method == Method::Rwalk {
                rwalk_update(
                    importance,
                    &task_grads,
                    model.unet().params(),
                    cfg.rwalk_update_every,
                    cfg.rwalk_alpha,
                    cfg.rwalk_xi,
                );
            }
            sums.total += out.total + penalty;
            sums.ncc += out.ncc;
            sums.ce += out.ce;
            sums.smooth += out.smooth;
            sums.penalty += penalty;
            batches += 1;
        }
        let n = batches as f64;
        sums.total /= n;
        sums.ncc /= n;
        sums.ce /= n;
        sums.smooth /= n;
        sums.penalty /= n;
        log.push(sums);
    }
    Ok(log)
}

/// Mean squared per-sample gradient of the task loss over `data`.
fn empirical_fisher(model: &Model, data: &[LabeledImage], net_cfg: &RegNetConfig) -> Result<Vec<Tensor>> {
    let mut acc: Vec<Tensor> = model
        .unet()
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    for case in data {
        let out = batch_step(model, &[case], &[], net_cfg)?;
        for (a, g) in acc.iter_mut().zip(&out.grads) {
            for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                *av += gv * gv;
            }
        }
    }
    let n = data.len().max(1) as f32;
    for a in &mut acc {
        for v in a.data_mut() {
            *v /= n;
        }
    }
    Ok(acc)
}

/// One atlas-replay stage: registration training of `net` against the
/// prototypes of `atlas` on the training split of `task`.
pub fn train_stage_atlas(
    net: &mut RegNet,
    task: &TaskDataset,
    atlas: &PrototypeAtlas,
    cfg: &TrainConfig,
    stage: usize,
) -> Result<Vec<EpochLog>> {
    let mut model = Model::Reg(net.clone());
    let data: Vec<&LabeledImage> = task.train.iter().collect();
    let mut importance = ImportanceState::new(model.unet().params());
    let log = train_on(&mut model, &data, Some(atlas), cfg, stage, &mut importance)?;
    if let Model::Reg(n) = model {
        *net = n;
    }
    Ok(log)
}

/// Trains `cfg.method` over the stages in `order`, loading each stage only
/// when it is reached, and returns one checkpoint per stage.
///
/// `Joint` trains a single model on every stage at once and returns one
/// result.
pub fn train_continual(
    source: &(impl StageSource + ?Sized),
    order: &[usize],
    cfg: &TrainConfig,
    atlas: Option<&PrototypeAtlas>,
) -> Result<Vec<StageResult>> {
    cfg.validate()?;
    if order.is_empty() {
        return Err(Error::InsufficientData("empty task stream".into()));
    }
    let hash = cfg.hash();
    let mut model = Model::init(cfg)?;
    let mut importance = ImportanceState::new(model.unet().params());

    if cfg.method == Method::Joint {
        let tasks = order
            .iter()
            .map(|&s| source.load_stage(s))
            .collect::<Result<Vec<_>>>()?;
        let data: Vec<&LabeledImage> = tasks.iter().flat_map(|t| &t.train).collect();
        let log = train_on(&mut model, &data, atlas, cfg, 1, &mut importance)?;
        let tag = tasks.iter().map(|t| t.tag.as_str()).collect::<Vec<_>>().join("+");
        return Ok(vec![StageResult {
            checkpoint: Checkpoint {
                model,
                method: cfg.method,
                stage: 1,
                tag,
                config_hash: hash,
            },
            log,
        }]);
    }

    let mut seen: Vec<TaskDataset> = Vec::new();
    let mut results = Vec::with_capacity(order.len());
    for (i, &s) in order.iter().enumerate() {
        let stage = i + 1;
        let task = source.load_stage(s)?;
        let buffer = if cfg.method == Method::Rehearsal {
            let prior: Vec<&TaskDataset> = seen.iter().collect();
            rehearsal_buffer(&prior, cfg.rehearsal_per_task, cfg.seed)?
        } else {
            Vec::new()
        };
        let data: Vec<&LabeledImage> = task.train.iter().chain(&buffer).collect();
        let log = train_on(&mut model, &data, atlas, cfg, stage, &mut importance)?;
        match cfg.method {
            Method::Ewc if cfg.ewc_lambda > 0.0 => {
                let f = empirical_fisher(&model, &task.train, &cfg.net)?;
                importance.accumulate_fisher(&f);
                importance.consolidate_ewc(model.unet().params());
            }
            Method::Rwalk if cfg.rwalk_lambda > 0.0 => {
                importance.consolidate_rwalk(model.unet().params());
            }
            _ => {}
        }
        results.push(StageResult {
            checkpoint: Checkpoint {
                model: model.clone(),
                method: cfg.method,
                stage,
                tag: task.tag.clone(),
                config_hash: hash.clone(),
            },
            log,
        });
        // Only rehearsal keeps earlier data around.
        if cfg.method == Method::Rehearsal {
            seen.push(task);
        }
    }
    Ok(results)
}

/// Binary prediction for `scan`. Registration checkpoints warp the mask of
/// the prototype for `tag` (or the best-matching one when `tag` is `None`).
pub fn predict_segmentation(
    checkpoint: &Checkpoint,
    scan: &Grid,
    atlas: Option<&PrototypeAtlas>,
    tag: Option<&str>,
) -> Result<Grid> {
    let input = Grid::stack(&[scan])?;
    let prob = match &checkpoint.model {
        Model::Seg(net) => net.predict(&input)?,
        Model::Reg(net) => {
            let atlas = atlas.ok_or_else(|| Error::Config("registration model needs an atlas".into()))?;
            let proto = select_prototype(scan, atlas, tag)?;
            warp_prototype(net, proto, scan)?
        }
    };
    Ok(Grid::unstack(&prob, 0)?.remove(0).threshold(0.5))
}

/// Soft prototype mask warped onto `scan`.
pub fn warp_prototype(net: &RegNet, proto: &Prototype, scan: &Grid) -> Result<Tensor> {
    let ps = Grid::stack(&[&proto.scan])?;
    let pm = Grid::stack(&[&proto.mask])?;
    let fixed = Grid::stack(&[scan])?;
    let flow = net.flow(&ps, &fixed)?;
    let mut tape = Tape::new();
    let m = tape.constant(pm);
    let f = tape.constant(flow);
    let w = tape.grid_sample(m, f)?;
    Ok(tape.value(w).clone())
}

/// Mean validation Dice of `checkpoint` on `task`.
pub fn evaluate_task(
    checkpoint: &Checkpoint,
    task: &TaskDataset,
    atlas: Option<&PrototypeAtlas>,
    selection: Selection,
) -> Result<f64> {
    if task.val.is_empty() {
        return Err(Error::InsufficientData(format!("task {} has no validation cases", task.tag)));
    }
    let tag = match selection {
        Selection::Tag => Some(task.tag.as_str()),
        Selection::BestNcc => None,
    };
    let mut sum = 0.0;
    for case in &task.val {
        let pred = predict_segmentation(checkpoint, &case.scan, atlas, tag)?;
        sum += crate::metrics::dice(&pred, &case.mask)?;
    }
    Ok(sum / task.val.len() as f64)
}

/// Directory of one stage of a run.
pub fn stage_dir(run: &Path, method: Method, stage: usize) -> PathBuf {
    run.join(method.as_str()).join(format!("stage_{stage}"))
}

/// Writes `checkpoint.bin`, `train_log.csv` and `config.txt` for each stage.
/// `extra` is appended verbatim to every `config.txt`.
pub fn write_run(
    run: &Path,
    cfg: &TrainConfig,
    order: &[usize],
    results: &[StageResult],
    extra: &str,
) -> Result<()> {
    let order_text = order.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
    for r in results {
        let dir = stage_dir(run, cfg.method, r.checkpoint.stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        r.checkpoint.save(&dir.join("checkpoint.bin"))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("train_log.csv", train_log_csv(&r.log))?;
        write(
            "config.txt",
            format!("{}order={order_text}\ntag={}\n{extra}", cfg.to_text(), r.checkpoint.tag),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, CorpusManifest};

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch: 3,
            net: RegNetConfig {
                enc_channels: vec![4, 4],
                dec_channels: vec![4, 4, 4],
                ..RegNetConfig::desk()
            },
            ..TrainConfig::default()
        }
    }

    fn small_tasks() -> Vec<TaskDataset> {
        let mut tasks = generate(&CorpusManifest::new(1, 48, &[("A", 9), ("B", 9)])).unwrap();
        for t in &mut tasks {
            t.train.truncate(4);
        }
        tasks
    }

    #[test]
    fn config_text_roundtrip() {
        let mut c = TrainConfig {
            method: Method::Rwalk,
            selection: Selection::BestNcc,
            lr: 3e-4,
            ..TrainConfig::default()
        };
        c.net.ce_weight = 1.0;
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(back.set("nope", "1").is_err());
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("bic").is_err());
    }

    #[test]
    fn rehearsal_buffer_sizes_and_determinism() {
        let tasks = generate(&CorpusManifest::new(4, 64, &[("A", 9), ("B", 9), ("C", 9)])).unwrap();
        let refs: Vec<&TaskDataset> = tasks.iter().collect();
        let b = rehearsal_buffer(&refs, 7, 3).unwrap();
        assert_eq!(b.len(), 21);
        let ids = |v: &[LabeledImage]| v.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&b), ids(&rehearsal_buffer(&refs, 7, 3).unwrap()));
        assert!(rehearsal_buffer(&refs, 0, 3).unwrap().is_empty());
        assert!(matches!(rehearsal_buffer(&refs, 8, 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let cfg = TrainConfig {
            method: Method::Sequential,
            epochs: 0,
            ..tiny()
        };
        let r = train_continual(&small_tasks(), &[1], &cfg, None).unwrap();
        assert_eq!(r[0].checkpoint.model, Model::init(&cfg).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = TrainConfig {
            method: Method::Ewc,
            ..tiny()
        };
        let r = train_continual(&small_tasks(), &[1, 2], &cfg, None).unwrap();
        let c = &r[1].checkpoint;
        let back = Checkpoint::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(&back, c);
        assert_eq!(back.stage, 2);
        assert_eq!(back.tag, "B");
    }

    #[test]
    fn atlas_replay_without_atlas_fails() {
        let r = train_continual(&small_tasks(), &[1], &tiny(), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn untrained_regnet_reproduces_prototype_mask() {
        let tasks = small_tasks();
        let atlas = crate::prototypes::build_atlas(&tasks, 2, 3, 1).unwrap();
        let cfg = TrainConfig {
            net: RegNetConfig {
                flow_init_scale: 0.0,
                ..tiny().net
            },
            ..tiny()
        };
        let ck = Checkpoint {
            model: Model::init(&cfg).unwrap(),
            method: Method::AtlasReplay,
            stage: 1,
            tag: "A".into(),
            config_hash: cfg.hash(),
        };
        let scan = &tasks[0].val[0].scan;
        let pred = predict_segmentation(&ck, scan, Some(&atlas), Some("A")).unwrap();
        assert_eq!(pred, atlas.get("A").unwrap().mask.threshold(0.5));
    }
}
