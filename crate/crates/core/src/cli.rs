//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::continual::{evaluate_task, train_continual, write_run, Method, Selection, TrainConfig};
use crate::datagen::{generate_corpus, Corpus, CorpusManifest};
use crate::error::{Error, Result};
use crate::metrics::{bwt, dice_matrix, fwt, reid_probe, Attacker};
use crate::prototypes::{build_atlas, PrototypeAtlas};
use crate::report::{
    evaluate_run, load_runs, probe_csv, report_csv, single_task_dir, write_overlays, ReportRow,
};

#[derive(Parser, Debug)]
#[command(name = "atlas-replay", version, about = "Continual atlas-based segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic corpus.
    GenData {
        /// Manifest file (key=value lines); the built-in 4x30 corpus if omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one prototype per domain.
    BuildAtlas {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 7)]
        r: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method over a task stream.
    Train {
        #[arg(long)]
        method: String,
        #[command(flatten)]
        common: TrainArgs,
        /// Also train a fresh model on each task alone (needed for FWT).
        #[arg(long)]
        single: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained runs on the validation splits.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        atlas: Option<PathBuf>,
        /// Write scan/prediction overlays (PGM) here.
        #[arg(long)]
        overlays: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-identification probe against the atlas prototypes.
    ProbePrivacy {
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per value of a config parameter.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        method: String,
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-domain registration training for each cross-entropy weight.
    AblateLoss {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        ce_weights: Vec<f32>,
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Corpus stage ids in training order; all stages if omitted.
    #[arg(long, value_delimiter = ',')]
    pub order: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    /// Flat key=value config file applied before `--set`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Individual overrides, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Failure classes mapped to exit codes by `main`.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn require_path(p: &Path) -> std::result::Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file or directory: {}", p.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_config(method: Method, a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig {
        method,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(p) = &a.config {
        require_path(p)?;
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_text(&text).map_err(usage)?;
        cfg.method = method;
        cfg.seed = a.seed;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_atlas(path: Option<&Path>, needed: bool) -> std::result::Result<Option<PrototypeAtlas>, Failure> {
    match path {
        Some(p) => {
            require_path(p)?;
            Ok(Some(PrototypeAtlas::load(p)?))
        }
        None if needed => Err(Failure::Usage("this method needs --atlas".into())),
        None => Ok(None),
    }
}

struct Prepared {
    corpus: Corpus,
    order: Vec<usize>,
    atlas: Option<PrototypeAtlas>,
}

fn prepare(a: &TrainArgs, needs_atlas: bool) -> std::result::Result<Prepared, Failure> {
    require_path(&a.corpus)?;
    let corpus = Corpus::open(&a.corpus)?;
    let order = a.order.clone().unwrap_or_else(|| corpus.stages());
    for s in &order {
        corpus.tag_of(*s)?;
    }
    let atlas = load_atlas(a.atlas.as_deref(), needs_atlas)?;
    Ok(Prepared { corpus, order, atlas })
}

/// Trains `cfg` into `out`, optionally with single-task models.
fn train_into(
    p: &Prepared,
    cfg: &TrainConfig,
    single: bool,
    atlas_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let results = train_continual(&p.corpus, &p.order, cfg, p.atlas.as_ref())?;
    let extra = atlas_path
        .map(|a| format!("atlas={}\n", a.display()))
        .unwrap_or_default();
    write_run(out, cfg, &p.order, &results, &extra)?;
    if single && cfg.method != Method::Joint {
        for &s in &p.order {
            let r = train_continual(&p.corpus, &[s], cfg, p.atlas.as_ref())?;
            let dir = single_task_dir(out, cfg.method, s);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            r[0].checkpoint.save(&dir.join("checkpoint.bin"))?;
        }
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenData { manifest, seed, out } => {
            let mut m = match &manifest {
                Some(p) => {
                    require_path(p)?;
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    CorpusManifest::parse(&text)?
                }
                None => CorpusManifest::default(),
            };
            if let Some(s) = seed {
                m.seed = s;
            }
            generate_corpus(&m, &out)?;
        }
        Command::BuildAtlas { corpus, r, k, seed, out } => {
            require_path(&corpus)?;
            let tasks = Corpus::open(&corpus)?.load_all()?;
            build_atlas(&tasks, k, r, seed)?.save(&out)?;
        }
        Command::Train { method, common, single, out } => {
            let method = Method::parse(&method).map_err(|e| Failure::Usage(e.to_string()))?;
            let cfg = train_config(method, &common)?;
            let p = prepare(&common, method.uses_atlas())?;
            train_into(&p, &cfg, single, common.atlas.as_deref(), &out)?;
        }
        Command::Evaluate { runs, corpus, atlas, overlays, out } => {
            require_path(&corpus)?;
            for r in &runs {
                require_path(r)?;
            }
            let tasks = Corpus::open(&corpus)?.load_all()?;
            let explicit = load_atlas(atlas.as_deref(), false)?;
            let mut rows: Vec<ReportRow> = Vec::new();
            for run in &runs {
                for mr in load_runs(run)? {
                    let stored = match (&explicit, &mr.atlas_path) {
                        (None, Some(p)) if mr.method.uses_atlas() => load_atlas(Some(p), true)?,
                        _ => None,
                    };
                    let a = explicit.as_ref().or(stored.as_ref());
                    if mr.method.uses_atlas() && a.is_none() {
                        return Err(Failure::Usage(format!(
                            "{} run needs --atlas",
                            mr.method.as_str()
                        )));
                    }
                    rows.extend(evaluate_run(&mr, &tasks, a)?);
                    if let Some(dir) = &overlays {
                        write_overlays(dir, &mr, &tasks, a)?;
                    }
                }
            }
            write_text(&out, &report_csv(&rows))?;
        }
        Command::ProbePrivacy { atlas, corpus, trials, seed, out } => {
            require_path(&corpus)?;
            let atlas = load_atlas(Some(&atlas), true)?.expect("required");
            let tasks = Corpus::open(&corpus)?.load_all()?;
            let ncc = reid_probe(&atlas, &tasks, trials, seed, Attacker::Ncc)?;
            let random = reid_probe(&atlas, &tasks, trials, seed, Attacker::Random)?;
            write_text(&out, &probe_csv(&[("ncc", &ncc), ("random", &random)]))?;
        }
        Command::Sweep { param, values, method, common, out } => {
            let method = Method::parse(&method).map_err(|e| Failure::Usage(e.to_string()))?;
            let base = train_config(method, &common)?;
            let p = prepare(&common, method.uses_atlas())?;
            let tasks: Vec<_> = p
                .order
                .iter()
                .map(|&s| p.corpus.load_stage(s))
                .collect::<Result<_>>()?;
            let mut csv = String::from("param,value,mean_dice,bwt,fwt\n");
            for v in &values {
                let mut cfg = base.clone();
                cfg.set(&param, v)?;
                cfg.validate()?;
                let dir = out.join(format!("{param}={v}"));
                train_into(&p, &cfg, true, common.atlas.as_deref(), &dir)?;
                let mr = crate::report::load_method_run(&dir, method)?;
                let m = dice_matrix(
                    &mr.stages,
                    mr.single_task.as_deref(),
                    &tasks,
                    p.atlas.as_ref(),
                    Selection::Tag,
                )?;
                let last = &m.d[m.n() - 1];
                csv.push_str(&format!(
                    "{param},{v},{:.6},{},{}\n",
                    mean(last.iter().copied()),
                    opt(bwt(&m).ok().map(|t| t.mean)),
                    opt(fwt(&m).ok().map(|t| t.mean))
                ));
            }
            write_text(&out.join("sweep.csv"), &csv)?;
        }
        Command::AblateLoss { ce_weights, common, out } => {
            let base = train_config(Method::AtlasReplay, &common)?;
            let p = prepare(&common, true)?;
            let stage = p.order[0];
            let task = p.corpus.load_stage(stage)?;
            let mut csv = String::from("ce_weight,stage,task,dice\n");
            for w in ce_weights {
                let mut cfg = base.clone();
                cfg.net.ce_weight = w;
                cfg.validate()?;
                let r = train_continual(&p.corpus, &[stage], &cfg, p.atlas.as_ref())?;
                let d = evaluate_task(&r[0].checkpoint, &task, p.atlas.as_ref(), Selection::Tag)?;
                csv.push_str(&format!("{w},{stage},{},{d:.6}\n", task.tag));
            }
            write_text(&out, &csv)?;
        }
    }
    Ok(())
}
