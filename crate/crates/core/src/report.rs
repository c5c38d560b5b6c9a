//! CSV reports, run loading and PGM overlays.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::continual::{predict_segmentation, stage_dir, Checkpoint, Method, Selection};
use crate::datagen::TaskDataset;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{bwt, confusion_metrics, dice_matrix, fwt, ProbeReport};
use crate::prototypes::PrototypeAtlas;
use crate::regnet::Header;

pub const REPORT_HEADER: &str = "method,stage,task,dice,bwt,fwt";

/// Checkpoints of one method read back from a run directory.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    /// Corpus stage ids in training order.
    pub order: Vec<usize>,
    pub stages: Vec<Checkpoint>,
    pub single_task: Option<Vec<Checkpoint>>,
    pub atlas_path: Option<PathBuf>,
}

/// Directory of the single-task model for corpus stage `stage`.
pub fn single_task_dir(run: &Path, method: Method, stage: usize) -> PathBuf {
    run.join(method.as_str()).join(format!("single_{stage}"))
}

fn parse_order(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad stage order `{text}`")))
        })
        .collect()
}

/// Reads `run/<method>/stage_*/` (and `single_*` when complete).
pub fn load_method_run(run: &Path, method: Method) -> Result<MethodRun> {
    let first = stage_dir(run, method, 1);
    let cfg_path = first.join("config.txt");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let header = Header::parse(&text)?;
    let order = parse_order(header.require("order")?)?;
    let n = if method == Method::Joint { 1 } else { order.len() };
    let stages = (1..=n)
        .map(|j| {
            let p = stage_dir(run, method, j).join("checkpoint.bin");
            if !p.exists() {
                return Err(Error::IncompleteRun(format!("missing {}", p.display())));
            }
            Checkpoint::load(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    let single_paths: Vec<PathBuf> = order
        .iter()
        .map(|&s| single_task_dir(run, method, s).join("checkpoint.bin"))
        .collect();
    let single_task = if method != Method::Joint && single_paths.iter().all(|p| p.exists()) {
        Some(
            single_paths
                .iter()
                .map(|p| Checkpoint::load(p))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(MethodRun {
        method,
        order,
        stages,
        single_task,
        atlas_path: header.get("atlas").map(PathBuf::from),
    })
}

/// Every method present under `run`, in canonical method order.
pub fn load_runs(run: &Path) -> Result<Vec<MethodRun>> {
    let found: Vec<MethodRun> = Method::ALL
        .into_iter()
        .filter(|m| stage_dir(run, *m, 1).join("config.txt").exists())
        .map(|m| load_method_run(run, m))
        .collect::<Result<_>>()?;
    if found.is_empty() {
        return Err(Error::IncompleteRun(format!("no trained methods under {}", run.display())));
    }
    Ok(found)
}

/// One report row per (stage, task). BWT of task `p` sits on the final
/// stage's row for `p`, FWT of `p` on the row of stage `p - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub stage: usize,
    pub task: String,
    pub dice: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

/// Evaluates a method run on `tasks`, which must be indexed by corpus
/// stage id through `order`.
pub fn evaluate_run(
    run: &MethodRun,
    tasks: &[TaskDataset],
    atlas: Option<&PrototypeAtlas>,
) -> Result<Vec<ReportRow>> {
    let ordered = run
        .order
        .iter()
        .map(|&s| {
            tasks
                .iter()
                .find(|t| t.stage == s)
                .cloned()
                .ok_or_else(|| Error::IncompleteRun(format!("corpus lacks stage {s}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let sel = Selection::Tag;
    let mut rows = Vec::new();
    if run.method == Method::Joint {
        for t in &ordered {
            rows.push(ReportRow {
                method: run.method,
                stage: 1,
                task: t.tag.clone(),
                dice: crate::continual::evaluate_task(&run.stages[0], t, atlas, sel)?,
                bwt: None,
                fwt: None,
            });
        }
        return Ok(rows);
    }
    let m = dice_matrix(&run.stages, run.single_task.as_deref(), &ordered, atlas, sel)?;
    let n = m.n();
    let b = bwt(&m).ok();
    let f = fwt(&m).ok();
    for j in 0..n {
        for (p, t) in ordered.iter().enumerate() {
            let pick = |tr: &Option<crate::metrics::Transfer>, row: usize| {
                tr.as_ref().and_then(|tr| {
                    (j == row)
                        .then(|| tr.per_task.iter().find(|(k, _)| *k == p + 1).map(|(_, v)| *v))
                        .flatten()
                })
            };
            rows.push(ReportRow {
                method: run.method,
                stage: j + 1,
                task: t.tag.clone(),
                dice: m.d[j][p],
                bwt: pick(&b, n - 1),
                fwt: if p == 0 { None } else { pick(&f, p - 1) },
            });
        }
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{}",
            r.method.as_str(),
            r.stage,
            r.task,
            r.dice,
            opt(r.bwt),
            opt(r.fwt)
        );
    }
    s
}

pub const PROBE_HEADER: &str = "attacker,domain,tp,tn,fp,fn,precision,sensitivity,specificity,mcc";

/// Confusion counts per domain and overall for each attacker.
pub fn probe_csv(reports: &[(&str, &ProbeReport)]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = format!("{PROBE_HEADER}\n");
    for (attacker, rep) in reports {
        let all = ("all".to_string(), rep.total);
        for (tag, c) in rep.per_domain.iter().chain(std::iter::once(&all)) {
            let r = confusion_metrics(c);
            let _ = writeln!(
                s,
                "{attacker},{tag},{},{},{},{},{},{},{},{}",
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                opt(r.precision),
                opt(r.sensitivity),
                opt(r.specificity),
                opt(r.mcc)
            );
        }
    }
    s
}

/// Scan in grey with the boundary of `mask` drawn white.
pub fn overlay(scan: &Grid, mask: &Grid) -> Result<Grid> {
    scan.same_dims(mask)?;
    let (h, w) = scan.dims();
    let inside = |x: isize, y: isize| mask.get_or_zero(x, y) >= 0.5;
    Ok(Grid::from_fn(h, w, |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let edge = inside(xi, yi)
            && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| !inside(xi + dx, yi + dy));
        if edge {
            1.0
        } else {
            0.8 * scan.get(x, y).clamp(0.0, 1.0)
        }
    }))
}

/// Binary P5 PGM, values in `[0, 1]` mapped to 0..=255.
pub fn pgm_bytes(image: &Grid) -> Vec<u8> {
    let (h, w) = image.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Parses a binary P5 PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<Grid> {
    let bad = |m: &str| Error::Format { offset: 0, message: m.to_string() };
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = &bytes[i + 1..];
    if body.len() != w * h {
        return Err(Error::Format {
            offset: i + 1,
            message: format!("expected {} pixel bytes, found {}", w * h, body.len()),
        });
    }
    Grid::new(h, w, body.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Writes one overlay per validation case for every stage of `run`.
pub fn write_overlays(
    out: &Path,
    run: &MethodRun,
    tasks: &[TaskDataset],
    atlas: Option<&PrototypeAtlas>,
) -> Result<()> {
    for ck in &run.stages {
        let dir = out.join(run.method.as_str()).join(format!("stage_{}", ck.stage));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for t in tasks.iter().filter(|t| run.order.contains(&t.stage)) {
            for case in &t.val {
                let pred = predict_segmentation(ck, &case.scan, atlas, Some(&t.tag))?;
                let p = dir.join(format!("{}.pgm", case.case_id));
                std::fs::write(&p, pgm_bytes(&overlay(&case.scan, &pred)?))
                    .map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}
