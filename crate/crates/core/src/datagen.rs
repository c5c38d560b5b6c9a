//! Seeded synthetic multi-domain corpus.
//!
//! Every case shows a body outline, a dark rectal lumen and a lobed organ
//! whose mask is the segmentation target. Domains differ in organ geometry
//! (including a compression of the posterior half that mimics an endorectal
//! coil) and in their intensity profile. A case is a pure function of
//! `(master seed, tag, index)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{Container, Entry};

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityProfile {
    /// Soft-tissue level inside the body.
    pub mean: f64,
    /// Organ level minus tissue level; may be negative.
    pub contrast: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub tag: String,
    /// Organ semi-axes as a fraction of the grid width.
    pub radius_x: f64,
    pub radius_y: f64,
    pub lobes: usize,
    pub lobe_amplitude: f64,
    /// Fraction by which the posterior half of the organ is squashed.
    pub coil_compression: f64,
    pub intensity: IntensityProfile,
    pub noise_sigma: f64,
    /// Organ centre jitter as a fraction of the grid width.
    pub jitter_position: f64,
    /// Relative radius jitter.
    pub jitter_radius: f64,
    pub jitter_rotation_deg: f64,
}

impl DomainSpec {
    /// Built-in domains `A` to `G`.
    pub fn preset(tag: &str) -> Result<Self> {
        let base = |tag: &str, rx, ry, compression, mean, contrast, gamma, noise| DomainSpec {
            tag: tag.to_string(),
            radius_x: rx,
            radius_y: ry,
            lobes: 3,
            lobe_amplitude: 0.08,
            coil_compression: compression,
            intensity: IntensityProfile {
                mean,
                contrast,
                gamma,
            },
            noise_sigma: noise,
            jitter_position: 0.06,
            jitter_radius: 0.25,
            jitter_rotation_deg: 15.0,
        };
        let spec = match tag {
            "A" => base("A", 0.16, 0.13, 0.0, 0.30, 0.12, 1.0, 0.05),
            "B" => base("B", 0.15, 0.12, 0.35, 0.50, 0.18, 0.8, 0.05),
            "C" => base("C", 0.18, 0.11, 0.15, 0.40, -0.12, 1.3, 0.05),
            "D" => base("D", 0.14, 0.14, 0.45, 0.65, -0.10, 0.9, 0.05),
            "E" => base("E", 0.17, 0.12, 0.05, 0.25, 0.15, 1.5, 0.045),
            "F" => base("F", 0.15, 0.13, 0.30, 0.50, 0.14, 0.7, 0.06),
            "G" => base("G", 0.16, 0.105, 0.25, 0.35, -0.14, 1.1, 0.05),
            other => return Err(Error::UnknownDomain(other.to_string())),
        };
        Ok(spec)
    }

    pub fn validate(&self, grid: usize) -> Result<()> {
        let reach = (self.radius_x.max(self.radius_y) * (1.0 + self.jitter_radius)
            * (1.0 + self.lobe_amplitude * self.lobes as f64)
            + self.jitter_position)
            * grid as f64;
        if grid as f64 / 2.0 - reach < 4.0 {
            return Err(Error::Config(format!(
                "domain {} does not fit a {grid}-pixel grid with a 4 px margin",
                self.tag
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.intensity.gamma > 0.0) {
            return Err(Error::Config(format!(
                "domain {} has invalid noise or gamma",
                self.tag
            )));
        }
        if !(0.0..0.9).contains(&self.coil_compression) {
            return Err(Error::Config(format!(
                "domain {} coil compression must lie in [0, 0.9)",
                self.tag
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskEntry {
    pub tag: String,
    pub cases: usize,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub grid: usize,
    pub split: f64,
    pub tasks: Vec<TaskEntry>,
}

impl Default for CorpusManifest {
    /// Four domains of 30 cases on a 64x64 grid.
    fn default() -> Self {
        Self {
            seed: 0,
            grid: 64,
            split: 0.8,
            tasks: ["A", "B", "C", "D"]
                .iter()
                .enumerate()
                .map(|(i, t)| TaskEntry {
                    tag: t.to_string(),
                    cases: 30,
                    stage: i + 1,
                })
                .collect(),
        }
    }
}

impl CorpusManifest {
    pub fn new(seed: u64, grid: usize, tasks: &[(&str, usize)]) -> Self {
        Self {
            seed,
            grid,
            split: 0.8,
            tasks: tasks
                .iter()
                .enumerate()
                .map(|(i, (t, n))| TaskEntry {
                    tag: t.to_string(),
                    cases: *n,
                    stage: i + 1,
                })
                .collect(),
        }
    }

    /// Parses `key=value` lines: `seed`, `grid`, `split` and repeated
    /// `task=TAG,CASES,STAGE`. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = CorpusManifest {
            tasks: Vec::new(),
            ..Default::default()
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("manifest line {}: {what}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let value = value.trim();
            match key.trim() {
                "seed" => m.seed = value.parse().map_err(|_| bad("bad seed"))?,
                "grid" => m.grid = value.parse().map_err(|_| bad("bad grid"))?,
                "split" => m.split = value.parse().map_err(|_| bad("bad split"))?,
                "task" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 3 {
                        return Err(bad("task needs TAG,CASES,STAGE"));
                    }
                    m.tasks.push(TaskEntry {
                        tag: parts[0].to_string(),
                        cases: parts[1].parse().map_err(|_| bad("bad case count"))?,
                        stage: parts[2].parse().map_err(|_| bad("bad stage"))?,
                    });
                }
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed={}\ngrid={}\nsplit={}\n", self.seed, self.grid, self.split);
        for t in &self.tasks {
            s.push_str(&format!("task={},{},{}\n", t.tag, t.cases, t.stage));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("manifest lists no tasks".into()));
        }
        if self.grid < 16 || self.grid % 8 != 0 {
            return Err(Error::Config(format!(
                "grid {} must be a multiple of 8 and at least 16",
                self.grid
            )));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split {} must lie in (0, 1)", self.split)));
        }
        let mut tags = std::collections::BTreeSet::new();
        let mut stages = std::collections::BTreeSet::new();
        for t in &self.tasks {
            DomainSpec::preset(&t.tag)?.validate(self.grid)?;
            if t.cases < 9 {
                return Err(Error::Config(format!(
                    "task {} has {} cases; at least 9 are needed",
                    t.tag, t.cases
                )));
            }
            if t.stage == 0 || !stages.insert(t.stage) {
                return Err(Error::Config(format!("stage {} is zero or repeated", t.stage)));
            }
            if !tags.insert(t.tag.clone()) {
                return Err(Error::Config(format!("tag {} is repeated", t.tag)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// A scan with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub case_id: String,
    pub tag: String,
    pub stage: usize,
    pub scan: Grid,
    pub mask: Grid,
}

/// One task: the train and validation cases of a domain at a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub stage: usize,
    pub tag: String,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
}

pub fn case_id(tag: &str, index: usize) -> String {
    format!("{tag}_{index:03}")
}

pub(crate) fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Train/validation assignment for a domain, seeded by `(seed, tag)`.
pub fn split_indices(seed: u64, tag: &str, cases: usize, split: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..cases).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, u64::MAX));
    idx.shuffle(&mut rng);
    let n_train = ((cases as f64 * split).round() as usize).clamp(1, cases - 1);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Background level outside the body, kept off zero so noise survives the clamp.
const AIR: f64 = 0.1;

fn smoothstep_edge(signed: f64, width: f64) -> f64 {
    // 1 well inside (signed < 0), 0 well outside.
    1.0 / (1.0 + (signed / width).exp())
}

/// Renders case `index` of `spec` on a `grid x grid` image.
pub fn render_case(spec: &DomainSpec, grid: usize, seed: u64, index: usize) -> (Grid, Grid) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.tag, index as u64));
    let g = grid as f64;
    let mut uni = |lo: f64, hi: f64| rng.random_range(lo..hi);

    // Organ placement and shape.
    let cx = g * (0.5 + uni(-spec.jitter_position, spec.jitter_position));
    let cy = g * (0.5 + uni(-spec.jitter_position, spec.jitter_position));
    let scale = 1.0 + uni(-spec.jitter_radius, spec.jitter_radius);
    let aspect = 1.0 + uni(-0.5, 0.5) * spec.jitter_radius;
    let rx = spec.radius_x * g * scale * aspect;
    let ry = spec.radius_y * g * scale / aspect;
    let rot = uni(-spec.jitter_rotation_deg, spec.jitter_rotation_deg).to_radians();
    let compression = (spec.coil_compression + uni(-0.05, 0.05)).clamp(0.0, 0.85);
    let harmonics: Vec<(f64, f64)> = (0..spec.lobes)
        .map(|k| {
            let amp = spec.lobe_amplitude * uni(0.3, 1.0) / (1.0 + 0.5 * k as f64);
            (amp, uni(0.0, 2.0 * PI))
        })
        .collect();

    // Body outline, slightly jittered around the grid centre.
    let bx = g * (0.5 + uni(-0.02, 0.02));
    let by = g * (0.5 + uni(-0.02, 0.02));
    let brx = g * uni(0.42, 0.46);
    let bry = g * uni(0.36, 0.42);

    // Rectal lumen below the organ, its position loosely tied to it.
    let lumen_r = g * uni(0.05, 0.07) * (1.0 + compression);
    let lumen_x = cx + g * uni(-0.04, 0.04);
    let lumen_y = cy + ry * (1.0 - compression) + lumen_r + g * uni(0.01, 0.04);

    // Smooth bias field.
    let bias_a = uni(-0.04, 0.04);
    let bias_b = uni(-0.04, 0.04);
    let bias_phase = uni(0.0, 2.0 * PI);

    let (sr, cr) = rot.sin_cos();
    let organ_signed = |x: f64, y: f64| -> f64 {
        let (dx, dy) = (x - cx, y - cy);
        let (u, mut v) = (cr * dx + sr * dy, -sr * dx + cr * dy);
        if v > 0.0 {
            v /= 1.0 - compression;
        }
        let theta = v.atan2(u);
        let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
        let boundary = 1.0
            + harmonics
                .iter()
                .enumerate()
                .map(|(k, (a, p))| a * ((k + 2) as f64 * theta + p).cos())
                .sum::<f64>();
        // Approximate distance in pixels to the boundary along the ray.
        (r - boundary) * rx.min(ry)
    };

    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma >= 0");
    let p = &spec.intensity;
    let mut scan = Vec::with_capacity(grid * grid);
    let mut mask = Vec::with_capacity(grid * grid);
    for y in 0..grid {
        for x in 0..grid {
            let (xf, yf) = (x as f64, y as f64);
            let d = organ_signed(xf, yf);
            let organ = smoothstep_edge(d, 0.6);
            mask.push(if d <= 0.0 { 1.0 } else { 0.0 });

            let body_r = ((xf - bx) / brx).powi(2) + ((yf - by) / bry).powi(2);
            let body = smoothstep_edge((body_r.sqrt() - 1.0) * brx.min(bry), 0.8);
            let lumen_d = ((xf - lumen_x).powi(2) + (yf - lumen_y).powi(2)).sqrt() - lumen_r;
            let lumen = smoothstep_edge(lumen_d, 0.7);
            let bias = bias_a * ((xf / g) * 2.0 * PI + bias_phase).sin()
                + bias_b * ((yf / g) * 2.0 * PI).cos();

            let tissue = p.mean + bias;
            let mut v = tissue + organ * p.contrast;
            v = v * (1.0 - 0.75 * lumen) + 0.02 * lumen;
            v = AIR + (v - AIR) * body;
            let v = (v.clamp(0.0, 1.0).powf(p.gamma) + normal.sample(&mut rng)).clamp(0.0, 1.0);
            scan.push(v as f32);
        }
    }
    (
        Grid::new(grid, grid, scan).expect("square grid"),
        Grid::new(grid, grid, mask).expect("square grid"),
    )
}

/// Generates every task of the manifest in memory, ordered by stage.
pub fn generate(manifest: &CorpusManifest) -> Result<Vec<TaskDataset>> {
    manifest.validate()?;
    let mut tasks: Vec<&TaskEntry> = manifest.tasks.iter().collect();
    tasks.sort_by_key(|t| t.stage);
    tasks
        .into_iter()
        .map(|t| {
            let spec = DomainSpec::preset(&t.tag)?;
            let (train, val) = split_indices(manifest.seed, &t.tag, t.cases, manifest.split);
            let make = |i: usize| {
                let (scan, mask) = render_case(&spec, manifest.grid, manifest.seed, i);
                LabeledImage {
                    case_id: case_id(&t.tag, i),
                    tag: t.tag.clone(),
                    stage: t.stage,
                    scan,
                    mask,
                }
            };
            Ok(TaskDataset {
                stage: t.stage,
                tag: t.tag.clone(),
                train: train.into_iter().map(make).collect(),
                val: val.into_iter().map(make).collect(),
            })
        })
        .collect()
}

pub const INDEX_FILE: &str = "corpus.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn case_container(img: &LabeledImage, split: Split) -> Container {
    let (h, w) = img.scan.dims();
    let mut c = Container::new();
    c.push(Entry::text(
        "__header__",
        &format!(
            "case={}\ntag={}\nstage={}\nsplit={}\n",
            img.case_id,
            img.tag,
            img.stage,
            split.as_str()
        ),
    ));
    c.push(Entry::f32("scan", &[h, w], img.scan.data().to_vec()));
    c.push(Entry::u8(
        "mask",
        &[h, w],
        img.mask.data().iter().map(|&v| u8::from(v >= 0.5)).collect(),
    ));
    c
}

/// Writes the corpus under `out`: one container per case in `cases/`, the
/// manifest, and an index listing `case tag stage split file`.
pub fn generate_corpus(manifest: &CorpusManifest, out: &Path) -> Result<()> {
    let tasks = generate(manifest)?;
    let cases_dir = out.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
    let mut index = String::new();
    for task in &tasks {
        for (split, items) in [(Split::Train, &task.train), (Split::Val, &task.val)] {
            for img in items {
                let file = format!("cases/{}.bin", img.case_id);
                case_container(img, split).write(&out.join(&file))?;
                index.push_str(&format!(
                    "{} {} {} {} {}\n",
                    img.case_id,
                    img.tag,
                    img.stage,
                    split.as_str(),
                    file
                ));
            }
        }
    }
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(MANIFEST_FILE, &manifest.to_text())?;
    write(INDEX_FILE, &index)
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct IndexEntry {
    case_id: String,
    tag: String,
    stage: usize,
    split: Split,
    file: PathBuf,
}

/// Read access to an on-disk corpus. Every case file read is logged.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    manifest: CorpusManifest,
    entries: Vec<IndexEntry>,
    reads: Arc<Mutex<Vec<CaseRead>>>,
}

/// A logged case-file read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseRead {
    pub case_id: String,
    pub stage: usize,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = root.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest = CorpusManifest::parse(&read(MANIFEST_FILE)?)?;
        let mut entries = Vec::new();
        for (n, line) in read(INDEX_FILE)?.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("{INDEX_FILE} line {}: malformed", n + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            entries.push(IndexEntry {
                case_id: f[0].to_string(),
                tag: f[1].to_string(),
                stage: f[2].parse().map_err(|_| bad())?,
                split: match f[3] {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    _ => return Err(bad()),
                },
                file: PathBuf::from(f[4]),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            entries,
            reads: Arc::new(Mutex::new(Vec::new())),
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stage indices in ascending order.
    pub fn stages(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.manifest.tasks.iter().map(|t| t.stage).collect();
        s.sort_unstable();
        s
    }

    pub fn tag_of(&self, stage: usize) -> Result<&str> {
        self.manifest
            .tasks
            .iter()
            .find(|t| t.stage == stage)
            .map(|t| t.tag.as_str())
            .ok_or_else(|| Error::Config(format!("corpus has no stage {stage}")))
    }

    pub fn stage_of(&self, tag: &str) -> Result<usize> {
        self.manifest
            .tasks
            .iter()
            .find(|t| t.tag == tag)
            .map(|t| t.stage)
            .ok_or_else(|| Error::UnknownDomain(tag.to_string()))
    }

    fn load_entry(&self, e: &IndexEntry) -> Result<LabeledImage> {
        let c = Container::read(&self.root.join(&e.file))?;
        self.reads.lock().expect("log lock").push(CaseRead {
            case_id: e.case_id.clone(),
            stage: e.stage,
        });
        let scan = c.get("scan")?;
        let mask = c.get("mask")?;
        let dims = scan.dims_usize();
        if dims.len() != 2 || mask.dims_usize() != dims {
            return Err(Error::Format {
                offset: 0,
                message: format!("case {} has inconsistent scan/mask dims", e.case_id),
            });
        }
        Ok(LabeledImage {
            case_id: e.case_id.clone(),
            tag: e.tag.clone(),
            stage: e.stage,
            scan: Grid::new(dims[0], dims[1], scan.as_f32()?.to_vec())?,
            mask: Grid::new(
                dims[0],
                dims[1],
                mask.as_u8()?.iter().map(|&b| f32::from(b.min(1))).collect(),
            )?,
        })
    }

    /// Loads one task from disk.
    pub fn load_stage(&self, stage: usize) -> Result<TaskDataset> {
        let tag = self.tag_of(stage)?.to_string();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for e in self.entries.iter().filter(|e| e.stage == stage) {
            let img = self.load_entry(e)?;
            match e.split {
                Split::Train => train.push(img),
                Split::Val => val.push(img),
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::InsufficientData(format!(
                "stage {stage} has an empty split"
            )));
        }
        Ok(TaskDataset {
            stage,
            tag,
            train,
            val,
        })
    }

    pub fn load_all(&self) -> Result<Vec<TaskDataset>> {
        self.stages().into_iter().map(|s| self.load_stage(s)).collect()
    }

    /// Every case file read so far, in order.
    pub fn reads(&self) -> Vec<CaseRead> {
        self.reads.lock().expect("log lock").clone()
    }

    pub fn clear_reads(&self) {
        self.reads.lock().expect("log lock").clear();
    }
}

/// Area of each 4-connected component of the foreground of a binary mask.
pub fn connected_components(mask: &Grid) -> Vec<usize> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] < 0.5 {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && mask.data()[j] >= 0.5 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }
    sizes
}

/// True when the background is one 4-connected region touching the border,
/// i.e. the foreground has no holes.
pub fn has_no_holes(mask: &Grid) -> bool {
    let (h, w) = mask.dims();
    // Pad by one pixel so the outside is a single region.
    let padded = Grid::from_fn(h + 2, w + 2, |x, y| {
        if x == 0 || y == 0 || x == w + 1 || y == h + 1 {
            1.0
        } else if mask.get(x - 1, y - 1) >= 0.5 {
            0.0
        } else {
            1.0
        }
    });
    connected_components(&padded).len() == 1
}

/// Per-tag pixelwise mean mask over a set of images.
pub fn mean_masks(images: &[LabeledImage]) -> BTreeMap<String, Grid> {
    let mut acc: BTreeMap<String, (Grid, usize)> = BTreeMap::new();
    for img in images {
        let (h, w) = img.mask.dims();
        let e = acc
            .entry(img.tag.clone())
            .or_insert_with(|| (Grid::zeros(h, w), 0));
        for (a, &m) in e.0.data_mut().iter_mut().zip(img.mask.data()) {
            *a += m;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (g, n))| (k, g.map(|v| v / n as f32)))
        .collect()
}
