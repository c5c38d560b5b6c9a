//! Prototypes: rigidly co-aligned running averages of a few labeled cases.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::datagen::{derive_seed, LabeledImage, TaskDataset};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::imageproc::{apply_rigid, global_ncc, rigid_align, Interp, RigidTransform};
use crate::io::{Container, Entry};

/// Stream index reserved for constituent draws (case rendering uses 0..n).
const DRAW_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub tag: String,
    pub scan: Grid,
    /// Soft mask in `[0, 1]`.
    pub mask: Grid,
    pub r: usize,
    /// SHA-256 of each constituent case id, in draw order.
    pub constituent_ids: Vec<String>,
}

/// How each new case is brought into the prototype frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    Rigid,
    /// No alignment; used to check the averaging arithmetic in isolation.
    Identity,
}

pub fn hash_case_id(case_id: &str) -> String {
    hex::encode(Sha256::digest(case_id.as_bytes()))
}

/// Weight of each constituent in the final prototype, in draw order.
///
/// The first case halves at every later update, so it ends with
/// `2^-(r-1)`; case `i >= 2` ends with `2^-(r-i+1)`.
pub fn constituent_weights(r: usize) -> Vec<f64> {
    (1..=r)
        .map(|i| {
            let e = if i == 1 { r - 1 } else { r - i + 1 };
            0.5f64.powi(e as i32)
        })
        .collect()
}

/// Indices into `dataset.train` of the `r` constituents, in draw order.
pub fn draw_constituents(dataset: &TaskDataset, r: usize, seed: u64) -> Result<Vec<usize>> {
    let n = dataset.train.len();
    if r == 0 || r > n {
        return Err(Error::InsufficientData(format!(
            "domain {} has {n} training cases, prototype needs {r}",
            dataset.tag
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &dataset.tag, DRAW_STREAM));
    Ok(rand::seq::index::sample(&mut rng, n, r).into_vec())
}

/// Folds `cases` into a prototype: start from the first, then for each
/// next case align it to the current prototype and average pairwise.
pub fn fold_prototype(tag: &str, cases: &[&LabeledImage], alignment: Alignment) -> Result<Prototype> {
    let first = cases
        .first()
        .ok_or_else(|| Error::InsufficientData("prototype needs at least one case".into()))?;
    let mut scan = first.scan.clone();
    let mut mask = first.mask.clone();
    for case in &cases[1..] {
        case.scan.same_dims(&scan)?;
        let t = match alignment {
            Alignment::Rigid => rigid_align(&case.scan, &scan)?,
            Alignment::Identity => RigidTransform::IDENTITY,
        };
        let s = apply_rigid(&case.scan, &t, Interp::Bilinear);
        let m = apply_rigid(&case.mask, &t, Interp::Bilinear);
        scan = scan.average(&s)?;
        mask = mask.average(&m)?;
    }
    Ok(Prototype {
        tag: tag.to_string(),
        scan,
        mask: mask.map(|v| v.clamp(0.0, 1.0)),
        r: cases.len(),
        constituent_ids: cases.iter().map(|c| hash_case_id(&c.case_id)).collect(),
    })
}

pub fn build_prototype(dataset: &TaskDataset, r: usize, seed: u64) -> Result<Prototype> {
    let picks = draw_constituents(dataset, r, seed)?;
    let cases: Vec<&LabeledImage> = picks.iter().map(|&i| &dataset.train[i]).collect();
    fold_prototype(&dataset.tag, &cases, Alignment::Rigid)
}

/// Prototypes keyed by domain tag, kept in tag order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeAtlas {
    prototypes: Vec<Prototype>,
}

impl PrototypeAtlas {
    pub fn new(mut prototypes: Vec<Prototype>) -> Result<Self> {
        prototypes.sort_by(|a, b| a.tag.cmp(&b.tag));
        if let Some(w) = prototypes.windows(2).find(|w| w[0].tag == w[1].tag) {
            return Err(Error::Contract(format!("duplicate prototype tag {}", w[0].tag)));
        }
        Ok(Self { prototypes })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn tags(&self) -> Vec<&str> {
        self.prototypes.iter().map(|p| p.tag.as_str()).collect()
    }

    pub fn get(&self, tag: &str) -> Result<&Prototype> {
        self.prototypes
            .iter()
            .find(|p| p.tag == tag)
            .ok_or_else(|| Error::UnknownDomain(tag.to_string()))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let mut manifest = String::new();
        for p in &self.prototypes {
            manifest.push_str(&format!(
                "tag={} r={} grid={}x{} ids={}\n",
                p.tag,
                p.r,
                p.scan.height(),
                p.scan.width(),
                p.constituent_ids.join(",")
            ));
        }
        c.push(Entry::text("__manifest__", &manifest));
        for p in &self.prototypes {
            let dims = [p.scan.height(), p.scan.width()];
            c.push(Entry::f32(format!("P_i_scan/{}", p.tag), &dims, p.scan.data().to_vec()));
            c.push(Entry::f32(format!("P_i_mask/{}", p.tag), &dims, p.mask.data().to_vec()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: String| Error::Format { offset: 0, message: m };
        let mut prototypes = Vec::new();
        for line in c.get("__manifest__")?.as_text()?.lines() {
            let mut tag = None;
            let mut r = None;
            let mut ids = Vec::new();
            for field in line.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| bad(format!("atlas manifest field {field:?}")))?;
                match k {
                    "tag" => tag = Some(v.to_string()),
                    "r" => r = v.parse().ok(),
                    "grid" => {}
                    "ids" => ids = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
                    _ => return Err(bad(format!("atlas manifest key {k:?}"))),
                }
            }
            let (tag, r) = match (tag, r) {
                (Some(t), Some(r)) => (t, r),
                _ => return Err(bad(format!("atlas manifest line {line:?}"))),
            };
            let grid = |name: String| -> Result<Grid> {
                let e = c.get(&name)?;
                let d = e.dims_usize();
                if d.len() != 2 {
                    return Err(bad(format!("{name} is not a 2-d grid")));
                }
                Grid::new(d[0], d[1], e.as_f32()?.to_vec())
            };
            prototypes.push(Prototype {
                scan: grid(format!("P_i_scan/{tag}"))?,
                mask: grid(format!("P_i_mask/{tag}"))?,
                tag,
                r,
                constituent_ids: ids,
            });
        }
        Self::new(prototypes)
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

/// One prototype for each of the first `k` tasks, in the given order.
pub fn build_atlas(tasks: &[TaskDataset], k: usize, r: usize, seed: u64) -> Result<PrototypeAtlas> {
    if k == 0 || tasks.len() < k {
        return Err(Error::InsufficientData(format!(
            "atlas of {k} prototypes needs {k} domains, corpus has {}",
            tasks.len()
        )));
    }
    let protos = tasks[..k]
        .iter()
        .map(|t| build_prototype(t, r, seed))
        .collect::<Result<Vec<_>>>()?;
    PrototypeAtlas::new(protos)
}

/// Global NCC of each prototype against `scan` after rigidly aligning the
/// prototype to it, in tag order.
pub fn prototype_scores(scan: &Grid, atlas: &PrototypeAtlas) -> Result<Vec<f64>> {
    atlas
        .prototypes()
        .iter()
        .map(|p| {
            let t = rigid_align(&p.scan, scan)?;
            global_ncc(&apply_rigid(&p.scan, &t, Interp::Bilinear), scan)
        })
        .collect()
}

/// The prototype for `tag`, or when no tag is given the best-matching one
/// under global NCC (earlier tag wins ties).
pub fn select_prototype<'a>(
    scan: &Grid,
    atlas: &'a PrototypeAtlas,
    tag: Option<&str>,
) -> Result<&'a Prototype> {
    if let Some(tag) = tag {
        return atlas.get(tag);
    }
    match atlas.len() {
        0 => Err(Error::InsufficientData("empty atlas".into())),
        1 => Ok(&atlas.prototypes()[0]),
        _ => {
            let scores = prototype_scores(scan, atlas)?;
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            Ok(&atlas.prototypes()[best])
        }
    }
}
