//! Overlap, transfer and confusion metrics, and the re-identification probe.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::continual::{evaluate_task, Checkpoint, Selection};
use crate::datagen::{LabeledImage, TaskDataset};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::imageproc::{apply_rigid, global_ncc, rigid_align, Interp};
use crate::prototypes::{hash_case_id, PrototypeAtlas};

/// `2|A∩B| / (|A|+|B|)` over masks thresholded at 0.5; two empty masks give 1.
pub fn dice(pred: &Grid, truth: &Grid) -> Result<f64> {
    pred.same_dims(truth)?;
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p >= 0.5, t >= 0.5);
        a += p as u64;
        b += t as u64;
        inter += (p && t) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// `d[j][p]`: Dice on task `p` of the model trained through stage `j`
/// (both 0-based here). `single[p]`: Dice of the model trained on task `p`
/// alone.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceMatrix {
    pub d: Vec<Vec<f64>>,
    pub single: Option<Vec<f64>>,
}

impl DiceMatrix {
    pub fn new(d: Vec<Vec<f64>>, single: Option<Vec<f64>>) -> Result<Self> {
        let n = d.len();
        if d.iter().any(|row| row.len() != n) || single.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::InvalidShape(format!("dice matrix must be {n}x{n}")));
        }
        let all = d.iter().flatten().chain(single.iter().flatten());
        if let Some(v) = all.into_iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("dice value {v} outside [0, 1]")));
        }
        Ok(Self { d, single })
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }
}

/// Per-task transfer values (1-based task index) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub per_task: Vec<(usize, f64)>,
    pub mean: f64,
}

fn transfer(per_task: Vec<(usize, f64)>) -> Transfer {
    let mean = per_task.iter().map(|(_, v)| v).sum::<f64>() / per_task.len() as f64;
    Transfer { per_task, mean }
}

/// Backward transfer: final-model Dice minus just-trained Dice, for every
/// task but the last.
pub fn bwt(m: &DiceMatrix) -> Result<Transfer> {
    let n = m.n();
    if n < 2 {
        return Err(Error::UndefinedMetric("BWT needs at least two stages".into()));
    }
    Ok(transfer(
        (0..n - 1).map(|p| (p + 1, m.d[n - 1][p] - m.d[p][p])).collect(),
    ))
}

/// Forward transfer: Dice of the previous stage's model on a task minus
/// that task's single-task Dice, for every task but the first.
pub fn fwt(m: &DiceMatrix) -> Result<Transfer> {
    let n = m.n();
    if n < 2 {
        return Err(Error::UndefinedMetric("FWT needs at least two stages".into()));
    }
    let s = m
        .single
        .as_ref()
        .ok_or_else(|| Error::UndefinedMetric("FWT needs single-task Dice".into()))?;
    Ok(transfer((1..n).map(|p| (p + 1, m.d[p - 1][p] - s[p])).collect()))
}

/// Mean validation Dice of every stage checkpoint on every task, plus the
/// single-task checkpoints on their own task when given. `tasks` follow the
/// training order.
pub fn dice_matrix(
    checkpoints: &[Checkpoint],
    single_task: Option<&[Checkpoint]>,
    tasks: &[TaskDataset],
    atlas: Option<&PrototypeAtlas>,
    selection: Selection,
) -> Result<DiceMatrix> {
    let n = tasks.len();
    if checkpoints.len() != n || single_task.is_some_and(|s| s.len() != n) {
        return Err(Error::IncompleteRun(format!(
            "{n} tasks need {n} stage checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let d = checkpoints
        .iter()
        .map(|c| {
            tasks
                .iter()
                .map(|t| evaluate_task(c, t, atlas, selection))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let single = single_task
        .map(|s| {
            s.iter()
                .zip(tasks)
                .map(|(c, t)| evaluate_task(c, t, atlas, selection))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    DiceMatrix::new(d, single)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.tn += o.tn;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// `None` marks a rate whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub mcc: Option<f64>,
}

pub fn confusion_metrics(c: &ConfusionCounts) -> Rates {
    let [tp, tn, fp, fn_] = [c.tp, c.tn, c.fp, c.fn_].map(|v| v as f64);
    let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    Rates {
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        precision: ratio(tp, tp + fp),
        mcc: ratio(tp * tn - fp * fn_, den.sqrt()),
    }
}

/// Strategy for picking the constituent out of a lineup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attacker {
    /// Rigidly align each candidate to the prototype, pick the best global NCC.
    Ncc,
    /// Uniform random pick.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Counts per prototype tag, in atlas order.
    pub per_domain: Vec<(String, ConfusionCounts)>,
    pub total: ConfusionCounts,
}

/// Lineup size: one constituent and two decoys.
pub const LINEUP: usize = 3;

/// Re-identification probe. Each trial shows the attacker a prototype and a
/// shuffled lineup of one of its constituents plus two other cases of the
/// same domain; the pick is scored as one positive and two negatives.
pub fn reid_probe(
    atlas: &PrototypeAtlas,
    tasks: &[TaskDataset],
    trials_per_prototype: usize,
    seed: u64,
    attacker: Attacker,
) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_domain = Vec::new();
    let mut total = ConfusionCounts::default();
    for proto in atlas.prototypes() {
        let task = tasks
            .iter()
            .find(|t| t.tag == proto.tag)
            .ok_or_else(|| Error::UnknownDomain(proto.tag.clone()))?;
        let pool: Vec<&LabeledImage> = task.train.iter().chain(&task.val).collect();
        let (members, decoys): (Vec<&LabeledImage>, Vec<&LabeledImage>) = pool
            .into_iter()
            .partition(|c| proto.constituent_ids.contains(&hash_case_id(&c.case_id)));
        if members.is_empty() || decoys.len() < LINEUP - 1 {
            return Err(Error::InsufficientData(format!(
                "domain {} cannot fill a lineup of {LINEUP}",
                proto.tag
            )));
        }
        let mut counts = ConfusionCounts::default();
        for _ in 0..trials_per_prototype {
            let truth = members[rng.random_range(0..members.len())];
            let mut lineup = vec![truth];
            lineup.extend(decoys.choose_multiple(&mut rng, LINEUP - 1).copied());
            lineup.shuffle(&mut rng);
            let pick = match attacker {
                Attacker::Random => rng.random_range(0..LINEUP),
                Attacker::Ncc => {
                    let mut best = (0, f64::NEG_INFINITY);
                    for (i, c) in lineup.iter().enumerate() {
                        let t = rigid_align(&c.scan, &proto.scan)?;
                        let s = global_ncc(&apply_rigid(&c.scan, &t, Interp::Bilinear), &proto.scan)?;
                        if s > best.1 {
                            best = (i, s);
                        }
                    }
                    best.0
                }
            };
            for (i, c) in lineup.iter().enumerate() {
                let positive = std::ptr::eq(*c, truth);
                match (i == pick, positive) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => counts.tn += 1,
                }
            }
        }
        total.add(&counts);
        per_domain.push((proto.tag.clone(), counts));
    }
    Ok(ProbeReport { per_domain, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Grid {
        Grid::new(1, bits.len(), bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &mask(&[0, 0, 0, 0, 1, 1, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(matches!(dice(&a, &mask(&[1])), Err(Error::InvalidShape(_))));
    }

    fn example() -> DiceMatrix {
        DiceMatrix::new(
            vec![
                vec![0.8, 0.3, 0.2],
                vec![0.6, 0.7, 0.3],
                vec![0.5, 0.6, 0.7],
            ],
            Some(vec![0.8, 0.75, 0.7]),
        )
        .unwrap()
    }

    #[test]
    fn bwt_example() {
        let b = bwt(&example()).unwrap();
        assert_eq!(b.per_task.len(), 2);
        assert!((b.per_task[0].1 + 0.3).abs() < 1e-12);
        assert!((b.per_task[1].1 + 0.1).abs() < 1e-12);
        assert!((b.mean + 0.2).abs() < 1e-12);
    }

    #[test]
    fn fwt_example() {
        let f = fwt(&example()).unwrap();
        assert_eq!(f.per_task.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 3]);
        assert!((f.per_task[0].1 + 0.45).abs() < 1e-12);
        assert!((f.per_task[1].1 + 0.4).abs() < 1e-12);
        assert!((f.mean + 0.425).abs() < 1e-12);
    }

    #[test]
    fn transfer_needs_two_stages_and_single_scores() {
        let one = DiceMatrix::new(vec![vec![0.5]], Some(vec![0.5])).unwrap();
        assert!(matches!(bwt(&one), Err(Error::UndefinedMetric(_))));
        let no_single = DiceMatrix::new(example().d, None).unwrap();
        assert!(matches!(fwt(&no_single), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn confusion_example() {
        let r = confusion_metrics(&ConfusionCounts { tp: 3, tn: 5, fp: 1, fn_: 1 });
        assert_eq!(r.sensitivity, Some(0.75));
        assert!((r.specificity.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.precision, Some(0.75));
        assert!((r.mcc.unwrap() - 0.5833).abs() < 5e-5);
    }

    #[test]
    fn confusion_edge_cases() {
        let perfect = confusion_metrics(&ConfusionCounts { tp: 4, tn: 6, fp: 0, fn_: 0 });
        assert_eq!(perfect.mcc, Some(1.0));
        assert_eq!(perfect.precision, Some(1.0));
        let flat = confusion_metrics(&ConfusionCounts { tp: 2, tn: 2, fp: 2, fn_: 2 });
        assert_eq!(flat.mcc, Some(0.0));
        let none = confusion_metrics(&ConfusionCounts { tp: 0, tn: 3, fp: 0, fn_: 0 });
        assert_eq!(none.sensitivity, None);
        assert_eq!(none.precision, None);
        assert_eq!(none.mcc, None);
        assert_eq!(none.specificity, Some(1.0));
    }
}
