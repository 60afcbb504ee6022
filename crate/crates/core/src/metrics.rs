//! Ch_IoU, ISI_IoU and mc_IoU over class-index masks, with a brute-force
//! reference implementation.
//!
//! Conventions: a class empty in both prediction and ground truth has
//! IoU 1 but never enters an average; Ch_IoU skips images whose ground
//! truth has no class; ISI_IoU skips images where both masks are pure
//! background; mc_IoU averages over classes seen at least once. A metric
//! with nothing to average is 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const CONVENTIONS: &str = "IoU(empty, empty) = 1; Ch_IoU averages classes present in the ground truth and skips \
images without any; ISI_IoU averages the union of ground-truth and predicted classes and skips images where both are \
empty; mc_IoU averages each class over images where it appears in either mask, then over classes that appear at least \
once; values are percentages rounded to 2 decimals at serialization";

/// One predicted mask and its ground truth, both `H·W` class indices.
#[derive(Clone, Copy, Debug)]
pub struct MaskPair<'a> {
    pub id: &'a str,
    pub pred: &'a [u8],
    pub gt: &'a [u8],
}

/// IoU of two binary masks.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("masks of {} and {} pixels", pred.len(), gt.len())));
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    /// `None` when the image was skipped.
    pub ch_iou: Option<f64>,
    pub isi_iou: Option<f64>,
    /// Per-class IoU over the union of predicted and ground-truth classes.
    pub classes: BTreeMap<u8, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Counts {
    pub images: usize,
    pub ch_images: usize,
    pub isi_images: usize,
    pub skipped_empty_gt: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    pub ch_iou: f64,
    pub isi_iou: f64,
    pub mc_iou: f64,
    /// mc-style per-class mean, keyed by class id.
    pub per_class: BTreeMap<u8, f64>,
    pub per_image: Vec<ImageScore>,
    pub counts: Counts,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check(pairs: &[MaskPair]) -> Result<()> {
    for p in pairs {
        if p.pred.len() != p.gt.len() {
            return Err(Error::Shape(format!("{}: prediction has {} pixels, ground truth {}", p.id, p.pred.len(), p.gt.len())));
        }
    }
    Ok(())
}

/// Aggregates per-image class IoUs (over the union of classes) into the
/// three metrics.
fn aggregate(per_image: Vec<(String, BTreeSet<u8>, BTreeMap<u8, f64>)>) -> IoUReport {
    let mut ch = Vec::new();
    let mut isi = Vec::new();
    let mut by_class: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut scores = Vec::with_capacity(per_image.len());
    let mut counts = Counts { images: per_image.len(), ..Default::default() };
    for (id, gt_classes, ious) in per_image {
        let ch_i = if gt_classes.is_empty() {
            counts.skipped_empty_gt += 1;
            None
        } else {
            let v: Vec<f64> = gt_classes.iter().map(|c| ious[c]).collect();
            Some(mean(&v))
        };
        let isi_i = if ious.is_empty() {
            None
        } else {
            let v: Vec<f64> = ious.values().copied().collect();
            Some(mean(&v))
        };
        ch.extend(ch_i);
        isi.extend(isi_i);
        for (&c, &v) in &ious {
            by_class.entry(c).or_default().push(v);
        }
        scores.push(ImageScore { id, ch_iou: ch_i.map(|v| 100.0 * v), isi_iou: isi_i.map(|v| 100.0 * v), classes: ious });
    }
    counts.ch_images = ch.len();
    counts.isi_images = isi.len();
    let per_class: BTreeMap<u8, f64> = by_class.iter().map(|(&c, v)| (c, 100.0 * mean(v))).collect();
    let class_means: Vec<f64> = per_class.values().copied().collect();
    IoUReport {
        ch_iou: 100.0 * mean(&ch),
        isi_iou: 100.0 * mean(&isi),
        mc_iou: mean(&class_means),
        per_class,
        per_image: scores,
        counts,
    }
}

/// Single pass per image building intersection and area histograms.
pub fn evaluate(pairs: &[MaskPair]) -> Result<IoUReport> {
    check(pairs)?;
    let per_image = pairs
        .iter()
        .map(|p| {
            let mut inter = [0usize; 256];
            let mut pred_area = [0usize; 256];
            let mut gt_area = [0usize; 256];
            for (&a, &b) in p.pred.iter().zip(p.gt) {
                pred_area[a as usize] += 1;
                gt_area[b as usize] += 1;
                if a == b {
                    inter[a as usize] += 1;
                }
            }
            let mut gt_classes = BTreeSet::new();
            let mut ious = BTreeMap::new();
            for c in 1..256 {
                let (pa, ga) = (pred_area[c], gt_area[c]);
                if pa == 0 && ga == 0 {
                    continue;
                }
                if ga > 0 {
                    gt_classes.insert(c as u8);
                }
                ious.insert(c as u8, inter[c] as f64 / (pa + ga - inter[c]) as f64);
            }
            (p.id.to_string(), gt_classes, ious)
        })
        .collect();
    Ok(aggregate(per_image))
}

/// Reference implementation: each metric recomputed from scratch with its
/// own loops, building binary masks per class and scoring them with [`iou`].
pub fn oracle_report(pairs: &[MaskPair]) -> Result<IoUReport> {
    check(pairs)?;
    let has = |mask: &[u8], c: u8| mask.contains(&c);
    let class_iou = |p: &MaskPair, c: u8| -> Result<f64> {
        let pm: Vec<bool> = p.pred.iter().map(|&v| v == c).collect();
        let gm: Vec<bool> = p.gt.iter().map(|&v| v == c).collect();
        iou(&pm, &gm)
    };

    let mut ch_sum = 0.0;
    let mut ch_n = 0usize;
    let mut isi_sum = 0.0;
    let mut isi_n = 0usize;
    let mut per_image = Vec::new();
    for p in pairs {
        let mut ch_terms = Vec::new();
        let mut isi_terms = Vec::new();
        let mut classes = BTreeMap::new();
        for c in 1..=255u8 {
            let (in_gt, in_pred) = (has(p.gt, c), has(p.pred, c));
            if in_gt {
                ch_terms.push(class_iou(p, c)?);
            }
            if in_gt || in_pred {
                let v = class_iou(p, c)?;
                isi_terms.push(v);
                classes.insert(c, v);
            }
        }
        let ch_i = if ch_terms.is_empty() { None } else { Some(ch_terms.iter().sum::<f64>() / ch_terms.len() as f64) };
        let isi_i = if isi_terms.is_empty() { None } else { Some(isi_terms.iter().sum::<f64>() / isi_terms.len() as f64) };
        if let Some(v) = ch_i {
            ch_sum += v;
            ch_n += 1;
        }
        if let Some(v) = isi_i {
            isi_sum += v;
            isi_n += 1;
        }
        per_image.push(ImageScore {
            id: p.id.to_string(),
            ch_iou: ch_i.map(|v| 100.0 * v),
            isi_iou: isi_i.map(|v| 100.0 * v),
            classes,
        });
    }

    let mut per_class = BTreeMap::new();
    for c in 1..=255u8 {
        let mut terms = Vec::new();
        for p in pairs {
            if has(p.gt, c) || has(p.pred, c) {
                terms.push(class_iou(p, c)?);
            }
        }
        if !terms.is_empty() {
            per_class.insert(c, 100.0 * (terms.iter().sum::<f64>() / terms.len() as f64));
        }
    }
    let mc = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    let pct = |sum: f64, n: usize| if n == 0 { 0.0 } else { 100.0 * (sum / n as f64) };
    Ok(IoUReport {
        ch_iou: pct(ch_sum, ch_n),
        isi_iou: pct(isi_sum, isi_n),
        mc_iou: mc,
        per_class,
        per_image,
        counts: Counts {
            images: pairs.len(),
            ch_images: ch_n,
            isi_images: isi_n,
            skipped_empty_gt: pairs.len() - ch_n,
        },
    })
}

impl IoUReport {
    /// JSON report; `names` maps class ids to display names.
    pub fn to_json(&self, names: &BTreeMap<u8, String>) -> Value {
        let name = |c: u8| names.get(&c).cloned().unwrap_or_else(|| format!("class_{c}"));
        let per_class: serde_json::Map<String, Value> =
            self.per_class.iter().map(|(&c, &v)| (name(c), json!(round2(v)))).collect();
        let per_image: Vec<Value> = self
            .per_image
            .iter()
            .map(|s| {
                let classes: serde_json::Map<String, Value> =
                    s.classes.iter().map(|(&c, &v)| (name(c), json!(round2(100.0 * v)))).collect();
                json!({
                    "id": s.id,
                    "ch_iou": s.ch_iou.map(round2),
                    "isi_iou": s.isi_iou.map(round2),
                    "classes": classes,
                })
            })
            .collect();
        json!({
            "ch_iou": round2(self.ch_iou),
            "isi_iou": round2(self.isi_iou),
            "mc_iou": round2(self.mc_iou),
            "per_class": per_class,
            "per_image": per_image,
            "counts": self.counts,
            "conventions": CONVENTIONS,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair<'a>(pred: &'a [u8], gt: &'a [u8]) -> MaskPair<'a> {
        MaskPair { id: "x", pred, gt }
    }

    #[test]
    fn binary_iou_cases() {
        let a = [true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(iou(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false; 4]).unwrap(), 0.0);
        // 4x4: intersection 2, union 6
        let mut p = [false; 16];
        let mut g = [false; 16];
        p[..4].fill(true);
        g[2..6].fill(true);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou(&p, &g[..8]).is_err());
    }

    #[test]
    fn perfect_predictions_score_100() {
        let gt = [0u8, 1, 1, 2, 2, 2, 0, 3];
        let r = evaluate(&[pair(&gt, &gt)]).unwrap();
        assert_eq!((r.ch_iou, r.isi_iou, r.mc_iou), (100.0, 100.0, 100.0));
    }

    #[test]
    fn spurious_class_hits_isi_but_not_ch() {
        // class 1: pred 4 px, gt 5 px, overlap 4 -> 0.8; class 2 only predicted
        let gt = [1u8, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let pred = [1u8, 1, 1, 1, 0, 0, 0, 0, 2, 2];
        let r = evaluate(&[pair(&pred, &gt)]).unwrap();
        assert!((r.ch_iou - 80.0).abs() < 1e-12);
        assert!((r.isi_iou - 40.0).abs() < 1e-12);
        assert!(r.isi_iou < r.ch_iou);
    }

    #[test]
    fn ch_iou_averages_image_means() {
        let gt = [1u8, 1, 0, 0];
        let half = [1u8, 0, 0, 0];
        let r = evaluate(&[pair(&half, &gt), pair(&gt, &gt)]).unwrap();
        assert!((r.ch_iou - 75.0).abs() < 1e-12);
    }

    #[test]
    fn mc_iou_is_a_two_stage_mean() {
        // class 1 scores 1.0 then 0.0; class 2 scores 0.5
        let a_gt = [1u8, 1, 0, 0];
        let b_gt = [1u8, 0, 2, 2];
        let b_pred = [0u8, 0, 2, 0];
        let r = evaluate(&[pair(&a_gt, &a_gt), pair(&b_pred, &b_gt)]).unwrap();
        assert!((r.per_class[&1] - 50.0).abs() < 1e-12);
        assert!((r.per_class[&2] - 50.0).abs() < 1e-12);
        assert!((r.mc_iou - 50.0).abs() < 1e-12);
        assert!(!r.per_class.contains_key(&3));
    }

    #[test]
    fn empty_predictions_and_skips() {
        let gt = [1u8, 1, 0, 0];
        let r = evaluate(&[pair(&[0; 4], &gt)]).unwrap();
        assert_eq!(r.ch_iou, 0.0);
        let bg = [0u8; 4];
        let r = evaluate(&[pair(&bg, &bg)]).unwrap();
        assert_eq!((r.ch_iou, r.isi_iou, r.mc_iou), (0.0, 0.0, 0.0));
        assert_eq!(r.counts.skipped_empty_gt, 1);
        assert_eq!(r.counts.isi_images, 0);
    }

    #[test]
    fn one_image_one_class_collapses_the_averages() {
        let gt = [1u8, 1, 1, 0];
        let pred = [1u8, 1, 0, 0];
        let r = evaluate(&[pair(&pred, &gt)]).unwrap();
        assert!((r.ch_iou - r.isi_iou).abs() < 1e-12 && (r.isi_iou - r.mc_iou).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_on_a_fixed_case() {
        let gt = [1u8, 2, 2, 3, 0, 0, 1, 1, 4];
        let pred = [1u8, 2, 3, 3, 4, 0, 0, 1, 4];
        let a = evaluate(&[pair(&pred, &gt), pair(&gt, &pred)]).unwrap();
        let b = oracle_report(&[pair(&pred, &gt), pair(&gt, &pred)]).unwrap();
        for (x, y) in [(a.ch_iou, b.ch_iou), (a.isi_iou, b.isi_iou), (a.mc_iou, b.mc_iou)] {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(a.per_class.keys().collect::<Vec<_>>(), b.per_class.keys().collect::<Vec<_>>());
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn json_rounds_and_names_classes() {
        let gt = [1u8, 1, 1, 0];
        let pred = [1u8, 1, 0, 0];
        let r = evaluate(&[pair(&pred, &gt)]).unwrap();
        let names: BTreeMap<u8, String> = [(1, "probe".to_string())].into();
        let j = r.to_json(&names);
        assert_eq!(j["ch_iou"], json!(66.67));
        assert_eq!(j["per_class"]["probe"], json!(66.67));
        assert!(j["conventions"].as_str().unwrap().contains("IoU(empty, empty) = 1"));
    }
}
