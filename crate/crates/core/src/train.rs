//! Losses, multi-class mask assembly and the training loop.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{augment, AugmentSpec, Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::hiar::{adjust_to_ratio, mine_hard_patches, random_mask};
use crate::metrics::{evaluate, IoUReport, MaskPair};
use crate::model::Model;
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;

/// Mean binary cross-entropy of a score map against a binary target.
pub fn seg_loss(g: &mut Graph, scores: Var, target: Rc<Tensor>) -> Result<Var> {
    if g.value(scores).shape() != target.shape() {
        return Err(Error::Shape(format!("scores {:?} vs target {:?}", g.value(scores).shape(), target.shape())));
    }
    Ok(g.bce_mean(scores, target))
}

/// Mean squared error between a reconstruction and its image.
pub fn rec_loss(g: &mut Graph, recon: Var, image: Var) -> Result<Var> {
    if g.value(recon).shape() != g.value(image).shape() {
        return Err(Error::Shape(format!("reconstruction {:?} vs image {:?}", g.value(recon).shape(), g.value(image).shape())));
    }
    Ok(g.mse_mean(recon, image))
}

/// `ℒ^seg + λ·ℒ^rec`.
pub fn combined_loss(g: &mut Graph, seg: Var, rec: Option<Var>, weight: f64) -> Var {
    match rec {
        Some(r) if weight != 0.0 => {
            let r = g.scale(r, weight);
            g.add(seg, r)
        }
        _ => seg,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub rec: f64,
    pub total: f64,
}

/// Per pixel, the class with the highest score if it reaches `threshold`,
/// otherwise background. Ties go to the smallest class id.
pub fn assemble_mask(maps: &[(u8, &[f64])], threshold: f64) -> Vec<u8> {
    let Some(first) = maps.first() else { return Vec::new() };
    let mut order: Vec<&(u8, &[f64])> = maps.iter().collect();
    order.sort_by_key(|(c, _)| *c);
    let pixels = first.1.len();
    (0..pixels)
        .map(|i| {
            let mut best = (order[0].0, order[0].1[i]);
            for &&(c, s) in &order[1..] {
                if s[i] > best.1 {
                    best = (c, s[i]);
                }
            }
            if best.1 >= threshold {
                best.0
            } else {
                0
            }
        })
        .collect()
}

/// Graph handles of one sample's losses.
#[derive(Clone, Copy, Debug)]
pub struct SampleLosses {
    pub seg: Var,
    pub rec: Option<Var>,
    pub total: Var,
}

/// Classes supervised for one sample: `(class id, target is present)`.
pub fn choose_classes(sample: &ImageSample, all: &[u8], with_negative: bool, rng: &mut ChaCha8Rng) -> Vec<(u8, bool)> {
    let present: Vec<u8> = sample.classes_present().into_iter().collect();
    let absent: Vec<u8> = all.iter().copied().filter(|c| !present.contains(c)).collect();
    if present.is_empty() {
        return vec![(all[rng.random_range(0..all.len())], false)];
    }
    let mut out = vec![(present[rng.random_range(0..present.len())], true)];
    if with_negative && !absent.is_empty() {
        out.push((absent[rng.random_range(0..absent.len())], false));
    }
    out
}

/// Builds the loss graph for one (already augmented) sample.
pub fn sample_losses(
    model: &Model,
    g: &mut Graph,
    sample: &ImageSample,
    supervised: &[(u8, bool)],
    rng: &mut ChaCha8Rng,
) -> Result<SampleLosses> {
    let cfg = &model.config;
    let visual = model.visual(g, &sample.image)?;
    let want_rec = cfg.hiar && cfg.loss_weight > 0.0;
    let forward_ids: Vec<u8> = if want_rec { model.bundles.iter().map(|b| b.class_id).collect() } else { supervised.iter().map(|s| s.0).collect() };
    let mut scores = BTreeMap::new();
    for id in forward_ids {
        let bundle = model.bundle(id).ok_or_else(|| Error::UnknownClass(format!("id {id}")))?;
        let out = model.class_forward(g, visual, id, &bundle.features)?;
        scores.insert(id, out.score);
    }

    let mut terms = Vec::with_capacity(supervised.len());
    for &(id, present) in supervised {
        let target = if present { sample.binary_mask(id) } else { vec![0.0; sample.mask.len()] };
        let target = Rc::new(Tensor::from_vec(target.len(), 1, target));
        terms.push(seg_loss(g, scores[&id], target)?);
    }
    let mut seg = terms[0];
    for &t in &terms[1..] {
        seg = g.add(seg, t);
    }
    if terms.len() > 1 {
        seg = g.scale(seg, 1.0 / terms.len() as f64);
    }
    if !g.value(seg).item().is_finite() {
        return Err(Error::NonFinite("segmentation loss".into()));
    }

    let rec = if want_rec {
        let grid = cfg.grid_size();
        let mask = if cfg.ham {
            let maps: Vec<(u8, &[f64])> = scores.iter().map(|(&c, &v)| (c, g.value(v).data())).collect();
            let predicted = assemble_mask(&maps, cfg.threshold);
            let hard = mine_hard_patches(&predicted, &sample.mask, sample.height, sample.width, cfg.patch_size)?;
            adjust_to_ratio(&hard, cfg.mask_ratio_threshold, rng)?
        } else {
            random_mask(grid, grid, cfg.mask_ratio_threshold, rng)?
        };
        let out = model.reconstructor.reconstruct(g, &model.store, &model.image, &sample.image, &mask)?;
        let target = g.constant(sample.image.clone());
        let r = rec_loss(g, out.image, target)?;
        if !g.value(r).item().is_finite() {
            return Err(Error::NonFinite("reconstruction loss".into()));
        }
        Some(r)
    } else {
        None
    };
    let total = combined_loss(g, seg, rec, cfg.loss_weight);
    Ok(SampleLosses { seg, rec, total })
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_seg: f64,
    pub loss_rec: f64,
    pub val_ch_iou: f64,
}

/// Optimiser state around a model.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub augmentation: AugmentSpec,
    /// Samples consumed so far; drives the periodic negative class.
    pub seen: usize,
}

/// Training RNG: the config seed on a separate stream from initialisation.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(model: Model, augmentation: AugmentSpec) -> Self {
        let rng = training_rng(model.config.seed);
        Trainer { model, adam: Adam::new(), rng, augmentation, seen: 0 }
    }

    fn prepare(&mut self, sample: &ImageSample) -> (ImageSample, Vec<(u8, bool)>) {
        let s = if self.model.config.augment { augment(sample, &self.augmentation, &mut self.rng) } else { sample.clone() };
        let every = self.model.config.negative_every;
        let negative = every > 0 && self.seen % every == every - 1;
        self.seen += 1;
        let ids: Vec<u8> = self.model.classes.iter().map(|c| c.id).collect();
        let classes = choose_classes(&s, &ids, negative, &mut self.rng);
        (s, classes)
    }

    /// One optimiser step over a batch, gradients averaged across samples.
    pub fn step(&mut self, batch: &[&ImageSample], lr: f64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidRequest("empty batch".into()));
        }
        let mut sum: BTreeMap<crate::params::ParamId, Tensor> = BTreeMap::new();
        let mut losses = LossBreakdown::default();
        for &sample in batch {
            let (s, classes) = self.prepare(sample);
            let mut g = Graph::new();
            let l = sample_losses(&self.model, &mut g, &s, &classes, &mut self.rng)?;
            losses.seg += g.value(l.seg).item();
            losses.rec += l.rec.map_or(0.0, |r| g.value(r).item());
            losses.total += g.value(l.total).item();
            let grads = g.backward(l.total);
            for (id, grad) in g.param_grads(&grads) {
                match sum.get_mut(&id) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        sum.insert(id, grad);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let grads: Vec<_> = sum.into_iter().map(|(id, t)| (id, t.scale(1.0 / n))).collect();
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite("gradients".into()));
        }
        self.adam.step(&mut self.model.store, &grads, lr);
        Ok(LossBreakdown { seg: losses.seg / n, rec: losses.rec / n, total: losses.total / n })
    }

    /// One pass over `train` in a seeded shuffled order; returns mean losses.
    pub fn epoch(&mut self, train: &[&ImageSample], epoch: usize) -> Result<LossBreakdown> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = self.model.config.learning_rate_at(epoch);
        let mut acc = LossBreakdown::default();
        let batch = self.model.config.batch_size;
        for chunk in order.chunks(batch) {
            let samples: Vec<&ImageSample> = chunk.iter().map(|&i| train[i]).collect();
            let l = self.step(&samples, lr)?;
            let w = chunk.len() as f64;
            acc.seg += l.seg * w;
            acc.rec += l.rec * w;
            acc.total += l.total * w;
        }
        let n = train.len().max(1) as f64;
        Ok(LossBreakdown { seg: acc.seg / n, rec: acc.rec / n, total: acc.total / n })
    }
}

/// Predicts every sample and scores the masks.
pub fn evaluate_model(model: &Model, samples: &[&ImageSample]) -> Result<IoUReport> {
    let preds = samples.iter().map(|s| model.predict(&s.image).map(|p| p.mask)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<MaskPair> =
        samples.iter().zip(&preds).map(|(s, p)| MaskPair { id: &s.id, pred: p, gt: &s.mask }).collect();
    evaluate(&pairs)
}

/// Result of [`train_epochs`].
pub struct TrainOutcome {
    /// The last-epoch trainer (model, optimiser and RNG state).
    pub trainer: Trainer,
    /// Parameters at the best validation epoch.
    pub best_params: ParamStore,
    /// 1-based epoch of `best_params`.
    pub best_epoch: usize,
    pub best_val_ch_iou: f64,
    pub logs: Vec<EpochLog>,
}

/// Trains from scratch for `config.epochs`, calling `on_epoch` after each.
/// Without a validation split the last epoch counts as best.
pub fn train_epochs(model: Model, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let train = dataset.train();
    if train.is_empty() {
        return Err(Error::InvalidRequest("the training split is empty".into()));
    }
    let val = dataset.val();
    let epochs = model.config.epochs;
    let mut trainer = Trainer::new(model, dataset.manifest.augmentation.clone());
    let mut logs = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 0..epochs {
        let lr = trainer.model.config.learning_rate_at(epoch);
        let losses = trainer.epoch(&train, epoch)?;
        let val_ch = if val.is_empty() { 0.0 } else { evaluate_model(&trainer.model, &val)?.ch_iou };
        let log = EpochLog { epoch: epoch + 1, lr, loss_seg: losses.seg, loss_rec: losses.rec, val_ch_iou: val_ch };
        log::info!(
            "epoch {} lr {:.1e} seg {:.4} rec {:.4} val Ch_IoU {:.2}",
            log.epoch,
            lr,
            log.loss_seg,
            log.loss_rec,
            log.val_ch_iou
        );
        on_epoch(&log);
        logs.push(log);
        let improved = match &best {
            None => true,
            Some((_, v, _)) => !val.is_empty() && val_ch > *v,
        };
        if improved || val.is_empty() {
            best = Some((epoch + 1, val_ch, trainer.model.store.clone()));
        }
    }
    let (best_epoch, best_val_ch_iou, best_params) = match best {
        Some(b) => b,
        None => (0, 0.0, trainer.model.store.clone()),
    };
    Ok(TrainOutcome { trainer, best_params, best_epoch, best_val_ch_iou, logs })
}
