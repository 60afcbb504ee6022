use std::collections::BTreeSet;

use proptest::prelude::*;
use promptseg::autograd::Graph;
use promptseg::hiar::{adjust_to_ratio, target_count, HardPatches};
use promptseg::image_encoder::{patchify, unpatchify_index};
use promptseg::mop::{fuse, weights_from_logits};
use promptseg::{assemble_mask, evaluate, oracle_report, MaskPair, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Up to 6 images of the same size with labels in `0..=4`.
fn instance() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    (1usize..=10, 1usize..=6).prop_flat_map(|(pixels, n)| {
        prop::collection::vec(
            (prop::collection::vec(0u8..=4, pixels), prop::collection::vec(0u8..=4, pixels)),
            n,
        )
    })
}

fn pairs(masks: &[(Vec<u8>, Vec<u8>)], ids: &[String]) -> Vec<(String, Vec<u8>, Vec<u8>)> {
    masks.iter().zip(ids).map(|((p, g), id)| (id.clone(), p.clone(), g.clone())).collect()
}

fn report(items: &[(String, Vec<u8>, Vec<u8>)]) -> promptseg::IoUReport {
    let p: Vec<MaskPair> = items.iter().map(|(id, pr, gt)| MaskPair { id, pred: pr, gt }).collect();
    evaluate(&p).unwrap()
}

proptest! {
    #[test]
    fn metrics_agree_with_the_oracle_and_order(masks in instance()) {
        let ids: Vec<String> = (0..masks.len()).map(|i| format!("m{i}")).collect();
        let items = pairs(&masks, &ids);
        let p: Vec<MaskPair> = items.iter().map(|(id, pr, gt)| MaskPair { id, pred: pr, gt }).collect();
        let a = evaluate(&p).unwrap();
        let b = oracle_report(&p).unwrap();
        prop_assert!((a.ch_iou - b.ch_iou).abs() < 1e-9);
        prop_assert!((a.isi_iou - b.isi_iou).abs() < 1e-9);
        prop_assert!((a.mc_iou - b.mc_iou).abs() < 1e-9);
        prop_assert!(a.ch_iou + 1e-9 >= a.isi_iou);
        for v in [a.ch_iou, a.isi_iou, a.mc_iou] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_image_order_and_label_names(masks in instance(), shift in 1u8..4) {
        let ids: Vec<String> = (0..masks.len()).map(|i| format!("m{i}")).collect();
        let base = report(&pairs(&masks, &ids));

        let mut rev = pairs(&masks, &ids);
        rev.reverse();
        let reordered = report(&rev);
        prop_assert!((base.ch_iou - reordered.ch_iou).abs() < 1e-9);
        prop_assert!((base.isi_iou - reordered.isi_iou).abs() < 1e-9);
        prop_assert!((base.mc_iou - reordered.mc_iou).abs() < 1e-9);

        // cyclic relabelling of the foreground classes 1..=4
        let relabel = |v: u8| if v == 0 { 0 } else { (v - 1 + shift) % 4 + 1 };
        let renamed: Vec<(Vec<u8>, Vec<u8>)> = masks
            .iter()
            .map(|(p, g)| (p.iter().map(|&v| relabel(v)).collect(), g.iter().map(|&v| relabel(v)).collect()))
            .collect();
        let renamed = report(&pairs(&renamed, &ids));
        prop_assert!((base.ch_iou - renamed.ch_iou).abs() < 1e-9);
        prop_assert!((base.isi_iou - renamed.isi_iou).abs() < 1e-9);
        prop_assert!((base.mc_iou - renamed.mc_iou).abs() < 1e-9);
    }

    #[test]
    fn assembly_survives_order_preserving_rescaling(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..5),
        k in 0.1f64..3.0,
    ) {
        let theta = 0.35;
        let maps: Vec<(u8, &[f64])> = scores.iter().enumerate().map(|(i, s)| (i as u8 + 1, s.as_slice())).collect();
        let base = assemble_mask(&maps, theta);
        // affine about θ keeps both the argmax and each side of θ
        let scaled: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|v| theta + k * (v - theta)).collect()).collect();
        let maps2: Vec<(u8, &[f64])> = scaled.iter().enumerate().map(|(i, s)| (i as u8 + 1, s.as_slice())).collect();
        prop_assert_eq!(&assemble_mask(&maps2, theta), &base);
        let mut rev = maps.clone();
        rev.reverse();
        prop_assert_eq!(&assemble_mask(&rev, theta), &base);
        prop_assert_eq!(assemble_mask(&maps, theta), assemble_mask(&maps, theta));
        for (px, &c) in base.iter().enumerate() {
            let best = scores.iter().map(|s| s[px]).fold(f64::MIN, f64::max);
            if c == 0 {
                prop_assert!(best < theta);
            } else {
                prop_assert_eq!(scores[c as usize - 1][px], best);
            }
        }
    }

    #[test]
    fn fused_scores_are_convex_combinations(
        p in 1usize..5,
        raw in prop::collection::vec((0.0f64..1.0, -6.0f64..6.0), 40),
    ) {
        let pixels = raw.len() / p;
        prop_assume!(pixels > 0);
        let mut g = Graph::new();
        let scores: Vec<_> = (0..p)
            .map(|j| g.constant(Tensor::from_vec(pixels, 1, (0..pixels).map(|i| raw[j * pixels + i].0).collect())))
            .collect();
        let logits: Vec<_> = (0..p)
            .map(|j| g.constant(Tensor::from_vec(pixels, 1, (0..pixels).map(|i| raw[j * pixels + i].1).collect())))
            .collect();
        let w = weights_from_logits(&mut g, &logits);
        let fused = fuse(&mut g, &scores, w).unwrap();
        for i in 0..pixels {
            let sum: f64 = g.value(w).row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let col: Vec<f64> = scores.iter().map(|&s| g.value(s).get(i, 0)).collect();
            let lo = col.iter().copied().fold(f64::MAX, f64::min);
            let hi = col.iter().copied().fold(f64::MIN, f64::max);
            let v = g.value(fused).get(i, 0);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn ratio_adjustment_contract(
        hard in prop::collection::vec(any::<bool>(), 2..64),
        r_t in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let total = hard.len();
        prop_assume!(target_count(total, r_t) < total);
        let patches = HardPatches { grid_h: 1, grid_w: total, hard: hard.clone() };
        let mask = adjust_to_ratio(&patches, r_t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(mask.count(), target_count(total, r_t));
        let hard_set: BTreeSet<usize> = (0..total).filter(|&i| hard[i]).collect();
        let masked: BTreeSet<usize> = mask.masked_indices().into_iter().collect();
        if hard_set.len() >= masked.len() {
            prop_assert!(masked.is_subset(&hard_set));
        } else {
            prop_assert!(hard_set.is_subset(&masked));
        }
        let again = adjust_to_ratio(&patches, r_t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again, mask);
    }

    #[test]
    fn patchify_and_its_inverse(gh in 1usize..4, gw in 1usize..4, patch in 1usize..5, seed in any::<u64>()) {
        let (h, w) = (gh * patch, gw * patch);
        let data: Vec<f64> = (0..h * w * 3).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let image = Tensor::from_vec(h * w, 3, data.clone());
        let patches = patchify(&image, h, w, patch).unwrap();
        prop_assert_eq!(patches.shape(), (gh * gw, patch * patch * 3));
        let idx = unpatchify_index(h, w, patch);
        let back: Vec<f64> = idx.iter().map(|&i| patches.data()[i]).collect();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn flag_overrides_touch_one_key(
        flag in prop::sample::select(vec!["msfa", "cls_token_pooling", "mop", "hiar", "ham", "augment"]),
        value in any::<bool>(),
    ) {
        let base = ModelConfig::desk();
        let cfg = base.with_overrides(&[format!("{flag}={value}")]).unwrap();
        let a: toml::Table = toml::from_str(&base.to_toml()).unwrap();
        let b: toml::Table = toml::from_str(&cfg.to_toml()).unwrap();
        for (k, v) in &a {
            if k == flag {
                prop_assert_eq!(b[k].as_bool(), Some(value));
            } else {
                prop_assert_eq!(&b[k], v);
            }
        }
    }
}
