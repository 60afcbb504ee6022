use std::rc::Rc;

use promptseg::autograd::Graph;
use promptseg::checkpoint;
use promptseg::data::write_dataset;
use promptseg::train::{sample_losses, training_rng, Trainer};
use promptseg::{generate, generate_dataset, load_dataset, Model, ModelConfig};

#[test]
fn generated_data_survives_the_disk() {
    let cfg = ModelConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&cfg, 10, 7, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let fresh = generate(&cfg, 10, 7).unwrap();
    assert_eq!(loaded.samples, fresh.samples);
    assert_eq!(loaded.split, fresh.split);
    assert_eq!(loaded.manifest, manifest);

    // writing the loaded copy reproduces every file byte for byte
    let again = tempfile::tempdir().unwrap();
    write_dataset(&loaded, again.path()).unwrap();
    for sub in ["images", "masks"] {
        for entry in std::fs::read_dir(dir.path().join(sub)).unwrap() {
            let p = entry.unwrap().path();
            let q = again.path().join(sub).join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap(), "{}", p.display());
        }
    }
    for f in ["classes.json", "split.json"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
    }
}

/// Absolute thresholds live in the acceptance suite next to the head's
/// fitted floor; here only the direction is checked.
#[test]
fn single_sample_loss_falls() {
    let cfg = ModelConfig { batch_size: 1, augment: false, ..ModelConfig::desk() };
    let data = generate(&cfg, 5, 2).unwrap();
    let sample = data.train().into_iter().find(|s| !s.classes_present().is_empty()).unwrap().clone();
    let cls = *sample.classes_present().iter().next().unwrap();
    let seg = |m: &Model| {
        let mut g = Graph::new();
        let l = sample_losses(m, &mut g, &sample, &[(cls, true)], &mut training_rng(0)).unwrap();
        g.value(l.seg).item()
    };
    let model = Model::new(&cfg, data.classes()).unwrap();
    let before = seg(&model);
    let mut trainer = Trainer::new(model, data.manifest.augmentation.clone());
    for _ in 0..100 {
        trainer.step(&[&sample], cfg.learning_rate).unwrap();
    }
    let after = seg(&trainer.model);
    assert!(after < 0.5 * before, "seg loss {before} -> {after}");
}

#[test]
fn checkpoint_files_reproduce_predictions() {
    let cfg = ModelConfig { epochs: 2, ..ModelConfig::desk() };
    let data = generate(&cfg, 5, 4).unwrap();
    let outcome = promptseg::train_epochs(Model::new(&cfg, data.classes()).unwrap(), &data, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let trained = &outcome.trainer.model;
    checkpoint::save(&path, trained, &trained.store, 2, &outcome.trainer.rng).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.epoch, 2);
    for s in &data.samples {
        assert_eq!(back.model.predict(&s.image).unwrap(), trained.predict(&s.image).unwrap());
    }
}

#[test]
fn prediction_ignores_bundle_order() {
    let cfg = ModelConfig::desk();
    let data = generate(&cfg, 3, 9).unwrap();
    let model = Model::new(&cfg, data.classes()).unwrap();
    let mut rev = model.bundles.clone();
    rev.reverse();
    for s in &data.samples {
        assert_eq!(model.predict_with(&s.image, &rev).unwrap().mask, model.predict(&s.image).unwrap().mask);
    }
}

#[test]
fn seg_loss_reaches_zero_only_at_the_target() {
    let mut g = Graph::new();
    let t = Rc::new(promptseg::Tensor::from_vec(3, 1, vec![1.0, 0.0, 1.0]));
    let exact = g.constant((*t).clone());
    let l = promptseg::train::seg_loss(&mut g, exact, t.clone()).unwrap();
    let eps: f64 = 1e-7;
    assert!(g.value(l).item() <= 2.0 * eps * eps.ln().abs());
}
