//! Command orchestration behind the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ablation::{ablation_run, Variant};
use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::{generate_dataset, load_dataset, write_json, Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::hiar::{adjust_to_ratio, masked_visualization, mine_hard_patches, random_mask};
use crate::metrics::{evaluate, MaskPair};
use crate::model::Model;
use crate::pnm;
use crate::train::{train_epochs, training_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Predict,
    GenData,
    ReconstructDemo,
    Ablation,
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "train" => Command::Train,
            "eval" => Command::Eval,
            "predict" => Command::Predict,
            "gen-data" => Command::GenData,
            "reconstruct-demo" => Command::ReconstructDemo,
            "ablation" => Command::Ablation,
            other => return Err(format!("unknown command '{other}'")),
        })
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::GenData => "gen-data",
            Command::ReconstructDemo => "reconstruct-demo",
            Command::Ablation => "ablation",
        })
    }
}

/// Which part of a dataset a command reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    #[default]
    All,
}

impl FromStr for SplitChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "all" => Ok(SplitChoice::All),
            other => Err(format!("unknown split '{other}' (expected train, val or all)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CommandOptions {
    pub config: ModelConfig,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub num_images: usize,
    pub pred_dir: Option<PathBuf>,
    pub split: SplitChoice,
    pub overlay: bool,
    pub variants: Vec<String>,
}

impl CommandOptions {
    pub fn new(config: ModelConfig) -> Self {
        CommandOptions {
            config,
            data_dir: None,
            checkpoint: None,
            out_dir: None,
            seed: None,
            num_images: 40,
            pred_dir: None,
            split: SplitChoice::All,
            overlay: false,
            variants: Vec::new(),
        }
    }

    fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: Command) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| Error::InvalidRequest(format!("{command} needs --{flag}")))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn checkpoint_path(&self, out: &Path) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"))
    }

    fn config(&self) -> ModelConfig {
        let mut cfg = self.config.clone();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg
    }
}

fn samples(dataset: &Dataset, split: SplitChoice) -> Vec<&ImageSample> {
    match split {
        SplitChoice::Train => dataset.train(),
        SplitChoice::Val => dataset.val(),
        SplitChoice::All => dataset.samples.iter().collect(),
    }
}

fn load_checkpoint(opts: &CommandOptions, command: Command) -> Result<Model> {
    let path = opts
        .checkpoint
        .clone()
        .or_else(|| opts.out_dir.as_ref().map(|d| d.join("model.ckpt")))
        .ok_or_else(|| Error::CheckpointNotFound(PathBuf::from("<none given>")))?;
    log::info!("{command}: loading {}", path.display());
    Ok(checkpoint::load(&path)?.model)
}

fn class_names(dataset: &Dataset) -> BTreeMap<u8, String> {
    dataset.classes().iter().map(|c| (c.id, c.name.clone())).collect()
}

fn overlay(sample: &ImageSample, mask: &[u8], dataset: &Dataset) -> Vec<u8> {
    let colors: BTreeMap<u8, [f64; 3]> = dataset.classes().iter().map(|c| (c.id, c.color)).collect();
    let mut out = Vec::with_capacity(mask.len() * 3);
    for (i, &m) in mask.iter().enumerate() {
        let px = sample.image.row(i);
        for ch in 0..3 {
            let v = match colors.get(&m) {
                Some(c) => 0.5 * px[ch] + 0.5 * c[ch],
                None => px[ch],
            };
            out.push(pnm::to_u8(v));
        }
    }
    out
}

/// Runs one command end to end.
pub fn run_command(command: Command, opts: &CommandOptions) -> Result<()> {
    let cfg = opts.config();
    cfg.validate()?;
    match command {
        Command::GenData => {
            let out = opts
                .out_dir
                .as_deref()
                .or(opts.data_dir.as_deref())
                .ok_or_else(|| Error::InvalidRequest("gen-data needs --out-dir".into()))?;
            let seed = opts.seed.unwrap_or(cfg.seed);
            let manifest = generate_dataset(&cfg, opts.num_images, seed, out)?;
            log::info!("wrote {} images with {} classes to {}", opts.num_images, manifest.classes.len(), out.display());
        }
        Command::Train => {
            let data = load_dataset(CommandOptions::require(&opts.data_dir, "data-dir", command)?)?;
            let out = opts.out_dir()?;
            let log_path = out.join("train_log.jsonl");
            let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut write_err = None;
            let model = Model::new(&cfg, data.classes())?;
            let outcome = train_epochs(model, &data, |entry| {
                let line = serde_json::to_string(entry).expect("log entry serialises");
                if let Err(e) = writeln!(log, "{line}") {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(Error::io(&log_path, e));
            }
            let ckpt = opts.checkpoint_path(&out);
            checkpoint::save(&ckpt, &outcome.trainer.model, &outcome.best_params, outcome.best_epoch, &outcome.trainer.rng)?;
            log::info!(
                "best epoch {} (val Ch_IoU {:.2}); checkpoint {}",
                outcome.best_epoch,
                outcome.best_val_ch_iou,
                ckpt.display()
            );
        }
        Command::Eval => {
            let data = load_dataset(CommandOptions::require(&opts.data_dir, "data-dir", command)?)?;
            let chosen = samples(&data, opts.split);
            let preds: Vec<Vec<u8>> = match &opts.pred_dir {
                Some(dir) => chosen
                    .iter()
                    .map(|s| {
                        let path = dir.join(format!("{}.pgm", s.id));
                        let (w, h, c, px) = pnm::read(&path)?;
                        if c != 1 || w != s.width || h != s.height {
                            return Err(Error::Dataset { path, reason: format!("expected a {}x{} PGM", s.width, s.height) });
                        }
                        Ok(px)
                    })
                    .collect::<Result<_>>()?,
                None => {
                    let model = load_checkpoint(opts, command)?;
                    chosen.iter().map(|s| model.predict(&s.image).map(|p| p.mask)).collect::<Result<_>>()?
                }
            };
            let pairs: Vec<MaskPair> =
                chosen.iter().zip(&preds).map(|(s, p)| MaskPair { id: &s.id, pred: p, gt: &s.mask }).collect();
            let report = evaluate(&pairs)?;
            if report.counts.skipped_empty_gt > 0 {
                log::info!("{} images without ground-truth classes skipped by Ch_IoU", report.counts.skipped_empty_gt);
            }
            let out = opts.out_dir()?;
            write_json(&out.join("eval_report.json"), &report.to_json(&class_names(&data)))?;
            log::info!("Ch_IoU {:.2} ISI_IoU {:.2} mc_IoU {:.2}", report.ch_iou, report.isi_iou, report.mc_iou);
        }
        Command::Predict => {
            let data = load_dataset(CommandOptions::require(&opts.data_dir, "data-dir", command)?)?;
            let model = load_checkpoint(opts, command)?;
            let out = opts.out_dir()?;
            for s in samples(&data, opts.split) {
                let p = model.predict(&s.image)?;
                pnm::write_pgm(&out.join(format!("{}.pgm", s.id)), s.width, s.height, &p.mask)?;
                if opts.overlay {
                    pnm::write_ppm(&out.join(format!("{}_overlay.ppm", s.id)), s.width, s.height, &overlay(s, &p.mask, &data))?;
                }
            }
        }
        Command::ReconstructDemo => {
            let data = load_dataset(CommandOptions::require(&opts.data_dir, "data-dir", command)?)?;
            let model = load_checkpoint(opts, command)?;
            let out = opts.out_dir()?;
            let mcfg = &model.config;
            let mut rng = training_rng(opts.seed.unwrap_or(mcfg.seed));
            let grid = mcfg.grid_size();
            for s in samples(&data, opts.split) {
                let mask = if mcfg.ham {
                    let pred = model.predict(&s.image)?;
                    let hard = mine_hard_patches(&pred.mask, &s.mask, s.height, s.width, mcfg.patch_size)?;
                    adjust_to_ratio(&hard, mcfg.mask_ratio_threshold, &mut rng)?
                } else {
                    random_mask(grid, grid, mcfg.mask_ratio_threshold, &mut rng)?
                };
                let mut g = crate::autograd::Graph::new();
                let rec = model.reconstructor.reconstruct(&mut g, &model.store, &model.image, &s.image, &mask)?;
                let panels = [s.image.clone(), masked_visualization(&s.image, &mask, mcfg.patch_size), g.value(rec.image).clone()];
                let (w, h) = (s.width, s.height);
                let mut rgb = Vec::with_capacity(3 * w * h * 3);
                for y in 0..h {
                    for panel in &panels {
                        for x in 0..w {
                            rgb.extend(panel.row(y * w + x).iter().map(|&v| pnm::to_u8(v)));
                        }
                    }
                }
                pnm::write_ppm(&out.join(format!("{}_reconstruction.ppm", s.id)), 3 * w, h, &rgb)?;
            }
        }
        Command::Ablation => {
            let data = load_dataset(CommandOptions::require(&opts.data_dir, "data-dir", command)?)?;
            let specs: Vec<String> = if opts.variants.is_empty() {
                ["full", "msfa=false", "mop=false", "hiar=false"].iter().map(|s| s.to_string()).collect()
            } else {
                opts.variants.clone()
            };
            let variants: Vec<Variant> = specs.iter().map(|s| Variant::parse(s)).collect();
            let table = ablation_run(&cfg, &variants, &data)?;
            let out = opts.out_dir()?;
            write_json(&out.join("ablation.json"), &table.to_json())?;
            let txt = out.join("ablation.txt");
            std::fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_roundtrip() {
        for c in ["train", "eval", "predict", "gen-data", "reconstruct-demo", "ablation"] {
            assert_eq!(c.parse::<Command>().unwrap().to_string(), c);
        }
        assert!("serve".parse::<Command>().is_err());
    }

    #[test]
    fn predict_without_checkpoint_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = CommandOptions::new(ModelConfig::default());
        opts.out_dir = Some(dir.path().join("gen"));
        opts.num_images = 2;
        run_command(Command::GenData, &opts).unwrap();
        opts.data_dir = opts.out_dir.take();
        opts.checkpoint = Some(dir.path().join("missing.ckpt"));
        let err = run_command(Command::Predict, &opts).unwrap_err();
        assert!(err.to_string().contains("checkpoint not found"));
    }
}
