//! Trains and scores configuration variants side by side.

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::Model;
use crate::train::{evaluate_model, train_epochs};

/// A named set of `key=value` overrides; `full` has none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Variant {
    /// Parses `full`, `msfa=false` or several overrides joined by `+`.
    pub fn parse(spec: &str) -> Variant {
        let spec = spec.trim();
        let overrides = if spec == "full" || spec.is_empty() {
            Vec::new()
        } else {
            spec.split('+').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        };
        Variant { name: if spec.is_empty() { "full".into() } else { spec.to_string() }, overrides }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub ch_iou: f64,
    pub isi_iou: f64,
    pub mc_iou: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                json!({
                    "variant": r.variant,
                    "ch_iou": (r.ch_iou * 100.0).round() / 100.0,
                    "isi_iou": (r.isi_iou * 100.0).round() / 100.0,
                    "mc_iou": (r.mc_iou * 100.0).round() / 100.0,
                    "best_epoch": r.best_epoch,
                })
            })
            .collect();
        json!({ "rows": rows })
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("variant".len());
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "variant", "Ch_IoU", "ISI_IoU", "mc_IoU");
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}\n", r.variant, r.ch_iou, r.isi_iou, r.mc_iou));
        }
        out
    }
}

/// Trains every variant from the same seed and scores its best checkpoint
/// on the validation split (the training split when there is none).
pub fn ablation_run(base: &ModelConfig, variants: &[Variant], dataset: &Dataset) -> Result<AblationTable> {
    let configs = variants.iter().map(|v| base.with_overrides(&v.overrides)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(variants.len());
    for (v, cfg) in variants.iter().zip(configs) {
        log::info!("ablation variant {}", v.name);
        let model = Model::new(&cfg, dataset.classes())?;
        let outcome = train_epochs(model, dataset, |_| {})?;
        let mut model = outcome.trainer.model;
        model.store = outcome.best_params;
        let eval_set = if dataset.val().is_empty() { dataset.train() } else { dataset.val() };
        let report = evaluate_model(&model, &eval_set)?;
        rows.push(AblationRow {
            variant: v.name.clone(),
            ch_iou: report.ch_iou,
            isi_iou: report.isi_iou,
            mc_iou: report.mc_iou,
            best_epoch: outcome.best_epoch,
        });
    }
    Ok(AblationTable { rows })
}
