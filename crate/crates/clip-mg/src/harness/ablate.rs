//! Ablation runner: trains every variant on identical data and seeds and
//! reports Top-1 with deltas against the full model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::train::{evaluate, train};
use crate::model::Variant;
use crate::synth::{ClipSource, Split};

/// Report rows follow the ablation-table convention: ablations first, the
/// full model last as the delta reference.
pub const REPORT_ORDER: [Variant; 5] = [
    Variant::NoPoseBranch,
    Variant::NoPoseGuidance,
    Variant::NoCrossAttention,
    Variant::NoGatedFusion,
    Variant::Full,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub description: String,
    pub top1_by_seed: Vec<f64>,
    pub median_top1: f64,
    /// Percentage points vs the full model's median; `None` for the
    /// reference row itself.
    pub delta_pp: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn result(&self, variant: Variant) -> &VariantResult {
        self.variants
            .iter()
            .find(|v| v.variant == variant)
            .expect("report covers every variant")
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        md.push_str(&format!(
            "# Ablation report\n\nSeeds: {:?}; epochs: {}; train/test: {}/{}. \
             Top-1 is the median over seeds.\n\n",
            self.seeds, self.epochs, self.train_size, self.test_size
        ));
        md.push_str("| Variant | Description | Top-1 (%) | Δ (pp) |\n");
        md.push_str("|---|---|---:|---:|\n");
        for row in &self.variants {
            let delta = match row.delta_pp {
                Some(d) => format!("{d:+.2}"),
                None => "—".to_string(),
            };
            md.push_str(&format!(
                "| {} | {} | {:.2} | {} |\n",
                row.variant, row.description, row.median_top1, delta
            ));
        }
        md
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracy"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Train all five variants with identical seeds and data; evaluate each
/// best-validation checkpoint on the test split. Writes ablation.json and
/// ablation.md under `out_dir`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    source: &ClipSource,
    out_dir: &Path,
) -> Result<AblationReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut results: Vec<(Variant, Vec<f64>, f64)> = Vec::new();
    for variant in Variant::ALL {
        let started = std::time::Instant::now();
        let mut top1s = Vec::with_capacity(cfg.ablation_seeds.len());
        for &seed in &cfg.ablation_seeds {
            let run_cfg = ExperimentConfig {
                variant,
                seed,
                ..cfg.clone()
            };
            let run_dir = out_dir.join(variant.name()).join(format!("seed-{seed}"));
            let (model, _) = train(&run_cfg, source, &run_dir)?;
            top1s.push(evaluate(&model, source, Split::Test)?);
        }
        results.push((variant, top1s, started.elapsed().as_secs_f64()));
    }

    let full_median = results
        .iter()
        .find(|(v, _, _)| *v == Variant::Full)
        .map(|(_, t, _)| median(t))
        .expect("full variant trained");

    let variants: Vec<VariantResult> = REPORT_ORDER
        .iter()
        .map(|&variant| {
            let (_, top1s, wall) = results
                .iter()
                .find(|(v, _, _)| *v == variant)
                .expect("all variants trained");
            let med = median(top1s);
            VariantResult {
                variant,
                description: variant.description().to_string(),
                top1_by_seed: top1s.clone(),
                median_top1: med,
                delta_pp: (variant != Variant::Full).then(|| med - full_median),
                wall_seconds: *wall,
            }
        })
        .collect();

    let report = AblationReport {
        seeds: cfg.ablation_seeds.clone(),
        epochs: cfg.epochs,
        train_size: source.len(Split::Train),
        test_size: source.len(Split::Test),
        variants,
    };
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("ablation.md"), report.to_markdown())?;
    Ok(report)
}
