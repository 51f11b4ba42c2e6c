use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use bvos_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::{default_tolerance, jf_report, score_sequence, FrameScore, JfSummary};
use crate::model::{segment_sequence, spatial_local_variant, Model, ModelConfig};
use crate::synthetic::{generate_sequence, Category, SuiteScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionArm {
    Bilateral,
    SpatialLocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub attention: AttentionArm,
    pub calibrated: bool,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm { attention: AttentionArm::Bilateral, calibrated: true },
        Arm { attention: AttentionArm::SpatialLocal, calibrated: true },
        Arm { attention: AttentionArm::Bilateral, calibrated: false },
        Arm { attention: AttentionArm::SpatialLocal, calibrated: false },
    ];

    pub fn name(self) -> String {
        let a = match self.attention {
            AttentionArm::Bilateral => "bilateral",
            AttentionArm::SpatialLocal => "spatial_local",
        };
        format!("{a}/{}", if self.calibrated { "calibrated" } else { "raw" })
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The arm's variant of `base`.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let cfg = match self.attention {
            AttentionArm::Bilateral => base.clone(),
            AttentionArm::SpatialLocal => spatial_local_variant(base),
        };
        ModelConfig {
            calibrate: self.calibrated,
            ..cfg
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub category: Category,
    pub summary: JfSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Segments every scene from its first ground-truth mask using the observed
/// (possibly noisy) flow and scores it, grouped by category.
pub fn evaluate_scenes(model: &Model, scenes: &[SuiteScene]) -> Result<Vec<(Category, Vec<FrameScore>)>> {
    let mut out: Vec<(Category, Vec<FrameScore>)> = Vec::new();
    for s in scenes {
        let seq = generate_sequence(&s.scene, &s.name)?;
        let images: Vec<Tensor> = seq.frames.iter().map(|f| f.to_tensor()).collect();
        let seg = segment_sequence(model, &images, &seq.masks[0], &seq.noisy_flows)?;
        let (w, h) = (s.scene.width, s.scene.height);
        let rows = score_sequence(&s.name, &seg.masks, &seq.masks, w, h, default_tolerance(w, h))?;
        match out.iter_mut().find(|(c, _)| *c == s.category) {
            Some((_, r)) => r.extend(rows),
            None => out.push((s.category, rows)),
        }
    }
    Ok(out)
}

/// Scores every named model on `scenes`: one row per arm and category.
pub fn run_ablation(arms: &[(String, &Model)], scenes: &[SuiteScene]) -> Result<AblationReport> {
    if arms.is_empty() || scenes.is_empty() {
        return Err(CoreError::Invalid("ablation needs at least one arm and one scene".into()));
    }
    let mut rows = Vec::new();
    for (name, model) in arms {
        for (category, scores) in evaluate_scenes(model, scenes)? {
            rows.push(AblationRow {
                arm: name.clone(),
                category,
                summary: jf_report(&scores)?,
            });
        }
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn arms(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.arm) {
                seen.push(r.arm.clone());
            }
        }
        seen
    }

    pub fn categories(&self) -> Vec<Category> {
        self.rows.iter().map(|r| r.category).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn get(&self, arm: &str, category: Category) -> Option<&JfSummary> {
        self.rows.iter().find(|r| r.arm == arm && r.category == category).map(|r| &r.summary)
    }

    /// Mean J&F of `arm` over its categories.
    pub fn mean_jf(&self, arm: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.arm == arm).map(|r| r.summary.jf).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "arm,category,j,f,jf,sequences")?;
        for r in &self.rows {
            let s = &r.summary;
            writeln!(out, "{},{},{:.6},{:.6},{:.6},{}", r.arm, r.category.name(), s.j, s.f, s.jf, s.sequences)?;
        }
        Ok(())
    }

    /// Arms as rows, categories as J&F columns, then the mean.
    pub fn table(&self) -> String {
        let cats = self.categories();
        let mut out = format!("{:<26}", "arm");
        for c in &cats {
            let _ = write!(out, " {:>17}", c.name());
        }
        out.push_str("      mean\n");
        for arm in self.arms() {
            let _ = write!(out, "{arm:<26}");
            for &c in &cats {
                match self.get(&arm, c) {
                    Some(s) => {
                        let _ = write!(out, " {:>17.4}", s.jf);
                    }
                    None => {
                        let _ = write!(out, " {:>17}", "-");
                    }
                }
            }
            let _ = writeln!(out, " {:>9.4}", self.mean_jf(&arm).unwrap_or(f64::NAN));
        }
        out
    }
}
