//! Results tables, seed summaries and the 2D3D bar chart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::error::{CliError, Result};
use crate::runner::CellFailure;

pub const TABLE_MD: &str = "results.md";
pub const TABLE_JSON: &str = "results.json";
pub const CHART_SVG: &str = "miou_2d3d.svg";

/// Target-test mIoU of every head of one stage, as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchColumns {
    /// Fusion main head.
    pub miou_2d: f64,
    pub miou_3d: f64,
    /// Softmax average of fusion and 3D.
    pub miou_2d3d: f64,
    /// Linear head on the frozen 2D features.
    pub miou_vfm: f64,
    pub miou_vfm3d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: Variant,
    pub seed: u64,
    pub stage: u32,
    pub scores: BranchColumns,
    pub best_val_miou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub stage: u32,
    pub seeds: Vec<u64>,
    pub miou_2d: MeanStd,
    pub miou_3d: MeanStd,
    pub miou_2d3d: MeanStd,
    pub miou_vfm3d: MeanStd,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn pct_ms(m: MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

impl ResultsTable {
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| (r.variant, r.stage, r.seed));
        self.failures.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));
    }

    pub fn get(&self, variant: Variant, stage: u32) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.variant == variant && r.stage == stage).collect()
    }

    /// One row per (variant, stage), in table order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(Variant, u32)> = self.rows.iter().map(|r| (r.variant, r.stage)).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(variant, stage)| {
                let rows = self.get(variant, stage);
                let col = |f: fn(&BranchColumns) -> f64| MeanStd::of(&rows.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
                SummaryRow {
                    variant,
                    stage,
                    seeds: rows.iter().map(|r| r.seed).collect(),
                    miou_2d: col(|s| s.miou_2d),
                    miou_3d: col(|s| s.miou_3d),
                    miou_2d3d: col(|s| s.miou_2d3d),
                    miou_vfm3d: col(|s| s.miou_vfm3d),
                }
            })
            .collect()
    }

    /// Per-seed rows, then one `mean ± std` row per (variant, stage), then failed cells.
    pub fn to_markdown(&self) -> String {
        let mut md = String::from("| Variant | Seed | Stage | 2D | 3D | 2D3D |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let s = &r.scores;
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} |",
                r.variant,
                r.seed,
                r.stage,
                pct(s.miou_2d),
                pct(s.miou_3d),
                pct(s.miou_2d3d)
            );
        }
        for s in self.summary() {
            let _ = writeln!(
                md,
                "| {} | mean ± std (n={}) | {} | {} | {} | {} |",
                s.variant,
                s.seeds.len(),
                s.stage,
                pct_ms(s.miou_2d),
                pct_ms(s.miou_3d),
                pct_ms(s.miou_2d3d)
            );
        }
        for f in &self.failures {
            let msg = f.error.get("message").and_then(|m| m.as_str()).unwrap_or("unknown error");
            let _ = writeln!(md, "| {} | {} | - | FAILED | FAILED | FAILED: {} |", f.variant, f.seed, msg.replace('|', "/"));
        }
        md
    }

    /// Writes the markdown table, the JSON table with summaries and the bar chart into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let md = dir.join(TABLE_MD);
        std::fs::write(&md, self.to_markdown()).map_err(|e| CliError::io(&md, e))?;
        let json = dir.join(TABLE_JSON);
        let doc = serde_json::json!({"rows": self.rows, "summary": self.summary(), "failures": self.failures});
        let bytes = serde_json::to_vec_pretty(&doc).map_err(mgfuse_core::Error::from)?;
        std::fs::write(&json, bytes).map_err(|e| CliError::io(&json, e))?;
        let svg = dir.join(CHART_SVG);
        self.bar_chart(&svg)?;
        Ok(vec![md, json, svg])
    }

    /// Mean target 2D3D mIoU per (variant, stage) with ±1 std whiskers.
    pub fn bar_chart(&self, path: &Path) -> Result<()> {
        let summary = self.summary();
        let plot = |e: &dyn std::fmt::Display| CliError::Plot(e.to_string());
        let root = SVGBackend::new(path, (120 * summary.len().max(2) as u32 + 140, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot(&e))?;
        let labels: Vec<String> = summary
            .iter()
            .map(|s| if s.stage == 1 { s.variant.to_string() } else { format!("{} (stage {})", s.variant, s.stage) })
            .collect();
        let hi = summary.iter().map(|s| 100.0 * (s.miou_2d3d.mean + s.miou_2d3d.std)).fold(0.0f64, f64::max);
        let lo = summary.iter().map(|s| 100.0 * (s.miou_2d3d.mean - s.miou_2d3d.std)).fold(100.0f64, f64::min);
        let (y0, y1) = if summary.is_empty() {
            (0.0, 100.0)
        } else {
            ((lo - 5.0).max(0.0).floor(), (hi + 2.0).min(100.0).ceil())
        };
        let n = summary.len().max(1);
        let mut chart = ChartBuilder::on(&root)
            .caption("Target 2D3D mIoU", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(-0.5f64..n as f64 - 0.5, y0..y1)
            .map_err(|e| plot(&e))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    labels.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("mIoU (%)")
            .draw()
            .map_err(|e| plot(&e))?;
        chart
            .draw_series(summary.iter().enumerate().map(|(i, s)| {
                let x = i as f64;
                Rectangle::new([(x - 0.3, y0), (x + 0.3, 100.0 * s.miou_2d3d.mean)], BLUE.mix(0.6).filled())
            }))
            .map_err(|e| plot(&e))?;
        chart
            .draw_series(summary.iter().enumerate().map(|(i, s)| {
                let (m, d) = (100.0 * s.miou_2d3d.mean, 100.0 * s.miou_2d3d.std);
                ErrorBar::new_vertical(i as f64, m - d, m, m + d, BLACK.filled(), 8)
            }))
            .map_err(|e| plot(&e))?;
        root.present().map_err(|e| plot(&e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, seed: u64, v: f64) -> ResultRow {
        ResultRow {
            variant,
            seed,
            stage: 1,
            scores: BranchColumns {
                miou_2d: v,
                miou_3d: v / 2.0,
                miou_2d3d: v,
                miou_vfm: 0.1,
                miou_vfm3d: 0.2,
            },
            best_val_miou: v,
        }
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }

    #[test]
    fn markdown_has_one_row_per_seed_plus_summaries() {
        let mut t = ResultsTable::default();
        for seed in 0..5 {
            t.rows.push(row(Variant::MlpMg, seed, 0.5 + seed as f64 / 100.0));
            t.rows.push(row(Variant::Mlp, seed, 0.5));
        }
        t.sort();
        assert_eq!(t.rows[0].variant, Variant::Mlp);
        let md = t.to_markdown();
        assert_eq!(md.lines().count(), 2 + 10 + 2);
        assert!(md.contains("| mlp+mg | mean ± std (n=5) | 1 | 52.00 ± 1.58 |"));
        let s = t.summary();
        assert_eq!(s.len(), 2);
        assert!((s[1].miou_2d3d.mean - 0.52).abs() < 1e-12);
    }

    #[test]
    fn chart_renders_to_svg() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ResultsTable::default();
        t.rows.push(row(Variant::Mlp, 0, 0.8));
        t.rows.push(row(Variant::MlpMg, 0, 0.85));
        let paths = t.write(dir.path()).unwrap();
        let svg = std::fs::read_to_string(&paths[2]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("mlp+mg"));
        ResultsTable::default().bar_chart(&dir.path().join("empty.svg")).unwrap();
    }
}
