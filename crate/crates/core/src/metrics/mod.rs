//! Evaluation metric suite: per-modality alignment, diversity, region
//! restriction, reprojection error, correlation, and report assembly.

pub mod depthmetric;
pub mod diversity;
pub mod edge;
pub mod reproj;
pub mod segmetric;
pub mod ssim;

pub use depthmetric::depth_sirmse;
pub use diversity::{diversity_score, mean_abs_pixel_distance, ConvFeatureExtractor};
pub use edge::{edge_f1, edge_f1_on_maps, CannyThresholds};
pub use reproj::reprojection_error;
pub use segmetric::mask_miou;
pub use ssim::{blur_ssim, ssim_video};

use crate::error::{CoreError, Result};
use std::io::Write;

/// Sample Pearson correlation coefficient.
pub fn pearson_corr(x: &[f32], y: &[f32]) -> Result<f32> {
    if x.len() != y.len() {
        return Err(CoreError::Shape(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(CoreError::Input("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut sxx = 0.0f64;
    let mut syy = 0.0f64;
    let mut sxy = 0.0f64;
    for (&a, &b) in x.iter().zip(y.iter()) {
        let (da, db) = (a as f64 - mx, b as f64 - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::UndefinedMetric("zero variance input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())) as f32)
}

// ── Report ───────────────────────────────────────────────────────────

/// One metric column: per-sample values (absent where the metric was
/// undefined) plus the dataset mean over present values.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricColumn {
    pub name: String,
    pub per_sample: Vec<Option<f32>>,
    pub mean: Option<f32>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub samples: Vec<String>,
    pub columns: Vec<MetricColumn>,
}

impl MetricReport {
    pub fn new(samples: Vec<String>) -> MetricReport {
        MetricReport { samples, columns: Vec::new() }
    }

    /// Append a column; the mean is the arithmetic mean of present values.
    pub fn add_column(&mut self, name: &str, per_sample: Vec<Option<f32>>) -> Result<()> {
        if per_sample.len() != self.samples.len() {
            return Err(CoreError::Shape(format!(
                "column '{name}' has {} values for {} samples",
                per_sample.len(),
                self.samples.len()
            )));
        }
        let present: Vec<f32> = per_sample.iter().filter_map(|v| *v).collect();
        let mean = if present.is_empty() {
            None
        } else {
            Some(present.iter().map(|&v| v as f64).sum::<f64>() as f32 / present.len() as f32)
        };
        self.columns.push(MetricColumn { name: name.to_string(), per_sample, mean });
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&MetricColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One CSV row per sample, one trailing mean row.
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "sample")?;
        for c in &self.columns {
            write!(f, ",{}", c.name)?;
        }
        writeln!(f)?;
        for (i, sample) in self.samples.iter().enumerate() {
            write!(f, "{sample}")?;
            for c in &self.columns {
                match c.per_sample[i] {
                    Some(v) => write!(f, ",{v}")?,
                    None => write!(f, ",")?,
                }
            }
            writeln!(f)?;
        }
        write!(f, "mean")?;
        for c in &self.columns {
            match c.mean {
                Some(v) => write!(f, ",{v}")?,
                None => write!(f, ",")?,
            }
        }
        writeln!(f)?;
        Ok(())
    }

    /// Markdown table in the usual benchmark layout: one row per model/run,
    /// one column per metric (here: the single run's means).
    pub fn to_markdown(&self, runs: &[(&str, &MetricReport)]) -> String {
        let mut out = String::new();
        out.push_str("| Model |");
        for c in &self.columns {
            out.push_str(&format!(" {} |", c.name));
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &self.columns {
            out.push_str("---|");
        }
        out.push('\n');
        for (name, report) in runs {
            out.push_str(&format!("| {name} |"));
            for c in &self.columns {
                match report.column(&c.name).and_then(|col| col.mean) {
                    Some(v) => out.push_str(&format!(" {v:.4} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_perfect_linear() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let y: Vec<f32> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let r = pearson_corr(&x, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_negative() {
        let x = [1.0f32, 2.0, 3.0];
        let y: Vec<f32> = x.iter().map(|v| -v).collect();
        let r = pearson_corr(&x, &y).unwrap();
        assert!((r + 1.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_hand_case() {
        let r = pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-6, "{r}");
    }

    #[test]
    fn pearson_zero_variance_undefined() {
        assert!(matches!(
            pearson_corr(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(CoreError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn report_mean_is_mean_of_present() {
        let mut r = MetricReport::new(vec!["a".into(), "b".into(), "c".into()]);
        r.add_column("m", vec![Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!(r.column("m").unwrap().mean, Some(2.0));
        r.add_column("absent", vec![None, None, None]).unwrap();
        assert_eq!(r.column("absent").unwrap().mean, None);
    }

    #[test]
    fn report_round_trip_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricReport::new(vec!["clip0".into(), "clip1".into()]);
        r.add_column("blur_ssim", vec![Some(0.9), Some(0.8)]).unwrap();
        r.add_column("mask_miou", vec![Some(0.5), None]).unwrap();
        let jp = dir.path().join("report.json");
        let cp = dir.path().join("report.csv");
        r.save_json(&jp).unwrap();
        r.save_csv(&cp).unwrap();
        let loaded: MetricReport = serde_json::from_str(&std::fs::read_to_string(&jp).unwrap()).unwrap();
        assert_eq!(loaded.columns.len(), 2);
        let csv = std::fs::read_to_string(&cp).unwrap();
        assert!(csv.starts_with("sample,blur_ssim,mask_miou"));
        assert!(csv.contains("clip1,0.8,"));
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }
}
