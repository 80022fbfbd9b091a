//! Masked evaluation metrics and aggregate reports.

use std::fmt::{self, Write as _};
use std::path::Path;

use voxelfill_tensor::Graph;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::losses::{ssim_map, LossConfig};
use crate::volume::{check_dims, Label, LabelMask, Volume};

/// Reported in place of an infinite PSNR (perfect reconstruction).
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1 / mse)` for unit-range intensities; `+∞` at zero error.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanMetrics {
    pub id: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl ScanMetrics {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("id", &self.id);
        kv.push("mse", self.mse);
        kv.push("psnr", self.psnr);
        kv.push("ssim", self.ssim);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        Ok(Self {
            id: kv.require("id")?,
            mse: kv.require("mse")?,
            psnr: kv.require("psnr")?,
            ssim: kv.require("ssim")?,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_kv().to_string())?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-voxel SSIM: each voxel takes the value of the window centred on it,
/// with the centre clamped so the window stays inside the grid.
pub fn ssim_voxel_map(pred: &Volume, gt: &Volume, cfg: &LossConfig) -> Result<Volume> {
    check_dims(pred.dims(), gt.dims())?;
    cfg.validate()?;
    let mut g = Graph::new();
    let x = g.constant(pred.to_tensor());
    let y = g.constant(gt.to_tensor());
    let map = ssim_map(&mut g, x, y, cfg)?;
    let m = g.value(map);
    let [_, _, my, mz] = m.dims4()?;
    let dims = pred.dims();
    let w = cfg.window;
    let half = w / 2;
    let clamp = |v: usize, n: usize| v.saturating_sub(half).min(n - w);
    let data = m.data();
    Volume::raw(
        dims,
        (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                let (vx, vy, vz) = (clamp(x, dims.nx), clamp(y, dims.ny), clamp(z, dims.nz));
                data[(vx * my + vy) * mz + vz]
            })
            .collect(),
    )
}

/// MSE, PSNR and windowed SSIM restricted to healthy voxels.
pub fn eval_metrics(
    id: &str,
    pred: &Volume,
    gt: &Volume,
    healthy: &LabelMask,
    cfg: &LossConfig,
) -> Result<ScanMetrics> {
    check_dims(pred.dims(), gt.dims())?;
    check_dims(pred.dims(), healthy.dims())?;
    let m = healthy.count(Label::Healthy);
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let selected = || {
        healthy
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == Label::Healthy)
            .map(|(i, _)| i)
    };
    let (p, t) = (pred.voxels(), gt.voxels());
    let mse = selected().map(|i| (p[i] - t[i]).powi(2)).sum::<f64>() / m as f64;
    let map = ssim_voxel_map(pred, gt, cfg)?;
    let ssim = selected().map(|i| map.voxels()[i]).sum::<f64>() / m as f64;
    Ok(ScanMetrics {
        id: id.to_string(),
        mse,
        psnr: psnr(mse),
        ssim,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

/// Linear interpolation between order statistics of sorted `v`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    /// Population statistics of a non-empty sample.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyReport);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
        })
    }

    fn get(&self, stat: Stat) -> f64 {
        match stat {
            Stat::Mean => self.mean,
            Stat::Std => self.std,
            Stat::Q25 => self.q25,
            Stat::Median => self.median,
            Stat::Q75 => self.q75,
        }
    }

    fn set(&mut self, stat: Stat, v: f64) {
        *match stat {
            Stat::Mean => &mut self.mean,
            Stat::Std => &mut self.std,
            Stat::Q25 => &mut self.q25,
            Stat::Median => &mut self.median,
            Stat::Q75 => &mut self.q75,
        } = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stat {
    Mean,
    Std,
    Q25,
    Median,
    Q75,
}

const STATS: [(Stat, &str, &str); 5] = [
    (Stat::Mean, "mean", "Mean"),
    (Stat::Std, "std", "Standard deviation"),
    (Stat::Q25, "q25", "25 quantile"),
    (Stat::Median, "median", "Median"),
    (Stat::Q75, "q75", "75 quantile"),
];

const METRICS: [(&str, &str); 3] = [("mse", "MSE"), ("psnr", "PSNR"), ("ssim", "SSIM")];

/// Aggregate statistics per metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportSummary {
    pub scans: usize,
    pub mse: Summary,
    pub psnr: Summary,
    pub ssim: Summary,
}

impl ReportSummary {
    fn metric(&self, name: &str) -> &Summary {
        match name {
            "mse" => &self.mse,
            "psnr" => &self.psnr,
            _ => &self.ssim,
        }
    }

    fn metric_mut(&mut self, name: &str) -> &mut Summary {
        match name {
            "mse" => &mut self.mse,
            "psnr" => &mut self.psnr,
            _ => &mut self.ssim,
        }
    }

    /// `metric.statistic = value` lines with 9 significant digits.
    pub fn key_values(&self) -> String {
        let mut out = format!("scans = {}\n", self.scans);
        for (m, _) in METRICS {
            for (stat, key, _) in STATS {
                let _ = writeln!(out, "{m}.{key} = {}", sig9(self.metric(m).get(stat)));
            }
        }
        out
    }

    /// Reads the block written by [`ReportSummary::key_values`]; other
    /// lines of a full report are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let block: String = text
            .lines()
            .filter(|l| l.contains(" = "))
            .map(|l| format!("{l}\n"))
            .collect();
        let kv = KeyValues::parse(&block)?;
        let zero = Summary {
            mean: 0.0,
            std: 0.0,
            q25: 0.0,
            median: 0.0,
            q75: 0.0,
        };
        let mut r = Self {
            scans: kv.require("scans")?,
            mse: zero,
            psnr: zero,
            ssim: zero,
        };
        for (m, _) in METRICS {
            for (stat, key, _) in STATS {
                let v = kv.require(&format!("{m}.{key}"))?;
                r.metric_mut(m).set(stat, v);
            }
        }
        Ok(r)
    }
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scans: Vec<ScanMetrics>,
    pub summary: ReportSummary,
}

/// Per-metric statistics over `metrics`. Infinite PSNR values enter the
/// statistics as [`PSNR_CAP`].
pub fn aggregate_report(metrics: &[ScanMetrics]) -> Result<EvalReport> {
    let col = |f: fn(&ScanMetrics) -> f64| metrics.iter().map(f).collect::<Vec<_>>();
    let summary = ReportSummary {
        scans: metrics.len(),
        mse: Summary::of(&col(|m| m.mse))?,
        psnr: Summary::of(&col(|m| m.psnr.min(PSNR_CAP)))?,
        ssim: Summary::of(&col(|m| m.ssim))?,
    };
    Ok(EvalReport {
        scans: metrics.to_vec(),
        summary,
    })
}

impl fmt::Display for EvalReport {
    /// Statistic rows by metric columns, then the key=value block.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<20}", "")?;
        for (_, title) in METRICS {
            write!(f, "{title:>18}")?;
        }
        writeln!(f)?;
        for (stat, _, title) in STATS {
            write!(f, "{title:<20}")?;
            for (m, _) in METRICS {
                write!(f, "{:>18}", sig9(self.summary.metric(m).get(stat)))?;
            }
            writeln!(f)?;
        }
        writeln!(f)?;
        f.write_str(&self.summary.key_values())
    }
}

/// Loads every `*.metrics` file in `dir`, sorted by file name.
pub fn read_metrics_dir(dir: impl AsRef<Path>) -> Result<Vec<ScanMetrics>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "metrics"));
    paths.sort();
    paths.iter().map(ScanMetrics::read).collect()
}
