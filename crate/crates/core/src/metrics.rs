//! Depth-completion metrics over a pixel mask.

use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};

/// δ thresholds, in the order of the report fields.
pub const DELTA_THRESHOLDS: [f64; 3] = [1.05, 1.10, 1.25];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// Root mean squared error, meters.
    pub rmse: f64,
    /// Mean absolute relative error.
    pub rel: f64,
    /// Mean absolute error, meters.
    pub mae: f64,
    /// Percent of pixels with `max(d/d*, d*/d) < 1.05`.
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
    pub pixel_count: usize,
}

/// Which pixels a sample is scored on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalRegion {
    /// Transparent pixels with valid ground truth.
    #[default]
    MaskOnly,
    /// Every pixel with valid ground truth.
    AllPixels,
}

/// Evaluation mask for a sample: `region` restricted to `gt > 0`.
pub fn evaluation_mask(gt: &[f32], mask: &[u8], region: EvalRegion) -> Vec<u8> {
    gt.iter()
        .zip(mask)
        .map(|(&g, &m)| u8::from(g > 0.0 && (region == EvalRegion::AllPixels || m != 0)))
        .collect()
}

/// Metrics of `pred` against `gt` over pixels where `mask != 0`.
///
/// A nonpositive prediction never satisfies a δ threshold.
pub fn evaluate<T: Copy + Into<f64>>(pred: &[T], gt: &[T], mask: &[u8]) -> Result<MetricReport> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return dim_err(format!(
            "prediction ({}), ground truth ({}) and mask ({}) lengths differ",
            pred.len(),
            gt.len(),
            mask.len()
        ));
    }
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut abs = 0.0;
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if m == 0 {
            continue;
        }
        let (d, t): (f64, f64) = (p.into(), g.into());
        if !(t > 0.0) {
            return Err(Error::Contract(format!("ground truth {t} under the mask must be positive")));
        }
        let e = (d - t).abs();
        sq += e * e;
        abs += e;
        rel += e / t;
        if d > 0.0 {
            let ratio = (d / t).max(t / d);
            for (hit, &thr) in hits.iter_mut().zip(&DELTA_THRESHOLDS) {
                *hit += usize::from(ratio < thr);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("evaluation mask is empty".into()));
    }
    let nf = n as f64;
    Ok(MetricReport {
        rmse: (sq / nf).sqrt(),
        rel: rel / nf,
        mae: abs / nf,
        delta_105: 100.0 * hits[0] as f64 / nf,
        delta_110: 100.0 * hits[1] as f64 / nf,
        delta_125: 100.0 * hits[2] as f64 / nf,
        pixel_count: n,
    })
}

/// Pixel-weighted combination; equals evaluating all pixels together.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    let total: usize = reports.iter().map(|r| r.pixel_count).sum();
    if reports.is_empty() || total == 0 {
        return Err(Error::Contract("cannot aggregate an empty list of reports".into()));
    }
    let weighted = |f: fn(&MetricReport) -> f64| -> f64 {
        reports.iter().map(|r| f(r) * r.pixel_count as f64).sum::<f64>() / total as f64
    };
    Ok(MetricReport {
        rmse: weighted(|r| r.rmse * r.rmse).sqrt(),
        rel: weighted(|r| r.rel),
        mae: weighted(|r| r.mae),
        delta_105: weighted(|r| r.delta_105),
        delta_110: weighted(|r| r.delta_110),
        delta_125: weighted(|r| r.delta_125),
        pixel_count: total,
    })
}

impl MetricReport {
    pub const NAMES: [&'static str; 7] = ["rmse", "rel", "mae", "delta_105", "delta_110", "delta_125", "pixel_count"];

    fn values(&self) -> [f64; 6] {
        [self.rmse, self.rel, self.mae, self.delta_105, self.delta_110, self.delta_125]
    }

    /// One `name=value` line per metric, each prefixed by `prefix` when it
    /// is nonempty (`prefix.name=value`).
    pub fn to_lines(&self, prefix: &str) -> String {
        let mut out = String::new();
        let dot = if prefix.is_empty() { "" } else { "." };
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            let _ = writeln!(out, "{prefix}{dot}{name}={v}");
        }
        let _ = writeln!(out, "{prefix}{dot}pixel_count={}", self.pixel_count);
        out
    }

    /// Parses lines produced by [`to_lines`](Self::to_lines) for one prefix.
    pub fn from_lines(text: &str, prefix: &str) -> Result<Self> {
        let dot = if prefix.is_empty() { "" } else { "." };
        let mut vals = [None; 7];
        for line in text.lines() {
            let Some((key, value)) = line.split_once('=') else { continue };
            let Some(name) = key.trim().strip_prefix(prefix).and_then(|k| k.strip_prefix(dot)) else { continue };
            if let Some(i) = Self::NAMES.iter().position(|n| *n == name) {
                let v: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad metric value {value:?} for {key}")))?;
                vals[i] = Some(v);
            }
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::Format(format!("metric {}{dot}{} missing", prefix, Self::NAMES[i])));
        Ok(Self {
            rmse: get(0)?,
            rel: get(1)?,
            mae: get(2)?,
            delta_105: get(3)?,
            delta_110: get(4)?,
            delta_125: get(5)?,
            pixel_count: get(6)? as usize,
        })
    }
}

/// Plain-text table with one row per named report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("sample".len());
    let mut out = format!(
        "{:<name_w$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>7}  {:>7}  {:>8}\n",
        "sample", "RMSE", "REL", "MAE", "d1.05", "d1.10", "d1.25", "pixels"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>9.5}  {:>9.5}  {:>9.5}  {:>7.2}  {:>7.2}  {:>7.2}  {:>8}",
            name, r.rmse, r.rel, r.mae, r.delta_105, r.delta_110, r.delta_125, r.pixel_count
        );
    }
    out
}
