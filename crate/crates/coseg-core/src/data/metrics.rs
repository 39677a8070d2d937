//! Segmentation quality metrics.

use super::Mask;
use crate::error::{CosegError, Result};

fn check_extents(op: &str, pred: &Mask, gt: &Mask) -> Result<()> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(CosegError::shape_mismatch(
            op,
            &[pred.h, pred.w],
            &[gt.h, gt.w],
        ));
    }
    Ok(())
}

/// Foreground intersection over union. Both masks empty counts as 1, exactly
/// one empty as 0.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_extents("jaccard", pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Fraction of all pixels labeled correctly, foreground and background alike.
pub fn precision_pixel(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_extents("precision_pixel", pred, gt)?;
    let correct = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(&p, &g)| (p != 0) == (g != 0))
        .count();
    Ok(correct as f64 / pred.data.len() as f64)
}

/// One line of a per-class evaluation report.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub label: String,
    pub pairs: usize,
    pub jaccard: f64,
    pub precision: f64,
}

/// Tab-separated report with one row per class and a trailing mean row.
pub fn format_report(rows: &[MetricRow]) -> String {
    let mut out = String::from("class\tpairs\tjaccard\tprecision\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\n",
            r.label, r.pairs, r.jaccard, r.precision
        ));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let jac = rows.iter().map(|r| r.jaccard).sum::<f64>() / n;
        let pre = rows.iter().map(|r| r.precision).sum::<f64>() / n;
        let pairs: usize = rows.iter().map(|r| r.pairs).sum();
        out.push_str(&format!("mean\t{}\t{:.4}\t{:.4}\n", pairs, jac, pre));
    }
    out
}
