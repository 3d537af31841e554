use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{list_images, load_image, psnr, ssim};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by id.
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.id, r.psnr_db, r.ssim);
        }
        s
    }

    /// Aligned text table with a trailing mean row. LPIPS is not computed.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let mut s = format!("{:<width$}  {:>9}  {:>7}  {:>5}\n", "id", "PSNR(dB)", "SSIM", "LPIPS");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.4}  {:>5}", r.id, r.psnr_db, r.ssim, "n/a");
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>7.4}  {:>5}",
            "mean", self.mean_psnr, self.mean_ssim, "n/a"
        );
        s
    }
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?
        .into_iter()
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect())
}

/// PSNR/SSIM of every prediction against the ground truth with the same file stem.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let pred = by_stem(pred_dir)?;
    let gt = by_stem(gt_dir)?;
    let unmatched: Vec<&str> = pred
        .keys()
        .filter(|k| !gt.contains_key(*k))
        .chain(gt.keys().filter(|k| !pred.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Data(format!(
            "ids without a counterpart: {}",
            unmatched.join(", ")
        )));
    }
    let ids: Vec<&String> = pred.keys().collect();
    let rows = crate::par::map_range(ids.len(), |i| -> Result<EvalRow> {
        let id = ids[i];
        let a = load_image::<f64>(&pred[id])?;
        let b = load_image::<f64>(&gt[id])?;
        a.expect_same_dims(&b, "evaluate_dir")
            .map_err(|_| Error::Data(format!("{id}: prediction {:?} vs target {:?}", a.dims(), b.dims())))?;
        Ok(EvalRow {
            id: id.clone(),
            psnr_db: psnr(&a, &b, 1.0)?,
            ssim: ssim(&a, &b)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}
