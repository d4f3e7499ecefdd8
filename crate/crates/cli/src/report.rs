//! CSV writers, the binary PGM raster and spot-map assembly.

use std::fs;
use std::path::Path;

use m2ost_core::data::StDataset;
use m2ost_core::eval::{AblationRow, EvalReport};
use m2ost_core::train::LogRow;

use crate::error::{CmdError, CmdResult};

/// Training log, header `step,train_mse,val_pcc,val_rmse`.
pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,train_mse,val_pcc,val_rmse\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{:.9},{:.9}\n", r.step, r.train_mse, r.val_pcc, r.val_rmse));
    }
    out
}

/// Per-spot evaluation report, header `spot_id,pcc,rmse`. Spots with an
/// undefined coefficient keep the sentinel 0 but are marked excluded.
pub fn eval_report_csv(report: &EvalReport) -> String {
    let mut out = String::from("spot_id,pcc,rmse\n");
    for r in &report.rows {
        if r.pcc_defined {
            out.push_str(&format!("{},{:.9},{:.9}\n", r.spot_id, r.pcc, r.rmse));
        } else {
            out.push_str(&format!("{},excluded,{:.9}\n", r.spot_id, r.rmse));
        }
    }
    out
}

/// Per-gene secondary report, header `gene,pcc`.
pub fn per_gene_csv(report: &EvalReport) -> String {
    let mut out = String::from("gene,pcc\n");
    for (gene, v) in &report.per_gene_pcc {
        out.push_str(&format!("{gene},{v:.9}\n"));
    }
    out
}

/// Ablation table mirroring the component/input study layout.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("label,dpe,decoupled_itmm,cross_mix,ccmm,levels,pcc,rmse,params,macs\n");
    for r in rows {
        let levels: Vec<String> =
            r.config.levels_enabled.iter().map(|l| l.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.9},{:.9},{},{}\n",
            r.label,
            r.config.use_dpe,
            r.config.decoupled_itmm,
            r.config.cross_mix.as_str(),
            r.config.use_ccmm,
            levels.join("+"),
            r.val_pcc,
            r.val_rmse,
            r.parameter_count,
            r.mac_count,
        ));
    }
    out
}

/// Map export rows, header `spot_id,x,y,value`.
pub fn map_csv(rows: &[(String, f64, f64, f64)]) -> String {
    let mut out = String::from("spot_id,x,y,value\n");
    for (id, x, y, v) in rows {
        out.push_str(&format!("{id},{x:.3},{y:.3},{v:.9}\n"));
    }
    out
}

/// Binary PGM (P5), 8-bit grayscale.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> CmdResult<()> {
    if pixels.len() != w * h {
        return Err(CmdError::Io(format!(
            "pgm: {w}x{h} wants {} pixels, got {}",
            w * h,
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| CmdError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Place per-spot values on the slide grid. Returns (width, height, pixels);
/// cells without a spot are white (255), values are min-max scaled to 0..254.
pub fn rasterize_spot_map(
    dataset: &StDataset,
    spots: &[(usize, f64)],
) -> CmdResult<(usize, usize, Vec<u8>)> {
    if spots.is_empty() {
        return Err(CmdError::Usage("no spots to rasterize".into()));
    }
    let spacing = dataset.meta.spacing_um.max(1.0);
    let centers: Vec<(f64, f64)> =
        spots.iter().map(|&(i, _)| dataset.samples[i].spot_center_um).collect();
    let min_row = centers.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let min_col = centers.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_row = centers.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let max_col = centers.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let h = ((max_row - min_row) / spacing).round() as usize + 1;
    let w = ((max_col - min_col) / spacing).round() as usize + 1;

    let lo = spots.iter().map(|&(_, v)| v).fold(f64::INFINITY, f64::min);
    let hi = spots.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut pixels = vec![255u8; w * h];
    for (&(idx, value), center) in spots.iter().zip(&centers) {
        let r = ((center.0 - min_row) / spacing).round() as usize;
        let c = ((center.1 - min_col) / spacing).round() as usize;
        let shade = ((value - lo) / span * 254.0).round() as u8;
        pixels[r.min(h - 1) * w + c.min(w - 1)] = shade;
        let _ = idx;
    }
    Ok((w, h, pixels))
}
