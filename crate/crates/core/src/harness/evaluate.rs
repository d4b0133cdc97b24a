use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{dsc, summarize, tre, Percentiles, DSC_THRESHOLD};
use super::phantom::SyntheticCase;
use crate::error::{Error, Result};
use crate::net::RegNet;
use crate::spatial::{
    displacement_magnitude_map, gradient_l2norm_map, jacobian_determinant_map, warp_label, warp_volume,
};
use crate::volume::{write_volume, DisplacementField, LabelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: usize,
    /// Landmark centroid distances after registration, mm.
    pub distances: Vec<Option<f64>>,
    pub tre: Option<f64>,
    /// Landmark TRE with the identity transform.
    pub initial_tre: Option<f64>,
    pub dsc: Option<f64>,
    pub initial_dsc: Option<f64>,
    pub negative_jacobian: usize,
    pub jacobian_mean: f64,
    pub jacobian_std: f64,
    pub max_displacement_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    /// The gland feeds DSC only; TRE uses the landmark pairs.
    pub tre_excludes_gland: bool,
    pub dsc_threshold: f64,
    pub checkpoint_iteration: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub tre: Option<Percentiles>,
    pub initial_tre: Option<Percentiles>,
    pub dsc: Option<Percentiles>,
    pub initial_dsc: Option<Percentiles>,
    pub negative_jacobian_total: usize,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    /// `metric,median,p10,p25,p75,p90` rows for plotting.
    pub fn percentile_csv(&self) -> String {
        let mut s = String::from("metric,median,p10,p25,p75,p90\n");
        for (name, p) in [
            ("tre", self.tre),
            ("initial_tre", self.initial_tre),
            ("dsc", self.dsc),
            ("initial_dsc", self.initial_dsc),
        ] {
            if let Some(p) = p {
                let _ = writeln!(s, "{name},{},{},{},{},{}", p.median, p.p10, p.p25, p.p75, p.p90);
            }
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(path, e))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.percentile_csv()).map_err(|e| Error::file(&csv, e))
    }
}

fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn score_case(case: &SyntheticCase, ddf: &DisplacementField) -> Result<CaseReport> {
    let warped: Vec<LabelMask> = case
        .landmarks
        .iter()
        .map(|l| warp_label(&l.moving, ddf))
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = warped.iter().zip(&case.landmarks).map(|(w, l)| (w, &l.fixed)).collect();
    let after = tre(&pairs);
    let before: Vec<_> = case.landmarks.iter().map(|l| (&l.moving, &l.fixed)).collect();
    let gland = warp_label(&case.gland.moving, ddf)?;
    let jac = jacobian_determinant_map(ddf);
    let (jacobian_mean, jacobian_std) = mean_std(jac.data());
    Ok(CaseReport {
        case_id: case.case_id,
        distances: after.distances,
        tre: after.rms,
        initial_tre: tre(&before).rms,
        dsc: dsc(&gland, &case.gland.fixed),
        initial_dsc: dsc(&case.gland.moving, &case.gland.fixed),
        negative_jacobian: jac.data().iter().filter(|&&d| d <= 0.0).count(),
        jacobian_mean,
        jacobian_std,
        max_displacement_mm: displacement_magnitude_map(ddf)
            .data()
            .iter()
            .fold(0.0f64, |a, &b| a.max(b as f64)),
    })
}

fn write_maps(dir: &Path, case: &SyntheticCase, ddf: &DisplacementField) -> Result<()> {
    let d = dir.join(format!("case_{:04}", case.case_id));
    fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
    write_volume(jacobian_determinant_map(ddf), d.join("jacobian"))?;
    write_volume(displacement_magnitude_map(ddf), d.join("magnitude"))?;
    write_volume(gradient_l2norm_map(ddf), d.join("gradient_norm"))?;
    write_volume(warp_volume(&case.moving, ddf)?, d.join("warped_moving"))?;
    write_volume(ddf.clone(), d.join("ddf"))
}

/// Scores given fields (one per case, on the fixed grids) against the labels.
pub fn evaluate_fields(cases: &[SyntheticCase], ddfs: &[DisplacementField], maps: Option<&Path>) -> Result<EvalReport> {
    if cases.len() != ddfs.len() {
        return Err(Error::SizeMismatch {
            expected: cases.len(),
            found: ddfs.len(),
        });
    }
    for (c, u) in cases.iter().zip(ddfs) {
        if u.meta() != c.fixed.meta() {
            return Err(Error::Shape(format!(
                "case {}: field grid {:?} differs from image grid {:?}",
                c.case_id,
                u.meta(),
                c.fixed.meta()
            )));
        }
    }
    let reports: Vec<CaseReport> = cases
        .par_iter()
        .zip(ddfs)
        .map(|(c, u)| {
            if let Some(dir) = maps {
                write_maps(dir, c, u)?;
            }
            score_case(c, u)
        })
        .collect::<Result<_>>()?;
    let collect = |f: fn(&CaseReport) -> Option<f64>| summarize(&reports.iter().filter_map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        tre: collect(|r| r.tre),
        initial_tre: collect(|r| r.initial_tre),
        dsc: collect(|r| r.dsc),
        initial_dsc: collect(|r| r.initial_dsc),
        negative_jacobian_total: reports.iter().map(|r| r.negative_jacobian).sum(),
        cases: reports,
        metadata: EvalMetadata {
            tre_excludes_gland: true,
            dsc_threshold: DSC_THRESHOLD,
            checkpoint_iteration: None,
        },
    })
}

/// Errors if any evaluated case was used for training.
pub fn audit_split(train_cases: &[usize], cases: &[SyntheticCase]) -> Result<()> {
    let leaked: Vec<usize> = cases
        .iter()
        .map(|c| c.case_id)
        .filter(|id| train_cases.contains(id))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("cases {leaked:?} were used for training")))
    }
}

/// Runs the network on every case (running batch statistics) and scores the
/// predicted fields.
pub fn evaluate(net: &RegNet<f32>, cases: &[SyntheticCase], maps: Option<&Path>) -> Result<EvalReport> {
    let ddfs: Vec<DisplacementField> = cases
        .iter()
        .map(|c| net.predict(&c.moving, &c.fixed))
        .collect::<Result<_>>()?;
    evaluate_fields(cases, &ddfs, maps)
}
