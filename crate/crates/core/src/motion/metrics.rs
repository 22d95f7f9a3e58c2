//! Pose-accuracy and physical-plausibility metrics. Positions are compared
//! in millimeters.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::kinematics::motion_positions;
use super::procrustes::procrustes_align;
use super::sequence::Motion;
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;
/// A ground-truth foot lower than this (meters) is in ground contact.
pub const CONTACT_HEIGHT_M: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub e_s: f64,
    pub sigma_s: f64,
    pub e_fz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct MetricOptions {
    pub pck_threshold_mm: f64,
    pub contact_height_m: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            pck_threshold_mm: DEFAULT_PCK_THRESHOLD_MM,
            contact_height_m: CONTACT_HEIGHT_M,
        }
    }
}

pub fn compute_metrics(pred: &Motion, gt: &Motion, skeleton: &Skeleton) -> Result<MetricReport> {
    compute_metrics_with(pred, gt, skeleton, MetricOptions::default())
}

pub fn compute_metrics_with(
    pred: &Motion,
    gt: &Motion,
    skeleton: &Skeleton,
    opts: MetricOptions,
) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.joint_count() != gt.joint_count() || pred.fps != gt.fps {
        return Err(Error::Shape(format!(
            "prediction ({} frames, {} joints, {} fps) vs ground truth ({} frames, {} joints, {} fps)",
            pred.len(),
            pred.joint_count(),
            pred.fps,
            gt.len(),
            gt.joint_count(),
            gt.fps
        )));
    }
    let to_mm = |frames: Vec<Vec<Vector3<f64>>>| -> Vec<Vec<Vector3<f64>>> {
        frames
            .into_iter()
            .map(|f| f.into_iter().map(|p| p * 1000.0).collect())
            .collect()
    };
    let p = to_mm(motion_positions(skeleton, pred)?);
    let g = to_mm(motion_positions(skeleton, gt)?);
    metrics_from_positions(&p, &g, &skeleton.feet, opts)
}

/// Metrics from per-frame joint positions already expressed in millimeters.
pub fn metrics_from_positions(
    pred: &[Vec<Vector3<f64>>],
    gt: &[Vec<Vector3<f64>>],
    feet: &[usize],
    opts: MetricOptions,
) -> Result<MetricReport> {
    let frames = pred.len();
    if frames == 0 {
        return Err(Error::Invalid("no frames to evaluate".into()));
    }
    let joints = pred[0].len();
    let mut err_sum = 0.0;
    let mut pa_sum = 0.0;
    let mut within = 0usize;
    for (pf, gf) in pred.iter().zip(gt) {
        if pf.len() != joints || gf.len() != joints {
            return Err(Error::Shape("ragged joint arrays".into()));
        }
        for (a, b) in pf.iter().zip(gf) {
            let e = (a - b).norm();
            err_sum += e;
            if e <= opts.pck_threshold_mm {
                within += 1;
            }
        }
        let (_, aligned) = procrustes_align(pf, gf)?;
        pa_sum += aligned
            .iter()
            .zip(gf)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>();
    }
    let count = (frames * joints) as f64;

    // jitter: per-frame mean over joints of | |v_pred| - |v_gt| |
    let per_frame: Vec<f64> = (1..frames)
        .map(|h| {
            (0..joints)
                .map(|j| {
                    let vp = (pred[h][j] - pred[h - 1][j]).norm();
                    let vg = (gt[h][j] - gt[h - 1][j]).norm();
                    (vp - vg).abs()
                })
                .sum::<f64>()
                / joints as f64
        })
        .collect();
    let (e_s, sigma_s) = mean_std(&per_frame);

    let contact_mm = opts.contact_height_m * 1000.0;
    let mut fz_sum = 0.0;
    let mut fz_count = 0usize;
    for (pf, gf) in pred.iter().zip(gt) {
        for &f in feet {
            if gf[f].z < contact_mm {
                fz_sum += (pf[f].z - gf[f].z).abs();
                fz_count += 1;
            }
        }
    }

    Ok(MetricReport {
        mpjpe: err_sum / count,
        pa_mpjpe: pa_sum / count,
        pck: within as f64 / count,
        e_s,
        sigma_s,
        e_fz: if fz_count == 0 {
            0.0
        } else {
            fz_sum / fz_count as f64
        },
        success_rate: None,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Average reports over sequences; `success_rate` is carried through only when
/// every report has one.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let success = reports
        .iter()
        .map(|r| r.success_rate)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Some(MetricReport {
        mpjpe: avg(|r| r.mpjpe),
        pa_mpjpe: avg(|r| r.pa_mpjpe),
        pck: avg(|r| r.pck),
        e_s: avg(|r| r.e_s),
        sigma_s: avg(|r| r.sigma_s),
        e_fz: avg(|r| r.e_fz),
        success_rate: success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(
        h: usize,
        j: usize,
        f: impl Fn(usize, usize) -> Vector3<f64>,
    ) -> Vec<Vec<Vector3<f64>>> {
        (0..h).map(|a| (0..j).map(|b| f(a, b)).collect()).collect()
    }

    fn base(h: usize, j: usize) -> Vec<Vec<Vector3<f64>>> {
        frames(h, j, |a, b| {
            Vector3::new(
                100.0 * b as f64 + a as f64,
                30.0 * (b * b) as f64,
                50.0 * (b % 3) as f64 + 10.0,
            )
        })
    }

    #[test]
    fn identical_inputs_are_perfect() {
        let g = base(6, 5);
        let r = metrics_from_positions(&g, &g, &[0, 1], MetricOptions::default()).unwrap();
        assert_eq!(r.mpjpe, 0.0);
        assert!(r.pa_mpjpe < 1e-9);
        assert_eq!(r.pck, 1.0);
        assert_eq!(r.e_s, 0.0);
        assert_eq!(r.sigma_s, 0.0);
        assert_eq!(r.e_fz, 0.0);
    }

    #[test]
    fn three_four_five_displacement() {
        let g = base(4, 5);
        let mut p = g.clone();
        for f in p.iter_mut() {
            f[2] += Vector3::new(30.0, 40.0, 0.0);
        }
        let r = metrics_from_positions(&p, &g, &[], MetricOptions::default()).unwrap();
        assert!((r.mpjpe - 50.0 / 5.0).abs() < 1e-12);
        // a sparse error is spread over all joints by the least-squares
        // alignment, so the aligned mean norm can exceed the raw one here
        assert!(r.pa_mpjpe > 0.0);
        // constant offset does not change velocities
        assert!(r.e_s < 1e-12);
    }

    #[test]
    fn alignment_never_increases_squared_error() {
        let g = base(3, 7);
        let p = frames(3, 7, |a, b| {
            g[a][b] * 1.1
                + Vector3::new((b * 13 % 7) as f64 * 9.0, a as f64 * 4.0, -(b as f64) * 6.0)
        });
        for (pf, gf) in p.iter().zip(&g) {
            let (_, aligned) = procrustes_align(pf, gf).unwrap();
            let raw: f64 = pf.iter().zip(gf).map(|(a, b)| (a - b).norm_squared()).sum();
            let al: f64 = aligned
                .iter()
                .zip(gf)
                .map(|(a, b)| (a - b).norm_squared())
                .sum();
            assert!(al <= raw + 1e-9);
        }
    }

    #[test]
    fn foot_error_only_counts_contact_frames() {
        let g = frames(3, 3, |a, b| {
            Vector3::new(
                b as f64 * 100.0,
                (b * b) as f64 * 40.0,
                if a == 1 { 500.0 } else { 10.0 * b as f64 },
            )
        });
        let mut p = g.clone();
        for f in p.iter_mut() {
            f[1].z += 20.0;
        }
        let r = metrics_from_positions(&p, &g, &[1], MetricOptions::default()).unwrap();
        assert!((r.e_fz - 20.0).abs() < 1e-12);
    }

    #[test]
    fn pck_threshold_is_monotone() {
        let g = base(5, 6);
        let p = frames(5, 6, |a, b| {
            g[a][b] + Vector3::new(37.0 * b as f64, 0.0, 11.0 * a as f64)
        });
        let mut last = 0.0;
        for t in [0.0, 20.0, 60.0, 100.0, 150.0, 400.0] {
            let r = metrics_from_positions(
                &p,
                &g,
                &[],
                MetricOptions {
                    pck_threshold_mm: t,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.pck >= last);
            last = r.pck;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn mean_report_drops_partial_success() {
        let a = MetricReport {
            mpjpe: 1.0,
            pa_mpjpe: 1.0,
            pck: 1.0,
            e_s: 1.0,
            sigma_s: 0.0,
            e_fz: 0.0,
            success_rate: Some(1.0),
        };
        let b = MetricReport {
            mpjpe: 3.0,
            success_rate: None,
            ..a.clone()
        };
        let m = mean_report(&[a.clone(), b]).unwrap();
        assert_eq!(m.mpjpe, 2.0);
        assert_eq!(m.success_rate, None);
        let m = mean_report(&[
            a.clone(),
            MetricReport {
                success_rate: Some(0.0),
                ..a
            },
        ])
        .unwrap();
        assert_eq!(m.success_rate, Some(0.5));
    }
}
