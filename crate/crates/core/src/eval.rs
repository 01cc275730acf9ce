//! Localization metrics (medians, recall at thresholds, threshold curves),
//! loop-closure drift, and the raw-scan vs. indexed-map ablation harness,
//! plus the CSV/SVG/report renderers the CLI emits.

use thiserror::Error;

use crate::features::PyramidParams;
use crate::geometry::{pose_error, Pose};
use crate::mapcloud::{self, MapBuildParams, TimedPose};
use crate::retrieval::{DescriptorKind, RetrievalDatabase};
use crate::solver::{localize_batch, LocalizeContext, SolverConfig};
use crate::synth::Dataset;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("need at least 2 poses to measure loop drift, got {0}")]
    TooFewPoses(usize),
    #[error(transparent)]
    Map(#[from] crate::mapcloud::MapError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-query localization outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub query_id: u32,
    pub trans_err: f64,
    pub rot_err: f64,
    pub converged: bool,
}

/// Thresholds evaluated by [`compute_report`]: the headline recall gates
/// plus the dense curve grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportThresholds {
    /// (translation m, rotation deg) pairs reported as `recall_at`.
    pub recall_at: Vec<(f64, f64)>,
    /// Curve grid: every translation threshold crossed with every rotation
    /// threshold.
    pub curve_trans_m: Vec<f64>,
    pub curve_rot_deg: Vec<f64>,
}

impl Default for ReportThresholds {
    fn default() -> Self {
        Self {
            recall_at: vec![(0.05, 2.0)],
            curve_trans_m: vec![0.005, 0.01, 0.02, 0.03, 0.05, 0.10, 0.20],
            curve_rot_deg: vec![0.25, 0.5, 1.0, 2.0, 5.0],
        }
    }
}

/// Aggregate localization metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Lower median over all records, converged or not.
    pub median_trans_m: f64,
    pub median_rot_deg: f64,
    /// Recall percentage per requested (trans, rot) threshold pair.
    pub recall_at: Vec<((f64, f64), f64)>,
    /// Recall over the full curve grid.
    pub curve: Vec<((f64, f64), f64)>,
    pub n_queries: usize,
}

/// Lower median: element at index (n-1)/2 of the sorted values.
fn lower_median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("comparable metric values"));
    values[(values.len() - 1) / 2]
}

/// Computes medians and recalls. Non-converged records count as failures
/// at every threshold (their errors still enter the medians).
pub fn compute_report(
    records: &[ErrorRecord],
    thresholds: &ReportThresholds,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let n = records.len();
    let recall = |t: f64, r: f64| {
        let hits = records
            .iter()
            .filter(|rec| rec.converged && rec.trans_err <= t && rec.rot_err <= r)
            .count();
        100.0 * hits as f64 / n as f64
    };
    let mut trans: Vec<f64> = records.iter().map(|r| r.trans_err).collect();
    let mut rot: Vec<f64> = records.iter().map(|r| r.rot_err).collect();
    let recall_at = thresholds
        .recall_at
        .iter()
        .map(|&(t, r)| ((t, r), recall(t, r)))
        .collect();
    let mut curve = Vec::new();
    for &t in &thresholds.curve_trans_m {
        for &r in &thresholds.curve_rot_deg {
            curve.push(((t, r), recall(t, r)));
        }
    }
    Ok(EvalReport {
        median_trans_m: lower_median(&mut trans),
        median_rot_deg: lower_median(&mut rot),
        recall_at,
        curve,
        n_queries: n,
    })
}

/// Loop-closure drift: how far the trajectory's endpoint is from its start
/// compared against the physically measured gap, as an absolute error and
/// a fraction of the path length.
pub fn loop_drift(
    traj: &[TimedPose],
    path_length: Option<f64>,
    measured_gap: f64,
) -> Result<(f64, f64), EvalError> {
    if traj.len() < 2 {
        return Err(EvalError::TooFewPoses(traj.len()));
    }
    let length = match path_length {
        Some(l) => {
            assert!(l > 0.0, "path length must be positive");
            l
        }
        None => traj
            .windows(2)
            .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
            .sum(),
    };
    let endpoint_gap =
        (traj[traj.len() - 1].pose.translation - traj[0].pose.translation).norm();
    let abs_err = (endpoint_gap - measured_gap).abs();
    Ok((abs_err, abs_err / length))
}

/// Which 3D structure backs the localization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapVariant {
    /// Voxel-downsampled accumulated map with co-visibility union.
    IndexedMap,
    /// Per-image point sets straight from the temporally nearest scans.
    RawScans,
}

impl std::str::FromStr for MapVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "indexed_map" => Ok(MapVariant::IndexedMap),
            "raw_scans" => Ok(MapVariant::RawScans),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

impl std::fmt::Display for MapVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapVariant::IndexedMap => "indexed_map",
            MapVariant::RawScans => "raw_scans",
        })
    }
}

/// Shared pipeline configuration for ablation runs and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub map: MapBuildParams,
    pub descriptor: DescriptorKind,
    pub pyramid: PyramidParams,
    pub solver: SolverConfig,
    pub thresholds: ReportThresholds,
    /// Body-from-lidar extrinsic applied when assembling scans.
    pub extrinsic: Pose,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            map: MapBuildParams::default(),
            descriptor: DescriptorKind::Tiny,
            pyramid: PyramidParams::default(),
            solver: SolverConfig::default(),
            thresholds: ReportThresholds::default(),
            extrinsic: Pose::identity(),
        }
    }
}

/// Structure size statistics reported alongside each ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointStats {
    /// Points stored in the localization structure (after orphan drop).
    pub structure_points: usize,
    /// Total points across all input scans.
    pub total_scan_points: usize,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub variant: MapVariant,
    pub report: EvalReport,
    pub points: PointStats,
    pub records: Vec<ErrorRecord>,
}

/// Runs the full localization pipeline over the dataset's queries with the
/// chosen map variant. Identical retrieval and solver configuration either
/// way; only the 3D structure differs.
pub fn run_ablation(
    variant: MapVariant,
    dataset: &Dataset,
    cfg: &PipelineConfig,
) -> Result<AblationOutcome, EvalError> {
    let map = match variant {
        MapVariant::IndexedMap => mapcloud::build_indexed_map(
            &dataset.scans,
            &dataset.lidar_traj,
            &dataset.db_poses,
            &dataset.intrinsics,
            &cfg.extrinsic,
            &cfg.map,
        )?,
        MapVariant::RawScans => mapcloud::build_raw_scan_index(
            &dataset.scans,
            &dataset.lidar_traj,
            &dataset.db_poses,
            &dataset.intrinsics,
            &cfg.extrinsic,
            cfg.map.covis_max_range,
        )?,
    };
    let db = RetrievalDatabase::build(&dataset.db_images, &dataset.db_poses, cfg.descriptor)?;
    let ctx = LocalizeContext {
        db: &db,
        map: &map,
        intrinsics: &dataset.intrinsics,
        db_images: &dataset.db_images,
        pyramid: cfg.pyramid,
        solver: cfg.solver,
    };
    let results = localize_batch(&dataset.query_images, &ctx);
    let records: Vec<ErrorRecord> = results
        .iter()
        .zip(&dataset.query_gt)
        .enumerate()
        .map(|(i, (result, gt))| match result {
            Ok(r) => {
                let (trans_err, rot_err) = pose_error(&r.pose, &gt.pose);
                ErrorRecord {
                    query_id: i as u32,
                    trans_err,
                    rot_err,
                    converged: r.converged,
                }
            }
            Err(_) => ErrorRecord {
                query_id: i as u32,
                trans_err: f64::INFINITY,
                rot_err: f64::INFINITY,
                converged: false,
            },
        })
        .collect();
    let report = compute_report(&records, &cfg.thresholds)?;
    Ok(AblationOutcome {
        variant,
        report,
        points: PointStats {
            structure_points: map.point_count(),
            total_scan_points: dataset.scans.iter().map(|s| s.points.len()).sum(),
        },
        records,
    })
}

/// `key value` report text, one metric per line.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("n_queries {}\n", report.n_queries));
    out.push_str(&format!("median_trans_m {:.6}\n", report.median_trans_m));
    out.push_str(&format!("median_rot_deg {:.6}\n", report.median_rot_deg));
    for ((t, r), pct) in &report.recall_at {
        out.push_str(&format!("recall_at {t} {r} {pct:.3}\n"));
    }
    out
}

/// Threshold-curve CSV: `t_trans_m,t_rot_deg,recall_pct`.
pub fn render_curve_csv(report: &EvalReport) -> String {
    let mut out = String::from("t_trans_m,t_rot_deg,recall_pct\n");
    for ((t, r), pct) in &report.curve {
        out.push_str(&format!("{t},{r},{pct:.3}\n"));
    }
    out
}

/// Self-contained SVG plot of the threshold curves: recall vs. translation
/// threshold, one polyline per rotation threshold.
pub fn render_curve_svg(report: &EvalReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const ML: f64 = 60.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 30.0;
    const MB: f64 = 50.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut trans: Vec<f64> = report.curve.iter().map(|((t, _), _)| *t).collect();
    trans.sort_by(|a, b| a.partial_cmp(b).unwrap());
    trans.dedup();
    let mut rots: Vec<f64> = report.curve.iter().map(|((_, r), _)| *r).collect();
    rots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    rots.dedup();
    let (t_min, t_max) = (trans[0], trans[trans.len() - 1]);

    let x = |t: f64| {
        if t_max > t_min {
            ML + (W - ML - MR) * (t - t_min) / (t_max - t_min)
        } else {
            ML
        }
    };
    let y = |pct: f64| H - MB - (H - MT - MB) * pct / 100.0;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for pct in [0.0, 25.0, 50.0, 75.0, 100.0] {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{pct:.0}%</text>\n",
            ML - 6.0,
            y(pct) + 4.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"#dddddd\"/>\n",
            y(pct),
            W - MR
        ));
    }
    for &t in &trans {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{:.3}</text>\n",
            x(t),
            H - MB + 16.0,
            t
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">translation threshold (m)</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">recall (%)</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    // one polyline per rotation threshold
    for (i, &r) in rots.iter().enumerate() {
        let color = palette[i % palette.len()];
        let mut points = String::new();
        for &t in &trans {
            if let Some((_, pct)) = report
                .curve
                .iter()
                .find(|((ct, cr), _)| *ct == t && *cr == r)
            {
                points.push_str(&format!("{:.1},{:.1} ", x(t), y(*pct)));
            }
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.trim_end()
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">rot &#8804; {r}&#176;</text>\n",
            W - MR - 110.0,
            MT + 16.0 * (i as f64 + 1.0)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
