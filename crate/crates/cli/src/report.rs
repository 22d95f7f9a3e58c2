//! Versioned JSON reports and the CSV mirror of ablation tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pgm_core::guidance::{ArmReport, Diagnostics};
use pgm_core::motion::MetricReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const EVAL_SCHEMA: &str = "pgm-eval/1";
pub const CAPTURE_SCHEMA: &str = "pgm-capture/1";
pub const ABLATION_SCHEMA: &str = "pgm-ablation/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema: String,
    pub provenance: BTreeMap<String, String>,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureReport {
    pub schema: String,
    pub provenance: BTreeMap<String, String>,
    pub arm: String,
    pub sequence: usize,
    pub beta: Vec<f64>,
    pub tracked: Option<TrackSummary>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSummary {
    pub success: bool,
    pub frames_succeeded: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationTable {
    pub schema: String,
    pub provenance: BTreeMap<String, String>,
    pub rows: Vec<ArmReport>,
    pub checks: Vec<DirectionalCheck>,
    /// Published full-scale numbers for the same arms, for side-by-side reading.
    pub published: Vec<PublishedPoint>,
}

/// One directional comparison between arms; `passed` is `None` when an arm
/// it needs was not run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionalCheck {
    pub name: String,
    pub passed: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedPoint {
    pub arm: String,
    pub pa_mpjpe: Option<f64>,
    pub e_s: Option<f64>,
    pub success_rate: Option<f64>,
}

const PUBLISHED: [(&str, Option<f64>, Option<f64>, Option<f64>); 14] = [
    ("standard-T1", Some(180.3), None, None),
    ("latent-T1", Some(55.5), None, None),
    ("standard-T5", Some(68.3), None, None),
    ("latent-T5", Some(40.2), Some(16.1), None),
    ("standard-T10", Some(43.5), None, None),
    ("latent-T10", Some(40.1), None, None),
    ("standard-T50", Some(41.3), None, None),
    ("latent-T50", Some(39.8), None, None),
    ("posthoc-T0", None, None, Some(0.365)),
    ("guided-s1-T5", None, None, Some(0.667)),
    ("guided-s2-T5", None, None, Some(0.834)),
    ("guided-s3-T5", Some(41.3), Some(3.5), Some(0.903)),
    ("guided-s3-T5-nograd", Some(44.7), Some(5.9), Some(0.739)),
    ("latent-T0", None, None, None),
];

pub fn published_points(rows: &[ArmReport]) -> Vec<PublishedPoint> {
    rows.iter()
        .filter_map(|r| PUBLISHED.iter().find(|p| p.0 == r.arm))
        .filter(|p| p.1.is_some() || p.2.is_some() || p.3.is_some())
        .map(|&(arm, pa_mpjpe, e_s, success_rate)| PublishedPoint {
            arm: arm.into(),
            pa_mpjpe,
            e_s,
            success_rate,
        })
        .collect()
}

/// The directional comparisons between ablation arms.
pub fn directional_checks(rows: &[ArmReport]) -> Vec<DirectionalCheck> {
    let get = |arm: &str| rows.iter().find(|r| r.arm == arm).map(|r| &r.metrics);
    let succ = |arm: &str| get(arm).and_then(|m| m.success_rate);
    let pa = |arm: &str| get(arm).map(|m| m.pa_mpjpe);
    let es = |arm: &str| get(arm).map(|m| m.e_s);
    let mut out = Vec::new();
    let mut push = |name: &str, v: Option<(bool, String)>| {
        out.push(DirectionalCheck {
            name: name.into(),
            passed: v.as_ref().map(|x| x.0),
            detail: v.map_or_else(|| "arm missing".into(), |x| x.1),
        })
    };
    push(
        "latent init at 1 step at most half the standard-init PA-MPJPE",
        pa("latent-T1")
            .zip(pa("standard-T1"))
            .map(|(l, s)| (l <= 0.5 * s, format!("latent {l:.2} vs standard {s:.2} mm"))),
    );
    for steps in [10, 50] {
        push(
            &format!("init gap below 25% relative at {steps} steps"),
            pa(&format!("latent-T{steps}"))
                .zip(pa(&format!("standard-T{steps}")))
                .map(|(l, s)| {
                    let gap = (l - s).abs() / s.max(l);
                    (
                        gap < 0.25,
                        format!(
                            "latent {l:.2} vs standard {s:.2} mm, gap {:.1}%",
                            100.0 * gap
                        ),
                    )
                }),
        );
    }
    push(
        "post-hoc tracking success at least 20 points below guided s3/T5",
        succ("posthoc-T0")
            .zip(succ("guided-s3-T5"))
            .map(|(p, g)| (p <= g - 0.20, format!("post-hoc {p:.3} vs guided {g:.3}"))),
    );
    push(
        "guided s3/T5 e_s below the unguided T5 arm",
        es("guided-s3-T5")
            .zip(es("latent-T5"))
            .map(|(g, n)| (g < n, format!("guided {g:.3} vs unguided {n:.3} mm/frame"))),
    );
    let by_s: Option<Vec<f64>> = (1..=3).map(|s| succ(&format!("guided-s{s}-T5"))).collect();
    push(
        "success non-decreasing in s over 1, 2, 3 at T5",
        by_s.map(|v| (v.windows(2).all(|w| w[1] >= w[0]), format!("{v:?}"))),
    );
    push(
        "zeroed gradient channels cost at least 10 points of success",
        succ("guided-s3-T5-nograd")
            .zip(succ("guided-s3-T5"))
            .map(|(n, g)| {
                (
                    n <= g - 0.10,
                    format!("no gradient {n:.3} vs gradient {g:.3}"),
                )
            }),
    );
    push(
        "zeroed gradient channels worsen PA-MPJPE by at least 5%",
        pa("guided-s3-T5-nograd")
            .zip(pa("guided-s3-T5"))
            .map(|(n, g)| {
                (
                    n >= 1.05 * g,
                    format!("no gradient {n:.2} vs gradient {g:.2} mm"),
                )
            }),
    );
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Parse a report, rejecting any schema other than `expected`.
pub fn parse_versioned<T: DeserializeOwned>(text: &str, expected: &str) -> CliResult<T> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(CliError::data)?;
    match v.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == expected => serde_json::from_value(v).map_err(CliError::data),
        Some(s) => Err(CliError::Data(format!(
            "unsupported report schema '{s}', expected '{expected}'"
        ))),
        None => Err(CliError::Data("report has no schema field".into())),
    }
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path, expected: &str) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_versioned(&text, expected)
}

pub fn ablation_csv(table: &AblationTable) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let hash = table
        .provenance
        .get("config_hash")
        .cloned()
        .unwrap_or_default();
    let seed = table.provenance.get("seed").cloned().unwrap_or_default();
    w.write_record([
        "arm",
        "sequences",
        "mpjpe",
        "pa_mpjpe",
        "pck",
        "e_s",
        "sigma_s",
        "e_fz",
        "success_rate",
        "fallbacks",
        "config_hash",
        "seed",
    ])
    .map_err(CliError::runtime)?;
    for r in &table.rows {
        let m = &r.metrics;
        let f = |v: f64| format!("{v}");
        w.write_record([
            r.arm.clone(),
            r.sequences.to_string(),
            f(m.mpjpe),
            f(m.pa_mpjpe),
            f(m.pck),
            f(m.e_s),
            f(m.sigma_s),
            f(m.e_fz),
            m.success_rate.map(f).unwrap_or_default(),
            r.fallbacks.to_string(),
            hash.clone(),
            seed.clone(),
        ])
        .map_err(CliError::runtime)?;
    }
    String::from_utf8(w.into_inner().map_err(CliError::runtime)?).map_err(CliError::runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: &str, pa: f64, e_s: f64, success: f64) -> ArmReport {
        ArmReport {
            arm: arm.into(),
            sequences: 20,
            metrics: MetricReport {
                mpjpe: pa * 2.0,
                pa_mpjpe: pa,
                pck: 0.9,
                e_s,
                sigma_s: 1.0,
                e_fz: 5.0,
                success_rate: Some(success),
            },
            fallbacks: 0,
        }
    }

    #[test]
    fn checks_follow_the_numbers() {
        let rows = vec![
            row("latent-T1", 50.0, 10.0, 1.0),
            row("standard-T1", 180.0, 10.0, 1.0),
            row("posthoc-T0", 40.0, 9.0, 0.4),
            row("guided-s1-T5", 40.0, 9.0, 0.7),
            row("guided-s2-T5", 40.0, 9.0, 0.8),
            row("guided-s3-T5", 40.0, 3.0, 0.9),
            row("guided-s3-T5-nograd", 41.0, 6.0, 0.75),
            row("latent-T5", 40.0, 16.0, 0.8),
        ];
        let checks = directional_checks(&rows);
        let by_name = |n: &str| {
            checks
                .iter()
                .find(|c| c.name.starts_with(n))
                .unwrap()
                .passed
        };
        assert_eq!(by_name("latent init at 1 step"), Some(true));
        assert_eq!(by_name("init gap below 25% relative at 10"), None);
        assert_eq!(by_name("post-hoc"), Some(true));
        assert_eq!(by_name("guided s3/T5 e_s"), Some(true));
        assert_eq!(by_name("success non-decreasing"), Some(true));
        assert_eq!(by_name("zeroed gradient channels cost"), Some(true));
        assert_eq!(by_name("zeroed gradient channels worsen"), Some(false));
        assert_eq!(published_points(&rows).len(), 8);
    }

    #[test]
    fn unknown_schema_is_rejected() {
        let report = EvalReport {
            schema: EVAL_SCHEMA.into(),
            provenance: BTreeMap::new(),
            metrics: row("x", 1.0, 1.0, 1.0).metrics,
        };
        let text = serde_json::to_string(&report).unwrap();
        assert_eq!(
            parse_versioned::<EvalReport>(&text, EVAL_SCHEMA).unwrap(),
            report
        );
        let bumped = text.replace(EVAL_SCHEMA, "pgm-eval/9");
        assert!(parse_versioned::<EvalReport>(&bumped, EVAL_SCHEMA).is_err());
        assert!(parse_versioned::<EvalReport>("{}", EVAL_SCHEMA).is_err());
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let table = AblationTable {
            schema: ABLATION_SCHEMA.into(),
            provenance: BTreeMap::from([
                ("config_hash".into(), "ab".into()),
                ("seed".into(), "3".into()),
            ]),
            rows: vec![
                row("latent-T0", 1.0, 2.0, 1.0),
                row("posthoc-T0", 1.5, 2.0, 0.5),
            ],
            checks: vec![],
            published: vec![],
        };
        let text = ablation_csv(&table).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("latent-T0,20,2,1,"));
        assert!(lines[2].ends_with(",ab,3"));
    }
}
