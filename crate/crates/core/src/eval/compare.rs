//! Three-method comparison: train on `client_train`, calibrate on the
//! evaluation roles, measure on the test roles.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::csf::{train_csf, CsfParams};
use super::manifest::{DatasetManifest, Role};
use super::partition::{partition, ProtocolConfig, ProtocolPartition};
use super::rates::{compute_rates, Rates, TrialKind};
use crate::decision::{verify, FusionMode};
use crate::error::{Error, Result};
use crate::imaging::{FaceSample, GeometryConfig};
use crate::model::{calibrate, train, CalibrationOptions, ModelParams, ThresholdMode};

pub const REPORT_HEADER: &str = "method,config,far,frr,ter,verify_us,train_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CSF")]
    Csf,
    #[serde(rename = "2D2G")]
    Grey2D,
    #[serde(rename = "2D2GC")]
    Fused2D,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Csf, Method::Grey2D, Method::Fused2D];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Csf => "CSF",
            Method::Grey2D => "2D2G",
            Method::Fused2D => "2D2GC",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?} (expected CSF, 2D2G or 2D2GC)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonOptions {
    pub geometry: GeometryConfig,
    pub params: ModelParams,
    pub csf: CsfParams,
    pub weight_step: f64,
    pub threshold_mode: ThresholdMode,
    pub seed: u64,
    /// Measure latency and training time. Off gives byte-stable reports.
    pub timing: bool,
    pub timing_calls: usize,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            params: ModelParams::default(),
            csf: CsfParams::default(),
            weight_step: 0.05,
            threshold_mode: ThresholdMode::Global,
            seed: 0,
            timing: true,
            timing_calls: 1000,
        }
    }
}

/// Test-set outcome of one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub rates: Rates,
    /// Mean latency of one verification, microseconds.
    pub verify_us: Option<f64>,
    pub train_ms: Option<f64>,
    /// Fusion weight chosen on the evaluation set (2D methods).
    pub fusion_weight: Option<f64>,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: Method,
    pub config: ProtocolConfig,
    pub outcome: std::result::Result<MethodResult, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// Adds rows from another run; rows stay ordered by `(method, config)`.
    pub fn merge(&mut self, other: EvalReport) {
        let mut keyed: BTreeMap<(Method, ProtocolConfig), ReportRow> = self
            .rows
            .drain(..)
            .map(|r| ((r.method, r.config), r))
            .collect();
        for r in other.rows {
            keyed.insert((r.method, r.config), r);
        }
        self.rows = keyed.into_values().collect();
    }

    pub fn get(&self, method: Method, config: ProtocolConfig) -> Option<&MethodResult> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.config == config)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    /// One row per `(method, config)`; failed methods leave the numeric
    /// fields empty.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(m) => writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.method,
                    r.config,
                    m.rates.far,
                    m.rates.frr,
                    m.rates.ter,
                    fmt_opt(m.verify_us),
                    fmt_opt(m.train_ms)
                ),
                Err(_) => writeln!(out, "{},{},,,,,", r.method, r.config),
            }
            .unwrap();
        }
        out
    }

    /// Method rows against configuration column groups, rates in percent.
    pub fn to_text(&self) -> String {
        let configs: Vec<ProtocolConfig> = {
            let mut c: Vec<_> = self.rows.iter().map(|r| r.config).collect();
            c.sort();
            c.dedup();
            c
        };
        let methods: Vec<Method> = {
            let mut m: Vec<_> = self.rows.iter().map(|r| r.method).collect();
            m.sort();
            m.dedup();
            m
        };
        let mut out = String::new();
        write!(out, "{:<8}", "Method").unwrap();
        for c in &configs {
            write!(out, "| {:<26}", format!("Configuration {c}")).unwrap();
        }
        out.push('\n');
        write!(out, "{:<8}", "").unwrap();
        for _ in &configs {
            write!(out, "| {:>8}{:>8}{:>8}  ", "FAR", "FRR", "TER").unwrap();
        }
        out.push('\n');
        let mut notes = vec![];
        for m in &methods {
            write!(out, "{:<8}", m.as_str()).unwrap();
            for c in &configs {
                let row = self.rows.iter().find(|r| r.method == *m && r.config == *c);
                match row.map(|r| &r.outcome) {
                    Some(Ok(res)) => {
                        let r = res.rates;
                        write!(out, "| {:>8.2}{:>8.2}{:>8.2}  ", r.far, r.frr, r.ter).unwrap();
                        let mut extra = vec![];
                        if let Some(us) = res.verify_us {
                            extra.push(format!("verify {us:.1} us"));
                        }
                        if let Some(ms) = res.train_ms {
                            extra.push(format!("train {ms:.1} ms"));
                        }
                        if let Some(w) = res.fusion_weight {
                            extra.push(format!("grey weight {w}"));
                        }
                        extra.push(format!(
                            "{} genuine / {} impostor test claims",
                            res.genuine_trials, res.impostor_trials
                        ));
                        notes.push(format!("{m} config {c}: {}", extra.join(", ")));
                    }
                    Some(Err(e)) => {
                        write!(out, "| {:>24}  ", "failed").unwrap();
                        notes.push(format!("{m} config {c}: error: {e}"));
                    }
                    None => write!(out, "| {:>24}  ", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        if !notes.is_empty() {
            out.push('\n');
            for n in notes {
                out.push_str(&n);
                out.push('\n');
            }
        }
        out
    }
}

/// Faces of one protocol partition, loaded and aligned.
pub struct LoadedPartition {
    pub train: Vec<FaceSample>,
    pub client_eval: Vec<FaceSample>,
    pub client_test: Vec<FaceSample>,
    pub impostor_eval: Vec<FaceSample>,
    pub impostor_test: Vec<FaceSample>,
}

impl LoadedPartition {
    pub fn load(
        manifest: &DatasetManifest,
        part: &ProtocolPartition,
        geometry: &GeometryConfig,
    ) -> Result<Self> {
        let load = |role| manifest.load_samples(&part.rows(role), geometry);
        Ok(Self {
            train: load(Role::ClientTrain)?,
            client_eval: load(Role::ClientEval)?,
            client_test: load(Role::ClientTest)?,
            impostor_eval: load(Role::ImpostorEval)?,
            impostor_test: load(Role::ImpostorTest)?,
        })
    }
}

fn claims(samples: &[FaceSample]) -> Vec<(&str, &FaceSample)> {
    samples.iter().map(|s| (s.subject_id.as_str(), s)).collect()
}

/// Genuine and impostor test claims; impostors claim every client.
fn test_trials<'a>(
    data: &'a LoadedPartition,
    clients: &[&'a str],
) -> Vec<(&'a str, &'a FaceSample, TrialKind)> {
    let mut trials: Vec<_> = data
        .client_test
        .iter()
        .map(|s| (s.subject_id.as_str(), s, TrialKind::Genuine))
        .collect();
    for s in &data.impostor_test {
        for &c in clients {
            trials.push((c, s, TrialKind::Impostor));
        }
    }
    trials
}

fn mean_latency_us(calls: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<f64> {
    let warmup = (calls / 10).max(1);
    for i in 0..warmup {
        f(i)?;
    }
    let start = Instant::now();
    for i in 0..calls {
        f(i)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e6 / calls as f64)
}

fn run_method(
    method: Method,
    data: &LoadedPartition,
    opts: &ComparisonOptions,
) -> Result<MethodResult> {
    let started = Instant::now();
    let verdicts: Vec<(TrialKind, bool)>;
    let mut fusion_weight = None;
    let train_ms;
    let verify_us;
    match method {
        Method::Csf => {
            let mut model = train_csf(&data.train, &opts.csf)?;
            train_ms = started.elapsed().as_secs_f64() * 1e3;
            model.calibrate(
                &claims(&data.client_eval),
                &data.impostor_eval.iter().collect::<Vec<_>>(),
                opts.threshold_mode,
            )?;
            let clients: Vec<&str> = model.clients.keys().map(String::as_str).collect();
            let trials = test_trials(data, &clients);
            verdicts = trials
                .iter()
                .map(|&(c, p, kind)| Ok((kind, model.verify(c, p)?.0)))
                .collect::<Result<_>>()?;
            verify_us = if opts.timing {
                Some(mean_latency_us(opts.timing_calls, |i| {
                    let (c, p, _) = trials[i % trials.len()];
                    model.verify(c, p).map(|_| ())
                })?)
            } else {
                None
            };
        }
        Method::Grey2D | Method::Fused2D => {
            let mut model = train(&data.train, &opts.geometry, &opts.params, opts.seed)?;
            train_ms = started.elapsed().as_secs_f64() * 1e3;
            let cal = CalibrationOptions {
                mode: if method == Method::Fused2D {
                    FusionMode::Fused
                } else {
                    FusionMode::GreyOnly
                },
                threshold_mode: opts.threshold_mode,
                weight_step: opts.weight_step,
            };
            let summary = calibrate(
                &mut model,
                &claims(&data.client_eval),
                &data.impostor_eval.iter().collect::<Vec<_>>(),
                &cal,
            )?;
            fusion_weight = Some(summary.fusion_weight);
            let clients: Vec<&str> = model.clients().collect();
            let trials = test_trials(data, &clients);
            verdicts = trials
                .iter()
                .map(|&(c, p, kind)| Ok((kind, verify(c, p, &model, None)?.accept)))
                .collect::<Result<_>>()?;
            verify_us = if opts.timing {
                Some(mean_latency_us(opts.timing_calls, |i| {
                    let (c, p, _) = trials[i % trials.len()];
                    verify(c, p, &model, None).map(|_| ())
                })?)
            } else {
                None
            };
        }
    }
    let genuine_trials = verdicts
        .iter()
        .filter(|v| v.0 == TrialKind::Genuine)
        .count();
    Ok(MethodResult {
        rates: compute_rates(&verdicts)?,
        verify_us,
        train_ms: opts.timing.then_some(train_ms),
        fusion_weight,
        genuine_trials,
        impostor_trials: verdicts.len() - genuine_trials,
    })
}

/// Runs each method on already loaded faces. A failing method yields an
/// error row; the others still run.
pub fn run_loaded(
    data: &LoadedPartition,
    config: ProtocolConfig,
    methods: &[Method],
    opts: &ComparisonOptions,
) -> EvalReport {
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let rows = methods
        .into_iter()
        .map(|method| {
            let outcome = run_method(method, data, opts).map_err(|e| {
                log::error!("{method} (config {config}) failed: {e}");
                e.to_string()
            });
            ReportRow {
                method,
                config,
                outcome,
            }
        })
        .collect();
    EvalReport { rows }
}

/// Partitions the manifest, loads every face and runs the comparison.
pub fn run_comparison(
    manifest: &DatasetManifest,
    config: ProtocolConfig,
    methods: &[Method],
    opts: &ComparisonOptions,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let part = partition(manifest, config)?;
    log::info!("partition: {}", part.summary());
    let data = LoadedPartition::load(manifest, &part, &opts.geometry)?;
    Ok(run_loaded(&data, config, methods, opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(far: f64, frr: f64) -> MethodResult {
        MethodResult {
            rates: Rates {
                far,
                frr,
                ter: far + frr,
            },
            verify_us: None,
            train_ms: None,
            fusion_weight: None,
            genuine_trials: 4,
            impostor_trials: 8,
        }
    }

    #[test]
    fn csv_layout() {
        let report = EvalReport {
            rows: vec![
                ReportRow {
                    method: Method::Csf,
                    config: ProtocolConfig::I,
                    outcome: Ok(result(2.5, 25.0)),
                },
                ReportRow {
                    method: Method::Fused2D,
                    config: ProtocolConfig::I,
                    outcome: Err("boom".into()),
                },
            ],
        };
        assert_eq!(
            report.to_csv(),
            "method,config,far,frr,ter,verify_us,train_ms\nCSF,I,2.5,25,27.5,,\n2D2GC,I,,,,,\n"
        );
        let text = report.to_text();
        assert!(text.contains("Configuration I"));
        assert!(text.contains("error: boom"));
    }

    #[test]
    fn merge_orders_by_method_then_config() {
        let row = |method, config| ReportRow {
            method,
            config,
            outcome: Ok(result(0.0, 0.0)),
        };
        let mut a = EvalReport {
            rows: vec![
                row(Method::Fused2D, ProtocolConfig::I),
                row(Method::Csf, ProtocolConfig::I),
            ],
        };
        a.merge(EvalReport {
            rows: vec![row(Method::Csf, ProtocolConfig::II)],
        });
        let keys: Vec<_> = a.rows.iter().map(|r| (r.method, r.config)).collect();
        assert_eq!(
            keys,
            vec![
                (Method::Csf, ProtocolConfig::I),
                (Method::Csf, ProtocolConfig::II),
                (Method::Fused2D, ProtocolConfig::I)
            ]
        );
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("LDA".parse::<Method>().is_err());
    }
}
