//! Long-format metrics CSV and the separate wall-clock timing file.

use std::fmt;
use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use perada_core::fl_runtime::{RoundTrace, Variant};
use perada_core::metrics_theory::{EvalReport, MeanStd};

pub const METRICS_HEADER: [&str; 6] = ["run_id", "variant", "round", "metric", "scope", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Client(usize),
    Mean,
    Std,
    GlobalModel,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Client(id) => write!(f, "client:{id}"),
            Scope::Mean => f.write_str("mean"),
            Scope::Std => f.write_str("std"),
            Scope::GlobalModel => f.write_str("global_model"),
        }
    }
}

/// Rows `(run_id, variant, round, metric, scope, value)`. Values use the
/// shortest round-trip float formatting, so equal numbers give equal bytes.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        inner.write_record(METRICS_HEADER)?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, run_id: &str, variant: &str, round: usize, metric: &str, scope: Scope, value: f64) -> Result<()> {
        self.inner.write_record([
            run_id,
            variant,
            &round.to_string(),
            metric,
            &scope.to_string(),
            &value.to_string(),
        ])?;
        Ok(())
    }

    fn mean_std(&mut self, run_id: &str, variant: &str, round: usize, metric: &str, ms: MeanStd) -> Result<()> {
        self.row(run_id, variant, round, metric, Scope::Mean, ms.mean)?;
        self.row(run_id, variant, round, metric, Scope::Std, ms.std)
    }

    pub fn trace_rows(&mut self, run_id: &str, variant: Variant, round: usize, trace: &RoundTrace) -> Result<()> {
        let v = variant.name();
        if !trace.personal_losses.is_empty() {
            self.row(run_id, v, round, "personal_train_loss", Scope::Mean, trace.mean_personal_loss())?;
        }
        if !trace.local_losses.is_empty() {
            self.row(run_id, v, round, "local_train_loss", Scope::Mean, trace.mean_local_loss())?;
        }
        if let (Some(first), Some(last)) = (trace.kd_losses.first(), trace.kd_losses.last()) {
            self.row(run_id, v, round, "kd_loss_first", Scope::GlobalModel, *first)?;
            self.row(run_id, v, round, "kd_loss_last", Scope::GlobalModel, *last)?;
        }
        if let (Some(first), Some(last)) = (trace.phi.first(), trace.phi.last()) {
            self.row(run_id, v, round, "phi_before_kd", Scope::GlobalModel, *first)?;
            self.row(run_id, v, round, "phi_after_kd", Scope::GlobalModel, *last)?;
        }
        if let Some(s) = trace.stationarity {
            self.row(run_id, v, round, "stationarity_global", Scope::Mean, s.global)?;
            self.row(run_id, v, round, "stationarity_personal", Scope::Mean, s.personal)?;
        }
        self.row(run_id, v, round, "communicated_params", Scope::GlobalModel, trace.communicated_params as f64)?;
        self.row(
            run_id,
            v,
            round,
            "trainable_params_per_client",
            Scope::Mean,
            trace.trainable_params_per_client as f64,
        )
    }

    pub fn eval_rows(&mut self, run_id: &str, variant: Variant, round: usize, report: &EvalReport, pd: f64) -> Result<()> {
        let v = variant.name();
        for c in &report.clients {
            self.row(run_id, v, round, "accuracy_local", Scope::Client(c.client), c.local)?;
        }
        self.mean_std(run_id, v, round, "accuracy_local", report.personalized_local)?;
        self.mean_std(run_id, v, round, "accuracy_global", report.personalized_global)?;
        self.row(run_id, v, round, "accuracy_local", Scope::GlobalModel, report.global_model_local.mean)?;
        self.row(run_id, v, round, "accuracy_global", Scope::GlobalModel, report.global_model_global)?;
        for o in &report.ood {
            let metric = format!("ood_accuracy_{}_s{}", o.kind.name(), o.severity);
            self.mean_std(run_id, v, round, &metric, o.personalized)?;
            self.row(run_id, v, round, &metric, Scope::GlobalModel, o.global_model)?;
        }
        self.row(run_id, v, round, "prediction_distance", Scope::Mean, pd)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// `(run_id, round, wall_time_secs)`; kept apart so metrics.csv stays
/// reproducible byte for byte.
pub struct TimingWriter {
    inner: csv::Writer<File>,
}

impl TimingWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        inner.write_record(["run_id", "round", "wall_time_secs"])?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, run_id: &str, round: usize, secs: f64) -> Result<()> {
        self.inner.write_record([run_id, &round.to_string(), &format!("{secs:.6}")])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads a metrics file back as typed rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    reader
        .deserialize()
        .map(|r| r.with_context(|| format!("parsing {}", path.display())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub variant: String,
    pub round: usize,
    pub metric: String,
    pub scope: String,
    pub value: f64,
}
