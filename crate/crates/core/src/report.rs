//! Tables: network summaries, receptive-field profiles and cost breakdowns,
//! rendered as aligned text, CSV, or JSON.
//!
//! The JSON form is an object `{"columns": [..], "rows": [[..], ..]}` where
//! every cell is a string formatted exactly as in the other two forms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{self, CostOptions, CostSummary};
use crate::error::{Error, Result};
use crate::ir::NetworkSpec;
use crate::rf::{self, NetworkProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Csv,
    Structured,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Format::Text),
            "csv" => Ok(Format::Csv),
            "structured" | "json" => Ok(Format::Structured),
            _ => Err(Error::InvalidArgument(format!("unknown format `{s}` (text, csv, structured)"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Text => "text",
            Format::Csv => "csv",
            Format::Structured => "structured",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.render_text(),
            Format::Csv => self.render_csv(),
            Format::Structured => {
                let mut s = serde_json::to_string_pretty(self).expect("table serializes");
                s.push('\n');
                s
            }
        }
    }

    fn render_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let mut l = parts.join("  ").trim_end().to_string();
            l.push('\n');
            l
        };
        let mut out = line(&self.columns);
        for row in &self.rows {
            out.push_str(&line(row));
        }
        out
    }

    fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub network: String,
    pub mflops: u64,
    pub params_m: f64,
    pub total_gain: f64,
    pub notes: String,
}

impl ReportRow {
    pub fn from_network(net: &NetworkSpec, alpha: f64, opts: CostOptions) -> Result<Self> {
        let c = cost::network_cost(net, opts)?;
        Ok(Self {
            network: net.name.clone(),
            mflops: c.mflops_rounded(),
            params_m: c.params_m(),
            total_gain: rf::total_gain(net, alpha)?,
            notes: String::new(),
        })
    }
}

pub const REPORT_COLUMNS: [&str; 5] = ["network", "mflops", "params_m", "total_gain", "notes"];

pub fn report_table(rows: &[ReportRow]) -> Table {
    let mut t = Table::new(&REPORT_COLUMNS);
    for r in rows {
        t.push(vec![
            r.network.clone(),
            r.mflops.to_string(),
            format!("{:.2}", r.params_m),
            format!("{:.2}", r.total_gain),
            r.notes.clone(),
        ]);
    }
    t
}

pub fn emit_table(rows: &[ReportRow], format: Format) -> String {
    report_table(rows).render(format)
}

pub const PROFILE_COLUMNS: [&str; 7] = ["stage", "layer", "kind", "rf_width", "rf_channels", "rf_volume", "gain"];

pub fn profile_table(profile: &NetworkProfile) -> Table {
    let mut t = Table::new(&PROFILE_COLUMNS);
    for r in &profile.rows {
        t.push(vec![
            r.record.stage.to_string(),
            r.record.layer.to_string(),
            r.label.clone(),
            r.state.width.to_string(),
            r.state.channel_scalar.to_string(),
            r.state.volume.to_string(),
            format!("{:.4}", r.record.gain),
        ]);
    }
    t
}

pub const COST_COLUMNS: [&str; 5] = ["stage", "layer", "kind", "macs", "params"];

pub fn cost_table(summary: &CostSummary) -> Table {
    let mut t = Table::new(&COST_COLUMNS);
    for r in &summary.breakdown {
        t.push(vec![
            r.stage.map_or_else(|| "head".to_string(), |s| s.to_string()),
            r.layer.to_string(),
            r.label.clone(),
            r.macs.to_string(),
            r.params.to_string(),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceEntry {
    pub dataset: String,
    pub network: String,
    #[serde(default)]
    pub preset: Option<String>,
    pub mflops: u64,
    pub params_m: f64,
    pub accuracy: f64,
    #[serde(default)]
    pub total_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceValues {
    pub label: String,
    pub entries: Vec<ReferenceEntry>,
}

impl ReferenceValues {
    pub fn for_preset(&self, preset: &str) -> Option<&ReferenceEntry> {
        self.entries.iter().find(|e| e.preset.as_deref() == Some(preset))
    }
}

pub fn reference_values() -> ReferenceValues {
    serde_yaml::from_str(include_str!("../reference/published.yaml")).expect("bundled reference file parses")
}

/// Annotation for a row built from `preset`, if reference values exist.
pub fn reference_note(preset: &str) -> Option<String> {
    let refs = reference_values();
    refs.for_preset(preset).map(|e| {
        format!(
            "{}: {} MFLOPs, {:.2}M params, acc {:.2}%",
            refs.label, e.mflops, e.params_m, e.accuracy
        )
    })
}
