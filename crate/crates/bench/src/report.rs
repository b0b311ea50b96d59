//! Aggregation over raw CSVs. Pure: the same files always give the same
//! table and JSON, byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runner::{GatewayRow, ResultRow};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no raw results in {0}")]
    MissingData(PathBuf),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub column: String,
    pub aut: u8,
    pub topic_size: usize,
    pub qos: u8,
    pub repetitions_ok: u32,
    pub repetitions_failed: u32,
    pub bridges: usize,
    pub bridge_topic_size: usize,
    /// Means over successful repetitions; `None` when there were none.
    pub latency_ms: Option<f64>,
    pub published: Option<f64>,
    pub received_unique: Option<f64>,
    pub received_source: Option<f64>,
    pub received_dest: Option<f64>,
    pub lost_e2e: Option<f64>,
    pub lost_source: Option<f64>,
    pub duplicates: Option<f64>,
    pub payload_bytes: Option<f64>,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayLoss {
    pub cell: String,
    pub gateway: String,
    pub loss_per_1000: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<CellSummary>,
    pub gateway_loss: Vec<GatewayLoss>,
    /// Cells where mean latency falls as QoS rises within one AUT column group.
    pub flags: Vec<String>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

type CellKey = (u8, usize, u8);

pub fn report(dir: &Path) -> Result<Report, ReportError> {
    let rows: Vec<ResultRow> = read_rows(&dir.join("results.csv"))?;
    if rows.is_empty() {
        return Err(ReportError::MissingData(dir.to_owned()));
    }
    let gw_rows: Vec<GatewayRow> = read_rows(&dir.join("gateways.csv"))?;

    let mut by_cell: BTreeMap<CellKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        by_cell.entry((r.aut, r.topic_size, r.qos)).or_default().push(r);
    }
    let mut cells = Vec::new();
    for ((aut, topic_size, qos), rs) in &by_cell {
        let ok: Vec<&&ResultRow> = rs.iter().filter(|r| r.status == "ok").collect();
        let col = |f: fn(&ResultRow) -> f64| mean(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        // latency is only averaged over runs that delivered something
        let lat: Vec<f64> = ok
            .iter()
            .filter(|r| r.latency_count > 0)
            .map(|r| r.latency_mean_ms)
            .collect();
        cells.push(CellSummary {
            cell: rs[0].cell.clone(),
            column: format!("AUT{aut}-{topic_size}B QoS{qos}"),
            aut: *aut,
            topic_size: *topic_size,
            qos: *qos,
            repetitions_ok: ok.len() as u32,
            repetitions_failed: (rs.len() - ok.len()) as u32,
            bridges: rs.iter().map(|r| r.bridges).max().unwrap_or(0),
            bridge_topic_size: rs.iter().map(|r| r.bridge_topic_size).max().unwrap_or(0),
            latency_ms: mean(&lat),
            published: col(|r| r.published as f64),
            received_unique: col(|r| r.received_unique as f64),
            received_source: col(|r| r.received_source as f64),
            received_dest: col(|r| r.received_dest as f64),
            lost_e2e: col(|r| r.lost_e2e as f64),
            lost_source: col(|r| r.lost_source as f64),
            duplicates: col(|r| r.duplicates as f64),
            payload_bytes: mean(
                &ok.iter()
                    .filter(|r| r.received_unique > 0)
                    .map(|r| r.mean_payload_bytes)
                    .collect::<Vec<_>>(),
            ),
            config_digest: rs[0].config_digest.clone(),
        });
    }

    let mut losses: BTreeMap<(CellKey, String), (String, Vec<f64>)> = BTreeMap::new();
    for g in gw_rows.iter().filter(|g| g.status == "ok") {
        losses
            .entry(((g.aut, g.topic_size, g.qos), g.gateway.clone()))
            .or_insert_with(|| (g.cell.clone(), Vec::new()))
            .1
            .push(g.loss_per_1000);
    }
    let gateway_loss = losses
        .into_iter()
        .map(|((_, gateway), (cell, v))| GatewayLoss {
            cell,
            gateway,
            loss_per_1000: mean(&v).unwrap_or(0.0),
        })
        .collect();

    let mut flags = Vec::new();
    for pair in cells.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if (a.aut, a.topic_size) != (b.aut, b.topic_size) {
            continue;
        }
        if let (Some(la), Some(lb)) = (a.latency_ms, b.latency_ms) {
            if lb < la {
                flags.push(format!(
                    "AUT{}-{}B: mean latency falls from QoS{} ({la:.1} ms) to QoS{} ({lb:.1} ms)",
                    a.aut, a.topic_size, a.qos, b.qos
                ));
            }
        }
    }
    Ok(Report {
        cells,
        gateway_loss,
        flags,
    })
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "n/a".into(),
    }
}

impl Report {
    pub fn cell(&self, id: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.cell == id)
    }

    /// Aligned text table: one column per configuration cell.
    pub fn render_table(&self) -> String {
        type Getter = fn(&CellSummary) -> String;
        let rows: [(&str, Getter); 11] = [
            ("Latency (ms)", |c| fmt_opt(c.latency_ms, 1)),
            ("Published messages (gateways)", |c| fmt_opt(c.published, 1)),
            ("Received messages (subscriber)", |c| fmt_opt(c.received_unique, 1)),
            ("Received messages (source brokers)", |c| fmt_opt(c.received_source, 1)),
            ("Received messages (dest. broker)", |c| fmt_opt(c.received_dest, 1)),
            ("Lost messages (end-to-end)", |c| fmt_opt(c.lost_e2e, 1)),
            ("Lost messages (source broker)", |c| fmt_opt(c.lost_source, 1)),
            ("Duplicated messages", |c| fmt_opt(c.duplicates, 1)),
            ("Payload (bytes)", |c| fmt_opt(c.payload_bytes, 0)),
            ("Bridges", |c| c.bridges.to_string()),
            ("Repetitions ok/failed", |c| {
                format!("{}/{}", c.repetitions_ok, c.repetitions_failed)
            }),
        ];
        let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let cols: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                std::iter::once(c.column.clone())
                    .chain(rows.iter().map(|r| (r.1)(c)))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = cols
            .iter()
            .map(|c| c.iter().map(String::len).max().unwrap_or(0))
            .collect();

        let mut out = String::new();
        let _ = write!(out, "{:label_w$}", "");
        for (c, w) in cols.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", c[0]);
        }
        out.push('\n');
        for (i, (label, _)) in rows.iter().enumerate() {
            let _ = write!(out, "{label:label_w$}");
            for (c, w) in cols.iter().zip(&widths) {
                let _ = write!(out, "  {:>w$}", c[i + 1]);
            }
            out.push('\n');
        }

        if !self.gateway_loss.is_empty() {
            out.push_str("\nLoss per 1000 published, by gateway\n");
            let gw_w = self.gateway_loss.iter().map(|g| g.gateway.len()).max().unwrap_or(0);
            for g in &self.gateway_loss {
                let _ = writeln!(out, "  {:14} {:gw_w$}  {:8.1}", g.cell, g.gateway, g.loss_per_1000);
            }
        }
        if !self.flags.is_empty() {
            out.push_str("\nFlags\n");
            for f in &self.flags {
                let _ = writeln!(out, "  {f}");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes table.txt and results.json.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        std::fs::write(dir.join("table.txt"), self.render_table())?;
        std::fs::write(dir.join("results.json"), self.to_json())?;
        Ok(())
    }
}
