//! Per-round records and the C/L/S summary table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::MetricReport;
use crate::model::{Network, SplitPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Centralized,
    Local,
    Splitfed,
}

impl Regime {
    pub fn letter(self) -> char {
        match self {
            Regime::Centralized => 'C',
            Regime::Local => 'L',
            Regime::Splitfed => 'S',
        }
    }
}

/// One client's view of one round. For the monolithic baselines a "round"
/// is a block of `local_epochs` epochs and the byte counts are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub round: usize,
    pub client: usize,
    /// Mean training loss over the round's batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_iou: Option<f64>,
    /// Tensor payload bytes sent by the client this round.
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub clients: Vec<ClientRoundStats>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTotals {
    /// Tensor payload bytes, client to server.
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Whole frames including headers and metadata.
    pub frame_bytes_up: u64,
    pub frame_bytes_down: u64,
    pub messages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub regime: Regime,
    pub network: Network,
    /// Set for splitfed runs.
    pub plan: Option<SplitPlan>,
    /// Set for one client's local baseline.
    pub client: Option<usize>,
    pub seed: u64,
    pub rounds: Vec<RoundStats>,
    pub test: MetricReport,
    pub comm: CommTotals,
}

fn num(v: Option<f64>) -> serde_json::Value {
    v.filter(|x| x.is_finite()).map_or(serde_json::Value::Null, serde_json::Value::from)
}

impl RunHistory {
    /// Line-delimited records: one per (round, client), then one test line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            for c in &r.clients {
                let rec = serde_json::json!({
                    "regime": self.regime,
                    "round": c.round,
                    "client": self.client.unwrap_or(c.client),
                    "loss": num(Some(c.train_loss)),
                    "val_loss": num(c.val_loss),
                    "iou": num(c.val_iou),
                    "bytes_up": c.bytes_up,
                    "bytes_down": c.bytes_down,
                });
                writeln!(out, "{rec}").unwrap();
            }
        }
        let test = serde_json::json!({
            "regime": self.regime,
            "test_iou": num(Some(self.test.mean_iou)),
            "per_class": self.test.per_class.iter().map(|&v| num(Some(v))).collect::<Vec<_>>(),
            "samples": self.test.samples,
            "bytes_up": self.comm.bytes_up,
            "bytes_down": self.comm.bytes_down,
        });
        writeln!(out, "{test}").unwrap();
        out
    }

    /// Mean validation IoU across clients for each round.
    pub fn val_iou_curve(&self) -> Vec<Option<f64>> {
        self.rounds
            .iter()
            .map(|r| {
                let v: Vec<f64> = r.clients.iter().filter_map(|c| c.val_iou).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

/// One network's row of the C/L/S table; `local` is the mean over clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub network: Network,
    pub centralized: Option<f64>,
    pub local: Option<f64>,
    pub splitfed: Option<f64>,
}

impl SummaryRow {
    /// Builds a row from whichever histories are available.
    pub fn from_histories(network: Network, histories: &[RunHistory]) -> Self {
        let of = |r: Regime| histories.iter().filter(|h| h.network == network && h.regime == r).map(|h| h.test.mean_iou).collect::<Vec<_>>();
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Self {
            network,
            centralized: mean(of(Regime::Centralized)),
            local: mean(of(Regime::Local)),
            splitfed: mean(of(Regime::Splitfed)),
        }
    }
}

/// Aligned text table of test IoU per network and regime.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = format!("{:<16} {:>8} {:>8} {:>8}\n", "network", "C", "L", "S");
    for r in rows {
        writeln!(out, "{:<16} {:>8} {:>8} {:>8}", r.network.name(), cell(r.centralized), cell(r.local), cell(r.splitfed)).unwrap();
    }
    out
}
