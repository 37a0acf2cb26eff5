//! Scenario reports and their CSV, JSON and table renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consensus::Algorithm;
use crate::metrics::{Metric, Summary};
use crate::net::sim::NetStats;

/// Range of PBFT/Witness consensus-latency ratios in the reference
/// evaluation, used as context next to measured ratios.
pub const REFERENCE_RATIO_RANGE: (f64, f64) = (1.77, 2.02);

pub const CSV_HEADER: &str = "label,consensus,gateways,devices_per_gw,tx_per_device,total_blocks,total_tx,block_consensus_ms,add_block_leader_ms,update_block_ms,append_tx_ms,update_tx_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayReport {
    pub id: u32,
    pub honest: bool,
    pub blocks: u64,
    pub transactions: u64,
    pub home_transactions: u64,
    pub replicated_transactions: u64,
    pub home_devices: usize,
    pub fingerprint: String,
    /// Fraction of the run spent handling inputs.
    pub utilization: f64,
    pub rejections: BTreeMap<String, u64>,
    pub conflicts: u64,
    pub malformed: u64,
    pub medians_ms: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTotals {
    pub sent: u64,
    pub acked: u64,
    pub rotations: u64,
    pub resent_after_rotation: u64,
    pub rejected: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Integrity {
    pub replicas_identical: bool,
    /// Gateways whose replica failed verification, with the reason.
    pub verify_failures: Vec<String>,
    pub anti_entropy_rounds: u32,
}

impl Integrity {
    pub fn ok(&self) -> bool {
        self.replicas_identical && self.verify_failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub consensus: Algorithm,
    pub gateways: usize,
    pub devices_per_gw: usize,
    pub tx_per_device: u64,
    pub seed: u64,
    pub total_blocks: u64,
    pub gateway_blocks: u64,
    pub device_blocks: u64,
    /// Blocks added by key rotation, included in `device_blocks`.
    pub key_update_blocks: u64,
    pub total_tx: u64,
    pub virtual_elapsed_ms: f64,
    pub metrics: BTreeMap<Metric, Summary>,
    pub integrity: Integrity,
    pub net: NetStats,
    pub devices: DeviceTotals,
    pub per_gateway: Vec<GatewayReport>,
}

fn fmt_ms(v: Option<f64>) -> String {
    match v {
        Some(ms) => format!("{ms:.3}"),
        None => "n/a".into(),
    }
}

impl Report {
    pub fn median_ms(&self, metric: Metric) -> Option<f64> {
        self.metrics.get(&metric).and_then(|s| s.median_ms)
    }

    /// One CSV row matching [`CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let m = |metric| fmt_ms(self.median_ms(metric));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.consensus,
            self.gateways,
            self.devices_per_gw,
            self.tx_per_device,
            self.total_blocks,
            self.total_tx,
            m(Metric::BlockConsensus),
            m(Metric::AddBlockLeader),
            m(Metric::UpdateBlockchainBlock),
            m(Metric::AppendTransactionGw),
            m(Metric::UpdateBlockchainTrans),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} ({}, {} gateways x {} devices x {} tx, seed {})",
            self.label, self.consensus, self.gateways, self.devices_per_gw, self.tx_per_device, self.seed
        );
        let _ = writeln!(
            out,
            "  blocks {} ({} gateway, {} device, {} from key updates), transactions {}",
            self.total_blocks, self.gateway_blocks, self.device_blocks, self.key_update_blocks, self.total_tx
        );
        for m in Metric::ALL {
            let s = self.metrics.get(&m).copied().unwrap_or(Summary::of(&[]));
            let _ = writeln!(out, "  {:<24} {:>10} ms  ({} samples)", m.name(), s.to_string(), s.count);
        }
        let _ = writeln!(
            out,
            "  integrity: replicas {}, verification {}",
            if self.integrity.replicas_identical { "identical" } else { "DIVERGED" },
            if self.integrity.verify_failures.is_empty() { "passed" } else { "FAILED" },
        );
        out
    }
}

pub fn to_csv(reports: &[Report]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Witness and PBFT runs of the same workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub witness: Report,
    pub pbft: Report,
}

impl Comparison {
    /// PBFT over Witness median consensus latency.
    pub fn ratio(&self) -> Option<f64> {
        let w = self.witness.median_ms(Metric::BlockConsensus)?;
        let p = self.pbft.median_ms(Metric::BlockConsensus)?;
        (w > 0.0).then(|| p / w)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>12} {:>12}", "metric (median ms)", "witness", "pbft");
        for m in Metric::ALL {
            let _ = writeln!(
                out,
                "{:<24} {:>12} {:>12}",
                m.name(),
                fmt_ms(self.witness.median_ms(m)),
                fmt_ms(self.pbft.median_ms(m))
            );
        }
        let (lo, hi) = REFERENCE_RATIO_RANGE;
        let _ = writeln!(
            out,
            "consensus ratio pbft/witness: {} (reference range {lo:.2}-{hi:.2})",
            self.ratio().map_or("n/a".into(), |r| format!("{r:.2}"))
        );
        let _ = writeln!(
            out,
            "transactions: witness {}, pbft {}",
            self.witness.total_tx, self.pbft.total_tx
        );
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            witness: &'a Report,
            pbft: &'a Report,
            ratio: Option<f64>,
            reference_ratio_range: (f64, f64),
        }
        serde_json::to_string_pretty(&View {
            witness: &self.witness,
            pbft: &self.pbft,
            ratio: self.ratio(),
            reference_ratio_range: REFERENCE_RATIO_RANGE,
        })
        .expect("comparison serializes")
    }
}
