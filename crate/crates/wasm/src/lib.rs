//! Browser entry points. Every function takes and returns JSON text; errors
//! come back as `{"error": "..."}`.

use appendchain::chain::{BlockParts, Rules};
use appendchain::crypto::DirectCheck;
use appendchain::scenario::{compare_consensus, Deployment, ScenarioConfig};
use appendchain::Blockchain;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest workload the page will run; the browser has one thread.
const MAX_TRANSACTIONS: u64 = 50_000;

fn config(text: &str) -> Result<ScenarioConfig, String> {
    let cfg: ScenarioConfig = if text.trim().is_empty() {
        ScenarioConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| format!("bad configuration: {e}"))?
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let total = cfg.total_devices() as u64 * cfg.tx_per_device;
    if total > MAX_TRANSACTIONS {
        return Err(format!("{total} transactions is too many for the browser (limit {MAX_TRANSACTIONS})"));
    }
    Ok(cfg)
}

fn respond(result: Result<Value, String>) -> String {
    result.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn run_value(text: &str) -> Result<Value, String> {
    let cfg = config(text)?;
    let mut d = Deployment::new(cfg).map_err(|e| e.to_string())?;
    d.execute().map_err(|e| e.to_string())?;
    serde_json::to_value(d.report()).map_err(|e| e.to_string())
}

/// Run one scenario in memory and return its report.
#[wasm_bindgen]
pub fn run(config_json: &str) -> String {
    respond(run_value(config_json))
}

/// Run the workload under both algorithms and return both reports with the
/// consensus ratio.
#[wasm_bindgen]
pub fn compare(config_json: &str) -> String {
    respond(
        config(config_json)
            .and_then(|cfg| compare_consensus(&cfg).map_err(|e| e.to_string()))
            .and_then(|c| serde_json::from_str(&c.to_json()).map_err(|e| e.to_string())),
    )
}

/// Fields [`tamper`] can modify.
pub const TAMPER_FIELDS: [&str; 6] = [
    "data",
    "produced_at",
    "access_level",
    "gateway_sig",
    "header_expires_at",
    "header_owner_key",
];

fn mutate(parts: &mut [BlockParts], field: &str) -> Result<String, String> {
    let (b, part) = parts
        .iter_mut()
        .enumerate()
        .rev()
        .find(|(_, p)| !p.ledger.is_empty())
        .ok_or("the chain has no transactions to tamper with")?;
    let block = b + 1;
    let owner_other = part.proof.votes.first().map(|v| v.voter);
    let tx = part.ledger.last_mut().expect("non-empty");
    let what = match field {
        "data" => {
            match tx.info.data.first_mut() {
                Some(x) => *x ^= 0x01,
                None => tx.info.data.push(0),
            }
            format!("flipped a bit of reading {} in block {block}", tx.index)
        }
        "produced_at" => {
            tx.info.produced_at -= 1;
            format!("moved reading {} in block {block} back by 1 ms", tx.index)
        }
        "access_level" => {
            tx.info.access_level += 1;
            format!("raised the access level of reading {} in block {block}", tx.index)
        }
        "gateway_sig" => {
            tx.gateway_sig.0[0] ^= 0x80;
            format!("flipped a bit of the gateway signature on reading {} in block {block}", tx.index)
        }
        "header_expires_at" => {
            part.header.expires_at += 60_000;
            format!("extended the expiry of block {block} by one minute")
        }
        "header_owner_key" => {
            part.header.owner_key = owner_other.ok_or("no vote to borrow a key from")?;
            format!("reassigned block {block} to another key")
        }
        other => return Err(format!("unknown field `{other}`, expected one of {TAMPER_FIELDS:?}")),
    };
    Ok(what)
}

fn tamper_value(text: &str, field: &str) -> Result<Value, String> {
    let cfg = config(text)?;
    let mut d = Deployment::new(cfg).map_err(|e| e.to_string())?;
    d.execute().map_err(|e| e.to_string())?;
    let chain = d.gateway(0).chain();
    let rules = Rules::new(&d.consensus, &DirectCheck);
    let before = chain.verify_chain(&rules);
    let mut parts = chain.to_parts();
    let change = mutate(&mut parts, field)?;
    let tampered = Blockchain::from_parts_unchecked(parts);
    let after = tampered.verify_chain(&rules);
    Ok(json!({
        "blocks": chain.len(),
        "transactions": chain.transaction_count(),
        "original_valid": before.is_ok(),
        "change": change,
        "detected": after.is_err(),
        "violation": after.err().map(|v| v.to_string()),
    }))
}

/// Run a scenario, alter one field of gateway 0's replica, and re-verify it.
#[wasm_bindgen]
pub fn tamper(config_json: &str, field: &str) -> String {
    respond(tamper_value(config_json, field))
}
