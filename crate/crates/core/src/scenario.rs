//! Benchmark scenarios: configuration, deployment on the simulator, and
//! end-of-run integrity checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::chain::{Rules, Violation};
use crate::consensus::{Algorithm, Behaviour, ConfigError, ConsensusConfig, DEFAULT_TIMEOUT_MS};
use crate::crypto::{Digest, DirectCheck, KeyPair, VerifyCache};
use crate::device::{Device, DeviceBehaviour, DeviceSettings};
use crate::gateway::{Gateway, GatewaySettings};
use crate::journal::JournalWriter;
use crate::metrics::{Metric, Samples};
use crate::net::sim::{Sim, SimError};
use crate::net::{keyed_draw, CostModel, Mode, NetConfig, NetConfigError, Node, NodeId, Strategy, Timer};
use crate::report::{Comparison, DeviceTotals, GatewayReport, Integrity, Report};
use crate::wire::{Frame, Message};

const DRAW_PHASE: u8 = 0x50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    pub consensus: Algorithm,
    pub gateways: usize,
    pub devices_per_gateway: usize,
    pub tx_per_device: u64,
    pub witness_minimum: usize,
    /// Device block lifetime.
    pub ttl_ms: u64,
    pub timeout_ms: u64,
    /// Time over which each device spreads its readings.
    pub duration_ms: u64,
    /// Devices connect evenly spread over this window.
    pub onboarding_ms: u64,
    pub seed: u64,
    /// Network model. Its own seed is replaced by `seed`.
    pub net: NetConfig,
    pub cost: CostModel,
    /// Behaviour overrides by global device index.
    pub device_behaviours: Vec<(usize, DeviceBehaviour)>,
    pub access_level: u64,
    /// Virtual-time budget; 0 picks one from the workload.
    pub limit_ms: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            label: "custom".into(),
            consensus: Algorithm::Witness,
            gateways: 10,
            devices_per_gateway: 10,
            tx_per_device: 100,
            witness_minimum: 2,
            ttl_ms: 24 * 3600 * 1000,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            duration_ms: 60_000,
            onboarding_ms: 30_000,
            seed: 1,
            net: NetConfig::default(),
            cost: CostModel::default(),
            device_behaviours: Vec::new(),
            access_level: 0,
            limit_ms: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn total_devices(&self) -> usize {
        self.gateways * self.devices_per_gateway
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.gateways == 0 || self.devices_per_gateway == 0 || self.tx_per_device == 0 {
            return Err(ScenarioError::Invalid("counts must be at least 1".into()));
        }
        if self.duration_ms == 0 {
            return Err(ScenarioError::Invalid("duration must be positive".into()));
        }
        if self.ttl_ms == 0 {
            return Err(ScenarioError::Invalid("ttl must be positive".into()));
        }
        if let Some((i, _)) = self
            .device_behaviours
            .iter()
            .find(|(i, _)| *i >= self.total_devices())
        {
            return Err(ScenarioError::Invalid(format!("device {i} does not exist")));
        }
        if let Some((n, _)) = self
            .net
            .byzantine
            .iter()
            .find(|(n, _)| *n as usize >= self.gateways)
        {
            return Err(ScenarioError::Invalid(format!(
                "byzantine node {n} is not a gateway"
            )));
        }
        self.net.validate()?;
        Ok(())
    }

    fn limit_us(&self) -> u64 {
        let ms = if self.limit_ms > 0 {
            self.limit_ms
        } else {
            4 * (self.duration_ms + self.onboarding_ms) + 600_000
        };
        ms * 1000
    }

    fn device_behaviour(&self, index: usize) -> DeviceBehaviour {
        self.device_behaviours
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, b)| *b)
            .unwrap_or_default()
    }
}

/// Reference grid rows: devices per gateway and transactions per device,
/// always with 10 gateways.
pub const PRESETS: [(char, usize, u64); 9] = [
    ('A', 10, 100),
    ('B', 10, 500),
    ('C', 10, 1000),
    ('D', 50, 100),
    ('E', 50, 500),
    ('F', 50, 1000),
    ('G', 100, 100),
    ('H', 100, 500),
    ('I', 100, 1000),
];

/// Configuration for preset `A`..`I`.
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    let c = name.trim().to_ascii_uppercase();
    let (label, dev, tx) = PRESETS.iter().find(|(l, _, _)| c.len() == 1 && c.starts_with(*l))?;
    Some(ScenarioConfig {
        label: label.to_string(),
        gateways: 10,
        devices_per_gateway: *dev,
        tx_per_device: *tx,
        ..ScenarioConfig::default()
    })
}

/// Desk-scale grid: gateways {4, 10} x devices {10, 50} x tx {100, 500}.
pub fn desk_grid() -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for gateways in [4, 10] {
        for dev in [10, 50] {
            for tx in [100, 500] {
                out.push(ScenarioConfig {
                    label: format!("g{gateways}-d{dev}-t{tx}"),
                    gateways,
                    devices_per_gateway: dev,
                    tx_per_device: tx,
                    ..ScenarioConfig::default()
                });
            }
        }
    }
    out
}

/// Short-lived blocks so every device rotates its key mid-run.
pub fn key_update_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        label: "key-update".into(),
        gateways: 4,
        devices_per_gateway: 5,
        tx_per_device: 40,
        duration_ms: 20_000,
        onboarding_ms: 2_000,
        ttl_ms: 8_000,
        seed,
        ..ScenarioConfig::default()
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Consensus(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetConfigError),
    #[error("simulation did not settle: {0}")]
    Sim(#[from] SimError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("scenario {label} FAILED: {reason}\n{dump}")]
    Failed {
        label: String,
        reason: String,
        dump: String,
        report: Box<Report>,
    },
}

fn sub_seed(seed: u64, what: &[u8], index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(what);
    h.update(index.to_be_bytes());
    h.finalize().into()
}

/// Key pair of gateway `index` for `seed`.
pub fn gateway_keys(seed: u64, index: usize) -> KeyPair {
    KeyPair::from_seed(sub_seed(seed, b"gateway", index as u64))
}

/// Seed of device `index` for `seed`.
pub fn device_seed(seed: u64, index: usize) -> [u8; 32] {
    sub_seed(seed, b"device", index as u64)
}

/// Gateways and devices wired onto a simulator.
pub struct Deployment {
    pub config: ScenarioConfig,
    pub consensus: Arc<ConsensusConfig>,
    pub sim: Sim,
    pub cache: Arc<VerifyCache>,
    devices: Vec<NodeId>,
    anti_entropy_rounds: u32,
}

impl Deployment {
    pub fn new(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        let settings = GatewaySettings {
            ttl_ms: config.ttl_ms,
            ..GatewaySettings::default()
        };
        Self::with_settings(config, settings)
    }

    pub fn with_settings(config: ScenarioConfig, settings: GatewaySettings) -> Result<Self, ScenarioError> {
        config.validate()?;
        let keys: Vec<KeyPair> = (0..config.gateways)
            .map(|i| gateway_keys(config.seed, i))
            .collect();
        let mut consensus = ConsensusConfig {
            algorithm: config.consensus,
            gateways: keys.iter().map(|k| k.public).collect(),
            witness_minimum: config.witness_minimum,
            leader_index: 0,
            timeout_ms: config.timeout_ms,
        };
        if consensus.algorithm == Algorithm::Pbft {
            consensus.witness_minimum = consensus.witness_minimum.max(1);
        }
        consensus.validate()?;
        let consensus = Arc::new(consensus);
        let mut net = config.net.clone();
        net.seed = config.seed;
        let mut sim = Sim::new(net.clone(), config.cost, config.gateways);
        let cache = Arc::new(VerifyCache::new());
        for (i, k) in keys.into_iter().enumerate() {
            let behaviour = match net.strategy_of(i as NodeId) {
                Some(Strategy::Equivocate) => Behaviour::Equivocate,
                Some(Strategy::MuteLeader) => Behaviour::MuteLeader,
                _ => Behaviour::Honest,
            };
            let gw = Gateway::new(
                i as NodeId,
                k,
                consensus.clone(),
                settings.clone(),
                cache.clone(),
                behaviour,
            );
            sim.add_node(Box::new(gw));
        }
        let interval_us = (config.duration_ms * 1000 / config.tx_per_device).max(1);
        let mut devices = Vec::with_capacity(config.total_devices());
        for d in 0..config.devices_per_gateway {
            for g in 0..config.gateways {
                let index = d * config.gateways + g;
                let phase = keyed_draw(config.seed, DRAW_PHASE, index as NodeId, 0, 0, 0) % interval_us;
                let settings = DeviceSettings {
                    seed: device_seed(config.seed, index),
                    tx_count: config.tx_per_device,
                    interval_us,
                    phase_us: phase,
                    access_level: config.access_level,
                    gps: None,
                };
                let dev = Device::new(g as NodeId, settings, config.device_behaviour(index))
                    .with_cache(cache.clone());
                devices.push(sim.add_node(Box::new(dev)));
            }
        }
        Ok(Self {
            config,
            consensus,
            sim,
            cache,
            devices,
            anti_entropy_rounds: 0,
        })
    }

    pub fn gateway_count(&self) -> usize {
        self.config.gateways
    }

    pub fn gateway(&self, i: usize) -> &Gateway {
        self.sim.node(i as NodeId).expect("gateway id")
    }

    pub fn gateway_mut(&mut self, i: usize) -> &mut Gateway {
        self.sim.node_mut(i as NodeId).expect("gateway id")
    }

    pub fn gateways(&self) -> impl Iterator<Item = &Gateway> + '_ {
        (0..self.gateway_count()).map(|i| self.gateway(i))
    }

    /// Device by global index.
    pub fn device(&self, index: usize) -> &Device {
        self.sim.node(self.devices[index]).expect("device id")
    }

    pub fn device_ids(&self) -> &[NodeId] {
        &self.devices
    }

    pub fn devices(&self) -> impl Iterator<Item = &Device> + '_ {
        self.devices.iter().map(|id| self.sim.node::<Device>(*id).expect("device id"))
    }

    pub fn is_honest(&self, gateway: usize) -> bool {
        self.sim.config().strategy_of(gateway as NodeId).is_none()
    }

    /// Journal gateway `i`'s chain changes. Attach before bootstrapping so
    /// the journal holds the whole chain.
    pub fn attach_journal(&mut self, i: usize, journal: JournalWriter) {
        self.gateway_mut(i).set_journal(journal);
    }

    pub fn flush_journals(&mut self) {
        for i in 0..self.gateway_count() {
            self.gateway_mut(i).flush_journal();
        }
    }

    /// Register an extra node, such as a probe.
    pub fn add_node(&mut self, node: Box<dyn Node>) -> NodeId {
        self.sim.add_node(node)
    }

    pub fn run(&mut self) -> Result<u64, ScenarioError> {
        Ok(self.sim.run_until_quiescent(self.config.limit_us())?)
    }

    /// Every gateway joins its own key, then the network settles.
    pub fn bootstrap(&mut self) -> Result<(), ScenarioError> {
        let now = self.sim.now_us();
        for i in 0..self.gateway_count() {
            self.sim.schedule_timer(i as NodeId, now, Timer::Bootstrap);
        }
        self.run()?;
        Ok(())
    }

    /// Schedule device connections spread over the onboarding window.
    pub fn start_devices(&mut self) {
        let now = self.sim.now_us();
        let n = self.devices.len() as u64;
        let window = self.config.onboarding_ms * 1000;
        for (j, id) in self.devices.clone().into_iter().enumerate() {
            let at = now + window * j as u64 / n.max(1);
            self.sim.schedule_timer(id, at, Timer::DeviceConnect);
        }
    }

    fn fingerprints(&self) -> Vec<Digest> {
        self.gateways().map(|g| g.chain().fingerprint()).collect()
    }

    fn identical(&self, fps: &[Digest]) -> bool {
        let honest: Vec<&Digest> = fps
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_honest(*i))
            .map(|(_, f)| f)
            .collect();
        honest.windows(2).all(|w| w[0] == w[1])
    }

    pub fn replicas_identical(&self) -> bool {
        self.identical(&self.fingerprints())
    }

    /// Full-chain sync between every pair of gateways, repeated while
    /// replicas differ, at most `rounds` times.
    pub fn anti_entropy(&mut self, rounds: u32) -> Result<(), ScenarioError> {
        let n = self.gateway_count() as NodeId;
        for _ in 0..rounds {
            if self.replicas_identical() {
                break;
            }
            self.anti_entropy_rounds += 1;
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        self.sim
                            .inject(a, b, Frame::from_message(Message::SyncRequest { from_index: 1 }));
                    }
                }
            }
            self.run()?;
        }
        Ok(())
    }

    /// Replica equality, and verification of each distinct honest replica
    /// against the shared signature cache. The cache only holds signatures
    /// that were verified or produced in this process.
    pub fn integrity(&self) -> Integrity {
        self.integrity_with(&self.fingerprints())
    }

    fn integrity_with(&self, fps: &[Digest]) -> Integrity {
        let mut verified: BTreeMap<[u8; 32], Option<String>> = BTreeMap::new();
        let mut verify_failures = Vec::new();
        for (i, fp) in fps.iter().enumerate().filter(|(i, _)| self.is_honest(*i)) {
            let result = verified.entry(fp.0).or_insert_with(|| {
                let rules = Rules::new(&self.consensus, &*self.cache);
                self.gateway(i)
                    .chain()
                    .verify_chain(&rules)
                    .err()
                    .map(|v| v.to_string())
            });
            if let Some(reason) = result {
                verify_failures.push(format!("gateway {i}: {reason}"));
            }
        }
        Integrity {
            replicas_identical: self.identical(fps),
            verify_failures,
            anti_entropy_rounds: self.anti_entropy_rounds,
        }
    }

    /// Verify gateway `i`'s replica with fresh signature checks only.
    pub fn verify_independently(&self, i: usize) -> Result<(), Violation> {
        let rules = Rules::new(&self.consensus, &DirectCheck);
        self.gateway(i).chain().verify_chain(&rules)
    }

    pub fn pooled_samples(&self) -> Samples {
        let mut all = Samples::default();
        for g in self.gateways() {
            all.merge(g.samples());
        }
        all
    }

    pub fn report(&self) -> Report {
        let fps = self.fingerprints();
        let integrity = self.integrity_with(&fps);
        let reference = (0..self.gateway_count())
            .find(|i| self.is_honest(*i))
            .unwrap_or(0);
        let chain = self.gateway(reference).chain();
        let gateway_blocks = chain
            .blocks()
            .iter()
            .filter(|b| self.consensus.is_gateway(&b.header().owner_key))
            .count() as u64;
        let samples = self.pooled_samples();
        let metrics = Metric::ALL
            .iter()
            .map(|m| (*m, samples.summary(*m)))
            .collect();
        let elapsed = self.sim.now_us().max(1);
        let per_gateway = (0..self.gateway_count())
            .map(|i| {
                let g = self.gateway(i);
                let stats = g.stats();
                GatewayReport {
                    id: i as u32,
                    honest: self.is_honest(i),
                    blocks: g.chain().len(),
                    transactions: g.chain().transaction_count(),
                    home_transactions: stats.transactions_home,
                    replicated_transactions: stats.transactions_replicated,
                    home_devices: g.home_devices().len(),
                    fingerprint: fps[i].to_hex(),
                    utilization: self.sim.busy_us(i as NodeId) as f64 / elapsed as f64,
                    rejections: stats
                        .rejections
                        .iter()
                        .map(|(r, n)| (r.to_string(), *n))
                        .collect(),
                    conflicts: stats.conflicts,
                    malformed: stats.malformed,
                    medians_ms: Metric::ALL
                        .iter()
                        .map(|m| (m.name().to_string(), g.samples().summary(*m).median_ms))
                        .collect(),
                }
            })
            .collect();
        let mut devices = DeviceTotals::default();
        for d in self.devices() {
            let s = d.stats();
            devices.sent += s.sent;
            devices.acked += s.acked;
            devices.rotations += s.rotations;
            devices.resent_after_rotation += s.resent_after_rotation;
            for (r, n) in &s.rejected {
                *devices.rejected.entry(r.to_string()).or_default() += n;
            }
        }
        Report {
            label: self.config.label.clone(),
            consensus: self.config.consensus,
            gateways: self.config.gateways,
            devices_per_gw: self.config.devices_per_gateway,
            tx_per_device: self.config.tx_per_device,
            seed: self.config.seed,
            total_blocks: chain.len(),
            gateway_blocks,
            device_blocks: chain.len() - gateway_blocks,
            key_update_blocks: devices.rotations,
            total_tx: chain.transaction_count(),
            virtual_elapsed_ms: self.sim.now_us() as f64 / 1000.0,
            metrics,
            integrity,
            net: self.sim.stats(),
            devices,
            per_gateway,
        }
    }

    /// Per-gateway summary for failure reports.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for g in self.gateways() {
            out.push_str(&format!(
                "gateway {}: blocks {}, tx {}, round {}, fingerprint {}\n",
                g.id(),
                g.chain().len(),
                g.chain().transaction_count(),
                g.round(),
                g.chain().fingerprint().to_hex()
            ));
        }
        let reference = self.gateway(0).chain();
        for g in self.gateways().skip(1) {
            let other = g.chain();
            let first = (1..=reference.len().max(other.len())).find(|k| {
                let a = reference.block(*k);
                let b = other.block(*k);
                match (a, b) {
                    (Some(a), Some(b)) => a.header_hash() != b.header_hash() || a.len() != b.len(),
                    _ => true,
                }
            });
            if let Some(k) = first {
                out.push_str(&format!("gateway {} first differs from gateway 0 at block {k}\n", g.id()));
            }
        }
        out
    }

    /// The report, or a failure carrying it plus a diagnostic dump when
    /// replicas diverge or fail verification.
    pub fn conclude(&self) -> Result<Report, ScenarioError> {
        let report = self.report();
        if report.integrity.ok() {
            return Ok(report);
        }
        let reason = if report.integrity.replicas_identical {
            format!("verification failed: {:?}", report.integrity.verify_failures)
        } else {
            "replicas diverged".to_string()
        };
        Err(ScenarioError::Failed {
            label: self.config.label.clone(),
            reason,
            dump: self.dump(),
            report: Box::new(report),
        })
    }

    /// Bootstrap, onboard and stream, settle, then reconcile.
    pub fn execute(&mut self) -> Result<(), ScenarioError> {
        self.bootstrap()?;
        self.start_devices();
        self.run()?;
        self.anti_entropy(3)?;
        Ok(())
    }
}

/// Run a scenario to completion and check integrity.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Report, ScenarioError> {
    match config.net.mode {
        Mode::InMemory => {
            let mut d = Deployment::new(config.clone())?;
            d.execute()?;
            d.conclude()
        }
        #[cfg(feature = "socket")]
        Mode::Socket => crate::net::socket::run_scenario(config),
        #[cfg(not(feature = "socket"))]
        Mode::Socket => Err(ScenarioError::Transport(
            "socket transport not compiled in".into(),
        )),
    }
}

/// Run the same workload under Witness and PBFT.
pub fn compare_consensus(base: &ScenarioConfig) -> Result<Comparison, ScenarioError> {
    let witness = run_scenario(&ScenarioConfig {
        consensus: Algorithm::Witness,
        ..base.clone()
    })?;
    let pbft = run_scenario(&ScenarioConfig {
        consensus: Algorithm::Pbft,
        ..base.clone()
    })?;
    Ok(Comparison { witness, pbft })
}
