//! Simulated IoT devices and a passive probe node.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::chain::{DeviceInfo, Gps, Rejection, Timestamp};
use std::sync::Arc;

use crate::crypto::{KeyPair, PublicKey, VerifyCache};
use crate::net::{Env, Node, NodeId, Timer};
use crate::wire::{Frame, Message, Status};

/// Size of the opaque reading payload.
pub const PAYLOAD_LEN: usize = 64;

/// Failed onboarding attempts before a device gives up.
pub const MAX_CONNECT_ATTEMPTS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceBehaviour {
    #[default]
    Honest,
    /// Answer the first `times` key update requests of each rotation with
    /// the current key.
    ReturnOldKey { times: u32 },
    /// Ignore the first `times` key update requests of each rotation.
    Silent { times: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSettings {
    /// Seed for keys and payloads.
    pub seed: [u8; 32],
    /// Readings to deliver.
    pub tx_count: u64,
    /// Gap between readings.
    pub interval_us: u64,
    /// Readings fall on the clock grid `phase_us + k * interval_us`,
    /// starting with the first grid point after onboarding.
    pub phase_us: u64,
    pub access_level: u64,
    pub gps: Option<Gps>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub sent: u64,
    pub acked: u64,
    pub rejected: BTreeMap<Rejection, u64>,
    /// Readings re-sent under a new key after an expiry.
    pub resent_after_rotation: u64,
    pub rotations: u64,
    pub invalid_new_key: u64,
    pub connect_failures: u64,
    pub ignored_key_requests: u64,
}

/// Key pair for `generation` derived from a device seed.
pub fn derive_keys(seed: &[u8; 32], generation: u64) -> KeyPair {
    let mut h = Sha256::new();
    h.update(seed);
    h.update(generation.to_be_bytes());
    KeyPair::from_seed(h.finalize().into())
}

/// Deterministic payload of reading `seq`.
pub fn payload(seed: &[u8; 32], seq: u64) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(seed);
    h.update(b"payload");
    h.update(seq.to_be_bytes());
    let mut rng = ChaCha20Rng::from_seed(h.finalize().into());
    let mut out = vec![0; PAYLOAD_LEN];
    rng.fill_bytes(&mut out);
    out
}

pub struct Device {
    home: NodeId,
    settings: DeviceSettings,
    behaviour: DeviceBehaviour,
    generation: u64,
    keys: KeyPair,
    previous_keys: Vec<PublicKey>,
    candidate: Option<KeyPair>,
    key_requests: u32,
    connected: bool,
    next_seq: u64,
    last_produced: Timestamp,
    in_flight: BTreeMap<Timestamp, u64>,
    retry: VecDeque<u64>,
    stats: DeviceStats,
    cache: Option<Arc<VerifyCache>>,
}

impl Device {
    pub fn new(home: NodeId, settings: DeviceSettings, behaviour: DeviceBehaviour) -> Self {
        let keys = derive_keys(&settings.seed, 0);
        Self {
            home,
            settings,
            behaviour,
            generation: 0,
            keys,
            previous_keys: Vec::new(),
            candidate: None,
            key_requests: 0,
            connected: false,
            next_seq: 0,
            last_produced: 0,
            in_flight: BTreeMap::new(),
            retry: VecDeque::new(),
            stats: DeviceStats::default(),
            cache: None,
        }
    }

    /// Record every signature this device makes in `cache`, sparing the
    /// in-process gateways a second verification.
    pub fn with_cache(mut self, cache: Arc<VerifyCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn home(&self) -> NodeId {
        self.home
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public
    }

    /// Keys used before the current one, oldest first.
    pub fn previous_keys(&self) -> &[PublicKey] {
        &self.previous_keys
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn stats(&self) -> &DeviceStats {
        &self.stats
    }

    /// Every reading was produced and none is waiting for an answer.
    pub fn is_done(&self) -> bool {
        self.next_seq >= self.settings.tx_count && self.in_flight.is_empty() && self.retry.is_empty()
    }

    fn send(&self, env: &mut dyn Env, msg: Message) {
        env.send(self.home, Frame::from_message(msg));
    }

    fn produced_at(&mut self, env: &dyn Env) -> Timestamp {
        let t = env.now_ms().max(self.last_produced + 1);
        self.last_produced = t;
        t
    }

    /// Delay from `now` to the next reading slot strictly after it.
    fn until_next_slot(&self, now: u64) -> u64 {
        let interval = self.settings.interval_us.max(1);
        let phase = self.settings.phase_us % interval;
        let next = if now < phase {
            phase
        } else {
            phase + ((now - phase) / interval + 1) * interval
        };
        next - now
    }

    fn emit(&mut self, seq: u64, env: &mut dyn Env) {
        let produced_at = self.produced_at(env);
        let info = DeviceInfo::signed(
            &self.keys.secret,
            self.settings.access_level,
            self.settings.gps,
            payload(&self.settings.seed, seq),
            produced_at,
        );
        if let Some(c) = &self.cache {
            c.record_signed(&self.keys.public, &info.signing_bytes(), &info.device_sig);
        }
        self.in_flight.insert(produced_at, seq);
        self.stats.sent += 1;
        self.send(
            env,
            Message::Data {
                key: self.keys.public,
                info,
            },
        );
    }

    fn on_connect_result(&mut self, key: PublicKey, status: Status, retry_after_ms: u64, env: &mut dyn Env) {
        let is_candidate = self.candidate.as_ref().is_some_and(|c| c.public == key);
        match (status, is_candidate) {
            (None, true) => {
                let next = self.candidate.take().expect("checked");
                self.previous_keys.push(self.keys.public);
                self.keys = next;
                self.generation += 1;
                self.stats.rotations += 1;
                self.key_requests = 0;
                while let Some(seq) = self.retry.pop_front() {
                    self.stats.resent_after_rotation += 1;
                    self.emit(seq, env);
                }
            }
            (None, false) if key == self.keys.public => {
                if !self.connected {
                    self.connected = true;
                    if self.next_seq < self.settings.tx_count {
                        env.set_timer(self.until_next_slot(env.now_us()), Timer::DeviceEmit);
                    }
                }
            }
            (Some(Rejection::InvalidNewKey), _) => self.stats.invalid_new_key += 1,
            (Some(_), true) => {
                self.candidate = None;
                self.stats.connect_failures += 1;
            }
            (Some(_), false) if key == self.keys.public && !self.connected => {
                self.stats.connect_failures += 1;
                if self.stats.connect_failures < MAX_CONNECT_ATTEMPTS {
                    env.set_timer(retry_after_ms.max(1) * 1000, Timer::DeviceConnect);
                }
            }
            _ => {}
        }
    }

    fn on_new_key_request(&mut self, old_key: PublicKey, env: &mut dyn Env) {
        if old_key != self.keys.public {
            return;
        }
        self.key_requests += 1;
        match self.behaviour {
            DeviceBehaviour::Silent { times } if self.key_requests <= times => {
                self.stats.ignored_key_requests += 1;
            }
            DeviceBehaviour::ReturnOldKey { times } if self.key_requests <= times => {
                self.send(
                    env,
                    Message::NewKeyResponse {
                        old_key,
                        new_key: old_key,
                    },
                );
            }
            _ => {
                let next = derive_keys(&self.settings.seed, self.generation + 1);
                let new_key = next.public;
                self.candidate = Some(next);
                self.send(env, Message::NewKeyResponse { old_key, new_key });
            }
        }
    }

    fn on_ack(&mut self, key: PublicKey, produced_at: Timestamp, status: Status) {
        if key != self.keys.public && !self.previous_keys.contains(&key) {
            return;
        }
        let Some(seq) = self.in_flight.remove(&produced_at) else { return };
        match status {
            None => self.stats.acked += 1,
            Some(r) => {
                *self.stats.rejected.entry(r).or_default() += 1;
                if matches!(r, Rejection::ExpiredBlock | Rejection::KeyUpdateTimeout) {
                    self.retry.push_back(seq);
                }
            }
        }
    }
}

impl Node for Device {
    fn on_frame(&mut self, from: NodeId, frame: &Frame, env: &mut dyn Env) {
        if from != self.home {
            return;
        }
        let Ok(msg) = frame.message() else { return };
        match msg.clone() {
            Message::ConnectResult {
                key,
                status,
                retry_after_ms,
            } => self.on_connect_result(key, status, retry_after_ms, env),
            Message::NewKeyRequest { old_key } => self.on_new_key_request(old_key, env),
            Message::DataAck {
                key,
                produced_at,
                status,
            } => self.on_ack(key, produced_at, status),
            _ => {}
        }
    }

    fn on_timer(&mut self, timer: Timer, env: &mut dyn Env) {
        match timer {
            Timer::DeviceConnect => {
                if !self.connected {
                    self.send(
                        env,
                        Message::Connect {
                            key: self.keys.public,
                        },
                    );
                }
            }
            Timer::DeviceEmit => {
                if self.next_seq < self.settings.tx_count {
                    let seq = self.next_seq;
                    self.next_seq += 1;
                    self.emit(seq, env);
                    if self.next_seq < self.settings.tx_count {
                        env.set_timer(self.until_next_slot(env.now_us()), Timer::DeviceEmit);
                    }
                }
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// Node that records every decodable message it receives.
#[derive(Debug, Default)]
pub struct Probe {
    pub received: Vec<(NodeId, u64, Message)>,
    pub undecodable: u64,
}

impl Node for Probe {
    fn on_frame(&mut self, from: NodeId, frame: &Frame, env: &mut dyn Env) {
        match frame.message() {
            Ok(m) => self.received.push((from, env.now_us(), m.clone())),
            Err(_) => self.undecodable += 1,
        }
    }

    fn on_timer(&mut self, _timer: Timer, _env: &mut dyn Env) {}

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
