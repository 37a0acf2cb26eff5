//! TCP transport on the loopback interface.
//!
//! Every node gets a listener, a thread running its state machine, and one
//! reader thread per inbound connection. A connection starts with the
//! sender's 4-byte node id; after that it carries length-prefixed frames.
//! Time is the monotonic clock and work is not billed.

use std::collections::{BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::{Env, Node, NodeId, Op, Timer, EPOCH_MS};
use crate::chain::Timestamp;
use crate::report::Report;
use crate::scenario::{Deployment, ScenarioConfig, ScenarioError};
use crate::wire::{length_prefixed, Frame, Message, MAX_FRAME_LEN};

enum Input {
    Frame { from: NodeId, frame: Frame, arrival: Instant },
    Timer(Timer),
    TimerAfter(Duration, Timer),
    Stop,
}

struct Shared {
    start: Instant,
    addrs: Vec<SocketAddr>,
    /// Messages and timers not yet handled.
    outstanding: AtomicI64,
    stop: AtomicBool,
}

struct SocketEnv<'a> {
    id: NodeId,
    shared: &'a Shared,
    arrival: Instant,
    links: &'a mut HashMap<NodeId, BufWriter<TcpStream>>,
    timers: &'a mut BinaryHeap<Reverse<(Instant, u64, usize)>>,
    timer_store: &'a mut HashMap<usize, Timer>,
    timer_seq: &'a mut u64,
}

fn micros(d: Duration) -> u64 {
    d.as_micros() as u64
}

fn connect(id: NodeId, addr: SocketAddr) -> io::Result<BufWriter<TcpStream>> {
    let mut s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    s.write_all(&id.to_be_bytes())?;
    Ok(BufWriter::new(s))
}

impl Env for SocketEnv<'_> {
    fn now_us(&self) -> u64 {
        micros(self.shared.start.elapsed())
    }

    fn arrival_us(&self) -> u64 {
        micros(self.arrival.duration_since(self.shared.start))
    }

    fn now_ms(&self) -> Timestamp {
        EPOCH_MS + self.now_us() / 1000
    }

    fn charge(&mut self, _op: Op, _count: u32) {}

    fn send(&mut self, to: NodeId, frame: Frame) {
        let Some(addr) = self.shared.addrs.get(to as usize).copied() else {
            return;
        };
        self.shared.outstanding.fetch_add(1, Ordering::SeqCst);
        let result = match self.links.entry(to) {
            std::collections::hash_map::Entry::Occupied(e) => Ok(e.into_mut()),
            std::collections::hash_map::Entry::Vacant(e) => connect(self.id, addr).map(|s| e.insert(s)),
        }
        .and_then(|s| {
            s.write_all(&length_prefixed(frame.bytes()))?;
            s.flush()
        });
        if let Err(e) = result {
            debug!("node {}: send to {to} failed: {e}", self.id);
            self.links.remove(&to);
            self.shared.outstanding.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn set_timer(&mut self, delay_us: u64, timer: Timer) {
        self.shared.outstanding.fetch_add(1, Ordering::SeqCst);
        *self.timer_seq += 1;
        let slot = *self.timer_seq as usize;
        self.timer_store.insert(slot, timer);
        let at = Instant::now() + Duration::from_micros(delay_us);
        self.timers.push(Reverse((at, *self.timer_seq, slot)));
    }
}

fn read_frames(stream: TcpStream, tx: Sender<Input>, shared: Arc<Shared>) {
    let mut r = BufReader::new(stream);
    let mut id = [0u8; 4];
    if r.read_exact(&mut id).is_err() {
        return;
    }
    let from = NodeId::from_be_bytes(id);
    loop {
        let mut len = [0u8; 4];
        if r.read_exact(&mut len).is_err() {
            return;
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME_LEN {
            warn!("dropping connection from {from}: frame of {len} bytes");
            shared.outstanding.fetch_sub(1, Ordering::SeqCst);
            return;
        }
        let mut buf = vec![0u8; len];
        if r.read_exact(&mut buf).is_err() {
            shared.outstanding.fetch_sub(1, Ordering::SeqCst);
            return;
        }
        let input = Input::Frame {
            from,
            frame: Frame::from_bytes(buf),
            arrival: Instant::now(),
        };
        if tx.send(input).is_err() {
            shared.outstanding.fetch_sub(1, Ordering::SeqCst);
            return;
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Input>, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        match stream {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                let tx = tx.clone();
                let shared = shared.clone();
                thread::spawn(move || read_frames(s, tx, shared));
            }
            Err(e) => debug!("accept failed: {e}"),
        }
    }
}

fn node_loop(id: NodeId, mut node: Box<dyn Node>, rx: Receiver<Input>, shared: Arc<Shared>) -> Box<dyn Node> {
    let mut links = HashMap::new();
    let mut timers: BinaryHeap<Reverse<(Instant, u64, usize)>> = BinaryHeap::new();
    let mut timer_store: HashMap<usize, Timer> = HashMap::new();
    let mut timer_seq = 0u64;
    loop {
        let now = Instant::now();
        while let Some(Reverse((at, _, slot))) = timers.peek().copied() {
            if at > now {
                break;
            }
            timers.pop();
            let timer = timer_store.remove(&slot).expect("stored");
            let mut env = SocketEnv {
                id,
                shared: &shared,
                arrival: now,
                links: &mut links,
                timers: &mut timers,
                timer_store: &mut timer_store,
                timer_seq: &mut timer_seq,
            };
            node.on_timer(timer, &mut env);
            shared.outstanding.fetch_sub(1, Ordering::SeqCst);
        }
        let wait = timers
            .peek()
            .map(|Reverse((at, _, _))| at.saturating_duration_since(Instant::now()))
            .unwrap_or(Duration::from_millis(50));
        let input = match rx.recv_timeout(wait) {
            Ok(i) => i,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return node,
        };
        let mut env = SocketEnv {
            id,
            shared: &shared,
            arrival: Instant::now(),
            links: &mut links,
            timers: &mut timers,
            timer_store: &mut timer_store,
            timer_seq: &mut timer_seq,
        };
        match input {
            Input::Frame { from, frame, arrival } => {
                env.arrival = arrival;
                node.on_frame(from, &frame, &mut env);
                shared.outstanding.fetch_sub(1, Ordering::SeqCst);
            }
            Input::Timer(t) => {
                node.on_timer(t, &mut env);
                shared.outstanding.fetch_sub(1, Ordering::SeqCst);
            }
            Input::TimerAfter(delay, t) => {
                // Converted into a local timer; the outstanding count
                // carries over.
                timer_seq += 1;
                let slot = timer_seq as usize;
                timer_store.insert(slot, t);
                timers.push(Reverse((Instant::now() + delay, timer_seq, slot)));
            }
            Input::Stop => return node,
        }
    }
}

/// A set of nodes running over loopback TCP.
pub struct SocketNet {
    shared: Arc<Shared>,
    inputs: Vec<Sender<Input>>,
    threads: Vec<JoinHandle<Box<dyn Node>>>,
}

impl SocketNet {
    /// Bind a listener per node and start every node thread. Node `i` in
    /// `nodes` gets id `i`.
    pub fn start(nodes: Vec<Box<dyn Node>>) -> io::Result<Self> {
        let listeners = nodes
            .iter()
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<io::Result<Vec<_>>>()?;
        let addrs = listeners
            .iter()
            .map(TcpListener::local_addr)
            .collect::<io::Result<Vec<_>>>()?;
        let shared = Arc::new(Shared {
            start: Instant::now(),
            addrs,
            outstanding: AtomicI64::new(0),
            stop: AtomicBool::new(false),
        });
        let mut inputs = Vec::new();
        let mut threads = Vec::new();
        for (i, (node, listener)) in nodes.into_iter().zip(listeners).enumerate() {
            let (tx, rx) = mpsc::channel();
            let s = shared.clone();
            let accept_tx = tx.clone();
            thread::spawn(move || accept_loop(listener, accept_tx, s));
            let s = shared.clone();
            threads.push(thread::spawn(move || node_loop(i as NodeId, node, rx, s)));
            inputs.push(tx);
        }
        Ok(Self {
            shared,
            inputs,
            threads,
        })
    }

    pub fn elapsed_us(&self) -> u64 {
        micros(self.shared.start.elapsed())
    }

    fn push(&self, to: NodeId, input: Input) {
        self.shared.outstanding.fetch_add(1, Ordering::SeqCst);
        if self.inputs[to as usize].send(input).is_err() {
            self.shared.outstanding.fetch_sub(1, Ordering::SeqCst);
        }
    }

    pub fn fire(&self, node: NodeId, timer: Timer) {
        self.push(node, Input::Timer(timer));
    }

    pub fn fire_after(&self, node: NodeId, delay: Duration, timer: Timer) {
        self.push(node, Input::TimerAfter(delay, timer));
    }

    /// Deliver `msg` to `to` as if `from` had sent it.
    pub fn inject(&self, from: NodeId, to: NodeId, msg: Message) {
        self.push(
            to,
            Input::Frame {
                from,
                frame: Frame::from_message(msg),
                arrival: Instant::now(),
            },
        );
    }

    /// Wait until nothing is in flight for a short settle period.
    pub fn wait_quiescent(&self, limit: Duration) -> Result<(), ScenarioError> {
        let deadline = Instant::now() + limit;
        let settle = Duration::from_millis(100);
        let mut idle_since: Option<Instant> = None;
        loop {
            if self.shared.outstanding.load(Ordering::SeqCst) <= 0 {
                let since = *idle_since.get_or_insert_with(Instant::now);
                if since.elapsed() >= settle {
                    return Ok(());
                }
            } else {
                idle_since = None;
            }
            if Instant::now() > deadline {
                return Err(ScenarioError::Transport(format!(
                    "network still busy after {limit:?}"
                )));
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stop every node and hand the state machines back in id order.
    pub fn shutdown(self) -> Vec<Box<dyn Node>> {
        self.shared.stop.store(true, Ordering::SeqCst);
        for tx in &self.inputs {
            let _ = tx.send(Input::Stop);
        }
        let nodes = self
            .threads
            .into_iter()
            .map(|t| t.join().expect("node thread panicked"))
            .collect();
        // Wake the accept loops so they observe the stop flag.
        for addr in &self.shared.addrs {
            let _ = TcpStream::connect(addr);
        }
        nodes
    }
}

/// Run a scenario over loopback TCP. Phases match the simulator; the
/// reported times are wall-clock.
pub fn run_scenario(config: &ScenarioConfig) -> Result<Report, ScenarioError> {
    let mut d = Deployment::new(config.clone())?;
    let count = d.sim.node_count() as NodeId;
    let nodes = (0..count)
        .map(|i| d.sim.take_node(i).expect("node present"))
        .collect();
    let net = SocketNet::start(nodes).map_err(|e| ScenarioError::Transport(e.to_string()))?;
    let limit = Duration::from_millis(4 * (config.duration_ms + config.onboarding_ms) + 60_000);
    let gateways = config.gateways as NodeId;

    let result = (|| {
        for g in 0..gateways {
            net.fire(g, Timer::Bootstrap);
        }
        net.wait_quiescent(limit)?;
        let devices = d.device_ids().to_vec();
        let window = config.onboarding_ms * 1000;
        for (j, id) in devices.iter().enumerate() {
            let delay = window * j as u64 / devices.len().max(1) as u64;
            net.fire_after(*id, Duration::from_micros(delay), Timer::DeviceConnect);
        }
        net.wait_quiescent(limit)?;
        for a in 0..gateways {
            for b in 0..gateways {
                if a != b {
                    net.inject(a, b, Message::SyncRequest { from_index: 1 });
                }
            }
        }
        net.wait_quiescent(limit)
    })();
    let elapsed = net.elapsed_us();
    for (i, node) in net.shutdown().into_iter().enumerate() {
        d.sim.put_node(i as NodeId, node);
    }
    result?;
    d.sim.run_until(elapsed);
    d.conclude()
}
