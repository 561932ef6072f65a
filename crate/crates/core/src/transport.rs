//! Simulated multi-rank message passing.
//!
//! Each rank program runs on its own thread, but nothing about the result
//! depends on how the OS interleaves them: a rank's virtual clock only moves
//! through its own operations and the arrival times stamped on the messages
//! it receives. Messages are eager (no rendezvous) and cost
//! `latency + bytes / bandwidth` on the link class between the two ranks.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::costmodel::{net_duration, CostParams, EventKind, EventLog, Link};
use crate::error::{usage, Error, Result};
use crate::exec::{DataLoc, ExecContext};

/// Tags at or above this value are reserved for library-internal collectives.
pub const INTERNAL_TAG_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Topology {
    /// Every pair shares a node.
    #[default]
    Intra,
    /// Every pair is on different nodes.
    Inter,
    /// Consecutive blocks of `ranks_per_node` ranks share a node.
    Blocked { ranks_per_node: usize },
}

impl Topology {
    pub fn link(&self, a: usize, b: usize) -> Link {
        match self {
            Topology::Intra => Link::Intra,
            Topology::Inter => Link::Inter,
            Topology::Blocked { ranks_per_node } => {
                let n = (*ranks_per_node).max(1);
                if a / n == b / n {
                    Link::Intra
                } else {
                    Link::Inter
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub size: usize,
    pub params: CostParams,
    pub devices_per_rank: usize,
    pub topology: Topology,
}

impl WorldConfig {
    pub fn new(size: usize) -> Self {
        WorldConfig { size, params: CostParams::default(), devices_per_rank: 1, topology: Topology::Intra }
    }

    pub fn with_params(mut self, params: CostParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = topology;
        self
    }

    pub fn with_devices(mut self, n: usize) -> Self {
        self.devices_per_rank = n;
        self
    }
}

#[derive(Debug)]
struct Envelope {
    payload: Vec<u64>,
    bytes: f64,
    arrival: f64,
}

type ChannelKey = (usize, usize, u64);

#[derive(Debug)]
struct State {
    queues: HashMap<ChannelKey, VecDeque<Envelope>>,
    waiting: Vec<Option<ChannelKey>>,
    alive: Vec<bool>,
    failed: Option<(usize, String)>,
    deadlock: Option<String>,
}

impl State {
    fn deliverable(&self, key: &ChannelKey) -> bool {
        self.queues.get(key).is_some_and(|q| !q.is_empty())
    }

    fn is_deadlocked(&self) -> bool {
        self.alive.iter().enumerate().filter(|(_, a)| **a).all(|(r, _)| match &self.waiting[r] {
            Some(k) => !self.deliverable(k),
            None => false,
        })
    }

    fn describe_waits(&self) -> String {
        let mut parts = Vec::new();
        for (r, w) in self.waiting.iter().enumerate() {
            if let (true, Some((src, _dst, tag))) = (self.alive[r], w) {
                parts.push(format!("rank {r} waits for source {src} tag {tag}"));
            }
        }
        parts.join("; ")
    }
}

#[derive(Debug)]
struct Exchange {
    state: Mutex<State>,
    cv: Condvar,
}

impl Exchange {
    fn new(size: usize) -> Self {
        Exchange {
            state: Mutex::new(State {
                queues: HashMap::new(),
                waiting: vec![None; size],
                alive: vec![true; size],
                failed: None,
                deadlock: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push(&self, key: ChannelKey, env: Envelope) {
        let mut st = self.lock();
        st.queues.entry(key).or_default().push_back(env);
        drop(st);
        self.cv.notify_all();
    }

    fn take(&self, me: usize, key: ChannelKey) -> Result<Envelope> {
        let mut st = self.lock();
        loop {
            if let Some(env) = st.queues.get_mut(&key).and_then(|q| q.pop_front()) {
                st.waiting[me] = None;
                return Ok(env);
            }
            if let Some((rank, reason)) = &st.failed {
                return Err(Error::Aborted { rank: *rank, reason: reason.clone() });
            }
            if let Some(d) = &st.deadlock {
                return Err(Error::Deadlock(d.clone()));
            }
            st.waiting[me] = Some(key);
            if st.is_deadlocked() {
                let msg = st.describe_waits();
                st.deadlock = Some(msg.clone());
                drop(st);
                self.cv.notify_all();
                return Err(Error::Deadlock(msg));
            }
            st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn finish(&self, me: usize, err: Option<&Error>) {
        let mut st = self.lock();
        st.alive[me] = false;
        st.waiting[me] = None;
        if let Some(e) = err {
            if st.failed.is_none() && !matches!(e, Error::Aborted { .. } | Error::Deadlock(_)) {
                st.failed = Some((me, e.to_string()));
            }
        }
        drop(st);
        self.cv.notify_all();
    }
}

/// Completed-on-issue send handle (sends are eager).
#[derive(Debug, Clone, Copy)]
pub struct SendRequest {
    pub issued_at: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RecvRequest {
    source: usize,
    tag: u64,
    posted_at: f64,
}

/// One rank's view of the world: its node model plus the message exchange.
#[derive(Debug)]
pub struct Rank {
    pub exec: ExecContext,
    id: usize,
    size: usize,
    topology: Topology,
    shared: Arc<Exchange>,
    tag_seq: u64,
}

impl Rank {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn params(&self) -> &CostParams {
        self.exec.params()
    }

    pub fn link(&self, other: usize) -> Link {
        self.topology.link(self.id, other)
    }

    /// A fresh tag for an internal collective. All ranks call collectives in
    /// the same order, so their sequences agree.
    pub fn next_tag(&mut self) -> u64 {
        self.tag_seq += 1;
        INTERNAL_TAG_BASE + self.tag_seq
    }

    fn device_guard(&mut self, loc: &DataLoc) {
        if loc.is_device() {
            // GPU-aware MPI cannot see our streams: queued work producing the
            // buffer must be drained first.
            if self.exec.has_pending(0) {
                self.exec.sync_device(0);
            } else {
                self.exec.sync_marker("mpi_stream_check");
            }
        }
    }

    pub fn isend(&mut self, dest: usize, payload: Vec<u64>, bytes: f64, loc: DataLoc, tag: u64) -> Result<SendRequest> {
        if dest >= self.size {
            return usage(format!("send to rank {dest} in a world of {}", self.size));
        }
        if dest == self.id {
            return usage("self-messages are not allowed at the transport level");
        }
        self.exec.memtype_of(&loc);
        self.device_guard(&loc);
        let now = self.exec.host_time();
        let dur = net_duration(bytes, self.link(dest), self.exec.params());
        self.exec.note(EventKind::NetSend, now, dur, bytes, &format!("to{dest}"));
        self.shared.push((self.id, dest, tag), Envelope { payload, bytes, arrival: now + dur });
        Ok(SendRequest { issued_at: now })
    }

    pub fn irecv(&mut self, source: usize, tag: u64, loc: DataLoc) -> Result<RecvRequest> {
        if source >= self.size || source == self.id {
            return usage(format!("receive from invalid source {source}"));
        }
        self.exec.memtype_of(&loc);
        self.device_guard(&loc);
        Ok(RecvRequest { source, tag, posted_at: self.exec.host_time() })
    }

    /// Blocks until every request has completed; the host clock moves to the
    /// latest arrival. Payloads are returned in request order.
    pub fn wait_all(&mut self, reqs: Vec<RecvRequest>) -> Result<Vec<Vec<u64>>> {
        let mut latest = self.exec.host_time();
        let mut out = Vec::with_capacity(reqs.len());
        let mut bytes = 0.0;
        for r in &reqs {
            let env = self.shared.take(self.id, (r.source, self.id, r.tag))?;
            debug_assert!(env.arrival >= r.posted_at.min(env.arrival));
            latest = latest.max(env.arrival);
            bytes += env.bytes;
            out.push(env.payload);
        }
        if !reqs.is_empty() {
            self.exec.wait_until(latest, EventKind::NetRecv, bytes, "wait_all");
        }
        Ok(out)
    }

    pub fn recv(&mut self, source: usize, tag: u64, loc: DataLoc) -> Result<Vec<u64>> {
        let r = self.irecv(source, tag, loc)?;
        Ok(self.wait_all(vec![r])?.pop().expect("one request"))
    }

    /// Everyone receives every rank's block, indexed by rank. Dissemination
    /// pattern: ceil(log2 size) rounds.
    pub fn allgather(&mut self, mine: Vec<u64>) -> Result<Vec<Vec<u64>>> {
        let p = self.size;
        let mut known: Vec<Option<Vec<u64>>> = vec![None; p];
        known[self.id] = Some(mine);
        let mut dist = 1;
        while dist < p {
            let tag = self.next_tag();
            let to = (self.id + dist) % p;
            let from = (self.id + p - dist) % p;
            let mut msg = Vec::new();
            for (r, b) in known.iter().enumerate() {
                if let Some(b) = b {
                    msg.push(r as u64);
                    msg.push(b.len() as u64);
                    msg.extend_from_slice(b);
                }
            }
            let bytes = 8.0 * msg.len() as f64;
            self.isend(to, msg, bytes, DataLoc::host(), tag)?;
            let got = self.recv(from, tag, DataLoc::host())?;
            let mut i = 0;
            while i < got.len() {
                let r = got[i] as usize;
                let n = got[i + 1] as usize;
                if known[r].is_none() {
                    known[r] = Some(got[i + 2..i + 2 + n].to_vec());
                }
                i += 2 + n;
            }
            dist *= 2;
        }
        Ok(known.into_iter().map(|b| b.expect("dissemination reaches every rank")).collect())
    }

    /// Sum in ascending rank order, identical on every rank.
    pub fn allreduce_sum(&mut self, x: f64) -> Result<f64> {
        if self.size == 1 {
            return Ok(x);
        }
        let all = self.allgather(vec![x.to_bits()])?;
        Ok(all.iter().fold(0.0, |acc, b| acc + f64::from_bits(b[0])))
    }

    pub fn allreduce_max(&mut self, x: f64) -> Result<f64> {
        if self.size == 1 {
            return Ok(x);
        }
        let all = self.allgather(vec![x.to_bits()])?;
        Ok(all.iter().map(|b| f64::from_bits(b[0])).fold(f64::NEG_INFINITY, f64::max))
    }

    /// True on every rank if it is true on any rank.
    pub fn allreduce_any(&mut self, flag: bool) -> Result<bool> {
        if self.size == 1 {
            return Ok(flag);
        }
        let all = self.allgather(vec![flag as u64])?;
        Ok(all.iter().any(|b| b[0] != 0))
    }

    /// Sparse personalized exchange: `sends[d]` goes to rank `d`; returns the
    /// block received from each source (empty when nothing was sent).
    pub fn exchange(&mut self, sends: Vec<Vec<u64>>) -> Result<Vec<Vec<u64>>> {
        let p = self.size;
        if sends.len() != p {
            return usage("exchange needs one block per rank");
        }
        let mut out = vec![Vec::new(); p];
        let mut sends = sends;
        out[self.id] = std::mem::take(&mut sends[self.id]);
        if p == 1 {
            return Ok(out);
        }
        let flags: Vec<u64> = sends.iter().map(|s| !s.is_empty() as u64).collect();
        let matrix = self.allgather(flags)?;
        let tag = self.next_tag();
        let mut reqs = Vec::new();
        let mut sources = Vec::new();
        for src in 0..p {
            if src != self.id && matrix[src][self.id] != 0 {
                reqs.push(self.irecv(src, tag, DataLoc::host())?);
                sources.push(src);
            }
        }
        for (d, block) in sends.into_iter().enumerate() {
            if d != self.id && !block.is_empty() {
                let bytes = 8.0 * block.len() as f64;
                self.isend(d, block, bytes, DataLoc::host(), tag)?;
            }
        }
        for (src, data) in sources.into_iter().zip(self.wait_all(reqs)?) {
            out[src] = data;
        }
        Ok(out)
    }

    pub fn barrier(&mut self) -> Result<()> {
        if self.size > 1 {
            self.allgather(Vec::new())?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct RunOutput<R> {
    pub results: Vec<R>,
    /// Per-rank logs concatenated in rank order.
    pub log: EventLog,
    /// Final host clock of each rank.
    pub clocks: Vec<f64>,
}

impl<R> RunOutput<R> {
    pub fn max_clock(&self) -> f64 {
        self.clocks.iter().copied().fold(0.0, f64::max)
    }
}

/// Runs `program` on every rank of a simulated world.
pub fn run<R, F>(config: &WorldConfig, program: F) -> Result<RunOutput<R>>
where
    R: Send,
    F: Fn(&mut Rank) -> Result<R> + Sync,
{
    if config.size == 0 {
        return Err(Error::Config("world size must be at least 1".into()));
    }
    config.params.validate()?;
    let shared = Arc::new(Exchange::new(config.size));
    let make_rank = |id: usize| Rank {
        exec: ExecContext::new(id, config.params.clone(), config.devices_per_rank),
        id,
        size: config.size,
        topology: config.topology.clone(),
        shared: Arc::clone(&shared),
        tag_seq: 0,
    };
    let body = |mut rank: Rank| -> (Result<R>, EventLog, f64) {
        let res = program(&mut rank);
        rank.shared.finish(rank.id, res.as_ref().err());
        let clock = rank.exec.host_time();
        (res, rank.exec.take_log(), clock)
    };

    let outcomes: Vec<(Result<R>, EventLog, f64)> = if config.size == 1 {
        vec![body(make_rank(0))]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..config.size)
                .map(|id| {
                    let rank = make_rank(id);
                    std::thread::Builder::new()
                        .name(format!("rank-{id}"))
                        .stack_size(16 << 20)
                        .spawn_scoped(s, move || body(rank))
                        .expect("spawn rank thread")
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
        })
    };

    let mut results = Vec::with_capacity(config.size);
    let mut log = EventLog::new();
    let mut clocks = Vec::with_capacity(config.size);
    let mut first_err: Option<Error> = None;
    for (res, l, c) in outcomes {
        match res {
            Ok(r) => results.push(r),
            Err(e) => {
                let replace = match (&first_err, &e) {
                    (None, _) => true,
                    (Some(Error::Aborted { .. }), e2) => !matches!(e2, Error::Aborted { .. }),
                    _ => false,
                };
                if replace {
                    first_err = Some(e);
                }
            }
        }
        log.extend(l);
        clocks.push(c);
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(RunOutput { results, log, clocks }),
    }
}
