//! Virtual-time accounting.
//!
//! Every "timing" produced by this crate is computed from [`CostParams`] and
//! recorded in an [`EventLog`]. Nothing here ever reads a wall clock, so two
//! runs with the same inputs produce identical logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecSpace;

/// Calibrated latency and bandwidth parameters of the simulated machine.
///
/// Defaults describe one node of a V100-based system with two GPUs per CPU
/// socket. The intra-node network pair is a least-squares fit of the measured
/// GPU ping-pong latencies (8 KiB .. 4 MiB); the inter-node pair is chosen to
/// have a lower latency floor but a lower bandwidth so the two curves cross at
/// 128 KiB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub t_launch: f64,
    pub t_stream_sync: f64,
    pub t_device_sync: f64,
    pub t_memtype_query: f64,
    pub t_sf_overhead: f64,
    /// Intra-node network latency floor per message.
    pub net_latency_small: f64,
    /// Intra-node network bandwidth for device-resident messages.
    pub bw_net: f64,
    pub net_latency_inter: f64,
    pub bw_net_inter: f64,
    /// Pinned host<->device bandwidth.
    pub bw_h2d: f64,
    pub pinned_speedup: f64,
    pub bw_device_mem: f64,
    pub bw_host_mem: f64,
    pub host_kernel_overhead: f64,
    /// Multiplicative slowdown of device kernels when several ranks share a
    /// device. 1.0 means no sharing.
    pub oversubscription: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            t_launch: 11e-6,
            t_stream_sync: 4e-6,
            t_device_sync: 4e-6,
            t_memtype_query: 1e-6,
            t_sf_overhead: 1e-6,
            net_latency_small: 17.231e-6,
            bw_net: 46.988e9,
            net_latency_inter: 9.535e-6,
            bw_net_inter: 12.5e9,
            bw_h2d: 50e9,
            pinned_speedup: 4.0,
            bw_device_mem: 900e9,
            bw_host_mem: 270e9,
            host_kernel_overhead: 1e-6,
            oversubscription: 1.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("t_launch", self.t_launch),
            ("t_stream_sync", self.t_stream_sync),
            ("t_device_sync", self.t_device_sync),
            ("t_memtype_query", self.t_memtype_query),
            ("t_sf_overhead", self.t_sf_overhead),
            ("net_latency_small", self.net_latency_small),
            ("net_latency_inter", self.net_latency_inter),
            ("host_kernel_overhead", self.host_kernel_overhead),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("bw_net", self.bw_net),
            ("bw_net_inter", self.bw_net_inter),
            ("bw_h2d", self.bw_h2d),
            ("pinned_speedup", self.pinned_speedup),
            ("bw_device_mem", self.bw_device_mem),
            ("bw_host_mem", self.bw_host_mem),
            ("oversubscription", self.oversubscription),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: CostParams =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("cost params: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("CostParams always serializes")
    }

    fn bw_mem(&self, space: ExecSpace) -> f64 {
        match space {
            ExecSpace::Host => self.bw_host_mem,
            ExecSpace::Device(_) => self.bw_device_mem,
        }
    }
}

/// Duration of a bandwidth-bound kernel. The flop count is accepted for
/// bookkeeping but does not enter the model.
pub fn kernel_duration(bytes_moved: f64, _flops: f64, space: ExecSpace, params: &CostParams) -> f64 {
    let base = bytes_moved / params.bw_mem(space);
    match space {
        ExecSpace::Device(_) => base * params.oversubscription,
        ExecSpace::Host => base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferKind {
    H2D,
    D2H,
    Net,
}

/// Which network link class a message travels over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Link {
    #[default]
    Intra,
    Inter,
}

pub fn transfer_duration(bytes: f64, kind: TransferKind, pinned: bool, params: &CostParams) -> f64 {
    match kind {
        TransferKind::Net => net_duration(bytes, Link::Intra, params),
        TransferKind::H2D | TransferKind::D2H => {
            let bw = if pinned { params.bw_h2d } else { params.bw_h2d / params.pinned_speedup };
            bytes / bw
        }
    }
}

pub fn net_duration(bytes: f64, link: Link, params: &CostParams) -> f64 {
    match link {
        Link::Intra => params.net_latency_small + bytes / params.bw_net,
        Link::Inter => params.net_latency_inter + bytes / params.bw_net_inter,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Kernel,
    H2D,
    D2H,
    NetSend,
    NetRecv,
    Sync,
    Pack,
    Unpack,
    LocalScatter,
    /// Host-side software overhead: dispatch, memory-type queries.
    Overhead,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Kernel => "kernel",
            EventKind::H2D => "h2d",
            EventKind::D2H => "d2h",
            EventKind::NetSend => "net_send",
            EventKind::NetRecv => "net_recv",
            EventKind::Sync => "sync",
            EventKind::Pack => "pack",
            EventKind::Unpack => "unpack",
            EventKind::LocalScatter => "local_scatter",
            EventKind::Overhead => "overhead",
        }
    }

    /// Whether the event occupies a device stream.
    pub fn is_device_work(self) -> bool {
        matches!(
            self,
            EventKind::Kernel | EventKind::Pack | EventKind::Unpack | EventKind::LocalScatter
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub rank: usize,
    pub kind: EventKind,
    pub stream: Option<usize>,
    /// Virtual start time; for stream work the time the device starts it.
    pub start: f64,
    pub duration: f64,
    /// How far this event advanced the issuing rank's host clock.
    pub host_advance: f64,
    pub bytes: f64,
    pub label: String,
    /// Enclosing scope set by a driver (e.g. `level-3` during a multigrid
    /// cycle), empty when none.
    pub scope: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn extend(&mut self, other: EventLog) {
        self.events.extend(other.events);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn count_where(&self, f: impl Fn(&Event) -> bool) -> usize {
        self.events.iter().filter(|e| f(e)).count()
    }

    /// Events recorded at or after position `mark`.
    pub fn since(&self, mark: usize) -> &[Event] {
        &self.events[mark.min(self.events.len())..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Kind,
    Label,
    Scope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub count: usize,
    pub total_seconds: f64,
    pub total_host_seconds: f64,
    pub total_bytes: f64,
}

/// Per-group totals, ordered by group key.
pub fn summarize(log: &EventLog, group_by: GroupBy) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<String, SummaryRow> = BTreeMap::new();
    for e in &log.events {
        let key = match group_by {
            GroupBy::Kind => e.kind.name().to_string(),
            GroupBy::Label => e.label.clone(),
            GroupBy::Scope => e.scope.clone(),
        };
        let row = groups.entry(key.clone()).or_insert_with(|| SummaryRow {
            group: key,
            count: 0,
            total_seconds: 0.0,
            total_host_seconds: 0.0,
            total_bytes: 0.0,
        });
        row.count += 1;
        row.total_seconds += e.duration;
        row.total_host_seconds += e.host_advance;
        row.total_bytes += e.bytes;
    }
    groups.into_values().collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("group,count,total_seconds,total_bytes\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:e},{}", r.group, r.count, r.total_seconds, r.total_bytes);
    }
    out
}

/// Host clock plus per-stream completion times of one rank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankClock {
    host: f64,
    streams: Vec<f64>,
}

impl RankClock {
    pub fn new(nstreams: usize) -> Self {
        RankClock { host: 0.0, streams: vec![0.0; nstreams] }
    }

    pub fn host(&self) -> f64 {
        self.host
    }

    /// Moves the host clock forward by `dt` and returns the new time.
    pub fn advance(&mut self, dt: f64) -> f64 {
        debug_assert!(dt >= 0.0, "negative clock advance {dt}");
        self.host += dt.max(0.0);
        self.host
    }

    /// Moves the host clock to `t` if that is later; returns the advance.
    pub fn advance_to(&mut self, t: f64) -> f64 {
        let dt = (t - self.host).max(0.0);
        self.host += dt;
        dt
    }

    pub fn stream(&self, s: usize) -> f64 {
        self.streams[s]
    }

    pub fn nstreams(&self) -> usize {
        self.streams.len()
    }

    pub fn add_stream(&mut self) -> usize {
        self.streams.push(self.host);
        self.streams.len() - 1
    }

    pub(crate) fn set_stream(&mut self, s: usize, t: f64) {
        debug_assert!(t >= self.streams[s]);
        self.streams[s] = t;
    }

    pub fn latest_stream(&self) -> f64 {
        self.streams.iter().copied().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, label: &str, duration: f64) -> Event {
        Event {
            rank: 0,
            kind,
            stream: None,
            start: 0.0,
            duration,
            host_advance: 0.0,
            bytes: 8.0,
            label: label.into(),
            scope: String::new(),
        }
    }

    #[test]
    fn axpy_sized_kernel_on_device() {
        let p = CostParams::default();
        let t = kernel_duration(24e6, 2e6, ExecSpace::Device(0), &p);
        assert!((t - 24e6 / 900e9).abs() < 1e-15);
        assert!((t * 1e6 - 26.6667).abs() < 1e-3);
        assert_eq!(kernel_duration(0.0, 0.0, ExecSpace::Host, &p), 0.0);
    }

    #[test]
    fn scatter_add_of_four_megabytes_takes_about_fourteen_us() {
        // dst[i] += src[i]: read src, read dst, write dst.
        let p = CostParams::default();
        let t = kernel_duration(3.0 * 4e6, 0.0, ExecSpace::Device(0), &p);
        assert!((t * 1e6 - 13.33).abs() < 0.01, "{t}");
    }

    #[test]
    fn net_transfer_matches_pingpong_row() {
        let p = CostParams::default();
        let t4m = transfer_duration(4194304.0, TransferKind::Net, true, &p);
        assert!((t4m * 1e6 - 106.6).abs() < 0.5, "{t4m}");
        let t8k = transfer_duration(8192.0, TransferKind::Net, true, &p);
        assert!((t8k * 1e6 - 17.8).abs() < 0.5, "{t8k}");
        assert_eq!(transfer_duration(0.0, TransferKind::Net, true, &p), p.net_latency_small);
    }

    #[test]
    fn pinned_is_exactly_speedup_faster() {
        let p = CostParams::default();
        let pinned = transfer_duration(1e6, TransferKind::H2D, true, &p);
        let pageable = transfer_duration(1e6, TransferKind::H2D, false, &p);
        assert!((pageable / pinned - p.pinned_speedup).abs() < 1e-12);
    }

    #[test]
    fn inter_and_intra_curves_cross_near_128k() {
        let p = CostParams::default();
        let below = 100_000.0;
        let above = 160_000.0;
        assert!(net_duration(below, Link::Inter, &p) < net_duration(below, Link::Intra, &p));
        assert!(net_duration(above, Link::Inter, &p) > net_duration(above, Link::Intra, &p));
    }

    #[test]
    fn summarize_groups_and_sums() {
        assert!(summarize(&EventLog::new(), GroupBy::Kind).is_empty());
        let mut log = EventLog::new();
        log.push(ev(EventKind::Kernel, "a", 5e-6));
        log.push(ev(EventKind::Sync, "b", 1e-6));
        log.push(ev(EventKind::Kernel, "c", 7e-6));
        let rows = summarize(&log, GroupBy::Kind);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].group, "kernel");
        assert_eq!(rows[0].count, 2);
        assert!((rows[0].total_seconds - 12e-6).abs() < 1e-18);
        assert_eq!(rows[1].group, "sync");
        let csv = summary_csv(&rows);
        assert!(csv.starts_with("group,count,total_seconds,total_bytes\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn params_json_round_trip_and_validation() {
        let p = CostParams::default();
        let q = CostParams::from_json(&p.to_json()).unwrap();
        assert_eq!(p, q);
        let partial = CostParams::from_json(r#"{"t_launch": 5e-6}"#).unwrap();
        assert_eq!(partial.t_launch, 5e-6);
        assert_eq!(partial.bw_net, p.bw_net);
        assert!(CostParams::from_json(r#"{"bw_net": 0.0}"#).is_err());
        assert!(CostParams::from_json(r#"{"t_launch": -1.0}"#).is_err());
        assert!(CostParams::from_json(r#"{"nonsense": 1.0}"#).is_err());
    }

    #[test]
    fn clock_is_monotone() {
        let mut c = RankClock::new(1);
        c.advance(1.0);
        assert_eq!(c.advance_to(0.5), 0.0);
        assert_eq!(c.host(), 1.0);
        assert_eq!(c.advance_to(2.0), 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_log() -> impl Strategy<Value = EventLog> {
            prop::collection::vec((0usize..3, 0u32..1000, 0u32..1000), 0..30).prop_map(|v| {
                let kinds = [EventKind::Kernel, EventKind::Sync, EventKind::H2D];
                EventLog {
                    events: v
                        .into_iter()
                        .map(|(k, d, b)| Event {
                            rank: 0,
                            kind: kinds[k],
                            stream: None,
                            start: 0.0,
                            duration: d as f64,
                            host_advance: 0.0,
                            bytes: b as f64,
                            label: format!("l{}", d % 4),
                            scope: String::new(),
                        })
                        .collect(),
                }
            })
        }

        proptest! {
            #[test]
            fn summarize_is_additive(a in arb_log(), b in arb_log()) {
                let mut joined = a.clone();
                joined.extend(b.clone());
                let whole = summarize(&joined, GroupBy::Label);
                let sa = summarize(&a, GroupBy::Label);
                let sb = summarize(&b, GroupBy::Label);
                for row in &whole {
                    let pick = |s: &[SummaryRow]| s.iter().find(|r| r.group == row.group)
                        .map(|r| (r.count, r.total_seconds, r.total_bytes)).unwrap_or((0, 0.0, 0.0));
                    let (ca, ta, ba) = pick(&sa);
                    let (cb, tb, bb) = pick(&sb);
                    prop_assert_eq!(row.count, ca + cb);
                    prop_assert_eq!(row.total_seconds, ta + tb);
                    prop_assert_eq!(row.total_bytes, ba + bb);
                }
            }
        }
    }
}
