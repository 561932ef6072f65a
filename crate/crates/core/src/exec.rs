//! Execution spaces, stream queues and lazily mirrored host/device buffers.
//!
//! Kernels run functionally the moment they are issued; only their modeled
//! cost is deferred onto the issuing stream's clock. A [`MirroredBuffer`]
//! keeps a host copy and (once touched from the device) a device copy, plus a
//! validity mask. Reading an invalid side copies; writing never copies and
//! just invalidates the other side.

use serde::{Deserialize, Serialize};

use crate::costmodel::{
    kernel_duration, transfer_duration, CostParams, Event, EventKind, EventLog, RankClock,
    TransferKind,
};
use crate::error::{usage, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExecSpace {
    Host,
    Device(usize),
}

impl ExecSpace {
    pub fn is_device(self) -> bool {
        matches!(self, ExecSpace::Device(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemType {
    HostPageable,
    HostPinned,
    Device,
    Unified,
}

impl MemType {
    pub fn is_device(self) -> bool {
        matches!(self, MemType::Device)
    }
}

/// Where a raw view passed to a communication routine lives, and whether the
/// caller told us (tagged) or the library has to ask the runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataLoc {
    pub memtype: MemType,
    pub tagged: bool,
}

impl DataLoc {
    pub fn tagged(memtype: MemType) -> Self {
        DataLoc { memtype, tagged: true }
    }

    pub fn untagged(memtype: MemType) -> Self {
        DataLoc { memtype, tagged: false }
    }

    pub fn host() -> Self {
        DataLoc::tagged(MemType::HostPinned)
    }

    pub fn for_space(space: ExecSpace) -> Self {
        match space {
            ExecSpace::Host => DataLoc::tagged(MemType::HostPinned),
            ExecSpace::Device(_) => DataLoc::tagged(MemType::Device),
        }
    }

    pub fn is_device(&self) -> bool {
        self.memtype.is_device()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
}

impl AccessMode {
    pub fn reads(self) -> bool {
        !matches!(self, AccessMode::Write)
    }

    pub fn writes(self) -> bool {
        !matches!(self, AccessMode::Read)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Validity {
    HostValid,
    DeviceValid,
    BothValid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(pub usize);

#[derive(Debug, Clone)]
struct StreamInfo {
    device: usize,
}

/// What a kernel needs to know about a buffer it touches.
#[derive(Debug, Clone, Copy)]
pub struct Touch {
    pub device: usize,
    pub device_ready: bool,
}

/// Per-rank simulated node: host clock, device streams and the event log.
#[derive(Debug, Clone)]
pub struct ExecContext {
    rank: usize,
    params: CostParams,
    ndevices: usize,
    clock: RankClock,
    streams: Vec<StreamInfo>,
    log: EventLog,
    scope: String,
}

impl ExecContext {
    /// A node with `ndevices` devices, each with a default stream.
    pub fn new(rank: usize, params: CostParams, ndevices: usize) -> Self {
        let streams = (0..ndevices).map(|d| StreamInfo { device: d }).collect();
        ExecContext {
            rank,
            params,
            ndevices,
            clock: RankClock::new(ndevices),
            streams,
            log: EventLog::new(),
            scope: String::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> &CostParams {
        &self.params
    }

    pub fn ndevices(&self) -> usize {
        self.ndevices
    }

    pub fn host_time(&self) -> f64 {
        self.clock.host()
    }

    pub fn clock(&self) -> &RankClock {
        &self.clock
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn take_log(&mut self) -> EventLog {
        std::mem::take(&mut self.log)
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Sets the label scope for subsequent events; returns the previous one.
    pub fn set_scope(&mut self, scope: impl Into<String>) -> String {
        std::mem::replace(&mut self.scope, scope.into())
    }

    pub fn check_space(&self, space: ExecSpace) -> Result<()> {
        match space {
            ExecSpace::Host => Ok(()),
            ExecSpace::Device(d) if d < self.ndevices => Ok(()),
            ExecSpace::Device(d) => Err(Error::Config(format!(
                "device {d} requested but rank {} has {} device(s)",
                self.rank, self.ndevices
            ))),
        }
    }

    /// The first device, when one exists.
    pub fn default_device(&self) -> Option<ExecSpace> {
        (self.ndevices > 0).then_some(ExecSpace::Device(0))
    }

    pub fn default_stream(&self, device: usize) -> StreamId {
        StreamId(device)
    }

    pub fn create_stream(&mut self, device: usize) -> Result<StreamId> {
        self.check_space(ExecSpace::Device(device))?;
        self.streams.push(StreamInfo { device });
        Ok(StreamId(self.clock.add_stream()))
    }

    /// A second stream on `device`, created on first use.
    pub fn aux_stream(&mut self, device: usize) -> Result<StreamId> {
        self.check_space(ExecSpace::Device(device))?;
        if let Some(i) = self.streams.iter().enumerate().skip(self.ndevices).find_map(|(i, s)| {
            (s.device == device).then_some(i)
        }) {
            return Ok(StreamId(i));
        }
        self.create_stream(device)
    }

    pub fn stream_device(&self, s: StreamId) -> usize {
        self.streams[s.0].device
    }

    pub fn stream_completion(&self, s: StreamId) -> f64 {
        self.clock.stream(s.0)
    }

    /// True when some stream of `device` still has queued work.
    pub fn has_pending(&self, device: usize) -> bool {
        let host = self.clock.host();
        self.streams
            .iter()
            .enumerate()
            .any(|(i, s)| s.device == device && self.clock.stream(i) > host)
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        kind: EventKind,
        stream: Option<usize>,
        start: f64,
        duration: f64,
        host_advance: f64,
        bytes: f64,
        label: &str,
    ) {
        self.log.push(Event {
            rank: self.rank,
            kind,
            stream,
            start,
            duration,
            host_advance,
            bytes,
            label: label.to_string(),
            scope: self.scope.clone(),
        });
    }

    /// Records an event that does not move any clock (used by the transport
    /// for message bookkeeping).
    pub(crate) fn note(&mut self, kind: EventKind, start: f64, duration: f64, bytes: f64, label: &str) {
        self.record(kind, None, start, duration, 0.0, bytes, label);
    }

    /// Charges host-side software overhead.
    pub fn overhead(&mut self, label: &str, dt: f64) {
        let start = self.clock.host();
        self.clock.advance(dt);
        self.record(EventKind::Overhead, None, start, dt, dt, 0.0, label);
    }

    /// Waits on the host until `t` (e.g. a message arrival).
    pub(crate) fn wait_until(&mut self, t: f64, kind: EventKind, bytes: f64, label: &str) {
        let start = self.clock.host();
        let adv = self.clock.advance_to(t);
        self.record(kind, None, start, adv, adv, bytes, label);
    }

    /// A host kernel: dispatch overhead plus bandwidth-bound execution.
    pub fn host_kernel(&mut self, kind: EventKind, label: &str, bytes: f64, flops: f64) {
        let d = self.params.host_kernel_overhead
            + kernel_duration(bytes, flops, ExecSpace::Host, &self.params);
        let start = self.clock.host();
        self.clock.advance(d);
        self.record(kind, None, start, d, d, bytes, label);
    }

    /// Queues a device kernel on `stream`. The launch cost is paid by the
    /// host; execution starts once both the launch and the previous work on
    /// the stream are done.
    #[allow(clippy::too_many_arguments)]
    pub fn enqueue_kernel(
        &mut self,
        stream: StreamId,
        kind: EventKind,
        label: &str,
        bytes: f64,
        flops: f64,
        touches: &[Touch],
    ) -> Result<()> {
        let device = self.stream_device(stream);
        for t in touches {
            if t.device != device {
                return usage(format!(
                    "kernel '{label}' on device {device} touches a buffer owned by device {}",
                    t.device
                ));
            }
            if !t.device_ready {
                return usage(format!("kernel '{label}' touches a buffer not valid on device"));
            }
        }
        let launch = self.params.t_launch;
        self.clock.advance(launch);
        let dur = kernel_duration(bytes, flops, ExecSpace::Device(device), &self.params);
        let start = self.clock.host().max(self.clock.stream(stream.0));
        self.clock.set_stream(stream.0, start + dur);
        self.record(kind, Some(stream.0), start, dur, launch, bytes, label);
        Ok(())
    }

    /// Runs a kernel of `bytes` traffic in `space`: on the host directly, on a
    /// device through its default stream.
    pub fn run_kernel(&mut self, space: ExecSpace, label: &str, bytes: f64, flops: f64) -> Result<()> {
        self.run_kernel_kind(space, EventKind::Kernel, label, bytes, flops)
    }

    pub fn run_kernel_kind(
        &mut self,
        space: ExecSpace,
        kind: EventKind,
        label: &str,
        bytes: f64,
        flops: f64,
    ) -> Result<()> {
        self.check_space(space)?;
        match space {
            ExecSpace::Host => {
                self.host_kernel(kind, label, bytes, flops);
                Ok(())
            }
            ExecSpace::Device(d) => {
                let s = self.default_stream(d);
                self.enqueue_kernel(s, kind, label, bytes, flops, &[])
            }
        }
    }

    /// Host waits for `stream` to drain, then pays the synchronization cost.
    pub fn sync_stream(&mut self, stream: StreamId) {
        let t_sync = self.params.t_stream_sync;
        let start = self.clock.host();
        let done = self.clock.stream(stream.0).max(start);
        let adv = self.clock.advance_to(done + t_sync);
        self.record(EventKind::Sync, Some(stream.0), start, adv, adv, 0.0, "stream_sync");
    }

    pub fn sync_device(&mut self, device: usize) {
        let t_sync = self.params.t_device_sync;
        let start = self.clock.host();
        let done = self
            .streams
            .iter()
            .enumerate()
            .filter(|(_, s)| s.device == device)
            .map(|(i, _)| self.clock.stream(i))
            .fold(start, f64::max);
        let adv = self.clock.advance_to(done + t_sync);
        self.record(EventKind::Sync, None, start, adv, adv, 0.0, "device_sync");
    }

    /// Host waits for `stream` without an explicit synchronization call
    /// (event-based completion of a split-phase operation).
    pub fn join_stream(&mut self, stream: StreamId) {
        let start = self.clock.host();
        let adv = self.clock.advance_to(self.clock.stream(stream.0));
        self.record(EventKind::Sync, Some(stream.0), start, adv, adv, 0.0, "join");
    }

    /// Makes later work on `stream` wait for everything queued on `after`
    /// (an event record/wait pair; the host does not block).
    pub fn stream_wait(&mut self, stream: StreamId, after: StreamId) {
        let t = self.clock.stream(stream.0).max(self.clock.stream(after.0));
        self.clock.set_stream(stream.0, t);
    }

    /// A zero-cost synchronization marker (nothing was queued).
    pub(crate) fn sync_marker(&mut self, label: &str) {
        let t = self.clock.host();
        self.record(EventKind::Sync, None, t, 0.0, 0.0, 0.0, label);
    }

    /// Blocking host/device copy of `bytes`. Device-to-host waits for the
    /// device's queued work first.
    pub fn transfer(&mut self, kind: TransferKind, device: usize, bytes: f64, pinned: bool, label: &str) {
        let dur = transfer_duration(bytes, kind, pinned, &self.params);
        let start = match kind {
            TransferKind::D2H => {
                let done = self
                    .streams
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.device == device)
                    .map(|(i, _)| self.clock.stream(i))
                    .fold(self.clock.host(), f64::max);
                done
            }
            _ => self.clock.host(),
        };
        let before = self.clock.host();
        self.clock.advance_to(start + dur);
        let adv = self.clock.host() - before;
        if kind == TransferKind::H2D {
            let s = self.default_stream(device).0;
            let t = self.clock.host().max(self.clock.stream(s));
            self.clock.set_stream(s, t);
        }
        let ek = match kind {
            TransferKind::H2D => EventKind::H2D,
            TransferKind::D2H => EventKind::D2H,
            TransferKind::Net => EventKind::NetSend,
        };
        self.record(ek, None, start, dur, adv, bytes, label);
    }

    /// Memory type of a raw view; querying the runtime costs time, a tagged
    /// view is free.
    pub fn memtype_of(&mut self, loc: &DataLoc) -> MemType {
        if !loc.tagged {
            let dt = self.params.t_memtype_query;
            self.overhead("memtype_query", dt);
        }
        loc.memtype
    }
}

/// Handle for an outstanding access granted by [`MirroredBuffer::get_access`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    id: u64,
    space: ExecSpace,
    mode: AccessMode,
}

impl Access {
    pub fn space(&self) -> ExecSpace {
        self.space
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }
}

/// Host storage plus a lazily allocated device mirror.
#[derive(Debug, Clone)]
pub struct MirroredBuffer<T> {
    host: Vec<T>,
    device: Option<Vec<T>>,
    validity: Validity,
    host_memtype: MemType,
    device_id: usize,
    outstanding: Vec<Access>,
    next_id: u64,
}

impl<T: Copy + Default> MirroredBuffer<T> {
    /// A host-valid buffer in pinned memory.
    pub fn from_vec(data: Vec<T>) -> Self {
        Self::with_memtype(data, MemType::HostPinned, 0)
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![T::default(); len])
    }

    pub fn with_memtype(data: Vec<T>, host_memtype: MemType, device_id: usize) -> Self {
        MirroredBuffer {
            host: data,
            device: None,
            validity: Validity::HostValid,
            host_memtype,
            device_id,
            outstanding: Vec::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.host.len()
    }

    pub fn is_empty(&self) -> bool {
        self.host.is_empty()
    }

    pub fn validity(&self) -> Validity {
        self.validity
    }

    pub fn host_memtype(&self) -> MemType {
        self.host_memtype
    }

    pub fn device_id(&self) -> usize {
        self.device_id
    }

    pub fn has_device_storage(&self) -> bool {
        self.device.is_some()
    }

    pub fn elem_bytes(&self) -> f64 {
        std::mem::size_of::<T>() as f64
    }

    fn bytes(&self) -> f64 {
        self.elem_bytes() * self.len() as f64
    }

    fn side_valid(&self, space: ExecSpace) -> bool {
        matches!(
            (space, self.validity),
            (_, Validity::BothValid)
                | (ExecSpace::Host, Validity::HostValid)
                | (ExecSpace::Device(_), Validity::DeviceValid)
        )
    }

    pub fn touch(&self) -> Touch {
        let ready = self.side_valid(ExecSpace::Device(self.device_id))
            || self.outstanding.iter().any(|a| a.space.is_device());
        Touch { device: self.device_id, device_ready: ready }
    }

    /// Memory type of the side that `space` would use.
    pub fn memtype_in(&self, space: ExecSpace) -> MemType {
        match space {
            ExecSpace::Host => self.host_memtype,
            ExecSpace::Device(_) => MemType::Device,
        }
    }

    pub fn get_access(
        &mut self,
        ctx: &mut ExecContext,
        space: ExecSpace,
        mode: AccessMode,
    ) -> Result<Access> {
        ctx.check_space(space)?;
        if let ExecSpace::Device(d) = space {
            if d != self.device_id {
                return usage(format!(
                    "buffer lives on device {} but device {d} was requested",
                    self.device_id
                ));
            }
        }
        let has_writer = self.outstanding.iter().any(|a| a.mode.writes());
        if has_writer || (mode.writes() && !self.outstanding.is_empty()) {
            return usage("conflicting outstanding access on buffer");
        }
        if space.is_device() && self.device.is_none() {
            self.device = Some(vec![T::default(); self.host.len()]);
        }
        if mode.reads() && !self.side_valid(space) {
            let pinned = !matches!(self.host_memtype, MemType::HostPageable);
            let label = if self.host_memtype == MemType::Unified { "page_migration" } else { "mirror" };
            match space {
                ExecSpace::Device(d) => {
                    ctx.transfer(TransferKind::H2D, d, self.bytes(), pinned, label);
                    self.device.as_mut().expect("allocated above").copy_from_slice(&self.host);
                }
                ExecSpace::Host => {
                    ctx.transfer(TransferKind::D2H, self.device_id, self.bytes(), pinned, label);
                    let dev = self.device.as_ref().expect("device side valid implies storage");
                    self.host.copy_from_slice(dev);
                }
            }
            self.validity = Validity::BothValid;
        }
        let acc = Access { id: self.next_id, space, mode };
        self.next_id += 1;
        self.outstanding.push(acc);
        Ok(acc)
    }

    pub fn restore_access(&mut self, acc: Access) -> Result<()> {
        let pos = self
            .outstanding
            .iter()
            .position(|a| a.id == acc.id)
            .ok_or_else(|| Error::Usage("restore of an access that is not outstanding".into()))?;
        self.outstanding.swap_remove(pos);
        if acc.mode.writes() {
            self.validity = match acc.space {
                ExecSpace::Host => Validity::HostValid,
                ExecSpace::Device(_) => Validity::DeviceValid,
            };
        }
        Ok(())
    }

    fn check(&self, acc: &Access) {
        assert!(
            self.outstanding.iter().any(|a| a.id == acc.id),
            "access handle is not outstanding on this buffer"
        );
    }

    /// The storage granted by `acc`. Panics if `acc` is not outstanding.
    pub fn view(&self, acc: &Access) -> &[T] {
        self.check(acc);
        match acc.space {
            ExecSpace::Host => &self.host,
            ExecSpace::Device(_) => self.device.as_deref().expect("device storage allocated"),
        }
    }

    /// Mutable storage granted by a writing `acc`. Panics on a read-only
    /// handle.
    pub fn view_mut(&mut self, acc: &Access) -> &mut [T] {
        self.check(acc);
        assert!(acc.mode.writes(), "mutable view requested through a read-only access");
        match acc.space {
            ExecSpace::Host => &mut self.host,
            ExecSpace::Device(_) => self.device.as_deref_mut().expect("device storage allocated"),
        }
    }

    /// Current contents without charging anything (reads whichever side is
    /// valid). For inspection in tests and drivers.
    pub fn contents(&self) -> Vec<T> {
        match self.validity {
            Validity::DeviceValid => self.device.clone().expect("device valid"),
            _ => self.host.clone(),
        }
    }

    /// Copies the valid contents to the host side through a read access.
    pub fn read_host(&mut self, ctx: &mut ExecContext) -> Result<Vec<T>> {
        let a = self.get_access(ctx, ExecSpace::Host, AccessMode::Read)?;
        let v = self.view(&a).to_vec();
        self.restore_access(a)?;
        Ok(v)
    }

    /// True when both sides hold identical data wherever both are valid.
    pub fn coherent(&self) -> bool
    where
        T: PartialEq,
    {
        match (self.validity, &self.device) {
            (Validity::BothValid, Some(d)) => d == &self.host,
            (Validity::BothValid, None) => false,
            (Validity::DeviceValid, None) => false,
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> ExecContext {
        ExecContext::new(0, CostParams::default(), 1)
    }

    const DEV: ExecSpace = ExecSpace::Device(0);

    #[test]
    fn device_read_of_host_valid_copies_once() {
        let mut c = ctx();
        let mut b = MirroredBuffer::from_vec(vec![1.0f64; 8]);
        let a = b.get_access(&mut c, DEV, AccessMode::Read).unwrap();
        assert_eq!(c.log().count(EventKind::H2D), 1);
        assert_eq!(b.validity(), Validity::BothValid);
        b.restore_access(a).unwrap();
        assert_eq!(b.validity(), Validity::BothValid);
        let a = b.get_access(&mut c, DEV, AccessMode::Read).unwrap();
        b.restore_access(a).unwrap();
        assert_eq!(c.log().count(EventKind::H2D), 1);
        assert!(b.coherent());
    }

    #[test]
    fn host_write_on_valid_side_does_not_copy() {
        let mut c = ctx();
        let mut b = MirroredBuffer::from_vec(vec![1.0f64; 8]);
        let a = b.get_access(&mut c, ExecSpace::Host, AccessMode::Write).unwrap();
        b.restore_access(a).unwrap();
        assert!(c.log().is_empty());
        assert_eq!(b.validity(), Validity::HostValid);
    }

    #[test]
    fn device_write_only_flags_host_invalid() {
        let mut c = ctx();
        let mut b = MirroredBuffer::from_vec(vec![1.0f64; 8]);
        let a = b.get_access(&mut c, DEV, AccessMode::Write).unwrap();
        b.view_mut(&a).fill(3.0);
        b.restore_access(a).unwrap();
        assert_eq!(c.log().count(EventKind::H2D) + c.log().count(EventKind::D2H), 0);
        assert_eq!(b.validity(), Validity::DeviceValid);
        assert_eq!(b.read_host(&mut c).unwrap(), vec![3.0; 8]);
        assert_eq!(c.log().count(EventKind::D2H), 1);
    }

    #[test]
    fn read_write_leaves_only_requested_side_valid() {
        let mut c = ctx();
        let mut b = MirroredBuffer::from_vec(vec![1.0f64; 4]);
        let a = b.get_access(&mut c, DEV, AccessMode::ReadWrite).unwrap();
        assert_eq!(b.view(&a), &[1.0; 4]);
        b.restore_access(a).unwrap();
        assert_eq!(b.validity(), Validity::DeviceValid);
    }

    #[test]
    fn access_conflicts_and_double_restore() {
        let mut c = ctx();
        let mut b = MirroredBuffer::from_vec(vec![0i64; 4]);
        let r1 = b.get_access(&mut c, ExecSpace::Host, AccessMode::Read).unwrap();
        let r2 = b.get_access(&mut c, ExecSpace::Host, AccessMode::Read).unwrap();
        assert!(matches!(
            b.get_access(&mut c, ExecSpace::Host, AccessMode::Write),
            Err(Error::Usage(_))
        ));
        b.restore_access(r1).unwrap();
        b.restore_access(r2).unwrap();
        assert_eq!(b.validity(), Validity::HostValid);
        assert!(matches!(b.restore_access(r2), Err(Error::Usage(_))));
        let w = b.get_access(&mut c, ExecSpace::Host, AccessMode::Write).unwrap();
        assert!(b.get_access(&mut c, ExecSpace::Host, AccessMode::Read).is_err());
        b.restore_access(w).unwrap();
    }

    #[test]
    fn device_access_without_device_is_config_error() {
        let mut c = ExecContext::new(0, CostParams::default(), 0);
        let mut b = MirroredBuffer::from_vec(vec![0.0f64; 4]);
        assert!(matches!(b.get_access(&mut c, DEV, AccessMode::Read), Err(Error::Config(_))));
    }

    #[test]
    fn kernels_charge_launch_to_host_and_duration_to_stream() {
        let mut c = ctx();
        let s = c.default_stream(0);
        c.enqueue_kernel(s, EventKind::Kernel, "axpy", 24e6, 2e6, &[]).unwrap();
        assert!((c.host_time() - 11e-6).abs() < 1e-15);
        assert!((c.stream_completion(s) - (11e-6 + 24e6 / 900e9)).abs() < 1e-15);
        c.enqueue_kernel(s, EventKind::Kernel, "axpy", 24e6, 2e6, &[]).unwrap();
        let k: Vec<_> = c.log().iter().filter(|e| e.kind == EventKind::Kernel).collect();
        assert!(k[1].start >= k[0].start + k[0].duration);
        let before = c.stream_completion(s);
        let host = c.host_time();
        c.enqueue_kernel(s, EventKind::Kernel, "empty", 0.0, 0.0, &[]).unwrap();
        assert!((c.host_time() - host - 11e-6).abs() < 1e-15);
        assert_eq!(c.stream_completion(s), before.max(c.host_time()));
    }

    #[test]
    fn kernel_on_foreign_device_buffer_rejected() {
        let mut c = ExecContext::new(0, CostParams::default(), 2);
        let b = MirroredBuffer::<f64>::with_memtype(vec![0.0; 2], MemType::HostPinned, 1);
        let s = c.default_stream(0);
        let t = Touch { device: b.device_id(), device_ready: true };
        assert!(c.enqueue_kernel(s, EventKind::Kernel, "k", 0.0, 0.0, &[t]).is_err());
    }

    #[test]
    fn stream_sync_rules() {
        let p = CostParams::default();
        let mut c = ctx();
        let s = c.default_stream(0);
        c.sync_stream(s);
        assert!((c.host_time() - p.t_stream_sync).abs() < 1e-15);

        let mut c = ctx();
        // Queue finishing 10 us after the host clock.
        let bytes = 10e-6 * p.bw_device_mem;
        c.enqueue_kernel(s, EventKind::Kernel, "k", bytes, 0.0, &[]).unwrap();
        let done = c.stream_completion(s);
        assert!((done - c.host_time() - 10e-6).abs() < 1e-12);
        c.sync_stream(s);
        assert!((c.host_time() - (done + p.t_stream_sync)).abs() < 1e-15);
    }

    #[test]
    fn device_sync_waits_for_all_streams() {
        let mut c = ctx();
        let s0 = c.default_stream(0);
        let s1 = c.create_stream(0).unwrap();
        c.enqueue_kernel(s0, EventKind::Kernel, "a", 1e6, 0.0, &[]).unwrap();
        c.enqueue_kernel(s1, EventKind::Kernel, "b", 9e6, 0.0, &[]).unwrap();
        c.sync_device(0);
        assert!(c.host_time() >= c.stream_completion(s0));
        assert!(c.host_time() >= c.stream_completion(s1));
        assert!(!c.has_pending(0));
    }

    #[test]
    fn memtype_queries_charge_only_untagged() {
        let mut c = ctx();
        assert_eq!(c.memtype_of(&DataLoc::tagged(MemType::Device)), MemType::Device);
        assert_eq!(c.host_time(), 0.0);
        c.memtype_of(&DataLoc::untagged(MemType::Device));
        c.memtype_of(&DataLoc::untagged(MemType::Device));
        assert!((c.host_time() - 2e-6).abs() < 1e-15);
    }

    #[test]
    fn unified_memory_migrates_implicitly() {
        let mut c = ctx();
        let mut b = MirroredBuffer::with_memtype(vec![2.0f64; 4], MemType::Unified, 0);
        let a = b.get_access(&mut c, DEV, AccessMode::Read).unwrap();
        b.restore_access(a).unwrap();
        assert_eq!(c.log().events[0].label, "page_migration");
        assert!(b.coherent());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn op() -> impl Strategy<Value = (bool, u8)> {
            (any::<bool>(), 0u8..3)
        }

        proptest! {
            #[test]
            fn coherence_and_read_stability(ops in prop::collection::vec(op(), 1..40)) {
                let mut c = ctx();
                let mut b = MirroredBuffer::from_vec(vec![0.0f64; 5]);
                let mut stamp = 0.0;
                for (on_device, m) in ops {
                    let space = if on_device { DEV } else { ExecSpace::Host };
                    let mode = [AccessMode::Read, AccessMode::Write, AccessMode::ReadWrite][m as usize];
                    let before = b.validity();
                    let transfers = c.log().len();
                    let a = b.get_access(&mut c, space, mode).unwrap();
                    if mode.writes() {
                        stamp += 1.0;
                        b.view_mut(&a).fill(stamp);
                    }
                    b.restore_access(a).unwrap();
                    prop_assert!(b.coherent());
                    prop_assert_eq!(b.contents(), vec![stamp; 5]);
                    if mode == AccessMode::Read {
                        prop_assert!(c.log().len() - transfers <= 1);
                        if before == Validity::BothValid {
                            prop_assert_eq!(b.validity(), Validity::BothValid);
                        }
                    }
                }
            }
        }
    }
}
