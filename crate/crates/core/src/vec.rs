//! Distributed vectors.
//!
//! Every rank owns a contiguous slice of the global index space, stored in a
//! [`MirroredBuffer`]. Elementwise operations run where the vector prefers to
//! live (one kernel per call); reductions add a synchronization and a
//! deterministic all-reduce.

use std::ops::Range;
use std::sync::Arc;

use crate::costmodel::EventKind;
use crate::error::{shape, usage, Result};
use crate::exec::{Access, AccessMode, ExecContext, ExecSpace, MirroredBuffer, Touch};
use crate::kernels;
use crate::transport::Rank;

/// Partition of `[0, global)` into one contiguous range per rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    global: usize,
    starts: Vec<usize>,
}

impl Layout {
    /// Block distribution; the first `n % p` ranks get one extra entry.
    pub fn uniform(n: usize, p: usize) -> Self {
        assert!(p > 0, "layout needs at least one rank");
        let sizes = (0..p).map(|r| n / p + usize::from(r < n % p));
        Self::from_sizes(sizes)
    }

    pub fn from_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut starts = vec![0];
        for s in sizes {
            starts.push(starts.last().copied().unwrap_or(0) + s);
        }
        Layout { global: *starts.last().unwrap_or(&0), starts }
    }

    pub fn global_len(&self) -> usize {
        self.global
    }

    pub fn nranks(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn range(&self, rank: usize) -> Range<usize> {
        self.starts[rank]..self.starts[rank + 1]
    }

    pub fn local_len(&self, rank: usize) -> usize {
        self.starts[rank + 1] - self.starts[rank]
    }

    /// Rank owning global index `i`.
    pub fn owner(&self, i: usize) -> Option<usize> {
        if i >= self.global {
            return None;
        }
        Some(self.starts.partition_point(|&s| s <= i) - 1)
    }
}

#[derive(Debug, Clone)]
pub struct DistVec {
    layout: Arc<Layout>,
    rank: usize,
    space: ExecSpace,
    buf: MirroredBuffer<f64>,
}

impl DistVec {
    pub fn zeros(layout: Arc<Layout>, rank: usize, space: ExecSpace) -> Self {
        let n = layout.local_len(rank);
        Self::from_local(layout, rank, vec![0.0; n], space).expect("length matches layout")
    }

    pub fn from_local(layout: Arc<Layout>, rank: usize, values: Vec<f64>, space: ExecSpace) -> Result<Self> {
        if values.len() != layout.local_len(rank) {
            return shape(format!(
                "rank {rank} owns {} entries, got {}",
                layout.local_len(rank),
                values.len()
            ));
        }
        let device_id = match space {
            ExecSpace::Device(d) => d,
            ExecSpace::Host => 0,
        };
        let buf = MirroredBuffer::with_memtype(values, crate::exec::MemType::HostPinned, device_id);
        Ok(DistVec { layout, rank, space, buf })
    }

    /// Entries given by a function of the global index.
    pub fn from_fn(layout: Arc<Layout>, rank: usize, space: ExecSpace, f: impl Fn(usize) -> f64) -> Self {
        let vals = layout.range(rank).map(f).collect();
        Self::from_local(layout, rank, vals, space).expect("length matches layout")
    }

    /// A zero vector with the same layout, rank and space.
    pub fn duplicate(&self) -> Self {
        Self::zeros(self.layout.clone(), self.rank, self.space)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn space(&self) -> ExecSpace {
        self.space
    }

    pub fn set_space(&mut self, space: ExecSpace) {
        self.space = space;
    }

    pub fn local_len(&self) -> usize {
        self.buf.len()
    }

    pub fn owned_range(&self) -> Range<usize> {
        self.layout.range(self.rank)
    }

    pub fn buffer(&self) -> &MirroredBuffer<f64> {
        &self.buf
    }

    pub fn buffer_mut(&mut self) -> &mut MirroredBuffer<f64> {
        &mut self.buf
    }

    /// Owned values, without charging any transfer.
    pub fn values(&self) -> Vec<f64> {
        self.buf.contents()
    }

    /// Owned values read on the host (charges a copy if the host side is stale).
    pub fn read(&mut self, ctx: &mut ExecContext) -> Result<Vec<f64>> {
        self.buf.read_host(ctx)
    }

    /// Overwrites the owned values from the host.
    pub fn write(&mut self, ctx: &mut ExecContext, values: &[f64]) -> Result<()> {
        if values.len() != self.local_len() {
            return shape(format!("write of {} values into {} entries", values.len(), self.local_len()));
        }
        let a = self.buf.get_access(ctx, ExecSpace::Host, AccessMode::Write)?;
        self.buf.view_mut(&a).copy_from_slice(values);
        self.buf.restore_access(a)
    }

    pub fn access(&mut self, ctx: &mut ExecContext, mode: AccessMode) -> Result<Access> {
        self.buf.get_access(ctx, self.space, mode)
    }

    pub fn restore(&mut self, acc: Access) -> Result<()> {
        self.buf.restore_access(acc)
    }

    /// Gathers the whole vector on every rank (rank order).
    pub fn gather(&mut self, rank: &mut Rank) -> Result<Vec<f64>> {
        let mine = self.read(&mut rank.exec)?.into_iter().map(f64::to_bits).collect();
        let all = rank.allgather(mine)?;
        Ok(all.into_iter().flatten().map(f64::from_bits).collect())
    }

    fn touch(&self) -> Touch {
        self.buf.touch()
    }
}

fn compatible(a: &DistVec, b: &DistVec) -> Result<()> {
    if !(Arc::ptr_eq(&a.layout, &b.layout) || a.layout == b.layout) || a.rank != b.rank {
        return shape("vector layouts differ");
    }
    if a.space != b.space {
        return usage(format!("vectors prefer different spaces ({:?} vs {:?})", a.space, b.space));
    }
    Ok(())
}

/// Charges one elementwise kernel touching `accesses` vectors of length `n`.
fn charge(ctx: &mut ExecContext, space: ExecSpace, label: &str, accesses: usize, n: usize, flops: f64, touches: &[Touch]) -> Result<()> {
    let bytes = 8.0 * (accesses * n) as f64;
    match space {
        ExecSpace::Host => {
            ctx.host_kernel(EventKind::Kernel, label, bytes, flops);
            Ok(())
        }
        ExecSpace::Device(d) => {
            let s = ctx.default_stream(d);
            ctx.enqueue_kernel(s, EventKind::Kernel, label, bytes, flops, touches)
        }
    }
}

/// `y <- alpha x + y`
pub fn axpy(ctx: &mut ExecContext, y: &mut DistVec, alpha: f64, x: &mut DistVec) -> Result<()> {
    compatible(x, y)?;
    let ax = x.access(ctx, AccessMode::Read)?;
    let ay = y.access(ctx, AccessMode::ReadWrite)?;
    kernels::axpy(y.buf.view_mut(&ay), alpha, x.buf.view(&ax));
    let n = y.local_len();
    charge(ctx, y.space, "axpy", 3, n, 2.0 * n as f64, &[x.touch(), y.touch()])?;
    x.restore(ax)?;
    y.restore(ay)
}

/// `y <- x + beta y`
pub fn aypx(ctx: &mut ExecContext, y: &mut DistVec, beta: f64, x: &mut DistVec) -> Result<()> {
    compatible(x, y)?;
    let ax = x.access(ctx, AccessMode::Read)?;
    let ay = y.access(ctx, AccessMode::ReadWrite)?;
    let xs = x.buf.view(&ax);
    kernels::map_inplace(y.buf.view_mut(&ay), |i, v| *v = xs[i] + beta * *v);
    let n = y.local_len();
    charge(ctx, y.space, "aypx", 3, n, 2.0 * n as f64, &[x.touch(), y.touch()])?;
    x.restore(ax)?;
    y.restore(ay)
}

/// `w <- alpha x + y`
pub fn waxpy(ctx: &mut ExecContext, w: &mut DistVec, alpha: f64, x: &mut DistVec, y: &mut DistVec) -> Result<()> {
    compatible(w, x)?;
    compatible(w, y)?;
    let ax = x.access(ctx, AccessMode::Read)?;
    let ay = y.access(ctx, AccessMode::Read)?;
    let aw = w.access(ctx, AccessMode::Write)?;
    let (xs, ys) = (x.buf.view(&ax), y.buf.view(&ay));
    kernels::map_inplace(w.buf.view_mut(&aw), |i, v| *v = alpha * xs[i] + ys[i]);
    let n = w.local_len();
    charge(ctx, w.space, "waxpy", 3, n, 2.0 * n as f64, &[x.touch(), y.touch(), w.touch()])?;
    x.restore(ax)?;
    y.restore(ay)?;
    w.restore(aw)
}

/// `dst <- src`
pub fn copy(ctx: &mut ExecContext, src: &mut DistVec, dst: &mut DistVec) -> Result<()> {
    compatible(src, dst)?;
    let a = src.access(ctx, AccessMode::Read)?;
    let b = dst.access(ctx, AccessMode::Write)?;
    dst.buf.view_mut(&b).copy_from_slice(src.buf.view(&a));
    let n = dst.local_len();
    charge(ctx, dst.space, "copy", 2, n, 0.0, &[src.touch(), dst.touch()])?;
    src.restore(a)?;
    dst.restore(b)
}

/// `x <- a x`
pub fn scale(ctx: &mut ExecContext, x: &mut DistVec, a: f64) -> Result<()> {
    let acc = x.access(ctx, AccessMode::ReadWrite)?;
    kernels::map_inplace(x.buf.view_mut(&acc), |_, v| *v *= a);
    let n = x.local_len();
    let t = x.touch();
    charge(ctx, x.space, "scale", 2, n, n as f64, &[t])?;
    x.restore(acc)
}

pub fn set_scalar(ctx: &mut ExecContext, x: &mut DistVec, a: f64) -> Result<()> {
    let acc = x.access(ctx, AccessMode::Write)?;
    kernels::map_inplace(x.buf.view_mut(&acc), |_, v| *v = a);
    let n = x.local_len();
    let t = x.touch();
    charge(ctx, x.space, "set", 1, n, 0.0, &[t])?;
    x.restore(acc)
}

/// `w <- x .* y`
pub fn pointwise_mult(ctx: &mut ExecContext, w: &mut DistVec, x: &mut DistVec, y: &mut DistVec) -> Result<()> {
    compatible(w, x)?;
    compatible(w, y)?;
    let ax = x.access(ctx, AccessMode::Read)?;
    let ay = y.access(ctx, AccessMode::Read)?;
    let aw = w.access(ctx, AccessMode::Write)?;
    let (xs, ys) = (x.buf.view(&ax), y.buf.view(&ay));
    kernels::map_inplace(w.buf.view_mut(&aw), |i, v| *v = xs[i] * ys[i]);
    let n = w.local_len();
    charge(ctx, w.space, "pointwise_mult", 3, n, n as f64, &[x.touch(), y.touch(), w.touch()])?;
    x.restore(ax)?;
    y.restore(ay)?;
    w.restore(aw)
}

/// `y <- y + alpha (d .* x)`: the Jacobi/Richardson update in one pass.
pub fn pointwise_axpy(ctx: &mut ExecContext, y: &mut DistVec, alpha: f64, d: &mut DistVec, x: &mut DistVec) -> Result<()> {
    compatible(y, d)?;
    compatible(y, x)?;
    let ad = d.access(ctx, AccessMode::Read)?;
    let ax = x.access(ctx, AccessMode::Read)?;
    let ay = y.access(ctx, AccessMode::ReadWrite)?;
    let (ds, xs) = (d.buf.view(&ad), x.buf.view(&ax));
    kernels::map_inplace(y.buf.view_mut(&ay), |i, v| *v += alpha * ds[i] * xs[i]);
    let n = y.local_len();
    charge(ctx, y.space, "pointwise_axpy", 4, n, 3.0 * n as f64, &[d.touch(), x.touch(), y.touch()])?;
    d.restore(ad)?;
    x.restore(ax)?;
    y.restore(ay)
}

/// Elementwise reciprocal (zeros stay zero).
pub fn reciprocal(ctx: &mut ExecContext, x: &mut DistVec) -> Result<()> {
    let acc = x.access(ctx, AccessMode::ReadWrite)?;
    kernels::map_inplace(x.buf.view_mut(&acc), |_, v| {
        if *v != 0.0 {
            *v = 1.0 / *v
        }
    });
    let n = x.local_len();
    let t = x.touch();
    charge(ctx, x.space, "reciprocal", 2, n, n as f64, &[t])?;
    x.restore(acc)
}

/// Local partial, a synchronization to bring it to the host, then the
/// rank-ordered all-reduce.
fn reduce_local(rank: &mut Rank, space: ExecSpace, n: usize, accesses: usize, partial: f64, label: &str) -> Result<f64> {
    let ctx = &mut rank.exec;
    let bytes = 8.0 * (accesses * n) as f64;
    match space {
        ExecSpace::Host => ctx.host_kernel(EventKind::Kernel, label, bytes, 2.0 * n as f64),
        ExecSpace::Device(d) => {
            let s = ctx.default_stream(d);
            ctx.enqueue_kernel(s, EventKind::Kernel, label, bytes, 2.0 * n as f64, &[])?;
            ctx.sync_stream(s);
        }
    }
    rank.allreduce_sum(partial)
}

pub fn dot(rank: &mut Rank, x: &mut DistVec, y: &mut DistVec) -> Result<f64> {
    compatible(x, y)?;
    let ax = x.access(&mut rank.exec, AccessMode::Read)?;
    let ay = y.access(&mut rank.exec, AccessMode::Read)?;
    let partial = kernels::dot(x.buf.view(&ax), y.buf.view(&ay));
    x.restore(ax)?;
    y.restore(ay)?;
    reduce_local(rank, x.space, x.local_len(), 2, partial, "dot")
}

pub fn norm2(rank: &mut Rank, x: &mut DistVec) -> Result<f64> {
    let ax = x.access(&mut rank.exec, AccessMode::Read)?;
    let v = x.buf.view(&ax);
    let partial = kernels::dot(v, v);
    x.restore(ax)?;
    Ok(reduce_local(rank, x.space, x.local_len(), 1, partial, "norm")?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::CostParams;
    use crate::transport::{run, WorldConfig};

    const DEV: ExecSpace = ExecSpace::Device(0);

    fn ctx() -> ExecContext {
        ExecContext::new(0, CostParams::default(), 1)
    }

    fn single(n: usize, space: ExecSpace, f: impl Fn(usize) -> f64) -> DistVec {
        DistVec::from_fn(Arc::new(Layout::uniform(n, 1)), 0, space, f)
    }

    #[test]
    fn layout_partitions() {
        let l = Layout::uniform(10, 3);
        assert_eq!((l.range(0), l.range(1), l.range(2)), (0..4, 4..7, 7..10));
        assert_eq!(l.owner(6), Some(1));
        assert_eq!(l.owner(10), None);
        let e = Layout::uniform(0, 4);
        assert_eq!(e.owner(0), None);
        assert_eq!(e.local_len(3), 0);
    }

    #[test]
    fn axpy_semantics_and_cost() {
        let mut c = ctx();
        let mut x = single(4, ExecSpace::Host, |i| i as f64);
        let mut y = single(4, ExecSpace::Host, |_| 1.0);
        axpy(&mut c, &mut y, 0.0, &mut x).unwrap();
        assert_eq!(y.values(), vec![1.0; 4]);
        let mut y2 = x.clone();
        axpy(&mut c, &mut y2, 1.0, &mut x).unwrap();
        assert_eq!(y2.values(), vec![0.0, 2.0, 4.0, 6.0]);

        let n = 1_000_000;
        let mut c = ctx();
        let mut x = single(n, DEV, |_| 1.0);
        let mut y = single(n, DEV, |_| 2.0);
        let a0 = x.access(&mut c, AccessMode::Read).unwrap();
        x.restore(a0).unwrap();
        let a1 = y.access(&mut c, AccessMode::Read).unwrap();
        y.restore(a1).unwrap();
        let s = c.default_stream(0);
        c.sync_stream(s);
        let t0 = c.host_time();
        axpy(&mut c, &mut y, 3.0, &mut x).unwrap();
        c.sync_stream(s);
        let dt = c.host_time() - t0 - c.params().t_stream_sync;
        assert!((dt - (26.667e-6 + 11e-6)).abs() < 0.01e-6, "{dt}");
    }

    #[test]
    fn copy_to_axpy_ratio() {
        let n = 1 << 20;
        let p = CostParams::default();
        let mut c = ctx();
        let mut x = single(n, DEV, |_| 1.0);
        let mut y = single(n, DEV, |_| 0.0);
        copy(&mut c, &mut x, &mut y).unwrap();
        axpy(&mut c, &mut y, 1.0, &mut x).unwrap();
        let k: Vec<_> = c.log().iter().filter(|e| e.kind == EventKind::Kernel).map(|e| e.duration).collect();
        assert!((k[0] / k[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((k[1] - 24.0 * n as f64 / p.bw_device_mem).abs() < 1e-15);
        assert_eq!(y.values(), vec![2.0; n]);
    }

    #[test]
    fn device_chain_stays_on_device() {
        let mut c = ctx();
        let mut x = single(1000, DEV, |i| i as f64);
        let mut y = single(1000, DEV, |_| 0.0);
        axpy(&mut c, &mut y, 1.0, &mut x).unwrap();
        let mark = c.log().len();
        for _ in 0..10 {
            axpy(&mut c, &mut y, 0.5, &mut x).unwrap();
        }
        let moves = c.log().since(mark).iter().filter(|e| matches!(e.kind, EventKind::H2D | EventKind::D2H)).count();
        assert_eq!(moves, 0);
        assert_eq!(y.values()[10], 60.0);
    }

    #[test]
    fn pointwise_ops() {
        let mut c = ctx();
        let mut x = single(5, ExecSpace::Host, |i| i as f64 + 1.0);
        let mut y = single(5, ExecSpace::Host, |i| 10.0 * i as f64);
        let mut ones = single(5, ExecSpace::Host, |_| 1.0);
        let mut w = x.duplicate();
        pointwise_mult(&mut c, &mut w, &mut x, &mut ones).unwrap();
        assert_eq!(w.values(), x.values());
        waxpy(&mut c, &mut w, -1.0, &mut x, &mut y).unwrap();
        assert_eq!(w.values(), vec![-1.0, 8.0, 17.0, 26.0, 35.0]);
        set_scalar(&mut c, &mut w, 0.0).unwrap();
        assert_eq!(w.values(), vec![0.0; 5]);
        reciprocal(&mut c, &mut x).unwrap();
        assert_eq!(x.values()[3], 0.25);
        let mut z = single(4, ExecSpace::Host, |_| 0.0);
        assert!(matches!(axpy(&mut c, &mut z, 1.0, &mut y), Err(crate::Error::Shape(_))));
        let mut d = single(5, DEV, |_| 0.0);
        assert!(matches!(axpy(&mut c, &mut d, 1.0, &mut y), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn dot_and_norm_are_collective_and_exact() {
        for p in 1..5 {
            let out = run(&WorldConfig::new(p), |r| {
                let layout = Arc::new(Layout::uniform(37, r.size()));
                let mut x = DistVec::from_fn(layout.clone(), r.id(), DEV, |i| (i % 7) as f64);
                let mut y = DistVec::from_fn(layout, r.id(), DEV, |i| i as f64 - 10.0);
                let d = dot(r, &mut x, &mut y)?;
                let mut e = x.duplicate();
                let n = norm2(r, &mut e)?;
                Ok((d, n, x.gather(r)?.len()))
            })
            .unwrap();
            let want: f64 = (0..37).map(|i| ((i % 7) as f64) * (i as f64 - 10.0)).sum();
            for (d, n, len) in out.results {
                assert_eq!((d, n, len), (want, 0.0, 37));
            }
        }
    }
}
