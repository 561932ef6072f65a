//! Structured 1D/2D grids distributed over a process grid.
//!
//! Global vectors are numbered rank by rank, x fastest inside each rank's
//! box. Local (ghosted) vectors cover the owned box grown by the stencil
//! width, corners included; the star-stencil exchange fills the side strips
//! only. The ghost exchange is a star forest whose leaves are enumerated
//! strip by strip so that every neighbor's part is a short list of boxes.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::costmodel::EventKind;
use crate::error::{shape, usage, Error, Result};
use crate::exec::{Access, AccessMode, DataLoc, ExecSpace, MirroredBuffer};
use crate::mat::{CsrMatrix, InsertMode};
use crate::starforest::{self, BoxDesc, CommPlan, IndexPattern, PartShape, Pending, PlanShape, ReduceOp, StarForest};
use crate::transport::Rank;
use crate::vec::{DistVec, Layout};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// One entry per dimension (1 or 2).
    pub extents: Vec<usize>,
    pub periodic: Vec<bool>,
    #[serde(default = "one")]
    pub stencil_width: usize,
    /// Ranks per axis; chosen automatically when absent.
    #[serde(default)]
    pub procs: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

impl GridSpec {
    pub fn d1(n: usize, periodic: bool) -> Self {
        GridSpec { extents: vec![n], periodic: vec![periodic], stencil_width: 1, procs: None }
    }

    pub fn d2(nx: usize, ny: usize, periodic: bool) -> Self {
        GridSpec { extents: vec![nx, ny], periodic: vec![periodic; 2], stencil_width: 1, procs: None }
    }

    pub fn with_procs(mut self, procs: Vec<usize>) -> Self {
        self.procs = Some(procs);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("grid spec: {e}")))
    }

    /// Vertex doubling: `2n - 1` points per non-periodic axis, `2n` per periodic one.
    pub fn refined(&self) -> Self {
        let extents = self.extents.iter().zip(&self.periodic).map(|(&n, &p)| if p { 2 * n } else { 2 * n - 1 }).collect();
        GridSpec { extents, ..self.clone() }
    }
}

/// `(xs, xm, ys, ym)`: first owned index and owned count per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corners {
    pub xs: usize,
    pub xm: usize,
    pub ys: usize,
    pub ym: usize,
}

fn boxes_len(boxes: &[BoxDesc]) -> usize {
    boxes.iter().map(|b| b.extents[0] * b.extents[1]).sum()
}

#[derive(Debug, Clone, Copy)]
struct Strip {
    owner: usize,
    leaf: BoxDesc,
    root: BoxDesc,
}

/// Near-square factorization `px * py = p`, `px >= py`.
fn auto_procs(p: usize, dim: usize) -> [usize; 2] {
    if dim == 1 {
        return [p, 1];
    }
    let mut py = (p as f64).sqrt() as usize;
    while py > 1 && !p.is_multiple_of(py) {
        py -= 1;
    }
    [p / py.max(1), py.max(1)]
}

#[derive(Debug)]
pub struct StructuredGrid {
    spec: GridSpec,
    dim: usize,
    n: [usize; 2],
    periodic: [bool; 2],
    sw: usize,
    procs: [usize; 2],
    bounds: [Vec<usize>; 2],
    rank: usize,
    layout: Arc<Layout>,
    plan: CommPlan,
}

impl StructuredGrid {
    /// Collective: partitions the grid and builds the ghost-exchange plan.
    pub fn create(rank: &mut Rank, spec: &GridSpec) -> Result<Self> {
        let mut g = Self::geometry(spec, rank.size(), rank.id())?;
        let sf = g.ghost_forest(rank.size())?;
        g.plan = starforest::setup(rank, &sf)?;
        Ok(g)
    }

    /// Shape of rank `me`'s ghost-exchange plan, derived from the strip
    /// boxes without enumerating any index.
    pub fn ghost_shape(spec: &GridSpec, nranks: usize, me: usize) -> Result<PlanShape> {
        let g = Self::geometry(spec, nranks, me)?;
        let strips = g.strips_of(me);
        let mut leaf_parts = Vec::new();
        let mut root_parts = Vec::new();
        for r in (0..nranks).filter(|&r| r != me) {
            let boxes: Vec<BoxDesc> = strips.iter().filter(|s| s.owner == r).map(|s| s.leaf).collect();
            if !boxes.is_empty() {
                leaf_parts.push(PartShape { rank: r, len: boxes_len(&boxes), pattern: IndexPattern::from_boxes(&boxes) });
            }
            let boxes: Vec<BoxDesc> = g.strips_of(r).into_iter().filter(|s| s.owner == me).map(|s| s.root).collect();
            if !boxes.is_empty() {
                root_parts.push(PartShape { rank: r, len: boxes_len(&boxes), pattern: IndexPattern::from_boxes(&boxes) });
            }
        }
        let own: Vec<&Strip> = strips.iter().filter(|s| s.owner == me).collect();
        let leaf_boxes: Vec<BoxDesc> = own.iter().map(|s| s.leaf).collect();
        let root_boxes: Vec<BoxDesc> = own.iter().map(|s| s.root).collect();
        Ok(PlanShape {
            leaf_parts,
            root_parts,
            local: boxes_len(&leaf_boxes),
            local_root_pattern: IndexPattern::from_boxes(&root_boxes),
            local_leaf_pattern: IndexPattern::from_boxes(&leaf_boxes),
        })
    }

    /// Partition and geometry of rank `me` in a world of `p`, with an empty
    /// exchange plan.
    fn geometry(spec: &GridSpec, p: usize, me: usize) -> Result<Self> {
        let dim = spec.extents.len();
        if !(1..=2).contains(&dim) || spec.periodic.len() != dim {
            return Err(Error::Config(format!("grid needs 1 or 2 extents with matching periodicity, got {spec:?}")));
        }
        if spec.extents.contains(&0) {
            return Err(Error::Config("empty grid".into()));
        }
        if spec.stencil_width == 0 {
            return Err(Error::Config("stencil width must be at least 1".into()));
        }
        let procs = match &spec.procs {
            Some(v) if v.len() == dim => [v[0], if dim == 2 { v[1] } else { 1 }],
            Some(v) => return Err(Error::Config(format!("process grid {v:?} for a {dim}D grid"))),
            None => auto_procs(p, dim),
        };
        if procs[0] * procs[1] != p {
            return Err(Error::Config(format!("process grid {procs:?} does not match {p} ranks")));
        }
        let n = [spec.extents[0], if dim == 2 { spec.extents[1] } else { 1 }];
        if procs[0] > n[0] || procs[1] > n[1] {
            return Err(Error::Config(format!("more ranks than cells: {procs:?} ranks for {n:?} points")));
        }
        let periodic = [spec.periodic[0], dim == 2 && spec.periodic[1]];
        let split = |len: usize, k: usize| -> Vec<usize> {
            (0..=k).map(|i| i * (len / k) + i.min(len % k)).collect()
        };
        let bounds = [split(n[0], procs[0]), split(n[1], procs[1])];
        let sizes = (0..p).map(|r| {
            let (cx, cy) = (r % procs[0], r / procs[0]);
            (bounds[0][cx + 1] - bounds[0][cx]) * (bounds[1][cy + 1] - bounds[1][cy])
        });
        let layout = Arc::new(Layout::from_sizes(sizes));
        Ok(StructuredGrid {
            spec: spec.clone(),
            dim,
            n,
            periodic,
            sw: spec.stencil_width,
            procs,
            bounds,
            rank: me,
            layout,
            plan: CommPlan::empty(me),
        })
    }

    /// The next finer grid of a hierarchy, on the same process grid.
    pub fn refine(&self, rank: &mut Rank) -> Result<Self> {
        let spec = self.spec.refined().with_procs(self.procs[..self.dim].to_vec());
        Self::create(rank, &spec)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> [usize; 2] {
        self.n
    }

    pub fn periodic(&self) -> [bool; 2] {
        self.periodic
    }

    pub fn procs(&self) -> [usize; 2] {
        self.procs
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn plan(&self) -> &CommPlan {
        &self.plan
    }

    fn coords(&self, r: usize) -> [usize; 2] {
        [r % self.procs[0], r / self.procs[0]]
    }

    fn owned(&self, r: usize, axis: usize) -> Range<usize> {
        let c = self.coords(r)[axis];
        self.bounds[axis][c]..self.bounds[axis][c + 1]
    }

    pub fn corners_of(&self, r: usize) -> Corners {
        let (x, y) = (self.owned(r, 0), self.owned(r, 1));
        Corners { xs: x.start, xm: x.len(), ys: y.start, ym: y.len() }
    }

    pub fn corners(&self) -> Corners {
        self.corners_of(self.rank)
    }

    /// Unwrapped ghosted range along `axis` for rank `r`.
    fn ghost_range(&self, r: usize, axis: usize) -> Range<isize> {
        let o = self.owned(r, axis);
        if axis >= self.dim {
            return o.start as isize..o.end as isize;
        }
        let w = self.sw as isize;
        if self.periodic[axis] {
            o.start as isize - w..o.end as isize + w
        } else {
            (o.start as isize - w).max(0)..(o.end as isize + w).min(self.n[axis] as isize)
        }
    }

    /// `(gxs, gxm, gys, gym)` of the local vector, in unwrapped coordinates.
    pub fn ghost_corners(&self) -> (isize, usize, isize, usize) {
        let (x, y) = (self.ghost_range(self.rank, 0), self.ghost_range(self.rank, 1));
        (x.start, x.len(), y.start, y.len())
    }

    pub fn local_len(&self) -> usize {
        let (_, gxm, _, gym) = self.ghost_corners();
        gxm * gym
    }

    fn axis_owner(&self, axis: usize, w: usize) -> usize {
        self.bounds[axis].partition_point(|&b| b <= w) - 1
    }

    pub fn owner_of(&self, x: usize, y: usize) -> usize {
        self.axis_owner(0, x) + self.procs[0] * self.axis_owner(1, y)
    }

    /// Global vector index of grid point `(x, y)`.
    pub fn global_index(&self, x: usize, y: usize) -> usize {
        let o = self.owner_of(x, y);
        let c = self.corners_of(o);
        self.layout.range(o).start + (y - c.ys) * c.xm + (x - c.xs)
    }

    /// Inverse of [`global_index`](Self::global_index).
    pub fn point_of(&self, g: usize) -> (usize, usize) {
        let o = self.layout.owner(g).expect("index inside the grid");
        let c = self.corners_of(o);
        let k = g - self.layout.range(o).start;
        (c.xs + k % c.xm, c.ys + k / c.xm)
    }

    /// Wraps or rejects a neighbor coordinate.
    fn wrap(&self, axis: usize, u: isize) -> Option<usize> {
        let n = self.n[axis] as isize;
        if self.periodic[axis] {
            Some(u.rem_euclid(n) as usize)
        } else if (0..n).contains(&u) {
            Some(u as usize)
        } else {
            None
        }
    }

    fn strips_of(&self, r: usize) -> Vec<Strip> {
        let c = self.corners_of(r);
        let (gx, gy) = (self.ghost_range(r, 0), self.ghost_range(r, 1));
        let gxm = gx.len();
        let lx = |x: isize| (x - gx.start) as usize;
        let ly = |y: isize| (y - gy.start) as usize;
        let mut strips = vec![Strip {
            owner: r,
            leaf: BoxDesc { start: ly(c.ys as isize) * gxm + lx(c.xs as isize), extents: [c.xm, c.ym], strides: [1, gxm] },
            root: BoxDesc { start: 0, extents: [c.xm, c.ym], strides: [1, c.xm] },
        }];
        let me = self.coords(r);
        for axis in 0..self.dim {
            let own = self.owned(r, axis);
            let g = if axis == 0 { gx.clone() } else { gy.clone() };
            for side in [g.start..own.start as isize, own.end as isize..g.end] {
                // Split the side into runs with one owner and no wrap.
                let mut runs: Vec<(isize, usize, usize, usize)> = Vec::new();
                for u in side {
                    let w = self.wrap(axis, u).expect("ghost range is valid");
                    let oc = self.axis_owner(axis, w);
                    match runs.last_mut() {
                        Some((_, w0, len, c0)) if *c0 == oc && *w0 + *len == w => *len += 1,
                        _ => runs.push((u, w, 1, oc)),
                    }
                }
                for (u0, w0, len, oc) in runs {
                    let ocoords = if axis == 0 { [oc, me[1]] } else { [me[0], oc] };
                    let owner = ocoords[0] + self.procs[0] * ocoords[1];
                    let oc = self.corners_of(owner);
                    let (leaf, root) = if axis == 0 {
                        (
                            BoxDesc { start: ly(c.ys as isize) * gxm + lx(u0), extents: [len, c.ym], strides: [1, gxm] },
                            BoxDesc { start: (c.ys - oc.ys) * oc.xm + (w0 - oc.xs), extents: [len, c.ym], strides: [1, oc.xm] },
                        )
                    } else {
                        (
                            BoxDesc { start: ly(u0) * gxm + lx(c.xs as isize), extents: [c.xm, len], strides: [1, gxm] },
                            BoxDesc { start: (w0 - oc.ys) * oc.xm + (c.xs - oc.xs), extents: [c.xm, len], strides: [1, oc.xm] },
                        )
                    };
                    strips.push(Strip { owner, leaf, root });
                }
            }
        }
        strips
    }

    fn ghost_forest(&self, p: usize) -> Result<StarForest> {
        let me = self.rank;
        let strips = self.strips_of(me);
        let mut leaves = Vec::new();
        let mut remote = Vec::new();
        for s in &strips {
            leaves.extend(s.leaf.indices());
            remote.extend(s.root.indices().map(|k| (s.owner, k)));
        }
        let mut sf = StarForest::new(self.layout.local_len(me), leaves, remote)?;
        for r in 0..p {
            let boxes: Vec<BoxDesc> = strips.iter().filter(|s| s.owner == r).map(|s| s.leaf).collect();
            if !boxes.is_empty() {
                sf.hint_leaf_boxes(r, boxes);
            }
            let boxes: Vec<BoxDesc> =
                self.strips_of(r).into_iter().filter(|s| s.owner == me).map(|s| s.root).collect();
            if !boxes.is_empty() {
                sf.hint_root_boxes(r, boxes);
            }
        }
        Ok(sf)
    }

    pub fn create_global(&self, space: ExecSpace) -> DistVec {
        DistVec::zeros(self.layout.clone(), self.rank, space)
    }

    pub fn global_from_fn(&self, space: ExecSpace, f: impl Fn(usize, usize) -> f64) -> DistVec {
        DistVec::from_fn(self.layout.clone(), self.rank, space, |g| {
            let (x, y) = self.point_of(g);
            f(x, y)
        })
    }

    pub fn create_local(&self, space: ExecSpace) -> LocalVec {
        let (gxs, gxm, gys, gym) = self.ghost_corners();
        let device_id = match space {
            ExecSpace::Device(d) => d,
            ExecSpace::Host => 0,
        };
        LocalVec {
            buf: MirroredBuffer::with_memtype(vec![0.0; gxm * gym], crate::exec::MemType::HostPinned, device_id),
            space,
            origin: [gxs, gys],
            extents: [gxm, gym],
        }
    }

    fn check_pair(&self, g: &DistVec, l: &LocalVec) -> Result<()> {
        if g.layout().as_ref() != self.layout.as_ref() || g.rank() != self.rank {
            return shape("global vector does not belong to this grid");
        }
        if l.buf.len() != self.local_len() {
            return shape(format!("local vector has {} entries, grid needs {}", l.buf.len(), self.local_len()));
        }
        if g.space() != l.space {
            return usage("global and local vectors live in different spaces");
        }
        Ok(())
    }

    /// Starts filling `l` (owned part and side ghosts) from `g`.
    pub fn global_to_local_begin(&mut self, rank: &mut Rank, g: &mut DistVec, l: &mut LocalVec) -> Result<GhostUpdate> {
        self.check_pair(g, l)?;
        let loc = DataLoc::for_space(l.space);
        let ga = g.access(&mut rank.exec, AccessMode::Read)?;
        let la = l.buf.get_access(&mut rank.exec, l.space, AccessMode::Write)?;
        let pending = starforest::bcast_begin(
            rank,
            &mut self.plan,
            g.buffer().view(&ga),
            loc,
            l.buf.view_mut(&la),
            loc,
            ReduceOp::Replace,
        );
        match pending {
            Ok(p) => Ok(GhostUpdate { global: ga, local: la, pending: p }),
            Err(e) => {
                g.restore(ga)?;
                l.buf.restore_access(la)?;
                Err(e)
            }
        }
    }

    pub fn global_to_local_end(&mut self, rank: &mut Rank, g: &mut DistVec, l: &mut LocalVec, u: GhostUpdate) -> Result<()> {
        let loc = DataLoc::for_space(l.space);
        let r = starforest::bcast_end(rank, &mut self.plan, u.pending, l.buf.view_mut(&u.local), loc);
        g.restore(u.global)?;
        l.buf.restore_access(u.local)?;
        r
    }

    pub fn global_to_local(&mut self, rank: &mut Rank, g: &mut DistVec, l: &mut LocalVec) -> Result<()> {
        let u = self.global_to_local_begin(rank, g, l)?;
        self.global_to_local_end(rank, g, l, u)
    }

    /// Insert copies the owned part of `l` into `g`; Add sums every copy
    /// (owned and ghost) of a point into its owner.
    pub fn local_to_global(&mut self, rank: &mut Rank, l: &mut LocalVec, g: &mut DistVec, mode: InsertMode) -> Result<()> {
        self.check_pair(g, l)?;
        let loc = DataLoc::for_space(l.space);
        match mode {
            InsertMode::Insert => {
                let c = self.corners();
                let inner = self.strips_of(self.rank)[0].leaf;
                let la = l.buf.get_access(&mut rank.exec, l.space, AccessMode::Read)?;
                let ga = g.access(&mut rank.exec, AccessMode::Write)?;
                let src = l.buf.view(&la);
                let dst = g.buffer_mut().view_mut(&ga);
                for (d, s) in dst.iter_mut().zip(inner.indices()) {
                    *d = src[s];
                }
                let touches = [l.buf.touch(), g.buffer().touch()];
                l.buf.restore_access(la)?;
                g.restore(ga)?;
                let bytes = 16.0 * (c.xm * c.ym) as f64;
                match l.space {
                    ExecSpace::Host => {
                        rank.exec.host_kernel(EventKind::LocalScatter, "local_to_global", bytes, 0.0);
                        Ok(())
                    }
                    ExecSpace::Device(d) => {
                        let s = rank.exec.default_stream(d);
                        rank.exec.enqueue_kernel(s, EventKind::LocalScatter, "local_to_global", bytes, 0.0, &touches)
                    }
                }
            }
            InsertMode::Add => {
                let la = l.buf.get_access(&mut rank.exec, l.space, AccessMode::Read)?;
                let ga = g.access(&mut rank.exec, AccessMode::ReadWrite)?;
                let r = starforest::reduce(
                    rank,
                    &mut self.plan,
                    l.buf.view(&la),
                    loc,
                    g.buffer_mut().view_mut(&ga),
                    loc,
                    ReduceOp::Sum,
                );
                l.buf.restore_access(la)?;
                g.restore(ga)?;
                r
            }
        }
    }

    /// Star-stencil neighbors of `(x, y)` at distance 1, in axis order
    /// (-x, +x, -y, +y), skipping points outside a non-periodic domain.
    pub fn neighbors(&self, x: usize, y: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(4);
        for axis in 0..self.dim {
            for d in [-1isize, 1] {
                let (ux, uy) = if axis == 0 { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                let w = if axis == 0 { self.wrap(0, ux).map(|wx| (wx, y)) } else { self.wrap(1, uy).map(|wy| (x, wy)) };
                if let Some(p) = w {
                    out.push(p);
                }
            }
        }
        out
    }

    /// Owned grid points in global-index order.
    pub fn owned_points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let c = self.corners();
        (c.ys..c.ys + c.ym).flat_map(move |y| (c.xs..c.xs + c.xm).map(move |x| (x, y)))
    }

    /// Preallocated 3-point (1D) or 5-point (2D) matrix with zero values.
    pub fn create_matrix(&self, rank: &mut Rank, space: ExecSpace) -> Result<CsrMatrix> {
        let pattern = self
            .owned_points()
            .map(|(x, y)| {
                let mut cols = vec![self.global_index(x, y)];
                cols.extend(self.neighbors(x, y).into_iter().map(|(a, b)| self.global_index(a, b)));
                cols
            })
            .collect();
        CsrMatrix::with_pattern(rank, self.layout.clone(), self.layout.clone(), space, pattern)
    }

    /// Fills a fresh stencil matrix row by row with `row(x, y) -> (points, values)`
    /// in one insertion kernel.
    pub fn stencil_matrix<F>(&self, rank: &mut Rank, space: ExecSpace, row: F) -> Result<CsrMatrix>
    where
        F: Fn(usize, usize) -> (Vec<(usize, usize)>, Vec<f64>),
    {
        let mut a = self.create_matrix(rank, space)?;
        let rows = self.layout.range(self.rank);
        a.set_values_device(&mut rank.exec, rows, InsertMode::Insert, |g| {
            let (x, y) = self.point_of(g);
            let (pts, vals) = row(x, y);
            (pts.into_iter().map(|(a, b)| self.global_index(a, b)).collect(), vals)
        })?;
        Ok(a)
    }

    fn on_boundary(&self, x: usize, y: usize) -> bool {
        (0..self.dim).any(|a| {
            let v = if a == 0 { x } else { y };
            !self.periodic[a] && (v == 0 || v == self.n[a] - 1)
        })
    }

    fn spacing(&self, axis: usize) -> f64 {
        let n = self.n[axis] as f64;
        if self.periodic[axis] {
            1.0 / n
        } else {
            1.0 / (n - 1.0)
        }
    }

    /// `-Δ` with homogeneous Dirichlet conditions on non-periodic sides.
    /// Boundary rows keep only the diagonal and interior rows drop their
    /// boundary couplings, so the operator stays symmetric positive definite.
    pub fn poisson(&self, rank: &mut Rank, space: ExecSpace) -> Result<CsrMatrix> {
        self.convection_diffusion(rank, space, [0.0, 0.0])
    }

    /// `-Δu + v·∇u` with central differences (nonsymmetric for `v ≠ 0`).
    pub fn convection_diffusion(&self, rank: &mut Rank, space: ExecSpace, v: [f64; 2]) -> Result<CsrMatrix> {
        let inv2: Vec<f64> = (0..self.dim).map(|a| 1.0 / (self.spacing(a) * self.spacing(a))).collect();
        let diag: f64 = inv2.iter().map(|&s| 2.0 * s).sum();
        self.stencil_matrix(rank, space, |x, y| {
            if self.on_boundary(x, y) {
                return (vec![(x, y)], vec![diag]);
            }
            let mut pts = vec![(x, y)];
            let mut vals = vec![diag];
            for axis in 0..self.dim {
                let conv = v[axis] / (2.0 * self.spacing(axis));
                for d in [-1isize, 1] {
                    let u = if axis == 0 { x as isize + d } else { y as isize + d };
                    let Some(w) = self.wrap(axis, u) else { continue };
                    let p = if axis == 0 { (w, y) } else { (x, w) };
                    if self.on_boundary(p.0, p.1) {
                        continue;
                    }
                    pts.push(p);
                    vals.push(-inv2[axis] + d as f64 * conv);
                }
            }
            (pts, vals)
        })
    }

    /// Linear (1D) or bilinear (2D) interpolation from `coarse` to this grid.
    pub fn interpolation(&self, rank: &mut Rank, coarse: &StructuredGrid, space: ExecSpace) -> Result<CsrMatrix> {
        if coarse.dim != self.dim || coarse.periodic != self.periodic || coarse.procs != self.procs {
            return Err(Error::Config("grids are not nested".into()));
        }
        for a in 0..self.dim {
            let want = if self.periodic[a] { 2 * coarse.n[a] } else { 2 * coarse.n[a] - 1 };
            if self.n[a] != want {
                return Err(Error::Config(format!(
                    "axis {a}: fine grid has {} points, refinement of {} needs {want}",
                    self.n[a], coarse.n[a]
                )));
            }
        }
        let weights = |axis: usize, i: usize| -> Vec<(usize, f64)> {
            if axis >= self.dim {
                return vec![(0, 1.0)];
            }
            if i.is_multiple_of(2) {
                vec![(i / 2, 1.0)]
            } else {
                vec![((i - 1) / 2, 0.5), (i.div_ceil(2) % coarse.n[axis], 0.5)]
            }
        };
        let mut p = CsrMatrix::new(self.layout.clone(), coarse.layout.clone(), self.rank, space);
        for (x, y) in self.owned_points() {
            let row = self.global_index(x, y);
            for &(cy, wy) in &weights(1, y) {
                for &(cx, wx) in &weights(0, x) {
                    p.set_values(&[row], &[coarse.global_index(cx, cy)], &[wx * wy], InsertMode::Add)?;
                }
            }
        }
        p.assemble(rank)?;
        Ok(p)
    }

    /// `c` in `R = c Pᵀ`, chosen so restriction maps constants to constants.
    pub fn restriction_scale(&self) -> f64 {
        0.5f64.powi(self.dim as i32)
    }
}

/// A split-phase ghost update in flight.
#[must_use = "ghost updates must be completed"]
#[derive(Debug)]
pub struct GhostUpdate {
    global: Access,
    local: Access,
    pending: Pending<f64>,
}

/// Values over a rank's ghosted box.
#[derive(Debug, Clone)]
pub struct LocalVec {
    buf: MirroredBuffer<f64>,
    space: ExecSpace,
    origin: [isize; 2],
    extents: [usize; 2],
}

impl LocalVec {
    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn space(&self) -> ExecSpace {
        self.space
    }

    pub fn values(&self) -> Vec<f64> {
        self.buf.contents()
    }

    pub fn buffer(&self) -> &MirroredBuffer<f64> {
        &self.buf
    }

    pub fn buffer_mut(&mut self) -> &mut MirroredBuffer<f64> {
        &mut self.buf
    }

    /// Value at unwrapped coordinates `(x, y)` inside the ghosted box.
    pub fn at(&self, x: isize, y: isize) -> Option<f64> {
        let (lx, ly) = (x - self.origin[0], y - self.origin[1]);
        if lx < 0 || ly < 0 || lx as usize >= self.extents[0] || ly as usize >= self.extents[1] {
            return None;
        }
        Some(self.buf.contents()[ly as usize * self.extents[0] + lx as usize])
    }
}
