//! Star-forest communication graphs.
//!
//! Each rank describes, for every one of its leaves, the (rank, offset) of
//! the root it hangs off. [`setup`] turns that into a [`CommPlan`]: edges to
//! roots on the same rank become a local scatter, the rest are grouped by
//! neighbor, and the index lists are analyzed so contiguous ranges skip
//! packing, rectangular boxes pack from a descriptor, and reductions know
//! whether any root has more than one leaf.
//!
//! Broadcast and reduce are split-phase. The local scatter goes to a second
//! device stream and overlaps the remote exchange; the end phase completes at
//! the later of the two.

use std::fmt::Debug;
use std::path::Path;

use crate::costmodel::EventKind;
use crate::error::{shape, usage, Error, Result};
use crate::exec::{DataLoc, ExecSpace, StreamId};
use crate::transport::{Rank, RecvRequest};

/// Element types that star forests can move (one 64-bit word each).
pub trait SfScalar: Copy + Default + PartialOrd + Debug + Send + Sync + 'static {
    fn to_word(self) -> u64;
    fn from_word(w: u64) -> Self;
    fn plus(self, other: Self) -> Self;
}

impl SfScalar for f64 {
    fn to_word(self) -> u64 {
        self.to_bits()
    }
    fn from_word(w: u64) -> Self {
        f64::from_bits(w)
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

impl SfScalar for i64 {
    fn to_word(self) -> u64 {
        self as u64
    }
    fn from_word(w: u64) -> Self {
        w as i64
    }
    fn plus(self, other: Self) -> Self {
        self.wrapping_add(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Replace,
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    /// `op(current, incoming)`.
    pub fn apply<T: SfScalar>(self, current: T, incoming: T) -> T {
        match self {
            ReduceOp::Replace => incoming,
            ReduceOp::Sum => current.plus(incoming),
            ReduceOp::Min => {
                if incoming < current {
                    incoming
                } else {
                    current
                }
            }
            ReduceOp::Max => {
                if incoming > current {
                    incoming
                } else {
                    current
                }
            }
        }
    }
}

/// A rectangular block of a row-major array: `extents[0]` fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoxDesc {
    pub start: usize,
    pub extents: [usize; 2],
    pub strides: [usize; 2],
}

impl BoxDesc {
    pub fn len(&self) -> usize {
        self.extents[0] * self.extents[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.extents[1]).flat_map(move |j| {
            (0..self.extents[0]).map(move |i| self.start + i * self.strides[0] + j * self.strides[1])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexPattern {
    /// `start..start+len`: used in place, no pack/unpack.
    Contiguous { start: usize, len: usize },
    /// Union of boxes; packing needs only the descriptors.
    Boxes(Vec<BoxDesc>),
    /// Arbitrary list; kernels read the index array.
    Indexed,
}

impl IndexPattern {
    fn detect(indices: &[usize], hint: Option<&Vec<BoxDesc>>) -> IndexPattern {
        if let Some(&first) = indices.first() {
            if indices.iter().enumerate().all(|(k, &i)| i == first + k) {
                return IndexPattern::Contiguous { start: first, len: indices.len() };
            }
        }
        if let Some(boxes) = hint {
            let mut it = boxes.iter().flat_map(|b| b.indices());
            if indices.iter().all(|&i| it.next() == Some(i)) && it.next().is_none() {
                return IndexPattern::Boxes(boxes.clone());
            }
        }
        if indices.is_empty() {
            return IndexPattern::Contiguous { start: 0, len: 0 };
        }
        IndexPattern::Indexed
    }

    /// The pattern `detect` finds for the indices of `boxes` hinted as
    /// themselves, computed from the descriptors alone.
    pub fn from_boxes(boxes: &[BoxDesc]) -> IndexPattern {
        let mut run: Option<(usize, usize)> = None;
        let mut contiguous = true;
        for b in boxes.iter().filter(|b| b.extents[0] > 0 && b.extents[1] > 0) {
            let [e0, e1] = b.extents;
            let [s0, s1] = b.strides;
            let dense = if e0 == 1 { e1 == 1 || s1 == 1 } else { s0 == 1 && (e1 == 1 || s1 == e0) };
            if !dense {
                contiguous = false;
                break;
            }
            run = match run {
                None => Some((b.start, e0 * e1)),
                Some((start, len)) if start + len == b.start => Some((start, len + e0 * e1)),
                Some(_) => {
                    contiguous = false;
                    break;
                }
            };
        }
        match (contiguous, run) {
            (true, Some((start, len))) => IndexPattern::Contiguous { start, len },
            (true, None) => IndexPattern::Contiguous { start: 0, len: 0 },
            (false, _) => IndexPattern::Boxes(boxes.to_vec()),
        }
    }

    pub fn is_contiguous(&self) -> bool {
        matches!(self, IndexPattern::Contiguous { .. })
    }

    /// Extra bytes a pack/unpack kernel reads to locate entries.
    fn index_bytes(&self, n: usize) -> f64 {
        match self {
            IndexPattern::Indexed => 4.0 * n as f64,
            _ => 0.0,
        }
    }
}

/// The per-rank graph description.
#[derive(Debug, Clone, Default)]
pub struct StarForest {
    pub nroots: usize,
    pub leaf_local: Vec<usize>,
    pub leaf_remote: Vec<(usize, usize)>,
    leaf_hints: Vec<(usize, Vec<BoxDesc>)>,
    root_hints: Vec<(usize, Vec<BoxDesc>)>,
}

impl StarForest {
    pub fn new(nroots: usize, leaf_local: Vec<usize>, leaf_remote: Vec<(usize, usize)>) -> Result<Self> {
        if leaf_local.len() != leaf_remote.len() {
            return shape(format!(
                "{} leaf indices but {} root references",
                leaf_local.len(),
                leaf_remote.len()
            ));
        }
        let mut seen = leaf_local.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Graph("leaf indices must be unique".into()));
        }
        Ok(StarForest { nroots, leaf_local, leaf_remote, leaf_hints: Vec::new(), root_hints: Vec::new() })
    }

    pub fn nleaves(&self) -> usize {
        self.leaf_local.len()
    }

    /// Minimum leafdata length.
    pub fn leaf_span(&self) -> usize {
        self.leaf_local.iter().map(|&i| i + 1).max().unwrap_or(0)
    }

    /// Declares that the leaves hanging off `root_rank` are, in order, the
    /// points of `boxes` (in leafdata coordinates).
    pub fn hint_leaf_boxes(&mut self, root_rank: usize, boxes: Vec<BoxDesc>) {
        self.leaf_hints.push((root_rank, boxes));
    }

    /// Declares that the roots requested by `leaf_rank` are, in order, the
    /// points of `boxes` (in rootdata coordinates).
    pub fn hint_root_boxes(&mut self, leaf_rank: usize, boxes: Vec<BoxDesc>) {
        self.root_hints.push((leaf_rank, boxes));
    }
}

#[derive(Debug, Clone)]
pub struct NeighborPart {
    pub rank: usize,
    pub indices: Vec<usize>,
    pub pattern: IndexPattern,
}

impl NeighborPart {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn shape(&self) -> PartShape {
        PartShape { rank: self.rank, len: self.len(), pattern: self.pattern.clone() }
    }
}

/// A neighbor part without its index list: enough to replay the costs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartShape {
    pub rank: usize,
    pub len: usize,
    pub pattern: IndexPattern,
}

trait Part {
    fn peer(&self) -> usize;
    fn count(&self) -> usize;
    fn layout(&self) -> &IndexPattern;
}

impl Part for NeighborPart {
    fn peer(&self) -> usize {
        self.rank
    }
    fn count(&self) -> usize {
        self.len()
    }
    fn layout(&self) -> &IndexPattern {
        &self.pattern
    }
}

impl Part for PartShape {
    fn peer(&self) -> usize {
        self.rank
    }
    fn count(&self) -> usize {
        self.len
    }
    fn layout(&self) -> &IndexPattern {
        &self.pattern
    }
}

/// Counts and patterns of a [`CommPlan`]. Replaying a shape charges exactly
/// the events the real operation would, without moving any data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanShape {
    pub leaf_parts: Vec<PartShape>,
    pub root_parts: Vec<PartShape>,
    pub local: usize,
    pub local_root_pattern: IndexPattern,
    pub local_leaf_pattern: IndexPattern,
}

impl PlanShape {
    pub fn is_empty(&self) -> bool {
        self.local == 0 && self.leaf_parts.is_empty() && self.root_parts.is_empty()
    }
}

/// Analyzed communication plan of one rank.
#[derive(Debug, Clone)]
pub struct CommPlan {
    rank: usize,
    nroots: usize,
    leaf_span: usize,
    /// Same-rank edges, in leaf order.
    pub local_roots: Vec<usize>,
    pub local_leaves: Vec<usize>,
    pub local_root_pattern: IndexPattern,
    pub local_leaf_pattern: IndexPattern,
    /// My leaves grouped by the (remote) rank owning their roots.
    pub leaf_parts: Vec<NeighborPart>,
    /// My roots requested by each remote leaf rank, in that rank's leaf order.
    pub root_parts: Vec<NeighborPart>,
    /// Some root anywhere has two or more leaves.
    pub duplicate_targets: bool,
    /// Some root on this rank has two or more leaves.
    pub local_duplicates: bool,
    busy: bool,
}

impl CommPlan {
    pub fn nroots(&self) -> usize {
        self.nroots
    }

    pub fn leaf_span(&self) -> usize {
        self.leaf_span
    }

    pub fn remote_edge_count(&self) -> usize {
        self.leaf_parts.iter().map(|p| p.len()).sum()
    }

    pub fn local_edge_count(&self) -> usize {
        self.local_leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_leaves.is_empty() && self.leaf_parts.is_empty() && self.root_parts.is_empty()
    }

    pub fn shape(&self) -> PlanShape {
        PlanShape {
            leaf_parts: self.leaf_parts.iter().map(NeighborPart::shape).collect(),
            root_parts: self.root_parts.iter().map(NeighborPart::shape).collect(),
            local: self.local_leaves.len(),
            local_root_pattern: self.local_root_pattern.clone(),
            local_leaf_pattern: self.local_leaf_pattern.clone(),
        }
    }

    /// The plan of a rank with no edges.
    pub fn empty(rank: usize) -> Self {
        CommPlan {
            rank,
            nroots: 0,
            leaf_span: 0,
            local_roots: Vec::new(),
            local_leaves: Vec::new(),
            local_root_pattern: IndexPattern::Contiguous { start: 0, len: 0 },
            local_leaf_pattern: IndexPattern::Contiguous { start: 0, len: 0 },
            leaf_parts: Vec::new(),
            root_parts: Vec::new(),
            duplicate_targets: false,
            local_duplicates: false,
            busy: false,
        }
    }
}

/// Collectively validates the graph and builds this rank's plan.
pub fn setup(rank: &mut Rank, sf: &StarForest) -> Result<CommPlan> {
    let p = rank.size();
    let me = rank.id();
    let all_nroots = rank.allgather(vec![sf.nroots as u64])?;
    let mut problem = None;
    for (k, &(r, off)) in sf.leaf_remote.iter().enumerate() {
        if r >= p {
            problem = Some(format!("rank {me} leaf {k} references root rank {r} of {p}"));
            break;
        }
        if off as u64 >= all_nroots[r][0] {
            problem = Some(format!(
                "rank {me} leaf {k} references root offset {off} but rank {r} has {} roots",
                all_nroots[r][0]
            ));
            break;
        }
    }
    if rank.allreduce_any(problem.is_some())? {
        return Err(Error::Graph(problem.unwrap_or_else(|| "invalid star forest on another rank".into())));
    }

    let mut local_roots = Vec::new();
    let mut local_leaves = Vec::new();
    let mut by_rank: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); p];
    for (&leaf, &(r, off)) in sf.leaf_local.iter().zip(&sf.leaf_remote) {
        if r == me {
            local_roots.push(off);
            local_leaves.push(leaf);
        } else {
            by_rank[r].0.push(leaf);
            by_rank[r].1.push(off);
        }
    }
    let sends: Vec<Vec<u64>> = by_rank.iter().map(|(_, offs)| offs.iter().map(|&o| o as u64).collect()).collect();
    let received = rank.exchange(sends)?;

    let leaf_parts: Vec<NeighborPart> = by_rank
        .into_iter()
        .enumerate()
        .filter(|(r, (leaves, _))| *r != me && !leaves.is_empty())
        .map(|(r, (leaves, _))| NeighborPart {
            rank: r,
            pattern: IndexPattern::detect(&leaves, hint(&sf.leaf_hints, r)),
            indices: leaves,
        })
        .collect();
    let root_parts: Vec<NeighborPart> = received
        .into_iter()
        .enumerate()
        .filter(|(r, idx)| *r != me && !idx.is_empty())
        .map(|(r, idx)| {
            let indices: Vec<usize> = idx.into_iter().map(|w| w as usize).collect();
            NeighborPart { rank: r, pattern: IndexPattern::detect(&indices, hint(&sf.root_hints, r)), indices }
        })
        .collect();

    let mut indegree = vec![0u32; sf.nroots];
    for &r in local_roots.iter().chain(root_parts.iter().flat_map(|p| p.indices.iter())) {
        indegree[r] += 1;
    }
    let local_duplicates = indegree.iter().any(|&d| d > 1);
    let duplicate_targets = rank.allreduce_any(local_duplicates)?;

    Ok(CommPlan {
        rank: me,
        nroots: sf.nroots,
        leaf_span: sf.leaf_span(),
        local_root_pattern: IndexPattern::detect(&local_roots, hint(&sf.root_hints, me)),
        local_leaf_pattern: IndexPattern::detect(&local_leaves, hint(&sf.leaf_hints, me)),
        local_roots,
        local_leaves,
        leaf_parts,
        root_parts,
        duplicate_targets,
        local_duplicates,
        busy: false,
    })
}

fn hint(hints: &[(usize, Vec<BoxDesc>)], r: usize) -> Option<&Vec<BoxDesc>> {
    hints.iter().find(|(h, _)| *h == r).map(|(_, b)| b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Bcast,
    Reduce,
}

/// An in-flight broadcast or reduce, finished by the matching `*_end`.
#[must_use = "split-phase operations must be completed"]
#[derive(Debug)]
pub struct Pending<T> {
    direction: Direction,
    op: ReduceOp,
    recvs: Vec<RecvRequest>,
    local_stream: Option<StreamId>,
    local_values: Vec<T>,
}

fn space_of(loc: &DataLoc) -> ExecSpace {
    if loc.is_device() {
        ExecSpace::Device(0)
    } else {
        ExecSpace::Host
    }
}

fn elem_bytes<T>() -> f64 {
    std::mem::size_of::<T>() as f64
}

/// Bytes a kernel moving `n` entries touches: Replace reads the source and
/// writes the destination; the other ops also read the destination.
fn move_bytes<T>(n: usize, op: ReduceOp) -> f64 {
    let accesses = if op == ReduceOp::Replace { 2.0 } else { 3.0 };
    accesses * elem_bytes::<T>() * n as f64
}

fn pattern_label<P: Part>(kind: &str, parts: &[&P]) -> String {
    if parts.iter().all(|p| matches!(p.layout(), IndexPattern::Boxes(_) | IndexPattern::Contiguous { .. })) {
        format!("{kind}[box]")
    } else {
        format!("{kind}[indexed]")
    }
}

fn begin_common(rank: &mut Rank, plan: &mut CommPlan, locs: &[DataLoc]) -> Result<u64> {
    if plan.rank != rank.id() {
        return usage("plan belongs to a different rank");
    }
    if plan.busy {
        return usage("star forest already has an operation in flight");
    }
    let tag = rank.next_tag();
    if plan.is_empty() {
        return Ok(tag);
    }
    plan.busy = true;
    begin_overhead(rank, locs);
    Ok(tag)
}

fn begin_overhead(rank: &mut Rank, locs: &[DataLoc]) {
    let dt = rank.params().t_sf_overhead;
    rank.exec.overhead("sf_overhead", dt);
    for loc in locs {
        rank.exec.memtype_of(loc);
    }
}

/// Packs `parts` out of `src` and sends one message per neighbor.
fn pack_and_send<T, P: Part>(
    rank: &mut Rank,
    parts: &[P],
    payload: impl Fn(&P) -> Vec<u64>,
    loc: DataLoc,
    tag: u64,
) -> Result<()> {
    if parts.is_empty() {
        return Ok(());
    }
    let space = space_of(&loc);
    let needs_pack: Vec<&P> = parts.iter().filter(|p| !p.layout().is_contiguous()).collect();
    if !needs_pack.is_empty() {
        let n: usize = needs_pack.iter().map(|p| p.count()).sum();
        let idx: f64 = needs_pack.iter().map(|p| p.layout().index_bytes(p.count())).sum();
        let label = pattern_label("pack", &needs_pack);
        rank.exec.run_kernel_kind(space, EventKind::Pack, &label, move_bytes::<T>(n, ReduceOp::Replace) + idx, 0.0)?;
    }
    if let ExecSpace::Device(d) = space {
        let s = rank.exec.default_stream(d);
        rank.exec.sync_stream(s);
    }
    let send_loc = DataLoc::tagged(loc.memtype);
    for part in parts {
        let bytes = elem_bytes::<T>() * part.count() as f64;
        rank.isend(part.peer(), payload(part), bytes, send_loc, tag)?;
    }
    Ok(())
}

fn gather_words<T: SfScalar>(src: &[T]) -> impl Fn(&NeighborPart) -> Vec<u64> + '_ {
    move |part| part.indices.iter().map(|&i| src[i].to_word()).collect()
}

fn post_recvs<P: Part>(rank: &mut Rank, parts: &[P], loc: DataLoc, tag: u64) -> Result<Vec<RecvRequest>> {
    let recv_loc = DataLoc::tagged(loc.memtype);
    parts.iter().map(|p| rank.irecv(p.peer(), tag, recv_loc)).collect()
}

fn local_scatter_cost<T>(
    rank: &mut Rank,
    n: usize,
    patterns: [&IndexPattern; 2],
    loc: DataLoc,
    op: ReduceOp,
) -> Result<Option<StreamId>> {
    if n == 0 {
        return Ok(None);
    }
    let idx = patterns[0].index_bytes(n) + patterns[1].index_bytes(n);
    let bytes = move_bytes::<T>(n, op) + idx;
    match space_of(&loc) {
        ExecSpace::Device(d) => {
            let s = rank.exec.aux_stream(d)?;
            let main = rank.exec.default_stream(d);
            rank.exec.stream_wait(s, main);
            rank.exec.enqueue_kernel(s, EventKind::LocalScatter, "local_scatter", bytes, 0.0, &[])?;
            Ok(Some(s))
        }
        ExecSpace::Host => {
            rank.exec.host_kernel(EventKind::LocalScatter, "local_scatter", bytes, 0.0);
            Ok(None)
        }
    }
}

fn unpack_cost<T, P: Part>(rank: &mut Rank, parts: &[P], loc: DataLoc, op: ReduceOp) -> Result<()> {
    let needs: Vec<&P> =
        parts.iter().filter(|p| !(p.layout().is_contiguous() && op == ReduceOp::Replace)).collect();
    if needs.is_empty() {
        return Ok(());
    }
    let n: usize = needs.iter().map(|p| p.count()).sum();
    let idx: f64 = needs.iter().map(|p| p.layout().index_bytes(p.count())).sum();
    let label = pattern_label("unpack", &needs);
    rank.exec.run_kernel_kind(space_of(&loc), EventKind::Unpack, &label, move_bytes::<T>(n, op) + idx, 0.0)
}

fn check_len(what: &str, have: usize, need: usize) -> Result<()> {
    if have < need {
        return shape(format!("{what} has length {have}, needs at least {need}"));
    }
    Ok(())
}

/// Starts `leaf <- op(leaf, root)` over every edge.
#[allow(clippy::too_many_arguments)]
pub fn bcast_begin<T: SfScalar>(
    rank: &mut Rank,
    plan: &mut CommPlan,
    rootdata: &[T],
    root_loc: DataLoc,
    leafdata: &mut [T],
    leaf_loc: DataLoc,
    op: ReduceOp,
) -> Result<Pending<T>> {
    check_len("rootdata", rootdata.len(), plan.nroots)?;
    check_len("leafdata", leafdata.len(), plan.leaf_span)?;
    let mut locs = Vec::new();
    if !plan.root_parts.is_empty() || !plan.local_leaves.is_empty() {
        locs.push(root_loc);
    }
    if !plan.leaf_parts.is_empty() || !plan.local_leaves.is_empty() {
        locs.push(leaf_loc);
    }
    let tag = begin_common(rank, plan, &locs)?;
    let mut pending =
        Pending { direction: Direction::Bcast, op, recvs: Vec::new(), local_stream: None, local_values: Vec::new() };
    if plan.is_empty() {
        return Ok(pending);
    }
    pack_and_send::<T, _>(rank, &plan.root_parts, gather_words(rootdata), root_loc, tag)?;
    pending.recvs = post_recvs(rank, &plan.leaf_parts, leaf_loc, tag)?;
    for (&r, &l) in plan.local_roots.iter().zip(&plan.local_leaves) {
        leafdata[l] = op.apply(leafdata[l], rootdata[r]);
    }
    let pats = [&plan.local_root_pattern, &plan.local_leaf_pattern];
    pending.local_stream = local_scatter_cost::<T>(rank, plan.local_leaves.len(), pats, leaf_loc, op)?;
    Ok(pending)
}

pub fn bcast_end<T: SfScalar>(
    rank: &mut Rank,
    plan: &mut CommPlan,
    pending: Pending<T>,
    leafdata: &mut [T],
    leaf_loc: DataLoc,
) -> Result<()> {
    if pending.direction != Direction::Bcast {
        return usage("bcast_end called on a reduce");
    }
    check_len("leafdata", leafdata.len(), plan.leaf_span)?;
    if plan.is_empty() {
        return Ok(());
    }
    let op = pending.op;
    let data = rank.wait_all(pending.recvs)?;
    for (part, words) in plan.leaf_parts.iter().zip(&data) {
        for (&l, &w) in part.indices.iter().zip(words) {
            leafdata[l] = op.apply(leafdata[l], T::from_word(w));
        }
    }
    unpack_cost::<T, _>(rank, &plan.leaf_parts, leaf_loc, op)?;
    if let Some(s) = pending.local_stream {
        rank.exec.join_stream(s);
    }
    plan.busy = false;
    Ok(())
}

/// Starts `root <- op(root, combine(leaves))` for every root.
#[allow(clippy::too_many_arguments)]
pub fn reduce_begin<T: SfScalar>(
    rank: &mut Rank,
    plan: &mut CommPlan,
    leafdata: &[T],
    leaf_loc: DataLoc,
    rootdata: &mut [T],
    root_loc: DataLoc,
    op: ReduceOp,
) -> Result<Pending<T>> {
    if op == ReduceOp::Replace && plan.duplicate_targets {
        return usage("reduce with Replace is ambiguous when a root has several leaves");
    }
    check_len("rootdata", rootdata.len(), plan.nroots)?;
    check_len("leafdata", leafdata.len(), plan.leaf_span)?;
    let mut locs = Vec::new();
    if !plan.leaf_parts.is_empty() || !plan.local_leaves.is_empty() {
        locs.push(leaf_loc);
    }
    if !plan.root_parts.is_empty() || !plan.local_leaves.is_empty() {
        locs.push(root_loc);
    }
    let tag = begin_common(rank, plan, &locs)?;
    let mut pending =
        Pending { direction: Direction::Reduce, op, recvs: Vec::new(), local_stream: None, local_values: Vec::new() };
    if plan.is_empty() {
        return Ok(pending);
    }
    pack_and_send::<T, _>(rank, &plan.leaf_parts, gather_words(leafdata), leaf_loc, tag)?;
    pending.recvs = post_recvs(rank, &plan.root_parts, root_loc, tag)?;
    pending.local_values = plan.local_leaves.iter().map(|&l| leafdata[l]).collect();
    let pats = [&plan.local_root_pattern, &plan.local_leaf_pattern];
    pending.local_stream = local_scatter_cost::<T>(rank, plan.local_leaves.len(), pats, root_loc, op)?;
    Ok(pending)
}

pub fn reduce_end<T: SfScalar>(
    rank: &mut Rank,
    plan: &mut CommPlan,
    pending: Pending<T>,
    rootdata: &mut [T],
    root_loc: DataLoc,
) -> Result<()> {
    if pending.direction != Direction::Reduce {
        return usage("reduce_end called on a bcast");
    }
    check_len("rootdata", rootdata.len(), plan.nroots)?;
    if plan.is_empty() {
        return Ok(());
    }
    let op = pending.op;
    let data = rank.wait_all(pending.recvs)?;

    // Contributions in ascending (leaf rank, leaf order).
    let me = rank.id();
    let mut sources: Vec<(usize, &[usize], Vec<T>)> = plan
        .root_parts
        .iter()
        .zip(&data)
        .map(|(p, w)| (p.rank, p.indices.as_slice(), w.iter().map(|&x| T::from_word(x)).collect()))
        .collect();
    sources.push((me, plan.local_roots.as_slice(), pending.local_values));
    sources.sort_by_key(|s| s.0);

    if plan.local_duplicates {
        let mut combined: Vec<Option<T>> = vec![None; plan.nroots];
        for (_, roots, vals) in &sources {
            for (&r, &v) in roots.iter().zip(vals) {
                combined[r] = Some(match combined[r] {
                    None => v,
                    Some(c) => op.apply(c, v),
                });
            }
        }
        for (r, c) in combined.into_iter().enumerate() {
            if let Some(c) = c {
                rootdata[r] = op.apply(rootdata[r], c);
            }
        }
    } else {
        for (_, roots, vals) in &sources {
            for (&r, &v) in roots.iter().zip(vals) {
                rootdata[r] = op.apply(rootdata[r], v);
            }
        }
    }
    unpack_cost::<T, _>(rank, &plan.root_parts, root_loc, op)?;
    if let Some(s) = pending.local_stream {
        rank.exec.join_stream(s);
    }
    plan.busy = false;
    Ok(())
}

/// Convenience: begin and end back to back.
pub fn bcast<T: SfScalar>(
    rank: &mut Rank,
    plan: &mut CommPlan,
    rootdata: &[T],
    root_loc: DataLoc,
    leafdata: &mut [T],
    leaf_loc: DataLoc,
    op: ReduceOp,
) -> Result<()> {
    let p = bcast_begin(rank, plan, rootdata, root_loc, leafdata, leaf_loc, op)?;
    bcast_end(rank, plan, p, leafdata, leaf_loc)
}

pub fn reduce<T: SfScalar>(
    rank: &mut Rank,
    plan: &mut CommPlan,
    leafdata: &[T],
    leaf_loc: DataLoc,
    rootdata: &mut [T],
    root_loc: DataLoc,
    op: ReduceOp,
) -> Result<()> {
    let p = reduce_begin(rank, plan, leafdata, leaf_loc, rootdata, root_loc, op)?;
    reduce_end(rank, plan, p, rootdata, root_loc)
}

fn replay_locs(shape: &PlanShape, sending: &[PartShape], receiving: &[PartShape], send_loc: DataLoc, recv_loc: DataLoc) -> Vec<DataLoc> {
    let mut locs = Vec::new();
    if !sending.is_empty() || shape.local > 0 {
        locs.push(send_loc);
    }
    if !receiving.is_empty() || shape.local > 0 {
        locs.push(recv_loc);
    }
    locs
}

/// Charges a full broadcast over `shape` (begin and end) with empty payloads.
pub fn bcast_replay<T>(rank: &mut Rank, shape: &PlanShape, root_loc: DataLoc, leaf_loc: DataLoc, op: ReduceOp) -> Result<()> {
    let tag = rank.next_tag();
    if shape.is_empty() {
        return Ok(());
    }
    begin_overhead(rank, &replay_locs(shape, &shape.root_parts, &shape.leaf_parts, root_loc, leaf_loc));
    pack_and_send::<T, _>(rank, &shape.root_parts, |_| Vec::new(), root_loc, tag)?;
    let recvs = post_recvs(rank, &shape.leaf_parts, leaf_loc, tag)?;
    let pats = [&shape.local_root_pattern, &shape.local_leaf_pattern];
    let stream = local_scatter_cost::<T>(rank, shape.local, pats, leaf_loc, op)?;
    rank.wait_all(recvs)?;
    unpack_cost::<T, _>(rank, &shape.leaf_parts, leaf_loc, op)?;
    if let Some(s) = stream {
        rank.exec.join_stream(s);
    }
    Ok(())
}

/// Charges a full reduce over `shape` with empty payloads.
pub fn reduce_replay<T>(rank: &mut Rank, shape: &PlanShape, leaf_loc: DataLoc, root_loc: DataLoc, op: ReduceOp) -> Result<()> {
    let tag = rank.next_tag();
    if shape.is_empty() {
        return Ok(());
    }
    begin_overhead(rank, &replay_locs(shape, &shape.leaf_parts, &shape.root_parts, leaf_loc, root_loc));
    pack_and_send::<T, _>(rank, &shape.leaf_parts, |_| Vec::new(), leaf_loc, tag)?;
    let recvs = post_recvs(rank, &shape.root_parts, root_loc, tag)?;
    let pats = [&shape.local_root_pattern, &shape.local_leaf_pattern];
    let stream = local_scatter_cost::<T>(rank, shape.local, pats, root_loc, op)?;
    rank.wait_all(recvs)?;
    unpack_cost::<T, _>(rank, &shape.root_parts, root_loc, op)?;
    if let Some(s) = stream {
        rank.exec.join_stream(s);
    }
    Ok(())
}

/// One edge of a whole (all-rank) star forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub leaf_rank: usize,
    pub leaf_index: usize,
    pub root_rank: usize,
    pub root_offset: usize,
}

/// Every rank's graph in one place, as read from a fixture file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalForest {
    pub nroots: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl GlobalForest {
    pub fn nranks(&self) -> usize {
        self.nroots.len()
    }

    /// Rank `r`'s part, leaves in file order.
    pub fn local(&self, r: usize) -> Result<StarForest> {
        let mine: Vec<&Edge> = self.edges.iter().filter(|e| e.leaf_rank == r).collect();
        StarForest::new(
            self.nroots[r],
            mine.iter().map(|e| e.leaf_index).collect(),
            mine.iter().map(|e| (e.root_rank, e.root_offset)).collect(),
        )
    }

    pub fn leaf_span(&self, r: usize) -> usize {
        self.edges.iter().filter(|e| e.leaf_rank == r).map(|e| e.leaf_index + 1).max().unwrap_or(0)
    }

    /// Parses the fixture format: `leaf_rank leaf_index root_rank root_offset`
    /// per line, optional `nroots <rank> <count>` lines, `#` comments.
    /// Without an `nroots` line a rank's root count is its largest referenced
    /// offset plus one.
    pub fn parse(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut declared: Vec<(usize, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("line {}: '{raw}'", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "nroots" {
                if fields.len() != 3 {
                    return Err(bad());
                }
                let r = fields[1].parse().map_err(|_| bad())?;
                let n = fields[2].parse().map_err(|_| bad())?;
                declared.push((r, n));
                continue;
            }
            if fields.len() != 4 {
                return Err(bad());
            }
            let v: Vec<usize> = fields.iter().map(|f| f.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            edges.push(Edge { leaf_rank: v[0], leaf_index: v[1], root_rank: v[2], root_offset: v[3] });
        }
        let nranks = edges
            .iter()
            .map(|e| e.leaf_rank.max(e.root_rank) + 1)
            .chain(declared.iter().map(|d| d.0 + 1))
            .max()
            .unwrap_or(0);
        let mut nroots = vec![0usize; nranks];
        for e in &edges {
            nroots[e.root_rank] = nroots[e.root_rank].max(e.root_offset + 1);
        }
        for (r, n) in declared {
            nroots[r] = n;
        }
        Ok(GlobalForest { nroots, edges })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (r, n) in self.nroots.iter().enumerate() {
            s.push_str(&format!("nroots {r} {n}\n"));
        }
        for e in &self.edges {
            s.push_str(&format!("{} {} {} {}\n", e.leaf_rank, e.leaf_index, e.root_rank, e.root_offset));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::MemType;
    use crate::transport::{run, WorldConfig};

    const FIXTURE: &str = include_str!("../fixtures/three_rank_forest.txt");

    fn dev() -> DataLoc {
        DataLoc::tagged(MemType::Device)
    }

    #[test]
    fn fixture_parses() {
        let g = GlobalForest::parse(FIXTURE).unwrap();
        assert_eq!(g.nroots, vec![3, 4, 2]);
        assert_eq!(g.edges.len(), 10);
        assert_eq!(GlobalForest::parse(&g.to_text()).unwrap(), g);
        assert!(GlobalForest::parse("0 1 2").is_err());
        assert!(GlobalForest::parse("a b c d").is_err());
    }

    #[test]
    fn fixture_plan_on_rank0() {
        let g = GlobalForest::parse(FIXTURE).unwrap();
        let out = run(&WorldConfig::new(3), |r| {
            let sf = g.local(r.id())?;
            setup(r, &sf)
        })
        .unwrap();
        let p0 = &out.results[0];
        assert_eq!(p0.local_leaves, vec![3]);
        assert_eq!(p0.local_roots, vec![2]);
        assert_eq!(p0.leaf_parts.len(), 1);
        assert_eq!(p0.leaf_parts[0].rank, 1);
        assert_eq!(p0.leaf_parts[0].indices, vec![0, 1, 2]);
        assert!(out.results.iter().all(|p| p.duplicate_targets));
        assert!(out.results[1].local_duplicates);
        for p in &out.results {
            let total: usize = p.local_edge_count() + p.remote_edge_count();
            assert_eq!(total, g.edges.iter().filter(|e| e.leaf_rank == p.rank).count());
        }
    }

    #[test]
    fn contiguous_forest_needs_no_pack_or_unpack() {
        let n = 64;
        let out = run(&WorldConfig::new(2), |r| {
            let sf = if r.id() == 0 {
                StarForest::new(n, vec![], vec![])?
            } else {
                StarForest::new(0, (0..n).collect(), (0..n).map(|i| (0, i)).collect())?
            };
            let mut plan = setup(r, &sf)?;
            assert!(plan.root_parts.iter().chain(&plan.leaf_parts).all(|p| p.pattern.is_contiguous()));
            let roots: Vec<f64> = (0..if r.id() == 0 { n } else { 0 }).map(|i| i as f64).collect();
            let mut leaves = vec![0.0; if r.id() == 1 { n } else { 0 }];
            let mut roots_mut = roots.clone();
            bcast(r, &mut plan, &roots, dev(), &mut leaves, dev(), ReduceOp::Replace)?;
            reduce(r, &mut plan, &leaves, dev(), &mut roots_mut, dev(), ReduceOp::Replace)?;
            Ok(leaves)
        })
        .unwrap();
        assert_eq!(out.results[1], (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(out.log.count(EventKind::Pack) + out.log.count(EventKind::Unpack), 0);
    }

    #[test]
    fn invalid_offset_is_a_collective_graph_error() {
        let err = run(&WorldConfig::new(2), |r| {
            let sf = if r.id() == 0 {
                StarForest::new(2, vec![0], vec![(1, 5)])?
            } else {
                StarForest::new(3, vec![], vec![])?
            };
            setup(r, &sf).map(|_| ())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Graph(_)), "{err:?}");
    }

    #[test]
    fn empty_forest_logs_nothing() {
        let out = run(&WorldConfig::new(2), |r| {
            let mut plan = setup(r, &StarForest::default())?;
            let mark = r.exec.log().len();
            let mut leaves: Vec<f64> = vec![];
            bcast(r, &mut plan, &[], dev(), &mut leaves, dev(), ReduceOp::Replace)?;
            Ok(r.exec.log().len() - mark)
        })
        .unwrap();
        assert_eq!(out.results, vec![0, 0]);
    }

    #[test]
    fn replace_with_duplicates_rejected_and_overlap_rejected() {
        let g = GlobalForest::parse(FIXTURE).unwrap();
        run(&WorldConfig::new(3), |r| {
            let sf = g.local(r.id())?;
            let mut plan = setup(r, &sf)?;
            let leaves = vec![0i64; 4];
            let mut roots = vec![0i64; 4];
            let e = reduce(r, &mut plan, &leaves, DataLoc::host(), &mut roots, DataLoc::host(), ReduceOp::Replace);
            assert!(matches!(e, Err(Error::Usage(_))));
            let mut lv = vec![0i64; 4];
            let p = bcast_begin(r, &mut plan, &roots, DataLoc::host(), &mut lv, DataLoc::host(), ReduceOp::Replace)?;
            let again = bcast_begin(r, &mut plan, &roots, DataLoc::host(), &mut lv, DataLoc::host(), ReduceOp::Replace);
            assert!(matches!(again, Err(Error::Usage(_))));
            bcast_end(r, &mut plan, p, &mut lv, DataLoc::host())
        })
        .unwrap();
    }

    #[test]
    fn box_hints_are_verified() {
        let b = BoxDesc { start: 1, extents: [2, 2], strides: [1, 4] };
        assert_eq!(b.indices().collect::<Vec<_>>(), vec![1, 2, 5, 6]);
        assert_eq!(IndexPattern::detect(&[1, 2, 5, 6], Some(&vec![b])), IndexPattern::Boxes(vec![b]));
        assert_eq!(IndexPattern::detect(&[1, 2, 5, 7], Some(&vec![b])), IndexPattern::Indexed);
        assert!(IndexPattern::detect(&[3, 4, 5], None).is_contiguous());
    }
}
