//! Distributed CSR matrices.
//!
//! Rows are distributed like a [`DistVec`]; a rank stores its rows with
//! global column indices plus a compressed local numbering (owned columns
//! first, then ghost columns in ascending global order). Three ways to fill
//! values:
//!
//! * [`CsrMatrix::set_values`] + [`CsrMatrix::assemble`]: host-side, with a
//!   stash for rows owned elsewhere.
//! * [`coo_preprocess`] + [`coo_set_values`]: a frozen coordinate list whose
//!   values are routed by a star forest and applied in one kernel.
//! * [`CsrMatrix::set_values_device`]: one kernel writing into a
//!   preallocated pattern.
//!
//! All paths combine duplicate contributions in the same order: the owning
//! rank's own entries in input order, then other ranks' entries by ascending
//! source rank, each in input order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use crate::costmodel::EventKind;
use crate::error::{shape, usage, Error, Result};
use crate::exec::{AccessMode, DataLoc, ExecContext, ExecSpace, MirroredBuffer, Touch};
use crate::kernels;
use crate::starforest::{self, CommPlan, ReduceOp, StarForest};
use crate::transport::Rank;
use crate::vec::{DistVec, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertMode {
    Insert,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Building,
    Assembled,
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    rows: Arc<Layout>,
    cols: Arc<Layout>,
    rank: usize,
    space: ExecSpace,
    state: State,
    building: Vec<BTreeMap<usize, f64>>,
    stash: Vec<(usize, usize, f64, InsertMode)>,
    pending_calls: usize,
    pending_entries: usize,
    offsets: Vec<usize>,
    colidx: Vec<usize>,
    lcols: Vec<usize>,
    vals: MirroredBuffer<f64>,
    ghosts: Vec<usize>,
    col_plan: Option<CommPlan>,
}

fn encode_mode(m: InsertMode) -> u64 {
    match m {
        InsertMode::Insert => 0,
        InsertMode::Add => 1,
    }
}

fn merge(slot: &mut f64, v: f64, mode: InsertMode) {
    match mode {
        InsertMode::Insert => *slot = v,
        InsertMode::Add => *slot += v,
    }
}

impl CsrMatrix {
    /// An empty matrix in the building state.
    pub fn new(rows: Arc<Layout>, cols: Arc<Layout>, rank: usize, space: ExecSpace) -> Self {
        let nlocal = rows.local_len(rank);
        let device_id = match space {
            ExecSpace::Device(d) => d,
            ExecSpace::Host => 0,
        };
        CsrMatrix {
            rows,
            cols,
            rank,
            space,
            state: State::Building,
            building: vec![BTreeMap::new(); nlocal],
            stash: Vec::new(),
            pending_calls: 0,
            pending_entries: 0,
            offsets: vec![0; nlocal + 1],
            colidx: Vec::new(),
            lcols: Vec::new(),
            vals: MirroredBuffer::with_memtype(Vec::new(), crate::exec::MemType::HostPinned, device_id),
            ghosts: Vec::new(),
            col_plan: None,
        }
    }

    /// An assembled matrix with the given sparsity (global columns per owned
    /// row) and zero values.
    pub fn with_pattern(
        rank: &mut Rank,
        rows: Arc<Layout>,
        cols: Arc<Layout>,
        space: ExecSpace,
        pattern: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let mut m = CsrMatrix::new(rows, cols, rank.id(), space);
        if pattern.len() != m.local_rows() {
            return shape(format!("pattern has {} rows, rank owns {}", pattern.len(), m.local_rows()));
        }
        m.building = pattern.into_iter().map(|cs| cs.into_iter().map(|c| (c, 0.0)).collect()).collect();
        m.finalize(rank)?;
        Ok(m)
    }

    pub fn row_layout(&self) -> &Arc<Layout> {
        &self.rows
    }

    pub fn col_layout(&self) -> &Arc<Layout> {
        &self.cols
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn space(&self) -> ExecSpace {
        self.space
    }

    /// Changes where kernels on this matrix run. Values follow lazily.
    pub fn set_space(&mut self, space: ExecSpace) -> Result<()> {
        if let ExecSpace::Device(d) = space {
            if self.vals.has_device_storage() && d != self.vals.device_id() {
                return usage("matrix values already live on another device");
            }
            if !self.vals.has_device_storage() {
                let data = self.vals.contents();
                self.vals = MirroredBuffer::with_memtype(data, self.vals.host_memtype(), d);
            }
        }
        self.space = space;
        Ok(())
    }

    pub fn is_assembled(&self) -> bool {
        self.state == State::Assembled
    }

    pub fn local_rows(&self) -> usize {
        self.rows.local_len(self.rank)
    }

    pub fn owned_rows(&self) -> Range<usize> {
        self.rows.range(self.rank)
    }

    pub fn nnz(&self) -> usize {
        self.colidx.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Global column indices, sorted within each row.
    pub fn col_indices(&self) -> &[usize] {
        &self.colidx
    }

    pub fn ghost_cols(&self) -> &[usize] {
        &self.ghosts
    }

    /// CSR values, without charging any transfer.
    pub fn values(&self) -> Vec<f64> {
        self.vals.contents()
    }

    pub fn values_buffer(&self) -> &MirroredBuffer<f64> {
        &self.vals
    }

    /// Makes the values valid in the matrix's execution space, copying them
    /// there if that copy is stale.
    pub fn sync_values(&mut self, ctx: &mut ExecContext) -> Result<()> {
        let acc = self.vals.get_access(ctx, self.space, AccessMode::Read)?;
        self.vals.restore_access(acc)
    }

    /// Owned rows as global `(row, col, value)` triplets.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let vals = self.values();
        let r0 = self.owned_rows().start;
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.local_rows() {
            for k in self.offsets[i]..self.offsets[i + 1] {
                out.push((r0 + i, self.colidx[k], vals[k]));
            }
        }
        out
    }

    /// All ranks' triplets, in global row order.
    pub fn gather_triplets(&self, rank: &mut Rank) -> Result<Vec<(usize, usize, f64)>> {
        let words: Vec<u64> = self
            .triplets()
            .into_iter()
            .flat_map(|(i, j, v)| [i as u64, j as u64, v.to_bits()])
            .collect();
        let all = rank.allgather(words)?;
        Ok(all
            .into_iter()
            .flat_map(|w| {
                w.chunks(3).map(|c| (c[0] as usize, c[1] as usize, f64::from_bits(c[2]))).collect::<Vec<_>>()
            })
            .collect())
    }

    /// Inserts or adds a dense `rows × cols` block (row-major values).
    pub fn set_values(&mut self, rows: &[usize], cols: &[usize], values: &[f64], mode: InsertMode) -> Result<()> {
        if self.state != State::Building {
            return usage("set_values on an assembled matrix; call reopen first");
        }
        if values.len() != rows.len() * cols.len() {
            return shape(format!("{}x{} block with {} values", rows.len(), cols.len(), values.len()));
        }
        if let Some(&j) = cols.iter().find(|&&j| j >= self.cols.global_len()) {
            return shape(format!("column {j} outside {} columns", self.cols.global_len()));
        }
        let own = self.owned_rows();
        for (a, &i) in rows.iter().enumerate() {
            if i >= self.rows.global_len() {
                return shape(format!("row {i} outside {} rows", self.rows.global_len()));
            }
            for (b, &j) in cols.iter().enumerate() {
                let v = values[a * cols.len() + b];
                if own.contains(&i) {
                    merge(self.building[i - own.start].entry(j).or_insert(0.0), v, mode);
                } else {
                    self.stash.push((i, j, v, mode));
                }
            }
        }
        self.pending_calls += 1;
        self.pending_entries += values.len();
        Ok(())
    }

    /// Back to the building state, keeping the current entries.
    pub fn reopen(&mut self, ctx: &mut ExecContext) -> Result<()> {
        if self.state == State::Building {
            return Ok(());
        }
        let vals = self.vals.read_host(ctx)?;
        for i in 0..self.local_rows() {
            self.building[i] = (self.offsets[i]..self.offsets[i + 1]).map(|k| (self.colidx[k], vals[k])).collect();
        }
        self.state = State::Building;
        Ok(())
    }

    /// Charges the host insertion work accumulated by `set_values`.
    pub fn assembly_begin(&mut self, ctx: &mut ExecContext) {
        if self.pending_calls > 0 {
            let dt = self.pending_calls as f64 * ctx.params().host_kernel_overhead
                + 24.0 * self.pending_entries as f64 / ctx.params().bw_host_mem;
            ctx.overhead("set_values", dt);
        }
        self.pending_calls = 0;
        self.pending_entries = 0;
    }

    /// Delivers stashed entries to their owners and compresses to CSR.
    pub fn assembly_end(&mut self, rank: &mut Rank) -> Result<()> {
        if self.state == State::Assembled {
            self.reopen(&mut rank.exec)?;
        }
        let p = rank.size();
        let mut sends = vec![Vec::new(); p];
        for (i, j, v, m) in self.stash.drain(..) {
            let owner = self.rows.owner(i).expect("row validated in set_values");
            sends[owner].extend([i as u64, j as u64, v.to_bits(), encode_mode(m)]);
        }
        let received = rank.exchange(sends)?;
        let r0 = self.owned_rows().start;
        for words in received {
            for c in words.chunks(4) {
                let mode = if c[3] == 0 { InsertMode::Insert } else { InsertMode::Add };
                let slot = self.building[c[0] as usize - r0].entry(c[1] as usize).or_insert(0.0);
                merge(slot, f64::from_bits(c[2]), mode);
            }
        }
        self.finalize(rank)
    }

    pub fn assemble(&mut self, rank: &mut Rank) -> Result<()> {
        self.assembly_begin(&mut rank.exec);
        self.assembly_end(rank)
    }

    fn finalize(&mut self, rank: &mut Rank) -> Result<()> {
        let mut offsets = vec![0];
        let mut colidx = Vec::new();
        let mut vals = Vec::new();
        for row in &self.building {
            for (&j, &v) in row {
                colidx.push(j);
                vals.push(v);
            }
            offsets.push(colidx.len());
        }
        let nnz = colidx.len();
        rank.exec.host_kernel(EventKind::Kernel, "assembly", 16.0 * nnz as f64, 0.0);
        for row in &mut self.building {
            row.clear();
        }
        self.install(rank, offsets, colidx, vals)
    }

    /// Installs a new CSR structure and rebuilds the ghost-column plan.
    fn install(&mut self, rank: &mut Rank, offsets: Vec<usize>, colidx: Vec<usize>, vals: Vec<f64>) -> Result<()> {
        let own = self.cols.range(self.rank);
        let ghosts: Vec<usize> =
            colidx.iter().copied().filter(|c| !own.contains(c)).collect::<BTreeSet<_>>().into_iter().collect();
        let nown = own.len();
        self.lcols = colidx
            .iter()
            .map(|&c| {
                if own.contains(&c) {
                    c - own.start
                } else {
                    nown + ghosts.binary_search(&c).expect("collected above")
                }
            })
            .collect();
        let remote: Vec<(usize, usize)> = ghosts
            .iter()
            .map(|&g| {
                let o = self.cols.owner(g).expect("columns validated");
                (o, g - self.cols.range(o).start)
            })
            .collect();
        let sf = StarForest::new(nown, (0..ghosts.len()).collect(), remote)?;
        self.col_plan = Some(starforest::setup(rank, &sf)?);
        self.ghosts = ghosts;
        self.offsets = offsets;
        self.colidx = colidx;
        let device_id = self.vals.device_id();
        self.vals = MirroredBuffer::with_memtype(vals, crate::exec::MemType::HostPinned, device_id);
        self.state = State::Assembled;
        Ok(())
    }

    fn slot(&self, local_row: usize, col: usize) -> Option<usize> {
        let r = self.offsets[local_row]..self.offsets[local_row + 1];
        self.colidx[r.clone()].binary_search(&col).ok().map(|k| r.start + k)
    }

    /// Writes rows `rows` (global, owned) from `row_fn(global row) -> (cols,
    /// values)` directly into the preallocated pattern as one kernel.
    pub fn set_values_device<F>(&mut self, ctx: &mut ExecContext, rows: Range<usize>, mode: InsertMode, row_fn: F) -> Result<()>
    where
        F: Fn(usize) -> (Vec<usize>, Vec<f64>),
    {
        if self.state != State::Assembled {
            return usage("set_values_device needs a preallocated (assembled) pattern");
        }
        if rows.is_empty() {
            return Ok(());
        }
        let own = self.owned_rows();
        if rows.start < own.start || rows.end > own.end {
            return usage(format!("rows {rows:?} not owned (owned {own:?})"));
        }
        let space = self.space;
        let acc = self.vals.get_access(ctx, space, AccessMode::ReadWrite)?;
        let mut written = 0usize;
        let mut result = Ok(());
        'rows: for i in rows.clone() {
            let (cs, vs) = row_fn(i);
            if cs.len() != vs.len() {
                result = shape(format!("row {i}: {} columns, {} values", cs.len(), vs.len()));
                break;
            }
            for (&c, &v) in cs.iter().zip(&vs) {
                let Some(k) = self.slot(i - own.start, c) else {
                    result = usage(format!("entry ({i}, {c}) outside the preallocated pattern"));
                    break 'rows;
                };
                merge(&mut self.vals.view_mut(&acc)[k], v, mode);
                written += 1;
            }
        }
        let touch = self.vals.touch();
        self.vals.restore_access(acc)?;
        result?;
        let bytes = 12.0 * written as f64 + 8.0 * rows.len() as f64;
        run_kernel(ctx, space, "set_values_device", bytes, &[touch])
    }

    /// Zeroes the values, keeping the pattern.
    pub fn zero_entries(&mut self, ctx: &mut ExecContext) -> Result<()> {
        if self.state != State::Assembled {
            return usage("zero_entries on an unassembled matrix");
        }
        let acc = self.vals.get_access(ctx, self.space, AccessMode::Write)?;
        self.vals.view_mut(&acc).iter_mut().for_each(|v| *v = 0.0);
        let touch = self.vals.touch();
        self.vals.restore_access(acc)?;
        run_kernel(ctx, self.space, "zero_entries", 8.0 * self.nnz() as f64, &[touch])
    }
}

fn run_kernel(ctx: &mut ExecContext, space: ExecSpace, label: &str, bytes: f64, touches: &[Touch]) -> Result<()> {
    match space {
        ExecSpace::Host => {
            ctx.host_kernel(EventKind::Kernel, label, bytes, 0.0);
            Ok(())
        }
        ExecSpace::Device(d) => {
            let s = ctx.default_stream(d);
            ctx.enqueue_kernel(s, EventKind::Kernel, label, bytes, 0.0, touches)
        }
    }
}

fn check_assembled(a: &CsrMatrix) -> Result<()> {
    if a.state != State::Assembled {
        return usage("matrix is not assembled");
    }
    Ok(())
}

fn check_vec(a: &CsrMatrix, v: &DistVec, layout: &Arc<Layout>, what: &str) -> Result<()> {
    if v.layout().as_ref() != layout.as_ref() || v.rank() != a.rank {
        return shape(format!("{what} layout does not match the matrix"));
    }
    if v.space() != a.space {
        return usage(format!("{what} lives in {:?}, matrix in {:?}", v.space(), a.space));
    }
    Ok(())
}

fn spmv_bytes(a: &CsrMatrix) -> f64 {
    let touched = a.cols.local_len(a.rank) + a.ghosts.len();
    12.0 * a.nnz() as f64 + 8.0 * (a.local_rows() + touched) as f64
}

/// `y <- A x`. Ghost entries of `x` are gathered through the column plan.
pub fn spmv(rank: &mut Rank, a: &mut CsrMatrix, x: &mut DistVec, y: &mut DistVec) -> Result<()> {
    check_assembled(a)?;
    check_vec(a, x, &a.cols.clone(), "x")?;
    check_vec(a, y, &a.rows.clone(), "y")?;
    let loc = DataLoc::for_space(a.space);
    let ax = x.access(&mut rank.exec, AccessMode::Read)?;
    let mut xfull = x.buffer().view(&ax).to_vec();
    let nown = xfull.len();
    xfull.resize(nown + a.ghosts.len(), 0.0);
    {
        let plan = a.col_plan.as_mut().expect("assembled matrices have a column plan");
        let (own, ghost) = xfull.split_at_mut(nown);
        starforest::bcast(rank, plan, own, loc, ghost, loc, ReduceOp::Replace)?;
    }
    let xt = x.buffer().touch();
    x.restore(ax)?;
    let av = a.vals.get_access(&mut rank.exec, a.space, AccessMode::Read)?;
    let ay = y.access(&mut rank.exec, AccessMode::Write)?;
    kernels::csr_mult(&a.offsets, &a.lcols, a.vals.view(&av), &xfull, y.buffer_mut().view_mut(&ay));
    let touches = [a.vals.touch(), xt, y.buffer().touch()];
    a.vals.restore_access(av)?;
    y.restore(ay)?;
    run_kernel(&mut rank.exec, a.space, "spmv", spmv_bytes(a), &touches)
}

/// `y <- Aᵀ x`. Ghost-column contributions are summed into their owners.
pub fn spmv_transpose(rank: &mut Rank, a: &mut CsrMatrix, x: &mut DistVec, y: &mut DistVec) -> Result<()> {
    check_assembled(a)?;
    check_vec(a, x, &a.rows.clone(), "x")?;
    check_vec(a, y, &a.cols.clone(), "y")?;
    let loc = DataLoc::for_space(a.space);
    let nown = a.cols.local_len(a.rank);
    let mut yfull = vec![0.0; nown + a.ghosts.len()];
    let ax = x.access(&mut rank.exec, AccessMode::Read)?;
    let av = a.vals.get_access(&mut rank.exec, a.space, AccessMode::Read)?;
    {
        let xs = x.buffer().view(&ax);
        let vs = a.vals.view(&av);
        for i in 0..a.local_rows() {
            for k in a.offsets[i]..a.offsets[i + 1] {
                yfull[a.lcols[k]] += vs[k] * xs[i];
            }
        }
    }
    let touches = [a.vals.touch(), x.buffer().touch()];
    a.vals.restore_access(av)?;
    x.restore(ax)?;
    run_kernel(&mut rank.exec, a.space, "spmv_transpose", spmv_bytes(a), &touches)?;
    let (own, ghost) = yfull.split_at_mut(nown);
    let plan = a.col_plan.as_mut().expect("assembled matrices have a column plan");
    starforest::reduce(rank, plan, ghost, loc, own, loc, ReduceOp::Sum)?;
    let ay = y.access(&mut rank.exec, AccessMode::Write)?;
    y.buffer_mut().view_mut(&ay).copy_from_slice(own);
    y.restore(ay)
}

/// Diagonal entries (zero where absent).
pub fn get_diagonal(ctx: &mut ExecContext, a: &mut CsrMatrix) -> Result<DistVec> {
    check_assembled(a)?;
    if a.rows.as_ref() != a.cols.as_ref() {
        return shape("diagonal of a non-square matrix");
    }
    let r0 = a.owned_rows().start;
    let av = a.vals.get_access(ctx, a.space, AccessMode::Read)?;
    let vs = a.vals.view(&av);
    let d: Vec<f64> = (0..a.local_rows()).map(|i| a.slot(i, r0 + i).map_or(0.0, |k| vs[k])).collect();
    let t = a.vals.touch();
    a.vals.restore_access(av)?;
    let mut out = DistVec::from_local(a.rows.clone(), a.rank, d, a.space)?;
    if a.space.is_device() {
        let acc = out.access(ctx, AccessMode::Write)?;
        let vals = out.buffer().contents();
        out.buffer_mut().view_mut(&acc).copy_from_slice(&vals);
        out.restore(acc)?;
    }
    run_kernel(ctx, a.space, "get_diagonal", 16.0 * a.local_rows() as f64, &[t])?;
    Ok(out)
}

/// A frozen coordinate pattern and the communication plan routing its values.
#[derive(Debug, Clone)]
pub struct CooPlan {
    n_input: usize,
    nrecv_total: usize,
    send: CommPlan,
    slot_of: Vec<usize>,
    repeats: Vec<u32>,
}

impl CooPlan {
    pub fn input_len(&self) -> usize {
        self.n_input
    }

    /// Number of contributions landing on each CSR slot.
    pub fn repeats(&self) -> &[u32] {
        &self.repeats
    }
}

/// Fixes the matrix pattern to the union of `pattern` across ranks.
/// Negative and out-of-range indices are rejected on every rank.
pub fn coo_preprocess(rank: &mut Rank, a: &mut CsrMatrix, pattern: &[(i64, i64)]) -> Result<CooPlan> {
    let (m, n) = (a.rows.global_len() as i64, a.cols.global_len() as i64);
    let bad = pattern.iter().find(|&&(i, j)| i < 0 || j < 0 || i >= m || j >= n).copied();
    if rank.allreduce_any(bad.is_some())? {
        return Err(match bad {
            Some((i, j)) if i < 0 || j < 0 => Error::Usage(format!("negative COO index ({i}, {j})")),
            Some((i, j)) => Error::Shape(format!("COO entry ({i}, {j}) outside {m}x{n}")),
            None => Error::Shape("invalid COO pattern on another rank".into()),
        });
    }
    let p = rank.size();
    let me = rank.id();
    let mut own = Vec::new();
    let mut own_pos = Vec::new();
    let mut by_owner: Vec<Vec<(usize, usize)>> = vec![Vec::new(); p];
    for (k, &(i, j)) in pattern.iter().enumerate() {
        let (i, j) = (i as usize, j as usize);
        let o = a.rows.owner(i).expect("validated");
        if o == me {
            own.push((i, j));
            own_pos.push(k);
        } else {
            by_owner[o].push((i, j));
        }
    }
    let sends: Vec<Vec<u64>> =
        by_owner.iter().map(|v| v.iter().flat_map(|&(i, j)| [i as u64, j as u64]).collect()).collect();
    let received = rank.exchange(sends)?;

    // Combined list: own entries, then each source rank in ascending order.
    let mut entries = own.clone();
    let mut bases = vec![Vec::new(); p];
    for (src, words) in received.iter().enumerate() {
        if !words.is_empty() {
            bases[src] = vec![entries.len() as u64];
        }
        entries.extend(words.chunks(2).map(|c| (c[0] as usize, c[1] as usize)));
    }
    let base_of = rank.exchange(bases)?;

    let mut leaf_local = own_pos.clone();
    let mut leaf_remote: Vec<(usize, usize)> = (0..own.len()).map(|k| (me, k)).collect();
    let mut counters = vec![0usize; p];
    for (k, &(i, _)) in pattern.iter().enumerate() {
        let o = a.rows.owner(i as usize).expect("validated");
        if o != me {
            leaf_local.push(k);
            leaf_remote.push((o, base_of[o][0] as usize + counters[o]));
            counters[o] += 1;
        }
    }
    let sf = StarForest::new(entries.len(), leaf_local, leaf_remote)?;
    let send = starforest::setup(rank, &sf)?;

    let r0 = a.owned_rows().start;
    let mut rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); a.local_rows()];
    for &(i, j) in &entries {
        rows[i - r0].insert(j);
    }
    let mut offsets = vec![0];
    let mut colidx = Vec::new();
    for r in &rows {
        colidx.extend(r.iter().copied());
        offsets.push(colidx.len());
    }
    let nnz = colidx.len();
    a.install(rank, offsets, colidx, vec![0.0; nnz])?;
    let slot_of: Vec<usize> = entries.iter().map(|&(i, j)| a.slot(i - r0, j).expect("pattern built above")).collect();
    let mut repeats = vec![0u32; nnz];
    for &s in &slot_of {
        repeats[s] += 1;
    }
    Ok(CooPlan { n_input: pattern.len(), nrecv_total: entries.len(), send, slot_of, repeats })
}

/// Sets every slot to the sum of its contributions in `values` (one value
/// per pattern entry, same order as given to [`coo_preprocess`]).
pub fn coo_set_values(rank: &mut Rank, a: &mut CsrMatrix, plan: &mut CooPlan, values: &[f64]) -> Result<()> {
    if values.len() != plan.n_input {
        return shape(format!("{} values for a pattern of {}", values.len(), plan.n_input));
    }
    check_assembled(a)?;
    let loc = DataLoc::for_space(a.space);
    let mut gathered = vec![0.0; plan.nrecv_total];
    starforest::reduce(rank, &mut plan.send, values, loc, &mut gathered, loc, ReduceOp::Replace)?;
    let acc = a.vals.get_access(&mut rank.exec, a.space, AccessMode::Write)?;
    let vs = a.vals.view_mut(&acc);
    vs.iter_mut().for_each(|v| *v = 0.0);
    for (&s, &v) in plan.slot_of.iter().zip(&gathered) {
        vs[s] += v;
    }
    let touch = a.vals.touch();
    a.vals.restore_access(acc)?;
    let bytes = 12.0 * gathered.len() as f64 + 8.0 * a.nnz() as f64;
    run_kernel(&mut rank.exec, a.space, "coo_apply", bytes, &[touch])
}

/// Coordinate-format matrix as read from or written to a Matrix Market file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixMarket {
    pub nrows: usize,
    pub ncols: usize,
    /// Zero-based `(row, col, value)`.
    pub entries: Vec<(usize, usize, f64)>,
}

impl MatrixMarket {
    /// Reads `coordinate real|integer general|symmetric` files.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty file".into()))?;
        let h: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
        if h.len() < 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" || h[2] != "coordinate" {
            return Err(Error::Parse(format!("unsupported header '{header}'")));
        }
        if h[3] != "real" && h[3] != "integer" {
            return Err(Error::Parse(format!("unsupported field '{}'", h[3])));
        }
        let symmetric = match h[4].as_str() {
            "general" => false,
            "symmetric" => true,
            other => return Err(Error::Parse(format!("unsupported symmetry '{other}'"))),
        };
        let mut body = lines.map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('%'));
        let size = body.next().ok_or_else(|| Error::Parse("missing size line".into()))?;
        let dims: Vec<usize> = size
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad size line '{size}'"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Parse(format!("bad size line '{size}'")));
        }
        let (nrows, ncols, nnz) = (dims[0], dims[1], dims[2]);
        let mut entries = Vec::with_capacity(nnz);
        for line in body {
            let t: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("bad entry '{line}'"));
            if t.len() != 3 {
                return Err(bad());
            }
            let i: usize = t[0].parse().map_err(|_| bad())?;
            let j: usize = t[1].parse().map_err(|_| bad())?;
            let v: f64 = t[2].parse().map_err(|_| bad())?;
            if i == 0 || j == 0 || i > nrows || j > ncols {
                return Err(Error::Parse(format!("entry ({i}, {j}) outside {nrows}x{ncols}")));
            }
            entries.push((i - 1, j - 1, v));
            if symmetric && i != j {
                entries.push((j - 1, i - 1, v));
            }
        }
        let stored = if symmetric { entries.iter().filter(|e| e.0 >= e.1).count() } else { entries.len() };
        if stored != nnz {
            return Err(Error::Parse(format!("expected {nnz} entries, found {stored}")));
        }
        Ok(MatrixMarket { nrows, ncols, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `coordinate real general`; values round-trip exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "{} {} {}", self.nrows, self.ncols, self.entries.len());
        for &(i, j, v) in &self.entries {
            let _ = writeln!(s, "{} {} {:e}", i + 1, j + 1, v);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Every rank inserts the entries of the rows it owns and assembles.
    pub fn to_matrix(&self, rank: &mut Rank, space: ExecSpace) -> Result<CsrMatrix> {
        let rows = Arc::new(Layout::uniform(self.nrows, rank.size()));
        let cols = if self.nrows == self.ncols { rows.clone() } else { Arc::new(Layout::uniform(self.ncols, rank.size())) };
        let mut a = CsrMatrix::new(rows, cols, rank.id(), space);
        let own = a.owned_rows();
        for &(i, j, v) in self.entries.iter().filter(|e| own.contains(&e.0)) {
            a.set_values(&[i], &[j], &[v], InsertMode::Add)?;
        }
        a.assemble(rank)?;
        Ok(a)
    }
}
