//! Krylov solvers, Jacobi/Chebyshev smoothing, geometric multigrid with
//! per-level execution-space binding, and full-step Newton.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::costmodel::EventKind;
use crate::error::{shape, Error, Result};
use crate::exec::{AccessMode, ExecContext, ExecSpace};
use crate::grid::{GridSpec, LocalVec, StructuredGrid};
use crate::mat::{get_diagonal, spmv, spmv_transpose, CsrMatrix, InsertMode};
use crate::transport::Rank;
use crate::vec::{self, axpy, aypx, copy, dot, norm2, pointwise_axpy, pointwise_mult, scale, set_scalar, waxpy, DistVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KspType {
    Cg,
    BiCgStab,
    Chebyshev,
    Richardson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcType {
    None,
    Jacobi,
    Mg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleType {
    V,
    W,
}

impl CycleType {
    fn gamma(self) -> usize {
        match self {
            CycleType::V => 1,
            CycleType::W => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovConfig {
    pub method: KspType,
    pub rtol: f64,
    pub atol: f64,
    pub max_it: usize,
    /// Damping for Richardson.
    pub scale: f64,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        KrylovConfig { method: KspType::Cg, rtol: 1e-8, atol: 1e-50, max_it: 10_000, scale: 1.0 }
    }
}

impl KrylovConfig {
    pub fn new(method: KspType) -> Self {
        KrylovConfig { method, ..Default::default() }
    }

    pub fn rtol(mut self, rtol: f64) -> Self {
        self.rtol = rtol;
        self
    }

    pub fn max_it(mut self, max_it: usize) -> Self {
        self.max_it = max_it;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_it == 0 {
            return Err(Error::Config("max_it must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    /// Residual norms, starting with the initial residual.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// `z <- M r`.
pub trait Preconditioner {
    fn apply(&mut self, rank: &mut Rank, r: &mut DistVec, z: &mut DistVec) -> Result<()>;
}

pub struct Identity;

impl Preconditioner for Identity {
    fn apply(&mut self, rank: &mut Rank, r: &mut DistVec, z: &mut DistVec) -> Result<()> {
        copy(&mut rank.exec, r, z)
    }
}

/// Pointwise multiplication by the inverse diagonal.
pub struct Jacobi {
    dinv: DistVec,
}

impl Jacobi {
    pub fn new(ctx: &mut ExecContext, a: &mut CsrMatrix) -> Result<Self> {
        let mut dinv = get_diagonal(ctx, a)?;
        vec::reciprocal(ctx, &mut dinv)?;
        Ok(Jacobi { dinv })
    }

    pub fn inverse_diagonal(&mut self) -> &mut DistVec {
        &mut self.dinv
    }
}

impl Preconditioner for Jacobi {
    fn apply(&mut self, rank: &mut Rank, r: &mut DistVec, z: &mut DistVec) -> Result<()> {
        pointwise_mult(&mut rank.exec, z, &mut self.dinv, r)
    }
}

/// `r <- b - A x`, using `t` as scratch.
fn residual(rank: &mut Rank, a: &mut CsrMatrix, b: &mut DistVec, x: &mut DistVec, r: &mut DistVec, t: &mut DistVec) -> Result<()> {
    spmv(rank, a, x, t)?;
    waxpy(&mut rank.exec, r, -1.0, t, b)
}

fn finite(v: f64, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Breakdown { iteration, reason: "non-finite residual".into() })
    }
}

/// Solves `A x = b` from the initial guess in `x`.
pub fn ksp_solve(
    rank: &mut Rank,
    cfg: &KrylovConfig,
    a: &mut CsrMatrix,
    b: &mut DistVec,
    x: &mut DistVec,
    pc: &mut dyn Preconditioner,
) -> Result<SolveInfo> {
    cfg.validate()?;
    if !a.is_assembled() {
        return Err(Error::Usage("solve with an unassembled operator".into()));
    }
    if a.row_layout().as_ref() != a.col_layout().as_ref() {
        return shape("solve needs a square operator");
    }
    let bnorm = norm2(rank, b)?;
    let tol = (cfg.rtol * bnorm).max(cfg.atol);
    match cfg.method {
        KspType::Cg => cg(rank, cfg, tol, a, b, x, pc),
        KspType::BiCgStab => bicgstab(rank, cfg, tol, a, b, x, pc),
        KspType::Richardson => richardson(rank, cfg, tol, a, b, x, pc),
        KspType::Chebyshev => {
            let mut j = Jacobi::new(&mut rank.exec, a)?;
            let bounds = estimate_eigs(rank, a, Some(&mut j.dinv))?;
            chebyshev_iterate(rank, a, &mut j.dinv, b, x, bounds, cfg.max_it, Some(tol))
        }
    }
}

fn cg(
    rank: &mut Rank,
    cfg: &KrylovConfig,
    tol: f64,
    a: &mut CsrMatrix,
    b: &mut DistVec,
    x: &mut DistVec,
    pc: &mut dyn Preconditioner,
) -> Result<SolveInfo> {
    let (mut r, mut z, mut p, mut q) = (b.duplicate(), b.duplicate(), b.duplicate(), b.duplicate());
    residual(rank, a, b, x, &mut r, &mut q)?;
    let mut rnorm = finite(norm2(rank, &mut r)?, 0)?;
    let mut history = vec![rnorm];
    if rnorm <= tol {
        return Ok(SolveInfo { iterations: 0, history, converged: true });
    }
    pc.apply(rank, &mut r, &mut z)?;
    copy(&mut rank.exec, &mut z, &mut p)?;
    let mut rz = dot(rank, &mut r, &mut z)?;
    for it in 1..=cfg.max_it {
        spmv(rank, a, &mut p, &mut q)?;
        let pq = dot(rank, &mut p, &mut q)?;
        if pq <= 0.0 || !pq.is_finite() {
            return Err(Error::Breakdown { iteration: it, reason: format!("indefinite operator (p'Ap = {pq:e})") });
        }
        let alpha = rz / pq;
        axpy(&mut rank.exec, x, alpha, &mut p)?;
        axpy(&mut rank.exec, &mut r, -alpha, &mut q)?;
        rnorm = finite(norm2(rank, &mut r)?, it)?;
        history.push(rnorm);
        if rnorm <= tol {
            return Ok(SolveInfo { iterations: it, history, converged: true });
        }
        pc.apply(rank, &mut r, &mut z)?;
        let rz_new = dot(rank, &mut r, &mut z)?;
        aypx(&mut rank.exec, &mut p, rz_new / rz, &mut z)?;
        rz = rz_new;
    }
    Ok(SolveInfo { iterations: cfg.max_it, history, converged: false })
}

fn bicgstab(
    rank: &mut Rank,
    cfg: &KrylovConfig,
    tol: f64,
    a: &mut CsrMatrix,
    b: &mut DistVec,
    x: &mut DistVec,
    pc: &mut dyn Preconditioner,
) -> Result<SolveInfo> {
    let mut r = b.duplicate();
    let mut t = b.duplicate();
    residual(rank, a, b, x, &mut r, &mut t)?;
    let mut rnorm = finite(norm2(rank, &mut r)?, 0)?;
    let mut history = vec![rnorm];
    if rnorm <= tol {
        return Ok(SolveInfo { iterations: 0, history, converged: true });
    }
    let mut rhat = r.clone();
    let (mut p, mut v, mut y, mut s, mut z) = (b.duplicate(), b.duplicate(), b.duplicate(), b.duplicate(), b.duplicate());
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    for it in 1..=cfg.max_it {
        let rho_new = dot(rank, &mut rhat, &mut r)?;
        if rho_new == 0.0 || !rho_new.is_finite() {
            return Err(Error::Breakdown { iteration: it, reason: "rho = 0".into() });
        }
        if it == 1 {
            copy(&mut rank.exec, &mut r, &mut p)?;
        } else {
            let beta = (rho_new / rho) * (alpha / omega);
            // p = r + beta (p - omega v)
            axpy(&mut rank.exec, &mut p, -omega, &mut v)?;
            aypx(&mut rank.exec, &mut p, beta, &mut r)?;
        }
        pc.apply(rank, &mut p, &mut y)?;
        spmv(rank, a, &mut y, &mut v)?;
        let rv = dot(rank, &mut rhat, &mut v)?;
        if rv == 0.0 || !rv.is_finite() {
            return Err(Error::Breakdown { iteration: it, reason: "rhat'v = 0".into() });
        }
        alpha = rho_new / rv;
        waxpy(&mut rank.exec, &mut s, -alpha, &mut v, &mut r)?;
        let snorm = finite(norm2(rank, &mut s)?, it)?;
        if snorm <= tol {
            axpy(&mut rank.exec, x, alpha, &mut y)?;
            history.push(snorm);
            return Ok(SolveInfo { iterations: it, history, converged: true });
        }
        pc.apply(rank, &mut s, &mut z)?;
        spmv(rank, a, &mut z, &mut t)?;
        let tn = norm2(rank, &mut t)?;
        let tt = tn * tn;
        if tt == 0.0 {
            return Err(Error::Breakdown { iteration: it, reason: "t't = 0".into() });
        }
        omega = dot(rank, &mut t, &mut s)? / tt;
        axpy(&mut rank.exec, x, alpha, &mut y)?;
        axpy(&mut rank.exec, x, omega, &mut z)?;
        waxpy(&mut rank.exec, &mut r, -omega, &mut t, &mut s)?;
        rnorm = finite(norm2(rank, &mut r)?, it)?;
        history.push(rnorm);
        if rnorm <= tol {
            return Ok(SolveInfo { iterations: it, history, converged: true });
        }
        if omega == 0.0 {
            return Err(Error::Breakdown { iteration: it, reason: "omega = 0".into() });
        }
        rho = rho_new;
    }
    Ok(SolveInfo { iterations: cfg.max_it, history, converged: false })
}

fn richardson(
    rank: &mut Rank,
    cfg: &KrylovConfig,
    tol: f64,
    a: &mut CsrMatrix,
    b: &mut DistVec,
    x: &mut DistVec,
    pc: &mut dyn Preconditioner,
) -> Result<SolveInfo> {
    let (mut r, mut z, mut t) = (b.duplicate(), b.duplicate(), b.duplicate());
    let mut history = Vec::new();
    for it in 0..=cfg.max_it {
        residual(rank, a, b, x, &mut r, &mut t)?;
        let rnorm = finite(norm2(rank, &mut r)?, it)?;
        history.push(rnorm);
        if rnorm <= tol {
            return Ok(SolveInfo { iterations: it, history, converged: true });
        }
        if it == cfg.max_it {
            break;
        }
        pc.apply(rank, &mut r, &mut z)?;
        axpy(&mut rank.exec, x, cfg.scale, &mut z)?;
    }
    Ok(SolveInfo { iterations: cfg.max_it, history, converged: false })
}

/// Deterministic pseudo-random entries in `[0.5, 1.5)`, keyed by global index
/// so the result does not depend on the partition.
fn start_vector(i: usize) -> f64 {
    let mut z = (i as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    0.5 + (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Power iteration on `D⁻¹A` (or `A` when `dinv` is `None`) from a fixed
/// pseudo-random vector: 10 steps, then `(0.1 λ, 1.1 λ)`.
pub fn estimate_eigs(rank: &mut Rank, a: &mut CsrMatrix, mut dinv: Option<&mut DistVec>) -> Result<(f64, f64)> {
    let space = a.space();
    let mut v = DistVec::from_fn(a.row_layout().clone(), a.rank(), space, start_vector);
    let mut w = v.duplicate();
    let n0 = norm2(rank, &mut v)?;
    if n0 == 0.0 {
        return Err(Error::Config("eigenvalue estimate of an empty operator".into()));
    }
    scale(&mut rank.exec, &mut v, 1.0 / n0)?;
    let mut lambda = 0.0;
    for _ in 0..10 {
        spmv(rank, a, &mut v, &mut w)?;
        if let Some(d) = dinv.as_deref_mut() {
            let mut t = w.clone();
            pointwise_mult(&mut rank.exec, &mut w, d, &mut t)?;
        }
        lambda = norm2(rank, &mut w)?;
        if lambda == 0.0 || !lambda.is_finite() {
            return Err(Error::Config("eigenvalue estimate of a zero operator".into()));
        }
        scale(&mut rank.exec, &mut w, 1.0 / lambda)?;
        std::mem::swap(&mut v, &mut w);
    }
    Ok((0.1 * lambda, 1.1 * lambda))
}

/// Chebyshev iteration on the Jacobi-preconditioned operator. Without a
/// tolerance it runs exactly `sweeps` steps and computes no inner products.
#[allow(clippy::too_many_arguments)]
fn chebyshev_iterate(
    rank: &mut Rank,
    a: &mut CsrMatrix,
    dinv: &mut DistVec,
    b: &mut DistVec,
    x: &mut DistVec,
    (lmin, lmax): (f64, f64),
    sweeps: usize,
    tol: Option<f64>,
) -> Result<SolveInfo> {
    if !(lmin > 0.0 && lmin < lmax && lmax.is_finite()) {
        return Err(Error::Config(format!("invalid Chebyshev bounds ({lmin}, {lmax})")));
    }
    let theta = 0.5 * (lmax + lmin);
    let delta = 0.5 * (lmax - lmin);
    let sigma = theta / delta;
    let mut rho = 1.0 / sigma;
    let (mut r, mut d, mut t) = (b.duplicate(), b.duplicate(), b.duplicate());
    residual(rank, a, b, x, &mut r, &mut t)?;
    let mut history = Vec::new();
    if let Some(tol) = tol {
        let n = norm2(rank, &mut r)?;
        history.push(n);
        if n <= tol {
            return Ok(SolveInfo { iterations: 0, history, converged: true });
        }
    }
    pointwise_mult(&mut rank.exec, &mut d, dinv, &mut r)?;
    scale(&mut rank.exec, &mut d, 1.0 / theta)?;
    for k in 1..=sweeps {
        axpy(&mut rank.exec, x, 1.0, &mut d)?;
        if tol.is_none() && k == sweeps {
            break;
        }
        spmv(rank, a, &mut d, &mut t)?;
        axpy(&mut rank.exec, &mut r, -1.0, &mut t)?;
        if let Some(tol) = tol {
            let n = finite(norm2(rank, &mut r)?, k)?;
            history.push(n);
            if n <= tol {
                return Ok(SolveInfo { iterations: k, history, converged: true });
            }
        }
        if k == sweeps {
            break;
        }
        let rho_new = 1.0 / (2.0 * sigma - rho);
        scale(&mut rank.exec, &mut d, rho_new * rho)?;
        pointwise_axpy(&mut rank.exec, &mut d, 2.0 * rho_new / delta, dinv, &mut r)?;
        rho = rho_new;
    }
    Ok(SolveInfo { iterations: sweeps, history, converged: tol.is_none() })
}

/// `sweeps` Chebyshev steps for `A x = b` preconditioned by `dinv`, with
/// eigenvalue bounds of `D⁻¹A`.
#[allow(clippy::too_many_arguments)]
pub fn chebyshev_smooth(
    rank: &mut Rank,
    a: &mut CsrMatrix,
    dinv: &mut DistVec,
    b: &mut DistVec,
    x: &mut DistVec,
    sweeps: usize,
    bounds: (f64, f64),
) -> Result<()> {
    if sweeps == 0 {
        return Ok(());
    }
    chebyshev_iterate(rank, a, dinv, b, x, bounds, sweeps, None).map(|_| ())
}

/// LU factorization with partial pivoting of a small dense matrix.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    /// `a` is row-major `n × n`.
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .expect("non-empty range");
            if a[p * n + k] == 0.0 {
                return Err(Error::Breakdown { iteration: k, reason: "singular coarse operator".into() });
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                piv.swap(k, p);
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let l = a[i * n + k] / pivot;
                a[i * n + k] = l;
                for j in k + 1..n {
                    a[i * n + j] -= l * a[k * n + j];
                }
            }
        }
        Ok(DenseLu { n, lu: a, piv })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= self.lu[i * n + j] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.lu[i * n + j] * y[j];
            }
            y[i] /= self.lu[i * n + i];
        }
        y
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

/// Gathers `a` on every rank and factors it.
pub fn redundant_lu(rank: &mut Rank, a: &CsrMatrix) -> Result<DenseLu> {
    let n = a.row_layout().global_len();
    let mut dense = vec![0.0; n * n];
    for (i, j, v) in a.gather_triplets(rank)? {
        dense[i * n + j] = v;
    }
    DenseLu::factor(n, dense)
}

/// Per-level execution-space assignment, e.g. `host:0-4,device:5-8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding(pub BTreeMap<usize, ExecSpace>);

impl Binding {
    pub fn uniform(nlevels: usize, space: ExecSpace) -> Self {
        Binding((0..nlevels).map(|l| (l, space)).collect())
    }

    /// Levels below `k` on the host, the rest on device 0.
    pub fn split(nlevels: usize, k: usize) -> Self {
        Binding((0..nlevels).map(|l| (l, if l < k { ExecSpace::Host } else { ExecSpace::Device(0) })).collect())
    }

    /// Unlisted levels run on the host.
    pub fn space(&self, level: usize) -> ExecSpace {
        self.0.get(&level).copied().unwrap_or(ExecSpace::Host)
    }
}

impl FromStr for Binding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || Error::Config(format!("bad binding '{part}' (expected host:a-b or device:a-b)"));
            let (kind, range) = part.split_once(':').ok_or_else(bad)?;
            let space = match kind {
                "host" => ExecSpace::Host,
                "device" => ExecSpace::Device(0),
                _ => return Err(bad()),
            };
            let (lo, hi) = match range.split_once('-') {
                Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
                None => {
                    let v: usize = range.parse().map_err(|_| bad())?;
                    (v, v)
                }
            };
            if lo > hi {
                return Err(bad());
            }
            for l in lo..=hi {
                map.insert(l, space);
            }
        }
        Ok(Binding(map))
    }
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|(l, s)| format!("{}:{l}", if s.is_device() { "device" } else { "host" }))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Builds a level operator on a grid in the given space.
pub type OperatorFn<'a> = dyn Fn(&StructuredGrid, &mut Rank, ExecSpace) -> Result<CsrMatrix> + 'a;

#[derive(Debug)]
pub struct MgLevel {
    pub grid: StructuredGrid,
    pub a: CsrMatrix,
    dinv: DistVec,
    /// Interpolation from the next coarser level (absent on level 0).
    interp: Option<CsrMatrix>,
    bounds: (f64, f64),
    space: ExecSpace,
}

impl MgLevel {
    pub fn space(&self) -> ExecSpace {
        self.space
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }
}

#[derive(Debug)]
struct Work {
    r: DistVec,
    t: DistVec,
    /// Coarser-level-shaped vectors in this level's space, for restriction
    /// and prolongation across a binding change.
    rc: Option<DistVec>,
    xc: Option<DistVec>,
}

#[derive(Debug)]
pub struct MgHierarchy {
    levels: Vec<MgLevel>,
    work: Vec<Option<Work>>,
    /// Right-hand side and iterate of each level below the finest.
    bx: Vec<Option<(DistVec, DistVec)>>,
    coarse: DenseLu,
    pub cycle: CycleType,
    pub pre: usize,
    pub post: usize,
}

fn scope_name(level: usize) -> String {
    format!("level-{level}")
}

/// Moves `src` into `dst` (same layout, possibly another space); the copy
/// shows up as a device-to-host or host-to-device transfer.
fn migrate(ctx: &mut ExecContext, src: &mut DistVec, dst: &mut DistVec) -> Result<()> {
    let vals = src.read(ctx)?;
    dst.write(ctx, &vals)?;
    if dst.space().is_device() {
        let acc = dst.access(ctx, AccessMode::Read)?;
        dst.restore(acc)?;
    }
    Ok(())
}

impl MgHierarchy {
    /// Grids from `coarse` refined `nlevels - 1` times, operators by
    /// rediscretization, smoothers set up in each level's bound space.
    pub fn build(
        rank: &mut Rank,
        coarse: &GridSpec,
        nlevels: usize,
        binding: &Binding,
        op: &OperatorFn<'_>,
    ) -> Result<Self> {
        if nlevels == 0 {
            return Err(Error::Config("multigrid needs at least one level".into()));
        }
        let prev = rank.exec.set_scope("mg_setup");
        let mut grids = vec![StructuredGrid::create(rank, coarse)?];
        for _ in 1..nlevels {
            let g = grids.last().expect("non-empty").refine(rank)?;
            grids.push(g);
        }
        let mut levels = Vec::with_capacity(nlevels);
        for (l, grid) in grids.into_iter().enumerate() {
            let space = binding.space(l);
            let mut a = op(&grid, rank, space)?;
            let mut dinv = get_diagonal(&mut rank.exec, &mut a)?;
            vec::reciprocal(&mut rank.exec, &mut dinv)?;
            let bounds = if l > 0 { estimate_eigs(rank, &mut a, Some(&mut dinv))? } else { (0.0, 0.0) };
            let interp = match levels.last() {
                Some(c) => {
                    let c: &MgLevel = c;
                    Some(grid.interpolation(rank, &c.grid, space)?)
                }
                None => None,
            };
            levels.push(MgLevel { grid, a, dinv, interp, bounds, space });
        }
        let coarse_lu = redundant_lu(rank, &levels[0].a)?;
        let mut h = MgHierarchy {
            work: Vec::new(),
            bx: Vec::new(),
            levels,
            coarse: coarse_lu,
            cycle: CycleType::V,
            pre: 2,
            post: 2,
        };
        h.allocate_work();
        rank.exec.set_scope(prev);
        Ok(h)
    }

    /// 2D Dirichlet Poisson on `finest × finest` points (`finest = 2^k m + 1`).
    pub fn poisson_2d(rank: &mut Rank, finest: usize, nlevels: usize, binding: &Binding) -> Result<Self> {
        let f = 1usize << (nlevels - 1);
        if finest < 2 || !(finest - 1).is_multiple_of(f) {
            return Err(Error::Config(format!("{finest} points cannot be coarsened {} times", nlevels - 1)));
        }
        let n0 = (finest - 1) / f + 1;
        let spec = GridSpec::d2(n0, n0, false);
        Self::build(rank, &spec, nlevels, binding, &|g, r, s| g.poisson(r, s))
    }

    fn allocate_work(&mut self) {
        let top = self.levels.len() - 1;
        self.bx = (0..top)
            .map(|l| {
                let v = self.levels[l].grid.create_global(self.levels[l].space);
                Some((v.duplicate(), v))
            })
            .collect();
        self.work = (0..self.levels.len())
            .map(|l| {
                let lev = &self.levels[l];
                let v = lev.grid.create_global(lev.space);
                let cross = l > 0 && self.levels[l - 1].space != lev.space;
                let coarse_vec = || self.levels[l - 1].grid.create_global(lev.space);
                Some(Work {
                    r: v.duplicate(),
                    t: v,
                    rc: cross.then(coarse_vec),
                    xc: cross.then(coarse_vec),
                })
            })
            .collect();
    }

    pub fn nlevels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &MgLevel {
        &self.levels[l]
    }

    pub fn finest(&self) -> &MgLevel {
        self.levels.last().expect("at least one level")
    }

    pub fn finest_mut(&mut self) -> &mut MgLevel {
        self.levels.last_mut().expect("at least one level")
    }

    pub fn binding(&self) -> Binding {
        Binding(self.levels.iter().enumerate().map(|(l, lev)| (l, lev.space)).collect())
    }

    /// Rebinds every level; data follows lazily on the next use.
    pub fn bind_levels(&mut self, binding: &Binding) -> Result<()> {
        for (l, lev) in self.levels.iter_mut().enumerate() {
            let s = binding.space(l);
            lev.space = s;
            lev.a.set_space(s)?;
            lev.dinv.set_space(s);
            if let Some(p) = lev.interp.as_mut() {
                p.set_space(s)?;
            }
        }
        self.allocate_work();
        Ok(())
    }

    /// One cycle on the finest level, improving `x` for right-hand side `b`.
    pub fn cycle(&mut self, rank: &mut Rank, b: &mut DistVec, x: &mut DistVec) -> Result<()> {
        let top = self.levels.len() - 1;
        if b.space() != self.levels[top].space || x.space() != self.levels[top].space {
            return Err(Error::Usage("cycle vectors must live in the finest level's space".into()));
        }
        let prev = rank.exec.scope().to_string();
        let r = self.visit(rank, top, b, x);
        rank.exec.set_scope(prev);
        r
    }

    fn coarse_solve(&mut self, rank: &mut Rank, b: &mut DistVec, x: &mut DistVec) -> Result<()> {
        let space = self.levels[0].space;
        let n = self.coarse.dim();
        if let ExecSpace::Device(d) = space {
            let s = rank.exec.default_stream(d);
            rank.exec.sync_stream(s);
        }
        let ab = b.access(&mut rank.exec, AccessMode::Read)?;
        let mine: Vec<u64> = b.buffer().view(&ab).iter().map(|v| v.to_bits()).collect();
        b.restore(ab)?;
        let full: Vec<f64> = rank.allgather(mine)?.into_iter().flatten().map(f64::from_bits).collect();
        let sol = self.coarse.solve(&full);
        let range = x.owned_range();
        let ax = x.access(&mut rank.exec, AccessMode::Write)?;
        x.buffer_mut().view_mut(&ax).copy_from_slice(&sol[range]);
        x.restore(ax)?;
        let bytes = 8.0 * (n * n + 2 * n) as f64;
        match space {
            ExecSpace::Host => rank.exec.host_kernel(EventKind::Kernel, "coarse_solve", bytes, 2.0 * (n * n) as f64),
            ExecSpace::Device(d) => {
                let s = rank.exec.default_stream(d);
                rank.exec.enqueue_kernel(s, EventKind::Kernel, "coarse_solve", bytes, 2.0 * (n * n) as f64, &[])?;
            }
        }
        Ok(())
    }

    fn visit(&mut self, rank: &mut Rank, l: usize, b: &mut DistVec, x: &mut DistVec) -> Result<()> {
        rank.exec.set_scope(scope_name(l));
        rank.exec.overhead("mg_visit", 0.0);
        if l == 0 {
            return self.coarse_solve(rank, b, x);
        }
        let mut w = self.work[l].take().expect("work vectors present");
        let result = self.visit_fine(rank, l, b, x, &mut w);
        self.work[l] = Some(w);
        result
    }

    fn visit_fine(&mut self, rank: &mut Rank, l: usize, b: &mut DistVec, x: &mut DistVec, w: &mut Work) -> Result<()> {
        let (pre, post, gamma) = (self.pre, self.post, self.cycle.gamma());
        let scale_r = self.levels[l].grid.restriction_scale();
        {
            let lev = &mut self.levels[l];
            chebyshev_smooth(rank, &mut lev.a, &mut lev.dinv, b, x, pre, lev.bounds)?;
            residual(rank, &mut lev.a, b, x, &mut w.r, &mut w.t)?;
        }
        {
            let (cb, cx) = self.bx[l - 1].as_mut().expect("coarse vectors present");
            let p = self.levels[l].interp.as_mut().expect("fine levels have interpolation");
            match w.rc.as_mut() {
                Some(rc) => {
                    spmv_transpose(rank, p, &mut w.r, rc)?;
                    scale(&mut rank.exec, rc, scale_r)?;
                    rank.exec.set_scope(scope_name(l - 1));
                    migrate(&mut rank.exec, rc, cb)?;
                }
                None => {
                    spmv_transpose(rank, p, &mut w.r, cb)?;
                    scale(&mut rank.exec, cb, scale_r)?;
                }
            }
            rank.exec.set_scope(scope_name(l - 1));
            set_scalar(&mut rank.exec, cx, 0.0)?;
        }
        for _ in 0..gamma {
            let (mut cb, mut cx) = self.bx[l - 1].take().expect("coarse vectors present");
            let r = self.visit(rank, l - 1, &mut cb, &mut cx);
            self.bx[l - 1] = Some((cb, cx));
            r?;
        }
        rank.exec.set_scope(scope_name(l - 1));
        {
            let (_, cx) = self.bx[l - 1].as_mut().expect("coarse vectors present");
            let p = self.levels[l].interp.as_mut().expect("fine levels have interpolation");
            match w.xc.as_mut() {
                Some(xc) => {
                    migrate(&mut rank.exec, cx, xc)?;
                    rank.exec.set_scope(scope_name(l));
                    spmv(rank, p, xc, &mut w.t)?;
                }
                None => {
                    rank.exec.set_scope(scope_name(l));
                    spmv(rank, p, cx, &mut w.t)?;
                }
            }
            axpy(&mut rank.exec, x, 1.0, &mut w.t)?;
        }
        let lev = &mut self.levels[l];
        chebyshev_smooth(rank, &mut lev.a, &mut lev.dinv, b, x, post, lev.bounds)
    }
}

impl Preconditioner for MgHierarchy {
    fn apply(&mut self, rank: &mut Rank, r: &mut DistVec, z: &mut DistVec) -> Result<()> {
        set_scalar(&mut rank.exec, z, 0.0)?;
        self.cycle(rank, r, z)
    }
}

/// Key/value solver options, e.g. `ksp_type=cg`, `mg_cycle=w`,
/// `mg_bind=host:0-4,device:5-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub ksp: KrylovConfig,
    pub pc: PcType,
    pub mg_cycle: CycleType,
    pub mg_levels: usize,
    pub mg_bind: Option<Binding>,
    pub mg_smooth_down: usize,
    pub mg_smooth_up: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            ksp: KrylovConfig::default(),
            pc: PcType::Jacobi,
            mg_cycle: CycleType::V,
            mg_levels: 5,
            mg_bind: None,
            mg_smooth_down: 2,
            mg_smooth_up: 2,
        }
    }
}

impl SolverOptions {
    pub fn parse<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut o = SolverOptions::default();
        for item in items {
            let item = item.as_ref().trim();
            if item.is_empty() {
                continue;
            }
            let (k, v) = item.split_once('=').ok_or_else(|| Error::Config(format!("option '{item}' is not key=value")))?;
            o.set(k.trim(), v.trim())?;
        }
        o.ksp.validate()?;
        Ok(o)
    }

    /// Whitespace-separated `key=value` pairs.
    pub fn from_str_list(s: &str) -> Result<Self> {
        Self::parse(s.split_whitespace())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value '{value}' for {key}"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "ksp_type" => {
                self.ksp.method = match value.to_ascii_lowercase().as_str() {
                    "cg" => KspType::Cg,
                    "bicgstab" | "bcgs" => KspType::BiCgStab,
                    "chebyshev" => KspType::Chebyshev,
                    "richardson" => KspType::Richardson,
                    _ => return Err(bad()),
                }
            }
            "ksp_rtol" => self.ksp.rtol = num(value)?,
            "ksp_atol" => self.ksp.atol = num(value)?,
            "ksp_max_it" => self.ksp.max_it = int(value)?,
            "ksp_richardson_scale" => self.ksp.scale = num(value)?,
            "pc_type" => {
                self.pc = match value.to_ascii_lowercase().as_str() {
                    "none" => PcType::None,
                    "jacobi" => PcType::Jacobi,
                    "mg" => PcType::Mg,
                    _ => return Err(bad()),
                }
            }
            "mg_cycle" => {
                self.mg_cycle = match value.to_ascii_lowercase().as_str() {
                    "v" => CycleType::V,
                    "w" => CycleType::W,
                    _ => return Err(bad()),
                }
            }
            "mg_levels" => self.mg_levels = int(value)?,
            "mg_bind" => self.mg_bind = Some(value.parse()?),
            "mg_smooth_down" => self.mg_smooth_down = int(value)?,
            "mg_smooth_up" => self.mg_smooth_up = int(value)?,
            _ => return Err(Error::Config(format!("unknown option '{key}'"))),
        }
        Ok(())
    }
}

/// `f <- F(x)`.
pub type FunctionFn<'a> = Box<dyn FnMut(&mut Rank, &mut DistVec, &mut DistVec) -> Result<()> + 'a>;
/// Writes `J(x)` into a matrix with a fixed pattern.
pub type JacobianFn<'a> = Box<dyn FnMut(&mut Rank, &mut DistVec, &mut CsrMatrix) -> Result<()> + 'a>;

pub struct NonlinearProblem<'a> {
    pub function: FunctionFn<'a>,
    pub jacobian: JacobianFn<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_it: usize,
    pub ksp: KrylovConfig,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            rtol: 1e-12,
            atol: 1e-14,
            max_it: 50,
            ksp: KrylovConfig { method: KspType::BiCgStab, rtol: 1e-12, atol: 1e-50, max_it: 2000, scale: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonInfo {
    pub iterations: usize,
    /// `‖F(x_k)‖₂` for every iterate, starting with `x_0`.
    pub history: Vec<f64>,
}

/// Full-step Newton: `J(x_k) δ = -F(x_k)`, `x_{k+1} = x_k + δ`, with a
/// Jacobi-preconditioned inner Krylov solve.
pub fn newton_solve(
    rank: &mut Rank,
    problem: &mut NonlinearProblem<'_>,
    x: &mut DistVec,
    jac: &mut CsrMatrix,
    cfg: &NewtonConfig,
) -> Result<NewtonInfo> {
    let mut f = x.duplicate();
    let mut rhs = x.duplicate();
    let mut delta = x.duplicate();
    (problem.function)(rank, x, &mut f)?;
    let f0 = norm2(rank, &mut f)?;
    let tol = (cfg.rtol * f0).max(cfg.atol);
    let mut history = vec![f0];
    let mut fnorm = f0;
    for it in 0..=cfg.max_it {
        if !fnorm.is_finite() {
            return Err(Error::Diverged { iterations: it, residual: fnorm });
        }
        if fnorm <= tol {
            return Ok(NewtonInfo { iterations: it, history });
        }
        if it == cfg.max_it {
            break;
        }
        (problem.jacobian)(rank, x, jac)?;
        copy(&mut rank.exec, &mut f, &mut rhs)?;
        scale(&mut rank.exec, &mut rhs, -1.0)?;
        set_scalar(&mut rank.exec, &mut delta, 0.0)?;
        let mut pc = Jacobi::new(&mut rank.exec, jac)?;
        let info = ksp_solve(rank, &cfg.ksp, jac, &mut rhs, &mut delta, &mut pc)?;
        if !info.converged {
            return Err(Error::Diverged {
                iterations: info.iterations,
                residual: info.history.last().copied().unwrap_or(f64::NAN),
            });
        }
        axpy(&mut rank.exec, x, 1.0, &mut delta)?;
        (problem.function)(rank, x, &mut f)?;
        fnorm = norm2(rank, &mut f)?;
        history.push(fnorm);
    }
    Err(Error::Diverged { iterations: cfg.max_it, residual: fnorm })
}

/// Runs both callbacks, fails when `‖candidate − reference‖₂ > tol`, and
/// leaves the reference result in the output vector.
pub fn stub_compare<'a, R, C>(mut reference: R, mut candidate: C, tol: f64) -> FunctionFn<'a>
where
    R: FnMut(&mut Rank, &mut DistVec, &mut DistVec) -> Result<()> + 'a,
    C: FnMut(&mut Rank, &mut DistVec, &mut DistVec) -> Result<()> + 'a,
{
    Box::new(move |rank: &mut Rank, x: &mut DistVec, r: &mut DistVec| {
        reference(rank, x, r)?;
        let mut rk = r.duplicate();
        candidate(rank, x, &mut rk)?;
        axpy(&mut rank.exec, &mut rk, -1.0, r)?;
        let norm = norm2(rank, &mut rk)?;
        if norm > tol {
            return Err(Error::Comparison { norm, tol });
        }
        Ok(())
    })
}

/// The periodic 1D model problem
/// `R[i] = d (X[i-1] - 2 X[i] + X[i+1]) + X[i]² - F[i]`.
pub struct ModelProblem {
    grid: RefCell<StructuredGrid>,
    d: f64,
    f: Vec<f64>,
}

impl ModelProblem {
    pub fn new(rank: &mut Rank, n: usize, d: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::Config("the model problem needs at least 3 points".into()));
        }
        let grid = StructuredGrid::create(rank, &GridSpec::d1(n, true))?;
        let nloc = grid.layout().local_len(rank.id());
        Ok(ModelProblem { grid: RefCell::new(grid), d, f: vec![0.0; nloc] })
    }

    /// Sets `F` so that `exact` solves `R(X) = 0`.
    pub fn manufacture(&mut self, rank: &mut Rank, exact: &mut DistVec) -> Result<()> {
        self.f = vec![0.0; self.f.len()];
        let mut r = exact.duplicate();
        self.residual(rank, exact, &mut r, ExecSpace::Host)?;
        self.f = r.values();
        Ok(())
    }

    pub fn grid(&self) -> std::cell::Ref<'_, StructuredGrid> {
        self.grid.borrow()
    }

    pub fn create_vec(&self, space: ExecSpace, f: impl Fn(usize) -> f64) -> DistVec {
        let g = self.grid.borrow();
        DistVec::from_fn(g.layout().clone(), g.rank(), space, f)
    }

    /// Evaluates the residual with the kernel running in `space`.
    pub fn residual(&self, rank: &mut Rank, x: &mut DistVec, r: &mut DistVec, space: ExecSpace) -> Result<()> {
        let mut g = self.grid.borrow_mut();
        let mut xs = DistVec::from_local(x.layout().clone(), x.rank(), x.read(&mut rank.exec)?, space)?;
        let mut xl: LocalVec = g.create_local(space);
        g.global_to_local(rank, &mut xs, &mut xl)?;
        let xv = xl.values();
        let d = self.d;
        let out: Vec<f64> =
            (0..self.f.len()).map(|i| d * (xv[i] - 2.0 * xv[i + 1] + xv[i + 2]) + xv[i + 1] * xv[i + 1] - self.f[i]).collect();
        let bytes = 8.0 * 3.0 * out.len() as f64;
        match space {
            ExecSpace::Host => rank.exec.host_kernel(EventKind::Kernel, "function", bytes, 6.0 * out.len() as f64),
            ExecSpace::Device(dev) => {
                let s = rank.exec.default_stream(dev);
                rank.exec.enqueue_kernel(s, EventKind::Kernel, "function", bytes, 6.0 * out.len() as f64, &[])?;
            }
        }
        r.write(&mut rank.exec, &out)
    }

    /// Fills `tridiag(d, -2d + 2 X[i], d)` into a preallocated pattern.
    pub fn jacobian(&self, rank: &mut Rank, x: &mut DistVec, j: &mut CsrMatrix) -> Result<()> {
        let g = self.grid.borrow();
        let xv = x.read(&mut rank.exec)?;
        let n = g.extents()[0];
        let r0 = x.owned_range().start;
        let d = self.d;
        let rows = g.layout().range(g.rank());
        j.set_values_device(&mut rank.exec, rows, InsertMode::Insert, |i| {
            let (px, _) = g.point_of(i);
            let cols = vec![g.global_index((px + n - 1) % n, 0), i, g.global_index((px + 1) % n, 0)];
            (cols, vec![d, -2.0 * d + 2.0 * xv[i - r0], d])
        })
    }

    pub fn create_jacobian(&self, rank: &mut Rank, space: ExecSpace) -> Result<CsrMatrix> {
        self.grid.borrow().create_matrix(rank, space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{run, WorldConfig};
    use crate::vec::Layout;
    use std::sync::Arc;

    fn diag_matrix(r: &mut Rank, d: &[f64]) -> Result<CsrMatrix> {
        let l = Arc::new(Layout::uniform(d.len(), r.size()));
        let mut a = CsrMatrix::new(l.clone(), l, r.id(), ExecSpace::Host);
        for i in a.owned_rows() {
            a.set_values(&[i], &[i], &[d[i]], InsertMode::Insert)?;
        }
        a.assemble(r)?;
        Ok(a)
    }

    #[test]
    fn identity_converges_immediately() {
        run(&WorldConfig::new(2), |r| {
            let mut a = diag_matrix(r, &[1.0; 6])?;
            let mut b = DistVec::from_fn(a.row_layout().clone(), r.id(), ExecSpace::Host, |i| i as f64 + 1.0);
            let mut x = b.duplicate();
            let info = ksp_solve(r, &KrylovConfig::default(), &mut a, &mut b, &mut x, &mut Identity)?;
            assert!(info.iterations <= 1 && info.converged);
            assert_eq!(x.values(), b.values());
            assert_eq!(info.history.len(), info.iterations + 1);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn three_distinct_eigenvalues_three_iterations() {
        run(&WorldConfig::new(1), |r| {
            let mut a = diag_matrix(r, &[1.0, 2.0, 4.0, 2.0, 1.0])?;
            let mut b = DistVec::from_fn(a.row_layout().clone(), 0, ExecSpace::Host, |i| (i + 1) as f64);
            let mut x = b.duplicate();
            let cfg = KrylovConfig::default().rtol(1e-14);
            let info = ksp_solve(r, &cfg, &mut a, &mut b, &mut x, &mut Identity)?;
            assert!(info.iterations <= 3, "{info:?}");
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn cg_rejects_indefinite() {
        run(&WorldConfig::new(1), |r| {
            let mut a = diag_matrix(r, &[1.0, -1.0])?;
            let mut b = DistVec::from_fn(a.row_layout().clone(), 0, ExecSpace::Host, |_| 1.0);
            let mut x = b.duplicate();
            let e = ksp_solve(r, &KrylovConfig::default(), &mut a, &mut b, &mut x, &mut Identity);
            assert!(matches!(e, Err(Error::Breakdown { .. })), "{e:?}");
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn eig_estimates() {
        run(&WorldConfig::new(1), |r| {
            let mut a = diag_matrix(r, &[1.0; 4])?;
            let (lo, hi) = estimate_eigs(r, &mut a, None)?;
            assert!((lo - 0.1).abs() < 1e-15 && (hi - 1.1).abs() < 1e-15);
            let mut a = diag_matrix(r, &[1.0, 2.0, 3.0, 4.0])?;
            let (_, hi) = estimate_eigs(r, &mut a, None)?;
            assert!((hi / 1.1 - 4.0).abs() < 0.2, "{hi}");
            let mut a10 = diag_matrix(r, &[10.0, 20.0, 30.0, 40.0])?;
            let (lo10, hi10) = estimate_eigs(r, &mut a10, None)?;
            let (lo1, hi1) = estimate_eigs(r, &mut a, None)?;
            assert!((lo10 / lo1 - 10.0).abs() < 1e-12 && (hi10 / hi1 - 10.0).abs() < 1e-12);
            let mut z = diag_matrix(r, &[0.0; 3])?;
            assert!(estimate_eigs(r, &mut z, None).is_err());
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn chebyshev_error_follows_polynomial() {
        run(&WorldConfig::new(1), |r| {
            let eigs = [0.3, 0.7, 1.0, 1.6, 2.0];
            let mut a = diag_matrix(r, &eigs)?;
            let mut ones = DistVec::from_fn(a.row_layout().clone(), 0, ExecSpace::Host, |_| 1.0);
            let mut b = ones.duplicate();
            let (lo, hi) = (0.25, 2.1);
            for k in 1..6 {
                let mut x = ones.clone();
                chebyshev_smooth(r, &mut a, &mut ones, &mut b, &mut x, k, (lo, hi))?;
                let (theta, delta) = ((hi + lo) / 2.0, (hi - lo) / 2.0);
                let cheb = |t: f64| {
                    let (mut t0, mut t1) = (1.0, t);
                    for _ in 1..k {
                        let t2 = 2.0 * t * t1 - t0;
                        t0 = t1;
                        t1 = t2;
                    }
                    if k == 0 {
                        t0
                    } else {
                        t1
                    }
                };
                for (i, &lam) in eigs.iter().enumerate() {
                    let want = cheb((theta - lam) / delta) / cheb(theta / delta);
                    assert!((x.values()[i] - want).abs() < 1e-12, "k={k} i={i}");
                }
            }
            let mut x = ones.duplicate();
            chebyshev_smooth(r, &mut a, &mut ones, &mut b, &mut x, 3, (lo, hi))?;
            assert!(x.values().iter().all(|&v| v == 0.0));
            let e = chebyshev_smooth(r, &mut a, &mut ones, &mut b, &mut x, 1, (1.0, 1.0));
            assert!(matches!(e, Err(Error::Config(_))));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn chebyshev_one_sweep_exact_for_single_eigenvalue() {
        run(&WorldConfig::new(1), |r| {
            let d = [2.0, 5.0, 0.5];
            let mut a = diag_matrix(r, &d)?;
            let mut dinv = DistVec::from_fn(a.row_layout().clone(), 0, ExecSpace::Host, |i| 1.0 / d[i]);
            let mut b = DistVec::from_fn(a.row_layout().clone(), 0, ExecSpace::Host, |i| i as f64 + 1.0);
            let mut x = b.duplicate();
            chebyshev_smooth(r, &mut a, &mut dinv, &mut b, &mut x, 1, (0.5, 1.5))?;
            assert_eq!(x.values(), vec![0.5, 0.4, 6.0]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn options_parse() {
        let o = SolverOptions::parse(["ksp_type=cg", "mg_cycle=w", "mg_bind=host:0-4,device:5-8", "pc_type=mg"]).unwrap();
        assert_eq!(o.ksp.method, KspType::Cg);
        assert_eq!(o.mg_cycle, CycleType::W);
        let b = o.mg_bind.unwrap();
        assert_eq!(b.space(4), ExecSpace::Host);
        assert_eq!(b.space(5), ExecSpace::Device(0));
        assert_eq!(b.space(8), ExecSpace::Device(0));
        assert!(SolverOptions::parse(["ksp_type=gmres"]).is_err());
        assert!(SolverOptions::parse(["bogus=1"]).is_err());
        assert!(SolverOptions::parse(["ksp_rtol=0"]).is_err());
        assert!(SolverOptions::from_str_list("ksp_type").is_err());
        assert!("cpu:0-3".parse::<Binding>().is_err());
    }

    #[test]
    fn dense_lu_solves() {
        let lu = DenseLu::factor(3, vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0]).unwrap();
        let x = lu.solve(&[5.0, 3.0, 4.0]);
        let want = [1.0, 2.0, 1.0];
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(DenseLu::factor(2, vec![1.0, 2.0, 2.0, 4.0]).is_err());
    }

    #[test]
    fn single_level_is_direct_solve() {
        run(&WorldConfig::new(2), |r| {
            let mut mg = MgHierarchy::poisson_2d(r, 5, 1, &Binding::uniform(1, ExecSpace::Host))?;
            let mut a = mg.finest().a.clone();
            let g = &mg.finest().grid;
            let mut b = g.global_from_fn(ExecSpace::Host, |x, y| (x + 2 * y) as f64);
            let mut x = g.create_global(ExecSpace::Host);
            mg.cycle(r, &mut b, &mut x)?;
            let mut ax = x.duplicate();
            spmv(r, &mut a, &mut x, &mut ax)?;
            for (u, v) in ax.values().iter().zip(b.values()) {
                assert!((u - v).abs() < 1e-10 * v.abs().max(1.0));
            }
            Ok(())
        })
        .unwrap();
    }
}
