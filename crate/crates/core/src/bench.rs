//! Benchmark drivers: each runs a simulated experiment in virtual time and
//! returns CSV rows plus the checks the experiment is expected to satisfy.

use std::fmt::Write as _;

use clap::ValueEnum;

use crate::costmodel::{CostParams, EventKind};
use crate::error::{Error, Result};
use crate::exec::{DataLoc, ExecSpace, MemType};
use crate::grid::{GridSpec, StructuredGrid};
use crate::mat::{coo_preprocess, coo_set_values, CsrMatrix, InsertMode};
use crate::solve::{Binding, CycleType, MgHierarchy};
use crate::starforest::{self, bcast_replay, reduce_replay, ReduceOp, StarForest};
use crate::transport::{run, Rank, Topology, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchName {
    Pingpong,
    Unpack,
    Scatter,
    Stencil,
    Spectrum,
    #[value(name = "mg_breakdown")]
    MgBreakdown,
    #[value(name = "assembly_compare")]
    AssemblyCompare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TopologyChoice {
    /// Every rank on one node.
    Intra,
    /// Ranks grouped into nodes; some links cross nodes.
    Mixed,
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub name: BenchName,
    pub ranks: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub params: CostParams,
    pub topology: Option<TopologyChoice>,
    /// Timed iterations of latency loops (after 10 warm-up iterations).
    pub iterations: usize,
    pub cycle: Option<CycleType>,
}

impl BenchSpec {
    pub fn new(name: BenchName) -> Self {
        BenchSpec {
            name,
            ranks: None,
            sizes: None,
            params: CostParams::default(),
            topology: None,
            iterations: 1000,
            cycle: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub checks: Vec<Check>,
}

impl Report {
    fn new(header: &[&str]) -> Self {
        Report { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), checks: Vec::new() }
    }

    fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

const WARMUP: usize = 10;

/// Parses `8K,64K,1M` style lists (binary suffixes) or plain/scientific
/// integers; sizes must be positive and strictly ascending.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    for item in s.split(',').map(str::trim) {
        let bad = || Error::Usage(format!("bad size '{item}'"));
        let (num, mult) = match item.chars().last() {
            Some('K' | 'k') => (&item[..item.len() - 1], 1usize << 10),
            Some('M' | 'm') => (&item[..item.len() - 1], 1 << 20),
            Some('G' | 'g') => (&item[..item.len() - 1], 1 << 30),
            _ => (item, 1),
        };
        let v: usize = match num.parse::<usize>() {
            Ok(v) => v,
            Err(_) => {
                let f: f64 = num.parse().map_err(|_| bad())?;
                if !(f.is_finite() && f >= 1.0 && f.fract() == 0.0 && f < 1e18) {
                    return Err(bad());
                }
                f as usize
            }
        };
        let v = v.checked_mul(mult).ok_or_else(bad)?;
        if v == 0 {
            return Err(Error::Usage("sizes must be positive".into()));
        }
        if out.last().is_some_and(|&l| l >= v) {
            return Err(Error::Usage("sizes must be strictly ascending".into()));
        }
        out.push(v);
    }
    Ok(out)
}

fn fixed_ranks(spec: &BenchSpec, needed: usize) -> Result<usize> {
    match spec.ranks {
        Some(r) if r != needed => Err(Error::Usage(format!("{:?} runs on exactly {needed} ranks, got {r}", spec.name))),
        _ => Ok(needed),
    }
}

fn us(t: f64) -> String {
    format!("{:.4}", t * 1e6)
}

fn size_label(bytes: usize) -> String {
    if bytes >= 1 << 20 && bytes.is_multiple_of(1 << 20) {
        format!("{}M", bytes >> 20)
    } else if bytes >= 1 << 10 && bytes.is_multiple_of(1 << 10) {
        format!("{}K", bytes >> 10)
    } else {
        bytes.to_string()
    }
}

pub fn run_bench(spec: &BenchSpec) -> Result<Report> {
    spec.params.validate()?;
    if spec.iterations == 0 {
        return Err(Error::Usage("iterations must be positive".into()));
    }
    match spec.name {
        BenchName::Pingpong => pingpong_report(spec, &[Variant::Raw, Variant::Sf]),
        BenchName::Unpack => pingpong_report(spec, &[Variant::Sf, Variant::SfUnpack]),
        BenchName::Scatter => pingpong_report(spec, &[Variant::SfUnpack, Variant::SfScatter]),
        BenchName::Stencil => stencil_report(spec),
        BenchName::Spectrum => spectrum_report(spec),
        BenchName::MgBreakdown => mg_report(spec),
        BenchName::AssemblyCompare => assembly_report(spec),
    }
}

// ---------------------------------------------------------------- ping-pong

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain device-buffer sends.
    Raw,
    /// Star-forest broadcast/reduce with Replace.
    Sf,
    /// Sum instead of Replace, so received data is added in a kernel.
    SfUnpack,
    /// As `SfUnpack` plus one local leaf per root on the sending rank.
    SfScatter,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::Sf => "sf",
            Variant::SfUnpack => "sf_unpack",
            Variant::SfScatter => "sf_scatter",
        }
    }
}

/// Average one-way latency of a two-rank ping-pong of `bytes` payload bytes.
pub fn pingpong_latency(params: &CostParams, variant: Variant, bytes: usize, iters: usize, topology: Topology) -> Result<f64> {
    let cfg = WorldConfig::new(2).with_params(params.clone()).with_topology(topology);
    let out = run(&cfg, |r| match variant {
        Variant::Raw => raw_pingpong(r, bytes, iters),
        _ => sf_pingpong(r, variant, bytes, iters),
    })?;
    Ok(out.results[0])
}

fn raw_pingpong(r: &mut Rank, bytes: usize, iters: usize) -> Result<f64> {
    let loc = DataLoc::tagged(MemType::Device);
    let words = vec![0u64; bytes.div_ceil(8)];
    let mut t0 = 0.0;
    for i in 0..WARMUP + iters {
        if i == WARMUP {
            t0 = r.exec.host_time();
        }
        if r.id() == 0 {
            r.isend(1, words.clone(), bytes as f64, loc, 1)?;
            r.recv(1, 1, loc)?;
        } else {
            r.recv(0, 1, loc)?;
            r.isend(0, words.clone(), bytes as f64, loc, 1)?;
        }
    }
    Ok((r.exec.host_time() - t0) / (2 * iters) as f64)
}

fn sf_pingpong(r: &mut Rank, variant: Variant, bytes: usize, iters: usize) -> Result<f64> {
    let n = (bytes / 8).max(1);
    let sf = if r.id() == 0 {
        if variant == Variant::SfScatter {
            StarForest::new(n, (0..n).collect(), (0..n).map(|k| (0, k)).collect())?
        } else {
            StarForest::new(n, Vec::new(), Vec::new())?
        }
    } else {
        StarForest::new(0, (0..n).collect(), (0..n).map(|k| (0, k)).collect())?
    };
    let mut plan = starforest::setup(r, &sf)?;
    let op = if variant == Variant::Sf { ReduceOp::Replace } else { ReduceOp::Sum };
    let loc = DataLoc::untagged(MemType::Device);
    let mut roots = vec![0.0f64; plan.nroots()];
    let mut leaves = vec![0.0f64; plan.leaf_span()];
    let mut t0 = 0.0;
    for i in 0..WARMUP + iters {
        if i == WARMUP {
            t0 = r.exec.host_time();
        }
        starforest::bcast(r, &mut plan, &roots, loc, &mut leaves, loc, op)?;
        starforest::reduce(r, &mut plan, &leaves, loc, &mut roots, loc, op)?;
    }
    Ok((r.exec.host_time() - t0) / (2 * iters) as f64)
}

fn pingpong_report(spec: &BenchSpec, variants: &[Variant]) -> Result<Report> {
    fixed_ranks(spec, 2)?;
    let topology = match spec.topology {
        Some(TopologyChoice::Mixed) => Topology::Inter,
        _ => Topology::Intra,
    };
    let sizes = spec.sizes.clone().unwrap_or_else(|| (13..=22).map(|k| 1usize << k).collect());
    let mut rep = Report::new(&["variant", "size", "bytes", "latency_us"]);
    let mut lat = vec![Vec::new(); variants.len()];
    for (v, &variant) in variants.iter().enumerate() {
        for &s in &sizes {
            let t = pingpong_latency(&spec.params, variant, s, spec.iterations, topology.clone())?;
            lat[v].push(t);
            rep.row(vec![variant.name().into(), size_label(s), s.to_string(), us(t)]);
        }
    }
    let p = &spec.params;
    match spec.name {
        BenchName::Pingpong => {
            let want = p.t_stream_sync + p.t_memtype_query + p.t_sf_overhead;
            let worst = lat[1].iter().zip(&lat[0]).map(|(s, r)| (s - r - want).abs()).fold(0.0, f64::max);
            rep.checks.push(Check::new(
                "sf overhead over raw sends",
                worst <= 1e-6,
                format!("max deviation from {:.1} us: {:.3} us", want * 1e6, worst * 1e6),
            ));
        }
        BenchName::Unpack => {
            let small: Vec<f64> = sizes
                .iter()
                .zip(lat[1].iter().zip(&lat[0]))
                .filter(|(s, _)| **s <= 64 << 10)
                .map(|(_, (u, s))| u - s)
                .collect();
            let worst = small.iter().map(|d| (d - p.t_launch).abs()).fold(0.0, f64::max);
            rep.checks.push(Check::new(
                "unpack costs one kernel launch",
                worst <= 1e-6,
                format!("max deviation from t_launch for sizes <= 64K: {:.3} us", worst * 1e6),
            ));
        }
        BenchName::Scatter => {
            let worst = sizes
                .iter()
                .zip(lat[1].iter().zip(&lat[0]))
                .filter(|(s, _)| **s <= 2 << 20)
                .map(|(_, (sc, u))| (sc - u).abs() / u)
                .fold(0.0, f64::max);
            rep.checks.push(Check::new(
                "local scatter hidden by remote traffic",
                worst <= 0.02,
                format!("max relative difference for sizes <= 2M: {:.3}%", worst * 100.0),
            ));
        }
        _ => unreachable!("ping-pong report for {:?}", spec.name),
    }
    Ok(rep)
}

// ------------------------------------------------------------------ stencil

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeConfig {
    /// Each of the 9 ranks on its own node.
    NineNodes,
    /// Three ranks per node; rows of the process grid share a node.
    ThreeNodes,
    /// All ranks on one node.
    OneNode,
}

impl NodeConfig {
    pub fn label(self) -> &'static str {
        match self {
            NodeConfig::NineNodes => "9-node",
            NodeConfig::ThreeNodes => "3-node",
            NodeConfig::OneNode => "1-node",
        }
    }

    pub fn topology(self) -> Topology {
        match self {
            NodeConfig::NineNodes => Topology::Inter,
            NodeConfig::ThreeNodes => Topology::Blocked { ranks_per_node: 3 },
            NodeConfig::OneNode => Topology::Intra,
        }
    }
}

/// Average one-way latency of a global-to-local / local-to-global (add)
/// exchange on an `n × n` per-rank subgrid of a periodic 3×3 process grid,
/// device resident. The exchange is replayed from the plan shape, which
/// charges the same events as moving real data.
pub fn stencil_latency(params: &CostParams, n: usize, config: NodeConfig, iters: usize) -> Result<f64> {
    let spec = GridSpec::d2(3 * n, 3 * n, true).with_procs(vec![3, 3]);
    let cfg = WorldConfig::new(9).with_params(params.clone()).with_topology(config.topology());
    let loc = DataLoc::for_space(ExecSpace::Device(0));
    let out = run(&cfg, |r| {
        let shape = StructuredGrid::ghost_shape(&spec, 9, r.id())?;
        let mut t0 = 0.0;
        for i in 0..WARMUP + iters {
            if i == WARMUP {
                r.barrier()?;
                t0 = r.exec.host_time();
            }
            bcast_replay::<f64>(r, &shape, loc, loc, ReduceOp::Replace)?;
            reduce_replay::<f64>(r, &shape, loc, loc, ReduceOp::Sum)?;
        }
        Ok(r.exec.host_time() - t0)
    })?;
    let worst = out.results.iter().copied().fold(0.0, f64::max);
    Ok(worst / (2 * iters) as f64)
}

/// Subgrid size beyond which the on-rank scatter of the owned block (the
/// accumulating half, 24 bytes per entry on a side-stream kernel) outlasts
/// the remote path it overlaps: the unpack launch or the side-strip message,
/// whichever is later. Mixed configurations take the slowest link.
pub fn local_dominance_n(params: &CostParams, config: NodeConfig) -> f64 {
    let intra = (params.net_latency_small, params.bw_net);
    let inter = (params.net_latency_inter, params.bw_net_inter);
    match config {
        NodeConfig::OneNode => local_dominance_for(params, intra),
        NodeConfig::NineNodes => local_dominance_for(params, inter),
        NodeConfig::ThreeNodes => local_dominance_for(params, intra).max(local_dominance_for(params, inter)),
    }
}

fn local_dominance_for(params: &CostParams, (lat, bw): (f64, f64)) -> f64 {
    // a n² = max(t_launch, lat + 8 n / bw)
    let a = 24.0 * params.oversubscription / params.bw_device_mem;
    let launch = (params.t_launch / a).sqrt();
    let b = 8.0 / bw;
    let message = (b + (b * b + 4.0 * a * lat).sqrt()) / (2.0 * a);
    launch.max(message)
}

fn stencil_report(spec: &BenchSpec) -> Result<Report> {
    fixed_ranks(spec, 9)?;
    let configs = match spec.topology {
        None => vec![NodeConfig::NineNodes, NodeConfig::ThreeNodes],
        Some(TopologyChoice::Intra) => vec![NodeConfig::OneNode],
        Some(TopologyChoice::Mixed) => vec![NodeConfig::ThreeNodes],
    };
    let sizes = spec.sizes.clone().unwrap_or_else(|| (6..=12).map(|k| 1usize << k).collect());
    let mut rep = Report::new(&["config", "n", "latency_us", "local_dominance_n"]);
    let mut lat = Vec::new();
    for &c in &configs {
        let nstar = local_dominance_n(&spec.params, c);
        let mut row = Vec::new();
        for &n in &sizes {
            let t = stencil_latency(&spec.params, n, c, spec.iterations)?;
            row.push(t);
            rep.row(vec![c.label().into(), n.to_string(), us(t), format!("{nstar:.1}")]);
        }
        lat.push(row);
    }
    for (c, row) in configs.iter().zip(&lat) {
        let small: Vec<f64> = sizes.iter().zip(row).filter(|(n, _)| **n <= 512).map(|(_, t)| *t).collect();
        if small.len() >= 2 {
            let lo = small.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = small.iter().copied().fold(0.0, f64::max);
            rep.checks.push(Check::new(
                format!("{} latency flat for n <= 512", c.label()),
                hi <= 1.05 * lo,
                format!("{:.2}..{:.2} us", lo * 1e6, hi * 1e6),
            ));
        }
    }
    if configs.len() == 2 {
        if let Some(k) = sizes.iter().position(|&n| n == 4096) {
            let (a, b) = (lat[0][k], lat[1][k]);
            rep.checks.push(Check::new(
                "configs converge at n = 4096",
                (a - b).abs() <= 0.01 * a.min(b),
                format!("{:.2} vs {:.2} us", a * 1e6, b * 1e6),
            ));
        }
        let faster = sizes.iter().zip(lat[0].iter().zip(&lat[1])).filter(|(n, _)| **n <= 512).all(|(_, (a, b))| a < b);
        rep.checks.push(Check::new("9-node faster than 3-node for n <= 512", faster, ""));
    }
    Ok(rep)
}

// ----------------------------------------------------------------- spectrum

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumOp {
    Axpy,
    Copy,
}

impl SpectrumOp {
    pub fn name(self) -> &'static str {
        match self {
            SpectrumOp::Axpy => "axpy",
            SpectrumOp::Copy => "copy",
        }
    }

    /// Memory traffic per entry.
    pub fn bytes_per_entry(self) -> f64 {
        match self {
            SpectrumOp::Axpy => 24.0,
            SpectrumOp::Copy => 16.0,
        }
    }

    pub fn flops_per_entry(self) -> f64 {
        match self {
            SpectrumOp::Axpy => 2.0,
            SpectrumOp::Copy => 0.0,
        }
    }
}

/// Time until the result of one `op` on `n` entries is usable on the host.
pub fn spectrum_time(params: &CostParams, op: SpectrumOp, space: ExecSpace, n: usize) -> Result<f64> {
    let cfg = WorldConfig::new(1).with_params(params.clone());
    let out = run(&cfg, |r| {
        let t0 = r.exec.host_time();
        let bytes = op.bytes_per_entry() * n as f64;
        r.exec.run_kernel(space, op.name(), bytes, op.flops_per_entry() * n as f64)?;
        if let ExecSpace::Device(d) = space {
            let s = r.exec.default_stream(d);
            r.exec.sync_stream(s);
        }
        Ok(r.exec.host_time() - t0)
    })?;
    Ok(out.results[0])
}

/// Least-squares line `y = a + b x`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

/// Size at which host and device times of `op` are equal.
pub fn spectrum_crossover(params: &CostParams, op: SpectrumOp) -> f64 {
    let bpe = op.bytes_per_entry();
    let host0 = params.host_kernel_overhead;
    let dev0 = params.t_launch + params.t_stream_sync;
    let host1 = bpe / params.bw_host_mem;
    let dev1 = bpe * params.oversubscription / params.bw_device_mem;
    (dev0 - host0) / (host1 - dev1)
}

pub fn default_spectrum_sizes() -> Vec<usize> {
    (8..=32).map(|k| 10f64.powf(k as f64 / 4.0).round() as usize).collect()
}

fn spectrum_report(spec: &BenchSpec) -> Result<Report> {
    fixed_ranks(spec, 1)?;
    let sizes = spec.sizes.clone().unwrap_or_else(default_spectrum_sizes);
    let mut rep = Report::new(&[
        "op",
        "space",
        "n",
        "time_s",
        "bytes_per_s",
        "flops_per_s",
        "fit_latency_s",
        "fit_bandwidth_bytes_per_s",
        "crossover_n",
    ]);
    for op in [SpectrumOp::Axpy, SpectrumOp::Copy] {
        let mut times = Vec::new();
        for space in [ExecSpace::Host, ExecSpace::Device(0)] {
            let t: Vec<f64> = sizes.iter().map(|&n| spectrum_time(&spec.params, op, space, n)).collect::<Result<_>>()?;
            let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
            let (lat, slope) = fit_line(&xs, &t);
            let bw = op.bytes_per_entry() / slope;
            let cross = spectrum_crossover(&spec.params, op);
            for (&n, &ti) in sizes.iter().zip(&t) {
                rep.row(vec![
                    op.name().into(),
                    if space.is_device() { "device" } else { "host" }.into(),
                    n.to_string(),
                    format!("{ti:e}"),
                    format!("{:e}", op.bytes_per_entry() * n as f64 / ti),
                    format!("{:e}", op.flops_per_entry() * n as f64 / ti),
                    format!("{lat:e}"),
                    format!("{bw:e}"),
                    format!("{cross:.1}"),
                ]);
            }
            if space.is_device() && op == SpectrumOp::Axpy {
                let rate = 2.0 / slope;
                let want = 2.0 * spec.params.bw_device_mem / (24.0 * spec.params.oversubscription);
                rep.checks.push(Check::new(
                    "asymptotic device axpy throughput",
                    (rate - want).abs() <= 0.01 * want,
                    format!("{rate:.4e} flop/s vs {want:.4e}"),
                ));
            }
            times.push(t);
        }
        let cross = spectrum_crossover(&spec.params, op);
        let first = sizes.iter().zip(times[1].iter().zip(&times[0])).position(|(_, (d, h))| d < h);
        let ok = match first {
            Some(0) => cross <= sizes[0] as f64,
            Some(k) => cross > sizes[k - 1] as f64 && cross <= sizes[k] as f64,
            None => cross > *sizes.last().expect("non-empty sizes") as f64,
        };
        rep.checks.push(Check::new(
            format!("{} crossover matches closed form", op.name()),
            ok,
            format!("closed form n = {cross:.1}, first device-faster sweep point {:?}", first.map(|k| sizes[k])),
        ));
    }
    for (n, host_wins) in [(1_000usize, true), (100_000_000, false)] {
        let h = spectrum_time(&spec.params, SpectrumOp::Axpy, ExecSpace::Host, n)?;
        let d = spectrum_time(&spec.params, SpectrumOp::Axpy, ExecSpace::Device(0), n)?;
        let who = if host_wins { "host" } else { "device" };
        rep.checks.push(Check::new(
            format!("{who} axpy faster at n = {n:e}"),
            (h < d) == host_wins,
            format!("host {h:.3e} s, device {d:.3e} s"),
        ));
    }
    Ok(rep)
}

// ------------------------------------------------------------ mg breakdown

#[derive(Debug, Clone, PartialEq)]
pub struct MgRun {
    /// Host time spent in each level's scope, coarsest first.
    pub level_seconds: Vec<f64>,
    pub visits: Vec<usize>,
    pub solution: Vec<f64>,
    pub residual_norm: f64,
}

/// Number of levels for a `finest × finest` grid coarsened down to 5×5.
pub fn mg_levels_for(finest: usize) -> Result<usize> {
    let mut m = finest.checked_sub(1).filter(|m| *m >= 4 && m % 4 == 0).ok_or_else(|| {
        Error::Usage(format!("multigrid size {finest} must be 4·2^k + 1"))
    })? / 4;
    let mut levels = 1;
    while m > 1 {
        if m % 2 != 0 {
            return Err(Error::Usage(format!("multigrid size {finest} must be 4·2^k + 1")));
        }
        m /= 2;
        levels += 1;
    }
    Ok(levels)
}

/// Runs `ncycles` multigrid cycles on 2D Poisson and totals the host time of
/// every level's scope (maximum over ranks).
pub fn mg_run(
    params: &CostParams,
    ranks: usize,
    finest: usize,
    cycle: CycleType,
    binding: &Binding,
    ncycles: usize,
) -> Result<MgRun> {
    let levels = mg_levels_for(finest)?;
    let cfg = WorldConfig::new(ranks).with_params(params.clone());
    let out = run(&cfg, |r| {
        let mut mg = MgHierarchy::poisson_2d(r, finest, levels, &Binding::uniform(levels, ExecSpace::Host))?;
        mg.bind_levels(binding)?;
        mg.cycle = cycle;
        let top = binding.space(levels - 1);
        let mut a = mg.finest().a.clone();
        let g = &mg.finest().grid;
        let mut b = g.global_from_fn(top, |x, y| ((x * 7 + y * 3) % 11) as f64 - 5.0);
        let mut x = g.create_global(top);
        let mark = r.exec.log().len();
        for _ in 0..ncycles {
            mg.cycle(r, &mut b, &mut x)?;
        }
        let ev = r.exec.log().since(mark);
        let mut secs = vec![0.0; levels];
        let mut visits = vec![0; levels];
        for e in ev {
            if let Some(l) = e.scope.strip_prefix("level-").and_then(|s| s.parse::<usize>().ok()) {
                secs[l] += e.host_advance;
                if e.label == "mg_visit" {
                    visits[l] += 1;
                }
            }
        }
        let mut ax = x.duplicate();
        crate::mat::spmv(r, &mut a, &mut x, &mut ax)?;
        crate::vec::axpy(&mut r.exec, &mut ax, -1.0, &mut b)?;
        let res = crate::vec::norm2(r, &mut ax)?;
        Ok((secs, visits, x.gather(r)?, res))
    })?;
    let levels_n = out.results[0].0.len();
    let level_seconds =
        (0..levels_n).map(|l| out.results.iter().map(|(s, ..)| s[l]).fold(0.0, f64::max)).collect();
    let (_, visits, solution, residual_norm) = out.results.into_iter().next().expect("at least one rank");
    Ok(MgRun { level_seconds, visits, solution, residual_norm })
}

/// All host, all device, and host below level 5 with device above (when
/// there are more than five levels).
pub fn default_policies(levels: usize) -> Vec<(String, Binding)> {
    let mut v = vec![
        ("host".to_string(), Binding::uniform(levels, ExecSpace::Host)),
        ("device".to_string(), Binding::uniform(levels, ExecSpace::Device(0))),
    ];
    if levels > 5 {
        v.push((format!("host:0-4,device:5-{}", levels - 1), Binding::split(levels, 5)));
    }
    v
}

fn cycle_name(c: CycleType) -> &'static str {
    match c {
        CycleType::V => "v",
        CycleType::W => "w",
    }
}

fn mg_report(spec: &BenchSpec) -> Result<Report> {
    let ranks = spec.ranks.unwrap_or(1);
    let sizes = spec.sizes.clone().unwrap_or_else(|| vec![257]);
    let cycles = match spec.cycle {
        Some(c) => vec![c],
        None => vec![CycleType::V, CycleType::W],
    };
    let mut rep = Report::new(&["size", "cycle", "policy", "level", "visits", "total_seconds"]);
    for &n in &sizes {
        let levels = mg_levels_for(n)?;
        for &cycle in &cycles {
            let mut runs = Vec::new();
            for (name, binding) in default_policies(levels) {
                let m = mg_run(&spec.params, ranks, n, cycle, &binding, 5)?;
                for l in 0..levels {
                    rep.row(vec![
                        n.to_string(),
                        cycle_name(cycle).into(),
                        name.clone(),
                        l.to_string(),
                        m.visits[l].to_string(),
                        format!("{:e}", m.level_seconds[l]),
                    ]);
                }
                runs.push((name, m));
            }
            let reference = &runs[0].1.solution;
            let agree = runs.iter().all(|(_, m)| {
                m.solution.iter().zip(reference).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0))
            });
            rep.checks.push(Check::new(format!("{n} {} policies agree", cycle_name(cycle)), agree, ""));
            let device = &runs[1].1;
            if cycle == CycleType::V && levels >= 6 {
                let band = &device.level_seconds[1..=5];
                let lo = band.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = band.iter().copied().fold(0.0, f64::max);
                rep.checks.push(Check::new(
                    format!("{n} device V-cycle plateau over levels 1-5"),
                    hi <= 1.2 * lo,
                    format!("{:.1}..{:.1} us", lo * 1e6, hi * 1e6),
                ));
            }
            if cycle == CycleType::W && runs.len() > 2 {
                let dev: f64 = device.level_seconds.iter().sum();
                let split: f64 = runs[2].1.level_seconds.iter().sum();
                rep.checks.push(Check::new(
                    format!("{n} W-cycle host-bound coarse levels speedup"),
                    dev >= 2.0 * split,
                    format!("speedup {:.2}", dev / split),
                ));
            }
            if runs.len() > 2 {
                let (host, split) = (runs[0].1.level_seconds[4], runs[2].1.level_seconds[4]);
                rep.checks.push(Check::new(
                    format!("{n} {} boundary level pays migration", cycle_name(cycle)),
                    split > host,
                    format!("level 4: {:.1} us split vs {:.1} us all-host", split * 1e6, host * 1e6),
                ));
            }
        }
    }
    Ok(rep)
}

// --------------------------------------------------------------- assembly

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyPath {
    /// Host insertion, assembly, then upload.
    Incremental,
    /// Preprocessed coordinate list, values applied on the device.
    Coo,
    /// Values computed and written by a device kernel.
    Device,
}

impl AssemblyPath {
    pub fn name(self) -> &'static str {
        match self {
            AssemblyPath::Incremental => "incremental",
            AssemblyPath::Coo => "coo",
            AssemblyPath::Device => "device",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyRun {
    pub seconds: f64,
    /// Device kernels launched while setting values.
    pub kernels: usize,
    /// Kernels labelled as the COO value application.
    pub coo_apply: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

fn stencil_row(g: &StructuredGrid, i: usize) -> (Vec<usize>, Vec<f64>) {
    let (x, y) = g.point_of(i);
    let mut cols = vec![i];
    let mut vals = vec![4.0];
    for (u, v) in g.neighbors(x, y) {
        cols.push(g.global_index(u, v));
        vals.push(-1.0);
    }
    (cols, vals)
}

/// Assembles the periodic 5-point operator (4 on the diagonal, −1 off it)
/// on an `n × n` grid by one path, device resident at the end.
pub fn assembly_run(params: &CostParams, ranks: usize, n: usize, path: AssemblyPath) -> Result<AssemblyRun> {
    let cfg = WorldConfig::new(ranks).with_params(params.clone());
    let spec = GridSpec::d2(n, n, true);
    let out = run(&cfg, |r| {
        let g = StructuredGrid::create(r, &spec)?;
        let dev = ExecSpace::Device(0);
        let rows = g.layout().range(r.id());
        let mut a: CsrMatrix;
        let mut coo = None;
        match path {
            AssemblyPath::Incremental => {
                a = g.create_matrix(r, ExecSpace::Host)?;
                a.reopen(&mut r.exec)?;
            }
            AssemblyPath::Coo => {
                a = g.create_matrix(r, dev)?;
                // the diagonal arrives as two halves and must be summed
                let mut pat = Vec::new();
                let mut vals = Vec::new();
                for i in rows.clone() {
                    let (cols, v) = stencil_row(&g, i);
                    for (&j, &w) in cols.iter().zip(&v) {
                        if i == j {
                            pat.extend([(i as i64, j as i64), (i as i64, j as i64)]);
                            vals.extend([w / 2.0, w / 2.0]);
                        } else {
                            pat.push((i as i64, j as i64));
                            vals.push(w);
                        }
                    }
                }
                coo = Some((coo_preprocess(r, &mut a, &pat)?, vals));
            }
            AssemblyPath::Device => a = g.create_matrix(r, dev)?,
        }
        r.barrier()?;
        let mark = r.exec.log().len();
        let t0 = r.exec.host_time();
        match path {
            AssemblyPath::Incremental => {
                for i in rows.clone() {
                    let (cols, v) = stencil_row(&g, i);
                    a.set_values(&[i], &cols, &v, InsertMode::Insert)?;
                }
                a.assemble(r)?;
                a.set_space(dev)?;
                a.sync_values(&mut r.exec)?;
            }
            AssemblyPath::Coo => {
                let (plan, vals) = coo.as_mut().expect("prepared above");
                coo_set_values(r, &mut a, plan, vals)?;
            }
            AssemblyPath::Device => {
                a.set_values_device(&mut r.exec, rows.clone(), InsertMode::Insert, |i| stencil_row(&g, i))?;
            }
        }
        let s = r.exec.default_stream(0);
        r.exec.sync_stream(s);
        let secs = r.exec.host_time() - t0;
        let ev = r.exec.log().since(mark);
        let kernels = ev.iter().filter(|e| e.kind == EventKind::Kernel && e.stream.is_some()).count();
        let coo_apply = ev.iter().filter(|e| e.label == "coo_apply").count();
        Ok((secs, kernels, coo_apply, a.gather_triplets(r)?))
    })?;
    let seconds = out.results.iter().map(|x| x.0).fold(0.0, f64::max);
    let (_, kernels, coo_apply, triplets) = out.results.into_iter().next().expect("at least one rank");
    Ok(AssemblyRun { seconds, kernels, coo_apply, triplets })
}

fn assembly_report(spec: &BenchSpec) -> Result<Report> {
    let ranks = spec.ranks.unwrap_or(4);
    let sizes = spec.sizes.clone().unwrap_or_else(|| vec![32, 64, 128, 256]);
    let mut rep = Report::new(&["n", "path", "time_us", "kernels"]);
    let paths = [AssemblyPath::Incremental, AssemblyPath::Coo, AssemblyPath::Device];
    let mut last = Vec::new();
    for &n in &sizes {
        let runs: Vec<AssemblyRun> = paths.iter().map(|&p| assembly_run(&spec.params, ranks, n, p)).collect::<Result<_>>()?;
        for (p, run) in paths.iter().zip(&runs) {
            rep.row(vec![n.to_string(), p.name().into(), us(run.seconds), run.kernels.to_string()]);
        }
        let bits = |t: &[(usize, usize, f64)]| t.iter().map(|&(i, j, v)| (i, j, v.to_bits())).collect::<Vec<_>>();
        let same = runs.iter().all(|x| bits(&x.triplets) == bits(&runs[0].triplets));
        rep.checks.push(Check::new(format!("n={n} paths value-identical"), same, ""));
        rep.checks.push(Check::new(
            format!("n={n} coo applies values in one kernel"),
            runs[1].coo_apply == 1 && runs[0].kernels == 0,
            format!("coo_apply {}, incremental device kernels {}", runs[1].coo_apply, runs[0].kernels),
        ));
        last = runs;
    }
    if let Some(&n) = sizes.last() {
        rep.checks.push(Check::new(
            format!("n={n} coo faster than incremental + upload"),
            last[1].seconds < last[0].seconds,
            format!("{:.1} vs {:.1} us", last[1].seconds * 1e6, last[0].seconds * 1e6),
        ));
    }
    Ok(rep)
}

/// Human-readable summary of the checks, one line each.
pub fn check_lines(rep: &Report) -> String {
    let mut s = String::new();
    for c in &rep.checks {
        let _ = writeln!(s, "{} {}{}", if c.passed { "PASS" } else { "FAIL" }, c.name, if c.detail.is_empty() {
            String::new()
        } else {
            format!(" ({})", c.detail)
        });
    }
    s
}
