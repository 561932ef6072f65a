use portsim::costmodel::EventKind;
use portsim::error::Error;
use portsim::exec::ExecSpace;
use portsim::grid::{GridSpec, StructuredGrid};
use portsim::mat::{spmv, CsrMatrix};
use portsim::solve::*;
use portsim::transport::{run, Rank, WorldConfig};
use portsim::vec::{axpy, norm2, DistVec};

fn dense_solve(n: usize, trip: &[(usize, usize, f64)], b: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for &(i, j, v) in trip {
        a[i * n + j] += v;
    }
    DenseLu::factor(n, a).unwrap().solve(b)
}

#[test]
fn jacobi_cg_matches_direct_solve() {
    let out = run(&WorldConfig::new(4), |r| {
        let g = StructuredGrid::create(r, &GridSpec::d2(32, 32, false))?;
        let mut a = g.poisson(r, ExecSpace::Host)?;
        let mut b = g.global_from_fn(ExecSpace::Host, |x, y| ((x * 3 + y * 5) % 7) as f64 - 3.0);
        let mut x = g.create_global(ExecSpace::Host);
        let mut pc = Jacobi::new(&mut r.exec, &mut a)?;
        let info = ksp_solve(r, &KrylovConfig::new(KspType::Cg).rtol(1e-10), &mut a, &mut b, &mut x, &mut pc)?;
        assert!(info.converged);
        Ok((x.gather(r)?, b.gather(r)?, a.gather_triplets(r)?))
    })
    .unwrap();
    let (x, b, trip) = &out.results[0];
    let want = dense_solve(b.len(), trip, b);
    let err = x.iter().zip(&want).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "max error {err}");
}

#[test]
fn bicgstab_solves_convection_diffusion() {
    for space in [ExecSpace::Host, ExecSpace::Device(0)] {
        run(&WorldConfig::new(3), |r| {
            let g = StructuredGrid::create(r, &GridSpec::d2(24, 24, false))?;
            let mut a = g.convection_diffusion(r, space, [20.0, -10.0])?;
            let mut b = g.global_from_fn(space, |_, _| 1.0);
            let mut x = g.create_global(space);
            let mut pc = Jacobi::new(&mut r.exec, &mut a)?;
            let cfg = KrylovConfig::new(KspType::BiCgStab).rtol(1e-9);
            let info = ksp_solve(r, &cfg, &mut a, &mut b, &mut x, &mut pc)?;
            assert!(info.converged, "{info:?}");
            let mut ax = x.duplicate();
            spmv(r, &mut a, &mut x, &mut ax)?;
            axpy(&mut r.exec, &mut ax, -1.0, &mut b)?;
            let res = norm2(r, &mut ax)?;
            assert!(res <= 1e-9 * norm2(r, &mut b)? * 1.0001, "true residual {res}");
            Ok(())
        })
        .unwrap();
    }
}

#[test]
fn chebyshev_and_richardson_converge() {
    run(&WorldConfig::new(2), |r| {
        let g = StructuredGrid::create(r, &GridSpec::d2(12, 12, false))?;
        let mut a = g.poisson(r, ExecSpace::Host)?;
        let mut b = g.global_from_fn(ExecSpace::Host, |x, _| x as f64);
        for (method, scale) in [(KspType::Chebyshev, 1.0), (KspType::Richardson, 0.9)] {
            let mut x = g.create_global(ExecSpace::Host);
            let mut cfg = KrylovConfig::new(method).rtol(1e-6);
            cfg.scale = scale;
            let mut pc = Jacobi::new(&mut r.exec, &mut a)?;
            let info = ksp_solve(r, &cfg, &mut a, &mut b, &mut x, &mut pc)?;
            assert!(info.converged, "{method:?}");
        }
        Ok(())
    })
    .unwrap();
}

fn mg_cg_iterations(r: &mut Rank, n: usize, levels: usize, cycle: CycleType) -> portsim::error::Result<usize> {
    let mut mg = MgHierarchy::poisson_2d(r, n, levels, &Binding::uniform(levels, ExecSpace::Host))?;
    mg.cycle = cycle;
    let mut a = mg.finest().a.clone();
    let g = &mg.finest().grid;
    let mut b = g.global_from_fn(ExecSpace::Host, |x, y| ((x + 2 * y) % 5) as f64 - 2.0);
    let mut x = g.create_global(ExecSpace::Host);
    let info = ksp_solve(r, &KrylovConfig::new(KspType::Cg).rtol(1e-8), &mut a, &mut b, &mut x, &mut mg)?;
    assert!(info.converged);
    Ok(info.iterations)
}

#[test]
fn multigrid_iterations_are_mesh_independent() {
    let its: Vec<usize> = [(33, 4), (65, 5)]
        .into_iter()
        .map(|(n, l)| run(&WorldConfig::new(2), |r| mg_cg_iterations(r, n, l, CycleType::V)).unwrap().results[0])
        .collect();
    assert!(its[0] <= 15 && its[1] <= 15, "{its:?}");
    assert!(its[0].abs_diff(its[1]) <= 2, "{its:?}");
}

#[test]
fn w_cycle_visit_counts() {
    let levels = 5;
    let out = run(&WorldConfig::new(2), |r| {
        let mut mg = MgHierarchy::poisson_2d(r, 33, levels, &Binding::uniform(levels, ExecSpace::Host))?;
        mg.cycle = CycleType::W;
        let g = &mg.finest().grid;
        let mut b = g.global_from_fn(ExecSpace::Host, |_, _| 1.0);
        let mut x = g.create_global(ExecSpace::Host);
        let mark = r.exec.log().len();
        mg.cycle(r, &mut b, &mut x)?;
        let events = r.exec.log().since(mark);
        Ok((0..levels)
            .map(|l| events.iter().filter(|e| e.label == "mg_visit" && e.scope == format!("level-{l}")).count())
            .collect::<Vec<_>>())
    })
    .unwrap();
    for counts in out.results {
        let want: Vec<usize> = (0..levels).map(|l| 1 << (levels - 1 - l)).collect();
        assert_eq!(counts, want);
    }
}

#[test]
fn binding_changes_cost_not_values() {
    let levels = 5;
    let policies = [
        Binding::uniform(levels, ExecSpace::Host),
        Binding::uniform(levels, ExecSpace::Device(0)),
        Binding::split(levels, 2),
        "host:0-3,device:4".parse().unwrap(),
    ];
    let mut results = Vec::new();
    for (pi, policy) in policies.iter().enumerate() {
        for cycle in [CycleType::V, CycleType::W] {
            let out = run(&WorldConfig::new(2), |r| {
                let mut mg = MgHierarchy::poisson_2d(r, 33, levels, &Binding::uniform(levels, ExecSpace::Host))?;
                mg.bind_levels(policy)?;
                mg.cycle = cycle;
                let top = policy.space(levels - 1);
                let g = &mg.finest().grid;
                let mut b = g.global_from_fn(top, |x, y| ((x * y) % 3) as f64);
                let mut x = g.create_global(top);
                // warm-up cycle moves the operators to their bound spaces
                mg.cycle(r, &mut b, &mut x)?;
                let mark = r.exec.log().len();
                mg.cycle(r, &mut b, &mut x)?;
                let ev = r.exec.log().since(mark);
                let count = |k: EventKind| ev.iter().filter(|e| e.kind == k).count();
                let (h2d, d2h) = (count(EventKind::H2D), count(EventKind::D2H));
                Ok((x.gather(r)?, h2d, d2h))
            })
            .unwrap();
            let (x, h2d, d2h) = out.results[0].clone();
            let crossings: usize = (1..levels)
                .filter(|&l| policy.space(l) != policy.space(l - 1))
                .map(|l| if cycle == CycleType::W { 1 << (levels - 1 - l) } else { 1 })
                .sum();
            assert_eq!((h2d, d2h), (crossings, crossings), "policy {pi} {cycle:?}");
            results.push((cycle, x));
        }
    }
    for (cycle, x) in &results {
        let first = &results.iter().find(|(c, _)| c == cycle).unwrap().1;
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            first.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn newton_solves_linear_problem_in_one_step() {
    run(&WorldConfig::new(2), |r| {
        let g = StructuredGrid::create(r, &GridSpec::d2(10, 10, false))?;
        let a = g.poisson(r, ExecSpace::Host)?;
        let rhs = g.global_from_fn(ExecSpace::Host, |x, y| (x + y) as f64);
        let ac = std::cell::RefCell::new(a.clone());
        let rc = std::cell::RefCell::new(rhs);
        let mut problem = NonlinearProblem {
            function: Box::new(|r: &mut Rank, x: &mut DistVec, f: &mut DistVec| {
                spmv(r, &mut ac.borrow_mut(), x, f)?;
                axpy(&mut r.exec, f, -1.0, &mut rc.borrow_mut())
            }),
            jacobian: Box::new(|_: &mut Rank, _: &mut DistVec, j: &mut CsrMatrix| {
                *j = ac.borrow().clone();
                Ok(())
            }),
        };
        let mut j = a.clone();
        let mut x = g.create_global(ExecSpace::Host);
        let info = newton_solve(r, &mut problem, &mut x, &mut j, &NewtonConfig::default())?;
        assert_eq!(info.iterations, 1, "{info:?}");
        Ok(())
    })
    .unwrap();
}

fn model_run(p: usize, space: ExecSpace) -> (NewtonInfo, Vec<f64>) {
    let out = run(&WorldConfig::new(p), |r| {
        let mut mp = ModelProblem::new(r, 64, 1.0)?;
        let exact = |i: usize| 0.5 + 0.1 * (2.0 * std::f64::consts::PI * i as f64 / 64.0).sin();
        let mut xs = mp.create_vec(ExecSpace::Host, exact);
        mp.manufacture(r, &mut xs)?;
        let mut j = mp.create_jacobian(r, space)?;
        let mut x = mp.create_vec(space, |_| 0.5);
        let mp = &mp;
        let mut problem = NonlinearProblem {
            function: stub_compare(
                move |r: &mut Rank, x: &mut DistVec, f: &mut DistVec| mp.residual(r, x, f, ExecSpace::Host),
                move |r: &mut Rank, x: &mut DistVec, f: &mut DistVec| mp.residual(r, x, f, ExecSpace::Device(0)),
                1e-12,
            ),
            jacobian: Box::new(move |r: &mut Rank, x: &mut DistVec, j: &mut CsrMatrix| mp.jacobian(r, x, j)),
        };
        let info = newton_solve(r, &mut problem, &mut x, &mut j, &NewtonConfig::default())?;
        let err = x.values().iter().zip(xs.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((info, x.gather(r)?, err))
    })
    .unwrap();
    let (info, x, err) = out.results[0].clone();
    assert!(err < 1e-10, "error {err}");
    (info, x)
}

#[test]
fn newton_model_problem_converges_quadratically() {
    let (info, x1) = model_run(1, ExecSpace::Host);
    let last = *info.history.last().unwrap();
    assert!(last <= 1e-10, "{info:?}");
    let h = &info.history;
    let n = h.len();
    assert!(n >= 3);
    assert!(h[n - 1] / h[n - 2] < 0.1 * (h[n - 2] / h[n - 3]), "{h:?}");
    let (_, x4) = model_run(4, ExecSpace::Device(0));
    let diff = x1.iter().zip(&x4).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn stub_rejects_faulty_candidate() {
    let e = run(&WorldConfig::new(2), |r| {
        let mp = ModelProblem::new(r, 16, 1.0)?;
        let mut x = mp.create_vec(ExecSpace::Host, |i| i as f64 * 0.1);
        let mut f = x.duplicate();
        let mp = &mp;
        let mut good = stub_compare(
            |r: &mut Rank, x: &mut DistVec, f: &mut DistVec| mp.residual(r, x, f, ExecSpace::Host),
            |r: &mut Rank, x: &mut DistVec, f: &mut DistVec| mp.residual(r, x, f, ExecSpace::Device(0)),
            1e-12,
        );
        good(r, &mut x, &mut f)?;
        let mut bad = stub_compare(
            |r: &mut Rank, x: &mut DistVec, f: &mut DistVec| mp.residual(r, x, f, ExecSpace::Host),
            |r: &mut Rank, x: &mut DistVec, f: &mut DistVec| {
                mp.residual(r, x, f, ExecSpace::Device(0))?;
                portsim::vec::scale(&mut r.exec, f, 1.5)
            },
            1e-12,
        );
        bad(r, &mut x, &mut f)
    })
    .unwrap_err();
    assert!(matches!(e, Error::Comparison { .. }), "{e:?}");
}
