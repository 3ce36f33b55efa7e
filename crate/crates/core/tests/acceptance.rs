//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line
//! on stderr (uncaptured) and then asserts.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hostcap::analysis::{feasible_volume, feasible_volume_ratio, spearman, SweepCell, SweepEngine, SweepSurface};
use hostcap::conic::{solve_continuous, solve_misocp};
use hostcap::der::{battery_soc_step, hp_temp_step, BatteryParams, HPParams};
use hostcap::fixtures::{baseline_day, chain, feeder_4, random_tree, two_bus, two_bus_with};
use hostcap::hca::{build_fleet, run_deterministic_hca, AllocationPolicy, DeviceTemplates, HcaConfig, HcaMode};
use hostcap::io::{write_output, Manifest};
use hostcap::opf::{replay, solve_opf, static_injections, DispatchOutcome, OpfOptions, ScenarioData};
use hostcap::powerflow::{static_feasible, InjectionProfile, StaticOptions};
use hostcap::scenarios::{
    elbow_curve, forced_extremes, generate_scenarios, kmeans_reduce, run_stochastic_hca, NoiseLevels, ScenarioSet,
};
use hostcap::ssp::{accelerated_ssp, build_deterministic_equivalent, run_ssp, solve_ssp, SspConfig};
use hostcap::{ConicProgram, DerKind, LinExpr, Network, ObjectiveWeights, SolveStatus, SolverSettings, VarId, WarmStart};

type Outcome = Result<String, String>;

fn report(n: u32, name: &str, started: Instant, limit: Option<Duration>, outcome: Outcome) {
    let elapsed = started.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(_), Some(l)) if elapsed > l => Err(format!("took {:.1} s, limit {:.0} s", elapsed.as_secs_f64(), l.as_secs_f64())),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    let line = format!("criterion {n:>2} [{tag}] {name}: {detail} ({:.1} s)\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn snapshot(net: &Network, alpha: f64, loads_kw: &[f64]) -> ScenarioData {
    let nb = net.n_buses();
    ScenarioData {
        dt: 1.0,
        t0: 12,
        alpha_pv: vec![alpha],
        t_out: vec![22.0],
        lmp: vec![0.1],
        load_p: (0..nb).map(|i| vec![loads_kw.get(i).copied().unwrap_or(0.0)]).collect(),
        load_q: vec![vec![0.0]; nb],
        baseline_bs: None,
        baseline_ev: None,
        baseline_hp: None,
        probability: 1.0,
    }
}

/// Feeder with impedances scaled so that limits bind at modest penetrations.
fn weakened(n: usize, seed: u64, factor: f64) -> Network {
    let mut net = random_tree(n, seed);
    for b in &mut net.branches {
        b.r *= factor;
        b.x *= factor;
    }
    net
}

// ---------------------------------------------------------------------------
// 1. power-flow oracle

/// Polar Newton–Raphson AC power flow; bus 0 is the slack at `v0` ∠ 0.
/// Injections in pu. Returns voltage magnitudes.
fn newton_pf(net: &Network, p: &[f64], q: &[f64], v0: f64) -> Vec<f64> {
    let n = net.n_buses();
    let slack = net.slack();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for br in &net.branches {
        let g = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        y[br.from][br.from] += g;
        y[br.to][br.to] += g;
        y[br.from][br.to] -= g;
        y[br.to][br.from] -= g;
    }
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    vm[slack] = v0;
    let calc = |vm: &[f64], va: &[f64]| {
        let mut pc = vec![0.0; n];
        let mut qc = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                let (g, b) = (y[i][k].re, y[i][k].im);
                let th = va[i] - va[k];
                pc[i] += vm[i] * vm[k] * (g * th.cos() + b * th.sin());
                qc[i] += vm[i] * vm[k] * (g * th.sin() - b * th.cos());
            }
        }
        (pc, qc)
    };
    for _ in 0..50 {
        let (pc, qc) = calc(&vm, &va);
        let mut f = DVector::zeros(2 * m);
        for (a, &i) in pq.iter().enumerate() {
            f[a] = p[i] - pc[i];
            f[m + a] = q[i] - qc[i];
        }
        if f.amax() < 1e-13 {
            break;
        }
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for (a, &i) in pq.iter().enumerate() {
            for (c, &k) in pq.iter().enumerate() {
                let (g, b) = (y[i][k].re, y[i][k].im);
                let th = va[i] - va[k];
                if i == k {
                    jac[(a, c)] = -qc[i] - b * vm[i] * vm[i];
                    jac[(a, m + c)] = pc[i] / vm[i] + g * vm[i];
                    jac[(m + a, c)] = pc[i] - g * vm[i] * vm[i];
                    jac[(m + a, m + c)] = qc[i] / vm[i] - b * vm[i];
                } else {
                    jac[(a, c)] = vm[i] * vm[k] * (g * th.sin() - b * th.cos());
                    jac[(a, m + c)] = vm[i] * (g * th.cos() + b * th.sin());
                    jac[(m + a, c)] = -vm[i] * vm[k] * (g * th.cos() + b * th.sin());
                    jac[(m + a, m + c)] = vm[i] * (g * th.sin() - b * th.cos());
                }
            }
        }
        let dx = jac.lu().solve(&f).expect("nonsingular Jacobian");
        for (a, &i) in pq.iter().enumerate() {
            va[i] += dx[a];
            vm[i] += dx[m + a];
        }
    }
    vm
}

fn criterion_1() -> Outcome {
    let nets = [("2-bus", two_bus()), ("3-bus", chain(3)), ("4-bus", feeder_4())];
    let opts = StaticOptions::default();
    let mut worst_v = 0.0f64;
    let mut worst_t = 0.0f64;
    for (name, net) in &nets {
        for k in 1..=20 {
            let s = 0.05 * k as f64;
            let mut inj = InjectionProfile::zeros(net.n_buses(), 1);
            for (i, b) in net.buses.iter().enumerate() {
                inj.p[i][0] = -s * b.nominal_load_p;
                inj.q[i][0] = -s * b.nominal_load_q;
            }
            let check = static_feasible(net, &inj, &opts).map_err(|e| format!("{name} s={s}: {e}"))?;
            let flow = check.flow.as_ref().ok_or_else(|| format!("{name} s={s}: {:?}", check.reason))?;
            let p: Vec<f64> = inj.p.iter().map(|r| net.kw_to_pu(r[0])).collect();
            let q: Vec<f64> = inj.q.iter().map(|r| net.kw_to_pu(r[0])).collect();
            let vm = newton_pf(net, &p, &q, net.v_slack);
            for (i, v) in vm.iter().enumerate() {
                worst_v = worst_v.max((flow.v[0][i].sqrt() - v).abs());
            }
            worst_t = worst_t.max(check.tightness);
        }
    }
    check(worst_v <= 1e-5, || format!("voltage mismatch {worst_v:e} pu"))?;
    check(worst_t <= 1e-6, || format!("cone slack {worst_t:e}"))?;
    Ok(format!("max |ΔV| {worst_v:.2e} pu, max cone slack {worst_t:.2e} over 60 cases"))
}

#[test]
fn c01_power_flow_matches_newton() {
    let t = Instant::now();
    report(1, "power-flow oracle equivalence", t, Some(Duration::from_secs(10)), criterion_1());
}

// ---------------------------------------------------------------------------
// 2. analytic hosting-capacity cap

/// Largest unity power factor injection (pu) at the end of one line from a
/// 1.0 pu source before the receiving squared voltage reaches `v2max`.
fn injection_cap(r: f64, x: f64, v2max: f64) -> f64 {
    let z2 = r * r + x * x;
    let p_of = |l: f64| (v2max - 1.0 + z2 * l) / (2.0 * r);
    let f = |l: f64| (r * l - p_of(l)).powi(2) + (x * l).powi(2) - l;
    let (mut lo, mut hi) = (0.0, 1e-3);
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    p_of(0.5 * (lo + hi))
}

fn criterion_2() -> Outcome {
    let mut lines = Vec::new();
    // nominal load 100 kW, so one percentage point is one kW
    for &(r, x, load) in &[(0.2, 0.2, 0.0), (0.1, 0.05, 0.0), (0.2, 0.1, 40.0)] {
        let net = two_bus_with(r, x, 100.0, 0.0);
        let v2max = 1.05f64 * 1.05;
        let cap_kw = net.pu_to_kw(injection_cap(r, x, v2max)) + load;
        let cfg = HcaConfig {
            step: 1.0,
            max_level: Some(2000.0),
            ..HcaConfig::default()
        };
        let scen = snapshot(&net, 1.0, &[0.0, load]);
        let trace =
            run_deterministic_hca(&net, &cfg, &scen, &ObjectiveWeights::default()).map_err(|e| e.to_string())?;
        let hc = trace.final_hc.ok_or("no feasible level")?;
        check(hc <= cap_kw + 1e-6 && hc > cap_kw - 1.0, || {
            format!("r={r} x={x} load={load}: final_hc {hc} kW vs cap {cap_kw:.4} kW")
        })?;
        lines.push(format!("{hc}/{cap_kw:.2}"));
    }
    Ok(format!("final_hc/cap (kW): {}", lines.join(", ")))
}

#[test]
fn c02_two_bus_analytic_cap() {
    let t = Instant::now();
    report(2, "analytic hosting-capacity cap", t, Some(Duration::from_secs(30)), criterion_2());
}

// ---------------------------------------------------------------------------
// 3. MISOCP against enumeration

/// Facility-style toy: binaries open capacity for continuous flows inside a
/// ball, with a rotated cone linking a cost epigraph. Feasible at zero.
fn misocp_instance(seed: u64, nb: usize) -> (ConicProgram, Vec<VarId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut p = ConicProgram::new();
    let ys: Vec<VarId> = (0..4).map(|k| p.add_var(format!("y{k}"), -3.0, 3.0)).collect();
    let zs: Vec<VarId> = (0..nb).map(|k| p.add_binary(format!("open{k}"))).collect();
    for (k, &z) in zs.iter().enumerate() {
        let y = ys[rng.gen_range(0..ys.len())];
        let w = rng.gen_range(0.3..2.0);
        p.add_le("open_hi", LinExpr::from(y) - LinExpr::term(z, w), 0.0);
        p.add_ge("open_lo", LinExpr::from(y) + LinExpr::term(z, w), 0.0);
        if k > 0 && rng.gen_bool(0.3) {
            // precedence between openings
            p.add_le("order", LinExpr::from(z) - LinExpr::from(zs[k - 1]), 0.0);
        }
    }
    let mut count = LinExpr::new();
    for &z in &zs {
        count.add_term(z, 1.0);
    }
    p.add_le("count", count, rng.gen_range(1.0..nb as f64));
    p.add_soc(
        "ball",
        LinExpr::constant(rng.gen_range(1.5..4.0)),
        ys.iter().map(|&y| LinExpr::from(y)).collect(),
    );
    // t · 1 ≥ y0² + y1² / 2 through a rotated cone
    let t = p.add_var("t", 0.0, f64::INFINITY);
    p.add_rotated(
        "epi",
        LinExpr::from(t),
        LinExpr::constant(1.0),
        vec![LinExpr::from(ys[0]), LinExpr::from(ys[1])],
        false,
    );
    let mut obj = LinExpr::term(t, rng.gen_range(0.2..1.0));
    for &y in &ys {
        obj.add_term(y, rng.gen_range(-4.0..4.0));
    }
    for &z in &zs {
        obj.add_term(z, rng.gen_range(-0.3..1.0));
    }
    p.add_linear_objective("cost", obj);
    (p, zs)
}

fn enumerate(p: &ConicProgram, zs: &[VarId]) -> f64 {
    let mut best = f64::INFINITY;
    for mask in 0..(1u32 << zs.len()) {
        let mut q = p.clone();
        for (k, &z) in zs.iter().enumerate() {
            q.fix(z, f64::from((mask >> k) & 1));
        }
        let s = solve_continuous(&q, &SolverSettings::default());
        if s.is_optimal() {
            best = best.min(s.objective);
        }
    }
    best
}

fn criterion_3() -> Outcome {
    let settings = SolverSettings {
        gap_tol: 1e-9,
        ..SolverSettings::default()
    };
    let mut worst = 0.0f64;
    let mut nodes = 0;
    for seed in 0..25u64 {
        let nb = 4 + (seed as usize % 7);
        let (p, zs) = misocp_instance(seed, nb);
        let brute = enumerate(&p, &zs);
        let s = solve_misocp(&p, &settings, None);
        check(s.status == SolveStatus::Optimal, || format!("seed {seed}: status {:?}", s.status))?;
        let err = (s.objective - brute).abs();
        check(err <= 1e-6, || format!("seed {seed} ({nb} binaries): {} vs {brute}", s.objective))?;
        worst = worst.max(err);
        nodes += s.stats.nodes;
    }
    Ok(format!("25 instances, 4–10 binaries, max |Δobj| {worst:.1e}, {nodes} nodes in total"))
}

#[test]
fn c03_misocp_matches_enumeration() {
    let t = Instant::now();
    report(3, "MISOCP enumeration oracle", t, Some(Duration::from_secs(60)), criterion_3());
}

// ---------------------------------------------------------------------------
// 4. device dynamics

fn criterion_4() -> Outcome {
    let bs = BatteryParams {
        eta: 0.95,
        delta: 0.001,
        e_max: 13.5,
        ..BatteryParams::with_power(5.0)
    };
    let mut worst = 0.0f64;
    // `printed` carries `digits` decimals
    let mut unit = |got: f64, formula: f64, printed: f64, digits: i32| -> Result<(), String> {
        let e = (got - formula).abs();
        worst = worst.max(e);
        check(e <= 1e-9, || format!("{got} vs {formula}"))?;
        check((got - printed).abs() <= 0.5 * 10f64.powi(-digits), || format!("{got} vs printed {printed}"))
    };
    let got = battery_soc_step(&bs, 0.5, 5.0, 0.0, 0.25).map_err(|e| e.to_string())?;
    unit(got, 0.999 * 0.5 + 0.25 / 13.5 * 5.0 * 0.95, 0.587463, 6)?;
    let lossless = BatteryParams { delta: 0.0, ..bs };
    let got = battery_soc_step(&lossless, 0.5, 0.0, 5.0, 0.25).map_err(|e| e.to_string())?;
    unit(got, 0.5 - 0.25 / 13.5 * 5.0 / 0.95, 0.402534, 6)?;
    let hp = HPParams {
        r_th: 2.0,
        c_th: 2.0,
        cop: 2.5,
        ..HPParams::default()
    };
    let theta = (-0.25f64 / 4.0).exp();
    let got = hp_temp_step(&hp, 22.5, 32.0, -4.5, 0.25);
    unit(got, theta * 22.5 + (1.0 - theta) * (32.0 - 5.0 * 4.5), 21.7124, 4)?;
    let got = hp_temp_step(&hp, 20.0, 5.0, -3.0, 0.25);
    unit(got, 20.0, 20.0, 9)?;

    // forward replay of solved dispatches
    let net = feeder_4();
    let mut solved = 0;
    let mut replay_err = 0.0f64;
    for (dt, pv, bs_pct, ev, hp_pct, binaries) in [
        (1.0, 60.0, 20.0, 0.0, 0.0, false),
        (1.0, 60.0, 10.0, 20.0, 20.0, false),
        (2.0, 80.0, 20.0, 20.0, 30.0, false),
        (2.0, 40.0, 0.0, 30.0, 30.0, true),
        (4.0, 100.0, 30.0, 10.0, 10.0, true),
        (1.0, 30.0, 5.0, 5.0, 5.0, false),
    ] {
        let scen = baseline_day(&net, dt);
        let levels: BTreeMap<DerKind, f64> =
            [(DerKind::Pv, pv), (DerKind::Bs, bs_pct), (DerKind::Ev, ev), (DerKind::Hp, hp_pct)]
                .into_iter()
                .collect();
        let fleet = build_fleet(
            &net,
            &levels,
            &DeviceTemplates::default().for_step(dt),
            AllocationPolicy::Proportional,
            5,
            net.total_nominal_load(),
        )
        .map_err(|e| e.to_string())?;
        let opts = OpfOptions {
            hp_mode_binaries: binaries,
            ..OpfOptions::default()
        };
        let r = match solve_opf(&net, &fleet, &scen, &opts).map_err(|e| e.to_string())? {
            DispatchOutcome::Solved(r) => r,
            DispatchOutcome::Infeasible { reason } => return Err(format!("dt={dt} pv={pv}: {reason}")),
        };
        solved += 1;
        let rep = replay(&r, &fleet, &scen).map_err(|e| e.to_string())?;
        for (a, b) in [(&r.soc_bs, &rep.soc_bs), (&r.soc_ev, &rep.soc_ev), (&r.t_in, &rep.t_in)] {
            for (ra, rb) in a.iter().zip(b) {
                check(ra.len() == rb.len(), || "replay length differs".into())?;
                for (x, y) in ra.iter().zip(rb) {
                    replay_err = replay_err.max((x - y).abs());
                }
            }
        }
    }
    check(replay_err <= 1e-8, || format!("replay mismatch {replay_err:e}"))?;
    Ok(format!("unit values within {worst:.1e}; {solved} dispatches replay within {replay_err:.1e}"))
}

#[test]
fn c04_device_dynamics() {
    let t = Instant::now();
    report(4, "device-dynamics unit values", t, None, criterion_4());
}

// ---------------------------------------------------------------------------
// 5. dominance

fn criterion_5() -> Outcome {
    let w = ObjectiveWeights::default();
    let mut rows = Vec::new();
    let mut zero_flex = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 + (seed as usize % 2);
        let net = weakened(n, seed, 20.0);
        let day = baseline_day(&net, 4.0);
        // iterative engine
        let cfg = HcaConfig {
            step: 10.0,
            max_level: Some(1000.0),
            bs_pct: [0.0, 10.0, 20.0][rng.gen_range(0..3)],
            hp_pct: [0.0, 10.0, 30.0][rng.gen_range(0..3)],
            seed,
            ..HcaConfig::default()
        };
        let st = run_deterministic_hca(&net, &cfg, &day, &w).map_err(|e| e.to_string())?;
        let dy = run_deterministic_hca(&net, &HcaConfig { mode: HcaMode::Dynamic, ..cfg.clone() }, &day, &w)
            .map_err(|e| e.to_string())?;
        check(st.aborted.is_none() && dy.aborted.is_none(), || format!("seed {seed}: search aborted"))?;
        let (a, b) = (st.hc_or_zero(), dy.hc_or_zero());
        check(b >= a, || format!("seed {seed}: dynamic final_hc {b} < static {a}"))?;

        // 2-SSP engine
        let net = weakened(n, seed, 8.0);
        let set = ScenarioSet::singleton(baseline_day(&net, 6.0), "day");
        let base = SspConfig {
            bs_budget: rng.gen_range(0.1..0.3),
            ..SspConfig::default()
        };
        let s_st = run_ssp(&net, &set, &SspConfig { mode: HcaMode::Static, ..base.clone() }).map_err(|e| e.to_string())?;
        let s_dy = run_ssp(&net, &set, &base).map_err(|e| e.to_string())?;
        check(s_st.feasible && s_dy.feasible, || format!("seed {seed}: 2-SSP infeasible"))?;
        let (xa, xb) = (s_st.x.total(), s_dy.x.total());
        // the deterministic equivalent is solved to a relative gap
        let tol = base.settings.gap_tol * xa.max(1.0);
        check(xb >= xa - tol, || format!("seed {seed}: dynamic Σx {xb} < static Σx {xa}"))?;

        // zero flexibility: non-curtailable unity power factor PV only
        let levels: BTreeMap<DerKind, f64> = [(DerKind::Pv, 40.0)].into_iter().collect();
        let mut fleet = build_fleet(
            &net,
            &levels,
            &DeviceTemplates::default(),
            AllocationPolicy::Proportional,
            seed,
            net.total_nominal_load(),
        )
        .map_err(|e| e.to_string())?;
        for b in &mut fleet.buses {
            if let Some(pv) = &mut b.pv {
                pv.pf_min = 1.0;
            }
        }
        let opts = OpfOptions {
            allow_curtailment: false,
            ..OpfOptions::default()
        };
        let dynamic = match solve_opf(&net, &fleet, &day, &opts).map_err(|e| e.to_string())? {
            DispatchOutcome::Solved(r) => r.objective,
            DispatchOutcome::Infeasible { reason } => return Err(format!("seed {seed}: zero-flex dispatch: {reason}")),
        };
        let inj = static_injections(&net, &fleet, &day).map_err(|e| e.to_string())?;
        let chk = static_feasible(&net, &inj, &StaticOptions::default()).map_err(|e| e.to_string())?;
        let flow = chk.flow.ok_or_else(|| format!("seed {seed}: static check infeasible"))?;
        let import: f64 = (0..day.horizon()).map(|t| day.lmp[t] * flow.pcc_p[t]).sum();
        let reference = w.w_loss * flow.losses(&net) + w.w_import * import;
        let d = (dynamic - reference).abs() / reference.abs().max(1.0);
        zero_flex = zero_flex.max(d);
        check(d <= 1e-8, || format!("seed {seed}: zero-flex objective {dynamic} vs static {reference}"))?;
        rows.push(format!("{a}→{b}%/{xa:.2}→{xb:.2}"));
    }
    Ok(format!(
        "static→dynamic final_hc / Σx: {}; zero-flex Δobj {zero_flex:.1e}",
        rows.join(" ")
    ))
}

#[test]
fn c05_dominance() {
    let t = Instant::now();
    report(5, "dominance properties", t, None, criterion_5());
}

// ---------------------------------------------------------------------------
// 6. presence gating

fn criterion_6() -> Outcome {
    let mut closed = 0;
    let mut open = 0;
    let mut forced_closed = 0;
    let mut bare = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let net = weakened(3, 50 + seed, 6.0);
        let day = baseline_day(&net, 6.0);
        let noise = NoiseLevels::default();
        let set = generate_scenarios(&day, &noise, 2, seed).map_err(|e| e.to_string())?;
        let mode = if seed % 2 == 0 { HcaMode::Dynamic } else { HcaMode::Static };
        let cfg = SspConfig {
            mode,
            bs_budget: rng.gen_range(0.05..0.3),
            ..SspConfig::default()
        };
        let mut m = build_deterministic_equivalent(&net, &set, &cfg).map_err(|e| e.to_string())?;
        // close one gate by hand to exercise the closed branch on every instance
        let gates: Vec<(DerKind, usize)> = m
            .first
            .iter()
            .flat_map(|(&k, col)| col.iter().enumerate().filter_map(move |(i, p)| p.map(|_| (k, i))))
            .collect();
        let (fk, fi) = gates[rng.gen_range(0..gates.len())];
        if mode == HcaMode::Static {
            // every gate at that bus, so the bare-bus injection check runs
            for (k, i) in gates.iter().filter(|g| g.1 == fi) {
                m.prog.fix(m.first[k][*i].unwrap().z, 0.0);
                forced_closed += 1;
            }
        } else {
            m.prog.fix(m.first[&fk][fi].unwrap().z, 0.0);
            forced_closed += 1;
        }
        let sol = solve_misocp(&m.prog, &cfg.settings, None);
        check(sol.is_optimal(), || format!("seed {seed}: status {:?}", sol.status))?;
        let x = &sol.values;
        let tol = cfg.settings.feas_tol;
        for (&kind, col) in &m.first {
            for (i, pr) in col.iter().enumerate() {
                let Some(pr) = pr else { continue };
                let (xv, zv) = (x[pr.x.0], x[pr.z.0]);
                if xv > cfg.eps {
                    check((zv - 1.0).abs() <= 1e-6, || format!("seed {seed}: {kind} bus {i} x={xv} with z={zv}"))?;
                }
                if zv > 0.5 {
                    open += 1;
                    continue;
                }
                closed += 1;
                check(xv.abs() <= tol, || format!("seed {seed}: {kind} bus {i} closed with x={xv}"))?;
                for block in &m.blocks {
                    // static blocks hold flows only; checked below
                    let Some(dev) = block.devices.get(i) else { continue };
                    let vars: Vec<VarId> = match kind {
                        DerKind::Pv => dev.pv.iter().flat_map(|v| v.p.iter().chain(&v.q).copied()).collect(),
                        DerKind::Bs => dev
                            .bs
                            .iter()
                            .flat_map(|v| v.pc.iter().chain(&v.pd).chain(&v.e).chain(&v.q).copied())
                            .collect(),
                        DerKind::Ev => dev
                            .ev
                            .iter()
                            .flat_map(|v| v.pc.iter().chain(&v.pd).chain(&v.e).chain(&v.q).copied())
                            .collect(),
                        DerKind::Hp => dev.hp.iter().flat_map(|v| v.p.iter().chain(&v.w).copied()).collect(),
                    };
                    for v in vars {
                        check(x[v.0].abs() <= tol, || {
                            format!("seed {seed}: {} = {} under a closed gate", m.prog.var(v).name, x[v.0])
                        })?;
                    }
                }
            }
        }
        // a bus whose gates are all closed injects exactly its load
        for i in 0..net.n_buses() {
            let gated: Vec<f64> = m.first.values().filter_map(|col| col[i].map(|p| x[p.z.0])).collect();
            if gated.is_empty() || gated.iter().any(|&z| z > 0.5) {
                continue;
            }
            bare += 1;
            for (block, scen) in m.blocks.iter().zip(&set.scenarios) {
                for t in 0..scen.horizon() {
                    let p = x[block.flow.p_inj[t][i].0];
                    let want = -net.kw_to_pu(scen.load_p[i][t]);
                    check((p - want).abs() <= tol, || format!("seed {seed}: bus {i} t={t} injects {p}, load {want}"))?;
                }
            }
        }
    }
    Ok(format!(
        "10 instances: {closed} closed gates ({forced_closed} forced) carry nothing, {open} open gates, {bare} bare buses inject only load"
    ))
}

#[test]
fn c06_presence_gating() {
    let t = Instant::now();
    report(6, "presence gating", t, None, criterion_6());
}

// ---------------------------------------------------------------------------
// 7. stochastic shape

fn criterion_7() -> Outcome {
    let net = feeder_4();
    let day = baseline_day(&net, 2.0);
    let set = generate_scenarios(&day, &NoiseLevels::default(), 30, 2024).map_err(|e| e.to_string())?;
    let cfg = HcaConfig {
        step: 5.0,
        bs_pct: 5.0,
        ev_pct: 5.0,
        hp_pct: 5.0,
        ..HcaConfig::default()
    };
    let w = ObjectiveWeights::default();
    let st = run_stochastic_hca(&net, &cfg, &set, &w).map_err(|e| e.to_string())?;
    let dy = run_stochastic_hca(&net, &HcaConfig { mode: HcaMode::Dynamic, ..cfg }, &set, &w).map_err(|e| e.to_string())?;
    let detail = format!(
        "static mean {:.2} std {:.2}, dynamic mean {:.2} std {:.2}",
        st.mean, st.std, dy.mean, dy.std
    );
    check(!st.partial && !dy.partial, || format!("partial distribution; {detail}"))?;
    check(dy.mean > st.mean, || format!("dynamic mean not above static; {detail}"))?;
    check(dy.std >= st.std, || format!("dynamic spread below static; {detail}"))?;
    Ok(detail)
}

#[test]
fn c07_stochastic_shape() {
    let t = Instant::now();
    report(7, "stochastic-behavior shape", t, Some(Duration::from_secs(600)), criterion_7());
}

// ---------------------------------------------------------------------------
// 8. accelerated 2-SSP

fn criterion_8() -> Outcome {
    let net = two_bus_with(0.1, 0.05, 100.0, 20.0);
    let base = baseline_day(&net, 1.0).window(10, 4).map_err(|e| e.to_string())?;
    let cfg = SspConfig {
        mode: HcaMode::Static,
        x_pv_max: 50.0,
        ..SspConfig::default()
    };
    let flat = generate_scenarios(&base, &NoiseLevels::zero(), 8, 1).map_err(|e| e.to_string())?;
    let r = accelerated_ssp(&net, &flat, 3, 95.0, 1, &cfg).map_err(|e| e.to_string())?;
    check(r.tag == "reduced" && r.feasibility_rate == Some(100.0), || {
        format!("zero noise gave tag {} rate {:?}", r.tag, r.feasibility_rate)
    })?;

    let noise = NoiseLevels {
        alpha_pv: 0.15,
        ..NoiseLevels::default()
    };
    let mut worst = 0.0f64;
    let mut via_accelerated = 0;
    for seed in 0..5u64 {
        let set = generate_scenarios(&base, &noise, 8, 100 + seed).map_err(|e| e.to_string())?;
        let model = build_deterministic_equivalent(&net, &set, &cfg).map_err(|e| e.to_string())?;
        let cold = solve_ssp(&model, &net, &set, &cfg, None).map_err(|e| e.to_string())?;
        let reduced = kmeans_reduce(&set, 2, seed).map_err(|e| e.to_string())?;
        let crude = run_ssp(&net, &reduced.set, &cfg).map_err(|e| e.to_string())?;
        check(crude.feasible && cold.feasible, || format!("seed {seed}: infeasible solve"))?;
        let mut warm = WarmStart::new();
        for (&k, col) in &model.first {
            for (i, p) in col.iter().enumerate() {
                if let Some(p) = p {
                    let v = crude.x.get(k)[i].min(p.ub);
                    warm.set(p.x, v);
                    warm.set(p.z, if v >= cfg.eps { 1.0 } else { 0.0 });
                }
            }
        }
        let hot = solve_ssp(&model, &net, &set, &cfg, Some(&warm)).map_err(|e| e.to_string())?;
        let tol = cfg.settings.gap_tol * cold.objective.abs().max(1.0);
        let d = (hot.objective - cold.objective).abs();
        check(d <= tol, || format!("seed {seed}: warm {} vs cold {}", hot.objective, cold.objective))?;
        worst = worst.max(d / cold.objective.abs().max(1.0));
        let acc = accelerated_ssp(&net, &set, 2, 100.0, seed, &cfg).map_err(|e| e.to_string())?;
        if acc.tag == "full+warm" {
            via_accelerated += 1;
            let d = (acc.objective - cold.objective).abs();
            check(d <= tol, || format!("seed {seed}: accelerated {} vs cold {}", acc.objective, cold.objective))?;
        }
    }
    Ok(format!(
        "zero noise: reduced at 100%; 5 noisy seeds warm vs cold within {worst:.1e} relative ({via_accelerated} through the fallback path)"
    ))
}

#[test]
fn c08_accelerated_ssp() {
    let t = Instant::now();
    report(8, "accelerated 2-SSP equivalence", t, None, criterion_8());
}

// ---------------------------------------------------------------------------
// 9. k-means / elbow

fn criterion_9() -> Outcome {
    let net = feeder_4();
    let day = baseline_day(&net, 1.0);
    let mut checked = 0;
    for seed in 0..3u64 {
        let set = generate_scenarios(&day, &NoiseLevels::default(), 16, 90 + seed).map_err(|e| e.to_string())?;
        let curve = elbow_curve(&set, set.len(), seed).map_err(|e| e.to_string())?;
        for w in curve.windows(2) {
            check(w[1].1 <= w[0].1 + 1e-12 * w[0].1.max(1.0), || format!("seed {seed}: inertia rises {w:?}"))?;
        }
        let last = curve.last().unwrap();
        check(last.0 == set.len() && last.1.abs() <= 1e-9, || format!("seed {seed}: inertia {} at k=K", last.1))?;
        let extremes = forced_extremes(&set);
        for k in 1..=set.len() {
            let red = kmeans_reduce(&set, k, seed).map_err(|e| e.to_string())?;
            let mass: f64 = red.set.probabilities().iter().sum();
            check((mass - 1.0).abs() <= 1e-12, || format!("seed {seed} k={k}: mass {mass}"))?;
            for e in &extremes {
                check(red.representatives.contains(e), || format!("seed {seed} k={k}: extreme {e} missing"))?;
            }
            checked += 1;
        }
        let full = kmeans_reduce(&set, set.len(), seed).map_err(|e| e.to_string())?;
        check(full.inertia.abs() <= 1e-9, || format!("seed {seed}: inertia {} at k=K", full.inertia))?;
    }
    Ok(format!("{checked} reductions over 3 seeded sets of 16"))
}

#[test]
fn c09_kmeans_properties() {
    let t = Instant::now();
    report(9, "k-means/elbow properties", t, None, criterion_9());
}

// ---------------------------------------------------------------------------
// 10. reporting determinism

fn surface(bs: &[f64], hp: &[f64], f: impl Fn(f64, f64) -> Option<f64>) -> SweepSurface {
    let mut cells = Vec::new();
    for &b in bs {
        for &h in hp {
            cells.push(SweepCell {
                max_pv_pct: f(b, h),
                ..SweepCell::empty(b, h)
            });
        }
    }
    SweepSurface {
        mode: HcaMode::Static,
        engine: SweepEngine::Iterative,
        bs_pcts: bs.to_vec(),
        hp_pcts: hp.to_vec(),
        cells,
    }
}

fn pipeline(out: &Path, threads: usize) -> Result<(), String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let net = feeder_4();
        let day = baseline_day(&net, 4.0);
        let set = generate_scenarios(&day, &NoiseLevels::default(), 6, 77).map_err(|e| e.to_string())?;
        let cfg = HcaConfig {
            step: 10.0,
            seed: 77,
            ..HcaConfig::default()
        };
        let mut manifest = Manifest::new("acceptance", serde_json::json!({"seed": 77, "step": 10}));
        manifest.add_input_bytes("network", net.to_json_string().map_err(|e| e.to_string())?.as_bytes());
        let dist = run_stochastic_hca(&net, &cfg, &set, &ObjectiveWeights::default()).map_err(|e| e.to_string())?;
        let json = serde_json::to_string_pretty(&dist).map_err(|e| e.to_string())?;
        write_output(out, "dist.json", &json, &mut manifest).map_err(|e| e.to_string())?;
        write_output(out, "hist.csv", &dist.histogram_csv(10), &mut manifest).map_err(|e| e.to_string())?;
        let text = manifest.to_json().map_err(|e| e.to_string())?;
        write_output(out, "manifest.json", &text, &mut manifest).map_err(|e| e.to_string())?;
        Ok(())
    })
}

fn criterion_10() -> Outcome {
    let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).map_err(|e| e.to_string())?;
    check((rho - 0.9487).abs() <= 1e-4, || format!("spearman {rho}"))?;

    let (b_max, h_max, a, c) = (100.0, 60.0, 1.3, 25.0);
    let bs: Vec<f64> = (0..=10).map(|k| b_max * k as f64 / 10.0).collect();
    let hp: Vec<f64> = (0..=6).map(|k| h_max * k as f64 / 6.0).collect();
    let tri = surface(&bs, &hp, |b, _| Some(a * b));
    let rect = surface(&bs, &hp, |_, _| Some(c));
    let ratio = feasible_volume_ratio(&tri, &rect).map_err(|e| e.to_string())?;
    let expected = a * b_max / (2.0 * c);
    check((ratio - expected).abs() <= 1e-12, || format!("ratio {ratio} vs {expected}"))?;
    let vol = feasible_volume(&rect).map_err(|e| e.to_string())?;
    check((vol - c * b_max * h_max).abs() <= 1e-12 * c * b_max * h_max, || format!("volume {vol}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a_dir, b_dir) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&a_dir, 1)?;
    pipeline(&b_dir, 4)?;
    let listing = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let (la, lb) = (listing(&a_dir), listing(&b_dir));
    check(la.len() == 3 && la == lb, || "reruns differ".into())?;
    Ok(format!(
        "spearman {rho:.4}, volume ratio error {:.1e}, {} files byte-identical across 1 and 4 threads",
        (ratio - expected).abs(),
        la.len()
    ))
}

#[test]
fn c10_reporting_determinism() {
    let t = Instant::now();
    report(10, "reporting determinism", t, None, criterion_10());
}
