use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use serde_json::json;

use hostcap::analysis::{
    colocation_matrix_on, feasible_volume, feasible_volume_ratio, relative_increase, sensitivity_sweep, SweepConfig,
    SweepSurface,
};
use hostcap::fixtures;
use hostcap::hca::{build_fleet, run_deterministic_hca, HcaMode};
use hostcap::io::{baseline_from_profiles, write_output, Manifest, RunConfig};
use hostcap::opf::{solve_opf, DispatchOutcome, OpfOptions, ScenarioData};
use hostcap::scenarios::{generate_scenarios, run_stochastic_hca, ScenarioSet};
use hostcap::ssp::{accelerated_ssp, build_deterministic_equivalent, solve_ssp, Recourse, SspResult};
use hostcap::{DerKind, Network};

use crate::{Cli, Command, Opts, Outcome};

const BUILTINS: [(&str, &str); 3] = [
    ("two-bus", fixtures::TWO_BUS_JSON),
    ("feeder-4", fixtures::FEEDER_4_JSON),
    ("feeder-123", fixtures::FEEDER_123_JSON),
];

struct Ctx {
    cfg: RunConfig,
    net: Network,
    out: PathBuf,
    manifest: Manifest,
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.opts.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Validate { path } => validate(path, &cli.opts),
        Command::HcaDet => hca_det(&cli.opts),
        Command::HcaStoch => hca_stoch(&cli.opts),
        Command::Ssp => ssp(&cli.opts),
        Command::Sweep => sweep(&cli.opts),
        Command::Report { dir } => report(dir, &cli.opts),
    }
}

fn read_network(spec: &str) -> Result<(Network, Vec<u8>)> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        let (_, text) = BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| anyhow!("unknown builtin network `{name}` (two-bus, feeder-4, feeder-123)"))?;
        return Ok((Network::from_json_str(text)?, text.as_bytes().to_vec()));
    }
    let bytes = std::fs::read(spec).with_context(|| format!("reading {spec}"))?;
    let text = std::str::from_utf8(&bytes).with_context(|| format!("{spec} is not UTF-8"))?;
    Ok((Network::from_json_str(text).with_context(|| format!("parsing {spec}"))?, bytes))
}

fn load_config(opts: &Opts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(s) = &opts.scenarios {
        cfg.scenarios = Some(s.clone());
    }
    if let Some(o) = &opts.out {
        cfg.out = o.clone();
    }
    if let Some(step) = opts.step {
        cfg.hca.step = step;
    }
    if let Some(t) = opts.target {
        cfg.hca.target = t.into();
    }
    if let Some(b) = opts.bs_budget {
        cfg.ssp.bs_budget = b / 100.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Configuration as recorded in a manifest; the output directory is not
/// an input and is left out.
fn config_record(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("out");
    }
    Ok(v)
}

fn context(command: &str, opts: &Opts) -> Result<Ctx> {
    let cfg = load_config(opts)?;
    let spec = match (&opts.network, &cfg.network) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => p.display().to_string(),
        (None, None) => bail!("no network given (use --network or the config's `network`)"),
    };
    let (net, bytes) = read_network(&spec)?;
    let mut manifest = Manifest::new(command, config_record(&cfg)?);
    manifest.add_input_bytes("network", &bytes);
    if let Some(c) = &opts.config {
        manifest.add_input("config", c)?;
    }
    manifest.seeds.insert("seed".into(), cfg.seed);
    Ok(Ctx {
        out: cfg.out.clone(),
        cfg,
        net,
        manifest,
    })
}

fn mode_of(opts: &Opts) -> HcaMode {
    opts.mode.map(HcaMode::from).unwrap_or(HcaMode::Static)
}

fn mode_name(mode: HcaMode) -> &'static str {
    match mode {
        HcaMode::Static => "static",
        HcaMode::Dynamic => "dynamic",
    }
}

/// The baseline: first scenario of a directory, profile files, or the
/// bundled synthetic day.
fn baseline(ctx: &mut Ctx) -> Result<ScenarioData> {
    if let Some(p) = ctx.cfg.profiles.clone() {
        for (name, path) in p.files() {
            ctx.manifest.add_input(name, path)?;
        }
        return Ok(baseline_from_profiles(&ctx.net, &p, ctx.cfg.dt_hours, ctx.cfg.horizon)?);
    }
    let day = fixtures::baseline_day(&ctx.net, ctx.cfg.dt_hours);
    Ok(match ctx.cfg.horizon {
        Some(h) => day.window(0, h)?,
        None => day,
    })
}

fn scenario_set(ctx: &mut Ctx) -> Result<ScenarioSet> {
    if let Some(dir) = ctx.cfg.scenarios.clone() {
        let set = ScenarioSet::load_dir(&dir).with_context(|| format!("loading scenarios from {}", dir.display()))?;
        for s in &set.scenarios {
            s.validate(&ctx.net)?;
        }
        ctx.manifest.add_input("scenarios", &dir)?;
        return Ok(set);
    }
    let base = baseline(ctx)?;
    let noise = ctx.cfg.noise.unwrap_or_default();
    ctx.manifest.seeds.insert("scenarios".into(), ctx.cfg.seed);
    Ok(generate_scenarios(&base, &noise, ctx.cfg.scenario_count, ctx.cfg.seed)?)
}

fn finish(ctx: &mut Ctx, stem: &str, summary: serde_json::Value) -> Result<()> {
    ctx.manifest.summary = summary;
    let name = format!("manifest-{stem}.json");
    ctx.manifest.outputs.push(name.clone());
    let text = ctx.manifest.to_json()?;
    let out = ctx.out.clone();
    write_output(&out, &name, &text, &mut ctx.manifest)?;
    println!("outputs written to {}", out.display());
    Ok(())
}

fn json_pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

// ---------------------------------------------------------------------------

fn validate(path: &str, opts: &Opts) -> Result<Outcome> {
    let p = Path::new(path);
    if p.is_dir() {
        let set = ScenarioSet::load_dir(p)?;
        set.validate()?;
        if let Some(spec) = &opts.network {
            let (net, _) = read_network(spec)?;
            for s in &set.scenarios {
                s.validate(&net)?;
            }
        }
        println!(
            "ok: {} scenarios, {} steps of {} h",
            set.len(),
            set.scenarios[0].horizon(),
            set.scenarios[0].dt
        );
        return Ok(Outcome::Done);
    }
    let (net, _) = read_network(path)?;
    let homes: u64 = net.buses.iter().map(|b| b.houses as u64).sum();
    println!(
        "ok: {} buses, {} branches, {} homes, {:.1} kW nominal load",
        net.n_buses(),
        net.branches.len(),
        homes,
        net.total_nominal_load()
    );
    Ok(Outcome::Done)
}

fn hca_det(opts: &Opts) -> Result<Outcome> {
    let mut ctx = context("hca-det", opts)?;
    let mode = mode_of(opts);
    let scen = match ctx.cfg.scenarios.clone() {
        Some(_) => scenario_set(&mut ctx)?.scenarios.swap_remove(0),
        None => baseline(&mut ctx)?,
    };
    let hca = ctx.cfg.hca_config(mode);
    ctx.manifest.seeds.insert("allocation".into(), hca.seed);
    let trace = run_deterministic_hca(&ctx.net, &hca, &scen, &ctx.cfg.weights)?;
    let stem = format!("hca-det-{}-{}", hca.target, mode_name(mode));
    let out = ctx.out.clone();
    write_output(&out, &format!("{stem}-trace.csv"), &trace.to_csv(), &mut ctx.manifest)?;
    write_output(&out, &format!("{stem}-trace.json"), &json_pretty(&trace)?, &mut ctx.manifest)?;
    if opts.breakdown {
        match (mode, trace.final_hc) {
            (HcaMode::Dynamic, Some(level)) => {
                let b = dispatch_breakdown(&ctx, &hca, &scen, level)?;
                write_output(&out, &format!("{stem}-breakdown.json"), &json_pretty(&b)?, &mut ctx.manifest)?;
            }
            (HcaMode::Static, _) => log::warn!("--breakdown applies to dynamic dispatch only"),
            _ => {}
        }
    }
    match trace.final_hc {
        Some(hc) => println!("{} hosting capacity ({}): {hc}%", hca.target, mode_name(mode)),
        None => println!("{} hosting capacity ({}): no feasible level", hca.target, mode_name(mode)),
    }
    if let Some(a) = &trace.aborted {
        println!("search stopped early: {a}");
    }
    let summary = json!({
        "target": hca.target,
        "mode": mode,
        "final_hc": trace.final_hc,
        "levels": trace.levels.len(),
        "aborted": trace.aborted,
    });
    finish(&mut ctx, &stem, summary)?;
    Ok(if trace.final_hc.is_some() { Outcome::Done } else { Outcome::Infeasible })
}

fn dispatch_breakdown(
    ctx: &Ctx,
    hca: &hostcap::hca::HcaConfig,
    scen: &ScenarioData,
    level: f64,
) -> Result<BTreeMap<String, f64>> {
    let scen = match hca.time_window {
        Some((s, l)) => scen.window(s, l)?,
        None => scen.clone(),
    };
    let mut levels: BTreeMap<DerKind, f64> = [
        (DerKind::Pv, hca.pv_pct),
        (DerKind::Bs, hca.bs_pct),
        (DerKind::Ev, hca.ev_pct),
        (DerKind::Hp, hca.hp_pct),
    ]
    .into_iter()
    .collect();
    levels.insert(hca.target, level);
    let fleet = build_fleet(
        &ctx.net,
        &levels,
        &hca.templates.for_step(scen.dt),
        hca.policy,
        hca.seed,
        hca.peak(&ctx.net),
    )?;
    let opts = OpfOptions {
        weights: ctx.cfg.weights.clone(),
        ..hca.opf.clone()
    };
    match solve_opf(&ctx.net, &fleet, &scen, &opts)? {
        DispatchOutcome::Solved(d) => Ok(d.breakdown.clone()),
        DispatchOutcome::Infeasible { reason } => bail!("dispatch at {level}% became infeasible: {reason}"),
    }
}

fn hca_stoch(opts: &Opts) -> Result<Outcome> {
    let mut ctx = context("hca-stoch", opts)?;
    let mode = mode_of(opts);
    let set = scenario_set(&mut ctx)?;
    let hca = ctx.cfg.hca_config(mode);
    ctx.manifest.seeds.insert("allocation".into(), hca.seed);
    let dist = run_stochastic_hca(&ctx.net, &hca, &set, &ctx.cfg.weights)?.with_kde(64);
    let stem = format!("hca-stoch-{}-{}", hca.target, mode_name(mode));
    let out = ctx.out.clone();
    write_output(&out, &format!("{stem}.json"), &json_pretty(&dist)?, &mut ctx.manifest)?;
    write_output(&out, &format!("{stem}-histogram.csv"), &dist.histogram_csv(10), &mut ctx.manifest)?;
    let mut per = String::from("scenario,final_hc\n");
    for (k, s) in dist.samples.iter().enumerate() {
        let _ = writeln!(per, "{k},{s}");
    }
    write_output(&out, &format!("{stem}-samples.csv"), &per, &mut ctx.manifest)?;
    println!(
        "{} hosting capacity ({}) over {} scenarios: mean {:.2}%, std {:.2}%, min {:.2}%, max {:.2}%",
        hca.target,
        mode_name(mode),
        set.len(),
        dist.mean,
        dist.std,
        dist.min,
        dist.max
    );
    let summary = json!({
        "target": hca.target,
        "mode": mode,
        "scenarios": set.len(),
        "mean": dist.mean,
        "std": dist.std,
        "min": dist.min,
        "max": dist.max,
        "median": dist.median,
        "partial": dist.partial,
    });
    finish(&mut ctx, &stem, summary)?;
    Ok(Outcome::Done)
}

fn ssp(opts: &Opts) -> Result<Outcome> {
    let mut ctx = context("ssp", opts)?;
    let mode = mode_of(opts);
    let set = scenario_set(&mut ctx)?;
    let cfg = ctx.cfg.ssp_config(mode);
    let stem = format!("ssp-{}", mode_name(mode));
    let out = ctx.out.clone();
    let res = match opts.reduce {
        Some(k) => {
            if opts.dump_model {
                let m = build_deterministic_equivalent(&ctx.net, &set, &cfg)?;
                write_output(&out, &format!("{stem}-model.txt"), &m.prog.dump(), &mut ctx.manifest)?;
            }
            let threshold = opts.threshold.unwrap_or(95.0);
            ctx.manifest.seeds.insert("kmeans".into(), ctx.cfg.seed);
            accelerated_ssp(&ctx.net, &set, k, threshold, ctx.cfg.seed, &cfg)?
        }
        None => {
            let m = build_deterministic_equivalent(&ctx.net, &set, &cfg)?;
            if opts.dump_model {
                write_output(&out, &format!("{stem}-model.txt"), &m.prog.dump(), &mut ctx.manifest)?;
            }
            solve_ssp(&m, &ctx.net, &set, &cfg, None)?
        }
    };
    write_output(&out, &format!("{stem}.json"), &res.to_json()?, &mut ctx.manifest)?;
    write_output(&out, &format!("{stem}-capacities.csv"), &capacities_csv(&ctx.net, &res), &mut ctx.manifest)?;
    if opts.breakdown {
        write_output(&out, &format!("{stem}-breakdown.json"), &json_pretty(&ssp_breakdown(&res))?, &mut ctx.manifest)?;
    }
    if res.feasible {
        let buses: Vec<usize> = (0..ctx.net.n_buses()).filter(|&i| !ctx.net.buses[i].is_slack).collect();
        match colocation_matrix_on(&res.fleet, &buses) {
            Ok(m) => {
                write_output(&out, &format!("{stem}-colocation.json"), &(m.to_json()? + "\n"), &mut ctx.manifest)?;
                write_output(&out, &format!("{stem}-colocation.csv"), &m.to_csv(), &mut ctx.manifest)?;
            }
            Err(e) => log::info!("no colocation matrix: {e}"),
        }
    }
    println!("2-SSP ({}, {}): {:?}", mode_name(mode), res.tag, res.status);
    if res.feasible {
        for k in DerKind::ALL {
            println!("  {k}: {:.2} kW", res.total(k));
        }
        if let Some(r) = res.feasibility_rate {
            println!("  feasibility rate {r:.1}%");
        }
    }
    let totals: BTreeMap<String, f64> = DerKind::ALL.iter().map(|&k| (k.to_string(), res.total(k))).collect();
    let summary = json!({
        "mode": mode,
        "tag": res.tag,
        "feasible": res.feasible,
        "status": format!("{:?}", res.status),
        "objective": finite(res.objective),
        "totals_kw": totals,
        "repair_scale": res.repair_scale,
        "feasibility_rate": res.feasibility_rate,
    });
    finish(&mut ctx, &stem, summary)?;
    Ok(if res.feasible { Outcome::Done } else { Outcome::Infeasible })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn capacities_csv(net: &Network, res: &SspResult) -> String {
    let mut s = String::from("bus,pv_kw,bs_kw,ev_kw,hp_kw\n");
    let caps: Vec<Vec<f64>> = [DerKind::Pv, DerKind::Bs, DerKind::Ev, DerKind::Hp]
        .iter()
        .map(|&k| res.fleet.capacity(k))
        .collect();
    for (i, b) in net.buses.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{}", b.id, caps[0][i], caps[1][i], caps[2][i], caps[3][i]);
    }
    s
}

fn ssp_breakdown(res: &SspResult) -> serde_json::Value {
    let per: Vec<serde_json::Value> = res
        .recourse
        .iter()
        .map(|r| match r {
            Some(Recourse::Dynamic { dispatch }) => json!(dispatch.breakdown),
            Some(Recourse::Static { losses, .. }) => json!({ "losses": losses }),
            None => serde_json::Value::Null,
        })
        .collect();
    json!({
        "first_stage": finite(res.split.first_stage),
        "second_stage": finite(res.split.second_stage),
        "scenarios": per,
    })
}

fn sweep(opts: &Opts) -> Result<Outcome> {
    let mut ctx = context("sweep", opts)?;
    let set = scenario_set(&mut ctx)?;
    let modes: Vec<HcaMode> = match opts.mode {
        Some(m) => vec![m.into()],
        None => vec![HcaMode::Static, HcaMode::Dynamic],
    };
    let grid = ctx.cfg.sweep.clone();
    let out = ctx.out.clone();
    let mut surfaces = Vec::new();
    for &mode in &modes {
        let cfg = SweepConfig {
            mode,
            engine: grid.engine,
            hca: ctx.cfg.hca_config(mode),
            weights: ctx.cfg.weights.clone(),
            ssp: ctx.cfg.ssp_config(mode),
        };
        let s = sensitivity_sweep(&ctx.net, &set, &grid.bs, &grid.hp, &cfg)?;
        let name = format!("surface-{}", mode_name(mode));
        write_output(&out, &format!("{name}.csv"), &s.to_csv(), &mut ctx.manifest)?;
        write_output(&out, &format!("{name}.json"), &(s.to_json()? + "\n"), &mut ctx.manifest)?;
        println!("{} surface: volume {:.1}", mode_name(mode), feasible_volume(&s)?);
        surfaces.push(s);
    }
    let mut summary = json!({ "modes": modes, "cells": grid.bs.len() * grid.hp.len() });
    if let [st, dy] = surfaces.as_slice() {
        let ratio = feasible_volume_ratio(dy, st)?;
        let v = volume_json(dy, st, ratio)?;
        write_output(&out, "volume.json", &json_pretty(&v)?, &mut ctx.manifest)?;
        println!("feasible volume ratio (dynamic/static): {}", ratio_text(ratio));
        summary["volume_ratio"] = v["ratio"].clone();
    }
    let stem = match opts.mode {
        Some(m) => format!("sweep-{}", mode_name(m.into())),
        None => "sweep".to_string(),
    };
    finish(&mut ctx, &stem, summary)?;
    Ok(Outcome::Done)
}

fn ratio_text(r: f64) -> String {
    if r.is_finite() {
        format!("{r:.3}")
    } else {
        "infinite (static volume is zero)".into()
    }
}

fn volume_json(dy: &SweepSurface, st: &SweepSurface, ratio: f64) -> Result<serde_json::Value> {
    Ok(json!({
        "dynamic_volume": feasible_volume(dy)?,
        "static_volume": feasible_volume(st)?,
        "ratio": if ratio.is_finite() { json!(ratio) } else { json!("infinity") },
    }))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct Spread {
    mean: f64,
    std: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

/// Files in `dir` whose names start with `prefix` and end with `.json`,
/// in name order.
fn matching(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(".json"))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn report(dir: &Path, opts: &Opts) -> Result<Outcome> {
    let cfg = load_config(opts)?;
    let out = opts.out.clone().unwrap_or_else(|| dir.to_path_buf());
    let mut manifest = Manifest::new("report", config_record(&cfg)?);
    let mut report = serde_json::Map::new();
    let mut found = 0;

    for path in matching(dir, "ssp-")? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.contains("-breakdown") || name.contains("-colocation") {
            continue;
        }
        let res = match read_json::<SspResult>(&path) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => {
                log::warn!("skipping {name}: {e:#}");
                continue;
            }
        };
        manifest.add_input(&name, &path)?;
        found += 1;
        // buses without any DER (the slack among them) carry no ranking
        let buses: Vec<usize> = (0..res.fleet.len()).filter(|&i| !res.fleet.buses[i].is_empty()).collect();
        let entry = match colocation_matrix_on(&res.fleet, &buses) {
            Ok(m) => {
                let stem = name.trim_end_matches(".json");
                write_output(&out, &format!("report-{stem}-colocation.csv"), &m.to_csv(), &mut manifest)?;
                json!({ "feasible": res.feasible, "colocation": m })
            }
            Err(e) => json!({ "feasible": res.feasible, "colocation_error": e.to_string() }),
        };
        report.insert(name, entry);
    }

    let st = dir.join("surface-static.json");
    let dy = dir.join("surface-dynamic.json");
    if let (Some(s), Some(d)) = (read_json::<SweepSurface>(&st)?, read_json::<SweepSurface>(&dy)?) {
        manifest.add_input("surface-static.json", &st)?;
        manifest.add_input("surface-dynamic.json", &dy)?;
        found += 1;
        let ratio = feasible_volume_ratio(&d, &s)?;
        println!("feasible volume ratio (dynamic/static): {}", ratio_text(ratio));
        report.insert("volume".into(), volume_json(&d, &s, ratio)?);
    }

    let stoch = matching(dir, "hca-stoch-")?;
    let mut spreads: BTreeMap<String, Spread> = BTreeMap::new();
    for path in &stoch {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().trim_end_matches(".json").to_string();
        if let Some(s) = read_json::<Spread>(path)? {
            manifest.add_input(&name, path)?;
            spreads.insert(name, s);
        }
    }
    for (name, s) in &spreads {
        let Some(target) = name.strip_prefix("hca-stoch-").and_then(|r| r.strip_suffix("-static")) else {
            continue;
        };
        let Some(d) = spreads.get(&format!("hca-stoch-{target}-dynamic")) else { continue };
        found += 1;
        let vol = relative_increase(d.std, s.std).ok();
        println!(
            "{target}: mean {:.2}% → {:.2}%, std {:.2} → {:.2}",
            s.mean, d.mean, s.std, d.std
        );
        report.insert(
            format!("distribution-{target}"),
            json!({
                "static_mean": s.mean,
                "dynamic_mean": d.mean,
                "static_std": s.std,
                "dynamic_std": d.std,
                "std_increase": vol,
            }),
        );
    }

    if found == 0 {
        bail!("no earlier outputs found in {}", dir.display());
    }
    let value = serde_json::Value::Object(report);
    write_output(&out, "report.json", &json_pretty(&value)?, &mut manifest)?;
    manifest.summary = json!({ "sections": found });
    manifest.outputs.push("manifest-report.json".into());
    let text = manifest.to_json()?;
    write_output(&out, "manifest-report.json", &text, &mut manifest)?;
    println!("report written to {}", out.join("report.json").display());
    Ok(Outcome::Done)
}
