use super::*;
use crate::der::{BatteryParams, BusDers, EVParams, EvUnit, HPParams, HpUnit, PVParams};
use crate::fixtures::{baseline_day, feeder_4, two_bus, two_bus_with};
use crate::scenarios::ScenarioSet;
use proptest::prelude::*;

fn fleet_from(pv: &[f64], bs: &[f64], hp: &[f64], ev: &[f64]) -> DerFleet {
    let buses = (0..pv.len())
        .map(|i| BusDers {
            pv: Some(PVParams {
                p_max: pv[i],
                ..PVParams::default()
            }),
            battery: Some(BatteryParams {
                p_max: bs[i],
                e_max: 3.0 * bs[i],
                ..BatteryParams::default()
            }),
            hp: Some(HpUnit {
                params: HPParams::default(),
                count: hp[i],
            }),
            ev: Some(EvUnit {
                params: EVParams::default(),
                count: ev[i],
            }),
        })
        .collect();
    DerFleet { buses }.normalized()
}

#[test]
fn spearman_monotone_and_antitone() {
    let x = [1.0, 2.0, 3.0];
    assert_eq!(spearman(&x, &[10.0, 20.0, 30.0]).unwrap(), 1.0);
    assert_eq!(spearman(&x, &[30.0, 20.0, 10.0]).unwrap(), -1.0);
}

#[test]
fn spearman_with_ties() {
    // ranks x = (1, 2.5, 2.5, 4), y = (1, 3, 2, 4); centred around 2.5:
    // Σdxdy = 4.5, Σdx² = 4.5, Σdy² = 5
    let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((r - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
    assert!((r - 0.9487).abs() < 1e-4);
    assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 5.0]), vec![3.0, 1.0, 3.0, 3.0]);
}

#[test]
fn spearman_rejects_degenerate_input() {
    assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
    assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Dimension(_))));
    assert!(spearman(&[1.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn spearman_is_rank_invariant(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..20),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let Ok(r) = spearman(&x, &y) else { return Ok(()) };
        prop_assert!((-1.0..=1.0).contains(&r));
        let fx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp()).collect();
        let gy: Vec<f64> = y.iter().map(|v| v * v * v + 7.0).collect();
        let r2 = spearman(&fx, &gy).unwrap();
        prop_assert!((r - r2).abs() < 1e-12, "{} vs {}", r, r2);
        prop_assert!((spearman(&y, &x).unwrap() - r).abs() < 1e-15);
    }
}

#[test]
fn colocation_of_identical_ranks_is_one() {
    let f = fleet_from(&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.7, 0.9, 2.0], &[1.0, 3.0, 4.0, 9.0], &[2.0, 4.0, 5.0, 6.0]);
    let m = colocation_matrix(&f).unwrap();
    assert_eq!(m.labels, vec!["pv", "bs", "hp", "ev"]);
    for row in &m.values {
        for v in row {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn colocation_detects_inverted_ranks() {
    let f = fleet_from(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
    let m = colocation_matrix(&f).unwrap();
    assert!((m.get("pv", "ev").unwrap() + 1.0).abs() < 1e-12);
    assert!((m.get("ev", "hp").unwrap() + 1.0).abs() < 1e-12);
}

#[test]
fn colocation_matrix_is_symmetric_with_unit_diagonal() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.gen_range(3..15);
        let mut draw = || (0..n).map(|_| rng.gen_range(0.1..10.0)).collect::<Vec<f64>>();
        let (a, b, c, d) = (draw(), draw(), draw(), draw());
        let m = colocation_matrix(&fleet_from(&a, &b, &c, &d)).unwrap();
        for i in 0..4 {
            assert_eq!(m.values[i][i], 1.0);
            for j in 0..4 {
                assert!((m.values[i][j] - m.values[j][i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn colocation_rejects_constant_capacities() {
    let f = fleet_from(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
    assert!(matches!(colocation_matrix(&f), Err(Error::Degenerate(_))));
    assert!(colocation_matrix_on(&f, &[0, 7]).is_err());
}

#[test]
fn correlation_outputs() {
    let f = fleet_from(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
    let m = colocation_matrix(&f).unwrap();
    let back: CorrelationMatrix = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
    let csv = m.to_csv();
    assert!(csv.starts_with("der,pv,bs,hp,ev\n"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",-1"));
}

#[test]
fn relative_increase_of_standard_deviations() {
    assert!((relative_increase(3.44, 2.36).unwrap() - 0.457_627_118_644_067_8).abs() < 1e-12);
    assert!(relative_increase(1.0, 0.0).is_err());
}

// ---------------------------------------------------------------------------

fn surface(bs: &[f64], hp: &[f64], f: impl Fn(f64, f64) -> Option<f64>) -> SweepSurface {
    let cells = bs
        .iter()
        .flat_map(|&b| {
            hp.iter().map({
                let f = &f;
                move |&h| SweepCell {
                    max_pv_pct: f(b, h),
                    ..SweepCell::empty(b, h)
                }
            })
        })
        .collect();
    SweepSurface {
        mode: HcaMode::Static,
        engine: SweepEngine::Iterative,
        bs_pcts: bs.to_vec(),
        hp_pcts: hp.to_vec(),
        cells,
    }
}

fn grid(n: usize, width: f64) -> Vec<f64> {
    (0..n).map(|i| width * i as f64 / (n - 1) as f64).collect()
}

#[test]
fn volume_ratio_of_identical_surfaces_is_one() {
    let s = surface(&grid(5, 100.0), &grid(4, 90.0), |b, h| Some(50.0 + b - 0.3 * h));
    assert_eq!(feasible_volume_ratio(&s, &s).unwrap(), 1.0);
    let zero = surface(&[0.0], &[0.0], |_, _| None);
    assert_eq!(feasible_volume_ratio(&zero, &zero).unwrap(), 1.0);
}

#[test]
fn volume_ratio_is_linear() {
    let st = surface(&grid(6, 100.0), &grid(3, 50.0), |b, h| Some(10.0 + 0.2 * b + h));
    let dy = surface(&grid(6, 100.0), &grid(3, 50.0), |b, h| Some(2.0 * (10.0 + 0.2 * b + h)));
    assert!((feasible_volume_ratio(&dy, &st).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn volume_ratio_matches_closed_form() {
    // triangle PV = a·bs over [0, B] × [0, H] against the rectangle PV = c:
    // (a·B²/2·H) / (c·B·H) = a·B / (2c)
    let (b_max, h_max, a, c) = (100.0, 90.0, 1.7, 40.0);
    let bs = grid(11, b_max);
    let hp = grid(7, h_max);
    let tri = surface(&bs, &hp, |b, _| Some(a * b));
    let rect = surface(&bs, &hp, |_, _| Some(c));
    let expected = a * b_max / (2.0 * c);
    assert!((feasible_volume_ratio(&tri, &rect).unwrap() - expected).abs() < 1e-12);
    assert!((feasible_volume(&tri).unwrap() - a * b_max * b_max / 2.0 * h_max).abs() < 1e-12 * a * b_max * b_max * h_max);
}

#[test]
fn volume_ratio_edge_cases() {
    let bs = grid(3, 100.0);
    let hp = grid(3, 100.0);
    let dy = surface(&bs, &hp, |_, _| Some(10.0));
    let st = surface(&bs, &hp, |_, _| None);
    assert_eq!(feasible_volume_ratio(&dy, &st).unwrap(), f64::INFINITY);
    let negative = surface(&bs, &hp, |_, _| Some(-5.0));
    assert_eq!(feasible_volume(&negative).unwrap(), 0.0);
    let other = surface(&bs, &grid(4, 100.0), |_, _| Some(1.0));
    assert!(matches!(feasible_volume_ratio(&dy, &other), Err(Error::Dimension(_))));
    let mut broken = dy.clone();
    broken.cells.pop();
    assert!(feasible_volume(&broken).is_err());
}

#[test]
fn surface_csv_marks_infeasible_cells() {
    let mut s = surface(&[0.0, 50.0], &[0.0], |b, _| (b == 0.0).then_some(120.0));
    s.cells[0].vmin = Some(0.97);
    s.cells[0].vmax = Some(1.05);
    s.cells[0].imax_pct = Some(80.5);
    let csv = s.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SURFACE_CSV_HEADER);
    assert_eq!(lines[1], "0,0,120,0.97,1.05,80.5");
    assert_eq!(lines[2], "50,0,infeasible,,,");
    let back: SweepSurface = serde_json::from_str(&s.to_json().unwrap()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn sweep_rejects_bad_grids() {
    let net = two_bus();
    let set = ScenarioSet::singleton(baseline_day(&net, 6.0), "day");
    let cfg = SweepConfig::default();
    assert!(sensitivity_sweep(&net, &set, &[], &[0.0], &cfg).is_err());
    assert!(sensitivity_sweep(&net, &set, &[0.0], &[10.0, 10.0], &cfg).is_err());
    assert!(sensitivity_sweep(&net, &set, &[20.0, 10.0], &[0.0], &cfg).is_err());
}

#[test]
fn single_cell_delegates_to_the_iterative_search() {
    let net = two_bus();
    let scen = baseline_day(&net, 6.0);
    let set = ScenarioSet::singleton(scen.clone(), "day");
    let cfg = SweepConfig {
        hca: HcaConfig {
            step: 5.0,
            ..HcaConfig::default()
        },
        ..SweepConfig::default()
    };
    let s = sensitivity_sweep(&net, &set, &[0.0], &[0.0], &cfg).unwrap();
    let direct = run_deterministic_hca(&net, &cfg.hca, &scen, &cfg.weights).unwrap();
    assert_eq!(s.cells.len(), 1);
    assert_eq!(s.cells[0].max_pv_pct, direct.final_hc);
    let at_cap = direct.levels.iter().find(|l| Some(l.level_pct) == direct.final_hc).unwrap();
    let m = at_cap.metrics.as_ref().unwrap();
    assert_eq!(s.cells[0].vmax, Some(m.vmax));
    assert_eq!(s.cells[0].imax_pct, Some(m.imax_pct));
}

#[test]
fn dynamic_cells_dominate_static_cells() {
    let net = feeder_4();
    let set = ScenarioSet::singleton(baseline_day(&net, 4.0), "day");
    let base = SweepConfig {
        hca: HcaConfig {
            step: 25.0,
            ..HcaConfig::default()
        },
        ..SweepConfig::default()
    };
    let bs = [0.0, 40.0];
    let hp = [0.0, 50.0];
    let st = sensitivity_sweep(&net, &set, &bs, &hp, &base).unwrap();
    let dy = sensitivity_sweep(
        &net,
        &set,
        &bs,
        &hp,
        &SweepConfig {
            mode: HcaMode::Dynamic,
            ..base.clone()
        },
    )
    .unwrap();
    for (d, s) in dy.cells.iter().zip(&st.cells) {
        assert!(d.error.is_none() && s.error.is_none());
        assert!(d.max_pv_pct.unwrap_or(-1.0) >= s.max_pv_pct.unwrap_or(-1.0), "{d:?} vs {s:?}");
    }
    // batteries only relax the voltage-rise limit under coordination
    assert!(dy.cell(1, 0).max_pv_pct >= dy.cell(0, 0).max_pv_pct);
    assert!(feasible_volume_ratio(&dy, &st).unwrap() >= 1.0);
}

#[test]
fn ssp_engine_cell_brackets_the_iterative_answer() {
    let net = two_bus_with(0.2, 0.2, 100.0, 0.0);
    let set = ScenarioSet::singleton(baseline_day(&net, 6.0), "day");
    let step = 5.0;
    let iter_cfg = SweepConfig {
        hca: HcaConfig {
            step,
            ..HcaConfig::default()
        },
        ..SweepConfig::default()
    };
    let ssp_cfg = SweepConfig {
        engine: SweepEngine::Ssp,
        ..iter_cfg.clone()
    };
    let it = sensitivity_sweep(&net, &set, &[0.0], &[0.0], &iter_cfg).unwrap();
    let sp = sensitivity_sweep(&net, &set, &[0.0], &[0.0], &ssp_cfg).unwrap();
    let (a, b) = (it.cells[0].max_pv_pct.unwrap(), sp.cells[0].max_pv_pct.unwrap());
    // the 2-SSP answer is continuous up to the repair resolution
    assert!(b >= a * (1.0 - 1e-3) && b <= a + step + 1e-6, "iterative {a}, ssp {b}");
    assert!(sp.cells[0].vmax.unwrap() <= 1.05 + 1e-6);
}
