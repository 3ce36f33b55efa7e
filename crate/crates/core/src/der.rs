//! Device parameters, state transitions and per-device cost terms for PV,
//! batteries, electric vehicles and heat pumps.
//!
//! Powers follow the injection sign convention: positive means power flows
//! into the grid. Heat pumps therefore always have non-positive power.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerKind {
    Pv,
    Bs,
    Ev,
    Hp,
}

impl DerKind {
    pub const ALL: [DerKind; 4] = [DerKind::Pv, DerKind::Bs, DerKind::Ev, DerKind::Hp];

    pub fn name(self) -> &'static str {
        match self {
            DerKind::Pv => "pv",
            DerKind::Bs => "bs",
            DerKind::Ev => "ev",
            DerKind::Hp => "hp",
        }
    }
}

impl std::fmt::Display for DerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pv" => Ok(DerKind::Pv),
            "bs" => Ok(DerKind::Bs),
            "ev" => Ok(DerKind::Ev),
            "hp" => Ok(DerKind::Hp),
            _ => Err(Error::Parameter(format!("unknown DER type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PVParams {
    /// Rated output (kW).
    pub p_max: f64,
    pub pf_min: f64,
}

impl Default for PVParams {
    fn default() -> Self {
        PVParams { p_max: 0.0, pf_min: 0.9 }
    }
}

impl PVParams {
    pub fn validate(&self) -> Result<()> {
        if self.p_max < 0.0 || !(self.pf_min > 0.0 && self.pf_min <= 1.0) {
            return Err(Error::Parameter(format!("invalid PV parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    /// Charge/discharge power rating (kW).
    pub p_max: f64,
    /// Energy capacity (kWh).
    pub e_max: f64,
    pub eta: f64,
    /// Self-discharge fraction per step.
    pub delta: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub pf_min: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        BatteryParams {
            p_max: 5.0,
            e_max: 15.0,
            eta: 0.95,
            delta: 0.0,
            soc_min: 0.1,
            soc_max: 0.9,
            soc_init: 0.5,
            pf_min: 0.9,
        }
    }
}

impl BatteryParams {
    /// Residential default with the given power rating and a 3 h duration.
    pub fn with_power(p_max: f64) -> Self {
        BatteryParams {
            p_max,
            e_max: 3.0 * p_max,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.p_max > 0.0
            && self.e_max > 0.0
            && self.eta > 0.0
            && self.eta <= 1.0
            && (0.0..1.0).contains(&self.delta)
            && 0.0 <= self.soc_min
            && self.soc_min <= self.soc_init
            && self.soc_init <= self.soc_max
            && self.soc_max <= 1.0
            && self.pf_min > 0.0
            && self.pf_min <= 1.0;
        if !ok {
            return Err(Error::Parameter(format!("invalid battery parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EVParams {
    /// Bidirectional charger rating (kW).
    pub charger_kw: f64,
    pub e_max: f64,
    /// First and last step (inclusive) the vehicle is away.
    pub away_start: usize,
    pub away_end: usize,
    pub soc_target: f64,
    pub target_time: usize,
    pub eta: f64,
    pub delta: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub pf_min: f64,
    pub v2g: bool,
}

impl Default for EVParams {
    fn default() -> Self {
        EVParams::for_step(0.25)
    }
}

impl EVParams {
    /// 9.6 kW / 70 kWh vehicle away from 9am to 5pm, 90% charged by departure.
    pub fn for_step(dt_hours: f64) -> Self {
        let away_start = (9.0 / dt_hours).round() as usize;
        let away_end = (17.0 / dt_hours).round() as usize;
        EVParams {
            charger_kw: 9.6,
            e_max: 70.0,
            away_start,
            away_end,
            soc_target: 0.9,
            target_time: away_start,
            eta: 0.95,
            delta: 0.0,
            soc_min: 0.1,
            soc_max: 0.95,
            soc_init: 0.6,
            pf_min: 0.9,
            v2g: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.charger_kw > 0.0
            && self.e_max > 0.0
            && self.away_start <= self.away_end
            && self.soc_min <= self.soc_target
            && self.soc_target <= self.soc_max
            && self.eta > 0.0
            && self.eta <= 1.0
            && (0.0..1.0).contains(&self.delta)
            && self.soc_min <= self.soc_init
            && self.soc_init <= self.soc_max;
        if !ok {
            return Err(Error::Parameter(format!("invalid EV parameters {self:?}")));
        }
        Ok(())
    }

    pub fn as_battery(&self) -> BatteryParams {
        BatteryParams {
            p_max: self.charger_kw,
            e_max: self.e_max,
            eta: self.eta,
            delta: self.delta,
            soc_min: self.soc_min,
            soc_max: self.soc_max,
            soc_init: self.soc_init,
            pf_min: self.pf_min,
        }
    }
}

/// Whether the vehicle is plugged in at step `t` (the away window is closed).
pub fn ev_available(params: &EVParams, t: usize) -> bool {
    !(params.away_start..=params.away_end).contains(&t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HPParams {
    /// Rated electrical power (kW).
    pub p_rated: f64,
    /// Thermal resistance (°C/kW).
    pub r_th: f64,
    /// Thermal capacitance (kWh/°C).
    pub c_th: f64,
    pub cop: f64,
    pub t_set: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub ramp_frac: f64,
    pub t_init: f64,
    /// Thermostat deadband (°C). Stored for reference; the optimizer does
    /// not model hysteresis.
    pub deadband: f64,
}

impl Default for HPParams {
    fn default() -> Self {
        HPParams {
            p_rated: 5.6,
            r_th: 2.0,
            c_th: 2.0,
            cop: 2.5,
            t_set: 22.5,
            t_min: 20.0,
            t_max: 25.0,
            ramp_frac: 0.3,
            t_init: 22.5,
            deadband: 0.3125,
        }
    }
}

impl HPParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_min <= self.t_set
            && self.t_set <= self.t_max
            && self.ramp_frac > 0.0
            && self.ramp_frac <= 1.0
            && self.r_th > 0.0
            && self.c_th > 0.0
            && self.cop > 0.0
            && self.p_rated > 0.0;
        if !ok {
            return Err(Error::Parameter(format!("invalid heat pump parameters {self:?}")));
        }
        Ok(())
    }

    /// Per-step thermal decay factor.
    pub fn theta(&self, dt: f64) -> f64 {
        (-dt / (self.r_th * self.c_th)).exp()
    }

    /// Temperature change per kW of electrical power (°C/kW).
    pub fn rho(&self) -> f64 {
        self.r_th * self.cop
    }

    /// Power (≤ 0) that holds the indoor temperature at `t_set`, clipped to
    /// the rating.
    pub fn holding_power(&self, t_out: f64) -> f64 {
        (-(t_out - self.t_set).abs() / self.rho()).max(-self.p_rated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HpMode {
    Cooling,
    Heating,
}

impl HpMode {
    /// Mode implied by comparing outdoor temperature with a reference indoor
    /// temperature. Ties resolve to cooling.
    pub fn from_temperatures(t_out: f64, t_ref: f64) -> Self {
        if t_out < t_ref {
            HpMode::Heating
        } else {
            HpMode::Cooling
        }
    }

    /// Sign applied to `rho * p_hp` in the temperature recurrence.
    pub fn sign(self) -> f64 {
        match self {
            HpMode::Cooling => 1.0,
            HpMode::Heating => -1.0,
        }
    }
}

/// Objective weights for the dynamic dispatch problem.
///
/// Several concepts appear in the literature under two names (a network-level
/// weight and a device-level weight); each concept has one field here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub w_curtail: f64,
    pub w_loss: f64,
    pub w_couple_bs: f64,
    pub w_couple_ev: f64,
    pub w_comfort: f64,
    pub w_cycle_hp: f64,
    pub w_cycle_bs: f64,
    pub w_cycle_ev: f64,
    pub w_soc_track: f64,
    /// Scale on the LMP-weighted import and arbitrage terms (0 disables).
    pub w_import: f64,
    /// Reference price ($/kWh); `None` uses the horizon mean.
    pub lambda_bar: Option<f64>,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            w_curtail: 10.0,
            w_loss: 1.0,
            w_couple_bs: 0.01,
            w_couple_ev: 0.01,
            w_comfort: 0.01,
            w_cycle_hp: 0.1,
            w_cycle_bs: 0.1,
            w_cycle_ev: 0.1,
            w_soc_track: 1.0,
            w_import: 1.0,
            lambda_bar: None,
        }
    }
}

impl ObjectiveWeights {
    pub fn zero() -> Self {
        ObjectiveWeights {
            w_curtail: 0.0,
            w_loss: 0.0,
            w_couple_bs: 0.0,
            w_couple_ev: 0.0,
            w_comfort: 0.0,
            w_cycle_hp: 0.0,
            w_cycle_bs: 0.0,
            w_cycle_ev: 0.0,
            w_soc_track: 0.0,
            w_import: 0.0,
            lambda_bar: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_curtail,
            self.w_loss,
            self.w_couple_bs,
            self.w_couple_ev,
            self.w_comfort,
            self.w_cycle_hp,
            self.w_cycle_bs,
            self.w_cycle_ev,
            self.w_soc_track,
            self.w_import,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter("objective weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One step of the battery state-of-charge recurrence. Bounds are not
/// enforced here.
pub fn battery_soc_step(
    params: &BatteryParams,
    soc: f64,
    p_charge: f64,
    p_discharge: f64,
    dt: f64,
) -> Result<f64> {
    if p_charge > 0.0 && p_discharge > 0.0 {
        return Err(Error::Contract(format!(
            "simultaneous charge ({p_charge} kW) and discharge ({p_discharge} kW)"
        )));
    }
    if p_charge < 0.0 || p_discharge < 0.0 {
        return Err(Error::Contract("charge and discharge powers must be non-negative".into()));
    }
    Ok((1.0 - params.delta) * soc
        + dt / params.e_max * (p_charge * params.eta - p_discharge / params.eta))
}

/// One step of the indoor temperature recurrence with the mode taken from
/// the sign of `t_out - t_in` (ties resolve to cooling).
pub fn hp_temp_step(params: &HPParams, t_in: f64, t_out: f64, p_hp: f64, dt: f64) -> f64 {
    hp_temp_step_mode(params, t_in, t_out, p_hp, dt, HpMode::from_temperatures(t_out, t_in))
}

/// One step of the indoor temperature recurrence in an explicit mode.
pub fn hp_temp_step_mode(
    params: &HPParams,
    t_in: f64,
    t_out: f64,
    p_hp: f64,
    dt: f64,
    mode: HpMode,
) -> f64 {
    let theta = params.theta(dt);
    theta * t_in + (1.0 - theta) * (t_out + mode.sign() * params.rho() * p_hp)
}

/// Reactive power envelope of an inverter at active power `p`.
pub fn pf_q_bounds(p: f64, pf_min: f64) -> (f64, f64) {
    let q = p * pf_tan(pf_min);
    (-q, q)
}

/// tan(arccos(pf)), the reactive/active ratio at power factor `pf`.
pub fn pf_tan(pf: f64) -> f64 {
    if pf >= 1.0 {
        0.0
    } else {
        pf.acos().tan()
    }
}

pub fn cycling_cost(series: &[f64], weight: f64) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Parameter("cycling cost needs at least two samples".into()));
    }
    Ok(weight * series.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>())
}

pub fn comfort_cost(temps: &[f64], t_set: f64, weight: f64) -> f64 {
    weight * temps.iter().map(|t| (t - t_set).powi(2)).sum::<f64>()
}

/// Aggregated vehicles at one bus: `count` identical vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvUnit {
    pub params: EVParams,
    pub count: f64,
}

impl EvUnit {
    pub fn p_max(&self) -> f64 {
        self.count * self.params.charger_kw
    }

    pub fn e_max(&self) -> f64 {
        self.count * self.params.e_max
    }
}

/// Aggregated heat pumps at one bus: `count` identical homes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpUnit {
    pub params: HPParams,
    pub count: f64,
}

impl HpUnit {
    pub fn p_max(&self) -> f64 {
        self.count * self.params.p_rated
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BusDers {
    pub pv: Option<PVParams>,
    pub battery: Option<BatteryParams>,
    pub ev: Option<EvUnit>,
    pub hp: Option<HpUnit>,
}

impl BusDers {
    pub fn is_empty(&self) -> bool {
        self.pv.is_none() && self.battery.is_none() && self.ev.is_none() && self.hp.is_none()
    }
}

/// Per-bus DER placement. Entries with zero capacity are normalized away.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DerFleet {
    pub buses: Vec<BusDers>,
}

impl DerFleet {
    pub fn empty(n_buses: usize) -> Self {
        DerFleet {
            buses: vec![BusDers::default(); n_buses],
        }
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.iter().all(BusDers::is_empty)
    }

    /// Drops zero-capacity entries.
    pub fn normalized(mut self) -> Self {
        for b in &mut self.buses {
            if b.pv.is_some_and(|p| p.p_max <= 0.0) {
                b.pv = None;
            }
            if b.battery.is_some_and(|p| p.p_max <= 0.0 || p.e_max <= 0.0) {
                b.battery = None;
            }
            if b.ev.is_some_and(|e| e.count <= 0.0) {
                b.ev = None;
            }
            if b.hp.is_some_and(|h| h.count <= 0.0) {
                b.hp = None;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.buses {
            if let Some(p) = &b.pv {
                p.validate()?;
            }
            if let Some(p) = &b.battery {
                p.validate()?;
            }
            if let Some(e) = &b.ev {
                e.params.validate()?;
                if e.count < 0.0 {
                    return Err(Error::Parameter("negative EV count".into()));
                }
            }
            if let Some(h) = &b.hp {
                h.params.validate()?;
                if h.count < 0.0 {
                    return Err(Error::Parameter("negative heat pump count".into()));
                }
            }
        }
        Ok(())
    }

    /// Nodal power capacity of one DER type (kW), zero where absent.
    pub fn capacity(&self, kind: DerKind) -> Vec<f64> {
        self.buses
            .iter()
            .map(|b| match kind {
                DerKind::Pv => b.pv.map_or(0.0, |p| p.p_max),
                DerKind::Bs => b.battery.map_or(0.0, |p| p.p_max),
                DerKind::Ev => b.ev.map_or(0.0, |e| e.p_max()),
                DerKind::Hp => b.hp.map_or(0.0, |h| h.p_max()),
            })
            .collect()
    }

    pub fn total_capacity(&self, kind: DerKind) -> f64 {
        self.capacity(kind).iter().sum()
    }

    /// Electrified homes (EV or HP) per bus.
    pub fn homes(&self, kind: DerKind) -> Vec<f64> {
        self.buses
            .iter()
            .map(|b| match kind {
                DerKind::Ev => b.ev.map_or(0.0, |e| e.count),
                DerKind::Hp => b.hp.map_or(0.0, |h| h.count),
                _ => 0.0,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn battery(delta: f64) -> BatteryParams {
        BatteryParams {
            p_max: 5.0,
            e_max: 13.5,
            eta: 0.95,
            delta,
            ..Default::default()
        }
    }

    #[test]
    fn soc_step_examples() {
        let b = battery(0.0);
        assert_eq!(battery_soc_step(&b, 0.5, 0.0, 0.0, 0.25).unwrap(), 0.5);
        assert_abs_diff_eq!(
            battery_soc_step(&battery(0.001), 0.5, 5.0, 0.0, 0.25).unwrap(),
            0.587463,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            battery_soc_step(&b, 0.5, 0.0, 5.0, 0.25).unwrap(),
            0.402534,
            epsilon = 1e-6
        );
        assert!(matches!(
            battery_soc_step(&b, 0.5, 1.0, 1.0, 0.25),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hp_step_examples() {
        let hp = HPParams::default();
        assert_eq!(hp_temp_step(&hp, 22.0, 22.0, 0.0, 0.25), 22.0);
        assert_abs_diff_eq!(hp.theta(0.25), 0.939413, epsilon = 1e-6);
        assert_abs_diff_eq!(hp_temp_step(&hp, 22.5, 32.0, -4.5, 0.25), 21.7124, epsilon = 1e-4);
        assert_abs_diff_eq!(hp_temp_step(&hp, 20.0, 5.0, -3.0, 0.25), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn pf_bounds_examples() {
        assert_eq!(pf_q_bounds(0.0, 0.9), (-0.0, 0.0));
        assert_eq!(pf_q_bounds(10.0, 1.0), (-0.0, 0.0));
        let (lo, hi) = pf_q_bounds(10.0, 0.9);
        assert_abs_diff_eq!(hi, 4.8432, epsilon = 1e-4);
        assert_abs_diff_eq!(lo, -4.8432, epsilon = 1e-4);
    }

    #[test]
    fn ev_window_is_closed() {
        let ev = EVParams::for_step(0.25);
        assert_eq!((ev.away_start, ev.away_end), (36, 68));
        assert!(!ev_available(&ev, 48));
        assert!(ev_available(&ev, 0));
        assert!(!ev_available(&ev, 36));
        assert!(!ev_available(&ev, 68));
        assert!(ev_available(&ev, 69));
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cycling_cost(&[3.0; 5], 1.0).unwrap(), 0.0);
        assert_eq!(cycling_cost(&[0.0, 1.0, 0.0], 1.0).unwrap(), 2.0);
        assert_eq!(cycling_cost(&[0.0, 2.0], 0.5).unwrap(), 2.0);
        assert!(cycling_cost(&[1.0], 1.0).is_err());
        assert_eq!(comfort_cost(&[22.5; 3], 22.5, 1.0), 0.0);
        assert_eq!(comfort_cost(&[21.5, 23.5], 22.5, 1.0), 2.0);
        assert_eq!(comfort_cost(&[10.0, 30.0], 22.5, 0.0), 0.0);
    }

    #[test]
    fn holding_power_is_fixed_point() {
        let hp = HPParams::default();
        for t_out in [5.0, 15.0, 22.5, 28.0, 32.0] {
            let p = hp.holding_power(t_out);
            let mode = HpMode::from_temperatures(t_out, hp.t_set);
            let next = hp_temp_step_mode(&hp, hp.t_set, t_out, p, 0.25, mode);
            assert_abs_diff_eq!(next, hp.t_set, epsilon = 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn lossless_battery_conserves_energy(
            soc in 0.0f64..1.0, pc in 0.0f64..5.0, dt in 0.05f64..1.0, eta in 0.5f64..1.0,
        ) {
            let b = BatteryParams { eta, delta: 0.0, ..battery(0.0) };
            let next = battery_soc_step(&b, soc, pc, 0.0, dt).unwrap();
            let lhs = b.e_max * (next - soc);
            proptest::prop_assert!((lhs - dt * pc * eta).abs() < 1e-12);
            let next = battery_soc_step(&b, soc, 0.0, pc, dt).unwrap();
            proptest::prop_assert!((b.e_max * (next - soc) + dt * pc / eta).abs() < 1e-12);
        }

        #[test]
        fn hp_step_contracts_towards_drive(
            t_in in 10.0f64..30.0, t_out in -5.0f64..40.0, p in -5.6f64..0.0, dt in 0.05f64..1.0,
        ) {
            let hp = HPParams::default();
            let mode = HpMode::from_temperatures(t_out, t_in);
            let drive = t_out + mode.sign() * hp.rho() * p;
            let next = hp_temp_step(&hp, t_in, t_out, p, dt);
            let lhs = (next - drive).abs();
            let rhs = hp.theta(dt) * (t_in - drive).abs();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn hp_iteration_converges(t_in in 10.0f64..30.0, t_out in -5.0f64..40.0, p in -5.6f64..0.0) {
            let hp = HPParams::default();
            let mode = HpMode::from_temperatures(t_out, t_in);
            let drive = t_out + mode.sign() * hp.rho() * p;
            let mut t = t_in;
            for _ in 0..2000 {
                t = hp_temp_step_mode(&hp, t, t_out, p, 0.25, mode);
            }
            proptest::prop_assert!((t - drive).abs() < 1e-9);
        }

        #[test]
        fn pf_bounds_symmetric_monotone(p in 0.0f64..100.0, dp in 0.0f64..10.0, pf in 0.1f64..1.0) {
            let (lo, hi) = pf_q_bounds(p, pf);
            proptest::prop_assert_eq!(lo, -hi);
            let (_, hi2) = pf_q_bounds(p + dp, pf);
            proptest::prop_assert!(hi2 >= hi);
        }

        #[test]
        fn costs_nonnegative_and_linear(
            series in proptest::collection::vec(-10.0f64..10.0, 2..20), w in 0.0f64..5.0,
        ) {
            let c1 = cycling_cost(&series, 1.0).unwrap();
            let cw = cycling_cost(&series, w).unwrap();
            proptest::prop_assert!(c1 >= 0.0);
            proptest::prop_assert!((cw - w * c1).abs() <= 1e-9 * (1.0 + cw.abs()));
            let k1 = comfort_cost(&series, 1.0, 1.0);
            proptest::prop_assert!(k1 >= 0.0);
            proptest::prop_assert!((comfort_cost(&series, 1.0, w) - w * k1).abs() <= 1e-9 * (1.0 + k1));
        }
    }
}
