//! Radial feeder model, per-unit system and topology orderings.
//!
//! Buses and branches are stored in file order; `from`/`to` on a branch are
//! bus indices (not file ids). Branch orientation in the file is not trusted:
//! [`TopologyOrder`] re-orients every branch so that flow variables are
//! defined from the upstream (slack-side) bus to the downstream bus.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VM_MIN: f64 = 0.95;
pub const DEFAULT_VM_MAX: f64 = 1.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// Identifier used in input files.
    pub id: i64,
    pub name: String,
    /// Nominal active load (kW).
    pub nominal_load_p: f64,
    /// Nominal reactive load (kvar).
    pub nominal_load_q: f64,
    /// Voltage magnitude bounds (pu). The squared bounds used by the
    /// power-flow model come from [`Bus::v_min`] and [`Bus::v_max`].
    pub vm_min: f64,
    pub vm_max: f64,
    pub houses: u32,
    pub is_slack: bool,
    /// Optional net-injection bounds (kW / kvar).
    pub p_bounds: Option<(f64, f64)>,
    pub q_bounds: Option<(f64, f64)>,
}

impl Bus {
    /// Lower bound on squared voltage magnitude (pu²).
    pub fn v_min(&self) -> f64 {
        self.vm_min * self.vm_min
    }

    /// Upper bound on squared voltage magnitude (pu²).
    pub fn v_max(&self) -> f64 {
        self.vm_max * self.vm_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Apparent power limit (pu).
    pub s_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PccLimits {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub base_kva: f64,
    pub base_kv: f64,
    /// Substation transformer rating (pu).
    pub s_tran: f64,
    pub pcc: PccLimits,
    /// Slack voltage magnitude (pu).
    pub v_slack: f64,
    slack: usize,
}

impl Network {
    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.base_kva
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.base_kva
    }

    pub fn total_houses(&self) -> u32 {
        self.buses.iter().map(|b| b.houses).sum()
    }

    /// Sum of nominal nodal loads (kW).
    pub fn total_nominal_load(&self) -> f64 {
        self.buses.iter().map(|b| b.nominal_load_p).sum()
    }

    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Builds and validates a network from in-memory parts.
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        base_kva: f64,
        base_kv: f64,
        s_tran: f64,
        pcc: PccLimits,
        v_slack: f64,
    ) -> Result<Self> {
        let slack = validate(&buses, &branches, base_kva, s_tran, v_slack)?;
        Ok(Network {
            buses,
            branches,
            base_kva,
            base_kv,
            s_tran,
            pcc,
            v_slack,
            slack,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        file.into_network()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkFile::from(self))?)
    }

    pub fn topology(&self) -> TopologyOrder {
        topology_order(self)
    }
}

/// Reads a network description from a JSON file.
pub fn parse_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_json_str(&text)
}

fn validate(
    buses: &[Bus],
    branches: &[Branch],
    base_kva: f64,
    s_tran: f64,
    v_slack: f64,
) -> Result<usize> {
    if buses.is_empty() {
        return Err(Error::Validation("network has no buses".into()));
    }
    if !(base_kva.is_finite() && base_kva > 0.0) {
        return Err(Error::Validation(format!("base_kva must be positive, got {base_kva}")));
    }
    if !(s_tran.is_finite() && s_tran > 0.0) {
        return Err(Error::Validation(format!("s_tran must be positive, got {s_tran}")));
    }
    if !(v_slack.is_finite() && v_slack > 0.0) {
        return Err(Error::Validation(format!("slack voltage must be positive, got {v_slack}")));
    }

    let mut seen = HashMap::new();
    for (k, b) in buses.iter().enumerate() {
        if let Some(prev) = seen.insert(b.id, k) {
            return Err(Error::Validation(format!(
                "duplicate bus id {} (entries {prev} and {k})",
                b.id
            )));
        }
        let finite = [b.nominal_load_p, b.nominal_load_q, b.vm_min, b.vm_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation(format!("bus {} has non-finite fields", b.id)));
        }
        if b.vm_min <= 0.0 || b.vm_min >= b.vm_max {
            return Err(Error::Validation(format!(
                "bus {}: voltage bounds must satisfy 0 < v_min < v_max (got {}, {})",
                b.id, b.vm_min, b.vm_max
            )));
        }
    }
    let slacks: Vec<usize> = buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_slack)
        .map(|(k, _)| k)
        .collect();
    let slack = match slacks.as_slice() {
        [s] => *s,
        [] => return Err(Error::Validation("no slack bus".into())),
        _ => {
            return Err(Error::Validation(format!(
                "multiple slack buses: {:?}",
                slacks.iter().map(|&k| buses[k].id).collect::<Vec<_>>()
            )))
        }
    };

    // union-find for cycle detection
    let mut parent: Vec<usize> = (0..buses.len()).collect();
    fn find(p: &mut [usize], mut a: usize) -> usize {
        while p[a] != a {
            p[a] = p[p[a]];
            a = p[a];
        }
        a
    }
    for (k, br) in branches.iter().enumerate() {
        let name = || {
            format!(
                "branch {k} ({} -> {})",
                buses.get(br.from).map(|b| b.id).unwrap_or(-1),
                buses.get(br.to).map(|b| b.id).unwrap_or(-1)
            )
        };
        if br.from >= buses.len() || br.to >= buses.len() {
            return Err(Error::Validation(format!("{k}: branch references unknown bus")));
        }
        if br.from == br.to {
            return Err(Error::Validation(format!("{}: self loop", name())));
        }
        if !(br.r.is_finite() && br.x.is_finite() && br.s_max.is_finite()) {
            return Err(Error::Validation(format!("{}: non-finite impedance or rating", name())));
        }
        if br.r < 0.0 {
            return Err(Error::Validation(format!("{}: negative resistance", name())));
        }
        if br.s_max <= 0.0 {
            return Err(Error::Validation(format!("{}: s_max must be positive", name())));
        }
        let (a, b) = (find(&mut parent, br.from), find(&mut parent, br.to));
        if a == b {
            return Err(Error::Validation(format!("{} closes a cycle", name())));
        }
        parent[a] = b;
    }
    if branches.len() + 1 != buses.len() {
        return Err(Error::Validation(format!(
            "network is not connected: {} buses but {} branches",
            buses.len(),
            branches.len()
        )));
    }
    Ok(slack)
}

/// Parent/child structure of the feeder rooted at the slack bus.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyOrder {
    /// Branch feeding each bus (`None` for the slack bus).
    pub parent: Vec<Option<usize>>,
    /// Branches leaving each bus towards the leaves.
    pub children: Vec<Vec<usize>>,
    /// Buses in breadth-first order from the slack bus.
    pub order: Vec<usize>,
    /// Upstream bus of each branch.
    pub upstream: Vec<usize>,
    /// Downstream bus of each branch.
    pub downstream: Vec<usize>,
    pub depth: Vec<usize>,
}

pub fn topology_order(net: &Network) -> TopologyOrder {
    let n = net.n_buses();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, br) in net.branches.iter().enumerate() {
        adj[br.from].push((br.to, k));
        adj[br.to].push((br.from, k));
    }
    let mut parent = vec![None; n];
    let mut children = vec![Vec::new(); n];
    let mut upstream = vec![0; net.n_branches()];
    let mut downstream = vec![0; net.n_branches()];
    let mut depth = vec![0; n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([net.slack()]);
    visited[net.slack()] = true;
    while let Some(bus) = queue.pop_front() {
        order.push(bus);
        for &(next, k) in &adj[bus] {
            if visited[next] {
                continue;
            }
            visited[next] = true;
            parent[next] = Some(k);
            children[bus].push(k);
            upstream[k] = bus;
            downstream[k] = next;
            depth[next] = depth[bus] + 1;
            queue.push_back(next);
        }
    }
    TopologyOrder {
        parent,
        children,
        order,
        upstream,
        downstream,
        depth,
    }
}

/// Peak of the summed nodal active load over time (kW).
///
/// `profiles[bus][t]` holds the consumption of each bus in kW.
pub fn feeder_peak_load(net: &Network, profiles: &[Vec<f64>]) -> Result<f64> {
    if profiles.len() != net.n_buses() {
        return Err(Error::MissingProfile(format!(
            "expected {} bus load profiles, got {}",
            net.n_buses(),
            profiles.len()
        )));
    }
    let steps = profiles.first().map(Vec::len).unwrap_or(0);
    if steps == 0 {
        return Err(Error::MissingProfile("load profiles are empty".into()));
    }
    if let Some(k) = profiles.iter().position(|p| p.len() != steps) {
        return Err(Error::MissingProfile(format!(
            "bus {} profile has {} steps, expected {steps}",
            net.buses[k].id,
            profiles[k].len()
        )));
    }
    Ok((0..steps)
        .map(|t| profiles.iter().map(|p| p[t]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max))
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    base_kva: f64,
    base_kv: f64,
    s_tran: f64,
    pcc: PccFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_slack_pu: Option<f64>,
    buses: Vec<BusFile>,
    branches: Vec<BranchFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PccFile {
    p_min: f64,
    p_max: f64,
    q_min: f64,
    q_max: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusFile {
    id: i64,
    #[serde(default)]
    name: String,
    #[serde(default)]
    load_p_kw: f64,
    #[serde(default)]
    load_q_kvar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_min_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_max_pu: Option<f64>,
    #[serde(default)]
    houses: u32,
    #[serde(default)]
    slack: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_min_kw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_max_kw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_min_kvar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_max_kvar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phases: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchFile {
    from: i64,
    to: i64,
    r_pu: f64,
    x_pu: f64,
    s_max_pu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phases: Option<String>,
}

fn check_phases(phases: &Option<String>, what: impl FnOnce() -> String) -> Result<()> {
    match phases.as_deref() {
        None => Ok(()),
        Some(p) if p.eq_ignore_ascii_case("abc") || p.eq_ignore_ascii_case("balanced") => Ok(()),
        Some(p) => Err(Error::Unbalanced(format!("{} has phases `{p}`", what()))),
    }
}

fn pair(lo: Option<f64>, hi: Option<f64>) -> Option<(f64, f64)> {
    match (lo, hi) {
        (None, None) => None,
        (lo, hi) => Some((lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))),
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl NetworkFile {
    fn into_network(self) -> Result<Network> {
        let mut index = HashMap::new();
        let mut buses = Vec::with_capacity(self.buses.len());
        for (k, b) in self.buses.into_iter().enumerate() {
            check_phases(&b.phases, || format!("bus {}", b.id))?;
            if index.insert(b.id, k).is_some() {
                return Err(Error::Validation(format!("duplicate bus id {}", b.id)));
            }
            buses.push(Bus {
                id: b.id,
                name: b.name,
                nominal_load_p: b.load_p_kw,
                nominal_load_q: b.load_q_kvar,
                vm_min: b.v_min_pu.unwrap_or(DEFAULT_VM_MIN),
                vm_max: b.v_max_pu.unwrap_or(DEFAULT_VM_MAX),
                houses: b.houses,
                is_slack: b.slack,
                p_bounds: pair(b.p_min_kw, b.p_max_kw),
                q_bounds: pair(b.q_min_kvar, b.q_max_kvar),
            });
        }
        let mut branches = Vec::with_capacity(self.branches.len());
        for (k, br) in self.branches.into_iter().enumerate() {
            check_phases(&br.phases, || format!("branch {k}"))?;
            let lookup = |id: i64| {
                index.get(&id).copied().ok_or_else(|| {
                    Error::Validation(format!("branch {k} references unknown bus {id}"))
                })
            };
            branches.push(Branch {
                from: lookup(br.from)?,
                to: lookup(br.to)?,
                r: br.r_pu,
                x: br.x_pu,
                s_max: br.s_max_pu,
            });
        }
        Network::new(
            buses,
            branches,
            self.base_kva,
            self.base_kv,
            self.s_tran,
            PccLimits {
                p_min: self.pcc.p_min,
                p_max: self.pcc.p_max,
                q_min: self.pcc.q_min,
                q_max: self.pcc.q_max,
            },
            self.v_slack_pu.unwrap_or(1.0),
        )
    }
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        NetworkFile {
            base_kva: net.base_kva,
            base_kv: net.base_kv,
            s_tran: net.s_tran,
            pcc: PccFile {
                p_min: net.pcc.p_min,
                p_max: net.pcc.p_max,
                q_min: net.pcc.q_min,
                q_max: net.pcc.q_max,
            },
            v_slack_pu: (net.v_slack != 1.0).then_some(net.v_slack),
            buses: net
                .buses
                .iter()
                .map(|b| BusFile {
                    id: b.id,
                    name: b.name.clone(),
                    load_p_kw: b.nominal_load_p,
                    load_q_kvar: b.nominal_load_q,
                    v_min_pu: Some(b.vm_min),
                    v_max_pu: Some(b.vm_max),
                    houses: b.houses,
                    slack: b.is_slack,
                    p_min_kw: b.p_bounds.and_then(|p| finite_or_none(p.0)),
                    p_max_kw: b.p_bounds.and_then(|p| finite_or_none(p.1)),
                    q_min_kvar: b.q_bounds.and_then(|q| finite_or_none(q.0)),
                    q_max_kvar: b.q_bounds.and_then(|q| finite_or_none(q.1)),
                    phases: None,
                })
                .collect(),
            branches: net
                .branches
                .iter()
                .map(|br| BranchFile {
                    from: net.buses[br.from].id,
                    to: net.buses[br.to].id,
                    r_pu: br.r,
                    x_pu: br.x,
                    s_max_pu: br.s_max,
                    phases: None,
                })
                .collect(),
        }
    }
}
