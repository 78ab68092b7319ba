//! Where instances go. Pure functions of the definition, the cluster's
//! current footprint and the capacity reports.
//!
//! A cloud's free capacity is reported per offering triple; mixing triples on
//! one cloud is accounted fractionally, so `k` instances of triple `T`
//! consume `k / slots(T)` of the cloud and a cloud is full at 1.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::cloud::CapacityReport;
use crate::cluster::{
    dependency_closure_fixed, deployment_order, teardown_candidates, ClusterDefinition, OfferingTriple,
};
use crate::error::{Error, Result};
use crate::ids::InstanceId;
use crate::store::{Instance, InstanceRole, InstanceState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub cloud_id: String,
    pub service: String,
    pub count: u32,
    pub role: InstanceRole,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub steps: Vec<PlanStep>,
}

impl PlacementPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Instances of `service` the plan puts on `cloud_id`, all roles.
    pub fn count_on(&self, cloud_id: &str, service: &str) -> u32 {
        self.steps
            .iter()
            .filter(|s| s.cloud_id == cloud_id && s.service == service)
            .map(|s| s.count)
            .sum()
    }

    pub fn total(&self) -> u32 {
        self.steps.iter().map(|s| s.count).sum()
    }

    fn push(&mut self, cloud_id: &str, service: &str, count: u32, role: InstanceRole) {
        if count > 0 {
            self.steps.push(PlanStep {
                cloud_id: cloud_id.to_owned(),
                service: service.to_owned(),
                count,
                role,
            });
        }
    }
}

/// Live instance counts of one cluster: cloud id, then service name.
pub type Footprint = BTreeMap<String, BTreeMap<String, u32>>;

pub fn footprint(instances: &[Instance]) -> Footprint {
    let mut fp = Footprint::new();
    for inst in instances.iter().filter(|i| i.is_live()) {
        if let Some(cloud) = &inst.cloud_id {
            *fp.entry(cloud.clone())
                .or_default()
                .entry(inst.service_name.clone())
                .or_default() += 1;
        }
    }
    fp
}

fn hosts(fp: &Footprint, cloud: &str, service: &str) -> bool {
    fp.get(cloud).and_then(|m| m.get(service)).is_some_and(|n| *n > 0)
}

fn add(fp: &mut Footprint, cloud: &str, service: &str, n: u32) {
    *fp.entry(cloud.to_owned())
        .or_default()
        .entry(service.to_owned())
        .or_default() += n;
}

type Demand = Vec<(OfferingTriple, u32)>;

/// One cloud's reported slots and what this plan has already used of them.
#[derive(Debug, Clone)]
struct Room {
    cloud_id: String,
    slots: BTreeMap<OfferingTriple, u32>,
    used: BTreeMap<OfferingTriple, u32>,
}

impl Room {
    /// Fraction of the cloud used after adding `extra`, `None` when some
    /// triple in use has no slots at all.
    fn load_with(&self, extra: &[(OfferingTriple, u32)]) -> Option<BigRational> {
        let mut want = self.used.clone();
        for (t, n) in extra {
            *want.entry(t.clone()).or_default() += n;
        }
        let mut load = BigRational::zero();
        for (t, n) in want.into_iter().filter(|(_, n)| *n > 0) {
            let slots = self.slots.get(&t).copied().unwrap_or(0);
            if slots == 0 {
                return None;
            }
            load += BigRational::new(BigInt::from(n), BigInt::from(slots));
        }
        Some(load)
    }

    fn fits(&self, extra: &[(OfferingTriple, u32)]) -> bool {
        self.load_with(extra).is_some_and(|l| l <= BigRational::one())
    }

    /// Largest `k` such that `prefix` plus `k` of `triple` still fits.
    fn max_additional(&self, prefix: &[(OfferingTriple, u32)], triple: &OfferingTriple) -> u32 {
        let Some(load) = self.load_with(prefix) else { return 0 };
        let slots = self.slots.get(triple).copied().unwrap_or(0);
        if slots == 0 || load > BigRational::one() {
            return 0;
        }
        let room = (BigRational::one() - load) * BigRational::from_integer(BigInt::from(slots));
        room.floor().to_integer().to_u32().unwrap_or(u32::MAX)
    }

    fn take(&mut self, triple: &OfferingTriple, n: u32) {
        *self.used.entry(triple.clone()).or_default() += n;
    }
}

fn rooms(reports: &[CapacityReport]) -> Vec<Room> {
    let mut by_id: BTreeMap<String, Room> = BTreeMap::new();
    for r in reports {
        by_id.entry(r.cloud_id.clone()).or_insert_with(|| Room {
            cloud_id: r.cloud_id.clone(),
            slots: r.free_slots.clone(),
            used: BTreeMap::new(),
        });
    }
    by_id.into_values().collect()
}

fn triple_of(def: &ClusterDefinition, service: &str) -> Result<OfferingTriple> {
    def.service(service)
        .and_then(|s| s.triple())
        .ok_or_else(|| Error::Internal(format!("service {service} has no offering triple")))
}

/// Places `demand` (service, count pairs in deployment order) next to an
/// existing footprint.
///
/// With nothing deployed yet, a single cloud that fits the whole demand is
/// used, the fullest such cloud first. Otherwise the fixed services share
/// one cloud and scalable services fill clouds by [`place_scalable`].
pub fn plan_fill(
    def: &ClusterDefinition,
    demand: &[(String, u32)],
    existing: &Footprint,
    reports: &[CapacityReport],
) -> Result<PlacementPlan> {
    let order = deployment_order(def)?;
    let mut wanted: Vec<(String, u32)> = Vec::new();
    for name in &order {
        let n: u32 = demand.iter().filter(|(s, _)| s == name).map(|(_, n)| n).sum();
        if n > 0 {
            wanted.push((name.clone(), n));
        }
    }
    for (s, _) in demand {
        if def.service(s).is_none() {
            return Err(Error::NotFound(format!("service {s}")));
        }
    }
    let mut plan = PlacementPlan::default();
    if wanted.is_empty() {
        return Ok(plan);
    }
    let mut rooms = rooms(reports);
    let all: Demand = wanted
        .iter()
        .map(|(s, n)| Ok((triple_of(def, s)?, *n)))
        .collect::<Result<_>>()?;

    let nothing_live = existing.values().all(|m| m.values().all(|n| *n == 0));
    if nothing_live {
        let mut best: Option<(BigRational, usize)> = None;
        for (i, room) in rooms.iter().enumerate() {
            if let Some(load) = room.load_with(&all).filter(|l| *l <= BigRational::one()) {
                if best.as_ref().is_none_or(|(b, _)| load > *b) {
                    best = Some((load, i));
                }
            }
        }
        if let Some((_, i)) = best {
            for (s, n) in &wanted {
                plan.push(&rooms[i].cloud_id, s, *n, InstanceRole::Original);
            }
            return Ok(plan);
        }
    }

    let mut fp = existing.clone();
    let fixed: Vec<(String, u32)> = wanted
        .iter()
        .filter(|(s, _)| def.service(s).is_some_and(|x| x.is_fixed()))
        .cloned()
        .collect();
    if !fixed.is_empty() {
        let need: Demand = fixed
            .iter()
            .map(|(s, n)| Ok((triple_of(def, s)?, *n)))
            .collect::<Result<_>>()?;
        let best = rooms
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.load_with(&need).filter(|l| *l <= BigRational::one()).map(|l| (i, l)))
            .min_by(|(ia, la), (ib, lb)| {
                let used_a = fp.contains_key(&rooms[*ia].cloud_id);
                let used_b = fp.contains_key(&rooms[*ib].cloud_id);
                used_b.cmp(&used_a).then_with(|| la.cmp(lb)).then_with(|| ia.cmp(ib))
            })
            .map(|(i, _)| i)
            .ok_or_else(|| Error::InsufficientCapacity("fixed services fit on no single cloud".into()))?;
        for (s, n) in &fixed {
            let t = triple_of(def, s)?;
            rooms[best].take(&t, *n);
            add(&mut fp, &rooms[best].cloud_id, s, *n);
            plan.push(&rooms[best].cloud_id, s, *n, InstanceRole::Original);
        }
    }
    for (s, n) in wanted.iter().filter(|(s, _)| def.service(s).is_some_and(|x| !x.is_fixed())) {
        place_scalable(def, s, *n, &order, &mut fp, &mut rooms, &mut plan)?;
    }
    Ok(plan)
}

/// Spreads `n` instances of a scalable service over the clouds.
///
/// Each round picks the cloud needing the fewest replica instances of the
/// service's fixed dependencies, then the one taking the most instances,
/// then the lowest cloud id. Missing dependencies are placed there as
/// replicas first and count against the cloud's capacity.
/// (replica cost, more slots first, cloud index, replicas needed there)
type Candidate = (u32, Reverse<u32>, usize, Vec<(String, u32)>);

fn place_scalable(
    def: &ClusterDefinition,
    service: &str,
    mut n: u32,
    order: &[String],
    fp: &mut Footprint,
    rooms: &mut [Room],
    plan: &mut PlacementPlan,
) -> Result<()> {
    let closure = dependency_closure_fixed(def, service);
    let deps: Vec<&String> = order.iter().filter(|s| closure.contains(*s)).collect();
    let triple = triple_of(def, service)?;
    while n > 0 {
        let mut best: Option<Candidate> = None;
        for (i, room) in rooms.iter().enumerate() {
            let missing: Vec<(String, u32)> = deps
                .iter()
                .filter(|d| !hosts(fp, &room.cloud_id, d))
                .map(|d| (d.to_string(), def.service(d).map_or(1, |x| x.count)))
                .collect();
            let replicas: Demand = missing
                .iter()
                .map(|(d, k)| Ok((triple_of(def, d)?, *k)))
                .collect::<Result<_>>()?;
            if !room.fits(&replicas) {
                continue;
            }
            let k = room.max_additional(&replicas, &triple);
            if k == 0 {
                continue;
            }
            let cost: u32 = missing.iter().map(|(_, k)| k).sum();
            let key = (cost, Reverse(k), i);
            if best.as_ref().is_none_or(|(c, r, j, _)| key < (*c, *r, *j)) {
                best = Some((cost, Reverse(k), i, missing));
            }
        }
        let Some((_, Reverse(k), i, missing)) = best else {
            return Err(Error::InsufficientCapacity(format!("{n} more {service} fit nowhere")));
        };
        let cloud = rooms[i].cloud_id.clone();
        for (d, count) in &missing {
            rooms[i].take(&triple_of(def, d)?, *count);
            add(fp, &cloud, d, *count);
            plan.push(&cloud, d, *count, InstanceRole::Replica);
        }
        let take = k.min(n);
        rooms[i].take(&triple, take);
        add(fp, &cloud, service, take);
        plan.push(&cloud, service, take, InstanceRole::Original);
        n -= take;
    }
    Ok(())
}

/// Every fixed instance and the minimum of every scalable service.
pub fn plan_create(def: &ClusterDefinition, reports: &[CapacityReport]) -> Result<PlacementPlan> {
    let demand: Vec<(String, u32)> = def.services.iter().map(|s| (s.name.clone(), s.count)).collect();
    plan_fill(def, &demand, &Footprint::new(), reports)
}

/// Instances to destroy when shrinking a service.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShrinkPlan {
    /// Newest first.
    pub destroy: Vec<InstanceId>,
    /// Replica fixed instances left without dependents, dependents first.
    pub teardown: Vec<InstanceId>,
}

impl ShrinkPlan {
    pub fn is_empty(&self) -> bool {
        self.destroy.is_empty() && self.teardown.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "direction", rename_all = "lowercase")]
pub enum ScalePlan {
    Grow(PlacementPlan),
    Shrink(ShrinkPlan),
}

/// Adds or removes `delta` instances of a scalable service.
pub fn plan_scale(
    def: &ClusterDefinition,
    service: &str,
    delta: i64,
    instances: &[Instance],
    reports: &[CapacityReport],
) -> Result<ScalePlan> {
    let spec = def
        .service(service)
        .ok_or_else(|| Error::NotFound(format!("service {service}")))?;
    if spec.is_fixed() {
        return Err(Error::NotScalable(service.to_owned()));
    }
    let magnitude = u32::try_from(delta.unsigned_abs()).map_err(|_| Error::BadTarget(delta.to_string()))?;
    if delta >= 0 {
        let demand = [(service.to_owned(), magnitude)];
        plan_fill(def, &demand, &footprint(instances), reports).map(ScalePlan::Grow)
    } else {
        Ok(ScalePlan::Shrink(plan_shrink(def, service, magnitude, instances)))
    }
}

fn destroyable(state: InstanceState) -> bool {
    matches!(state, InstanceState::Running | InstanceState::Paused)
}

/// The `count` newest running or paused instances of `service`, then the
/// replica teardown that leaves behind.
pub fn plan_shrink(def: &ClusterDefinition, service: &str, count: u32, instances: &[Instance]) -> ShrinkPlan {
    let mut victims: Vec<&Instance> = instances
        .iter()
        .filter(|i| i.service_name == service && destroyable(i.state))
        .collect();
    victims.sort_by_key(|i| Reverse((i.created_at, i.seq)));
    let destroy: Vec<InstanceId> = victims.into_iter().take(count as usize).map(|i| i.id.clone()).collect();
    let teardown = replica_teardown(def, instances, &destroy);
    ShrinkPlan { destroy, teardown }
}

/// Replica fixed instances that become unused once `gone` are destroyed,
/// found round by round so a replica chain unwinds from the top.
pub fn replica_teardown(def: &ClusterDefinition, instances: &[Instance], gone: &[InstanceId]) -> Vec<InstanceId> {
    let mut view: Vec<Instance> = instances.to_vec();
    let mark = |view: &mut Vec<Instance>, id: &InstanceId| {
        if let Some(i) = view.iter_mut().find(|i| &i.id == id) {
            i.state = InstanceState::Destroyed;
        }
    };
    for id in gone {
        mark(&mut view, id);
    }
    let mut out = Vec::new();
    loop {
        let round: Vec<InstanceId> = teardown_candidates(def, &view)
            .into_iter()
            .filter(|id| {
                view.iter()
                    .any(|i| &i.id == id && i.role == InstanceRole::Replica && destroyable(i.state))
            })
            .collect();
        if round.is_empty() {
            return out;
        }
        for id in &round {
            mark(&mut view, id);
        }
        out.extend(round);
    }
}
