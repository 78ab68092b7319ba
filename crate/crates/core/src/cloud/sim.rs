//! A deterministic in-process cloud. Instances become RUNNING a fixed
//! latency after start, measured on the injected clock, and faults are
//! scripted by operation number.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::driver::{CloudDriver, DriverState, Resources};
use super::LocalFlavor;
use crate::clock::{SharedClock, Timestamp};
use crate::error::{Error, Result};

/// Credentials a real driver would hold. The simulated driver only keeps
/// them so tests can prove they never leave the agent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DriverCredentials {
    pub endpoint: String,
    pub access_key: String,
    pub secret_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub total_cpus: u32,
    pub total_memory_mb: u64,
    pub flavors: BTreeMap<String, Resources>,
    #[serde(default)]
    pub start_latency_ms: u64,
    /// 1-based numbers of mutating calls (start, pause, resume, destroy)
    /// that fail.
    #[serde(default)]
    pub failure_script: BTreeSet<u64>,
    #[serde(default)]
    pub credentials: DriverCredentials,
}

impl SimConfig {
    /// A cloud with room for exactly `slots` instances of a 1-cpu, 1 GiB
    /// flavor named `flavor`.
    pub fn uniform(slots: u32, flavor: &str) -> Self {
        Self {
            total_cpus: slots,
            total_memory_mb: u64::from(slots) * 1024,
            flavors: BTreeMap::from([(
                flavor.to_owned(),
                Resources {
                    cpus: 1,
                    memory_mb: 1024,
                },
            )]),
            start_latency_ms: 0,
            failure_script: BTreeSet::new(),
            credentials: DriverCredentials::default(),
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.start_latency_ms = latency.as_millis() as u64;
        self
    }

    pub fn failing_at(mut self, ops: impl IntoIterator<Item = u64>) -> Self {
        self.failure_script.extend(ops);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SimOp {
    Start,
    Pause,
    Resume,
    Destroy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub seq: u64,
    pub at: Timestamp,
    pub op: SimOp,
    pub driver_ref: Option<String>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimInstance {
    pub driver_ref: String,
    pub template: String,
    pub flavor: LocalFlavor,
    pub resources: Resources,
    pub user_data: String,
    pub started_at: Timestamp,
    pub ready_at: Timestamp,
    paused: bool,
    destroyed: bool,
}

impl SimInstance {
    fn state(&self, now: Timestamp) -> DriverState {
        if self.destroyed {
            DriverState::Destroyed
        } else if self.paused {
            DriverState::Paused
        } else if now < self.ready_at {
            DriverState::Starting
        } else {
            DriverState::Running
        }
    }
}

#[derive(Debug, Default)]
struct SimState {
    ops: u64,
    next_id: u64,
    instances: BTreeMap<String, SimInstance>,
    events: Vec<SimEvent>,
    held: Resources,
}

pub struct SimulatedCloud {
    config: SimConfig,
    clock: SharedClock,
    state: Mutex<SimState>,
}

impl std::fmt::Debug for SimulatedCloud {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedCloud")
            .field("total_cpus", &self.config.total_cpus)
            .field("total_memory_mb", &self.config.total_memory_mb)
            .finish_non_exhaustive()
    }
}

impl SimulatedCloud {
    pub fn new(config: SimConfig, clock: SharedClock) -> Self {
        Self {
            config,
            clock,
            state: Mutex::new(SimState::default()),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn events(&self) -> Vec<SimEvent> {
        self.state.lock().events.clone()
    }

    pub fn instances(&self) -> Vec<SimInstance> {
        self.state.lock().instances.values().cloned().collect()
    }

    pub fn instance(&self, driver_ref: &str) -> Option<SimInstance> {
        self.state.lock().instances.get(driver_ref).cloned()
    }

    pub fn live_count(&self) -> usize {
        self.state.lock().instances.values().filter(|i| !i.destroyed).count()
    }

    pub fn held(&self) -> Resources {
        self.state.lock().held
    }

    pub fn free(&self) -> Resources {
        let held = self.held();
        Resources {
            cpus: self.config.total_cpus - held.cpus,
            memory_mb: self.config.total_memory_mb - held.memory_mb,
        }
    }

    /// Counts the call and consults the failure script.
    fn next_op(&self, st: &mut SimState, op: SimOp, driver_ref: Option<&str>) -> Result<u64> {
        st.ops += 1;
        let seq = st.ops;
        if self.config.failure_script.contains(&seq) {
            st.events.push(SimEvent {
                seq,
                at: self.clock.now(),
                op,
                driver_ref: driver_ref.map(str::to_owned),
                ok: false,
            });
            return Err(Error::DriverFailure(format!("scripted failure at operation {seq}")));
        }
        Ok(seq)
    }

    fn record(&self, st: &mut SimState, seq: u64, op: SimOp, driver_ref: &str) {
        st.events.push(SimEvent {
            seq,
            at: self.clock.now(),
            op,
            driver_ref: Some(driver_ref.to_owned()),
            ok: true,
        });
    }

    fn fits(&self, held: Resources, need: Resources) -> u32 {
        let free_cpus = self.config.total_cpus - held.cpus;
        let free_mem = self.config.total_memory_mb - held.memory_mb;
        let by_cpu = free_cpus.checked_div(need.cpus).unwrap_or(u32::MAX);
        let by_mem = free_mem.checked_div(need.memory_mb).unwrap_or(u64::MAX);
        by_cpu.min(by_mem.min(u64::from(u32::MAX)) as u32)
    }
}

impl CloudDriver for SimulatedCloud {
    fn start(&self, template: &str, flavor: &LocalFlavor, user_data: &str) -> Result<String> {
        let mut st = self.state.lock();
        let seq = self.next_op(&mut st, SimOp::Start, None)?;
        let fail = |st: &mut SimState, why: String| {
            st.events.push(SimEvent {
                seq,
                at: self.clock.now(),
                op: SimOp::Start,
                driver_ref: None,
                ok: false,
            });
            Err(Error::DriverFailure(why))
        };
        let Some(&need) = self.config.flavors.get(&flavor.compute) else {
            return fail(&mut st, format!("no flavor {}", flavor.compute));
        };
        if self.fits(st.held, need) == 0 {
            return fail(&mut st, "cloud is full".into());
        }
        st.next_id += 1;
        let driver_ref = format!("vm-{:06}", st.next_id);
        let now = self.clock.now();
        st.held.cpus += need.cpus;
        st.held.memory_mb += need.memory_mb;
        st.instances.insert(
            driver_ref.clone(),
            SimInstance {
                driver_ref: driver_ref.clone(),
                template: template.to_owned(),
                flavor: flavor.clone(),
                resources: need,
                user_data: user_data.to_owned(),
                started_at: now,
                ready_at: now + Duration::from_millis(self.config.start_latency_ms),
                paused: false,
                destroyed: false,
            },
        );
        self.record(&mut st, seq, SimOp::Start, &driver_ref);
        Ok(driver_ref)
    }

    fn pause(&self, driver_ref: &str) -> Result<()> {
        let mut st = self.state.lock();
        let now = self.clock.now();
        let state = st
            .instances
            .get(driver_ref)
            .map(|i| i.state(now))
            .ok_or_else(|| Error::UnknownRef(driver_ref.to_owned()))?;
        let seq = self.next_op(&mut st, SimOp::Pause, Some(driver_ref))?;
        match state {
            DriverState::Running => {}
            DriverState::Paused => return Ok(()),
            other => return Err(Error::DriverFailure(format!("cannot pause a {other:?} instance"))),
        }
        st.instances.get_mut(driver_ref).expect("checked").paused = true;
        self.record(&mut st, seq, SimOp::Pause, driver_ref);
        Ok(())
    }

    fn resume(&self, driver_ref: &str) -> Result<()> {
        let mut st = self.state.lock();
        let now = self.clock.now();
        let state = st
            .instances
            .get(driver_ref)
            .map(|i| i.state(now))
            .ok_or_else(|| Error::UnknownRef(driver_ref.to_owned()))?;
        let seq = self.next_op(&mut st, SimOp::Resume, Some(driver_ref))?;
        match state {
            DriverState::Paused => {}
            DriverState::Running => return Ok(()),
            other => return Err(Error::DriverFailure(format!("cannot resume a {other:?} instance"))),
        }
        st.instances.get_mut(driver_ref).expect("checked").paused = false;
        self.record(&mut st, seq, SimOp::Resume, driver_ref);
        Ok(())
    }

    fn destroy(&self, driver_ref: &str) -> Result<()> {
        let mut st = self.state.lock();
        let destroyed = st
            .instances
            .get(driver_ref)
            .map(|i| i.destroyed)
            .ok_or_else(|| Error::UnknownRef(driver_ref.to_owned()))?;
        if destroyed {
            return Ok(());
        }
        let seq = self.next_op(&mut st, SimOp::Destroy, Some(driver_ref))?;
        let inst = st.instances.get_mut(driver_ref).expect("checked");
        inst.destroyed = true;
        let freed = inst.resources;
        st.held.cpus -= freed.cpus;
        st.held.memory_mb -= freed.memory_mb;
        self.record(&mut st, seq, SimOp::Destroy, driver_ref);
        Ok(())
    }

    fn status(&self, driver_ref: &str) -> Result<DriverState> {
        let now = self.clock.now();
        self.state
            .lock()
            .instances
            .get(driver_ref)
            .map(|i| i.state(now))
            .ok_or_else(|| Error::UnknownRef(driver_ref.to_owned()))
    }

    fn capacity(&self, flavor: &LocalFlavor) -> Result<u32> {
        let Some(&need) = self.config.flavors.get(&flavor.compute) else {
            return Ok(0);
        };
        Ok(self.fits(self.state.lock().held, need))
    }

    fn flavor_resources(&self, compute: &str) -> Option<Resources> {
        self.config.flavors.get(compute).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use proptest::prelude::*;

    fn flavor() -> LocalFlavor {
        LocalFlavor {
            compute: "small".into(),
            disk: "d".into(),
            network: "n".into(),
        }
    }

    fn sim(cfg: SimConfig) -> (SimulatedCloud, ManualClock) {
        let clock = ManualClock::new(Timestamp(0));
        (SimulatedCloud::new(cfg, clock.shared()), clock)
    }

    #[test]
    fn running_after_latency() {
        let (s, clock) = sim(SimConfig::uniform(4, "small").with_latency(Duration::from_millis(500)));
        let r = s.start("tmpl", &flavor(), "ud").unwrap();
        assert_eq!(s.status(&r).unwrap(), DriverState::Starting);
        clock.advance(Duration::from_millis(499));
        assert_eq!(s.status(&r).unwrap(), DriverState::Starting);
        clock.advance(Duration::from_millis(1));
        assert_eq!(s.status(&r).unwrap(), DriverState::Running);
    }

    #[test]
    fn scripted_start_failure_holds_nothing() {
        let (s, _) = sim(SimConfig::uniform(4, "small").failing_at([1]));
        assert!(matches!(s.start("t", &flavor(), ""), Err(Error::DriverFailure(_))));
        assert_eq!(s.held(), Resources::default());
        assert_eq!(s.live_count(), 0);
        assert!(s.start("t", &flavor(), "").is_ok());
    }

    #[test]
    fn user_data_passes_through_untouched() {
        let (s, _) = sim(SimConfig::uniform(1, "small"));
        let text = "[amiconfig]\nplugins = cernvm\n\n[cernvm]\nusers=a:b\n\u{00e9}\r\n";
        let r = s.start("t", &flavor(), text).unwrap();
        assert_eq!(s.instance(&r).unwrap().user_data.as_bytes(), text.as_bytes());
    }

    #[test]
    fn destroy_is_idempotent_and_frees() {
        let (s, _) = sim(SimConfig::uniform(2, "small"));
        let r = s.start("t", &flavor(), "").unwrap();
        assert_eq!(s.capacity(&flavor()).unwrap(), 1);
        s.destroy(&r).unwrap();
        s.destroy(&r).unwrap();
        assert_eq!(s.capacity(&flavor()).unwrap(), 2);
        assert_eq!(s.status(&r).unwrap(), DriverState::Destroyed);
        assert!(matches!(s.destroy("vm-nope"), Err(Error::UnknownRef(_))));
    }

    #[test]
    fn pause_resume() {
        let (s, _) = sim(SimConfig::uniform(2, "small"));
        let r = s.start("t", &flavor(), "").unwrap();
        s.pause(&r).unwrap();
        assert_eq!(s.status(&r).unwrap(), DriverState::Paused);
        s.resume(&r).unwrap();
        assert_eq!(s.status(&r).unwrap(), DriverState::Running);
    }

    #[test]
    fn full_cloud_refuses() {
        let (s, _) = sim(SimConfig::uniform(1, "small"));
        s.start("t", &flavor(), "").unwrap();
        assert_eq!(s.capacity(&flavor()).unwrap(), 0);
        assert!(matches!(s.start("t", &flavor(), ""), Err(Error::DriverFailure(_))));
    }

    #[test]
    fn capacity_uses_tighter_dimension() {
        let mut cfg = SimConfig::uniform(8, "small");
        cfg.flavors.insert(
            "fat".into(),
            Resources {
                cpus: 1,
                memory_mb: 3000,
            },
        );
        let (s, _) = sim(cfg);
        let fat = LocalFlavor {
            compute: "fat".into(),
            ..flavor()
        };
        // 8 cpus but only 8192 MiB: two 3000 MiB instances
        assert_eq!(s.capacity(&fat).unwrap(), 2);
    }

    proptest! {
        /// Held plus free equals the totals after every call.
        #[test]
        fn resources_are_conserved(
            ops in proptest::collection::vec((0u8..4, 0usize..6), 1..40),
            fail_at in proptest::collection::btree_set(1u64..40, 0..6),
        ) {
            let clock = ManualClock::new(Timestamp(0));
            let s = SimulatedCloud::new(SimConfig::uniform(5, "small").failing_at(fail_at), clock.shared());
            let mut refs: Vec<String> = Vec::new();
            for (op, pick) in ops {
                let target = refs.get(pick % refs.len().max(1)).cloned();
                match (op, target) {
                    (0, _) => {
                        if let Ok(r) = s.start("t", &flavor(), "") {
                            refs.push(r);
                        }
                    }
                    (1, Some(r)) => { let _ = s.pause(&r); }
                    (2, Some(r)) => { let _ = s.resume(&r); }
                    (3, Some(r)) => { let _ = s.destroy(&r); }
                    _ => {}
                }
                let held = s.held();
                let free = s.free();
                prop_assert_eq!(held.cpus + free.cpus, 5);
                prop_assert_eq!(held.memory_mb + free.memory_mb, 5 * 1024);
                let live: u32 = s.instances().iter().filter(|i| s.status(&i.driver_ref).unwrap() != DriverState::Destroyed).map(|i| i.resources.cpus).sum();
                prop_assert_eq!(live, held.cpus);
            }
        }
    }
}
