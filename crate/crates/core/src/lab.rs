//! A whole deployment in one process: in-memory bus, simulated clouds with
//! their cloud agents, and gateway agents over a shared store. Used by the
//! demo command and by scenario tests.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::bus::{MemoryHub, Session};
use crate::clock::SharedClock;
use crate::cloud::sim::{SimConfig, SimulatedCloud};
use crate::cloud::{agent_bus_name, AclRule, CloudAgent, CloudDescriptor, Quotas};
use crate::cluster::{derive_dependencies, ClusterDefinition, OfferingTriple, ServiceSpec};
use crate::error::Result;
use crate::gateway::{AgentSettings, CloudClient, Orchestrator, Processed, RequestHandler, Worker, WorkerConfig};
use crate::ids::{DefinitionId, RequestId};
use crate::store::{Request, Store};

/// Global image id every lab cloud maps.
pub const IMAGE: &str = "cernvm-3";
/// Local flavor name of the standard offering.
pub const FLAVOR: &str = "small";

/// The offering triple every lab cloud maps.
pub fn standard_offerings() -> OfferingTriple {
    OfferingTriple::new("m1.small", "disk-20", "public")
}

/// A cloud descriptor mapping [`IMAGE`] and [`standard_offerings`].
pub fn standard_descriptor(cloud_id: &str, quotas: Quotas) -> CloudDescriptor {
    CloudDescriptor::new(cloud_id, quotas)
        .map_image(IMAGE, &format!("tmpl-{cloud_id}-cernvm"))
        .map_offering("m1.small", FLAVOR)
        .map_offering("disk-20", "disk20")
        .map_offering("public", "net-public")
}

/// The batch cluster of the overflow scenario: one head, `workers` workers.
pub fn head_workers(owner: &str, workers: u32) -> ClusterDefinition {
    let t = standard_offerings();
    ClusterDefinition {
        id: DefinitionId::random(),
        name: "batch".into(),
        owner: owner.into(),
        services: derive_dependencies(vec![
            ServiceSpec::fixed("head", 1).with_image(IMAGE).with_offerings(&t),
            ServiceSpec::scalable("worker", workers).with_image(IMAGE).with_offerings(&t),
        ])
        .expect("distinct names"),
    }
}

pub struct LabCloud {
    pub sim: Arc<SimulatedCloud>,
    pub agent: Arc<CloudAgent>,
    session: Option<Session>,
}

impl LabCloud {
    pub fn is_up(&self) -> bool {
        self.session.is_some()
    }
}

pub struct Lab {
    pub hub: MemoryHub,
    pub store: Store,
    clock: SharedClock,
    clouds: BTreeMap<String, LabCloud>,
    gateway: Arc<Session>,
    settings: AgentSettings,
}

impl Lab {
    pub fn new(store: Store) -> Result<Self> {
        let settings = AgentSettings {
            bus_timeout: Duration::from_secs(5),
            readiness_timeout: Duration::from_secs(30),
            readiness_poll: Duration::from_millis(2),
            replan_limit: 1,
        };
        Self::with_settings(store, settings)
    }

    pub fn with_settings(store: Store, settings: AgentSettings) -> Result<Self> {
        let clock = store.clock().clone();
        let hub = MemoryHub::new(clock.clone());
        let gateway = Arc::new(hub.connect("gateway")?);
        Ok(Self {
            hub,
            store,
            clock,
            clouds: BTreeMap::new(),
            gateway,
            settings,
        })
    }

    /// A simulated cloud with room for `slots` standard instances.
    pub fn add_standard_cloud(&mut self, cloud_id: &str, slots: u32) -> Result<&LabCloud> {
        self.add_cloud(
            standard_descriptor(cloud_id, Quotas::unlimited()),
            SimConfig::uniform(slots, FLAVOR),
        )
    }

    pub fn add_cloud_with_acl(&mut self, cloud_id: &str, slots: u32, acl: Vec<AclRule>) -> Result<&LabCloud> {
        self.add_cloud(
            standard_descriptor(cloud_id, Quotas::unlimited()).with_acl(acl),
            SimConfig::uniform(slots, FLAVOR),
        )
    }

    pub fn add_cloud(&mut self, descriptor: CloudDescriptor, sim: SimConfig) -> Result<&LabCloud> {
        let id = descriptor.cloud_id.clone();
        let sim = Arc::new(SimulatedCloud::new(sim, self.clock.clone()));
        let agent = Arc::new(CloudAgent::new(descriptor, sim.clone()));
        let mut cloud = LabCloud {
            sim,
            agent,
            session: None,
        };
        self.connect(&mut cloud)?;
        self.clouds.insert(id.clone(), cloud);
        Ok(&self.clouds[&id])
    }

    fn connect(&self, cloud: &mut LabCloud) -> Result<()> {
        let session = self.hub.connect(&agent_bus_name(cloud.agent.cloud_id()))?;
        cloud.agent.serve(&session)?;
        cloud.session = Some(session);
        Ok(())
    }

    pub fn cloud(&self, cloud_id: &str) -> &LabCloud {
        &self.clouds[cloud_id]
    }

    pub fn clouds(&self) -> impl Iterator<Item = &LabCloud> {
        self.clouds.values()
    }

    /// Takes a cloud agent off the bus; its cloud keeps running.
    pub fn stop_cloud(&mut self, cloud_id: &str) {
        if let Some(c) = self.clouds.get_mut(cloud_id) {
            if let Some(s) = c.session.take() {
                s.close();
            }
        }
    }

    pub fn restart_cloud(&mut self, cloud_id: &str) -> Result<()> {
        let mut cloud = self.clouds.remove(cloud_id).expect("known cloud");
        let out = if cloud.is_up() { Ok(()) } else { self.connect(&mut cloud) };
        self.clouds.insert(cloud_id.to_owned(), cloud);
        out
    }

    pub fn client(&self) -> CloudClient {
        CloudClient::new(self.gateway.clone(), self.settings.bus_timeout)
    }

    pub fn orchestrator(&self) -> Arc<Orchestrator> {
        Arc::new(Orchestrator::new(self.store.clone(), self.client(), self.settings))
    }

    pub fn worker(&self, name: &str) -> Worker {
        let handler: Arc<dyn RequestHandler> = self.orchestrator();
        Worker::new(self.store.clone(), handler, self.config(name))
    }

    fn config(&self, name: &str) -> WorkerConfig {
        WorkerConfig {
            name: name.into(),
            lease: Duration::from_secs(30),
            poll_interval: Duration::from_millis(5),
        }
    }

    /// Processes queued requests inline until none is claimable.
    pub fn drain(&self) -> Result<Vec<Processed>> {
        let w = self.worker("lab-agent");
        let mut out = Vec::new();
        while let Some(p) = w.run_once()? {
            out.push(p);
        }
        Ok(out)
    }

    /// Runs inline until `id` is final or `timeout` passes.
    pub fn run_until_final(&self, id: &RequestId, timeout: Duration) -> Result<Request> {
        let w = self.worker("lab-agent");
        let deadline = Instant::now() + timeout;
        loop {
            let req = self.store.get_request(id)?;
            if req.state.is_final() || Instant::now() >= deadline {
                return Ok(req);
            }
            if w.run_once()?.is_none() {
                thread::sleep(Duration::from_millis(5));
            }
        }
    }

    /// Gateway agents polling in background threads until the pool drops.
    pub fn spawn_agents(&self, count: usize) -> AgentPool {
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..count)
            .map(|i| {
                let w = self.worker(&format!("gateway-agent-{i}"));
                let stop = stop.clone();
                thread::spawn(move || w.run(&stop))
            })
            .collect();
        AgentPool { stop, handles }
    }
}

pub struct AgentPool {
    stop: Arc<AtomicBool>,
    handles: Vec<thread::JoinHandle<()>>,
}

impl AgentPool {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for AgentPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}
