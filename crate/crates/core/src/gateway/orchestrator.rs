//! Request handlers of the gateway agent: placement, plan execution and
//! routing of instance actions to the owning cloud.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::client::CloudClient;
use super::placement::{footprint, plan_create, plan_fill, plan_scale, plan_shrink, replica_teardown};
use super::placement::{PlacementPlan, PlanStep, ScalePlan};
use super::worker::{Failure, RequestHandler};
use crate::cloud::{DriverState, LifecycleAction};
use crate::cluster::{dependency_closure_fixed, deployment_order, ClusterDefinition, OfferingTriple, ServiceSpec};
use crate::context::ContextService;
use crate::error::{Error, ErrorBody, Result};
use crate::ids::{ClusterId, InstanceId};
use crate::principal::Principal;
use crate::store::{
    Cluster, ClusterState, Instance, InstanceRole, InstanceState, Request, RequestPayload, Store,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentSettings {
    pub bus_timeout: Duration,
    /// How long a started instance may take to report RUNNING.
    pub readiness_timeout: Duration,
    pub readiness_poll: Duration,
    /// Fresh placements allowed per request after a cloud refuses a start.
    pub replan_limit: u32,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            bus_timeout: Duration::from_secs(10),
            readiness_timeout: Duration::from_secs(120),
            readiness_poll: Duration::from_millis(100),
            replan_limit: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepStatus {
    Started,
    CloudRejected,
    DriverFailure,
    BusTimeout,
    Skipped,
    ContextUnavailable,
}

impl StepStatus {
    fn of(err: &Error) -> StepStatus {
        match err {
            e if e.is_cloud_rejection() => StepStatus::CloudRejected,
            e if e.is_transient() => StepStatus::BusTimeout,
            _ => StepStatus::DriverFailure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub cloud_id: String,
    pub service: String,
    pub role: InstanceRole,
    pub requested: u32,
    pub started: u32,
    pub status: StepStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    #[serde(default)]
    pub instances: Vec<InstanceId>,
}

impl StepOutcome {
    fn new(step: &PlanStep, status: StepStatus) -> Self {
        Self {
            cloud_id: step.cloud_id.clone(),
            service: step.service.clone(),
            role: step.role,
            requested: step.count,
            started: 0,
            status,
            error: None,
            instances: Vec::new(),
        }
    }

    fn with_error(mut self, err: &Error) -> Self {
        self.error = Some(err.to_body());
        self
    }
}

/// Everything [`Orchestrator::deploy`] did, replans included.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployReport {
    pub outcomes: Vec<StepOutcome>,
    pub replans: u32,
}

impl DeployReport {
    pub fn all_started(&self) -> bool {
        self.outcomes.iter().all(|o| o.status == StepStatus::Started)
    }
}

struct Execution {
    outcomes: Vec<StepOutcome>,
    /// Index of the step a cloud refused, when a replan may follow.
    rejected_at: Option<usize>,
}

/// Cluster-scoped inputs shared by one request's work.
struct Job<'a> {
    cluster_id: &'a ClusterId,
    def: &'a ClusterDefinition,
    principal: &'a Principal,
}

pub struct Orchestrator {
    store: Store,
    contexts: ContextService,
    client: CloudClient,
    settings: AgentSettings,
}

fn fatal(e: Error) -> Failure {
    Failure::fatal(e)
}

impl Orchestrator {
    pub fn new(store: Store, client: CloudClient, settings: AgentSettings) -> Self {
        Self {
            contexts: ContextService::new(store.clone()),
            store,
            client,
            settings,
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn instances(&self, cluster_id: &ClusterId) -> Result<Vec<Instance>> {
        Ok(self.store.cluster_snapshot(cluster_id)?.instances)
    }

    fn user_data(&self, spec: &ServiceSpec) -> Result<String> {
        if spec.context_id.as_str().is_empty() {
            return Ok(String::new());
        }
        self.contexts.render(&spec.context_id, None)
    }

    fn offerings(def: &ClusterDefinition) -> Vec<OfferingTriple> {
        let set: BTreeSet<OfferingTriple> = def.services.iter().filter_map(|s| s.triple()).collect();
        set.into_iter().collect()
    }

    /// Polls a STARTING instance until it reports RUNNING. Returns whether it
    /// got there; instances the cloud lost become FAILED.
    fn wait_running(&self, inst: &Instance) -> Result<bool> {
        match inst.state {
            InstanceState::Running => return Ok(true),
            InstanceState::Starting => {}
            _ => return Ok(false),
        }
        let (Some(cloud), Some(driver_ref)) = (&inst.cloud_id, &inst.cloud_instance_ref) else {
            self.store.transition_instance(&inst.id, InstanceState::Failed)?;
            return Ok(false);
        };
        let deadline = Instant::now() + self.settings.readiness_timeout;
        loop {
            match self.client.status(cloud, driver_ref) {
                Ok(DriverState::Running) => {
                    self.store.transition_instance(&inst.id, InstanceState::Running)?;
                    return Ok(true);
                }
                Ok(DriverState::Starting) => {}
                Err(e) if e.is_transient() => {}
                Ok(_) | Err(_) => {
                    self.store.transition_instance(&inst.id, InstanceState::Failed)?;
                    return Ok(false);
                }
            }
            if Instant::now() >= deadline {
                return Ok(false);
            }
            thread::sleep(self.settings.readiness_poll);
        }
    }

    /// Resolves instances a crashed attempt left half-started.
    fn settle(&self, cluster_id: &ClusterId) -> Result<()> {
        for inst in self.instances(cluster_id)? {
            match inst.state {
                InstanceState::Requested => {
                    self.store.transition_instance(&inst.id, InstanceState::Starting)?;
                    self.store.transition_instance(&inst.id, InstanceState::Failed)?;
                }
                InstanceState::Starting => {
                    self.wait_running(&inst)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Why `step` must not run now, if anything stands in its way: a
    /// same-cloud dependency that failed, is absent, or never got RUNNING.
    fn gate(&self, job: &Job, step: &PlanStep, failed: &BTreeSet<(String, String)>) -> Result<Option<String>> {
        let spec = job
            .def
            .service(&step.service)
            .ok_or_else(|| Error::NotFound(format!("service {}", step.service)))?;
        let on_cloud = |i: &Instance| i.cloud_id.as_deref() == Some(step.cloud_id.as_str());
        for dep in &spec.depends_on {
            if failed.contains(&(step.cloud_id.clone(), dep.clone())) {
                return Ok(Some(format!("{dep} failed on {}", step.cloud_id)));
            }
            for inst in self.instances(job.cluster_id)? {
                if !(on_cloud(&inst) && &inst.service_name == dep && inst.is_live()) {
                    continue;
                }
                match inst.state {
                    InstanceState::Running => {}
                    InstanceState::Starting => {
                        if !self.wait_running(&inst)? {
                            return Ok(Some(format!("{dep} instance {} is not RUNNING", inst.id)));
                        }
                    }
                    other => return Ok(Some(format!("{dep} instance {} is {other}", inst.id))),
                }
            }
        }
        let live = self.instances(job.cluster_id)?;
        for dep in dependency_closure_fixed(job.def, &step.service) {
            let present = live
                .iter()
                .any(|i| on_cloud(i) && i.service_name == dep && i.state == InstanceState::Running);
            if !present {
                return Ok(Some(format!("{dep} is not running on {}", step.cloud_id)));
            }
        }
        Ok(None)
    }

    fn cancelled(&self, cluster_id: &ClusterId) -> Result<bool> {
        let state = self.store.get_cluster(cluster_id)?.state;
        Ok(matches!(state, ClusterState::Destroying | ClusterState::Destroyed))
    }

    /// Runs the steps in order. Within a cloud nothing starts before its
    /// dependencies there report RUNNING; steps behind a failed dependency
    /// are skipped. A refused start ends the run early when `may_replan`.
    fn execute_plan(&self, job: &Job, plan: &PlacementPlan, may_replan: bool) -> Result<Execution> {
        let mut outcomes = Vec::new();
        let mut failed: BTreeSet<(String, String)> = BTreeSet::new();
        let mut user_data: HashMap<String, Result<String>> = HashMap::new();
        let mut launched: Vec<(usize, Instance)> = Vec::new();
        let mut rejected_at = None;
        for (idx, step) in plan.steps.iter().enumerate() {
            if self.cancelled(job.cluster_id)? {
                let why = Error::Conflict("cluster is being destroyed".into());
                outcomes.push(StepOutcome::new(step, StepStatus::Skipped).with_error(&why));
                continue;
            }
            if let Some(why) = self.gate(job, step, &failed)? {
                failed.insert((step.cloud_id.clone(), step.service.clone()));
                let why = Error::Conflict(why);
                outcomes.push(StepOutcome::new(step, StepStatus::Skipped).with_error(&why));
                continue;
            }
            let spec = job
                .def
                .service(&step.service)
                .ok_or_else(|| Error::NotFound(format!("service {}", step.service)))?;
            let triple = spec
                .triple()
                .ok_or_else(|| Error::Internal(format!("service {} has no offerings", spec.name)))?;
            let data = user_data
                .entry(spec.name.clone())
                .or_insert_with(|| self.user_data(spec))
                .clone();
            let data = match data {
                Ok(d) => d,
                Err(e) => {
                    failed.insert((step.cloud_id.clone(), step.service.clone()));
                    outcomes.push(StepOutcome::new(step, StepStatus::ContextUnavailable).with_error(&e));
                    continue;
                }
            };
            let mut outcome = StepOutcome::new(step, StepStatus::Started);
            for _ in 0..step.count {
                let inst = Instance::new(job.cluster_id.clone(), &step.service, step.role, self.store.now())
                    .on_cloud(&step.cloud_id);
                let inst = self.store.insert_instance(inst)?;
                self.store.transition_instance(&inst.id, InstanceState::Starting)?;
                outcome.instances.push(inst.id.clone());
                match self
                    .client
                    .start(&step.cloud_id, job.principal, &spec.image_id, &triple, &data)
                {
                    Ok(driver_ref) => {
                        let bound = self.store.bind_instance(&inst.id, &step.cloud_id, Some(&driver_ref))?;
                        outcome.started += 1;
                        launched.push((outcomes.len(), bound));
                    }
                    Err(e) => {
                        self.store.transition_instance(&inst.id, InstanceState::Failed)?;
                        outcome.status = StepStatus::of(&e);
                        outcome.error = Some(e.to_body());
                        break;
                    }
                }
            }
            let status = outcome.status;
            outcomes.push(outcome);
            if status != StepStatus::Started {
                failed.insert((step.cloud_id.clone(), step.service.clone()));
                if status == StepStatus::CloudRejected && may_replan {
                    rejected_at = Some(idx);
                    break;
                }
            }
        }
        for (at, inst) in launched {
            let current = self.store.get_instance(&inst.id)?;
            if !self.wait_running(&current)? {
                let o = &mut outcomes[at];
                if o.status == StepStatus::Started {
                    o.status = StepStatus::DriverFailure;
                    o.error = Some(Error::DriverFailure(format!("instance {} did not reach RUNNING", inst.id)).to_body());
                }
            }
        }
        Ok(Execution { outcomes, rejected_at })
    }

    /// Executes `plan`, placing again with fresh capacity reports when a
    /// cloud refuses a start, up to the replan limit.
    pub fn deploy(&self, job_cluster: &ClusterId, def: &ClusterDefinition, principal: &Principal, plan: PlacementPlan) -> Result<DeployReport> {
        let job = Job {
            cluster_id: job_cluster,
            def,
            principal,
        };
        let mut report = DeployReport::default();
        let mut plan = plan;
        loop {
            let may_replan = report.replans < self.settings.replan_limit;
            let exec = self.execute_plan(&job, &plan, may_replan)?;
            let Some(at) = exec.rejected_at else {
                report.outcomes.extend(exec.outcomes);
                return Ok(report);
            };
            let started_at_rejection = exec.outcomes.last().map_or(0, |o| o.started);
            report.outcomes.extend(exec.outcomes);
            report.replans += 1;
            let mut demand: Vec<(String, u32)> = Vec::new();
            for (k, step) in plan.steps.iter().enumerate().skip(at) {
                if step.role != InstanceRole::Original {
                    continue;
                }
                let n = if k == at { step.count - started_at_rejection } else { step.count };
                demand.push((step.service.clone(), n));
            }
            let fresh = self
                .client
                .discover_capacity(principal, &Self::offerings(def))
                .and_then(|reports| plan_fill(def, &demand, &footprint(&self.instances(job_cluster)?), &reports));
            match fresh {
                Ok(next) => plan = next,
                Err(e) => {
                    for (service, n) in demand.into_iter().filter(|(_, n)| *n > 0) {
                        let step = PlanStep {
                            cloud_id: String::new(),
                            service,
                            count: n,
                            role: InstanceRole::Original,
                        };
                        report
                            .outcomes
                            .push(StepOutcome::new(&step, StepStatus::CloudRejected).with_error(&e));
                    }
                    return Ok(report);
                }
            }
        }
    }

    /// Final cluster state after a deployment, unless a destroy overtook it.
    fn settle_cluster_state(&self, cluster_id: &ClusterId, ok: bool) -> Result<Cluster> {
        let cluster = self.store.get_cluster(cluster_id)?;
        if matches!(cluster.state, ClusterState::Destroying | ClusterState::Destroyed) {
            return Ok(cluster);
        }
        let state = if ok { ClusterState::Active } else { ClusterState::PartialFailure };
        self.store.set_cluster_state(cluster_id, state)
    }

    /// Destroys one instance through its cloud. Idempotent.
    pub fn destroy_instance(&self, id: &InstanceId) -> std::result::Result<(), Failure> {
        let mut inst = self.store.get_instance(id)?;
        if inst.state == InstanceState::Requested || inst.state == InstanceState::Starting {
            self.settle(&inst.cluster_id)?;
            inst = self.store.get_instance(id)?;
        }
        match inst.state {
            InstanceState::Destroyed | InstanceState::Failed => return Ok(()),
            InstanceState::Running | InstanceState::Paused => {
                self.store.transition_instance(id, InstanceState::Destroying)?;
            }
            InstanceState::Destroying => {}
            InstanceState::Requested | InstanceState::Starting => {
                return Err(Failure::retry(Error::Conflict(format!("instance {id} is still starting"))));
            }
        }
        if let (Some(cloud), Some(driver_ref)) = (&inst.cloud_id, &inst.cloud_instance_ref) {
            match self.client.lifecycle(cloud, driver_ref, LifecycleAction::Destroy) {
                Ok(_) | Err(Error::UnknownRef(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.store.transition_instance(id, InstanceState::Destroyed)?;
        Ok(())
    }

    /// Replica fixed instances whose cloud no longer runs anything using them.
    fn tear_down_idle_replicas(&self, cluster_id: &ClusterId, def: &ClusterDefinition) -> std::result::Result<Vec<InstanceId>, Failure> {
        let idle = replica_teardown(def, &self.instances(cluster_id)?, &[]);
        for id in &idle {
            self.destroy_instance(id)?;
        }
        Ok(idle)
    }

    fn create_cluster(&self, req: &Request, cluster_id: &ClusterId) -> std::result::Result<Value, Failure> {
        let cluster = self.store.get_cluster(cluster_id)?;
        if cluster.state != ClusterState::Deploying {
            return Ok(json!({"cluster_id": cluster_id, "cluster_state": cluster.state, "noop": true}));
        }
        let def = self.store.get_definition(&cluster.definition_id).map_err(fatal)?;
        self.settle(cluster_id)?;
        for inst in self.instances(cluster_id)? {
            if inst.is_live() {
                self.destroy_instance(&inst.id)?;
            }
        }
        let last_attempt = req.attempts >= self.store.queue_config().max_attempts;
        let reports = match self.client.discover_capacity(&req.principal, &Self::offerings(&def)) {
            Ok(r) => r,
            Err(e) => {
                if last_attempt || !matches!(e, Error::NoClouds) {
                    self.store.set_cluster_state(cluster_id, ClusterState::PartialFailure)?;
                    return Err(fatal(e));
                }
                return Err(Failure::retry(e));
            }
        };
        let plan = match plan_create(&def, &reports) {
            Ok(p) => p,
            Err(e) => {
                self.store.set_cluster_state(cluster_id, ClusterState::PartialFailure)?;
                return Err(fatal(e));
            }
        };
        let report = self.deploy(cluster_id, &def, &req.principal, plan.clone())?;
        let cluster = self.settle_cluster_state(cluster_id, report.all_started())?;
        Ok(json!({
            "cluster_id": cluster_id,
            "cluster_state": cluster.state,
            "plan": plan,
            "outcomes": report.outcomes,
            "replans": report.replans,
        }))
    }

    fn scale_service(&self, req: &Request, cluster_id: &ClusterId, service: &str, target: u32) -> std::result::Result<Value, Failure> {
        let cluster = self.store.get_cluster(cluster_id)?;
        match cluster.state {
            ClusterState::Active | ClusterState::PartialFailure => {}
            ClusterState::Destroyed => return Err(fatal(Error::Gone(format!("cluster {cluster_id}")))),
            other => return Err(fatal(Error::Conflict(format!("cluster {cluster_id} is {other}")))),
        }
        let def = self.store.get_definition(&cluster.definition_id).map_err(fatal)?;
        let spec = def
            .service(service)
            .ok_or_else(|| fatal(Error::NotFound(format!("service {service}"))))?;
        if spec.is_fixed() {
            return Err(fatal(Error::NotScalable(service.to_owned())));
        }
        self.settle(cluster_id)?;
        let instances = self.instances(cluster_id)?;
        let live = instances.iter().filter(|i| i.service_name == service && i.is_live()).count() as u32;
        let base = json!({"cluster_id": cluster_id, "service": service, "target": target, "before": live});
        let mut result = base.as_object().cloned().unwrap_or_default();
        if target == live {
            result.insert("noop".into(), json!(true));
            return Ok(Value::Object(result));
        }
        if target > live {
            let reports = self.client.discover_capacity(&req.principal, &Self::offerings(&def))?;
            let delta = i64::from(target - live);
            let plan = match plan_scale(&def, service, delta, &instances, &reports).map_err(fatal)? {
                ScalePlan::Grow(p) => p,
                ScalePlan::Shrink(_) => return Err(fatal(Error::Internal("growth planned as shrink".into()))),
            };
            let report = self.deploy(cluster_id, &def, &req.principal, plan.clone())?;
            let cluster = self.settle_cluster_state(cluster_id, report.all_started())?;
            result.insert("cluster_state".into(), json!(cluster.state));
            result.insert("plan".into(), json!(plan));
            result.insert("outcomes".into(), json!(report.outcomes));
            result.insert("replans".into(), json!(report.replans));
        } else {
            let shrink = plan_shrink(&def, service, live - target, &instances);
            for id in &shrink.destroy {
                self.destroy_instance(id)?;
            }
            let mut torn = Vec::new();
            for id in &shrink.teardown {
                self.destroy_instance(id)?;
                torn.push(id.clone());
            }
            torn.extend(self.tear_down_idle_replicas(cluster_id, &def)?);
            result.insert("destroyed".into(), json!(shrink.destroy));
            result.insert("teardown".into(), json!(torn));
            result.insert("cluster_state".into(), json!(self.store.get_cluster(cluster_id)?.state));
        }
        Ok(Value::Object(result))
    }

    /// Sends a pause, resume or destroy to the cloud that runs the instance.
    pub fn route_instance_action(&self, id: &InstanceId, action: LifecycleAction) -> std::result::Result<Value, Failure> {
        let mut inst = self.store.get_instance(id).map_err(fatal)?;
        if inst.state == InstanceState::Starting {
            self.wait_running(&inst)?;
            inst = self.store.get_instance(id)?;
        }
        let (target, from) = match action {
            LifecycleAction::Destroy => {
                self.destroy_instance(id)?;
                let cluster = self.store.get_cluster(&inst.cluster_id)?;
                let def = self.store.get_definition(&cluster.definition_id)?;
                let torn = self.tear_down_idle_replicas(&inst.cluster_id, &def)?;
                let state = self.store.get_instance(id)?.state;
                return Ok(json!({"instance_id": id, "state": state, "teardown": torn}));
            }
            LifecycleAction::Pause => (InstanceState::Paused, InstanceState::Running),
            LifecycleAction::Resume => (InstanceState::Running, InstanceState::Paused),
        };
        if inst.state == target {
            return Ok(json!({"instance_id": id, "state": target, "noop": true}));
        }
        if inst.state != from {
            return Err(fatal(Error::IllegalTransition {
                from: inst.state.to_string(),
                to: target.to_string(),
            }));
        }
        let (Some(cloud), Some(driver_ref)) = (&inst.cloud_id, &inst.cloud_instance_ref) else {
            return Err(fatal(Error::Internal(format!("instance {id} is not placed"))));
        };
        self.client.lifecycle(cloud, driver_ref, action)?;
        let inst = self.store.transition_instance(id, target)?;
        Ok(json!({"instance_id": id, "cloud_id": cloud, "state": inst.state}))
    }

    fn destroy_cluster(&self, cluster_id: &ClusterId) -> std::result::Result<Value, Failure> {
        let cluster = self.store.get_cluster(cluster_id)?;
        if cluster.state == ClusterState::Destroyed {
            return Ok(json!({"cluster_id": cluster_id, "cluster_state": cluster.state, "noop": true}));
        }
        let def = self.store.get_definition(&cluster.definition_id)?;
        self.settle(cluster_id)?;
        let rank: BTreeMap<String, usize> = deployment_order(&def)
            .unwrap_or_default()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        let mut instances = self.instances(cluster_id)?;
        instances.sort_by(|a, b| {
            let ra = rank.get(&a.service_name).copied().unwrap_or(usize::MAX);
            let rb = rank.get(&b.service_name).copied().unwrap_or(usize::MAX);
            (rb, b.seq).cmp(&(ra, a.seq))
        });
        let mut destroyed = Vec::new();
        for inst in instances.iter().filter(|i| !i.state.is_terminal()) {
            self.destroy_instance(&inst.id)?;
            destroyed.push(inst.id.clone());
        }
        let cluster = self.store.set_cluster_state(cluster_id, ClusterState::Destroyed)?;
        Ok(json!({"cluster_id": cluster_id, "cluster_state": cluster.state, "destroyed": destroyed}))
    }
}

impl RequestHandler for Orchestrator {
    fn handle(&self, req: &Request) -> std::result::Result<Value, Failure> {
        match &req.payload {
            RequestPayload::CreateCluster { cluster_id } => self.create_cluster(req, cluster_id),
            RequestPayload::ScaleService {
                cluster_id,
                service,
                target,
                ..
            } => self.scale_service(req, cluster_id, service, *target),
            RequestPayload::PauseInstance { instance_id } => {
                self.route_instance_action(instance_id, LifecycleAction::Pause)
            }
            RequestPayload::ResumeInstance { instance_id } => {
                self.route_instance_action(instance_id, LifecycleAction::Resume)
            }
            RequestPayload::DestroyInstance { instance_id } => {
                self.route_instance_action(instance_id, LifecycleAction::Destroy)
            }
            RequestPayload::DestroyCluster { cluster_id } => self.destroy_cluster(cluster_id),
        }
    }
}
