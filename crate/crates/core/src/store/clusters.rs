use super::{
    Cluster, ClusterSnapshot, ClusterState, Instance, InstanceState, NewRequest, Request, RequestPayload, Store,
    Tables,
};
use crate::error::{Error, Result};
use crate::ids::{ClusterId, DefinitionId, InstanceId};
use crate::principal::Principal;

fn cluster_mut<'a>(t: &'a mut Tables, id: &ClusterId) -> Result<&'a mut Cluster> {
    t.clusters
        .get_mut(id)
        .ok_or_else(|| Error::NotFound(format!("cluster {id}")))
}

fn instance_mut<'a>(t: &'a mut Tables, id: &InstanceId) -> Result<&'a mut Instance> {
    t.instances
        .get_mut(id)
        .ok_or_else(|| Error::NotFound(format!("instance {id}")))
}

impl Store {
    /// Records a DEPLOYING cluster and its CREATE_CLUSTER request in one
    /// write. Repeating the call with the same idempotency key returns the
    /// original pair.
    pub fn create_cluster_with_request(
        &self,
        definition_id: &DefinitionId,
        principal: Principal,
        idempotency_key: Option<String>,
    ) -> Result<(Cluster, Request)> {
        self.create_named_cluster(definition_id, None, principal, idempotency_key)
    }

    /// Like [`Store::create_cluster_with_request`] with a cluster name other
    /// than the definition's.
    pub fn create_named_cluster(
        &self,
        definition_id: &DefinitionId,
        name: Option<&str>,
        principal: Principal,
        idempotency_key: Option<String>,
    ) -> Result<(Cluster, Request)> {
        let now = self.now();
        self.write(|t| {
            if let Some(existing) = t.idempotent_request(&principal.user, idempotency_key.as_deref()) {
                let cluster = existing
                    .payload
                    .cluster_id()
                    .and_then(|id| t.clusters.get(id))
                    .ok_or_else(|| Error::Conflict("idempotency key reused for a different operation".into()))?;
                return Ok((cluster.clone(), existing.clone()));
            }
            let def = t
                .definitions
                .get(definition_id)
                .ok_or_else(|| Error::NotFound(format!("definition {definition_id}")))?;
            let cluster = Cluster {
                id: ClusterId::random(),
                definition_id: definition_id.clone(),
                name: name.map_or_else(|| def.name.clone(), str::to_owned),
                owner: principal.user.clone(),
                state: ClusterState::Deploying,
                instances: Vec::new(),
                created_at: now,
                updated_at: now,
            };
            let new = NewRequest::new(
                RequestPayload::CreateCluster {
                    cluster_id: cluster.id.clone(),
                },
                principal,
            )
            .with_idempotency_key(idempotency_key);
            t.clusters.insert(cluster.id.clone(), cluster.clone());
            let (req, _) = t.enqueue(new, now);
            Ok((cluster, req))
        })
    }

    pub fn get_cluster(&self, id: &ClusterId) -> Result<Cluster> {
        self.read(|t| {
            t.clusters
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("cluster {id}")))
        })
    }

    pub fn clusters_owned_by(&self, owner: &str) -> Result<Vec<Cluster>> {
        self.read(|t| {
            let mut v: Vec<Cluster> = t.clusters.values().filter(|c| c.owner == owner).cloned().collect();
            v.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
            Ok(v)
        })
    }

    /// DESTROYED is terminal.
    pub fn set_cluster_state(&self, id: &ClusterId, state: ClusterState) -> Result<Cluster> {
        let now = self.now();
        self.write(|t| {
            let c = cluster_mut(t, id)?;
            if c.state == ClusterState::Destroyed && state != ClusterState::Destroyed {
                return Err(Error::IllegalTransition {
                    from: c.state.to_string(),
                    to: state.to_string(),
                });
            }
            if c.state != state {
                c.state = state;
                c.updated_at = now;
            }
            Ok(c.clone())
        })
    }

    /// The cluster and its instances (creation order) read together.
    pub fn cluster_snapshot(&self, id: &ClusterId) -> Result<ClusterSnapshot> {
        self.read(|t| {
            let cluster = t
                .clusters
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("cluster {id}")))?;
            let mut instances: Vec<Instance> = cluster
                .instances
                .iter()
                .filter_map(|i| t.instances.get(i).cloned())
                .collect();
            instances.sort_by_key(|i| i.seq);
            Ok(ClusterSnapshot { cluster, instances })
        })
    }

    /// Enqueues a request against a cluster that still exists.
    pub fn enqueue_for_cluster(&self, new: NewRequest) -> Result<Request> {
        let now = self.now();
        self.write(|t| {
            if let Some(existing) = t.idempotent_request(&new.principal.user, new.idempotency_key.as_deref()) {
                return Ok(existing.clone());
            }
            let id = new
                .payload
                .cluster_id()
                .ok_or_else(|| Error::Internal("request does not target a cluster".into()))?;
            let c = t
                .clusters
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("cluster {id}")))?;
            if c.state == ClusterState::Destroyed {
                return Err(Error::Gone(format!("cluster {id}")));
            }
            if matches!(new.payload, RequestPayload::ScaleService { .. }) && c.state == ClusterState::Destroying {
                return Err(Error::Conflict(format!("cluster {id} is being destroyed")));
            }
            let is_destroy = matches!(new.payload, RequestPayload::DestroyCluster { .. });
            let id = id.clone();
            let (req, _) = t.enqueue(new, now);
            if is_destroy {
                let c = cluster_mut(t, &id)?;
                c.state = ClusterState::Destroying;
                c.updated_at = now;
            }
            Ok(req)
        })
    }

    /// Enqueues a pause, resume or destroy after checking the instance is in
    /// a state the action can leave.
    pub fn enqueue_instance_action(&self, new: NewRequest) -> Result<Request> {
        let now = self.now();
        self.write(|t| {
            if let Some(existing) = t.idempotent_request(&new.principal.user, new.idempotency_key.as_deref()) {
                return Ok(existing.clone());
            }
            let (id, target) = match &new.payload {
                RequestPayload::PauseInstance { instance_id } => (instance_id, InstanceState::Paused),
                RequestPayload::ResumeInstance { instance_id } => (instance_id, InstanceState::Running),
                RequestPayload::DestroyInstance { instance_id } => (instance_id, InstanceState::Destroying),
                _ => return Err(Error::Internal("not an instance action".into())),
            };
            let inst = t
                .instances
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("instance {id}")))?;
            if inst.state == InstanceState::Destroyed {
                return Err(Error::Gone(format!("instance {id}")));
            }
            if !inst.state.can_transition_to(target) {
                return Err(Error::IllegalTransition {
                    from: inst.state.to_string(),
                    to: target.to_string(),
                });
            }
            Ok(t.enqueue(new, now).0)
        })
    }

    pub fn insert_instance(&self, mut inst: Instance) -> Result<Instance> {
        self.write(|t| {
            let seq = t.next_seq();
            let c = cluster_mut(t, &inst.cluster_id)?;
            inst.seq = seq;
            c.instances.push(inst.id.clone());
            t.instances.insert(inst.id.clone(), inst.clone());
            Ok(inst)
        })
    }

    pub fn get_instance(&self, id: &InstanceId) -> Result<Instance> {
        self.read(|t| {
            t.instances
                .get(id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("instance {id}")))
        })
    }

    /// Moves an instance along the lifecycle. Re-applying the current state
    /// is a no-op.
    pub fn transition_instance(&self, id: &InstanceId, to: InstanceState) -> Result<Instance> {
        let now = self.now();
        self.write(|t| {
            let inst = instance_mut(t, id)?;
            inst.apply(to, now)?;
            Ok(inst.clone())
        })
    }

    pub fn bind_instance(&self, id: &InstanceId, cloud_id: &str, cloud_ref: Option<&str>) -> Result<Instance> {
        self.write(|t| {
            let inst = instance_mut(t, id)?;
            inst.cloud_id = Some(cloud_id.to_owned());
            if let Some(r) = cloud_ref {
                inst.cloud_instance_ref = Some(r.to_owned());
            }
            Ok(inst.clone())
        })
    }
}
