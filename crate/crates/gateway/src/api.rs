//! The operations behind every REST endpoint, independent of HTTP. Each
//! takes the authenticated principal and returns the JSON reply body.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use cvmg_core::cluster::{validate_definition, DefinitionDocument};
use cvmg_core::context::{Context, ContextService, NewContext, Sections};
use cvmg_core::ids::{ClusterId, ContextId, CredentialId, DefinitionId, InstanceId, RequestId};
use cvmg_core::pairing::{PairedMachine, PairingService};
use cvmg_core::store::{Cluster, ClusterState, NewRequest, RequestPayload, Store};
use cvmg_core::{Error, Principal, Result};

use crate::auth;

/// Largest scale target accepted.
pub const MAX_TARGET: i64 = 10_000;

#[derive(Debug, Clone, Deserialize)]
pub struct CreateContext {
    pub name: String,
    #[serde(default)]
    pub sections: Sections,
    #[serde(default)]
    pub enabled_plugins: Vec<String>,
    #[serde(default)]
    pub passphrase: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CloneContext {
    #[serde(default)]
    pub passphrase: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Publish {
    pub category: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct OpenPairing {
    pub context_id: ContextId,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ClaimReport {
    pub vm_name: String,
    pub cernvm_version: String,
    pub ip_address: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateCluster {
    pub definition_id: DefinitionId,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Scale {
    pub target: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceAction {
    Pause,
    Resume,
    Destroy,
}

#[derive(Clone)]
pub struct Api {
    store: Store,
    contexts: ContextService,
    pairing: PairingService,
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Internal(e.to_string()))
}

fn owned_by(owner: &str, p: &Principal) -> Result<()> {
    if owner == p.user {
        Ok(())
    } else {
        Err(Error::Forbidden)
    }
}

impl Api {
    pub fn new(store: Store) -> Self {
        let contexts = ContextService::new(store.clone());
        Self::with_services(store.clone(), contexts.clone(), PairingService::new(store, contexts))
    }

    pub fn with_services(store: Store, contexts: ContextService, pairing: PairingService) -> Self {
        Self { store, contexts, pairing }
    }

    pub fn with_pairing_ttl(mut self, ttl: Duration) -> Self {
        self.pairing = self.pairing.with_ttl(ttl);
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn authenticate(&self, header: Option<&str>) -> Result<Principal> {
        auth::authenticate(&self.store, header)
    }

    // contexts

    /// A context its owner or anyone may read once published.
    fn readable_context(&self, p: &Principal, id: &ContextId) -> Result<Context> {
        let ctx = self.contexts.get(id)?;
        if ctx.owner != p.user && !self.contexts.is_published(id)? {
            return Err(Error::Forbidden);
        }
        Ok(ctx)
    }

    pub fn create_context(&self, p: &Principal, body: CreateContext) -> Result<Value> {
        let ctx = self.contexts.create(NewContext {
            name: body.name,
            owner: p.user.clone(),
            sections: body.sections,
            enabled_plugins: body.enabled_plugins,
            passphrase: body.passphrase,
        })?;
        to_value(&ctx)
    }

    pub fn get_context(&self, p: &Principal, id: &ContextId) -> Result<Value> {
        to_value(&self.readable_context(p, id)?)
    }

    pub fn clone_context(&self, p: &Principal, id: &ContextId, body: CloneContext) -> Result<Value> {
        self.readable_context(p, id)?;
        to_value(&self.contexts.clone_context(id, &p.user, body.passphrase.as_deref())?)
    }

    pub fn render_context(&self, p: &Principal, id: &ContextId, passphrase: Option<&str>) -> Result<String> {
        self.readable_context(p, id)?;
        self.contexts.render(id, passphrase)
    }

    pub fn publish_context(&self, p: &Principal, id: &ContextId, body: Publish) -> Result<Value> {
        owned_by(&self.contexts.get(id)?.owner, p)?;
        to_value(&self.contexts.publish(id, &p.user, &body.category, body.tags)?)
    }

    pub fn search_marketplace(&self, category: Option<&str>, tags: &[String]) -> Result<Value> {
        let mut out = Vec::new();
        for entry in self.contexts.search(category, tags)? {
            let name = self.contexts.get(&entry.context_id)?.name;
            let mut v = to_value(&entry)?;
            v["name"] = Value::String(name);
            out.push(v);
        }
        Ok(Value::Array(out))
    }

    // pairing

    pub fn open_pairing(&self, p: &Principal, body: OpenPairing) -> Result<Value> {
        owned_by(&self.contexts.get(&body.context_id)?.owner, p)?;
        let session = self.pairing.open(&body.context_id, &p.user)?;
        let mut v = to_value(&session)?;
        v["expires_at"] = to_value(&session.expires_at())?;
        Ok(v)
    }

    /// Unauthenticated: the pin is the capability.
    pub fn claim_pairing(&self, pin: &str, report: ClaimReport) -> Result<String> {
        self.pairing.claim(
            pin,
            PairedMachine {
                vm_name: report.vm_name,
                cernvm_version: report.cernvm_version,
                ip_address: report.ip_address,
                paired_at: Default::default(),
            },
        )
    }

    pub fn list_machines(&self, p: &Principal) -> Result<Value> {
        to_value(&self.pairing.list_paired_machines(&p.user)?)
    }

    // definitions

    /// Stores a definition from a TOML or JSON document and reports whether
    /// it is deployable.
    pub fn create_definition(&self, p: &Principal, document: &str) -> Result<Value> {
        let def = DefinitionDocument::parse(document)?.into_definition(DefinitionId::random(), &p.user)?;
        self.store.insert_definition(def.clone())?;
        self.definition_view(def)
    }

    fn definition_view(&self, def: cvmg_core::cluster::ClusterDefinition) -> Result<Value> {
        let violations = validate_definition(&def).err().unwrap_or_default();
        let mut v = to_value(&def)?;
        v["valid"] = Value::Bool(violations.is_empty());
        v["violations"] = to_value(&violations)?;
        Ok(v)
    }

    pub fn get_definition(&self, p: &Principal, id: &DefinitionId) -> Result<Value> {
        let def = self.store.get_definition(id)?;
        owned_by(&def.owner, p)?;
        self.definition_view(def)
    }

    // clusters

    fn owned_cluster(&self, p: &Principal, id: &ClusterId) -> Result<Cluster> {
        let c = self.store.get_cluster(id)?;
        owned_by(&c.owner, p)?;
        Ok(c)
    }

    pub fn create_cluster(&self, p: &Principal, body: CreateCluster, key: Option<String>) -> Result<Value> {
        let def = self.store.get_definition(&body.definition_id)?;
        owned_by(&def.owner, p)?;
        validate_definition(&def).map_err(Error::InvalidDefinition)?;
        let name = body.name.as_deref().map(str::trim).filter(|n| !n.is_empty());
        let (cluster, req) = self.store.create_named_cluster(&def.id, name, p.clone(), key)?;
        Ok(json!({
            "cluster_id": cluster.id,
            "request_id": req.id,
            "state": cluster.state,
        }))
    }

    pub fn list_clusters(&self, p: &Principal) -> Result<Value> {
        let mut out = Vec::new();
        for c in self.store.clusters_owned_by(&p.user)? {
            let snap = self.store.cluster_snapshot(&c.id)?;
            let live = snap.instances.iter().filter(|i| i.is_live()).count();
            out.push(json!({
                "id": c.id,
                "name": c.name,
                "definition_id": c.definition_id,
                "state": c.state,
                "live_instances": live,
                "created_at": c.created_at,
                "updated_at": c.updated_at,
            }));
        }
        Ok(Value::Array(out))
    }

    pub fn get_cluster(&self, p: &Principal, id: &ClusterId) -> Result<Value> {
        self.owned_cluster(p, id)?;
        to_value(&self.store.cluster_snapshot(id)?)
    }

    pub fn scale_service(
        &self,
        p: &Principal,
        id: &ClusterId,
        service: &str,
        body: Scale,
        key: Option<String>,
    ) -> Result<Value> {
        if !(0..=MAX_TARGET).contains(&body.target) {
            return Err(Error::BadTarget(format!("target {} outside 0..={MAX_TARGET}", body.target)));
        }
        let cluster = self.owned_cluster(p, id)?;
        let def = self.store.get_definition(&cluster.definition_id)?;
        let spec = def
            .service(service)
            .ok_or_else(|| Error::NotFound(format!("service {service}")))?;
        if spec.is_fixed() {
            return Err(Error::NotScalable(service.to_owned()));
        }
        match cluster.state {
            ClusterState::Active | ClusterState::PartialFailure => {}
            ClusterState::Destroyed => return Err(Error::Gone(format!("cluster {id}"))),
            other => return Err(Error::Conflict(format!("cluster {id} is {other}"))),
        }
        let current = self
            .store
            .cluster_snapshot(id)?
            .instances
            .iter()
            .filter(|i| i.service_name == service && i.is_live())
            .count() as i64;
        let delta = body.target - current;
        let payload = RequestPayload::ScaleService {
            cluster_id: id.clone(),
            service: service.to_owned(),
            target: body.target as u32,
            delta,
        };
        let req = self
            .store
            .enqueue_for_cluster(NewRequest::new(payload, p.clone()).with_idempotency_key(key))?;
        Ok(json!({
            "request_id": req.id,
            "cluster_id": id,
            "service": service,
            "target": body.target,
            "delta": delta,
        }))
    }

    pub fn destroy_cluster(&self, p: &Principal, id: &ClusterId, key: Option<String>) -> Result<Value> {
        self.owned_cluster(p, id)?;
        let payload = RequestPayload::DestroyCluster { cluster_id: id.clone() };
        let req = self
            .store
            .enqueue_for_cluster(NewRequest::new(payload, p.clone()).with_idempotency_key(key))?;
        Ok(json!({ "request_id": req.id, "cluster_id": id }))
    }

    pub fn instance_action(
        &self,
        p: &Principal,
        id: &InstanceId,
        action: InstanceAction,
        key: Option<String>,
    ) -> Result<Value> {
        let inst = self.store.get_instance(id)?;
        self.owned_cluster(p, &inst.cluster_id)?;
        let instance_id = id.clone();
        let payload = match action {
            InstanceAction::Pause => RequestPayload::PauseInstance { instance_id },
            InstanceAction::Resume => RequestPayload::ResumeInstance { instance_id },
            InstanceAction::Destroy => RequestPayload::DestroyInstance { instance_id },
        };
        let req = self
            .store
            .enqueue_instance_action(NewRequest::new(payload, p.clone()).with_idempotency_key(key))?;
        Ok(json!({ "request_id": req.id, "instance_id": id }))
    }

    // credentials

    pub fn create_credential(&self, p: &Principal) -> Result<Value> {
        let (cred, secret) = auth::issue_credential(&self.store, &p.user)?;
        Ok(json!({
            "id": cred.id,
            "secret": secret,
            "owner": cred.owner,
            "created_at": cred.created_at,
        }))
    }

    pub fn revoke_credential(&self, p: &Principal, id: &CredentialId) -> Result<Value> {
        self.store.revoke_credential(id, &p.user)?;
        Ok(json!({ "id": id, "revoked": true }))
    }

    // requests

    pub fn get_request(&self, p: &Principal, id: &RequestId) -> Result<Value> {
        let req = self.store.get_request(id)?;
        owned_by(req.owner(), p)?;
        to_value(&req)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use cvmg_core::clock::system_clock;
    use cvmg_core::context::KdfParams;
    use cvmg_core::store::{Instance, InstanceRole, InstanceState};

    const DOC: &str = r#"
name = "batch"

[[services]]
name = "head"
kind = "fixed"
count = 1
context = ""
image = "cernvm-3"
offerings = { compute = "m1.small", disk = "disk-20", network = "public" }

[[services]]
name = "worker"
kind = "scalable"
count = 2
context = ""
image = "cernvm-3"
offerings = { compute = "m1.small", disk = "disk-20", network = "public" }
"#;

    fn api() -> (Api, Principal, Principal) {
        let store = Store::memory(system_clock());
        for u in ["alice", "bob"] {
            auth::add_user(&store, u, "pw", BTreeSet::new()).unwrap();
        }
        let contexts = ContextService::new(store.clone()).with_kdf(KdfParams::interactive_test());
        let pairing = PairingService::new(store.clone(), contexts.clone());
        (Api::with_services(store, contexts, pairing), Principal::new("alice"), Principal::new("bob"))
    }

    fn id_of(v: &Value, field: &str) -> String {
        v[field].as_str().unwrap().to_owned()
    }

    /// Creates a cluster and marks it ACTIVE with two RUNNING workers.
    fn active_cluster(api: &Api, p: &Principal) -> ClusterId {
        let def = api.create_definition(p, DOC).unwrap();
        let body = CreateCluster { definition_id: id_of(&def, "id").into(), name: None };
        let cid: ClusterId = id_of(&api.create_cluster(p, body, None).unwrap(), "cluster_id").into();
        let store = api.store();
        for _ in 0..2 {
            let inst = store
                .insert_instance(Instance::new(cid.clone(), "worker", InstanceRole::Original, store.now()))
                .unwrap();
            for s in [InstanceState::Starting, InstanceState::Running] {
                store.transition_instance(&inst.id, s).unwrap();
            }
        }
        store.set_cluster_state(&cid, ClusterState::Active).unwrap();
        cid
    }

    #[test]
    fn scale_reports_delta_from_live_count() {
        let (api, alice, _) = api();
        let cid = active_cluster(&api, &alice);
        let v = api.scale_service(&alice, &cid, "worker", Scale { target: 5 }, None).unwrap();
        assert_eq!(v["delta"], 3);
        let v = api.scale_service(&alice, &cid, "worker", Scale { target: 0 }, None).unwrap();
        assert_eq!(v["delta"], -2);
    }

    #[test]
    fn scale_errors() {
        let (api, alice, bob) = api();
        let cid = active_cluster(&api, &alice);
        let scale = |p: &Principal, svc: &str, target| api.scale_service(p, &cid, svc, Scale { target }, None);
        assert_eq!(scale(&alice, "head", 2).unwrap_err().code(), "NOT_SCALABLE");
        assert_eq!(scale(&alice, "nope", 2).unwrap_err().code(), "NOT_FOUND");
        assert_eq!(scale(&alice, "worker", -1).unwrap_err().code(), "BAD_TARGET");
        assert_eq!(scale(&bob, "worker", 2).unwrap_err().code(), "FORBIDDEN");
    }

    #[test]
    fn scale_waits_for_deployment() {
        let (api, alice, _) = api();
        let def = api.create_definition(&alice, DOC).unwrap();
        let body = CreateCluster { definition_id: id_of(&def, "id").into(), name: Some("mine".into()) };
        let v = api.create_cluster(&alice, body, None).unwrap();
        assert_eq!(v["state"], "DEPLOYING");
        let cid: ClusterId = id_of(&v, "cluster_id").into();
        assert_eq!(api.store().get_cluster(&cid).unwrap().name, "mine");
        let err = api.scale_service(&alice, &cid, "worker", Scale { target: 3 }, None).unwrap_err();
        assert_eq!(err.code(), "CONFLICT");
    }

    #[test]
    fn idempotency_key_returns_same_request() {
        let (api, alice, _) = api();
        let def = api.create_definition(&alice, DOC).unwrap();
        let make = || {
            let body = CreateCluster { definition_id: id_of(&def, "id").into(), name: None };
            api.create_cluster(&alice, body, Some("k1".into())).unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn cyclic_definition_is_stored_but_not_deployable() {
        let (api, alice, _) = api();
        let doc = DOC.replacen("count = 1\n", "count = 1\ndepends_on = [\"worker\"]\n", 1);
        let def = api.create_definition(&alice, &doc).unwrap();
        assert_eq!(def["valid"], false);
        let body = CreateCluster { definition_id: id_of(&def, "id").into(), name: None };
        assert_eq!(api.create_cluster(&alice, body, None).unwrap_err().code(), "INVALID_DEFINITION");
    }

    #[test]
    fn instance_actions_check_owner_and_state() {
        let (api, alice, bob) = api();
        let cid = active_cluster(&api, &alice);
        let inst = api.store().cluster_snapshot(&cid).unwrap().instances[0].id.clone();
        let act = |p: &Principal, a| api.instance_action(p, &inst, a, None);
        assert_eq!(act(&bob, InstanceAction::Pause).unwrap_err().code(), "FORBIDDEN");
        assert_eq!(act(&alice, InstanceAction::Resume).unwrap_err().code(), "ILLEGAL_TRANSITION");
        assert!(act(&alice, InstanceAction::Pause).is_ok());
    }

    #[test]
    fn destroy_marks_destroying_and_owner_lists_are_disjoint() {
        let (api, alice, bob) = api();
        let cid = active_cluster(&api, &alice);
        api.destroy_cluster(&alice, &cid, None).unwrap();
        assert_eq!(api.store().get_cluster(&cid).unwrap().state, ClusterState::Destroying);
        assert_eq!(api.list_clusters(&alice).unwrap().as_array().unwrap().len(), 1);
        assert_eq!(api.list_clusters(&bob).unwrap(), json!([]));
        assert_eq!(api.destroy_cluster(&bob, &cid, None).unwrap_err().code(), "FORBIDDEN");
        api.store().set_cluster_state(&cid, ClusterState::Destroyed).unwrap();
        assert_eq!(api.destroy_cluster(&alice, &cid, None).unwrap_err().code(), "GONE");
    }

    #[test]
    fn contexts_are_private_until_published() {
        let (api, alice, bob) = api();
        let body = CreateContext {
            name: "web".into(),
            sections: Sections::from([("cernvm".into(), [("repos".into(), "sft".into())].into())]),
            enabled_plugins: vec!["cernvm".into()],
            passphrase: None,
        };
        let ctx = api.create_context(&alice, body).unwrap();
        let id: ContextId = id_of(&ctx, "id").into();
        assert_eq!(api.get_context(&bob, &id).unwrap_err().code(), "FORBIDDEN");
        let publish = |p: &Principal| {
            api.publish_context(p, &id, Publish { category: "web".into(), tags: vec!["nginx".into()] })
        };
        assert_eq!(publish(&bob).unwrap_err().code(), "FORBIDDEN");
        publish(&alice).unwrap();
        let copy = api.clone_context(&bob, &id, CloneContext::default()).unwrap();
        assert_eq!(copy["owner"], "bob");
        assert_eq!(copy["parent_id"], id.as_str());
        let found = api.search_marketplace(Some("web"), &["nginx".into()]).unwrap();
        assert_eq!(found[0]["name"], "web");
    }

    #[test]
    fn pairing_round_trip() {
        let (api, alice, bob) = api();
        let body = CreateContext {
            name: "web".into(),
            sections: Sections::from([("cernvm".into(), [("repos".into(), "sft".into())].into())]),
            enabled_plugins: vec!["cernvm".into()],
            passphrase: None,
        };
        let id: ContextId = id_of(&api.create_context(&alice, body).unwrap(), "id").into();
        assert_eq!(
            api.open_pairing(&bob, OpenPairing { context_id: id.clone() }).unwrap_err().code(),
            "FORBIDDEN"
        );
        let session = api.open_pairing(&alice, OpenPairing { context_id: id.clone() }).unwrap();
        let report = || ClaimReport {
            vm_name: "vm1".into(),
            cernvm_version: "3.1".into(),
            ip_address: "10.0.0.2".into(),
        };
        let text = api.claim_pairing(session["pin"].as_str().unwrap(), report()).unwrap();
        assert_eq!(text, api.render_context(&alice, &id, None).unwrap());
        let again = api.claim_pairing(session["pin"].as_str().unwrap(), report()).unwrap_err();
        assert_eq!(again.code(), "PIN_ALREADY_CLAIMED");
        assert_eq!(api.list_machines(&alice).unwrap()[0]["vm_name"], "vm1");
        assert_eq!(api.list_machines(&bob).unwrap(), json!([]));
    }
}
