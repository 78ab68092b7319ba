use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::{Error, ErrorBody, Result};
use crate::ids::{ClusterId, CredentialId, DefinitionId, InstanceId, RequestId, UserId};
use crate::principal::Principal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstanceState {
    Requested,
    Starting,
    Running,
    Paused,
    Destroying,
    Destroyed,
    Failed,
}

impl InstanceState {
    pub const ALL: [InstanceState; 7] = [
        InstanceState::Requested,
        InstanceState::Starting,
        InstanceState::Running,
        InstanceState::Paused,
        InstanceState::Destroying,
        InstanceState::Destroyed,
        InstanceState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Requested => "REQUESTED",
            InstanceState::Starting => "STARTING",
            InstanceState::Running => "RUNNING",
            InstanceState::Paused => "PAUSED",
            InstanceState::Destroying => "DESTROYING",
            InstanceState::Destroyed => "DESTROYED",
            InstanceState::Failed => "FAILED",
        }
    }

    pub fn can_transition_to(self, to: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, to),
            (Requested, Starting)
                | (Starting, Running)
                | (Starting, Failed)
                | (Running, Paused)
                | (Paused, Running)
                | (Running, Destroying)
                | (Paused, Destroying)
                | (Destroying, Destroyed)
        )
    }

    /// Holding or about to hold a cloud resource.
    pub fn is_live(self) -> bool {
        use InstanceState::*;
        matches!(self, Requested | Starting | Running | Paused)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, InstanceState::Destroyed | InstanceState::Failed)
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstanceRole {
    Original,
    Replica,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub state: InstanceState,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub cluster_id: ClusterId,
    pub service_name: String,
    #[serde(default)]
    pub cloud_id: Option<String>,
    #[serde(default)]
    pub cloud_instance_ref: Option<String>,
    pub state: InstanceState,
    pub role: InstanceRole,
    #[serde(default)]
    pub seq: u64,
    pub created_at: Timestamp,
    #[serde(default)]
    pub history: Vec<StateChange>,
}

impl Instance {
    pub fn new(cluster_id: ClusterId, service_name: &str, role: InstanceRole, created_at: Timestamp) -> Self {
        Self {
            id: InstanceId::random(),
            cluster_id,
            service_name: service_name.to_owned(),
            cloud_id: None,
            cloud_instance_ref: None,
            state: InstanceState::Requested,
            role,
            seq: 0,
            created_at,
            history: vec![StateChange {
                state: InstanceState::Requested,
                at: created_at,
            }],
        }
    }

    pub fn on_cloud(mut self, cloud_id: &str) -> Self {
        self.cloud_id = Some(cloud_id.to_owned());
        self
    }

    pub fn is_live(&self) -> bool {
        self.state.is_live()
    }

    pub(crate) fn apply(&mut self, to: InstanceState, at: Timestamp) -> Result<()> {
        if self.state == to {
            return Ok(());
        }
        if !self.state.can_transition_to(to) {
            return Err(Error::IllegalTransition {
                from: self.state.to_string(),
                to: to.to_string(),
            });
        }
        self.state = to;
        self.history.push(StateChange { state: to, at });
        Ok(())
    }
}

/// Replays a recorded history from REQUESTED, checking each step.
pub fn replay_history(history: &[StateChange]) -> Result<InstanceState> {
    let mut steps = history.iter();
    match steps.next() {
        Some(first) if first.state == InstanceState::Requested => {}
        Some(first) => {
            return Err(Error::IllegalTransition {
                from: "NONE".into(),
                to: first.state.to_string(),
            })
        }
        None => return Err(Error::Internal("empty history".into())),
    }
    let mut state = InstanceState::Requested;
    for step in steps {
        if !state.can_transition_to(step.state) {
            return Err(Error::IllegalTransition {
                from: state.to_string(),
                to: step.state.to_string(),
            });
        }
        state = step.state;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClusterState {
    Deploying,
    Active,
    Destroying,
    Destroyed,
    PartialFailure,
}

impl fmt::Display for ClusterState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ClusterState::Deploying => "DEPLOYING",
            ClusterState::Active => "ACTIVE",
            ClusterState::Destroying => "DESTROYING",
            ClusterState::Destroyed => "DESTROYED",
            ClusterState::PartialFailure => "PARTIAL_FAILURE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: ClusterId,
    pub definition_id: DefinitionId,
    pub name: String,
    pub owner: String,
    pub state: ClusterState,
    #[serde(default)]
    pub instances: Vec<InstanceId>,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub cluster: Cluster,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestState {
    New,
    Claimed,
    InProgress,
    Done,
    Failed,
}

impl RequestState {
    pub fn is_final(self) -> bool {
        matches!(self, RequestState::Done | RequestState::Failed)
    }

    pub fn is_leased(self) -> bool {
        matches!(self, RequestState::Claimed | RequestState::InProgress)
    }
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RequestState::New => "NEW",
            RequestState::Claimed => "CLAIMED",
            RequestState::InProgress => "IN_PROGRESS",
            RequestState::Done => "DONE",
            RequestState::Failed => "FAILED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestPayload {
    CreateCluster {
        cluster_id: ClusterId,
    },
    ScaleService {
        cluster_id: ClusterId,
        service: String,
        target: u32,
        #[serde(default)]
        delta: i64,
    },
    PauseInstance {
        instance_id: InstanceId,
    },
    ResumeInstance {
        instance_id: InstanceId,
    },
    DestroyInstance {
        instance_id: InstanceId,
    },
    DestroyCluster {
        cluster_id: ClusterId,
    },
}

impl RequestPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            RequestPayload::CreateCluster { .. } => "CREATE_CLUSTER",
            RequestPayload::ScaleService { .. } => "SCALE_SERVICE",
            RequestPayload::PauseInstance { .. } => "PAUSE_INSTANCE",
            RequestPayload::ResumeInstance { .. } => "RESUME_INSTANCE",
            RequestPayload::DestroyInstance { .. } => "DESTROY_INSTANCE",
            RequestPayload::DestroyCluster { .. } => "DESTROY_CLUSTER",
        }
    }

    pub fn cluster_id(&self) -> Option<&ClusterId> {
        match self {
            RequestPayload::CreateCluster { cluster_id }
            | RequestPayload::ScaleService { cluster_id, .. }
            | RequestPayload::DestroyCluster { cluster_id } => Some(cluster_id),
            _ => None,
        }
    }
}

/// One lease held on a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseRecord {
    pub agent: String,
    pub claimed_at: Timestamp,
    pub lease_expires_at: Timestamp,
    #[serde(default)]
    pub released_at: Option<Timestamp>,
}

impl LeaseRecord {
    /// When the holder's exclusive window actually ended.
    pub fn effective_end(&self) -> Timestamp {
        match self.released_at {
            Some(r) => r.min(self.lease_expires_at),
            None => self.lease_expires_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    #[serde(flatten)]
    pub payload: RequestPayload,
    pub principal: Principal,
    pub state: RequestState,
    #[serde(default)]
    pub claimed_by: Option<String>,
    #[serde(default)]
    pub lease_expires_at: Option<Timestamp>,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    #[serde(default)]
    pub result: Option<serde_json::Value>,
    #[serde(default)]
    pub error: Option<ErrorBody>,
    #[serde(default)]
    pub not_before: Option<Timestamp>,
    pub seq: u64,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    #[serde(default)]
    pub leases: Vec<LeaseRecord>,
}

impl Request {
    pub fn owner(&self) -> &str {
        &self.principal.user
    }

    pub fn kind(&self) -> &'static str {
        self.payload.kind()
    }
}

/// Input to [`Store::enqueue`](super::Store::enqueue).
#[derive(Debug, Clone)]
pub struct NewRequest {
    pub payload: RequestPayload,
    pub principal: Principal,
    pub idempotency_key: Option<String>,
}

impl NewRequest {
    pub fn new(payload: RequestPayload, principal: Principal) -> Self {
        Self {
            payload,
            principal,
            idempotency_key: None,
        }
    }

    pub fn with_idempotency_key(mut self, key: Option<String>) -> Self {
        self.idempotency_key = key;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub id: UserId,
    pub username: String,
    /// PHC string.
    pub password_digest: String,
    #[serde(default)]
    pub groups: BTreeSet<String>,
}

impl UserAccount {
    pub fn principal(&self) -> Principal {
        Principal {
            user: self.username.clone(),
            groups: self.groups.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCredential {
    pub id: CredentialId,
    pub owner: String,
    /// Hex sha256 of the secret.
    pub secret_digest: String,
    pub created_at: Timestamp,
    #[serde(default)]
    pub revoked: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn transition_table() {
        use InstanceState::*;
        let legal = [
            (Requested, Starting),
            (Starting, Running),
            (Starting, Failed),
            (Running, Paused),
            (Paused, Running),
            (Running, Destroying),
            (Paused, Destroying),
            (Destroying, Destroyed),
        ];
        for from in InstanceState::ALL {
            for to in InstanceState::ALL {
                assert_eq!(from.can_transition_to(to), legal.contains(&(from, to)), "{from} -> {to}");
            }
        }
    }

    #[test]
    fn terminal_states_have_no_exits() {
        for from in [InstanceState::Destroyed, InstanceState::Failed] {
            assert!(InstanceState::ALL.iter().all(|to| !from.can_transition_to(*to)));
        }
    }

    #[test]
    fn request_json_shape() {
        let r = Request {
            id: RequestId::from("r1"),
            payload: RequestPayload::ScaleService {
                cluster_id: ClusterId::from("c1"),
                service: "workers".into(),
                target: 4,
                delta: 2,
            },
            principal: Principal::new("alice"),
            state: RequestState::New,
            claimed_by: None,
            lease_expires_at: None,
            attempts: 0,
            idempotency_key: None,
            result: None,
            error: None,
            not_before: None,
            seq: 1,
            created_at: Timestamp(5),
            updated_at: Timestamp(5),
            leases: vec![],
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["kind"], "SCALE_SERVICE");
        assert_eq!(v["payload"]["target"], 4);
        assert_eq!(v["state"], "NEW");
        let back: Request = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        /// Walking any sequence of attempted transitions through `apply`
        /// yields a history that replays to the same state.
        #[test]
        fn applied_histories_replay(steps in proptest::collection::vec(0usize..7, 0..30)) {
            let mut inst = Instance::new(ClusterId::from("c"), "s", InstanceRole::Original, Timestamp(0));
            for (i, s) in steps.into_iter().enumerate() {
                let to = InstanceState::ALL[s];
                let before = inst.state;
                match inst.apply(to, Timestamp(i as i64 + 1)) {
                    Ok(()) => prop_assert!(before == to || before.can_transition_to(to)),
                    Err(_) => prop_assert_eq!(inst.state, before),
                }
            }
            prop_assert_eq!(replay_history(&inst.history).unwrap(), inst.state);
        }
    }
}
