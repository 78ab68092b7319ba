use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;

use crate::bus::Session;
use crate::cloud::protocol::{parse_reply, CloudRequest, Started, StateReport};
use crate::cloud::{agent_bus_name, CapacityReport, DriverState, LifecycleAction, CAPACITY_CHANNEL};
use crate::cluster::OfferingTriple;
use crate::error::{Error, Result};
use crate::principal::Principal;

/// The gateway agent's side of the cloud agent protocol.
#[derive(Debug, Clone)]
pub struct CloudClient {
    session: Arc<Session>,
    timeout: Duration,
}

impl CloudClient {
    pub fn new(session: Arc<Session>, timeout: Duration) -> Self {
        Self { session, timeout }
    }

    /// One report per cloud agent that answered in time, sorted by cloud id.
    pub fn discover_capacity(&self, principal: &Principal, offerings: &[OfferingTriple]) -> Result<Vec<CapacityReport>> {
        let body = serde_json::to_value(CloudRequest::Capacity {
            principal: principal.clone(),
            offerings: offerings.to_vec(),
        })?;
        let mut reports: Vec<CapacityReport> = self
            .session
            .gather(CAPACITY_CHANNEL, body, self.timeout)?
            .into_iter()
            .filter_map(|m| parse_reply(m.body).ok())
            .collect();
        if reports.is_empty() {
            return Err(Error::NoClouds);
        }
        reports.sort_by(|a, b| a.cloud_id.cmp(&b.cloud_id));
        reports.dedup_by(|a, b| a.cloud_id == b.cloud_id);
        Ok(reports)
    }

    fn call<T: DeserializeOwned>(&self, cloud_id: &str, req: CloudRequest) -> Result<T> {
        let body = serde_json::to_value(req)?;
        parse_reply(self.session.request(&agent_bus_name(cloud_id), body, self.timeout)?)
    }

    pub fn start(
        &self,
        cloud_id: &str,
        principal: &Principal,
        image_id: &str,
        offerings: &OfferingTriple,
        user_data: &str,
    ) -> Result<String> {
        let started: Started = self.call(
            cloud_id,
            CloudRequest::Start {
                principal: principal.clone(),
                image_id: image_id.to_owned(),
                offerings: offerings.clone(),
                user_data: user_data.to_owned(),
            },
        )?;
        Ok(started.driver_ref)
    }

    pub fn lifecycle(&self, cloud_id: &str, driver_ref: &str, action: LifecycleAction) -> Result<DriverState> {
        let driver_ref = driver_ref.to_owned();
        let req = match action {
            LifecycleAction::Pause => CloudRequest::Pause { driver_ref },
            LifecycleAction::Resume => CloudRequest::Resume { driver_ref },
            LifecycleAction::Destroy => CloudRequest::Destroy { driver_ref },
        };
        self.call::<StateReport>(cloud_id, req).map(|r| r.state)
    }

    pub fn status(&self, cloud_id: &str, driver_ref: &str) -> Result<DriverState> {
        self.call::<StateReport>(
            cloud_id,
            CloudRequest::Status {
                driver_ref: driver_ref.to_owned(),
            },
        )
        .map(|r| r.state)
    }
}
