//! Bus bodies exchanged with cloud agents.
//!
//! Requests carry a `verb` (`capacity?`, `start`, `pause`, `resume`,
//! `destroy`, `status`). Replies are `{"ok": ...}` or `{"error": ...}` with
//! an [`ErrorBody`].

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};

use super::driver::DriverState;
use crate::cluster::OfferingTriple;
use crate::error::{Error, ErrorBody, Result};
use crate::principal::Principal;

/// Channel every cloud agent listens on for capacity discovery.
pub const CAPACITY_CHANNEL: &str = "cvmg.capacity";

/// Bus name of the agent serving `cloud_id`.
pub fn agent_bus_name(cloud_id: &str) -> String {
    format!("cloud-{cloud_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verb", deny_unknown_fields)]
pub enum CloudRequest {
    #[serde(rename = "capacity?")]
    Capacity {
        principal: Principal,
        offerings: Vec<OfferingTriple>,
    },
    #[serde(rename = "start")]
    Start {
        principal: Principal,
        image_id: String,
        offerings: OfferingTriple,
        user_data: String,
    },
    #[serde(rename = "pause")]
    Pause { driver_ref: String },
    #[serde(rename = "resume")]
    Resume { driver_ref: String },
    #[serde(rename = "destroy")]
    Destroy { driver_ref: String },
    #[serde(rename = "status")]
    Status { driver_ref: String },
}

/// Free slots per offering triple for one principal on one cloud.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CapacityReport {
    pub cloud_id: String,
    #[serde(with = "triple_map")]
    pub free_slots: BTreeMap<OfferingTriple, u32>,
}

impl CapacityReport {
    pub fn slots(&self, triple: &OfferingTriple) -> u32 {
        self.free_slots.get(triple).copied().unwrap_or(0)
    }
}

/// JSON object keys must be strings, so the map travels as a list.
mod triple_map {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        offerings: OfferingTriple,
        free: u32,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<OfferingTriple, u32>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(k, v)| Entry {
                offerings: k.clone(),
                free: *v,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<OfferingTriple, u32>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.offerings, e.free)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Started {
    pub driver_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateReport {
    pub state: DriverState,
}

pub fn ok_reply<T: Serialize>(value: &T) -> Value {
    json!({ "ok": value })
}

pub fn error_reply(err: &Error) -> Value {
    json!({ "error": err.to_body() })
}

/// Unpacks a reply into the success payload or the remote error.
pub fn parse_reply<T: for<'de> Deserialize<'de>>(reply: Value) -> Result<T> {
    let Value::Object(mut obj) = reply else {
        return Err(Error::ProtocolError("reply is not an object".into()));
    };
    if let Some(err) = obj.remove("error") {
        let body: ErrorBody = serde_json::from_value(err).map_err(|e| Error::ProtocolError(e.to_string()))?;
        return Err(Error::from_body(&body));
    }
    let ok = obj
        .remove("ok")
        .ok_or_else(|| Error::ProtocolError("reply has neither ok nor error".into()))?;
    serde_json::from_value(ok).map_err(|e| Error::ProtocolError(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbs_on_the_wire() {
        let r = CloudRequest::Capacity {
            principal: Principal::new("alice"),
            offerings: vec![OfferingTriple::new("c", "d", "n")],
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["verb"], "capacity?");
        assert_eq!(serde_json::from_value::<CloudRequest>(v).unwrap(), r);
        let v = serde_json::to_value(CloudRequest::Destroy {
            driver_ref: "vm-1".into(),
        })
        .unwrap();
        assert_eq!(v, json!({"verb": "destroy", "driver_ref": "vm-1"}));
    }

    #[test]
    fn report_round_trip() {
        let t = OfferingTriple::new("c", "d", "n");
        let r = CapacityReport {
            cloud_id: "A".into(),
            free_slots: BTreeMap::from([(t.clone(), 3)]),
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["free_slots"][0]["free"], 3);
        assert_eq!(serde_json::from_value::<CapacityReport>(v).unwrap(), r);
        assert_eq!(r.slots(&t), 3);
        assert_eq!(r.slots(&OfferingTriple::new("x", "d", "n")), 0);
    }

    #[test]
    fn replies_unpack() {
        let ok: Started = parse_reply(ok_reply(&Started {
            driver_ref: "vm-7".into(),
        }))
        .unwrap();
        assert_eq!(ok.driver_ref, "vm-7");
        let err = parse_reply::<Started>(error_reply(&Error::QuotaExceeded("max_instances".into()))).unwrap_err();
        assert_eq!(err, Error::QuotaExceeded("max_instances".into()));
        assert!(matches!(parse_reply::<Started>(json!(3)), Err(Error::ProtocolError(_))));
    }
}
