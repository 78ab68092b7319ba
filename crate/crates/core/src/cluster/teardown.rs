use std::collections::BTreeSet;

use super::ClusterDefinition;
use crate::ids::InstanceId;
use crate::store::Instance;

/// Live fixed-service instances that no live instance of a dependent service
/// still uses within the same cloud.
///
/// Scope is per cloud because replicated fixed services only serve the
/// dependents running next to them. Scalable instances are never listed;
/// they are destroyable one by one.
pub fn teardown_candidates(def: &ClusterDefinition, instances: &[Instance]) -> BTreeSet<InstanceId> {
    instances
        .iter()
        .filter(|inst| inst.is_live())
        .filter(|inst| def.service(&inst.service_name).is_some_and(|s| s.is_fixed()))
        .filter(|inst| {
            let dependents: BTreeSet<&str> = def
                .dependents_of(&inst.service_name)
                .map(|s| s.name.as_str())
                .collect();
            !instances.iter().any(|other| {
                other.is_live()
                    && other.cloud_id == inst.cloud_id
                    && dependents.contains(other.service_name.as_str())
            })
        })
        .map(|inst| inst.id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{derive_dependencies, OfferingTriple, ServiceSpec};
    use crate::clock::Timestamp;
    use crate::ids::{ClusterId, DefinitionId};
    use crate::store::{InstanceRole, InstanceState};

    fn head_worker() -> ClusterDefinition {
        let t = OfferingTriple::new("c", "d", "n");
        ClusterDefinition {
            id: DefinitionId::random(),
            name: "hw".into(),
            owner: "alice".into(),
            services: derive_dependencies(vec![
                ServiceSpec::fixed("head", 1).with_offerings(&t),
                ServiceSpec::scalable("worker", 2).with_offerings(&t),
            ])
            .unwrap(),
        }
    }

    fn inst(id: &str, service: &str, cloud: &str, state: InstanceState) -> Instance {
        Instance {
            id: InstanceId::from(id),
            cluster_id: ClusterId::from("c"),
            service_name: service.into(),
            cloud_id: Some(cloud.into()),
            cloud_instance_ref: None,
            state,
            role: InstanceRole::Original,
            seq: 0,
            created_at: Timestamp(0),
            history: vec![],
        }
    }

    use InstanceState::*;

    #[test]
    fn head_with_live_workers_stays() {
        let d = head_worker();
        let all = [
            inst("h", "head", "A", Running),
            inst("w1", "worker", "A", Running),
            inst("w2", "worker", "A", Paused),
        ];
        assert!(teardown_candidates(&d, &all).is_empty());
    }

    #[test]
    fn head_without_workers_is_candidate() {
        let d = head_worker();
        let all = [
            inst("h", "head", "A", Running),
            inst("w1", "worker", "A", Destroyed),
            inst("w2", "worker", "A", Failed),
        ];
        assert_eq!(teardown_candidates(&d, &all), BTreeSet::from([InstanceId::from("h")]));
    }

    #[test]
    fn scope_is_per_cloud() {
        let d = head_worker();
        let all = [
            inst("hA", "head", "A", Running),
            inst("wA", "worker", "A", Running),
            inst("hB", "head", "B", Running),
            inst("wB", "worker", "B", Destroyed),
        ];
        assert_eq!(teardown_candidates(&d, &all), BTreeSet::from([InstanceId::from("hB")]));
    }

    #[test]
    fn dead_heads_are_not_candidates() {
        let d = head_worker();
        let all = [inst("h", "head", "A", Destroyed)];
        assert!(teardown_candidates(&d, &all).is_empty());
    }

    /// Every live/dead assignment over a two-cloud cluster of up to six
    /// instances.
    #[test]
    fn never_lists_instance_with_live_same_cloud_dependent() {
        let d = head_worker();
        let layout = [
            ("h1", "head", "A"),
            ("w1", "worker", "A"),
            ("w2", "worker", "A"),
            ("h2", "head", "B"),
            ("w3", "worker", "B"),
            ("w4", "worker", "B"),
        ];
        for n in 1..=layout.len() {
            for mask in 0u32..(1 << n) {
                let all: Vec<Instance> = layout[..n]
                    .iter()
                    .enumerate()
                    .map(|(i, (id, svc, cloud))| {
                        let state = if mask & (1 << i) != 0 { Running } else { Destroyed };
                        inst(id, svc, cloud, state)
                    })
                    .collect();
                let got = teardown_candidates(&d, &all);
                for id in &got {
                    let c = all.iter().find(|i| &i.id == id).unwrap();
                    assert_eq!(c.service_name, "head");
                    assert!(c.is_live());
                    assert!(!all.iter().any(|o| o.is_live() && o.service_name == "worker" && o.cloud_id == c.cloud_id));
                }
                // and every head with no live co-located worker is listed
                for h in all.iter().filter(|i| i.service_name == "head" && i.is_live()) {
                    let used = all.iter().any(|o| o.is_live() && o.service_name == "worker" && o.cloud_id == h.cloud_id);
                    assert_eq!(got.contains(&h.id), !used);
                }
            }
        }
    }
}
