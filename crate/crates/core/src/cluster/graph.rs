use std::collections::{BTreeSet, HashMap, HashSet};

use super::{ClusterDefinition, OfferingKind, ServiceKind, ServiceSpec, Violation};
use crate::error::{Error, Result};

/// Fills in the implicit edges: every fixed service depends on the fixed
/// services listed before it, and every scalable service depends on all
/// fixed services. Explicit edges are kept.
pub fn derive_dependencies(mut services: Vec<ServiceSpec>) -> Result<Vec<ServiceSpec>> {
    let mut seen = HashSet::new();
    for s in &services {
        if !seen.insert(s.name.as_str()) {
            return Err(Error::DuplicateName(s.name.clone()));
        }
    }
    let fixed: Vec<String> = services
        .iter()
        .filter(|s| s.is_fixed())
        .map(|s| s.name.clone())
        .collect();
    let mut earlier_fixed = Vec::new();
    for service in &mut services {
        match service.kind {
            ServiceKind::Fixed => {
                service.depends_on.extend(earlier_fixed.iter().cloned());
                earlier_fixed.push(service.name.clone());
            }
            ServiceKind::Scalable => service.depends_on.extend(fixed.iter().cloned()),
        }
    }
    Ok(services)
}

/// Every problem with the definition, or `Ok` when there are none.
pub fn validate_definition(def: &ClusterDefinition) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut kinds: HashMap<&str, ServiceKind> = HashMap::new();
    for s in &def.services {
        if kinds.insert(s.name.as_str(), s.kind).is_some() {
            violations.push(Violation::DuplicateName {
                service: s.name.clone(),
            });
        }
    }
    for s in &def.services {
        if s.kind == ServiceKind::Fixed && s.count == 0 {
            violations.push(Violation::BadCount {
                service: s.name.clone(),
            });
        }
        for kind in OfferingKind::ALL {
            if s.offerings.get(&kind).is_none_or(|v| v.trim().is_empty()) {
                violations.push(Violation::MissingOffering {
                    service: s.name.clone(),
                    kind,
                });
            }
        }
        for dep in &s.depends_on {
            match kinds.get(dep.as_str()) {
                None => violations.push(Violation::UnknownDependency {
                    service: s.name.clone(),
                    dependency: dep.clone(),
                }),
                Some(ServiceKind::Scalable) if s.is_fixed() => {
                    violations.push(Violation::InvalidEdge {
                        service: s.name.clone(),
                        dependency: dep.clone(),
                    })
                }
                Some(_) => {}
            }
        }
    }
    let (_, stuck) = kahn(def);
    if !stuck.is_empty() {
        violations.push(Violation::Cycle { services: stuck });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Kahn's algorithm over known edges, always picking the ready service that
/// appears first in the definition. Returns the order and the services that
/// could not be ordered (those on or behind a cycle).
fn kahn(def: &ClusterDefinition) -> (Vec<String>, Vec<String>) {
    let index: HashMap<&str, usize> = def
        .services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    let n = def.services.len();
    let mut remaining_deps = vec![0usize; n];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, s) in def.services.iter().enumerate() {
        let deps: BTreeSet<usize> = s
            .depends_on
            .iter()
            .filter_map(|d| index.get(d.as_str()).copied())
            .collect();
        remaining_deps[i] = deps.len();
        for d in deps {
            dependents[d].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| remaining_deps[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(next) = ready.pop_first() {
        order.push(next);
        for &d in &dependents[next] {
            remaining_deps[d] -= 1;
            if remaining_deps[d] == 0 {
                ready.insert(d);
            }
        }
    }
    let placed: HashSet<usize> = order.iter().copied().collect();
    let stuck = (0..n)
        .filter(|i| !placed.contains(i))
        .map(|i| def.services[i].name.clone())
        .collect();
    let order = order.into_iter().map(|i| def.services[i].name.clone()).collect();
    (order, stuck)
}

/// Topological order of services, ties broken by position in the definition.
pub fn deployment_order(def: &ClusterDefinition) -> Result<Vec<String>> {
    validate_definition(def).map_err(Error::InvalidDefinition)?;
    Ok(kahn(def).0)
}

/// Fixed services `service` needs co-located, directly or through other fixed
/// services. Scalable dependencies are not followed.
pub fn dependency_closure_fixed(def: &ClusterDefinition, service: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<&str> = vec![service];
    while let Some(current) = stack.pop() {
        let Some(spec) = def.service(current) else { continue };
        for dep in &spec.depends_on {
            if let Some(dep_spec) = def.service(dep) {
                if dep_spec.is_fixed() && dep != service && out.insert(dep.clone()) {
                    stack.push(dep);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::OfferingTriple;
    use crate::ids::DefinitionId;
    use proptest::prelude::*;

    fn triple() -> OfferingTriple {
        OfferingTriple::new("m1.small", "disk20", "default")
    }

    fn def(services: Vec<ServiceSpec>) -> ClusterDefinition {
        ClusterDefinition {
            id: DefinitionId::random(),
            name: "c".into(),
            owner: "alice".into(),
            services: services.into_iter().map(|s| s.with_offerings(&triple())).collect(),
        }
    }

    fn deps(services: &[ServiceSpec], name: &str) -> Vec<String> {
        services
            .iter()
            .find(|s| s.name == name)
            .unwrap()
            .depends_on
            .iter()
            .cloned()
            .collect()
    }

    #[test]
    fn head_worker_derivation() {
        let out = derive_dependencies(vec![ServiceSpec::fixed("head", 1), ServiceSpec::scalable("worker", 2)]).unwrap();
        assert_eq!(deps(&out, "head"), Vec::<String>::new());
        assert_eq!(deps(&out, "worker"), vec!["head"]);
    }

    #[test]
    fn two_fixed_one_scalable_derivation() {
        let out = derive_dependencies(vec![
            ServiceSpec::fixed("a", 1),
            ServiceSpec::fixed("b", 1),
            ServiceSpec::scalable("w", 0),
        ])
        .unwrap();
        assert_eq!(deps(&out, "a"), Vec::<String>::new());
        assert_eq!(deps(&out, "b"), vec!["a"]);
        assert_eq!(deps(&out, "w"), vec!["a", "b"]);
    }

    #[test]
    fn lone_scalable_has_no_deps() {
        let out = derive_dependencies(vec![ServiceSpec::scalable("w", 1)]).unwrap();
        assert!(out[0].depends_on.is_empty());
    }

    #[test]
    fn explicit_edges_are_unioned() {
        let out = derive_dependencies(vec![
            ServiceSpec::fixed("a", 1),
            ServiceSpec::scalable("w", 0),
            ServiceSpec::scalable("v", 0).depending_on(&["w"]),
        ])
        .unwrap();
        assert_eq!(deps(&out, "v"), vec!["a", "w"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = derive_dependencies(vec![ServiceSpec::fixed("a", 1), ServiceSpec::scalable("a", 1)]).unwrap_err();
        assert_eq!(err, Error::DuplicateName("a".into()));
    }

    #[test]
    fn cycle_detected() {
        let d = def(vec![
            ServiceSpec::scalable("a", 1).depending_on(&["b"]),
            ServiceSpec::scalable("b", 1).depending_on(&["a"]),
        ]);
        let v = validate_definition(&d).unwrap_err();
        assert!(v.iter().any(|v| v.code() == "CYCLE"), "{v:?}");
        assert!(matches!(deployment_order(&d), Err(Error::InvalidDefinition(_))));
    }

    #[test]
    fn self_dependency_is_a_cycle() {
        let d = def(vec![ServiceSpec::scalable("a", 1).depending_on(&["a"])]);
        assert_eq!(
            validate_definition(&d).unwrap_err(),
            vec![Violation::Cycle { services: vec!["a".into()] }]
        );
    }

    #[test]
    fn unknown_dependency_detected() {
        let d = def(vec![ServiceSpec::scalable("a", 1).depending_on(&["nosuch"])]);
        assert_eq!(
            validate_definition(&d).unwrap_err(),
            vec![Violation::UnknownDependency {
                service: "a".into(),
                dependency: "nosuch".into()
            }]
        );
    }

    #[test]
    fn fixed_on_scalable_is_invalid_edge() {
        let d = def(vec![
            ServiceSpec::scalable("w", 1),
            ServiceSpec::fixed("h", 1).depending_on(&["w"]),
        ]);
        let v = validate_definition(&d).unwrap_err();
        assert_eq!(v[0].code(), "INVALID_EDGE");
    }

    #[test]
    fn bad_count_and_missing_offering_reported_together() {
        let mut d = def(vec![ServiceSpec::fixed("h", 0)]);
        d.services[0].offerings.remove(&OfferingKind::Disk);
        let codes: Vec<_> = validate_definition(&d).unwrap_err().iter().map(|v| v.code()).collect();
        assert_eq!(codes, vec!["BAD_COUNT", "MISSING_OFFERING"]);
    }

    #[test]
    fn valid_head_worker_pair() {
        let services = derive_dependencies(vec![ServiceSpec::fixed("head", 1), ServiceSpec::scalable("worker", 2)]).unwrap();
        let d = def(services);
        assert_eq!(validate_definition(&d), Ok(()));
        assert_eq!(deployment_order(&d).unwrap(), vec!["head", "worker"]);
    }

    #[test]
    fn derived_order_a_b_w() {
        let services = derive_dependencies(vec![
            ServiceSpec::fixed("a", 1),
            ServiceSpec::fixed("b", 1),
            ServiceSpec::scalable("w", 0),
        ])
        .unwrap();
        assert_eq!(deployment_order(&def(services)).unwrap(), vec!["a", "b", "w"]);
    }

    #[test]
    fn independent_services_keep_list_order() {
        let d = def(vec![ServiceSpec::scalable("f1", 1), ServiceSpec::scalable("f2", 1)]);
        assert_eq!(deployment_order(&d).unwrap(), vec!["f1", "f2"]);
        let d = def(vec![ServiceSpec::fixed("f1", 1), ServiceSpec::fixed("f2", 1)]);
        assert_eq!(deployment_order(&d).unwrap(), vec!["f1", "f2"]);
    }

    #[test]
    fn dependency_order_beats_list_order() {
        let d = def(vec![
            ServiceSpec::scalable("w", 1).depending_on(&["h"]),
            ServiceSpec::fixed("h", 1),
        ]);
        assert_eq!(deployment_order(&d).unwrap(), vec!["h", "w"]);
    }

    #[test]
    fn fixed_closure_follows_fixed_chain_only() {
        let d = def(
            derive_dependencies(vec![
                ServiceSpec::fixed("a", 1),
                ServiceSpec::fixed("b", 1),
                ServiceSpec::scalable("w", 1),
                ServiceSpec::scalable("v", 1).depending_on(&["w"]),
            ])
            .unwrap(),
        );
        let names = |s: &str| dependency_closure_fixed(&d, s).into_iter().collect::<Vec<_>>();
        assert_eq!(names("w"), vec!["a", "b"]);
        assert_eq!(names("v"), vec!["a", "b"]);
        assert_eq!(names("b"), vec!["a"]);
        assert!(names("a").is_empty());
    }

    /// Random DAG: edges only point from later to earlier positions, then the
    /// list is shuffled so positions no longer agree with the topology.
    fn random_dag() -> impl Strategy<Value = ClusterDefinition> {
        (1usize..=10)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(any::<bool>(), n * n),
                    Just(()).prop_perturb(move |_, mut rng| {
                        let mut perm: Vec<usize> = (0..n).collect();
                        for i in (1..n).rev() {
                            let j = (rng.next_u32() as usize) % (i + 1);
                            perm.swap(i, j);
                        }
                        perm
                    }),
                )
            })
            .prop_map(|(n, edges, perm)| {
                let mut services: Vec<ServiceSpec> =
                    (0..n).map(|i| ServiceSpec::scalable(&format!("s{i}"), 1)).collect();
                for i in 0..n {
                    for j in 0..i {
                        if edges[i * n + j] {
                            services[i].depends_on.insert(format!("s{j}"));
                        }
                    }
                }
                let shuffled = perm.into_iter().map(|i| services[i].clone()).collect();
                def(shuffled)
            })
    }

    proptest! {
        #[test]
        fn order_is_topological(d in random_dag()) {
            let order = deployment_order(&d).unwrap();
            prop_assert_eq!(order.len(), d.services.len());
            let pos: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            prop_assert_eq!(pos.len(), d.services.len());
            for s in &d.services {
                for dep in &s.depends_on {
                    prop_assert!(pos[dep.as_str()] < pos[s.name.as_str()]);
                }
            }
        }

        #[test]
        fn derivation_is_idempotent(kinds in proptest::collection::vec(any::<bool>(), 0..8)) {
            let services: Vec<ServiceSpec> = kinds
                .iter()
                .enumerate()
                .map(|(i, fixed)| if *fixed { ServiceSpec::fixed(&format!("s{i}"), 1) } else { ServiceSpec::scalable(&format!("s{i}"), 1) })
                .collect();
            let once = derive_dependencies(services).unwrap();
            let twice = derive_dependencies(once.clone()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
