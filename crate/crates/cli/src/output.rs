//! Human-readable rendering of API replies. Machine mode prints the reply
//! JSON unchanged instead.

use serde_json::Value;

fn s(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Left-aligned columns separated by two spaces.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i + 1 == cells.len() {
                out.push_str(cell);
            } else {
                out.push_str(&format!("{cell:<w$}  "));
            }
        }
        out.trim_end().to_owned() + "\n"
    };
    let mut out = line(headers.to_vec());
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

fn list(v: &Value) -> &[Value] {
    v.as_array().map(Vec::as_slice).unwrap_or(&[])
}

pub fn context(v: &Value) -> String {
    let plugins: Vec<String> = list(&v["enabled_plugins"]).iter().map(s).collect();
    format!(
        "context {}\nname: {}\nowner: {}\nparent: {}\nencrypted: {}\nplugins: {}\n",
        s(&v["id"]),
        s(&v["name"]),
        s(&v["owner"]),
        s(&v["parent_id"]),
        v["encrypted"].as_bool().unwrap_or(false),
        plugins.join(", ")
    )
}

pub fn marketplace(v: &Value) -> String {
    let rows: Vec<Vec<String>> = list(v)
        .iter()
        .map(|e| {
            let tags: Vec<String> = list(&e["tags"]).iter().map(s).collect();
            vec![s(&e["context_id"]), s(&e["name"]), s(&e["category"]), tags.join(",")]
        })
        .collect();
    table(&["CONTEXT", "NAME", "CATEGORY", "TAGS"], &rows)
}

pub fn pairing(v: &Value) -> String {
    format!("pin {}\ncontext: {}\nexpires_at: {}\n", s(&v["pin"]), s(&v["context_id"]), s(&v["expires_at"]))
}

pub fn machines(v: &Value) -> String {
    let rows: Vec<Vec<String>> = list(v)
        .iter()
        .map(|m| vec![s(&m["vm_name"]), s(&m["cernvm_version"]), s(&m["ip_address"]), s(&m["paired_at"])])
        .collect();
    table(&["VM", "VERSION", "IP", "PAIRED_AT"], &rows)
}

pub fn definition(v: &Value) -> String {
    let rows: Vec<Vec<String>> = list(&v["services"])
        .iter()
        .map(|svc| {
            let deps: Vec<String> = list(&svc["depends_on"]).iter().map(s).collect();
            vec![s(&svc["name"]), s(&svc["kind"]), s(&svc["count"]), deps.join(",")]
        })
        .collect();
    let mut out = format!(
        "definition {}\nname: {}\nvalid: {}\n",
        s(&v["id"]),
        s(&v["name"]),
        v["valid"].as_bool().unwrap_or(false)
    );
    out.push_str(&table(&["SERVICE", "KIND", "COUNT", "DEPENDS_ON"], &rows));
    for violation in list(&v["violations"]) {
        out.push_str(&format!("violation: {}\n", s(&violation["code"])));
    }
    out
}

pub fn clusters(v: &Value) -> String {
    let rows: Vec<Vec<String>> = list(v)
        .iter()
        .map(|c| vec![s(&c["id"]), s(&c["name"]), s(&c["state"]), s(&c["live_instances"])])
        .collect();
    table(&["CLUSTER", "NAME", "STATE", "LIVE"], &rows)
}

/// Instances grouped by cloud, REPLICA role flagged.
pub fn cluster(v: &Value) -> String {
    let c = &v["cluster"];
    let mut instances: Vec<&Value> = list(&v["instances"]).iter().collect();
    instances.sort_by_key(|i| (s(&i["cloud_id"]), i["seq"].as_u64().unwrap_or(0)));
    let rows: Vec<Vec<String>> = instances
        .iter()
        .map(|i| {
            let flag = if i["role"] == "REPLICA" { "REPLICA" } else { "" };
            vec![s(&i["cloud_id"]), s(&i["service_name"]), s(&i["state"]), flag.to_owned(), s(&i["id"])]
        })
        .collect();
    let mut out = format!("cluster {} ({}) {}\n", s(&c["id"]), s(&c["name"]), s(&c["state"]));
    out.push_str(&table(&["CLOUD", "SERVICE", "STATE", "ROLE", "INSTANCE"], &rows));
    out
}

pub fn request(v: &Value) -> String {
    let mut out = format!(
        "request {}\nkind: {}\nstate: {}\nattempts: {}\n",
        s(&v["id"]),
        s(&v["kind"]),
        s(&v["state"]),
        s(&v["attempts"])
    );
    if let Some(e) = v["error"].as_object() {
        out.push_str(&format!(
            "error: {}: {}\n",
            e.get("code").map(s).unwrap_or_default(),
            e.get("message").map(s).unwrap_or_default()
        ));
    }
    out
}

/// `key value` lines for the listed keys that are present.
pub fn fields(v: &Value, keys: &[&str]) -> String {
    keys.iter()
        .filter(|k| !v[**k].is_null())
        .map(|k| format!("{} {}\n", k, s(&v[*k])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn table_aligns_columns() {
        let t = table(&["A", "LONGER"], &[vec!["xxxx".into(), "y".into()]]);
        assert_eq!(t, "A     LONGER\nxxxx  y\n");
    }

    #[test]
    fn cluster_view_flags_replicas_and_groups_by_cloud() {
        let snap = json!({
            "cluster": { "id": "c1", "name": "batch", "state": "ACTIVE" },
            "instances": [
                { "id": "i3", "cloud_id": "B", "service_name": "worker", "state": "RUNNING", "role": "ORIGINAL", "seq": 3 },
                { "id": "i1", "cloud_id": "A", "service_name": "head", "state": "RUNNING", "role": "ORIGINAL", "seq": 1 },
                { "id": "i2", "cloud_id": "B", "service_name": "head", "state": "RUNNING", "role": "REPLICA", "seq": 2 },
            ],
        });
        let out = cluster(&snap);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "cluster c1 (batch) ACTIVE");
        assert!(lines[2].starts_with("A ") && lines[2].contains("head"));
        assert!(lines[3].starts_with("B ") && lines[3].contains("REPLICA"));
        assert!(lines[4].starts_with("B ") && !lines[4].contains("REPLICA"));
    }

    #[test]
    fn request_view_shows_error() {
        let out = request(&json!({
            "id": "r", "kind": "CREATE_CLUSTER", "state": "FAILED", "attempts": 3,
            "error": { "code": "NO_CLOUDS", "message": "none" },
        }));
        assert!(out.ends_with("error: NO_CLOUDS: none\n"));
    }
}
