mod common;

use std::io::Write;
use std::process::Stdio;

use common::{definition_file, deployment, json, stderr, stdout};

#[test]
fn overflow_through_the_binary() {
    let d = deployment(&[("A", 3), ("B", 10)], 2);
    let def = definition_file("alice", 2);
    let out = d.cvmg(&["-o", "json", "cluster", "deploy", def.path().to_str().unwrap(), "--name", "batch-1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let created = json(&out);
    let cid = created["cluster_id"].as_str().unwrap().to_owned();
    let rid = created["request_id"].as_str().unwrap().to_owned();
    let out = d.cvmg(&["request", "wait", &rid, "--timeout", "30", "--interval-ms", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("state: DONE"));

    let scaled = json(&d.cvmg(&["-o", "json", "cluster", "scale", &cid, "worker", "--target", "6"]));
    assert_eq!(scaled["delta"], 4);
    let rid = scaled["request_id"].as_str().unwrap();
    assert_eq!(d.cvmg(&["request", "wait", rid, "--interval-ms", "20"]).status.code(), Some(0));

    let out = d.cvmg(&["cluster", "show", &cid]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.starts_with(&format!("cluster {cid} (batch-1) ACTIVE")), "{text}");
    let replica_rows: Vec<&str> = text.lines().filter(|l| l.contains("REPLICA")).collect();
    assert_eq!(replica_rows.len(), 1, "{text}");
    assert!(replica_rows[0].starts_with("B ") && replica_rows[0].contains("head"));
    assert_eq!(text.lines().filter(|l| l.starts_with("A ")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("B ")).count(), 5);

    let list = json(&d.cvmg(&["-o", "json", "cluster", "list"]));
    assert_eq!(list[0]["live_instances"], 8);
}

#[test]
fn exit_codes_follow_error_classes() {
    let d = deployment(&[("A", 3)], 1);
    let code = |args: &[&str]| d.cvmg(args).status.code();
    assert_eq!(code(&["cluster", "show", "0123"]), Some(4));
    assert_eq!(code(&["cluster", "frobnicate"]), Some(2));

    let def = definition_file("alice", 1);
    let created = json(&d.cvmg(&["-o", "json", "cluster", "deploy", def.path().to_str().unwrap()]));
    let cid = created["cluster_id"].as_str().unwrap().to_owned();
    assert_eq!(code(&["request", "wait", created["request_id"].as_str().unwrap()]), Some(0));
    assert_eq!(code(&["request", "wait", created["request_id"].as_str().unwrap()]), Some(0), "already final");
    assert_eq!(code(&["cluster", "scale", &cid, "head", "--target", "2"]), Some(2));
    let snap = json(&d.cvmg(&["-o", "json", "cluster", "show", &cid]));
    let inst = snap["instances"][0]["id"].as_str().unwrap().to_owned();
    assert_eq!(code(&["instance", "resume", &inst]), Some(5));

    let bad = d.command().env("CVMG_CREDENTIAL", "nobody:nothing").args(["cluster", "list"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    assert!(stderr(&bad).contains("UNAUTHENTICATED"));

    let big = definition_file("alice", 20);
    let created = json(&d.cvmg(&["-o", "json", "cluster", "deploy", big.path().to_str().unwrap()]));
    let out = d.cvmg(&["-o", "json", "request", "wait", created["request_id"].as_str().unwrap(), "--interval-ms", "20"]);
    assert_eq!(out.status.code(), Some(6), "{}", stderr(&out));
    assert_eq!(json(&out)["error"]["code"], "INSUFFICIENT_CAPACITY");
}

#[test]
fn wait_times_out_without_agents() {
    let d = deployment(&[("A", 3)], 0);
    let def = definition_file("alice", 1);
    let created = json(&d.cvmg(&["-o", "json", "cluster", "deploy", def.path().to_str().unwrap()]));
    let started = std::time::Instant::now();
    let out = d.cvmg(&["request", "wait", created["request_id"].as_str().unwrap(), "--timeout", "1"]);
    assert_eq!(out.status.code(), Some(7));
    assert!(started.elapsed().as_secs_f64() < 10.0);
    assert!(stdout(&out).contains("state: NEW"));
}

#[test]
fn secret_never_appears_in_output() {
    let d = deployment(&[("A", 3)], 0);
    let runs = [
        d.cvmg(&["cluster", "list"]),
        d.cvmg(&["-o", "json", "cluster", "show", "missing"]),
        d.command().env("CVMG_SERVER", "http://127.0.0.1:9").args(["cluster", "list"]).output().unwrap(),
        d.cvmg(&["request", "show", "missing"]),
    ];
    for out in &runs {
        assert!(!stdout(out).contains(&d.secret) && !stderr(out).contains(&d.secret));
    }
    assert_eq!(runs[2].status.code(), Some(1));
    assert!(stderr(&runs[2]).contains("UNREACHABLE"));
}

#[test]
fn flags_override_env_and_env_overrides_config_file() {
    let d = deployment(&[("A", 3)], 0);
    let cfg = d.home.path().join("cvmg.toml");
    std::fs::write(&cfg, format!("server = \"{}\"\ncredential = \"{}\"\noutput = \"json\"\n", d.server.url(), d.credential)).unwrap();
    let file_only = d
        .command()
        .env_remove("CVMG_SERVER")
        .env_remove("CVMG_CREDENTIAL")
        .env("CVMG_CONFIG", &cfg)
        .args(["cluster", "list"])
        .output()
        .unwrap();
    assert_eq!(file_only.status.code(), Some(0), "{}", stderr(&file_only));
    assert_eq!(json(&file_only), serde_json::json!([]));

    let env_wins = d
        .command()
        .env("CVMG_SERVER", "http://127.0.0.1:9")
        .args(["--config", cfg.to_str().unwrap(), "cluster", "list"])
        .output()
        .unwrap();
    assert_eq!(env_wins.status.code(), Some(1), "env server should beat the file");

    let flag_wins = d
        .command()
        .env("CVMG_SERVER", "http://127.0.0.1:9")
        .args(["--server", &d.server.url(), "cluster", "list"])
        .output()
        .unwrap();
    assert_eq!(flag_wins.status.code(), Some(0));
    assert_eq!(stdout(&flag_wins), "CLUSTER  NAME  STATE  LIVE\n");

    let default_location = d.home.path().join("cvmg");
    std::fs::create_dir_all(&default_location).unwrap();
    std::fs::copy(&cfg, default_location.join("config.toml")).unwrap();
    let discovered = d
        .command()
        .env_remove("CVMG_SERVER")
        .env_remove("CVMG_CREDENTIAL")
        .args(["cluster", "list"])
        .output()
        .unwrap();
    assert_eq!(discovered.status.code(), Some(0), "{}", stderr(&discovered));
}

#[test]
fn contexts_and_pairing_through_the_binary() {
    let d = deployment(&[("A", 3)], 0);
    let ctx = json(&d.cvmg(&[
        "-o", "json", "context", "create", "--name", "worker", "--plugin", "cernvm", "--plugin", "condor",
        "--set", "cernvm.repositories=atlas", "--set", "condor.role=worker",
    ]));
    let id = ctx["id"].as_str().unwrap().to_owned();
    let rendered = stdout(&d.cvmg(&["context", "render", &id]));
    assert!(rendered.starts_with("[amiconfig]"));

    let session = json(&d.cvmg(&["-o", "json", "pairing", "open", &id]));
    let pin = session["pin"].as_str().unwrap();
    let claim = d
        .command()
        .env_remove("CVMG_CREDENTIAL")
        .args(["pairing", "claim", pin, "--vm-name", "vm1", "--cernvm-version", "3.4", "--ip-address", "10.0.0.9"])
        .output()
        .unwrap();
    assert_eq!(claim.status.code(), Some(0), "{}", stderr(&claim));
    assert_eq!(stdout(&claim), rendered);
    let again = d.cvmg(&["pairing", "claim", pin, "--vm-name", "vm1", "--cernvm-version", "3.4", "--ip-address", "10.0.0.9"]);
    assert_eq!(again.status.code(), Some(5));
    assert!(stdout(&d.cvmg(&["pairing", "list-machines"])).contains("vm1"));

    let mut sealed = d
        .command()
        .args(["-o", "json", "context", "create", "--name", "s", "--plugin", "p", "--set", "p.k=v", "--passphrase-stdin"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    sealed.stdin.take().unwrap().write_all(b"hunter2\n").unwrap();
    let sealed = sealed.wait_with_output().unwrap();
    assert_eq!(sealed.status.code(), Some(0), "{}", stderr(&sealed));
    let sealed_id = json(&sealed)["id"].as_str().unwrap().to_owned();
    assert!(!stdout(&sealed).contains("hunter2"));
    assert_eq!(d.cvmg(&["context", "render", &sealed_id]).status.code(), Some(3));

    assert_eq!(d.cvmg(&["context", "publish", &id, "--category", "batch", "--tag", "condor"]).status.code(), Some(0));
    let hits = json(&d.cvmg(&["-o", "json", "context", "search", "--tag", "condor"]));
    assert_eq!(hits.as_array().unwrap().len(), 1);
}

#[test]
fn credentials_through_the_binary() {
    let d = deployment(&[("A", 3)], 0);
    let created = json(&d.cvmg(&["-o", "json", "credential", "create"]));
    let second = format!("{}:{}", created["id"].as_str().unwrap(), created["secret"].as_str().unwrap());
    let with_second = |args: &[&str]| d.command().env("CVMG_CREDENTIAL", &second).args(args).output().unwrap();
    assert_eq!(with_second(&["cluster", "list"]).status.code(), Some(0));
    assert_eq!(d.cvmg(&["credential", "revoke", created["id"].as_str().unwrap()]).status.code(), Some(0));
    assert_eq!(with_second(&["cluster", "list"]).status.code(), Some(3));
    assert_eq!(d.cvmg(&["cluster", "list"]).status.code(), Some(0));
}
