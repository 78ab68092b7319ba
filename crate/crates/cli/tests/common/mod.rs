#![allow(dead_code)]

use std::collections::BTreeSet;
use std::io::Write;
use std::process::{Command, Output};

use cvmg_core::clock::system_clock;
use cvmg_core::cluster::DefinitionDocument;
use cvmg_core::lab::{head_workers, AgentPool, Lab};
use cvmg_core::store::Store;
use cvmg_gateway::{auth, spawn, Api, ServerHandle};

/// Simulated clouds, gateway agents and a REST server sharing one store.
pub struct Deployment {
    pub agents: Option<AgentPool>,
    pub server: ServerHandle,
    pub lab: Lab,
    pub credential: String,
    pub secret: String,
    pub home: tempfile::TempDir,
}

pub fn deployment(clouds: &[(&str, u32)], agents: usize) -> Deployment {
    let store = Store::memory(system_clock());
    auth::add_user(&store, "alice", "pw", BTreeSet::new()).unwrap();
    let (cred, secret) = auth::issue_credential(&store, "alice").unwrap();
    let mut lab = Lab::new(store.clone()).unwrap();
    for (id, slots) in clouds {
        lab.add_standard_cloud(id, *slots).unwrap();
    }
    let agents = (agents > 0).then(|| lab.spawn_agents(agents));
    let server = spawn(Api::new(store), "127.0.0.1:0").unwrap();
    Deployment {
        agents,
        server,
        lab,
        credential: format!("{}:{secret}", cred.id),
        secret,
        home: tempfile::tempdir().unwrap(),
    }
}

impl Deployment {
    /// The `cvmg` binary with only this deployment's environment.
    pub fn command(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_cvmg"));
        c.env_clear()
            .env("HOME", self.home.path())
            .env("XDG_CONFIG_HOME", self.home.path())
            .env("CVMG_SERVER", self.server.url())
            .env("CVMG_CREDENTIAL", &self.credential);
        c
    }

    pub fn cvmg(&self, args: &[&str]) -> Output {
        self.command().args(args).output().unwrap()
    }
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

pub fn definition_file(owner: &str, workers: u32) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
    let doc = DefinitionDocument::from(&head_workers(owner, workers)).to_toml().unwrap();
    f.write_all(doc.as_bytes()).unwrap();
    f
}
