//! `cvmg`: a terminal client for the gateway REST API.

pub mod client;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};

use client::{ApiClient, Body, CallOptions, Endpoint, Reply};
use config::{CliConfig, FileConfig, Layer, OutputMode, ENV_CONFIG, ENV_CREDENTIAL, ENV_SERVER};
use error::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "cvmg", version, about = "Command-line client for the cloud gateway")]
pub struct Cli {
    /// Gateway URL, e.g. http://127.0.0.1:8080 (env CVMG_SERVER).
    #[arg(long, global = true)]
    pub server: Option<String>,
    /// API credential as <id>:<secret> (env CVMG_CREDENTIAL).
    #[arg(long, global = true)]
    pub credential: Option<String>,
    /// Config file (env CVMG_CONFIG; default ~/.config/cvmg/config.toml).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, short = 'o', global = true, value_enum)]
    pub output: Option<OutputMode>,
    /// Sent as Idempotency-Key on mutating calls.
    #[arg(long, global = true)]
    pub idempotency_key: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contextualization contexts and the marketplace.
    #[command(subcommand)]
    Context(ContextCmd),
    /// PIN pairing of running VMs.
    #[command(subcommand)]
    Pairing(PairingCmd),
    /// Cluster definition documents.
    #[command(subcommand)]
    Definition(DefinitionCmd),
    /// Deployed clusters.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Single instances of a cluster.
    #[command(subcommand)]
    Instance(InstanceCmd),
    /// API credentials of the calling user.
    #[command(subcommand)]
    Credential(CredentialCmd),
    /// Queued requests.
    #[command(subcommand)]
    Request(RequestCmd),
}

#[derive(Debug, Subcommand)]
pub enum ContextCmd {
    /// Create a context from plugin settings.
    Create {
        #[arg(long)]
        name: String,
        /// Enable a plugin; order is kept. Repeatable.
        #[arg(long = "plugin")]
        plugins: Vec<String>,
        /// A setting as plugin.key=value. Repeatable.
        #[arg(long = "set")]
        settings: Vec<String>,
        /// Encrypt under a passphrase read from the first line of stdin.
        #[arg(long)]
        passphrase_stdin: bool,
    },
    Show {
        id: String,
    },
    /// New context with the same body and this one as parent.
    Clone {
        id: String,
        #[arg(long)]
        passphrase_stdin: bool,
    },
    /// Print the amiconfig user-data.
    Render {
        id: String,
        #[arg(long)]
        passphrase_stdin: bool,
    },
    /// List a context in the marketplace.
    Publish {
        id: String,
        #[arg(long)]
        category: String,
        #[arg(long = "tag", required = true)]
        tags: Vec<String>,
    },
    /// Search the marketplace.
    Search {
        #[arg(long)]
        category: Option<String>,
        #[arg(long = "tag")]
        tags: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PairingCmd {
    /// Open a pairing pin for a context.
    Open { context_id: String },
    /// Claim a pin as a VM would; prints the user-data. Needs no credential.
    Claim {
        pin: String,
        #[arg(long)]
        vm_name: String,
        #[arg(long)]
        cernvm_version: String,
        #[arg(long)]
        ip_address: String,
    },
    /// Machines paired through your pins, newest first.
    ListMachines,
}

#[derive(Debug, Subcommand)]
pub enum DefinitionCmd {
    /// Store a definition document (TOML or JSON).
    Create { file: PathBuf },
    Show { id: String },
}

#[derive(Debug, Subcommand)]
pub enum ClusterCmd {
    /// Create a definition from a document file, then a cluster from it.
    Deploy {
        file: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    List,
    /// State and instances, grouped by cloud.
    Show {
        id: String,
    },
    /// Set the instance count of a scalable service.
    Scale {
        id: String,
        service: String,
        #[arg(long, allow_negative_numbers = true)]
        target: i64,
    },
    Destroy {
        id: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum InstanceCmd {
    Pause { id: String },
    Resume { id: String },
    Destroy { id: String },
}

#[derive(Debug, Subcommand)]
pub enum CredentialCmd {
    /// Issue another credential; the secret is printed once.
    Create,
    Revoke { id: String },
}

#[derive(Debug, Subcommand)]
pub enum RequestCmd {
    Show {
        id: String,
    },
    /// Poll until the request is DONE or FAILED.
    Wait {
        id: String,
        /// Give up after this many seconds.
        #[arg(long, default_value_t = 600)]
        timeout: u64,
        /// First polling interval in milliseconds; doubles up to 5 s.
        #[arg(long, default_value_t = 200)]
        interval_ms: u64,
    },
}

/// The endpoint a command exists to call. `request wait` has none of its
/// own: it polls the endpoint of `request show`.
pub fn primary_endpoint(cmd: &Command) -> Option<Endpoint> {
    Some(match cmd {
        Command::Context(c) => match c {
            ContextCmd::Create { .. } => Endpoint::ContextCreate,
            ContextCmd::Show { .. } => Endpoint::ContextGet,
            ContextCmd::Clone { .. } => Endpoint::ContextClone,
            ContextCmd::Render { .. } => Endpoint::ContextRender,
            ContextCmd::Publish { .. } => Endpoint::ContextPublish,
            ContextCmd::Search { .. } => Endpoint::Marketplace,
        },
        Command::Pairing(c) => match c {
            PairingCmd::Open { .. } => Endpoint::PairingOpen,
            PairingCmd::Claim { .. } => Endpoint::PairingClaim,
            PairingCmd::ListMachines => Endpoint::Machines,
        },
        Command::Definition(c) => match c {
            DefinitionCmd::Create { .. } => Endpoint::DefinitionCreate,
            DefinitionCmd::Show { .. } => Endpoint::DefinitionGet,
        },
        Command::Cluster(c) => match c {
            ClusterCmd::Deploy { .. } => Endpoint::ClusterCreate,
            ClusterCmd::List => Endpoint::ClusterList,
            ClusterCmd::Show { .. } => Endpoint::ClusterGet,
            ClusterCmd::Scale { .. } => Endpoint::ClusterScale,
            ClusterCmd::Destroy { .. } => Endpoint::ClusterDestroy,
        },
        Command::Instance(c) => match c {
            InstanceCmd::Pause { .. } => Endpoint::InstancePause,
            InstanceCmd::Resume { .. } => Endpoint::InstanceResume,
            InstanceCmd::Destroy { .. } => Endpoint::InstanceDestroy,
        },
        Command::Credential(c) => match c {
            CredentialCmd::Create => Endpoint::CredentialCreate,
            CredentialCmd::Revoke { .. } => Endpoint::CredentialRevoke,
        },
        Command::Request(c) => match c {
            RequestCmd::Show { .. } => Endpoint::RequestGet,
            RequestCmd::Wait { .. } => return None,
        },
    })
}

/// Process I/O, injectable for tests.
pub struct Io<'a> {
    pub env: &'a dyn Fn(&str) -> Option<String>,
    pub stdin: &'a mut dyn BufRead,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

fn read_secret_line(stdin: &mut dyn BufRead) -> Result<String, CliError> {
    let mut line = String::new();
    stdin
        .read_line(&mut line)
        .map_err(|e| CliError::usage(format!("reading passphrase from stdin: {e}")))?;
    let line = line.trim_end_matches(['\n', '\r']).to_owned();
    if line.is_empty() {
        return Err(CliError::usage("empty passphrase on stdin"));
    }
    Ok(line)
}

/// `plugin.key=value` settings grouped per plugin; every enabled plugin
/// gets a section even when it has no settings.
pub fn build_sections(plugins: &[String], settings: &[String]) -> Result<Map<String, Value>, CliError> {
    let mut sections = Map::new();
    for p in plugins {
        sections.entry(p.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    for s in settings {
        let (path, value) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set {s:?}: expected plugin.key=value")))?;
        let (plugin, key) = path
            .split_once('.')
            .ok_or_else(|| CliError::usage(format!("--set {s:?}: expected plugin.key=value")))?;
        let section = sections
            .entry(plugin.to_owned())
            .or_insert_with(|| Value::Object(Map::new()));
        section[key] = Value::String(value.to_owned());
    }
    Ok(sections)
}

fn read_document(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

struct Runner<'a, 'b> {
    api: ApiClient,
    mode: OutputMode,
    idempotency_key: Option<String>,
    io: &'a mut Io<'b>,
}

impl Runner<'_, '_> {
    fn print(&mut self, v: &Value, human: impl FnOnce(&Value) -> String) -> Result<(), CliError> {
        let text = match self.mode {
            OutputMode::Json => serde_json::to_string_pretty(v).unwrap_or_default() + "\n",
            OutputMode::Human => human(v),
        };
        self.io
            .stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::new("IO", e.to_string()))
    }

    fn opts(&self) -> CallOptions<'_> {
        CallOptions {
            idempotency_key: self.idempotency_key.as_deref(),
            ..CallOptions::default()
        }
    }

    fn mutate(&self, endpoint: Endpoint, params: &[&str], body: Body) -> Result<Value, CliError> {
        self.api.call(endpoint, params, body, &self.opts()).map(Reply::json)
    }

    fn passphrase(&mut self, wanted: bool) -> Result<Option<String>, CliError> {
        if wanted {
            read_secret_line(self.io.stdin).map(Some)
        } else {
            Ok(None)
        }
    }

    fn request_ids(v: &Value) -> String {
        output::fields(v, &["cluster_id", "instance_id", "request_id", "delta"])
    }

    fn run(&mut self, cmd: Command) -> Result<(), CliError> {
        match cmd {
            Command::Context(c) => self.context(c),
            Command::Pairing(c) => self.pairing(c),
            Command::Definition(c) => self.definition(c),
            Command::Cluster(c) => self.cluster(c),
            Command::Instance(c) => self.instance(c),
            Command::Credential(c) => self.credential(c),
            Command::Request(c) => self.request(c),
        }
    }

    fn context(&mut self, cmd: ContextCmd) -> Result<(), CliError> {
        match cmd {
            ContextCmd::Create {
                name,
                plugins,
                settings,
                passphrase_stdin,
            } => {
                let sections = build_sections(&plugins, &settings)?;
                let mut body = json!({ "name": name, "sections": sections, "enabled_plugins": plugins });
                if let Some(p) = self.passphrase(passphrase_stdin)? {
                    body["passphrase"] = Value::String(p);
                }
                let v = self.mutate(Endpoint::ContextCreate, &[], Body::Json(body))?;
                self.print(&v, output::context)
            }
            ContextCmd::Show { id } => {
                let v = self.api.get(Endpoint::ContextGet, &[&id])?;
                self.print(&v, output::context)
            }
            ContextCmd::Clone { id, passphrase_stdin } => {
                let body = match self.passphrase(passphrase_stdin)? {
                    Some(p) => json!({ "passphrase": p }),
                    None => json!({}),
                };
                let v = self.mutate(Endpoint::ContextClone, &[&id], Body::Json(body))?;
                self.print(&v, output::context)
            }
            ContextCmd::Render { id, passphrase_stdin } => {
                let passphrase = self.passphrase(passphrase_stdin)?;
                let opts = CallOptions {
                    passphrase: passphrase.as_deref(),
                    ..CallOptions::default()
                };
                let text = self.api.call(Endpoint::ContextRender, &[&id], Body::None, &opts)?.text();
                let v = json!({ "context_id": id, "user_data": text });
                self.print(&v, |v| v["user_data"].as_str().unwrap_or_default().to_owned())
            }
            ContextCmd::Publish { id, category, tags } => {
                let body = json!({ "category": category, "tags": tags });
                let v = self.mutate(Endpoint::ContextPublish, &[&id], Body::Json(body))?;
                self.print(&v, |v| output::fields(v, &["context_id", "category"]))
            }
            ContextCmd::Search { category, tags } => {
                let mut query: Vec<(&str, String)> = category.into_iter().map(|c| ("category", c)).collect();
                query.extend(tags.into_iter().map(|t| ("tag", t)));
                let opts = CallOptions {
                    query: &query,
                    ..CallOptions::default()
                };
                let v = self.api.call(Endpoint::Marketplace, &[], Body::None, &opts)?.json();
                self.print(&v, output::marketplace)
            }
        }
    }

    fn pairing(&mut self, cmd: PairingCmd) -> Result<(), CliError> {
        match cmd {
            PairingCmd::Open { context_id } => {
                let v = self.mutate(Endpoint::PairingOpen, &[], Body::Json(json!({ "context_id": context_id })))?;
                self.print(&v, output::pairing)
            }
            PairingCmd::Claim {
                pin,
                vm_name,
                cernvm_version,
                ip_address,
            } => {
                let body = json!({ "vm_name": vm_name, "cernvm_version": cernvm_version, "ip_address": ip_address });
                let text = self
                    .api
                    .call(Endpoint::PairingClaim, &[&pin], Body::Json(body), &CallOptions::default())?
                    .text();
                let v = json!({ "pin": pin, "user_data": text });
                self.print(&v, |v| v["user_data"].as_str().unwrap_or_default().to_owned())
            }
            PairingCmd::ListMachines => {
                let v = self.api.get(Endpoint::Machines, &[])?;
                self.print(&v, output::machines)
            }
        }
    }

    fn definition(&mut self, cmd: DefinitionCmd) -> Result<(), CliError> {
        match cmd {
            DefinitionCmd::Create { file } => {
                let doc = read_document(&file)?;
                let v = self.mutate(Endpoint::DefinitionCreate, &[], Body::Text(doc))?;
                self.print(&v, output::definition)
            }
            DefinitionCmd::Show { id } => {
                let v = self.api.get(Endpoint::DefinitionGet, &[&id])?;
                self.print(&v, output::definition)
            }
        }
    }

    fn cluster(&mut self, cmd: ClusterCmd) -> Result<(), CliError> {
        match cmd {
            ClusterCmd::Deploy { file, name } => {
                let doc = read_document(&file)?;
                let def = self
                    .api
                    .call(Endpoint::DefinitionCreate, &[], Body::Text(doc), &CallOptions::default())?
                    .json();
                let mut body = json!({ "definition_id": def["id"] });
                if let Some(n) = name {
                    body["name"] = Value::String(n);
                }
                let mut v = self.mutate(Endpoint::ClusterCreate, &[], Body::Json(body))?;
                v["definition_id"] = def["id"].clone();
                self.print(&v, |v| output::fields(v, &["definition_id", "cluster_id", "request_id"]))
            }
            ClusterCmd::List => {
                let v = self.api.get(Endpoint::ClusterList, &[])?;
                self.print(&v, output::clusters)
            }
            ClusterCmd::Show { id } => {
                let v = self.api.get(Endpoint::ClusterGet, &[&id])?;
                self.print(&v, output::cluster)
            }
            ClusterCmd::Scale { id, service, target } => {
                let v = self.mutate(Endpoint::ClusterScale, &[&id, &service], Body::Json(json!({ "target": target })))?;
                self.print(&v, Self::request_ids)
            }
            ClusterCmd::Destroy { id } => {
                let v = self.mutate(Endpoint::ClusterDestroy, &[&id], Body::None)?;
                self.print(&v, Self::request_ids)
            }
        }
    }

    fn instance(&mut self, cmd: InstanceCmd) -> Result<(), CliError> {
        let (endpoint, id) = match cmd {
            InstanceCmd::Pause { id } => (Endpoint::InstancePause, id),
            InstanceCmd::Resume { id } => (Endpoint::InstanceResume, id),
            InstanceCmd::Destroy { id } => (Endpoint::InstanceDestroy, id),
        };
        let v = self.mutate(endpoint, &[&id], Body::None)?;
        self.print(&v, Self::request_ids)
    }

    fn credential(&mut self, cmd: CredentialCmd) -> Result<(), CliError> {
        match cmd {
            CredentialCmd::Create => {
                let v = self.mutate(Endpoint::CredentialCreate, &[], Body::None)?;
                self.print(&v, |v| {
                    format!(
                        "{}:{}\n",
                        v["id"].as_str().unwrap_or_default(),
                        v["secret"].as_str().unwrap_or_default()
                    )
                })
            }
            CredentialCmd::Revoke { id } => {
                let v = self.mutate(Endpoint::CredentialRevoke, &[&id], Body::None)?;
                self.print(&v, |v| output::fields(v, &["id", "revoked"]))
            }
        }
    }

    fn request(&mut self, cmd: RequestCmd) -> Result<(), CliError> {
        match cmd {
            RequestCmd::Show { id } => {
                let v = self.api.get(Endpoint::RequestGet, &[&id])?;
                self.print(&v, output::request)
            }
            RequestCmd::Wait {
                id,
                timeout,
                interval_ms,
            } => {
                let v = wait_for(&self.api, &id, Duration::from_secs(timeout), Duration::from_millis(interval_ms))?;
                self.print(&v, output::request)?;
                match v["state"].as_str() {
                    Some("DONE") => Ok(()),
                    Some("FAILED") => {
                        let code = v["error"]["code"].as_str().unwrap_or("FAILED");
                        let message = v["error"]["message"].as_str().unwrap_or("request failed");
                        Err(CliError::new(code, message))
                    }
                    _ => Err(CliError::new("TIMEOUT", format!("request {id} still {} after {timeout}s", v["state"]))),
                }
            }
        }
    }
}

/// Longest pause between two polls of `request wait`.
pub const MAX_POLL_INTERVAL: Duration = Duration::from_secs(5);

/// Polls a request until it is final or `timeout` passes, doubling the
/// interval each time up to [`MAX_POLL_INTERVAL`]. Returns the last view.
pub fn wait_for(api: &ApiClient, id: &str, timeout: Duration, first: Duration) -> Result<Value, CliError> {
    let deadline = Instant::now() + timeout;
    let mut interval = first.max(Duration::from_millis(1));
    loop {
        let v = api.get(Endpoint::RequestGet, &[id])?;
        let state = v["state"].as_str().unwrap_or_default();
        let now = Instant::now();
        if state == "DONE" || state == "FAILED" || now >= deadline {
            return Ok(v);
        }
        thread::sleep(interval.min(deadline - now));
        interval = (interval * 2).min(MAX_POLL_INTERVAL);
    }
}

fn resolve_config(cli: &Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<CliConfig, CliError> {
    let flags = Layer {
        server: cli.server.clone(),
        credential: cli.credential.clone(),
        output: cli.output,
    };
    let env_layer = Layer {
        server: env(ENV_SERVER),
        credential: env(ENV_CREDENTIAL),
        output: None,
    };
    let explicit = cli.config.clone().or_else(|| env(ENV_CONFIG).map(PathBuf::from));
    let file = match explicit {
        Some(path) => FileConfig::load(&path)?.into(),
        None => match config::default_config_path() {
            Some(path) if path.exists() => FileConfig::load(&path)?.into(),
            _ => Layer::default(),
        },
    };
    CliConfig::resolve(&[flags, env_layer, file])
}

fn report(err: &CliError, mode: OutputMode, stderr: &mut dyn Write) -> i32 {
    let text = match mode {
        OutputMode::Json => err.to_json().to_string(),
        OutputMode::Human => format!("error: {err}"),
    };
    let _ = writeln!(stderr, "{text}");
    err.exit_code()
}

/// Runs one invocation and returns its exit status.
pub fn run<I, T>(args: I, io: &mut Io) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = write!(io.stderr, "{}", e.render());
            return EXIT_USAGE;
        }
        Err(e) => {
            let _ = write!(io.stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    let mode = cli.output.unwrap_or_default();
    let cfg = match resolve_config(&cli, io.env) {
        Ok(cfg) => cfg,
        Err(e) => return report(&e, mode, io.stderr),
    };
    let api = match cfg.server().and_then(|s| ApiClient::new(s, cfg.credential.clone())) {
        Ok(api) => api,
        Err(e) => return report(&e, cfg.output, io.stderr),
    };
    let mut runner = Runner {
        api,
        mode: cfg.output,
        idempotency_key: cli.idempotency_key.clone(),
        io,
    };
    match runner.run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e, cfg.output, runner.io.stderr),
    }
}
