use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use cvmg_core::bus::{connect_tcp, TcpBroker};
use cvmg_core::clock::system_clock;
use cvmg_core::cloud::{agent_bus_name, CloudAgent, CloudAgentConfig};
use cvmg_core::cluster::DefinitionDocument;
use cvmg_core::gateway::{CloudClient, GatewayAgentConfig, Orchestrator, Worker};
use cvmg_core::lab::{head_workers, Lab};
use cvmg_core::store::Store;
use cvmg_core::{Error, Result};
use cvmg_gateway::{auth, spawn, Api, ServerConfig};

#[derive(Parser)]
#[command(name = "cvmg-gateway", version, about = "Cloud gateway server, agents and bus broker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the REST server.
    Server {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
        /// Overrides the configured store path.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run a gateway agent that works the request queue.
    Agent {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the cloud agent for one cloud.
    CloudAgent {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the message bus broker.
    Bus {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
    },
    /// Manage accounts.
    User {
        #[command(subcommand)]
        command: UserCommand,
    },
    /// Issue API credentials directly against the store.
    Credential {
        #[command(subcommand)]
        command: CredentialCommand,
    },
    /// Everything in one process: two simulated clouds A (3 slots) and B
    /// (10 slots), gateway agents and the REST server, plus a demo account.
    Demo {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        /// Persist state here instead of in memory.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        agents: usize,
        /// Write a head + 2 workers definition document here.
        #[arg(long)]
        definition_out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum UserCommand {
    /// Add an account; the password is read from the first line of stdin.
    Add {
        username: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long = "group")]
        groups: Vec<String>,
    },
}

#[derive(Subcommand)]
enum CredentialCommand {
    /// Print a new `<id>:<secret>` pair for an existing user.
    Create {
        username: String,
        #[arg(long)]
        store: PathBuf,
    },
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::BadRequest(format!("{}: {e}", path.display())))
}

fn open_store(path: &Path) -> Result<Store> {
    Store::file(path, system_clock())
}

fn park_forever() -> ! {
    loop {
        thread::park();
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Internal(e.to_string())
}

fn run_server(config: Option<PathBuf>, listen: Option<String>, store: Option<PathBuf>) -> Result<()> {
    let mut cfg = match &config {
        Some(path) => ServerConfig::from_toml(&read_file(path)?)?,
        None => ServerConfig {
            listen: "127.0.0.1:8080".into(),
            store: store.clone().ok_or_else(|| Error::BadRequest("--config or --store is required".into()))?,
            pairing_ttl_s: None,
        },
    };
    if let Some(l) = listen {
        cfg.listen = l;
    }
    if let Some(s) = store {
        cfg.store = s;
    }
    let mut api = Api::new(open_store(&cfg.store)?);
    if let Some(ttl) = cfg.pairing_ttl() {
        api = api.with_pairing_ttl(ttl);
    }
    let server = spawn(api, &cfg.listen).map_err(io)?;
    tracing::info!(url = %server.url(), "gateway server listening");
    server.wait().map_err(io)
}

fn run_agent(config: &Path) -> Result<()> {
    let cfg = GatewayAgentConfig::from_toml(&read_file(config)?)?;
    let store = open_store(&cfg.store)?;
    let session = Arc::new(connect_tcp(cfg.bus.as_str(), &cfg.name)?);
    let settings = cfg.settings();
    let client = CloudClient::new(session, settings.bus_timeout);
    let orchestrator = Arc::new(Orchestrator::new(store.clone(), client, settings));
    let worker = Worker::new(store, orchestrator, cfg.worker());
    tracing::info!(name = %cfg.name, "gateway agent polling");
    worker.run(&AtomicBool::new(false));
    Ok(())
}

fn run_cloud_agent(config: &Path) -> Result<()> {
    let cfg = CloudAgentConfig::from_toml(&read_file(config)?)?;
    let agent = Arc::new(CloudAgent::new(cfg.descriptor(), cfg.build_driver(system_clock())));
    let session = connect_tcp(cfg.bus.as_str(), &agent_bus_name(&cfg.cloud_id))?;
    agent.serve(&session)?;
    tracing::info!(cloud = %cfg.cloud_id, "cloud agent serving");
    park_forever()
}

fn run_bus(listen: &str) -> Result<()> {
    let broker = TcpBroker::bind(listen)?;
    tracing::info!(addr = %broker.local_addr(), "bus broker listening");
    park_forever()
}

fn add_user(username: &str, store: &Path, groups: Vec<String>) -> Result<()> {
    let mut password = String::new();
    std::io::stdin().lock().read_line(&mut password).map_err(io)?;
    let password = password.trim_end_matches(['\n', '\r']);
    if password.is_empty() {
        return Err(Error::InvalidValue("empty password on stdin".into()));
    }
    let user = auth::add_user(&open_store(store)?, username, password, groups.into_iter().collect())?;
    println!("{}", user.id);
    Ok(())
}

fn create_credential(username: &str, store: &Path) -> Result<()> {
    let (cred, secret) = auth::issue_credential(&open_store(store)?, username)?;
    println!("{}:{secret}", cred.id);
    Ok(())
}

fn run_demo(listen: &str, store: Option<PathBuf>, agents: usize, definition_out: Option<PathBuf>) -> Result<()> {
    let store = match store {
        Some(path) => open_store(&path)?,
        None => Store::memory(system_clock()),
    };
    let mut lab = Lab::new(store.clone())?;
    lab.add_standard_cloud("A", 3)?;
    lab.add_standard_cloud("B", 10)?;
    let _pool = lab.spawn_agents(agents.max(1));
    if store.user("demo")?.is_none() {
        let password = auth::secret_digest(&format!("{:?}", std::time::SystemTime::now()));
        auth::add_user(&store, "demo", &password, BTreeSet::new())?;
    }
    let (cred, secret) = auth::issue_credential(&store, "demo")?;
    if let Some(path) = definition_out {
        let doc = DefinitionDocument::from(&head_workers("demo", 2)).to_toml()?;
        std::fs::write(&path, doc).map_err(io)?;
        eprintln!("definition document written to {}", path.display());
    }
    let server = spawn(Api::new(store), listen).map_err(io)?;
    println!("CVMG_SERVER={}", server.url());
    println!("CVMG_CREDENTIAL={}:{secret}", cred.id);
    server.wait().map_err(io)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Server { config, listen, store } => run_server(config, listen, store),
        Command::Agent { config } => run_agent(&config),
        Command::CloudAgent { config } => run_cloud_agent(&config),
        Command::Bus { listen } => run_bus(&listen),
        Command::User {
            command: UserCommand::Add { username, store, groups },
        } => add_user(&username, &store, groups),
        Command::Credential {
            command: CredentialCommand::Create { username, store },
        } => create_credential(&username, &store),
        Command::Demo {
            listen,
            store,
            agents,
            definition_out,
        } => run_demo(&listen, store, agents, definition_out),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {} ({})", e, e.code());
            ExitCode::FAILURE
        }
    }
}
