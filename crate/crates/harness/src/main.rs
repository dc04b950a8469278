use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtm_core::crypto::SuiteId;
use mtm_core::mtm::{MtmCommand, PCR_ENGINE};
use mtm_core::protocols::{MigrationConfig, ProtocolError};
use mtm_sim::persist::{self, PersistError};
use mtm_sim::{
    manufacturer, run_migration, run_scenario, run_take_ownership, FaultPlan, MigrationRun,
    OwnerSpec, SimDevice, TransportKind,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "mtm-sim",
    version,
    about = "Simulated multi-stakeholder MTM devices"
)]
struct Cli {
    /// Device seed for `device create`, channel seed for `migrate`, base seed for scenarios.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "mtm-state")]
    state_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Passphrase protecting device state files.
    #[arg(
        long,
        global = true,
        env = "MTM_SIM_PASSPHRASE",
        default_value = "mtm-sim",
        hide_env_values = true
    )]
    passphrase: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Create, boot or inspect a device.
    #[command(subcommand)]
    Device(DeviceCommand),
    /// Run remote take-ownership of a blank engine on a device.
    Takeown {
        #[arg(long)]
        device: String,
        /// Owner definition (TOML).
        #[arg(long)]
        owner: PathBuf,
        /// Defaults to the owner's first allowed purpose.
        #[arg(long)]
        purpose: Option<String>,
    },
    /// Migrate a remote owner's subsystem between two devices.
    Migrate(MigrateArgs),
    /// Quote a subsystem's engine state and verify it.
    Attest {
        #[arg(long)]
        device: String,
        #[arg(long)]
        ro: String,
        /// Verify as this owner instead of against the device's own records.
        #[arg(long)]
        owner: Option<PathBuf>,
    },
    /// Run a scenario file
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Subcommand)]
enum DeviceCommand {
    Create {
        name: String,
        #[arg(long, default_value = mtm_sim::DEFAULT_MANUFACTURER)]
        manufacturer: String,
        #[arg(long, value_enum, default_value_t = Suite::Standard)]
        suite: Suite,
        /// Manufacturer ships no boot components.
        #[arg(long)]
        empty_boot: bool,
        /// Replace an existing state file.
        #[arg(long)]
        force: bool,
    },
    Boot {
        device: String,
    },
    Inspect {
        device: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Standard,
    Toy,
}

#[derive(Args)]
struct MigrateArgs {
    #[arg(long)]
    source: String,
    #[arg(long)]
    dest: String,
    #[arg(long)]
    ro: String,
    /// Comma-separated faults, e.g. `drop:package,dup:status`.
    #[arg(long, default_value = "")]
    fault: FaultPlan,
    #[arg(long, default_value_t = mtm_core::protocols::migration::DEFAULT_TIMEOUT_TICKS)]
    timeout: u64,
    #[arg(long)]
    delete_before_send: bool,
    #[arg(long, value_enum, default_value_t = Transport::Memory)]
    transport: Transport,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Memory,
    Loopback,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Execute every step, printing each result and the final log head
    Run { file: PathBuf },
}

enum Failure {
    Rejected(ProtocolError),
    Internal(String),
}

impl From<PersistError> for Failure {
    fn from(e: PersistError) -> Self {
        Failure::Internal(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        if e.is_rejection() {
            Failure::Rejected(e)
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

struct Ctx {
    state_dir: PathBuf,
    format: Format,
    passphrase: String,
    seed: u64,
}

impl Ctx {
    fn path(&self, device: &str) -> PathBuf {
        if device.contains(std::path::MAIN_SEPARATOR) || device.ends_with(".mtm") {
            PathBuf::from(device)
        } else {
            self.state_dir.join(format!("{device}.mtm"))
        }
    }

    fn load(&self, device: &str) -> Result<(SimDevice, PathBuf), Failure> {
        let path = self.path(device);
        let d = persist::load(&path, &self.passphrase)
            .map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
        Ok((d, path))
    }

    fn save(&self, device: &SimDevice, path: &Path) -> Result<(), Failure> {
        Ok(persist::save(device, path, &self.passphrase)?)
    }

    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce(&T) -> String) {
        let out = match self.format {
            Format::Json => serde_json::to_string_pretty(value).expect("plain data"),
            Format::Text => text(value),
        };
        // A closed pipe just means nobody is reading.
        let _ = writeln!(std::io::stdout(), "{out}");
    }
}

fn read_owner(path: &Path) -> Result<OwnerSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
    OwnerSpec::from_toml(&text).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))
}

fn outcome_line(result: &Result<(), ProtocolError>) -> String {
    match result {
        Ok(()) => "ok".to_owned(),
        Err(e) => format!("rejected: {} ({e})", e.name()),
    }
}

#[derive(Serialize)]
struct TakeownReport {
    device: String,
    owner: String,
    purpose: String,
    outcome: String,
    messages: usize,
}

#[derive(Serialize)]
struct MigrateReport {
    source: String,
    dest: String,
    ro: String,
    outcome: String,
    source_state: Option<String>,
    dest_state: Option<String>,
    steps: usize,
    ticks: u64,
    max_holders: usize,
    source_holds: bool,
    dest_holds: bool,
    frames_sent: u64,
    frames_rejected: u64,
    faults: String,
}

#[derive(Serialize)]
struct AttestReport {
    device: String,
    ro: String,
    nonce: String,
    pcr_engine: Option<String>,
    verified_by: String,
    outcome: String,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx {
        state_dir: cli.state_dir,
        format: cli.format,
        passphrase: cli.passphrase,
        seed: cli.seed,
    };
    match cli.command {
        Command::Device(DeviceCommand::Create {
            name,
            manufacturer: m,
            suite,
            empty_boot,
            force,
        }) => {
            let path = ctx.path(&name);
            if path.exists() && !force {
                return Err(Failure::Internal(format!(
                    "{} exists; pass --force to replace it",
                    path.display()
                )));
            }
            let suite = match suite {
                Suite::Standard => SuiteId::Standard,
                Suite::Toy => SuiteId::Toy,
            };
            let mut dm = manufacturer(&m, suite);
            if empty_boot {
                dm = dm.with_boot_components(Vec::new());
            }
            let device = SimDevice::create(&name, ctx.seed, &dm);
            ctx.save(&device, &path)?;
            ctx.emit(&device.summary(), |s| {
                format!("created {} ({}) at {}", s.name, s.device_id, path.display())
            });
        }
        Command::Device(DeviceCommand::Boot { device }) => {
            let (mut d, path) = ctx.load(&device)?;
            let result = d.boot();
            ctx.save(&d, &path)?;
            let state = result.map_err(|e| Failure::Internal(e.to_string()))?;
            ctx.emit(&d.summary(), |s| {
                format!("{}: DM engine {state:?}, PCR0 {}", s.name, s.pcr0)
            });
        }
        Command::Device(DeviceCommand::Inspect { device }) => {
            let (d, _) = ctx.load(&device)?;
            ctx.emit(&d.summary(), |s| {
                let mut out = format!(
                    "device {} ({})\n  manufacturer {}\n  booted {}\n  PCR0 {}\n  counter {}\n  clock {}\n  log {} entries, head {}",
                    s.name, s.device_id, s.manufacturer, s.booted, s.pcr0, s.counter, s.clock, s.log_entries, s.log_head
                );
                for t in &s.subsystems {
                    out.push_str(&format!(
                        "\n  subsystem {}: engine {}, vMTM #{} {}, purpose {}, SRK {}",
                        t.stakeholder,
                        t.engine,
                        t.handle,
                        t.lifecycle,
                        t.purpose,
                        t.srk.as_deref().map_or("-", |s| &s[..16])
                    ));
                }
                out
            });
        }
        Command::Takeown {
            device,
            owner,
            purpose,
        } => {
            let (mut d, path) = ctx.load(&device)?;
            let spec = read_owner(&owner)?;
            let mut agent = spec.agent(d.platform().mtm().suite());
            let purpose = purpose
                .or_else(|| spec.purposes.first().cloned())
                .unwrap_or_default();
            let outcome = run_take_ownership(&mut d, &mut agent, &purpose);
            ctx.save(&d, &path)?;
            let report = TakeownReport {
                device: d.name().to_owned(),
                owner: spec.id.clone(),
                purpose,
                outcome: outcome_line(&outcome.result),
                messages: outcome.trace.len(),
            };
            ctx.emit(&report, |r| {
                format!(
                    "takeown {} on {} for {}: {}",
                    r.owner, r.device, r.purpose, r.outcome
                )
            });
            outcome.result?;
        }
        Command::Migrate(args) => {
            let (mut s, source_path) = ctx.load(&args.source)?;
            let (mut d, dest_path) = ctx.load(&args.dest)?;
            if source_path == dest_path {
                return Err(Failure::Internal(
                    "source and destination are the same file".into(),
                ));
            }
            let run = MigrationRun {
                config: MigrationConfig {
                    timeout_ticks: args.timeout,
                    delete_before_send: args.delete_before_send,
                    ..MigrationConfig::default()
                },
                plan: args.fault.clone(),
                transport: match args.transport {
                    Transport::Memory => TransportKind::InProcess,
                    Transport::Loopback => TransportKind::Loopback,
                },
                channel_seed: ctx.seed,
                ..MigrationRun::default()
            };
            let outcome = run_migration(&mut s, &mut d, &args.ro, &run);
            ctx.save(&s, &source_path)?;
            ctx.save(&d, &dest_path)?;
            let report = MigrateReport {
                source: s.name().to_owned(),
                dest: d.name().to_owned(),
                ro: args.ro.clone(),
                outcome: outcome_line(&outcome.result),
                source_state: outcome.source_state.map(|x| format!("{x:?}")),
                dest_state: outcome.dest_state.map(|x| format!("{x:?}")),
                steps: outcome.steps,
                ticks: outcome.ticks,
                max_holders: outcome.max_holders,
                source_holds: outcome.source_holds,
                dest_holds: outcome.dest_holds,
                frames_sent: outcome.channel.sent,
                frames_rejected: outcome.channel.rejected,
                faults: args.fault.to_string(),
            };
            ctx.emit(&report, |r| {
                format!(
                    "migrate {} {} -> {}: {}\n  source {} / dest {}, {} steps, {} ticks, {} frames ({} rejected)\n  holders: source {}, dest {}",
                    r.ro,
                    r.source,
                    r.dest,
                    r.outcome,
                    r.source_state.as_deref().unwrap_or("-"),
                    r.dest_state.as_deref().unwrap_or("-"),
                    r.steps,
                    r.ticks,
                    r.frames_sent,
                    r.frames_rejected,
                    r.source_holds,
                    r.dest_holds
                )
            });
            if !outcome.uniqueness_held() || outcome.livelock {
                return Err(Failure::Internal("migration invariant violated".into()));
            }
            outcome.result?;
        }
        Command::Attest { device, ro, owner } => {
            let (mut d, path) = ctx.load(&device)?;
            let nonce = d.platform_mut().rng().nonce();
            let tss = d
                .platform()
                .subsystem(&ro)
                .ok_or(ProtocolError::NoSubsystem)?;
            let (handle, aik, cert, policy) = (
                tss.vmtm,
                tss.aik,
                tss.certificate.clone(),
                tss.policy.clone(),
            );
            let quote = aik.ok_or(ProtocolError::NoSubsystem).and_then(|aik| {
                d.platform_mut()
                    .mtm_mut()
                    .route_command(
                        handle,
                        MtmCommand::Quote {
                            aik,
                            nonce,
                            selection: vec![PCR_ENGINE],
                        },
                    )
                    .and_then(|r| r.quote())
                    .map_err(ProtocolError::from)
            });
            let verdict = match (&quote, &cert) {
                (Ok(q), Some(cert)) => match &owner {
                    Some(path) => {
                        let spec = read_owner(path)?;
                        spec.agent(d.platform().mtm().suite())
                            .verify_attestation(cert, q, &nonce)
                    }
                    None => {
                        let root = d.platform().root_key(&ro).cloned();
                        let cert_ok = root.is_some_and(|k| cert.verify(&k));
                        let state_ok = policy.as_ref().is_some_and(|p| p.accepts(q).is_some());
                        if !cert_ok {
                            Err(ProtocolError::CertificateInvalid)
                        } else if !q.verify(&cert.aik_public) || !state_ok {
                            Err(ProtocolError::AttestationRejected)
                        } else {
                            Ok(())
                        }
                    }
                },
                (Err(e), _) => Err(e.clone()),
                (_, None) => Err(ProtocolError::CertificateInvalid),
            };
            d.record(
                "attest",
                &[verdict.as_ref().map_or_else(|e| e.code(), |_| 0)],
            );
            ctx.save(&d, &path)?;
            let report = AttestReport {
                device: d.name().to_owned(),
                ro: ro.clone(),
                nonce: nonce.0.iter().map(|b| format!("{b:02x}")).collect(),
                pcr_engine: quote
                    .as_ref()
                    .ok()
                    .and_then(|q| q.pcr(PCR_ENGINE))
                    .map(|p| p.to_hex()),
                verified_by: if owner.is_some() {
                    "owner".into()
                } else {
                    "device records".into()
                },
                outcome: outcome_line(&verdict),
            };
            ctx.emit(&report, |r| {
                format!(
                    "attest {} on {}: {}\n  PCR{} {}",
                    r.ro,
                    r.device,
                    r.outcome,
                    PCR_ENGINE,
                    r.pcr_engine.as_deref().unwrap_or("-")
                )
            });
            verdict?;
        }
        Command::Scenario(ScenarioCommand::Run { file }) => {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| Failure::Internal(format!("{}: {e}", file.display())))?;
            match run_scenario(&text, ctx.seed) {
                Ok((report, _)) => ctx.emit(&report, |r| {
                    let mut out = String::new();
                    for s in &r.steps {
                        out.push_str(&format!(
                            "step {:>3} (line {:>3}): {}\n",
                            s.step, s.line, s.outcome
                        ));
                    }
                    out.push_str(&format!("log head {}", r.log_head.to_hex()));
                    out
                }),
                Err(e) => {
                    eprintln!("{}: {e}", file.display());
                    return match e {
                        mtm_sim::ScenarioError::Rejected { error, .. } if error.is_rejection() => {
                            Err(Failure::Rejected(error))
                        }
                        other => Err(Failure::Internal(other.to_string())),
                    };
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are internal errors here; 2 is reserved for rejections.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Rejected(e)) => {
            eprintln!("rejected: {} ({e})", e.name());
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
