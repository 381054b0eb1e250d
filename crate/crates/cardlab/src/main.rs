//! Operator entry point wiring the lab together: personalize a card,
//! serve it over a socket, inspect it, relay it, fuzz it, and run the
//! signing-client demos. All randomness flows from --seed, so scenarios
//! reproduce byte-identically apart from timing fields.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cardlab::card::VirtualCard;
use cardlab::cryptokit::{CipherSuite, Drbg};
use cardlab::fuzz::{run_campaign, Mutation, Protocol};
use cardlab::lds::{bac_seed_from_parts, Profile};
use cardlab::pki::{generate_root, issue, Role, TrustBundle, TrustStore, LAB_EPOCH, TEN_YEARS};
use cardlab::relay::run_bridge;
use cardlab::signclient::{
    audit, sign_document, verify_signed, AuditOutcome, InterceptorHooks, SignRequest,
};
use cardlab::terminal::{inspect, Credentials, InspectPolicy, InspectionTrust, TerminalChain};
use cardlab::transport::{connect, loopback, serve, with_latency, Channel};

#[derive(Parser)]
#[command(name = "cardlab", version, about = "eMRTD/eID protocol laboratory")]
struct Cli {
    /// Seed for all lab randomness; identical invocations reproduce
    /// identical outputs apart from timing fields.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Secure-channel suite requested for password-authenticated
    /// establishment.
    #[arg(long, global = true, value_enum, default_value_t = SuiteArg::Aes)]
    suite: SuiteArg,

    /// Print protocol detail to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Aes,
    Tdes,
}

impl From<SuiteArg> for CipherSuite {
    fn from(value: SuiteArg) -> CipherSuite {
        match value {
            SuiteArg::Aes => CipherSuite::Aes128Cmac,
            SuiteArg::Tdes => CipherSuite::TdesRetail,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a card from a personalization profile and write its state
    /// file plus the inspector trust bundle.
    Personalize {
        /// Profile text file (see README for the field list).
        #[arg(long)]
        profile: PathBuf,
        /// Output path for the card state file.
        #[arg(long)]
        out: PathBuf,
        /// Output path for the trust bundle (default: <out>.trust).
        #[arg(long)]
        trust_out: Option<PathBuf>,
    },
    /// Serve a card file over a framed TCP socket until interrupted.
    Serve {
        #[arg(long)]
        card: PathBuf,
        /// host:port to listen on.
        #[arg(long)]
        listen: String,
    },
    /// Run a document inspection and write the report.
    Inspect(InspectArgs),
    /// Forward traffic between a distant terminal and the victim card.
    Relay {
        /// host:port of the card server to victimize.
        #[arg(long)]
        card_connect: String,
        /// host:port to expose to the terminal.
        #[arg(long)]
        listen: String,
        /// Extra per-exchange delay on the card leg, in milliseconds.
        #[arg(long, default_value_t = 0)]
        latency_ms: u64,
        /// Uniform jitter on top of the delay, in milliseconds.
        #[arg(long, default_value_t = 0)]
        jitter_ms: u64,
    },
    /// Run a malformation campaign against a freshly personalized card.
    Fuzz {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 1000)]
        iterations: u32,
        /// Comma-separated mutation list; default is the wire set.
        /// `all` adds the degenerate constant-nonce configuration.
        #[arg(long)]
        mutations: Option<String>,
        /// Profile for the campaign card (defaults to a built-in one).
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Write the campaign report here as well as stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sign a document with the card (honest client).
    Sign {
        #[arg(long)]
        card: PathBuf,
        #[arg(long)]
        pin: String,
        #[arg(long)]
        doc: PathBuf,
        /// Write evidence here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Demonstrate the document-substitution attack: the client shows
    /// one document and signs another; the audit must catch it.
    DemoSubstitution {
        #[arg(long)]
        card: PathBuf,
        #[arg(long)]
        pin: String,
        #[arg(long)]
        doc: PathBuf,
        #[arg(long)]
        attacker_doc: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InspectArgs {
    /// Inspect a served card at host:port.
    #[arg(long, conflicts_with = "card")]
    connect: Option<String>,
    /// Inspect a card file in-process.
    #[arg(long)]
    card: Option<PathBuf>,
    /// MRZ key fields as DOCNUMBER,YYMMDD,YYMMDD (birth, expiry).
    #[arg(long)]
    mrz: Option<String>,
    #[arg(long)]
    can: Option<String>,
    #[arg(long)]
    pin: Option<String>,
    /// Run the challenge-response cloning check.
    #[arg(long)]
    aa: bool,
    /// Run chip authentication (rekeys the channel).
    #[arg(long)]
    ca: bool,
    /// Run terminal authentication (unlocks the fingerprint group).
    #[arg(long)]
    ta: bool,
    /// Distance-bounding threshold in milliseconds.
    #[arg(long, default_value_t = 20)]
    rtt_threshold: u64,
    /// Trust bundle path (default: <card>.trust when --card is given).
    #[arg(long)]
    trust: Option<PathBuf>,
    /// Report output path.
    #[arg(long)]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("cannot read {what} {}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8], what: &str) -> Result<(), String> {
    fs::write(path, bytes).map_err(|e| format!("cannot write {what} {}: {e}", path.display()))
}

fn load_card(path: &Path) -> Result<VirtualCard, String> {
    let bytes = read_file(path, "card file")?;
    VirtualCard::deserialize(&bytes).map_err(|e| format!("card file {}: {e}", path.display()))
}

fn load_bundle(path: &Path) -> Result<TrustBundle, String> {
    let bytes = read_file(path, "trust bundle")?;
    TrustBundle::decode(&bytes).map_err(|e| format!("trust bundle {}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Personalize { profile, out, trust_out } => {
            let text = read_file(&profile, "profile")?;
            let text = String::from_utf8(text).map_err(|_| "profile is not UTF-8".to_string())?;
            let profile = Profile::parse(&text).map_err(|e| e.to_string())?;

            let mut rng = Drbg::from_seed(cli.seed);
            let (csca, csca_key) =
                generate_root(Role::Csca, "lab-csca", LAB_EPOCH, LAB_EPOCH + TEN_YEARS, &mut rng)
                    .map_err(|e| e.to_string())?;
            let (cvca, cvca_key) =
                generate_root(Role::Cvca, "lab-cvca", LAB_EPOCH, LAB_EPOCH + TEN_YEARS, &mut rng)
                    .map_err(|e| e.to_string())?;
            let (dv, dv_key) = issue(
                &cvca,
                &cvca_key,
                "lab-dv",
                Role::Dv,
                LAB_EPOCH,
                LAB_EPOCH + TEN_YEARS,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            let (terminal, terminal_key) = issue(
                &dv,
                &dv_key,
                "lab-terminal",
                Role::Terminal,
                LAB_EPOCH,
                LAB_EPOCH + TEN_YEARS,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;

            let mut card =
                VirtualCard::personalize(&profile, &csca, &csca_key, cvca.clone(), rng.fork())
                    .map_err(|e| e.to_string())?;
            write_file(&out, &card.serialize(), "card file")?;

            let bundle = TrustBundle { csca, cvca, dv, terminal, terminal_key };
            let trust_path = trust_out.unwrap_or_else(|| trust_path_for(&out));
            write_file(&trust_path, &bundle.encode(), "trust bundle")?;

            println!("card written to {}", out.display());
            println!("trust bundle written to {}", trust_path.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Serve { card, listen } => {
            let card = load_card(&card)?;
            let handle = serve(card, listen.as_str()).map_err(|e| e.to_string())?;
            println!("serving card on {}", handle.addr());
            // Runs until interrupted.
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }

        Command::Inspect(args) => run_inspect(args, cli.seed, cli.suite.into(), cli.verbose),

        Command::Relay { card_connect, listen, latency_ms, jitter_ms } => {
            let upstream = connect(card_connect.as_str())
                .map_err(|e| format!("cannot reach card server {card_connect}: {e}"))?;
            let card_side: Box<dyn Channel + Send> = if latency_ms > 0 || jitter_ms > 0 {
                Box::new(with_latency(upstream, latency_ms, jitter_ms, Drbg::from_seed(cli.seed)))
            } else {
                Box::new(upstream)
            };
            let bridge = run_bridge(card_side, &listen).map_err(|e| e.to_string())?;
            println!("relaying on {} -> {}", bridge.addr(), card_connect);
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }

        Command::Fuzz { protocol, iterations, mutations, profile, report } => {
            let profile = match profile {
                Some(path) => {
                    let text = read_file(&path, "profile")?;
                    let text =
                        String::from_utf8(text).map_err(|_| "profile is not UTF-8".to_string())?;
                    Profile::parse(&text).map_err(|e| e.to_string())?
                }
                None => builtin_profile(),
            };
            let set = parse_mutations(mutations.as_deref())?;
            let campaign = run_campaign(&profile, protocol.into(), &set, iterations, cli.seed);
            let rendered = campaign.render();
            print!("{rendered}");
            if let Some(path) = report {
                write_file(&path, rendered.as_bytes(), "campaign report")?;
            }
            Ok(if campaign.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }

        Command::Sign { card, pin, doc, out } => {
            let document = read_file(&doc, "document")?;
            let name = doc.display().to_string();
            let evidence = run_sign(
                &card,
                &pin,
                SignRequest::new(document, name),
                InterceptorHooks::none(),
                cli.seed,
            )?;
            let outcome = audit(&evidence);
            let text = format!("{}{}\n", evidence.render(), outcome.render());
            print!("{text}");
            if let Some(path) = out {
                write_file(&path, text.as_bytes(), "evidence")?;
            }
            Ok(match outcome {
                AuditOutcome::Clean => ExitCode::SUCCESS,
                AuditOutcome::Alarm(_) => ExitCode::from(1),
            })
        }

        Command::DemoSubstitution { card, pin, doc, attacker_doc, out } => {
            let document = read_file(&doc, "document")?;
            let attacker = read_file(&attacker_doc, "attacker document")?;
            let name = doc.display().to_string();
            let attacker_for_hook = attacker.clone();
            let hooks = InterceptorHooks {
                on_document_load: Some(Box::new(move |mut request: SignRequest| {
                    request.document = attacker_for_hook.clone();
                    request
                })),
                ..InterceptorHooks::none()
            };
            let evidence =
                run_sign(&card, &pin, SignRequest::new(document.clone(), name), hooks, cli.seed)?;
            let outcome = audit(&evidence);

            // Show the legal-commitment hazard explicitly.
            let bundle = load_bundle(&trust_path_for(&card)).ok();
            let mut text = evidence.render();
            if let Some(bundle) = bundle {
                let mut store = TrustStore::new();
                store.add(bundle.csca).map_err(|e| e.to_string())?;
                text.push_str(&format!(
                    "verifies_over_user_document: {}\n",
                    verify_signed(&document, &evidence.signature, &evidence.certificate, &store)
                ));
                text.push_str(&format!(
                    "verifies_over_attacker_document: {}\n",
                    verify_signed(&attacker, &evidence.signature, &evidence.certificate, &store)
                ));
            }
            text.push_str(&outcome.render());
            text.push('\n');
            print!("{text}");
            if let Some(path) = out {
                write_file(&path, text.as_bytes(), "evidence")?;
            }
            Ok(match outcome {
                AuditOutcome::Clean => ExitCode::SUCCESS,
                AuditOutcome::Alarm(_) => ExitCode::from(1),
            })
        }
    }
}

fn trust_path_for(card_path: &Path) -> PathBuf {
    let mut path = card_path.as_os_str().to_owned();
    path.push(".trust");
    PathBuf::from(path)
}

fn builtin_profile() -> Profile {
    Profile::parse(
        "name: FUZZ TARGET\n\
         document_number: FUZ000001\n\
         date_of_birth: 900101\n\
         date_of_expiry: 330101\n\
         nationality: UTO\n\
         sex: <\n\
         pin: 123456\n\
         can: 654321\n",
    )
    .expect("builtin profile is valid")
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Bac,
    Pace,
}

impl From<ProtocolArg> for Protocol {
    fn from(value: ProtocolArg) -> Protocol {
        match value {
            ProtocolArg::Bac => Protocol::Bac,
            ProtocolArg::Pace => Protocol::Pace,
        }
    }
}

fn parse_mutations(arg: Option<&str>) -> Result<Vec<Mutation>, String> {
    match arg {
        None => Ok(Mutation::wire_set()),
        Some("all") => Ok(Mutation::all()),
        Some(list) => {
            let mut set = Vec::new();
            for name in list.split(',') {
                let name = name.trim();
                let mutation =
                    Mutation::from_name(name).ok_or_else(|| format!("unknown mutation {name:?}"))?;
                set.push(mutation);
            }
            if set.is_empty() {
                return Err("mutation list is empty".into());
            }
            Ok(set)
        }
    }
}

fn run_sign(
    card_path: &Path,
    pin: &str,
    request: SignRequest,
    hooks: InterceptorHooks,
    seed: u64,
) -> Result<cardlab::signclient::SignEvidence, String> {
    let card = load_card(card_path)?;
    let mut channel = loopback(card);
    let mut rng = Drbg::from_seed(seed);
    sign_document(&mut channel, pin, request, hooks, &mut rng).map_err(|e| e.to_string())
}

fn parse_mrz_arg(mrz: &str) -> Result<[u8; 16], String> {
    let parts: Vec<&str> = mrz.split(',').collect();
    if parts.len() != 3 {
        return Err("--mrz expects DOCNUMBER,YYMMDD,YYMMDD".into());
    }
    bac_seed_from_parts(parts[0].trim(), parts[1].trim(), parts[2].trim())
        .map_err(|e| format!("--mrz: {e}"))
}

fn run_inspect(
    args: InspectArgs,
    seed: u64,
    suite: CipherSuite,
    verbose: bool,
) -> Result<ExitCode, String> {
    let credentials = Credentials {
        bac_seed: args.mrz.as_deref().map(parse_mrz_arg).transpose()?,
        can: args.can.clone(),
        pin: args.pin.clone(),
    };
    if credentials.bac_seed.is_none() && credentials.can.is_none() && credentials.pin.is_none() {
        return Err("supply at least one of --mrz, --can, --pin".into());
    }

    // Trust material: explicit --trust, or the bundle written next to
    // the card file.
    let trust_path = match (&args.trust, &args.card) {
        (Some(path), _) => Some(path.clone()),
        (None, Some(card)) => Some(trust_path_for(card)),
        (None, None) => None,
    };
    let bundle = match &trust_path {
        Some(path) if path.exists() => Some(load_bundle(path)?),
        _ => None,
    };
    let mut store = TrustStore::new();
    let mut ta_chain = None;
    if let Some(bundle) = bundle {
        store.add(bundle.csca.clone()).map_err(|e| e.to_string())?;
        ta_chain = Some(TerminalChain {
            dv: bundle.dv,
            terminal: bundle.terminal,
            terminal_key: bundle.terminal_key,
        });
    } else if verbose {
        eprintln!("no trust bundle: chain verification will fail");
    }
    let trust = InspectionTrust { store, ta_chain };

    let policy = InspectPolicy {
        do_active_auth: args.aa,
        do_chip_auth: args.ca,
        do_terminal_auth: args.ta,
        rtt_threshold_ms: args.rtt_threshold,
        pace_suite: suite,
        connection_label: match (&args.connect, &args.card) {
            (Some(endpoint), _) => format!("socket {endpoint}"),
            (None, Some(path)) => format!("loopback {}", path.display()),
            (None, None) => "unspecified".into(),
        },
        ..InspectPolicy::default()
    };

    let mut rng = Drbg::from_seed(seed);
    let report = match (&args.connect, &args.card) {
        (Some(endpoint), None) => {
            let mut channel =
                connect(endpoint.as_str()).map_err(|e| format!("cannot reach {endpoint}: {e}"))?;
            inspect(&mut channel, &credentials, &policy, &trust, &mut rng)
        }
        (None, Some(path)) => {
            let card = load_card(path)?;
            let mut channel = loopback(card);
            inspect(&mut channel, &credentials, &policy, &trust, &mut rng)
        }
        (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
        (None, None) => return Err("supply --connect or --card".into()),
    };

    let rendered = report.render();
    print!("{rendered}");
    write_file(&args.report, rendered.as_bytes(), "report")?;
    if verbose {
        eprintln!("verdict ok: {}", report.verdict_ok());
    }
    Ok(if report.verdict_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
