//! Argument definitions and command dispatch.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use dpush_core::block::Difficulty;
use dpush_core::dmail::{self, DmailInbox, DmailSite};
use dpush_core::dpush::{self, Channel, InboxState, SendOptions, DEFAULT_DIFFICULTY, DMAIL_SITE_KIND};
use dpush_core::ident::KeyId;
use dpush_core::simnet::{Scenario, ScenarioRunner};
use rand::SeedableRng;
use serde_json::json;

use crate::bench::bench_pow;
use crate::economics::{economics, messages_per_conversion};
use crate::profile::{InboxFile, Keys, Mode, Profile};
use crate::world::World;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "dpush", version, about = "Proof-of-work push messaging and encrypted mail")]
pub struct Cli {
    /// Profile directory holding keys and inbox state.
    #[arg(long, global = true, env = "DPUSH_PROFILE", default_value = ".dpush")]
    pub profile: PathBuf,
    /// Directory holding the local node's persisted store.
    #[arg(long, global = true, env = "DPUSH_NET", default_value = ".dpush-net")]
    pub net: PathBuf,
    /// Read a key-protection passphrase from this environment variable.
    #[arg(long, global = true, value_name = "VAR")]
    pub passphrase_env: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a signing identity in the profile.
    Keygen {
        #[arg(long)]
        force: bool,
    },
    #[command(subcommand)]
    Address(AddressCmd),
    #[command(subcommand)]
    Site(SiteCmd),
    /// Mine and store a message for an address.
    Send(SendArgs),
    #[command(subcommand)]
    Inbox(InboxCmd),
    #[command(subcommand)]
    Follow(FollowCmd),
    #[command(subcommand)]
    Channel(ChannelCmd),
    #[command(subcommand)]
    Net(NetCmd),
    #[command(subcommand)]
    Sim(SimCmd),
    /// Measure mining cost at a difficulty.
    BenchPow {
        #[arg(long, short)]
        difficulty: u32,
        #[arg(long, short, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Proof-of-work cost per spam conversion.
    Economics(EconomicsArgs),
}

#[derive(Debug, Subcommand)]
pub enum AddressCmd {
    /// Publish a site for the profile's identity.
    Create {
        #[arg(long, default_value_t = DEFAULT_DIFFICULTY)]
        difficulty: u32,
        /// Plain Dpush site without encryption parameters.
        #[arg(long)]
        plain: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum SiteCmd {
    /// Print a site as published; defaults to the profile's own.
    Show { address: Option<KeyId> },
    /// Publish a new first target (and key-agreement key for Dmail).
    Rotate,
    /// Stop scanning retired targets.
    Retire {
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        target: Option<KeyId>,
        #[arg(long)]
        all: bool,
    },
}

#[derive(Debug, Args)]
pub struct SendArgs {
    #[arg(long)]
    pub to: KeyId,
    /// Message file, or `-` for stdin.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub target_index: usize,
    #[arg(long)]
    pub max_attempts: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum InboxCmd {
    /// Fetch and print new messages.
    Scan {
        #[arg(long, default_value_t = 32)]
        limit: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum FollowCmd {
    Add { id: KeyId },
    Poll,
}

#[derive(Debug, Subcommand)]
pub enum ChannelCmd {
    /// Print the channel ID followers should add.
    Id,
    Publish {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum NetCmd {
    /// Create the local node with a given difficulty floor.
    Init {
        #[arg(long, default_value_t = dpush_core::store::DEFAULT_NETWORK_FLOOR)]
        floor: u32,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    /// Run a JSON scenario.
    Run {
        scenario: PathBuf,
        /// Write per-operation metrics as CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct EconomicsArgs {
    #[arg(long)]
    pub pow_seconds: f64,
    #[arg(long, conflicts_with_all = ["messages", "conversions"], required_unless_present_all = ["messages", "conversions"])]
    pub per_conversion: Option<f64>,
    /// Observed messages; with --conversions, derives --per-conversion.
    #[arg(long, requires = "conversions")]
    pub messages: Option<f64>,
    #[arg(long, requires = "messages")]
    pub conversions: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

struct Ctx {
    profile: PathBuf,
    net: PathBuf,
    passphrase: Option<String>,
}

impl Ctx {
    fn profile(&self) -> Result<Profile, CliError> {
        Profile::open(&self.profile)
    }

    fn world(&self) -> Result<World, CliError> {
        World::open(&self.net, None)
    }

    fn pass(&self) -> Option<&str> {
        self.passphrase.as_deref()
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin()
            .read_to_end(&mut buf)
            .map_err(|e| CliError::Io(format!("stdin: {e}")))?;
        return Ok(buf);
    }
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn difficulty(bits: u32) -> Result<Difficulty, CliError> {
    Difficulty::new(bits).map_err(|e| CliError::Usage(e.to_string()))
}

/// The owner-side mailbox, rebuilt from profile files.
enum Mailbox {
    Dpush(InboxState),
    Dmail(DmailInbox),
}

impl Mailbox {
    fn load(profile: &Profile, keys: &Keys) -> Result<Self, CliError> {
        let file = profile
            .load_inbox()?
            .ok_or_else(|| CliError::Usage("no address in this profile; run `dpush address create`".into()))?;
        let inbox = InboxState::restore(keys.signing.clone(), file.inbox)
            .map_err(|e| CliError::Io(format!("inbox.json: {e}")))?;
        Ok(match file.mode {
            Mode::Dpush => Mailbox::Dpush(inbox),
            Mode::Dmail => {
                let ka = keys
                    .ka
                    .clone()
                    .ok_or_else(|| CliError::Io("keys.json lacks the key-agreement secret".into()))?;
                Mailbox::Dmail(DmailInbox { inbox, ka, retired_ka: keys.retired_ka.clone() })
            }
        })
    }

    fn save(&self, profile: &Profile, keys: &mut Keys, pass: Option<&str>) -> Result<(), CliError> {
        let (mode, inbox) = match self {
            Mailbox::Dpush(s) => (Mode::Dpush, s),
            Mailbox::Dmail(d) => {
                keys.ka = Some(d.ka.clone());
                keys.retired_ka = d.retired_ka.clone();
                profile.save_keys(keys, pass)?;
                (Mode::Dmail, &d.inbox)
            }
        };
        profile.save_inbox(&InboxFile { mode, inbox: inbox.snapshot() })
    }

    fn inbox(&self) -> &InboxState {
        match self {
            Mailbox::Dpush(s) => s,
            Mailbox::Dmail(d) => &d.inbox,
        }
    }

    fn inbox_mut(&mut self) -> &mut InboxState {
        match self {
            Mailbox::Dpush(s) => s,
            Mailbox::Dmail(d) => &mut d.inbox,
        }
    }
}

pub fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    let passphrase = match &cli.passphrase_env {
        Some(var) => Some(
            std::env::var(var).map_err(|_| CliError::Usage(format!("environment variable {var} is not set")))?,
        ),
        None => None,
    };
    let ctx = Ctx { profile: cli.profile, net: cli.net, passphrase };
    match cli.command {
        Command::Keygen { force } => keygen(&ctx, force),
        Command::Address(AddressCmd::Create { difficulty: d, plain }) => address_create(&ctx, d, plain),
        Command::Site(cmd) => site(&ctx, cmd),
        Command::Send(args) => send(&ctx, &args),
        Command::Inbox(InboxCmd::Scan { limit }) => inbox_scan(&ctx, limit),
        Command::Follow(cmd) => follow(&ctx, cmd),
        Command::Channel(cmd) => channel(&ctx, cmd),
        Command::Net(NetCmd::Init { floor }) => {
            difficulty(floor)?;
            let w = World::open(&ctx.net, Some(floor))?;
            Ok(vec![json!({"node_id": w.config.node_id, "floor": w.config.floor}).to_string()])
        }
        Command::Sim(SimCmd::Run { scenario, metrics }) => sim_run(&scenario, metrics.as_deref()),
        Command::BenchPow { difficulty: d, trials, seed } => {
            if trials == 0 {
                return Err(CliError::Usage("trials must be at least 1".into()));
            }
            let d = difficulty(d)?;
            let mut rng = match seed {
                Some(s) => rand::rngs::StdRng::seed_from_u64(s),
                None => rand::rngs::StdRng::from_entropy(),
            };
            let r = bench_pow(d, trials, &mut rng).map_err(|e| CliError::Protocol(e.to_string()))?;
            Ok(vec![serde_json::to_string(&r).expect("report serializes")])
        }
        Command::Economics(args) => econ(&args),
    }
}

fn keygen(ctx: &Ctx, force: bool) -> Result<Vec<String>, CliError> {
    let profile = ctx.profile()?;
    if profile.has_keys() && !force {
        return Err(CliError::Usage(format!(
            "{} already has keys; pass --force to replace them",
            profile.dir().display()
        )));
    }
    let keys = Keys::generate(&mut rand::thread_rng());
    profile.save_keys(&keys, ctx.pass())?;
    if ctx.passphrase.is_none() {
        eprintln!("warning: private keys stored unencrypted in {}", profile.dir().display());
    }
    Ok(vec![json!({"address": keys.address(), "channel_id": keys.channel.key_id()}).to_string()])
}

fn address_create(ctx: &Ctx, bits: u32, plain: bool) -> Result<Vec<String>, CliError> {
    let d = difficulty(bits)?;
    let profile = ctx.profile()?;
    let mut keys = profile.load_keys(ctx.pass())?;
    if profile.load_inbox()?.is_some() {
        return Err(CliError::Usage("this profile already has an address".into()));
    }
    let mut world = ctx.world()?;
    let floor = world.config.floor;
    if bits < floor {
        return Err(CliError::Usage(format!("difficulty {bits} is below the network floor {floor}")));
    }
    let mut rng = rand::thread_rng();
    let mailbox = if plain {
        Mailbox::Dpush(dpush::create_address(&mut world.dht(), keys.signing.clone(), d, &mut rng)?)
    } else {
        Mailbox::Dmail(dmail::create_dmail_address(&mut world.dht(), keys.signing.clone(), d, &mut rng)?)
    };
    world.save()?;
    mailbox.save(&profile, &mut keys, ctx.pass())?;
    let inbox = mailbox.inbox();
    Ok(vec![json!({
        "address": inbox.address,
        "kind": inbox.site.kind,
        "target_key": inbox.site.targets[0].target_key,
        "difficulty": bits,
    })
    .to_string()])
}

fn site(ctx: &Ctx, cmd: SiteCmd) -> Result<Vec<String>, CliError> {
    match cmd {
        SiteCmd::Show { address } => {
            let address = match address {
                Some(a) => a,
                None => ctx.profile()?.load_keys(ctx.pass())?.address(),
            };
            let mut world = ctx.world()?;
            let (site, version) = dpush::fetch_site(&mut world.dht(), &address)?;
            let site_json: serde_json::Value =
                serde_json::from_slice(&site.to_canonical_json()).expect("canonical json parses");
            Ok(vec![json!({"address": address, "version": version, "site": site_json}).to_string()])
        }
        SiteCmd::Rotate => {
            let profile = ctx.profile()?;
            let mut keys = profile.load_keys(ctx.pass())?;
            let mut mailbox = Mailbox::load(&profile, &keys)?;
            let mut world = ctx.world()?;
            let mut rng = rand::thread_rng();
            let now = now_secs();
            let target = match &mut mailbox {
                Mailbox::Dpush(s) => dpush::rotate_target(&mut world.dht(), s, now, &mut rng)?,
                Mailbox::Dmail(d) => dmail::rotate(&mut world.dht(), d, now, &mut rng)?,
            };
            world.save()?;
            mailbox.save(&profile, &mut keys, ctx.pass())?;
            Ok(vec![json!({
                "address": mailbox.inbox().address,
                "version": mailbox.inbox().version,
                "target_key": target.target_key,
                "retired": mailbox.inbox().retired.len(),
            })
            .to_string()])
        }
        SiteCmd::Retire { target, all } => {
            let profile = ctx.profile()?;
            let mut keys = profile.load_keys(ctx.pass())?;
            let mut mailbox = Mailbox::load(&profile, &keys)?;
            let dropped: Vec<KeyId> = if all {
                mailbox.inbox_mut().retired.drain(..).map(|t| t.target.target_key).collect()
            } else {
                let t = target.expect("clap enforces --target or --all");
                vec![dpush::drop_retired(mailbox.inbox_mut(), &t)
                    .map_err(|e| CliError::Usage(e.to_string()))?
                    .target
                    .target_key]
            };
            // Old ka keys stay: mail already stored may still need them.
            mailbox.save(&profile, &mut keys, ctx.pass())?;
            Ok(dropped.into_iter().map(|t| json!({"retired": t}).to_string()).collect())
        }
    }
}

fn send(ctx: &Ctx, args: &SendArgs) -> Result<Vec<String>, CliError> {
    let body = read_input(&args.input)?;
    let mut world = ctx.world()?;
    let mut rng = rand::thread_rng();
    let opts = SendOptions { target_index: args.target_index, max_attempts: args.max_attempts, ..SendOptions::default() };
    let (site, _) = dpush::fetch_site(&mut world.dht(), &args.to)?;
    let (receipt, sealed) = if site.kind == DMAIL_SITE_KIND {
        let keys = ctx.profile()?.load_keys(ctx.pass())?;
        let site = DmailSite::from_site(site)?;
        let wrapper = dmail::seal(&keys.signing, args.to, &site, &body, now_secs(), &mut rng)?;
        (dpush::send_to_site(&mut world.dht(), &site.site, &wrapper.to_bytes(), &opts, &mut rng)?, true)
    } else {
        (dpush::send_to_site(&mut world.dht(), &site, &body, &opts, &mut rng)?, false)
    };
    world.save()?;
    Ok(vec![json!({
        "block_id": receipt.block_id,
        "attempts": receipt.attempts,
        "target_key": receipt.target.target_key,
        "difficulty": receipt.target.difficulty,
        "replicas": receipt.replicas,
        "encrypted": sealed,
    })
    .to_string()])
}

fn body_json(body: &[u8]) -> serde_json::Value {
    match std::str::from_utf8(body) {
        Ok(s) => json!({"body": s}),
        Err(_) => json!({"body_hex": hex::encode(body)}),
    }
}

fn inbox_scan(ctx: &Ctx, limit: usize) -> Result<Vec<String>, CliError> {
    let profile = ctx.profile()?;
    let mut keys = profile.load_keys(ctx.pass())?;
    let mut mailbox = Mailbox::load(&profile, &keys)?;
    let mut world = ctx.world()?;
    let mut out = Vec::new();
    let errors = match &mut mailbox {
        Mailbox::Dpush(s) => {
            let r = dpush::drain_inbox(&mut world.dht(), s, limit);
            for m in r.messages {
                let mut line = json!({"block_id": m.block_id, "target_key": m.target_key, "sender": null});
                merge(&mut line, body_json(&m.payload));
                out.push(line.to_string());
            }
            r.errors
        }
        Mailbox::Dmail(d) => {
            let r = dmail::receive_all(&mut world.dht(), d, limit);
            for (id, m) in r.accepted {
                let mut line = json!({
                    "block_id": id,
                    "sender": m.sender_address,
                    "timestamp": m.message.timestamp,
                });
                merge(&mut line, body_json(&m.message.body));
                out.push(line.to_string());
            }
            for (id, why) in r.rejected {
                out.push(json!({"block_id": id, "rejected": why.to_string()}).to_string());
            }
            r.errors
        }
    };
    mailbox.save(&profile, &mut keys, ctx.pass())?;
    if let Some((t, e)) = errors.into_iter().next() {
        return Err(CliError::Network(format!("scanning target {t}: {e}")));
    }
    Ok(out)
}

fn merge(into: &mut serde_json::Value, from: serde_json::Value) {
    if let (Some(a), serde_json::Value::Object(b)) = (into.as_object_mut(), from) {
        a.extend(b);
    }
}

fn follow(ctx: &Ctx, cmd: FollowCmd) -> Result<Vec<String>, CliError> {
    let profile = ctx.profile()?;
    let mut keys = profile.load_keys(ctx.pass())?;
    let mut mailbox = Mailbox::load(&profile, &keys)?;
    let out = match cmd {
        FollowCmd::Add { id } => {
            let added = dpush::follow(mailbox.inbox_mut(), id);
            vec![json!({"following": id, "added": added}).to_string()]
        }
        FollowCmd::Poll => {
            let mut world = ctx.world()?;
            let r = dpush::poll_followed(&mut world.dht(), mailbox.inbox_mut());
            let mut out: Vec<String> = r
                .messages
                .iter()
                .map(|m| {
                    let mut line = json!({"from": m.from, "version": m.version});
                    merge(&mut line, body_json(&m.data));
                    line.to_string()
                })
                .collect();
            out.extend(
                r.errors
                    .iter()
                    .map(|(id, e)| json!({"from": id, "error": e.to_string()}).to_string()),
            );
            out
        }
    };
    mailbox.save(&profile, &mut keys, ctx.pass())?;
    Ok(out)
}

fn channel(ctx: &Ctx, cmd: ChannelCmd) -> Result<Vec<String>, CliError> {
    let profile = ctx.profile()?;
    let mut keys = profile.load_keys(ctx.pass())?;
    match cmd {
        ChannelCmd::Id => Ok(vec![json!({"channel_id": keys.channel.key_id(), "version": keys.channel_version}).to_string()]),
        ChannelCmd::Publish { input } => {
            let body = read_input(&input)?;
            let mut world = ctx.world()?;
            let mut chan = Channel { keypair: keys.channel.clone(), version: keys.channel_version };
            let replicas = chan.publish(&mut world.dht(), &body)?;
            world.save()?;
            keys.channel_version = chan.version;
            profile.save_keys(&keys, ctx.pass())?;
            Ok(vec![json!({"channel_id": chan.id(), "version": chan.version, "replicas": replicas}).to_string()])
        }
    }
}

fn sim_run(path: &Path, metrics: Option<&Path>) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let scenario = Scenario::from_json(&text)?;
    let outcome = ScenarioRunner::run(&scenario)?;
    if let Some(m) = metrics {
        std::fs::write(m, outcome.metrics.to_csv()).map_err(|e| CliError::Io(format!("{}: {e}", m.display())))?;
    }
    let m = &outcome.metrics;
    let summary = json!({
        "operations": m.ops.len(),
        "rpcs_sent": m.rpcs_sent,
        "dropped": m.dropped,
        "timeouts": m.timeouts,
        "simulated_ms": m.now_ms,
        "messages_by_kind": m.messages_by_kind,
        "failures": outcome.failures,
    });
    if !outcome.passed() {
        return Err(CliError::Protocol(format!("scenario expectations failed: {}", outcome.failures.join("; "))));
    }
    Ok(vec![summary.to_string()])
}

fn econ(args: &EconomicsArgs) -> Result<Vec<String>, CliError> {
    let per = match (args.per_conversion, args.messages, args.conversions) {
        (Some(p), _, _) => p,
        (None, Some(m), Some(c)) => messages_per_conversion(m, c)?,
        _ => return Err(CliError::Usage("give --per-conversion or --messages with --conversions".into())),
    };
    let r = economics(args.pow_seconds, per)?;
    if args.json {
        return Ok(vec![serde_json::to_string(&r).expect("report serializes")]);
    }
    Ok(vec![format!(
        "{} s/message x {} messages/conversion = {} s = {:.2} years",
        r.pow_seconds_per_message, r.messages_per_conversion, r.total_seconds_per_conversion, r.total_years_per_conversion
    )])
}
