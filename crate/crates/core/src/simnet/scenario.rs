//! JSON scenario scripts: a [`SimConfig`] plus an ordered list of actions.
//!
//! ```json
//! {
//!   "config": { "node_count": 32, "seed": 7, "floor": 8 },
//!   "actions": [
//!     { "op": "create_address", "user": "alice", "node": 3, "difficulty": 10 },
//!     { "op": "user", "name": "bob", "node": 9 },
//!     { "op": "offline", "node": 3 },
//!     { "op": "send", "from": "bob", "to": "alice", "body": "hi" },
//!     { "op": "online", "node": 3 },
//!     { "op": "scan", "user": "alice" },
//!     { "op": "expect_inbox", "user": "alice", "bodies": ["hi"] }
//!   ]
//! }
//! ```
//!
//! Users are named actors homed on a node; their keys come from the
//! simulator's actor stream, so a script is fully reproducible from its seed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Sim, SimConfig, SimError, SimMetrics};
use crate::block::Difficulty;
use crate::dmail::{self, DmailError, DmailInbox, DmailSite};
use crate::dpush::{self, Channel, DpushError, DpushSite, InboxState, SendOptions, DEFAULT_DIFFICULTY};
use crate::ident::{Keypair, KeyId};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dpush(#[from] DpushError),
    #[error(transparent)]
    Dmail(#[from] DmailError),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("user {0:?} already exists")]
    DuplicateUser(String),
    #[error("user {0:?} has no address")]
    NoAddress(String),
    #[error("user {0:?} has no cached site for {1:?}")]
    NoCachedSite(String, String),
    #[error("action {index} ({op}): {source}")]
    Action {
        index: usize,
        op: &'static str,
        #[source]
        source: Box<ScenarioError>,
    },
}

fn default_true() -> bool {
    true
}

fn default_limit() -> usize {
    16
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Create an actor without an address.
    User { name: String, node: usize },
    /// Create an actor (if needed) and publish its address.
    CreateAddress {
        user: String,
        node: usize,
        #[serde(default)]
        difficulty: Option<u32>,
        #[serde(default = "default_true")]
        dmail: bool,
    },
    /// Fetch and remember `of`'s current site, for later stale sends.
    FetchSite { user: String, of: String },
    /// Send to `to`; Dmail addresses get sealed mail.
    Send {
        from: String,
        to: String,
        body: String,
        #[serde(default)]
        target_index: usize,
        /// Use the site cached by `fetch_site` instead of fetching afresh.
        #[serde(default)]
        use_cached_site: bool,
    },
    /// Drain the inbox, recording what arrived.
    Scan {
        user: String,
        #[serde(default = "default_limit")]
        limit: usize,
    },
    Rotate { user: String },
    DropRetired { user: String },
    Offline { node: usize },
    Online { node: usize },
    ChannelPublish { user: String, body: String },
    Follow { user: String, of: String },
    Poll { user: String },
    /// Random-key lookups from `node`, for hop statistics.
    Lookup {
        node: usize,
        #[serde(default = "default_count")]
        count: usize,
    },
    Quiesce,
    /// Everything received so far, as a set of bodies.
    ExpectInbox { user: String, bodies: Vec<String> },
    ExpectFollow { user: String, bodies: Vec<String> },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::User { .. } => "user",
            Action::CreateAddress { .. } => "create_address",
            Action::FetchSite { .. } => "fetch_site",
            Action::Send { .. } => "send",
            Action::Scan { .. } => "scan",
            Action::Rotate { .. } => "rotate",
            Action::DropRetired { .. } => "drop_retired",
            Action::Offline { .. } => "offline",
            Action::Online { .. } => "online",
            Action::ChannelPublish { .. } => "channel_publish",
            Action::Follow { .. } => "follow",
            Action::Poll { .. } => "poll",
            Action::Lookup { .. } => "lookup",
            Action::Quiesce => "quiesce",
            Action::ExpectInbox { .. } => "expect_inbox",
            Action::ExpectFollow { .. } => "expect_follow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub config: SimConfig,
    pub actions: Vec<Action>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }
}

/// One delivered message as the receiving user saw it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Received {
    pub block_id: KeyId,
    /// Verified sender address; Dmail only.
    pub sender: Option<KeyId>,
    pub body: Vec<u8>,
}

enum Mailbox {
    Dpush(InboxState),
    Dmail(DmailInbox),
}

impl Mailbox {
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

struct User {
    node: usize,
    keypair: Keypair,
    mailbox: Option<Mailbox>,
    /// Separate from `keypair`: both records would otherwise share an ID.
    channel: Channel,
    site_cache: BTreeMap<String, DpushSite>,
    received: Vec<Received>,
    followed: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub metrics: SimMetrics,
    /// Failed `expect_*` checks, in script order.
    pub failures: Vec<String>,
    /// Address of every user that created one.
    pub addresses: BTreeMap<String, KeyId>,
    pub received: BTreeMap<String, Vec<Received>>,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Executes actions against a live [`Sim`].
pub struct ScenarioRunner {
    pub sim: Sim,
    users: BTreeMap<String, User>,
    failures: Vec<String>,
}

impl ScenarioRunner {
    pub fn new(config: SimConfig) -> Result<Self, ScenarioError> {
        Ok(ScenarioRunner { sim: Sim::build(config)?, users: BTreeMap::new(), failures: Vec::new() })
    }

    /// Build the network, run every action, and drain remaining events.
    pub fn run(scenario: &Scenario) -> Result<ScenarioOutcome, ScenarioError> {
        let mut runner = ScenarioRunner::new(scenario.config.clone())?;
        for (index, action) in scenario.actions.iter().enumerate() {
            runner
                .apply(action)
                .map_err(|e| ScenarioError::Action { index, op: action.name(), source: Box::new(e) })?;
        }
        runner.finish()
    }

    pub fn finish(mut self) -> Result<ScenarioOutcome, ScenarioError> {
        let metrics = self.sim.run_until_quiescent()?;
        Ok(ScenarioOutcome {
            metrics,
            failures: std::mem::take(&mut self.failures),
            addresses: self
                .users
                .iter()
                .filter_map(|(n, u)| u.mailbox.as_ref().map(|m| (n.clone(), m.inbox().address)))
                .collect(),
            received: self.users.iter().map(|(n, u)| (n.clone(), u.received.clone())).collect(),
        })
    }

    pub fn address(&self, user: &str) -> Option<KeyId> {
        self.users.get(user)?.mailbox.as_ref().map(|m| m.inbox().address)
    }

    pub fn received(&self, user: &str) -> &[Received] {
        self.users.get(user).map_or(&[], |u| &u.received)
    }

    fn user(&self, name: &str) -> Result<&User, ScenarioError> {
        self.users.get(name).ok_or_else(|| ScenarioError::UnknownUser(name.to_string()))
    }

    fn user_mut(&mut self, name: &str) -> Result<&mut User, ScenarioError> {
        self.users.get_mut(name).ok_or_else(|| ScenarioError::UnknownUser(name.to_string()))
    }

    fn add_user(&mut self, name: &str, node: usize) -> Result<(), ScenarioError> {
        if node >= self.sim.node_count() {
            return Err(SimError::NoSuchNode(node).into());
        }
        let keypair = Keypair::generate(self.sim.rng());
        let channel = Channel::new(Keypair::generate(self.sim.rng()));
        self.users.insert(
            name.to_string(),
            User {
                node,
                keypair,
                mailbox: None,
                channel,
                site_cache: BTreeMap::new(),
                received: Vec::new(),
                followed: Vec::new(),
            },
        );
        Ok(())
    }

    pub fn apply(&mut self, action: &Action) -> Result<(), ScenarioError> {
        match action {
            Action::User { name, node } => {
                if self.users.contains_key(name) {
                    return Err(ScenarioError::DuplicateUser(name.clone()));
                }
                self.add_user(name, *node)
            }
            Action::CreateAddress { user, node, difficulty, dmail } => {
                if !self.users.contains_key(user) {
                    self.add_user(user, *node)?;
                }
                let u = self.user(user)?;
                if u.mailbox.is_some() {
                    return Err(ScenarioError::DuplicateUser(user.clone()));
                }
                let (home, kp) = (u.node, u.keypair.clone());
                let d = Difficulty::new(difficulty.unwrap_or(DEFAULT_DIFFICULTY)).map_err(DpushError::from)?;
                let dmail = *dmail;
                let mailbox = self.sim.with_dht(home, "create_address", |ctx| -> Result<_, ScenarioError> {
                    Ok(if dmail {
                        Mailbox::Dmail(dmail::create_dmail_address(&mut ctx.dht, kp, d, ctx.rng)?)
                    } else {
                        Mailbox::Dpush(dpush::create_address(&mut ctx.dht, kp, d, ctx.rng)?)
                    })
                })?;
                self.user_mut(user)?.mailbox = Some(mailbox);
                Ok(())
            }
            Action::FetchSite { user, of } => {
                let home = self.user(user)?.node;
                let address = self.address(of).ok_or_else(|| ScenarioError::NoAddress(of.clone()))?;
                let (site, _) = self
                    .sim
                    .with_dht(home, "fetch_site", |ctx| -> Result<_, ScenarioError> {
                        Ok(dpush::fetch_site(&mut ctx.dht, &address)?)
                    })?;
                self.user_mut(user)?.site_cache.insert(of.clone(), site);
                Ok(())
            }
            Action::Send { from, to, body, target_index, use_cached_site } => {
                let u = self.user(from)?;
                let (home, kp) = (u.node, u.keypair.clone());
                let cached = if *use_cached_site {
                    Some(
                        u.site_cache
                            .get(to)
                            .cloned()
                            .ok_or_else(|| ScenarioError::NoCachedSite(from.clone(), to.clone()))?,
                    )
                } else {
                    None
                };
                let address = self.address(to).ok_or_else(|| ScenarioError::NoAddress(to.clone()))?;
                let opts = SendOptions { target_index: *target_index, ..SendOptions::default() };
                let body = body.as_bytes();
                self.sim.with_dht(home, "send", |ctx| -> Result<(), ScenarioError> {
                    let site = match cached {
                        Some(s) => s,
                        None => dpush::fetch_site(&mut ctx.dht, &address)?.0,
                    };
                    let receipt = if site.kind == dpush::DMAIL_SITE_KIND {
                        let site = DmailSite::from_site(site)?;
                        let w = dmail::seal(&kp, address, &site, body, ctx.now_secs, ctx.rng)?;
                        dpush::send_to_site(&mut ctx.dht, &site.site, &w.to_bytes(), &opts, ctx.rng)?
                    } else {
                        dpush::send_to_site(&mut ctx.dht, &site, body, &opts, ctx.rng)?
                    };
                    ctx.attempts = receipt.attempts;
                    Ok(())
                })
            }
            Action::Scan { user, limit } => {
                let limit = *limit;
                let mut u = self.users.remove(user).ok_or_else(|| ScenarioError::UnknownUser(user.clone()))?;
                let result = match u.mailbox.as_mut() {
                    None => Err(ScenarioError::NoAddress(user.clone())),
                    Some(mailbox) => self.sim.with_dht(u.node, "scan", |ctx| -> Result<_, ScenarioError> {
                        Ok(match mailbox {
                            Mailbox::Dpush(s) => dpush::drain_inbox(&mut ctx.dht, s, limit)
                                .messages
                                .into_iter()
                                .map(|m| Received { block_id: m.block_id, sender: None, body: m.payload })
                                .collect::<Vec<_>>(),
                            Mailbox::Dmail(d) => dmail::receive_all(&mut ctx.dht, d, limit)
                                .accepted
                                .into_iter()
                                .map(|(id, m)| Received {
                                    block_id: id,
                                    sender: Some(m.sender_address),
                                    body: m.message.body,
                                })
                                .collect(),
                        })
                    }),
                };
                if let Ok(got) = &result {
                    u.received.extend(got.iter().cloned());
                }
                self.users.insert(user.clone(), u);
                result.map(|_| ())
            }
            Action::Rotate { user } => {
                let now = self.sim.now_ms() / 1000;
                let mut u = self.users.remove(user).ok_or_else(|| ScenarioError::UnknownUser(user.clone()))?;
                let result = match u.mailbox.as_mut() {
                    None => Err(ScenarioError::NoAddress(user.clone())),
                    Some(mailbox) => self.sim.with_dht(u.node, "rotate", |ctx| -> Result<(), ScenarioError> {
                        match mailbox {
                            Mailbox::Dpush(s) => {
                                dpush::rotate_target(&mut ctx.dht, s, now, ctx.rng)?;
                            }
                            Mailbox::Dmail(d) => {
                                dmail::rotate(&mut ctx.dht, d, now, ctx.rng)?;
                            }
                        }
                        Ok(())
                    }),
                };
                self.users.insert(user.clone(), u);
                result
            }
            Action::DropRetired { user } => {
                let mailbox = self.user_mut(user)?.mailbox.as_mut().ok_or_else(|| ScenarioError::NoAddress(user.clone()))?;
                mailbox.inbox_mut().retired.clear();
                Ok(())
            }
            Action::Offline { node } => Ok(self.sim.node_offline(*node)?),
            Action::Online { node } => Ok(self.sim.node_online(*node)?),
            Action::ChannelPublish { user, body } => {
                let u = self.users.get_mut(user).ok_or_else(|| ScenarioError::UnknownUser(user.clone()))?;
                let home = u.node;
                let chan = &mut u.channel;
                self.sim
                    .with_dht(home, "channel_publish", |ctx| -> Result<_, ScenarioError> {
                        Ok(chan.publish(&mut ctx.dht, body.as_bytes())?)
                    })
                    .map(|_| ())
            }
            Action::Follow { user, of } => {
                let id = self.user(of)?.channel.id();
                let mailbox = self.user_mut(user)?.mailbox.as_mut().ok_or_else(|| ScenarioError::NoAddress(user.clone()))?;
                dpush::follow(mailbox.inbox_mut(), id);
                Ok(())
            }
            Action::Poll { user } => {
                let mut u = self.users.remove(user).ok_or_else(|| ScenarioError::UnknownUser(user.clone()))?;
                let result = match u.mailbox.as_mut() {
                    None => Err(ScenarioError::NoAddress(user.clone())),
                    Some(mailbox) => self.sim.with_dht(u.node, "poll", |ctx| -> Result<_, ScenarioError> {
                        Ok(dpush::poll_followed(&mut ctx.dht, mailbox.inbox_mut()))
                    }),
                };
                if let Ok(report) = &result {
                    u.followed.extend(report.messages.iter().map(|m| m.data.clone()));
                }
                self.users.insert(user.clone(), u);
                result.map(|_| ())
            }
            Action::Lookup { node, count } => {
                for _ in 0..*count {
                    let id = KeyId::random(self.sim.rng());
                    self.sim.lookup(*node, &id)?;
                }
                Ok(())
            }
            Action::Quiesce => {
                self.sim.run_until_quiescent()?;
                Ok(())
            }
            Action::ExpectInbox { user, bodies } => {
                let got: BTreeSet<Vec<u8>> = self.user(user)?.received.iter().map(|r| r.body.clone()).collect();
                self.expect(user, "inbox", got, bodies);
                Ok(())
            }
            Action::ExpectFollow { user, bodies } => {
                let got: BTreeSet<Vec<u8>> = self.user(user)?.followed.iter().cloned().collect();
                self.expect(user, "follow", got, bodies);
                Ok(())
            }
        }
    }

    fn expect(&mut self, user: &str, what: &str, got: BTreeSet<Vec<u8>>, want: &[String]) {
        let want: BTreeSet<Vec<u8>> = want.iter().map(|b| b.as_bytes().to_vec()).collect();
        if got != want {
            let show = |s: &BTreeSet<Vec<u8>>| {
                s.iter().map(|b| String::from_utf8_lossy(b).into_owned()).collect::<Vec<_>>()
            };
            self.failures
                .push(format!("{user} {what}: expected {:?}, got {:?}", show(&want), show(&got)));
        }
    }
}
