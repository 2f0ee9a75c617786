//! End-to-end acceptance checks. Runs as a plain binary so every
//! criterion prints exactly one PASS or FAIL line, then exits nonzero if
//! any failed.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use dpush_cli::economics::{economics, messages_per_conversion};
use dpush_core::block::{mine, BlockHeader, BlockReject, Difficulty, HEADER_LEN};
use dpush_core::dmail::{self, DmailMessage, DmailSite, OpenReject};
use dpush_core::dpush::{self, SendOptions};
use dpush_core::ident::{self, default_suite, CryptoSuite, KaKeypair, KeyId, Keypair};
use dpush_core::routing::{Client, Dht, DhtParams, Endpoint, NoPeers, Node, NodeInfo};
use dpush_core::simnet::{Action, Scenario, ScenarioError, ScenarioRunner, Sim, SimConfig};
use dpush_core::store::{Reject, ScanCursor, Store, StorePolicy};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha512};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn d(bits: u32) -> Difficulty {
    Difficulty::new(bits).unwrap()
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn geomean(xs: &[u64]) -> f64 {
    (xs.iter().map(|&x| (x as f64).ln()).sum::<f64>() / xs.len() as f64).exp()
}

fn spam_economics() -> Check {
    let per = messages_per_conversion(350e6, 28.0).map_err(fail)?;
    let r = economics(5.0, per).map_err(fail)?;
    ensure!(r.messages_per_conversion == 12_500_000.0, "messages per conversion {}", r.messages_per_conversion);
    ensure!(r.total_seconds_per_conversion == 62_500_000.0, "seconds {}", r.total_seconds_per_conversion);
    ensure!((1.97..=1.99).contains(&r.total_years_per_conversion), "years {}", r.total_years_per_conversion);
    Ok(format!("12,500,000 messages/sale, {:.3} computer-years/sale", r.total_years_per_conversion))
}

fn pow_work_law() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let mut summary = Vec::new();
    for bits in [8u32, 12, 16] {
        let attempts: Vec<u64> = (0..100)
            .map(|_| {
                let payload: Vec<u8> = (0..rng.gen_range(1..512)).map(|_| rng.gen()).collect();
                let m = mine(KeyId::random(&mut rng), d(bits), &payload, rng.gen(), None).unwrap();
                m.attempts
            })
            .collect();
        let g = geomean(&attempts);
        let (lo, hi) = (2f64.powi(bits as i32 - 1), 2f64.powi(bits as i32 + 1));
        ensure!((lo..=hi).contains(&g), "d={bits}: geomean {g:.0} outside [{lo}, {hi}]");
        summary.push(format!("d={bits} geomean {g:.0}"));
    }
    // The mined ID is SHA-512 over the encoded header alone, 136 bytes for
    // any payload size; checked against an independent hash.
    for len in [1usize, 100, 32_768] {
        let payload = vec![0xA5u8; len];
        let m = mine(KeyId::random(&mut rng), d(4), &payload, 0, None).unwrap();
        let enc = m.block.header.encode();
        ensure!(enc.len() == 136 && HEADER_LEN == 136, "header is {} bytes", enc.len());
        let oracle = Sha512::digest(enc);
        ensure!(m.block.id().as_bytes()[..] == oracle[..], "block id is not the header hash");
        ensure!(m.bytes_hashed == m.attempts * 136, "payload {len}: {} bytes over {} attempts", m.bytes_hashed, m.attempts);
        ensure!(BlockHeader::decode(&enc).unwrap() == m.block.header, "header round trip");
    }
    Ok(format!("{}; 136 bytes hashed per attempt for payloads of 1 B to 32 KiB", summary.join(", ")))
}

fn act(json: &str) -> Action {
    serde_json::from_str(json).unwrap()
}

fn offline_delivery() -> Check {
    let scenario = Scenario {
        config: SimConfig { node_count: 64, seed: 31, ..SimConfig::default() },
        actions: vec![
            act(r#"{"op":"create_address","user":"alice","node":5,"difficulty":16}"#),
            act(r#"{"op":"create_address","user":"bob","node":40,"difficulty":16}"#),
            act(r#"{"op":"offline","node":40}"#),
            act(r#"{"op":"send","from":"alice","to":"bob","body":"while you were away"}"#),
            act(r#"{"op":"quiesce"}"#),
            act(r#"{"op":"online","node":40}"#),
            act(r#"{"op":"scan","user":"bob"}"#),
        ],
    };
    let out = ScenarioRunner::run(&scenario).map_err(fail)?;
    let got = &out.received["bob"];
    ensure!(got.len() == 1, "bob received {} messages", got.len());
    ensure!(got[0].body == b"while you were away", "body mismatch");
    ensure!(got[0].sender == Some(out.addresses["alice"]), "sender not verified as alice");
    Ok("64 nodes, receiver offline during send; body and sender verified after rejoin".into())
}

fn scan_oracle_equivalence() -> Check {
    let mut notes = Vec::new();
    for (n, seed) in [(16usize, 41u64), (64, 42)] {
        let cfg = SimConfig { node_count: n, seed, replication: 3, floor: 16, ..SimConfig::default() };
        let mut sim = Sim::build(cfg).map_err(fail)?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut sites = Vec::new();
        for _ in 0..4 {
            let home = rng.gen_range(0..n);
            let kp = Keypair::generate(&mut rng);
            let st = sim
                .with_dht(home, "create_address", |ctx| -> Result<_, ScenarioError> {
                    Ok(dpush::create_address(&mut ctx.dht, kp, d(16), ctx.rng)?)
                })
                .map_err(fail)?;
            sites.push(st.site);
        }
        let mut colliders = 0;
        for i in 0..50 {
            let from = rng.gen_range(0..n);
            let site = &sites[i % sites.len()];
            let body = format!("message {i} from {from}");
            let r = if i % 5 == 4 {
                // Same 16-bit prefix region, different target key.
                colliders += 1;
                let target = site.targets[0].target_key.with_bit_flipped(511);
                sim.with_dht(from, "send_collider", |ctx| -> Result<_, ScenarioError> {
                    let m = mine(target, d(16), body.as_bytes(), ctx.rng.gen(), None).map_err(dpush::DpushError::from)?;
                    ctx.attempts = m.attempts;
                    Ok(ctx.dht.store_targeted(&m.block).map_err(dpush::DpushError::from)?)
                })
            } else {
                sim.with_dht(from, "send", |ctx| -> Result<_, ScenarioError> {
                    let r = dpush::send_to_site(&mut ctx.dht, site, body.as_bytes(), &SendOptions::default(), ctx.rng)?;
                    ctx.attempts = r.attempts;
                    Ok(r.replicas)
                })
            };
            let replicas = r.map_err(fail)?;
            ensure!(replicas >= 3, "n={n} send {i} stored on {replicas} nodes");
        }
        for site in &sites {
            let t = site.targets[0].target_key;
            let oracle: Vec<KeyId> = sim.ledger_scan(&t, d(16), true).iter().map(|b| b.id()).collect();
            ensure!(!oracle.is_empty(), "n={n}: empty oracle");
            let in_region = sim
                .all_targeted(true)
                .values()
                .filter(|b| b.header.target_key != t && ident::KeyId::xor(&b.id(), &t).leading_zeros() >= 16)
                .count();
            ensure!(in_region > 0, "n={n}: no prefix-colliding block to exclude");
            for node in 0..n {
                let ids = sim
                    .with_dht(node, "scan", |ctx| -> Result<_, ScenarioError> {
                        let mut cursor = ScanCursor::start();
                        let mut ids = Vec::new();
                        loop {
                            let page = ctx.dht.scan(&t, d(16), &cursor, 3).map_err(dpush::DpushError::from)?;
                            if page.blocks.is_empty() {
                                return Ok(ids);
                            }
                            ids.extend(page.blocks.iter().map(|b| b.id()));
                            cursor = page.next;
                        }
                    })
                    .map_err(fail)?;
                ensure!(ids == oracle, "n={n} node {node}: scan returned {} blocks, oracle {}", ids.len(), oracle.len());
            }
        }
        notes.push(format!("n={n}: 50 sends ({colliders} prefix collisions), 4 targets x {n} nodes"));
    }
    Ok(notes.join("; "))
}

fn rotation() -> Check {
    let cfg = SimConfig { node_count: 24, seed: 51, ..SimConfig::default() };
    let mut run = ScenarioRunner::new(cfg).map_err(fail)?;
    let mut addresses = BTreeSet::new();
    let mut versions = Vec::new();
    let mut observe = |run: &mut ScenarioRunner| -> Result<(), String> {
        let addr = run.address("bob").ok_or("bob has no address")?;
        let (_, v) = run
            .sim
            .with_dht(2, "fetch_site", |ctx| -> Result<_, ScenarioError> { Ok(dpush::fetch_site(&mut ctx.dht, &addr)?) })
            .map_err(fail)?;
        addresses.insert(addr);
        versions.push(v);
        Ok(())
    };
    let steps = [
        r#"{"op":"create_address","user":"bob","node":3,"difficulty":16}"#,
        r#"{"op":"create_address","user":"alice","node":9,"difficulty":16}"#,
        r#"{"op":"create_address","user":"carol","node":15,"difficulty":16}"#,
        r#"{"op":"fetch_site","user":"carol","of":"bob"}"#,
        r#"{"op":"send","from":"alice","to":"bob","body":"v1 fresh"}"#,
        r#"{"op":"rotate","user":"bob"}"#,
        r#"{"op":"send","from":"alice","to":"bob","body":"v2 fresh"}"#,
        r#"{"op":"send","from":"carol","to":"bob","body":"v2 stale","use_cached_site":true}"#,
        r#"{"op":"rotate","user":"bob"}"#,
        r#"{"op":"send","from":"alice","to":"bob","body":"v3 fresh"}"#,
        r#"{"op":"send","from":"carol","to":"bob","body":"v3 stale","use_cached_site":true}"#,
        r#"{"op":"scan","user":"bob"}"#,
        r#"{"op":"expect_inbox","user":"bob","bodies":["v1 fresh","v2 fresh","v2 stale","v3 fresh","v3 stale"]}"#,
    ];
    for (i, s) in steps.iter().enumerate() {
        run.apply(&act(s)).map_err(|e| format!("step {i}: {e}"))?;
        if s.contains("create_address\",\"user\":\"bob") || s.contains("rotate") {
            observe(&mut run)?;
        }
    }
    ensure!(versions == [1, 2, 3], "site versions {versions:?}");
    ensure!(addresses.len() == 1, "address changed across versions");
    let got = run.received("bob").len();
    let out = run.finish().map_err(fail)?;
    ensure!(out.passed(), "{}", out.failures.join("; "));
    ensure!(got == 5, "received {got}");
    Ok("5/5 messages recovered including 2 stale-site sends; one address across site versions 1..3".into())
}

fn follow_channel() -> Check {
    let mut actions = vec![
        act(r#"{"op":"create_address","user":"alice","node":1,"difficulty":16}"#),
        act(r#"{"op":"create_address","user":"bob","node":6,"difficulty":16}"#),
        act(r#"{"op":"send","from":"alice","to":"bob","body":"first contact"}"#),
        act(r#"{"op":"scan","user":"bob"}"#),
        act(r#"{"op":"follow","user":"bob","of":"alice"}"#),
    ];
    let posts: Vec<String> = (1..=5).map(|i| format!("post {i}")).collect();
    for p in &posts {
        actions.push(Action::ChannelPublish { user: "alice".into(), body: p.clone() });
        actions.push(act(r#"{"op":"poll","user":"bob"}"#));
    }
    actions.push(Action::ExpectFollow { user: "bob".into(), bodies: posts.clone() });
    let cfg = SimConfig { node_count: 32, seed: 61, ..SimConfig::default() };
    let mut run = ScenarioRunner::new(cfg).map_err(fail)?;
    for a in &actions {
        run.apply(a).map_err(fail)?;
    }
    let m = run.sim.metrics();
    let first = m.rows("send").next().ok_or("no first-contact send")?;
    ensure!(first.attempts > 0, "first contact was not mined");
    ensure!(m.rows("channel_publish").count() == 5, "publish rows");
    ensure!(
        m.rows("channel_publish").chain(m.rows("poll")).all(|r| r.attempts == 0),
        "channel traffic recorded mining attempts"
    );

    for i in 0..50 {
        run.apply(&Action::CreateAddress { user: format!("sub{i}"), node: i % 32, difficulty: Some(16), dmail: false })
            .map_err(fail)?;
        run.apply(&Action::Follow { user: format!("sub{i}"), of: "alice".into() }).map_err(fail)?;
    }
    let before = run.sim.metrics().rows("channel_publish").count();
    run.apply(&Action::ChannelPublish { user: "alice".into(), body: "broadcast".into() }).map_err(fail)?;
    let publishes = run.sim.metrics().rows("channel_publish").count() - before;
    for i in 0..50 {
        run.apply(&Action::Poll { user: format!("sub{i}") }).map_err(fail)?;
        run.apply(&Action::ExpectFollow { user: format!("sub{i}"), bodies: vec!["broadcast".into()] }).map_err(fail)?;
    }
    let out = run.finish().map_err(fail)?;
    ensure!(out.passed(), "{}", out.failures.join("; "));
    ensure!(publishes == 1, "broadcast took {publishes} publish operations");
    Ok(format!(
        "first contact mined in {} attempts; 5 channel posts at 0 attempts; 50 subscribers served by 1 publish",
        first.attempts
    ))
}

fn tamper_suite() -> Check {
    let mut rng = StdRng::seed_from_u64(71);
    let mut store = Store::new(StorePolicy::default());
    let floor = store.policy().min_targeted_difficulty;
    let target = KeyId::random(&mut rng);

    let good = mine(target, floor, b"genuine", 0, None).map_err(fail)?.block;
    let mut flipped = good.clone();
    flipped.data[0] ^= 1;
    ensure!(
        store.put_targeted(&flipped) == Err(Reject::Block(BlockReject::BlockHashMismatch)),
        "flipped payload accepted"
    );

    // Search for a low-work header that genuinely misses the floor.
    let weak = (0u64..)
        .map(|nonce| mine(target, d(4), b"cheap", nonce * 1_000_003, None).unwrap().block)
        .find(|b| b.id().xor(&target).leading_zeros() < floor.bits())
        .unwrap();
    ensure!(
        store.put_targeted(&weak) == Err(Reject::Block(BlockReject::InsufficientWork)),
        "below-floor block accepted"
    );

    store.put_targeted(&good).map_err(fail)?;
    let wrong = mine(target.with_bit_flipped(511), floor, b"wrong target", 0, None).map_err(fail)?.block;
    store.put_targeted(&wrong).map_err(fail)?;
    let page = store.scan_targeted(&target, floor, &ScanCursor::start(), 100);
    let ids: Vec<KeyId> = page.blocks.iter().map(|b| b.id()).collect();
    ensure!(ids == [good.id()], "scan returned {} blocks", ids.len());

    let mut node = Node::new(
        NodeInfo { id: KeyId::random(&mut rng), endpoint: Endpoint(0) },
        DhtParams::default(),
        StorePolicy::default(),
    );
    let mut net = NoPeers;
    let mut dht = Client::new(&mut node, &mut net);
    let inbox = dmail::create_dmail_address(&mut dht, Keypair::generate(&mut rng), floor, &mut rng).map_err(fail)?;
    let site = DmailSite::from_site(inbox.inbox.site.clone()).map_err(fail)?;
    let victim = Keypair::generate(&mut rng);
    let attacker = Keypair::generate(&mut rng);

    let sealed = dmail::seal(&victim, inbox.address(), &site, b"from the victim", 9, &mut rng).map_err(fail)?;
    let opened = inbox.open(&sealed.to_bytes()).map_err(fail)?;
    ensure!(opened.sender_address == victim.key_id(), "genuine mail misattributed");
    let mut ct = sealed.clone();
    let last = ct.ciphertext.len() - 1;
    ct.ciphertext[last] ^= 1;
    ensure!(inbox.open(&ct.to_bytes()) == Err(OpenReject::Undecryptable), "flipped ciphertext opened");

    // Captured plaintext re-signed by someone else.
    let resealed = dmail::seal(&attacker, inbox.address(), &site, &opened.message.body, 9, &mut rng).map_err(fail)?;
    let reopened = inbox.open(&resealed.to_bytes()).map_err(fail)?;
    ensure!(reopened.sender_address == attacker.key_id(), "re-signed mail not attributed to re-signer");
    ensure!(reopened.sender_address != victim.key_id(), "re-signed mail attributed to victim");

    // Claiming the victim's key under the attacker's signature.
    let mut forged = DmailMessage::signed(&attacker, inbox.address(), 9, b"pay me".to_vec());
    forged.sender = victim.public.clone();
    let eph = KaKeypair::generate(&mut rng);
    let key = ident::derive_symmetric_key(&eph.shared_secret(&site.ka_pub).map_err(fail)?).map_err(fail)?;
    let nonce = [7u8; 12];
    let w = dmail::DmailWrapper {
        scheme_id: sealed.scheme_id,
        sender_ka_pub: eph.public.clone(),
        nonce,
        ciphertext: default_suite().seal(&key, &nonce, &forged.encode()),
    };
    ensure!(inbox.open(&w.to_bytes()) == Err(OpenReject::BadSignature), "forged signature accepted");
    Ok("payload flip, below-floor work, wrong target, ciphertext flip, re-sign and forged signature all refused".into())
}

fn hop_scaling() -> Check {
    let mut means = Vec::new();
    for (n, seed) in [(50usize, 81u64), (200, 82), (800, 83)] {
        let cfg = SimConfig { node_count: n, seed, record_trace: false, ..SimConfig::default() };
        let mut sim = Sim::build(cfg).map_err(fail)?;
        let mut rng = StdRng::seed_from_u64(seed);
        let lookups = 200;
        let mut hops = 0u64;
        for _ in 0..lookups {
            let from = rng.gen_range(0..n);
            let id = KeyId::random(&mut rng);
            let l = sim.lookup(from, &id).map_err(fail)?;
            let truth = sim.global_closest(&id, 1);
            ensure!(l.nodes[0].id == truth[0], "n={n}: lookup missed the closest node");
            hops += u64::from(l.hops);
        }
        let mean = hops as f64 / lookups as f64;
        let bound = (n as f64).log2();
        ensure!(mean.total_cmp(&bound).is_le(), "n={n}: mean hops {mean:.2} > log2 n = {bound:.2}");
        means.push((n, mean));
    }
    ensure!(
        means.windows(2).all(|w| w[0].1 <= w[1].1),
        "mean hops not monotone: {means:?}"
    );
    Ok(means.iter().map(|(n, m)| format!("n={n}: {m:.2} hops")).collect::<Vec<_>>().join(", "))
}

fn determinism() -> Check {
    let text = r#"{
      "config": {"node_count": 20, "seed": 91, "drop_rate": 0.1},
      "actions": [
        {"op": "create_address", "user": "bob", "node": 2, "difficulty": 16},
        {"op": "create_address", "user": "alice", "node": 11, "difficulty": 16},
        {"op": "follow", "user": "bob", "of": "alice"},
        {"op": "offline", "node": 2},
        {"op": "send", "from": "alice", "to": "bob", "body": "one"},
        {"op": "channel_publish", "user": "alice", "body": "news"},
        {"op": "online", "node": 2},
        {"op": "rotate", "user": "bob"},
        {"op": "send", "from": "alice", "to": "bob", "body": "two"},
        {"op": "scan", "user": "bob"},
        {"op": "poll", "user": "bob"},
        {"op": "lookup", "node": 5, "count": 20}
      ]
    }"#;
    let scenario = Scenario::from_json(text).map_err(fail)?;
    let a = ScenarioRunner::run(&scenario).map_err(fail)?.metrics.to_csv();
    let b = ScenarioRunner::run(&scenario).map_err(fail)?.metrics.to_csv();
    ensure!(a == b, "metrics CSV differs between runs");
    let mut other = scenario.clone();
    other.config.seed += 1;
    let c = ScenarioRunner::run(&other).map_err(fail)?.metrics.to_csv();
    ensure!(a != c, "seed has no effect on metrics");
    Ok(format!("{} CSV bytes identical across runs; a different seed differs", a.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("spam economics", spam_economics),
        ("proof-of-work law", pow_work_law),
        ("offline receiver delivery", offline_delivery),
        ("scan oracle equivalence", scan_oracle_equivalence),
        ("rotation keeps address", rotation),
        ("zero-work follow channel", follow_channel),
        ("tamper suite", tamper_suite),
        ("hop scaling", hop_scaling),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
