//! Dmail: encrypted, authenticated mail carried as Dpush payloads.
//!
//! The receiver's site adds an `enc` object naming the cipher and carrying a
//! key-agreement public value. A sender signs the message with their
//! identity key, encrypts it under a key agreed between a fresh ephemeral
//! keypair and the site's value, and mines the resulting [`DmailWrapper`]
//! toward the receiver's target. Because an address is the hash of a signing
//! key, a verified signature proves which address sent the mail.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::block::Difficulty;
use crate::dpush::{
    self, DpushError, DpushSite, InboxSnapshot, InboxState, Receipt, ScanReport, SendOptions, SiteTarget,
    DMAIL_SITE_KIND,
};
use crate::ident::{
    default_suite, derive_symmetric_key, key_id, CryptoSuite, KaKeypair, Keypair, KeyId, PublicKey, SecretKey,
    AEAD_NONCE_LEN,
};
use crate::routing::{Dht, DhtError};

pub const SCHEME_AES_256_GCM: &str = "aes-256-gcm";
const SCHEME_ID_AES_256_GCM: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DmailError {
    #[error(transparent)]
    Dpush(#[from] DpushError),
    #[error("not a dmail site: {0}")]
    NotDmailSite(String),
    #[error("unsupported-scheme: {0}")]
    UnsupportedScheme(String),
    #[error("empty body")]
    EmptyBody,
}

impl From<DhtError> for DmailError {
    fn from(e: DhtError) -> Self {
        DmailError::Dpush(e.into())
    }
}

/// Why a wrapper was not accepted.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpenReject {
    #[error("malformed")]
    Malformed,
    #[error("undecryptable")]
    Undecryptable,
    #[error("bad-signature")]
    BadSignature,
    #[error("wrong-destination")]
    WrongDestination,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct EncParams {
    scheme: String,
    ka_pub: String,
}

/// A [`DpushSite`] of kind `dmail/site` with its encryption parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DmailSite {
    pub site: DpushSite,
    pub scheme: String,
    pub ka_pub: Vec<u8>,
}

impl DmailSite {
    pub fn new(targets: Vec<SiteTarget>, ka_pub: &[u8]) -> Self {
        let mut site = DpushSite::new(DMAIL_SITE_KIND, targets);
        set_enc(&mut site, SCHEME_AES_256_GCM, ka_pub);
        DmailSite { site, scheme: SCHEME_AES_256_GCM.to_string(), ka_pub: ka_pub.to_vec() }
    }

    /// Parse the `enc` object. The scheme is not checked here; senders
    /// refuse unsupported schemes before doing any work.
    pub fn from_site(site: DpushSite) -> Result<Self, DmailError> {
        if site.kind != DMAIL_SITE_KIND {
            return Err(DmailError::NotDmailSite(format!("kind is {:?}", site.kind)));
        }
        let enc = site.other.get("enc").ok_or_else(|| DmailError::NotDmailSite("missing enc".into()))?;
        let enc: EncParams =
            serde_json::from_value(enc.clone()).map_err(|e| DmailError::NotDmailSite(e.to_string()))?;
        let ka_pub = B64
            .decode(enc.ka_pub.as_bytes())
            .map_err(|e| DmailError::NotDmailSite(format!("ka_pub: {e}")))?;
        Ok(DmailSite { site, scheme: enc.scheme, ka_pub })
    }

    pub fn check_supported(&self) -> Result<(), DmailError> {
        if self.scheme != SCHEME_AES_256_GCM {
            return Err(DmailError::UnsupportedScheme(self.scheme.clone()));
        }
        default_suite()
            .check_ka_public(&self.ka_pub)
            .map_err(|e| DmailError::NotDmailSite(e.to_string()))
    }
}

fn set_enc(site: &mut DpushSite, scheme: &str, ka_pub: &[u8]) {
    let enc = EncParams { scheme: scheme.to_string(), ka_pub: B64.encode(ka_pub) };
    site.other.insert("enc".into(), serde_json::to_value(enc).expect("enc serializes"));
}

/// Plaintext mail, signed by the sender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmailMessage {
    pub sender: PublicKey,
    pub destination: KeyId,
    pub timestamp: u64,
    pub body: Vec<u8>,
    pub signature: Vec<u8>,
}

fn put_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_be_bytes());
    out.extend_from_slice(field);
}

fn take_field<'a>(buf: &mut &'a [u8]) -> Option<&'a [u8]> {
    let len = u32::from_be_bytes(buf.get(..4)?.try_into().ok()?) as usize;
    let field = buf.get(4..4 + len)?;
    *buf = &buf[4 + len..];
    Some(field)
}

impl DmailMessage {
    /// Length-prefixed sender key, destination, timestamp, body.
    pub fn signing_bytes(sender: &PublicKey, destination: &KeyId, timestamp: u64, body: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(body.len() + 128);
        put_field(&mut out, sender.as_bytes());
        put_field(&mut out, destination.as_bytes());
        put_field(&mut out, &timestamp.to_be_bytes());
        put_field(&mut out, body);
        out
    }

    pub fn signed(kp: &Keypair, destination: KeyId, timestamp: u64, body: Vec<u8>) -> Self {
        let signature = kp.sign(&Self::signing_bytes(&kp.public, &destination, timestamp, &body));
        DmailMessage { sender: kp.public.clone(), destination, timestamp, body, signature }
    }

    pub fn verify(&self) -> bool {
        let msg = Self::signing_bytes(&self.sender, &self.destination, self.timestamp, &self.body);
        self.sender.verify(&msg, &self.signature)
    }

    pub fn sender_address(&self) -> Option<KeyId> {
        key_id(&self.sender).ok()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Self::signing_bytes(&self.sender, &self.destination, self.timestamp, &self.body);
        put_field(&mut out, &self.signature);
        out
    }

    pub fn decode(mut bytes: &[u8]) -> Option<Self> {
        let buf = &mut bytes;
        let sender = PublicKey::from_bytes(take_field(buf)?.to_vec());
        let destination = KeyId::from_slice(take_field(buf)?).ok()?;
        let timestamp = u64::from_be_bytes(take_field(buf)?.try_into().ok()?);
        let body = take_field(buf)?.to_vec();
        let signature = take_field(buf)?.to_vec();
        buf.is_empty().then_some(DmailMessage { sender, destination, timestamp, body, signature })
    }
}

/// `scheme id (u16) || ka public (u16 length-prefixed) || nonce || ciphertext`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmailWrapper {
    pub scheme_id: u16,
    pub sender_ka_pub: Vec<u8>,
    pub nonce: [u8; AEAD_NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl DmailWrapper {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.sender_ka_pub.len() + AEAD_NONCE_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.scheme_id.to_be_bytes());
        out.extend_from_slice(&(self.sender_ka_pub.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.sender_ka_pub);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let scheme_id = u16::from_be_bytes(bytes.get(..2)?.try_into().ok()?);
        let ka_len = u16::from_be_bytes(bytes.get(2..4)?.try_into().ok()?) as usize;
        let sender_ka_pub = bytes.get(4..4 + ka_len)?.to_vec();
        let rest = &bytes[4 + ka_len..];
        let nonce = rest.get(..AEAD_NONCE_LEN)?.try_into().ok()?;
        let ciphertext = rest[AEAD_NONCE_LEN..].to_vec();
        Some(DmailWrapper { scheme_id, sender_ka_pub, nonce, ciphertext })
    }
}

/// Sign, encrypt, and wrap `body` for the holder of `site`.
pub fn seal<R: RngCore + CryptoRng>(
    sender: &Keypair,
    to: KeyId,
    site: &DmailSite,
    body: &[u8],
    timestamp: u64,
    rng: &mut R,
) -> Result<DmailWrapper, DmailError> {
    site.check_supported()?;
    if body.is_empty() {
        return Err(DmailError::EmptyBody);
    }
    let msg = DmailMessage::signed(sender, to, timestamp, body.to_vec());
    let eph = KaKeypair::generate(rng);
    let key = agreed_key(&eph, &site.ka_pub).ok_or_else(|| DmailError::NotDmailSite("bad ka_pub".into()))?;
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ciphertext = default_suite().seal(&key, &nonce, &msg.encode());
    Ok(DmailWrapper { scheme_id: SCHEME_ID_AES_256_GCM, sender_ka_pub: eph.public, nonce, ciphertext })
}

fn agreed_key(ka: &KaKeypair, peer: &[u8]) -> Option<[u8; 32]> {
    let shared = ka.shared_secret(peer).ok()?;
    derive_symmetric_key(&shared).ok()
}

/// Owner state: the Dpush inbox plus current and retired ka keys.
#[derive(Debug, Clone)]
pub struct DmailInbox {
    pub inbox: InboxState,
    pub ka: KaKeypair,
    /// Most recently retired last.
    pub retired_ka: Vec<KaKeypair>,
}

/// Persistable form of [`DmailInbox`]; includes the ka secrets, which is
/// what lets a restored inbox read mail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmailSnapshot {
    pub inbox: InboxSnapshot,
    #[serde(with = "crate::ident::hex_bytes")]
    pub ka_secret: Vec<u8>,
    pub retired_ka_secrets: Vec<String>,
}

impl DmailInbox {
    pub fn address(&self) -> KeyId {
        self.inbox.address
    }

    pub fn snapshot(&self) -> DmailSnapshot {
        DmailSnapshot {
            inbox: self.inbox.snapshot(),
            ka_secret: self.ka.secret().expose().to_vec(),
            retired_ka_secrets: self.retired_ka.iter().map(|k| hex::encode(k.secret().expose())).collect(),
        }
    }

    pub fn restore(keypair: Keypair, snap: DmailSnapshot) -> Result<Self, DpushError> {
        let bad = |e: String| DpushError::MalformedSite(format!("ka secret: {e}"));
        let ka = KaKeypair::from_secret(SecretKey::from_bytes(snap.ka_secret)).map_err(|e| bad(e.to_string()))?;
        let retired_ka = snap
            .retired_ka_secrets
            .iter()
            .map(|h| {
                let bytes = hex::decode(h).map_err(|e| bad(e.to_string()))?;
                KaKeypair::from_secret(SecretKey::from_bytes(bytes)).map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(DmailInbox { inbox: InboxState::restore(keypair, snap.inbox)?, ka, retired_ka })
    }

    /// Decrypt with the current ka key, then retired ones; verify the
    /// signature and that the mail is addressed here.
    pub fn open(&self, wrapper_bytes: &[u8]) -> Result<OpenedMail, OpenReject> {
        let w = DmailWrapper::from_bytes(wrapper_bytes).ok_or(OpenReject::Malformed)?;
        if w.scheme_id != SCHEME_ID_AES_256_GCM {
            return Err(OpenReject::Undecryptable);
        }
        let plaintext = std::iter::once(&self.ka)
            .chain(self.retired_ka.iter().rev())
            .filter_map(|ka| agreed_key(ka, &w.sender_ka_pub))
            .find_map(|key| default_suite().open(&key, &w.nonce, &w.ciphertext).ok())
            .ok_or(OpenReject::Undecryptable)?;
        let message = DmailMessage::decode(&plaintext).ok_or(OpenReject::Malformed)?;
        if !message.verify() {
            return Err(OpenReject::BadSignature);
        }
        if message.destination != self.inbox.address {
            return Err(OpenReject::WrongDestination);
        }
        let sender_address = message.sender_address().ok_or(OpenReject::BadSignature)?;
        Ok(OpenedMail { sender_address, message })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedMail {
    pub sender_address: KeyId,
    pub message: DmailMessage,
}

/// Publish a dmail site with a fresh ka keypair.
pub fn create_dmail_address<D: Dht, R: RngCore + CryptoRng>(
    dht: &mut D,
    kp: Keypair,
    difficulty: Difficulty,
    rng: &mut R,
) -> Result<DmailInbox, DmailError> {
    let ka = KaKeypair::generate(rng);
    let target = SiteTarget { target_key: KeyId::random(rng), difficulty };
    let site = DmailSite::new(vec![target], &ka.public);
    let inbox = dpush::create_address_with_site(dht, kp, site.site)?;
    Ok(DmailInbox { inbox, ka, retired_ka: Vec::new() })
}

pub fn fetch_dmail_site<D: Dht>(dht: &mut D, address: &KeyId) -> Result<(DmailSite, u64), DmailError> {
    let (site, version) = dpush::fetch_site(dht, address)?;
    Ok((DmailSite::from_site(site)?, version))
}

/// Fetch the recipient's site, seal, mine, and store. An unsupported scheme
/// fails before any mining.
pub fn compose_and_send<D: Dht, R: RngCore + CryptoRng>(
    dht: &mut D,
    sender: &Keypair,
    to: &KeyId,
    body: &[u8],
    timestamp: u64,
    opts: &SendOptions,
    rng: &mut R,
) -> Result<Receipt, DmailError> {
    let (site, _) = fetch_dmail_site(dht, to)?;
    let wrapper = seal(sender, *to, &site, body, timestamp, rng)?;
    Ok(dpush::send_to_site(dht, &site.site, &wrapper.to_bytes(), opts, rng)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MailReport {
    pub accepted: Vec<(KeyId, OpenedMail)>,
    pub rejected: Vec<(KeyId, OpenReject)>,
    pub errors: Vec<(KeyId, DhtError)>,
}

impl MailReport {
    fn absorb(&mut self, inbox: &DmailInbox, scan: ScanReport) {
        for m in scan.messages {
            match inbox.open(&m.payload) {
                Ok(mail) => self.accepted.push((m.block_id, mail)),
                Err(r) => self.rejected.push((m.block_id, r)),
            }
        }
        self.errors.extend(scan.errors);
    }
}

/// One scan page per target, opened.
pub fn receive<D: Dht>(dht: &mut D, inbox: &mut DmailInbox, limit: usize) -> MailReport {
    let scan = dpush::scan_inbox(dht, &mut inbox.inbox, limit);
    let mut report = MailReport::default();
    report.absorb(inbox, scan);
    report
}

/// Scan to exhaustion and open everything new.
pub fn receive_all<D: Dht>(dht: &mut D, inbox: &mut DmailInbox, limit: usize) -> MailReport {
    let scan = dpush::drain_inbox(dht, &mut inbox.inbox, limit);
    let mut report = MailReport::default();
    report.absorb(inbox, scan);
    report
}

/// Rotate the first target together with the ka key. The old ka key is
/// kept so mail sealed against the previous site still opens.
pub fn rotate<D: Dht, R: RngCore + CryptoRng>(
    dht: &mut D,
    inbox: &mut DmailInbox,
    now: u64,
    rng: &mut R,
) -> Result<SiteTarget, DmailError> {
    let ka = KaKeypair::generate(rng);
    let scheme = match inbox.inbox.site.other.get("enc") {
        Some(Value::Object(enc)) => enc.get("scheme").and_then(Value::as_str).unwrap_or(SCHEME_AES_256_GCM).to_string(),
        _ => SCHEME_AES_256_GCM.to_string(),
    };
    let target = dpush::rotate_target_with(dht, &mut inbox.inbox, now, rng, |site| set_enc(site, &scheme, &ka.public))?;
    let old = std::mem::replace(&mut inbox.ka, ka);
    inbox.retired_ka.push(old);
    Ok(target)
}
