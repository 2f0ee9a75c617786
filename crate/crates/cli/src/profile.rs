//! Local profile directory: `keys.json`, `inbox.json`, `follows.json`.
//!
//! Files are canonical JSON (sorted keys, compact) written via a temporary
//! file and rename. A `.lock` file created with `create_new` keeps two
//! invocations from using the same profile at once.
//!
//! Private keys are stored in clear unless a passphrase is supplied, in
//! which case the secret material is sealed with AES-256-GCM under a
//! PBKDF2-HMAC-SHA512 key.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use dpush_core::dpush::{Follow, InboxSnapshot};
use dpush_core::ident::{default_suite, CryptoSuite, KaKeypair, Keypair, KeyId, PublicKey, SecretKey};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const KEYS_FILE: &str = "keys.json";
pub const INBOX_FILE: &str = "inbox.json";
pub const FOLLOWS_FILE: &str = "follows.json";
const LOCK_FILE: &str = ".lock";
const KDF_ITERATIONS: u32 = 100_000;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Exclusive hold on a directory for the life of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another invocation (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn to_canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("profile types serialize");
    let mut out = serde_json::to_vec(&v).expect("json value serializes");
    out.push(b'\n');
    out
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| io_err(path, e)),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

/// Secret material, as stored in clear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PlainSecrets {
    signing: String,
    channel: String,
    #[serde(default)]
    ka: Option<String>,
    #[serde(default)]
    retired_ka: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "storage", rename_all = "snake_case")]
enum SecretsBox {
    Plain(PlainSecrets),
    Encrypted { kdf: String, iterations: u32, salt: String, nonce: String, ciphertext: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct KeysFile {
    address: KeyId,
    public: PublicKey,
    channel_id: KeyId,
    channel_version: u64,
    secrets: SecretsBox,
}

/// Decrypted key material.
#[derive(Debug, Clone)]
pub struct Keys {
    pub signing: Keypair,
    /// Separate identity for the follow channel; its record must not
    /// collide with the address record.
    pub channel: Keypair,
    pub channel_version: u64,
    pub ka: Option<KaKeypair>,
    pub retired_ka: Vec<KaKeypair>,
}

impl Keys {
    pub fn generate<R: RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        Keys {
            signing: Keypair::generate(rng),
            channel: Keypair::generate(rng),
            channel_version: 0,
            ka: None,
            retired_ka: Vec::new(),
        }
    }

    pub fn address(&self) -> KeyId {
        self.signing.key_id()
    }

    fn plain(&self) -> PlainSecrets {
        PlainSecrets {
            signing: hex::encode(self.signing.secret().expose()),
            channel: hex::encode(self.channel.secret().expose()),
            ka: self.ka.as_ref().map(|k| hex::encode(k.secret().expose())),
            retired_ka: self.retired_ka.iter().map(|k| hex::encode(k.secret().expose())).collect(),
        }
    }

    fn from_plain(p: &PlainSecrets) -> Result<Self, CliError> {
        let secret = |h: &str| {
            hex::decode(h)
                .map(SecretKey::from_bytes)
                .map_err(|e| CliError::Io(format!("{KEYS_FILE}: bad secret hex: {e}")))
        };
        let bad = |e: dpush_core::ident::IdentError| CliError::Io(format!("{KEYS_FILE}: {e}"));
        Ok(Keys {
            signing: Keypair::from_secret(secret(&p.signing)?).map_err(bad)?,
            channel: Keypair::from_secret(secret(&p.channel)?).map_err(bad)?,
            channel_version: 0,
            ka: p.ka.as_deref().map(|h| KaKeypair::from_secret(secret(h)?).map_err(bad)).transpose()?,
            retired_ka: p
                .retired_ka
                .iter()
                .map(|h| KaKeypair::from_secret(secret(h)?).map_err(bad))
                .collect::<Result<_, _>>()?,
        })
    }
}

fn kdf(passphrase: &str, salt: &[u8], iterations: u32) -> [u8; 32] {
    let mut key = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<sha2::Sha512>(passphrase.as_bytes(), salt, iterations, &mut key);
    key
}

fn seal_secrets(plain: &PlainSecrets, passphrase: &str) -> SecretsBox {
    let mut salt = [0u8; 16];
    let mut nonce = [0u8; 12];
    rand::thread_rng().fill_bytes(&mut salt);
    rand::thread_rng().fill_bytes(&mut nonce);
    let key = kdf(passphrase, &salt, KDF_ITERATIONS);
    let ct = default_suite().seal(&key, &nonce, &serde_json::to_vec(plain).expect("secrets serialize"));
    SecretsBox::Encrypted {
        kdf: "pbkdf2-hmac-sha512".into(),
        iterations: KDF_ITERATIONS,
        salt: hex::encode(salt),
        nonce: hex::encode(nonce),
        ciphertext: hex::encode(ct),
    }
}

fn open_secrets(sbox: &SecretsBox, passphrase: Option<&str>) -> Result<PlainSecrets, CliError> {
    match sbox {
        SecretsBox::Plain(p) => Ok(p.clone()),
        SecretsBox::Encrypted { kdf: name, iterations, salt, nonce, ciphertext } => {
            let pass = passphrase
                .ok_or_else(|| CliError::Usage("keys are passphrase-protected; pass --passphrase-env".into()))?;
            if name != "pbkdf2-hmac-sha512" {
                return Err(CliError::Io(format!("{KEYS_FILE}: unknown kdf {name:?}")));
            }
            let hexd = |s: &str| hex::decode(s).map_err(|e| CliError::Io(format!("{KEYS_FILE}: {e}")));
            let nonce: [u8; 12] = hexd(nonce)?
                .try_into()
                .map_err(|_| CliError::Io(format!("{KEYS_FILE}: bad nonce length")))?;
            let key = kdf(pass, &hexd(salt)?, *iterations);
            let pt = default_suite()
                .open(&key, &nonce, &hexd(ciphertext)?)
                .map_err(|_| CliError::Usage("wrong passphrase".into()))?;
            serde_json::from_slice(&pt).map_err(|e| CliError::Io(format!("{KEYS_FILE}: {e}")))
        }
    }
}

/// Which layer an address was created for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dpush,
    Dmail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InboxFile {
    pub mode: Mode,
    pub inbox: InboxSnapshot,
}

#[derive(Debug)]
pub struct Profile {
    dir: PathBuf,
    _lock: DirLock,
}

impl Profile {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let lock = DirLock::acquire(dir)?;
        Ok(Profile { dir: dir.to_path_buf(), _lock: lock })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn has_keys(&self) -> bool {
        self.dir.join(KEYS_FILE).exists()
    }

    pub fn load_keys(&self, passphrase: Option<&str>) -> Result<Keys, CliError> {
        let path = self.dir.join(KEYS_FILE);
        let file: KeysFile = read_json(&path)?
            .ok_or_else(|| CliError::Usage(format!("no keys in {}; run `dpush keygen`", self.dir.display())))?;
        let mut keys = Keys::from_plain(&open_secrets(&file.secrets, passphrase)?)?;
        if keys.address() != file.address || keys.channel.key_id() != file.channel_id {
            return Err(CliError::Io(format!("{}: secrets do not match recorded ids", path.display())));
        }
        keys.channel_version = file.channel_version;
        Ok(keys)
    }

    pub fn save_keys(&self, keys: &Keys, passphrase: Option<&str>) -> Result<(), CliError> {
        let plain = keys.plain();
        let secrets = match passphrase {
            Some(p) => seal_secrets(&plain, p),
            None => SecretsBox::Plain(plain),
        };
        let file = KeysFile {
            address: keys.address(),
            public: keys.signing.public.clone(),
            channel_id: keys.channel.key_id(),
            channel_version: keys.channel_version,
            secrets,
        };
        write_atomic(&self.dir.join(KEYS_FILE), &to_canonical_json(&file))
    }

    /// Inbox with follows merged back in from `follows.json`.
    pub fn load_inbox(&self) -> Result<Option<InboxFile>, CliError> {
        let Some(mut f): Option<InboxFile> = read_json(&self.dir.join(INBOX_FILE))? else {
            return Ok(None);
        };
        f.inbox.follows = self.load_follows()?;
        Ok(Some(f))
    }

    pub fn save_inbox(&self, inbox: &InboxFile) -> Result<(), CliError> {
        let mut stripped = inbox.clone();
        let follows = std::mem::take(&mut stripped.inbox.follows);
        write_atomic(&self.dir.join(INBOX_FILE), &to_canonical_json(&stripped))?;
        self.save_follows(&follows)
    }

    pub fn load_follows(&self) -> Result<Vec<Follow>, CliError> {
        Ok(read_json(&self.dir.join(FOLLOWS_FILE))?.unwrap_or_default())
    }

    pub fn save_follows(&self, follows: &[Follow]) -> Result<(), CliError> {
        write_atomic(&self.dir.join(FOLLOWS_FILE), &to_canonical_json(&follows))
    }
}
