//! The in-process network the CLI talks to: one full node whose store is
//! persisted between invocations. Several profiles pointed at the same
//! directory share it, which is enough to exchange mail locally.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use dpush_core::block::Difficulty;
use dpush_core::ident::KeyId;
use dpush_core::routing::{Client, DhtParams, Endpoint, NoPeers, Node, NodeInfo};
use dpush_core::store::{Store, StorePolicy, DEFAULT_NETWORK_FLOOR};
use serde::{Deserialize, Serialize};

use crate::profile::{to_canonical_json, write_atomic, DirLock};
use crate::CliError;

const WORLD_FILE: &str = "world.json";
const STORE_FILE: &str = "store.dpst";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub node_id: KeyId,
    /// Network difficulty floor enforced by the node.
    pub floor: u32,
}

pub struct World {
    dir: PathBuf,
    pub config: WorldConfig,
    pub node: Node,
    net: NoPeers,
    _lock: DirLock,
}

impl World {
    /// Open or create the world in `dir`. `floor` applies on creation only.
    pub fn open(dir: &Path, floor: Option<u32>) -> Result<Self, CliError> {
        let lock = DirLock::acquire(dir)?;
        let cfg_path = dir.join(WORLD_FILE);
        let config = match std::fs::read(&cfg_path) {
            Ok(bytes) => serde_json::from_slice::<WorldConfig>(&bytes)
                .map_err(|e| CliError::Io(format!("{}: {e}", cfg_path.display())))?,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                let cfg = WorldConfig {
                    node_id: KeyId::random(&mut rand::thread_rng()),
                    floor: floor.unwrap_or(DEFAULT_NETWORK_FLOOR),
                };
                write_atomic(&cfg_path, &to_canonical_json(&cfg))?;
                cfg
            }
            Err(e) => return Err(CliError::Io(format!("{}: {e}", cfg_path.display()))),
        };
        let policy = StorePolicy {
            min_targeted_difficulty: Difficulty::new(config.floor)
                .map_err(|e| CliError::Io(format!("{}: {e}", cfg_path.display())))?,
            ..StorePolicy::default()
        };
        let info = NodeInfo { id: config.node_id, endpoint: Endpoint(0) };
        let mut node = Node::new(info, DhtParams::default(), policy.clone());
        let store_path = dir.join(STORE_FILE);
        match File::open(&store_path) {
            Ok(f) => {
                node.store = Store::read_snapshot(BufReader::new(f), policy)
                    .map_err(|e| CliError::Io(format!("{}: {e}", store_path.display())))?;
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {}
            Err(e) => return Err(CliError::Io(format!("{}: {e}", store_path.display()))),
        }
        Ok(World { dir: dir.to_path_buf(), config, node, net: NoPeers, _lock: lock })
    }

    pub fn dht(&mut self) -> Client<'_, NoPeers> {
        Client::new(&mut self.node, &mut self.net)
    }

    pub fn save(&self) -> Result<(), CliError> {
        let path = self.dir.join(STORE_FILE);
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        self.node.store.write_snapshot(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)
    }
}
