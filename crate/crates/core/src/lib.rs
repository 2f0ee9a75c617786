//! Proof-of-work targeted blocks in a Kademlia-style DHT, with the Dpush
//! unsolicited-messaging layer and the Dmail encrypted mail layer on top.
//!
//! Layering, bottom up:
//!
//! - [`ident`]: 512-bit key space and the crypto suite
//! - [`block`]: targeted block header, mining, verification
//! - [`store`]: node-local static / updateable / targeted storage
//! - [`routing`]: XOR routing table and iterative DHT procedures
//! - [`simnet`]: deterministic discrete-event network simulator
//! - [`dpush`]: receiver sites, unsolicited send, inbox scanning, follow channels
//! - [`dmail`]: encrypted and authenticated mail over Dpush

pub mod block;
pub mod dmail;
pub mod dpush;
pub mod ident;
pub mod routing;
pub mod simnet;
pub mod store;
