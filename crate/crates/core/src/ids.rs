//! Identifier newtypes and simulated-time helpers shared by every module.

use std::fmt;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<u64> for $name {
            fn from(v: u64) -> Self {
                $name(v)
            }
        }
    };
}

id_type!(
    /// A storage node in the edge cluster.
    NodeId
);
id_type!(
    /// An application; every app owns exactly one replica chain.
    AppId
);
id_type!(ClientId);
id_type!(SessionId);
id_type!(
    /// A client operation, unique per run.
    OpId
);
id_type!(TriggerId);

/// Simulated time in nanoseconds.
pub type SimTime = u64;

pub const NS_PER_US: u64 = 1_000;
pub const NS_PER_MS: u64 = 1_000_000;
pub const NS_PER_S: u64 = 1_000_000_000;

/// 64-bit FNV-1a, used for key hashes exposed to appcode.
pub fn key_hash(key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// First eight key bytes, little-endian, zero padded.
pub fn key_prefix8(key: &str) -> u64 {
    let mut buf = [0u8; 8];
    let bytes = key.as_bytes();
    let n = bytes.len().min(8);
    buf[..n].copy_from_slice(&bytes[..n]);
    u64::from_le_bytes(buf)
}
