//! Programmable edge-storage middleware on a deterministic network simulator.

pub mod appcode;
pub mod chain;
pub mod cluster;
pub mod consistency;
pub mod harness;
pub mod ids;
pub mod migrate;
pub mod monitor;
pub mod simnet;
pub mod store;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/appcode.md")]
    mod appcode {}
    #[doc = include_str!("../../../book/src/storage.md")]
    mod storage {}
    #[doc = include_str!("../../../book/src/chains.md")]
    mod chains {}
    #[doc = include_str!("../../../book/src/consistency.md")]
    mod consistency {}
    #[doc = include_str!("../../../book/src/triggers.md")]
    mod triggers {}
    #[doc = include_str!("../../../book/src/migration.md")]
    mod migration {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/checking.md")]
    mod checking {}
}
