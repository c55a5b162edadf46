//! Helper ABI: arguments in `r1`..`r5`, result in `r0`.

use super::isa::HookKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Helper {
    CtxU64 = 1,
    CtxNodeCount = 2,
    CtxNodeU64 = 3,
    EmitNode = 4,
    StateRead = 5,
    StateWrite = 6,
    ObjRead = 7,
    OutWrite = 8,
    NowNs = 9,
    Log = 10,
    MapLookup = 11,
    MapUpdate = 12,
    MapDelete = 13,
}

impl Helper {
    pub const ALL: [Helper; 13] = [
        Helper::CtxU64,
        Helper::CtxNodeCount,
        Helper::CtxNodeU64,
        Helper::EmitNode,
        Helper::StateRead,
        Helper::StateWrite,
        Helper::ObjRead,
        Helper::OutWrite,
        Helper::NowNs,
        Helper::Log,
        Helper::MapLookup,
        Helper::MapUpdate,
        Helper::MapDelete,
    ];

    pub fn from_id(id: i32) -> Option<Helper> {
        Helper::ALL.into_iter().find(|h| *h as i32 == id)
    }

    pub fn id(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            Helper::CtxU64 => "ctx_u64",
            Helper::CtxNodeCount => "ctx_node_count",
            Helper::CtxNodeU64 => "ctx_node_u64",
            Helper::EmitNode => "emit_node",
            Helper::StateRead => "state_read",
            Helper::StateWrite => "state_write",
            Helper::ObjRead => "obj_read",
            Helper::OutWrite => "out_write",
            Helper::NowNs => "now_ns",
            Helper::Log => "log",
            Helper::MapLookup => "map_lookup",
            Helper::MapUpdate => "map_update",
            Helper::MapDelete => "map_delete",
        }
    }

    pub fn from_name(name: &str) -> Option<Helper> {
        let lower = name.to_ascii_lowercase();
        Helper::ALL.into_iter().find(|h| h.name() == lower)
    }

    /// Whether a program attached at `hook` may call this helper.
    pub fn allowed_for(self, hook: HookKind) -> bool {
        use HookKind::*;
        match self {
            Helper::CtxU64 | Helper::NowNs | Helper::Log => true,
            Helper::MapLookup | Helper::MapUpdate | Helper::MapDelete => true,
            Helper::CtxNodeCount | Helper::CtxNodeU64 => {
                matches!(hook, ReplicaPlace | LoadBalance | Migration | Trigger)
            }
            Helper::EmitNode => matches!(hook, ReplicaPlace | LoadBalance | Migration),
            Helper::StateRead | Helper::StateWrite => {
                matches!(hook, ConsistencyWrite | ConsistencyRead)
            }
            Helper::ObjRead => matches!(hook, Compute | GcScan),
            Helper::OutWrite => hook == Compute,
        }
    }

    /// Whether the call invalidates outstanding map-value pointers.
    pub fn mutates_map(self) -> bool {
        matches!(self, Helper::MapUpdate | Helper::MapDelete)
    }
}

/// Context field ids readable with `ctx_u64`, grouped by hook kind.
/// Absent fields read as zero.
pub mod field {
    // consistency_write / consistency_read
    pub const OP_KIND: u32 = 0;
    pub const TS_NS: u32 = 1;
    pub const WRITER_NODE: u32 = 2;
    pub const SESSION: u32 = 3;
    pub const APPLIED_VERSION: u32 = 4;
    pub const STATE_LEN: u32 = 5;
    pub const STATE_PRESENT: u32 = 6;
    pub const VALUE_LEN: u32 = 7;
    pub const NODE_ID: u32 = 8;
    pub const KEY_HASH: u32 = 9;

    // replica_place
    pub const PLACE_ORIGIN_NODE: u32 = 0;
    pub const PLACE_REPLICA_COUNT: u32 = 1;
    pub const PLACE_ORIGIN_X: u32 = 2;
    pub const PLACE_ORIGIN_Y: u32 = 3;
    pub const PLACE_APP_ID: u32 = 4;

    // load_balance / migration
    pub const CHG_TRIGGER_ID: u32 = 0;
    pub const CHG_CAUSE_NODE: u32 = 1;
    pub const CHG_CAUSE_METRIC: u32 = 2;
    pub const CHG_CAUSE_VALUE: u32 = 3;
    pub const CHG_CHAIN_LEN: u32 = 4;
    pub const CHG_ORIGIN_X: u32 = 5;
    pub const CHG_ORIGIN_Y: u32 = 6;
    pub const CHG_REPLICA_COUNT: u32 = 7;
    pub const CHG_EOL_NODE: u32 = 8;
    /// `CHG_CHAIN_BASE + i` is the i-th chain member (head first).
    pub const CHG_CHAIN_BASE: u32 = 16;

    // trigger
    pub const TRG_ATTACH: u32 = 0;
    pub const TRG_NODE_ID: u32 = 1;
    pub const TRG_CPU_MILLI: u32 = 2;
    pub const TRG_USED_BYTES: u32 = 3;
    pub const TRG_CAPACITY_BYTES: u32 = 4;
    pub const TRG_WEAR_MILLI: u32 = 5;
    pub const TRG_MSGS_IN: u32 = 6;
    pub const TRG_MSGS_OUT: u32 = 7;
    pub const TRG_NOW: u32 = 8;
    pub const TRG_ORIGIN_X: u32 = 9;
    pub const TRG_ORIGIN_Y: u32 = 10;
    pub const TRG_KEY_HASH: u32 = 11;
    pub const TRG_VALUE_LEN: u32 = 12;
    pub const TRG_VERSION: u32 = 13;
    pub const TRG_FREE_BYTES: u32 = 14;
    pub const TRG_HEALTHY: u32 = 15;
    pub const TRG_HEAD_X: u32 = 16;
    pub const TRG_HEAD_Y: u32 = 17;

    // gc_scan
    pub const GC_NOW: u32 = 0;
    pub const GC_CREATED_AT: u32 = 1;
    pub const GC_LAST_READ_AT: u32 = 2;
    pub const GC_LAST_WRITTEN_AT: u32 = 3;
    pub const GC_VERSION: u32 = 4;
    pub const GC_VALUE_LEN: u32 = 5;
    pub const GC_LIFETIME_KIND: u32 = 6;
    pub const GC_EXPIRED: u32 = 7;
    pub const GC_KEY_LEN: u32 = 8;
    pub const GC_KEY_PREFIX8: u32 = 9;
    pub const GC_KEY_HASH: u32 = 10;
    pub const GC_DISPOSAL: u32 = 11;

    // compute
    pub const CMP_VALUE_LEN: u32 = 0;
    pub const CMP_VERSION: u32 = 1;
    pub const CMP_KEY_HASH: u32 = 2;
    pub const CMP_STAGE: u32 = 3;
}

/// Per-node scalar field ids for `ctx_node_u64`.
pub mod node_field {
    pub const NODE_ID: u64 = 0;
    pub const LOAD_MILLI: u64 = 1;
    pub const FREE_BYTES: u64 = 2;
    pub const X_MICRO: u64 = 3;
    pub const Y_MICRO: u64 = 4;
    pub const WEAR_MILLI: u64 = 5;
    pub const RTT_US_TO_ORIGIN: u64 = 6;
    pub const HEALTHY: u64 = 7;
    pub const COUNT: u64 = 8;
}
