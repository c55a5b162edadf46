//! Ready-made appcode for the non-consistency hooks, usable from scenarios as
//! `builtin=<name>`.

/// (name, source) pairs.
pub const PROGRAMS: &[(&str, &str)] = &[
    ("place_topk_free", include_str!("library/place_topk_free.gasm")),
    ("place_nearest", include_str!("library/place_nearest.gasm")),
    ("lb_swap_least_loaded", include_str!("library/lb_swap_least_loaded.gasm")),
    ("mig_nearest", include_str!("library/mig_nearest.gasm")),
    ("trigger_wear", include_str!("library/trigger_wear.gasm")),
    ("trigger_geo", include_str!("library/trigger_geo.gasm")),
    ("gc_video_backup", include_str!("library/gc_video_backup.gasm")),
    ("compute_sum", include_str!("library/compute_sum.gasm")),
    ("compute_len", include_str!("library/compute_len.gasm")),
];

pub fn source(name: &str) -> Option<&'static str> {
    PROGRAMS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
