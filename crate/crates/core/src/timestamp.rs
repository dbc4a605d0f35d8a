//! Reproducible timestamps for emitted files.
//!
//! Outputs must be byte-identical across reruns, so `created` fields never
//! read the wall clock. They follow the `SOURCE_DATE_EPOCH` convention and
//! fall back to the Unix epoch when it is unset.

use chrono::{DateTime, SecondsFormat, Utc};

pub fn reproducible_now() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or(0);
    format_epoch(secs)
}

pub fn format_epoch(secs: i64) -> String {
    DateTime::<Utc>::from_timestamp(secs, 0)
        .unwrap_or(DateTime::<Utc>::UNIX_EPOCH)
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn is_iso8601(s: &str) -> bool {
    DateTime::parse_from_rfc3339(s).is_ok()
}
