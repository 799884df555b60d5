//! Virtual time helpers shared by the simulator, the event log and the transcripts.

/// Virtual time in milliseconds since scenario start.
pub type Millis = u64;

/// Formats a virtual time as the `[HH:MM:SS]` prefix used in event log lines.
/// Sub-second parts are truncated.
pub fn format_timestamp(at: Millis) -> String {
    let secs = at / 1000;
    format!(
        "[{:02}:{:02}:{:02}]",
        secs / 3600,
        (secs / 60) % 60,
        secs % 60
    )
}

/// Parses a `[HH:MM:SS]` prefix back into whole seconds.
pub fn parse_timestamp(text: &str) -> Option<u64> {
    let inner = text.strip_prefix('[')?.strip_suffix(']')?;
    let mut parts = inner.split(':');
    let h: u64 = parts.next()?.parse().ok()?;
    let m: u64 = parts.next()?.parse().ok()?;
    let s: u64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || m >= 60 || s >= 60 {
        return None;
    }
    Some(h * 3600 + m * 60 + s)
}
