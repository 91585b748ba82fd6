//! Request logging and the live activity monitor.

pub mod activity;
pub mod monitor;

pub use activity::{redact_path, ActivityLog, ActivityRecord, ClassCounts, StatusClass, DEFAULT_RING_CAPACITY};
pub use monitor::{render_monitor, MonitorSummary, WorkerView, FRAME_WIDTH};

/// Show at most the last four characters of a secret.
pub fn mask_token(secret: &str) -> String {
    let chars: Vec<char> = secret.chars().collect();
    if chars.len() <= 4 {
        return "****".to_string();
    }
    let tail: String = chars[chars.len() - 4..].iter().collect();
    format!("****{tail}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_to_suffix() {
        assert_eq!(mask_token("ghp_0123456789abcd"), "****abcd");
        assert_eq!(mask_token("abc"), "****");
        assert_eq!(mask_token("abcd"), "****");
    }
}
