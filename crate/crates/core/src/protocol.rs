//! Prompt headers shared by prompt builders and the synthetic backend.
//!
//! Every prompt starts with a `TASK:` line. Prompts that need structured
//! replies also carry machine-readable header lines (`ITEMS:`, `FANOUT:`,
//! `CANDIDATES:` ...) so that deterministic backends can answer them without
//! parsing free text.

pub const TASK: &str = "TASK:";

pub const WINDOW_SUMMARY: &str = "window-summary";
pub const TABLE_THEME: &str = "table-theme";
pub const CONCEPTUAL_MAP: &str = "conceptual-map";
pub const BOUNDARY_REFINEMENT: &str = "boundary-refinement";
pub const NODE_SUMMARY: &str = "node-summary";
pub const SIBLING_RELATIONS: &str = "sibling-relations";
pub const DIFFERENTIATION: &str = "differentiation";
pub const FORCED_CHOICE: &str = "forced-choice";
pub const SHORTLIST: &str = "shortlist";

pub fn task_line(task: &str) -> String {
    format!("{TASK} {task}")
}

/// The task named on the prompt's `TASK:` line.
pub fn task_of(prompt: &str) -> Option<&str> {
    header(prompt, "TASK")
}

/// Value of the first `NAME: value` line in `text`.
pub fn header<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    text.lines().find_map(|line| {
        line.trim_start()
            .strip_prefix(name)
            .and_then(|rest| rest.strip_prefix(':'))
            .map(str::trim)
    })
}

/// Comma-separated header values.
pub fn header_list<'a>(text: &'a str, name: &str) -> Vec<&'a str> {
    header(text, name)
        .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default()
}

/// Text after the last `LABEL:` marker, or the whole trimmed reply when the
/// marker is absent. Whitespace runs collapse to single spaces.
pub fn strip_label(reply: &str, label: &str) -> String {
    let marker = format!("{label}:");
    let upper = reply.to_ascii_uppercase();
    let body = match upper.rfind(&marker.to_ascii_uppercase()) {
        Some(i) => &reply[i + marker.len()..],
        None => reply,
    };
    collapse_ws(body)
}

pub fn collapse_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
