use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::protocol::{self, collapse_ws};
use crate::schema::{Cid, ColumnMeta, ColumnRef, SchemaCatalog};
use crate::tree::ContextPack;

pub const REMINDER: &str =
    "REMINDER: your previous reply had no usable answer. End with one final line ANSWER: <cid>, \
     where <cid> is one of the candidate ids listed above.";

/// One candidate as shown in the decision prompt.
pub struct CandidateView<'a> {
    pub meta: &'a ColumnMeta,
    pub pack: Option<&'a ContextPack>,
}

fn column_line(catalog: &SchemaCatalog, meta: &ColumnMeta) -> String {
    let table = catalog
        .table(&meta.column.table_id)
        .map(|t| t.name.as_str())
        .unwrap_or_default();
    let mut line = String::new();
    if !catalog.is_masked() {
        line.push_str(&format!("name [{}]; ", meta.raw_name));
    }
    line.push_str(&format!("desc [{}]; table [{table}]", collapse_ws(&meta.description)));
    line
}

fn push_pack(out: &mut String, pack: Option<&ContextPack>, indent: &str) {
    if let Some(pack) = pack {
        out.push_str(&format!("{indent}context:\n"));
        for line in pack.rendered.lines() {
            out.push_str(&format!("{indent}  {line}\n"));
        }
    }
}

/// The forced-choice prompt. Sections, in order: query block, source diff,
/// candidate list, candidate differentiation, answer instruction. Empty
/// sections are left out.
pub fn assemble_final_prompt(
    source: &SchemaCatalog,
    target: &SchemaCatalog,
    query: &ColumnMeta,
    query_pack: Option<&ContextPack>,
    source_diff: &str,
    candidates: &[CandidateView<'_>],
    candidate_diff: &str,
) -> String {
    let cids: Vec<String> = candidates.iter().map(|c| c.meta.cid.to_string()).collect();
    let mut p = protocol::task_line(protocol::FORCED_CHOICE);
    p.push_str(&format!("\nCANDIDATES: {}\n", cids.join(", ")));
    p.push_str(
        "Pick the single target column that holds the same information as the query column.\n\n",
    );
    p.push_str(&format!("Query column: {}\n", column_line(source, query)));
    push_pack(&mut p, query_pack, "");
    if !source_diff.is_empty() {
        p.push('\n');
        p.push_str(source_diff);
    }
    p.push_str("\nCandidates:\n");
    for c in candidates {
        p.push_str(&format!("- cid {}: {}\n", c.meta.cid, column_line(target, c.meta)));
        push_pack(&mut p, c.pack, "  ");
    }
    if !candidate_diff.is_empty() {
        p.push('\n');
        p.push_str(candidate_diff);
    }
    p.push_str(
        "\nChoose exactly one candidate. End your reply with a final line of the form ANSWER: <cid>\n",
    );
    p
}

/// Ask the model to keep the `keep` pool columns most likely to match.
pub fn shortlist_prompt(
    source: &SchemaCatalog,
    target: &SchemaCatalog,
    query: &ColumnMeta,
    pool: &[ColumnRef],
    keep: usize,
) -> Result<String> {
    let mut p = protocol::task_line(protocol::SHORTLIST);
    let cids = pool
        .iter()
        .map(|c| target.require(c).map(|m| m.cid.to_string()))
        .collect::<Result<Vec<_>>>()?;
    p.push_str(&format!("\nCANDIDATES: {}\nKEEP: {keep}\n", cids.join(", ")));
    p.push_str("Select the target columns most likely to hold the same information as the query column.\n\n");
    p.push_str(&format!("Query column: {}\n\nCandidates:\n", column_line(source, query)));
    for c in pool {
        let meta = target.require(c)?;
        p.push_str(&format!("- cid {}: {}\n", meta.cid, column_line(target, meta)));
    }
    p.push_str(&format!(
        "\nEnd your reply with one line SHORTLIST: <cid>, <cid>, ... naming at most {keep} candidates, best first.\n"
    ));
    Ok(p)
}

/// Pool columns named on the last `SHORTLIST:` line, in reply order, without
/// repeats and capped at `keep`. Ids outside the pool are ignored.
pub fn parse_shortlist(reply: &str, pool: &[ColumnRef], target: &SchemaCatalog, keep: usize) -> Vec<ColumnRef> {
    let Some(line) = reply.lines().rev().find_map(|l| {
        let t = l.trim().trim_start_matches('*');
        t.get(..10)
            .filter(|h| h.eq_ignore_ascii_case("SHORTLIST:"))
            .map(|_| &t[10..])
    }) else {
        return Vec::new();
    };
    let mut out: Vec<ColumnRef> = Vec::new();
    for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
        let tok = tok.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_uppercase();
        let Ok(cid) = tok.parse::<Cid>() else { continue };
        if let Some(col) = target.by_cid(cid).map(|m| &m.column).filter(|c| pool.contains(c)) {
            if !out.contains(col) {
                out.push(col.clone());
            }
        }
        if out.len() == keep {
            break;
        }
    }
    out
}

fn answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)ANSWER:\s*\**\s*(C\d+)").expect("valid regex"))
}

/// The last `ANSWER: C<digits>` in the reply, which must name a candidate.
pub fn parse_choice(reply: &str, candidates: &[ColumnRef], target: &SchemaCatalog) -> Result<ColumnRef> {
    let cap = answer_regex()
        .captures_iter(reply)
        .last()
        .ok_or_else(|| Error::NoChoice(reply.chars().take(120).collect()))?;
    let raw = cap[1].to_ascii_uppercase();
    let cid: Cid = raw.parse().map_err(|_| Error::InvalidChoice(raw.clone()))?;
    target
        .by_cid(cid)
        .map(|m| m.column.clone())
        .filter(|c| candidates.contains(c))
        .ok_or(Error::InvalidChoice(raw))
}
