//! Differentiation blocks: a short group summary plus one contrastive cue
//! per member, generated for confusable groups of two or more columns.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gateway::{ChatCall, Gateway, Role};
use crate::graph::SimilarityGroup;
use crate::protocol::{self, collapse_ws};
use crate::schema::{Cid, ColumnRef, SchemaCatalog, Side};
use crate::tree::ContextPack;

pub const DEFAULT_MAX_GROUPS: usize = 6;
pub const DEFAULT_MAX_MEMBERS: usize = 24;
pub const MISSING_CUE: &str = "no distinguishing information provided";
const FALLBACK_SUMMARY: &str = "These columns are closely related.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cue {
    pub column: ColumnRef,
    pub cid: Cid,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferentiationBlock {
    pub group: SimilarityGroup,
    pub summary: String,
    /// One cue per group member, in member order. Empty when the reply could
    /// not be parsed.
    pub cues: Vec<Cue>,
    pub side: Side,
}

/// Drop singletons, order by priority and cap the count and size of groups.
///
/// Priority: highest member cosine to the query first, then larger groups,
/// then the group with the smaller first member. Oversize groups keep the
/// `max_members` members most similar to the query.
pub fn select_groups(
    groups: &[SimilarityGroup],
    cosine_to_query: &dyn Fn(&ColumnRef) -> f64,
    max_groups: usize,
    max_members: usize,
) -> Vec<SimilarityGroup> {
    let mut keyed: Vec<(f64, &SimilarityGroup)> = groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| {
            let best = g
                .members
                .iter()
                .map(cosine_to_query)
                .fold(f64::NEG_INFINITY, f64::max);
            (best, g)
        })
        .collect();
    keyed.sort_by(|(ca, a), (cb, b)| {
        cb.total_cmp(ca)
            .then_with(|| b.len().cmp(&a.len()))
            .then_with(|| a.members[0].cmp(&b.members[0]))
    });
    keyed
        .into_iter()
        .take(max_groups)
        .map(|(_, g)| {
            let mut g = g.clone();
            if g.len() > max_members {
                let mut scored: Vec<(f64, ColumnRef)> =
                    g.members.iter().map(|m| (cosine_to_query(m), m.clone())).collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                g.members = scored.into_iter().take(max_members).map(|(_, m)| m).collect();
                g.members.sort();
            }
            g
        })
        .collect()
}

fn cue_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^\s*[-*]?\s*(?:source\s+)?cid\s+C?(\d+)\s*[:\-]\s*(.+?)\s*$").expect("valid regex")
    })
}

fn summary_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*summary\s*:\s*(.+?)\s*$").expect("valid regex"))
}

fn member_prefix(side: Side) -> &'static str {
    match side {
        Side::Source => "source cid",
        Side::Target => "cid",
    }
}

fn block_prompt(
    catalog: &SchemaCatalog,
    group: &SimilarityGroup,
    packs: &HashMap<ColumnRef, ContextPack>,
) -> Result<String> {
    let metas = group
        .members
        .iter()
        .map(|m| catalog.require(m))
        .collect::<Result<Vec<_>>>()?;
    let cids: Vec<String> = metas.iter().map(|m| m.cid.to_string()).collect();
    let mut p = protocol::task_line(protocol::DIFFERENTIATION);
    p.push_str(&format!("\nSIDE: {}\nMEMBERS: {}\n", group.side, cids.join(", ")));
    p.push_str("These columns are near-duplicates and easy to confuse.\nMembers:\n");
    for meta in &metas {
        let table = catalog.table(&meta.column.table_id).map(|t| t.name.as_str()).unwrap_or("");
        p.push_str(&format!("- cid {}:", meta.cid));
        if !catalog.is_masked() {
            p.push_str(&format!(" name [{}];", meta.raw_name));
        }
        p.push_str(&format!(" desc [{}]; table [{table}]\n", collapse_ws(&meta.description)));
        if let Some(pack) = packs.get(&meta.column) {
            for line in pack.rendered.lines() {
                p.push_str(&format!("    {line}\n"));
            }
        }
    }
    p.push_str(
        "\nWrite one line \"Summary: <one or two sentences on what they share and the main axes of \
         difference>\", then one line per member \"- cid <cid>: <short cue that tells it apart>\".\n",
    );
    Ok(p)
}

fn parse_block(
    reply: &str,
    catalog: &SchemaCatalog,
    group: &SimilarityGroup,
) -> Option<(String, Vec<Cue>)> {
    let summary = summary_regex()
        .captures_iter(reply)
        .last()
        .map(|c| collapse_ws(&c[1]));
    let mut found: HashMap<u32, String> = HashMap::new();
    for cap in cue_regex().captures_iter(reply) {
        if let Ok(n) = cap[1].parse::<u32>() {
            found.entry(n).or_insert_with(|| collapse_ws(&cap[2]));
        }
    }
    let metas: Vec<_> = group.members.iter().filter_map(|m| catalog.column(m)).collect();
    let matched = metas.iter().filter(|m| found.contains_key(&m.cid.get())).count();
    if summary.is_none() && matched == 0 {
        return None;
    }
    let cues = metas
        .iter()
        .map(|m| Cue {
            column: m.column.clone(),
            cid: m.cid,
            text: found
                .get(&m.cid.get())
                .cloned()
                .unwrap_or_else(|| MISSING_CUE.to_string()),
        })
        .collect();
    Some((summary.unwrap_or_else(|| FALLBACK_SUMMARY.to_string()), cues))
}

/// One model call for a group of at least two columns. An unusable reply is
/// re-prompted once; a second failure yields a summary-only block.
pub fn generate_block(
    gateway: &Gateway,
    catalog: &SchemaCatalog,
    group: &SimilarityGroup,
    packs: &HashMap<ColumnRef, ContextPack>,
    timeout: std::time::Duration,
) -> Result<(DifferentiationBlock, Vec<crate::gateway::ChatReply>)> {
    let prompt = block_prompt(catalog, group, packs)?;
    let mut replies = Vec::new();
    let mut current = prompt.clone();
    for attempt in 0..2 {
        let reply = gateway.complete(&ChatCall::new(Role::Differentiation, current.clone()).with_timeout(timeout))?;
        let parsed = parse_block(&reply.text, catalog, group);
        replies.push(reply);
        if let Some((summary, cues)) = parsed {
            let block = DifferentiationBlock {
                group: group.clone(),
                summary,
                cues,
                side: group.side,
            };
            return Ok((block, replies));
        }
        log::warn!("unusable differentiation reply (attempt {})", attempt + 1);
        current = format!(
            "{prompt}\nREMINDER: start with a line \"Summary: ...\" and give one \"- cid <cid>: ...\" line per member.\n"
        );
    }
    let last = replies.last().map(|r| collapse_ws(&r.text)).unwrap_or_default();
    let summary = if last.is_empty() {
        FALLBACK_SUMMARY.to_string()
    } else {
        last.chars().take(300).collect()
    };
    Ok((
        DifferentiationBlock {
            group: group.clone(),
            summary,
            cues: Vec::new(),
            side: group.side,
        },
        replies,
    ))
}

fn render_block(out: &mut String, block: &DifferentiationBlock) {
    out.push_str(&format!("Summary: {}\n", block.summary));
    for cue in &block.cues {
        out.push_str(&format!("- {} {}: {}\n", member_prefix(block.side), cue.cid, cue.text));
    }
}

/// Source-side blocks first, then candidate groups numbered in the given
/// order. No blocks, no text.
pub fn render_blocks(blocks: &[DifferentiationBlock]) -> String {
    let mut out = String::new();
    let (source, target): (Vec<_>, Vec<_>) = blocks.iter().partition(|b| b.side == Side::Source);
    if !source.is_empty() {
        out.push_str("Source diff (confusable source group):\n");
        for block in source {
            render_block(&mut out, block);
        }
    }
    if !target.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("Differentiation among candidates:\n");
        for (i, block) in target.into_iter().enumerate() {
            let cids: Vec<String> = if block.cues.is_empty() {
                block.group.members.iter().map(ToString::to_string).collect()
            } else {
                block.cues.iter().map(|c| c.cid.to_string()).collect()
            };
            out.push_str(&format!("Group #{} (cid {}):\n", i + 1, cids.join(" vs ")));
            render_block(&mut out, block);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{HashEmbedder, Script, ScriptRule, ScriptedBackend};
    use crate::schema::{CatalogFile, ColumnFile, TableFile};

    fn catalog() -> SchemaCatalog {
        SchemaCatalog::from_file(
            CatalogFile {
                side: None,
                tables: vec![TableFile {
                    table_id: "events".into(),
                    name: "events".into(),
                    columns: vec![
                        ColumnFile::new("charttime", "time charted"),
                        ColumnFile::new("storetime", "time stored"),
                        ColumnFile::new("entertime", "time entered"),
                    ],
                    ..Default::default()
                }],
            },
            Side::Target,
        )
        .unwrap()
    }

    fn group(cat: &SchemaCatalog, n: usize) -> SimilarityGroup {
        SimilarityGroup {
            side: Side::Target,
            members: cat.columns()[..n].iter().map(|m| m.column.clone()).collect(),
        }
    }

    fn gateway(reply: &str) -> Gateway {
        Gateway::new(
            Arc::new(ScriptedBackend::new(Script::new(vec![ScriptRule::contains("differentiation", reply)]))),
            Arc::new(HashEmbedder::default()),
        )
    }

    #[test]
    fn parses_summary_and_cues() {
        let cat = catalog();
        let gw = gateway(
            "Summary: all are timestamps; they differ in which event they record.\n\
             - cid C1: when the value was observed\n- cid 2: when it was stored\n- cid C3: when it was typed in",
        );
        let (block, replies) =
            generate_block(&gw, &cat, &group(&cat, 3), &HashMap::new(), Role::Differentiation.default_timeout()).unwrap();
        assert_eq!(replies.len(), 1);
        assert_eq!(block.cues.len(), 3);
        assert_eq!(block.cues[1].text, "when it was stored");
        assert!(block.summary.starts_with("all are timestamps"));
    }

    #[test]
    fn missing_cue_gets_placeholder() {
        let cat = catalog();
        let gw = gateway("Summary: both times.\n- cid C1: observed");
        let (block, _) =
            generate_block(&gw, &cat, &group(&cat, 2), &HashMap::new(), Role::Differentiation.default_timeout()).unwrap();
        assert_eq!(block.cues[1].text, MISSING_CUE);
    }

    #[test]
    fn unparseable_twice_gives_summary_only_block() {
        let cat = catalog();
        let gw = gateway("I cannot tell them apart.");
        let (block, replies) =
            generate_block(&gw, &cat, &group(&cat, 2), &HashMap::new(), Role::Differentiation.default_timeout()).unwrap();
        assert_eq!(replies.len(), 2);
        assert!(block.cues.is_empty());
        assert!(!block.summary.is_empty());
        assert!(render_blocks(&[block]).contains("Differentiation among candidates:"));
    }

    #[test]
    fn second_request_hits_the_cache() {
        let cat = catalog();
        let gw = gateway("Summary: x\n- cid C1: a\n- cid C2: b");
        let g = group(&cat, 2);
        generate_block(&gw, &cat, &g, &HashMap::new(), Role::Differentiation.default_timeout()).unwrap();
        let before = gw.usage();
        let (_, replies) = generate_block(&gw, &cat, &g, &HashMap::new(), Role::Differentiation.default_timeout()).unwrap();
        assert!(replies[0].cache_hit);
        assert_eq!(gw.usage().total_tokens(), before.total_tokens());
    }

    #[test]
    fn render_empty_is_empty() {
        assert_eq!(render_blocks(&[]), "");
    }

    #[test]
    fn selection_caps_and_truncates() {
        let col = |t: &str, o| ColumnRef::new(Side::Target, t, o);
        let big = SimilarityGroup {
            side: Side::Target,
            members: (0..30).map(|o| col("a", o)).collect(),
        };
        let single = SimilarityGroup {
            side: Side::Target,
            members: vec![col("b", 0)],
        };
        let cos = |c: &ColumnRef| c.ordinal as f64 / 100.0;
        let out = select_groups(&[single, big], &cos, 6, 24);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 24);
        assert_eq!(out[0].members[0].ordinal, 6);
    }
}
