use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{NodeId, RelationSnippet};
use crate::error::Result;
use crate::gateway::{ChatCall, Gateway, Role};
use crate::protocol;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationCaps {
    /// Relations that may start at any one sibling.
    pub per_column: usize,
    /// Requested lower bound; the model may return fewer.
    pub per_leaf_min: usize,
    /// Hard cap on relations kept per parent.
    pub per_leaf_max: usize,
}

impl Default for RelationCaps {
    fn default() -> Self {
        RelationCaps {
            per_column: 2,
            per_leaf_min: 6,
            per_leaf_max: 18,
        }
    }
}

/// A child node as presented to the relation prompt.
#[derive(Clone, Debug)]
pub struct Sibling {
    pub id: NodeId,
    pub label: String,
    pub summary: String,
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bG(\d+)\b").expect("valid regex"))
}

fn relation_prompt(parent_summary: &str, siblings: &[Sibling], caps: &RelationCaps) -> String {
    let tags: Vec<String> = (1..=siblings.len()).map(|i| format!("G{i}")).collect();
    let mut p = protocol::task_line(protocol::SIBLING_RELATIONS);
    p.push('\n');
    p.push_str(&format!("SIBLINGS: {}\n", tags.join(", ")));
    p.push_str(&format!("Parent scope: {parent_summary}\n\nSibling groups:\n"));
    for (tag, s) in tags.iter().zip(siblings) {
        p.push_str(&format!("{tag} ({}): {}\n", s.label, s.summary));
    }
    p.push_str(&format!(
        "\nDescribe how these sibling groups relate, for example \"G1 defines terms used by G2\" \
         or \"G2 is derived from G1 after adjustments\". Write between {} and {} relations, one per \
         line. Each line names exactly two groups, source first, and is one or two sentences. \
         Start at most {} relations from any one group.\n",
        caps.per_leaf_min.min(caps.per_leaf_max),
        caps.per_leaf_max,
        caps.per_column
    ));
    p
}

/// Parse relation lines. The first tag on a line is the source, the second
/// the target; tags are replaced by sibling labels in the stored text. Lines
/// naming unknown siblings are dropped. Caps apply in reply order.
pub fn parse_relations(reply: &str, siblings: &[Sibling], caps: &RelationCaps) -> Vec<RelationSnippet> {
    let mut kept = Vec::new();
    let mut outgoing: HashMap<NodeId, usize> = HashMap::new();
    for line in reply.lines() {
        if kept.len() >= caps.per_leaf_max {
            break;
        }
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let tags: Vec<usize> = tag_regex()
            .captures_iter(line)
            .filter_map(|c| c[1].parse::<usize>().ok())
            .collect();
        if tags.len() < 2 {
            continue;
        }
        if let Some(bad) = tags.iter().find(|&&t| t == 0 || t > siblings.len()) {
            log::warn!("dropping relation naming unknown sibling G{bad}: {line}");
            continue;
        }
        let (from, to) = (&siblings[tags[0] - 1], &siblings[tags[1] - 1]);
        if from.id == to.id {
            continue;
        }
        let count = outgoing.entry(from.id).or_default();
        if *count >= caps.per_column {
            continue;
        }
        *count += 1;
        let text = tag_regex()
            .replace_all(line, |c: &regex::Captures<'_>| {
                let i: usize = c[1].parse().expect("validated tag");
                format!("[{}]", siblings[i - 1].label)
            })
            .into_owned();
        kept.push(RelationSnippet {
            from_node: from.id,
            to_node: to.id,
            relation_text: text,
            directed: true,
        });
    }
    kept
}

/// Ask the model for directed relations among the children of one parent.
pub fn annotate_sibling_relations(
    gateway: &Gateway,
    parent_summary: &str,
    siblings: &[Sibling],
    caps: &RelationCaps,
    timeout: Duration,
) -> Result<Vec<RelationSnippet>> {
    if siblings.len() < 2 {
        return Ok(Vec::new());
    }
    let prompt = relation_prompt(parent_summary, siblings, caps);
    let reply = gateway.complete(&ChatCall::new(Role::Relation, prompt).with_timeout(timeout))?;
    Ok(parse_relations(&reply.text, siblings, caps))
}
