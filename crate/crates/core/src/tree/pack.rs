use serde::{Deserialize, Serialize};

use super::{ContextTree, TreeNode};
use crate::error::{Error, Result};
use crate::protocol::collapse_ws;
use crate::schema::{ColumnRef, SchemaCatalog};

pub const DEFAULT_MAX_RELATIONS: usize = 3;

/// Column-to-root evidence for one column, rendered within a character budget.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPack {
    pub column: ColumnRef,
    /// `(depth, summary)` from the leaf up to the root; depth 0 is the root.
    pub lineage_summaries: Vec<(usize, String)>,
    pub relation_lines: Vec<String>,
    pub rendered: String,
    pub budget: usize,
}

/// Drop order for the intermediate levels of a lineage of `len` levels
/// (index 0 is the leaf, `len - 1` the root). Levels nearest the middle go
/// first; on equal distance the one nearer the root goes first.
pub fn middle_out_order(len: usize) -> Vec<usize> {
    if len < 3 {
        return Vec::new();
    }
    let mid2 = len - 1; // twice the midpoint, to stay in integers
    let mut idx: Vec<usize> = (1..len - 1).collect();
    idx.sort_by_key(|&i| (i * 2).abs_diff(mid2) * len + (len - i));
    idx
}

struct Parts {
    header: String,
    levels: Vec<(usize, String)>,
    relations: Vec<String>,
}

impl Parts {
    fn render(&self, keep_level: &[bool], relations: usize) -> String {
        let mut out = self.header.clone();
        out.push_str("Path to root (summaries):\n");
        for ((depth, summary), keep) in self.levels.iter().zip(keep_level) {
            if *keep {
                out.push_str(&format!("  - [{depth}] {summary}\n"));
            }
        }
        if relations > 0 {
            out.push_str("Relation snippets (selected):\n");
            for line in &self.relations[..relations] {
                out.push_str(&format!("  - {line}\n"));
            }
        }
        out
    }
}

fn select_relations(tree: &ContextTree, lineage: &[&TreeNode], max_relations: usize) -> Vec<String> {
    let position = |id| lineage.iter().position(|n| n.id == id);
    let mut ranked: Vec<(usize, usize, &str)> = tree
        .relations()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let near = match (position(r.from_node), position(r.to_node)) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => return None,
            };
            Some((near, i, r.relation_text.as_str()))
        })
        .collect();
    ranked.sort();
    ranked
        .into_iter()
        .take(max_relations)
        .map(|(_, _, text)| collapse_ws(text))
        .collect()
}

/// Assemble the pack for `column`: header, lineage summaries leaf to root,
/// then relation snippets touching the lineage. Over budget, relations are
/// dropped last-first, then intermediate levels middle-out; the leaf and root
/// summaries are always kept.
pub fn build_context_pack(
    tree: &ContextTree,
    catalog: &SchemaCatalog,
    column: &ColumnRef,
    budget: usize,
    max_relations: usize,
) -> Result<ContextPack> {
    let meta = catalog.require(column)?;
    let lineage = tree.lineage(column)?;
    let table = catalog
        .table(&column.table_id)
        .ok_or_else(|| Error::UnknownColumn(column.to_string()))?;

    let mut header = format!("Column: {} (table: {})\n", catalog.display_name(meta), table.name);
    let desc = collapse_ws(&meta.description);
    if !desc.is_empty() {
        header.push_str(&format!("Description: {desc}\n"));
    }
    let parts = Parts {
        header,
        levels: lineage
            .iter()
            .map(|n| (tree.depth(n.id), collapse_ws(&n.summary)))
            .collect(),
        relations: select_relations(tree, &lineage, max_relations),
    };

    let len = parts.levels.len();
    let mut keep = vec![true; len];
    let minimal = {
        let mut k = vec![false; len];
        k[0] = true;
        k[len - 1] = true;
        parts.render(&k, 0)
    };
    let required = minimal.chars().count();
    if budget < required {
        return Err(Error::BudgetTooSmall { required, budget });
    }

    let mut relations = parts.relations.len();
    let mut rendered = parts.render(&keep, relations);
    while rendered.chars().count() > budget && relations > 0 {
        relations -= 1;
        rendered = parts.render(&keep, relations);
    }
    for drop in middle_out_order(len) {
        if rendered.chars().count() <= budget {
            break;
        }
        keep[drop] = false;
        rendered = parts.render(&keep, relations);
    }
    debug_assert!(rendered.chars().count() <= budget);

    Ok(ContextPack {
        column: column.clone(),
        lineage_summaries: parts
            .levels
            .into_iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(l, _)| l)
            .collect(),
        relation_lines: parts.relations[..relations].to_vec(),
        rendered,
        budget,
    })
}
