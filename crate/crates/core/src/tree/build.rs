//! Per-table tree construction.
//!
//! Small tables (at most `leaf_budget` columns) become a table root over a
//! single group leaf. Wide tables go through four stages on each oversize
//! span: windowed summaries, a sampled global theme, a grouping plan and, for
//! ordered tables, one boundary-refinement pass. Groups still larger than the
//! leaf budget are split again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{cap_groups, repair_unordered};
use super::relations::{annotate_sibling_relations, Sibling};
use super::{
    cluster_tables, fallback_plan, parse_plan, repair_ordered, ContextTree, GroupingPlan, NodeId,
    NodeKind, RelationSnippet, Span, TreeNode, TreeParams,
};
use crate::error::{Error, Result};
use crate::gateway::cache::hex;
use crate::gateway::{ChatCall, Gateway, Role};
use crate::graph::embedding_text;
use crate::protocol::{self, collapse_ws, strip_label};
use crate::schema::{ColumnRef, SchemaCatalog, TableId, TableMeta};

const DESCRIPTION_CHARS: usize = 300;

/// A run of items (columns of one table) being organized.
#[derive(Clone, Debug)]
pub struct ItemSpan<'a> {
    pub catalog: &'a SchemaCatalog,
    pub table: &'a TableMeta,
    pub items: Vec<ColumnRef>,
    /// Plan label of the enclosing group, for recursive splits.
    pub region: Option<String>,
}

impl<'a> ItemSpan<'a> {
    pub fn whole_table(catalog: &'a SchemaCatalog, table: &'a TableMeta) -> Self {
        ItemSpan {
            catalog,
            table,
            items: table.columns.clone(),
            region: None,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn ordered(&self) -> bool {
        self.table.ordered
    }

    fn sub(&self, positions: &[usize], label: &str) -> ItemSpan<'a> {
        ItemSpan {
            catalog: self.catalog,
            table: self.table,
            items: positions.iter().map(|&p| self.items[p].clone()).collect(),
            region: Some(label.to_string()),
        }
    }

    fn item_line(&self, pos: usize) -> String {
        let meta = self
            .catalog
            .column(&self.items[pos])
            .expect("span items come from the catalog");
        let mut desc = collapse_ws(&meta.description);
        if desc.chars().count() > DESCRIPTION_CHARS {
            desc = desc.chars().take(DESCRIPTION_CHARS).collect::<String>() + "...";
        }
        let name = self.catalog.display_name(meta);
        if desc.is_empty() {
            format!("- [{pos}] {name}")
        } else {
            format!("- [{pos}] {name}: {desc}")
        }
    }

    fn table_line(&self) -> String {
        let mut line = format!("Table: {}", self.table.name);
        if !self.table.description.is_empty() {
            line.push_str(&format!(" ({})", collapse_ws(&self.table.description)));
        }
        if let Some(region) = &self.region {
            line.push_str(&format!("\nRegion: {region}"));
        }
        line
    }

    /// Ordinal span for ordered tables, `None` otherwise.
    fn span(&self) -> Option<Span> {
        if !self.ordered() || self.items.is_empty() {
            return None;
        }
        Some(Span {
            table_id: self.table.table_id.clone(),
            start: self.items[0].ordinal,
            end: self.items[self.items.len() - 1].ordinal + 1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSummary {
    /// Half-open item range.
    pub start: usize,
    pub end: usize,
    pub summary: String,
}

/// Contiguous windows of `window` items; a trailing window shorter than
/// `min_group` is folded into the previous one.
pub fn window_partition(n: usize, window: usize, min_group: usize) -> Vec<(usize, usize)> {
    let window = window.max(1);
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(window)
        .map(|s| (s, (s + window).min(n)))
        .collect();
    if out.len() > 1 {
        let (s, e) = out[out.len() - 1];
        if e - s < min_group {
            out.pop();
            out.last_mut().expect("at least one window").1 = e;
        }
    }
    out
}

/// Stage 1: one summary per window of the span.
pub fn stage1_window_summaries(
    gateway: &Gateway,
    span: &ItemSpan<'_>,
    window: usize,
    min_group: usize,
) -> Result<Vec<WindowSummary>> {
    window_partition(span.len(), window, min_group)
        .into_iter()
        .enumerate()
        .map(|(idx, (start, end))| {
            let mut prompt = protocol::task_line(protocol::WINDOW_SUMMARY);
            prompt.push_str(&format!("\nWINDOW: {start}..{}\n{}\nItems:\n", end - 1, span.table_line()));
            for pos in start..end {
                prompt.push_str(&span.item_line(pos));
                prompt.push('\n');
            }
            prompt.push_str(
                "\nWrite a short summary (one or two sentences) of what these items cover.\n\
                 Reply as: SUMMARY: <text>\n",
            );
            let reply = gateway
                .complete(&ChatCall::new(Role::TreeSummary, prompt))
                .map_err(|e| e.at_stage("window", idx))?;
            Ok(WindowSummary {
                start,
                end,
                summary: strip_label(&reply.text, "SUMMARY"),
            })
        })
        .collect()
}

/// Evenly spaced positions `round(i * (n - 1) / (k - 1))`, first and last
/// included; every position when `k >= n`.
pub fn theme_sample_positions(n: usize, k: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if k >= n {
        return (0..n).collect();
    }
    if k < 2 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..k)
        .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Stage 2: the table-level theme from a sparse even sample. Returns the
/// reply text verbatim (trimmed).
pub fn stage2_global_theme(gateway: &Gateway, span: &ItemSpan<'_>, sample_count: usize) -> Result<String> {
    let mut prompt = protocol::task_line(protocol::TABLE_THEME);
    prompt.push_str(&format!("\nITEMS: {}\n{}\nEvenly spaced sample of the items:\n", span.len(), span.table_line()));
    for pos in theme_sample_positions(span.len(), sample_count) {
        prompt.push_str(&span.item_line(pos));
        prompt.push('\n');
    }
    prompt.push_str(
        "\nDescribe the overall theme of these items and, if their order is meaningful, \
         the coarse topical progression.\nReply as: THEME: <text>\n",
    );
    let reply = gateway
        .complete(&ChatCall::new(Role::TreeSummary, prompt))
        .map_err(|e| e.at_stage("theme", 0))?;
    Ok(reply.text.trim().to_string())
}

fn effective_min_group(n: usize, min_group: usize) -> usize {
    min_group.min(n / 2).max(1)
}

fn plan_is_valid(plan: &GroupingPlan, n: usize, ordered: bool) -> bool {
    if ordered {
        plan.is_contiguous_partition_of(n)
    } else {
        plan.is_partition_of(n)
    }
}

/// Stage 3: ask for a labeled grouping plan, validate it, repair undersized
/// groups and cap the group count at `2 * fan_out`. Two unusable replies
/// fall back to a uniform split.
pub fn stage3_conceptual_map(
    gateway: &Gateway,
    span: &ItemSpan<'_>,
    windows: &[WindowSummary],
    theme: &str,
    fan_out: usize,
    min_group: usize,
) -> Result<GroupingPlan> {
    let n = span.len();
    let m = effective_min_group(n, min_group);
    let ordered = span.ordered();
    let mut prompt = protocol::task_line(protocol::CONCEPTUAL_MAP);
    prompt.push_str(&format!(
        "\nITEMS: {n}\nFANOUT: {fan_out}\nMIN-GROUP: {m}\nORDERED: {}\n{}\nGlobal theme: {}\nWindow summaries:\n",
        if ordered { "yes" } else { "no" },
        span.table_line(),
        collapse_ws(theme)
    ));
    for w in windows {
        prompt.push_str(&format!("- [{}..{}] {}\n", w.start, w.end - 1, w.summary));
    }
    if ordered {
        prompt.push_str(&format!(
            "\nSplit positions 0..{} into about {fan_out} contiguous groups of at least {m} items, \
             each with a short standardized label. Cover every position exactly once.\n\
             Reply with one group per line: [start..end]=label (inclusive), e.g. [0..{}]=first topic\n",
            n - 1,
            (n / 2).max(1) - 1
        ));
    } else {
        prompt.push_str(&format!(
            "\nAssign positions 0..{} to about {fan_out} semantic groups of at least {m} items, \
             each with a short standardized label. Use every position exactly once.\n\
             Reply with one group per line listing positions and ranges: [0, 4, 7..9]=label\n",
            n - 1
        ));
    }

    let mut plan = None;
    let mut current = prompt.clone();
    for attempt in 0..2 {
        let reply = gateway
            .complete(&ChatCall::new(Role::TreeSummary, current.clone()))
            .map_err(|e| e.at_stage("grouping plan", attempt))?;
        match parse_plan(&reply.text) {
            Some(p) if plan_is_valid(&p, n, ordered) => {
                plan = Some(p);
                break;
            }
            _ => {
                log::warn!(
                    "table {}: unusable grouping plan (attempt {})",
                    span.table.table_id,
                    attempt + 1
                );
                current = format!(
                    "{prompt}\nREMINDER: the previous reply was not a valid partition of positions \
                     0..{}. Reply only with lines of the form [start..end]=label.\n",
                    n - 1
                );
            }
        }
    }
    let mut plan = plan.unwrap_or_else(|| fallback_plan(n, fan_out, m));

    if ordered {
        repair_ordered(&mut plan, m);
    } else {
        let texts: Vec<String> = span
            .items
            .iter()
            .map(|c| embedding_text(span.catalog, span.catalog.column(c).expect("catalog column"), true))
            .collect();
        let vectors = gateway.embed_batch(&texts)?;
        let centroid = |positions: &[usize]| -> Vec<f64> {
            let mut c = vec![0.0; vectors[0].dim()];
            for &p in positions {
                for (acc, v) in c.iter_mut().zip(vectors[p].values()) {
                    *acc += v;
                }
            }
            c
        };
        let similarity = |a: &[usize], b: &[usize]| -> f64 {
            let (ca, cb) = (centroid(a), centroid(b));
            let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
            let na = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = cb.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        repair_unordered(&mut plan, m, &similarity);
    }
    cap_groups(&mut plan, 2 * fan_out);
    if plan.groups.len() < 2 {
        plan = fallback_plan(n, fan_out, m);
    }
    Ok(plan)
}

fn move_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)move(?:\s+boundary)?\s+(\d+)\s*(?:->|→|to)\s*(\d+)").expect("valid regex")
    })
}

/// Stage 4 (ordered spans): one scan in windows of `window` items; the model
/// may propose boundary moves. Moves are applied in scan order while fewer
/// than `switch_budget` have been applied; moves that would break ordering or
/// leave a group below the minimum size are discarded.
pub fn stage4_refine_boundaries(
    gateway: &Gateway,
    span: &ItemSpan<'_>,
    plan: GroupingPlan,
    window: usize,
    switch_budget: usize,
    min_group: usize,
) -> Result<GroupingPlan> {
    let n = span.len();
    if !span.ordered() || plan.groups.len() < 2 || !plan.is_contiguous_partition_of(n) {
        return Ok(plan);
    }
    let m = effective_min_group(n, min_group);
    let mut starts: Vec<usize> = plan.spans().iter().map(|s| s.0).collect();
    let labels: Vec<String> = plan.groups.iter().map(|g| g.label.clone()).collect();
    let mut applied = 0;

    for (idx, (ws, we)) in window_partition(n, window, min_group).into_iter().enumerate() {
        let in_window: Vec<usize> = starts[1..].iter().copied().filter(|b| (ws..we).contains(b)).collect();
        if in_window.is_empty() {
            continue;
        }
        let mut prompt = protocol::task_line(protocol::BOUNDARY_REFINEMENT);
        prompt.push_str(&format!(
            "\nWINDOW: {ws}..{}\nBOUNDARIES: {}\nMIN-GROUP: {m}\n{}\nCurrent groups:\n",
            we - 1,
            in_window.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
            span.table_line()
        ));
        for (g, label) in labels.iter().enumerate() {
            let end = starts.get(g + 1).copied().unwrap_or(n);
            prompt.push_str(&format!("[{}..{}]={label}\n", starts[g], end - 1));
        }
        prompt.push_str("Items:\n");
        for pos in ws..we {
            if let Some(g) = starts.iter().position(|&s| s == pos).filter(|&g| g > 0) {
                prompt.push_str(&format!("---- group \"{}\" starts here (boundary {pos})\n", labels[g]));
            }
            prompt.push_str(&span.item_line(pos));
            prompt.push('\n');
        }
        prompt.push_str(
            "\nIf a group should start at a different position, reply with one line per change: \
             MOVE <old> -> <new>. Reply NONE if the boundaries are right.\n",
        );
        let reply = gateway
            .complete(&ChatCall::new(Role::TreeSummary, prompt))
            .map_err(|e| e.at_stage("boundary window", idx))?;
        for cap in move_regex().captures_iter(&reply.text) {
            let (Ok(from), Ok(to)) = (cap[1].parse::<usize>(), cap[2].parse::<usize>()) else {
                continue;
            };
            if applied >= switch_budget {
                log::debug!("boundary move {from}->{to} discarded: switch budget spent");
                continue;
            }
            let Some(g) = starts.iter().position(|&s| s == from).filter(|&g| g > 0) else {
                log::debug!("boundary move {from}->{to} discarded: no boundary at {from}");
                continue;
            };
            let prev_start = starts[g - 1];
            let next_start = starts.get(g + 1).copied().unwrap_or(n);
            if to == from || to < prev_start + m || to + m > next_start {
                log::debug!("boundary move {from}->{to} discarded: violates order or minimum size");
                continue;
            }
            starts[g] = to;
            applied += 1;
        }
    }

    let spans: Vec<(usize, usize, &str)> = starts
        .iter()
        .enumerate()
        .map(|(g, &s)| (s, starts.get(g + 1).copied().unwrap_or(n), labels[g].as_str()))
        .collect();
    Ok(GroupingPlan::from_spans(&spans))
}

/// Per-table tree with table-local node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subtree {
    pub table_id: TableId,
    pub root: NodeId,
    pub nodes: Vec<TreeNode>,
    pub relations: Vec<RelationSnippet>,
}

struct Arena<'g> {
    gateway: &'g Gateway,
    params: &'g TreeParams,
    nodes: Vec<TreeNode>,
    relations: Vec<RelationSnippet>,
}

impl<'g> Arena<'g> {
    fn push(&mut self, kind: NodeKind, summary: String, label: Option<String>, span: Option<Span>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(TreeNode {
            id,
            kind,
            summary,
            label,
            children: Vec::new(),
            span,
            members: Vec::new(),
        });
        id
    }

    fn summarize(&self, level: &str, span: &ItemSpan<'_>) -> Result<String> {
        let mut prompt = protocol::task_line(protocol::NODE_SUMMARY);
        prompt.push_str(&format!("\nLEVEL: {level}\n{}\nItems:\n", span.table_line()));
        for pos in 0..span.len() {
            prompt.push_str(&span.item_line(pos));
            prompt.push('\n');
        }
        prompt.push_str(
            "\nWrite a one or two sentence summary of what these items have in common.\n\
             Reply as: SUMMARY: <text>\n",
        );
        let reply = self.gateway.complete(&ChatCall::new(Role::TreeSummary, prompt))?;
        Ok(strip_label(&reply.text, "SUMMARY"))
    }

    fn leaf(&mut self, span: &ItemSpan<'_>, label: Option<String>) -> Result<NodeId> {
        let summary = self.summarize("leaf", span)?;
        let id = self.push(NodeKind::GroupLeaf, summary, label, span.span());
        self.nodes[id.index()].members = span.items.clone();
        Ok(id)
    }

    fn annotate(&mut self, parent: NodeId) -> Result<()> {
        let node = &self.nodes[parent.index()];
        if !self.params.annotate_relations || node.children.len() < 2 {
            return Ok(());
        }
        let siblings: Vec<Sibling> = node
            .children
            .iter()
            .map(|&c| {
                let child = &self.nodes[c.index()];
                Sibling {
                    id: c,
                    label: child.label.clone().unwrap_or_else(|| c.to_string()),
                    summary: child.summary.clone(),
                }
            })
            .collect();
        let found = annotate_sibling_relations(
            self.gateway,
            &node.summary,
            &siblings,
            &self.params.relation_caps,
            Role::Relation.default_timeout(),
        )?;
        self.relations.extend(found);
        Ok(())
    }

    fn build_span(&mut self, span: ItemSpan<'_>, kind: NodeKind) -> Result<NodeId> {
        let p = self.params;
        if span.len() <= p.leaf_budget {
            let summary = self.summarize("table", &span)?;
            let root = self.push(kind, summary, span.region.clone(), span.span());
            let leaf = self.leaf(&span, span.region.clone())?;
            self.nodes[root.index()].children.push(leaf);
            return Ok(root);
        }
        let windows = stage1_window_summaries(self.gateway, &span, p.window, p.min_group)?;
        let theme = stage2_global_theme(self.gateway, &span, p.theme_samples)?;
        let mut plan = stage3_conceptual_map(self.gateway, &span, &windows, &theme, p.fan_out, p.min_group)?;
        if span.ordered() && p.refine_boundaries {
            plan = stage4_refine_boundaries(self.gateway, &span, plan, p.window, p.switch_budget, p.min_group)?;
        }
        let id = self.push(kind, strip_label(&theme, "THEME"), span.region.clone(), span.span());
        for group in &plan.groups {
            let child_span = span.sub(&group.positions, &group.label);
            let child = if child_span.len() <= p.leaf_budget {
                self.leaf(&child_span, Some(group.label.clone()))?
            } else {
                self.build_span(child_span, NodeKind::WithinTable)?
            };
            self.nodes[id.index()].children.push(child);
        }
        self.annotate(id)?;
        Ok(id)
    }
}

/// Build one table's subtree.
pub fn build_table_tree(
    gateway: &Gateway,
    catalog: &SchemaCatalog,
    table: &TableMeta,
    params: &TreeParams,
) -> Result<Subtree> {
    params.validate()?;
    if table.is_empty() {
        return Err(Error::InvalidParams(format!("table {} has no columns", table.table_id)));
    }
    let mut arena = Arena {
        gateway,
        params,
        nodes: Vec::new(),
        relations: Vec::new(),
    };
    let root = arena
        .build_span(ItemSpan::whole_table(catalog, table), NodeKind::TableRoot)
        .map_err(|e| Error::Table {
            table: table.table_id.to_string(),
            source: Box::new(e),
        })?;
    Ok(Subtree {
        table_id: table.table_id.clone(),
        root,
        nodes: arena.nodes,
        relations: arena.relations,
    })
}

#[derive(Default, Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    tables: BTreeMap<TableId, Subtree>,
}

/// Builds a whole-catalog tree. Tables are built in parallel; completed
/// table subtrees are checkpointed so a failed build can resume.
pub struct TreeBuilder<'g> {
    gateway: &'g Gateway,
    params: TreeParams,
    checkpoint: Option<PathBuf>,
}

impl<'g> TreeBuilder<'g> {
    pub fn new(gateway: &'g Gateway, params: TreeParams) -> Self {
        TreeBuilder {
            gateway,
            params,
            checkpoint: None,
        }
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    fn fingerprint(&self, catalog: &SchemaCatalog) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.params).expect("params serialize"));
        h.update(serde_json::to_vec(catalog.tables()).expect("tables serialize"));
        h.update(serde_json::to_vec(catalog.columns()).expect("columns serialize"));
        h.update([u8::from(catalog.is_masked())]);
        h.update(self.gateway.chat_backend_id().as_bytes());
        hex(&h.finalize())
    }

    fn load_checkpoint(path: &Path, fingerprint: &str) -> Checkpoint {
        let Ok(bytes) = std::fs::read(path) else {
            return Checkpoint::default();
        };
        match serde_json::from_slice::<Checkpoint>(&bytes) {
            Ok(cp) if cp.fingerprint == fingerprint => {
                log::info!("resuming from checkpoint with {} finished tables", cp.tables.len());
                cp
            }
            _ => Checkpoint::default(),
        }
    }

    fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
        let tmp = path.with_extension("partial.tmp");
        std::fs::write(&tmp, serde_json::to_vec(cp)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn build(&self, catalog: &SchemaCatalog) -> Result<ContextTree> {
        self.params.validate()?;
        let fingerprint = self.fingerprint(catalog);
        let mut cp = match &self.checkpoint {
            Some(path) => Self::load_checkpoint(path, &fingerprint),
            None => Checkpoint::default(),
        };
        cp.fingerprint = fingerprint;
        let todo: Vec<&TableMeta> = catalog
            .tables()
            .iter()
            .filter(|t| !t.is_empty() && !cp.tables.contains_key(&t.table_id))
            .collect();
        let shared = Mutex::new(cp);
        let results: Vec<Result<()>> = todo
            .par_iter()
            .map(|table| {
                let sub = build_table_tree(self.gateway, catalog, table, &self.params)?;
                let mut cp = shared.lock().expect("checkpoint poisoned");
                cp.tables.insert(table.table_id.clone(), sub);
                if let Some(path) = &self.checkpoint {
                    Self::save_checkpoint(path, &cp)?;
                }
                Ok(())
            })
            .collect();
        let mut cp = shared.into_inner().expect("checkpoint poisoned");
        if let Some(err) = results.into_iter().find_map(|r| r.err()) {
            return Err(err);
        }
        let subtrees: Vec<Subtree> = catalog
            .tables()
            .iter()
            .filter_map(|t| cp.tables.remove(&t.table_id))
            .collect();
        let tree = cluster_tables(self.gateway, catalog, subtrees, &self.params)?;
        if let Some(path) = &self.checkpoint {
            let _ = std::fs::remove_file(path);
        }
        Ok(tree)
    }
}

/// Default timeout for tree-building calls.
pub(crate) fn summary_timeout() -> Duration {
    Role::TreeSummary.default_timeout()
}
