//! Context tree: a hierarchical summary index over one catalog.
//!
//! Leaves hold spans of at most `leaf_budget` columns. Internal nodes carry
//! natural-language summaries of progressively larger regions: within-table
//! groups, table roots, clusters of related tables and finally a single
//! database root. A column's lineage (leaf to root) is the backbone of the
//! context pack shown to the matching model.
//!
//! Construction happens in two phases. [`build_table_tree`] turns each table
//! into a subtree (windowed summaries, a global theme, a grouping plan,
//! optional boundary refinement, recursion on oversize groups), then
//! [`cluster_tables`] merges table subtrees bottom-up by the cosine distance
//! of their root-summary embeddings.

mod build;
mod cluster;
mod pack;
mod plan;
mod relations;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use build::{
    build_table_tree, stage1_window_summaries, stage2_global_theme, stage3_conceptual_map,
    stage4_refine_boundaries, theme_sample_positions, window_partition, ItemSpan, Subtree,
    TreeBuilder, WindowSummary,
};
pub use cluster::{average_linkage_merges, cluster_tables, Merge};
pub use pack::{build_context_pack, middle_out_order, ContextPack, DEFAULT_MAX_RELATIONS};
pub use plan::{fallback_plan, parse_plan, repair_ordered, GroupingPlan, PlanGroup};
pub use relations::{annotate_sibling_relations, parse_relations, RelationCaps, Sibling};

use crate::error::{Error, Result};
use crate::gateway::cache::hex;
use crate::schema::{ColumnRef, SchemaCatalog, Side, TableId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// A single column. The builder emits group leaves instead; accepted in
    /// loaded trees.
    ColumnLeaf,
    GroupLeaf,
    WithinTable,
    TableRoot,
    Cluster,
    DbRoot,
}

impl NodeKind {
    pub fn is_leaf(self) -> bool {
        matches!(self, NodeKind::ColumnLeaf | NodeKind::GroupLeaf)
    }
}

/// Half-open ordinal range `[start, end)` within one ordered table.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub table_id: TableId,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
    /// Columns of a leaf, in listing order. Empty for internal nodes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<ColumnRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSnippet {
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub relation_text: String,
    pub directed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    /// Columns per scan window (W).
    pub window: usize,
    /// Target number of child groups per split (b).
    pub fan_out: usize,
    /// Minimum group size (m).
    pub min_group: usize,
    /// Boundary moves allowed per refinement pass (s).
    pub switch_budget: usize,
    /// Maximum columns per leaf (B).
    pub leaf_budget: usize,
    /// Cosine-distance cutoff for merging table trees (δ).
    pub cluster_threshold: f64,
    /// Evenly spaced samples for the global theme.
    pub theme_samples: usize,
    pub refine_boundaries: bool,
    pub annotate_relations: bool,
    pub relation_caps: RelationCaps,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            window: 250,
            fan_out: 5,
            min_group: 10,
            switch_budget: 2,
            leaf_budget: 50,
            cluster_threshold: 0.5,
            theme_samples: 20,
            refine_boundaries: true,
            annotate_relations: true,
            relation_caps: RelationCaps::default(),
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.min_group < 1 {
            return bad("min_group must be at least 1".into());
        }
        if self.leaf_budget < self.min_group {
            return bad(format!(
                "leaf_budget ({}) must be >= min_group ({})",
                self.leaf_budget, self.min_group
            ));
        }
        if self.window < self.leaf_budget {
            return bad(format!(
                "window ({}) must be >= leaf_budget ({})",
                self.window, self.leaf_budget
            ));
        }
        if self.fan_out < 2 {
            return bad("fan_out must be at least 2".into());
        }
        if !(self.cluster_threshold > 0.0 && self.cluster_threshold < 2.0) {
            return bad(format!(
                "cluster_threshold must lie in (0, 2), got {}",
                self.cluster_threshold
            ));
        }
        if self.theme_samples < 2 {
            return bad("theme_samples must be at least 2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ContextTree {
    side: Side,
    masked: bool,
    root: NodeId,
    nodes: Vec<TreeNode>,
    parent: BTreeMap<NodeId, NodeId>,
    relations: Vec<RelationSnippet>,
    params: TreeParams,
    leaf_of: HashMap<ColumnRef, NodeId>,
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    side: Side,
    masked: bool,
    params: TreeParams,
    root: NodeId,
    nodes: Vec<TreeNode>,
    parent: BTreeMap<NodeId, NodeId>,
    relations: Vec<RelationSnippet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content_hash: Option<String>,
}

impl ContextTree {
    pub(crate) fn from_parts(
        side: Side,
        masked: bool,
        root: NodeId,
        nodes: Vec<TreeNode>,
        relations: Vec<RelationSnippet>,
        params: TreeParams,
    ) -> Result<Self> {
        let mut parent = BTreeMap::new();
        for node in &nodes {
            for child in &node.children {
                if parent.insert(*child, node.id).is_some() {
                    return Err(Error::InvalidParams(format!("node {child} has two parents")));
                }
            }
        }
        let mut tree = ContextTree {
            side,
            masked,
            root,
            nodes,
            parent,
            relations,
            params,
            leaf_of: HashMap::new(),
        };
        tree.index()?;
        Ok(tree)
    }

    fn index(&mut self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.index() != i {
                return Err(Error::InvalidParams(format!(
                    "node at position {i} has id {}",
                    node.id
                )));
            }
            if node.children.iter().any(|c| c.index() >= self.nodes.len()) {
                return Err(Error::InvalidParams(format!("node {} has a dangling child", node.id)));
            }
        }
        if self.root.index() >= self.nodes.len() || self.parent.contains_key(&self.root) {
            return Err(Error::InvalidParams("root is missing or has a parent".into()));
        }
        self.leaf_of.clear();
        for node in self.nodes.iter().filter(|n| n.kind.is_leaf()) {
            for column in &node.members {
                if self.leaf_of.insert(column.clone(), node.id).is_some() {
                    return Err(Error::InvalidParams(format!(
                        "column {column} appears under two leaves"
                    )));
                }
            }
        }
        // every node must reach the root without revisiting a node
        for node in &self.nodes {
            let mut cur = node.id;
            let mut steps = 0;
            while let Some(p) = self.parent.get(&cur) {
                cur = *p;
                steps += 1;
                if steps > self.nodes.len() {
                    return Err(Error::InvalidParams("parent links contain a cycle".into()));
                }
            }
            if cur != self.root {
                return Err(Error::InvalidParams(format!(
                    "node {} is not connected to the root",
                    node.id
                )));
            }
        }
        Ok(())
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.index()]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent.get(&id).copied()
    }

    pub fn relations(&self) -> &[RelationSnippet] {
        &self.relations
    }

    pub fn leaf_of(&self, column: &ColumnRef) -> Option<NodeId> {
        self.leaf_of.get(column).copied()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.kind.is_leaf())
    }

    /// Distance from the root (root has depth 0).
    pub fn depth(&self, id: NodeId) -> usize {
        let mut depth = 0;
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            depth += 1;
            cur = p;
        }
        depth
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        self.leaves().map(|l| self.depth(l.id) + 1).max().unwrap_or(1)
    }

    /// Leaf-to-root path for a column, following parent links only.
    pub fn lineage(&self, column: &ColumnRef) -> Result<Vec<&TreeNode>> {
        let leaf = self
            .leaf_of(column)
            .ok_or_else(|| Error::UnknownColumn(column.to_string()))?;
        let mut path = vec![self.node(leaf)];
        let mut cur = leaf;
        while let Some(p) = self.parent(cur) {
            path.push(self.node(p));
            cur = p;
        }
        Ok(path)
    }

    /// Check the tree covers exactly the catalog's columns.
    pub fn check_coverage(&self, catalog: &SchemaCatalog) -> Result<()> {
        if catalog.side() != self.side {
            return Err(Error::SideMismatch {
                expected: catalog.side().to_string(),
                found: self.side.to_string(),
            });
        }
        for meta in catalog.columns() {
            if !self.leaf_of.contains_key(&meta.column) {
                return Err(Error::UnknownColumn(format!(
                    "{} is in the catalog but not in the tree",
                    meta.column
                )));
            }
        }
        if self.leaf_of.len() != catalog.len() {
            return Err(Error::InvalidParams(format!(
                "tree covers {} columns, catalog has {}",
                self.leaf_of.len(),
                catalog.len()
            )));
        }
        Ok(())
    }

    fn file(&self) -> TreeFile {
        TreeFile {
            side: self.side,
            masked: self.masked,
            params: self.params.clone(),
            root: self.root,
            nodes: self.nodes.clone(),
            parent: self.parent.clone(),
            relations: self.relations.clone(),
            content_hash: None,
        }
    }

    /// SHA-256 over the serialized tree without its hash field.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_vec(&self.file()).expect("tree serializes");
        hex(&Sha256::digest(body))
    }

    pub fn to_json(&self) -> String {
        let mut file = self.file();
        file.content_hash = Some(self.content_hash());
        serde_json::to_string_pretty(&file).expect("tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TreeFile = serde_json::from_str(text)?;
        let tree = ContextTree::from_parts(
            file.side,
            file.masked,
            file.root,
            file.nodes,
            file.relations,
            file.params,
        )?;
        if tree.parent != file.parent {
            return Err(Error::InvalidParams(
                "stored parent map disagrees with child lists".into(),
            ));
        }
        if let Some(stored) = file.content_hash {
            let actual = tree.content_hash();
            if stored != actual {
                return Err(Error::InvalidParams(format!(
                    "content hash mismatch: file says {stored}, contents hash to {actual}"
                )));
            }
        }
        Ok(tree)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ContextTree::from_json(&text)
    }
}
