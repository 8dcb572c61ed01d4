use serde::{Deserialize, Serialize};

use super::build::{summary_timeout, Subtree};
use super::relations::{annotate_sibling_relations, Sibling};
use super::{ContextTree, NodeId, NodeKind, RelationSnippet, TreeNode, TreeParams};
use crate::error::{Error, Result};
use crate::gateway::{ChatCall, Gateway, Role};
use crate::protocol::{self, strip_label};
use crate::schema::SchemaCatalog;

const TIE_TOLERANCE: f64 = 1e-12;

/// One agglomeration step. Inputs are numbered `0..n`; the cluster created
/// by the `k`-th merge is numbered `n + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub created: usize,
}

/// Average-linkage agglomeration over a symmetric distance matrix, merging
/// while the closest pair is within `threshold`.
///
/// Ties (within 1e-12) go to the pair whose smallest keys are
/// lexicographically first; `left` is the cluster with the smaller key.
pub fn average_linkage_merges(distances: &[Vec<f64>], keys: &[String], threshold: f64) -> Vec<Merge> {
    let n = distances.len();
    assert_eq!(keys.len(), n, "one key per item");
    let total = 2 * n;
    let mut d = vec![vec![f64::INFINITY; total]; total];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = distances[i][j];
        }
    }
    let mut size = vec![0usize; total];
    let mut key: Vec<String> = vec![String::new(); total];
    let mut active: Vec<usize> = (0..n).collect();
    for i in 0..n {
        size[i] = 1;
        key[i] = keys[i].clone();
    }
    let mut merges = Vec::new();
    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                let (a, b) = if key[a] <= key[b] { (a, b) } else { (b, a) };
                let dist = d[a][b];
                let better = match best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        dist < bd - TIE_TOLERANCE
                            || ((dist - bd).abs() <= TIE_TOLERANCE
                                && (&key[a], &key[b]) < (&key[ba], &key[bb]))
                    }
                };
                if better {
                    best = Some((dist, a, b));
                }
            }
        }
        let (dist, a, b) = best.expect("two active clusters");
        if dist > threshold {
            break;
        }
        let c = n + merges.len();
        size[c] = size[a] + size[b];
        key[c] = key[a].clone().min(key[b].clone());
        for &k in active.iter().filter(|&&k| k != a && k != b) {
            let v = (size[a] as f64 * d[a][k] + size[b] as f64 * d[b][k]) / size[c] as f64;
            d[c][k] = v;
            d[k][c] = v;
        }
        active.retain(|&k| k != a && k != b);
        active.push(c);
        merges.push(Merge {
            left: a,
            right: b,
            distance: dist,
            created: c,
        });
    }
    merges
}

fn summarize_children(gateway: &Gateway, level: &str, children: &[&TreeNode]) -> Result<String> {
    let mut prompt = protocol::task_line(protocol::NODE_SUMMARY);
    prompt.push_str(&format!("\nLEVEL: {level}\nChild summaries:\n"));
    for child in children {
        prompt.push_str(&format!("- {}\n", child.summary));
    }
    prompt.push_str(
        "\nWrite a one or two sentence summary of what these tables cover together.\n\
         Reply as: SUMMARY: <text>\n",
    );
    let reply = gateway.complete(&ChatCall::new(Role::TreeSummary, prompt).with_timeout(summary_timeout()))?;
    Ok(strip_label(&reply.text, "SUMMARY"))
}

/// Merge per-table subtrees into one catalog tree.
///
/// Table roots are embedded by their summaries and merged bottom-up by
/// average linkage on cosine distance while the distance is at most
/// `params.cluster_threshold`. If several roots remain, a database root is
/// added over them; a single remaining cluster becomes the database root.
pub fn cluster_tables(
    gateway: &Gateway,
    catalog: &SchemaCatalog,
    subtrees: Vec<Subtree>,
    params: &TreeParams,
) -> Result<ContextTree> {
    if subtrees.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut relations: Vec<RelationSnippet> = Vec::new();
    let mut roots = Vec::new();
    let mut keys = Vec::new();
    for sub in subtrees {
        let offset = nodes.len() as u32;
        let shift = |id: NodeId| NodeId(id.0 + offset);
        for mut node in sub.nodes {
            node.id = shift(node.id);
            node.children = node.children.into_iter().map(shift).collect();
            nodes.push(node);
        }
        relations.extend(sub.relations.into_iter().map(|r| RelationSnippet {
            from_node: shift(r.from_node),
            to_node: shift(r.to_node),
            ..r
        }));
        roots.push(shift(sub.root));
        keys.push(sub.table_id.to_string());
    }

    let mut cluster_ids: Vec<NodeId> = roots.clone();
    let mut remaining: Vec<(String, NodeId)> = keys.iter().cloned().zip(roots.iter().copied()).collect();
    if roots.len() > 1 {
        let texts: Vec<String> = roots.iter().map(|r| nodes[r.index()].summary.clone()).collect();
        let vectors = gateway.embed_batch(&texts)?;
        let distances: Vec<Vec<f64>> = vectors
            .iter()
            .map(|a| vectors.iter().map(|b| 1.0 - a.cosine(b)).collect())
            .collect();
        let merges = average_linkage_merges(&distances, &keys, params.cluster_threshold);
        let mut key_of: Vec<String> = keys.clone();
        for merge in &merges {
            let children = vec![cluster_ids[merge.left], cluster_ids[merge.right]];
            let refs: Vec<&TreeNode> = children.iter().map(|c| &nodes[c.index()]).collect();
            let summary = summarize_children(gateway, "cluster", &refs)?;
            let id = NodeId(nodes.len() as u32);
            nodes.push(TreeNode {
                id,
                kind: NodeKind::Cluster,
                summary,
                label: None,
                children,
                span: None,
                members: Vec::new(),
            });
            annotate(gateway, params, &nodes, id, &mut relations)?;
            cluster_ids.push(id);
            key_of.push(key_of[merge.left].clone().min(key_of[merge.right].clone()));
        }
        let mut merged = vec![false; cluster_ids.len()];
        for m in &merges {
            merged[m.left] = true;
            merged[m.right] = true;
        }
        remaining = (0..cluster_ids.len())
            .filter(|&i| !merged[i])
            .map(|i| (key_of[i].clone(), cluster_ids[i]))
            .collect();
        remaining.sort();
    }

    let root = if remaining.len() == 1 {
        let root = remaining[0].1;
        if nodes[root.index()].kind == NodeKind::Cluster {
            nodes[root.index()].kind = NodeKind::DbRoot;
        }
        root
    } else {
        let children: Vec<NodeId> = remaining.iter().map(|(_, id)| *id).collect();
        let refs: Vec<&TreeNode> = children.iter().map(|c| &nodes[c.index()]).collect();
        let summary = summarize_children(gateway, "database", &refs)?;
        let id = NodeId(nodes.len() as u32);
        nodes.push(TreeNode {
            id,
            kind: NodeKind::DbRoot,
            summary,
            label: None,
            children,
            span: None,
            members: Vec::new(),
        });
        annotate(gateway, params, &nodes, id, &mut relations)?;
        id
    };
    ContextTree::from_parts(
        catalog.side(),
        catalog.is_masked(),
        root,
        nodes,
        relations,
        params.clone(),
    )
}

fn annotate(
    gateway: &Gateway,
    params: &TreeParams,
    nodes: &[TreeNode],
    parent: NodeId,
    out: &mut Vec<RelationSnippet>,
) -> Result<()> {
    if !params.annotate_relations {
        return Ok(());
    }
    let node = &nodes[parent.index()];
    let siblings: Vec<Sibling> = node
        .children
        .iter()
        .map(|&c| Sibling {
            id: c,
            label: nodes[c.index()].label.clone().unwrap_or_else(|| c.to_string()),
            summary: nodes[c.index()].summary.clone(),
        })
        .collect();
    out.extend(annotate_sibling_relations(
        gateway,
        &node.summary,
        &siblings,
        &params.relation_caps,
        Role::Relation.default_timeout(),
    )?);
    Ok(())
}
