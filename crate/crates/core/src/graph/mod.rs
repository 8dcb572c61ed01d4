//! Similarity hypergraph over one schema side.
//!
//! Columns are linked when the cosine of their embeddings reaches `tau`; the
//! connected components are the confusable groups. At query time the graph
//! expands a shortlist with near-duplicates of its strongest members and
//! recomputes components restricted to the candidate set.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{EmbeddingVector, Gateway};
use crate::protocol::collapse_ws;
use crate::schema::{ColumnMeta, ColumnRef, SchemaCatalog, Side};

pub const DEFAULT_TAU: f64 = 0.90;
pub const DEFAULT_CAP_STRONG: usize = 3;
pub const DEFAULT_CAP_TOTAL: usize = 5;

const EMBED_BATCH: usize = 256;

/// Undirected link, stored with `a < b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityLink {
    pub a: ColumnRef,
    pub b: ColumnRef,
    pub cosine: f64,
}

impl SimilarityLink {
    pub fn new(x: ColumnRef, y: ColumnRef, cosine: f64) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        SimilarityLink { a, b, cosine }
    }
}

/// A connected component; members sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityGroup {
    pub side: Side,
    pub members: Vec<ColumnRef>,
}

impl SimilarityGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }

    pub fn contains(&self, column: &ColumnRef) -> bool {
        self.members.binary_search(column).is_ok()
    }
}

/// Text embedded for a column: `name: <name>. description: <desc>. table: <table>.`
/// The name is the CID when the catalog is masked.
pub fn embedding_text(catalog: &SchemaCatalog, meta: &ColumnMeta, include_table: bool) -> String {
    let mut text = format!(
        "name: {}. description: {}.",
        catalog.display_name(meta),
        collapse_ws(&meta.description)
    );
    if include_table {
        if let Some(table) = catalog.table(&meta.column.table_id) {
            text.push_str(&format!(" table: {}.", table.name));
        }
    }
    text
}

/// Connected components of `links` over `columns`. Columns without links
/// are singletons; links naming unknown columns are ignored. Groups are
/// sorted by their smallest member.
pub fn extract_groups(side: Side, links: &[SimilarityLink], columns: &[ColumnRef]) -> Vec<SimilarityGroup> {
    let index: HashMap<&ColumnRef, usize> = columns.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let mut uf = UnionFind::<usize>::new(columns.len());
    for link in links {
        match (index.get(&link.a), index.get(&link.b)) {
            (Some(&i), Some(&j)) => {
                uf.union(i, j);
            }
            _ => log::debug!("ignoring link {} - {} outside the column set", link.a, link.b),
        }
    }
    let mut components: BTreeMap<usize, Vec<ColumnRef>> = BTreeMap::new();
    for (i, label) in uf.into_labeling().into_iter().enumerate() {
        components.entry(label).or_default().push(columns[i].clone());
    }
    let mut groups: Vec<SimilarityGroup> = components
        .into_values()
        .map(|mut members| {
            members.sort();
            members.dedup();
            SimilarityGroup { side, members }
        })
        .collect();
    groups.sort_by(|x, y| x.members[0].cmp(&y.members[0]));
    groups
}

/// All pairs with cosine at least `tau`, exact.
pub fn threshold_links(columns: &[ColumnRef], vectors: &[EmbeddingVector], tau: f64) -> Vec<SimilarityLink> {
    let mut links = Vec::new();
    for i in 0..columns.len() {
        for j in i + 1..columns.len() {
            let cos = vectors[i].cosine(&vectors[j]);
            if cos >= tau {
                links.push(SimilarityLink::new(columns[i].clone(), columns[j].clone(), cos));
            }
        }
    }
    links.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
    links
}

#[derive(Clone, Debug)]
pub struct Hypergraph {
    side: Side,
    tau: f64,
    columns: Vec<ColumnRef>,
    embeddings: Vec<EmbeddingVector>,
    links: Vec<SimilarityLink>,
    groups: Vec<SimilarityGroup>,
    index: HashMap<ColumnRef, usize>,
    group_of: HashMap<ColumnRef, usize>,
}

#[derive(Serialize, Deserialize)]
struct HypergraphFile {
    side: Side,
    tau: f64,
    embeddings: Vec<(ColumnRef, Vec<f64>)>,
    links: Vec<SimilarityLink>,
    groups: Vec<SimilarityGroup>,
}

impl Hypergraph {
    /// Graph over precomputed unit embeddings.
    pub fn from_embeddings(
        side: Side,
        tau: f64,
        columns: Vec<ColumnRef>,
        embeddings: Vec<EmbeddingVector>,
    ) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        if columns.len() != embeddings.len() {
            return Err(Error::InvalidParams(format!(
                "{} columns but {} embeddings",
                columns.len(),
                embeddings.len()
            )));
        }
        if !tau.is_finite() {
            return Err(Error::InvalidParams(format!("tau must be finite, got {tau}")));
        }
        let dim = embeddings[0].dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        let links = threshold_links(&columns, &embeddings, tau);
        let groups = extract_groups(side, &links, &columns);
        Ok(Self::assemble(side, tau, columns, embeddings, links, groups))
    }

    fn assemble(
        side: Side,
        tau: f64,
        columns: Vec<ColumnRef>,
        embeddings: Vec<EmbeddingVector>,
        links: Vec<SimilarityLink>,
        groups: Vec<SimilarityGroup>,
    ) -> Self {
        let index = columns.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let group_of = groups
            .iter()
            .enumerate()
            .flat_map(|(g, group)| group.members.iter().map(move |m| (m.clone(), g)))
            .collect();
        Hypergraph {
            side,
            tau,
            columns,
            embeddings,
            links,
            groups,
            index,
            group_of,
        }
    }

    /// Embed every column of `catalog` and link pairs with cosine >= `tau`.
    pub fn build(catalog: &SchemaCatalog, gateway: &Gateway, tau: f64, include_table: bool) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let texts: Vec<String> = catalog
            .columns()
            .iter()
            .map(|m| embedding_text(catalog, m, include_table))
            .collect();
        let mut embeddings = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            embeddings.extend(gateway.embed_batch(chunk)?);
        }
        let columns = catalog.columns().iter().map(|m| m.column.clone()).collect();
        Self::from_embeddings(catalog.side(), tau, columns, embeddings)
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn columns(&self) -> &[ColumnRef] {
        &self.columns
    }

    pub fn links(&self) -> &[SimilarityLink] {
        &self.links
    }

    pub fn groups(&self) -> &[SimilarityGroup] {
        &self.groups
    }

    pub fn embedding(&self, column: &ColumnRef) -> Option<&EmbeddingVector> {
        self.index.get(column).map(|&i| &self.embeddings[i])
    }

    pub fn cosine(&self, a: &ColumnRef, b: &ColumnRef) -> Option<f64> {
        Some(self.embedding(a)?.cosine(self.embedding(b)?))
    }

    pub fn group_of(&self, column: &ColumnRef) -> Option<&SimilarityGroup> {
        self.group_of.get(column).map(|&g| &self.groups[g])
    }

    /// Columns linked to `column`, by cosine descending then column order.
    pub fn neighbors(&self, column: &ColumnRef) -> Vec<(ColumnRef, f64)> {
        let mut out: Vec<(ColumnRef, f64)> = self
            .links
            .iter()
            .filter_map(|l| {
                if &l.a == column {
                    Some((l.b.clone(), l.cosine))
                } else if &l.b == column {
                    Some((l.a.clone(), l.cosine))
                } else {
                    None
                }
            })
            .collect();
        out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        out
    }

    /// Top-`k` columns by cosine to `query`, ties by column order.
    pub fn nearest(&self, query: &EmbeddingVector, k: usize) -> Vec<(ColumnRef, f64)> {
        let mut scored: Vec<(ColumnRef, f64)> = self
            .columns
            .iter()
            .zip(&self.embeddings)
            .map(|(c, e)| (c.clone(), query.cosine(e)))
            .collect();
        scored.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        scored.truncate(k.min(scored.len()));
        scored
    }

    /// `c0` followed by at most `cap_total` linked neighbours of its first
    /// `cap_strong` members, highest cosine first.
    pub fn expand_candidates(&self, c0: &[ColumnRef], cap_strong: usize, cap_total: usize) -> Vec<ColumnRef> {
        let mut best: HashMap<ColumnRef, f64> = HashMap::new();
        for strong in c0.iter().take(cap_strong) {
            for (n, cos) in self.neighbors(strong) {
                if c0.contains(&n) {
                    continue;
                }
                let e = best.entry(n).or_insert(f64::NEG_INFINITY);
                *e = e.max(cos);
            }
        }
        let mut added: Vec<(ColumnRef, f64)> = best.into_iter().collect();
        added.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        c0.iter()
            .cloned()
            .chain(added.into_iter().take(cap_total).map(|(c, _)| c))
            .collect()
    }

    /// Components of the link subgraph induced on `candidates`, with links
    /// recomputed from the stored embeddings.
    pub fn groups_within(&self, candidates: &[ColumnRef]) -> Vec<SimilarityGroup> {
        let mut cols: Vec<ColumnRef> = Vec::new();
        let mut vecs = Vec::new();
        for c in candidates {
            if cols.contains(c) {
                continue;
            }
            match self.embedding(c) {
                Some(e) => {
                    cols.push(c.clone());
                    vecs.push(e.clone());
                }
                None => log::debug!("candidate {c} has no stored embedding"),
            }
        }
        let links = threshold_links(&cols, &vecs, self.tau);
        extract_groups(self.side, &links, &cols)
    }

    /// The component containing `column`, optionally restricted to its table.
    pub fn source_confusable_set(&self, column: &ColumnRef, restrict_to_table: bool) -> SimilarityGroup {
        let mut members: Vec<ColumnRef> = self
            .group_of(column)
            .map(|g| g.members.clone())
            .unwrap_or_else(|| vec![column.clone()]);
        if restrict_to_table {
            members.retain(|m| m.table_id == column.table_id);
        }
        if !members.contains(column) {
            members.push(column.clone());
            members.sort();
        }
        SimilarityGroup {
            side: self.side,
            members,
        }
    }

    pub fn to_json(&self) -> String {
        let file = HypergraphFile {
            side: self.side,
            tau: self.tau,
            embeddings: self
                .columns
                .iter()
                .zip(&self.embeddings)
                .map(|(c, e)| (c.clone(), e.values().to_vec()))
                .collect(),
            links: self.links.clone(),
            groups: self.groups.clone(),
        };
        serde_json::to_string(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: HypergraphFile = serde_json::from_str(text)?;
        let (columns, raw): (Vec<ColumnRef>, Vec<Vec<f64>>) = file.embeddings.into_iter().unzip();
        let embeddings = raw
            .into_iter()
            .map(|v| EmbeddingVector::from_raw(v).ok_or_else(|| Error::InvalidParams("zero embedding in graph file".into())))
            .collect::<Result<Vec<_>>>()?;
        if columns.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        Ok(Self::assemble(file.side, file.tau, columns, embeddings, file.links, file.groups))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(o: usize) -> ColumnRef {
        ColumnRef::new(Side::Target, "t", o)
    }

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::from_raw(v.to_vec()).unwrap()
    }

    /// Unit vectors on a circle with chosen pairwise angles.
    fn at_angle(theta: f64) -> EmbeddingVector {
        unit(&[theta.cos(), theta.sin()])
    }

    #[test]
    fn chain_forms_one_group() {
        // cos(AB)=0.95, cos(BC)=0.92, cos(AC) small
        let a = 0.0;
        let b = 0.95f64.acos();
        let c = b + 0.92f64.acos();
        let g = Hypergraph::from_embeddings(
            Side::Target,
            0.9,
            vec![col(0), col(1), col(2)],
            vec![at_angle(a), at_angle(b), at_angle(c)],
        )
        .unwrap();
        assert_eq!(g.links().len(), 2);
        assert_eq!(g.groups().len(), 1);
        assert_eq!(g.groups()[0].members, vec![col(0), col(1), col(2)]);
    }

    #[test]
    fn impossible_tau_gives_singletons() {
        let g = Hypergraph::from_embeddings(
            Side::Target,
            1.0 + 1e-9,
            vec![col(0), col(1)],
            vec![unit(&[1.0, 0.0]), unit(&[1.0, 0.0])],
        )
        .unwrap();
        assert!(g.links().is_empty());
        assert_eq!(g.groups().len(), 2);
    }

    #[test]
    fn expansion_ranks_by_cosine_and_caps() {
        let a = 0.0;
        let cols = vec![col(0), col(1), col(2), col(3)];
        let embs = vec![
            at_angle(a),
            at_angle(0.97f64.acos()),
            at_angle(-(0.93f64.acos())),
            at_angle(0.91f64.acos() + 0.0),
        ];
        let g = Hypergraph::from_embeddings(Side::Target, 0.9, cols, embs).unwrap();
        assert_eq!(g.expand_candidates(&[col(0)], 3, 2), vec![col(0), col(1), col(2)]);
        assert_eq!(g.expand_candidates(&[col(0)], 3, 0), vec![col(0)]);
    }

    #[test]
    fn json_roundtrip() {
        let g = Hypergraph::from_embeddings(
            Side::Source,
            0.8,
            vec![col(0), col(1)],
            vec![unit(&[1.0, 0.1]), unit(&[1.0, 0.0])],
        )
        .unwrap();
        let back = Hypergraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.groups(), g.groups());
        assert_eq!(back.links().len(), 1);
    }
}
