//! Context-aware forced-choice schema matching.
//!
//! Offline, the engine builds two artifacts per schema side:
//!
//! - a [`tree::ContextTree`], a hierarchy of natural-language summaries whose
//!   leaves are spans of columns, and
//! - a [`graph::Hypergraph`], whose groups are the connected components of
//!   high-cosine links between column embeddings.
//!
//! Online, [`pipeline::run_match`] takes a source column and a target
//! shortlist, attaches budgeted context packs and contrastive cues for
//! confusable groups, and asks a chat model to pick exactly one target.
//!
//! ```
//! use std::sync::Arc;
//! use ctxmatch::gateway::{Gateway, HashEmbedder, SyntheticBackend};
//! use ctxmatch::graph::Hypergraph;
//! use ctxmatch::pipeline::{run_match, Artifacts, PipelineConfig};
//! use ctxmatch::schema::{CatalogFile, ColumnFile, MatchQuery, SchemaCatalog, Side, TableFile};
//!
//! let table = |id: &str, cols: &[(&str, &str)]| TableFile {
//!     table_id: id.into(),
//!     name: id.into(),
//!     columns: cols.iter().map(|(n, d)| ColumnFile::new(*n, *d)).collect(),
//!     ..Default::default()
//! };
//! let source = SchemaCatalog::from_file(
//!     CatalogFile { side: None, tables: vec![table("visits", &[("bp_sys", "systolic blood pressure")])] },
//!     Side::Source,
//! )?;
//! let target = SchemaCatalog::from_file(
//!     CatalogFile {
//!         side: None,
//!         tables: vec![table("vitals", &[("systolic", "systolic blood pressure"), ("pulse", "heart rate")])],
//!     },
//!     Side::Target,
//! )?;
//! let gateway = Gateway::new(Arc::new(SyntheticBackend::default()), Arc::new(HashEmbedder::default()));
//! let target_graph = Hypergraph::build(&target, &gateway, 0.9, true)?;
//! let artifacts = Artifacts { target_graph: Some(&target_graph), ..Artifacts::catalogs(&source, &target) };
//! let query = MatchQuery { source: source.columns()[0].column.clone(), shortlist: vec![], ground_truth: None };
//! let result = run_match(&query, &PipelineConfig::for_mode("llm_local".parse()?), &artifacts, &gateway)?;
//! assert_eq!(result.trace.llm_calls, 1);
//! assert_eq!(result.ranked.len(), 2);
//! # Ok::<(), ctxmatch::Error>(())
//! ```

pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod graph;
pub mod pipeline;
pub mod protocol;
pub mod schema;
pub mod tree;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/catalogs.md")]
    mod catalogs {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/context-trees.md")]
    mod context_trees {}
    #[doc = include_str!("../../../book/src/similarity-groups.md")]
    mod similarity_groups {}
    #[doc = include_str!("../../../book/src/differentiation.md")]
    mod differentiation {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
