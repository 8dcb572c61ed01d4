//! One forced-choice query end to end.
//!
//! Steps: shortlist (given or by embedding cosine), optional expansion with
//! near-duplicate neighbours, context packs, a source-side differentiation
//! block, candidate differentiation blocks and finally a single decision call.
//! Failures in the auxiliary steps are logged and recorded in the trace; the
//! decision call then runs on the smaller prompt.

mod prompt;

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use prompt::{assemble_final_prompt, parse_choice, parse_shortlist, shortlist_prompt, CandidateView};

use crate::diff::{generate_block, render_blocks, select_groups, DifferentiationBlock};
use crate::error::{Error, Result};
use crate::gateway::{ChatCall, ChatReply, EmbeddingVector, Gateway, Role};
use crate::graph::{embedding_text, Hypergraph};
use crate::schema::{ColumnRef, MatchQuery, MatchResult, SchemaCatalog};
use crate::tree::{build_context_pack, ContextPack, ContextTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoTree,
    NoDiff,
    LlmLocal,
    EmbedTop1,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::EmbedTop1, Mode::LlmLocal, Mode::Full, Mode::NoTree, Mode::NoDiff];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoTree => "no_tree",
            Mode::NoDiff => "no_diff",
            Mode::LlmLocal => "llm_local",
            Mode::EmbedTop1 => "embed_top1",
        }
    }

    /// Column heading in reports.
    pub fn heading(self) -> &'static str {
        match self {
            Mode::Full => "Full",
            Mode::NoTree => "w/o tree",
            Mode::NoDiff => "w/o diff",
            Mode::LlmLocal => "LLM-local",
            Mode::EmbedTop1 => "Embed Top-1",
        }
    }

    pub fn uses_llm(self) -> bool {
        self != Mode::EmbedTop1
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Shortlist size when the query carries no shortlist.
    pub k: usize,
    /// When set, the model picks the `k` shortlist entries from this many
    /// embedding neighbours instead of taking the top `k` directly.
    pub llm_shortlist: Option<usize>,
    pub use_tree: bool,
    pub use_diff: bool,
    pub use_expansion: bool,
    /// Characters per context pack.
    pub pack_budget: usize,
    pub max_relations: usize,
    pub cap_strong: usize,
    pub cap_total: usize,
    pub max_groups: usize,
    pub max_members: usize,
    /// Restrict the source confusable set to the query column's table.
    pub restrict_source_to_table: bool,
    #[serde(with = "secs")]
    pub decision_timeout: Duration,
    #[serde(with = "secs")]
    pub diff_timeout: Duration,
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::for_mode(Mode::Full)
    }
}

impl PipelineConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let (use_tree, use_diff) = match mode {
            Mode::Full => (true, true),
            Mode::NoTree => (false, true),
            Mode::NoDiff => (true, false),
            Mode::LlmLocal | Mode::EmbedTop1 => (false, false),
        };
        PipelineConfig {
            mode,
            k: 20,
            llm_shortlist: None,
            use_tree,
            use_diff,
            use_expansion: use_diff,
            pack_budget: 1500,
            max_relations: crate::tree::DEFAULT_MAX_RELATIONS,
            cap_strong: crate::graph::DEFAULT_CAP_STRONG,
            cap_total: crate::graph::DEFAULT_CAP_TOTAL,
            max_groups: crate::diff::DEFAULT_MAX_GROUPS,
            max_members: crate::diff::DEFAULT_MAX_MEMBERS,
            restrict_source_to_table: true,
            decision_timeout: Role::Decision.default_timeout(),
            diff_timeout: Role::Differentiation.default_timeout(),
        }
    }

    /// Same tuning, flags reset for another mode.
    pub fn with_mode(&self, mode: Mode) -> Self {
        let flags = PipelineConfig::for_mode(mode);
        PipelineConfig {
            mode,
            use_tree: flags.use_tree,
            use_diff: flags.use_diff,
            use_expansion: flags.use_expansion,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        match self.mode {
            Mode::NoTree if self.use_tree => return bad("mode no_tree requires use_tree=false"),
            Mode::NoDiff if self.use_diff => return bad("mode no_diff requires use_diff=false"),
            Mode::LlmLocal | Mode::EmbedTop1 if self.use_tree || self.use_diff => {
                return bad("modes llm_local and embed_top1 use neither tree nor diff")
            }
            _ => {}
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.llm_shortlist.is_some_and(|pool| pool < self.k) {
            return bad("llm_shortlist pool must be at least k");
        }
        if self.decision_timeout.is_zero() || self.diff_timeout.is_zero() {
            return bad("timeouts must be positive");
        }
        Ok(())
    }
}

/// Read-only inputs shared by all queries.
#[derive(Clone, Copy)]
pub struct Artifacts<'a> {
    pub source: &'a SchemaCatalog,
    pub target: &'a SchemaCatalog,
    pub source_tree: Option<&'a ContextTree>,
    pub target_tree: Option<&'a ContextTree>,
    pub source_graph: Option<&'a Hypergraph>,
    pub target_graph: Option<&'a Hypergraph>,
}

impl<'a> Artifacts<'a> {
    pub fn catalogs(source: &'a SchemaCatalog, target: &'a SchemaCatalog) -> Self {
        Artifacts {
            source,
            target,
            source_tree: None,
            target_tree: None,
            source_graph: None,
            target_graph: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub mode: Option<Mode>,
    pub source: Option<ColumnRef>,
    pub shortlist: Vec<ColumnRef>,
    pub candidates: Vec<ColumnRef>,
    pub chosen: Option<ColumnRef>,
    pub llm_calls: u64,
    pub total_tokens: u64,
    pub cache_hits: u64,
    /// Seconds, summed over this query's calls.
    pub latency: f64,
    pub used_tree: bool,
    pub used_diff: bool,
    pub used_expansion: bool,
    pub source_block: bool,
    pub candidate_blocks: usize,
    /// Auxiliary steps that failed and were skipped.
    pub degraded: Vec<String>,
    pub prompt_snapshot: String,
}

impl MatchTrace {
    fn record(&mut self, reply: &ChatReply) {
        self.llm_calls += 1;
        self.total_tokens += reply.billed_tokens();
        self.cache_hits += u64::from(reply.cache_hit);
        self.latency += reply.latency;
    }

    fn degrade(&mut self, step: &str, err: &Error) {
        log::warn!("{step} skipped: {err}");
        self.degraded.push(format!("{step}: {err}"));
    }
}

fn query_embedding(art: &Artifacts<'_>, gateway: &Gateway, s: &ColumnRef) -> Result<EmbeddingVector> {
    if let Some(e) = art.source_graph.and_then(|g| g.embedding(s)) {
        return Ok(e.clone());
    }
    let meta = art.source.require(s)?;
    gateway.embed_one(&embedding_text(art.source, meta, true))
}

/// Top-`k` targets by cosine to the query embedding; ties by column order.
pub fn shortlist(query: &EmbeddingVector, target_graph: &Hypergraph, k: usize) -> Vec<ColumnRef> {
    target_graph.nearest(query, k).into_iter().map(|(c, _)| c).collect()
}

/// Let the model keep `k` of the embedding neighbours in `pool`. An unusable
/// reply falls back to the top `k` of the pool.
fn model_shortlist(
    art: &Artifacts<'_>,
    gateway: &Gateway,
    config: &PipelineConfig,
    s: &ColumnRef,
    pool: &[ColumnRef],
    trace: &mut MatchTrace,
) -> Result<Vec<ColumnRef>> {
    let fallback = || pool.iter().take(config.k).cloned().collect();
    if pool.len() <= config.k {
        return Ok(fallback());
    }
    let prompt = shortlist_prompt(art.source, art.target, art.source.require(s)?, pool, config.k)?;
    let call = ChatCall::new(Role::Decision, prompt).with_timeout(config.decision_timeout);
    match gateway.complete(&call) {
        Ok(reply) => {
            trace.record(&reply);
            let picked = parse_shortlist(&reply.text, pool, art.target, config.k);
            if picked.is_empty() {
                trace.degraded.push("shortlist: reply named no pool column".into());
                Ok(fallback())
            } else {
                Ok(picked)
            }
        }
        Err(e) => {
            trace.degrade("shortlist", &e);
            Ok(fallback())
        }
    }
}

/// Run one query.
pub fn run_match(
    query: &MatchQuery,
    config: &PipelineConfig,
    art: &Artifacts<'_>,
    gateway: &Gateway,
) -> Result<MatchResult> {
    config.validate()?;
    query.validate(art.source, art.target)?;
    let s = &query.source;
    let mut trace = MatchTrace {
        mode: Some(config.mode),
        source: Some(s.clone()),
        ..Default::default()
    };

    let query_vec = match (art.target_graph, query.shortlist.is_empty()) {
        (Some(_), _) => Some(query_embedding(art, gateway, s)?),
        (None, true) => {
            return Err(Error::InvalidParams(
                "query has no shortlist and no target graph was given".into(),
            ))
        }
        (None, false) => None,
    };
    let c0 = if query.shortlist.is_empty() {
        let graph = art.target_graph.expect("checked above");
        let qv = query_vec.as_ref().expect("checked above");
        match config.llm_shortlist.filter(|_| config.mode.uses_llm()) {
            Some(pool) => model_shortlist(art, gateway, config, s, &shortlist(qv, graph, pool), &mut trace)?,
            None => shortlist(qv, graph, config.k),
        }
    } else {
        query.shortlist.clone()
    };
    trace.shortlist = c0.clone();
    let cosine = |c: &ColumnRef| -> f64 {
        match (&query_vec, art.target_graph.and_then(|g| g.embedding(c))) {
            (Some(q), Some(e)) => q.cosine(e),
            _ => f64::NEG_INFINITY,
        }
    };

    if config.mode == Mode::EmbedTop1 {
        let chosen = c0[0].clone();
        let ranked = rank(&chosen, &c0, &cosine, query_vec.is_some());
        trace.candidates = c0;
        trace.chosen = Some(chosen.clone());
        return Ok(MatchResult {
            query: query.clone(),
            chosen,
            ranked,
            trace,
        });
    }

    // step 1: expansion
    let candidates = match (config.use_expansion, art.target_graph) {
        (true, Some(g)) => {
            trace.used_expansion = true;
            g.expand_candidates(&c0, config.cap_strong, config.cap_total)
        }
        (true, None) => {
            trace.degraded.push("expansion: no target graph".into());
            c0.clone()
        }
        _ => c0.clone(),
    };
    trace.candidates = candidates.clone();

    // step 2: context packs
    let mut query_pack = None;
    let mut target_packs: HashMap<ColumnRef, ContextPack> = HashMap::new();
    let mut source_packs: HashMap<ColumnRef, ContextPack> = HashMap::new();
    if config.use_tree {
        trace.used_tree = true;
        let pack = |tree: &ContextTree, cat: &SchemaCatalog, c: &ColumnRef| {
            build_context_pack(tree, cat, c, config.pack_budget, config.max_relations)
        };
        match art.source_tree {
            Some(tree) => match pack(tree, art.source, s) {
                Ok(p) => {
                    source_packs.insert(s.clone(), p.clone());
                    query_pack = Some(p);
                }
                Err(e) => trace.degrade("source pack", &e),
            },
            None => trace.degraded.push("source pack: no source tree".into()),
        }
        match art.target_tree {
            Some(tree) => {
                for c in &candidates {
                    match pack(tree, art.target, c) {
                        Ok(p) => {
                            target_packs.insert(c.clone(), p);
                        }
                        Err(e) => trace.degrade("candidate pack", &e),
                    }
                }
            }
            None => trace.degraded.push("candidate packs: no target tree".into()),
        }
        // packs for source group members, used by the source diff
        if let (Some(tree), Some(graph), true) = (art.source_tree, art.source_graph, config.use_diff) {
            for m in graph.source_confusable_set(s, config.restrict_source_to_table).members {
                if let Entry::Vacant(slot) = source_packs.entry(m) {
                    if let Ok(p) = pack(tree, art.source, slot.key()) {
                        slot.insert(p);
                    }
                }
            }
        }
    }

    // steps 3 and 4: differentiation
    let mut blocks: Vec<DifferentiationBlock> = Vec::new();
    if config.use_diff {
        trace.used_diff = true;
        match art.source_graph {
            Some(graph) => {
                let group = graph.source_confusable_set(s, config.restrict_source_to_table);
                let source_cos = |c: &ColumnRef| -> f64 {
                    match (graph.embedding(s), graph.embedding(c)) {
                        (Some(a), Some(b)) => a.cosine(b),
                        _ => f64::NEG_INFINITY,
                    }
                };
                let selected = select_groups(&[group], &source_cos, 1, config.max_members);
                for g in selected {
                    match generate_block(gateway, art.source, &g, &source_packs, config.diff_timeout) {
                        Ok((block, replies)) => {
                            replies.iter().for_each(|r| trace.record(r));
                            trace.source_block = true;
                            blocks.push(block);
                        }
                        Err(e) => trace.degrade("source diff", &e),
                    }
                }
            }
            None => trace.degraded.push("source diff: no source graph".into()),
        }
        match art.target_graph {
            Some(graph) => {
                let groups = graph.groups_within(&candidates);
                for g in select_groups(&groups, &cosine, config.max_groups, config.max_members) {
                    match generate_block(gateway, art.target, &g, &target_packs, config.diff_timeout) {
                        Ok((block, replies)) => {
                            replies.iter().for_each(|r| trace.record(r));
                            trace.candidate_blocks += 1;
                            blocks.push(block);
                        }
                        Err(e) => trace.degrade("candidate diff", &e),
                    }
                }
            }
            None => trace.degraded.push("candidate diff: no target graph".into()),
        }
    }
    let (source_blocks, candidate_blocks): (Vec<_>, Vec<_>) =
        blocks.into_iter().partition(|b| b.side == crate::schema::Side::Source);

    // step 5: decision
    let query_meta = art.source.require(s)?;
    let views = candidates
        .iter()
        .map(|c| {
            Ok(CandidateView {
                meta: art.target.require(c)?,
                pack: target_packs.get(c),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prompt = assemble_final_prompt(
        art.source,
        art.target,
        query_meta,
        query_pack.as_ref(),
        &render_blocks(&source_blocks),
        &views,
        &render_blocks(&candidate_blocks),
    );
    trace.prompt_snapshot = prompt.clone();

    let mut current = prompt.clone();
    let mut last_err = None;
    let mut chosen = None;
    for _ in 0..2 {
        let reply = gateway.complete(
            &ChatCall::new(Role::Decision, current.clone()).with_timeout(config.decision_timeout),
        )?;
        trace.record(&reply);
        match parse_choice(&reply.text, &candidates, art.target) {
            Ok(c) => {
                chosen = Some(c);
                break;
            }
            Err(e) => {
                log::warn!("decision reply for {s} unusable: {e}");
                last_err = Some(e);
                current = format!("{prompt}\n{}\n", prompt::REMINDER);
            }
        }
    }
    let Some(chosen) = chosen else {
        return Err(Error::DecisionUnparseable {
            reason: last_err.map(|e| e.to_string()).unwrap_or_default(),
            prompt_snapshot: prompt,
        });
    };
    let ranked = rank(&chosen, &candidates, &cosine, query_vec.is_some());
    trace.chosen = Some(chosen.clone());
    Ok(MatchResult {
        query: query.clone(),
        chosen,
        ranked,
        trace,
    })
}

/// `chosen` first, then the other candidates by cosine to the query (ties by
/// column order), or in candidate order when no embeddings are available.
fn rank(
    chosen: &ColumnRef,
    candidates: &[ColumnRef],
    cosine: &dyn Fn(&ColumnRef) -> f64,
    by_cosine: bool,
) -> Vec<ColumnRef> {
    let mut rest: Vec<ColumnRef> = candidates.iter().filter(|c| *c != chosen).cloned().collect();
    if by_cosine {
        rest.sort_by(|a, b| cosine(b).total_cmp(&cosine(a)).then_with(|| a.cmp(b)));
    }
    std::iter::once(chosen.clone()).chain(rest).collect()
}
