#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::time::Duration;

use ctxmatch::gateway::{
    BackendReply, ChatBackend, EmbeddingBackend, Gateway, HashEmbedder, Script, ScriptRule, ScriptedBackend,
    SyntheticBackend,
};
use ctxmatch::schema::{CatalogFile, ColumnFile, MatchQuery, SchemaCatalog, Side, TableFile};
use ctxmatch::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn table(id: &str, ordered: bool, cols: Vec<(String, String)>) -> TableFile {
    TableFile {
        table_id: id.into(),
        name: id.into(),
        description: String::new(),
        ordered,
        columns: cols.into_iter().map(|(n, d)| ColumnFile::new(n, d)).collect(),
    }
}

pub fn catalog(side: Side, tables: Vec<TableFile>) -> SchemaCatalog {
    SchemaCatalog::from_file(CatalogFile { side: None, tables }, side).expect("valid fixture")
}

pub fn hash_gateway(chat: Arc<dyn ChatBackend>, dim: usize) -> Gateway {
    Gateway::new(chat, Arc::new(HashEmbedder::new(dim, 0)))
}

pub fn synthetic_gateway(seed: u64) -> Gateway {
    hash_gateway(Arc::new(SyntheticBackend::new(seed)), 64)
}

pub fn scripted_gateway(script: Script, dim: usize) -> Gateway {
    hash_gateway(Arc::new(ScriptedBackend::new(script)), dim)
}

const VOCAB: &[&str] = &[
    "blood", "pressure", "heart", "rate", "date", "time", "visit", "dose", "drug", "weight", "height", "income",
    "spouse", "wave", "score", "count", "total", "respondent", "hospital", "stay",
];

/// Random ordered catalog; every column text draws from a small vocabulary so
/// near-duplicates are common.
pub fn random_catalog(seed: u64, side: Side, sizes: &[usize]) -> SchemaCatalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables = sizes
        .iter()
        .enumerate()
        .map(|(t, &n)| {
            let cols = (0..n)
                .map(|i| {
                    let words = rng.gen_range(2..6);
                    let desc: Vec<&str> = (0..words).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect();
                    (format!("c{i}"), desc.join(" "))
                })
                .collect();
            table(&format!("t{t}"), true, cols)
        })
        .collect();
    catalog(side, tables)
}

/// Forwards to another backend and keeps every prompt.
pub struct RecordingChat {
    inner: Arc<dyn ChatBackend>,
    pub prompts: Mutex<Vec<String>>,
}

impl RecordingChat {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        RecordingChat {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }
}

impl ChatBackend for RecordingChat {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, prompt: &str, timeout: Duration) -> Result<BackendReply> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        self.inner.complete(prompt, timeout)
    }
}

/// Hash embedder that keeps every input text.
pub struct RecordingEmbedder {
    inner: HashEmbedder,
    pub texts: Mutex<Vec<String>>,
}

impl RecordingEmbedder {
    pub fn new(dim: usize) -> Self {
        RecordingEmbedder {
            inner: HashEmbedder::new(dim, 0),
            texts: Mutex::new(Vec::new()),
        }
    }
}

impl EmbeddingBackend for RecordingEmbedder {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.texts.lock().unwrap().extend(texts.iter().cloned());
        self.inner.embed(texts)
    }
}

/// Planted benchmark: `pairs` confusable target pairs padded with unrelated
/// filler columns to `target_size`, and one source query per pair member.
pub struct Planted {
    pub source: SchemaCatalog,
    pub target: SchemaCatalog,
    pub queries: Vec<MatchQuery>,
    pub script: Script,
}

fn pair_words(tag: &str, n: usize) -> String {
    (0..n).map(|w| format!("{tag}w{w}")).collect::<Vec<_>>().join(" ")
}

/// The decision script answers correctly only when the rendered candidate
/// differentiation carries the planted cue; otherwise it picks the alpha
/// member of the pair.
pub fn planted(pairs: usize, target_size: usize) -> Planted {
    assert!(target_size >= 2 * pairs);
    let mut tcols = Vec::new();
    for p in 0..pairs {
        let desc = pair_words(&format!("p{p}"), 14);
        tcols.push((format!("tgt_alpha_{p}"), desc.clone()));
        tcols.push((format!("tgt_beta_{p}"), desc));
    }
    for f in 0..target_size - 2 * pairs {
        tcols.push((format!("filler_{f}"), pair_words(&format!("f{f}"), 14)));
    }
    let target = catalog(Side::Target, vec![table("readings", true, tcols)]);

    let mut scols = Vec::new();
    for p in 0..pairs {
        scols.push((format!("src_alpha_{p}"), format!("source reading {} alpha", pair_words(&format!("s{p}"), 6))));
        scols.push((format!("src_beta_{p}"), format!("source reading {} beta", pair_words(&format!("s{p}"), 6))));
    }
    let source = catalog(Side::Source, vec![table("observations", true, scols)]);

    let cid = |cat: &SchemaCatalog, table: &str, name: &str| cat.find(table, name).unwrap().cid.to_string();
    let mut queries = Vec::new();
    let mut cue_rules = Vec::new();
    let mut fallback_rules = Vec::new();
    for p in 0..pairs {
        let a = cid(&target, "readings", &format!("tgt_alpha_{p}"));
        let b = cid(&target, "readings", &format!("tgt_beta_{p}"));
        cue_rules.push(ScriptRule::all_of(
            ["TASK: differentiation".to_string(), "SIDE: target".into(), format!("MEMBERS: {a}, {b}\n")],
            format!("Summary: planted pair {p}.\n- cid {a}: planted cue alpha-{p} end\n- cid {b}: planted cue beta-{p} end"),
        ));
        for (variant, right) in [("alpha", &a), ("beta", &b)] {
            cue_rules.push(ScriptRule::all_of(
                [
                    "TASK: forced-choice".to_string(),
                    format!("Query column: name [src_{variant}_{p}]"),
                    format!("cid {right}: planted cue {variant}-{p} end"),
                ],
                format!("The cue settles it.\nANSWER: {right}"),
            ));
        }
        fallback_rules.push(ScriptRule::all_of(
            ["TASK: forced-choice".to_string(), format!("- cid {a}: name [tgt_alpha_{p}]")],
            format!("Both fit; taking the first.\nANSWER: {a}"),
        ));
        for variant in ["alpha", "beta"] {
            let s = source.find("observations", &format!("src_{variant}_{p}")).unwrap();
            let t = target.find("readings", &format!("tgt_{variant}_{p}")).unwrap();
            let other = if variant == "alpha" { "beta" } else { "alpha" };
            let o = target.find("readings", &format!("tgt_{other}_{p}")).unwrap();
            let mut shortlist = vec![t.column.clone(), o.column.clone()];
            shortlist.sort();
            queries.push(MatchQuery {
                source: s.column.clone(),
                shortlist,
                ground_truth: Some(t.column.clone()),
            });
        }
    }
    let mut rules = cue_rules;
    rules.push(ScriptRule::all_of(
        ["TASK: differentiation", "SIDE: source"],
        "Summary: two source readings of the same instrument.",
    ));
    rules.extend(fallback_rules);
    let script = Script::new(rules).with_default("SUMMARY: planted readings.");
    Planted {
        source,
        target,
        queries,
        script,
    }
}

/// The CHARTTIME / STORETIME example: two timestamps of one charted
/// observation and two target candidates, observed versus recorded.
pub struct TimeFields {
    pub source: SchemaCatalog,
    pub target: SchemaCatalog,
    pub query: MatchQuery,
    pub observation_time: ctxmatch::schema::ColumnRef,
    pub recorded_time: ctxmatch::schema::ColumnRef,
    pub script: Script,
}

pub const STORETIME_CUE: &str = "STORETIME records when an observation was entered, not when it was made";

pub fn time_fields() -> TimeFields {
    let s = |n: &str, d: &str| (n.to_string(), d.to_string());
    let source = catalog(
        Side::Source,
        vec![table(
            "chartevents",
            true,
            vec![
                s("CHARTTIME", "records the time at which an observation was made"),
                s(
                    "STORETIME",
                    "records the time at which an observation was manually input or manually validated",
                ),
                s("VALUENUM", "numeric value of the charted item"),
            ],
        )],
    );
    let target = catalog(
        Side::Target,
        vec![table(
            "measurement",
            true,
            vec![
                s("recorded_time", "time the observation was recorded or entered"),
                s("observation_time", "time the observation was made"),
                s("value_as_number", "numeric result of the measurement"),
            ],
        )],
    );
    let chart = source.find("chartevents", "CHARTTIME").unwrap();
    let store = source.find("chartevents", "STORETIME").unwrap();
    let obs = target.find("measurement", "observation_time").unwrap();
    let rec = target.find("measurement", "recorded_time").unwrap();
    let script = Script::new(vec![
        ScriptRule::all_of(
            ["TASK: differentiation", "SIDE: source"],
            format!(
                "Summary: Two timestamps of one charted observation.\n- source cid {}: when the observation was made\n- source cid {}: {STORETIME_CUE}",
                chart.cid, store.cid
            ),
        ),
        ScriptRule::all_of(
            ["TASK: differentiation", "SIDE: target"],
            format!(
                "Summary: Two time fields.\n- cid {}: recorded or entered\n- cid {}: made",
                rec.cid, obs.cid
            ),
        ),
        ScriptRule::all_of(
            ["TASK: forced-choice".to_string(), STORETIME_CUE.to_string()],
            format!("STORETIME is the entry time, so CHARTTIME is when it was made.\nANSWER: {}", obs.cid),
        ),
        ScriptRule::contains("TASK: forced-choice", format!("Recorded looks right.\nANSWER: {}", rec.cid)),
    ])
    .with_default("SUMMARY: charted observation times.");
    let query = MatchQuery {
        source: chart.column.clone(),
        shortlist: vec![obs.column.clone(), rec.column.clone()],
        ground_truth: Some(obs.column.clone()),
    };
    TimeFields {
        observation_time: obs.column.clone(),
        recorded_time: rec.column.clone(),
        source,
        target,
        query,
        script,
    }
}

/// Whole-token occurrences of `needle`, with `_` and alphanumerics as token
/// characters. Independent of the masking code.
pub fn token_hits(haystack: &str, needle: &str) -> usize {
    let is_tok = |c: char| c.is_alphanumeric() || c == '_';
    let mut hits = 0;
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before = haystack[..start].chars().next_back();
        let after = haystack[end..].chars().next();
        if !before.is_some_and(is_tok) && !after.is_some_and(is_tok) {
            hits += 1;
        }
        from = start + needle.len().max(1);
    }
    hits
}
