//! Benchmark generation, forced-choice scoring and ablation reports.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{EmbeddingVector, Gateway};
use crate::graph::embedding_text;
use crate::pipeline::{run_match, Artifacts, Mode, PipelineConfig};
use crate::schema::{Cid, ColumnRef, MatchQuery, MatchResult, SchemaCatalog};

/// Rules for picking context-stress queries from an ordered source catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    /// Cosine at or above which two source columns count as similar.
    pub pair_tau: f64,
    /// Minimum number of items between the two members of a pair.
    pub min_separation: usize,
    /// Append the table name to embedding texts.
    pub include_table: bool,
    /// Known source-to-target correspondences.
    pub verified: BTreeMap<ColumnRef, ColumnRef>,
}

/// Spec file layout; columns are named by table id and raw column name.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SpecFile {
    pub pair_tau: f64,
    pub min_separation: usize,
    #[serde(default = "yes")]
    pub include_table: bool,
    pub verified: Vec<VerifiedMatch>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedMatch {
    pub source_table: String,
    pub source_column: String,
    pub target_table: String,
    pub target_column: String,
}

impl BenchmarkSpec {
    pub fn from_file(file: &SpecFile, source: &SchemaCatalog, target: &SchemaCatalog) -> Result<Self> {
        let resolve = |cat: &SchemaCatalog, table: &str, column: &str| {
            cat.find(table, column)
                .map(|m| m.column.clone())
                .ok_or_else(|| Error::UnknownColumn(format!("{table}.{column}")))
        };
        let verified = file
            .verified
            .iter()
            .map(|v| {
                Ok((
                    resolve(source, &v.source_table, &v.source_column)?,
                    resolve(target, &v.target_table, &v.target_column)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(BenchmarkSpec {
            pair_tau: file.pair_tau,
            min_separation: file.min_separation,
            include_table: file.include_table,
            verified,
        })
    }
}

/// Pairs `(i, j)`, `i < j`, of sequence positions whose cosine is at least
/// `tau` and that have at least `min_separation` items between them.
pub fn similar_pairs(vectors: &[EmbeddingVector], tau: f64, min_separation: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            if j - i > min_separation && vectors[i].cosine(&vectors[j]) >= tau {
                out.push((i, j));
            }
        }
    }
    out
}

/// Queries from pairs whose members both have verified matches, one per
/// distinct source column, in catalog order.
pub fn queries_from_pairs(
    pairs: &[(usize, usize)],
    columns: &[ColumnRef],
    verified: &BTreeMap<ColumnRef, ColumnRef>,
) -> Vec<MatchQuery> {
    let mut keep = BTreeSet::new();
    for &(i, j) in pairs {
        if verified.contains_key(&columns[i]) && verified.contains_key(&columns[j]) {
            keep.insert(i);
            keep.insert(j);
        }
    }
    keep.into_iter()
        .map(|i| MatchQuery {
            source: columns[i].clone(),
            shortlist: Vec::new(),
            ground_truth: Some(verified[&columns[i]].clone()),
        })
        .collect()
}

/// Build the benchmark. Similarity uses the gateway's embedder over the
/// catalog's column texts. No qualifying pair gives an empty list.
pub fn generate_benchmark(spec: &BenchmarkSpec, source: &SchemaCatalog, gateway: &Gateway) -> Result<Vec<MatchQuery>> {
    let texts: Vec<String> = source
        .columns()
        .iter()
        .map(|m| embedding_text(source, m, spec.include_table))
        .collect();
    let vectors = gateway.embed_batch(&texts)?;
    let columns: Vec<ColumnRef> = source.columns().iter().map(|m| m.column.clone()).collect();
    let pairs = similar_pairs(&vectors, spec.pair_tau, spec.min_separation);
    let queries = queries_from_pairs(&pairs, &columns, &spec.verified);
    if queries.is_empty() {
        log::warn!("benchmark is empty: no qualifying pairs");
    }
    Ok(queries)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct BenchmarkEntry {
    source: Cid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shortlist: Option<Vec<Cid>>,
    truth: Cid,
}

/// Benchmark file: a JSON list of `{source, shortlist?, truth}` by CID.
pub fn benchmark_to_json(queries: &[MatchQuery], source: &SchemaCatalog, target: &SchemaCatalog) -> Result<String> {
    let entries = queries
        .iter()
        .map(|q| {
            let truth = q
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::InvalidParams(format!("query {} has no ground truth", q.source)))?;
            Ok(BenchmarkEntry {
                source: source.require(&q.source)?.cid,
                shortlist: (!q.shortlist.is_empty())
                    .then(|| q.shortlist.iter().map(|c| target.require(c).map(|m| m.cid)).collect::<Result<_>>())
                    .transpose()?,
                truth: target.require(truth)?.cid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string_pretty(&entries)?)
}

pub fn benchmark_from_json(text: &str, source: &SchemaCatalog, target: &SchemaCatalog) -> Result<Vec<MatchQuery>> {
    let entries: Vec<BenchmarkEntry> = serde_json::from_str(text)?;
    let lookup = |cat: &SchemaCatalog, cid: Cid| {
        cat.by_cid(cid)
            .map(|m| m.column.clone())
            .ok_or_else(|| Error::UnknownColumn(format!("{} {cid}", cat.side())))
    };
    entries
        .into_iter()
        .map(|e| {
            Ok(MatchQuery {
                source: lookup(source, e.source)?,
                shortlist: e
                    .shortlist
                    .unwrap_or_default()
                    .into_iter()
                    .map(|c| lookup(target, c))
                    .collect::<Result<_>>()?,
                ground_truth: Some(lookup(target, e.truth)?),
            })
        })
        .collect()
}

/// Outcome of one query; errors are kept as text and scored as misses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub source: ColumnRef,
    pub result: std::result::Result<MatchResult, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source: ColumnRef,
    pub truth: Option<ColumnRef>,
    pub chosen: Option<ColumnRef>,
    pub correct: bool,
    pub truth_rank: Option<usize>,
    pub llm_calls: u64,
    pub tokens: u64,
    pub latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
    pub acc_at_1: f64,
    pub acc_at_3: f64,
    pub acc_at_5: f64,
    pub mean_llm_calls: f64,
    pub mean_tokens: f64,
    pub mean_latency: f64,
}

impl EvalReport {
    fn from_rows(label: impl Into<String>, rows: Vec<EvalRow>) -> Self {
        let n = rows.len();
        let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
        let mean = |f: &dyn Fn(&EvalRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let within = |k: usize| rows.iter().filter(|r| r.truth_rank.is_some_and(|t| t <= k)).count();
        EvalReport {
            label: label.into(),
            acc_at_1: frac(within(1)),
            acc_at_3: frac(within(3)),
            acc_at_5: frac(within(5)),
            mean_llm_calls: mean(&|r| r.llm_calls as f64),
            mean_tokens: mean(&|r| r.tokens as f64),
            mean_latency: mean(&|r| r.latency),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fraction of queries whose truth is within the first `k` ranks.
    pub fn accuracy_at(&self, k: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let hits = self.rows.iter().filter(|r| r.truth_rank.is_some_and(|t| t <= k)).count();
        hits as f64 / self.rows.len() as f64
    }
}

/// Score outcomes against ground truth. Every query needs exactly one outcome.
pub fn evaluate(label: &str, queries: &[MatchQuery], outcomes: &[QueryOutcome]) -> Result<EvalReport> {
    let by_source: BTreeMap<&ColumnRef, &QueryOutcome> = outcomes.iter().map(|o| (&o.source, o)).collect();
    let rows = queries
        .iter()
        .map(|q| {
            let outcome = by_source
                .get(&q.source)
                .ok_or_else(|| Error::MissingResult(q.source.to_string()))?;
            Ok(match &outcome.result {
                Ok(r) => EvalRow {
                    source: q.source.clone(),
                    truth: q.ground_truth.clone(),
                    chosen: Some(r.chosen.clone()),
                    correct: q.ground_truth.as_ref() == Some(&r.chosen),
                    truth_rank: q
                        .ground_truth
                        .as_ref()
                        .and_then(|t| r.ranked.iter().position(|c| c == t))
                        .map(|p| p + 1),
                    llm_calls: r.trace.llm_calls,
                    tokens: r.trace.total_tokens,
                    latency: r.trace.latency,
                    error: None,
                },
                Err(e) => EvalRow {
                    source: q.source.clone(),
                    truth: q.ground_truth.clone(),
                    chosen: None,
                    correct: false,
                    truth_rank: None,
                    llm_calls: 0,
                    tokens: 0,
                    latency: 0.0,
                    error: Some(e.clone()),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(label, rows))
}

/// `sum(n_i * acc_i) / sum(n_i)`; zero for no queries.
pub fn weighted_total(slices: &[(usize, f64)]) -> f64 {
    let n: usize = slices.iter().map(|s| s.0).sum();
    if n == 0 {
        return 0.0;
    }
    slices.iter().map(|&(k, acc)| k as f64 * acc).sum::<f64>() / n as f64
}

#[derive(Clone, Debug)]
pub struct BenchmarkSlice {
    pub name: String,
    pub queries: Vec<MatchQuery>,
}

/// Reports per slice and mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub modes: Vec<Mode>,
    pub slices: Vec<String>,
    /// `cells[slice][mode]`.
    pub cells: Vec<Vec<EvalReport>>,
}

impl AblationTable {
    /// All slices of one mode pooled into one report.
    pub fn pooled(&self, mode: usize) -> EvalReport {
        let rows = self.cells.iter().flat_map(|s| s[mode].rows.clone()).collect();
        EvalReport::from_rows(self.modes[mode].heading(), rows)
    }

    /// Weighted top-1 accuracy over slices for one mode.
    pub fn total(&self, mode: usize) -> f64 {
        let parts: Vec<(usize, f64)> = self.cells.iter().map(|s| (s[mode].len(), s[mode].acc_at_1)).collect();
        weighted_total(&parts)
    }

    /// Flat records, one per (slice, mode) plus a `Total` record per mode.
    pub fn records(&self) -> Vec<ReportRecord> {
        let mut out = Vec::new();
        let rec = |slice: &str, mode: Mode, r: &EvalReport, acc1: f64| ReportRecord {
            slice: slice.to_string(),
            method: mode.heading().to_string(),
            n: r.len(),
            acc_at_1: acc1,
            acc_at_3: r.acc_at_3,
            acc_at_5: r.acc_at_5,
            llm_calls_per_query: r.mean_llm_calls,
            tokens_per_query: r.mean_tokens,
            latency_s: r.mean_latency,
        };
        for (s, name) in self.slices.iter().enumerate() {
            for (m, mode) in self.modes.iter().enumerate() {
                out.push(rec(name, *mode, &self.cells[s][m], self.cells[s][m].acc_at_1));
            }
        }
        for (m, mode) in self.modes.iter().enumerate() {
            out.push(rec("Total", *mode, &self.pooled(m), self.total(m)));
        }
        out
    }
}

/// Run every mode over the same queries. Per-query errors are recorded as
/// misses; the suite keeps going.
pub fn run_ablation_suite(
    slices: &[BenchmarkSlice],
    modes: &[Mode],
    base: &PipelineConfig,
    art: &Artifacts<'_>,
    gateway: &Gateway,
) -> Result<AblationTable> {
    let mut modes: Vec<Mode> = modes.to_vec();
    modes.sort_by_key(|m| Mode::ALL.iter().position(|x| x == m));
    modes.dedup();
    let mut cells = Vec::new();
    for slice in slices {
        let mut row = Vec::new();
        for &mode in &modes {
            let config = base.with_mode(mode);
            let outcomes: Vec<QueryOutcome> = slice
                .queries
                .par_iter()
                .map(|q| QueryOutcome {
                    source: q.source.clone(),
                    result: run_match(q, &config, art, gateway).map_err(|e| {
                        log::warn!("{mode} query {} failed: {e}", q.source);
                        e.to_string()
                    }),
                })
                .collect();
            row.push(evaluate(mode.heading(), &slice.queries, &outcomes)?);
        }
        cells.push(row);
    }
    Ok(AblationTable {
        modes,
        slices: slices.iter().map(|s| s.name.clone()).collect(),
        cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::InvalidParams(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub slice: String,
    pub method: String,
    pub n: usize,
    pub acc_at_1: f64,
    pub acc_at_3: f64,
    pub acc_at_5: f64,
    pub llm_calls_per_query: f64,
    pub tokens_per_query: f64,
    pub latency_s: f64,
}

pub fn render_report(table: &AblationTable, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in table.records() {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Transport(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Markdown => Ok(render_markdown(table)),
    }
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

fn render_markdown(table: &AblationTable) -> String {
    if table.modes.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    let heads: Vec<&str> = table.modes.iter().map(|m| m.heading()).collect();
    out.push_str(&format!("| Slice | n | {} |\n", heads.join(" | ")));
    out.push_str(&format!("|---|---:|{}\n", "---:|".repeat(heads.len())));
    for (s, name) in table.slices.iter().enumerate() {
        let n = table.cells[s].first().map_or(0, EvalReport::len);
        let accs: Vec<String> = table.cells[s].iter().map(|r| format!("{:.3}", r.acc_at_1)).collect();
        out.push_str(&format!("| {} | {n} | {} |\n", md_escape(name), accs.join(" | ")));
    }
    if table.slices.len() > 1 {
        let n: usize = table.cells.iter().map(|s| s.first().map_or(0, EvalReport::len)).sum();
        let accs: Vec<String> = (0..table.modes.len()).map(|m| format!("{:.3}", table.total(m))).collect();
        out.push_str(&format!("| Total | {n} | {} |\n", accs.join(" | ")));
    }

    out.push_str("\n| Method | LLM calls/query | Tokens/query | Latency (s) |\n|---|---:|---:|---:|\n");
    for m in 0..table.modes.len() {
        let r = table.pooled(m);
        out.push_str(&format!(
            "| {} | {:.2} | {:.0} | {:.2} |\n",
            r.label, r.mean_llm_calls, r.mean_tokens, r.mean_latency
        ));
    }

    out.push_str("\n| Method | acc@1 | acc@3 | acc@5 |\n|---|---:|---:|---:|\n");
    for m in 0..table.modes.len() {
        let r = table.pooled(m);
        out.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} |\n",
            r.label, r.acc_at_1, r.acc_at_3, r.acc_at_5
        ));
    }
    out.push_str(
        "\nRanks after the first list the chosen candidate first, then the remaining candidates \
         by embedding cosine to the query.\n",
    );
    out
}

fn md_escape(text: &str) -> String {
    text.replace('|', "\\|")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Side;

    fn row(rank: Option<usize>) -> EvalRow {
        EvalRow {
            source: ColumnRef::new(Side::Source, "t", 0),
            truth: None,
            chosen: None,
            correct: rank == Some(1),
            truth_rank: rank,
            llm_calls: 1,
            tokens: 10,
            latency: 0.5,
            error: None,
        }
    }

    #[test]
    fn hand_counted_accuracies() {
        let r = EvalReport::from_rows("x", [1, 1, 2, 7].into_iter().map(|k| row(Some(k))).collect());
        assert_eq!((r.acc_at_1, r.acc_at_3, r.acc_at_5), (0.5, 0.75, 0.75));
        assert_eq!(r.accuracy_at(7), 1.0);
    }

    #[test]
    fn weighted_total_of_table_one() {
        let total = weighted_total(&[(12, 0.917), (28, 0.964), (32, 0.906), (5, 1.0)]);
        assert!((total - 0.935).abs() <= 0.002, "{total}");
    }

    #[test]
    fn separation_counts_intervening_items() {
        let onehot = |k: usize| {
            let mut raw = vec![0.0; 50];
            raw[k] = 1.0;
            EmbeddingVector::from_raw(raw).unwrap()
        };
        let mut vecs: Vec<EmbeddingVector> = (0..41).map(onehot).collect();
        vecs[8] = onehot(5);
        assert!(similar_pairs(&vecs, 0.99, 5).is_empty());
        vecs[8] = onehot(8);
        vecs[40] = onehot(5);
        assert_eq!(similar_pairs(&vecs, 0.99, 5), vec![(5, 40)]);
    }
}
