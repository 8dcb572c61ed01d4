//! Acceptance checks. One PASS/FAIL line per criterion; the process exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use ctxmatch::eval::{
    benchmark_to_json, evaluate, generate_benchmark, run_ablation_suite, weighted_total, BenchmarkSlice,
    BenchmarkSpec, QueryOutcome,
};
use ctxmatch::gateway::{EmbeddingVector, Gateway, HashEmbedder, SyntheticBackend};
use ctxmatch::graph::{embedding_text, Hypergraph, SimilarityLink};
use ctxmatch::pipeline::{run_match, Artifacts, Mode, PipelineConfig};
use ctxmatch::schema::{mask_catalog, ColumnRef, MatchQuery, SchemaCatalog, Side};
use ctxmatch::tree::{build_context_pack, ContextTree, NodeKind, TreeBuilder, TreeParams};
use ctxmatch::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAUS: [f64; 3] = [0.80, 0.90, 0.95];
const ORACLE_LIMIT: Duration = Duration::from_secs(30);
const TREE_LIMIT: Duration = Duration::from_secs(60);
const PLANTED_LIMIT: Duration = Duration::from_secs(10);
const TOTAL_TOLERANCE: f64 = 0.002;

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let checks: Vec<Check> = vec![
        ("component-oracle equivalence", component_oracle),
        ("tau monotonicity", tau_monotonicity),
        ("tree partition suite", tree_partition_suite),
        ("budget compliance", budget_compliance),
        ("planted ablation", planted_ablation),
        ("time-field scenario", time_field_scenario),
        ("efficiency accounting", efficiency_accounting),
        ("weighted total recomputation", weighted_total_recomputation),
        ("benchmark determinism", benchmark_determinism),
        ("masking soundness", masking_soundness),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let out = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!out.pass);
        println!(
            "{} {name}: {} [{:.2}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

/// Random catalogs (up to 300 columns) with their unit embeddings.
fn oracle_catalogs() -> Vec<(SchemaCatalog, Vec<EmbeddingVector>)> {
    let embedder = HashEmbedder::new(32, 0);
    (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=300);
            let tables = rng.gen_range(1..=4usize).min(n);
            let mut sizes = vec![n / tables; tables];
            sizes[0] += n % tables;
            let cat = random_catalog(seed, Side::Source, &sizes);
            let vecs = cat
                .columns()
                .iter()
                .map(|m| EmbeddingVector::from_raw(embedder.embed_text(&m.description)).unwrap())
                .collect();
            (cat, vecs)
        })
        .collect()
}

fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.values().iter().zip(b.values()) {
        s += x * y;
    }
    s
}

/// Brute-force all-pairs adjacency and iterative DFS components.
fn dfs_components(vecs: &[EmbeddingVector], cols: &[ColumnRef], tau: f64) -> BTreeSet<Vec<ColumnRef>> {
    let n = vecs.len();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && dot(&vecs[i], &vecs[j]) >= tau).collect())
        .collect();
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut stack = vec![s];
        seen[s] = true;
        let mut comp = Vec::new();
        while let Some(v) = stack.pop() {
            comp.push(cols[v].clone());
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort();
        out.insert(comp);
    }
    out
}

fn component_oracle() -> Outcome {
    let start = Instant::now();
    let catalogs = oracle_catalogs();
    let mut mismatches = 0;
    let mut nontrivial = 0;
    for (cat, vecs) in &catalogs {
        let cols: Vec<ColumnRef> = cat.columns().iter().map(|m| m.column.clone()).collect();
        for tau in TAUS {
            let graph = Hypergraph::from_embeddings(Side::Source, tau, cols.clone(), vecs.clone()).unwrap();
            let got: BTreeSet<Vec<ColumnRef>> = graph.groups().iter().map(|g| g.members.clone()).collect();
            let want = dfs_components(vecs, &cols, tau);
            nontrivial += want.iter().filter(|c| c.len() > 1).count();
            if got != want || graph.groups().len() != want.len() {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < ORACLE_LIMIT,
        format!(
            "{mismatches} mismatches over {} (catalog, tau) cases, {nontrivial} multi-member groups, {:.2}s (limit {}s)",
            catalogs.len() * TAUS.len(),
            elapsed.as_secs_f64(),
            ORACLE_LIMIT.as_secs()
        ),
    )
}

fn tau_monotonicity() -> Outcome {
    let mut violations = 0;
    let mut comparisons = 0;
    for (cat, vecs) in oracle_catalogs() {
        let cols: Vec<ColumnRef> = cat.columns().iter().map(|m| m.column.clone()).collect();
        let graphs: Vec<Hypergraph> = TAUS
            .iter()
            .map(|&t| Hypergraph::from_embeddings(Side::Source, t, cols.clone(), vecs.clone()).unwrap())
            .collect();
        for lo in 0..graphs.len() {
            for hi in lo + 1..graphs.len() {
                comparisons += 1;
                let key = |l: &SimilarityLink| (l.a.clone(), l.b.clone());
                let lo_links: BTreeSet<_> = graphs[lo].links().iter().map(key).collect();
                if graphs[hi].links().iter().any(|l| !lo_links.contains(&key(l))) {
                    violations += 1;
                }
                // every stricter group lies inside one looser group
                for g in graphs[hi].groups() {
                    let owner = graphs[lo].group_of(&g.members[0]).unwrap();
                    if g.members.iter().any(|m| !owner.contains(m)) {
                        violations += 1;
                    }
                }
            }
        }
    }
    verdict(
        violations == 0,
        format!("{violations} violations over {comparisons} tau pairs"),
    )
}

fn kind_rank(kind: NodeKind) -> u8 {
    match kind {
        NodeKind::ColumnLeaf | NodeKind::GroupLeaf => 0,
        NodeKind::WithinTable => 1,
        NodeKind::TableRoot => 2,
        NodeKind::Cluster => 3,
        NodeKind::DbRoot => 4,
    }
}

/// Violations of coverage, span tiling, leaf size and lineage nesting.
fn tree_violations(tree: &ContextTree, cat: &SchemaCatalog, leaf_budget: usize) -> Vec<String> {
    let mut bad = Vec::new();
    if let Err(e) = tree.check_coverage(cat) {
        bad.push(format!("coverage: {e}"));
    }
    let mut seen: HashMap<&ColumnRef, usize> = HashMap::new();
    for leaf in tree.leaves() {
        if leaf.members.is_empty() || leaf.members.len() > leaf_budget {
            bad.push(format!("leaf {} has {} members", leaf.id, leaf.members.len()));
        }
        for m in &leaf.members {
            *seen.entry(m).or_default() += 1;
        }
        if let Some(span) = &leaf.span {
            let ords: Vec<usize> = leaf.members.iter().map(|m| m.ordinal).collect();
            let want: Vec<usize> = (span.start..span.end).collect();
            if ords != want || leaf.members.iter().any(|m| m.table_id != span.table_id) {
                bad.push(format!("leaf {} members do not fill its span", leaf.id));
            }
        }
    }
    for meta in cat.columns() {
        if seen.get(&meta.column) != Some(&1) {
            bad.push(format!("{} appears {:?} times", meta.column, seen.get(&meta.column)));
        }
    }
    for node in tree.nodes() {
        let (Some(span), false) = (&node.span, node.kind.is_leaf()) else {
            continue;
        };
        let mut cursor = span.start;
        for c in &node.children {
            match &tree.node(*c).span {
                Some(cs) if cs.table_id == span.table_id && cs.start == cursor && cs.end > cs.start => cursor = cs.end,
                _ => bad.push(format!("children of {} do not tile its span", node.id)),
            }
        }
        if cursor != span.end {
            bad.push(format!("children of {} stop at {cursor}, span ends at {}", node.id, span.end));
        }
    }
    for meta in cat.columns() {
        let Ok(lineage) = tree.lineage(&meta.column) else {
            bad.push(format!("no lineage for {}", meta.column));
            continue;
        };
        if lineage.last().map(|n| n.id) != Some(tree.root()) {
            bad.push(format!("lineage of {} misses the root", meta.column));
        }
        for w in lineage.windows(2) {
            let (child, parent) = (w[0], w[1]);
            if tree.depth(parent.id) + 1 != tree.depth(child.id) || kind_rank(parent.kind) < kind_rank(child.kind) {
                bad.push(format!("lineage step {} -> {} is not monotone", child.id, parent.id));
            }
            if let (Some(cs), Some(ps)) = (&child.span, &parent.span) {
                if cs.table_id != ps.table_id || cs.start < ps.start || cs.end > ps.end {
                    bad.push(format!("span of {} escapes its parent {}", child.id, parent.id));
                }
            }
        }
    }
    bad
}

fn tree_partition_suite() -> Outcome {
    let start = Instant::now();
    let params = TreeParams::default();
    let mut violations = Vec::new();
    let mut columns = 0;
    let mut largest = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut sizes: Vec<usize> = (0..rng.gen_range(1..=3))
            .map(|_| (2500f64.powf(rng.gen_range(0.0..1.0f64))).round().clamp(1.0, 2500.0) as usize)
            .collect();
        if seed == 0 {
            sizes = vec![1, 2500];
        }
        let cat = random_catalog(seed, Side::Source, &sizes);
        columns += cat.len();
        largest = largest.max(*sizes.iter().max().unwrap());
        let gw = synthetic_gateway(seed);
        match TreeBuilder::new(&gw, params.clone()).build(&cat) {
            Ok(tree) => violations.extend(
                tree_violations(&tree, &cat, params.leaf_budget)
                    .into_iter()
                    .map(|v| format!("seed {seed}: {v}")),
            ),
            Err(e) => violations.push(format!("seed {seed}: build failed: {e}")),
        }
    }
    let elapsed = start.elapsed();
    verdict(
        violations.is_empty() && elapsed < TREE_LIMIT,
        format!(
            "{} violations over 50 seeds ({columns} columns, largest table {largest}), {:.2}s (limit {}s){}",
            violations.len(),
            elapsed.as_secs_f64(),
            TREE_LIMIT.as_secs(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

fn budget_compliance() -> Outcome {
    let params = TreeParams {
        window: 40,
        fan_out: 3,
        min_group: 2,
        leaf_budget: 30,
        cluster_threshold: 1.99,
        ..TreeParams::default()
    };
    let cat = random_catalog(7, Side::Target, &[240, 120, 60]);
    let gw = synthetic_gateway(7);
    let tree = match TreeBuilder::new(&gw, params).build(&cat) {
        Ok(t) => t,
        Err(e) => return verdict(false, format!("tree build failed: {e}")),
    };
    let depth = tree.height() - 1;
    if depth != 5 {
        return verdict(false, format!("fixture tree has depth {depth}, want 5"));
    }
    let mut budgets: Vec<usize> = Vec::new();
    let mut b = 1.0f64;
    while b <= 1e5 {
        budgets.push(b as usize);
        b *= 1.07;
    }
    budgets.push(100_000);
    let root_summary = tree.node(tree.root()).summary.clone();
    let mut violations = Vec::new();
    let mut packs = 0;
    let deep: Vec<&ColumnRef> = cat
        .columns()
        .iter()
        .map(|m| &m.column)
        .filter(|c| tree.lineage(c).map(|l| l.len() == depth + 1).unwrap_or(false))
        .step_by(5)
        .collect();
    for column in &deep {
        let required = match build_context_pack(&tree, &cat, column, 0, 3) {
            Err(Error::BudgetTooSmall { required, .. }) => required,
            other => {
                violations.push(format!("{column}: zero budget gave {other:?}"));
                continue;
            }
        };
        let leaf_summary = tree.lineage(column).unwrap()[0].summary.clone();
        let sweep = (required..required + 400).chain(budgets.iter().copied().filter(|&b| b >= required));
        for budget in sweep {
            packs += 1;
            match build_context_pack(&tree, &cat, column, budget, 3) {
                Ok(p) => {
                    let kept: Vec<&str> = p.lineage_summaries.iter().map(|(_, s)| s.as_str()).collect();
                    if p.rendered.chars().count() > budget {
                        violations.push(format!("{column} at {budget}: {} chars", p.rendered.chars().count()));
                    }
                    let collapse = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
                    if kept.first() != Some(&collapse(&leaf_summary).as_str())
                        || kept.last() != Some(&collapse(&root_summary).as_str())
                    {
                        violations.push(format!("{column} at {budget}: leaf or root summary dropped"));
                    }
                }
                Err(e) => violations.push(format!("{column} at {budget}: {e}")),
            }
        }
        if build_context_pack(&tree, &cat, column, required - 1, 3).is_ok() {
            violations.push(format!("{column}: accepted a budget below the minimum"));
        }
    }
    verdict(
        violations.is_empty() && !deep.is_empty(),
        format!(
            "{} violations over {packs} packs for {} columns at depth {depth}{}",
            violations.len(),
            deep.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

struct Built {
    trees: [ContextTree; 2],
    graphs: [Hypergraph; 2],
}

fn build_all(gw: &Gateway, source: &SchemaCatalog, target: &SchemaCatalog, taus: [f64; 2]) -> ctxmatch::Result<Built> {
    let params = TreeParams::default();
    Ok(Built {
        trees: [
            TreeBuilder::new(gw, params.clone()).build(source)?,
            TreeBuilder::new(gw, params).build(target)?,
        ],
        graphs: [
            Hypergraph::build(source, gw, taus[0], true)?,
            Hypergraph::build(target, gw, taus[1], true)?,
        ],
    })
}

fn artifacts<'a>(source: &'a SchemaCatalog, target: &'a SchemaCatalog, b: &'a Built) -> Artifacts<'a> {
    Artifacts {
        source,
        target,
        source_tree: Some(&b.trees[0]),
        target_tree: Some(&b.trees[1]),
        source_graph: Some(&b.graphs[0]),
        target_graph: Some(&b.graphs[1]),
    }
}

fn planted_ablation() -> Outcome {
    let start = Instant::now();
    let fx = planted(5, 30);
    let gw = scripted_gateway(fx.script.clone(), 512);
    let built = match build_all(&gw, &fx.source, &fx.target, [0.9, 0.9]) {
        Ok(b) => b,
        Err(e) => return verdict(false, format!("artifact build failed: {e}")),
    };
    let confusable = built.graphs[1].groups().iter().filter(|g| g.len() == 2).count();
    let slices = [BenchmarkSlice {
        name: "planted".into(),
        queries: fx.queries.clone(),
    }];
    let art = artifacts(&fx.source, &fx.target, &built);
    let table = match run_ablation_suite(&slices, &[Mode::Full, Mode::LlmLocal], &PipelineConfig::default(), &art, &gw)
    {
        Ok(t) => t,
        Err(e) => return verdict(false, format!("suite failed: {e}")),
    };
    let acc = |mode: Mode| {
        let m = table.modes.iter().position(|x| *x == mode).unwrap();
        table.cells[0][m].acc_at_1
    };
    let (full, local) = (acc(Mode::Full), acc(Mode::LlmLocal));
    let elapsed = start.elapsed();
    verdict(
        fx.target.len() == 30 && confusable == 5 && full == 1.0 && local == 0.5 && elapsed < PLANTED_LIMIT,
        format!(
            "full {full:.2} (want 1.00), llm_local {local:.2} (want 0.50), {confusable} planted groups, {:.2}s (limit {}s)",
            elapsed.as_secs_f64(),
            PLANTED_LIMIT.as_secs()
        ),
    )
}

fn time_field_scenario() -> Outcome {
    let fx = time_fields();
    let gw = scripted_gateway(fx.script.clone(), 256);
    let built = match build_all(&gw, &fx.source, &fx.target, [0.7, 0.9]) {
        Ok(b) => b,
        Err(e) => return verdict(false, format!("artifact build failed: {e}")),
    };
    let chart = &fx.query.source;
    let group = built.graphs[0].source_confusable_set(chart, true);
    let names: Vec<&str> = group
        .members
        .iter()
        .map(|m| fx.source.column(m).unwrap().raw_name.as_str())
        .collect();
    let art = artifacts(&fx.source, &fx.target, &built);
    let pick = |mode: Mode| {
        run_match(&fx.query, &PipelineConfig::for_mode(mode), &art, &gw)
            .map(|r| fx.target.column(&r.chosen).unwrap().raw_name.clone())
            .unwrap_or_else(|e| format!("error: {e}"))
    };
    let (full, local) = (pick(Mode::Full), pick(Mode::LlmLocal));
    verdict(
        names == ["CHARTTIME", "STORETIME"] && full == "observation_time" && local == "recorded_time",
        format!("source group {names:?}; full picks {full}, llm_local picks {local}"),
    )
}

fn efficiency_accounting() -> Outcome {
    let fx = planted(10, 30);
    let gw = scripted_gateway(fx.script.clone(), 512);
    let built = match build_all(&gw, &fx.source, &fx.target, [0.9, 0.9]) {
        Ok(b) => b,
        Err(e) => return verdict(false, format!("artifact build failed: {e}")),
    };
    let art = artifacts(&fx.source, &fx.target, &built);
    let mut lines = Vec::new();
    let mut pass = fx.queries.len() == 20;
    for mode in [Mode::Full, Mode::LlmLocal, Mode::EmbedTop1] {
        let before = gw.usage();
        let config = PipelineConfig::for_mode(mode);
        let results: Vec<_> = fx.queries.iter().map(|q| run_match(q, &config, &art, &gw)).collect();
        let after = gw.usage();
        let Ok(results) = results.into_iter().collect::<Result<Vec<_>, _>>() else {
            return verdict(false, format!("{mode}: a query failed"));
        };
        let trace_tokens: u64 = results.iter().map(|r| r.trace.total_tokens).sum();
        let trace_calls: u64 = results.iter().map(|r| r.trace.llm_calls).sum();
        let gateway_tokens = after.total_tokens() - before.total_tokens();
        let gateway_calls = after.calls - before.calls;
        pass &= trace_tokens == gateway_tokens && trace_calls == gateway_calls;
        if mode == Mode::EmbedTop1 {
            pass &= trace_tokens == 0 && trace_calls == 0;
        }
        let hits: u64 = results.iter().map(|r| r.trace.cache_hits).sum();
        lines.push(format!(
            "{mode}: traces {trace_tokens} tokens/{trace_calls} calls vs gateway {gateway_tokens}/{gateway_calls} ({hits} cache hits)"
        ));
    }
    verdict(pass, lines.join("; "))
}

fn weighted_total_recomputation() -> Outcome {
    // four slices with their sizes and top-1 accuracies; the reported total is 0.935
    let slices = [(12, 0.917), (28, 0.964), (32, 0.906), (5, 1.000)];
    let total = weighted_total(&slices);
    let expected = 0.935;

    // the same number through evaluate(): rows marked correct per slice
    let mut rows_total = 0.0;
    let mut n_total = 0usize;
    for (n, acc) in slices {
        let hits = (n as f64 * acc).round() as usize;
        let target = catalog(Side::Target, vec![table("t", true, vec![("a".into(), String::new()), ("b".into(), String::new())])]);
        let source = catalog(
            Side::Source,
            vec![table("s", true, (0..n).map(|i| (format!("q{i}"), String::new())).collect())],
        );
        let a = target.columns()[0].column.clone();
        let b = target.columns()[1].column.clone();
        let queries: Vec<MatchQuery> = source
            .columns()
            .iter()
            .map(|m| MatchQuery {
                source: m.column.clone(),
                shortlist: vec![a.clone(), b.clone()],
                ground_truth: Some(a.clone()),
            })
            .collect();
        let outcomes: Vec<QueryOutcome> = queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let chosen = if i < hits { a.clone() } else { b.clone() };
                QueryOutcome {
                    source: q.source.clone(),
                    result: Ok(ctxmatch::schema::MatchResult {
                        query: q.clone(),
                        ranked: vec![chosen.clone()],
                        chosen,
                        trace: Default::default(),
                    }),
                }
            })
            .collect();
        let report = evaluate("slice", &queries, &outcomes).unwrap();
        rows_total += report.acc_at_1 * n as f64;
        n_total += n;
    }
    let from_rows = rows_total / n_total as f64;
    verdict(
        (total - expected).abs() <= TOTAL_TOLERANCE && (from_rows - expected).abs() <= TOTAL_TOLERANCE,
        format!(
            "weighted total {total:.4}, from scored rows {from_rows:.4}, expected {expected} +/- {TOTAL_TOLERANCE}"
        ),
    )
}

fn benchmark_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let source = random_catalog(200, Side::Source, &[120, 80]);
    let target = random_catalog(201, Side::Target, &[150]);
    let mut verified = BTreeMap::new();
    for m in source.columns() {
        if rng.gen_bool(0.6) {
            let t = &target.columns()[rng.gen_range(0..target.len())];
            verified.insert(m.column.clone(), t.column.clone());
        }
    }
    let spec = BenchmarkSpec {
        pair_tau: 0.85,
        min_separation: 3,
        include_table: false,
        verified,
    };
    let run = || {
        let gw = synthetic_gateway(0);
        generate_benchmark(&spec, &source, &gw).and_then(|q| benchmark_to_json(&q, &source, &target).map(|j| (q, j)))
    };
    let (Ok((queries, first)), Ok((_, second))) = (run(), run()) else {
        return verdict(false, "generation failed");
    };

    // exhaustive oracle over all ordered pairs of the 200-item sequence
    let embedder = HashEmbedder::new(64, 0);
    let vecs: Vec<EmbeddingVector> = source
        .columns()
        .iter()
        .map(|m| EmbeddingVector::from_raw(embedder.embed_text(&embedding_text(&source, m, false))).unwrap())
        .collect();
    let cols = source.columns();
    let mut keep = BTreeSet::new();
    let mut pairs = 0;
    for i in 0..cols.len() {
        for j in 0..cols.len() {
            if j <= i || j - i - 1 < spec.min_separation || dot(&vecs[i], &vecs[j]) < spec.pair_tau {
                continue;
            }
            pairs += 1;
            if spec.verified.contains_key(&cols[i].column) && spec.verified.contains_key(&cols[j].column) {
                keep.insert(i);
                keep.insert(j);
            }
        }
    }
    let want: Vec<(ColumnRef, ColumnRef)> = keep
        .iter()
        .map(|&i| (cols[i].column.clone(), spec.verified[&cols[i].column].clone()))
        .collect();
    let got: Vec<(ColumnRef, ColumnRef)> = queries
        .iter()
        .map(|q| (q.source.clone(), q.ground_truth.clone().unwrap()))
        .collect();
    verdict(
        cols.len() == 200 && first == second && got == want && !want.is_empty(),
        format!(
            "{} queries from {pairs} similar pairs; identical bytes: {}; oracle agrees: {}",
            got.len(),
            first == second,
            got == want
        ),
    )
}

/// Names that reference each other in their descriptions, some of them
/// prefixes of others.
fn cross_referenced(side: Side, prefix: &str, tables: usize, per_table: usize) -> SchemaCatalog {
    let stems = ["dose", "dose_total", "adm_dt", "adm_dt_local", "bp_sys", "bp_dia", "wt_kg", "ht_cm", "inc_hh", "inc"];
    let name = |k: usize| format!("{prefix}{}_{}", stems[k % stems.len()], k / stems.len());
    let total = tables * per_table;
    let tables = (0..tables)
        .map(|t| {
            let cols = (0..per_table)
                .map(|i| {
                    let k = t * per_table + i;
                    let desc = format!(
                        "{} value, derived from {} and checked against {} in the {} table",
                        stems[k % stems.len()].replace('_', " "),
                        name((k + 1) % total),
                        name((k + 7) % total),
                        if k.is_multiple_of(2) { "visit" } else { "claims" }
                    );
                    (name(k), desc)
                })
                .collect();
            table(&format!("{prefix}tab{t}"), true, cols)
        })
        .collect();
    catalog(side, tables)
}

fn masking_soundness() -> Outcome {
    let raw_source = cross_referenced(Side::Source, "s_", 2, 15);
    let raw_target = cross_referenced(Side::Target, "t_", 1, 20);
    let identifiers: Vec<String> = raw_source
        .columns()
        .iter()
        .chain(raw_target.columns())
        .map(|m| m.raw_name.clone())
        .collect();
    let source = mask_catalog(&raw_source);
    let target = mask_catalog(&raw_target);

    let chat = Arc::new(RecordingChat::new(Arc::new(SyntheticBackend::new(3))));
    let embed = Arc::new(RecordingEmbedder::new(64));
    let gw = Gateway::new(chat.clone(), embed.clone());
    let params = TreeParams {
        window: 10,
        leaf_budget: 6,
        min_group: 2,
        fan_out: 3,
        ..TreeParams::default()
    };
    let built = (|| -> ctxmatch::Result<Built> {
        Ok(Built {
            trees: [
                TreeBuilder::new(&gw, params.clone()).build(&source)?,
                TreeBuilder::new(&gw, params.clone()).build(&target)?,
            ],
            graphs: [
                Hypergraph::build(&source, &gw, 0.5, true)?,
                Hypergraph::build(&target, &gw, 0.5, true)?,
            ],
        })
    })();
    let built = match built {
        Ok(b) => b,
        Err(e) => return verdict(false, format!("artifact build failed: {e}")),
    };
    let art = artifacts(&source, &target, &built);
    let config = PipelineConfig {
        k: 5,
        ..PipelineConfig::for_mode(Mode::Full)
    };
    let mut failures = 0;
    let mut diff_blocks = 0;
    for m in source.columns() {
        let q = MatchQuery {
            source: m.column.clone(),
            shortlist: Vec::new(),
            ground_truth: None,
        };
        match run_match(&q, &config, &art, &gw) {
            Ok(r) => diff_blocks += r.trace.candidate_blocks + usize::from(r.trace.source_block),
            Err(_) => failures += 1,
        }
    }
    let prompts = chat.prompts.lock().unwrap().clone();
    let texts = embed.texts.lock().unwrap().clone();
    let mut leaks = 0;
    let mut example = None;
    for text in prompts.iter().chain(&texts) {
        for id in &identifiers {
            if token_hits(text, id) > 0 {
                leaks += 1;
                example.get_or_insert_with(|| id.clone());
            }
        }
    }
    verdict(
        leaks == 0 && failures == 0 && diff_blocks > 0 && identifiers.len() == 50,
        format!(
            "{leaks} leaks of {} identifiers across {} prompts and {} embedding texts ({diff_blocks} diff blocks, {failures} failed queries){}",
            identifiers.len(),
            prompts.len(),
            texts.len(),
            example.map(|e| format!("; e.g. {e}")).unwrap_or_default()
        ),
    )
}
