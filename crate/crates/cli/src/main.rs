use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxmatch::config::RunConfig;
use ctxmatch::diff::{generate_block, DifferentiationBlock};
use ctxmatch::eval::{
    benchmark_from_json, benchmark_to_json, generate_benchmark, render_report, run_ablation_suite, AblationTable,
    BenchmarkSlice, BenchmarkSpec, ReportFormat, SpecFile,
};
use ctxmatch::gateway::Gateway;
use ctxmatch::graph::Hypergraph;
use ctxmatch::pipeline::{run_match, Artifacts, Mode};
use ctxmatch::schema::{load_catalog, mask_catalog, read_catalog_file, MatchQuery, SchemaCatalog, Side};
use ctxmatch::tree::{build_context_pack, ContextTree, TreeBuilder};
use ctxmatch::{Error, Result};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "ctxmatch", version, about = "Context-aware forced-choice schema matching")]
struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `synthetic`, `live` or `scripted:<path>`.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Directory for the persistent response cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Replace raw column identifiers with CIDs before anything is built.
    #[arg(long, global = true)]
    mask: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a context tree for one catalog.
    BuildTree(BuildTreeArgs),
    /// Build the similarity hypergraph for one catalog.
    BuildGraph(BuildGraphArgs),
    /// Match source columns and write one trace per query.
    Match(MatchArgs),
    /// Generate, run and report benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Render a saved ablation table.
    Report(ReportArgs),
    /// Generate differentiation blocks for every stored group ahead of time.
    PrecomputeDiffs(PrecomputeArgs),
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Derive queries from a benchmark spec.
    Generate(GenerateArgs),
    /// Run one or more modes over benchmark files and write reports.
    Run(RunArgs),
    /// Render a saved ablation table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct BuildTreeArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the side declared in the catalog file.
    #[arg(long)]
    side: Option<Side>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    leaf_budget: Option<usize>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long)]
    min_group: Option<usize>,
    #[arg(long)]
    switch_budget: Option<usize>,
    /// Cosine-distance cutoff for merging table trees.
    #[arg(long)]
    delta: Option<f64>,
    /// Resume file for partially built catalogs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildGraphArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    side: Option<Side>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct ArtifactArgs {
    #[arg(long)]
    source_catalog: PathBuf,
    #[arg(long)]
    target_catalog: PathBuf,
    /// Tree files; each applies to the side recorded in it.
    #[arg(long)]
    tree: Vec<PathBuf>,
    /// Graph files; each applies to the side recorded in it.
    #[arg(long)]
    graph: Vec<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Context pack budget in characters.
    #[arg(long)]
    budget: Option<usize>,
    /// Let the model pick the shortlist from this many embedding neighbours.
    #[arg(long, value_name = "POOL")]
    llm_shortlist: Option<usize>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[command(flatten)]
    artifacts: ArtifactArgs,
    #[arg(long)]
    mode: Option<Mode>,
    /// Benchmark file with the queries to run.
    #[arg(long, conflicts_with = "column")]
    queries: Option<PathBuf>,
    /// A single source column as `<table_id>.<column name>`.
    #[arg(long)]
    column: Vec<String>,
    /// Trace directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    source_catalog: PathBuf,
    #[arg(long)]
    target_catalog: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    artifacts: ArtifactArgs,
    /// Benchmark files; each becomes one slice named after the file stem.
    #[arg(long, required = true)]
    benchmark: Vec<PathBuf>,
    /// Modes to run, repeated or comma-separated; defaults to all.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<Mode>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// An `ablation.json` written by `bench run`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrecomputeArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long)]
    side: Option<Side>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    if let Some(b) = &cli.backend {
        config.backend = b.clone();
    }
    if let Some(d) = &cli.cache_dir {
        config.cache_dir = Some(d.clone());
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    config.mask |= cli.mask;

    match cli.command {
        Command::BuildTree(args) => build_tree(config, args),
        Command::BuildGraph(args) => build_graph(config, args),
        Command::Match(args) => match_cmd(config, args),
        Command::Bench(BenchCommand::Generate(args)) => bench_generate(config, args),
        Command::Bench(BenchCommand::Run(args)) => bench_run(config, args),
        Command::Bench(BenchCommand::Report(args)) | Command::Report(args) => report(args),
        Command::PrecomputeDiffs(args) => precompute_diffs(config, args),
    }
}

fn start(config: &RunConfig) -> Result<Gateway> {
    config.validate()?;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build_global() {
        log::debug!("worker pool already configured: {e}");
    }
    config.gateway()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `out.json` gets its configuration in `out.run_config.json`.
fn write_config_beside(out: &Path, config: &RunConfig) -> Result<()> {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    write(&out.with_file_name(format!("{stem}.run_config.json")), &config.to_json())
}

fn load_any_side(path: &Path, side: Option<Side>, mask: bool) -> Result<SchemaCatalog> {
    let file = read_catalog_file(path)?;
    let side = side.or(file.side).unwrap_or(Side::Source);
    let catalog = SchemaCatalog::from_file(file, side)?;
    Ok(if mask { mask_catalog(&catalog) } else { catalog })
}

fn load_side(path: &Path, side: Side, mask: bool) -> Result<SchemaCatalog> {
    let catalog = load_catalog(path, side)?;
    Ok(if mask { mask_catalog(&catalog) } else { catalog })
}

fn build_tree(mut config: RunConfig, args: BuildTreeArgs) -> Result<()> {
    let p = &mut config.tree;
    p.window = args.window.unwrap_or(p.window);
    p.leaf_budget = args.leaf_budget.unwrap_or(p.leaf_budget);
    p.fan_out = args.fanout.unwrap_or(p.fan_out);
    p.min_group = args.min_group.unwrap_or(p.min_group);
    p.switch_budget = args.switch_budget.unwrap_or(p.switch_budget);
    p.cluster_threshold = args.delta.unwrap_or(p.cluster_threshold);
    let gateway = start(&config)?;
    let catalog = load_any_side(&args.catalog, args.side, config.mask)?;
    let mut builder = TreeBuilder::new(&gateway, config.tree.clone());
    if let Some(cp) = &args.checkpoint {
        builder = builder.with_checkpoint(cp);
    }
    let tree = builder.build(&catalog)?;
    write(&args.out, &tree.to_json())?;
    write_config_beside(&args.out, &config)?;
    let usage = gateway.usage();
    eprintln!(
        "wrote {} nodes to {} ({} calls, {} tokens)",
        tree.nodes().len(),
        args.out.display(),
        usage.calls,
        usage.total_tokens()
    );
    Ok(())
}

fn build_graph(mut config: RunConfig, args: BuildGraphArgs) -> Result<()> {
    let catalog = load_any_side(&args.catalog, args.side, config.mask)?;
    let tau = args.tau.unwrap_or(match catalog.side() {
        Side::Source => config.graph.tau_source,
        Side::Target => config.graph.tau_target,
    });
    match catalog.side() {
        Side::Source => config.graph.tau_source = tau,
        Side::Target => config.graph.tau_target = tau,
    }
    let gateway = start(&config)?;
    let graph = Hypergraph::build(&catalog, &gateway, tau, config.graph.include_table)?;
    write(&args.out, &graph.to_json())?;
    write_config_beside(&args.out, &config)?;
    let confusable = graph.groups().iter().filter(|g| g.len() >= 2).count();
    eprintln!(
        "wrote {} links and {} confusable groups to {}",
        graph.links().len(),
        confusable,
        args.out.display()
    );
    Ok(())
}

/// Catalogs plus whatever trees and graphs the run needs, loaded from files
/// or built on the spot.
struct Loaded {
    source: SchemaCatalog,
    target: SchemaCatalog,
    trees: [Option<ContextTree>; 2],
    graphs: [Option<Hypergraph>; 2],
}

impl Loaded {
    fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            source_tree: self.trees[0].as_ref(),
            target_tree: self.trees[1].as_ref(),
            source_graph: self.graphs[0].as_ref(),
            target_graph: self.graphs[1].as_ref(),
            ..Artifacts::catalogs(&self.source, &self.target)
        }
    }
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Source => 0,
        Side::Target => 1,
    }
}

fn load_artifacts(config: &mut RunConfig, args: &ArtifactArgs, modes: &[Mode], gateway: &Gateway) -> Result<Loaded> {
    if let Some(k) = args.k {
        config.pipeline.k = k;
    }
    if args.llm_shortlist.is_some() {
        config.pipeline.llm_shortlist = args.llm_shortlist;
    }
    if let Some(b) = args.budget {
        config.pipeline.pack_budget = b;
    }
    config.pipeline.validate()?;
    let mut loaded = Loaded {
        source: load_side(&args.source_catalog, Side::Source, config.mask)?,
        target: load_side(&args.target_catalog, Side::Target, config.mask)?,
        trees: [None, None],
        graphs: [None, None],
    };
    for path in &args.tree {
        let tree = ContextTree::load(path)?;
        let slot = side_index(tree.side());
        let catalog = [&loaded.source, &loaded.target][slot];
        if tree.is_masked() != catalog.is_masked() {
            return Err(Error::InvalidParams(format!(
                "{} was built with masking {}, but the catalog has masking {}",
                path.display(),
                on_off(tree.is_masked()),
                on_off(catalog.is_masked())
            )));
        }
        tree.check_coverage(catalog)?;
        loaded.trees[slot] = Some(tree);
    }
    for path in &args.graph {
        let graph = Hypergraph::load(path)?;
        let slot = side_index(graph.side());
        let catalog = [&loaded.source, &loaded.target][slot];
        if let Some(c) = catalog.columns().iter().find(|m| graph.embedding(&m.column).is_none()) {
            return Err(Error::InvalidParams(format!(
                "{} has no embedding for {}; rebuild it for this catalog",
                path.display(),
                c.column
            )));
        }
        loaded.graphs[slot] = Some(graph);
    }

    let needs_tree = modes.iter().any(|m| matches!(m, Mode::Full | Mode::NoDiff));
    let include_table = config.graph.include_table;
    for (slot, tau) in [(0, config.graph.tau_source), (1, config.graph.tau_target)] {
        let catalog = [&loaded.source, &loaded.target][slot];
        if loaded.graphs[slot].is_none() {
            log::info!("building {} graph", catalog.side());
            loaded.graphs[slot] = Some(Hypergraph::build(catalog, gateway, tau, include_table)?);
        }
        if needs_tree && loaded.trees[slot].is_none() {
            log::info!("building {} tree", catalog.side());
            loaded.trees[slot] = Some(TreeBuilder::new(gateway, config.tree.clone()).build(catalog)?);
        }
    }
    Ok(loaded)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_column(spec: &str, catalog: &SchemaCatalog) -> Result<MatchQuery> {
    let (table, name) = spec
        .split_once('.')
        .ok_or_else(|| Error::InvalidParams(format!("--column {spec:?} is not <table_id>.<column>")))?;
    let meta = catalog
        .find(table, name)
        .ok_or_else(|| Error::UnknownColumn(spec.to_string()))?;
    Ok(MatchQuery {
        source: meta.column.clone(),
        shortlist: Vec::new(),
        ground_truth: None,
    })
}

#[derive(Serialize)]
struct TraceFile<'a> {
    run_config: &'a RunConfig,
    query: &'a MatchQuery,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<&'a ctxmatch::schema::MatchResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn match_cmd(mut config: RunConfig, args: MatchArgs) -> Result<()> {
    if let Some(mode) = args.mode {
        config.pipeline = config.pipeline.with_mode(mode);
    }
    let gateway = start(&config)?;
    let mode = config.pipeline.mode;
    let loaded = load_artifacts(&mut config, &args.artifacts, &[mode], &gateway)?;
    let queries = match &args.queries {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            benchmark_from_json(&text, &loaded.source, &loaded.target)?
        }
        None if !args.column.is_empty() => args
            .column
            .iter()
            .map(|c| parse_column(c, &loaded.source))
            .collect::<Result<_>>()?,
        None => loaded
            .source
            .columns()
            .iter()
            .map(|m| MatchQuery {
                source: m.column.clone(),
                shortlist: Vec::new(),
                ground_truth: None,
            })
            .collect(),
    };
    let art = loaded.artifacts();
    use rayon::prelude::*;
    let results: Vec<Result<ctxmatch::schema::MatchResult>> =
        queries.par_iter().map(|q| run_match(q, &config.pipeline, &art, &gateway)).collect();

    std::fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    write(&args.out.join("run_config.json"), &config.to_json())?;
    let mut failed = 0;
    for (i, (query, result)) in queries.iter().zip(&results).enumerate() {
        let file = TraceFile {
            run_config: &config,
            query,
            result: result.as_ref().ok(),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        if let Err(e) = result {
            failed += 1;
            log::warn!("query {} failed: {e}", query.source);
        }
        write(&args.out.join(format!("q{i:05}.json")), &serde_json::to_string_pretty(&file)?)?;
    }
    eprintln!(
        "wrote {} traces to {} ({} failed)",
        queries.len(),
        args.out.display(),
        failed
    );
    Ok(())
}

fn bench_generate(config: RunConfig, args: GenerateArgs) -> Result<()> {
    let gateway = start(&config)?;
    let source = load_side(&args.source_catalog, Side::Source, config.mask)?;
    let target = load_side(&args.target_catalog, Side::Target, config.mask)?;
    let text = std::fs::read_to_string(&args.spec).map_err(|e| io_error(&args.spec, e))?;
    let file: SpecFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.spec.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let spec = BenchmarkSpec::from_file(&file, &source, &target)?;
    let queries = generate_benchmark(&spec, &source, &gateway)?;
    write(&args.out, &benchmark_to_json(&queries, &source, &target)?)?;
    write_config_beside(&args.out, &config)?;
    eprintln!("wrote {} queries to {}", queries.len(), args.out.display());
    Ok(())
}

fn bench_run(mut config: RunConfig, args: RunArgs) -> Result<()> {
    let modes = if args.mode.is_empty() {
        Mode::ALL.to_vec()
    } else {
        args.mode.clone()
    };
    let gateway = start(&config)?;
    let loaded = load_artifacts(&mut config, &args.artifacts, &modes, &gateway)?;
    let slices = args
        .benchmark
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            Ok(BenchmarkSlice {
                name: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "benchmark".into()),
                queries: benchmark_from_json(&text, &loaded.source, &loaded.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = run_ablation_suite(&slices, &modes, &config.pipeline, &loaded.artifacts(), &gateway)?;

    std::fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    write(&args.out.join("run_config.json"), &config.to_json())?;
    write(&args.out.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    write(&args.out.join("report.csv"), &render_report(&table, ReportFormat::Csv)?)?;
    let md = render_report(&table, ReportFormat::Markdown)?;
    write(&args.out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| io_error(&args.input, e))?;
    let table: AblationTable = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.input.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let rendered = render_report(&table, args.format)?;
    match &args.out {
        Some(path) => write(path, &rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn precompute_diffs(config: RunConfig, args: PrecomputeArgs) -> Result<()> {
    let gateway = start(&config)?;
    let catalog = load_any_side(&args.catalog, args.side, config.mask)?;
    let graph = Hypergraph::load(&args.graph)?;
    if graph.side() != catalog.side() {
        return Err(Error::SideMismatch {
            expected: catalog.side().to_string(),
            found: graph.side().to_string(),
        });
    }
    let tree = args.tree.as_ref().map(ContextTree::load).transpose()?;
    let p = &config.pipeline;
    let mut blocks: Vec<DifferentiationBlock> = Vec::new();
    for group in graph.groups().iter().filter(|g| g.len() >= 2) {
        let mut packs = HashMap::new();
        if let Some(tree) = &tree {
            for m in &group.members {
                packs.insert(m.clone(), build_context_pack(tree, &catalog, m, p.pack_budget, p.max_relations)?);
            }
        }
        let (block, _) = generate_block(&gateway, &catalog, group, &packs, p.diff_timeout)?;
        blocks.push(block);
    }
    write(&args.out, &serde_json::to_string_pretty(&blocks)?)?;
    write_config_beside(&args.out, &config)?;
    eprintln!("wrote {} blocks to {}", blocks.len(), args.out.display());
    Ok(())
}
