use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use longdoc_core::corpus::Corpus;
use longdoc_core::cpt::{
    canonical_order, label_page_counts, CptBuilder, CptExample, RetrievalMode, TokenBudget, PATCH_MISTRAL, STAGE1_TOKENS,
};
use longdoc_core::evalagg::{build_report, export_leaderboard, leaderboard_records, CheckpointMeta, ExportFormat, Registry, ScoreTable};
use longdoc_core::example::{Stage, TrainingExample};
use longdoc_core::flagging::{
    expand_accepted_answers, flag_item, BenchmarkItem, ExpansionConfig, FlagReport, IssueKind, ReviewStore,
};
use longdoc_core::genclient::{ChatClient, EndpointConfig, MockClient, OpenAiClient};
use longdoc_core::longpo::{build_pairs, longpo_loss, LongPoConfig, PairGenConfig, PreferencePair};
use longdoc_core::merge::MergeRecipe;
use longdoc_core::schedule::{
    inject_page_indices, order_curriculum, pack_sequences, split_stages, Curriculum, CurriculumConfig, StagePlan,
};
use longdoc_core::sft::{page_seed, run_pipeline, ModelHandle, SftPipelineConfig};
use longdoc_core::templates::Templates;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, load_or_default, usage};
use crate::manifest::{read_jsonl, write_jsonl, write_text, RunManifest};
use crate::*;

pub fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::CptGen(a) => cpt_gen(a),
        Command::SftGen(a) => sft_gen(a),
        Command::LongpoPairs(a) => longpo_pairs(a),
        Command::LongpoLoss(a) => longpo_loss_cmd(a),
        Command::Schedule(a) => schedule(a),
        Command::Pack(a) => pack(a),
        Command::Merge(a) => merge(a),
        Command::Evalagg(a) => evalagg(a),
        Command::Flag(a) => flag(a),
        Command::ReviewServe(a) => review_serve(a),
        Command::ExportLeaderboard(a) => export_leaderboard_cmd(a),
    }
}

fn make_client(args: &ClientArgs, manifest: &mut RunManifest) -> anyhow::Result<Box<dyn ChatClient>> {
    if let Some(path) = &args.mock {
        manifest.input(path)?;
        return Ok(Box::new(MockClient::load(path)?));
    }
    let config = EndpointConfig::from_env(args.base_url.as_deref()).map_err(|e| usage(e.to_string()))?;
    Ok(Box::new(OpenAiClient::new(config)?))
}

fn templates(args: &ClientArgs) -> anyhow::Result<Templates> {
    match &args.templates {
        Some(dir) => Templates::load_dir(dir).with_context(|| format!("loading templates from {}", dir.display())),
        None => Ok(Templates::default()),
    }
}

fn load_corpus(args: &CorpusArgs, manifest: &mut RunManifest) -> anyhow::Result<Corpus> {
    manifest.input(&args.corpus)?;
    if let Some(n) = &args.neighbors {
        manifest.input(n)?;
    }
    Ok(Corpus::load(&args.corpus, args.neighbors.as_deref())?)
}

fn ingest(args: IngestArgs) -> anyhow::Result<()> {
    let mut manifest = RunManifest::new("ingest", &serde_json::json!({}), None);
    let corpus = load_corpus(&CorpusArgs { corpus: args.manifest, neighbors: args.neighbors }, &mut manifest)?;
    let mut canonical = Vec::new();
    corpus.write_manifest(&mut canonical)?;
    write_text(&args.out, "corpus.jsonl", std::str::from_utf8(&canonical)?, &mut manifest)?;
    let question_pages = corpus.filter_question_pages();
    let listing: String = question_pages.iter().map(|p| format!("{p}\n")).collect();
    write_text(&args.out, "question_pages.txt", &listing, &mut manifest)?;
    manifest.count("documents", corpus.documents().len());
    manifest.count("pages", corpus.page_count());
    manifest.count("question_pages", question_pages.len());
    manifest.count("neighbor_lists", corpus.neighbors.as_ref().map_or(0, |n| n.len()));
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CptGenConfig {
    pub tasks: Vec<CptTask>,
    pub seed: u64,
    pub instances_per_doc: usize,
    pub budget: TokenBudget,
    /// Instance label and labeling model for counting tasks.
    pub count_label: Option<String>,
    pub count_model: Option<String>,
}

impl Default for CptGenConfig {
    fn default() -> Self {
        Self {
            tasks: vec![CptTask::Fim, CptTask::Unshuffle, CptTask::RetrievalKey, CptTask::RetrievalPosition],
            seed: 0,
            instances_per_doc: 1,
            budget: TokenBudget::cpt(STAGE1_TOKENS, PATCH_MISTRAL),
            count_label: None,
            count_model: None,
        }
    }
}

fn cpt_gen(args: CptGenArgs) -> anyhow::Result<()> {
    let mut config: CptGenConfig = load_or_default(args.config.as_deref())?;
    if !args.task.is_empty() {
        config.tasks = args.task.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.instances_per_doc {
        config.instances_per_doc = n;
    }
    config.budget.validate()?;
    let counting = config.tasks.contains(&CptTask::Counting);
    if counting && (config.count_label.is_none() || config.count_model.is_none()) {
        return Err(usage("counting needs count_label and count_model in the config"));
    }
    let mut manifest = RunManifest::new("cpt-gen", &config, Some(config.seed));
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    let corpus = load_corpus(&args.corpus, &mut manifest)?;
    let client = if counting { Some(make_client(&args.client, &mut manifest)?) } else { None };
    let mut builder = CptBuilder::new(config.budget);
    builder.templates = templates(&args.client)?;

    let mut examples: Vec<CptExample> = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus.documents() {
        for &task in &config.tasks {
            let instances = if task == CptTask::Counting || task == CptTask::Fim && doc.pages.len() < 2 {
                1
            } else {
                config.instances_per_doc
            };
            for r in 0..instances {
                let seed = page_seed(config.seed, &format!("{}:{task:?}:{r}", doc.doc_id));
                let built = match task {
                    CptTask::Fim => {
                        let with_text: Vec<usize> = doc.pages.iter().filter(|p| p.text().is_some()).map(|p| p.index).collect();
                        match with_text.choose(&mut ChaCha8Rng::seed_from_u64(seed)) {
                            Some(&i) => builder.fim(doc, i),
                            None => {
                                *skipped.entry("fim_no_text".into()).or_default() += 1;
                                continue;
                            }
                        }
                    }
                    CptTask::Unshuffle => builder.unshuffle(doc, seed),
                    CptTask::RetrievalKey => builder.retrieval(doc, RetrievalMode::Key, seed),
                    CptTask::RetrievalPosition => builder.retrieval(doc, RetrievalMode::Position, seed),
                    CptTask::Counting => {
                        let label = config.count_label.as_deref().unwrap_or_default();
                        let model = config.count_model.as_deref().unwrap_or_default();
                        let client = client.as_deref().expect("client built for counting");
                        label_page_counts(client, model, &builder.templates, doc, label, args.client.max_in_flight)
                            .and_then(|counts| builder.counting(doc, &counts, label))
                    }
                };
                match built {
                    Ok(ex) => examples.push(ex),
                    Err(e) => {
                        tracing::warn!(doc = %doc.doc_id, ?task, error = %e, "skipping instance");
                        *skipped.entry(format!("{task:?}").to_lowercase()).or_default() += 1;
                    }
                }
            }
        }
    }
    canonical_order(&mut examples);
    let training: Vec<TrainingExample> = examples.into_iter().map(CptExample::into_training_example).collect();
    write_jsonl(&args.out, "examples.jsonl", &training, &mut manifest)?;
    manifest.count("examples", training.len());
    for (k, v) in skipped {
        manifest.count(format!("skipped.{k}"), v);
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn sft_gen(args: SftGenArgs) -> anyhow::Result<()> {
    let mut config: SftPipelineConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.max_examples {
        config.max_examples = Some(n);
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let mut manifest = RunManifest::new("sft-gen", &config, Some(config.seed));
    manifest.input(&args.config)?;
    let corpus = load_corpus(&args.corpus, &mut manifest)?;
    let client = make_client(&args.client, &mut manifest)?;
    let templates = templates(&args.client)?;
    let (examples, stats) = run_pipeline(&corpus, &config, client.as_ref(), &templates, args.client.max_in_flight)?;
    let training: Vec<&TrainingExample> = examples.iter().map(|e| &e.example).collect();
    write_jsonl(&args.out, "examples.jsonl", &training, &mut manifest)?;
    write_jsonl(&args.out, "records.jsonl", &examples, &mut manifest)?;
    manifest.count("attempted", stats.attempted);
    manifest.count("emitted", stats.emitted);
    for (k, v) in &stats.dropped {
        manifest.count(format!("dropped.{k}"), *v);
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn longpo_pairs(args: LongpoPairsArgs) -> anyhow::Result<()> {
    let mut config: PairGenConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.max_pairs {
        config.max_pairs = Some(n);
    }
    let mut manifest = RunManifest::new("longpo-pairs", &config, Some(config.seed));
    manifest.input(&args.config)?;
    let corpus = load_corpus(&args.corpus, &mut manifest)?;
    let client = make_client(&args.client, &mut manifest)?;
    let templates = templates(&args.client)?;
    let (pairs, failures) = build_pairs(&corpus, &config, client.as_ref(), &templates, args.client.max_in_flight);
    write_jsonl(&args.out, "pairs.jsonl", &pairs, &mut manifest)?;
    let failures: Vec<_> = failures.into_iter().map(|(page, error)| serde_json::json!({"page_id": page, "error": error})).collect();
    write_jsonl(&args.out, "failures.jsonl", &failures, &mut manifest)?;
    manifest.count("pairs", pairs.len());
    manifest.count("failures", failures.len());
    manifest.count("target_pairs", config.target_pairs);
    manifest.write(&args.out)?;
    Ok(())
}

fn longpo_loss_cmd(args: LongpoLossArgs) -> anyhow::Result<()> {
    let mut config: LongPoConfig = load_or_default(args.config.as_deref())?;
    if let Some(b) = args.beta {
        config.beta = b;
    }
    if let Some(l) = args.lambda {
        config.lambda = l;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let pairs: Vec<PreferencePair> = read_jsonl(&args.pairs)?;
    let report = longpo_loss(&pairs, &config)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(out) = &args.out {
        let mut manifest = RunManifest::new("longpo-loss", &config, None);
        manifest.input(&args.pairs)?;
        write_text(out, "loss_report.json", &text, &mut manifest)?;
        manifest.count("pairs", pairs.len());
        manifest.write(out)?;
    }
    Ok(())
}

fn read_examples(paths: &[PathBuf], manifest: &mut RunManifest) -> anyhow::Result<Vec<TrainingExample>> {
    let mut all = Vec::new();
    for p in paths {
        manifest.input(p)?;
        all.extend(read_jsonl::<TrainingExample>(p)?);
    }
    Ok(all)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub curriculum: CurriculumConfig,
    pub page_indices: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { curriculum: CurriculumConfig::new(Curriculum::Length, 0), page_indices: false }
    }
}

fn schedule(args: ScheduleArgs) -> anyhow::Result<()> {
    let mut config: ScheduleConfig = load_or_default(args.config.as_deref())?;
    if let Some(c) = &args.curriculum {
        config.curriculum.kind = c.parse().map_err(usage)?;
    }
    if let Some(m) = args.mix_fraction {
        config.curriculum.mix_fraction = m;
    }
    if let Some(s) = args.seed {
        config.curriculum.seed = s;
    }
    config.page_indices |= args.page_indices;
    let mut manifest = RunManifest::new("schedule", &config, Some(config.curriculum.seed));
    let examples = read_examples(&args.examples, &mut manifest)?;
    let examples = if config.page_indices { examples.into_iter().map(inject_page_indices).collect() } else { examples };
    let split = split_stages(examples);
    manifest.count("dropped", split.dropped.len());
    for (name, stage, examples) in [("short", 0u64, split.short), ("long", 1, split.long)] {
        let cfg = CurriculumConfig { seed: config.curriculum.seed.wrapping_add(stage), ..config.curriculum };
        let ordered = order_curriculum(examples, &cfg)?;
        manifest.count(name, ordered.len());
        write_jsonl(&args.out, &format!("{name}.jsonl"), &ordered, &mut manifest)?;
    }
    write_jsonl(&args.out, "dropped.jsonl", &split.dropped, &mut manifest)?;
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackConfig {
    pub stage: Option<Stage>,
    pub qwen: bool,
    pub budget: Option<u64>,
}

fn pack(args: PackArgs) -> anyhow::Result<()> {
    let mut config: PackConfig = load_or_default(args.config.as_deref())?;
    if let Some(s) = &args.stage {
        config.stage = Some(s.parse().map_err(usage)?);
    }
    config.qwen |= args.qwen;
    if let Some(b) = args.budget {
        config.budget = Some(b);
    }
    let budget = match (config.budget, config.stage) {
        (Some(b), _) => b,
        (None, Some(Stage::Short)) => StagePlan::short().pack_budget_tokens,
        (None, Some(Stage::Long)) => StagePlan::long(config.qwen).pack_budget_tokens,
        (None, None) => return Err(usage("pack needs --budget or --stage")),
    };
    let mut manifest = RunManifest::new("pack", &config, None);
    let examples = read_examples(&args.examples, &mut manifest)?;
    let packs = pack_sequences(&examples, budget, config.stage)?;
    write_jsonl(&args.out, "packs.jsonl", &packs, &mut manifest)?;
    manifest.count("examples", examples.len());
    manifest.count("packs", packs.len());
    manifest.count("budget", budget as usize);
    manifest.write(&args.out)?;
    Ok(())
}

fn merge(args: MergeArgs) -> anyhow::Result<()> {
    let mut recipe: MergeRecipe = load_config(&args.config)?;
    if let Some(a) = args.alpha {
        recipe.alpha = a;
    }
    let base_dir = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
    let mut manifest = RunManifest::new("merge", &recipe, None);
    manifest.input(&args.config)?;
    for p in [&recipe.target, &recipe.base, &recipe.trained] {
        manifest.input(&resolve(p))?;
    }
    let merged = recipe.run(&base_dir)?;
    let output = resolve(&recipe.output_path);
    manifest.outputs.push(output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    manifest.count("tensors", merged.keys().count());
    let out_dir = args.out.unwrap_or_else(|| output.parent().map(Path::to_path_buf).unwrap_or_default());
    manifest.write(&out_dir)?;
    Ok(())
}

fn evalagg(args: EvalaggArgs) -> anyhow::Result<()> {
    let registry = Registry::default();
    let mut manifest = RunManifest::new("evalagg", &serde_json::json!({"baseline": args.baseline}), None);
    manifest.input(&args.scores)?;
    let table = ScoreTable::load_jsonl(&args.scores, &registry)?;
    let report = build_report(&table, &registry, args.baseline.as_deref())?;
    write_text(&args.out, "report.json", &(serde_json::to_string_pretty(&report)? + "\n"), &mut manifest)?;
    manifest.count("rows", report.rows.len());
    manifest.count("complete_rows", report.rows.iter().filter(|r| r.is_complete()).count());
    manifest.write(&args.out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlagConfig {
    pub extractor_model: Option<String>,
    pub judge_model: Option<String>,
    pub top_k: usize,
    pub run_id: String,
    /// Expand accepted answers of unanswerable items before review.
    pub expand: bool,
    pub expansion: ExpansionConfig,
}

impl Default for FlagConfig {
    fn default() -> Self {
        Self {
            extractor_model: None,
            judge_model: None,
            top_k: 4,
            run_id: "flag".into(),
            expand: false,
            expansion: ExpansionConfig::default(),
        }
    }
}

fn flag(args: FlagArgs) -> anyhow::Result<()> {
    let mut config: FlagConfig = load_or_default(args.config.as_deref())?;
    if args.extractor_model.is_some() {
        config.extractor_model = args.extractor_model.clone();
    }
    if args.judge_model.is_some() {
        config.judge_model = args.judge_model.clone();
    }
    let (Some(extractor_model), Some(judge_model)) = (config.extractor_model.clone(), config.judge_model.clone()) else {
        return Err(usage("flag needs an extractor model and a judge model"));
    };
    let mut manifest = RunManifest::new("flag", &config, None);
    manifest.input(&args.items)?;
    let corpus = load_corpus(&args.corpus, &mut manifest)?;
    let client = make_client(&args.client, &mut manifest)?;
    let templates = templates(&args.client)?;
    let extractor = ModelHandle::new(client.as_ref(), &extractor_model).with_max_in_flight(args.client.max_in_flight);
    let judge = ModelHandle::new(client.as_ref(), &judge_model).with_max_in_flight(args.client.max_in_flight);

    let mut items: Vec<BenchmarkItem> = read_jsonl(&args.items)?;
    if config.expand {
        items = items.iter().map(|i| expand_accepted_answers(i, &config.expansion)).collect();
    }
    let mut flags: Vec<FlagReport> = Vec::new();
    let mut by_kind: BTreeMap<IssueKind, usize> = BTreeMap::new();
    let mut pages = BTreeMap::new();
    let corpus_dir = args.corpus.corpus.parent().map(Path::to_path_buf).unwrap_or_default();
    let corpus_dir = std::fs::canonicalize(&corpus_dir).unwrap_or(corpus_dir);
    for item in &items {
        let doc = corpus.document(&item.doc_id)?;
        let report = flag_item(item, doc, &extractor, &judge, &templates, &config.run_id, config.top_k)?;
        *by_kind.entry(report.issue_kind).or_default() += 1;
        if report.issue_kind != IssueKind::Ok {
            for e in &report.evidence {
                let page = corpus.page(&e.page_id)?;
                let path = Path::new(&page.image_ref);
                let abs = if path.is_absolute() { path.to_path_buf() } else { corpus_dir.join(path) };
                pages.insert(e.page_id.clone(), abs.display().to_string());
            }
            flags.push(report);
        }
    }
    let mut store = ReviewStore::init(&args.out, &items, &flags)?;
    store.write_pages(&pages)?;
    manifest.outputs.extend(["items.jsonl", "flags.jsonl", "decisions.jsonl", "pages.jsonl"].map(String::from));
    manifest.count("items", items.len());
    manifest.count("flags", flags.len());
    for (kind, n) in by_kind {
        manifest.count(format!("issue.{}", serde_json::to_value(kind)?.as_str().unwrap_or_default()), n);
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn review_serve(args: ReviewServeArgs) -> anyhow::Result<()> {
    let addr = longdoc_review::bind_addr(args.bind.as_deref()).map_err(|e| usage(e.to_string()))?;
    let store = ReviewStore::open(&args.store)?;
    let mut manifest = RunManifest::new("review-serve", &serde_json::json!({"bind": addr.to_string()}), None);
    let stats = store.view().stats();
    manifest.count("pending", stats.pending);
    manifest.count("kept", stats.kept);
    manifest.count("modified", stats.modified);
    manifest.count("removed", stats.removed);
    manifest.write(&args.store)?;
    drop(store);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(longdoc_review::serve(args.store, addr, args.ui_dir))
}

fn export_leaderboard_cmd(args: ExportLeaderboardArgs) -> anyhow::Result<()> {
    let registry = Registry::default();
    let format = match args.format {
        FormatArg::Json => ExportFormat::Json,
        FormatArg::Html => ExportFormat::Html,
    };
    let mut manifest = RunManifest::new("export-leaderboard", &serde_json::json!({"baseline": args.baseline, "format": format}), None);
    manifest.input(&args.scores)?;
    let meta: BTreeMap<String, CheckpointMeta> = match &args.meta {
        Some(p) => {
            manifest.input(p)?;
            load_config(p)?
        }
        None => BTreeMap::new(),
    };
    let table = ScoreTable::load_jsonl(&args.scores, &registry)?;
    let report = build_report(&table, &registry, args.baseline.as_deref())?;
    let records = leaderboard_records(&report, &meta);
    if records.is_empty() {
        bail!("no checkpoints in {}", args.scores.display());
    }
    let rendered = export_leaderboard(&records, &registry, format)?;
    let name = match format {
        ExportFormat::Json => "leaderboard.json",
        ExportFormat::Html => "leaderboard.html",
    };
    write_text(&args.out, name, &rendered, &mut manifest)?;
    manifest.count("checkpoints", records.len());
    manifest.write(&args.out)?;
    Ok(())
}
