use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use trajret_annotate::{Annotator, AuditLog, SilverOutcome};
use trajret_core::context::{serialize_pair, ContextRecord};
use trajret_core::engine::{
    prepare_training_pairs, read_checkpoint, train as train_encoder, write_checkpoint, write_loss_csv,
    EncoderParams, InMemoryImages,
};
use trajret_core::eval::{
    embed_keys, embed_pools, recall_at_k, split_name, EmbedConfig, EmbeddingStore, GroupKey, RecallReport, RecallRow,
    StoreSet,
};
use trajret_core::pairs::{
    apply_lite_cap, build_pools, extract_corpus, split_dataset, CountTable, InstructionTemplateSet, PoolKind, PoolSet,
    SilverSet, Split, Subtask,
};
use trajret_core::synth::{generate, SynthConfig};
use trajret_core::trajectory::{corpus_stats, dedup_states, ingest_corpus, read_manifest, write_manifest, TrajectoryRecord};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::masks::render_masks;
use crate::workspace::{
    create, ids_path, index, open, read_jsonl, read_pairs, sources, store_artifact, write_bytes, write_jsonl,
    Workspace, ANNOTATED, CHECKPOINT, CORPUS, PAIRS, RECALL, SILVER, SPLIT_PAIRS,
};
use crate::{
    AnnotateArgs, EvalArgs, ExtractArgs, IngestArgs, PoolsArgs, ReportCommand, SerializeArgs, SplitArgs, SynthArgs,
    TrainArgs,
};

fn workspace(cfg: &PipelineConfig) -> Result<Workspace, CliError> {
    cfg.check()?;
    Ok(Workspace::new(cfg.work_dir.clone()))
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.min_steps == 0 || args.min_steps > args.max_steps {
        return Err(CliError::user("need 1 <= --min-steps <= --max-steps"));
    }
    if args.image_size == 0 {
        return Err(CliError::user("--image-size must be positive"));
    }
    let corpus = generate(&SynthConfig {
        trajectories: args.trajectories,
        min_steps: args.min_steps,
        max_steps: args.max_steps,
        image_size: args.image_size,
        seed: args.seed,
        ..SynthConfig::default()
    });
    corpus
        .write(&args.out)
        .map_err(|e| CliError::user(format!("cannot write {}: {e}", args.out.display())))?;
    let states: usize = corpus.trajectories.iter().map(TrajectoryRecord::len).sum();
    println!(
        "wrote {} trajectories, {states} states to {}",
        corpus.trajectories.len(),
        args.out.display()
    );
    Ok(())
}

pub fn ingest(cfg: &mut PipelineConfig, args: &IngestArgs) -> Result<(), CliError> {
    if !args.sources.is_empty() {
        cfg.sources = args.sources.clone();
    }
    let ws = workspace(cfg)?;
    if cfg.sources.is_empty() {
        return Err(CliError::user("no sources configured; add [[sources]] or pass --source NAME=DIR"));
    }
    let dir = ws.stage("corpus", cfg)?;
    let images = dir.join("images");
    if images.exists() {
        fs::remove_dir_all(&images)?;
    }
    let mut all = Vec::new();
    for source in &cfg.sources {
        let records = ingest_corpus(&source.root, &source.name)?;
        log::info!("{}: {} trajectories", source.name, records.len());
        for mut t in records {
            for step in &mut t.steps {
                let rel = format!("images/{}/{}", source.name, step.state.screenshot.path);
                let to = dir.join(&rel);
                if let Some(parent) = to.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::copy(source.root.join(&step.state.screenshot.path), &to)?;
                step.state.screenshot.path = rel;
            }
            all.push(t);
        }
    }
    all.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = all.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(CliError::integrity(format!("trajectory id {} appears in two sources", w[0].id)));
    }
    write_manifest(&ws.path(CORPUS), &all)?;
    let stats = corpus_stats(&all).to_tsv();
    write_bytes(&dir.join("stats.tsv"), stats.as_bytes())?;
    print!("{stats}");
    Ok(())
}

pub fn annotate(cfg: &mut PipelineConfig, args: &AnnotateArgs) -> Result<(), CliError> {
    if let Some(e) = &args.endpoint {
        cfg.annotation.endpoint = e.clone();
    }
    if let Some(m) = &args.model {
        cfg.annotation.model_name = m.clone();
    }
    if let Some(r) = args.max_retries {
        cfg.annotation.max_retries = r;
    }
    let ws = workspace(cfg)?;
    let mut corpus = ws.load_corpus(CORPUS)?;
    let dir = ws.stage("annotate", cfg)?;
    let annotator = Annotator::new(cfg.annotation.clone())?.with_audit(AuditLog::create(&dir.join("audit.jsonl"))?);
    let described = if args.skip_describe {
        0
    } else {
        annotator.describe_corpus(&mut corpus, &ws.image_root(), args.overwrite)?
    };
    let outcomes: Vec<SilverOutcome> = annotator.generate_silver_corpus(&corpus)?;
    let silver: Vec<&SilverSet> = outcomes.iter().map(|o| &o.silver).collect();
    write_manifest(&ws.path(ANNOTATED), &corpus)?;
    write_jsonl(&ws.path(SILVER), &silver)?;
    write_jsonl(&dir.join("outcomes.jsonl"), &outcomes)?;
    println!("described {described} states; {} silver sets", silver.len());
    Ok(())
}

fn load_silver(ws: &Workspace) -> Result<HashMap<String, SilverSet>, CliError> {
    let sets: Vec<SilverSet> = read_jsonl(&ws.require(SILVER)?)?;
    Ok(sets.into_iter().map(|s| (s.trajectory_id.clone(), s)).collect())
}

pub fn extract(cfg: &mut PipelineConfig, args: &ExtractArgs) -> Result<(), CliError> {
    if let Some(seed) = args.seed {
        cfg.extract.seed = seed;
    }
    cfg.extract.lite |= args.lite;
    let ws = workspace(cfg)?;
    let corpus = ws.load_corpus(ANNOTATED)?;
    let silver = load_silver(&ws)?;
    let dir = ws.stage("extract", cfg)?;
    let states = dedup_states(&corpus);
    let templates = InstructionTemplateSet::builtin();
    let mut pairs = extract_corpus(&corpus, &silver, &templates, cfg.extract.seed, Some(&states))?;
    if cfg.extract.lite {
        pairs = apply_lite_cap(pairs, &cfg.lite);
    }
    write_jsonl(&ws.path(PAIRS), &pairs)?;
    let table = CountTable::from_pairs(&pairs, &sources(&corpus));
    write_bytes(&dir.join("counts_task.tsv"), table.to_task_tsv().as_bytes())?;
    println!("{} pairs from {} trajectories", pairs.len(), corpus.len());
    Ok(())
}

pub fn pools(cfg: &mut PipelineConfig, args: &PoolsArgs) -> Result<(), CliError> {
    cfg.extract.lite |= args.lite;
    let ws = workspace(cfg)?;
    let corpus = ws.load_corpus(ANNOTATED)?;
    let pairs = read_pairs(&ws.require(PAIRS)?)?;
    ws.stage("pools", cfg)?;
    let states = dedup_states(&corpus);
    let set = build_pools(&corpus, &states, cfg.extract.lite.then_some(&cfg.lite));
    set.check_integrity(&pairs)?;
    let mut w = create(&ws.path(crate::workspace::POOLS))?;
    set.write_jsonl(&mut w)?;
    std::io::Write::flush(&mut w)?;
    println!(
        "pools: {} states, {} trajectories, {} intervals",
        set.state.len(),
        set.trajectory.len(),
        set.interval.len()
    );
    Ok(())
}

pub fn split(cfg: &mut PipelineConfig, args: &SplitArgs) -> Result<(), CliError> {
    if let Some(s) = args.seed {
        cfg.split.seed = s;
    }
    if let Some(f) = args.ood_fraction {
        cfg.split.ood_fraction = f;
    }
    if let Some(f) = args.train_fraction {
        cfg.split.train_fraction = f;
    }
    cfg.split.stratified |= args.stratified;
    let ws = workspace(cfg)?;
    let corpus = read_manifest(&ws.require(ANNOTATED)?)?;
    let pairs = read_pairs(&ws.require(PAIRS)?)?;
    let dir = ws.stage("split", cfg)?;
    let pairs = split_dataset(pairs, &corpus, &cfg.split)?;
    write_jsonl(&ws.path(SPLIT_PAIRS), &pairs)?;

    let mut counts: BTreeMap<(Subtask, Split), usize> = BTreeMap::new();
    for p in &pairs {
        *counts.entry((p.subtask, p.split.expect("split assigns every pair"))).or_default() += 1;
    }
    let mut tsv = String::from("subtask\ttrain\tind\tood\n");
    for s in Subtask::ALL {
        let n = |split| counts.get(&(s, split)).copied().unwrap_or(0);
        tsv.push_str(&format!("{}\t{}\t{}\t{}\n", s.code(), n(Split::Train), n(Split::Ind), n(Split::Ood)));
    }
    write_bytes(&dir.join("summary.tsv"), tsv.as_bytes())?;
    print!("{tsv}");
    Ok(())
}

pub fn serialize(cfg: &mut PipelineConfig, args: &SerializeArgs) -> Result<(), CliError> {
    let ws = workspace(cfg)?;
    let corpus = read_manifest(&ws.require(ANNOTATED)?)?;
    let pairs = read_pairs(&ws.require(SPLIT_PAIRS)?)?;
    let dir = ws.stage("serialize", cfg)?;
    let lookup = index(&corpus);
    let mut records = Vec::new();
    for (n, p) in pairs.iter().enumerate() {
        if args.split.is_some_and(|s| p.split != Some(s)) {
            continue;
        }
        let (key, value) = serialize_pair(p, |id| lookup.get(id).copied())?;
        records.push(ContextRecord::new(n, key));
        records.push(ContextRecord::new(n, value));
    }
    write_jsonl(&dir.join("contexts.jsonl"), &records)?;
    println!("{} sequences for {} pairs", records.len(), records.len() / 2);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    pairs: usize,
    steps: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    truncated_sequences: usize,
}

pub fn train(cfg: &mut PipelineConfig, args: &TrainArgs) -> Result<(), CliError> {
    let t = &mut cfg.train;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.steps, t.steps);
    set!(args.lr, t.learning_rate);
    set!(args.warmup, t.warmup_fraction);
    set!(args.batch, t.batch_size);
    set!(args.sub_batch, t.sub_batch_size);
    set!(args.temperature, t.temperature);
    set!(args.mask_ratio, t.mask_ratio);
    set!(args.delta, t.delta);
    set!(args.keep_mode, t.keep_mode);
    set!(args.interleave, t.interleave_ratio);
    set!(args.dim, t.dim);
    set!(args.seed, t.seed);
    let ws = workspace(cfg)?;
    if args.dry_run {
        let dir = ws.stage("train", cfg)?;
        println!("config ok; echoed to {}", dir.join("config.toml").display());
        return Ok(());
    }
    let corpus = ws.load_corpus(ANNOTATED)?;
    let pairs = read_pairs(&ws.require(SPLIT_PAIRS)?)?;
    let dir = ws.stage("train", cfg)?;
    let pairs: Vec<_> = pairs.into_iter().filter(|p| p.split == Some(Split::Train)).collect();
    let lookup = index(&corpus);
    let examples = prepare_training_pairs(&pairs, |id| lookup.get(id).copied(), cfg.train.vocab)?;
    let images = InMemoryImages::load(&ws.image_root(), &corpus, cfg.images.patch_size)?;
    let outcome = train_encoder(&examples, &images, &cfg.train, None)?;

    let mut w = create(&ws.path(CHECKPOINT))?;
    write_checkpoint(&mut w, &outcome.params)?;
    std::io::Write::flush(&mut w)?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &outcome.curve)?;
    write_bytes(&dir.join("loss.csv"), &csv)?;
    let summary = TrainSummary {
        pairs: examples.len(),
        steps: outcome.curve.len(),
        first_loss: outcome.curve.first().map(|p| p.loss),
        final_loss: outcome.curve.last().map(|p| p.loss),
        truncated_sequences: outcome.truncated,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_bytes(&dir.join("summary.json"), json.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn load_checkpoint(ws: &Workspace) -> Result<EncoderParams, CliError> {
    let path = ws.require(CHECKPOINT)?;
    Ok(read_checkpoint(std::io::BufReader::new(open(&path)?))?)
}

fn embed_config(cfg: &PipelineConfig, params: &EncoderParams) -> EmbedConfig {
    EmbedConfig {
        normalize: cfg.train.normalize,
        max_sequence_tokens: cfg.train.max_sequence_tokens,
        vocab: params.vocab,
    }
}

const KINDS: [PoolKind; 3] = [PoolKind::State, PoolKind::Trajectory, PoolKind::Interval];

pub fn embed(cfg: &mut PipelineConfig) -> Result<(), CliError> {
    let ws = workspace(cfg)?;
    let params = load_checkpoint(&ws)?;
    let set = ws.load_pools()?;
    let corpus = ws.load_corpus(ANNOTATED)?;
    ws.stage("embed", cfg)?;
    let lookup = index(&corpus);
    let images = InMemoryImages::load(&ws.image_root(), &corpus, cfg.images.patch_size)?;
    let stores = embed_pools(
        &set,
        &|id| lookup.get(id).copied(),
        &images,
        &params,
        &embed_config(cfg, &params),
    )?;
    for kind in KINDS {
        let path = ws.path(store_artifact(kind));
        let (mut bin, mut ids) = (create(&path)?, create(&ids_path(&path))?);
        stores.get(kind).write(&mut bin, &mut ids)?;
        std::io::Write::flush(&mut bin)?;
        std::io::Write::flush(&mut ids)?;
        println!("{}: {} vectors of dimension {}", kind.name(), stores.get(kind).len(), params.dim);
    }
    Ok(())
}

fn load_stores(ws: &Workspace, set: &PoolSet) -> Result<StoreSet, CliError> {
    let read = |kind: PoolKind| -> Result<EmbeddingStore, CliError> {
        let path = ws.require(store_artifact(kind))?;
        let ids = std::io::BufReader::new(open(&ids_path(&path))?);
        let store = EmbeddingStore::read(std::io::BufReader::new(open(&path)?), ids)?;
        if store.ids() != set.get(kind).members() {
            return Err(CliError::integrity(format!(
                "{} does not match the {} pool; rerun `trajret embed`",
                path.display(),
                kind.name()
            )));
        }
        Ok(store)
    };
    Ok(StoreSet {
        state: read(PoolKind::State)?,
        trajectory: read(PoolKind::Trajectory)?,
        interval: read(PoolKind::Interval)?,
    })
}

/// On-disk form of a recall report: JSON objects cannot have struct keys.
#[derive(Serialize, Deserialize)]
struct ReportFile {
    ks: Vec<usize>,
    rows: Vec<ReportRow>,
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    #[serde(flatten)]
    key: GroupKey,
    #[serde(flatten)]
    row: RecallRow,
}

impl ReportFile {
    fn from_report(r: &RecallReport) -> Self {
        Self {
            ks: r.ks.clone(),
            rows: r
                .rows
                .iter()
                .map(|(key, row)| ReportRow {
                    key: key.clone(),
                    row: row.clone(),
                })
                .collect(),
        }
    }

    fn into_report(self) -> Result<RecallReport, CliError> {
        let mut out = RecallReport::new(&self.ks);
        if out.ks != self.ks {
            return Err(CliError::integrity("recall report cutoffs are not sorted and unique"));
        }
        for r in self.rows {
            if r.row.hits.len() != out.ks.len() {
                return Err(CliError::integrity("recall report row does not match its cutoffs"));
            }
            out.rows.insert(r.key, r.row);
        }
        Ok(out)
    }
}

fn write_recall_tables(dir: &Path, prefix: &str, report: &RecallReport, method: &str) -> Result<String, CliError> {
    let overall = report.overall_tsv(method);
    write_bytes(&dir.join(format!("{prefix}overall.tsv")), overall.as_bytes())?;
    for split in report.split_list() {
        let tsv = report.subtask_tsv(split);
        write_bytes(&dir.join(format!("{prefix}{}.tsv", split_name(split))), tsv.as_bytes())?;
    }
    Ok(overall)
}

pub fn eval(cfg: &mut PipelineConfig, args: &EvalArgs) -> Result<(), CliError> {
    if let Some(ks) = &args.ks {
        cfg.eval.ks = ks.clone();
    }
    if let Some(splits) = &args.splits {
        cfg.eval.splits = splits.clone();
    }
    let ws = workspace(cfg)?;
    let params = load_checkpoint(&ws)?;
    let set = ws.load_pools()?;
    let stores = load_stores(&ws, &set)?;
    let corpus = ws.load_corpus(ANNOTATED)?;
    let pairs = read_pairs(&ws.require(SPLIT_PAIRS)?)?;
    let dir = ws.stage("eval", cfg)?;
    let pairs: Vec<_> = pairs
        .into_iter()
        .filter(|p| p.split.is_some_and(|s| cfg.eval.splits.contains(&s)))
        .collect();
    if pairs.is_empty() {
        return Err(CliError::user("no pairs in the evaluation splits"));
    }
    let lookup = index(&corpus);
    let images = InMemoryImages::load(&ws.image_root(), &corpus, cfg.images.patch_size)?;
    let keys = embed_keys(
        &pairs,
        &|id| lookup.get(id).copied(),
        &images,
        &params,
        &embed_config(cfg, &params),
    )?;
    let source_of = sources(&corpus);
    let report = recall_at_k(
        &pairs,
        &keys,
        &set,
        &stores,
        &|id| source_of.get(id).cloned().unwrap_or_else(|| "unknown".into()),
        &cfg.eval.ks,
    )?;
    let json = serde_json::to_string_pretty(&ReportFile::from_report(&report)).expect("report serializes");
    write_bytes(&ws.path(RECALL), json.as_bytes())?;
    print!("{}", write_recall_tables(&dir, "", &report, "trajret")?);
    Ok(())
}

pub fn report(cfg: &mut PipelineConfig, what: &ReportCommand) -> Result<(), CliError> {
    if let ReportCommand::Masks { limit, ratio, seed } = what {
        if let Some(l) = limit {
            cfg.report.mask_limit = *l;
        }
        if let Some(r) = ratio {
            cfg.train.mask_ratio = *r;
        }
        if let Some(s) = seed {
            cfg.train.seed = *s;
        }
    }
    let ws = workspace(cfg)?;
    match what {
        ReportCommand::Counts => {
            let corpus = read_manifest(&ws.require(CORPUS)?)?;
            let pairs = read_pairs(&ws.require(PAIRS)?)?;
            let dir = ws.stage("report", cfg)?;
            let table = CountTable::from_pairs(&pairs, &sources(&corpus));
            let tasks = table.to_task_tsv();
            write_bytes(&dir.join("counts_task.tsv"), tasks.as_bytes())?;
            write_bytes(&dir.join("counts_subtask.tsv"), table.to_subtask_tsv().as_bytes())?;
            print!("{tasks}");
        }
        ReportCommand::Recall { method } => {
            let path = ws.require(RECALL)?;
            let text = fs::read_to_string(&path)?;
            let file: ReportFile = serde_json::from_str(&text)
                .map_err(|e| CliError::integrity(format!("{}: {e}", path.display())))?;
            let report = file.into_report()?;
            let dir = ws.stage("report", cfg)?;
            print!("{}", write_recall_tables(&dir, "recall_", &report, method)?);
        }
        ReportCommand::Masks { .. } => {
            let corpus = ws.load_corpus(CORPUS)?;
            let dir = ws.stage("report", cfg)?;
            let summary = render_masks(&corpus, &ws.image_root(), &dir.join("masks"), cfg)?;
            print!("{summary}");
        }
    }
    Ok(())
}
