//! Subcommand implementations. Each returns a summary so tests can drive the
//! same code paths as the binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cap_eval::agreement::{pair_classes, AgreementInputs, Annotations, AnnotationRecord, PairSpec, TieMode};
use cap_eval::annotation::{prepare_pairs, AnnotationStore};
use cap_eval::cite::Aggregation;
use cap_eval::config::RunConfig;
use cap_eval::dataset::{classify_records, load_dataset, sample_eval_split, RawRecord, TopicMap};
use cap_eval::forge::{build_cpo_dataset, gen_ad_prompt, gen_train_descriptions, load_negatives, AdPrompt, TrainingConfig};
use cap_eval::gateway::http::HttpTransport;
use cap_eval::gateway::{BackendProfile, GatewayStats, Role};
use cap_eval::pipeline::{file_digest, record_meta, run_scoring, FailedPair, Manifest, MetricSet, ResultStore, ScoringConfig};
use cap_eval::report::{emit_agreement, emit_report, ReportShape};
use cap_eval::{AdClass, AdRecord, Provenance};
use futures::future::join_all;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{AgreementArgs, CpoArgs, GenImagesArgs, GenPromptsArgs, ImageSource, ReportArgs, ReportKind, ScoreArgs};

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        bail!("no run configuration: pass --config or set {}", cap_eval::config::ENV_CONFIG);
    };
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Writes one JSON value per line through a temporary file.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item)?);
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

/// Loads the dataset and applies the topic map when one is configured.
pub fn load_records(cfg: Option<&RunConfig>, dataset: Option<&Path>) -> Result<(PathBuf, Vec<AdRecord>)> {
    let path = match (dataset, cfg) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(c)) => c.dataset_path(),
        (None, None) => bail!("no dataset: pass --dataset or a run configuration"),
    };
    let loaded = load_dataset(&path)?;
    for w in &loaded.warnings {
        tracing::warn!(record = %w.record_id, line = w.line, "{}", w.message);
    }
    let mut records = loaded.records;
    if let Some(map) = cfg.and_then(RunConfig::topic_map_path) {
        classify_records(&mut records, &TopicMap::load(&map)?);
    }
    Ok((path, records))
}

/// Records to score: the seeded split when sampling, else every classified
/// record, or every record when no topic map is configured.
pub fn select_records(cfg: &RunConfig, records: Vec<AdRecord>) -> Vec<AdRecord> {
    if cfg.topic_map.is_none() {
        return records;
    }
    if cfg.sample {
        let split = sample_eval_split(&records, cfg.n_psa, cfg.n_commercial, cfg.seed);
        return split.records().into_iter().cloned().collect();
    }
    let mut kept: Vec<AdRecord> = records.into_iter().filter(|r| r.ad_class != AdClass::Unclassified).collect();
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    kept
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    pub scored: usize,
    pub failures: Vec<FailedPair>,
    pub failure_rate: f64,
    pub max_failure_rate: f64,
    pub stats: GatewayStats,
    /// Requests that reached a scripted mock backend.
    pub mock_calls: u64,
    pub manifest_digest: String,
    pub files: Vec<PathBuf>,
}

impl ScoreSummary {
    pub fn exceeded(&self) -> bool {
        self.failure_rate > self.max_failure_rate
    }
}

pub async fn score(cfg: &RunConfig, args: &ScoreArgs) -> Result<ScoreSummary> {
    let metrics = MetricSet::parse(&args.metrics).map_err(anyhow::Error::msg)?;
    let mut cfg = cfg.clone();
    if let Some(n) = args.max_inflight {
        cfg.max_inflight = n;
        cfg.validate()?;
    }
    let (dataset_path, records) = load_records(Some(&cfg), args.dataset.as_deref())?;
    let records = select_records(&cfg, records);
    if records.is_empty() {
        bail!("no records selected for scoring");
    }
    let refs: Vec<&AdRecord> = records.iter().collect();
    let (models, mocks) = cfg.build_models()?;
    let scoring = ScoringConfig {
        cite: cfg.cite,
        creativity: cfg.creativity,
        metrics,
    };
    let started = chrono::Utc::now().to_rfc3339();
    tracing::info!(records = refs.len(), metrics = %metrics.label(), "scoring");
    let outcome = run_scoring(&models, &scoring, &refs).await;
    let mut manifest = Manifest::new(cfg.digest(), file_digest(&dataset_path)?, cfg.seed, metrics, record_meta(&refs));
    manifest.started_at = started;

    let out = args.out.clone().unwrap_or_else(|| cfg.output_path());
    let store = ResultStore {
        manifest,
        cards: outcome.cards.clone(),
        failures: outcome.failures.clone(),
    };
    store.persist(&out)?;
    let mut files = Vec::new();
    if !store.cards.is_empty() {
        files.extend(emit_report(&store, ReportShape::Scores, cfg.cite.aggregation, &out)?);
        if metrics.pa {
            files.extend(emit_report(&store, ReportShape::Components, cfg.cite.aggregation, &out)?);
        }
    }
    Ok(ScoreSummary {
        scored: outcome.cards.len(),
        failure_rate: outcome.failure_rate(),
        failures: outcome.failures,
        max_failure_rate: cfg.max_failure_rate,
        stats: outcome.stats,
        mock_calls: mocks.values().map(|m| m.call_count()).sum(),
        manifest_digest: store.manifest.digest,
        files,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub written: usize,
    pub failed: Vec<String>,
}

pub async fn gen_prompts(cfg: &RunConfig, args: &GenPromptsArgs) -> Result<GenSummary> {
    let (_, mut records) = load_records(Some(cfg), args.dataset.as_deref())?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let (models, _) = cfg.build_models()?;
    let jobs = records
        .iter()
        .flat_map(|r| r.statements.iter().enumerate().map(move |(i, ar)| (r, i, ar)))
        .map(|(r, i, ar)| {
            let models = &models;
            async move { (r.id.clone(), i, gen_ad_prompt(models, &r.id, i, ar).await) }
        });
    let mut prompts = Vec::new();
    let mut failed = Vec::new();
    for (id, i, res) in join_all(jobs).await {
        match res {
            Ok(p) => prompts.push(p),
            Err(e) => {
                tracing::warn!(record = %id, statement = i, "{e}");
                failed.push(format!("{id}#{i}: {e}"));
            }
        }
    }
    write_jsonl(&args.out, &prompts)?;
    Ok(GenSummary {
        written: prompts.len(),
        failed,
    })
}

/// File extension for common image encodings, from magic bytes.
pub fn image_extension(bytes: &[u8]) -> Option<&'static str> {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => Some("png"),
        [0xFF, 0xD8, 0xFF, ..] => Some("jpg"),
        [b'G', b'I', b'F', b'8', ..] => Some("gif"),
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => Some("webp"),
        _ => None,
    }
}

pub fn image_mime(bytes: &[u8]) -> &'static str {
    match image_extension(bytes) {
        Some("png") => "image/png",
        Some("jpg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

/// Posts each prompt to an external image generator and writes the images
/// plus a dataset file describing them, so generated images can be scored
/// like any other record.
pub async fn gen_images(cfg: Option<&RunConfig>, args: &GenImagesArgs) -> Result<GenSummary> {
    let (_, records) = load_records(cfg, args.dataset.as_deref())?;
    let by_id: BTreeMap<&str, &AdRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let (jobs, provenance): (Vec<(String, usize, String)>, Provenance) = match args.source {
        ImageSource::Llm => {
            let Some(path) = &args.prompts else {
                bail!("--source llm needs --prompts");
            };
            let prompts: Vec<AdPrompt> = read_jsonl(path)?;
            (
                prompts.into_iter().map(|p| (p.record_id, p.statement_index, p.d_llm)).collect(),
                Provenance::GeneratedFromLlm,
            )
        }
        ImageSource::Ar => (
            records
                .iter()
                .flat_map(|r| r.statements.iter().enumerate().map(|(i, s)| (r.id.clone(), i, s.statement.clone())))
                .collect(),
            Provenance::GeneratedFromAr,
        ),
    };
    fs::create_dir_all(&args.out)?;
    let transport = HttpTransport::new();
    // generate_image does not dispatch on the role.
    let profile = BackendProfile::new(Role::Chat, args.endpoint.clone(), args.model.clone());
    let tag = match args.source {
        ImageSource::Llm => "llm",
        ImageSource::Ar => "ar",
    };
    let mut derived = Vec::new();
    let mut failed = Vec::new();
    for (record_id, idx, prompt) in jobs {
        let Some(rec) = by_id.get(record_id.as_str()) else {
            failed.push(format!("{record_id}#{idx}: unknown record"));
            continue;
        };
        let Some(statement) = rec.statements.get(idx) else {
            failed.push(format!("{record_id}#{idx}: no such statement"));
            continue;
        };
        let bytes = match transport.generate_image(&profile, &prompt).await {
            Ok(b) => b,
            Err(e) => {
                failed.push(format!("{record_id}#{idx}: {e}"));
                continue;
            }
        };
        let Some(ext) = image_extension(&bytes) else {
            failed.push(format!("{record_id}#{idx}: response is not an image"));
            continue;
        };
        let file = format!("{record_id}_{tag}_{idx}.{ext}");
        fs::write(args.out.join(&file), &bytes)?;
        derived.push(RawRecord {
            id: format!("{record_id}-{tag}-{idx}"),
            image_path: file,
            statements: vec![statement.statement.clone()],
            topics: rec.topic_votes.clone(),
            provenance,
        });
    }
    write_jsonl(&args.out.join("records.jsonl"), &derived)?;
    Ok(GenSummary {
        written: derived.len(),
        failed,
    })
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct DescriptionLine {
    pub record_id: String,
    pub description: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CpoSummary {
    pub triples: usize,
    pub records: usize,
    pub distinct_prompts: usize,
    pub warnings: usize,
    pub training_config: PathBuf,
}

pub async fn build_cpo(cfg: Option<&RunConfig>, args: &CpoArgs) -> Result<CpoSummary> {
    let (_, records) = load_records(cfg, args.dataset.as_deref())?;
    let negatives = load_negatives(&args.negatives)?;
    let descriptions: BTreeMap<String, String> = match &args.descriptions {
        Some(p) => read_jsonl::<DescriptionLine>(p)?
            .into_iter()
            .map(|d| (d.record_id, d.description))
            .collect(),
        None => {
            let Some(cfg) = cfg else {
                bail!("no --descriptions given and no run configuration to generate them");
            };
            let (models, _) = cfg.build_models()?;
            let mut out = BTreeMap::new();
            for (id, res) in gen_train_descriptions(&models, &records).await {
                match res {
                    Ok(d) => {
                        out.insert(id, d);
                    }
                    Err(e) => tracing::warn!(record = %id, "{e}"),
                }
            }
            out
        }
    };
    let build = build_cpo_dataset(&records, &descriptions, &negatives);
    for w in &build.warnings {
        tracing::warn!(record = %w.record_id, "{}", w.message);
    }
    write_jsonl(&args.out, &build.triples)?;
    let training_path = args.training_config.clone().unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".training.json");
        PathBuf::from(s)
    });
    let stub = TrainingConfig::stub(args.out.display().to_string());
    write_atomic(&training_path, serde_json::to_string_pretty(&stub)?.as_bytes())?;
    Ok(CpoSummary {
        triples: build.triples.len(),
        records: build.per_record.len(),
        distinct_prompts: cap_eval::forge::distinct_prompts(&build.triples),
        warnings: build.warnings.len(),
        training_config: training_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AgreementSummary {
    pub files: Vec<PathBuf>,
    pub tables: Vec<cap_eval::agreement::AgreementTable>,
}

pub fn agreement(cfg: Option<&RunConfig>, args: &AgreementArgs) -> Result<AgreementSummary> {
    let pairs: Vec<PairSpec> = read_jsonl(&args.pairs)?;
    let records: Vec<AnnotationRecord> = read_jsonl(&args.annotations)?;
    let store = ResultStore::load(&args.scores)?;
    let agg = cfg.map(|c| c.cite.aggregation).unwrap_or_default();
    let mut config = cfg.map(|c| c.agreement).unwrap_or_default();
    if args.keep_ties {
        config.ties = TieMode::Category;
    }
    let scores = cap_eval::report::image_scores(&store, agg);
    let classes: BTreeMap<String, AdClass> = store
        .manifest
        .records
        .iter()
        .map(|(id, m)| (id.clone(), m.ad_class))
        .collect();
    let annotations = Annotations::new(records);
    let inputs = AgreementInputs {
        pairs: &pairs,
        pair_classes: pair_classes(&pairs, &classes),
        scores: &scores,
        annotations: &annotations,
        config,
    };
    let tables = inputs.all_tables();
    let files = emit_agreement(tables.clone(), &store.manifest.digest, store.manifest.seed, &args.out)?;
    Ok(AgreementSummary { files, tables })
}

pub fn report(cfg: Option<&RunConfig>, args: &ReportArgs) -> Result<Vec<PathBuf>> {
    let store = ResultStore::load(&args.scores)?;
    let agg: Aggregation = cfg.map(|c| c.cite.aggregation).unwrap_or_default();
    let out = args.out.clone().unwrap_or_else(|| args.scores.clone());
    let mut files = Vec::new();
    for kind in &args.shape {
        let shape = match kind {
            ReportKind::Scores => ReportShape::Scores,
            ReportKind::Components => ReportShape::Components,
        };
        files.extend(emit_report(&store, shape, agg, &out)?);
    }
    Ok(files)
}

/// Annotation store for `serve`: pairs shuffled with the given seed and
/// backed by an append-only log.
pub fn annotation_store(
    records: Vec<AdRecord>,
    pairs_path: &Path,
    seed: u64,
    quota: Option<usize>,
    log: &Path,
) -> Result<AnnotationStore> {
    let specs: Vec<PairSpec> = read_jsonl(pairs_path)?;
    let by_id: BTreeMap<String, AdRecord> = records.into_iter().map(|r| (r.id.clone(), r)).collect();
    let pairs = prepare_pairs(&specs, &by_id, seed)?;
    Ok(AnnotationStore::with_log(pairs, quota, log)?)
}
