use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use e2gan_core::dataio::{
    apply_delta, load_checkpoint, load_concept_dataset, read_manifest, save_checkpoint, synth_paired_task,
    write_concept_dataset, write_png, write_subset_manifest, Checkpoint, CheckpointKind, ConceptRecord, LoadOptions,
    SynthTask,
};
use e2gan_core::lora::{depth_thresholds, lora_param_count, RankSpec};
use e2gan_core::metrics::{
    count_flops, count_params, fid_score, training_cost_report, CostReport, GroupCounts, TrainingMode, PAPER_COMODGAN,
    PAPER_E2GAN, PAPER_PIX2PIX, PAPER_SEARCHED_LORA_PARAMS, PAPER_TB_RB_PARAMS, PAPER_TRAINABLE_FRACTION,
};
use e2gan_core::model::{generator_layout, LayerDescriptor};
use e2gan_core::rank_search::{append_trace, search_global_rank, RankTrial, SearchConfig};
use e2gan_core::selection::{
    builtin_embedder, kmeans, EmbedderKind, nearest_members, select_base_concepts, ConceptImages, Embedder, EmbeddingSet,
};
use e2gan_core::trainer::{
    evaluate, finetune_concept, finetune_full, train_base, EpochLog, GenModel, LoraSearchTrial, SearchScorer,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScorerKind};
use crate::error::{CliError, CliResult};
use crate::output::{csv_error, sha256_file, OutDir, SUMMARY_FILE};
use crate::plot;

/// Prints a line to stdout; a closed pipe (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const CACHE_ENV: &str = "E2GAN_CACHE_DIR";
pub const BASE_FILE: &str = "base.e2g";
pub const DELTA_FILE: &str = "delta.e2g";
pub const FULL_MODEL_FILE: &str = "model.e2g";
pub const RANK_SPEC_FILE: &str = "rank_spec.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn load_opts(cfg: &RunConfig) -> LoadOptions {
    LoadOptions { resolution: cfg.generator.image_resolution, text_dim: cfg.generator.text_embed_dim }
}

fn load_concepts(paths: &[PathBuf], cfg: &RunConfig) -> CliResult<Vec<ConceptRecord>> {
    paths.iter().map(|p| load_concept_dataset(p, load_opts(cfg)).map_err(CliError::from)).collect()
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("e2gan-embeddings"))
}

fn embedder(cfg: &RunConfig) -> CliResult<Box<dyn Embedder>> {
    Ok(builtin_embedder(&cfg.selection.embedder, Some(cache_dir()))?)
}

fn train_sources(concept: &ConceptRecord) -> Vec<(String, e2gan_core::tensor::Tensor<f32>)> {
    concept.splits.train.iter().map(|&i| (concept.pairs[i].id.clone(), concept.pairs[i].source.clone())).collect()
}

// ---------------------------------------------------------------------------------------

pub struct SynthArgs {
    pub task: String,
    pub pairs: usize,
    pub resolution: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes a synthetic paired concept (PNG pairs plus manifest).
pub fn synth_data(cfg: &RunConfig, args: &SynthArgs) -> CliResult<()> {
    let task = SynthTask::parse(&args.task)?;
    let out = OutDir::create(&args.out)?;
    let record = synth_paired_task(task, args.pairs, args.resolution, args.seed, cfg.generator.text_embed_dim)?;
    let manifest = write_concept_dataset(&record, &args.out, args.seed)?;
    out.write_config(cfg)?;
    say!("wrote {} pairs of `{}` to {}", record.pairs.len(), task.name(), manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: String,
    pub sha256: String,
    pub iterations: u64,
    pub trainable_params: usize,
    pub generator_params: usize,
    pub final_epoch: Option<EpochLog>,
}

pub fn build_base(cfg: &RunConfig, concepts: &[PathBuf], out: &Path) -> CliResult<()> {
    let paths = if concepts.is_empty() { cfg.data.concepts.clone() } else { concepts.to_vec() };
    if paths.is_empty() {
        return Err(CliError::Usage("build-base needs concept manifests (--concepts or [data] concepts)".into()));
    }
    let out = OutDir::create(out)?;
    out.reset_timing()?;
    out.write_config(cfg)?;
    let data = load_concepts(&paths, cfg)?;
    let started = Instant::now();
    let (ckpt, log) = train_base(&data, &cfg.generator, cfg.discriminator.base_channels, &cfg.train, &cfg.loss)?;
    out.append_timing("train_base", started.elapsed())?;
    let path = out.path(BASE_FILE);
    save_checkpoint(&ckpt, &path)?;
    out.write_train_log(&log)?;
    let summary = TrainSummary {
        checkpoint: BASE_FILE.into(),
        sha256: sha256_file(&path)?,
        iterations: log.iterations,
        trainable_params: log.trainable_params,
        generator_params: count_params(ckpt.generator()?.describe_layers()).total(),
        final_epoch: log.epochs.last().cloned(),
    };
    out.write_json(SUMMARY_FILE, &summary)?;
    say!("base checkpoint {} (sha256 {})", path.display(), summary.sha256);
    Ok(())
}

// ---------------------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionReport {
    pub concept: String,
    pub candidates: usize,
    pub k: usize,
    pub seed: u64,
    pub selected: Vec<String>,
    pub inertia: f64,
    pub kmeans_iterations: usize,
}

/// Similarity-clustering coreset of one concept's training pairs.
pub fn select_data(cfg: &RunConfig, concept: &Path, k: Option<usize>, out_manifest: &Path) -> CliResult<()> {
    let k = k.unwrap_or(cfg.selection.k);
    let record = load_concept_dataset(concept, load_opts(cfg))?;
    let extractor = embedder(cfg)?;
    let images = train_sources(&record);
    let mut ids = Vec::with_capacity(images.len());
    let mut rows = Vec::with_capacity(images.len());
    for (id, img) in &images {
        ids.push(id.clone());
        rows.push(extractor.embed(id, img)?);
    }
    let mut emb = EmbeddingSet::new(ids, rows)?;
    if cfg.selection.l2_normalize {
        emb = emb.l2_normalized();
    }
    let model = kmeans(&emb, k, cfg.seed, cfg.selection.kmeans_iters)?;
    let selected: Vec<String> = nearest_members(&emb, &model).into_iter().map(|i| emb.ids()[i].clone()).collect();

    let dir = out_manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let out = OutDir::create(dir)?;
    out.write_config(cfg)?;
    let manifest = read_manifest(concept)?;
    let manifest_dir = concept.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_subset_manifest(&manifest, manifest_dir, &selected, out_manifest)?;
    let report = SelectionReport {
        concept: record.name.clone(),
        candidates: emb.len(),
        k,
        seed: cfg.seed,
        selected,
        inertia: model.inertia,
        kmeans_iterations: model.iterations,
    };
    out.write_json("selection.json", &report)?;
    say!("kept {} of {} training pairs of {} -> {}", k, emb.len(), record.name, out_manifest.display());
    Ok(())
}

/// Picks `k` representative base concepts from candidate concept datasets.
pub fn select_concepts(cfg: &RunConfig, concepts: &[PathBuf], k: Option<usize>, out: &Path) -> CliResult<()> {
    let k = k.unwrap_or(cfg.selection.k);
    let records = load_concepts(concepts, cfg)?;
    let extractor = embedder(cfg)?;
    let candidates: Vec<ConceptImages> =
        records.iter().map(|r| ConceptImages { name: r.name.clone(), images: train_sources(r) }).collect();
    let picked = select_base_concepts(&candidates, k, extractor.as_ref(), cfg.seed)?;
    let manifests: Vec<String> = picked
        .iter()
        .map(|name| {
            let i = records.iter().position(|r| &r.name == name).expect("picked names come from the records");
            concepts[i].display().to_string()
        })
        .collect();
    let out = OutDir::create(out)?;
    out.write_config(cfg)?;
    out.write_json("selected_concepts.json", &serde_json::json!({ "k": k, "concepts": picked, "manifests": manifests }))?;
    say!("selected base concepts: {}", picked.join(", "));
    Ok(())
}

// ---------------------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchSummary {
    pub concepts: Vec<String>,
    pub rounds: BTreeMap<String, usize>,
    pub max_rounds: usize,
    pub ranks: BTreeMap<String, usize>,
    pub lora_params: usize,
    pub generator_params: usize,
}

struct Scripted(Vec<f64>);

impl RankTrial for Scripted {
    fn run_round(&mut self, round: usize, _: &BTreeMap<String, usize>, _: usize) -> e2gan_core::Result<f64> {
        Ok(self.0[round.min(self.0.len() - 1)])
    }
}

pub fn search_rank(cfg: &RunConfig, base: Option<&Path>, concepts: &[PathBuf], scripted: Option<Vec<f64>>, out: &Path) -> CliResult<()> {
    let scripted = scripted.or_else(|| cfg.search.scripted_scores.clone());
    let paths = if concepts.is_empty() { cfg.search.probe_concepts.clone() } else { concepts.to_vec() };
    let base = match (&scripted, base) {
        (_, Some(p)) => Some(load_checkpoint(p)?),
        (Some(_), None) => None,
        (None, None) => return Err(CliError::Usage("search-rank needs --base unless scores are scripted".into())),
    };
    let layers: Vec<LayerDescriptor> = match &base {
        Some(b) => b.generator()?.describe_layers().to_vec(),
        None => generator_layout(&cfg.generator),
    };
    let thresholds = depth_thresholds(&layers, cfg.search.sampling_thresholds, cfg.search.tb_threshold);
    let search = SearchConfig::new(cfg.search.epochs_per_round, thresholds.clone())?;

    let out = OutDir::create(out)?;
    out.reset_timing()?;
    out.write_config(cfg)?;
    let started = Instant::now();
    let found = if let Some(scores) = scripted {
        let names: Vec<String> = if paths.is_empty() {
            vec!["scripted".to_string()]
        } else {
            paths.iter().map(|p| read_manifest(p).map(|m| m.concept_name)).collect::<Result<_, _>>()?
        };
        search_global_rank(&names, &search, |_| Ok(Box::new(Scripted(scores.clone())) as Box<dyn RankTrial>))?
    } else {
        if paths.is_empty() {
            return Err(CliError::Usage("search-rank needs probe concepts (--concepts or [search] probe_concepts)".into()));
        }
        let base = base.as_ref().expect("checked above");
        let probes = load_concepts(&paths, cfg)?;
        let names: Vec<String> = probes.iter().map(|p| p.name.clone()).collect();
        search_global_rank(&names, &search, |name| {
            let concept = probes.iter().find(|p| p.name == name).expect("names come from the probes").clone();
            let scorer = match cfg.search.scorer {
                ScorerKind::L1 => SearchScorer::L1,
                ScorerKind::Fid => SearchScorer::Frechet(builtin_embedder(&cfg.selection.embedder, Some(cache_dir()))?),
            };
            let trial = LoraSearchTrial::new(base, concept, &thresholds, &cfg.train, &cfg.loss, scorer)?;
            Ok(Box::new(trial) as Box<dyn RankTrial>)
        })?
    };
    out.append_timing("search_rank", started.elapsed())?;

    let trace_path = out.path(TRACE_FILE);
    if trace_path.exists() {
        std::fs::remove_file(&trace_path).map_err(|e| CliError::io(&trace_path, e))?;
    }
    for c in &found.per_concept {
        append_trace(&trace_path, &c.trace)?;
    }
    out.write_json(RANK_SPEC_FILE, &found.spec)?;
    let summary = SearchSummary {
        concepts: found.per_concept.iter().map(|c| c.concept.clone()).collect(),
        rounds: found.per_concept.iter().map(|c| (c.concept.clone(), c.trace.len())).collect(),
        max_rounds: search.max_rounds(),
        ranks: found.spec.ranks.clone(),
        lora_params: lora_param_count(&found.spec, &layers)?,
        generator_params: count_params(&layers).total(),
    };
    out.write_json(SUMMARY_FILE, &summary)?;
    say!("rank spec {} ({} adapter parameters)", out.path(RANK_SPEC_FILE).display(), summary.lora_params);
    Ok(())
}

// ---------------------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub mode: String,
    pub concept: String,
    pub output: String,
    pub output_sha256: String,
    pub base_sha256: String,
    pub trainable_params: usize,
    pub generator_params: usize,
    pub trainable_fraction: f64,
    pub iterations: u64,
    pub final_epoch: Option<EpochLog>,
}

pub struct FinetuneArgs {
    pub base: PathBuf,
    pub rank_spec: Option<PathBuf>,
    pub full: bool,
    pub concept: PathBuf,
    pub out: PathBuf,
}

pub fn read_rank_spec(path: &Path) -> CliResult<RankSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let spec: RankSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Config { path: path.to_path_buf(), message: format!("not a rank spec: {e}") })?;
    spec.validate().map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(spec)
}

pub fn finetune(cfg: &RunConfig, args: &FinetuneArgs) -> CliResult<()> {
    let spec = match (&args.rank_spec, args.full) {
        (Some(p), false) => Some(read_rank_spec(p)?),
        (None, true) => None,
        _ => return Err(CliError::Usage("finetune needs exactly one of --rank-spec or --full".into())),
    };
    let base_sha = sha256_file(&args.base)?;
    let base = load_checkpoint(&args.base)?;
    let concept = load_concept_dataset(&args.concept, load_opts(cfg))?;
    let out = OutDir::create(&args.out)?;
    out.reset_timing()?;
    out.write_config(cfg)?;
    let started = Instant::now();
    let (result, file) = match &spec {
        Some(spec) => (finetune_concept(&base, &concept, spec, &cfg.train, &cfg.loss)?, DELTA_FILE),
        None => (finetune_full(&base, &concept, &cfg.train, &cfg.loss)?, FULL_MODEL_FILE),
    };
    out.append_timing("finetune", started.elapsed())?;
    let artifact = match &result.model {
        GenModel::Adapted(_) => result.delta(&concept)?,
        GenModel::Dense(g) => Checkpoint::base(g, None),
    };
    let path = out.path(file);
    save_checkpoint(&artifact, &path)?;
    out.write_train_log(&result.log)?;
    if sha256_file(&args.base)? != base_sha {
        return Err(CliError::Internal(format!("base checkpoint {} changed during fine-tuning", args.base.display())));
    }
    let generator_params = count_params(result.model.base().describe_layers()).total();
    let summary = FinetuneSummary {
        mode: if spec.is_some() { "lora" } else { "full" }.into(),
        concept: concept.name.clone(),
        output: file.into(),
        output_sha256: sha256_file(&path)?,
        base_sha256: base_sha,
        trainable_params: result.log.trainable_params,
        generator_params,
        trainable_fraction: result.log.trainable_params as f64 / generator_params as f64,
        iterations: result.log.iterations,
        final_epoch: result.log.epochs.last().cloned(),
    };
    out.write_json(SUMMARY_FILE, &summary)?;
    say!(
        "trainable parameters: {} of {} ({:.3}%)",
        summary.trainable_params,
        generator_params,
        100.0 * summary.trainable_fraction
    );
    say!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub concept: String,
    pub split: Split,
    pub images: usize,
    pub mean_l1: f64,
    /// Desk-scale Fréchet distance under the configured embedder (absent with < 2 images).
    pub fid: Option<f64>,
    pub fid_embedder: EmbedderKind,
    pub model_sha256: String,
    pub delta_sha256: Option<String>,
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub delta: Option<PathBuf>,
    pub concept: PathBuf,
    pub split: Split,
    pub out: PathBuf,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.model)?;
    if ckpt.kind != CheckpointKind::BaseFull {
        return Err(CliError::Usage(format!(
            "{} is a concept delta; pass the base checkpoint as --model and the delta as --delta",
            args.model.display()
        )));
    }
    let model = match &args.delta {
        Some(d) => GenModel::Adapted(apply_delta(&ckpt, &load_checkpoint(d)?)?),
        None => GenModel::Dense(ckpt.generator()?),
    };
    let concept = load_concept_dataset(&args.concept, load_opts(cfg))?;
    let indices: Vec<usize> = match args.split {
        Split::Train => concept.splits.train.clone(),
        Split::Val => concept.splits.val.clone(),
        Split::Test => concept.splits.test.clone(),
        Split::All => (0..concept.pairs.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CliError::Usage(format!("concept {} has no pairs in the {:?} split", concept.name, args.split)));
    }
    let out = OutDir::create(&args.out)?;
    out.reset_timing()?;
    out.write_config(cfg)?;
    let started = Instant::now();
    let result = evaluate(&model, &concept, &indices, cfg.seed)?;
    let fid = if cfg.eval.fid && indices.len() >= 2 {
        let reference: Vec<_> = indices.iter().map(|&i| concept.pairs[i].edited.clone()).collect();
        Some(fid_score(&result.outputs, &reference, embedder(cfg)?.as_ref())?)
    } else {
        None
    };
    out.append_timing("eval", started.elapsed())?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["id", "l1"]).map_err(csv_error)?;
    for (id, l1) in result.ids.iter().zip(&result.per_image_l1) {
        csv.write_record([id.clone(), l1.to_string()]).map_err(csv_error)?;
    }
    out.write_csv("per_image_l1.csv", csv)?;
    plot::bar_chart(&out.path("per_image_l1.png"), &result.per_image_l1)?;
    if cfg.eval.save_images {
        let dir = out.path("images");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for (n, img) in result.outputs.iter().enumerate() {
            write_png(&dir.join(format!("{n:04}.png")), img)?;
        }
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        concept: concept.name.clone(),
        split: args.split,
        images: indices.len(),
        mean_l1: result.mean_l1,
        fid,
        fid_embedder: cfg.selection.embedder.clone(),
        model_sha256: sha256_file(&args.model)?,
        delta_sha256: args.delta.as_deref().map(sha256_file).transpose()?,
    };
    out.write_json(REPORT_FILE, &report)?;
    match report.fid {
        Some(f) => say!("{}: mean L1 {:.5}, FID {:.5} over {} images", report.concept, report.mean_l1, f, report.images),
        None => say!("{}: mean L1 {:.5} over {} images", report.concept, report.mean_l1, report.images),
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct AccountReport {
    pub generator_params: usize,
    pub generator_flops: u64,
    pub group_params: GroupCounts,
    pub lora_params: usize,
    pub trainable_fraction: f64,
    pub dataset_size: usize,
    pub full: CostReport,
    pub lora: CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reported: Option<ReportedFigures>,
}

/// Published reference figures, printed next to the computed values with `--compare`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportedFigures {
    pub e2gan_params: f64,
    pub e2gan_flops: f64,
    pub pix2pix_params: f64,
    pub pix2pix_flops: f64,
    pub comodgan_params: f64,
    pub comodgan_flops: f64,
    pub searched_lora_params: f64,
    pub trainable_fraction: f64,
    pub tb_params: f64,
    pub rb_params: f64,
    /// Computed / reported ratios for the figures the model reproduces.
    pub ratio_params: f64,
    pub ratio_flops: f64,
}

pub fn account(cfg: &RunConfig, rank_spec: Option<&Path>, compare: bool, dataset_size: usize, out: Option<&Path>) -> CliResult<()> {
    let layers = generator_layout(&cfg.generator);
    let spec = match rank_spec {
        Some(p) => read_rank_spec(p)?,
        None => RankSpec::searched(&layers)?,
    };
    let groups = count_params(&layers);
    let flops = count_flops(&layers, cfg.generator.image_resolution);
    let disc = cfg.disc_config();
    let full = training_cost_report(&cfg.train, &cfg.generator, &disc, TrainingMode::Full, dataset_size)?;
    let lora = training_cost_report(&cfg.train, &cfg.generator, &disc, TrainingMode::Lora(&spec), dataset_size)?;
    let lora_params = lora_param_count(&spec, &layers)?;
    let report = AccountReport {
        generator_params: groups.total(),
        generator_flops: flops,
        group_params: groups,
        lora_params,
        trainable_fraction: lora_params as f64 / groups.total() as f64,
        dataset_size,
        full,
        lora,
        reported: compare.then(|| ReportedFigures {
            e2gan_params: PAPER_E2GAN.0,
            e2gan_flops: PAPER_E2GAN.1,
            pix2pix_params: PAPER_PIX2PIX.0,
            pix2pix_flops: PAPER_PIX2PIX.1,
            comodgan_params: PAPER_COMODGAN.0,
            comodgan_flops: PAPER_COMODGAN.1,
            searched_lora_params: PAPER_SEARCHED_LORA_PARAMS,
            trainable_fraction: PAPER_TRAINABLE_FRACTION,
            tb_params: PAPER_TB_RB_PARAMS.0,
            rb_params: PAPER_TB_RB_PARAMS.1,
            ratio_params: groups.total() as f64 / PAPER_E2GAN.0,
            ratio_flops: flops as f64 / PAPER_E2GAN.1,
        }),
    };
    let text = serde_json::to_string_pretty(&report)?;
    say!("{text}");
    if let Some(dir) = out {
        let out = OutDir::create(dir)?;
        out.write_config(cfg)?;
        out.write_json("account.json", &report)?;
    }
    Ok(())
}
