use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hiertcn::data::synthetic::{ITEMS_FILE, LOG_FILE};
use hiertcn::data::{
    build_timelines, generate_synthetic, read_log, EmbeddingTable, Interaction, ItemMatrix, RecordKind, SyntheticConfig,
    IDLE_THRESHOLD_SECS,
};
use hiertcn::eval::{evaluate, MetricsReport, ModelScorer, PoolStrategy};
use hiertcn::graph::{build_item_graph, train_gcn, GcnConfig, NodeFeatures};
use hiertcn::model::{rank_candidates, Checkpoint, Model, ModelBuffers, Ranked};
use hiertcn::train::{sha256_hex, split_users, RunManifest, TrainConfig, Trainer, TrainerState, MANIFEST_VERSION};
use hiertcn::{Error, Exec, Result};
use log::info;
use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{EmbedArgs, EvalArgs, GenerateArgs, Pool, RecommendArgs, TrainArgs};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const STATE_FILE: &str = "state.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Reads a JSON config; any failure is a configuration error.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub struct Dataset {
    pub table: EmbeddingTable,
    pub records: Vec<Interaction>,
    /// SHA-256 over the item table and the log file.
    pub hash: String,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let items_path = dir.join(ITEMS_FILE);
    let log_path = dir.join(LOG_FILE);
    let table = EmbeddingTable::open(&items_path).map_err(|e| with_path(e, &items_path))?;
    let log_bytes = fs::read(&log_path).map_err(|e| Error::data(format!("{}: {e}", log_path.display())))?;
    let records = read_log(log_bytes.as_slice()).map_err(|e| with_path(e, &log_path))?;
    let mut all = fs::read(&items_path)?;
    all.extend_from_slice(&log_bytes);
    Ok(Dataset { table, records, hash: sha256_hex(&all) })
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::data(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub users: usize,
    pub items: usize,
    pub events: usize,
    pub sessions: usize,
}

pub fn generate(args: &GenerateArgs) -> Result<GenerateSummary> {
    let mut cfg: SyntheticConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = generate_synthetic(&cfg)?;
    data.write(&args.out)?;
    let summary = GenerateSummary {
        users: data.timelines.len(),
        items: data.table.len(),
        events: data.timelines.iter().map(|t| t.num_events()).sum(),
        sessions: data.timelines.iter().map(|t| t.sessions.len()).sum(),
    };
    println!(
        "wrote {} users, {} sessions, {} events over {} items to {}",
        summary.users,
        summary.sessions,
        summary.events,
        summary.items,
        args.out.display()
    );
    Ok(summary)
}

fn losses_csv(state: &TrainerState) -> String {
    let mut s = String::from("epoch,steps,train_loss,validation_loss,seconds,peak_input_bytes,improved\n");
    for r in &state.history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.steps, r.train_loss, r.validation_loss, r.seconds, r.peak_input_bytes, r.improved
        );
    }
    s
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.split = mode.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn train(args: &TrainArgs) -> Result<RunManifest> {
    let cfg = train_config(args)?;
    let ds = load_dataset(&args.dataset)?;
    let items = ItemMatrix::<f32>::from_table(&ds.table);
    let split = split_users(build_timelines(&ds.records, IDLE_THRESHOLD_SECS)?, &cfg)?;
    fs::create_dir_all(&args.out)?;
    let config_hash = sha256_hex(cfg.to_canonical_json().as_bytes());

    let mut trainer = match &args.checkpoint {
        None => Trainer::new(cfg.clone(), &items)?,
        Some(path) => {
            let manifest_path = sibling(path, MANIFEST_FILE);
            if let Ok(text) = fs::read_to_string(&manifest_path) {
                let m = RunManifest::from_json(&text)?;
                if m.dataset_hash != ds.hash {
                    return Err(Error::data("dataset differs from the run being resumed"));
                }
            }
            let state_path = sibling(path, STATE_FILE);
            let state_text = fs::read_to_string(&state_path).map_err(|e| Error::data(format!("{}: {e}", state_path.display())))?;
            let state: TrainerState = serde_json::from_str(&state_text)?;
            let best_path = sibling(path, BEST_CHECKPOINT);
            let best = if best_path.exists() { Some(Checkpoint::load(&best_path)?) } else { None };
            info!("resuming from {} at epoch {}", path.display(), state.epoch);
            Trainer::resume(cfg.clone(), &items, Checkpoint::load(path)?, state, best)?
        }
    };

    let out = args.out.clone();
    let manifest = |state: &TrainerState, report: Option<MetricsReport>| RunManifest {
        version: MANIFEST_VERSION,
        config_hash: config_hash.clone(),
        dataset_hash: ds.hash.clone(),
        config: cfg.clone(),
        best_checkpoint: out.join(BEST_CHECKPOINT).display().to_string(),
        last_checkpoint: out.join(LAST_CHECKPOINT).display().to_string(),
        state: state.clone(),
        report,
    };
    write(&out.join("config.json"), cfg.to_canonical_json())?;
    trainer.fit(&split, |t, rec| {
        t.checkpoint().save(&out.join(LAST_CHECKPOINT))?;
        if rec.improved {
            t.best_checkpoint().save(&out.join(BEST_CHECKPOINT))?;
        }
        write(&out.join(STATE_FILE), serde_json::to_string_pretty(&t.state)?)?;
        write(&out.join(LOSSES_FILE), losses_csv(&t.state))?;
        write(&out.join(MANIFEST_FILE), manifest(&t.state, None).to_json())
    })?;
    if !out.join(BEST_CHECKPOINT).exists() {
        trainer.best_checkpoint().save(&out.join(BEST_CHECKPOINT))?;
    }

    let best = trainer.best_checkpoint();
    let scorer = ModelScorer { model: &best.model, buffers: Some(&best.buffers) };
    let report = evaluate(&scorer, &split.test, &items, PoolStrategy::Impressions, cfg.split.name(), cfg.exec)?;
    write(&out.join(REPORT_JSON), report.to_json())?;
    write(&out.join(REPORT_CSV), report.to_csv()?)?;
    let m = manifest(&trainer.state, Some(report));
    write(&out.join(MANIFEST_FILE), m.to_json())?;
    print!("{}", m.report.as_ref().expect("set above").to_text());
    Ok(m)
}

pub fn eval(args: &EvalArgs) -> Result<MetricsReport> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => load_config(Some(p))?,
        None => match fs::read_to_string(sibling(&args.checkpoint, MANIFEST_FILE)) {
            Ok(text) => RunManifest::from_json(&text)?.config,
            Err(_) => TrainConfig::default(),
        },
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.split = mode.into();
    }
    cfg.validate()?;
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let ds = load_dataset(&args.dataset)?;
    let items = ItemMatrix::<f32>::from_table(&ds.table);
    if items.dim() != ck.model.embedding_dim() {
        return Err(Error::config(format!(
            "dataset items have dimension {}, checkpoint expects {}",
            items.dim(),
            ck.model.embedding_dim()
        )));
    }
    let split = split_users(build_timelines(&ds.records, IDLE_THRESHOLD_SECS)?, &cfg)?;
    let pool = match args.pool {
        Pool::Impressions => PoolStrategy::Impressions,
        Pool::Catalog => PoolStrategy::FullCatalog,
    };
    let scorer = ModelScorer { model: &ck.model, buffers: Some(&ck.buffers) };
    let report = evaluate(&scorer, &split.test, &items, pool, cfg.split.name(), Exec::Parallel)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write(&dir.join(REPORT_JSON), report.to_json())?;
        write(&dir.join(REPORT_CSV), report.to_csv()?)?;
    }
    print!("{}", report.to_text());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub user_id: Option<u64>,
    pub new_session: bool,
    pub items: Vec<Ranked>,
}

/// User vector for the interaction after `sessions`. A placeholder row is
/// appended (to the last session, or as a new one) and its prediction read
/// back; predictions never look at their own row.
pub fn next_user_vector(
    model: &Model<f32>,
    buffers: &ModelBuffers<f32>,
    mut sessions: Vec<Array2<f32>>,
    new_session: bool,
) -> Result<Array1<f32>> {
    let d = model.embedding_dim();
    match sessions.last_mut() {
        Some(last) if !new_session => last.push_row(Array1::zeros(d).view()).expect("width matches"),
        _ => sessions.push(Array2::zeros((1, d))),
    }
    let preds = model.forward_user(&sessions, Some(buffers))?;
    let last = preds.last().expect("at least one session");
    let u = last.row(last.nrows() - 1).to_owned();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite user vector".into()));
    }
    Ok(u)
}

pub fn recommend(args: &RecommendArgs) -> Result<Recommendation> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let table = EmbeddingTable::open(&args.dataset.join(ITEMS_FILE))?;
    let items = ItemMatrix::<f32>::from_table(&table);
    if items.dim() != ck.model.embedding_dim() {
        return Err(Error::config("item table dimension does not match the checkpoint"));
    }
    let text = fs::read(&args.history).map_err(|e| Error::data(format!("{}: {e}", args.history.display())))?;
    let records: Vec<Interaction> = read_log(text.as_slice())?.into_iter().filter(|r| r.kind == RecordKind::Interaction).collect();
    let mut timelines = build_timelines(&records, IDLE_THRESHOLD_SECS)?;
    if timelines.len() > 1 {
        return Err(Error::data("history file holds more than one user"));
    }
    let timeline = timelines.pop();
    let mut sessions = Vec::new();
    let mut last_ts = None;
    if let Some(t) = &timeline {
        for s in &t.sessions {
            sessions.push(items.lookup(&s.iter().map(|e| e.item_id).collect::<Vec<_>>())?);
        }
        last_ts = t.events().last().map(|e| e.timestamp);
    }
    let new_session = match (args.now, last_ts) {
        (Some(now), Some(last)) => {
            if now < last {
                return Err(Error::data("--now precedes the last interaction"));
            }
            now - last > IDLE_THRESHOLD_SECS
        }
        _ => last_ts.is_none(),
    };
    let candidates = args.candidates.clone().unwrap_or_else(|| table.ids().to_vec());
    let u = next_user_vector(&ck.model, &ck.buffers, sessions, new_session)?;
    let ranked = rank_candidates(u.view(), &candidates, |id| items.get(id), args.k)?;
    let rec = Recommendation { user_id: timeline.map(|t| t.user_id), new_session, items: ranked };
    let json = serde_json::to_string_pretty(&rec)?;
    match &args.out {
        Some(p) => write(p, json)?,
        None => println!("{json}"),
    }
    Ok(rec)
}

pub fn embed_items(args: &EmbedArgs) -> Result<EmbeddingTable> {
    let mut cfg: GcnConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if args.window < 0 {
        return Err(Error::config("window must be non-negative"));
    }
    let ds = load_dataset(&args.dataset)?;
    let graph = build_item_graph(&ds.records, args.window, NodeFeatures::Table(&ds.table))?;
    info!("item graph: {} nodes, {} edges", graph.len(), graph.num_edges());
    let trained = train_gcn(&graph, &cfg, Exec::Parallel)?;
    let table = trained.table(&graph, Exec::Parallel)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    table.write(&args.out)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in trained.losses.iter().enumerate() {
        let _ = writeln!(curve, "{},{}", i + 1, l);
    }
    write(&args.out.with_extension("losses.csv"), curve)?;
    println!(
        "wrote {} item embeddings of width {} to {} (final loss {:.5})",
        table.len(),
        table.dim(),
        args.out.display(),
        trained.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(table)
}
