use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use hierflow::batch::{Dataset, SampleBatch};
use hierflow::config::ModelConfig;
use hierflow::eval::{evaluate, Baseline, EvalOptions};
use hierflow::graph::{build_hr, construct_hierarchy, HierarchySettings, MultiLayerGraph};
use hierflow::io::{write_atomic, write_csv};
use hierflow::model::HierarchicalForecaster;
use hierflow::series::SeriesTable;
use hierflow::synth::{generate, SynthConfig};
use hierflow::train::{EpochLog, Manifest, TaskMode, TrainState, TrainedModel, Trainer};
use hierflow::windows::{Split, SplitPoints};
use hierflow::{Error, Execution, ParameterStore};

use crate::{
    BuildHierarchyArgs, Cli, Command, ConfigArgs, DataArgs, EvalSplit, EvaluateArgs, GenSyntheticArgs, PredictArgs,
    TrainArgs,
};

const CHECKPOINT: &str = "checkpoint.json";
const MANIFEST: &str = "manifest.json";
const STATE: &str = "state.json";
const LOG: &str = "train_log.csv";

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::BuildHierarchy(a) => build_hierarchy(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a, exec),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("HIERFLOW_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("HIERFLOW_SEED=`{s}` is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

/// Config file (if any), then flags on top. The seed falls back to
/// HIERFLOW_SEED only when neither flag nor file sets it.
fn model_config(a: &ConfigArgs) -> Result<ModelConfig> {
    let (mut cfg, file_seed) = match &a.config {
        Some(p) => {
            let text = read(p)?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            (ModelConfig::from_json(&text)?, value.get("seed").is_some())
        }
        None => (ModelConfig::default(), false),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { cfg.$f = v; })*};
    }
    set!(
        lookback,
        horizon,
        slots_per_day,
        top_k,
        clusters,
        epochs,
        batch_size,
        learning_rate
    );
    if a.coordination_epochs.is_some() {
        cfg.coordination_epochs = a.coordination_epochs;
    }
    if a.coordination_learning_rate.is_some() {
        cfg.coordination_learning_rate = a.coordination_learning_rate;
    }
    match (a.seed, file_seed, env_seed()?) {
        (Some(s), _, _) => cfg.seed = s,
        (None, false, Some(s)) => cfg.seed = s,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_table(d: &DataArgs) -> Result<SeriesTable> {
    SeriesTable::load_csv(&d.data, d.layout.into(), d.granularity)
        .with_context(|| format!("loading {}", d.data.display()))
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_json(&read(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.nodes {
        cfg.nodes = v;
    }
    if let Some(v) = a.days {
        cfg.days = v;
    }
    if let Some(v) = a.slots_per_day {
        cfg.slots_per_day = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    match (a.seed, env_seed()?) {
        (Some(s), _) => cfg.seed = s,
        (None, Some(s)) if a.config.is_none() => cfg.seed = s,
        _ => {}
    }
    let d = generate(&cfg)?;
    d.write(&a.out, &a.assignment_out)?;
    println!(
        "wrote {} nodes x {} slots to {}",
        d.table.num_nodes(),
        d.table.num_slots(),
        a.out.display()
    );
    Ok(())
}

fn split_points(cfg: &ModelConfig, slots: usize) -> Result<SplitPoints> {
    Ok(SplitPoints::by_days(
        slots,
        cfg.slots_per_day,
        cfg.train_fraction,
        cfg.val_fraction,
    )?)
}

fn build_hierarchy(a: BuildHierarchyArgs, exec: Execution) -> Result<()> {
    let cfg = model_config(&a.config)?;
    let table = load_table(&a.data)?;
    let splits = split_points(&cfg, table.num_slots())?;
    let settings = HierarchySettings {
        top_k: cfg.top_k,
        clusters: cfg.clusters,
        features: cfg.cluster_features,
        slots_per_day: cfg.slots_per_day,
        span_end: splits.train_end,
        seed: cfg.seed,
        mode: a.prediction_layer.into(),
    };
    let g = construct_hierarchy(&table, &settings, exec)?;
    write_atomic(&a.out, g.to_json()?.as_bytes())?;
    if let Some(m) = &a.matrix_out {
        write_atomic(m, &build_hr(&g)?.to_csv(&g)?)?;
    }
    let [b, m, t] = g.layer_sizes();
    println!(
        "layers bottom={b} middle={m} top={t}; bottom edges={}; prediction nodes={}",
        g.edges[0].len(),
        g.prediction_layer.len()
    );
    for c in 0..m {
        let kids: Vec<&str> = (0..b)
            .filter(|&i| g.parents[0][i] == c)
            .map(|i| g.layers[0][i].as_str())
            .collect();
        println!("  {}: {}", g.layers[1][c], kids.join(" "));
    }
    Ok(())
}

/// Training state plus the hash of the config it belongs to.
#[derive(Serialize, Deserialize)]
struct ResumeFile {
    config_hash: String,
    state: TrainState,
}

fn log_row(l: &EpochLog) -> String {
    format!(
        "{},{},{},{},{}\n",
        l.phase, l.epoch, l.train_loss, l.validation_loss, l.max_grad_norm
    )
}

fn train(a: TrainArgs, exec: Execution) -> Result<()> {
    let cfg = model_config(&a.config)?;
    let table = load_table(&a.data)?;
    let mut graph = MultiLayerGraph::from_json(&read(&a.hierarchy)?)?;
    if let Some(p) = a.prediction_layer {
        graph.set_prediction_layer(p.into());
    }
    let splits = split_points(&cfg, table.num_slots())?;
    let data = Dataset::from_table(graph.clone(), &table, splits, cfg.lookback, cfg.horizon)?;
    let model = HierarchicalForecaster::new(cfg, graph)?;
    let mode: TaskMode = a.mode.into();
    let mut trainer = Trainer::new(&model, &data, exec)?;
    fs::create_dir_all(&a.out)?;
    let state_path = a.out.join(STATE);
    let hash = model.config.hash();
    let mut state = if a.resume && state_path.exists() {
        let r: ResumeFile = serde_json::from_str(&read(&state_path)?)?;
        if r.config_hash != hash || r.state.mode != mode {
            return Err(Error::Config("saved training state belongs to a different config or mode".into()).into());
        }
        info!("resuming after {} logged epochs", r.state.log.len());
        r.state
    } else {
        trainer.init_state(mode, model.config.seed)?
    };
    let log_path = a.out.join(LOG);
    {
        let mut f = File::create(&log_path)?;
        f.write_all(b"phase,epoch,train_loss,validation_loss,max_grad_norm\n")?;
        for l in &state.log {
            f.write_all(log_row(l).as_bytes())?;
        }
    }
    let mut log = OpenOptions::new().append(true).open(&log_path)?;
    let save_state = |s: &TrainState| -> Result<()> {
        let r = ResumeFile {
            config_hash: hash.clone(),
            state: s.clone(),
        };
        write_atomic(&state_path, serde_json::to_string(&r)?.as_bytes())?;
        Ok(())
    };
    while let Some(l) = trainer.step(&mut state)? {
        log.write_all(log_row(&l).as_bytes())?;
        log.flush()?;
        info!(
            "phase {} epoch {}: train {:.5} validation {:.5}",
            l.phase, l.epoch, l.train_loss, l.validation_loss
        );
        save_state(&state)?;
    }
    save_state(&state)?;
    let trained = TrainedModel {
        base: state.phase1.best.clone(),
        coordination: state.phase2.as_ref().map(|p| p.best.clone()),
    };
    trained.merged().save(&a.out.join(CHECKPOINT))?;
    let manifest = Manifest::new(&model, &data, &state, trainer.coordination_scale())?;
    write_atomic(
        &a.out.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    println!(
        "phase 1: best validation loss {:.6} at epoch {} of {}",
        state.phase1.best_validation, state.phase1.best_epoch, state.phase1.epochs_done
    );
    if let Some(p) = &state.phase2 {
        println!(
            "phase 2: best validation loss {:.6} at epoch {} of {}",
            p.best_validation, p.best_epoch, p.epochs_done
        );
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

struct Loaded {
    manifest: Manifest,
    model: HierarchicalForecaster,
    data: Dataset,
    trained: TrainedModel,
}

fn load_checkpoint(dir: &Path, d: &DataArgs) -> Result<Loaded> {
    let path = |f: &str| -> PathBuf { dir.join(f) };
    let manifest: Manifest = serde_json::from_str(&read(&path(MANIFEST))?)?;
    let params =
        ParameterStore::load(&path(CHECKPOINT)).with_context(|| format!("loading {}", path(CHECKPOINT).display()))?;
    let mut graph = MultiLayerGraph::from_json(&manifest.hierarchy.to_string())?;
    graph.prediction_layer = manifest.prediction_layer.clone();
    let table = load_table(d)?;
    let cfg = manifest.config.clone();
    let data = Dataset::from_table(graph.clone(), &table, manifest.split_points, cfg.lookback, cfg.horizon)?;
    if data.norms != manifest.norms {
        warn!("series statistics differ from the ones seen in training; is this the same dataset?");
    }
    let model = HierarchicalForecaster::new(cfg, graph)?;
    let mut trained = TrainedModel::split(&params);
    if manifest.mode == TaskMode::Tp {
        trained.coordination = None;
    }
    Ok(Loaded {
        manifest,
        model,
        data,
        trained,
    })
}

fn predict(a: PredictArgs) -> Result<()> {
    let l = load_checkpoint(&a.checkpoint, &a.data)?;
    let cfg = &l.model.config;
    let sample = l.data.sample(a.t_origin)?;
    let batch = SampleBatch::build(&l.data, &[sample], &cfg.patch, cfg.aggregator)?;
    let f = l.model.predict(
        &l.trained.base,
        l.trained.coordination.as_ref(),
        &batch,
        l.manifest.coordination_scale,
    )?;
    let ids = l.data.graph.prediction_ids();
    let mut header = vec!["node_id", "t_origin", "step", "initial"];
    if f.coordinated.is_some() {
        header.push("coordinated");
    }
    let mut rows = Vec::with_capacity(ids.len() * cfg.horizon);
    for (r, id) in ids.iter().enumerate() {
        for t in 0..cfg.horizon {
            let mut row = vec![
                id.clone(),
                a.t_origin.to_string(),
                (t + 1).to_string(),
                f.initial[(r, t)].to_string(),
            ];
            if let Some(c) = &f.coordinated {
                row.push(c[(r, t)].to_string());
            }
            rows.push(row);
        }
    }
    write_csv(&a.out, &header, &rows)?;
    println!("wrote {} forecasts to {}", rows.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, exec: Execution) -> Result<()> {
    let baselines = Baseline::parse_list(&a.baselines)?;
    let l = load_checkpoint(&a.checkpoint, &a.data)?;
    let split = match a.split {
        EvalSplit::Validation => Split::Validation,
        EvalSplit::Test => Split::Test,
    };
    let opts = EvalOptions {
        baselines,
        oracle: a.debug_oracle,
    };
    let e = evaluate(&l.model, &l.data, &l.trained, split, &opts, exec)?;
    e.write(&a.out)?;
    println!("{:<8} {:>12} {:>12} {:>14}", "mode", "mae", "rmse", "max |E|");
    for r in &e.reports {
        println!(
            "{:<8} {:>12.4} {:>12.4} {:>14.3e}",
            r.mode,
            r.aggregate.mae,
            r.aggregate.rmse,
            r.max_abs_hierarchical_error()
        );
    }
    Ok(())
}
