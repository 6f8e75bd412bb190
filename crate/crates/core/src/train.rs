//! Two-phase training: the base forecaster first, then (for hierarchical
//! prediction) the coordination map on top of the frozen base.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Dataset, SampleBatch};
use crate::error::{Error, Result};
use crate::graph::NodeRef;
use crate::model::HierarchicalForecaster;
use crate::optim::{clip_grad_norm, Adam};
use crate::par::{self, Execution};
use crate::params::{stable_hash, ParamScope, ParameterStore};
use crate::series::NormStats;
use crate::tape::{Tape, Var};
use crate::windows::{Split, WindowedSample};

/// Traditional (independent forecasts) or hierarchical (coordinated).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Tp,
    Hp,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tp" => Ok(TaskMode::Tp),
            "hp" => Ok(TaskMode::Hp),
            other => Err(Error::config(format!("unknown mode `{other}` (tp, hp)"))),
        }
    }
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::Tp => "tp",
            TaskMode::Hp => "hp",
        })
    }
}

/// Seeded permutation of `0..n` for one epoch of one phase.
pub fn epoch_order(n: usize, seed: u64, phase: u8, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&format!("shuffle/{seed}/{phase}/{epoch}")));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Anything with a sample count, used to weight batch losses.
pub trait Weighted {
    fn weight(&self) -> usize;
}

impl Weighted for SampleBatch {
    fn weight(&self) -> usize {
        self.len()
    }
}

fn norm_summary(params: &ParameterStore) -> String {
    params
        .iter()
        .map(|(k, t)| format!("{k}={:.4e}", t.norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Training loss and largest pre-clip gradient norm of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub max_grad_norm: f64,
}

/// One pass of Adam over `batches` in the given order. The loss of every
/// batch must be finite or training aborts with the parameter norms.
pub fn optimize_epoch<B, F>(
    params: &mut ParameterStore,
    adam: &mut Adam,
    grad_clip: f64,
    epoch: usize,
    batches: impl IntoIterator<Item = Result<B>>,
    loss_fn: F,
) -> Result<EpochStats>
where
    B: Weighted,
    F: Fn(&mut Tape, &mut ParamScope<'_>, &B) -> Result<Var>,
{
    let (mut total, mut weight, mut max_norm) = (0.0, 0usize, 0.0f64);
    for (bi, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        let mut tape = Tape::new();
        let mut scope = ParamScope::new(params);
        let loss = loss_fn(&mut tape, &mut scope, &batch)?;
        let value = tape.value(loss).data[0];
        if !value.is_finite() {
            return Err(Error::NumericAbort {
                epoch,
                batch: bi,
                loss: value,
                norms: norm_summary(params),
            });
        }
        tape.backward(loss)?;
        let bindings = scope.into_bindings();
        params.collect_grads(&tape, &bindings)?;
        let norm = clip_grad_norm(params, grad_clip);
        if !norm.is_finite() {
            return Err(Error::NumericAbort {
                epoch,
                batch: bi,
                loss: value,
                norms: norm_summary(params),
            });
        }
        adam.step(params)?;
        max_norm = max_norm.max(norm);
        total += value * batch.weight() as f64;
        weight += batch.weight();
    }
    Ok(EpochStats {
        loss: total / weight.max(1) as f64,
        max_grad_norm: max_norm,
    })
}

/// Sample-weighted mean loss over fixed batches; forwards may run in
/// parallel, the sum is always taken in batch order.
pub fn mean_loss<B, F>(exec: Execution, params: &ParameterStore, batches: &[B], loss_fn: F) -> Result<f64>
where
    B: Weighted + Sync,
    F: Fn(&mut Tape, &mut ParamScope<'_>, &B) -> Result<Var> + Sync + Send,
{
    let losses = par::try_map_slice(exec, batches, |b| {
        let mut tape = Tape::new();
        let mut scope = ParamScope::frozen(params);
        let l = loss_fn(&mut tape, &mut scope, b)?;
        Ok::<_, Error>(tape.value(l).data[0] * b.weight() as f64)
    })?;
    let w: usize = batches.iter().map(Weighted::weight).sum();
    Ok(losses.iter().sum::<f64>() / w.max(1) as f64)
}

/// Optimizer state and best snapshot of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub params: ParameterStore,
    pub adam: Adam,
    pub epochs_done: usize,
    pub best: ParameterStore,
    pub best_validation: f64,
    /// 0 means the starting parameters were never beaten.
    pub best_epoch: usize,
}

impl PhaseState {
    fn new(params: ParameterStore, lr: f64, validation: f64) -> Self {
        PhaseState {
            best: params.clone(),
            params,
            adam: Adam::new(lr),
            epochs_done: 0,
            best_validation: validation,
            best_epoch: 0,
        }
    }

    fn record(&mut self, validation: f64) {
        self.epochs_done += 1;
        if validation < self.best_validation {
            self.best_validation = validation;
            self.best = self.params.clone();
            self.best_epoch = self.epochs_done;
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub max_grad_norm: f64,
}

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub mode: TaskMode,
    pub seed: u64,
    pub phase1: PhaseState,
    pub phase2: Option<PhaseState>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn finished(&self, model: &HierarchicalForecaster) -> bool {
        let p1 = self.phase1.epochs_done >= model.config.epochs;
        match self.mode {
            TaskMode::Tp => p1,
            TaskMode::Hp => {
                p1 && self
                    .phase2
                    .as_ref()
                    .is_some_and(|p| p.epochs_done >= model.config.phase2_epochs())
            }
        }
    }
}

/// Trained parameters: best base and, for hierarchical prediction, best
/// coordination map.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub base: ParameterStore,
    pub coordination: Option<ParameterStore>,
}

impl TrainedModel {
    /// Single store as written to a checkpoint.
    pub fn merged(&self) -> ParameterStore {
        let mut s = self.base.clone();
        if let Some(c) = &self.coordination {
            s.merge(c);
        }
        s
    }

    pub fn split(store: &ParameterStore) -> Self {
        let coordination = store.subset(crate::model::COORDINATION_PREFIX);
        let mut base = ParameterStore::new();
        for (k, t) in store
            .iter()
            .filter(|(k, _)| !k.starts_with(crate::model::COORDINATION_PREFIX))
        {
            base.insert(k, t.clone()).expect("unique paths");
        }
        TrainedModel {
            base,
            coordination: (!coordination.is_empty()).then_some(coordination),
        }
    }
}

/// Drives both phases over a prepared dataset.
pub struct Trainer<'a> {
    pub model: &'a HierarchicalForecaster,
    pub data: &'a Dataset,
    pub exec: Execution,
    train: Vec<WindowedSample>,
    validation: Vec<SampleBatch>,
    scale: f64,
    /// Frozen-base raw forecasts per origin, filled when phase 2 starts.
    initial: BTreeMap<usize, Array2<f64>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a HierarchicalForecaster, data: &'a Dataset, exec: Execution) -> Result<Self> {
        let cfg = &model.config;
        let train = data.windows(Split::Train)?;
        if train.is_empty() {
            return Err(Error::config("the training split holds no complete window"));
        }
        let val = data.windows(Split::Validation)?;
        if val.is_empty() {
            warn!("validation split is empty; best-model selection uses the training loss");
        }
        let validation = crate::batch::batch_samples(data, &val, cfg.batch_size, &cfg.patch, cfg.aggregator)?;
        Ok(Trainer {
            model,
            data,
            exec,
            train,
            validation,
            scale: data.coordination_scale(),
            initial: BTreeMap::new(),
        })
    }

    pub fn coordination_scale(&self) -> f64 {
        self.scale
    }

    fn base_validation(&self, params: &ParameterStore) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        mean_loss(self.exec, params, &self.validation, |t, s, b| {
            self.model.base_loss(t, s, b)
        })
        .map(Some)
    }

    fn coordination_validation(&self, params: &ParameterStore) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        mean_loss(self.exec, params, &self.validation, |t, s, b| {
            let init = self.stacked_initial(b)?;
            self.model.coordination_loss(t, s, &init, b, self.scale)
        })
        .map(Some)
    }

    fn stacked_initial(&self, batch: &SampleBatch) -> Result<Array2<f64>> {
        let parts: Vec<_> = batch
            .samples
            .iter()
            .map(|s| {
                self.initial
                    .get(&s.t_origin)
                    .map(|a| a.view())
                    .ok_or_else(|| Error::contract(format!("no frozen forecast for origin {}", s.t_origin)))
            })
            .collect::<Result<_>>()?;
        concatenate(Axis(0), &parts).map_err(|e| Error::dim(e.to_string()))
    }

    pub fn init_state(&self, mode: TaskMode, seed: u64) -> Result<TrainState> {
        if mode == TaskMode::Hp {
            self.model.coordination_head()?;
        }
        let params = self.model.init_base(seed)?;
        let v = self.base_validation(&params)?.unwrap_or(f64::INFINITY);
        Ok(TrainState {
            mode,
            seed,
            phase1: PhaseState::new(params, self.model.config.learning_rate, v),
            phase2: None,
            log: Vec::new(),
        })
    }

    fn batches_in(&self, order: &[usize]) -> impl Iterator<Item = Result<SampleBatch>> + '_ {
        let cfg = &self.model.config;
        let picked: Vec<WindowedSample> = order.iter().map(|&i| self.train[i]).collect();
        let chunks: Vec<Vec<WindowedSample>> = picked.chunks(cfg.batch_size).map(<[_]>::to_vec).collect();
        chunks
            .into_iter()
            .map(move |c| SampleBatch::build(self.data, &c, &cfg.patch, cfg.aggregator))
    }

    fn phase1_epoch(&self, state: &mut TrainState) -> Result<EpochLog> {
        let cfg = &self.model.config;
        let epoch = state.phase1.epochs_done + 1;
        let order = epoch_order(self.train.len(), state.seed, 1, epoch);
        let p = &mut state.phase1;
        let stats = optimize_epoch(
            &mut p.params,
            &mut p.adam,
            cfg.grad_clip,
            epoch,
            self.batches_in(&order),
            |t, s, b| self.model.base_loss(t, s, b),
        )?;
        let v = self.base_validation(&p.params)?.unwrap_or(stats.loss);
        p.record(v);
        Ok(EpochLog {
            phase: 1,
            epoch,
            train_loss: stats.loss,
            validation_loss: v,
            max_grad_norm: stats.max_grad_norm,
        })
    }

    /// Forecast every train and validation origin once with the frozen
    /// best base.
    fn freeze_base(&mut self, base: &ParameterStore) -> Result<()> {
        let cfg = &self.model.config;
        let mut samples = self.train.clone();
        samples.extend(self.validation.iter().flat_map(|b| b.samples.iter().copied()));
        let chunks: Vec<Vec<WindowedSample>> = samples.chunks(cfg.batch_size).map(<[_]>::to_vec).collect();
        let forecasts = par::try_map_slice(self.exec, &chunks, |c| {
            let b = SampleBatch::build(self.data, c, &cfg.patch, cfg.aggregator)?;
            let y = self.model.predict_initial(base, &b)?;
            Ok::<_, Error>(c.iter().map(|s| s.t_origin).zip(b.unbatch(&y)?).collect::<Vec<_>>())
        })?;
        self.initial = forecasts.into_iter().flatten().collect();
        Ok(())
    }

    fn phase2_epoch(&mut self, state: &mut TrainState) -> Result<EpochLog> {
        if self.initial.is_empty() {
            self.freeze_base(&state.phase1.best)?;
        }
        if state.phase2.is_none() {
            let params = self.model.init_coordination(state.seed)?;
            let v = self.coordination_validation(&params)?.unwrap_or(f64::INFINITY);
            state.phase2 = Some(PhaseState::new(params, self.model.config.phase2_learning_rate(), v));
        }
        let cfg = &self.model.config;
        let p = state.phase2.as_mut().expect("initialized above");
        let epoch = p.epochs_done + 1;
        let order = epoch_order(self.train.len(), state.seed, 2, epoch);
        let this = &*self;
        let stats = optimize_epoch(
            &mut p.params,
            &mut p.adam,
            cfg.grad_clip,
            epoch,
            this.batches_in(&order),
            |t, s, b| {
                let init = this.stacked_initial(b)?;
                this.model.coordination_loss(t, s, &init, b, this.scale)
            },
        )?;
        let v = this.coordination_validation(&p.params)?.unwrap_or(stats.loss);
        p.record(v);
        Ok(EpochLog {
            phase: 2,
            epoch,
            train_loss: stats.loss,
            validation_loss: v,
            max_grad_norm: stats.max_grad_norm,
        })
    }

    /// Advance by one epoch of whichever phase is active. Returns `None`
    /// once both phases are complete.
    pub fn step(&mut self, state: &mut TrainState) -> Result<Option<EpochLog>> {
        let cfg = &self.model.config;
        let log = if state.phase1.epochs_done < cfg.epochs {
            self.phase1_epoch(state)?
        } else if state.mode == TaskMode::Hp
            && state
                .phase2
                .as_ref()
                .is_none_or(|p| p.epochs_done < cfg.phase2_epochs())
        {
            if cfg.phase2_epochs() == 0 {
                if state.phase2.is_none() {
                    state.phase2 = Some(PhaseState::new(
                        self.model.init_coordination(state.seed)?,
                        cfg.phase2_learning_rate(),
                        f64::INFINITY,
                    ));
                }
                return Ok(None);
            }
            self.phase2_epoch(state)?
        } else {
            return Ok(None);
        };
        debug!(
            "phase {} epoch {}: train {:.6} validation {:.6} grad {:.3}",
            log.phase, log.epoch, log.train_loss, log.validation_loss, log.max_grad_norm
        );
        state.log.push(log.clone());
        Ok(Some(log))
    }

    /// Run to completion, reporting each epoch.
    pub fn run(&mut self, state: &mut TrainState, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainedModel> {
        while let Some(log) = self.step(state)? {
            on_epoch(&log);
        }
        info!(
            "phase 1 best validation {:.6} at epoch {}",
            state.phase1.best_validation, state.phase1.best_epoch
        );
        Ok(TrainedModel {
            base: state.phase1.best.clone(),
            coordination: state.phase2.as_ref().map(|p| p.best.clone()),
        })
    }
}

/// Train from scratch.
pub fn train(
    model: &HierarchicalForecaster,
    data: &Dataset,
    mode: TaskMode,
    exec: Execution,
) -> Result<(TrainedModel, TrainState)> {
    let mut trainer = Trainer::new(model, data, exec)?;
    let mut state = trainer.init_state(mode, model.config.seed)?;
    let trained = trainer.run(&mut state, |_| {})?;
    Ok((trained, state))
}

/// Summary of one phase for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub parameter_count: usize,
}

impl PhaseSummary {
    pub fn of(p: &PhaseState) -> Self {
        PhaseSummary {
            epochs: p.epochs_done,
            best_epoch: p.best_epoch,
            best_validation_loss: p.best_validation,
            parameter_count: p.best.num_values(),
        }
    }
}

/// Everything besides the parameters needed to reuse a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: crate::config::ModelConfig,
    pub mode: TaskMode,
    pub phase1: PhaseSummary,
    /// Absent for traditional prediction.
    pub phase2: Option<PhaseSummary>,
    pub coordination_scale: f64,
    pub hierarchy: serde_json::Value,
    /// Training statistics per layer, bottom first.
    pub norms: Vec<NormStats>,
    pub prediction_layer: Vec<NodeRef>,
    pub split_points: crate::windows::SplitPoints,
    /// Seconds since the Unix epoch; the only non-deterministic field.
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(model: &HierarchicalForecaster, data: &Dataset, state: &TrainState, scale: f64) -> Result<Self> {
        Ok(Manifest {
            config_hash: model.config.hash(),
            config: model.config.clone(),
            mode: state.mode,
            phase1: PhaseSummary::of(&state.phase1),
            phase2: state.phase2.as_ref().map(PhaseSummary::of),
            coordination_scale: scale,
            hierarchy: serde_json::from_str(&model.graph.to_json()?)?,
            norms: data.norms.clone(),
            prediction_layer: model.graph.prediction_layer.clone(),
            split_points: data.splits,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, PatchConfig};
    use crate::graph::{build_hierarchy, PredictionLayerMode};
    use crate::windows::SplitPoints;

    fn config(epochs: usize) -> ModelConfig {
        ModelConfig {
            lookback: 8,
            horizon: 3,
            patch: PatchConfig {
                window: 4,
                stride: 2,
                embed_dim: 3,
                kernel: 2,
                channels: 2,
            },
            epochs,
            batch_size: 8,
            learning_rate: 0.01,
            ..ModelConfig::default()
        }
    }

    fn toy(mode: PredictionLayerMode, f: impl Fn(usize, usize) -> f64) -> Dataset {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let g = build_hierarchy(&ids, &[(0, 1), (2, 3)], &[0, 0, 1, 1], mode).unwrap();
        let bottom = Array2::from_shape_fn((4, 80), |(r, t)| f(r, t));
        Dataset::new(
            g,
            &bottom,
            SplitPoints {
                train_end: 50,
                val_end: 65,
            },
            8,
            3,
        )
        .unwrap()
    }

    fn periodic(r: usize, t: usize) -> f64 {
        ((t + 2 * r) % 6) as f64 * (r + 1) as f64 + 3.0
    }

    #[test]
    fn shuffles_are_seeded_permutations() {
        let a = epoch_order(20, 1, 1, 1);
        assert_eq!(a, epoch_order(20, 1, 1, 1));
        assert_ne!(a, epoch_order(20, 1, 1, 2));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn constant_series_loss_falls_fast() {
        let d = toy(PredictionLayerMode::All, |r, _| 5.0 + r as f64);
        let mut cfg = config(5);
        cfg.learning_rate = 0.005;
        let m = HierarchicalForecaster::new(cfg, d.graph.clone()).unwrap();
        let mut tr = Trainer::new(&m, &d, Execution::Sequential).unwrap();
        let mut st = tr.init_state(TaskMode::Tp, 3).unwrap();
        let first = {
            let b = SampleBatch::build(
                &d,
                &d.windows(Split::Train).unwrap(),
                &m.config.patch,
                m.config.aggregator,
            )
            .unwrap();
            mean_loss(Execution::Sequential, &st.phase1.params, &[b], |t, s, b| {
                m.base_loss(t, s, b)
            })
            .unwrap()
        };
        tr.run(&mut st, |_| {}).unwrap();
        let losses: Vec<f64> = st.log.iter().map(|l| l.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{first} {losses:?}");
        assert!(*losses.last().unwrap() < 0.1 * first, "{first} -> {losses:?}");
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let d = toy(PredictionLayerMode::All, periodic);
        let m = HierarchicalForecaster::new(config(0), d.graph.clone()).unwrap();
        let (trained, st) = train(&m, &d, TaskMode::Tp, Execution::Sequential).unwrap();
        assert_eq!(trained.base, m.init_base(m.config.seed).unwrap());
        assert!(trained.coordination.is_none() && st.log.is_empty());
    }

    #[test]
    fn runs_are_deterministic_and_resume_bitwise() {
        let d = toy(PredictionLayerMode::All, periodic);
        let m = HierarchicalForecaster::new(config(3), d.graph.clone()).unwrap();
        let (a, sa) = train(&m, &d, TaskMode::Hp, Execution::Parallel).unwrap();
        let (b, sb) = train(&m, &d, TaskMode::Hp, Execution::Sequential).unwrap();
        assert_eq!(a.merged().fingerprint(), b.merged().fingerprint());
        assert_eq!(sa.log, sb.log);

        let mut tr = Trainer::new(&m, &d, Execution::Sequential).unwrap();
        let mut st = tr.init_state(TaskMode::Hp, m.config.seed).unwrap();
        for _ in 0..4 {
            tr.step(&mut st).unwrap();
        }
        let saved = st.to_json().unwrap();
        let mut resumed = TrainState::from_json(&saved).unwrap();
        assert_eq!(resumed, st);
        let mut tr2 = Trainer::new(&m, &d, Execution::Sequential).unwrap();
        let c = tr2.run(&mut resumed, |_| {}).unwrap();
        assert_eq!(c.merged().fingerprint(), a.merged().fingerprint());
        assert_eq!(resumed.log, sa.log);
    }

    #[test]
    fn coordination_phase_never_touches_the_base() {
        let d = toy(PredictionLayerMode::All, periodic);
        let m = HierarchicalForecaster::new(config(2), d.graph.clone()).unwrap();
        let mut tr = Trainer::new(&m, &d, Execution::Sequential).unwrap();
        let mut st = tr.init_state(TaskMode::Hp, 1).unwrap();
        tr.step(&mut st).unwrap();
        tr.step(&mut st).unwrap();
        let before = (st.phase1.params.fingerprint(), st.phase1.best.fingerprint());
        let trained = tr.run(&mut st, |_| {}).unwrap();
        assert_eq!(st.log.len(), 4);
        assert_eq!((st.phase1.params.fingerprint(), st.phase1.best.fingerprint()), before);
        assert_eq!(trained.base.fingerprint(), before.1);
        let c = trained.coordination.unwrap();
        assert!(c.paths().all(|p| p.starts_with(crate::model::COORDINATION_PREFIX)));
    }

    #[test]
    fn tp_mode_skips_coordination() {
        let d = toy(PredictionLayerMode::All, periodic);
        let m = HierarchicalForecaster::new(config(2), d.graph.clone()).unwrap();
        let (t, st) = train(&m, &d, TaskMode::Tp, Execution::Sequential).unwrap();
        assert!(t.coordination.is_none() && st.phase2.is_none());
        assert_eq!(st.log.len(), 2);
        let split = TrainedModel::split(&t.merged());
        assert_eq!(split, t);
    }

    #[test]
    fn non_finite_data_aborts_with_diagnostics() {
        let d = toy(PredictionLayerMode::All, periodic);
        let m = HierarchicalForecaster::new(config(1), d.graph.clone()).unwrap();
        let mut params = m.init_base(0).unwrap();
        let mut adam = Adam::new(0.01);
        let w = d.windows(Split::Train).unwrap();
        let mut b = SampleBatch::build(&d, &w[..2], &m.config.patch, m.config.aggregator).unwrap();
        b.targets.data[0] = f64::NAN;
        let err = optimize_epoch(&mut params, &mut adam, 5.0, 7, [Ok(b)], |t, s, b| m.base_loss(t, s, b)).unwrap_err();
        match err {
            Error::NumericAbort {
                epoch, batch, norms, ..
            } => {
                assert_eq!((epoch, batch), (7, 0));
                assert!(norms.contains("encoder.bottom.embed.weight="));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(err_code(), 4);
        fn err_code() -> i32 {
            Error::NumericAbort {
                epoch: 0,
                batch: 0,
                loss: f64::NAN,
                norms: String::new(),
            }
            .exit_code()
        }
    }
}
