//! The full forecaster: per-layer patch encoders, message passing, GRU
//! heads and the optional coordination stage.

use ndarray::Array2;

use crate::batch::SampleBatch;
use crate::config::ModelConfig;
use crate::encoder::PatchEncoder;
use crate::error::{Error, Result};
use crate::graph::{MultiLayerGraph, BOTTOM, LAYER_NAMES, MIDDLE, NUM_LAYERS, TOP};
use crate::heads::{prediction_rows, sql_loss, CoordinationHead, ForecastHeads};
use crate::hmgnn::Hmgnn;
use crate::params::{ParamScope, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter paths of the coordination stage start with this.
pub const COORDINATION_PREFIX: &str = "coordination.";

#[derive(Debug, Clone)]
pub struct HierarchicalForecaster {
    pub config: ModelConfig,
    pub graph: MultiLayerGraph,
    pub encoders: [PatchEncoder; NUM_LAYERS],
    pub hmgnn: Hmgnn,
    pub heads: ForecastHeads,
    /// Absent when the prediction layer has no bottom nodes.
    pub coordination: Option<CoordinationHead>,
}

/// Raw-scale forecasts of one batch, `[B·V_pr × T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchForecast {
    pub initial: Array2<f64>,
    pub coordinated: Option<Array2<f64>>,
}

impl HierarchicalForecaster {
    pub fn new(config: ModelConfig, graph: MultiLayerGraph) -> Result<Self> {
        config.validate()?;
        let enc = |l: usize| PatchEncoder::new(&format!("encoder.{}", LAYER_NAMES[l]), config.patch, config.lookback);
        let encoders = [enc(BOTTOM)?, enc(MIDDLE)?, enc(TOP)?];
        let f = config.feature_dim();
        let heads = ForecastHeads::new(&graph, config.patch.embed_dim, config.hidden_dim(), config.horizon);
        let coordination = graph
            .prediction_layer
            .iter()
            .any(|n| n.layer == BOTTOM)
            .then(|| CoordinationHead::new(&graph, config.horizon));
        Ok(HierarchicalForecaster {
            hmgnn: Hmgnn::new(f),
            config,
            graph,
            encoders,
            heads,
            coordination,
        })
    }

    /// Encoders, message passing and heads.
    pub fn init_base(&self, seed: u64) -> Result<ParameterStore> {
        let mut s = ParameterStore::new();
        for e in &self.encoders {
            e.register(&mut s, seed)?;
        }
        self.hmgnn.register(&mut s, seed)?;
        self.heads.register(&mut s, seed)?;
        Ok(s)
    }

    pub fn init_coordination(&self, seed: u64) -> Result<ParameterStore> {
        let head = self.coordination_head()?;
        let mut s = ParameterStore::new();
        head.register(&mut s, &self.graph, self.config.coordination_init, seed)?;
        Ok(s)
    }

    pub fn coordination_head(&self) -> Result<&CoordinationHead> {
        self.coordination
            .as_ref()
            .ok_or_else(|| Error::config("coordination needs bottom nodes in the prediction layer"))
    }

    /// Normalized initial forecasts `[B·V_pr × T]` in prediction order.
    pub fn forward_initial(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, batch: &SampleBatch) -> Result<Var> {
        let b = batch.len();
        let mut feats = Vec::with_capacity(NUM_LAYERS);
        for (l, enc) in self.encoders.iter().enumerate() {
            let p = tape.constant(batch.patches[l].clone());
            feats.push(enc.forward(tape, scope, p)?);
        }
        let feats: [Var; NUM_LAYERS] = feats.try_into().expect("three layers");
        let h = self.hmgnn.forward(tape, scope, feats, &batch.ops)?;
        let out = self.heads.forward(tape, scope, h, &self.heads.cluster_rows(b)?)?;
        // layers without a head contribute placeholder rows never selected
        let stacked: Vec<Var> = (0..NUM_LAYERS)
            .map(|l| {
                out[l].unwrap_or_else(|| {
                    tape.constant(Tensor::zeros(&[b * self.graph.layer_size(l), self.config.horizon]))
                })
            })
            .collect();
        let all = tape.concat(&stacked, 0)?;
        tape.gather_rows(all, &prediction_rows(&self.graph, b))
    }

    pub fn denormalize(tape: &mut Tape, x: Var, batch: &SampleBatch) -> Result<Var> {
        tape.affine_rows(x, &batch.row_std, &batch.row_mean)
    }

    pub fn normalize(tape: &mut Tape, raw: Var, batch: &SampleBatch) -> Result<Var> {
        let scale: Vec<f64> = batch.row_std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = batch.row_mean.iter().zip(&batch.row_std).map(|(m, s)| -m / s).collect();
        tape.affine_rows(raw, &scale, &shift)
    }

    /// Coordinated raw forecasts from raw initial forecasts.
    pub fn coordinate(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        initial_raw: Var,
        batch: &SampleBatch,
        scale: f64,
    ) -> Result<Var> {
        let hr = batch
            .hr
            .clone()
            .ok_or_else(|| Error::config("coordination needs bottom nodes in the prediction layer"))?;
        self.coordination_head()?.forward(tape, scope, initial_raw, hr, scale)
    }

    /// Loss of the initial forecasts of one batch.
    pub fn base_loss(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, batch: &SampleBatch) -> Result<Var> {
        let pred = self.forward_initial(tape, scope, batch)?;
        let target = tape.constant(batch.targets.clone());
        sql_loss(tape, pred, target, self.config.sql_z, self.config.loss_horizon)
    }

    /// Loss of coordinated forecasts given fixed raw initial forecasts.
    pub fn coordination_loss(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        initial_raw: &Array2<f64>,
        batch: &SampleBatch,
        scale: f64,
    ) -> Result<Var> {
        let x = tape.constant(Tensor::from_array(initial_raw));
        let y = self.coordinate(tape, scope, x, batch, scale)?;
        let y = Self::normalize(tape, y, batch)?;
        let target = tape.constant(batch.targets.clone());
        sql_loss(tape, y, target, self.config.sql_z, self.config.loss_horizon)
    }

    /// Raw initial forecasts of a batch.
    pub fn predict_initial(&self, base: &ParameterStore, batch: &SampleBatch) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut scope = ParamScope::frozen(base);
        let y = self.forward_initial(&mut tape, &mut scope, batch)?;
        let y = Self::denormalize(&mut tape, y, batch)?;
        Ok(tape.value(y).to_array2())
    }

    pub fn predict(
        &self,
        base: &ParameterStore,
        coordination: Option<&ParameterStore>,
        batch: &SampleBatch,
        scale: f64,
    ) -> Result<BatchForecast> {
        let initial = self.predict_initial(base, batch)?;
        let coordinated = match coordination {
            Some(c) => {
                let mut tape = Tape::new();
                let mut scope = ParamScope::frozen(c);
                let x = tape.constant(Tensor::from_array(&initial));
                let y = self.coordinate(&mut tape, &mut scope, x, batch, scale)?;
                Some(tape.value(y).to_array2())
            }
            None => None,
        };
        Ok(BatchForecast { initial, coordinated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Dataset;
    use crate::config::PatchConfig;
    use crate::gradcheck::check_store_grads;
    use crate::graph::{build_hierarchy, PredictionLayerMode};
    use crate::windows::{Split, SplitPoints};

    fn small_config() -> ModelConfig {
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
            ..ModelConfig::default()
        }
    }

    fn toy(mode: PredictionLayerMode) -> Dataset {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let g = build_hierarchy(&ids, &[(0, 1), (2, 3), (1, 2)], &[0, 0, 1, 1], mode).unwrap();
        let bottom = Array2::from_shape_fn((4, 60), |(r, t)| (((t * (r + 2)) % 11) + r) as f64);
        Dataset::new(
            g,
            &bottom,
            SplitPoints {
                train_end: 30,
                val_end: 45,
            },
            8,
            3,
        )
        .unwrap()
    }

    #[test]
    fn base_and_coordination_paths_are_disjoint() {
        let d = toy(PredictionLayerMode::All);
        let m = HierarchicalForecaster::new(small_config(), d.graph.clone()).unwrap();
        let base = m.init_base(1).unwrap();
        let coord = m.init_coordination(1).unwrap();
        assert!(base.paths().all(|p| !p.starts_with(COORDINATION_PREFIX)));
        assert!(coord.paths().all(|p| p.starts_with(COORDINATION_PREFIX)));
        assert!(base.contains("heads.cluster_1.output.bias"));
        assert!(base.contains("heads.top.gru.w_z"));
    }

    #[test]
    fn bottom_only_model_has_no_upper_heads() {
        let d = toy(PredictionLayerMode::Bottom);
        let m = HierarchicalForecaster::new(small_config(), d.graph.clone()).unwrap();
        let base = m.init_base(1).unwrap();
        assert!(!base
            .paths()
            .any(|p| p.starts_with("heads.middle") || p.starts_with("heads.top")));
        let batch = SampleBatch::build(
            &d,
            &d.windows(Split::Train).unwrap()[..2],
            &m.config.patch,
            m.config.aggregator,
        )
        .unwrap();
        let f = m.predict(&base, None, &batch, 1.0).unwrap();
        assert_eq!(f.initial.dim(), (8, 3));
    }

    #[test]
    fn every_parameter_passes_gradient_check() {
        let d = toy(PredictionLayerMode::All);
        let m = HierarchicalForecaster::new(small_config(), d.graph.clone()).unwrap();
        let mut store = m.init_base(3).unwrap();
        store.merge(&m.init_coordination(3).unwrap());
        let w = d.windows(Split::Train).unwrap();
        let batch = SampleBatch::build(&d, &w[..2], &m.config.patch, m.config.aggregator).unwrap();
        let scale = d.coordination_scale();
        let report = check_store_grads(&store, |tape, scope| {
            let p = m.forward_initial(tape, scope, &batch)?;
            let raw = HierarchicalForecaster::denormalize(tape, p, &batch)?;
            let y = m.coordinate(tape, scope, raw, &batch, scale)?;
            let y = HierarchicalForecaster::normalize(tape, y, &batch)?;
            let t = tape.constant(batch.targets.clone());
            sql_loss(tape, y, t, 0.5, m.config.loss_horizon)
        })
        .unwrap();
        assert!(
            report.passed(),
            "{:?}",
            &report.failures[..report.failures.len().min(5)]
        );
        assert_eq!(report.entries, store.num_values());
    }

    #[test]
    fn batched_forward_matches_single_samples() {
        let d = toy(PredictionLayerMode::All);
        let m = HierarchicalForecaster::new(small_config(), d.graph.clone()).unwrap();
        let base = m.init_base(5).unwrap();
        let w = d.windows(Split::Train).unwrap();
        let batch = SampleBatch::build(&d, &w[..5], &m.config.patch, m.config.aggregator).unwrap();
        let all = m.predict_initial(&base, &batch).unwrap();
        let parts = batch.unbatch(&all).unwrap();
        for (i, s) in w[..5].iter().enumerate() {
            let one = SampleBatch::build(&d, &[*s], &m.config.patch, m.config.aggregator).unwrap();
            let y = m.predict_initial(&base, &one).unwrap();
            assert!((&y - &parts[i]).iter().all(|v| v.abs() < 1e-10));
        }
    }
}
