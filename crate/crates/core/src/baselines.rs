//! Reference predictors: historical average, a graph-free GRU, and the
//! bottom-up / middle-out / top-down reconciliation methods.

use log::warn;
use ndarray::Array2;

use crate::batch::{batch_samples, Dataset, SampleBatch};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{MultiLayerGraph, NodeRef, BOTTOM, MIDDLE, NUM_LAYERS, TOP};
use crate::heads::{prediction_rows, sql_loss, GruHead};
use crate::model::HierarchicalForecaster;
use crate::par::Execution;
use crate::params::{ParamScope, ParameterStore};
use crate::series::daily_profile;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{epoch_order, mean_loss, optimize_epoch, EpochLog};
use crate::windows::Split;

/// Forecasts for every node of every layer, `[V_layer × T]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub layers: Vec<Array2<f64>>,
}

impl PredictionSet {
    /// Rows in prediction-layer order.
    pub fn prediction_rows(&self, graph: &MultiLayerGraph) -> Array2<f64> {
        graph.prediction_values(&self.layers)
    }
}

/// Forecast of slots `[t_origin, t_origin + T)` as the training-span mean of
/// the same slots of day.
pub fn ha_forecast(profile: &[f64], t_origin: usize, horizon: usize) -> Vec<f64> {
    let spd = profile.len();
    (0..horizon).map(|k| profile[(t_origin + k) % spd]).collect()
}

/// Daily profiles of every node of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    pub profiles: Vec<Array2<f64>>,
    pub horizon: usize,
}

impl HistoricalAverage {
    pub fn fit(data: &Dataset, slots_per_day: usize) -> Result<Self> {
        let profiles = data
            .values
            .iter()
            .map(|v| {
                let mut p = Array2::zeros((v.nrows(), slots_per_day));
                for (r, row) in v.rows().into_iter().enumerate() {
                    let series: Vec<f64> = row.to_vec();
                    let prof = daily_profile(&series, slots_per_day, data.splits.train_end)?;
                    p.row_mut(r).assign(&ndarray::Array1::from(prof));
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        Ok(HistoricalAverage {
            profiles,
            horizon: data.horizon,
        })
    }

    pub fn forecast_layers(&self, t_origin: usize) -> PredictionSet {
        let layers = self
            .profiles
            .iter()
            .map(|p| {
                let mut out = Array2::zeros((p.nrows(), self.horizon));
                for (r, row) in p.rows().into_iter().enumerate() {
                    let f = ha_forecast(row.as_slice().expect("standard layout"), t_origin, self.horizon);
                    out.row_mut(r).assign(&ndarray::Array1::from(f));
                }
                out
            })
            .collect();
        PredictionSet { layers }
    }

    /// `[V_pr × T]` in prediction-layer order.
    pub fn forecast(&self, graph: &MultiLayerGraph, t_origin: usize) -> Array2<f64> {
        self.forecast_layers(t_origin).prediction_rows(graph)
    }
}

/// Every ancestor gets the sum of its bottom descendants.
pub fn bottom_up(bottom: &Array2<f64>, graph: &MultiLayerGraph) -> Result<PredictionSet> {
    Ok(PredictionSet {
        layers: graph.layer_values(bottom)?,
    })
}

/// Static share of each child in its parent, from training-span totals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionTable {
    /// Share of each bottom node in its middle parent.
    pub bottom: Vec<f64>,
    /// Share of each middle node in the top node.
    pub middle: Vec<f64>,
}

impl ProportionTable {
    /// `layers` are the series of every layer; only `[0, span_end)` counts.
    pub fn fit(graph: &MultiLayerGraph, layers: &[Array2<f64>], span_end: usize) -> Result<Self> {
        if layers.len() != NUM_LAYERS {
            return Err(Error::dim(format!("{} layers of series, expected 3", layers.len())));
        }
        let totals: Vec<Vec<f64>> = layers
            .iter()
            .map(|v| {
                let end = span_end.min(v.ncols());
                v.rows().into_iter().map(|r| r.iter().take(end).sum()).collect()
            })
            .collect();
        Ok(ProportionTable {
            bottom: shares(graph, BOTTOM, &totals[BOTTOM]),
            middle: shares(graph, MIDDLE, &totals[MIDDLE]),
        })
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        Self::fit(&data.graph, &data.values, data.splits.train_end)
    }
}

fn shares(graph: &MultiLayerGraph, layer: usize, totals: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; totals.len()];
    for p in 0..graph.layer_size(layer + 1) {
        let kids = graph.children(NodeRef {
            layer: layer + 1,
            index: p,
        });
        let sum: f64 = kids.iter().map(|&c| totals[c]).sum();
        if sum > 0.0 {
            for &c in &kids {
                out[c] = totals[c] / sum;
            }
        } else {
            warn!(
                "`{}` has no training volume; splitting it evenly over {} children",
                graph.layers[layer + 1][p],
                kids.len()
            );
            for &c in &kids {
                out[c] = 1.0 / kids.len() as f64;
            }
        }
    }
    out
}

fn allocate(graph: &MultiLayerGraph, layer: usize, share: &[f64], parents: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((graph.layer_size(layer), parents.ncols()));
    for (c, mut row) in out.rows_mut().into_iter().enumerate() {
        let p = graph.parents[layer][c];
        row.assign(&(&parents.row(p) * share[c]));
    }
    out
}

/// Split each middle forecast over its children, then sum upwards.
pub fn middle_out(middle: &Array2<f64>, props: &ProportionTable, graph: &MultiLayerGraph) -> Result<PredictionSet> {
    if middle.nrows() != graph.layer_size(MIDDLE) {
        return Err(Error::dim(format!(
            "{} middle forecasts for {} middle nodes",
            middle.nrows(),
            graph.layer_size(MIDDLE)
        )));
    }
    bottom_up(&allocate(graph, BOTTOM, &props.bottom, middle), graph)
}

/// Split the top forecast over middle nodes, those over bottom nodes, then
/// sum upwards.
pub fn top_down(top: &Array2<f64>, props: &ProportionTable, graph: &MultiLayerGraph) -> Result<PredictionSet> {
    if top.nrows() != graph.layer_size(TOP) {
        return Err(Error::dim(format!(
            "{} top forecasts for {} top nodes",
            top.nrows(),
            graph.layer_size(TOP)
        )));
    }
    let middle = allocate(graph, MIDDLE, &props.middle, top);
    middle_out(&middle, props, graph)
}

/// Single GRU shared by all nodes, reading the normalized lookback one slot
/// per step.
#[derive(Debug, Clone)]
pub struct GruBaseline {
    pub head: GruHead,
}

impl GruBaseline {
    pub const PREFIX: &'static str = "gru_baseline";

    pub fn new(hidden: usize, horizon: usize) -> Self {
        GruBaseline {
            head: GruHead::new(Self::PREFIX, 1, hidden, horizon),
        }
    }

    pub fn num_params(&self) -> usize {
        self.head.num_params()
    }

    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut s = ParameterStore::new();
        self.head.register(&mut s, seed)?;
        Ok(s)
    }

    /// Normalized lookbacks of the prediction nodes, `[B·V_pr × L]`.
    fn inputs(graph: &MultiLayerGraph, batch: &SampleBatch) -> Result<Tensor> {
        let l = batch.inputs[BOTTOM].cols();
        let mut data = Vec::new();
        let stacked: Vec<&[f64]> = batch.inputs.iter().map(|t| t.data.as_slice()).collect();
        let sizes: Vec<usize> = batch.inputs.iter().map(Tensor::rows).collect();
        for r in prediction_rows(graph, batch.len()) {
            let (mut layer, mut row) = (0, r);
            while row >= sizes[layer] {
                row -= sizes[layer];
                layer += 1;
            }
            data.extend_from_slice(&stacked[layer][row * l..(row + 1) * l]);
        }
        Tensor::new(vec![data.len() / l, l], data)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        graph: &MultiLayerGraph,
        batch: &SampleBatch,
    ) -> Result<Var> {
        let x = tape.constant(Self::inputs(graph, batch)?);
        self.head.forward(tape, scope, x)
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        scope: &mut ParamScope<'_>,
        cfg: &ModelConfig,
        graph: &MultiLayerGraph,
        batch: &SampleBatch,
    ) -> Result<Var> {
        let y = self.forward(tape, scope, graph, batch)?;
        let t = tape.constant(batch.targets.clone());
        sql_loss(tape, y, t, cfg.sql_z, cfg.loss_horizon)
    }

    /// Raw forecasts `[B·V_pr × T]`.
    pub fn predict(
        &self,
        params: &ParameterStore,
        graph: &MultiLayerGraph,
        batch: &SampleBatch,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut scope = ParamScope::frozen(params);
        let y = self.forward(&mut tape, &mut scope, graph, batch)?;
        let y = HierarchicalForecaster::denormalize(&mut tape, y, batch)?;
        Ok(tape.value(y).to_array2())
    }

    /// Train with the same loss, optimizer, shuffling and best-snapshot
    /// rule as the main model.
    pub fn train(&self, data: &Dataset, cfg: &ModelConfig, exec: Execution) -> Result<(ParameterStore, Vec<EpochLog>)> {
        let g = &data.graph;
        let train = data.windows(Split::Train)?;
        if train.is_empty() {
            return Err(Error::config("the training split holds no complete window"));
        }
        let val = batch_samples(
            data,
            &data.windows(Split::Validation)?,
            cfg.batch_size,
            &cfg.patch,
            cfg.aggregator,
        )?;
        let loss = |t: &mut Tape, s: &mut ParamScope<'_>, b: &SampleBatch| self.loss(t, s, cfg, g, b);
        let validate = |p: &ParameterStore| -> Result<Option<f64>> {
            if val.is_empty() {
                Ok(None)
            } else {
                mean_loss(exec, p, &val, loss).map(Some)
            }
        };
        let mut params = self.init(cfg.seed)?;
        let mut adam = crate::optim::Adam::new(cfg.learning_rate);
        let mut best = (validate(&params)?.unwrap_or(f64::INFINITY), params.clone());
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            let order = epoch_order(train.len(), cfg.seed, 3, epoch);
            let picked: Vec<_> = order.iter().map(|&i| train[i]).collect();
            let batches = picked
                .chunks(cfg.batch_size)
                .map(|c| SampleBatch::build(data, c, &cfg.patch, cfg.aggregator));
            let stats = optimize_epoch(&mut params, &mut adam, cfg.grad_clip, epoch, batches, loss)?;
            let v = validate(&params)?.unwrap_or(stats.loss);
            if v < best.0 {
                best = (v, params.clone());
            }
            log.push(EpochLog {
                phase: 1,
                epoch,
                train_loss: stats.loss,
                validation_loss: v,
                max_grad_norm: stats.max_grad_norm,
            });
        }
        Ok((best.1, log))
    }
}
