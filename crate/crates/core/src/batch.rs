//! Prepared series for every layer and block-diagonal mini-batches.

use std::sync::Arc;

use ndarray::{s, Array2};

use crate::config::{Aggregator, PatchConfig};
use crate::encoder::patchify_rows;
use crate::error::{Error, Result};
use crate::graph::{build_hr, HierarchyMatrix, MultiLayerGraph, NUM_LAYERS};
use crate::hmgnn::GraphOperators;
use crate::series::{NormStats, SeriesTable};
use crate::sparse::Csr;
use crate::tensor::Tensor;
use crate::windows::{windows_for_split, Split, SplitPoints, WindowedSample};

/// Raw series of every layer plus training-split statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: MultiLayerGraph,
    /// `[V_layer × slots]`, bottom first; parents are child sums.
    pub values: Vec<Array2<f64>>,
    pub norms: Vec<NormStats>,
    pub splits: SplitPoints,
    pub lookback: usize,
    pub horizon: usize,
}

impl Dataset {
    /// `bottom` rows must follow the graph's bottom order.
    pub fn new(
        graph: MultiLayerGraph,
        bottom: &Array2<f64>,
        splits: SplitPoints,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        let values = graph.layer_values(bottom)?;
        let norms = values.iter().map(|v| NormStats::fit(v, splits.train_end)).collect();
        Ok(Dataset {
            graph,
            values,
            norms,
            splits,
            lookback,
            horizon,
        })
    }

    /// Match table rows to the graph's bottom nodes by id.
    pub fn from_table(
        graph: MultiLayerGraph,
        table: &SeriesTable,
        splits: SplitPoints,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        let bottom = bottom_matrix(&graph, table)?;
        Self::new(graph, &bottom, splits, lookback, horizon)
    }

    pub fn num_slots(&self) -> usize {
        self.values[0].ncols()
    }

    pub fn windows(&self, split: Split) -> Result<Vec<WindowedSample>> {
        windows_for_split(self.num_slots(), self.lookback, self.horizon, self.splits, split)
    }

    pub fn sample(&self, t_origin: usize) -> Result<WindowedSample> {
        if t_origin < self.lookback || t_origin + self.horizon > self.num_slots() {
            return Err(Error::config(format!(
                "origin {t_origin} needs {} slots before and {} from it within {} slots",
                self.lookback,
                self.horizon,
                self.num_slots()
            )));
        }
        Ok(WindowedSample {
            t_origin,
            lookback: self.lookback,
            horizon: self.horizon,
        })
    }

    /// Raw targets of one sample, prediction-layer order.
    pub fn actual(&self, sample: &WindowedSample) -> Array2<f64> {
        let r = sample.target_range();
        let mut out = Array2::zeros((self.graph.prediction_layer.len(), self.horizon));
        for (i, n) in self.graph.prediction_layer.iter().enumerate() {
            out.row_mut(i)
                .assign(&self.values[n.layer].slice(s![n.index, r.clone()]));
        }
        out
    }

    /// Training mean and standard deviation of each prediction node.
    pub fn prediction_stats(&self) -> (Vec<f64>, Vec<f64>) {
        self.graph
            .prediction_layer
            .iter()
            .map(|n| (self.norms[n.layer].mean[n.index], self.norms[n.layer].std[n.index]))
            .unzip()
    }

    /// Common scale of the raw forecasts fed to the coordination map.
    pub fn coordination_scale(&self) -> f64 {
        let (_, std) = self.prediction_stats();
        let s = std.iter().sum::<f64>() / std.len().max(1) as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn hierarchy_matrix(&self) -> Result<HierarchyMatrix> {
        build_hr(&self.graph)
    }
}

/// Rows of `table` in the graph's bottom order.
pub fn bottom_matrix(graph: &MultiLayerGraph, table: &SeriesTable) -> Result<Array2<f64>> {
    let ids = &graph.layers[0];
    if ids.len() != table.num_nodes() {
        return Err(Error::Mapping(format!(
            "hierarchy has {} bottom nodes, series table has {}",
            ids.len(),
            table.num_nodes()
        )));
    }
    let mut out = Array2::zeros((ids.len(), table.num_slots()));
    for (i, id) in ids.iter().enumerate() {
        let r = table
            .node_index(id)
            .ok_or_else(|| Error::Mapping(format!("bottom node `{id}` has no series")))?;
        out.row_mut(i).assign(&table.values.row(r));
    }
    Ok(out)
}

/// `B` samples stacked into one disconnected graph.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub samples: Vec<WindowedSample>,
    /// Normalized input windows `[B·V_layer × L]` per layer; sample `b`
    /// occupies rows `b·V .. (b+1)·V`.
    pub inputs: [Tensor; NUM_LAYERS],
    /// `[B·V_layer·N × W]` patches of `inputs`.
    pub patches: [Tensor; NUM_LAYERS],
    pub ops: GraphOperators,
    /// Normalized targets `[B·V_pr × T]`.
    pub targets: Tensor,
    pub targets_raw: Tensor,
    /// Training statistics of every target row.
    pub row_mean: Vec<f64>,
    pub row_std: Vec<f64>,
    /// Block-diagonal hierarchy matrix, when coordination is possible.
    pub hr: Option<Arc<Csr>>,
}

impl SampleBatch {
    pub fn build(
        data: &Dataset,
        samples: &[WindowedSample],
        patch: &PatchConfig,
        aggregator: Aggregator,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("a batch needs at least one sample"));
        }
        let b = samples.len();
        let l = data.lookback;
        let inputs: Vec<Tensor> = (0..NUM_LAYERS)
            .map(|layer| {
                let v = &data.values[layer];
                let mut d = Vec::with_capacity(b * v.nrows() * l);
                for smp in samples {
                    if smp.lookback != l || smp.horizon != data.horizon {
                        return Err(Error::contract("sample window does not match the dataset"));
                    }
                    for r in 0..v.nrows() {
                        d.extend(
                            v.slice(s![r, smp.input_range()])
                                .iter()
                                .map(|&x| data.norms[layer].normalize(r, x)),
                        );
                    }
                }
                Tensor::new(vec![b * v.nrows(), l], d)
            })
            .collect::<Result<_>>()?;
        let patches: Vec<Tensor> = inputs
            .iter()
            .map(|t| patchify_rows(&t.data, t.rows(), l, patch))
            .collect::<Result<_>>()?;
        let (mean, std) = data.prediction_stats();
        let vp = mean.len();
        let mut raw = Vec::with_capacity(b * vp * data.horizon);
        for smp in samples {
            raw.extend(data.actual(smp).iter());
        }
        let row_mean: Vec<f64> = mean.repeat(b);
        let row_std: Vec<f64> = std.repeat(b);
        let norm: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let r = i / data.horizon;
                (x - row_mean[r]) / row_std[r]
            })
            .collect();
        let hr = match data.hierarchy_matrix() {
            Ok(h) => Some(Arc::new(Csr::from_dense(&h.matrix).block_diagonal(b))),
            Err(_) => None,
        };
        let into3 = |v: Vec<Tensor>| -> [Tensor; NUM_LAYERS] { v.try_into().expect("three layers") };
        Ok(SampleBatch {
            samples: samples.to_vec(),
            inputs: into3(inputs),
            patches: into3(patches),
            ops: GraphOperators::new(&data.graph, aggregator, b)?,
            targets: Tensor::new(vec![b * vp, data.horizon], norm)?,
            targets_raw: Tensor::new(vec![b * vp, data.horizon], raw)?,
            row_mean,
            row_std,
            hr,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dense aggregation matrix of one layer over the whole batch.
    pub fn adjacency(&self, layer: usize) -> Array2<f64> {
        self.ops.aggregation[layer].to_dense()
    }

    /// Split `[B·rows × cols]` back into `B` blocks of `[rows × cols]`.
    pub fn unbatch(&self, t: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let b = self.len();
        if !t.nrows().is_multiple_of(b) {
            return Err(Error::dim(format!("{} rows do not split into {b} samples", t.nrows())));
        }
        let r = t.nrows() / b;
        Ok((0..b).map(|i| t.slice(s![i * r..(i + 1) * r, ..]).to_owned()).collect())
    }
}

/// Consecutive batches of at most `size` samples; the last may be short.
pub fn batch_samples(
    data: &Dataset,
    samples: &[WindowedSample],
    size: usize,
    patch: &PatchConfig,
    aggregator: Aggregator,
) -> Result<Vec<SampleBatch>> {
    if size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    samples
        .chunks(size)
        .map(|c| SampleBatch::build(data, c, patch, aggregator))
        .collect()
}
