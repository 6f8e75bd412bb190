//! Point-forecast errors and the hierarchy consistency error.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MultiLayerGraph, NodeRef, BOTTOM, LAYER_NAMES, NUM_LAYERS};

pub fn mae(pred: &[f64], actual: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / n
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum::<f64>() / n).sqrt()
}

/// Children (or, failing that, bottom descendants) of `parent` as
/// prediction rows, when all of them are forecast.
fn child_rows(graph: &MultiLayerGraph, parent: NodeRef) -> Option<Vec<usize>> {
    let rows = |layer: usize, idx: Vec<usize>| -> Option<Vec<usize>> {
        idx.into_iter()
            .map(|index| graph.prediction_index(NodeRef { layer, index }))
            .collect()
    };
    rows(parent.layer - 1, graph.children(parent))
        .or_else(|| rows(BOTTOM, graph.bottom_descendants(parent)))
        .filter(|r| !r.is_empty())
}

/// `(parent, children rows)` for every forecast parent with forecast
/// children.
pub fn parent_groups(graph: &MultiLayerGraph) -> Vec<(usize, NodeRef, Vec<usize>)> {
    graph
        .prediction_layer
        .iter()
        .enumerate()
        .filter(|(_, n)| n.layer > BOTTOM)
        .filter_map(|(r, n)| child_rows(graph, *n).map(|c| (r, *n, c)))
        .collect()
}

/// Σ children − parent for every forecast parent (rows, in prediction
/// order) and horizon step (columns) of one `[V_pr × T]` forecast.
pub fn hierarchical_error(pred: &Array2<f64>, graph: &MultiLayerGraph) -> Result<Array2<f64>> {
    if pred.nrows() != graph.prediction_layer.len() {
        return Err(Error::dim(format!(
            "{} forecast rows for {} prediction nodes",
            pred.nrows(),
            graph.prediction_layer.len()
        )));
    }
    let groups = parent_groups(graph);
    let mut out = Array2::zeros((groups.len(), pred.ncols()));
    for (g, (row, _, kids)) in groups.iter().enumerate() {
        for t in 0..pred.ncols() {
            out[(g, t)] = kids.iter().map(|&k| pred[(k, t)]).sum::<f64>() - pred[(*row, t)];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node_id: String,
    pub layer: String,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub layer: String,
    pub mae: f64,
    pub rmse: f64,
}

/// Hierarchy error of one parent at one horizon step over all samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalErrorSummary {
    pub parent: String,
    pub step: usize,
    pub mean: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub samples: usize,
    pub per_node: Vec<NodeMetrics>,
    /// Means of the per-node values.
    pub aggregate: Aggregate,
    pub by_layer: Vec<LayerAggregate>,
    pub hierarchical_error: Vec<HierarchicalErrorSummary>,
}

impl MetricsReport {
    pub fn node(&self, id: &str) -> Option<&NodeMetrics> {
        self.per_node.iter().find(|n| n.node_id == id)
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerAggregate> {
        self.by_layer.iter().find(|l| l.layer == LAYER_NAMES[layer])
    }

    pub fn max_abs_hierarchical_error(&self) -> f64 {
        self.hierarchical_error.iter().map(|h| h.max_abs).fold(0.0, f64::max)
    }
}

/// One row of the long-format hierarchy error table.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalErrorRow {
    pub t_origin: usize,
    pub step: usize,
    pub parent: String,
    pub error: f64,
}

/// Streams `(t_origin, forecast, actual)` triples in a fixed order and
/// turns them into a report.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator<'g> {
    graph: &'g MultiLayerGraph,
    groups: Vec<(usize, NodeRef, Vec<usize>)>,
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
    samples: usize,
    herr_sum: Array2<f64>,
    herr_max: Array2<f64>,
    rows: Vec<HierarchicalErrorRow>,
    horizon: usize,
}

impl<'g> MetricsAccumulator<'g> {
    pub fn new(graph: &'g MultiLayerGraph, horizon: usize) -> Self {
        let groups = parent_groups(graph);
        let v = graph.prediction_layer.len();
        MetricsAccumulator {
            graph,
            abs: vec![0.0; v],
            sq: vec![0.0; v],
            count: 0,
            samples: 0,
            herr_sum: Array2::zeros((groups.len(), horizon)),
            herr_max: Array2::zeros((groups.len(), horizon)),
            groups,
            rows: Vec::new(),
            horizon,
        }
    }

    pub fn add(&mut self, t_origin: usize, pred: &Array2<f64>, actual: &Array2<f64>) -> Result<()> {
        let v = self.graph.prediction_layer.len();
        if pred.dim() != (v, self.horizon) || actual.dim() != pred.dim() {
            return Err(Error::dim(format!(
                "forecast {:?} and actual {:?} for {v} nodes by {} steps",
                pred.dim(),
                actual.dim(),
                self.horizon
            )));
        }
        for r in 0..v {
            for t in 0..self.horizon {
                let e = pred[(r, t)] - actual[(r, t)];
                self.abs[r] += e.abs();
                self.sq[r] += e * e;
            }
        }
        self.count += self.horizon;
        self.samples += 1;
        let herr = hierarchical_error(pred, self.graph)?;
        for (g, (_, parent, _)) in self.groups.iter().enumerate() {
            for t in 0..self.horizon {
                let e = herr[(g, t)];
                self.herr_sum[(g, t)] += e;
                self.herr_max[(g, t)] = self.herr_max[(g, t)].max(e.abs());
                self.rows.push(HierarchicalErrorRow {
                    t_origin,
                    step: t + 1,
                    parent: self.graph.node_id(*parent).to_string(),
                    error: e,
                });
            }
        }
        Ok(())
    }

    pub fn finish(self, mode: &str) -> (MetricsReport, Vec<HierarchicalErrorRow>) {
        let n = self.count.max(1) as f64;
        let per_node: Vec<NodeMetrics> = self
            .graph
            .prediction_layer
            .iter()
            .enumerate()
            .map(|(r, node)| NodeMetrics {
                node_id: self.graph.node_id(*node).to_string(),
                layer: LAYER_NAMES[node.layer].to_string(),
                mae: self.abs[r] / n,
                rmse: (self.sq[r] / n).sqrt(),
            })
            .collect();
        let mean = |m: &[&NodeMetrics]| {
            let k = m.len().max(1) as f64;
            Aggregate {
                mae: m.iter().map(|x| x.mae).sum::<f64>() / k,
                rmse: m.iter().map(|x| x.rmse).sum::<f64>() / k,
            }
        };
        let all: Vec<&NodeMetrics> = per_node.iter().collect();
        let aggregate = mean(&all);
        let by_layer = (0..NUM_LAYERS)
            .filter_map(|l| {
                let m: Vec<&NodeMetrics> = per_node.iter().filter(|x| x.layer == LAYER_NAMES[l]).collect();
                (!m.is_empty()).then(|| {
                    let a = mean(&m);
                    LayerAggregate {
                        layer: LAYER_NAMES[l].to_string(),
                        mae: a.mae,
                        rmse: a.rmse,
                    }
                })
            })
            .collect();
        let s = self.samples.max(1) as f64;
        let hierarchical_error = self
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, (_, parent, _))| {
                let id = self.graph.node_id(*parent).to_string();
                let sum = &self.herr_sum;
                let max = &self.herr_max;
                (0..self.horizon).map(move |t| HierarchicalErrorSummary {
                    parent: id.clone(),
                    step: t + 1,
                    mean: sum[(g, t)] / s,
                    max_abs: max[(g, t)],
                })
            })
            .collect();
        (
            MetricsReport {
                mode: mode.to_string(),
                samples: self.samples,
                per_node,
                aggregate,
                by_layer,
                hierarchical_error,
            },
            self.rows,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_hierarchy, PredictionLayerMode, MIDDLE, TOP};
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    #[test]
    fn basic_values() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(mae(&[3.0, -4.0], &[0.0, 0.0]), 3.5);
        assert!((rmse(&[3.0, -4.0], &[0.0, 0.0]) - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn parent_ten_children_three_and_four() {
        let g = build_hierarchy(&ids(2), &[], &[0, 0], PredictionLayerMode::All).unwrap();
        // rows: n0, n1, cluster_0, total
        let pred = Array2::from_shape_vec((4, 1), vec![3.0, 4.0, 10.0, 10.0]).unwrap();
        let e = hierarchical_error(&pred, &g).unwrap();
        assert_eq!(e, Array2::from_shape_vec((2, 1), vec![-3.0, 0.0]).unwrap());
    }

    #[test]
    fn missing_middle_layer_falls_back_to_bottom_descendants() {
        let g = build_hierarchy(&ids(3), &[], &[0, 1, 0], PredictionLayerMode::BottomTop).unwrap();
        let pred = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 7.0]).unwrap();
        let groups = parent_groups(&g);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].1, NodeRef { layer: TOP, index: 0 });
        assert_eq!(hierarchical_error(&pred, &g).unwrap()[(0, 0)], -1.0);
    }

    #[test]
    fn report_totals_are_node_means() {
        let g = build_hierarchy(&ids(2), &[], &[0, 1], PredictionLayerMode::All).unwrap();
        let mut acc = MetricsAccumulator::new(&g, 2);
        let actual = Array2::zeros((5, 2));
        let p1 = Array2::from_shape_fn((5, 2), |(r, t)| (r * 2 + t) as f64);
        let p2 = Array2::from_shape_fn((5, 2), |(r, t)| -((r + t) as f64));
        acc.add(10, &p1, &actual).unwrap();
        acc.add(11, &p2, &actual).unwrap();
        let (rep, rows) = acc.finish("test");
        assert_eq!(rep.samples, 2);
        assert_eq!(rows.len(), 2 * 3 * 2);
        let m = rep.per_node.iter().map(|n| n.mae).sum::<f64>() / 5.0;
        let r = rep.per_node.iter().map(|n| n.rmse).sum::<f64>() / 5.0;
        assert_eq!(rep.aggregate.mae, m);
        assert_eq!(rep.aggregate.rmse, r);
        // node n1 (row 1): |2|,|3|,|1|,|2|
        assert_eq!(rep.node("n1").unwrap().mae, 2.0);
        assert_eq!(
            rep.layer(MIDDLE).unwrap().mae,
            (rep.per_node[2].mae + rep.per_node[3].mae) / 2.0
        );
        assert!(rep.per_node.iter().all(|n| n.mae <= n.rmse));
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(v in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let zero = vec![0.0; v.len()];
            prop_assert!(mae(&v, &zero) <= rmse(&v, &zero) * (1.0 + 1e-12) + 1e-12);
        }
    }
}
