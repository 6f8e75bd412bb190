//! Central finite-difference gradient oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamScope, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
/// Gradients smaller than this are left out of the relative-error summary.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Uniform values in [-1, 1].
pub fn uniform_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff < ABS_TOL || diff / analytic.abs().max(numeric.abs()) < REL_TOL
}

/// Compare tape gradients of every leaf entry against central differences.
/// Panics on the first disagreement.
pub fn check_leaf_grads<F>(leaves: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| tape.grad(*v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &v).unwrap();
        t.value(l).data[0]
    };
    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.len() {
            let mut probe = leaves.to_vec();
            probe[li].data[j] = leaf.data[j] + EPS;
            let up = eval(&probe);
            probe[li].data[j] = leaf.data[j] - EPS;
            let down = eval(&probe);
            let numeric = (up - down) / (2.0 * EPS);
            assert!(
                agrees(analytic[li][j], numeric),
                "leaf {li} entry {j}: tape {} vs finite difference {numeric}",
                analytic[li][j]
            );
        }
    }
}

/// Outcome of [`check_store_grads`].
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: usize,
    /// Largest relative error among entries whose gradient exceeds
    /// [`MAGNITUDE_FLOOR`].
    pub max_relative_error: f64,
    /// `path[index]: tape vs numeric` for every disagreeing entry.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check the tape gradient of every entry of every parameter bound by
/// `build` against central differences of the scalar it returns.
pub fn check_store_grads<F>(store: &ParameterStore, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &mut ParamScope<'_>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut scope = ParamScope::new(store);
    let loss = build(&mut tape, &mut scope)?;
    tape.backward(loss)?;
    let bound: Vec<(String, Var)> = scope
        .bound_paths()
        .map(|p| (p.clone(), scope.var(p).unwrap()))
        .collect();

    let eval = |probe: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let mut s = ParamScope::frozen(probe);
        let l = build(&mut t, &mut s)?;
        Ok(t.value(l).data[0])
    };
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (path, var) in bound {
        let len = store.get(&path)?.len();
        let analytic = tape.grad(var).map_or(vec![0.0; len], <[f64]>::to_vec);
        for j in 0..len {
            let x = store.get(&path)?.data[j];
            probe.get_mut(&path)?.data[j] = x + EPS;
            let up = eval(&probe)?;
            probe.get_mut(&path)?.data[j] = x - EPS;
            let down = eval(&probe)?;
            probe.get_mut(&path)?.data[j] = x;
            let numeric = (up - down) / (2.0 * EPS);
            let magnitude = analytic[j].abs().max(numeric.abs());
            if magnitude > MAGNITUDE_FLOOR {
                let rel = (analytic[j] - numeric).abs() / magnitude;
                report.max_relative_error = report.max_relative_error.max(rel);
            }
            if !agrees(analytic[j], numeric) {
                report
                    .failures
                    .push(format!("{path}[{j}]: tape {} vs numeric {numeric}", analytic[j]));
            }
            report.entries += 1;
        }
    }
    Ok(report)
}
