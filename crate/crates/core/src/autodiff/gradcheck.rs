//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Parameters larger than this are checked on a seeded subsample of
    /// this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
    /// Deliberately broken backward rule, see [`Graph::with_fault`].
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, max_coords: 1000, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    let v = g.value(root);
    if v.numel() != 1 || !v.item().is_finite() {
        return Err(Error::NumericFailure(format!(
            "gradcheck function returned {:?}",
            v
        )));
    }
    Ok(v.item())
}

/// Compares the tape's gradient of `f` against central differences
/// `(f(p+εe) − f(p−εe)) / 2ε` for every checked coordinate of every
/// parameter.
pub fn gradcheck<F>(f: F, params: &[Tensor], opts: &GradcheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("gradcheck eps must be positive, got {}", opts.eps)));
    }
    let mut g = match opts.fault {
        Some((kind, delta)) => Graph::with_fault(kind, delta),
        None => Graph::new(),
    };
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    if !g.value(root).is_finite() {
        return Err(Error::NumericFailure("gradcheck function is not finite".into()));
    }
    let grads = g.backward(root)?;

    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        let mut coords: Vec<usize> = (0..p.numel()).collect();
        if coords.len() > opts.max_coords {
            Rng::derive(opts.seed, pi as u64).shuffle(&mut coords);
            coords.truncate(opts.max_coords);
            coords.sort_unstable();
        }
        for idx in coords {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + opts.eps;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[idx] = orig - opts.eps;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let rel_error = relative_error(a, numeric);
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.entries.push(GradEntry { param: pi, index: idx, analytic: a, numeric, rel_error });
        }
    }
    Ok(report)
}
