//! Central finite-difference verification of tape gradients.
//!
//! The checker never looks at how backward passes are implemented: it
//! re-evaluates the forward closure at perturbed inputs and compares the
//! quotient against the analytic gradient. Large tensors are subsampled on
//! a fixed stride so runs stay fast and reproducible.

use crate::nn::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Max coordinates checked per tensor.
    pub max_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-9,
            max_coords: 48,
        }
    }
}

#[derive(Debug)]
pub struct GradMismatch {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn assert_ok(&self, context: &str) {
        assert!(
            self.ok(),
            "{context}: {} of {} gradient coordinates disagree with finite differences \
             (max rel err {:.3e}); first: {:?}",
            self.mismatches.len(),
            self.checked,
            self.max_rel_err,
            self.mismatches.first()
        );
    }
}

fn coords_to_check(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    let stride = len as f64 / max_coords as f64;
    let mut out: Vec<usize> = (0..max_coords)
        .map(|i| ((i as f64 + 0.5) * stride) as usize)
        .collect();
    out.dedup();
    out
}

fn compare(report: &mut GradReport, cfg: &GradCheckConfig, name: &str, coord: usize, a: f64, fd: f64) {
    report.checked += 1;
    let denom = a.abs().max(fd.abs());
    let err = (a - fd).abs();
    let rel = if denom > 0.0 { err / denom } else { 0.0 };
    if rel > report.max_rel_err {
        report.max_rel_err = rel;
    }
    if err > cfg.abs_floor && rel > cfg.rel_tol {
        report.mismatches.push(GradMismatch {
            tensor: name.to_string(),
            coord,
            analytic: a,
            fd,
            rel_err: rel,
        });
    }
}

/// Check gradients of a scalar-valued graph with respect to explicit input
/// tensors. The closure receives leaf ids in input order and must return the
/// scalar loss node.
pub fn check_inputs<F>(cfg: &GradCheckConfig, inputs: &[Tensor], f: F) -> GradReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
        let mut tape = Tape::detached();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids);
        let value = tape.value(loss).item();
        tape.backward(loss);
        let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        (value, grads)
    };

    let (_, grads) = eval(inputs);
    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads[ti].as_ref().unwrap_or(&zero);
        for ci in coords_to_check(input.len(), cfg.max_coords) {
            let orig = work[ti].data()[ci];
            let h = cfg.step * orig.abs().max(1.0);
            work[ti].data_mut()[ci] = orig + h;
            let (fp, _) = evaluate_only(&work, &f);
            work[ti].data_mut()[ci] = orig - h;
            let (fm, _) = evaluate_only(&work, &f);
            work[ti].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            compare(&mut report, cfg, &format!("input{ti}"), ci, analytic.data()[ci], fd);
        }
    }
    report
}

fn evaluate_only<F>(tensors: &[Tensor], f: &F) -> (f64, ())
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::detached();
    let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids);
    (tape.value(loss).item(), ())
}

/// Check gradients of a scalar-valued graph with respect to every trainable
/// parameter in `store`. The closure must read parameters through
/// `Tape::param` so they register as leaves.
pub fn check_params<F>(cfg: &GradCheckConfig, store: &mut ParamStore, f: F) -> GradReport
where
    F: Fn(&mut Tape, &ParamStore) -> NodeId,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape, store);
    tape.backward(loss);
    let analytic: std::collections::HashMap<usize, Tensor> =
        tape.param_grads().into_iter().collect();
    drop(tape);

    let mut report = GradReport::default();
    for pid in store.trainable_ids() {
        let len = store.value(pid).len();
        let name = store.name(pid).to_string();
        let zero = Tensor::zeros(store.value(pid).shape());
        let a = analytic.get(&pid).unwrap_or(&zero).clone();
        for ci in coords_to_check(len, cfg.max_coords) {
            let orig = store.value(pid).data()[ci];
            let h = cfg.step * orig.abs().max(1.0);
            store.value_mut(pid).data_mut()[ci] = orig + h;
            let fp = {
                let mut tape = Tape::new(store);
                let loss = f(&mut tape, store);
                tape.value(loss).item()
            };
            store.value_mut(pid).data_mut()[ci] = orig - h;
            let fm = {
                let mut tape = Tape::new(store);
                let loss = f(&mut tape, store);
                tape.value(loss).item()
            };
            store.value_mut(pid).data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            compare(&mut report, cfg, &name, ci, a.data()[ci], fd);
        }
    }
    report
}

/// Parameter ids whose gradients from the last backward pass are entirely
/// zero (or absent): the "dead branch" census.
pub fn dead_params(store: &ParamStore, grads: &[(usize, Tensor)]) -> Vec<String> {
    let by_id: std::collections::HashMap<usize, &Tensor> =
        grads.iter().map(|(pid, g)| (*pid, g)).collect();
    store
        .trainable_ids()
        .into_iter()
        .filter(|pid| match by_id.get(pid) {
            None => true,
            Some(g) => g.data().iter().all(|&x| x == 0.0),
        })
        .map(|pid| store.name(pid).to_string())
        .collect()
}
