//! Central finite-difference verification of tape gradients.

use super::{NodeId, Tape, Tensor};

/// Relative error |a - n| / max(|a|, |n|, 1e-8).
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct FdEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Per-check report; a failed entry does not abort the run.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn merge(&mut self, other: FdReport) {
        self.entries.extend(other.entries);
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<44} max_rel_err {:>12.3e}  tol {:>8.1e}  {}",
                e.name,
                e.max_rel_err,
                e.tol,
                if e.pass { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn eval<F>(build: &F, leaves: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    tape.value(out).item()
}

/// Central differences (f(x+h) - f(x-h)) / 2h for every coordinate of the
/// selected leaves. The graph builder must be a pure function of the leaf
/// values. Unselected slots come back as zero tensors.
pub fn finite_diff_gradients_subset<F>(
    build: F,
    leaves: &[Tensor],
    subset: &[usize],
    h: f64,
) -> Vec<Tensor>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut out: Vec<Tensor> = leaves
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for &li in subset {
        for ci in 0..leaves[li].len() {
            let mut perturbed: Vec<Tensor> = leaves.to_vec();
            perturbed[li].data_mut()[ci] += h;
            let fp = eval(&build, &perturbed);
            perturbed[li].data_mut()[ci] -= 2.0 * h;
            let fm = eval(&build, &perturbed);
            out[li].data_mut()[ci] = (fp - fm) / (2.0 * h);
        }
    }
    out
}

/// Central differences for every coordinate of every leaf.
pub fn finite_diff_gradients<F>(build: F, leaves: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let all: Vec<usize> = (0..leaves.len()).collect();
    finite_diff_gradients_subset(build, leaves, &all, h)
}

/// Run the tape backward pass and compare the selected leaf gradients
/// against central finite differences. One report entry per checked leaf.
pub fn check_gradients_subset<F>(
    check_name: &str,
    build: F,
    leaves: &[(String, Tensor)],
    subset: &[usize],
    h: f64,
    tol: f64,
) -> FdReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let tensors: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let grads = tape
        .backward(out)
        .unwrap_or_else(|e| panic!("backward failed during {check_name}: {e}"));

    let numeric = finite_diff_gradients_subset(&build, &tensors, subset, h);

    let mut report = FdReport::default();
    for &i in subset {
        let (name, _) = &leaves[i];
        let analytic = grads.get(ids[i]);
        let mut max_rel = 0.0f64;
        for (a, n) in analytic.data().iter().zip(numeric[i].data()) {
            max_rel = max_rel.max(relative_error(*a, *n));
        }
        report.entries.push(FdEntry {
            name: format!("{check_name}/{name}"),
            max_rel_err: max_rel,
            tol,
            pass: max_rel <= tol,
        });
    }
    report
}

/// Compare every leaf gradient against central finite differences.
pub fn check_gradients<F>(
    check_name: &str,
    build: F,
    leaves: &[(String, Tensor)],
    h: f64,
    tol: f64,
) -> FdReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let all: Vec<usize> = (0..leaves.len()).collect();
    check_gradients_subset(check_name, build, leaves, &all, h, tol)
}
