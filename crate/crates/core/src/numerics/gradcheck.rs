//! Central finite-difference validation of tape gradients.
//!
//! The graph is rebuilt from scratch for every probe, so the check is valid
//! for any op mix as long as the builder closure is a pure function of its
//! leaf tensors. Discrepancies below `abs_floor` are treated as absolute
//! differences; above it the comparison is relative to the larger magnitude.

use crate::error::Result;
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Magnitude below which errors are compared absolutely against the
    /// floor, MASKING finite-difference roundoff noise on true zeros.
    pub abs_floor: f64,
    /// Evenly spaced probe cap per input tensor (0 = probe every element).
    pub max_probes_per_input: usize,
}

impl Default for GradCheck {
    fn default() -> GradCheck {
        GradCheck {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-3,
            max_probes_per_input: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

impl GradCheck {
    /// Compare tape gradients of `build(inputs)` against central differences.
    /// `build` must return a scalar loss node and treat the leaves it is
    /// handed as its only variable inputs.
    pub fn run(
        &self,
        inputs: &[Tensor],
        mut build: impl FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
    ) -> Result<GradCheckReport> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        let analytic: Vec<Tensor> = ids
            .iter()
            .zip(inputs)
            .map(|(&id, t)| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();

        let mut report = GradCheckReport {
            probes: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, input) in inputs.iter().enumerate() {
            for ei in probe_indexes(input.numel(), self.max_probes_per_input) {
                let orig = input.data()[ei];

                work[ti].data_mut()[ei] = orig + self.h;
                let up = self.eval(&work, &mut build)?;
                work[ti].data_mut()[ei] = orig - self.h;
                let down = self.eval(&work, &mut build)?;
                work[ti].data_mut()[ei] = orig;

                let numeric = (up - down) / (2.0 * self.h);
                let a = analytic[ti].data()[ei];
                let denom = a.abs().max(numeric.abs()).max(self.abs_floor);
                let err = (a - numeric).abs() / denom;
                report.probes += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some((ti, ei, a, numeric));
                }
            }
        }
        Ok(report)
    }

    fn eval(
        &self,
        inputs: &[Tensor],
        build: &mut impl FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    }
}

fn probe_indexes(n: usize, cap: usize) -> Vec<usize> {
    if cap == 0 || n <= cap {
        return (0..n).collect();
    }
    // Evenly spaced; deterministic and covers both ends.
    (0..cap).map(|k| k * (n - 1) / (cap - 1).max(1)).collect()
}
