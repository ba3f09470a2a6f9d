//! Central-difference verification of reverse-mode gradients.

use rand::Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over probed entries of |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    pub max_rel_err: f64,
    /// (input index, entry index) of the worst probe.
    pub worst: Option<(usize, usize)>,
    /// Set when the function or a probe produced a non-finite value.
    pub non_finite: Option<(usize, usize)>,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_err < tol
    }
}

/// Check the gradient of a scalar-valued function of one array.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> GradCheckReport
where
    F: Fn(&Tape, &Var) -> Var,
{
    grad_check_multi(
        |tape, vars| f(tape, &vars[0]),
        std::slice::from_ref(x),
        eps,
        None,
        &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
    )
}

use rand::SeedableRng;

/// Check gradients w.r.t. several inputs, optionally probing only a random
/// subset of entries per input (all entries when `probes_per_input` is None).
pub fn grad_check_multi<F, R>(
    f: F,
    xs: &[Tensor],
    eps: f64,
    probes_per_input: Option<usize>,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&Tape, &[Var]) -> Var,
    R: Rng,
{
    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = f(&tape, &vars);
    assert!(y.shape().iter().product::<usize>() == 1, "grad_check target must be scalar");
    let y0 = y.item();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        non_finite: None,
        probes: 0,
    };
    if !y0.is_finite() {
        report.non_finite = Some((usize::MAX, 0));
        return report;
    }
    y.backward();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs.iter())
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs).item()
    };

    let mut work: Vec<Tensor> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        let n = x.numel();
        let entries: Vec<usize> = match probes_per_input {
            Some(k) if k < n => {
                let mut idx: Vec<usize> = (0..n).collect();
                // Partial Fisher-Yates to pick k distinct entries.
                for j in 0..k {
                    let pick = rng.gen_range(j..n);
                    idx.swap(j, pick);
                }
                idx.truncate(k);
                idx
            }
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite = Some((i, j));
                return report;
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report
}
