//! Central finite-difference oracle for the tape's analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    /// Upper bound on probed elements per tensor (chosen at random).
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-3,
            max_probes: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Compares analytic gradients of `sum(f(...) * r)` (random fixed `r`)
/// against central differences, with respect to every input tensor and
/// every parameter in `store`.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Fix the projection from one probe evaluation.
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        (0..tape.value(out).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        let loss = tape.weighted_sum(out, projection.clone())?;
        Ok(tape.value(loss).data()[0])
    };

    store.zero_grads();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    let loss = tape.weighted_sum(out, projection.clone())?;
    let grads = tape.gradients(loss)?;
    tape.backward(loss, store)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
    };
    let mut record = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.max_rel_error = report.max_rel_error.max(rel);
        report.probes += 1;
    };

    let mut perturbed = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in probe_indices(&mut rng, inputs[i].len(), opts.max_probes) {
            let orig = perturbed[i].data()[j];
            perturbed[i].data_mut()[j] = orig + opts.step;
            let up = eval(store, &perturbed)?;
            perturbed[i].data_mut()[j] = orig - opts.step;
            let down = eval(store, &perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            record(analytic.data()[j], (up - down) / (2.0 * opts.step));
        }
    }

    let ids: Vec<_> = (0..store.len()).map(super::param::ParamId).collect();
    for id in ids {
        let n = store.get(id).value.len();
        for j in probe_indices(&mut rng, n, opts.max_probes) {
            let analytic = store.get(id).grad.data()[j];
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + opts.step;
            let up = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[j] = orig - opts.step;
            let down = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            record(analytic, (up - down) / (2.0 * opts.step));
        }
    }
    Ok(report)
}

fn probe_indices(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}
