//! Central finite-difference checks of analytic gradients.
//!
//! The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the floor keeps
//! near-zero gradients from turning rounding noise into large ratios.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Result as AgResult, Tensor, Var};
use crate::dataset::TokenSequence;
use crate::models::{Mode, Model, ModelError};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// The worst coordinate seen by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    fn record(&mut self, input: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some(Worst {
                input: input.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst;
        }
    }
}

/// Checks `f` — a scalar function of `inputs` built on a fresh graph — at
/// every coordinate of every input.
pub fn check_fn(
    inputs: &[Tensor],
    step: f64,
    floor: f64,
    f: impl Fn(&mut Graph, &[Var]) -> AgResult<Var>,
) -> AgResult<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<AgResult<_>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let mut report = GradCheckReport::new();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for (e, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> AgResult<f64> {
                let mut g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, tj)| {
                        let mut tj = tj.clone();
                        if j == k {
                            tj.data_mut()[e] += delta;
                        }
                        g2.leaf(tj, false)
                    })
                    .collect::<AgResult<_>>()?;
                let l = f(&mut g2, &vs)?;
                Ok(g2.value(l).data()[0])
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            report.record(&format!("input {k}"), e, a, numeric, floor);
        }
    }
    Ok(report)
}

/// Checks the cross-entropy gradient of a whole model with respect to every
/// trainable parameter. Dropout runs in training mode with a mask fixed by
/// `dropout_seed`, so the perturbed passes see the same mask.
pub fn check_model(
    model: &Model,
    seq: &TokenSequence,
    image: Option<&[f32]>,
    target: usize,
    dropout_seed: u64,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport, ModelError> {
    let rng = || ChaCha8Rng::seed_from_u64(dropout_seed);
    let (_, grads) = model.loss_and_gradients(seq, image, target, Mode::Train, &mut rng())?;
    let mut report = GradCheckReport::new();
    let mut probe = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(analytic) = &grads[k] else { continue };
        let name = model.params().get(id).name.clone();
        for (e, &a) in analytic.iter().enumerate() {
            let original = probe.params().get(id).value.data()[e];
            let mut eval = |delta: f64| {
                probe.params_mut().values_mut(id)[e] = original + delta;
                probe.loss(seq, image, target, Mode::Train, &mut rng())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            probe.params_mut().values_mut(id)[e] = original;
            report.record(&name, e, a, numeric, floor);
        }
    }
    Ok(report)
}
