//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{CsnError, Result};
use crate::model::CsnModel;
use crate::params::ParamId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Smaller steps retried for entries that fail at `step`. A max or ReLU
    /// near a tie can switch branches within one step; a wrong gradient
    /// disagrees at every step.
    pub fallback_steps: Vec<f64>,
    pub tolerance: f64,
    /// Parameters with more entries than this are checked on a random subset
    /// of this size.
    pub max_entries: usize,
    /// Lower bound of the relative-error denominator, so entries whose true
    /// gradient is (near) zero are judged by absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fallback_steps: vec![1e-6, 1e-7],
            tolerance: 1e-4,
            max_entries: 200,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries that only agreed at a fallback step.
    pub refined: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Fails with the list of parameters above `tolerance`.
    pub fn ensure(&self, tolerance: f64) -> Result<()> {
        let bad: Vec<String> = self
            .params
            .iter()
            .filter(|p| !(p.max_rel_error <= tolerance))
            .map(|p| format!("{} (rel {:.3e} at {})", p.name, p.max_rel_error, p.worst_index))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CsnError::GradientCheck(bad.join(", ")))
        }
    }
}

fn central_difference(
    model: &mut CsnModel,
    samples: &[Sample<'_>],
    id: ParamId,
    i: usize,
    step: f64,
) -> Result<f64> {
    let original = model.store.value(id).data()[i];
    model.store.value_mut(id).data_mut()[i] = original + step;
    let plus = model.batch_loss(samples);
    model.store.value_mut(id).data_mut()[i] = original - step;
    let minus = model.batch_loss(samples);
    model.store.value_mut(id).data_mut()[i] = original;
    Ok((plus? - minus?) / (2.0 * step))
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the eval-mode gradient of the summed loss over `samples` with
/// central differences for every parameter.
pub fn gradient_check(model: &mut CsnModel, samples: &[Sample<'_>], config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, grads) = model.batch_gradients(samples, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ids: Vec<_> = model.store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let size = model.store.value(id).len();
        let entries: Vec<usize> = if size <= config.max_entries {
            (0..size).collect()
        } else {
            let mut e = sample(&mut rng, size, config.max_entries).into_vec();
            e.sort_unstable();
            e
        };
        let mut check = ParamCheck {
            name: model.store.get(id).name.clone(),
            checked: entries.len(),
            refined: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &entries {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let mut numeric = central_difference(model, samples, id, i, config.step)?;
            let mut rel = relative_error(analytic, numeric, config.floor);
            if rel > config.tolerance {
                for &step in &config.fallback_steps {
                    let n = central_difference(model, samples, id, i, step)?;
                    let r = relative_error(analytic, n, config.floor);
                    if r < rel {
                        (numeric, rel) = (n, r);
                    }
                }
                if rel <= config.tolerance {
                    check.refined += 1;
                }
            }
            if !(rel <= check.max_rel_error) {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport { params: out })
}
