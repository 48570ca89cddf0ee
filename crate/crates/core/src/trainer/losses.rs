use rap_autodiff::{Float, Var};

use crate::error::{RapError, Result};

/// `r_t = -alpha * val_loss_t`.
pub fn compute_rewards(val_losses: &[f64], alpha: f64) -> Vec<f64> {
    val_losses.iter().map(|l| -alpha * l).collect()
}

/// Score-function loss
/// `-(1 / (N T)) * sum_i sum_t (r_it - b_t) * log_prob_it`.
///
/// `log_probs[i][t]` is the summed log-density of sequence `i` at step
/// `t` (a scalar on the tape); rewards and the optional per-step baseline
/// are constants.
pub fn reinforce_loss<'t, F: Float>(
    log_probs: &[Vec<Var<'t, F>>],
    rewards: &[Vec<f64>],
    baseline: Option<&[f64]>,
) -> Result<Var<'t, F>> {
    let n = log_probs.len();
    if n == 0 || rewards.len() != n {
        return Err(RapError::InvalidConfig(format!(
            "reinforce loss over {n} sequences with {} reward rows",
            rewards.len()
        )));
    }
    let steps = log_probs[0].len();
    let mut acc: Option<Var<'t, F>> = None;
    for (lps, rs) in log_probs.iter().zip(rewards) {
        if lps.len() != steps || rs.len() != steps || steps == 0 {
            return Err(RapError::InvalidConfig("ragged reinforce inputs".into()));
        }
        for (t, (lp, r)) in lps.iter().zip(rs).enumerate() {
            let adv = r - baseline.map_or(0.0, |b| b[t]);
            let term = lp.scale(F::from_f64_lossy(adv))?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
    }
    let total = acc.expect("at least one term");
    Ok(total.scale(F::from_f64_lossy(-1.0 / (n * steps) as f64))?)
}

/// `l_rein + l_train`, refusing non-finite inputs.
pub fn total_loss<'t, F: Float>(rein: &Var<'t, F>, train: &Var<'t, F>) -> Result<Var<'t, F>> {
    for (what, v) in [("reinforce loss", rein), ("train loss", train)] {
        let x = scalar(v);
        if !x.is_finite() {
            return Err(RapError::NonFinite { what, value: x });
        }
    }
    Ok(rein.add(train)?)
}

pub(crate) fn scalar<F: Float>(v: &Var<'_, F>) -> f64 {
    v.value().data().first().map_or(f64::NAN, |x| x.as_f64())
}
