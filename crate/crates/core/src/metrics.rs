//! Separation scoring: SI-SDR, best-permutation evaluation, energy leakage,
//! and checks of the nonmixing condition (no output channel carries two
//! simultaneously active utterances).

use std::ops::Range;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::pit::Permutation;
use crate::{Error, Result};

/// Reports clamp SI-SDR to `[-CAP, CAP]` dB.
pub const SI_SDR_CAP_DB: f64 = 60.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_db(v: f64) -> f64 {
    if v.is_nan() {
        -SI_SDR_CAP_DB
    } else {
        v.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB)
    }
}

/// `10 log10(||a s||^2 / ||a s - e||^2)` with `a = <e, s> / ||s||^2`, capped.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(format!("estimate has {} samples, reference {}", estimate.len(), reference.len())));
    }
    let energy = dot(reference, reference);
    if energy == 0.0 {
        return Err(Error::UndefinedMetric("SI-SDR needs a nonzero reference".into()));
    }
    let alpha = dot(estimate, reference) / energy;
    let target = alpha * alpha * energy;
    let residual: f64 = estimate.iter().zip(reference).map(|(e, s)| (alpha * s - e).powi(2)).sum();
    if residual == 0.0 {
        return Ok(if target > 0.0 { SI_SDR_CAP_DB } else { -SI_SDR_CAP_DB });
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok(clamp_db(10.0 * (target / residual).log10()))
}

fn energy_db(x: &[f64], relative_to: f64) -> f64 {
    let e = dot(x, x);
    if e == 0.0 {
        return -f64::INFINITY;
    }
    10.0 * (e / relative_to).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SI-SDR of each reference channel's estimate; `None` where the
    /// reference is silent.
    pub per_channel_si_sdr: [Option<f64>; 2],
    /// Improvement over the unprocessed reference-microphone mixture.
    pub si_sdr_improvement: [Option<f64>; 2],
    /// Estimate `permutation.apply(i)` is scored against reference `i`.
    pub permutation_used: Permutation,
    /// Filled in by callers that know the activity; see [`check_nonmixing`].
    pub nonmixing_violation_rate: Option<f64>,
    /// Energy of the estimate matched to a silent reference, in dB relative
    /// to the mixture; `None` where the reference is not silent.
    pub leakage_db: [Option<f64>; 2],
}

impl EvalReport {
    pub fn mean_si_sdr(&self) -> Option<f64> {
        mean(self.per_channel_si_sdr.iter().flatten())
    }

    pub fn mean_improvement(&self) -> Option<f64> {
        mean(self.si_sdr_improvement.iter().flatten())
    }
}

fn mean<'a>(values: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores both output-to-reference assignments and keeps the one with the
/// larger total SI-SDR over non-silent references; ties keep the identity.
pub fn best_permutation_eval(estimates: [&[f64]; 2], references: [&[f64]; 2], mixture: &[f64]) -> Result<EvalReport> {
    let len = mixture.len();
    if estimates.iter().chain(references.iter()).any(|x| x.len() != len) {
        return Err(Error::shape("estimates, references and mixture must share one length"));
    }
    let active: Vec<bool> = references.iter().map(|r| r.iter().any(|v| *v != 0.0)).collect();
    if !active.iter().any(|a| *a) {
        return Err(Error::UndefinedMetric("both references are silent".into()));
    }
    let mut best: Option<(f64, Permutation, [Option<f64>; 2])> = None;
    for perm in Permutation::ALL {
        let mut scores = [None, None];
        let mut total = 0.0;
        for i in 0..2 {
            if active[i] {
                let v = si_sdr(estimates[perm.apply(i)], references[i])?;
                scores[i] = Some(v);
                total += v;
            }
        }
        if best.as_ref().map_or(true, |(t, _, _)| total > *t) {
            best = Some((total, perm, scores));
        }
    }
    let (_, permutation, scores) = best.expect("two permutations evaluated");
    let mut improvement = [None, None];
    let mut leakage = [None, None];
    let mix_energy = dot(mixture, mixture).max(f64::MIN_POSITIVE);
    for i in 0..2 {
        if let Some(s) = scores[i] {
            improvement[i] = Some(s - si_sdr(mixture, references[i])?);
        } else {
            leakage[i] = Some(energy_db(estimates[permutation.apply(i)], mix_energy));
        }
    }
    Ok(EvalReport {
        per_channel_si_sdr: scores,
        si_sdr_improvement: improvement,
        permutation_used: permutation,
        nonmixing_violation_rate: None,
        leakage_db: leakage,
    })
}

/// Fraction of active frames in which two utterances assigned to the same
/// channel are active together. `activity[k]` holds the frames of utterance
/// `k`; the denominator is the union of all activity.
pub fn check_nonmixing(assignment: &[usize], activity: &[Range<usize>]) -> Result<f64> {
    if assignment.len() != activity.len() {
        return Err(Error::Argument(format!(
            "assignment covers {} utterances, activity {}",
            assignment.len(),
            activity.len()
        )));
    }
    let end = activity.iter().map(|r| r.end).max().unwrap_or(0);
    let mut active = vec![false; end];
    let mut violated = vec![false; end];
    for (k, rk) in activity.iter().enumerate() {
        for t in rk.clone() {
            active[t] = true;
        }
        for (l, rl) in activity.iter().enumerate().skip(k + 1) {
            if assignment[k] == assignment[l] {
                for t in rk.start.max(rl.start)..rk.end.min(rl.end) {
                    violated[t] = true;
                }
            }
        }
    }
    let n_active = active.iter().filter(|a| **a).count();
    if n_active == 0 {
        return Ok(0.0);
    }
    Ok(violated.iter().filter(|v| **v).count() as f64 / n_active as f64)
}

/// Output channel whose magnitude spectrum is most similar (cosine) to
/// `target`; `None` if either output or the target is silent.
pub fn closest_channel(target: ndarray::ArrayView1<'_, f64>, outputs: [ndarray::ArrayView1<'_, f64>; 2]) -> Option<usize> {
    let tn = target.dot(&target).sqrt();
    if tn == 0.0 {
        return None;
    }
    let sims: Vec<f64> = outputs
        .iter()
        .map(|o| {
            let on = o.dot(o).sqrt();
            if on == 0.0 {
                0.0
            } else {
                target.dot(o) / (tn * on)
            }
        })
        .collect();
    if sims[0] == sims[1] {
        return None;
    }
    Some(if sims[1] > sims[0] { 1 } else { 0 })
}

/// Per-frame routing check: for every frame in which some utterance is
/// active and audible, each audible utterance must sit on its expected
/// output channel, judged by [`closest_channel`]. Returns the fraction of
/// such frames that pass.
///
/// `images[k]` and `outputs[i]` are `frames x bins` magnitude spectrograms;
/// an utterance is audible in a frame when its energy there is within
/// `floor_db` of its mean energy over `activity[k]`.
pub fn routing_accuracy(
    images: &[ArrayView2<'_, f64>],
    outputs: [ArrayView2<'_, f64>; 2],
    expected: &[usize],
    activity: &[Range<usize>],
    floor_db: f64,
) -> Result<f64> {
    if images.len() != expected.len() || images.len() != activity.len() {
        return Err(Error::Argument("images, expected channels and activity must align".into()));
    }
    let frames = outputs[0].nrows();
    if outputs[1].dim() != outputs[0].dim() || images.iter().any(|m| m.dim() != outputs[0].dim()) {
        return Err(Error::shape("magnitude spectrograms differ in shape"));
    }
    let floor = 10f64.powf(floor_db / 10.0);
    let thresholds: Vec<f64> = images
        .iter()
        .zip(activity)
        .map(|(m, r)| {
            let r = r.start.min(frames)..r.end.min(frames);
            let n = r.len().max(1) as f64;
            let e: f64 = m.slice(ndarray::s![r, ..]).map_axis(Axis(1), |row| row.dot(&row)).sum();
            floor * e / n
        })
        .collect();
    let (mut total, mut good) = (0usize, 0usize);
    for t in 0..frames {
        let mut any = false;
        let mut ok = true;
        for (k, m) in images.iter().enumerate() {
            if !activity[k].contains(&t) {
                continue;
            }
            let row = m.row(t);
            if row.dot(&row) <= thresholds[k] {
                continue;
            }
            any = true;
            if closest_channel(row, [outputs[0].row(t), outputs[1].row(t)]) != Some(expected[k]) {
                ok = false;
            }
        }
        if any {
            total += 1;
            good += ok as usize;
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(good as f64 / total as f64)
}
