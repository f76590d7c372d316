//! Permutation-invariant loss over the two speech heads, plus the
//! speech/speech/noise loss that adds an unpermuted noise term.
//!
//! Losses are plain sums over frames and bins.

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::masks::MaskSet;
use crate::{Error, Result};

/// Assignment of the two speech heads to two targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permutation {
    /// Head 0 to target 0, head 1 to target 1.
    #[default]
    Identity,
    /// Head 0 to target 1, head 1 to target 0.
    Swap,
}

impl Permutation {
    pub const ALL: [Permutation; 2] = [Permutation::Identity, Permutation::Swap];

    /// Target index for head `i`.
    pub fn apply(self, i: usize) -> usize {
        match self {
            Permutation::Identity => i,
            Permutation::Swap => 1 - i,
        }
    }

    pub fn compose(self, other: Permutation) -> Permutation {
        if self == other {
            Permutation::Identity
        } else {
            Permutation::Swap
        }
    }

    pub fn as_pair(self) -> (usize, usize) {
        (self.apply(0), self.apply(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitResult {
    pub loss: f64,
    pub permutation: Permutation,
    /// Losses for `[Identity, Swap]`.
    pub per_permutation_losses: [f64; 2],
}

fn squared_error(mask: ArrayView2<'_, f64>, mixture: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(mask).and(mixture).and(target).for_each(|&m, &x, &s| {
        let r = m * x - s;
        acc += r * r;
    });
    acc
}

fn check_dims(dim: (usize, usize), what: &str, got: (usize, usize)) -> Result<()> {
    if got != dim {
        return Err(Error::shape(format!("{what} is {got:?}, masks are {dim:?}")));
    }
    Ok(())
}

/// `min over permutations of sum_i sum_tf (m_i |x_R| - |s_perm(i)|)^2`.
/// Ties go to the identity.
pub fn pit_loss(
    masks: &MaskSet,
    mixture_ref_mag: ArrayView2<'_, f64>,
    source_mags: [ArrayView2<'_, f64>; 2],
) -> Result<PitResult> {
    let dim = (masks.frames(), masks.bins());
    check_dims(dim, "mixture magnitude", mixture_ref_mag.dim())?;
    for s in &source_mags {
        check_dims(dim, "source magnitude", s.dim())?;
    }
    let mut losses = [0.0; 2];
    for (slot, perm) in Permutation::ALL.iter().enumerate() {
        losses[slot] = (0..2)
            .map(|i| squared_error(masks.head(i), mixture_ref_mag, source_mags[perm.apply(i)]))
            .sum();
    }
    let permutation = if losses[1] < losses[0] { Permutation::Swap } else { Permutation::Identity };
    Ok(PitResult { loss: losses[0].min(losses[1]), permutation, per_permutation_losses: losses })
}

/// PIT loss on the speech heads plus `sum_tf (m_N |x_R| - |n|)^2`.
pub fn ssn_loss(
    masks: &MaskSet,
    mixture_ref_mag: ArrayView2<'_, f64>,
    source_mags: [ArrayView2<'_, f64>; 2],
    noise_mag: ArrayView2<'_, f64>,
) -> Result<f64> {
    let pit = pit_loss(masks, mixture_ref_mag, source_mags)?;
    check_dims((masks.frames(), masks.bins()), "noise magnitude", noise_mag.dim())?;
    Ok(pit.loss + squared_error(masks.noise.view(), mixture_ref_mag, noise_mag))
}
