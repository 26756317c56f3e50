//! Coarse-to-fine scale schedule.

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Profile step (mm) at the finest level; it doubles per level above.
pub const DEFAULT_PROFILE_STEP_MM: f64 = 0.25;
pub const DEFAULT_MAX_ITERS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleLevel {
    /// Levels above the finest (0 = finest).
    pub j: usize,
    pub partitions: usize,
    pub patch: [usize; 3],
    pub profile_step_mm: f64,
    pub max_iters: usize,
}

/// Levels ordered coarse to fine; `finest` is the index `J` of the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub finest: usize,
    pub levels: Vec<ScaleLevel>,
}

impl ScaleSchedule {
    pub fn finest_level(&self) -> &ScaleLevel {
        &self.levels[self.levels.len() - 1]
    }

    pub fn coarsest_level(&self) -> &ScaleLevel {
        &self.levels[0]
    }

    /// Replace the per-level profile steps and iteration caps.
    pub fn with_search(mut self, finest_step_mm: f64, max_iters: usize) -> Result<Self, PipelineError> {
        if !(finest_step_mm > 0.0 && finest_step_mm.is_finite()) || max_iters == 0 {
            return Err(PipelineError::InvalidConfig(format!(
                "profile step {finest_step_mm} mm and iteration cap {max_iters} must be positive"
            )));
        }
        for l in &mut self.levels {
            l.profile_step_mm = finest_step_mm * (1u64 << l.j) as f64;
            l.max_iters = max_iters;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.levels.is_empty() || self.finest != self.levels.len() - 1 {
            return bad(format!("schedule has {} levels but finest index {}", self.levels.len(), self.finest));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.j != self.finest - i {
                return bad(format!("level {i} has j = {}, expected {}", l.j, self.finest - i));
            }
            if l.partitions == 0 || l.patch.iter().any(|&e| e < 3 || e % 2 == 0) || !(l.profile_step_mm > 0.0) || l.max_iters == 0 {
                return bad(format!("level {i} is malformed: {l:?}"));
            }
        }
        for w in self.levels.windows(2) {
            if w[1].partitions < w[0].partitions {
                return bad("partition counts must not decrease towards the finest level".into());
            }
            if w[1].patch.iter().zip(&w[0].patch).any(|(f, c)| f > c) {
                return bad("patch sizes must not grow towards the finest level".into());
            }
        }
        Ok(())
    }
}

/// Nearest odd integer to `x`, at least 3; halfway cases go up.
fn odd_at_least_3(x: f64) -> usize {
    let lower = (((x - 1.0) / 2.0).floor() * 2.0 + 1.0).max(1.0);
    let upper = lower + 2.0;
    let pick = if x - lower < upper - x { lower } else { upper };
    (pick as usize).max(3)
}

/// `n_j = ⌈2^{-j} G⌉` partitions at `j` levels above the finest; patch
/// edges halve per level below the coarsest, rounded to odd and at least 3.
pub fn build_schedule(g_finest: usize, levels: usize, coarsest_patch: [usize; 3]) -> Result<ScaleSchedule, PipelineError> {
    if levels == 0 {
        return Err(PipelineError::InvalidConfig("need at least one scale".into()));
    }
    if g_finest < levels {
        return Err(PipelineError::InvalidConfig(format!(
            "finest partition count {g_finest} is smaller than the number of scales {levels}"
        )));
    }
    if coarsest_patch.iter().any(|&e| e < 3 || e % 2 == 0) {
        return Err(PipelineError::InvalidConfig(format!("coarsest patch {coarsest_patch:?} must have odd edges >= 3")));
    }
    let finest = levels - 1;
    let levels = (0..levels)
        .map(|i| {
            let j = finest - i;
            let partitions = g_finest.div_ceil(1 << j);
            let patch = coarsest_patch.map(|e| if i == 0 { e } else { odd_at_least_3(e as f64 / (1u64 << i) as f64) });
            ScaleLevel {
                j,
                partitions,
                patch,
                profile_step_mm: DEFAULT_PROFILE_STEP_MM * (1u64 << j) as f64,
                max_iters: DEFAULT_MAX_ITERS,
            }
        })
        .collect();
    let s = ScaleSchedule { finest, levels };
    s.validate()?;
    Ok(s)
}
