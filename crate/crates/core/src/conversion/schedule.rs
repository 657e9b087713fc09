use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauScope {
    /// Only the layer being trained anneals; earlier LPA layers sit at `tau_end`.
    CurrentLayer,
    /// Every LPA layer follows the same schedule.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    /// Steps in the phase; step `steps - 1` reaches `tau_end`.
    pub steps: usize,
    pub scope: TauScope,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            tau_start: 3.0,
            tau_end: 0.5,
            steps: 100,
            scope: TauScope::CurrentLayer,
        }
    }
}

impl CurriculumSchedule {
    pub fn with_steps(self, steps: usize, scope: TauScope) -> Self {
        Self { steps, scope, ..self }
    }
}

/// Linear interpolation from `tau_start` to `tau_end`; steps past the end
/// hold `tau_end`.
pub fn temperature_at(step: usize, s: &CurriculumSchedule) -> f64 {
    if s.steps <= 1 {
        return s.tau_start;
    }
    let frac = (step as f64 / (s.steps - 1) as f64).min(1.0);
    s.tau_start + (s.tau_end - s.tau_start) * frac
}

/// Per-layer temperatures at `step`. Attention layers get 1.0 (unused).
pub fn taus_for(s: &CurriculumSchedule, step: usize, current: usize, lpa: &[bool]) -> Vec<f64> {
    let tau = temperature_at(step, s);
    lpa.iter()
        .enumerate()
        .map(|(i, &is_lpa)| match (is_lpa, s.scope) {
            (false, _) => 1.0,
            (true, TauScope::Global) => tau,
            (true, TauScope::CurrentLayer) if i == current => tau,
            (true, TauScope::CurrentLayer) => s.tau_end,
        })
        .collect()
}
