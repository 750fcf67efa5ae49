//! Label annealing: the labeling rate decays inversely with elapsed steps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `c / (T + c)`.
    Smooth,
    /// The smooth factor frozen at the start of each fixed-length window.
    Stepped,
}

/// Rate multiplier at environment step `t`.
pub fn annealed_label_rate(kind: ScheduleKind, c: f64, window: f64, t: f64) -> f64 {
    let at = match kind {
        ScheduleKind::Smooth => t,
        ScheduleKind::Stepped => (t / window).floor() * window,
    };
    c / (at + c)
}

/// Integral of the rate multiplier over `[0, t]`.
pub fn cumulative_factor(kind: ScheduleKind, c: f64, window: f64, t: f64) -> f64 {
    match kind {
        ScheduleKind::Smooth => c * (t / c).ln_1p(),
        ScheduleKind::Stepped => {
            let full = (t / window).floor();
            let mut total = 0.0;
            let mut i = 0.0;
            while i < full {
                total += window * c / (i * window + c);
                i += 1.0;
            }
            total + (t - full * window) * c / (full * window + c)
        }
    }
}

/// How many labels should have been requested by a given step: the initial
/// batch, then the online budget spread along the annealing curve so that it
/// is exhausted exactly at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSchedule {
    pub kind: ScheduleKind,
    pub constant: f64,
    pub window: f64,
    pub initial: usize,
    pub online: usize,
    pub horizon: f64,
}

impl LabelSchedule {
    pub fn new(kind: ScheduleKind, constant: f64, window: f64, initial: usize, online: usize, horizon: f64) -> Self {
        Self { kind, constant, window, initial, online, horizon }
    }

    pub fn factor(&self, t: f64) -> f64 {
        annealed_label_rate(self.kind, self.constant, self.window, t)
    }

    /// Labels per environment step at `t`.
    pub fn rate(&self, t: f64) -> f64 {
        self.base_rate() * self.factor(t)
    }

    pub fn base_rate(&self) -> f64 {
        let total = cumulative_factor(self.kind, self.constant, self.window, self.horizon);
        if total > 0.0 {
            self.online as f64 / total
        } else {
            0.0
        }
    }

    pub fn total(&self) -> usize {
        self.initial + self.online
    }

    /// Cumulative labels due by step `t`, never above the budget.
    pub fn labels_due(&self, t: f64) -> usize {
        if t >= self.horizon {
            return self.total();
        }
        let expected = self.base_rate() * cumulative_factor(self.kind, self.constant, self.window, t.max(0.0));
        self.initial + ((expected + 1e-9).floor() as usize).min(self.online)
    }
}
