//! Per-epoch learning-rate and dropout schedules plus early stopping.

use serde::{Deserialize, Serialize};

use crate::config::ScheduleConfig;

/// `max(lr0 · decay^⌊e / every⌋, floor)`, rounded to 12 significant digits
/// so decimal schedules land on their decimal values.
pub fn lr_at_epoch(cfg: &ScheduleConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.lr_decay_every) as i32;
    round_sig(cfg.lr0 * cfg.lr_decay.powi(steps)).max(cfg.lr_floor)
}

fn round_sig(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// `min(step · ⌊e / every⌋, cap)`.
pub fn dropout_at_epoch(cfg: &ScheduleConfig, epoch: usize) -> f64 {
    round_sig(cfg.dropout_step * (epoch / cfg.dropout_every) as f64).min(cfg.dropout_cap)
}

/// Tracks the best validation loss and signals a stop after `patience`
/// epochs without improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch; returns `true` when it set a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        let improved = self.best.is_none_or(|b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_table() {
        let c = ScheduleConfig::default();
        assert_eq!(lr_at_epoch(&c, 0), 1e-4);
        assert_eq!(lr_at_epoch(&c, 19), 1e-4);
        assert_eq!(lr_at_epoch(&c, 20), 7.5e-5);
        assert_eq!(lr_at_epoch(&c, 40), 5.625e-5);
        assert_eq!(lr_at_epoch(&c, 180), 1e-5);
        assert_eq!(dropout_at_epoch(&c, 0), 0.0);
        assert_eq!(dropout_at_epoch(&c, 25), 0.05);
        assert_eq!(dropout_at_epoch(&c, 150), 0.3);
        assert_eq!(dropout_at_epoch(&c, 1000), 0.3);
    }

    #[test]
    fn plateau_stops_after_patience() {
        let mut es = EarlyStopping::new(3);
        assert!(es.observe(0, 1.0));
        assert!(!es.observe(1, 1.0));
        assert!(!es.observe(2, 2.0));
        assert!(!es.should_stop());
        assert!(!es.observe(3, 1.5));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch, 0);
    }
}
