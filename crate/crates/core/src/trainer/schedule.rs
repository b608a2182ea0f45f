use serde::{Deserialize, Serialize};

/// Reduce-on-plateau rule for the main learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: u32,
    pub best: Option<f64>,
    pub bad_epochs: u32,
}

impl Plateau {
    pub fn new(factor: f64, patience: u32) -> Self {
        Self {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Record one epoch's validation score; returns the factor to apply to
    /// the learning rate (1.0 when unchanged).
    pub fn observe(&mut self, score: f64) -> f64 {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.bad_epochs = 0;
            return 1.0;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return self.factor;
        }
        1.0
    }
}

/// Learning rates and the plateau rule that may change the main one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_initial: f64,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub plateau: Plateau,
    pub reductions: u32,
}

impl LrSchedule {
    pub fn new(lr_main: f64, lr_disc: f64, factor: f64, patience: u32) -> Self {
        Self {
            lr_initial: lr_main,
            lr_main,
            lr_disc,
            plateau: Plateau::new(factor, patience),
            reductions: 0,
        }
    }

    /// Call once per epoch with the current validation DSC.
    pub fn plateau_step(&mut self, val_dsc: f64) {
        if self.plateau.observe(val_dsc) != 1.0 {
            self.reductions += 1;
            let lr = self.lr_initial * self.plateau.factor.powi(self.reductions as i32);
            // snap to 12 significant digits
            self.lr_main = format!("{lr:.11e}").parse().unwrap_or(lr);
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.plateau.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_flat_epochs_reduce_once() {
        let mut s = LrSchedule::new(3e-3, 3e-4, 0.1, 15);
        s.plateau_step(0.5);
        for _ in 0..14 {
            s.plateau_step(0.5);
            assert_eq!(s.lr_main, 3e-3);
        }
        s.plateau_step(0.4);
        assert_eq!(s.lr_main, 3e-4);
        assert_eq!(s.reductions, 1);
        assert_eq!(s.lr_disc, 3e-4);
    }

    #[test]
    fn improvement_resets_the_streak() {
        let mut s = LrSchedule::new(3e-3, 3e-4, 0.1, 15);
        s.plateau_step(0.5);
        for _ in 0..13 {
            s.plateau_step(0.5);
        }
        s.plateau_step(0.51);
        assert_eq!(s.plateau.bad_epochs, 0);
        for _ in 0..14 {
            s.plateau_step(0.51);
        }
        assert_eq!(s.lr_main, 3e-3);
    }
}
