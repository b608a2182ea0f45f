//! Feed a validation curve through the reduce-on-plateau schedule and watch
//! the learning rates.

use ugda::trainer::{LrSchedule, TrainConfig};

fn main() {
    let c = TrainConfig::default();
    let mut s = LrSchedule::new(c.lr_main, c.lr_disc, c.plateau_factor, c.plateau_patience);
    // rises for 10 epochs, stalls for 20, then rises again
    let curve = (0..10)
        .map(|e| 0.6 + 0.02 * e as f64)
        .chain(std::iter::repeat_n(0.8, 20))
        .chain((0..10).map(|e| 0.81 + 0.005 * e as f64));
    for (epoch, val) in curve.enumerate() {
        let before = s.lr_main;
        s.plateau_step(val);
        if s.lr_main != before {
            println!("epoch {epoch:>2}: val {val:.3}, lr_main {before} -> {}", s.lr_main);
        }
    }
    println!("final lr_main {}, lr_disc {}, {} reductions", s.lr_main, s.lr_disc, s.reductions);
}
