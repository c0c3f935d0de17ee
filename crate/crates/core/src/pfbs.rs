//! Progressive foreground-balanced sampling.
//!
//! A schedule decides, per 1-based epoch, how many foreground patches
//! (containing change) and background patches (no change) are trained on.
//! Foregrounds are always used in full; backgrounds are withheld, then
//! admitted all at once or in equal linear steps until the whole pool is in.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Whole dataset every epoch.
    Normal,
    /// Foreground only for the first `x` epochs, then everything.
    FixedX { x: usize },
    /// Backgrounds ramp in linearly over the first `y` epochs.
    LinearY { y: usize },
    /// Foreground only for `x` epochs, then a linear ramp over `y` epochs.
    FixedXLinearY { x: usize, y: usize },
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Policy::Normal => true,
            Policy::FixedX { x } => x >= 1,
            Policy::LinearY { y } => y >= 1,
            Policy::FixedXLinearY { x, y } => x >= 1 && y >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{self}: X and Y must be at least 1")))
        }
    }

    /// First epoch from which the full dataset is used.
    pub fn convergence_epoch(&self) -> usize {
        match *self {
            Policy::Normal => 1,
            Policy::FixedX { x } => x + 1,
            Policy::LinearY { y } => y + 1,
            Policy::FixedXLinearY { x, y } => x + y + 1,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Policy::Normal => write!(f, "normal"),
            Policy::FixedX { x } => write!(f, "fixed-{x}"),
            Policy::LinearY { y } => write!(f, "linear-{y}"),
            Policy::FixedXLinearY { x, y } => write!(f, "fixed-{x}-linear-{y}"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    /// Parses `normal`, `fixed-X`, `linear-Y` and `fixed-X-linear-Y`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognised sampling policy `{s}`"));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let lower = s.trim().to_ascii_lowercase();
        let parts: Vec<&str> = lower.split('-').collect();
        let policy = match parts.as_slice() {
            ["normal"] => Policy::Normal,
            ["fixed", x] => Policy::FixedX { x: num(x)? },
            ["linear", y] => Policy::LinearY { y: num(y)? },
            ["fixed", x, "linear", y] => Policy::FixedXLinearY { x: num(x)?, y: num(y)? },
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub policy: Policy,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    pub fg_count: usize,
    pub bg_count: usize,
}

impl EpochPlan {
    pub fn total(&self) -> usize {
        self.fg_count + self.bg_count
    }
}

/// Background count after `steps` linear increments of `⌊n_bg / y⌋`.
fn ramp(steps: usize, n_bg: usize, y: usize) -> usize {
    (steps * (n_bg / y)).min(n_bg)
}

/// Patch counts for a 1-based `epoch`.
pub fn epoch_plan(policy: Policy, epoch: usize, n_fg: usize, n_bg: usize) -> EpochPlan {
    let epoch = epoch.max(1);
    let bg_count = match policy {
        Policy::Normal => n_bg,
        Policy::FixedX { x } => {
            if epoch <= x {
                0
            } else {
                n_bg
            }
        }
        Policy::LinearY { y } => {
            if epoch <= y {
                ramp(epoch - 1, n_bg, y)
            } else {
                n_bg
            }
        }
        Policy::FixedXLinearY { x, y } => {
            if epoch <= x {
                0
            } else if epoch <= x + y {
                ramp(epoch - x, n_bg, y)
            } else {
                n_bg
            }
        }
    };
    EpochPlan { epoch, fg_count: n_fg, bg_count }
}

/// Plans for epochs `1..=epochs`.
pub fn full_plan(policy: Policy, epochs: usize, n_fg: usize, n_bg: usize) -> Vec<EpochPlan> {
    (1..=epochs).map(|e| epoch_plan(policy, e, n_fg, n_bg)).collect()
}

/// Audit CSV with columns `epoch,fg_count,bg_count,total`.
pub fn plan_csv(plans: &[EpochPlan]) -> String {
    let mut out = String::from("epoch,fg_count,bg_count,total\n");
    for p in plans {
        out.push_str(&format!("{},{},{},{}\n", p.epoch, p.fg_count, p.bg_count, p.total()));
    }
    out
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Ordered training manifest for one epoch.
///
/// All foreground ids are used. Backgrounds are the first `bg_count` entries
/// of one permutation of `bg_pool` fixed by `seed`, so the set only grows
/// from epoch to epoch. The combined list is shuffled with a seed derived
/// from `(seed, epoch)`.
pub fn select_samples<T: Clone>(plan: &EpochPlan, fg_pool: &[T], bg_pool: &[T], seed: u64) -> Result<Vec<T>> {
    if plan.fg_count > fg_pool.len() || plan.bg_count > bg_pool.len() {
        return Err(Error::Bound(format!(
            "plan ({}, {}) exceeds pools ({}, {})",
            plan.fg_count,
            plan.bg_count,
            fg_pool.len(),
            bg_pool.len()
        )));
    }
    let mut bg_order: Vec<usize> = (0..bg_pool.len()).collect();
    bg_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut ids: Vec<T> = fg_pool[..plan.fg_count].to_vec();
    ids.extend(bg_order[..plan.bg_count].iter().map(|&i| bg_pool[i].clone()));
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, plan.epoch)));
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FG: usize = 1200;
    const BG: usize = 3336;

    #[test]
    fn linear_ramp_steps() {
        let p = epoch_plan(Policy::LinearY { y: 15 }, 2, FG, BG);
        assert_eq!((p.fg_count, p.bg_count), (1200, 222));
        assert_eq!(epoch_plan(Policy::LinearY { y: 15 }, 1, FG, BG).bg_count, 0);
        assert_eq!(epoch_plan(Policy::LinearY { y: 15 }, 15, FG, BG).bg_count, 14 * 222);
        assert_eq!(epoch_plan(Policy::LinearY { y: 15 }, 16, FG, BG).bg_count, BG);
    }

    #[test]
    fn fixed_then_linear() {
        let policy = Policy::FixedXLinearY { x: 10, y: 10 };
        assert_eq!(epoch_plan(policy, 10, FG, BG).bg_count, 0);
        assert_eq!(epoch_plan(policy, 11, FG, BG).bg_count, 333);
        assert_eq!(epoch_plan(policy, 20, FG, BG).bg_count, 3330);
        assert_eq!(epoch_plan(policy, 21, FG, BG).bg_count, BG);
    }

    #[test]
    fn fixed_switches_after_x() {
        let policy = Policy::FixedX { x: 15 };
        assert_eq!(epoch_plan(policy, 15, FG, BG).bg_count, 0);
        assert_eq!(epoch_plan(policy, 16, FG, BG).bg_count, BG);
        for e in [1, 7, 100] {
            assert_eq!(epoch_plan(Policy::Normal, e, FG, BG).total(), FG + BG);
        }
    }

    #[test]
    fn empty_background_pool_collapses_to_normal() {
        for policy in [Policy::FixedX { x: 3 }, Policy::LinearY { y: 4 }, Policy::FixedXLinearY { x: 2, y: 2 }] {
            for e in 1..10 {
                assert_eq!(epoch_plan(policy, e, 5, 0), epoch_plan(Policy::Normal, e, 5, 0));
            }
        }
    }

    #[test]
    fn parse_and_display_roundtrip() {
        for s in ["normal", "fixed-15", "linear-10", "fixed-5-linear-10"] {
            assert_eq!(s.parse::<Policy>().unwrap().to_string(), s);
        }
        assert!("fixed-0".parse::<Policy>().is_err());
        assert!("ramp-3".parse::<Policy>().is_err());
    }

    #[test]
    fn selection_is_deterministic_and_bounded() {
        let fg: Vec<usize> = (0..10).collect();
        let bg: Vec<usize> = (100..130).collect();
        let plan = EpochPlan { epoch: 3, fg_count: 10, bg_count: 7 };
        let a = select_samples(&plan, &fg, &bg, 9).unwrap();
        assert_eq!(a.len(), 17);
        assert_eq!(a, select_samples(&plan, &fg, &bg, 9).unwrap());
        let too_many = EpochPlan { bg_count: 31, ..plan };
        assert!(matches!(select_samples(&too_many, &fg, &bg, 9), Err(Error::Bound(_))));
    }

    #[test]
    fn csv_layout() {
        let csv = plan_csv(&full_plan(Policy::FixedX { x: 1 }, 2, 3, 4));
        assert_eq!(csv, "epoch,fg_count,bg_count,total\n1,3,0,3\n2,3,4,7\n");
    }
}
