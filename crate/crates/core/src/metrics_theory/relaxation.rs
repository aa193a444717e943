use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::relaxation_gap;
use crate::rng::{stream_rng, Stream, StreamRng};

/// Gaps below this count as violations of the averaged-teacher bound.
pub const GAP_SLACK: f64 = -1e-12;

/// Random-draw sweep of the relaxation gap
/// `mean_m ℓ_KD(a_m, b) − ℓ_KD(mean_m a_m, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSweep {
    pub num_draws: usize,
    pub teachers: RangeInclusive<usize>,
    pub classes: RangeInclusive<usize>,
    pub taus: Vec<f64>,
    /// Standard deviation of the i.i.d. normal logits.
    pub logit_std: f64,
    /// Every `n`-th draw uses identical teachers (0 disables).
    pub equal_teacher_every: usize,
    pub seed: u64,
}

impl Default for RelaxationSweep {
    fn default() -> Self {
        Self {
            num_draws: 10_000,
            teachers: 2..=8,
            classes: 2..=10,
            taus: vec![0.5, 1.0, 4.0],
            logit_std: 1.0,
            equal_teacher_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxationDraw {
    pub teachers: Vec<Vec<f64>>,
    pub student: Vec<f64>,
    pub tau: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelaxationReport {
    pub draws: usize,
    pub equal_teacher_draws: usize,
    pub min_gap: f64,
    /// Smallest gap among the identical-teacher draws.
    pub min_equal_teacher_gap: Option<f64>,
    pub violations: usize,
    /// The draw with the smallest gap.
    pub worst: Option<RelaxationDraw>,
}

impl RelaxationReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub fn check_relaxation_sweep(sweep: &RelaxationSweep) -> Result<RelaxationReport> {
    if sweep.teachers.is_empty() || sweep.classes.is_empty() || sweep.taus.is_empty() {
        return Err(Error::invalid("relaxation sweep ranges must be nonempty"));
    }
    if *sweep.teachers.start() == 0 || *sweep.classes.start() == 0 {
        return Err(Error::invalid("relaxation sweep needs >= 1 teacher and >= 1 class"));
    }
    let normal = Normal::new(0.0, sweep.logit_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = stream_rng(sweep.seed, Stream::Check, &[1]);
    let mut report = RelaxationReport {
        draws: 0,
        equal_teacher_draws: 0,
        min_gap: f64::INFINITY,
        min_equal_teacher_gap: None,
        violations: 0,
        worst: None,
    };
    for i in 0..sweep.num_draws {
        let m = rng.random_range(sweep.teachers.clone());
        let k = rng.random_range(sweep.classes.clone());
        let tau = sweep.taus[rng.random_range(0..sweep.taus.len())];
        let draw = |rng: &mut StreamRng| -> Vec<f64> { (0..k).map(|_| normal.sample(rng)).collect() };
        let equal = sweep.equal_teacher_every > 0 && i % sweep.equal_teacher_every == 0;
        let teachers: Vec<Vec<f64>> = if equal {
            vec![draw(&mut rng); m]
        } else {
            (0..m).map(|_| draw(&mut rng)).collect()
        };
        let student = draw(&mut rng);
        let gap = relaxation_gap(&teachers, &student, tau)?;
        report.draws += 1;
        if equal {
            report.equal_teacher_draws += 1;
            report.min_equal_teacher_gap = Some(report.min_equal_teacher_gap.map_or(gap, |g: f64| g.min(gap)));
        }
        if gap < GAP_SLACK {
            report.violations += 1;
        }
        if gap < report.min_gap {
            report.min_gap = gap;
            report.worst = Some(RelaxationDraw {
                teachers,
                student,
                tau,
                gap,
            });
        }
    }
    Ok(report)
}
