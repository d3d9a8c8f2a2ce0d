//! Randomized comparison of analytic gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{backward_batch_with_fault, finite_difference_oracle, Fault, LossConfig};
use crate::io::{Modality, TokenSequence};
use crate::matrix::Matrix;
use crate::relrep::AnchorSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub max_batch: usize,
    pub max_anchors: usize,
    pub max_tokens: usize,
    pub max_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Temperatures are drawn log-uniformly from these ranges.
    pub tau_p_range: (f64, f64),
    pub tau_range: (f64, f64),
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            max_batch: 4,
            max_anchors: 8,
            max_tokens: 6,
            max_dim: 10,
            step: 1e-5,
            tolerance: 1e-6,
            tau_p_range: (0.03, 1.0),
            tau_range: (0.07, 1.0),
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::usage("need at least one gradcheck instance"));
        }
        if self.max_batch == 0 || self.max_anchors == 0 || self.max_tokens == 0 || self.max_dim < 2 {
            return Err(Error::usage("size limits must be >= 1 (dimension >= 2)"));
        }
        for (lo, hi) in [self.tau_p_range, self.tau_range] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::usage(format!("bad temperature range [{lo}, {hi}]")));
            }
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::usage("step and tolerance must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub index: usize,
    pub batch: usize,
    pub anchors: usize,
    pub max_tokens: usize,
    pub vision_dim: usize,
    pub language_dim: usize,
    pub tau_p: f64,
    pub tau: f64,
    pub loss: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub instances: Vec<InstanceReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> &InstanceReport {
        self.instances
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one instance")
    }

    pub fn passed(&self) -> bool {
        self.instances.iter().all(|i| i.max_rel_error < self.tolerance)
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    run_gradcheck_with_fault(cfg, Fault::None)
}

#[doc(hidden)]
pub fn run_gradcheck_with_fault(cfg: &GradcheckConfig, fault: Fault) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.instances);
    for index in 0..cfg.instances {
        let batch = rng.gen_range(1.max(cfg.max_batch.min(2))..=cfg.max_batch);
        let k = rng.gen_range(1..=cfg.max_anchors);
        let dv = rng.gen_range(2..=cfg.max_dim);
        let dl = rng.gen_range(2..=cfg.max_dim);
        let loss_cfg = LossConfig::new(log_uniform(&mut rng, cfg.tau_p_range), log_uniform(&mut rng, cfg.tau_range));
        let mut side = |d: usize| -> Result<Vec<TokenSequence>> {
            (0..batch)
                .map(|i| {
                    let t = rng.gen_range(1..=cfg.max_tokens);
                    TokenSequence::new(i as u32, random_matrix(&mut rng, t, d), None)
                })
                .collect()
        };
        let v = side(dv)?;
        let l = side(dl)?;
        let av = AnchorSet::new(Modality::Vision, random_matrix(&mut rng, k, dv))?;
        let al = AnchorSet::new(Modality::Language, random_matrix(&mut rng, k, dl))?;
        let vr: Vec<&TokenSequence> = v.iter().collect();
        let lr: Vec<&TokenSequence> = l.iter().collect();

        let analytic = backward_batch_with_fault(&vr, &lr, &av, &al, &loss_cfg, fault)?;
        let numeric = finite_difference_oracle(&vr, &lr, &av, &al, &loss_cfg, cfg.step)?;
        instances.push(InstanceReport {
            index,
            batch,
            anchors: k,
            max_tokens: v.iter().chain(&l).map(TokenSequence::len).max().unwrap_or(0),
            vision_dim: dv,
            language_dim: dl,
            tau_p: loss_cfg.tau_p,
            tau: loss_cfg.tau,
            loss: analytic.loss,
            max_rel_error: analytic.max_relative_error(&numeric),
        });
    }
    Ok(GradcheckReport { instances, tolerance: cfg.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let report = run_gradcheck(&GradcheckConfig { instances: 10, seed: 3, ..Default::default() }).unwrap();
        assert!(report.passed(), "worst {:?}", report.worst());
    }

    #[test]
    fn fault_fails() {
        let cfg = GradcheckConfig { instances: 5, seed: 3, ..Default::default() };
        let report = run_gradcheck_with_fault(&cfg, Fault::DropDirectTerm).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn zero_instances_is_usage_error() {
        let cfg = GradcheckConfig { instances: 0, ..Default::default() };
        assert!(matches!(run_gradcheck(&cfg), Err(Error::Usage(_))));
    }

    #[test]
    #[ignore = "survey of error magnitudes"]
    fn survey() {
        let report = run_gradcheck(&GradcheckConfig { instances: 500, seed: 1, ..Default::default() }).unwrap();
        let mut errs: Vec<f64> = report.instances.iter().map(|i| i.max_rel_error).collect();
        errs.sort_by(f64::total_cmp);
        println!("median {:e} p99 {:e} max {:e} worst {:?}", errs[250], errs[495], errs[499], report.worst());
    }
}
