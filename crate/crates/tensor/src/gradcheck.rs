//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of the backward rules it audits.

use rand::Rng;

use crate::error::Result;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    /// Perturbation step.
    pub h: f64,
    /// Denominator floor of the relative error. Gradients whose magnitude is
    /// far below the forward pass's round-off level are compared absolutely.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub probes: Vec<Probe>,
    /// Coordinates whose ±h evaluations crossed a non-differentiable point
    /// (different branch signature), where central differences are meaningless.
    pub skipped: usize,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn all_within(&self, tol: f64) -> bool {
        self.probes.iter().all(|p| p.rel_error < tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Round-robin over tensors, uniform index within each, so that small
/// tensors (biases, slopes) are probed as often as large kernels.
pub fn sample_coords<R: Rng + ?Sized>(
    params: &[Tensor],
    n: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    (0..n)
        .map(|k| {
            let t = k % params.len();
            (t, rng.random_range(0..params[t].numel()))
        })
        .collect()
}

/// Compares `analytic` against central differences of `eval` at `coords`.
///
/// `eval` returns the scalar loss and the graph's branch signature. Probes
/// are collected until `target` valid ones exist or the coordinates run out.
pub fn check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    target: usize,
    cfg: FdConfig,
    mut eval: F,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, u64)>,
{
    let (_, base_sig) = eval(params)?;
    let mut work = params.to_vec();
    let mut report = FdReport::default();
    for &(t, i) in coords {
        if report.probes.len() >= target {
            break;
        }
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + cfg.h;
        let (fp, sp) = eval(&work)?;
        work[t].data_mut()[i] = orig - cfg.h;
        let (fm, sm) = eval(&work)?;
        work[t].data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.h);
        let a = analytic[t].data()[i];
        report.probes.push(Probe {
            tensor: t,
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, cfg.floor),
        });
    }
    Ok(report)
}
