//! Synthetic brain phantoms: smooth concentric shells in an ellipsoidal
//! brain, an optional tumour blob and seeded texture noise.

use rand_distr::{Distribution, Normal};
use voxelfill_tensor::rng::stream;

use crate::error::{Error, Result};
use crate::volume::{Dims, Label, LabelMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub shells: usize,
    /// Noise standard deviation relative to the peak intensity.
    pub noise: f64,
    pub tumor: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims::new(32, 32, 32),
            shells: 3,
            noise: 0.02,
            tumor: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub t1n: Volume,
    /// Brain voxels carry [`Label::Healthy`].
    pub brain: LabelMask,
    pub unhealthy: LabelMask,
}

const PEAK: f64 = 1000.0;

pub fn synth_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let d = spec.dims;
    if d.as_array().iter().any(|&n| n < 16) {
        return Err(Error::Config(format!(
            "phantom dims {d} must be at least 16 per axis"
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config("noise amplitude must be non-negative".into()));
    }
    let mut rng = stream(spec.seed, "phantom", 0);
    let centre = d.as_array().map(|n| (n as f64 - 1.0) / 2.0);
    let semi = d.as_array().map(|n| 0.38 * n as f64);
    // small seeded jitter keeps different seeds distinguishable
    let jitter: Normal<f64> = Normal::new(0.0, 0.5).expect("positive std");
    let centre = centre.map(|c| c + jitter.sample(&mut rng).clamp(-1.0, 1.0));
    let tumour_centre = [0, 1, 2].map(|k| centre[k] + semi[k] * if k == 0 { 0.4 } else { 0.1 });
    let tumour_r = 0.14 * d.as_array().into_iter().min().unwrap_or(16) as f64;
    let radius = |p: [f64; 3], c: [f64; 3], s: [f64; 3]| -> f64 {
        (0..3)
            .map(|k| ((p[k] - c[k]) / s[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let noise = Normal::new(0.0, spec.noise * PEAK + f64::MIN_POSITIVE).expect("positive std");
    let mut t1n = Vec::with_capacity(d.len());
    let mut brain = Vec::with_capacity(d.len());
    let mut tumour = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        let (x, y, z) = d.coords(i);
        let p = [x as f64, y as f64, z as f64];
        let rho = radius(p, centre, semi);
        let n = noise.sample(&mut rng);
        if rho > 1.0 {
            t1n.push(0.0);
            brain.push(false);
            tumour.push(false);
            continue;
        }
        let shells = spec.shells.max(1) as f64;
        let base = 0.55 + 0.25 * (std::f64::consts::PI * shells * rho).cos() + 0.15 * (1.0 - rho);
        let in_tumour = spec.tumor && radius(p, tumour_centre, [tumour_r; 3]) <= 1.0;
        let v = if in_tumour { 0.35 * base } else { base };
        t1n.push((v * PEAK + n).max(1.0));
        brain.push(true);
        tumour.push(in_tumour);
    }
    Ok(Phantom {
        t1n: Volume::raw(d, t1n)?,
        brain: LabelMask::from_selection(d, &brain, Label::Healthy)?,
        unhealthy: LabelMask::from_selection(d, &tumour, Label::Unhealthy)?,
    })
}
