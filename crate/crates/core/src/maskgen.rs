//! Synthetic healthy-tissue masks kept clear of tumour.
//!
//! Each mask is a union of randomly oriented ellipsoids clipped to the
//! brain. Candidates touching the dilated tumour, or whose size misses the
//! target fraction of the brain, are redrawn.

use std::f64::consts::PI;

use rand::Rng;
use voxelfill_tensor::rng::stream;

use crate::augment::{sample_augment, AugmentSpec};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::volume::{check_dims, Dims, Label, LabelMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskGenParams {
    /// Mask size as a fraction of the brain volume.
    pub frac_min: f64,
    pub frac_max: f64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Minimum clearance from tumour, in voxels.
    pub safety_radius: f64,
    pub max_attempts: usize,
}

impl Default for MaskGenParams {
    fn default() -> Self {
        Self {
            frac_min: 0.005,
            frac_max: 0.05,
            blobs_min: 1,
            blobs_max: 3,
            safety_radius: 3.0,
            max_attempts: 100,
        }
    }
}

impl MaskGenParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.frac_min && self.frac_min < self.frac_max && self.frac_max < 1.0) {
            return Err(Error::Config("need 0 < frac_min < frac_max < 1".into()));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return Err(Error::Config("need 1 <= blobs_min <= blobs_max".into()));
        }
        if !(self.safety_radius >= 0.0 && self.safety_radius.is_finite()) {
            return Err(Error::Config("safety radius must be non-negative".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.push("mask_frac_min", self.frac_min);
        kv.push("mask_frac_max", self.frac_max);
        kv.push("mask_blobs_min", self.blobs_min);
        kv.push("mask_blobs_max", self.blobs_max);
        kv.push("mask_safety_radius", self.safety_radius);
        kv.push("mask_max_attempts", self.max_attempts);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let p = Self {
            frac_min: kv.get_or("mask_frac_min", d.frac_min)?,
            frac_max: kv.get_or("mask_frac_max", d.frac_max)?,
            blobs_min: kv.get_or("mask_blobs_min", d.blobs_min)?,
            blobs_max: kv.get_or("mask_blobs_max", d.blobs_max)?,
            safety_radius: kv.get_or("mask_safety_radius", d.safety_radius)?,
            max_attempts: kv.get_or("mask_max_attempts", d.max_attempts)?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Voxels within Euclidean distance `r` of any selected voxel.
pub fn dilate(select: &[bool], dims: Dims, r: f64) -> Vec<bool> {
    let reach = r.floor() as isize;
    let r2 = r * r;
    let mut offsets = Vec::new();
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if ((dx * dx + dy * dy + dz * dz) as f64) <= r2 {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    let n = [dims.nx as isize, dims.ny as isize, dims.nz as isize];
    let mut out = vec![false; select.len()];
    for (i, _) in select.iter().enumerate().filter(|(_, &s)| s) {
        let (x, y, z) = dims.coords(i);
        for &(dx, dy, dz) in &offsets {
            let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if qx >= 0 && qy >= 0 && qz >= 0 && qx < n[0] && qy < n[1] && qz < n[2] {
                out[dims.index(qx as usize, qy as usize, qz as usize)] = true;
            }
        }
    }
    out
}

/// Uniformly distributed rotation matrix (rows are the body axes).
fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn paint_ellipsoid(
    out: &mut [bool],
    dims: Dims,
    centre: [f64; 3],
    semi: [f64; 3],
    rot: &[[f64; 3]; 3],
) {
    let reach = semi.iter().copied().fold(0.0, f64::max).ceil() as isize;
    let n = [dims.nx as isize, dims.ny as isize, dims.nz as isize];
    let lo = |k: usize| (centre[k] as isize - reach).max(0);
    let hi = |k: usize| (centre[k] as isize + reach).min(n[k] - 1);
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                let d = [
                    x as f64 - centre[0],
                    y as f64 - centre[1],
                    z as f64 - centre[2],
                ];
                let q: f64 = (0..3)
                    .map(|k| {
                        let along = rot[k][0] * d[0] + rot[k][1] * d[1] + rot[k][2] * d[2];
                        (along / semi[k]).powi(2)
                    })
                    .sum();
                if q <= 1.0 {
                    out[dims.index(x as usize, y as usize, z as usize)] = true;
                }
            }
        }
    }
}

/// Draws a healthy mask inside `brain` (any non-background label) that keeps
/// at least `safety_radius` voxels away from every masked voxel of
/// `unhealthy`.
pub fn generate_healthy_mask<R: Rng + ?Sized>(
    brain: &LabelMask,
    unhealthy: &LabelMask,
    params: &MaskGenParams,
    rng: &mut R,
) -> Result<LabelMask> {
    params.validate()?;
    check_dims(brain.dims(), unhealthy.dims())?;
    let dims = brain.dims();
    let inside = brain.support();
    let brain_count = inside.iter().filter(|&&b| b).count();
    if brain_count == 0 {
        return Err(Error::EmptyMask);
    }
    let forbidden = dilate(&unhealthy.support(), dims, params.safety_radius);
    let centres: Vec<usize> = (0..dims.len())
        .filter(|&i| inside[i] && !forbidden[i])
        .collect();
    if centres.is_empty() {
        return Err(Error::MaskGenFailure(0));
    }
    let mut blob = vec![false; dims.len()];
    for _ in 0..params.max_attempts {
        blob.fill(false);
        let fraction = rng.random_range(params.frac_min..params.frac_max);
        let blobs = rng.random_range(params.blobs_min..=params.blobs_max);
        let per_blob = fraction * brain_count as f64 / blobs as f64;
        for _ in 0..blobs {
            let (x, y, z) = dims.coords(centres[rng.random_range(0..centres.len())]);
            let ratios: [f64; 3] = [
                rng.random_range(0.6..1.4),
                rng.random_range(0.6..1.4),
                rng.random_range(0.6..1.4),
            ];
            let scale = (3.0 * per_blob / (4.0 * PI * ratios.iter().product::<f64>())).cbrt();
            let rot = random_rotation(rng);
            paint_ellipsoid(
                &mut blob,
                dims,
                [x as f64, y as f64, z as f64],
                ratios.map(|r| r * scale),
                &rot,
            );
        }
        let mut count = 0usize;
        let mut clear = true;
        for i in 0..blob.len() {
            blob[i] &= inside[i];
            if blob[i] {
                count += 1;
                clear &= !forbidden[i];
            }
        }
        let f = count as f64 / brain_count as f64;
        if clear && f >= params.frac_min && f <= params.frac_max {
            return LabelMask::from_selection(dims, &blob, Label::Healthy);
        }
    }
    Err(Error::MaskGenFailure(params.max_attempts))
}

/// `n` pairwise distinct healthy masks, each with its own augmentation.
/// Mask `k` comes from stream `("maskgen", k)` and its spec from
/// `("augment", k)`; a duplicate mask is redrawn from the next unused index.
pub fn build_augmented_set(
    brain: &LabelMask,
    unhealthy: &LabelMask,
    n: usize,
    params: &MaskGenParams,
    seed: u64,
) -> Result<Vec<(LabelMask, AugmentSpec)>> {
    let mut out: Vec<(LabelMask, AugmentSpec)> = Vec::with_capacity(n);
    let mut index = 0u64;
    let mut duplicates = 0;
    while out.len() < n {
        let mask = generate_healthy_mask(
            brain,
            unhealthy,
            params,
            &mut stream(seed, "maskgen", index),
        )?;
        index += 1;
        if out.iter().any(|(m, _)| m == &mask) {
            duplicates += 1;
            if duplicates > params.max_attempts {
                return Err(Error::MaskGenFailure(duplicates));
            }
            continue;
        }
        let spec = sample_augment(&mut stream(seed, "augment", out.len() as u64));
        out.push((mask, spec));
    }
    Ok(out)
}
