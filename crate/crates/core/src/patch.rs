//! Brain-covering patches: cropping, network inputs and stitching.

use voxelfill_tensor::Tensor;

use crate::error::{Error, Result};
use crate::unet::UNetConfig;
use crate::volume::{
    check_dims, normalize_unit, rescale_signed, void_image, Dims, Label, LabelMask, RangeTag,
    Volume,
};

/// Where a patch sits in its full volume, and the intensity its
/// normalization divided by.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    pub dims: Dims,
    pub offset: [usize; 3],
    pub intensity_max: f64,
}

/// Patch size used for full-resolution scans.
pub const DEFAULT_PATCH: Dims = Dims::new(128, 128, 96);

/// Rejects patch dims the network cannot downsample evenly.
pub fn check_divisible(patch: Dims, cfg: &UNetConfig) -> Result<()> {
    let d = cfg.divisor();
    if patch.as_array().iter().any(|&n| n == 0 || n % d != 0) {
        return Err(Error::Config(format!(
            "patch {patch} must be divisible by {d} for {} levels",
            cfg.levels
        )));
    }
    Ok(())
}

/// Inclusive bounding box `(lo, hi)` of the nonzero voxels.
pub fn support_bbox(v: &Volume) -> Option<([usize; 3], [usize; 3])> {
    let d = v.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    let mut any = false;
    for (i, &x) in v.voxels().iter().enumerate() {
        if x != 0.0 {
            let (a, b, c) = d.coords(i);
            for (k, p) in [a, b, c].into_iter().enumerate() {
                lo[k] = lo[k].min(p);
                hi[k] = hi[k].max(p);
            }
            any = true;
        }
    }
    any.then_some((lo, hi))
}

/// Patch origin centring the nonzero support, clamped into the volume.
pub fn patch_offset(v: &Volume, patch: Dims) -> Result<[usize; 3]> {
    let full = v.dims().as_array();
    let p = patch.as_array();
    if (0..3).any(|k| p[k] > full[k] || p[k] == 0) {
        return Err(Error::DimMismatch(format!(
            "patch {patch} does not fit volume {}",
            v.dims()
        )));
    }
    let Some((lo, hi)) = support_bbox(v) else {
        return Ok([0, 1, 2].map(|k| (full[k] - p[k]) / 2));
    };
    let extent = [0, 1, 2].map(|k| hi[k] - lo[k] + 1);
    if (0..3).any(|k| extent[k] > p[k]) {
        return Err(Error::BrainTooLarge {
            bbox: extent,
            patch: p,
        });
    }
    Ok([0, 1, 2].map(|k| {
        let slack = p[k] - extent[k];
        lo[k].saturating_sub(slack.div_ceil(2)).min(full[k] - p[k])
    }))
}

fn crop_values<T: Copy>(src: &[T], full: Dims, patch: Dims, offset: [usize; 3]) -> Vec<T> {
    (0..patch.len())
        .map(|i| {
            let (x, y, z) = patch.coords(i);
            src[full.index(x + offset[0], y + offset[1], z + offset[2])]
        })
        .collect()
}

pub fn extract_volume(v: &Volume, patch: Dims, offset: [usize; 3]) -> Result<Volume> {
    check_fits(v.dims(), patch, offset)?;
    Volume::new(
        patch,
        crop_values(v.voxels(), v.dims(), patch, offset),
        v.range(),
    )
}

pub fn extract_mask(m: &LabelMask, patch: Dims, offset: [usize; 3]) -> Result<LabelMask> {
    check_fits(m.dims(), patch, offset)?;
    LabelMask::new(patch, crop_values(m.labels(), m.dims(), patch, offset))
}

fn check_fits(full: Dims, patch: Dims, offset: [usize; 3]) -> Result<()> {
    let (f, p) = (full.as_array(), patch.as_array());
    if (0..3).any(|k| offset[k] + p[k] > f[k]) {
        return Err(Error::DimMismatch(format!(
            "patch {patch} at {offset:?} exceeds volume {full}"
        )));
    }
    Ok(())
}

/// Crops `v` and `m` to a patch covering the nonzero support of `v`.
pub fn crop_to_patch(
    v: &Volume,
    m: &LabelMask,
    patch: Dims,
) -> Result<(Volume, LabelMask, PatchSpec)> {
    check_dims(v.dims(), m.dims())?;
    let offset = patch_offset(v, patch)?;
    let pv = extract_volume(v, patch, offset)?;
    let pm = extract_mask(m, patch, offset)?;
    let spec = PatchSpec {
        dims: patch,
        offset,
        intensity_max: pv.max().max(0.0),
    };
    Ok((pv, pm, spec))
}

/// Channel 0 of a network output as a signed volume, clamped to [-1, 1].
pub fn prediction_volume(output: &Tensor) -> Result<Volume> {
    let raw = Volume::from_tensor(output, 0, RangeTag::Raw)?;
    let dims = raw.dims();
    Volume::new(
        dims,
        raw.into_voxels()
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect(),
        RangeTag::Signed,
    )
}

/// Writes `prediction` into a copy of `original` at every voxel inside the
/// patch whose label is healthy or unhealthy. Signed and unit predictions
/// are first mapped back to raw intensity through `spec.intensity_max`.
pub fn stitch(
    original: &Volume,
    prediction: &Volume,
    spec: &PatchSpec,
    mask: &LabelMask,
) -> Result<Volume> {
    check_dims(original.dims(), mask.dims())?;
    check_dims(prediction.dims(), spec.dims)?;
    check_fits(original.dims(), spec.dims, spec.offset)?;
    let m = spec.intensity_max;
    let back = |p: f64| match prediction.range() {
        RangeTag::Raw => p,
        RangeTag::Unit => p * m,
        RangeTag::Signed => (p + 1.0) / 2.0 * m,
    };
    let full = original.dims();
    let mut out = original.voxels().to_vec();
    let pv = prediction.voxels();
    for (i, &p) in pv.iter().enumerate() {
        let (x, y, z) = spec.dims.coords(i);
        let j = full.index(x + spec.offset[0], y + spec.offset[1], z + spec.offset[2]);
        if mask.labels()[j].is_masked() {
            out[j] = back(p);
        }
    }
    let out = match original.range() {
        RangeTag::Raw => out,
        RangeTag::Unit => out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        RangeTag::Signed => out.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
    };
    Volume::new(full, out, original.range())
}

/// Stacks the image and the 0/1 combined mask into a `[2, X, Y, Z]` tensor.
pub fn network_input(image: &Volume, combined: &LabelMask) -> Result<Tensor> {
    check_dims(image.dims(), combined.dims())?;
    let mut data = image.to_tensor().into_data();
    data.extend(combined.indicator_tensor(Label::is_masked).into_data());
    let d = image.dims();
    Ok(Tensor::new(vec![2, d.nx, d.ny, d.nz], data)?)
}

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    /// `[2, X, Y, Z]`: voided signed image, combined mask.
    pub input: Tensor,
    /// `[1, X, Y, Z]`: signed ground truth.
    pub target: Tensor,
    /// Healthy labels of the patch, for the loss.
    pub healthy: LabelMask,
    pub spec: PatchSpec,
}

/// Crop, scale to `[-1, 1]`, then void over healthy ∪ unhealthy.
pub fn make_training_pair(
    t1n: &Volume,
    healthy: &LabelMask,
    unhealthy: &LabelMask,
    patch: Dims,
) -> Result<TrainingPair> {
    let combined = LabelMask::combine(healthy, unhealthy)?;
    check_dims(t1n.dims(), combined.dims())?;
    let (pv, pm, spec) = crop_to_patch(t1n, &combined, patch)?;
    let target = rescale_signed(&normalize_unit(&pv)?)?;
    let voided = void_image(&target, &pm)?;
    let healthy_patch = extract_mask(healthy, patch, spec.offset)?;
    let healthy_only = LabelMask::from_fn(patch, |x, y, z| {
        if healthy_patch.get(x, y, z) == Label::Healthy && pm.get(x, y, z) == Label::Healthy {
            Label::Healthy
        } else {
            Label::Background
        }
    });
    Ok(TrainingPair {
        input: network_input(&voided, &pm)?,
        target: target.to_tensor(),
        healthy: healthy_only,
        spec,
    })
}

/// Network input for a voided scan. The patch is normalized by its own
/// maximum and re-voided so the masked region reads 0 in signed space.
pub fn inference_input(
    voided: &Volume,
    combined: &LabelMask,
    patch: Dims,
) -> Result<(Tensor, PatchSpec)> {
    let (pv, pm, spec) = crop_to_patch(voided, combined, patch)?;
    let signed = rescale_signed(&normalize_unit(&pv)?)?;
    let input = network_input(&void_image(&signed, &pm)?, &pm)?;
    Ok((input, spec))
}
