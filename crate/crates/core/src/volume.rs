//! Scalar volumes, label masks and intensity normalization.
//!
//! Voxels are stored x-fastest: index = x + nx·(y + ny·z).

use std::fmt;

use voxelfill_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (
            i % self.nx,
            (i / self.nx) % self.ny,
            i / (self.nx * self.ny),
        )
    }
}

impl From<[usize; 3]> for Dims {
    fn from([nx, ny, nz]: [usize; 3]) -> Self {
        Self { nx, ny, nz }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Value range a volume is known to occupy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RangeTag {
    Raw,
    /// Every voxel in `[0, 1]`.
    Unit,
    /// Every voxel in `[-1, 1]`.
    Signed,
}

impl RangeTag {
    fn name(self) -> &'static str {
        match self {
            RangeTag::Raw => "raw",
            RangeTag::Unit => "unit",
            RangeTag::Signed => "signed",
        }
    }

    fn admits(self, v: f64) -> bool {
        match self {
            RangeTag::Raw => true,
            RangeTag::Unit => (0.0..=1.0).contains(&v),
            RangeTag::Signed => (-1.0..=1.0).contains(&v),
        }
    }
}

/// Dense 3D scalar grid. Always finite; the range tag is always honoured.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f64>,
    range: RangeTag,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f64>, range: RangeTag) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::DimMismatch(format!("empty grid {dims}")));
        }
        if voxels.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{dims} grid needs {} voxels, got {}",
                dims.len(),
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume);
        }
        if !voxels.iter().all(|&v| range.admits(v)) {
            return Err(Error::RangeMismatch {
                expected: range.name(),
                actual: "out-of-range",
            });
        }
        Ok(Self {
            dims,
            voxels,
            range,
        })
    }

    pub fn raw(dims: Dims, voxels: Vec<f64>) -> Result<Self> {
        Self::new(dims, voxels, RangeTag::Raw)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            voxels: vec![0.0; dims.len()],
            range: RangeTag::Raw,
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let voxels = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::raw(dims, voxels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.dims.index(x, y, z)]
    }

    pub fn max(&self) -> f64 {
        self.voxels
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same voxels, relabelled as raw.
    pub fn into_raw(mut self) -> Self {
        self.range = RangeTag::Raw;
        self
    }

    /// Single-channel `[1, X, Y, Z]` tensor (row-major, z fastest).
    pub fn to_tensor(&self) -> Tensor {
        let Dims { nx, ny, nz } = self.dims;
        let mut data = Vec::with_capacity(self.voxels.len());
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data.push(self.get(x, y, z));
                }
            }
        }
        Tensor::new(vec![1, nx, ny, nz], data).expect("dims are positive")
    }

    /// Reads channel `c` of a `[C, X, Y, Z]` tensor back into x-fastest order.
    pub fn from_tensor(t: &Tensor, c: usize, range: RangeTag) -> Result<Self> {
        let [ch, nx, ny, nz] = t.dims4()?;
        if c >= ch {
            return Err(Error::DimMismatch(format!("channel {c} of {ch}")));
        }
        let dims = Dims::new(nx, ny, nz);
        let base = c * dims.len();
        let d = t.data();
        let voxels = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                d[base + (x * ny + y) * nz + z]
            })
            .collect();
        Self::new(dims, voxels, range)
    }
}

#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Background = 0,
    Healthy = 1,
    Unhealthy = 2,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::Background),
            1 => Some(Label::Healthy),
            2 => Some(Label::Unhealthy),
            _ => None,
        }
    }

    /// Healthy or unhealthy: the voxel belongs to the inpainting region.
    pub fn is_masked(self) -> bool {
        self != Label::Background
    }
}

/// One label per voxel over {background, healthy, unhealthy}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    dims: Dims,
    labels: Vec<Label>,
}

impl LabelMask {
    pub fn new(dims: Dims, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{dims} mask needs {} labels, got {}",
                dims.len(),
                labels.len()
            )));
        }
        Ok(Self { dims, labels })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            labels: vec![Label::Background; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> Label) -> Self {
        let labels = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { dims, labels }
    }

    /// Mask with `label` wherever `select` holds, background elsewhere.
    pub fn from_selection(dims: Dims, select: &[bool], label: Label) -> Result<Self> {
        let labels = select
            .iter()
            .map(|&s| if s { label } else { Label::Background })
            .collect();
        Self::new(dims, labels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Label {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, i: usize, label: Label) {
        self.labels[i] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn count_masked(&self) -> usize {
        self.labels.iter().filter(|l| l.is_masked()).count()
    }

    /// Voxels carrying any non-background label.
    pub fn support(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.is_masked()).collect()
    }

    /// Indicator of `label` as a `[1, X, Y, Z]` tensor of 0/1.
    pub fn indicator_tensor(&self, pred: impl Fn(Label) -> bool) -> Tensor {
        let Dims { nx, ny, nz } = self.dims;
        let mut data = Vec::with_capacity(self.labels.len());
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data.push(if pred(self.get(x, y, z)) { 1.0 } else { 0.0 });
                }
            }
        }
        Tensor::new(vec![1, nx, ny, nz], data).expect("dims are positive")
    }

    /// Combined mask: unhealthy wins where both are set, so the labels stay
    /// single-valued.
    pub fn combine(healthy: &LabelMask, unhealthy: &LabelMask) -> Result<Self> {
        check_dims(healthy.dims, unhealthy.dims)?;
        let labels = healthy
            .labels
            .iter()
            .zip(&unhealthy.labels)
            .map(|(&h, &u)| {
                if u.is_masked() {
                    Label::Unhealthy
                } else if h.is_masked() {
                    Label::Healthy
                } else {
                    Label::Background
                }
            })
            .collect();
        Ok(Self {
            dims: healthy.dims,
            labels,
        })
    }
}

pub(crate) fn check_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!("{a} vs {b}")));
    }
    Ok(())
}

/// Divides every voxel by the volume maximum. An all-zero volume passes
/// through unchanged.
pub fn normalize_unit(v: &Volume) -> Result<Volume> {
    if v.voxels.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidVolume);
    }
    let max = v.max();
    if max == 0.0 {
        return Volume::new(v.dims, v.voxels.clone(), RangeTag::Unit);
    }
    let voxels = v.voxels.iter().map(|x| x / max).collect();
    Volume::new(v.dims, voxels, RangeTag::Unit)
}

/// `x ↦ 2x − 1`, unit range to signed range.
pub fn rescale_signed(v: &Volume) -> Result<Volume> {
    if v.range != RangeTag::Unit {
        return Err(Error::RangeMismatch {
            expected: "unit",
            actual: v.range.name(),
        });
    }
    let voxels = v.voxels.iter().map(|x| 2.0 * x - 1.0).collect();
    Volume::new(v.dims, voxels, RangeTag::Signed)
}

/// Inverse of [`rescale_signed`].
pub fn rescale_unit(v: &Volume) -> Result<Volume> {
    if v.range != RangeTag::Signed {
        return Err(Error::RangeMismatch {
            expected: "signed",
            actual: v.range.name(),
        });
    }
    let voxels = v.voxels.iter().map(|y| (y + 1.0) / 2.0).collect();
    Volume::new(v.dims, voxels, RangeTag::Unit)
}

/// Maximum of `gt` over the voxels labelled healthy or unhealthy.
pub fn validation_normalizer(gt: &Volume, mask: &LabelMask) -> Result<f64> {
    check_dims(gt.dims, mask.dims)?;
    let m = gt
        .voxels
        .iter()
        .zip(&mask.labels)
        .filter(|(_, l)| l.is_masked())
        .map(|(&v, _)| v)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        })
        .ok_or(Error::EmptyMask)?;
    if m <= 0.0 {
        return Err(Error::DegenerateNormalizer(m));
    }
    Ok(m)
}

/// Copy of `v` divided by a positive normalizer.
pub fn scale_by(v: &Volume, normalizer: f64) -> Result<Volume> {
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::DegenerateNormalizer(normalizer));
    }
    Volume::raw(v.dims, v.voxels.iter().map(|x| x / normalizer).collect())
}

/// Divides `gt` by its maximum over the masked (healthy ∪ unhealthy) region.
/// Voxels outside the region may exceed 1, so the result is tagged raw.
pub fn normalize_validation(gt: &Volume, mask: &LabelMask) -> Result<Volume> {
    let m = validation_normalizer(gt, mask)?;
    scale_by(gt, m)
}

/// Blanks every healthy or unhealthy voxel to 0.0; all other voxels are
/// copied unchanged.
pub fn void_image(v: &Volume, mask: &LabelMask) -> Result<Volume> {
    check_dims(v.dims, mask.dims)?;
    let voxels = v
        .voxels
        .iter()
        .zip(&mask.labels)
        .map(|(&x, l)| if l.is_masked() { 0.0 } else { x })
        .collect();
    Ok(Volume {
        dims: v.dims,
        voxels,
        range: v.range,
    })
}
