//! Mirroring and plane rotations of volumes and masks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{Dims, Label, LabelMask, RangeTag, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

impl FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "trilinear" => Ok(Self::Trilinear),
            _ => Err(Error::Config(format!("unknown interpolation `{s}`"))),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Trilinear => "trilinear",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Reverse the x, y, z axis respectively.
    pub mirror: [bool; 3],
    /// Degrees in `[0, 360)`.
    pub theta_xy: f64,
    pub theta_yz: f64,
}

impl AugmentSpec {
    pub const IDENTITY: Self = Self {
        mirror: [false; 3],
        theta_xy: 0.0,
        theta_yz: 0.0,
    };
}

/// Independent fair coin per axis, uniform angles.
pub fn sample_augment<R: Rng + ?Sized>(rng: &mut R) -> AugmentSpec {
    let mirror = [
        rng.random_bool(0.5),
        rng.random_bool(0.5),
        rng.random_bool(0.5),
    ];
    AugmentSpec {
        mirror,
        theta_xy: normalize_angle(rng.random_range(0.0..360.0)),
        theta_yz: normalize_angle(rng.random_range(0.0..360.0)),
    }
}

/// Maps an angle in degrees into `[0, 360)`.
pub fn normalize_angle(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let a = normalize_angle(deg);
    if a % 90.0 == 0.0 {
        match (a / 90.0) as u32 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        a.to_radians().sin_cos()
    }
}

/// A dense grid that can be mirrored and resampled.
pub trait Grid: Sized {
    type Value: Copy;

    fn grid_dims(&self) -> Dims;
    fn values(&self) -> &[Self::Value];
    /// Same kind of grid with new values.
    fn rebuild(&self, values: Vec<Self::Value>) -> Result<Self>;
    /// Out-of-bounds value.
    fn fill() -> Self::Value;
    /// Weighted blend of samples; `None` for grids that only support nearest.
    fn blend(&self, samples: &[(Self::Value, f64)]) -> Option<Self::Value>;
}

impl Grid for Volume {
    type Value = f64;

    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn values(&self) -> &[f64] {
        self.voxels()
    }

    fn rebuild(&self, values: Vec<f64>) -> Result<Self> {
        Volume::new(self.dims(), values, self.range())
    }

    fn fill() -> f64 {
        0.0
    }

    fn blend(&self, samples: &[(f64, f64)]) -> Option<f64> {
        let v: f64 = samples.iter().map(|(v, w)| v * w).sum();
        // weights may overshoot by an ulp
        Some(match self.range() {
            RangeTag::Raw => v,
            RangeTag::Unit => v.clamp(0.0, 1.0),
            RangeTag::Signed => v.clamp(-1.0, 1.0),
        })
    }
}

impl Grid for LabelMask {
    type Value = Label;

    fn grid_dims(&self) -> Dims {
        self.dims()
    }

    fn values(&self) -> &[Label] {
        self.labels()
    }

    fn rebuild(&self, values: Vec<Label>) -> Result<Self> {
        LabelMask::new(self.dims(), values)
    }

    fn fill() -> Label {
        Label::Background
    }

    fn blend(&self, _: &[(Label, f64)]) -> Option<Label> {
        None
    }
}

/// Reverses the flagged axes. Exact and self-inverse.
pub fn apply_mirror<G: Grid>(g: &G, flags: [bool; 3]) -> Result<G> {
    let d = g.grid_dims();
    let src = g.values();
    let flip = |v: usize, n: usize, f: bool| if f { n - 1 - v } else { v };
    let out = (0..d.len())
        .map(|i| {
            let (x, y, z) = d.coords(i);
            src[d.index(
                flip(x, d.nx, flags[0]),
                flip(y, d.ny, flags[1]),
                flip(z, d.nz, flags[2]),
            )]
        })
        .collect();
    g.rebuild(out)
}

/// Rotates by `theta_xy` in the X-Y plane, then by `theta_yz` in the Y-Z
/// plane, both about the grid centre. Samples falling outside the grid
/// take the fill value.
pub fn apply_rotation<G: Grid>(
    g: &G,
    theta_xy: f64,
    theta_yz: f64,
    interp: Interpolation,
) -> Result<G> {
    if interp == Interpolation::Trilinear && g.blend(&[]).is_none() {
        return Err(Error::Config(
            "label masks support nearest interpolation only".into(),
        ));
    }
    let (a, b) = (normalize_angle(theta_xy), normalize_angle(theta_yz));
    if a == 0.0 && b == 0.0 {
        return g.rebuild(g.values().to_vec());
    }
    let (s1, c1) = sin_cos_deg(a);
    let (s2, c2) = sin_cos_deg(b);
    let d = g.grid_dims();
    let centre = [
        (d.nx - 1) as f64 / 2.0,
        (d.ny - 1) as f64 / 2.0,
        (d.nz - 1) as f64 / 2.0,
    ];
    let src = g.values();
    let n = [d.nx as isize, d.ny as isize, d.nz as isize];
    let at = |p: [isize; 3]| -> Option<G::Value> {
        (0..3)
            .all(|k| p[k] >= 0 && p[k] < n[k])
            .then(|| src[d.index(p[0] as usize, p[1] as usize, p[2] as usize)])
    };
    let mut out = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        let (x, y, z) = d.coords(i);
        let (px, py, pz) = (
            x as f64 - centre[0],
            y as f64 - centre[1],
            z as f64 - centre[2],
        );
        // undo the Y-Z rotation, then the X-Y rotation
        let (qy, qz) = (c2 * py + s2 * pz, -s2 * py + c2 * pz);
        let (qx, qy) = (c1 * px + s1 * qy, -s1 * px + c1 * qy);
        let p = [qx + centre[0], qy + centre[1], qz + centre[2]];
        let v = match interp {
            Interpolation::Nearest => at([
                p[0].round() as isize,
                p[1].round() as isize,
                p[2].round() as isize,
            ])
            .unwrap_or(G::fill()),
            Interpolation::Trilinear => {
                let base = p.map(|c| c.floor());
                let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
                let mut samples = Vec::with_capacity(8);
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut q = [0isize; 3];
                    for k in 0..3 {
                        let hi = corner >> k & 1 == 1;
                        w *= if hi { frac[k] } else { 1.0 - frac[k] };
                        q[k] = base[k] as isize + hi as isize;
                    }
                    if w != 0.0 {
                        if let Some(v) = at(q) {
                            samples.push((v, w));
                        }
                    }
                }
                g.blend(&samples).expect("checked above")
            }
        };
        out.push(v);
    }
    g.rebuild(out)
}

/// Mirror, then rotate.
pub fn apply_augment<G: Grid>(g: &G, spec: &AugmentSpec, interp: Interpolation) -> Result<G> {
    let m = apply_mirror(g, spec.mirror)?;
    apply_rotation(&m, spec.theta_xy, spec.theta_yz, interp)
}
