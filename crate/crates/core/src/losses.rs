//! Differentiable training losses: masked MAE, SSIM and their weighted sum.

use voxelfill_tensor::{Graph, TensorError, Var};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::volume::{Label, LabelMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsimVariant {
    /// One set of moments over the whole patch.
    Global,
    /// Mean of per-window SSIM over all valid cubic windows.
    Windowed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub mae_weight: f64,
    pub ssim_weight: f64,
    pub variant: SsimVariant,
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for LossConfig {
    /// Training setting: signed intensities, whole-patch SSIM.
    fn default() -> Self {
        Self {
            mae_weight: 1.0,
            ssim_weight: 1.0,
            variant: SsimVariant::Global,
            window: 7,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 2.0,
        }
    }
}

impl LossConfig {
    /// Evaluation setting: unit intensities, 7³ windows.
    pub fn evaluation() -> Self {
        Self {
            variant: SsimVariant::Windowed,
            dynamic_range: 1.0,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |w: f64| w.is_finite() && w >= 0.0;
        if !finite_nonneg(self.mae_weight) || !finite_nonneg(self.ssim_weight) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "SSIM window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if !(self.dynamic_range > 0.0 && self.dynamic_range.is_finite()) {
            return Err(Error::Config("dynamic range must be positive".into()));
        }
        if !(self.c1() > 0.0 && self.c2() > 0.0) {
            return Err(Error::Config("SSIM stabilizers must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.push("lambda_mae", self.mae_weight);
        kv.push("lambda_ssim", self.ssim_weight);
    }

    /// Reads the weights; other fields keep the training defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            mae_weight: kv.get_or("lambda_mae", d.mae_weight)?,
            ssim_weight: kv.get_or("lambda_ssim", d.ssim_weight)?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn same_shape(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::Shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))).into());
    }
    Ok(())
}

/// Mean absolute error over voxels labeled healthy. `pred` and `gt` are
/// `[1, X, Y, Z]` nodes matching the mask.
pub fn masked_mae(g: &mut Graph, pred: Var, gt: Var, healthy: &LabelMask) -> Result<Var> {
    same_shape(g, pred, gt)?;
    let m = healthy.count(Label::Healthy);
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let weight = healthy.indicator_tensor(|l| l == Label::Healthy);
    if weight.shape() != g.shape(pred) {
        return Err(Error::DimMismatch(format!(
            "mask {} vs prediction {:?}",
            healthy.dims(),
            g.shape(pred)
        )));
    }
    let w = g.constant(weight);
    let d = g.sub(pred, gt)?;
    let d = g.abs(d);
    let d = g.mul(d, w)?;
    let s = g.sum_all(d);
    Ok(g.mul_scalar(s, 1.0 / m as f64))
}

/// `((2·μx·μy + c1)(2·σxy + c2)) / ((μx² + μy² + c1)(σx² + σy² + c2))`
/// on nodes of matching shape (scalars or per-window maps).
fn ssim_formula(
    g: &mut Graph,
    mx: Var,
    my: Var,
    vx: Var,
    vy: Var,
    cxy: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let mxy = g.mul(mx, my)?;
    let num_l = g.mul_scalar(mxy, 2.0);
    let num_l = g.add_scalar(num_l, cfg.c1());
    let num_c = g.mul_scalar(cxy, 2.0);
    let num_c = g.add_scalar(num_c, cfg.c2());
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let den_l = g.add(mx2, my2)?;
    let den_l = g.add_scalar(den_l, cfg.c1());
    let den_c = g.add(vx, vy)?;
    let den_c = g.add_scalar(den_c, cfg.c2());
    let num = g.mul(num_l, num_c)?;
    let den = g.mul(den_l, den_c)?;
    Ok(g.div(num, den)?)
}

/// Structural similarity of two nodes of equal shape, reduced to a scalar.
/// Moments are biased.
pub fn ssim(g: &mut Graph, x: Var, y: Var, cfg: &LossConfig) -> Result<Var> {
    same_shape(g, x, y)?;
    match cfg.variant {
        SsimVariant::Global => {
            let mx = g.mean_all(x);
            let my = g.mean_all(y);
            let xc = g.sub(x, mx)?;
            let yc = g.sub(y, my)?;
            let xx = g.square(xc);
            let yy = g.square(yc);
            let xy = g.mul(xc, yc)?;
            let vx = g.mean_all(xx);
            let vy = g.mean_all(yy);
            let cxy = g.mean_all(xy);
            ssim_formula(g, mx, my, vx, vy, cxy, cfg)
        }
        SsimVariant::Windowed => {
            let map = ssim_map(g, x, y, cfg)?;
            Ok(g.mean_all(map))
        }
    }
}

/// Per-window SSIM over every valid window position.
pub fn ssim_map(g: &mut Graph, x: Var, y: Var, cfg: &LossConfig) -> Result<Var> {
    same_shape(g, x, y)?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1..].iter().any(|&d| d < cfg.window) {
        return Err(Error::WindowTooLarge {
            window: cfg.window,
            dims: shape,
        });
    }
    let w = cfg.window;
    let mx = g.box_mean3d(x, w)?;
    let my = g.box_mean3d(y, w)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y)?;
    let exx = g.box_mean3d(xx, w)?;
    let eyy = g.box_mean3d(yy, w)?;
    let exy = g.box_mean3d(xy, w)?;
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;
    ssim_formula(g, mx, my, vx, vy, cxy, cfg)
}

/// `λ1 · masked MAE + λ2 · (1 − SSIM)`.
pub fn combined_loss(
    g: &mut Graph,
    pred: Var,
    gt: Var,
    healthy: &LabelMask,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mae = masked_mae(g, pred, gt, healthy)?;
    let s = ssim(g, pred, gt, cfg)?;
    let dissim = g.mul_scalar(s, -1.0);
    let dissim = g.add_scalar(dissim, 1.0);
    let a = g.mul_scalar(mae, cfg.mae_weight);
    let b = g.mul_scalar(dissim, cfg.ssim_weight);
    Ok(g.add(a, b)?)
}
