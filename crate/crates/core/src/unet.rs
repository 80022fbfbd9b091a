//! Three-level volumetric U-Net for inpainting.
//!
//! Down block `i`: `[conv3 → IN → PReLU] ×2`, then 2×2×2 max pool.
//! Bridge: `[conv3 → IN → ReLU → dropout] ×2`.
//! Up block `i`: NN upsample, concat skip `i`, `[conv3 → IN → PReLU → dropout] ×2`.
//! Head: 1×1×1 conv to the output channels.
//!
//! Input channel 0 is the voided image, channel 1 the combined mask.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use voxelfill_tensor::rng::stream;
use voxelfill_tensor::{Graph, Mode, Tensor, TensorError, Var};

use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Width of each up block relative to the down block at the same level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpChannelRule {
    /// Half the down block's channels (at least one).
    Halved,
    /// Same as the down block (symmetric U-Net).
    Matched,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalActivation {
    None,
    Tanh,
}

impl fmt::Display for UpChannelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpChannelRule::Halved => "halved",
            UpChannelRule::Matched => "matched",
        })
    }
}

impl FromStr for UpChannelRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halved" => Ok(Self::Halved),
            "matched" => Ok(Self::Matched),
            _ => Err(Error::Config(format!("unknown up-channel rule `{s}`"))),
        }
    }
}

impl fmt::Display for FinalActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinalActivation::None => "none",
            FinalActivation::Tanh => "tanh",
        })
    }
}

impl FromStr for FinalActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tanh" => Ok(Self::Tanh),
            _ => Err(Error::Config(format!("unknown final activation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
    pub up_channel_rule: UpChannelRule,
    pub final_activation: FinalActivation,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            levels: 3,
            in_channels: 2,
            out_channels: 1,
            dropout_rate: 0.2,
            up_channel_rule: UpChannelRule::Halved,
            final_activation: FinalActivation::None,
            norm_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    /// Default geometry with a different width and depth.
    pub fn tiny(base_channels: usize, levels: usize) -> Self {
        Self {
            base_channels,
            levels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must lie in [0, 1)");
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return bad("norm eps must be positive");
        }
        if self.levels > 16 {
            return bad("levels must be at most 16");
        }
        Ok(())
    }

    pub fn down_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bridge_channels(&self) -> usize {
        self.base_channels << self.levels
    }

    pub fn up_channels(&self, level: usize) -> usize {
        match self.up_channel_rule {
            UpChannelRule::Halved => (self.down_channels(level) / 2).max(1),
            UpChannelRule::Matched => self.down_channels(level),
        }
    }

    /// Every spatial patch dim must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("base_channels", self.base_channels);
        kv.push("levels", self.levels);
        kv.push("in_channels", self.in_channels);
        kv.push("out_channels", self.out_channels);
        kv.push("dropout", self.dropout_rate);
        kv.push("up_channel_rule", self.up_channel_rule);
        kv.push("final_activation", self.final_activation);
        kv.push("norm_eps", self.norm_eps);
        kv
    }

    /// Reads the keys written by [`UNetConfig::to_kv`]; absent keys keep
    /// their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            base_channels: kv.get_or("base_channels", d.base_channels)?,
            levels: kv.get_or("levels", d.levels)?,
            in_channels: kv.get_or("in_channels", d.in_channels)?,
            out_channels: kv.get_or("out_channels", d.out_channels)?,
            dropout_rate: kv.get_or("dropout", d.dropout_rate)?,
            up_channel_rule: kv
                .get("up_channel_rule")
                .map_or(Ok(d.up_channel_rule), str::parse)?,
            final_activation: kv
                .get("final_activation")
                .map_or(Ok(d.final_activation), str::parse)?,
            norm_eps: kv.get_or("norm_eps", d.norm_eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    He { fan_in: usize },
    Zero,
    One,
    Slope,
}

const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    slope: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    down: Vec<[ConvUnit; 2]>,
    bridge: [ConvUnit; 2],
    /// Indexed by level.
    up: Vec<[ConvUnit; 2]>,
    head_weight: usize,
    head_bias: usize,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn unit(&mut self, prefix: &str, k: usize, cin: usize, cout: usize, prelu: bool) -> ConvUnit {
        let weight = self.add(
            format!("{prefix}.conv{k}.weight"),
            vec![cout, cin, 3, 3, 3],
            Init::He { fan_in: cin * 27 },
        );
        let bias = self.add(format!("{prefix}.conv{k}.bias"), vec![cout], Init::Zero);
        let gamma = self.add(format!("{prefix}.norm{k}.gamma"), vec![cout], Init::One);
        let beta = self.add(format!("{prefix}.norm{k}.beta"), vec![cout], Init::Zero);
        let slope =
            prelu.then(|| self.add(format!("{prefix}.act{k}.slope"), vec![cout], Init::Slope));
        ConvUnit {
            weight,
            bias,
            gamma,
            beta,
            slope,
        }
    }
}

fn layout(cfg: &UNetConfig) -> (Vec<ParamSpec>, Layout) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let mut cin = cfg.in_channels;
    let mut down = Vec::with_capacity(cfg.levels);
    for i in 0..cfg.levels {
        let c = cfg.down_channels(i);
        let p = format!("down{i}");
        down.push([b.unit(&p, 1, cin, c, true), b.unit(&p, 2, c, c, true)]);
        cin = c;
    }
    let bc = cfg.bridge_channels();
    let bridge = [
        b.unit("bridge", 1, cin, bc, false),
        b.unit("bridge", 2, bc, bc, false),
    ];
    let mut prev = bc;
    let mut up_rev = Vec::with_capacity(cfg.levels);
    for i in (0..cfg.levels).rev() {
        let c = cfg.up_channels(i);
        let p = format!("up{i}");
        up_rev.push([
            b.unit(&p, 1, prev + cfg.down_channels(i), c, true),
            b.unit(&p, 2, c, c, true),
        ]);
        prev = c;
    }
    up_rev.reverse();
    let head_weight = b.add(
        "head.weight".into(),
        vec![cfg.out_channels, prev, 1, 1, 1],
        Init::He { fan_in: prev },
    );
    let head_bias = b.add("head.bias".into(), vec![cfg.out_channels], Init::Zero);
    (
        b.specs,
        Layout {
            down,
            bridge,
            up: up_rev,
            head_weight,
            head_bias,
        },
    )
}

/// Learnable tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl UNetParams {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a learnable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Checks names and shapes against the layout `cfg` would build.
    pub fn check_against(&self, cfg: &UNetConfig) -> Result<()> {
        let (specs, _) = layout(cfg);
        if specs.len() != self.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "config expects {} tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for (s, (n, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if &s.name != n || s.shape != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "expected {} {:?}, found {n} {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fresh parameters: He-normal kernels (fan-in), zero biases, unit
/// instance-norm scales, PReLU slopes at 0.25.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<UNetParams> {
    cfg.validate()?;
    let (specs, _) = layout(cfg);
    let mut rng = stream(seed, "unet-init", 0);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::Slope => vec![PRELU_INIT; n],
        };
        tensors.push(Tensor::new(s.shape, data)?);
        names.push(s.name);
    }
    Ok(UNetParams { names, tensors })
}

/// Closed-form parameter count for `cfg`.
pub fn count_params(cfg: &UNetConfig) -> usize {
    let conv = |cin: usize, cout: usize| cout * cin * 27 + cout;
    // conv + instance norm (γ, β) + optional PReLU slope
    let unit = |cin: usize, cout: usize, prelu: bool| {
        conv(cin, cout) + 2 * cout + if prelu { cout } else { 0 }
    };
    let mut total = 0;
    let mut cin = cfg.in_channels;
    for i in 0..cfg.levels {
        let c = cfg.down_channels(i);
        total += unit(cin, c, true) + unit(c, c, true);
        cin = c;
    }
    let bc = cfg.bridge_channels();
    total += unit(cin, bc, false) + unit(bc, bc, false);
    let mut prev = bc;
    for i in (0..cfg.levels).rev() {
        let c = cfg.up_channels(i);
        total += unit(prev + cfg.down_channels(i), c, true) + unit(c, c, true);
        prev = c;
    }
    total + cfg.out_channels * prev + cfg.out_channels
}

#[derive(Clone, Copy)]
enum Act {
    Prelu,
    Relu,
}

struct Forward<'a, R: ?Sized> {
    g: &'a mut Graph,
    vars: &'a [Var],
    cfg: &'a UNetConfig,
    mode: Mode,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Forward<'_, R> {
    fn unit(&mut self, x: Var, u: ConvUnit, act: Act, dropout: bool) -> Result<Var> {
        let v = self.vars;
        let h = self.g.conv3d(x, v[u.weight], Some(v[u.bias]), 1)?;
        let h = self
            .g
            .instance_norm(h, v[u.gamma], v[u.beta], self.cfg.norm_eps)?;
        let h = match act {
            Act::Prelu => self
                .g
                .prelu(h, v[u.slope.expect("prelu unit has a slope")])?,
            Act::Relu => self.g.relu(h),
        };
        if dropout {
            Ok(self
                .g
                .dropout(h, self.cfg.dropout_rate, self.mode, &mut *self.rng)?)
        } else {
            Ok(h)
        }
    }

    fn block(&mut self, x: Var, units: [ConvUnit; 2], act: Act, dropout: bool) -> Result<Var> {
        let h = self.unit(x, units[0], act, dropout)?;
        self.unit(h, units[1], act, dropout)
    }
}

/// Records one forward pass on `g`. `vars` are the bound parameters (see
/// [`UNetParams::bind`]); `input` is a `[in_channels, X, Y, Z]` node.
pub fn forward<R: Rng + ?Sized>(
    g: &mut Graph,
    vars: &[Var],
    cfg: &UNetConfig,
    input: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let (specs, lay) = layout(cfg);
    if vars.len() != specs.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} parameter handles for {} tensors",
            vars.len(),
            specs.len()
        )));
    }
    let [c, x, y, z] = g.value(input).dims4()?;
    if c != cfg.in_channels {
        return Err(TensorError::Shape(format!(
            "expected {} input channels, got {c}",
            cfg.in_channels
        ))
        .into());
    }
    let div = cfg.divisor();
    if [x, y, z].iter().any(|d| d % div != 0) {
        return Err(TensorError::Shape(format!(
            "patch {x}x{y}x{z} not divisible by {div} for {} levels",
            cfg.levels
        ))
        .into());
    }
    let mut f = Forward {
        g,
        vars,
        cfg,
        mode,
        rng,
    };
    let mut h = input;
    let mut skips = Vec::with_capacity(cfg.levels);
    for units in &lay.down {
        let s = f.block(h, *units, Act::Prelu, false)?;
        skips.push(s);
        h = f.g.maxpool3d(s)?;
    }
    h = f.block(h, lay.bridge, Act::Relu, true)?;
    for level in (0..cfg.levels).rev() {
        let u = f.g.upsample_nn(h)?;
        let cat = f.g.concat_channels(u, skips[level])?;
        h = f.block(cat, lay.up[level], Act::Prelu, true)?;
    }
    let out =
        f.g.conv3d(h, vars[lay.head_weight], Some(vars[lay.head_bias]), 0)?;
    Ok(match cfg.final_activation {
        FinalActivation::None => out,
        FinalActivation::Tanh => f.g.tanh(out),
    })
}

/// Eval-mode forward pass returning the output tensor.
pub fn predict(params: &UNetParams, cfg: &UNetConfig, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let x = g.constant(input.clone());
    let mut unused = stream(0, "eval", 0);
    let out = forward(&mut g, &vars, cfg, x, Mode::Eval, &mut unused)?;
    Ok(g.value(out).clone())
}
