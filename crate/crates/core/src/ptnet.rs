//! Parallel transposed reconstruction network.
//!
//! Data flow for an RGB batch `[N, 3, H, W]` with `L` output bands and
//! downsample factor `f`:
//!
//! 1. Input block: conv3×3 (3 → base) · relu · conv3×3 (base → L) gives the
//!    stage-1 cube `D` `[N, L, H, W]`; a stride-`f` conv3×3 reduces it to
//!    `[N, L, H/f, W/f]`. The strided conv is evaluated as a same-padded
//!    conv followed by [`Tape::subsample2d`], since odd kernels at stride 2
//!    never tile an even extent exactly.
//! 2. Three independent branches see the reduced cube with a different axis
//!    as channels: spectral `[N, L, h, w]`, height `[N, h, L, w]` and width
//!    `[N, w, L, h]`. Each projects its channels to `ra_inner_channels` with
//!    a 1×1 conv, applies residual attention blocks, and projects back.
//! 3. Branch outputs are permuted back to `[N, L, h, w]`, bilinearly resized
//!    to `H × W`, concatenated along channels, batch-normalized and passed
//!    through the output block; `D` is added as a global residual.
//!
//! The height/width branch projections depend on `H/f` and `W/f`, so a model
//! is built for one patch size; [`reconstruct_image`] tiles larger inputs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datacube::{Datacube, Layout, PatchGrid};
use crate::error::{Error, Result};
use crate::forward_model::RgbImage;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormStats, NormMode, Tape, Tensor, Var};

pub const PTN1_MAGIC: &[u8; 4] = b"PTN1";

/// Which stage-2 branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branches {
    /// Spectral, height and width branches.
    All,
    /// Spectral branch only (single-block ablation).
    SpectralOnly,
}

impl Branches {
    pub fn active(self) -> &'static [Branch] {
        match self {
            Branches::All => &[Branch::Spectral, Branch::Height, Branch::Width],
            Branches::SpectralOnly => &[Branch::Spectral],
        }
    }

    fn code(self) -> u32 {
        match self {
            Branches::All => 0,
            Branches::SpectralOnly => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Branches::All),
            1 => Some(Branches::SpectralOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branches::All => "all",
            Branches::SpectralOnly => "spectral",
        })
    }
}

impl std::str::FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Branches::All),
            "spectral" => Ok(Branches::SpectralOnly),
            _ => Err(Error::Config(format!("branches must be `all` or `spectral`, got `{s}`"))),
        }
    }
}

/// One stage-2 branch, named by the cube axis it treats as channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Spectral,
    Height,
    Width,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Spectral => "spectral",
            Branch::Height => "height",
            Branch::Width => "width",
        }
    }

    /// Permutation from `[N, L, h, w]` into this branch's layout.
    pub fn axes(self) -> [usize; 4] {
        match self {
            Branch::Spectral => [0, 1, 2, 3],
            Branch::Height => [0, 2, 1, 3],
            Branch::Width => [0, 3, 1, 2],
        }
    }

    /// Permutation back to `[N, L, h, w]`.
    pub fn inverse_axes(self) -> [usize; 4] {
        match self {
            Branch::Spectral => [0, 1, 2, 3],
            Branch::Height => [0, 2, 1, 3],
            Branch::Width => [0, 2, 3, 1],
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PtnetConfig {
    pub bands: usize,
    pub base_channels: usize,
    pub downsample_factor: usize,
    pub ra_blocks_per_branch: usize,
    pub ra_inner_channels: usize,
    pub eca_kernel: usize,
    /// Patch height the branch projections are built for.
    pub patch_height: usize,
    /// Patch width the branch projections are built for.
    pub patch_width: usize,
    pub branches: Branches,
}

impl PtnetConfig {
    /// Default widths for a given band count and patch size.
    pub fn new(bands: usize, patch_height: usize, patch_width: usize) -> Self {
        Self {
            bands,
            base_channels: 32,
            downsample_factor: 2,
            ra_blocks_per_branch: 1,
            ra_inner_channels: 64,
            eca_kernel: 3,
            patch_height,
            patch_width,
            branches: Branches::All,
        }
    }

    /// 31 bands over 240 × 128 patches with the default widths.
    pub fn full_scale() -> Self {
        Self::new(31, 240, 128)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("bands", self.bands),
            ("base_channels", self.base_channels),
            ("ra_blocks_per_branch", self.ra_blocks_per_branch),
            ("ra_inner_channels", self.ra_inner_channels),
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eca_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "eca_kernel must be odd, got {}",
                self.eca_kernel
            )));
        }
        if ![1, 2, 4].contains(&self.downsample_factor) {
            return Err(Error::Config(format!(
                "downsample_factor must be 1, 2 or 4, got {}",
                self.downsample_factor
            )));
        }
        let f = self.downsample_factor;
        if self.patch_height % f != 0 || self.patch_width % f != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} is not divisible by downsample_factor {f}",
                self.patch_height, self.patch_width
            )));
        }
        Ok(())
    }

    fn native_channels(&self, branch: Branch) -> usize {
        match branch {
            Branch::Spectral => self.bands,
            Branch::Height => self.patch_height / self.downsample_factor,
            Branch::Width => self.patch_width / self.downsample_factor,
        }
    }

    fn fused_channels(&self) -> usize {
        self.bands * self.branches.active().len()
    }

    /// (field name, value) for every field, in checkpoint order.
    pub fn fields(&self) -> [(&'static str, u32); 9] {
        [
            ("bands", self.bands as u32),
            ("base_channels", self.base_channels as u32),
            ("downsample_factor", self.downsample_factor as u32),
            ("ra_blocks_per_branch", self.ra_blocks_per_branch as u32),
            ("ra_inner_channels", self.ra_inner_channels as u32),
            ("eca_kernel", self.eca_kernel as u32),
            ("patch_height", self.patch_height as u32),
            ("patch_width", self.patch_width as u32),
            ("branches", self.branches.code()),
        ]
    }

    fn from_fields(v: &[u32; 9]) -> Result<Self> {
        let branches = Branches::from_code(v[8])
            .ok_or_else(|| Error::format("branches", format!("unknown branch code {}", v[8])))?;
        Ok(Self {
            bands: v[0] as usize,
            base_channels: v[1] as usize,
            downsample_factor: v[2] as usize,
            ra_blocks_per_branch: v[3] as usize,
            ra_inner_channels: v[4] as usize,
            eca_kernel: v[5] as usize,
            patch_height: v[6] as usize,
            patch_width: v[7] as usize,
            branches,
        })
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Kaiming normal with the given fan-in.
    Kaiming(usize),
    Zeros,
    Ones,
}

/// Ordered, name-addressable parameter collection.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Builds a store from (name, tensor) pairs; names must be unique.
    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in entries {
            if store.index.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter name `{name}`")));
            }
            store.push(name, t);
        }
        Ok(store)
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, i: usize, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.tensors[i].shape() {
            return Err(Error::Dimension(format!(
                "{}: expected shape {:?}, got {:?}",
                self.names[i],
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Total element count over a parameter collection.
pub fn count_parameters<T: Scalar>(params: &ParamStore<T>) -> usize {
    params.tensors().iter().map(Tensor::numel).sum()
}

/// Tape variables for every parameter, in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Reconstruction `[N, L, H, W]`.
    pub output: Var,
    /// Stage-1 cube `D` `[N, L, H, W]`.
    pub stage1: Var,
    /// Concatenated branch outputs before batch normalization.
    pub concat: Var,
    /// Per active branch: output back in `[N, L, H, W]`.
    pub branches: Vec<(Branch, Var)>,
}

/// Options that alter a forward pass without changing parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Zero the output of this branch before concatenation.
    pub ablate: Option<Branch>,
}

/// Variables of one residual attention block.
#[derive(Clone, Copy, Debug)]
pub struct RaBlockParams {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
    /// `[1, 1, k]` channel-attention kernel.
    pub eca_weight: Var,
}

/// Residual attention block: conv3×3 · relu · conv3×3, channel attention
/// (global pool → 1D conv across channels → sigmoid → rescale), plus the
/// input. Returns the output and the `[N, C, 1, 1]` attention gate.
pub fn ra_block<T: Scalar>(tape: &Tape<T>, input: Var, p: &RaBlockParams) -> Result<(Var, Var)> {
    let shape = tape.shape(input);
    let w_shape = tape.shape(p.conv1_weight);
    if shape.len() != 4 || w_shape.len() != 4 || shape[1] != w_shape[1] {
        return Err(Error::Dimension(format!(
            "RA block expects {:?} channels, input is {shape:?}",
            w_shape.get(1)
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let y = tape.conv2d(input, p.conv1_weight, Some(p.conv1_bias), 1, 1)?;
    let y = tape.relu(y);
    let y = tape.conv2d(y, p.conv2_weight, Some(p.conv2_bias), 1, 1)?;
    let descriptor = tape.global_avg_pool(y)?;
    let descriptor = tape.reshape(descriptor, &[n, 1, c])?;
    let k = tape.shape(p.eca_weight)[2];
    let gate = tape.conv1d(descriptor, p.eca_weight, (k - 1) / 2)?;
    let gate = tape.sigmoid(gate);
    let gate = tape.reshape(gate, &[n, c, 1, 1])?;
    let y = tape.channel_scale(y, gate)?;
    Ok((tape.add(y, input)?, gate))
}

/// A PTNet instance: configuration, parameters and batchnorm statistics.
#[derive(Clone, Debug)]
pub struct PtnetModel<T: Scalar> {
    config: PtnetConfig,
    params: ParamStore<T>,
    bn_stats: BatchNormStats<T>,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;
const RUNNING_MEAN: &str = "fuse.bn.running_mean";
const RUNNING_VAR: &str = "fuse.bn.running_var";

/// Parameter names, shapes and initializers for a configuration.
fn layout_params(cfg: &PtnetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut conv = |name: &str, c_out: usize, c_in: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![c_out, c_in, k, k], Init::Kaiming(c_in * k * k)));
        out.push((format!("{name}.bias"), vec![c_out], Init::Zeros));
    };
    let (l, base, inner) = (cfg.bands, cfg.base_channels, cfg.ra_inner_channels);
    conv("input.expand", base, 3, 3);
    conv("input.project", l, base, 3);
    conv("down", l, l, 3);
    let mut eca = Vec::new();
    for &branch in cfg.branches.active() {
        let native = cfg.native_channels(branch);
        let prefix = format!("branch.{}", branch.name());
        conv(&format!("{prefix}.proj_in"), inner, native, 1);
        for i in 0..cfg.ra_blocks_per_branch {
            conv(&format!("{prefix}.ra{i}.conv1"), inner, inner, 3);
            conv(&format!("{prefix}.ra{i}.conv2"), inner, inner, 3);
            eca.push((
                format!("{prefix}.ra{i}.eca.weight"),
                vec![1, 1, cfg.eca_kernel],
                Init::Kaiming(cfg.eca_kernel),
            ));
        }
        conv(&format!("{prefix}.proj_out"), native, inner, 1);
    }
    let fused = cfg.fused_channels();
    conv("output.conv1", base, fused, 3);
    conv("output.conv2", l, base, 3);
    out.extend(eca);
    out.push(("fuse.bn.gamma".into(), vec![fused], Init::Ones));
    out.push(("fuse.bn.beta".into(), vec![fused], Init::Zeros));
    out
}

impl<T: Scalar> PtnetModel<T> {
    /// Fresh model: Kaiming-normal conv weights, zero biases, unit gamma.
    pub fn new(config: PtnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout_params(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Kaiming(fan_in) => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::of(z * std)
                        })
                        .collect()
                }
                Init::Zeros => vec![T::zero(); numel],
                Init::Ones => vec![T::one(); numel],
            };
            params.push(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Self {
            config,
            params,
            bn_stats: BatchNormStats::new(config.fused_channels()),
        })
    }

    pub fn config(&self) -> &PtnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &BatchNormStats<T> {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut BatchNormStats<T> {
        &mut self.bn_stats
    }

    /// Sum of element counts over all trainable parameters.
    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Names and shapes of every trainable parameter.
    pub fn shape_dump(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        self.bind_vars(vars)
    }

    /// Wraps externally created variables (one per parameter, store order).
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundParams {
        assert_eq!(vars.len(), self.params.len(), "one variable per parameter");
        BoundParams {
            vars,
            index: self.params.index.clone(),
        }
    }

    pub fn forward(&mut self, tape: &Tape<T>, params: &BoundParams, rgb: Var, mode: NormMode) -> Result<Var> {
        let mut stats = std::mem::replace(&mut self.bn_stats, BatchNormStats { mean: vec![], var: vec![] });
        let out = self.forward_with_stats(tape, params, rgb, mode, &mut stats, ForwardOptions::default());
        self.bn_stats = stats;
        Ok(out?.output)
    }

    /// Full forward pass with caller-owned batchnorm statistics.
    pub fn forward_with_stats(
        &self,
        tape: &Tape<T>,
        p: &BoundParams,
        rgb: Var,
        mode: NormMode,
        stats: &mut BatchNormStats<T>,
        options: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let shape = tape.shape(rgb);
        let &[n, 3, h, w] = shape.as_slice() else {
            return Err(Error::Dimension(format!(
                "PTNet expects RGB input [N, 3, H, W], got {shape:?}"
            )));
        };
        let f = cfg.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by downsample_factor {f}"
            )));
        }
        if (h, w) != (cfg.patch_height, cfg.patch_width) {
            return Err(Error::Config(format!(
                "input {h}x{w} does not match the model patch size {}x{}",
                cfg.patch_height, cfg.patch_width
            )));
        }
        let conv = |x: Var, name: &str, stride: usize, pad: usize| -> Result<Var> {
            tape.conv2d(
                x,
                p.get(&format!("{name}.weight")),
                p.opt(&format!("{name}.bias")),
                stride,
                pad,
            )
        };

        // stage 1
        let x = conv(rgb, "input.expand", 1, 1)?;
        let x = tape.relu(x);
        let stage1 = conv(x, "input.project", 1, 1)?;
        // Same-padded conv sampled every f pixels, i.e. a stride-f conv3×3
        // whose window is centred on output pixel f·i.
        let down = conv(stage1, "down", 1, 1)?;
        let down = if f == 1 { down } else { tape.subsample2d(down, f)? };

        // stage 2
        let mut branch_outputs = Vec::new();
        for &branch in cfg.branches.active() {
            let prefix = format!("branch.{}", branch.name());
            let mut y = tape.permute(down, &branch.axes())?;
            y = conv(y, &format!("{prefix}.proj_in"), 1, 0)?;
            for i in 0..cfg.ra_blocks_per_branch {
                let block = format!("{prefix}.ra{i}");
                let params = RaBlockParams {
                    conv1_weight: p.get(&format!("{block}.conv1.weight")),
                    conv1_bias: p.get(&format!("{block}.conv1.bias")),
                    conv2_weight: p.get(&format!("{block}.conv2.weight")),
                    conv2_bias: p.get(&format!("{block}.conv2.bias")),
                    eca_weight: p.get(&format!("{block}.eca.weight")),
                };
                y = ra_block(tape, y, &params)?.0;
            }
            y = conv(y, &format!("{prefix}.proj_out"), 1, 0)?;
            y = tape.permute(y, &branch.inverse_axes())?;
            y = tape.bilinear_resize(y, h, w)?;
            if options.ablate == Some(branch) {
                y = tape.scale(y, 0.0);
            }
            branch_outputs.push((branch, y));
        }

        // stage 3
        let parts: Vec<Var> = branch_outputs.iter().map(|&(_, v)| v).collect();
        let concat = tape.concat(&parts, 1)?;
        let normed = tape.batchnorm2d(
            concat,
            p.get("fuse.bn.gamma"),
            p.get("fuse.bn.beta"),
            stats,
            mode,
            BN_MOMENTUM,
            BN_EPSILON,
        )?;
        let y = conv(normed, "output.conv1", 1, 1)?;
        let y = tape.relu(y);
        let y = conv(y, "output.conv2", 1, 1)?;
        let output = tape.add(y, stage1)?;
        debug_assert_eq!(tape.shape(output), vec![n, cfg.bands, h, w]);
        Ok(ForwardOutput {
            output,
            stage1,
            concat,
            branches: branch_outputs,
        })
    }

    /// Eval-mode inference on an `[N, 3, H, W]` tensor.
    pub fn predict(&self, rgb: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(rgb.clone());
        let mut stats = self.bn_stats.clone();
        let out = self.forward_with_stats(&tape, &params, x, NormMode::Eval, &mut stats, ForwardOptions::default())?;
        Ok(tape.value(out.output))
    }

    /// Every named tensor written to a checkpoint: parameters, then the
    /// batchnorm running statistics.
    fn records(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let c = self.bn_stats.mean.len();
        out.push((RUNNING_MEAN.into(), Tensor::from_vec(&[c], self.bn_stats.mean.clone()).expect("c > 0")));
        out.push((RUNNING_VAR.into(), Tensor::from_vec(&[c], self.bn_stats.var.clone()).expect("c > 0")));
        out
    }
}

/// Packs RGB images into an `[N, 3, H, W]` tensor.
pub fn rgb_batch<T: Scalar>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("empty RGB batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Dimension("RGB batch images differ in size".into()));
        }
        data.extend(img.values().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Packs cubes into an `[N, L, H, W]` tensor.
pub fn cube_batch<T: Scalar>(cubes: &[&Datacube]) -> Result<Tensor<T>> {
    let first = cubes
        .first()
        .ok_or_else(|| Error::Dimension("empty cube batch".into()))?;
    let mut data = Vec::with_capacity(cubes.len() * first.len());
    for c in cubes {
        if (c.width(), c.height(), c.bands()) != (first.width(), first.height(), first.bands()) {
            return Err(Error::Dimension("cube batch members differ in shape".into()));
        }
        let canonical = c.transpose(Layout::Lhw);
        data.extend(canonical.values().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[cubes.len(), first.bands(), first.height(), first.width()], data)
}

/// Extracts sample `index` of an `[N, L, H, W]` tensor as a cube.
pub fn tensor_to_cube<T: Scalar>(t: &Tensor<T>, index: usize, wavelengths: &[f64]) -> Result<Datacube> {
    let &[n, l, h, w] = t.shape() else {
        return Err(Error::Dimension(format!("expected [N, L, H, W], got {:?}", t.shape())));
    };
    if index >= n || l != wavelengths.len() {
        return Err(Error::Dimension(format!(
            "sample {index} of {n} with {l} bands vs {} wavelengths",
            wavelengths.len()
        )));
    }
    let sample = t.narrow(0, index, 1)?.to_vec();
    Datacube::new(
        w,
        h,
        wavelengths.to_vec(),
        Layout::Lhw,
        sample.into_iter().map(|v| v.as_f64() as f32).collect(),
    )
}

/// Mirror index for reflect padding (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads an RGB image on the right and bottom to `w` × `h`.
pub fn reflect_pad(img: &RgbImage, w: usize, h: usize) -> Result<RgbImage> {
    let (iw, ih) = (img.width(), img.height());
    if w < iw || h < ih {
        return Err(Error::Dimension(format!("cannot pad {iw}x{ih} down to {w}x{h}")));
    }
    let mut values = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for y in 0..h {
            let sy = reflect(y as isize, ih);
            for x in 0..w {
                values.push(img.get(reflect(x as isize, iw), sy, c));
            }
        }
    }
    RgbImage::new(w, h, values)
}

/// Reconstructs a cube of any size: reflect-pad to a multiple of the model
/// patch size, run each tile, stitch and crop back.
pub fn reconstruct_image<T: Scalar>(
    model: &PtnetModel<T>,
    rgb: &RgbImage,
    wavelengths: &[f64],
) -> Result<Datacube> {
    let cfg = model.config();
    if wavelengths.len() != cfg.bands {
        return Err(Error::Config(format!(
            "model reconstructs {} bands but {} wavelengths were given",
            cfg.bands,
            wavelengths.len()
        )));
    }
    let (pw, ph) = (cfg.patch_width, cfg.patch_height);
    let (w, h) = (rgb.width(), rgb.height());
    let padded_w = w.div_ceil(pw) * pw;
    let padded_h = h.div_ceil(ph) * ph;
    let padded = reflect_pad(rgb, padded_w, padded_h)?;
    let grid = PatchGrid::new(padded_w, padded_h, pw, ph)?;
    let mut tiles = Vec::with_capacity(grid.count());
    for (x0, y0) in grid.origins() {
        let tile = padded.crop(x0, y0, pw, ph)?;
        let out = model.predict(&rgb_batch::<T>(&[&tile])?)?;
        tiles.push(tensor_to_cube(&out, 0, wavelengths)?);
    }
    grid.assemble(&tiles)?.crop(0, 0, w, h)
}

/// Serializes a model as `PTN1`.
pub fn encode_checkpoint<T: Scalar>(model: &PtnetModel<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PTN1_MAGIC);
    let fields = model.config.fields();
    buf.write_u32::<LittleEndian>(fields.len() as u32).unwrap();
    for (_, v) in fields {
        buf.write_u32::<LittleEndian>(v).unwrap();
    }
    let records = model.records();
    buf.write_u32::<LittleEndian>(records.len() as u32).unwrap();
    for (name, t) in records {
        buf.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
        for &d in t.shape() {
            buf.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for v in t.to_vec() {
            buf.write_f32::<LittleEndian>(v.as_f64() as f32).unwrap();
        }
    }
    buf
}

fn truncated(what: &str) -> Error {
    Error::format(what, "checkpoint truncated")
}

/// Parses a `PTN1` stream into its configuration and model.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<PtnetModel<T>> {
    let mut rd = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != PTN1_MAGIC {
        return Err(Error::format("magic", format!("expected \"PTN1\", found {magic:?}")));
    }
    let field_count = rd.read_u32::<LittleEndian>().map_err(|_| truncated("config"))?;
    if field_count != 9 {
        return Err(Error::format("config", format!("expected 9 config fields, found {field_count}")));
    }
    let mut fields = [0u32; 9];
    for f in fields.iter_mut() {
        *f = rd.read_u32::<LittleEndian>().map_err(|_| truncated("config"))?;
    }
    let config = PtnetConfig::from_fields(&fields)?;
    config
        .validate()
        .map_err(|e| Error::format("config", e.to_string()))?;
    let mut model = PtnetModel::<T>::new(config, 0)?;
    let count = rd.read_u32::<LittleEndian>().map_err(|_| truncated("records"))? as usize;
    let expected = model.params.len() + 2;
    if count != expected {
        return Err(Error::format(
            "records",
            format!("expected {expected} records, found {count}"),
        ));
    }
    for _ in 0..count {
        let len = rd.read_u32::<LittleEndian>().map_err(|_| truncated("name"))? as usize;
        let mut name = vec![0u8; len];
        rd.read_exact(&mut name).map_err(|_| truncated("name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("name", "not UTF-8"))?;
        let rank = rd.read_u32::<LittleEndian>().map_err(|_| truncated(&name))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.read_u32::<LittleEndian>().map_err(|_| truncated(&name))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0f32; numel];
        rd.read_f32_into::<LittleEndian>(&mut raw)
            .map_err(|_| truncated(&name))?;
        let values: Vec<T> = raw.into_iter().map(|v| T::of(v as f64)).collect();
        match name.as_str() {
            RUNNING_MEAN | RUNNING_VAR => {
                if values.len() != model.bn_stats.mean.len() {
                    return Err(Error::format(&name, "wrong length"));
                }
                if name == RUNNING_MEAN {
                    model.bn_stats.mean = values;
                } else {
                    model.bn_stats.var = values;
                }
            }
            _ => {
                let i = model
                    .params
                    .position(&name)
                    .ok_or_else(|| Error::format("records", format!("unknown parameter `{name}`")))?;
                let t = Tensor::from_vec(&shape, values)
                    .map_err(|e| Error::format(&name, e.to_string()))?;
                model
                    .params
                    .set(i, t)
                    .map_err(|e| Error::format(&name, e.to_string()))?;
            }
        }
    }
    if (rd.position() as usize) != bytes.len() {
        return Err(Error::format("records", "trailing bytes after last record"));
    }
    Ok(model)
}

pub fn save_weights<T: Scalar>(model: &PtnetModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint whose configuration is not known in advance.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<PtnetModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists its configuration equals `config`.
pub fn load_weights<T: Scalar>(path: impl AsRef<Path>, config: &PtnetConfig) -> Result<PtnetModel<T>> {
    let model: PtnetModel<T> = load_checkpoint(path)?;
    let differing: Vec<String> = model
        .config
        .fields()
        .iter()
        .zip(config.fields())
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, b)| format!("{} (file {}, expected {})", a.0, a.1, b.1))
        .collect();
    if !differing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "configuration mismatch: {}",
            differing.join(", ")
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(bands: usize, h: usize, w: usize) -> PtnetConfig {
        PtnetConfig {
            base_channels: 4,
            ra_inner_channels: 4,
            ..PtnetConfig::new(bands, h, w)
        }
    }

    fn random_rgb(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.random::<f64>())
    }

    #[test]
    fn output_shape_contract() {
        let mut model = PtnetModel::<f64>::new(tiny(8, 16, 16), 1).unwrap();
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let x = tape.constant(random_rgb(16, 16, 2));
        let y = model.forward(&tape, &p, x, NormMode::Train).unwrap();
        assert_eq!(tape.shape(y), vec![1, 8, 16, 16]);
    }

    #[test]
    fn indivisible_input_rejected_before_compute() {
        let model = PtnetModel::<f64>::new(tiny(4, 8, 8), 1).unwrap();
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 7, 8]));
        let before = tape.len();
        let mut stats = model.bn_stats().clone();
        let r = model.forward_with_stats(&tape, &p, x, NormMode::Eval, &mut stats, ForwardOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(4, 8, 8);
        c.eca_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = tiny(4, 8, 8);
        c.downsample_factor = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(4, 6, 8);
        c.downsample_factor = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_ra_block_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(random_rgb(6, 6, 3));
        let p = RaBlockParams {
            conv1_weight: tape.param(Tensor::zeros(&[3, 3, 3, 3])),
            conv1_bias: tape.param(Tensor::zeros(&[3])),
            conv2_weight: tape.param(Tensor::zeros(&[3, 3, 3, 3])),
            conv2_bias: tape.param(Tensor::zeros(&[3])),
            eca_weight: tape.param(Tensor::zeros(&[1, 1, 3])),
        };
        let (y, gate) = ra_block(&tape, x, &p).unwrap();
        assert!(tape.value(y).values_eq(&tape.value(x)));
        assert!(tape.value(gate).to_vec().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn ra_block_channel_mismatch() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 6, 6]));
        let p = RaBlockParams {
            conv1_weight: tape.param(Tensor::zeros(&[3, 3, 3, 3])),
            conv1_bias: tape.param(Tensor::zeros(&[3])),
            conv2_weight: tape.param(Tensor::zeros(&[3, 3, 3, 3])),
            conv2_bias: tape.param(Tensor::zeros(&[3])),
            eca_weight: tape.param(Tensor::zeros(&[1, 1, 3])),
        };
        assert!(matches!(ra_block(&tape, x, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_count_matches_shape_dump() {
        let a = PtnetModel::<f32>::new(tiny(8, 16, 16), 1).unwrap();
        let b = PtnetModel::<f32>::new(tiny(8, 16, 16), 99).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        let brute: usize = a
            .shape_dump()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(a.parameter_count(), brute);
    }

    #[test]
    fn single_conv_count() {
        let store = ParamStore::from_named(vec![
            ("conv.weight".into(), Tensor::<f32>::zeros(&[8, 3, 1, 1])),
            ("conv.bias".into(), Tensor::zeros(&[8])),
        ])
        .unwrap();
        assert_eq!(count_parameters(&store), 32);
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (0..7).map(|i| reflect(i, 3)).collect();
        assert_eq!(idx, vec![0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn checkpoint_errors() {
        let model = PtnetModel::<f32>::new(tiny(4, 8, 8), 5).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode_checkpoint::<f32>(&[]), Err(Error::Format { .. })));
        let back: PtnetModel<f32> = decode_checkpoint(&bytes).unwrap();
        for ((_, a), (_, b)) in back.params().iter().zip(model.params().iter()) {
            assert!(a.values_eq(b));
        }
    }
}
