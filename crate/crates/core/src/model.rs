//! The 16x super-resolution network.
//!
//! Stem conv (1 -> stem channels) feeds a stack of MobileNetV3-style
//! inverted-residual blocks laid out per the EfficientNetV2-S stage table,
//! with batch norm removed and LeakyReLU activations. Two sub-pixel
//! convolution blocks upscale 4x each; the result is summed with an
//! interpolated copy of the input and passed through a final conv. Spatial
//! resolution is unchanged until the upsampling blocks, so every stage runs
//! at the input's 25x25.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interp::{self, InterpMethod};
use crate::ops;
use crate::tensor::{Element, Graph, Shape, Tensor, Var};

/// One stage of the block stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub expansion_ratio: usize,
    pub num_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub se_ratio: f64,
}

impl StageSpec {
    pub fn new(out_channels: usize, expansion_ratio: usize, num_layers: usize) -> StageSpec {
        StageSpec {
            out_channels,
            expansion_ratio,
            num_layers,
            kernel: 3,
            stride: 1,
            se_ratio: 0.25,
        }
    }
}

/// A sub-pixel upsampling block: conv to `out_channels * factor^2`, then
/// pixel shuffle by `factor`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub up1: UpSpec,
    pub up2: UpSpec,
    pub skip_interpolation: InterpMethod,
    pub final_kernel: usize,
    pub leaky_slope: f64,
    pub scale_factor: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size configuration: stage channels (24,48,64,128,160,256),
    /// expansions (1,4,4,4,6,6), layer counts (2,4,4,6,9,15).
    pub fn production(seed: u64) -> ModelConfig {
        ModelConfig {
            stem_channels: 24,
            stages: vec![
                StageSpec::new(24, 1, 2),
                StageSpec::new(48, 4, 4),
                StageSpec::new(64, 4, 4),
                StageSpec::new(128, 4, 6),
                StageSpec::new(160, 6, 9),
                StageSpec::new(256, 6, 15),
            ],
            up1: UpSpec {
                in_channels: 256,
                out_channels: 64,
                factor: 4,
            },
            up2: UpSpec {
                in_channels: 64,
                out_channels: 1,
                factor: 4,
            },
            skip_interpolation: InterpMethod::Bicubic,
            final_kernel: 3,
            leaky_slope: 0.2,
            scale_factor: 16,
            seed,
        }
    }

    /// Desk-scale configuration: stage channels divided by 8, one layer per
    /// stage. Same topology and shape law.
    pub fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            stem_channels: 3,
            stages: vec![
                StageSpec::new(3, 1, 1),
                StageSpec::new(6, 4, 1),
                StageSpec::new(8, 4, 1),
                StageSpec::new(16, 4, 1),
                StageSpec::new(20, 6, 1),
                StageSpec::new(32, 6, 1),
            ],
            up1: UpSpec {
                in_channels: 32,
                out_channels: 8,
                factor: 4,
            },
            up2: UpSpec {
                in_channels: 8,
                out_channels: 1,
                factor: 4,
            },
            skip_interpolation: InterpMethod::Bicubic,
            final_kernel: 3,
            leaky_slope: 0.2,
            scale_factor: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Error::Config(format!("{name}: {msg}"));
        if self.stem_channels == 0 {
            return Err(field("stem_channels", "must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(field("stages", "at least one stage required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let name = format!("stages[{i}]");
            if s.out_channels == 0 || s.expansion_ratio == 0 || s.num_layers == 0 {
                return Err(field(&name, "channels, expansion, layers must be positive".into()));
            }
            if s.kernel % 2 == 0 {
                return Err(field(&name, format!("kernel {} must be odd", s.kernel)));
            }
            if s.stride != 1 {
                return Err(field(&name, "stride is fixed at 1".into()));
            }
            if !(s.se_ratio > 0.0 && s.se_ratio <= 1.0) {
                return Err(field(&name, format!("se_ratio {} outside (0, 1]", s.se_ratio)));
            }
        }
        let last = self.stages.last().expect("nonempty").out_channels;
        if self.up1.in_channels != last {
            return Err(field(
                "up1.in_channels",
                format!("{} must match last stage channels {last}", self.up1.in_channels),
            ));
        }
        if self.up2.in_channels != self.up1.out_channels {
            return Err(field(
                "up2.in_channels",
                format!(
                    "{} must match up1 output channels {}",
                    self.up2.in_channels, self.up1.out_channels
                ),
            ));
        }
        if self.up2.out_channels != 1 {
            return Err(field(
                "up2.out_channels",
                "must be 1 so the interpolated skip addition is well-typed".into(),
            ));
        }
        if self.up1.factor * self.up2.factor != self.scale_factor || self.scale_factor != 16 {
            return Err(field(
                "scale_factor",
                format!(
                    "up1.factor * up2.factor = {} must equal scale_factor = {} = 16",
                    self.up1.factor * self.up2.factor,
                    self.scale_factor
                ),
            ));
        }
        if self.final_kernel % 2 == 0 {
            return Err(field("final_kernel", "must be odd".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(field("leaky_slope", "must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Reduction width of the squeeze-excite interior for a block with the given
/// expanded channel count.
pub fn se_reduced_channels(expanded: usize, se_ratio: f64) -> usize {
    ((expanded as f64 * se_ratio).floor() as usize).max(1)
}

/// Named parameter tensor plus its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    expand: Option<ConvIdx>,
    dw: ConvIdx,
    se_reduce: ConvIdx,
    se_expand: ConvIdx,
    project: ConvIdx,
}

/// Graph handles for one inverted-residual block's weights.
pub struct MbconvVars {
    pub expand: Option<(Var, Var)>,
    pub dw: (Var, Var),
    pub se_reduce: (Var, Var),
    pub se_expand: (Var, Var),
    pub project: (Var, Var),
}

/// Expansion conv (if any) -> depthwise 3x3 -> squeeze-excite -> linear 1x1
/// projection, with a residual connection when input and output channels
/// match. No batch normalization anywhere.
pub fn mbconv_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    vars: &MbconvVars,
    slope: f64,
) -> Result<Var> {
    let cin = g.value(x).shape().c;
    let mut cur = x;
    if let Some((w, b)) = vars.expand {
        cur = ops::conv2d(g, cur, w, Some(b), 1, 0)?;
        cur = ops::leaky_relu(g, cur, slope)?;
    }
    let dw_kernel = g.value(vars.dw.0).shape().h;
    cur = ops::depthwise_conv2d(g, cur, vars.dw.0, Some(vars.dw.1), 1, (dw_kernel - 1) / 2)?;
    cur = ops::leaky_relu(g, cur, slope)?;
    cur = ops::se_block(
        g,
        cur,
        vars.se_reduce.0,
        vars.se_reduce.1,
        vars.se_expand.0,
        vars.se_expand.1,
        slope,
    )?;
    // Linear bottleneck: no activation after the projection.
    cur = ops::conv2d(g, cur, vars.project.0, Some(vars.project.1), 1, 0)?;
    let cout = g.value(cur).shape().c;
    if cin == cout {
        cur = g.add(cur, x)?;
    }
    Ok(cur)
}

/// Result of one forward pass: the output node, the graph handle of every
/// parameter (aligned with [`Model::params`]), and the shape observed at
/// each stage boundary.
pub struct ForwardPass {
    pub output: Var,
    pub param_vars: Vec<Var>,
    pub stage_shapes: Vec<Shape>,
}

#[derive(Debug)]
pub struct Model<T: Element> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    stem: ConvIdx,
    blocks: Vec<BlockIdx>,
    up1: ConvIdx,
    up2: ConvIdx,
    final_conv: ConvIdx,
}

struct Builder<T: Element> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
    gain: f64,
}

impl<T: Element> Builder<T> {
    /// Kaiming-style uniform init scaled for the LeakyReLU gain; zero biases.
    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> ConvIdx {
        let fan_in = (ci * k * k) as f64;
        let bound = self.gain * (3.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(Shape::new(co, ci, k, k), |_| {
            T::from_f64((self.rng.gen::<f64>() * 2.0 - 1.0) * bound)
        });
        let w = self.push(format!("{name}.weight"), weight);
        let b = self.push(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, co, 1, 1)),
        );
        ConvIdx { w, b }
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        self.params.len() - 1
    }
}

impl<T: Element> Model<T> {
    /// Builds and initializes the network from the config seed. Identical
    /// seeds produce bitwise-identical parameters.
    pub fn build(config: ModelConfig) -> Result<Model<T>> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            gain: (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt(),
        };

        let stem = b.conv("stem", config.stem_channels, 1, 3);

        let mut blocks = Vec::new();
        let mut cin = config.stem_channels;
        for (si, stage) in config.stages.iter().enumerate() {
            for li in 0..stage.num_layers {
                let prefix = format!("stage{}.block{}", si + 1, li + 1);
                let cout = stage.out_channels;
                let expanded = cin * stage.expansion_ratio;
                let expand = (stage.expansion_ratio > 1)
                    .then(|| b.conv(&format!("{prefix}.expand"), expanded, cin, 1));
                let dw_idx = {
                    // Depthwise weights are (expanded, 1, k, k).
                    let fan_in = (stage.kernel * stage.kernel) as f64;
                    let bound = b.gain * (3.0 / fan_in).sqrt();
                    let weight = Tensor::from_fn(
                        Shape::new(expanded, 1, stage.kernel, stage.kernel),
                        |_| T::from_f64((b.rng.gen::<f64>() * 2.0 - 1.0) * bound),
                    );
                    let w = b.push(format!("{prefix}.dw.weight"), weight);
                    let bias = b.push(
                        format!("{prefix}.dw.bias"),
                        Tensor::zeros(Shape::new(1, expanded, 1, 1)),
                    );
                    ConvIdx { w, b: bias }
                };
                let cr = se_reduced_channels(expanded, stage.se_ratio);
                let se_reduce = b.conv(&format!("{prefix}.se_reduce"), cr, expanded, 1);
                let se_expand = b.conv(&format!("{prefix}.se_expand"), expanded, cr, 1);
                let project = b.conv(&format!("{prefix}.project"), cout, expanded, 1);
                blocks.push(BlockIdx {
                    expand,
                    dw: dw_idx,
                    se_reduce,
                    se_expand,
                    project,
                });
                cin = cout;
            }
        }

        let up1 = b.conv(
            "up1",
            config.up1.out_channels * config.up1.factor * config.up1.factor,
            config.up1.in_channels,
            3,
        );
        let up2 = b.conv(
            "up2",
            config.up2.out_channels * config.up2.factor * config.up2.factor,
            config.up2.in_channels,
            3,
        );
        let final_conv = b.conv("final", 1, 1, config.final_kernel);

        Ok(Model {
            config,
            params: b.params,
            stem,
            blocks,
            up1,
            up2,
            final_conv,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Total scalar parameter count.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let param = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))?;
        if param.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter '{name}' has shape {}, got {}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    pub fn zero_all_weights(&mut self) {
        for p in &mut self.params {
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale * graph gradient` of every parameter leaf into the
    /// model's gradient buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, pass: &ForwardPass, scale: f64) {
        let s = T::from_f64(scale);
        for (param, var) in self.params.iter_mut().zip(&pass.param_vars) {
            if let Some(g) = graph.grad(*var) {
                match &mut param.grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += *v * s;
                        }
                    }
                    slot => {
                        *slot = Some(g.iter().map(|v| *v * s).collect());
                    }
                }
            }
        }
    }

    fn block_vars(&self, block: &BlockIdx, pv: &[Var]) -> MbconvVars {
        MbconvVars {
            expand: block.expand.map(|c| (pv[c.w], pv[c.b])),
            dw: (pv[block.dw.w], pv[block.dw.b]),
            se_reduce: (pv[block.se_reduce.w], pv[block.se_reduce.b]),
            se_expand: (pv[block.se_expand.w], pv[block.se_expand.b]),
            project: (pv[block.project.w], pv[block.project.b]),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, input: &Tensor<T>) -> Result<ForwardPass> {
        self.forward_with_overrides(g, input, &[])
    }

    /// Forward pass with selected parameters replaced by existing graph
    /// variables; used by the gradient-check harness.
    pub fn forward_with_overrides(
        &self,
        g: &mut Graph<T>,
        input: &Tensor<T>,
        overrides: &[(usize, Var)],
    ) -> Result<ForwardPass> {
        let ishape = input.shape();
        if ishape.c != 1 {
            return Err(Error::Dimension(format!(
                "model input must have 1 channel, got {}",
                ishape.c
            )));
        }
        if ishape.h < 3 || ishape.w < 3 {
            return Err(Error::Dimension(format!(
                "model input must be at least 3x3, got {}x{}",
                ishape.h, ishape.w
            )));
        }

        let param_vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                overrides
                    .iter()
                    .find(|(idx, _)| *idx == i)
                    .map(|(_, var)| *var)
                    .unwrap_or_else(|| g.leaf(&p.value))
            })
            .collect();
        let pv = &param_vars;

        let slope = self.config.leaky_slope;
        let x = g.constant(input.detached());

        let mut cur = ops::conv2d(g, x, pv[self.stem.w], Some(pv[self.stem.b]), 1, 1)?;
        cur = ops::leaky_relu(g, cur, slope)?;

        let mut stage_shapes = Vec::with_capacity(self.config.stages.len());
        let mut block_iter = self.blocks.iter();
        for stage in &self.config.stages {
            for _ in 0..stage.num_layers {
                let block = block_iter.next().expect("block count matches config");
                let vars = self.block_vars(block, pv);
                cur = mbconv_forward(g, cur, &vars, slope)?;
            }
            let s = g.value(cur).shape();
            debug_assert!(
                s.h == ishape.h && s.w == ishape.w,
                "stage boundary changed spatial dims: {s}"
            );
            stage_shapes.push(s);
        }

        // Upsampling head: conv -> shuffle (-> LeakyReLU after the first).
        cur = ops::conv2d(g, cur, pv[self.up1.w], Some(pv[self.up1.b]), 1, 1)?;
        cur = ops::pixel_shuffle(g, cur, self.config.up1.factor)?;
        cur = ops::leaky_relu(g, cur, slope)?;
        cur = ops::conv2d(g, cur, pv[self.up2.w], Some(pv[self.up2.b]), 1, 1)?;
        cur = ops::pixel_shuffle(g, cur, self.config.up2.factor)?;

        // Interpolated skip connection from the raw input.
        let skip = self.interpolate_input(input)?;
        let skip = g.constant(skip);
        cur = g.add(cur, skip)?;

        let final_pad = (self.config.final_kernel - 1) / 2;
        cur = ops::conv2d(
            g,
            cur,
            pv[self.final_conv.w],
            Some(pv[self.final_conv.b]),
            1,
            final_pad,
        )?;

        let out_shape = g.value(cur).shape();
        debug_assert!(
            out_shape.h == ishape.h * self.config.scale_factor
                && out_shape.w == ishape.w * self.config.scale_factor,
            "output shape {out_shape} violates the 16x law for input {ishape}"
        );

        Ok(ForwardPass {
            output: cur,
            param_vars,
            stage_shapes,
        })
    }

    /// Upscales the raw input by the model's scale factor with the
    /// configured classical method; this is the skip-path tensor.
    pub fn interpolate_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        let f = self.config.scale_factor;
        let (oh, ow) = (s.h * f, s.w * f);
        let mut out = Vec::with_capacity(s.n * oh * ow);
        for n in 0..s.n {
            let plane = &input.data()[n * s.h * s.w..][..s.h * s.w];
            let up = interp::resize(plane, s.h, s.w, oh, ow, self.config.skip_interpolation)?;
            out.extend_from_slice(&up);
        }
        Tensor::new(Shape::new(s.n, 1, oh, ow), out)
    }
}
