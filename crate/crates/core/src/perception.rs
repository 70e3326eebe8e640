//! Convolutional encoder from a stacked frame tensor to the `l × d` feature cube.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::conv_output_len;
use crate::numerics::{Conv2d, ParamStore, Tape, Tensor, Var};
use crate::signal::frames::{FRAME_HEIGHT, FRAME_WIDTH, STACK_DEPTH};

/// Spatial grid of the feature cube.
pub const GRID_ROWS: usize = 12;
pub const GRID_COLS: usize = 20;
/// Number of regions `l`.
pub const REGIONS: usize = GRID_ROWS * GRID_COLS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            filters,
            kernel,
            stride,
            padding,
        }
    }
}

/// Layer schedule of the encoder. All layers use ReLU and no pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<ConvSpec>,
}

impl Default for EncoderConfig {
    /// 24/36/48 filters at 5×5 stride 2, then two 64-filter 3×3 layers:
    /// 90×160 → 45×80 → 23×40 → 12×20 → 12×20 → 12×20.
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3 * STACK_DEPTH,
            height: FRAME_HEIGHT,
            width: FRAME_WIDTH,
            layers: vec![
                ConvSpec::new(24, 5, 2, 2),
                ConvSpec::new(36, 5, 2, 2),
                ConvSpec::new(48, 5, 2, 2),
                ConvSpec::new(64, 3, 1, 1),
                ConvSpec::new(64, 3, 1, 1),
            ],
        }
    }
}

impl EncoderConfig {
    /// A narrow schedule with the same 12×20 output, cheap enough for
    /// single-core training: 90×160 → 23×40 → 12×20, then three 1×1 layers.
    /// Each output cell sees a 13×13 pixel window, so regions stay local.
    pub fn compact(depth: usize) -> Self {
        EncoderConfig {
            in_channels: 3 * STACK_DEPTH,
            height: FRAME_HEIGHT,
            width: FRAME_WIDTH,
            layers: vec![
                ConvSpec::new(8, 5, 4, 2),
                ConvSpec::new(16, 3, 2, 1),
                ConvSpec::new(16, 1, 1, 0),
                ConvSpec::new(depth, 1, 1, 0),
                ConvSpec::new(depth, 1, 1, 0),
            ],
        }
    }

    /// Output `(depth, rows, cols)` after all layers.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w, mut c) = (self.height, self.width, self.in_channels);
        for (i, l) in self.layers.iter().enumerate() {
            if l.filters == 0 {
                return Err(Error::Config(format!("encoder layer {i}: zero filters")));
            }
            h = conv_output_len(h, l.kernel, l.stride, l.padding)
                .ok_or_else(|| Error::Config(format!("encoder layer {i}: kernel does not fit height {h}")))?;
            w = conv_output_len(w, l.kernel, l.stride, l.padding)
                .ok_or_else(|| Error::Config(format!("encoder layer {i}: kernel does not fit width {w}")))?;
            c = l.filters;
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 5 {
            return Err(Error::Config(format!("encoder needs 5 layers, got {}", self.layers.len())));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("encoder input has zero channels".into()));
        }
        let (_, h, w) = self.output_shape()?;
        if (h, w) != (GRID_ROWS, GRID_COLS) {
            return Err(Error::Config(format!(
                "encoder output grid is {h}×{w}, expected {GRID_ROWS}×{GRID_COLS}"
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.last().map_or(0, |l| l.filters)
    }
}

/// Visual features for one time step: `l = 240` rows of `d` values. Row `i`
/// is grid cell `(i / 20, i % 20)`, row-major from the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCube {
    tensor: Tensor,
}

impl FeatureCube {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 2 || tensor.shape()[0] != REGIONS {
            return Err(Error::Shape {
                op: "feature_cube",
                message: format!("expected [{REGIONS}, d], got {:?}", tensor.shape()),
            });
        }
        Ok(FeatureCube { tensor })
    }

    pub fn regions(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn region(&self, i: usize) -> &[f64] {
        let d = self.depth();
        &self.tensor.data()[i * d..(i + 1) * d]
    }
}

pub fn region_index(row: usize, col: usize) -> usize {
    row * GRID_COLS + col
}

pub fn region_cell(i: usize) -> (usize, usize) {
    (i / GRID_COLS, i % GRID_COLS)
}

/// The 5-layer ReLU convolutional encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<Conv2d>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut c = config.in_channels;
        let mut layers = Vec::new();
        for (i, l) in config.layers.iter().enumerate() {
            layers.push(Conv2d::new(
                store,
                &format!("{name}.conv{i}"),
                c,
                l.filters,
                (l.kernel, l.kernel),
                (l.stride, l.stride),
                (l.padding, l.padding),
                rng,
            )?);
            c = l.filters;
        }
        Ok(Encoder { config, layers })
    }

    pub fn bind(store: &ParamStore, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Conv2d::bind(
                    store,
                    &format!("{name}.conv{i}"),
                    (l.stride, l.stride),
                    (l.padding, l.padding),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { config, layers })
    }

    /// Records the forward pass of a `[C, H, W]` stack; returns `[l, d]`.
    pub fn forward(&self, tape: &mut Tape<'_>, stack: Var) -> Result<Var> {
        let s = tape.shape(stack).to_vec();
        let want = [self.config.in_channels, self.config.height, self.config.width];
        if s != want {
            return Err(Error::Shape {
                op: "encode",
                message: format!("stack shape {s:?}, expected {want:?}"),
            });
        }
        let mut x = stack;
        for conv in &self.layers {
            x = conv.forward(tape, x)?;
            x = tape.relu(x);
        }
        let d = self.config.depth();
        let flat = tape.reshape(x, &[d, REGIONS])?;
        tape.transpose(flat)
    }

    /// Inference-only forward pass.
    pub fn encode(&self, store: &ParamStore, stack: &Tensor) -> Result<FeatureCube> {
        let mut tape = Tape::inference(store);
        let x = tape.constant(stack.clone());
        let out = self.forward(&mut tape, x)?;
        FeatureCube::new(tape.value(out).clone())
    }
}
