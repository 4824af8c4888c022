use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{valid_extent, ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Relu,
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
}

/// Convolutional feature extractor: a sequence of layers applied to an
/// `[antennas, subcarriers, time]` input, flattened at the end.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Input size of the reference capture: 3 antennas, 114 subcarriers, 500 steps.
pub const REFERENCE_INPUT: [usize; 3] = [3, 114, 500];

impl EncoderArch {
    /// The reference extractor: four valid convolutions with ReLU and two
    /// `(1,2)` max-pools.
    pub fn reference(input: [usize; 3]) -> Self {
        use LayerSpec::*;
        EncoderArch {
            input,
            layers: vec![
                Conv {
                    filters: 32,
                    kernel: (15, 23),
                    stride: (9, 9),
                },
                Relu,
                Conv {
                    filters: 32,
                    kernel: (3, 7),
                    stride: (1, 1),
                },
                Relu,
                MaxPool {
                    window: (1, 2),
                    stride: (1, 2),
                },
                Conv {
                    filters: 64,
                    kernel: (3, 7),
                    stride: (1, 1),
                },
                Relu,
                Conv {
                    filters: 96,
                    kernel: (3, 7),
                    stride: (1, 1),
                },
                Relu,
                MaxPool {
                    window: (1, 2),
                    stride: (1, 2),
                },
            ],
        }
    }

    /// Activation shape after each layer, starting with the input.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input;
        if cur.contains(&0) {
            return Err(Error::shape("encoder", format!("input {cur:?} has a zero extent")));
        }
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                } => [
                    filters,
                    extent(cur[1], kernel.0, stride.0, i, "height")?,
                    extent(cur[2], kernel.1, stride.1, i, "width")?,
                ],
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { window, stride } => [
                    cur[0],
                    extent(cur[1], window.0, stride.0, i, "height")?,
                    extent(cur[2], window.1, stride.1, i, "width")?,
                ],
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Length of the flattened feature vector.
    pub fn feature_dim(&self) -> Result<usize> {
        let last = *self.shapes()?.last().expect("input shape present");
        Ok(last.iter().product())
    }

    /// `(layer index, parameter prefix)` for each convolution.
    pub(crate) fn conv_names(&self) -> Vec<(usize, String)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .enumerate()
            .map(|(n, (i, _))| (i, format!("conv{}", n + 1)))
            .collect()
    }

    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (i, name) in self.conv_names() {
            if let LayerSpec::Conv { filters, kernel, .. } = self.layers[i] {
                let c = shapes[i][0];
                out.push((format!("{name}.weight"), vec![filters, c, kernel.0, kernel.1]));
                out.push((format!("{name}.bias"), vec![filters]));
            }
        }
        Ok(out)
    }
}

fn extent(input: usize, window: usize, stride: usize, layer: usize, axis: &str) -> Result<usize> {
    valid_extent(input, window, stride).ok_or_else(|| {
        Error::shape(
            "encoder",
            format!("layer {layer}: {axis} {input} too small for window {window}"),
        )
    })
}

/// Bottleneck MLP ending in a softmax over `out_dim` pseudo-classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorArch {
    pub input: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ProjectorArch {
    pub fn new(input: usize) -> Self {
        ProjectorArch {
            input,
            hidden: 256,
            out_dim: 32,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("fc1.weight".into(), vec![self.hidden, self.input]),
            ("fc1.bias".into(), vec![self.hidden]),
            ("fc2.weight".into(), vec![self.out_dim, self.hidden]),
            ("fc2.bias".into(), vec![self.out_dim]),
        ]
    }
}

/// Embedding layer (128 wide, ReLU) followed by a softmax head over the task
/// classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input: usize,
    pub embed: usize,
    pub classes: usize,
}

impl ClassifierArch {
    pub fn new(input: usize, classes: usize) -> Self {
        ClassifierArch {
            input,
            embed: 128,
            classes,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("embed.weight".into(), vec![self.embed, self.input]),
            ("embed.bias".into(), vec![self.embed]),
            ("out.weight".into(), vec![self.classes, self.embed]),
            ("out.bias".into(), vec![self.classes]),
        ]
    }
}

/// Check that `params` holds exactly the expected names and shapes.
pub fn validate_params<T: Real>(expected: &[(String, Vec<usize>)], params: &ParamSet<T>) -> Result<()> {
    for (name, dims) in expected {
        let t = params.get(name)?;
        if t.dims() != dims.as_slice() {
            return Err(Error::shape(
                "params",
                format!("`{name}` expected {dims:?}, got {:?}", t.dims()),
            ));
        }
    }
    if params.len() != expected.len() {
        let extra: Vec<&str> = params
            .names()
            .filter(|n| !expected.iter().any(|(e, _)| e == n))
            .collect();
        return Err(Error::Invalid(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}
