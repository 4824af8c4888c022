//! The three networks: convolutional encoder, projector and classifier.
//!
//! Forward passes come in a plain form and a traced form; the trace keeps
//! the activations the matching backward pass needs.

mod arch;
pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use arch::{
    validate_params, ClassifierArch, EncoderArch, LayerSpec, ProjectorArch, REFERENCE_INPUT,
};

use crate::error::{Error, Result};
use crate::numerics::{
    conv2d, conv2d_backward, dense, dense_backward, maxpool2d_backward, maxpool2d_indexed, relu,
    relu_backward, softmax_backward, softmax_rows, ParamSet, ProbBatch, Real, Tensor,
};

/// Glorot-uniform weights, zero biases, drawn in the order of `shapes`.
fn init_from_shapes<T: Real>(shapes: &[(String, Vec<usize>)], seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, dims) in shapes {
        let len: usize = dims.iter().product();
        let value = if name.ends_with(".bias") {
            Tensor::zeros(dims)
        } else {
            let receptive: usize = dims[2..].iter().product();
            let fan_in = dims[1] * receptive;
            let fan_out = dims[0] * receptive;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..len).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            Tensor::new(dims, data).expect("shape from arch")
        };
        params.insert(name.clone(), value).expect("unique names");
    }
    params
}

pub fn init_encoder<T: Real>(arch: &EncoderArch, seed: u64) -> Result<ParamSet<T>> {
    Ok(init_from_shapes(&arch.param_shapes()?, seed))
}

pub fn init_projector<T: Real>(arch: &ProjectorArch, seed: u64) -> ParamSet<T> {
    init_from_shapes(&arch.param_shapes(), seed)
}

pub fn init_classifier<T: Real>(arch: &ClassifierArch, seed: u64) -> ParamSet<T> {
    init_from_shapes(&arch.param_shapes(), seed)
}

/// Activations of one encoder pass. `acts[0]` is the input and `acts[l + 1]`
/// the output of layer `l`; pooling layers also keep their argmax indices.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    acts: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl<T: Real> EncoderTrace<T> {
    /// Flattened feature vector.
    pub fn feature(&self) -> Tensor<T> {
        self.acts.last().expect("non-empty trace").clone().flatten()
    }
}

fn check_input<T: Real>(arch: &EncoderArch, x: &Tensor<T>) -> Result<()> {
    if x.dims() != arch.input {
        return Err(Error::shape(
            "encode",
            format!("expected input {:?}, got {:?}", arch.input, x.dims()),
        ));
    }
    Ok(())
}

pub fn encode_traced<T: Real>(
    arch: &EncoderArch,
    theta: &ParamSet<T>,
    x: &Tensor<T>,
) -> Result<EncoderTrace<T>> {
    check_input(arch, x)?;
    let names = arch.conv_names();
    let mut acts = vec![x.clone()];
    let mut argmax = Vec::with_capacity(arch.layers.len());
    for (i, layer) in arch.layers.iter().enumerate() {
        let cur = acts.last().expect("input present");
        let (next, idx) = match *layer {
            LayerSpec::Conv { stride, .. } => {
                let name = &names.iter().find(|(l, _)| *l == i).expect("conv named").1;
                let w = theta.get(&format!("{name}.weight"))?;
                let b = theta.get(&format!("{name}.bias"))?;
                (conv2d(cur, w, b, stride)?, None)
            }
            LayerSpec::Relu => (relu(cur), None),
            LayerSpec::MaxPool { window, stride } => {
                let p = maxpool2d_indexed(cur, window, stride)?;
                (p.output, Some(p.argmax))
            }
        };
        acts.push(next);
        argmax.push(idx);
    }
    Ok(EncoderTrace { acts, argmax })
}

/// Flattened encoder features for one `[A,S,T]` sample.
pub fn encode<T: Real>(arch: &EncoderArch, theta: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    encode_traced(arch, theta, x).map(|t| t.feature())
}

/// Features for a batch, stacked into `[B, feature_dim]`.
pub fn encode_batch<T: Real>(
    arch: &EncoderArch,
    theta: &ParamSet<T>,
    xs: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    let feats = xs
        .iter()
        .map(|x| encode(arch, theta, x))
        .collect::<Result<Vec<_>>>()?;
    stack(&feats)
}

pub(crate) fn stack<T: Real>(rows: &[Tensor<T>]) -> Result<Tensor<T>> {
    let n = rows.first().map_or(0, Tensor::len);
    let mut data = Vec::with_capacity(rows.len() * n);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(&[rows.len(), n], data)
}

/// Backward pass through the encoder. Parameter gradients accumulate into
/// `grads`; the input gradient is returned when `need_input` is set.
pub fn encode_backward<T: Real>(
    arch: &EncoderArch,
    theta: &ParamSet<T>,
    trace: &EncoderTrace<T>,
    grad_feature: &[T],
    grads: &mut ParamSet<T>,
    need_input: bool,
) -> Result<Option<Tensor<T>>> {
    let names = arch.conv_names();
    let out_dims = trace.acts.last().expect("trace").dims().to_vec();
    let mut g = Tensor::new(&out_dims, grad_feature.to_vec())?;
    let first_conv = names.first().map(|(i, _)| *i);
    for (i, layer) in arch.layers.iter().enumerate().rev() {
        let input = &trace.acts[i];
        g = match *layer {
            LayerSpec::Conv { stride, .. } => {
                let name = &names.iter().find(|(l, _)| *l == i).expect("conv named").1;
                let w = theta.get(&format!("{name}.weight"))?;
                let wkey = format!("{name}.weight");
                let bkey = format!("{name}.bias");
                // Split borrow: take the two gradient buffers out, update, put back.
                let mut gw = std::mem::replace(grads.get_mut(&wkey)?, Tensor::zeros(&[1]));
                let mut gb = std::mem::replace(grads.get_mut(&bkey)?, Tensor::zeros(&[1]));
                let want_input = need_input || Some(i) != first_conv;
                let dx = conv2d_backward(input, w, stride, &g, &mut gw, &mut gb, want_input);
                *grads.get_mut(&wkey)? = gw;
                *grads.get_mut(&bkey)? = gb;
                match dx? {
                    Some(dx) => dx,
                    None => return Ok(None),
                }
            }
            LayerSpec::Relu => relu_backward(&trace.acts[i + 1], &g),
            LayerSpec::MaxPool { .. } => {
                let idx = trace.argmax[i].as_ref().expect("pool trace");
                maxpool2d_backward(input.dims(), idx, &g)?
            }
        };
    }
    Ok(need_input.then_some(g))
}

/// Cached activations of a two-layer head.
#[derive(Clone, Debug)]
pub struct HeadTrace<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    pub probs: ProbBatch,
}

impl<T: Real> HeadTrace<T> {
    /// Post-ReLU hidden activations, `[B, hidden]`.
    pub fn hidden(&self) -> &Tensor<T> {
        &self.hidden
    }
}

fn as_rows<T: Real>(features: &Tensor<T>, width: usize, op: &'static str) -> Result<Tensor<T>> {
    match features.dims() {
        &[n] if n == width => features.clone().reshape(&[1, n]),
        &[_, n] if n == width => Ok(features.clone()),
        other => Err(Error::shape(
            op,
            format!("expected features of width {width}, got {other:?}"),
        )),
    }
}

fn head_forward<T: Real>(
    features: &Tensor<T>,
    params: &ParamSet<T>,
    first: &str,
    second: &str,
    width: usize,
    op: &'static str,
) -> Result<HeadTrace<T>> {
    let input = as_rows(features, width, op)?;
    let hidden = relu(&dense(
        &input,
        params.get(&format!("{first}.weight"))?,
        params.get(&format!("{first}.bias"))?,
    )?);
    let logits = dense(
        &hidden,
        params.get(&format!("{second}.weight"))?,
        params.get(&format!("{second}.bias"))?,
    )?;
    let probs = softmax_rows(&logits)?;
    Ok(HeadTrace {
        input,
        hidden,
        probs,
    })
}

#[allow(clippy::too_many_arguments)]
fn head_backward<T: Real>(
    trace: &HeadTrace<T>,
    params: &ParamSet<T>,
    first: &str,
    second: &str,
    grad_probs: &[f64],
    grad_hidden: Option<&[f64]>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let gl: Vec<T> = softmax_backward(&trace.probs, grad_probs)
        .into_iter()
        .map(T::of)
        .collect();
    let gl = Tensor::new(&[trace.probs.rows(), trace.probs.dim()], gl)?;
    let mut gh = dense_backward_into(&trace.hidden, params, second, &gl, grads)?;
    if let Some(extra) = grad_hidden {
        if extra.len() != gh.len() {
            return Err(Error::shape(
                "head_backward",
                format!("hidden gradient has {} values, expected {}", extra.len(), gh.len()),
            ));
        }
        for (a, &b) in gh.data_mut().iter_mut().zip(extra) {
            *a += T::of(b);
        }
    }
    let gh = relu_backward(&trace.hidden, &gh);
    dense_backward_into(&trace.input, params, first, &gh, grads)
}

fn dense_backward_into<T: Real>(
    input: &Tensor<T>,
    params: &ParamSet<T>,
    layer: &str,
    grad_out: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let wkey = format!("{layer}.weight");
    let bkey = format!("{layer}.bias");
    let mut gw = std::mem::replace(grads.get_mut(&wkey)?, Tensor::zeros(&[1]));
    let mut gb = std::mem::replace(grads.get_mut(&bkey)?, Tensor::zeros(&[1]));
    let out = dense_backward(input, params.get(&wkey)?, grad_out, &mut gw, &mut gb);
    *grads.get_mut(&wkey)? = gw;
    *grads.get_mut(&bkey)? = gb;
    out
}

pub fn project_traced<T: Real>(
    arch: &ProjectorArch,
    phi: &ParamSet<T>,
    features: &Tensor<T>,
) -> Result<HeadTrace<T>> {
    head_forward(features, phi, "fc1", "fc2", arch.input, "project")
}

/// Probability rows for a feature vector `[n]` or batch `[B,n]`.
pub fn project<T: Real>(arch: &ProjectorArch, phi: &ParamSet<T>, features: &Tensor<T>) -> Result<ProbBatch> {
    project_traced(arch, phi, features).map(|t| t.probs)
}

/// Returns the feature gradient `[B,n]`.
pub fn project_backward<T: Real>(
    phi: &ParamSet<T>,
    trace: &HeadTrace<T>,
    grad_probs: &[f64],
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    head_backward(trace, phi, "fc1", "fc2", grad_probs, None, grads)
}

pub fn classify_traced<T: Real>(
    arch: &ClassifierArch,
    psi: &ParamSet<T>,
    features: &Tensor<T>,
) -> Result<HeadTrace<T>> {
    head_forward(features, psi, "embed", "out", arch.input, "classify")
}

/// Embeddings `[B,128]` (post-ReLU) and class probabilities.
pub fn classify<T: Real>(
    arch: &ClassifierArch,
    psi: &ParamSet<T>,
    features: &Tensor<T>,
) -> Result<(Tensor<T>, ProbBatch)> {
    let t = classify_traced(arch, psi, features)?;
    Ok((t.hidden, t.probs))
}

/// Backward through the classifier given gradients on both of its outputs.
pub fn classify_backward<T: Real>(
    psi: &ParamSet<T>,
    trace: &HeadTrace<T>,
    grad_probs: &[f64],
    grad_embedding: &[f64],
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    head_backward(trace, psi, "embed", "out", grad_probs, Some(grad_embedding), grads)
}
