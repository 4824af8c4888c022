//! Metadata tensors stored next to the weights so a checkpoint is
//! self-describing: `meta.input` ([A,S,T]), `meta.layers` (one row of six
//! numbers per encoder layer) and scalar run state.

use crate::error::{Error, Result};
use crate::model::{EncoderArch, LayerSpec};
use crate::numerics::{ParamSet, Tensor};

const CONV: f32 = 0.0;
const RELU: f32 = 1.0;
const POOL: f32 = 2.0;

/// `[L, 6]` layer table: `[kind, filters, kernel_h, kernel_w, stride_h, stride_w]`.
pub fn arch_to_tensor(arch: &EncoderArch) -> Tensor<f32> {
    let mut data = Vec::with_capacity(arch.layers.len() * 6);
    for layer in &arch.layers {
        let row = match *layer {
            LayerSpec::Conv { filters, kernel, stride } => {
                [CONV, filters as f32, kernel.0 as f32, kernel.1 as f32, stride.0 as f32, stride.1 as f32]
            }
            LayerSpec::Relu => [RELU, 0.0, 0.0, 0.0, 0.0, 0.0],
            LayerSpec::MaxPool { window, stride } => {
                [POOL, 0.0, window.0 as f32, window.1 as f32, stride.0 as f32, stride.1 as f32]
            }
        };
        data.extend_from_slice(&row);
    }
    Tensor::new(&[arch.layers.len(), 6], data).expect("six columns")
}

fn count(v: f32, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("{what}: {v} is not a count")))
    }
}

pub fn arch_from_tensor(input: &Tensor<f32>, layers: &Tensor<f32>) -> Result<EncoderArch> {
    let input: [usize; 3] = match input.data() {
        [a, s, t] => [count(*a, "meta.input")?, count(*s, "meta.input")?, count(*t, "meta.input")?],
        other => return Err(Error::Format(format!("meta.input has {} values, expected 3", other.len()))),
    };
    let &[n, 6] = layers.dims() else {
        return Err(Error::Format(format!("meta.layers must be [L,6], got {:?}", layers.dims())));
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r = &layers.data()[i * 6..i * 6 + 6];
        let c = |k: usize| count(r[k], "meta.layers");
        out.push(match r[0] {
            CONV => LayerSpec::Conv {
                filters: c(1)?,
                kernel: (c(2)?, c(3)?),
                stride: (c(4)?, c(5)?),
            },
            RELU => LayerSpec::Relu,
            POOL => LayerSpec::MaxPool {
                window: (c(2)?, c(3)?),
                stride: (c(4)?, c(5)?),
            },
            k => return Err(Error::Format(format!("meta.layers row {i}: unknown layer kind {k}"))),
        });
    }
    let arch = EncoderArch { input, layers: out };
    arch.shapes().map_err(|e| Error::Format(format!("stored encoder is inconsistent: {e}")))?;
    Ok(arch)
}

pub(crate) fn put_encoder_meta(out: &mut ParamSet<f32>, arch: &EncoderArch) -> Result<()> {
    let input = arch.input.iter().map(|&d| d as f32).collect();
    out.insert("meta.input", Tensor::from_vec(input))?;
    out.insert("meta.layers", arch_to_tensor(arch))
}

pub(crate) fn get_encoder_meta(params: &ParamSet<f32>) -> Result<EncoderArch> {
    arch_from_tensor(params.get("meta.input")?, params.get("meta.layers")?)
}

pub(crate) fn put_scalar(out: &mut ParamSet<f32>, name: &str, v: f64) -> Result<()> {
    out.insert(name, Tensor::from_vec(vec![v as f32]))
}

pub(crate) fn get_scalar(params: &ParamSet<f32>, name: &str) -> Result<f64> {
    match params.get(name)?.data() {
        [v] => Ok(*v as f64),
        _ => Err(Error::Format(format!("`{name}` must hold one value"))),
    }
}

pub(crate) fn get_count(params: &ParamSet<f32>, name: &str) -> Result<usize> {
    count(get_scalar(params, name)? as f32, name)
}

/// Store `params` (and optionally their velocities) under `prefix`.
pub(crate) fn put_branch(
    out: &mut ParamSet<f32>,
    prefix: &str,
    params: &ParamSet<f32>,
    velocity: Option<&ParamSet<f32>>,
) -> Result<()> {
    out.absorb(prefix, params)?;
    if let Some(v) = velocity {
        out.absorb(&format!("opt.{prefix}"), v)?;
    }
    Ok(())
}

/// Velocity under `opt.prefix`, or zeros when the checkpoint has none.
pub(crate) fn get_velocity(params: &ParamSet<f32>, prefix: &str, like: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    let v = params.extract(&format!("opt.{prefix}"));
    if v.is_empty() {
        return Ok(like.zeros_like());
    }
    crate::model::validate_params(&like.shapes(), &v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::REFERENCE_INPUT;

    #[test]
    fn arch_roundtrip() {
        let arch = EncoderArch::reference(REFERENCE_INPUT);
        let mut p = ParamSet::new();
        put_encoder_meta(&mut p, &arch).unwrap();
        assert_eq!(get_encoder_meta(&p).unwrap(), arch);
    }

    #[test]
    fn bad_tables_rejected() {
        let arch = EncoderArch::reference(REFERENCE_INPUT);
        let mut t = arch_to_tensor(&arch);
        t.data_mut()[0] = 7.0;
        let input = Tensor::from_vec(vec![3.0, 114.0, 500.0]);
        assert!(arch_from_tensor(&input, &t).is_err());
        let small = Tensor::from_vec(vec![3.0, 20.0, 500.0]);
        assert!(arch_from_tensor(&small, &arch_to_tensor(&arch)).is_err());
        assert!(arch_from_tensor(&Tensor::from_vec(vec![3.5, 114.0, 500.0]), &arch_to_tensor(&arch)).is_err());
    }
}
