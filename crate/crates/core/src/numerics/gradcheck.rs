//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per tensor; tensors at or below this size are
    /// checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare the analytic gradient returned by `loss_fn` against central
/// differences `(f(p + eps) - f(p - eps)) / 2eps` on sampled coordinates.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// `loss_fn` must be deterministic: it is evaluated twice per coordinate.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet<f64>, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&ParamSet<f64>) -> Result<(f64, ParamSet<f64>)>,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {}", cfg.eps)));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let grad = analytic.get(&name)?;
        if grad.len() != n {
            return Err(Error::shape(
                "grad_check",
                format!("gradient for `{name}` has {} entries, parameter has {n}", grad.len()),
            ));
        }
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut v = index::sample(&mut rng, n, cfg.max_coords).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + cfg.eps;
            let (up, _) = loss_fn(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - cfg.eps;
            let (down, _) = loss_fn(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss while probing `{name}`[{i}]")));
            }
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn params(values: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::from_vec(values.to_vec())).unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let p = params(&[0.3, -1.2, 4.0, 0.0, 2.5]);
        let report = grad_check(
            |ps| {
                let v = ps.get("p")?;
                Ok((0.5 * v.sq_norm(), ps.clone()))
            },
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
        assert_eq!(report.coords_checked, 5);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let p = params(&[1.0, 2.0]);
        let report = grad_check(|ps| Ok((3.0, ps.zeros_like())), &p, &GradCheckConfig::default())
            .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = params(&[1.0, 2.0]);
        let report = grad_check(
            |ps| {
                let v = ps.get("p")?;
                Ok((0.5 * v.sq_norm(), ps.zeros_like()))
            },
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error > 0.4);
        assert_eq!(report.worst, Some(("p".to_string(), 1)));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let p = params(&[1.0]);
        let r = grad_check(|ps| Ok((f64::NAN, ps.clone())), &p, &GradCheckConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampling_caps_coordinates() {
        let p = params(&vec![0.1; 1000]);
        let cfg = GradCheckConfig {
            max_coords: 200,
            ..Default::default()
        };
        let report = grad_check(|ps| Ok((0.5 * ps.get("p")?.sq_norm(), ps.clone())), &p, &cfg)
            .unwrap();
        assert_eq!(report.coords_checked, 200);
    }
}
