//! Few-shot calibration: class prototypes, the distance softmax, and the
//! two supervised losses (cross-entropy on the classifier head and the
//! prototype log-probability loss).
//!
//! Distances are squared Euclidean. Prototypes are recomputed from the
//! embeddings they are scored against, so [`fsc_objective`] differentiates
//! through the class means as well as through each sample.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gss::PROB_FLOOR;
use crate::numerics::ProbBatch;

/// One centroid per class, ordered by ascending class id.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    classes: Vec<u32>,
    centroids: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(classes: Vec<u32>, centroids: Vec<Vec<f64>>) -> Result<Self> {
        if classes.is_empty() || classes.len() != centroids.len() {
            return Err(Error::Invalid(format!(
                "{} class ids for {} centroids",
                classes.len(),
                centroids.len()
            )));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("class ids must be strictly increasing".into()));
        }
        let dim = centroids[0].len();
        if centroids.iter().any(|c| c.len() != dim || c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Invalid("centroids must be finite and equal length".into()));
        }
        Ok(PrototypeSet { classes, centroids })
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Position of a class id in prototype order.
    pub fn index_of(&self, class: u32) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }
}

/// Per-class means of labeled embeddings. Classes are the distinct labels
/// present, in ascending order.
pub fn compute_prototypes(embeddings: &[(Vec<f64>, u32)]) -> Result<PrototypeSet> {
    let classes: Vec<u32> = embeddings
        .iter()
        .map(|(_, y)| *y)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    compute_prototypes_for(embeddings, &classes)
}

/// Per-class means for an explicit class list; a class without samples is
/// an error.
pub fn compute_prototypes_for(embeddings: &[(Vec<f64>, u32)], classes: &[u32]) -> Result<PrototypeSet> {
    if classes.is_empty() {
        return Err(Error::Invalid("no classes to build prototypes for".into()));
    }
    let dim = embeddings.first().map_or(0, |(z, _)| z.len());
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> =
        classes.iter().map(|&c| (c, (vec![0.0; dim], 0))).collect();
    for (z, y) in embeddings {
        if z.len() != dim {
            return Err(Error::shape("compute_prototypes", "ragged embeddings"));
        }
        if let Some((acc, n)) = sums.get_mut(y) {
            acc.iter_mut().zip(z).for_each(|(a, v)| *a += v);
            *n += 1;
        }
    }
    let mut out_classes = Vec::with_capacity(sums.len());
    let mut centroids = Vec::with_capacity(sums.len());
    for (c, (acc, n)) in sums {
        if n == 0 {
            return Err(Error::Invalid(format!("class {c} has no samples")));
        }
        out_classes.push(c);
        centroids.push(acc.into_iter().map(|v| v / n as f64).collect());
    }
    PrototypeSet::new(out_classes, centroids)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distances(z: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    if z.len() != protos.dim() {
        return Err(Error::shape(
            "proto_posterior",
            format!("embedding has {} dims, prototypes {}", z.len(), protos.dim()),
        ));
    }
    Ok(protos.centroids.iter().map(|c| sq_dist(z, c)).collect())
}

fn softmax_neg(d: &[f64]) -> Vec<f64> {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|v| (min - v).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `p(y = k | z)` proportional to `exp(-||z - c_k||^2)`, in prototype order.
pub fn proto_posterior(z: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    distances(z, protos).map(|d| softmax_neg(&d))
}

/// Mean negative log-likelihood of the true class under the classifier's
/// softmax, with probabilities floored at [`PROB_FLOOR`]. Labels are class
/// indices in `0..probs.dim()`.
pub fn cross_entropy_loss(probs: &ProbBatch, labels: &[usize]) -> Result<f64> {
    cross_entropy_grad(probs, labels).map(|(v, _)| v)
}

fn check_labels(labels: &[usize], rows: usize, k: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            "labels",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Cross-entropy value and its gradient with respect to the probabilities.
pub fn cross_entropy_grad(probs: &ProbBatch, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_labels(labels, probs.rows(), probs.dim())?;
    let m = probs.rows() as f64;
    let mut grad = vec![0.0; probs.data().len()];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.row(i)[y];
        total -= p.max(PROB_FLOOR).ln();
        if p > PROB_FLOOR {
            grad[i * probs.dim() + y] = -1.0 / (m * p);
        }
    }
    Ok((total / m, grad))
}

/// Mean `-ln p(y_i | z_i)` against fixed prototypes; labels index into the
/// prototype set.
pub fn proto_loss(embeddings: &[Vec<f64>], labels: &[usize], protos: &PrototypeSet) -> Result<f64> {
    check_labels(labels, embeddings.len(), protos.len())?;
    let mut total = 0.0;
    for (z, &y) in embeddings.iter().zip(labels) {
        let d = distances(z, protos)?;
        total += log_sum_exp_neg(&d) + d[y];
    }
    Ok(total / embeddings.len() as f64)
}

/// `ln sum_k exp(-d_k)`, negated; i.e. `-ln p(y) = d_y + this`.
fn log_sum_exp_neg(d: &[f64]) -> f64 {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    -min + d.iter().map(|v| (min - v).exp()).sum::<f64>().ln()
}

/// Prototype loss with prototypes taken as the class means of `embeddings`
/// themselves; returns the value and the gradient with respect to every
/// embedding, including the paths through the means.
pub fn proto_loss_grad(embeddings: &[Vec<f64>], labels: &[usize], k: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    check_labels(labels, embeddings.len(), k)?;
    let m = embeddings.len();
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut counts = vec![0usize; k];
    let mut centroids = vec![vec![0.0; dim]; k];
    for (z, &y) in embeddings.iter().zip(labels) {
        counts[y] += 1;
        centroids[y].iter_mut().zip(z).for_each(|(a, v)| *a += v);
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(Error::Invalid("every class needs at least one sample".into()));
        }
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut total = 0.0;
    let mut grad = vec![vec![0.0; dim]; m];
    let mut grad_c = vec![vec![0.0; dim]; k];
    for (i, (z, &y)) in embeddings.iter().zip(labels).enumerate() {
        let d: Vec<f64> = centroids.iter().map(|c| sq_dist(z, c)).collect();
        total += log_sum_exp_neg(&d) + d[y];
        let p = softmax_neg(&d);
        for kk in 0..k {
            // dL/d(logit) with logit = -d
            let g = (p[kk] - if kk == y { 1.0 } else { 0.0 }) / m as f64;
            for t in 0..dim {
                let diff = z[t] - centroids[kk][t];
                grad[i][t] -= 2.0 * g * diff;
                grad_c[kk][t] += 2.0 * g * diff;
            }
        }
    }
    for (i, &y) in labels.iter().enumerate() {
        for t in 0..dim {
            grad[i][t] += grad_c[y][t] / counts[y] as f64;
        }
    }
    Ok((total / m as f64, grad))
}

/// Value of the calibration objective and its split.
#[derive(Clone, Debug)]
pub struct FscLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub proto: f64,
    /// Gradient with respect to the classifier probabilities.
    pub grad_probs: Vec<f64>,
    /// Gradient with respect to each embedding.
    pub grad_embeddings: Vec<Vec<f64>>,
}

/// `L_c + L_f` for one support batch: cross-entropy on the classifier
/// output plus the prototype loss on the embeddings. Labels are class
/// indices `0..probs.dim()`.
pub fn fsc_objective(probs: &ProbBatch, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<FscLoss> {
    if embeddings.len() != probs.rows() {
        return Err(Error::shape(
            "fsc_objective",
            format!("{} embeddings for {} probability rows", embeddings.len(), probs.rows()),
        ));
    }
    let (ce, grad_probs) = cross_entropy_grad(probs, labels)?;
    let (proto, grad_embeddings) = proto_loss_grad(embeddings, labels, probs.dim())?;
    Ok(FscLoss {
        total: ce + proto,
        cross_entropy: ce,
        proto,
        grad_probs,
        grad_embeddings,
    })
}

/// Class id of the nearest prototype; ties go to the lowest class id.
pub fn predict_embedding(z: &[f64], protos: &PrototypeSet) -> Result<u32> {
    let d = distances(z, protos)?;
    let mut best = 0;
    for (k, &v) in d.iter().enumerate().skip(1) {
        if v < d[best] {
            best = k;
        }
    }
    Ok(protos.classes[best])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos(c: &[(u32, Vec<f64>)]) -> PrototypeSet {
        PrototypeSet::new(c.iter().map(|x| x.0).collect(), c.iter().map(|x| x.1.clone()).collect())
            .unwrap()
    }

    #[test]
    fn prototype_examples() {
        let p = compute_prototypes(&[(vec![1.0, -2.0], 4)]).unwrap();
        assert_eq!(p.centroids()[0], vec![1.0, -2.0]);
        assert_eq!(p.classes(), &[4]);
        let a = vec![(vec![1.0, 0.0], 0), (vec![3.0, 0.0], 0), (vec![0.0, 5.0], 1)];
        let p = compute_prototypes(&a).unwrap();
        assert_eq!(p.centroids()[0], vec![2.0, 0.0]);
        let mut b = a.clone();
        b.reverse();
        assert_eq!(compute_prototypes(&b).unwrap(), p);
        assert!(compute_prototypes_for(&a, &[0, 1, 2]).is_err());
        assert!(compute_prototypes(&[]).is_err());
    }

    #[test]
    fn posterior_examples() {
        let p = protos(&[(0, vec![1.0, 0.0]), (1, vec![-1.0, 0.0]), (2, vec![0.0, 1.0])]);
        let post = proto_posterior(&[0.0, 0.0], &p).unwrap();
        assert!(post.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let far = protos(&[(0, vec![0.0, 0.0]), (1, vec![5.0, 0.0]), (2, vec![0.0, 4.5])]);
        let post = proto_posterior(&[0.0, 0.0], &far).unwrap();
        // tail bound: 1 - p1 <= sum_k exp(-d_k) <= 2 e^-20
        assert!(post[0] >= 0.999);

        let p = protos(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 2.0])]);
        let post = proto_posterior(&[0.0, 0.0], &p).unwrap();
        let e1 = (-1f64).exp();
        let e4 = (-4f64).exp();
        assert!((post[0] - e1 / (e1 + e4)).abs() < 1e-12);
        assert!((post[0] - 0.9526).abs() < 1e-3);
        assert!((post[1] - 0.0474).abs() < 1e-3);
        assert!(proto_posterior(&[0.0], &p).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = ProbBatch::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy_loss(&onehot, &[1]).unwrap(), 0.0);
        let uniform = ProbBatch::from_rows(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        assert!((cross_entropy_loss(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = ProbBatch::from_rows(&[vec![0.8, 0.2]]).unwrap();
        assert!((cross_entropy_loss(&p, &[0]).unwrap() - 0.2231).abs() < 1e-4);
        assert!(cross_entropy_loss(&p, &[2]).is_err());
    }

    #[test]
    fn proto_loss_examples() {
        let p = protos(&[(0, vec![0.0, 0.0]), (1, vec![5.0, 0.0]), (2, vec![0.0, 5.0])]);
        let z = p.centroids().to_vec();
        assert!(proto_loss(&z, &[0, 1, 2], &p).unwrap() <= 1e-3);

        let single = protos(&[(7, vec![1.0, 1.0])]);
        assert_eq!(proto_loss(&[vec![3.0, -2.0]], &[0], &single).unwrap(), 0.0);

        let two = protos(&[(0, vec![-1.0, 0.0]), (1, vec![1.0, 0.0])]);
        let v = proto_loss(&[vec![0.0, 7.0]], &[1], &two).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn objective_splits() {
        let probs = ProbBatch::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let z = vec![vec![0.0, 0.0], vec![10.0, 0.0]];
        let loss = fsc_objective(&probs, &z, &[0, 1]).unwrap();
        assert!((loss.total - (loss.cross_entropy + loss.proto)).abs() < 1e-9);
        // each sample sits on its own class mean, 100 apart
        assert!(loss.proto < 1e-12);
        assert!((loss.total - cross_entropy_loss(&probs, &[0, 1]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn predict_ties_go_low() {
        let p = protos(&[(1, vec![1.0, 0.0]), (2, vec![0.0, 3.0]), (3, vec![-1.0, 0.0])]);
        assert_eq!(predict_embedding(&[0.0, 0.0], &p).unwrap(), 1);
        assert_eq!(predict_embedding(&[0.0, 3.0], &p).unwrap(), 2);
    }

    mod gradients {
        use super::super::*;
        use crate::numerics::{grad_check, softmax_backward, softmax_rows, GradCheckConfig, ParamSet, Tensor};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        #[test]
        fn objective_matches_finite_differences() {
            let (m, dim, k) = (6, 5, 3);
            let labels = [0, 1, 2, 0, 1, 2];
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut params = ParamSet::new();
                let z = (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let l = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
                params.insert("z", Tensor::new(&[m, dim], z).unwrap()).unwrap();
                params.insert("logits", Tensor::new(&[m, k], l).unwrap()).unwrap();
                let report = grad_check(
                    |ps| {
                        let zt = ps.get("z")?;
                        let rows: Vec<Vec<f64>> = (0..m).map(|i| zt.row(i).to_vec()).collect();
                        let probs = softmax_rows(ps.get("logits")?)?;
                        let loss = fsc_objective(&probs, &rows, &labels)?;
                        let mut g = ps.zeros_like();
                        g.get_mut("z")?.data_mut().copy_from_slice(&loss.grad_embeddings.concat());
                        g.get_mut("logits")?
                            .data_mut()
                            .copy_from_slice(&softmax_backward(&probs, &loss.grad_probs));
                        Ok((loss.total, g))
                    },
                    &params,
                    &GradCheckConfig { seed, ..Default::default() },
                )
                .unwrap();
                assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
            }
        }
    }
}
