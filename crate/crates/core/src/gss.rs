//! Geometric self-supervised objective on twin-view probability batches.
//!
//! Three terms are combined:
//!
//! * probability consistency: symmetric KL between the two views' rows,
//! * mutual information: `E[h(P)] - h(E[P])`, so that minimizing it rewards
//!   confident rows with a spread-out marginal,
//! * geometric consistency: KL between the stochastic-neighbor embeddings
//!   of the two views, where row `i` is a distribution over the other batch
//!   members weighted by a shifted cosine similarity.
//!
//! Every loss comes in a value-only form and a form that also returns the
//! gradient with respect to the probability rows. All arithmetic is 64-bit.

use crate::error::{Error, Result};
use crate::numerics::ProbBatch;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

fn floored(p: &[f64], floor: f64) -> (Vec<f64>, f64) {
    let bar: Vec<f64> = p.iter().map(|&v| v.max(floor)).collect();
    let s: f64 = bar.iter().sum();
    (bar.into_iter().map(|v| v / s).collect(), s)
}

/// Backprop through `p -> max(p, floor) / sum`.
fn floored_backward(p: &[f64], normed: &[f64], s: f64, floor: f64, g: &[f64]) -> Vec<f64> {
    let dot: f64 = g.iter().zip(normed).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(g)
        .map(|(&pi, &gi)| if pi > floor { (gi - dot) / s } else { 0.0 })
        .collect()
}

/// KL divergence in nats between floored, renormalized rows.
pub fn kl_div(p: &[f64], q: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    if p == q {
        return 0.0;
    }
    let (pn, _) = floored(p, floor);
    let (qn, _) = floored(q, floor);
    pn.iter().zip(&qn).map(|(a, b)| a * (a / b).ln()).sum()
}

/// KL value and its gradients with respect to `p` and `q`.
pub fn kl_div_grad(p: &[f64], q: &[f64], floor: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (pn, ps) = floored(p, floor);
    let (qn, qs) = floored(q, floor);
    let value = pn.iter().zip(&qn).map(|(a, b)| a * (a / b).ln()).sum();
    let gp: Vec<f64> = pn.iter().zip(&qn).map(|(a, b)| (a / b).ln() + 1.0).collect();
    let gq: Vec<f64> = pn.iter().zip(&qn).map(|(a, b)| -a / b).collect();
    (
        value,
        floored_backward(p, &pn, ps, floor, &gp),
        floored_backward(q, &qn, qs, floor, &gq),
    )
}

/// Entropy `-sum p ln p` in nats, with the logarithm argument floored.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(PROB_FLOOR).ln()).sum::<f64>()
}

fn entropy_grad(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&v| {
            let step = if v > PROB_FLOOR { 1.0 } else { 0.0 };
            -(v.max(PROB_FLOOR).ln() + step)
        })
        .collect()
}

/// Index-aligned view-1 and view-2 distributions for one batch.
#[derive(Clone, Debug)]
pub struct GssBatch {
    pub p1: ProbBatch,
    pub p2: ProbBatch,
}

impl GssBatch {
    pub fn new(p1: ProbBatch, p2: ProbBatch) -> Result<Self> {
        if p1.rows() != p2.rows() || p1.dim() != p2.dim() {
            return Err(Error::shape(
                "gss_batch",
                format!(
                    "views disagree: {}x{} vs {}x{}",
                    p1.rows(),
                    p1.dim(),
                    p2.rows(),
                    p2.dim()
                ),
            ));
        }
        Ok(GssBatch { p1, p2 })
    }

    pub fn batch_size(&self) -> usize {
        self.p1.rows()
    }
}

/// Symmetrized per-row KL averaged over the batch: `(1/2B) sum_i KL(P1||P2) + KL(P2||P1)`.
pub fn prob_consistency_loss(batch: &GssBatch) -> f64 {
    prob_consistency_grad(batch).0
}

/// Value of the consistency loss with its gradients for both views.
pub fn prob_consistency_grad(batch: &GssBatch) -> (f64, Vec<f64>, Vec<f64>) {
    let b = batch.batch_size() as f64;
    let d = batch.p1.dim();
    let mut g1 = vec![0.0; batch.p1.data().len()];
    let mut g2 = vec![0.0; g1.len()];
    let mut total = 0.0;
    for (i, (r1, r2)) in batch.p1.iter_rows().zip(batch.p2.iter_rows()).enumerate() {
        let (a, ga1, ga2) = kl_div_grad(r1, r2, PROB_FLOOR);
        let (c, gc2, gc1) = kl_div_grad(r2, r1, PROB_FLOOR);
        total += a + c;
        for k in 0..d {
            g1[i * d + k] = (ga1[k] + gc1[k]) / (2.0 * b);
            g2[i * d + k] = (ga2[k] + gc2[k]) / (2.0 * b);
        }
    }
    (total / (2.0 * b), g1, g2)
}

/// Which sign convention to use for the mutual-information term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiSign {
    /// `E[h(P)] - h(E[P])`: minimizing it maximizes the mutual-information
    /// surrogate and keeps the marginal spread out.
    #[default]
    Corrected,
    /// `h(E[P]) + E[h(P)]`: minimizing it shrinks the marginal entropy too,
    /// which drives every input onto one output. Kept for ablations.
    Literal,
}

impl std::str::FromStr for MiSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(MiSign::Corrected),
            "literal" => Ok(MiSign::Literal),
            other => Err(Error::Invalid(format!(
                "mi sign must be `corrected` or `literal`, got `{other}`"
            ))),
        }
    }
}

/// Mean of the batch rows.
pub fn marginal(p: &ProbBatch) -> Vec<f64> {
    let mut m = vec![0.0; p.dim()];
    for row in p.iter_rows() {
        for (a, &v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    let b = p.rows() as f64;
    m.iter_mut().for_each(|v| *v /= b);
    m
}

/// Entropy of the batch-mean distribution.
pub fn marginal_entropy(p: &ProbBatch) -> f64 {
    entropy(&marginal(p))
}

/// Mutual-information loss with the corrected sign.
pub fn mutual_info_loss(p: &ProbBatch) -> f64 {
    mutual_info_grad(p, MiSign::Corrected).0
}

pub fn mutual_info_loss_signed(p: &ProbBatch, sign: MiSign) -> f64 {
    mutual_info_grad(p, sign).0
}

/// Value of the mutual-information term with its gradient.
pub fn mutual_info_grad(p: &ProbBatch, sign: MiSign) -> (f64, Vec<f64>) {
    let b = p.rows() as f64;
    let m = marginal(p);
    let hm = entropy(&m);
    let gm = entropy_grad(&m);
    let mean_h = p.iter_rows().map(entropy).sum::<f64>() / b;
    let marginal_sign = match sign {
        MiSign::Corrected => -1.0,
        MiSign::Literal => 1.0,
    };
    let mut grad = Vec::with_capacity(p.data().len());
    for row in p.iter_rows() {
        let gr = entropy_grad(row);
        grad.extend(
            gr.iter()
                .zip(&gm)
                .map(|(a, c)| (a + marginal_sign * c) / b),
        );
    }
    (mean_h + marginal_sign * hm, grad)
}

/// Cosine similarity shifted into `[0, 1]`: `(cos(a, b) + 1) / 2`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_sim",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(0.5 * (dot / (na * nb) + 1.0))
}

/// Neighbor distributions: row `i` holds `q(i|j)` for `j != i`, diagonal zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoBatch {
    size: usize,
    data: Vec<f64>,
}

impl GeoBatch {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    /// Row `i` without its diagonal entry.
    fn neighbors(&self, i: usize) -> Vec<f64> {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Intermediate quantities of the geometric embedding, kept for backprop.
struct GeoTrace {
    norms: Vec<f64>,
    unit: Vec<Vec<f64>>,
    cos: Vec<f64>,
    row_sums: Vec<f64>,
}

fn geometric_trace(p: &ProbBatch) -> Result<(GeoBatch, GeoTrace)> {
    let b = p.rows();
    if b < 2 {
        return Err(Error::Invalid(format!(
            "geometric embedding needs at least 2 rows, got {b}"
        )));
    }
    let mut norms = Vec::with_capacity(b);
    let mut unit = Vec::with_capacity(b);
    for (i, row) in p.iter_rows().enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Invalid(format!("row {i} has zero norm")));
        }
        norms.push(n);
        unit.push(row.iter().map(|v| v / n).collect::<Vec<_>>());
    }
    let mut cos = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum();
            cos[i * b + j] = c;
            cos[j * b + i] = c;
        }
    }
    let mut data = vec![0.0; b * b];
    let mut row_sums = Vec::with_capacity(b);
    for i in 0..b {
        let s: f64 = (0..b)
            .filter(|&m| m != i)
            .map(|m| 0.5 * (cos[i * b + m] + 1.0))
            .sum();
        for j in (0..b).filter(|&j| j != i) {
            data[i * b + j] = 0.5 * (cos[i * b + j] + 1.0) / s;
        }
        row_sums.push(s);
    }
    Ok((
        GeoBatch { size: b, data },
        GeoTrace {
            norms,
            unit,
            cos,
            row_sums,
        },
    ))
}

/// Row-normalized neighbor similarities of a probability batch.
pub fn geometric_embedding(p: &ProbBatch) -> Result<GeoBatch> {
    geometric_trace(p).map(|(q, _)| q)
}

/// Map `dL/dQ` (diagonal ignored) back onto the probability rows.
fn geometric_backward(p: &ProbBatch, q: &GeoBatch, tr: &GeoTrace, gq: &[f64]) -> Vec<f64> {
    let b = q.size;
    let d = p.dim();
    // dL/dK for each ordered pair, through the row normalization
    let mut gk = vec![0.0; b * b];
    for i in 0..b {
        let dot: f64 = (0..b)
            .filter(|&m| m != i)
            .map(|m| gq[i * b + m] * q.get(i, m))
            .sum();
        for j in (0..b).filter(|&j| j != i) {
            gk[i * b + j] = (gq[i * b + j] - dot) / tr.row_sums[i];
        }
    }
    let mut grad = vec![0.0; b * d];
    for i in 0..b {
        let gi = &mut grad[i * d..(i + 1) * d];
        for j in (0..b).filter(|&j| j != i) {
            // K = (cos + 1)/2 enters rows i and j through the same cosine
            let t = 0.5 * (gk[i * b + j] + gk[j * b + i]);
            let c = tr.cos[i * b + j];
            for k in 0..d {
                gi[k] += t * (tr.unit[j][k] - c * tr.unit[i][k]) / tr.norms[i];
            }
        }
    }
    grad
}

/// Batch mean of `KL(Q1_i || Q2_i)` over each row's off-diagonal entries.
pub fn geometric_loss(q1: &GeoBatch, q2: &GeoBatch) -> Result<f64> {
    geometric_loss_grad(q1, q2).map(|(v, _, _)| v)
}

fn geometric_loss_grad(q1: &GeoBatch, q2: &GeoBatch) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if q1.size != q2.size {
        return Err(Error::shape(
            "geometric_loss",
            format!("batch sizes {} and {}", q1.size, q2.size),
        ));
    }
    let b = q1.size;
    let mut g1 = vec![0.0; b * b];
    let mut g2 = vec![0.0; b * b];
    let mut total = 0.0;
    for i in 0..b {
        let (v, a, c) = kl_div_grad(&q1.neighbors(i), &q2.neighbors(i), PROB_FLOOR);
        total += v;
        for (slot, j) in (0..b).filter(|&j| j != i).enumerate() {
            g1[i * b + j] = a[slot] / b as f64;
            g2[i * b + j] = c[slot] / b as f64;
        }
    }
    Ok((total / b as f64, g1, g2))
}

/// The three unweighted loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GssComponents {
    pub prob: f64,
    /// Mean of the mutual-information term over both views.
    pub mutual_info: f64,
    pub geometric: f64,
}

/// Weights and sign convention of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GssObjective {
    pub lambda: f64,
    pub gamma: f64,
    pub mi_sign: MiSign,
}

impl Default for GssObjective {
    fn default() -> Self {
        GssObjective {
            lambda: 1.0,
            gamma: 1000.0,
            mi_sign: MiSign::Corrected,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GssLoss {
    pub total: f64,
    pub components: GssComponents,
    /// `dL/dP1`, row-major like the batch.
    pub grad_p1: Vec<f64>,
    pub grad_p2: Vec<f64>,
}

impl GssObjective {
    /// `L_p + lambda * (L_m(P1) + L_m(P2)) / 2 + gamma * L_g(Q(P1), Q(P2))`
    /// with gradients for both views.
    pub fn evaluate(&self, batch: &GssBatch) -> Result<GssLoss> {
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Invalid("loss weights must be nonnegative".into()));
        }
        let (lp, mut g1, mut g2) = prob_consistency_grad(batch);
        let (m1, gm1) = mutual_info_grad(&batch.p1, self.mi_sign);
        let (m2, gm2) = mutual_info_grad(&batch.p2, self.mi_sign);
        let (lg, gg1, gg2) = geometric_grad(batch)?;
        for k in 0..g1.len() {
            g1[k] += 0.5 * self.lambda * gm1[k] + self.gamma * gg1[k];
            g2[k] += 0.5 * self.lambda * gm2[k] + self.gamma * gg2[k];
        }
        let components = GssComponents {
            prob: lp,
            mutual_info: 0.5 * (m1 + m2),
            geometric: lg,
        };
        let total = if self.lambda == 0.0 && self.gamma == 0.0 {
            lp
        } else {
            lp + self.lambda * components.mutual_info + self.gamma * lg
        };
        Ok(GssLoss {
            total,
            components,
            grad_p1: g1,
            grad_p2: g2,
        })
    }
}

/// Geometric consistency of two views as a function of their probability
/// rows, with gradients for both.
pub fn geometric_grad(batch: &GssBatch) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (q1, t1) = geometric_trace(&batch.p1)?;
    let (q2, t2) = geometric_trace(&batch.p2)?;
    let (lg, gq1, gq2) = geometric_loss_grad(&q1, &q2)?;
    Ok((
        lg,
        geometric_backward(&batch.p1, &q1, &t1, &gq1),
        geometric_backward(&batch.p2, &q2, &t2, &gq2),
    ))
}

/// Value and components of the combined objective with the corrected sign.
pub fn total_loss(batch: &GssBatch, lambda: f64, gamma: f64) -> Result<(f64, GssComponents)> {
    let loss = GssObjective {
        lambda,
        gamma,
        mi_sign: MiSign::Corrected,
    }
    .evaluate(batch)?;
    Ok((loss.total, loss.components))
}
