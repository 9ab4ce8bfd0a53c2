//! Localization targets, the composite localization loss, the
//! classification loss, and the evaluation metrics (MAE, top-k,
//! tolerance accuracy, quadratic-weighted kappa, Dice, per-segment
//! volume).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::Tensor;
use crate::volume::{BinaryMask, LabelMask};

/// Ground-truth or predicted landmark slice indices. The 6-landmark
/// convention orders entries [left canal, left petrolingual, left
/// anterior clinoid, right canal, right petrolingual, right anterior
/// clinoid], monotone proximal-to-distal within each side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub indices: Vec<usize>,
}

impl LandmarkSet {
    pub fn new(indices: Vec<usize>) -> LandmarkSet {
        LandmarkSet { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Range check against the valid depth, plus per-side monotonicity
    /// for the canonical 6-landmark layout.
    pub fn validate(&self, d_valid: usize) -> Result<()> {
        for &z in &self.indices {
            if z >= d_valid {
                return Err(Error::Argument(format!(
                    "landmark index {z} out of range 0..{d_valid}"
                )));
            }
        }
        if self.indices.len() == 6 {
            for side in 0..2 {
                let s = &self.indices[side * 3..side * 3 + 3];
                if !(s[0] <= s[1] && s[1] <= s[2]) {
                    return Err(Error::Argument(format!(
                        "landmarks not monotone on side {side}: {s:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-landmark probability rows over the valid slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub probs: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        for (j, row) in self.probs.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Argument(format!("empty probability row {j}")));
            }
            let mut sum = 0.0;
            for &p in row {
                if p < 0.0 {
                    return Err(Error::Argument(format!("negative probability in row {j}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!(
                    "probability row {j} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }
}

/// Rating agreement counts: rater A on rows, rater B on columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_ratings(a: &[usize], b: &[usize], k: usize) -> Result<ConfusionMatrix> {
        if a.len() != b.len() {
            return Err(Error::Argument("rating lists differ in length".into()));
        }
        let mut counts = vec![vec![0u64; k]; k];
        for (&ra, &rb) in a.iter().zip(b) {
            if ra >= k || rb >= k {
                return Err(Error::Argument(format!("rating ({ra},{rb}) out of range {k}")));
            }
            counts[ra][rb] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub mae: f64,
    pub top1: f64,
    pub top2: f64,
    pub acc_tau1: f64,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_landmark: Vec<MetricRow>,
    pub aggregate: MetricRow,
    /// Kappa over pooled (landmark, case) ratings; the per-landmark
    /// values live in `per_landmark[j].kappa`.
    pub kappa_pooled: Option<f64>,
    pub dice: Option<f64>,
    pub per_segment_volume_mm3: Option<[f64; 8]>,
}

/// Eq.-1 Kronecker-delta target.
pub fn one_hot_target(z: usize, d: usize) -> Result<Vec<f64>> {
    if z >= d {
        return Err(Error::Argument(format!("target {z} out of range 0..{d}")));
    }
    let mut y = vec![0.0; d];
    y[z] = 1.0;
    Ok(y)
}

/// Composite localization loss: the sum over the N landmark channels of
/// the masked cross-entropy, averaged over the batch. `logits` is
/// [B,N,L] in token space; targets are slice indices shifted by
/// `first_valid`.
pub fn loss_loc(
    logits: &Tensor,
    truths: &[&LandmarkSet],
    valid: &[bool],
    first_valid: usize,
) -> Result<Tensor> {
    let sh = logits.shape().to_vec();
    if sh.len() != 3 {
        return Err(Error::Shape("loss_loc expects [B,N,L] logits".into()));
    }
    let (b, n, l) = (sh[0], sh[1], sh[2]);
    if truths.len() != b {
        return Err(Error::Argument("batch size / truth count mismatch".into()));
    }
    let mut targets = Vec::with_capacity(b * n);
    for t in truths {
        if t.indices.len() != n {
            return Err(Error::Argument("landmark count mismatch".into()));
        }
        for &z in &t.indices {
            let tok = first_valid + z;
            if tok >= l {
                return Err(Error::Argument(format!("landmark {z} beyond sequence")));
            }
            targets.push(tok);
        }
    }
    let flat = ops::reshape(logits, &[b * n, l]);
    let sum = ops::masked_cross_entropy(&flat, &targets, valid)?;
    Ok(ops::scale(&sum, 1.0 / b as f64))
}

/// Classification cross-entropy, averaged over the batch.
pub fn loss_cls(cls_logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let sh = cls_logits.shape().to_vec();
    if sh.len() != 2 {
        return Err(Error::Shape("loss_cls expects [B,K] logits".into()));
    }
    let (b, k) = (sh[0], sh[1]);
    if labels.len() != b {
        return Err(Error::Argument("batch size / label count mismatch".into()));
    }
    for &y in labels {
        if y >= k {
            return Err(Error::Argument(format!("label {y} out of range 0..{k}")));
        }
    }
    let valid = vec![true; b * k];
    let sum = ops::masked_cross_entropy(cls_logits, labels, &valid)?;
    Ok(ops::scale(&sum, 1.0 / b as f64))
}

/// Highest-probability slice per landmark; exact ties break to the
/// lowest index.
pub fn argmax_prediction(p: &PredictionSet) -> LandmarkSet {
    let indices = p
        .probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    LandmarkSet { indices }
}

pub fn mae(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Argument("landmark set length mismatch".into()));
    }
    let sum: f64 = pred
        .indices
        .iter()
        .zip(&truth.indices)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Fraction of landmarks whose true slice ranks among the k most
/// probable candidates (rank ties break to the lowest index).
pub fn top_k_accuracy(p: &PredictionSet, truth: &LandmarkSet, k: usize) -> Result<f64> {
    if p.probs.len() != truth.len() || truth.is_empty() {
        return Err(Error::Argument("prediction / truth length mismatch".into()));
    }
    let mut hits = 0usize;
    for (row, &z) in p.probs.iter().zip(&truth.indices) {
        let d = row.len();
        if k == 0 || k > d {
            return Err(Error::Argument(format!("k={k} out of range 1..={d}")));
        }
        if z >= d {
            return Err(Error::Argument(format!("truth index {z} out of range {d}")));
        }
        let pt = row[z];
        let mut rank = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > pt || (v == pt && i < z) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.len() as f64)
}

/// Fraction of landmarks with |z_pred - z_true| <= tau (inclusive).
pub fn tolerance_accuracy(pred: &LandmarkSet, truth: &LandmarkSet, tau: usize) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Argument("landmark set length mismatch".into()));
    }
    let hits = pred
        .indices
        .iter()
        .zip(&truth.indices)
        .filter(|(&a, &b)| (a as i64 - b as i64).unsigned_abs() as usize <= tau)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Cohen's kappa with quadratic weights w_ij = (i-j)^2 / (K-1)^2.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k();
    if k < 2 || cm.counts.iter().any(|r| r.len() != k) {
        return Err(Error::Argument("confusion matrix must be KxK with K >= 2".into()));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Argument("empty confusion matrix".into()));
    }
    let t = total as f64;
    let w = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / ((k - 1) as f64 * (k - 1) as f64)
    };
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    let mut num = 0.0;
    for i in 0..k {
        for j in 0..k {
            let o = cm.counts[i][j] as f64 / t;
            row[i] += o;
            col[j] += o;
            num += w(i, j) * o;
        }
    }
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            den += w(i, j) * row[i] * col[j];
        }
    }
    if den == 0.0 {
        // all marginal mass in one category: defined only for exact
        // agreement
        return if num == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::Argument("undefined kappa".into()))
        };
    }
    Ok(1.0 - num / den)
}

/// Dice overlap; two empty masks agree perfectly by convention.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let inter = a
        .bits
        .iter()
        .zip(&b.bits)
        .filter(|(&x, &y)| x && y)
        .count();
    let denom = a.count() + b.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / denom as f64)
}

/// Volume in mm^3 per segment label 1..=8.
pub fn per_segment_volume(lm: &LabelMask, spacing: [f64; 3]) -> [f64; 8] {
    let voxel = spacing[0] * spacing[1] * spacing[2];
    let mut counts = [0u64; 8];
    for &l in &lm.labels {
        if (1..=8).contains(&l) {
            counts[l as usize - 1] += 1;
        }
    }
    let mut out = [0.0; 8];
    for (o, c) in out.iter_mut().zip(counts) {
        *o = c as f64 * voxel;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_basics() {
        assert_eq!(one_hot_target(0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot_target(2, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(one_hot_target(3, 3).is_err());
        for z in 0..5 {
            let y = one_hot_target(z, 5).unwrap();
            assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(y.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn landmark_set_monotonicity() {
        assert!(LandmarkSet::new(vec![1, 3, 5, 0, 2, 4]).validate(6).is_ok());
        assert!(LandmarkSet::new(vec![3, 1, 5, 0, 2, 4]).validate(6).is_err());
        assert!(LandmarkSet::new(vec![1, 3, 5, 0, 4, 2]).validate(6).is_err());
        assert!(LandmarkSet::new(vec![1, 3, 9, 0, 2, 4]).validate(6).is_err());
    }

    fn uniform_logits(b: usize, n: usize, l: usize) -> Tensor {
        Tensor::param(&[b, n, l], vec![0.0; b * n * l])
    }

    #[test]
    fn loss_loc_uniform_analytic() {
        // uniform over D=10 valid positions, N=6 -> 6 ln 10
        let (b, n, l, pad) = (1, 6, 13, 3);
        let logits = uniform_logits(b, n, l);
        let mut valid = vec![false; b * n * l];
        for r in 0..b * n {
            for t in pad..l {
                valid[r * l + t] = true;
            }
        }
        let truth = LandmarkSet::new(vec![0, 1, 2, 3, 4, 5]);
        let loss = loss_loc(&logits, &[&truth], &valid, pad).unwrap();
        assert!((loss.scalar() - 6.0 * (10f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_loc_concentrated_and_oracle() {
        let (b, n, l, pad) = (2, 3, 8, 2);
        let truth0 = LandmarkSet::new(vec![0, 2, 5]);
        let truth1 = LandmarkSet::new(vec![1, 1, 4]);
        let mut vals = vec![0.0; b * n * l];
        for (bi, t) in [&truth0, &truth1].iter().enumerate() {
            for (j, &z) in t.indices.iter().enumerate() {
                vals[(bi * n + j) * l + pad + z] = 60.0;
            }
        }
        let logits = Tensor::param(&[b, n, l], vals.clone());
        let valid: Vec<bool> = (0..b * n * l).map(|i| i % l >= pad).collect();
        let loss = loss_loc(&logits, &[&truth0, &truth1], &valid, pad).unwrap();
        assert!(loss.scalar() < 1e-6);

        // random logits vs per-channel softmax CE oracle
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let rvals: Vec<f64> = (0..b * n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Tensor::param(&[b, n, l], rvals.clone());
        let loss = loss_loc(&logits, &[&truth0, &truth1], &valid, pad).unwrap();
        let mut expect = 0.0;
        for (bi, t) in [&truth0, &truth1].iter().enumerate() {
            for (j, &z) in t.indices.iter().enumerate() {
                let row = &rvals[(bi * n + j) * l..(bi * n + j + 1) * l];
                let sum: f64 = row[pad..].iter().map(|v| v.exp()).sum();
                expect -= (row[pad + z].exp() / sum).ln();
            }
        }
        expect /= b as f64;
        assert!((loss.scalar() - expect).abs() < 1e-9);
    }

    #[test]
    fn loss_loc_rejects_bad_target() {
        let logits = uniform_logits(1, 1, 4);
        let valid = vec![true; 4];
        let truth = LandmarkSet::new(vec![4]);
        assert!(loss_loc(&logits, &[&truth], &valid, 0).is_err());
    }

    #[test]
    fn loss_cls_analytic() {
        let logits = Tensor::param(&[1, 3], vec![0.0; 3]);
        let loss = loss_cls(&logits, &[1]).unwrap();
        assert!((loss.scalar() - 3f64.ln()).abs() < 1e-12);
        let logits = Tensor::param(&[1, 3], vec![0.0, 50.0, 0.0]);
        assert!(loss_cls(&logits, &[1]).unwrap().scalar() < 1e-6);
        assert!(loss_cls(&logits, &[3]).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let p = PredictionSet {
            probs: vec![vec![0.1, 0.7, 0.2], vec![0.5, 0.5]],
        };
        p.validate().unwrap();
        assert_eq!(argmax_prediction(&p).indices, vec![1, 0]);
    }

    #[test]
    fn argmax_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let d = rng.gen_range(2..12);
            let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let mut best = 0;
            for i in 1..d {
                if row[i] > row[best] {
                    best = i;
                }
            }
            let p = PredictionSet { probs: vec![row] };
            assert_eq!(argmax_prediction(&p).indices, vec![best]);
        }
    }

    #[test]
    fn mae_analytic() {
        let t = LandmarkSet::new(vec![2, 3, 4, 2, 3, 4]);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        let p = LandmarkSet::new(vec![3, 3, 4, 2, 3, 4]);
        assert!((mae(&p, &t).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!(mae(&p, &LandmarkSet::new(vec![1])).is_err());
    }

    #[test]
    fn top_k_basics() {
        let truth = LandmarkSet::new(vec![1]);
        let p = PredictionSet {
            probs: vec![vec![0.3, 0.6, 0.1]],
        };
        assert_eq!(top_k_accuracy(&p, &truth, 1).unwrap(), 1.0);
        // truth second-ranked
        let p = PredictionSet {
            probs: vec![vec![0.6, 0.3, 0.1]],
        };
        assert_eq!(top_k_accuracy(&p, &truth, 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&p, &truth, 2).unwrap(), 1.0);
        assert!(top_k_accuracy(&p, &truth, 0).is_err());
        assert!(top_k_accuracy(&p, &truth, 4).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let d = rng.gen_range(3..10);
            let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let z = rng.gen_range(0..d);
            let k = rng.gen_range(1..=d);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let expect = if order[..k].contains(&z) { 1.0 } else { 0.0 };
            let p = PredictionSet { probs: vec![row] };
            let truth = LandmarkSet::new(vec![z]);
            assert_eq!(top_k_accuracy(&p, &truth, k).unwrap(), expect);
        }
    }

    #[test]
    fn top_k_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p = PredictionSet {
            probs: vec![raw.iter().map(|v| v / s).collect()],
        };
        let truth = LandmarkSet::new(vec![5]);
        let mut prev = 0.0;
        for k in 1..=d {
            let a = top_k_accuracy(&p, &truth, k).unwrap();
            assert!(a >= prev);
            prev = a;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn tolerance_boundary_inclusive() {
        let t = LandmarkSet::new(vec![5, 5, 5, 5, 5, 5]);
        let p = LandmarkSet::new(vec![4, 6, 4, 6, 4, 6]);
        assert_eq!(tolerance_accuracy(&p, &t, 1).unwrap(), 1.0);
        assert_eq!(tolerance_accuracy(&p, &t, 0).unwrap(), 0.0);
        let p2 = LandmarkSet::new(vec![3, 7, 3, 7, 3, 7]);
        assert_eq!(tolerance_accuracy(&p2, &t, 1).unwrap(), 0.0);
        assert_eq!(tolerance_accuracy(&p2, &t, 2).unwrap(), 1.0);
    }

    #[test]
    fn kappa_perfect_and_independent() {
        let cm = ConfusionMatrix {
            counts: vec![vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 2]],
        };
        assert_eq!(quadratic_weighted_kappa(&cm).unwrap(), 1.0);
        // O = outer product of marginals -> kappa 0
        let cm = ConfusionMatrix {
            counts: vec![vec![1, 1], vec![1, 1]],
        };
        assert!(quadratic_weighted_kappa(&cm).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kappa_pinned_oracle() {
        // direct-formula value computed independently before this build
        let cm = ConfusionMatrix {
            counts: vec![vec![2, 1, 0], vec![0, 2, 1], vec![0, 0, 2]],
        };
        let k = quadratic_weighted_kappa(&cm).unwrap();
        assert!((k - 0.8048780487804879).abs() < 1e-12);
    }

    #[test]
    fn kappa_scale_invariant_and_degenerate() {
        let cm = ConfusionMatrix {
            counts: vec![vec![2, 1, 0], vec![0, 2, 1], vec![0, 0, 2]],
        };
        let scaled = ConfusionMatrix {
            counts: cm.counts.iter().map(|r| r.iter().map(|c| c * 7).collect()).collect(),
        };
        let (a, b) = (
            quadratic_weighted_kappa(&cm).unwrap(),
            quadratic_weighted_kappa(&scaled).unwrap(),
        );
        assert!((a - b).abs() < 1e-12);
        // all mass in one category on the diagonal -> 1
        let deg = ConfusionMatrix {
            counts: vec![vec![4, 0], vec![0, 0]],
        };
        assert_eq!(quadratic_weighted_kappa(&deg).unwrap(), 1.0);
        // empty
        let empty = ConfusionMatrix {
            counts: vec![vec![0, 0], vec![0, 0]],
        };
        assert!(quadratic_weighted_kappa(&empty).is_err());
    }

    fn mask_from(dims: (usize, usize, usize), bits: Vec<bool>) -> BinaryMask {
        BinaryMask { bits, dims }
    }

    #[test]
    fn dice_conventions() {
        let dims = (2, 2, 1);
        let a = mask_from(dims, vec![true, true, false, false]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask_from(dims, vec![false, false, true, true]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let e = mask_from(dims, vec![false; 4]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        let bad = mask_from((4, 1, 1), vec![false; 4]);
        assert!(dice(&a, &bad).is_err());
    }

    #[test]
    fn dice_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let n = 60;
            let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let inter = a.iter().zip(&b).filter(|(&x, &y)| x && y).count();
            let ca = a.iter().filter(|&&x| x).count();
            let cb = b.iter().filter(|&&x| x).count();
            let expect = if ca + cb == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (ca + cb) as f64
            };
            let d = dice(
                &mask_from((n, 1, 1), a),
                &mask_from((n, 1, 1), b),
            )
            .unwrap();
            assert_eq!(d, expect);
        }
    }

    #[test]
    fn segment_volume_analytic_and_conservation() {
        let empty = LabelMask {
            labels: vec![0; 8],
            dims: (2, 2, 2),
        };
        assert_eq!(per_segment_volume(&empty, [1.0, 1.0, 1.0]), [0.0; 8]);

        let mut labels = vec![0u8; 27];
        for l in labels.iter_mut().take(10) {
            *l = 3;
        }
        let lm = LabelMask {
            labels,
            dims: (3, 3, 3),
        };
        let v = per_segment_volume(&lm, [0.5, 0.5, 1.0]);
        assert_eq!(v[2], 2.5);
        assert_eq!(v.iter().sum::<f64>(), 2.5);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let labels: Vec<u8> = (0..125).map(|_| rng.gen_range(0..=8)).collect();
        let support = labels.iter().filter(|&&l| l > 0).count();
        let lm = LabelMask {
            labels,
            dims: (5, 5, 5),
        };
        let spacing = [0.4, 0.6, 1.25];
        let v = per_segment_volume(&lm, spacing);
        let total: f64 = v.iter().sum();
        let expect = support as f64 * spacing[0] * spacing[1] * spacing[2];
        assert!((total - expect).abs() < 1e-9);
    }

    #[test]
    fn mae_zero_iff_top1_perfect() {
        // concentrated predictions: mae 0, top1 1, tol(0) 1 simultaneously
        let truth = LandmarkSet::new(vec![0, 2, 4, 1, 3, 5]);
        let mut probs = Vec::new();
        for &z in &truth.indices {
            let mut row = vec![0.0; 6];
            row[z] = 1.0;
            probs.push(row);
        }
        let p = PredictionSet { probs };
        let pred = argmax_prediction(&p);
        assert_eq!(mae(&pred, &truth).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&p, &truth, 1).unwrap(), 1.0);
        assert_eq!(tolerance_accuracy(&pred, &truth, 0).unwrap(), 1.0);
    }
}
