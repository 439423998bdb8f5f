//! Training objectives. Every loss returns its value together with the
//! gradient with respect to the logits it consumed, so the trainer can splice
//! it into a tape as a single node.

use std::collections::BTreeMap;

use asda_autodiff::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::nets::{AnchorTargets, DetFlat};
use crate::types::{odc_target, DomainTag, OneHot};

/// Lower bound applied to every probability before taking its log.
pub const LOG_FLOOR: f64 = 1e-12;
/// Localization weight in the MultiBox objective.
pub const LOC_WEIGHT: f64 = 1.0;
/// Hard negatives kept per positive anchor.
pub const NEG_POS_RATIO: usize = 3;
/// Pixel value excluded from segmentation losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-element mean (default) or the literal sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Loss value plus gradient with respect to the consumed logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T: Scalar> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn floor<T: Scalar>() -> T {
    T::of(LOG_FLOOR)
}

/// Softmax of `x` (written into `p`).
fn softmax_into<T: Scalar>(x: &[T], p: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (pi, &xi) in p.iter_mut().zip(x) {
        *pi = (xi - m).exp();
        z += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= z;
    }
}

/// `-log max(p[t], floor)` and its gradient with respect to the logits,
/// scaled by `w`, accumulated into `g`.
fn ce_from_probs<T: Scalar>(p: &[T], t: usize, w: T, g: &mut [T]) -> T {
    let pt = p[t];
    if pt > floor() {
        for (gi, &pi) in g.iter_mut().zip(p) {
            *gi += w * pi;
        }
        g[t] -= w;
        -pt.ln()
    } else {
        -floor::<T>().ln()
    }
}

/// Pixel-wise cross-entropy of `logits[B, C, H, W]` against `labels` (one
/// `H*W` map per batch item); pixels labelled [`IGNORE_LABEL`] are skipped.
pub fn seg_loss<T: Scalar>(logits: &Tensor<T>, labels: &[&[u8]], red: Reduction) -> LossGrad<T> {
    let (b, c, h, w) = dims4(logits);
    assert_eq!(labels.len(), b, "one label map per batch item");
    let hw = h * w;
    let x = logits.data();
    let mut grad = vec![T::zero(); x.len()];
    let mut total = T::zero();
    let mut count = 0usize;
    let (mut px, mut pp, mut pg) = (vec![T::zero(); c], vec![T::zero(); c], vec![T::zero(); c]);
    for (bi, lab) in labels.iter().enumerate() {
        assert_eq!(lab.len(), hw);
        for (i, &t) in lab.iter().enumerate() {
            if t == IGNORE_LABEL {
                continue;
            }
            let base = bi * c * hw + i;
            for k in 0..c {
                px[k] = x[base + k * hw];
            }
            softmax_into(&px, &mut pp);
            pg.fill(T::zero());
            total += ce_from_probs(&pp, t as usize, T::one(), &mut pg);
            for k in 0..c {
                grad[base + k * hw] = pg[k];
            }
            count += 1;
        }
    }
    finish(total, grad, logits.shape(), count, red)
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    assert_eq!(t.shape().len(), 4, "expected a [B, C, H, W] tensor");
    (t.dim(0), t.dim(1), t.dim(2), t.dim(3))
}

fn finish<T: Scalar>(total: T, mut grad: Vec<T>, shape: &[usize], count: usize, red: Reduction) -> LossGrad<T> {
    match red {
        Reduction::Sum => LossGrad {
            value: total,
            grad: Tensor::new(shape.to_vec(), grad),
        },
        Reduction::Mean => {
            if count == 0 {
                return LossGrad {
                    value: T::zero(),
                    grad: Tensor::zeros(shape.to_vec()),
                };
            }
            let inv = T::one() / T::of(count as f64);
            grad.iter_mut().for_each(|g| *g *= inv);
            LossGrad {
                value: total * inv,
                grad: Tensor::new(shape.to_vec(), grad),
            }
        }
    }
}

fn smooth_l1<T: Scalar>(d: T) -> (T, T) {
    let half = T::of(0.5);
    if d.abs() < T::one() {
        (half * d * d, d)
    } else {
        (d.abs() - half, d.signum())
    }
}

/// MultiBox loss over a batch: anchor cross-entropy on positives and
/// hard-mined negatives (3 per positive, at least 3 per image) plus weighted
/// smooth-L1 on positive offsets, divided by `max(1, positives in batch)`.
/// Returns the value and one gradient record per image.
pub fn det_loss<T: Scalar>(out: &[DetFlat<T>], targets: &[&AnchorTargets], k: usize) -> (T, Vec<DetFlat<T>>) {
    assert_eq!(out.len(), targets.len());
    let total_pos: usize = targets.iter().map(|t| t.num_positive).sum();
    let norm = T::one() / T::of(total_pos.max(1) as f64);
    let alpha = T::of(LOC_WEIGHT);
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(out.len());
    let (mut p, mut g) = (vec![T::zero(); k], vec![T::zero(); k]);
    for (o, t) in out.iter().zip(targets) {
        let n = t.labels.len();
        assert_eq!(o.logits.len(), n * k);
        let mut gl = vec![T::zero(); n * k];
        let mut go = vec![T::zero(); n * 4];
        let mut neg: Vec<(T, usize)> = Vec::new();
        let mut probs = vec![T::zero(); n * k];
        for a in 0..n {
            softmax_into(&o.logits[a * k..(a + 1) * k], &mut probs[a * k..(a + 1) * k]);
            if t.labels[a] == 0 {
                let pb = probs[a * k].max(floor());
                neg.push((-pb.ln(), a));
            }
        }
        neg.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal).then(x.1.cmp(&y.1)));
        let keep = (NEG_POS_RATIO * t.num_positive.max(1)).min(neg.len());
        let mut selected: Vec<usize> = (0..n).filter(|&a| t.labels[a] != 0).collect();
        selected.extend(neg[..keep].iter().map(|&(_, a)| a));
        for &a in &selected {
            p.copy_from_slice(&probs[a * k..(a + 1) * k]);
            g.fill(T::zero());
            value += norm * ce_from_probs(&p, t.labels[a], T::one(), &mut g);
            for kk in 0..k {
                gl[a * k + kk] = norm * g[kk];
            }
            if t.labels[a] != 0 {
                for j in 0..4 {
                    let d = o.offsets[a * 4 + j] - T::of(t.offsets[a][j] as f64);
                    let (l, dl) = smooth_l1(d);
                    value += norm * alpha * l;
                    go[a * 4 + j] = norm * alpha * dl;
                }
            }
        }
        grads.push(DetFlat {
            logits: gl,
            offsets: go,
        });
    }
    (value, grads)
}

/// Which 2-way channel the pixel classifier should favour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdcLabels {
    /// Source maps toward channel 0, target maps toward channel 1.
    True,
    /// Domain roles swapped.
    Inverted,
    /// Average of the two.
    Confusion,
}

/// Pixel-domain loss on `[B, 2, H, W]` maps from each domain. With
/// [`Reduction::Mean`] every present domain contributes its per-pixel mean.
/// Returns the value and the gradients for the source and target maps.
pub fn pdc_loss_with<T: Scalar>(
    src: Option<&Tensor<T>>,
    tgt: Option<&Tensor<T>>,
    labels: PdcLabels,
    red: Reduction,
) -> (T, Option<Tensor<T>>, Option<Tensor<T>>) {
    assert!(src.is_some() || tgt.is_some(), "at least one domain map required");
    let mut value = T::zero();
    let mut run = |map: Option<&Tensor<T>>, domain: DomainTag| {
        map.map(|m| {
            let (b, c, h, w) = dims4(m);
            assert_eq!(c, 2, "pixel classifier maps have 2 channels");
            let hw = h * w;
            let x = m.data();
            let mut grad = vec![T::zero(); x.len()];
            let own = domain.to_byte() as usize;
            let weights: [(usize, T); 2] = match labels {
                PdcLabels::True => [(own, T::one()), (1 - own, T::zero())],
                PdcLabels::Inverted => [(1 - own, T::one()), (own, T::zero())],
                PdcLabels::Confusion => [(own, T::of(0.5)), (1 - own, T::of(0.5))],
            };
            let scale = match red {
                Reduction::Mean => T::one() / T::of((b * hw) as f64),
                Reduction::Sum => T::one(),
            };
            let mut total = T::zero();
            let mut p = [T::zero(); 2];
            for bi in 0..b {
                for i in 0..hw {
                    let i0 = bi * 2 * hw + i;
                    softmax_into(&[x[i0], x[i0 + hw]], &mut p);
                    let mut g = [T::zero(); 2];
                    for &(t, wt) in &weights {
                        if wt != T::zero() {
                            total += wt * ce_from_probs(&p, t, wt, &mut g);
                        }
                    }
                    grad[i0] = g[0] * scale;
                    grad[i0 + hw] = g[1] * scale;
                }
            }
            value += total * scale;
            Tensor::new(m.shape().to_vec(), grad)
        })
    };
    let gs = run(src, DomainTag::Source);
    let gt = run(tgt, DomainTag::Target);
    (value, gs, gt)
}

pub fn pdc_loss<T: Scalar>(src: Option<&Tensor<T>>, tgt: Option<&Tensor<T>>, red: Reduction) -> T {
    pdc_loss_with(src, tgt, PdcLabels::True, red).0
}

pub fn pdc_inv_loss<T: Scalar>(src: Option<&Tensor<T>>, tgt: Option<&Tensor<T>>, red: Reduction) -> T {
    pdc_loss_with(src, tgt, PdcLabels::Inverted, red).0
}

pub fn pdc_confusion_loss<T: Scalar>(src: Option<&Tensor<T>>, tgt: Option<&Tensor<T>>, red: Reduction) -> T {
    pdc_loss_with(src, tgt, PdcLabels::Confusion, red).0
}

/// Per-pixel confusion loss `½(−log p − log(1−p))` for source probability `p`.
pub fn pixel_confusion(p: f64) -> f64 {
    0.5 * (-(p.max(LOG_FLOOR)).ln() - ((1.0 - p).max(LOG_FLOOR)).ln())
}

/// Label space of the object classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdcLabels {
    /// Joint (class, domain) labels over `2N` outputs.
    ClassAndDomain,
    /// Domain only, 2 outputs.
    DomainOnly,
}

impl OdcLabels {
    pub fn outputs(self, n: usize) -> usize {
        match self {
            OdcLabels::ClassAndDomain => 2 * n,
            OdcLabels::DomainOnly => 2,
        }
    }
}

/// Targets for objects with 0-based `classes` from `domains`.
pub fn odc_targets(classes: &[usize], domains: &[DomainTag], inverse: bool, n: usize, space: OdcLabels) -> Vec<OneHot> {
    assert_eq!(classes.len(), domains.len());
    classes
        .iter()
        .zip(domains)
        .map(|(&c, &d)| match space {
            OdcLabels::ClassAndDomain => odc_target(c + 1, d, inverse, n).expect("object class in range"),
            OdcLabels::DomainOnly => {
                let d = if inverse { d.flipped() } else { d };
                crate::types::make_onehot(d.to_byte() as usize + 1, 2).expect("two domains")
            }
        })
        .collect()
}

/// Cross-entropy of `logits[R, M]` rows against one-hot rows, mean (or sum)
/// over objects; zero objects give 0.
pub fn odc_loss<T: Scalar>(logits: &Tensor<T>, targets: &[OneHot], red: Reduction) -> LossGrad<T> {
    odc_loss_weighted(logits, &[(targets, T::one())], red)
}

/// Sum of `weight * CE` over several target lists sharing the same logits.
fn odc_loss_weighted<T: Scalar>(logits: &Tensor<T>, sets: &[(&[OneHot], T)], red: Reduction) -> LossGrad<T> {
    let r = if logits.is_empty() { 0 } else { logits.dim(0) };
    let m = if r == 0 { 0 } else { logits.dim(1) };
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    let mut p = vec![T::zero(); m];
    for row in 0..r {
        let x = &logits.data()[row * m..(row + 1) * m];
        softmax_into(x, &mut p);
        for (targets, w) in sets {
            assert_eq!(targets.len(), r, "one target per object");
            assert_eq!(targets[row].len(), m, "target length must equal logit count");
            total += *w * ce_from_probs(&p, targets[row].index(), *w, &mut grad[row * m..(row + 1) * m]);
        }
    }
    finish(total, grad, logits.shape(), r, red)
}

pub fn odc_inv_loss<T: Scalar>(
    logits: &Tensor<T>,
    classes: &[usize],
    domains: &[DomainTag],
    space: OdcLabels,
    n: usize,
    red: Reduction,
) -> LossGrad<T> {
    odc_loss(logits, &odc_targets(classes, domains, true, n, space), red)
}

/// `½(L + L_inv)` over the same logits.
pub fn odc_confusion_loss<T: Scalar>(
    logits: &Tensor<T>,
    classes: &[usize],
    domains: &[DomainTag],
    space: OdcLabels,
    n: usize,
    red: Reduction,
) -> LossGrad<T> {
    let t = odc_targets(classes, domains, false, n, space);
    let ti = odc_targets(classes, domains, true, n, space);
    let half = T::of(0.5);
    odc_loss_weighted(logits, &[(&t, half), (&ti, half)], red)
}

/// Multi-label sigmoid cross-entropy of `logits[B, C, H, W]` against binary
/// masks of the same layout, summed over channels and averaged over pixels.
pub fn multilabel_loss<T: Scalar>(logits: &Tensor<T>, masks: &[&[u8]], red: Reduction) -> LossGrad<T> {
    let (b, c, h, w) = dims4(logits);
    assert_eq!(masks.len(), b);
    let chw = c * h * w;
    let x = logits.data();
    let mut grad = vec![T::zero(); x.len()];
    let mut total = T::zero();
    for (bi, m) in masks.iter().enumerate() {
        assert_eq!(m.len(), chw);
        for i in 0..chw {
            let xi = x[bi * chw + i];
            let p = T::one() / (T::one() + (-xi).exp());
            let (pos, q) = if m[i] != 0 { (true, p) } else { (false, T::one() - p) };
            if q > floor() {
                total -= q.ln();
                grad[bi * chw + i] = if pos { p - T::one() } else { p };
            } else {
                total -= floor::<T>().ln();
            }
        }
    }
    finish(total, grad, logits.shape(), b * h * w, red)
}

/// Named loss values of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

/// `seg + det_src + det_tgt`; an absent target batch reports `det_tgt = 0`.
pub fn ds_loss(seg: f64, det_src: f64, det_tgt: Option<f64>) -> LossReport {
    let det_tgt = det_tgt.unwrap_or(0.0);
    let mut components = BTreeMap::new();
    components.insert("seg".to_string(), seg);
    components.insert("det_src".to_string(), det_src);
    components.insert("det_tgt".to_string(), det_tgt);
    LossReport {
        total: seg + det_src + det_tgt,
        components,
    }
}

/// `L_DS + λ_pdc·pdc_conf + λ_odc·odc_conf`.
pub fn full_ds_objective(ds: &LossReport, pdc_conf: f64, odc_conf: f64, lambda_pdc: f64, lambda_odc: f64) -> f64 {
    ds.total + lambda_pdc * pdc_conf + lambda_odc * odc_conf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::AnchorTargets;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn map(b: usize, c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![b, c, h, w], f)
    }

    #[test]
    fn seg_loss_examples() {
        let labels = [0u8, 1, 2, 1];
        let sat = map(1, 3, 2, 2, |i| if (i / 4) as u8 == labels[i % 4] { 20.0 } else { 0.0 });
        assert!(seg_loss(&sat, &[&labels], Reduction::Mean).value < 1e-6);
        let zero = map(1, 7, 2, 2, |_| 0.0);
        let l = seg_loss(&zero, &[&[3, 4, 5, 6]], Reduction::Mean).value;
        assert!((l - 7f64.ln()).abs() < 1e-12);

        let x = [0.3, -1.2, 0.5, 2.0, 1.1, 0.0, -0.4, 0.7, -2.0, 0.9, 0.25, -0.6];
        let t = map(1, 3, 2, 2, |i| x[i]);
        let mut hand = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let z: f64 = (0..3).map(|k| x[k * 4 + i].exp()).sum();
            hand -= (x[lab as usize * 4 + i].exp() / z).ln();
        }
        let got = seg_loss(&t, &[&labels], Reduction::Mean).value;
        assert!((got - hand / 4.0).abs() < 1e-12);
        let got_sum = seg_loss(&t, &[&labels], Reduction::Sum).value;
        assert!((got_sum - hand).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_skips_ignored_pixels() {
        let t = map(1, 3, 1, 2, |i| i as f64);
        let a = seg_loss(&t, &[&[1, IGNORE_LABEL]], Reduction::Mean);
        let b = seg_loss(&map(1, 3, 1, 1, |i| (2 * i) as f64), &[&[1]], Reduction::Mean);
        assert!((a.value - b.value).abs() < 1e-12);
        assert_eq!(a.grad.data()[1], 0.0);
    }

    fn targets(labels: Vec<usize>, offsets: Vec<[f32; 4]>) -> AnchorTargets {
        let num_positive = labels.iter().filter(|&&l| l != 0).count();
        AnchorTargets {
            labels,
            offsets,
            num_positive,
        }
    }

    #[test]
    fn det_loss_examples() {
        let k = 3;
        let bg = DetFlat {
            logits: vec![30.0, 0.0, 0.0, 30.0, 0.0, 0.0],
            offsets: vec![0.0; 8],
        };
        let t = targets(vec![0, 0], vec![[0.0; 4]; 2]);
        assert!(det_loss(&[bg], &[&t], k).0 < 1e-9);

        let pos = DetFlat {
            logits: vec![0.0, 0.0, 30.0, 30.0, 0.0, 0.0],
            offsets: vec![0.1, -0.2, 0.3, 0.05, 0.0, 0.0, 0.0, 0.0],
        };
        let t = targets(vec![2, 0], vec![[0.1, -0.2, 0.3, 0.05], [0.0; 4]]);
        assert!(det_loss(&[pos], &[&t], k).0 < 1e-9);

        // Two anchors, one positive of class 1 with offset errors, one negative.
        let x = DetFlat {
            logits: vec![0.5, 1.0, -0.5, 0.2, 0.1, 0.3],
            offsets: vec![0.5, -2.0, 0.0, 0.1, 9.0, 9.0, 9.0, 9.0],
        };
        let t = targets(vec![1, 0], vec![[0.0, 0.0, 0.0, 0.0], [0.0; 4]]);
        let ce = |l: &[f64], c: usize| {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            -(l[c].exp() / z).ln()
        };
        let conf = ce(&x.logits[0..3], 1) + ce(&x.logits[3..6], 0);
        let loc = 0.5 * 0.25 + (2.0 - 0.5) + 0.0 + 0.5 * 0.01;
        let (v, _) = det_loss(&[x], &[&t], k);
        assert!((v - (conf + loc)).abs() < 1e-12);
    }

    #[test]
    fn det_loss_mines_only_hardest_negatives() {
        let k = 2;
        // One positive, five negatives; only the three hardest count.
        let logits = vec![0.0, 0.0, 5.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 4.0, 0.0];
        let t = targets(vec![1, 0, 0, 0, 0, 0], vec![[0.0; 4]; 6]);
        let out = DetFlat {
            logits,
            offsets: vec![0.0; 24],
        };
        let (_, g) = det_loss(&[out], &[&t], k);
        let touched: Vec<usize> = (0..6).filter(|&a| g[0].logits[a * 2] != 0.0).collect();
        assert_eq!(touched, vec![0, 2, 3, 4]);
    }

    #[test]
    fn pdc_examples() {
        let u = map(1, 2, 3, 3, |_| 0.4);
        let both = pdc_loss(Some(&u), Some(&u), Reduction::Mean);
        assert!((both - 2.0 * LN2).abs() < 1e-12);
        let sat = map(1, 2, 2, 2, |i| if i < 4 { 30.0 } else { -30.0 });
        assert!(pdc_loss(Some(&sat), None, Reduction::Mean) < 1e-12);
        assert!(pdc_confusion_loss(Some(&sat), None, Reduction::Mean) > 10.0);
        let c = pdc_confusion_loss(Some(&u), Some(&u), Reduction::Mean);
        assert!((c - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn pdc_random_matches_direct_sum() {
        let s = map(1, 2, 2, 2, |i| [0.3, -0.7, 1.5, 0.0, 0.2, 0.9, -1.1, 0.4][i]);
        let t = map(1, 2, 2, 2, |i| [1.0, 0.5, -0.5, 2.0, -1.0, 0.0, 0.5, 0.1][i]);
        let p0 = |m: &Tensor<f64>, i: usize| {
            let (a, b) = (m.data()[i], m.data()[i + 4]);
            a.exp() / (a.exp() + b.exp())
        };
        let mut direct = 0.0;
        for i in 0..4 {
            direct -= p0(&s, i).ln();
            direct -= (1.0 - p0(&t, i)).ln();
        }
        let sum = pdc_loss(Some(&s), Some(&t), Reduction::Sum);
        assert!((sum - direct).abs() < 1e-12);
    }

    #[test]
    fn odc_examples() {
        let n = 7;
        let classes = [0usize, 3, 6];
        let domains = [DomainTag::Source, DomainTag::Target, DomainTag::Target];
        let t = odc_targets(&classes, &domains, false, n, OdcLabels::ClassAndDomain);
        let sat = Tensor::from_fn(vec![3, 14], |i| if i % 14 == t[i / 14].index() { 40.0f64 } else { 0.0 });
        assert!(odc_loss(&sat, &t, Reduction::Mean).value < 1e-12);
        let uni = Tensor::<f64>::zeros(vec![3, 14]);
        assert!((odc_loss(&uni, &t, Reduction::Mean).value - 14f64.ln()).abs() < 1e-12);
        let conf = odc_confusion_loss(&sat, &classes, &domains, OdcLabels::ClassAndDomain, n, Reduction::Mean).value;
        // The inverse term saturates at the log floor.
        assert!((conf - 0.5 * -LOG_FLOOR.ln()).abs() < 1e-6);

        let empty = Tensor::<f64>::zeros(vec![0, 14]);
        assert_eq!(odc_loss(&empty, &[], Reduction::Mean).value, 0.0);
    }

    #[test]
    fn odc_block_symmetric_logits_make_inverse_equal() {
        let n = 3;
        let v = [0.2, -0.5, 1.0];
        let logits = Tensor::from_fn(vec![2, 6], |i| v[i % 3] + (i / 6) as f64);
        let classes = [1, 2];
        let domains = [DomainTag::Source, DomainTag::Target];
        let t = odc_targets(&classes, &domains, false, n, OdcLabels::ClassAndDomain);
        let l = odc_loss(&logits, &t, Reduction::Mean).value;
        let li = odc_inv_loss(&logits, &classes, &domains, OdcLabels::ClassAndDomain, n, Reduction::Mean).value;
        let lc = odc_confusion_loss(&logits, &classes, &domains, OdcLabels::ClassAndDomain, n, Reduction::Mean).value;
        assert!((l - li).abs() < 1e-12 && (lc - l).abs() < 1e-12);
    }

    #[test]
    fn odc_random_matches_direct() {
        let logits = Tensor::from_fn(vec![3, 4], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
        let classes = [0usize, 1, 1];
        let domains = [DomainTag::Target, DomainTag::Source, DomainTag::Target];
        let t = odc_targets(&classes, &domains, false, 2, OdcLabels::ClassAndDomain);
        let mut direct = 0.0;
        for (r, tr) in t.iter().enumerate() {
            let row = &logits.data()[r * 4..r * 4 + 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let y = tr.to_vec();
            direct -= (0..4).map(|j| y[j] * (row[j].exp() / z).ln()).sum::<f64>();
        }
        assert!((odc_loss(&logits, &t, Reduction::Mean).value - direct / 3.0).abs() < 1e-12);
    }

    #[test]
    fn domain_only_targets() {
        let t = odc_targets(&[4, 2], &[DomainTag::Source, DomainTag::Target], false, 7, OdcLabels::DomainOnly);
        assert_eq!((t[0].index(), t[0].len(), t[1].index()), (0, 2, 1));
        let ti = odc_targets(&[4, 2], &[DomainTag::Source, DomainTag::Target], true, 7, OdcLabels::DomainOnly);
        assert_eq!((ti[0].index(), ti[1].index()), (1, 0));
    }

    #[test]
    fn multilabel_at_zero_logits_is_c_ln2() {
        let z = map(1, 7, 3, 3, |_| 0.0);
        let m = vec![0u8; 7 * 9];
        let l = multilabel_loss(&z, &[&m], Reduction::Mean).value;
        assert!((l - 7.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn ds_loss_and_objective() {
        let r = ds_loss(0.0, 0.0, Some(0.0));
        assert_eq!(r.total, 0.0);
        let r = ds_loss(0.7, 0.2, None);
        assert!((r.total - 0.9).abs() < 1e-15);
        assert_eq!(r.components["det_tgt"], 0.0);
        let r = ds_loss(0.5, 0.25, Some(0.25));
        assert!((full_ds_objective(&r, 0.5, 0.25, 1.0, 1.0) - 1.75).abs() < 1e-15);
        assert_eq!(full_ds_objective(&r, 0.5, 0.25, 0.0, 0.0), r.total);
    }

    #[test]
    fn confusion_minimum_is_ln2_at_half() {
        let scan: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
        let best = scan
            .iter()
            .copied()
            .min_by(|a, b| pixel_confusion(*a).partial_cmp(&pixel_confusion(*b)).unwrap())
            .unwrap();
        assert_eq!(best, 0.5);
        assert!((pixel_confusion(0.5) - LN2).abs() < 1e-15);
    }

    fn fd_check(f: impl Fn(&Tensor<f64>) -> f64, analytic: &Tensor<f64>, x: &Tensor<f64>) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut a = x.clone();
            a.data_mut()[i] += h;
            let mut b = x.clone();
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "entry {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let x = map(2, 3, 2, 2, |i| ((i * 13) % 7) as f64 * 0.4 - 1.1);
        let labs: [&[u8]; 2] = [&[0, 1, 2, 1], &[2, 2, 0, 1]];
        let g = seg_loss(&x, &labs, Reduction::Mean).grad;
        fd_check(|t| seg_loss(t, &labs, Reduction::Mean).value, &g, &x);

        let m2 = map(2, 2, 2, 2, |i| ((i * 5) % 9) as f64 * 0.3 - 1.0);
        for labels in [PdcLabels::True, PdcLabels::Inverted, PdcLabels::Confusion] {
            let (_, gs, _) = pdc_loss_with(Some(&m2), Some(&m2), labels, Reduction::Mean);
            fd_check(|t| pdc_loss_with(Some(t), Some(&m2), labels, Reduction::Mean).0, &gs.unwrap(), &m2);
        }

        let masks: Vec<u8> = (0..24).map(|i| (i % 3 == 0) as u8).collect();
        let half = &masks[..12];
        let g = multilabel_loss(&x, &[half, &masks[12..]], Reduction::Mean).grad;
        fd_check(|t| multilabel_loss(t, &[half, &masks[12..]], Reduction::Mean).value, &g, &x);

        let l = Tensor::from_fn(vec![2, 6], |i| ((i * 11) % 5) as f64 * 0.5 - 1.0);
        let cls = [0usize, 2];
        let dom = [DomainTag::Source, DomainTag::Target];
        let g = odc_confusion_loss(&l, &cls, &dom, OdcLabels::ClassAndDomain, 3, Reduction::Mean).grad;
        fd_check(
            |t| odc_confusion_loss(t, &cls, &dom, OdcLabels::ClassAndDomain, 3, Reduction::Mean).value,
            &g,
            &l,
        );
    }

    proptest! {
        #[test]
        fn decompositions_and_duality(vals in proptest::collection::vec(-6.0f64..6.0, 16)) {
            let s = map(1, 2, 2, 2, |i| vals[i]);
            let t = map(1, 2, 2, 2, |i| vals[8 + i]);
            for red in [Reduction::Mean, Reduction::Sum] {
                let l = pdc_loss(Some(&s), Some(&t), red);
                let li = pdc_inv_loss(Some(&s), Some(&t), red);
                let c = pdc_confusion_loss(Some(&s), Some(&t), red);
                prop_assert!((c - 0.5 * (l + li)).abs() < 1e-9);
                prop_assert!(l >= 0.0 && li >= 0.0 && c >= 0.0);
                // Swapping the domain roles of the maps turns the loss into its inverse.
                prop_assert!((pdc_inv_loss(Some(&s), Some(&t), red) - pdc_loss_swapped(&s, &t, red)).abs() < 1e-9);
            }
            let logits = Tensor::from_fn(vec![2, 8], |i| vals[i]);
            let cls = [1usize, 3];
            let dom = [DomainTag::Target, DomainTag::Source];
            let sp = OdcLabels::ClassAndDomain;
            let l = odc_loss(&logits, &odc_targets(&cls, &dom, false, 4, sp), Reduction::Mean).value;
            let li = odc_inv_loss(&logits, &cls, &dom, sp, 4, Reduction::Mean).value;
            let c = odc_confusion_loss(&logits, &cls, &dom, sp, 4, Reduction::Mean).value;
            prop_assert!((c - 0.5 * (l + li)).abs() < 1e-9);
            let flipped: Vec<DomainTag> = dom.iter().map(|d| d.flipped()).collect();
            let dual = odc_loss(&logits, &odc_targets(&cls, &flipped, false, 4, sp), Reduction::Mean).value;
            prop_assert!((dual - li).abs() < 1e-12);
            prop_assert!(l >= 0.0 && li >= 0.0);
        }
    }

    /// The true-label loss with each map scored as if it came from the other domain.
    fn pdc_loss_swapped(s: &Tensor<f64>, t: &Tensor<f64>, red: Reduction) -> f64 {
        let flip = |m: &Tensor<f64>| {
            let hw = m.dim(2) * m.dim(3);
            Tensor::from_fn(m.shape().to_vec(), |i| {
                let (b, rest) = (i / (2 * hw), i % (2 * hw));
                m.data()[b * 2 * hw + (rest + hw) % (2 * hw)]
            })
        };
        pdc_loss(Some(&flip(s)), Some(&flip(t)), red)
    }
}
