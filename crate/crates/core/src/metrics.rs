//! Segmentation metrics: Dice similarity, normalized surface distance at a
//! tolerance, and instance-level F1.
//!
//! Empty-class conventions are uniform: if neither mask contains the class
//! (or has a boundary), the score is 1; if exactly one does, it is 0.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// An `H×W` map of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    num_classes: usize,
    labels: Vec<usize>,
}

impl LabelMask {
    pub fn from_indices(h: usize, w: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != h * w || h == 0 || w == 0 {
            return Err(Error::shape(format!("{} labels for a {h}×{w} mask", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label: bad as f64, num_classes });
        }
        Ok(Self { h, w, num_classes, labels })
    }

    /// From an `H×W` tensor of integral class values.
    pub fn from_tensor(t: &Tensor, num_classes: usize) -> Result<Self> {
        let &[h, w] = t.shape() else {
            return Err(Error::shape(format!("label mask must be H×W, got {:?}", t.shape())));
        };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < num_classes as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidLabel { label: v, num_classes })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(h, w, labels, num_classes)
    }

    /// Per-pixel argmax of a `C×H×W` probability map.
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let &[c, h, w] = probs.shape() else {
            return Err(Error::shape(format!("probabilities must be C×H×W, got {:?}", probs.shape())));
        };
        let idx = probs.argmax(0)?;
        Self::from_indices(h, w, idx.data().iter().map(|&v| v as usize).collect(), c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.w + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.h, self.w], self.labels.iter().map(|&l| l as f64).collect())
    }

    /// Pixels of class `c` with a 4-neighbour of another class or outside
    /// the image.
    pub fn boundary(&self, c: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.h {
            for j in 0..self.w {
                if self.get(i, j) != c {
                    continue;
                }
                let edge = i == 0 || j == 0 || i + 1 == self.h || j + 1 == self.w;
                if edge
                    || self.get(i - 1, j) != c
                    || self.get(i + 1, j) != c
                    || self.get(i, j - 1) != c
                    || self.get(i, j + 1) != c
                {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn same_shape(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(format!("mask shapes differ: {}×{} vs {}×{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for class `c`.
pub fn dsc(pred: &LabelMask, gt: &LabelMask, c: usize) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        p += (a == c) as usize;
        g += (b == c) as usize;
        both += (a == c && b == c) as usize;
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    })
}

fn within(points: &[(usize, usize)], targets: &[(usize, usize)], tau: f64) -> usize {
    points
        .iter()
        .filter(|&&(i, j)| {
            targets.iter().any(|&(k, l)| {
                let di = i.abs_diff(k) as f64;
                let dj = j.abs_diff(l) as f64;
                (di * di + dj * dj).sqrt() <= tau
            })
        })
        .count()
}

/// Surface Dice at tolerance `tau` (pixels) for class `c`.
pub fn nsd(pred: &LabelMask, gt: &LabelMask, c: usize, tau: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("nsd tolerance must be non-negative, got {tau}")));
    }
    let bp = pred.boundary(c);
    let bg = gt.boundary(c);
    Ok(match (bp.len(), bg.len()) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        (np, ng) => (within(&bp, &bg, tau) + within(&bg, &bp, tau)) as f64 / (np + ng) as f64,
    })
}

/// 4-connected components of the non-zero pixels; returns a component id
/// per pixel (`0` = background) and the component count.
pub fn connected_components(mask: &LabelMask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.h, mask.w);
    let mut comp = vec![0usize; h * w];
    let mut n = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.labels[start] == 0 || comp[start] != 0 {
            continue;
        }
        n += 1;
        comp[start] = n;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.labels[q] != 0 && comp[q] == 0 {
                    comp[q] = n;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
    }
    (comp, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl InstanceCounts {
    pub fn f1(&self) -> f64 {
        let tp = 2 * self.true_positives;
        let denom = tp + self.false_positives + self.false_negatives;
        if denom == 0 {
            1.0
        } else {
            tp as f64 / denom as f64
        }
    }
}

/// Greedy one-to-one matching of connected components by descending IoU.
pub fn instance_matching(pred: &LabelMask, gt: &LabelMask, iou_threshold: f64) -> Result<InstanceCounts> {
    same_shape(pred, gt)?;
    let (pc, np) = connected_components(pred);
    let (gc, ng) = connected_components(gt);
    let mut inter = vec![0usize; (np + 1) * (ng + 1)];
    let mut psize = vec![0usize; np + 1];
    let mut gsize = vec![0usize; ng + 1];
    for (&a, &b) in pc.iter().zip(&gc) {
        psize[a] += 1;
        gsize[b] += 1;
        inter[a * (ng + 1) + b] += 1;
    }
    let mut pairs = Vec::new();
    for a in 1..=np {
        for b in 1..=ng {
            let i = inter[a * (ng + 1) + b];
            if i > 0 {
                let iou = i as f64 / (psize[a] + gsize[b] - i) as f64;
                pairs.push((iou, a, b));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut pm = vec![false; np + 1];
    let mut gm = vec![false; ng + 1];
    let mut tp = 0;
    for (iou, a, b) in pairs {
        if iou >= iou_threshold && !pm[a] && !gm[b] {
            pm[a] = true;
            gm[b] = true;
            tp += 1;
        }
    }
    Ok(InstanceCounts { true_positives: tp, false_positives: np - tp, false_negatives: ng - tp })
}

pub fn instance_f1(pred: &LabelMask, gt: &LabelMask, iou_threshold: f64) -> Result<f64> {
    Ok(instance_matching(pred, gt, iou_threshold)?.f1())
}

/// Number of times each empty-mask convention decided a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConventionCounts {
    pub dsc_both_empty: usize,
    pub dsc_one_empty: usize,
    pub nsd_both_empty: usize,
    pub nsd_one_empty: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_f1: Option<f64>,
}

/// Metrics over a set of cases. Class-wise vectors are indexed by the
/// entries of `classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tau: f64,
    pub classes: Vec<usize>,
    pub num_cases: usize,
    /// Mean over cases, per class.
    pub per_class_dsc: Vec<f64>,
    pub per_class_nsd: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    /// Spread of the per-case means (each case averaged over classes).
    pub dsc_over_cases: Spread,
    pub nsd_over_cases: Spread,
    /// Spread of the per-class means.
    pub dsc_over_classes: Spread,
    pub nsd_over_classes: Spread,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_f1: Option<f64>,
    pub conventions: ConventionCounts,
    pub cases: Vec<CaseMetrics>,
}

pub struct EvalOptions {
    pub tau: f64,
    pub include_background: bool,
    /// Computes instance F1 (foreground vs background) when set.
    pub iou_threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, include_background: false, iou_threshold: None }
    }
}

fn binary(mask: &LabelMask) -> LabelMask {
    LabelMask { labels: mask.labels.iter().map(|&l| (l != 0) as usize).collect(), num_classes: 2, ..*mask }
}

/// Scores every `(id, prediction, ground truth)` case.
pub fn evaluate(cases: &[(String, LabelMask, LabelMask)], opts: &EvalOptions) -> Result<MetricsReport> {
    let Some((_, _, first)) = cases.first() else {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    };
    let nc = first.num_classes;
    let classes: Vec<usize> = (if opts.include_background { 0 } else { 1 }..nc).collect();
    let mut conv = ConventionCounts::default();
    let mut out = Vec::with_capacity(cases.len());
    let mut f1s = Vec::new();
    for (id, pred, gt) in cases {
        if gt.num_classes != nc || pred.num_classes != nc {
            return Err(Error::InvalidArgument(format!("case {id}: class count differs from {nc}")));
        }
        let mut d = Vec::with_capacity(classes.len());
        let mut s = Vec::with_capacity(classes.len());
        for &c in &classes {
            let (pn, gn) = (pred.labels.contains(&c), gt.labels.contains(&c));
            conv.dsc_both_empty += (!pn && !gn) as usize;
            conv.dsc_one_empty += (pn != gn) as usize;
            // a class present in a mask always has at least one boundary pixel
            conv.nsd_both_empty += (!pn && !gn) as usize;
            conv.nsd_one_empty += (pn != gn) as usize;
            d.push(dsc(pred, gt, c)?);
            s.push(nsd(pred, gt, c, opts.tau)?);
        }
        let f1 = match opts.iou_threshold {
            Some(t) => Some(instance_f1(&binary(pred), &binary(gt), t)?),
            None => None,
        };
        f1s.extend(f1);
        out.push(CaseMetrics { id: id.clone(), dsc: d, nsd: s, instance_f1: f1 });
    }
    let n = out.len() as f64;
    let class_mean = |get: fn(&CaseMetrics) -> &Vec<f64>, k: usize| out.iter().map(|c| get(c)[k]).sum::<f64>() / n;
    let per_class_dsc: Vec<f64> = (0..classes.len()).map(|k| class_mean(|c| &c.dsc, k)).collect();
    let per_class_nsd: Vec<f64> = (0..classes.len()).map(|k| class_mean(|c| &c.nsd, k)).collect();
    let case_means = |get: fn(&CaseMetrics) -> &Vec<f64>| -> Vec<f64> {
        out.iter().map(|c| get(c).iter().sum::<f64>() / classes.len().max(1) as f64).collect()
    };
    let dsc_over_cases = Spread::of(&case_means(|c| &c.dsc));
    let nsd_over_cases = Spread::of(&case_means(|c| &c.nsd));
    let dsc_over_classes = Spread::of(&per_class_dsc);
    let nsd_over_classes = Spread::of(&per_class_nsd);
    Ok(MetricsReport {
        tau: opts.tau,
        num_cases: out.len(),
        mean_dsc: dsc_over_classes.mean,
        mean_nsd: nsd_over_classes.mean,
        classes,
        per_class_dsc,
        per_class_nsd,
        dsc_over_cases,
        nsd_over_cases,
        dsc_over_classes,
        nsd_over_classes,
        iou_threshold: opts.iou_threshold,
        instance_f1: opts.iou_threshold.map(|_| f1s.iter().sum::<f64>() / f1s.len() as f64),
        conventions: conv,
        cases: out,
    })
}
