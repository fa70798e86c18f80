use serde::{Deserialize, Serialize};

use super::MatchResult;
use crate::detector::HeadOutput;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const NEG_POS_RATIO: usize = 3;

/// Loss terms of one batch, already divided by the positive count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub conf: f64,
    pub num_positives: usize,
    pub num_negatives: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.loc + self.conf
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiboxLoss {
    /// Scalar loss node.
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

struct ImageTerms {
    loc: f64,
    conf: f64,
    positives: usize,
    negatives: usize,
    dloc: Vec<f64>,
    dconf: Vec<f64>,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Adds `softmax(row) − onehot(label)` to `grad`.
fn ce_grad(row: &[f64], lse: f64, label: usize, grad: &mut [f64]) {
    for (k, (g, v)) in grad.iter_mut().zip(row).enumerate() {
        *g += (v - lse).exp() - if k == label { 1.0 } else { 0.0 };
    }
}

fn image_terms(loc: &[f64], conf: &[f64], k: usize, m: &MatchResult, ratio: usize) -> ImageTerms {
    let p = m.num_priors();
    let mut t = ImageTerms {
        loc: 0.0,
        conf: 0.0,
        positives: 0,
        negatives: 0,
        dloc: vec![0.0; p * 4],
        dconf: vec![0.0; p * k],
    };
    let mut negatives = Vec::new();
    for i in 0..p {
        let row = &conf[i * k..(i + 1) * k];
        let lse = log_sum_exp(row);
        let label = m.labels[i];
        if label == 0 {
            negatives.push((lse - row[0], i, lse));
            continue;
        }
        t.positives += 1;
        t.conf += lse - row[label];
        ce_grad(row, lse, label, &mut t.dconf[i * k..(i + 1) * k]);
        for j in 0..4 {
            let (l, d) = smooth_l1(loc[i * 4 + j] - m.targets[i][j]);
            t.loc += l;
            t.dloc[i * 4 + j] = d;
        }
    }
    let keep = (ratio * t.positives).min(negatives.len());
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(l, i, lse) in &negatives[..keep] {
        t.conf += l;
        ce_grad(&conf[i * k..(i + 1) * k], lse, 0, &mut t.dconf[i * k..(i + 1) * k]);
    }
    t.negatives = keep;
    t
}

/// Smooth-L1 localization over positives plus softmax cross-entropy over
/// positives and the `neg_pos_ratio · N_pos` hardest negatives of each
/// image, summed over the batch and divided by the batch positive count.
/// Images without positives contribute nothing; a batch without positives
/// has zero loss.
pub fn multibox_loss(g: &mut Graph, head: &HeadOutput, matches: &[MatchResult], neg_pos_ratio: usize) -> Result<MultiboxLoss> {
    let loc = g.value(head.loc);
    let conf = g.value(head.conf);
    let [n, p, four] = loc.shape()[..] else {
        return Err(Error::shape("multibox_loss", format!("loc must be (n, priors, 4), got {:?}", loc.shape())));
    };
    let [nc, pc, k] = conf.shape()[..] else {
        return Err(Error::shape("multibox_loss", format!("conf must be (n, priors, classes), got {:?}", conf.shape())));
    };
    if four != 4 || nc != n || pc != p || matches.len() != n || matches.iter().any(|m| m.num_priors() != p) {
        return Err(Error::shape(
            "multibox_loss",
            format!("loc {:?}, conf {:?} and {} match results disagree", loc.shape(), conf.shape(), matches.len()),
        ));
    }
    if let Some(l) = matches.iter().flat_map(|m| &m.labels).find(|&&l| l >= k) {
        return Err(Error::UnknownClass(*l));
    }
    let (ld, cd) = (loc.data(), conf.data());
    let terms = par_map!(0..n, |b| image_terms(
        &ld[b * p * 4..(b + 1) * p * 4],
        &cd[b * p * k..(b + 1) * p * k],
        k,
        &matches[b],
        neg_pos_ratio
    ));

    let positives: usize = terms.iter().map(|t| t.positives).sum();
    let mut breakdown = LossBreakdown {
        num_positives: positives,
        num_negatives: terms.iter().map(|t| t.negatives).sum(),
        ..Default::default()
    };
    let mut dloc = Vec::with_capacity(n * p * 4);
    let mut dconf = Vec::with_capacity(n * p * k);
    let scale = if positives > 0 { 1.0 / positives as f64 } else { 0.0 };
    for t in &terms {
        breakdown.loc += t.loc * scale;
        breakdown.conf += t.conf * scale;
        dloc.extend(t.dloc.iter().map(|d| d * scale));
        dconf.extend(t.dconf.iter().map(|d| d * scale));
    }
    let loss = g.precomputed_scalar(
        breakdown.total(),
        vec![
            (head.loc, Tensor::from_parts(vec![n, p, 4], dloc)),
            (head.conf, Tensor::from_parts(vec![n, p, k], dconf)),
        ],
    )?;
    Ok(MultiboxLoss { loss, breakdown })
}
