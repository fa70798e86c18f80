//! Independent oracles shared by the test targets.

#![allow(dead_code)]

use faenet::detector::PriorBox;
use faenet::eval::Detection;
use faenet::match_loss::{iou, BBox, GroundTruth};
use faenet::tensor::ConvSpec;
use faenet::Tensor;
use serde::Deserialize;

/// Direct 7-nested-loop cross-correlation.
pub fn naive_conv(x: &Tensor, k: &Tensor, b: Option<&Tensor>, s: ConvSpec) -> Tensor {
    let [n, cin, h, w] = x.shape()[..] else { panic!() };
    let [cout, _, kh, kw] = k.shape()[..] else { panic!() };
    let oh = (h + 2 * s.padding - s.dilation * (kh - 1) - 1) / s.stride + 1;
    let ow = (w + 2 * s.padding - s.dilation * (kw - 1) - 1) / s.stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at4(bi, ci, iy as usize, ix as usize) * k.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Exhaustive NMS: a box survives iff no higher-ranked surviving box
/// overlaps it; evaluated by fixed-point iteration over the full set.
pub fn reference_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let rank = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut alive = vec![true; n];
    loop {
        let mut next = vec![true; n];
        for i in 0..n {
            for j in 0..n {
                if j != i && alive[j] && rank(j, i) && iou(&boxes[i], &boxes[j]).unwrap() > thr {
                    next[i] = false;
                }
            }
        }
        if next == alive {
            break;
        }
        alive = next;
    }
    let mut kept: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    kept
}

/// Straightforward reference: sort all (iou, prior, gt) triples once and
/// walk them for the one-to-one claims, then apply the threshold rule.
pub fn reference_match(priors: &[PriorBox], gts: &[GroundTruth], threshold: f64) -> Vec<Option<usize>> {
    let ov = |i: usize, j: usize| {
        let pb = BBox::from(&priors[i]);
        let g = gts[j].bbox;
        let iw = (pb.xmax.min(g.xmax) - pb.xmin.max(g.xmin)).max(0.0);
        let ih = (pb.ymax.min(g.ymax) - pb.ymin.max(g.ymin)).max(0.0);
        let inter = iw * ih;
        inter / (pb.area() + g.area() - inter)
    };
    let mut triples = Vec::new();
    for i in 0..priors.len() {
        for j in 0..gts.len() {
            triples.push((ov(i, j), i, j));
        }
    }
    triples.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; priors.len()];
    let mut gt_used = vec![false; gts.len()];
    for (_, i, j) in triples {
        if out[i].is_none() && !gt_used[j] {
            out[i] = Some(j);
            gt_used[j] = true;
        }
    }
    for i in 0..priors.len() {
        if out[i].is_some() || gts.is_empty() {
            continue;
        }
        let (mut best, mut bj) = (f64::NEG_INFINITY, 0);
        for j in 0..gts.len() {
            if ov(i, j) > best {
                best = ov(i, j);
                bj = j;
            }
        }
        if best > threshold {
            out[i] = Some(bj);
        }
    }
    out
}

// ---- golden mAP fixture ---------------------------------------------------

#[derive(Deserialize)]
pub struct Fixture {
    pub canonical_size: f64,
    pub num_classes: usize,
    pub images: Vec<FixtureImage>,
    pub expected: Expected,
}

#[derive(Deserialize)]
pub struct FixtureImage {
    pub gts: Vec<GroundTruth>,
    pub detections: Vec<Detection>,
}

#[derive(Deserialize)]
pub struct Expected {
    pub empty: bool,
    pub map: f64,
    pub map_eleven_point: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub bucket_counts: serde_json::Value,
    pub classes: Vec<serde_json::Value>,
}

pub fn golden_fixture() -> Fixture {
    serde_json::from_str(include_str!("../fixtures/eval_golden.json")).unwrap()
}

pub mod blocks {
    //! Plain-kernel re-compositions of the blocks, with batch statistics.

    use faenet::blocks::{DfeBlock, Fam, SaBlock, SeBlock, SfeBlock};
    use faenet::nn::{BatchNorm2d, BnReluConv, Conv2d, ConvBnRelu, Linear, ParamStore};
    use faenet::tensor::ops;
    use faenet::Tensor;

    pub fn bn_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape()[..] else { panic!() };
        let mut out = x.clone();
        for ch in 0..c {
            let mut vals = Vec::new();
            for b in 0..n {
                for i in 0..h * w {
                    vals.push(x.data()[(b * c + ch) * h * w + i]);
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            for b in 0..n {
                for i in 0..h * w {
                    let idx = (b * c + ch) * h * w + i;
                    out.data_mut()[idx] = gamma.data()[ch] * (x.data()[idx] - m) / (v + 1e-5).sqrt() + beta.data()[ch];
                }
            }
        }
        out
    }

    pub fn conv(s: &ParamStore, c: &Conv2d, x: &Tensor) -> Tensor {
        ops::conv2d(x, s.get(c.weight), c.bias.map(|b| s.get(b)), c.spec).unwrap()
    }

    pub fn bn(s: &ParamStore, b: &BatchNorm2d, x: &Tensor) -> Tensor {
        bn_train(x, s.get(b.gamma), s.get(b.beta))
    }

    pub fn cbr(s: &ParamStore, l: &ConvBnRelu, x: &Tensor) -> Tensor {
        ops::relu(&bn(s, &l.bn, &conv(s, &l.conv, x)))
    }

    pub fn brc(s: &ParamStore, l: &BnReluConv, x: &Tensor) -> Tensor {
        conv(s, &l.conv, &ops::relu(&bn(s, &l.bn, x)))
    }

    pub fn linear(s: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = s.get(l.weight);
        (0..l.out_dim)
            .map(|j| s.get(l.bias).data()[j] + (0..l.in_dim).map(|i| x[i] * w.data()[i * l.out_dim + j]).sum::<f64>())
            .collect()
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// U = ReLU(BN(Conv1x1(X))); S = σ(W·vec(U) + b); Z[c,h,w] = Y[c,h,w]·S[h,w].
    pub fn sa(s: &ParamStore, sa: &SaBlock, x: &Tensor, y: &Tensor) -> Tensor {
        let [n, c, h, w] = y.shape()[..] else { panic!() };
        let u = cbr(s, &sa.collapse, x);
        let mut z = y.clone();
        for b in 0..n {
            let ub = &u.data()[b * h * w..(b + 1) * h * w];
            let gate: Vec<f64> = linear(s, &sa.fc, ub).into_iter().map(sigmoid).collect();
            for ch in 0..c {
                for p in 0..h * w {
                    z.data_mut()[(b * c + ch) * h * w + p] = y.data()[(b * c + ch) * h * w + p] * gate[p];
                }
            }
        }
        z
    }

    pub fn se(s: &ParamStore, se: &SeBlock, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape()[..] else { panic!() };
        let mut out = x.clone();
        for b in 0..n {
            let pooled: Vec<f64> = (0..c)
                .map(|ch| x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                .collect();
            let hid: Vec<f64> = linear(s, &se.squeeze, &pooled).into_iter().map(|v| v.max(0.0)).collect();
            let scale: Vec<f64> = linear(s, &se.excite, &hid).into_iter().map(sigmoid).collect();
            for ch in 0..c {
                for p in 0..h * w {
                    out.data_mut()[(b * c + ch) * h * w + p] *= scale[ch];
                }
            }
        }
        out
    }

    pub fn sfe(s: &ParamStore, blk: &SfeBlock, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for unit in [&blk.first, &blk.second] {
            let mut r = brc(s, &unit.expand, &brc(s, &unit.middle, &brc(s, &unit.reduce, &cur)));
            if let Some(se_blk) = &unit.se {
                r = se(s, se_blk, &r);
            }
            cur = ops::add(&cur, &r).unwrap();
        }
        cur
    }

    fn channels(x: &Tensor, start: usize, len: usize) -> Tensor {
        let [n, c, h, w] = x.shape()[..] else { panic!() };
        let mut out = Vec::new();
        for b in 0..n {
            out.extend_from_slice(&x.data()[(b * c + start) * h * w..(b * c + start + len) * h * w]);
        }
        Tensor::new(vec![n, len, h, w], out).unwrap()
    }

    pub fn dfe(s: &ParamStore, blk: &DfeBlock, res: &Tensor, dense: Option<&Tensor>) -> (Tensor, Tensor) {
        let cfg = blk.config;
        let input = match dense {
            Some(d) => ops::concat_channels(res, d).unwrap(),
            None => res.clone(),
        };
        let b = brc(s, &blk.expand, &brc(s, &blk.conv, &brc(s, &blk.reduce, &input)));
        let (pr, pd) = match &blk.projection {
            Some(p) => {
                let out = brc(s, p, &input);
                let pd = (cfg.proj_dense > 0).then(|| channels(&out, cfg.residual, cfg.proj_dense));
                (channels(&out, 0, cfg.residual), pd)
            }
            None => (res.clone(), dense.cloned()),
        };
        let r = ops::add(&pr, &channels(&b, 0, cfg.residual)).unwrap();
        let g = channels(&b, cfg.residual, cfg.growth);
        let d = match pd {
            Some(pd) => ops::concat_channels(&pd, &g).unwrap(),
            None => g,
        };
        (r, d)
    }

    pub fn fam(s: &ParamStore, fam: &Fam, shallow: &Tensor, deep: &Tensor) -> Tensor {
        let a = cbr(s, &fam.lateral_shallow, shallow);
        let b = cbr(s, &fam.lateral_deep, deep);
        let (x, y) = match &fam.downsample {
            None => (ops::upsample_nearest2x(&b).unwrap(), a),
            Some(d) => (b, cbr(s, d, &a)),
        };
        let z = sa(s, &fam.attention, &x, &y);
        cbr(s, &fam.fuse, &ops::concat_channels(&z, &x).unwrap())
    }
}
