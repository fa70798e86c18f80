use std::collections::BTreeMap;

use super::{generate_priors, DetectorConfig, ExtraKind, PriorBox};
use crate::blocks::{DfeBlock, DfeState, Fam, FamConfig, FamVariant, SfeBlock, SfeConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Forward, Init, Mode, ParamBuilder, ParamId, ParamKind, ParamStore};
use crate::tensor::{ConvSpec, Graph, Tensor, Var};

/// Head outputs on a graph: `loc` is `(batch, priors, 4)` and `conf` is
/// `(batch, priors, classes)` logits.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub loc: Var,
    pub conf: Var,
}

/// Concrete head outputs from an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub loc: Tensor,
    pub conf: Tensor,
}

#[derive(Clone, Debug)]
enum Extra {
    Plain { reduce: ConvBnRelu, conv: ConvBnRelu },
    Dual(DfeBlock),
}

#[derive(Clone, Debug)]
struct Head {
    loc: Conv2d,
    conf: Conv2d,
    boxes: usize,
}

/// The assembled detection network. Parameters live in a separate
/// [`ParamStore`] so the same structure can be evaluated against several
/// parameter sets.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    backbone: Vec<ConvBnRelu>,
    fam: Option<(Fam, Fam)>,
    sfe: Option<(SfeBlock, SfeBlock)>,
    l2norm: Option<ParamId>,
    extras: Vec<Extra>,
    heads: Vec<Head>,
    priors: Vec<PriorBox>,
}

/// Builds the detector and its initial parameters. Every parameter draws
/// from its own named random stream, so switching a component on or off
/// leaves the initial values of all other parameters unchanged.
pub fn build_detector(config: &DetectorConfig, seed: u64) -> Result<(Detector, ParamStore)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, seed);

    let mut backbone = Vec::with_capacity(config.backbone.len());
    let mut width = config.in_channels;
    for (i, l) in config.backbone.iter().enumerate() {
        backbone.push(ConvBnRelu::new(&mut pb.scope("backbone"), &i.to_string(), width, l.out, l.kernel, l.spec())?);
        width = l.out;
    }
    let (c8, c16) = (config.stride8_width(), config.stride16_width());
    let e8 = config.anchors[0].extent;

    let fam = if config.use_fam {
        let mut s = pb.scope("fam");
        let cfg = |variant, out_channels| FamConfig {
            variant,
            shallow_channels: c8,
            deep_channels: c16,
            lateral: config.fam_lateral,
            out_channels,
            shallow_extent: (e8, e8),
        };
        Some((Fam::new(&mut s, "v1", cfg(FamVariant::V1, c8))?, Fam::new(&mut s, "v2", cfg(FamVariant::V2, c16))?))
    } else {
        None
    };
    let sfe = if config.use_sfe {
        let mut s = pb.scope("sfe");
        let o = config.sfe;
        let cfg = |channels| SfeConfig { channels, bottleneck_ratio: o.bottleneck_ratio, se_reduction: o.se_reduction };
        Some((SfeBlock::new(&mut s, "stride8", cfg(c8))?, SfeBlock::new(&mut s, "stride16", cfg(c16))?))
    } else {
        None
    };
    let l2norm = if !config.use_fam && !config.use_sfe {
        Some(pb.param("l2norm.scale", vec![c8], Init::Const(config.l2norm_scale), ParamKind::Trainable)?)
    } else {
        None
    };

    let mut extras = Vec::with_capacity(config.extras.len());
    let mut plans = config.dfe_plans().into_iter();
    let mut width = c16;
    for (i, e) in config.extras.iter().enumerate() {
        let mut s = pb.scope("extras");
        let mut s = s.scope(&i.to_string());
        let extra = match (e.kind, config.use_dfe) {
            (ExtraKind::Down, true) => {
                let plan = plans.next().expect("one plan per down extra");
                Extra::Dual(DfeBlock::new(&mut s, "dual", plan)?)
            }
            (kind, _) => {
                let mid = (e.width / 2).max(1);
                let spec = match kind {
                    ExtraKind::Down => ConvSpec::new(2, 1, 1),
                    ExtraKind::Valid => ConvSpec::new(1, 0, 1),
                };
                let mut p = s.scope("plain");
                Extra::Plain {
                    reduce: ConvBnRelu::new(&mut p, "reduce", width, mid, 1, ConvSpec::unit())?,
                    conv: ConvBnRelu::new(&mut p, "conv", mid, e.width, 3, spec)?,
                }
            }
        };
        extras.push(extra);
        width = e.width;
    }

    let mut widths = vec![c8, c16];
    widths.extend(config.extras.iter().map(|e| e.width));
    let head_spec = ConvSpec::new(1, config.head.padding, 1);
    let mut heads = Vec::with_capacity(widths.len());
    for (k, (a, &w)) in config.anchors.iter().zip(&widths).enumerate() {
        let boxes = a.boxes_per_cell();
        let mut s = pb.scope("heads");
        let mut s = s.scope(&k.to_string());
        let kernel = config.head.kernel;
        heads.push(Head {
            loc: Conv2d::new(&mut s, "loc", w, boxes * 4, kernel, head_spec)?,
            conf: Conv2d::new(&mut s, "conf", w, boxes * config.num_classes, kernel, head_spec)?,
            boxes,
        });
    }

    let priors = generate_priors(config)?;
    let detector = Detector { config: config.clone(), backbone, fam, sfe, l2norm, extras, heads, priors };
    Ok((detector, store))
}

impl Detector {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn priors(&self) -> &[PriorBox] {
        &self.priors
    }

    pub fn num_priors(&self) -> usize {
        self.priors.len()
    }

    /// Feature maps read by the prediction heads, one per scale.
    pub fn feature_maps(&self, f: &mut Forward<'_, '_>, images: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (_, c, h, w) = f.graph.value(images).dims4("detector")?;
        if c != cfg.in_channels || h != cfg.input_size || w != cfg.input_size {
            return Err(Error::shape(
                "detector",
                format!(
                    "images are {c}x{h}x{w}, expected {}x{s}x{s}",
                    cfg.in_channels,
                    s = cfg.input_size
                ),
            ));
        }
        let mut x = images;
        let mut conv4 = x;
        for (i, layer) in self.backbone.iter().enumerate() {
            x = layer.forward(f, x)?;
            if i == cfg.tap {
                conv4 = x;
            }
        }
        let fc7 = x;

        let (mut s8, mut s16) = (conv4, fc7);
        if let Some((v1, v2)) = &self.fam {
            s8 = v1.forward(f, conv4, fc7)?;
            s16 = v2.forward(f, conv4, fc7)?;
        }
        if let Some((a, b)) = &self.sfe {
            s8 = a.forward(f, s8)?;
            s16 = b.forward(f, s16)?;
        }
        if let Some(id) = self.l2norm {
            let scale = f.param(id);
            s8 = f.graph.l2_normalize_channels(s8, scale)?;
        }

        let mut maps = vec![s8, s16];
        let mut cur = fc7;
        let mut state: Option<DfeState> = None;
        for extra in &self.extras {
            match extra {
                Extra::Plain { reduce, conv } => {
                    let r = reduce.forward(f, cur)?;
                    cur = conv.forward(f, r)?;
                    state = None;
                }
                Extra::Dual(block) => {
                    let input = state.unwrap_or(DfeState { residual: cur, dense: None });
                    let out = block.forward(f, input)?;
                    cur = out.merged(f)?;
                    state = Some(out);
                }
            }
            maps.push(cur);
        }
        Ok(maps)
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, images: Var) -> Result<HeadOutput> {
        let maps = self.feature_maps(f, images)?;
        let mut loc = Vec::with_capacity(maps.len());
        let mut conf = Vec::with_capacity(maps.len());
        for (head, &m) in self.heads.iter().zip(&maps) {
            loc.push((head.loc.forward(f, m)?, head.boxes));
            conf.push((head.conf.forward(f, m)?, head.boxes));
        }
        Ok(HeadOutput {
            loc: f.graph.gather_priors(&loc, 4)?,
            conf: f.graph.gather_priors(&conf, self.config.num_classes)?,
        })
    }

    /// Inference-mode forward pass (running batch-norm statistics).
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<Predictions> {
        let mut g = Graph::new();
        let mut f = Forward::new(&mut g, store, Mode::Eval);
        let x = f.graph.constant(images.clone());
        let out = self.forward(&mut f, x)?;
        Ok(Predictions { loc: g.value(out.loc).clone(), conf: g.value(out.conf).clone() })
    }

    /// Trainable parameter counts grouped by top-level component.
    pub fn param_counts(store: &ParamStore) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for id in store.trainable() {
            let name = store.name(id);
            let group = name.split('.').next().unwrap_or(name).to_string();
            *counts.entry(group).or_insert(0) += store.get(id).len();
        }
        counts
    }
}
