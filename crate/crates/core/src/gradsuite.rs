//! The full finite-difference gradient suite: every primitive op, every
//! block, the multibox loss and the end-to-end mini detector.

use rand::Rng as _;
use serde::Serialize;

use crate::blocks::{
    grad_check_module, DfeBlock, DfeConfig, DfeState, Fam, FamConfig, FamVariant, SaBlock, SeBlock, SfeBlock, SfeConfig,
};
use crate::detector::{build_detector, DetectorConfig, HeadOutput};
use crate::error::Result;
use crate::match_loss::{multibox_loss, MatchResult};
use crate::nn::{ParamBuilder, ParamStore};
use crate::rng::substream;
use crate::tensor::gradcheck::{grad_check, grad_check_random, probe_loss, GradCheckOptions, GradCheckReport};
use crate::tensor::{BnMode, ConvSpec, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Bound for ops, blocks and the loss.
    pub tolerance: f64,
    /// Bound for the end-to-end detector.
    pub end_to_end_tolerance: f64,
    /// Elements probed per input of ops, blocks and the loss.
    pub max_elements: usize,
    /// Elements probed per parameter of the end-to-end detector.
    pub end_to_end_elements: usize,
    pub seed: u64,
    /// Test hook: shift the analytic gradient of the named check.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            end_to_end_tolerance: 1e-3,
            max_elements: 16,
            end_to_end_elements: 3,
            seed: 17,
            corrupt: None,
        }
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub group: &'static str,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Input with the largest error.
    pub worst_input: String,
    pub probes: usize,
    /// Probes resolved from one side of a kink.
    pub one_sided: usize,
}

impl SuiteEntry {
    fn from_report(name: &str, group: &'static str, r: &GradCheckReport) -> Self {
        let worst = r.worst();
        Self {
            name: name.to_string(),
            group,
            tolerance: r.tolerance,
            max_rel_error: worst.map_or(0.0, |w| w.max_rel_error),
            passed: r.passed(),
            worst_input: worst.map_or_else(String::new, |w| w.name.clone()),
            probes: r.inputs.iter().map(|i| i.checked).sum(),
            one_sided: r.inputs.iter().map(|i| i.one_sided).sum(),
        }
    }
}

/// Every check name the suite runs, in order.
pub fn check_names() -> Vec<&'static str> {
    let mut names: Vec<_> = op_cases().into_iter().map(|(n, _, _)| n).collect();
    names.extend(["sa", "se", "sfe", "dfe", "fam_v1", "fam_v2", "multibox_loss", "mini_detector"]);
    names
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store.trainable().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let gamma = store.name(id).ends_with("gamma");
        let t = store.get_mut(id);
        let noise = Tensor::randn(t.shape().to_vec(), 0.5, &mut substream(seed, "gradsuite-params", &[i as u64]));
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = if gamma { 1.0 + n } else { *n };
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut substream(seed, "gradsuite-inputs", &[]))
}

type OpBuild = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, OpBuild)> {
    fn probe(g: &mut Graph, y: Var) -> Result<Var> {
        probe_loss(g, y, 1)
    }
    vec![
        ("conv2d", vec![("x", vec![1, 2, 6, 6]), ("w", vec![3, 2, 3, 3]), ("b", vec![3])], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 1))?;
            probe(g, y)
        }),
        ("conv2d_strided", vec![("x", vec![2, 2, 7, 7]), ("w", vec![3, 2, 3, 3])], |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::new(2, 1, 1))?;
            probe(g, y)
        }),
        ("conv2d_dilated", vec![("x", vec![1, 2, 7, 7]), ("w", vec![3, 2, 3, 3]), ("b", vec![3])], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 2, 2))?;
            probe(g, y)
        }),
        ("batch_norm_train", vec![("x", vec![2, 3, 4, 4]), ("gamma", vec![3]), ("beta", vec![3])], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?;
            probe(g, y)
        }),
        ("batch_norm_infer", vec![("x", vec![2, 3, 4, 4]), ("gamma", vec![3]), ("beta", vec![3])], |g, v| {
            let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Infer { mean: &mean, var: &var, eps: 1e-5 })?;
            probe(g, y)
        }),
        ("relu", vec![("x", vec![1, 2, 5, 5])], |g, v| {
            let y = g.relu(v[0]);
            probe(g, y)
        }),
        ("sigmoid", vec![("x", vec![1, 2, 5, 5])], |g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y)
        }),
        ("linear", vec![("x", vec![3, 6]), ("w", vec![6, 4]), ("b", vec![4])], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y)
        }),
        ("concat_channels", vec![("a", vec![1, 2, 3, 3]), ("b", vec![1, 3, 3, 3])], |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            probe(g, y)
        }),
        ("add", vec![("a", vec![1, 3, 3, 3]), ("b", vec![1, 3, 3, 3])], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y)
        }),
        ("mul_broadcast_spatial", vec![("y", vec![2, 3, 4, 4]), ("s", vec![2, 1, 4, 4])], |g, v| {
            let y = g.mul_broadcast_spatial(v[0], v[1])?;
            probe(g, y)
        }),
        ("mul_broadcast_channel", vec![("x", vec![2, 3, 4, 4]), ("s", vec![2, 3])], |g, v| {
            let y = g.mul_broadcast_channel(v[0], v[1])?;
            probe(g, y)
        }),
        ("global_avg_pool", vec![("x", vec![2, 3, 4, 4])], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            probe(g, y)
        }),
        ("upsample_nearest2x", vec![("x", vec![1, 2, 3, 3])], |g, v| {
            let y = g.upsample_nearest2x(v[0])?;
            probe(g, y)
        }),
        ("max_pool", vec![("x", vec![1, 2, 6, 6])], |g, v| {
            let y = g.max_pool(v[0], 2, 2)?;
            probe(g, y)
        }),
        ("slice_reshape_scale", vec![("x", vec![2, 5, 3, 3])], |g, v| {
            let s = g.slice_channels(v[0], 1, 3)?;
            let r = g.reshape(s, vec![2, 27])?;
            let y = g.scale(r, -1.5);
            probe(g, y)
        }),
        ("l2_normalize_channels", vec![("x", vec![2, 4, 3, 3]), ("scale", vec![4])], |g, v| {
            let y = g.l2_normalize_channels(v[0], v[1])?;
            probe(g, y)
        }),
        ("sum_dot_const", vec![("x", vec![2, 3, 2])], |g, v| {
            let w = Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i as f64 - 5.5) / 4.0).collect())?;
            let a = g.dot_const(v[0], &w)?;
            let s = g.sum(v[0]);
            g.add(a, s)
        }),
        ("gather_priors", vec![("a", vec![2, 8, 3, 3]), ("b", vec![2, 12, 2, 2])], |g, v| {
            let y = g.gather_priors(&[(v[0], 2), (v[1], 3)], 4)?;
            probe(g, y)
        }),
    ]
}

/// Runs the suite, reporting each check through `progress` as it completes.
pub fn run_suite(opts: &SuiteOptions, mut progress: impl FnMut(&SuiteEntry)) -> Result<Vec<SuiteEntry>> {
    let gc = |name: &str, tolerance: f64, max_elements: usize| GradCheckOptions {
        tolerance,
        max_elements,
        seed: opts.seed,
        analytic_offset: if opts.corrupt.as_deref() == Some(name) { 1.0 } else { 0.0 },
        ..Default::default()
    };
    let mut out = Vec::new();
    let mut push = |e: SuiteEntry, out: &mut Vec<SuiteEntry>| {
        progress(&e);
        out.push(e);
    };

    for (name, shapes, build) in op_cases() {
        let r = grad_check_random(&shapes, build, &gc(name, opts.tolerance, opts.max_elements))?;
        push(SuiteEntry::from_report(name, "op", &r), &mut out);
    }

    let seed = opts.seed;
    let block = |name: &str| gc(name, opts.tolerance, opts.max_elements);

    let mut store = ParamStore::new();
    let sa = SaBlock::new(&mut ParamBuilder::new(&mut store, seed), "sa", 4, 5, 5)?;
    randomize(&mut store, seed);
    let inputs = vec![("x".into(), randn(&[1, 4, 5, 5], seed + 1)), ("y".into(), randn(&[1, 4, 5, 5], seed + 2))];
    let r = grad_check_module(&store, inputs, |f, v| sa.forward(f, v[0], v[1]), &block("sa"))?;
    push(SuiteEntry::from_report("sa", "block", &r), &mut out);

    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut ParamBuilder::new(&mut store, seed), "se", 8, 4)?;
    randomize(&mut store, seed);
    let r = grad_check_module(&store, vec![("x".into(), randn(&[2, 8, 3, 3], seed + 3))], |f, v| se.forward(f, v[0]), &block("se"))?;
    push(SuiteEntry::from_report("se", "block", &r), &mut out);

    let mut store = ParamStore::new();
    let cfg = SfeConfig { se_reduction: 4, ..SfeConfig::new(8) };
    let sfe = SfeBlock::new(&mut ParamBuilder::new(&mut store, seed), "sfe", cfg)?;
    randomize(&mut store, seed);
    let r = grad_check_module(&store, vec![("x".into(), randn(&[1, 8, 6, 6], seed + 4))], |f, v| sfe.forward(f, v[0]), &block("sfe"))?;
    push(SuiteEntry::from_report("sfe", "block", &r), &mut out);

    let mut store = ParamStore::new();
    let cfg = DfeConfig { in_residual: 6, in_dense: 3, residual: 6, growth: 2, proj_dense: 2, mid: 4, stride: 2 };
    let dfe = DfeBlock::new(&mut ParamBuilder::new(&mut store, seed), "dfe", cfg)?;
    randomize(&mut store, seed);
    let inputs = vec![("residual".into(), randn(&[1, 6, 5, 5], seed + 5)), ("dense".into(), randn(&[1, 3, 5, 5], seed + 6))];
    let r = grad_check_module(
        &store,
        inputs,
        |f, v| {
            let out = dfe.forward(f, DfeState { residual: v[0], dense: Some(v[1]) })?;
            out.merged(f)
        },
        &block("dfe"),
    )?;
    push(SuiteEntry::from_report("dfe", "block", &r), &mut out);

    for (name, variant, out_channels) in [("fam_v1", FamVariant::V1, 8), ("fam_v2", FamVariant::V2, 12)] {
        let mut store = ParamStore::new();
        let cfg = FamConfig {
            variant,
            shallow_channels: 8,
            deep_channels: 8,
            lateral: 8,
            out_channels,
            shallow_extent: (8, 8),
        };
        let fam = Fam::new(&mut ParamBuilder::new(&mut store, seed), "fam", cfg)?;
        randomize(&mut store, seed);
        let inputs = vec![("shallow".into(), randn(&[1, 8, 8, 8], seed + 7)), ("deep".into(), randn(&[1, 8, 4, 4], seed + 8))];
        let r = grad_check_module(&store, inputs, |f, v| fam.forward(f, v[0], v[1]), &block(name))?;
        push(SuiteEntry::from_report(name, "block", &r), &mut out);
    }

    let (loc, conf, matches) = loss_case(seed, 2, 20, 3);
    let r = grad_check(
        &[("loc".to_string(), loc), ("conf".to_string(), conf)],
        |g, v| Ok(multibox_loss(g, &HeadOutput { loc: v[0], conf: v[1] }, &matches, 3)?.loss),
        &block("multibox_loss"),
    )?;
    push(SuiteEntry::from_report("multibox_loss", "loss", &r), &mut out);

    let cfg = DetectorConfig::mini(3);
    let (det, store) = build_detector(&cfg, seed)?;
    let images = Tensor::uniform(vec![2, cfg.in_channels, cfg.input_size, cfg.input_size], 0.0, 1.0, &mut substream(seed, "gradsuite-images", &[]));
    let r = grad_check_module(
        &store,
        vec![("images".into(), images)],
        |f, v| {
            let out = det.forward(f, v[0])?;
            let a = probe_loss(f.graph, out.loc, 1)?;
            let b = probe_loss(f.graph, out.conf, 2)?;
            f.graph.add(a, b)
        },
        &gc("mini_detector", opts.end_to_end_tolerance, opts.end_to_end_elements),
    )?;
    push(SuiteEntry::from_report("mini_detector", "end_to_end", &r), &mut out);
    Ok(out)
}

/// Random head outputs with random matches: roughly 20% positives.
fn loss_case(seed: u64, n: usize, p: usize, k: usize) -> (Tensor, Tensor, Vec<MatchResult>) {
    let mut rng = substream(seed, "gradsuite-loss", &[]);
    let loc = Tensor::randn(vec![n, p, 4], 1.0, &mut rng);
    let conf = Tensor::randn(vec![n, p, k], 2.0, &mut rng);
    let matches = (0..n)
        .map(|_| {
            let labels: Vec<usize> =
                (0..p).map(|_| if rng.random_bool(0.2) { rng.random_range(1..k) } else { 0 }).collect();
            let targets = labels
                .iter()
                .map(|&l| if l == 0 { [0.0; 4] } else { std::array::from_fn(|_| rng.random_range(-2.0..2.0)) })
                .collect();
            let matched_gt = labels.iter().map(|&l| (l != 0).then_some(0)).collect();
            MatchResult { labels, targets, matched_gt }
        })
        .collect();
    (loc, conf, matches)
}
