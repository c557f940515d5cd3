//! Named finite-difference gradient suites over the ops, the two blocks and
//! a small end-to-end model. Shared by the test suite and the command line.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Region, Var};
use crate::dse::DseBlock;
use crate::error::{Error, Result};
use crate::gradcheck::{check_graph_gradients, check_param_gradients, GradcheckOptions, GradcheckReport};
use crate::lasea::{LaseaBlock, PoolDraw, SampleMode};
use crate::network::train::{supervision_loss, SOFT_IOU_EPS};
use crate::network::{Model, ModelConfig};
use crate::ops::{Activation, ConvGeometry};
use crate::params::ParamStore;
use crate::ssm::ScanDirection;
use crate::tensor::{Shape, Tensor};

/// Tolerance for single ops and the two blocks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end model, whose depth compounds rounding.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Central-difference step for the end-to-end model. Group norms over
/// nearly constant groups make the loss locally stiff, so the default step
/// measures curvature rather than the slope.
pub const MODEL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Dse,
    Lasea,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Dse, Scope::Lasea, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Dse => "dse",
            Scope::Lasea => "lasea",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid("gradcheck scope", format!("unknown scope {s:?}; expected ops, dse, lasea or model")))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradcheckReport,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<SuiteResult>> {
    match scope {
        Scope::Ops => op_suites(seed),
        Scope::Dse => dse_suites(seed),
        Scope::Lasea => lasea_suites(seed),
        Scope::Model => model_suites(seed),
    }
}

/// Random values whose magnitude stays in [0.1, 1], away from the kinks of
/// relu and max-pooling ties.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Contracts a tensor output with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn contract(g: &mut Graph<'_>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph<'static>, &[Var]) -> Result<Var>>;

fn op_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_shape = Shape::new(2, 4, 6, 6);
    let mut cases: Vec<(String, Vec<Tensor>, Build)> = Vec::new();
    let weights = |shape: Shape, rng: &mut ChaCha8Rng| Tensor::uniform(shape, -1.0, 1.0, rng);

    for (label, geom, cin, cout, k) in [
        ("conv2d 3x3", ConvGeometry::same(3, 1), 4, 3, 3),
        ("conv2d dilated", ConvGeometry::same(3, 2), 4, 2, 3),
        ("conv2d grouped", ConvGeometry::same(3, 1).with_groups(4), 4, 4, 3),
        ("conv2d stride 2", ConvGeometry { stride: 2, ..Default::default() }, 4, 3, 2),
        ("conv2d 1x1", ConvGeometry::default(), 4, 5, 1),
    ] {
        let x = away_from_zero(x_shape, &mut rng);
        let w = weights(Shape::new(cout, cin / geom.groups, k, k), &mut rng);
        let b = weights(Shape::new(1, cout, 1, 1), &mut rng);
        let out = crate::ops::conv2d_raw(&x, &w, Some(b.data()), geom)?.shape();
        let r = weights(out, &mut rng);
        cases.push((
            label.into(),
            vec![x, w, b],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), geom)?;
                contract(g, y, &r)
            }),
        ));
    }

    for (label, act) in [
        ("relu", Activation::Relu),
        ("silu", Activation::Silu),
        ("sigmoid", Activation::Sigmoid),
        ("softplus", Activation::Softplus),
    ] {
        let r = weights(x_shape, &mut rng);
        cases.push((
            label.into(),
            vec![away_from_zero(x_shape, &mut rng)],
            Box::new(move |g, v| {
                let y = g.activate(v[0], act);
                contract(g, y, &r)
            }),
        ));
    }

    for (label, rhs) in [
        ("add", x_shape),
        ("add channel broadcast", Shape::new(1, 4, 1, 1)),
        ("mul", x_shape),
        ("mul channel broadcast", Shape::new(1, 4, 1, 1)),
        ("mul per-sample channel broadcast", Shape::new(2, 4, 1, 1)),
    ] {
        let is_mul = label.starts_with("mul");
        let r = weights(x_shape, &mut rng);
        cases.push((
            label.into(),
            vec![weights(x_shape, &mut rng), weights(rhs, &mut rng)],
            Box::new(move |g, v| {
                let y = if is_mul { g.mul(v[0], v[1])? } else { g.add(v[0], v[1])? };
                contract(g, y, &r)
            }),
        ));
    }

    {
        let c = Shape::new(1, 4, 1, 1);
        let r = weights(x_shape, &mut rng);
        cases.push((
            "layer_norm".into(),
            vec![weights(x_shape, &mut rng), weights(c, &mut rng), weights(c, &mut rng)],
            Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                contract(g, y, &r)
            }),
        ));
        for groups in [1, 2] {
            let r = weights(x_shape, &mut rng);
            cases.push((
                format!("group_norm groups {groups}"),
                vec![weights(x_shape, &mut rng), weights(c, &mut rng), weights(c, &mut rng)],
                Box::new(move |g, v| {
                    let y = g.group_norm(v[0], groups, v[1], v[2])?;
                    contract(g, y, &r)
                }),
            ));
        }
    }

    let pooled = Shape::new(2, 4, 3, 3);
    let r = weights(pooled, &mut rng);
    cases.push((
        "max_pool2".into(),
        vec![weights(x_shape, &mut rng)],
        Box::new(move |g, v| {
            let y = g.max_pool2(v[0])?;
            contract(g, y, &r)
        }),
    ));
    let r = weights(Shape::new(2, 4, 1, 1), &mut rng);
    cases.push((
        "global_max_pool".into(),
        vec![weights(x_shape, &mut rng)],
        Box::new(move |g, v| {
            let y = g.global_max_pool(v[0]);
            contract(g, y, &r)
        }),
    ));
    for k in [1, 2, 3] {
        let r = weights(Shape::new(2, 4, k, k), &mut rng);
        cases.push((
            format!("adaptive_avg_pool {k}"),
            vec![weights(x_shape, &mut rng)],
            Box::new(move |g, v| {
                let y = g.adaptive_avg_pool(v[0], k)?;
                contract(g, y, &r)
            }),
        ));
    }
    {
        let regions = [
            Region { rows: (0, 3), cols: (2, 6) },
            Region { rows: (4, 6), cols: (0, 2) },
        ];
        let r = weights(Shape::new(2, 4, 1, 1), &mut rng);
        cases.push((
            "region_mean".into(),
            vec![weights(x_shape, &mut rng)],
            Box::new(move |g, v| {
                let y = g.region_mean(v[0], &regions)?;
                contract(g, y, &r)
            }),
        ));
    }
    let r = weights(Shape::new(2, 4, 12, 12), &mut rng);
    cases.push((
        "upsample".into(),
        vec![weights(x_shape, &mut rng)],
        Box::new(move |g, v| {
            let y = g.upsample(v[0], 2)?;
            contract(g, y, &r)
        }),
    ));
    let r = weights(x_shape, &mut rng);
    cases.push((
        "channel_shuffle".into(),
        vec![weights(x_shape, &mut rng)],
        Box::new(move |g, v| {
            let y = g.channel_shuffle(v[0], 2)?;
            contract(g, y, &r)
        }),
    ));
    let r = weights(Shape::new(2, 6, 6, 6), &mut rng);
    cases.push((
        "concat + slice".into(),
        vec![weights(x_shape, &mut rng), weights(Shape::new(2, 2, 6, 6), &mut rng)],
        Box::new(move |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            let a = g.slice_channels(y, 1, 5)?;
            let b = g.slice_channels(y, 0, 1)?;
            let y = g.concat(&[b, a])?;
            contract(g, y, &r)
        }),
    ));
    let r = weights(x_shape, &mut rng);
    cases.push((
        "neg_exp".into(),
        vec![weights(x_shape, &mut rng)],
        Box::new(move |g, v| {
            let y = g.neg_exp(v[0]);
            contract(g, y, &r)
        }),
    ));

    for direction in ScanDirection::ALL {
        let (d, s) = (3, 4);
        let sh = Shape::new(2, d, 3, 4);
        let ss = Shape::new(2, s, 3, 4);
        let r = weights(sh, &mut rng);
        let inputs = vec![
            weights(sh, &mut rng),
            weights(sh, &mut rng),
            Tensor::uniform(Shape::new(d, s, 1, 1), -0.5, 0.5, &mut rng),
            weights(ss, &mut rng),
            weights(ss, &mut rng),
            weights(Shape::new(1, d, 1, 1), &mut rng),
        ];
        cases.push((
            format!("scan {}", direction.label()),
            inputs,
            Box::new(move |g, v| {
                let delta = g.activate(v[1], Activation::Softplus);
                let a = g.neg_exp(v[2]);
                let y = g.scan(direction, v[0], delta, a, v[3], v[4], v[5])?;
                contract(g, y, &r)
            }),
        ));
    }

    {
        let target = Tensor::from_fn(Shape::new(2, 1, 5, 5), |n, _, h, w| ((h + w + n) % 3 == 0) as u8 as f64);
        cases.push((
            "soft_iou_loss".into(),
            vec![weights(target.shape(), &mut rng)],
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0]);
                g.soft_iou_loss(p, &target, SOFT_IOU_EPS)
            }),
        ));
    }
    cases.push((
        "weighted_sum".into(),
        vec![weights(x_shape, &mut rng), weights(x_shape, &mut rng)],
        Box::new(|g, v| {
            let a = g.sum(v[0]);
            let b = g.mul(v[1], v[1])?;
            let b = g.sum(b);
            g.weighted_sum(&[(a, 0.3), (b, -1.7)])
        }),
    ));

    let opts = GradcheckOptions::default().seed(seed);
    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            Ok(SuiteResult {
                name,
                report: check_graph_gradients(&inputs, build, &opts)?,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

fn block_input(seed: u64, c: usize, h: usize, w: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::uniform(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng);
    let r = Tensor::uniform(x.shape(), -1.0, 1.0, &mut rng);
    (x, r)
}

fn dse_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = DseBlock::new(&mut store, &mut rng, "dse", 8, 4)?;
    let (x, r) = block_input(seed, 8, 6, 6);
    let params = check_param_gradients(
        &store,
        &[],
        |g| {
            let xv = g.input(x.clone());
            let y = block.forward(g, xv)?;
            contract(g, y, &r)
        },
        &GradcheckOptions::default().probes(6).seed(seed),
    )?;
    let input = input_gradients(&store, &x, |g, xv| {
        let y = block.forward(g, xv)?;
        contract(g, y, &r)
    })?;
    Ok(vec![
        SuiteResult {
            name: "dse parameters".into(),
            report: params,
            tolerance: OP_TOLERANCE,
        },
        SuiteResult {
            name: "dse input".into(),
            report: input,
            tolerance: OP_TOLERANCE,
        },
    ])
}

/// Gradient with respect to an input tensor of a graph that also reads
/// stored parameters.
fn input_gradients(
    store: &ParamStore,
    x: &Tensor,
    build: impl Fn(&mut Graph<'_>, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let mut probe = store.clone();
    let id = probe.add("__probe_input", x.clone());
    check_param_gradients(
        &probe,
        &[id],
        |g| {
            let xv = g.param(id);
            build(g, xv)
        },
        &GradcheckOptions::default().probes(48),
    )
}

fn lasea_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = LaseaBlock::new(&mut store, &mut rng, "lasea", 8)?;
    let (x, r) = block_input(seed, 8, 6, 6);
    let mut out = Vec::new();
    let mut modes = vec![("inference", SampleMode::Inference)];
    for k in [3, 2] {
        let s = (0..).find(|&s| PoolDraw::from_seed(s ^ seed).k == k).map(|s| s ^ seed).expect("every size is drawn");
        modes.push((if k == 3 { "train 3x3 cell" } else { "train 2x2 cell" }, SampleMode::Train(s)));
    }
    for (label, mode) in modes {
        let params = check_param_gradients(
            &store,
            &[],
            |g| {
                let xv = g.input(x.clone());
                let y = block.forward(g, xv, mode)?;
                contract(g, y, &r)
            },
            &GradcheckOptions::default().probes(6).seed(seed),
        )?;
        let input = input_gradients(&store, &x, |g, xv| {
            let y = block.forward(g, xv, mode)?;
            contract(g, y, &r)
        })?;
        out.push(SuiteResult {
            name: format!("lasea {label} parameters"),
            report: params,
            tolerance: OP_TOLERANCE,
        });
        out.push(SuiteResult {
            name: format!("lasea {label} input"),
            report: input,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(out)
}

/// Smallest model exercising every component: C=4, one DSE block per
/// stage, state size 4, 32x32 input. The bottleneck is 2x2, below the
/// train-mode sampling floor, so the check runs in inference mode.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        dse_depths: [1, 1, 1, 1],
        state_dim: 4,
        input_height: 32,
        input_width: 32,
        ..ModelConfig::default()
    }
}

fn model_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let config = gradcheck_model_config();
    let model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let image = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut rng);
    let mask = Tensor::from_fn(Shape::new(1, 1, 32, 32), |_, _, h, w| {
        ((10..14).contains(&h) && (20..23).contains(&w)) as u8 as f64
    });
    let report = check_param_gradients(
        &model.store,
        &[],
        |g| {
            let x = g.input(image.clone());
            let maps = model.forward(g, x, SampleMode::Inference)?;
            supervision_loss(g, &maps, &mask, &config.loss_weights)
        },
        &GradcheckOptions {
            eps: MODEL_EPS,
            ..GradcheckOptions::default().probes(2).seed(seed)
        },
    )?;
    Ok(vec![SuiteResult {
        name: "model parameters (C=4, 32x32)".into(),
        report,
        tolerance: MODEL_TOLERANCE,
    }])
}
