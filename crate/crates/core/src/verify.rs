//! Self-checks runnable from the command line. Each suite reports the worst
//! observed error of every check against its tolerance.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::{self, amsa, axial_oracle, msa, AmsaParams, AmsaVariant, AttnParams};
use crate::bench::{self, closed_form, Dims, GraphSpec};
use crate::codec::{self, CodecConfig, CodecParams, FeatureTaps};
use crate::dit::{
    decoder_block, dit_forward, encoder_block, video_image_interaction, DecoderBlockParams, DitConfig, DitParams,
    EncoderBlockParams, GridKind, TokenGrid,
};
use crate::error::{Error, Result};
use crate::losses::{self, IdentityInputs, LossParts, LossWeights};
use crate::numcore::{cost, grad_check, Rng, Tensor};
use crate::params::ParamSet;

pub const ORACLE_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
pub const COINCIDENCE_TOL: f64 = 1e-12;
pub const TOTAL_LOSS_TOL: f64 = 1e-12;
/// Central-difference step for every gradient check: near `u^(1/3)`, which
/// balances truncation against rounding noise for f64.
pub const GRAD_EPS: f64 = 1e-5;
pub const ORACLE_CASES: usize = 20;
pub const GRAD_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Amsa,
    Grads,
    Flops,
    Losses,
    Interaction,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Amsa, Suite::Grads, Suite::Flops, Suite::Losses, Suite::Interaction];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?} (expected amsa, grads, flops, losses, interaction)")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Amsa => "amsa",
            Suite::Grads => "grads",
            Suite::Flops => "flops",
            Suite::Losses => "losses",
            Suite::Interaction => "interaction",
        })
    }
}

/// `value` must be strictly below `tolerance`, except for exact checks
/// (`tolerance == 0`), which need `value == 0`.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Check {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }

    pub fn exact(name: impl Into<String>, value: f64) -> Check {
        Check {
            name: name.into(),
            value,
            tolerance: 0.0,
            passed: value == 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_value(&self) -> f64 {
        self.checks.iter().map(|c| c.value).fold(0.0, f64::max)
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Amsa => amsa_suite(seed)?,
        Suite::Grads => grads_suite()?,
        Suite::Flops => flops_suite()?,
        Suite::Losses => losses_suite(seed)?,
        Suite::Interaction => vec![Check::below(
            "cross vs self on duplicated halves",
            interaction_coincidence(seed)?,
            COINCIDENCE_TOL,
        )],
    };
    Ok(SuiteReport { suite, checks })
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("max_abs_diff", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn grid(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.uniform_tensor(shape, -1.0, 1.0)
}

/// Random small axial case: `T ≤ 3`, `H, W ≤ 6`, `D ≤ 16`, style frames 1 or T.
#[derive(Clone, Debug)]
pub struct AxialCase {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub params: AmsaParams,
}

impl AxialCase {
    pub fn random(rng: &mut Rng) -> Result<AxialCase> {
        let t = 1 + rng.below(3);
        let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
        let heads = 1 + rng.below(4);
        let d = heads * (1 + rng.below(16 / heads));
        let t_kv = if rng.below(2) == 0 { 1 } else { t };
        let q = grid(rng, &[t, h, w, d]);
        let k = grid(rng, &[t_kv, h, w, d]);
        let v = grid(rng, &[t_kv, h, w, d]);
        let mut params = AmsaParams::init(d, heads, rng)?;
        // non-trivial norm affines so the oracle exercises them
        for norm in [&mut params.height_norm, &mut params.width_norm] {
            norm.gamma = rng.uniform_tensor(&[d], 0.5, 1.5);
            norm.beta = rng.uniform_tensor(&[d], -0.5, 0.5);
        }
        Ok(AxialCase { q, k, v, params })
    }

    pub fn oracle_diff(&self, variant: AmsaVariant) -> Result<f64> {
        let fast = amsa(&self.q, &self.k, &self.v, &self.params, variant)?;
        let slow = axial_oracle(&self.q, &self.k, &self.v, &self.params, variant)?;
        max_abs_diff(&fast, &slow)
    }
}

fn amsa_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..ORACLE_CASES {
        let case = AxialCase::random(&mut rng)?;
        for (i, variant) in AmsaVariant::ALL.into_iter().enumerate() {
            worst[i] = worst[i].max(case.oracle_diff(variant)?);
        }
    }
    Ok(AmsaVariant::ALL
        .into_iter()
        .zip(worst)
        .map(|(v, e)| Check::below(format!("amsa[{v}] vs oracle, {ORACLE_CASES} cases"), e, ORACLE_TOL))
        .collect())
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn probe(out: &Tensor, seed: u64) -> Result<Tensor> {
    let r = Rng::new(seed ^ 0x7072_6f62_65).uniform_tensor(out.shape(), -1.0, 1.0);
    out.mul(&r)?.sum()
}

/// Named scalar functions whose tape gradients are compared against finite
/// differences.
pub struct GradTarget {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(&[Tensor]) -> Result<Tensor>>,
}

fn split<'a>(ps: &'a [Tensor], n: usize) -> (&'a [Tensor], &'a [Tensor]) {
    ps.split_at(n)
}

fn with<P: ParamSet + Clone>(template: &P, tensors: &[Tensor]) -> Result<P> {
    let mut p = template.clone();
    p.replace_tensors(tensors)?;
    Ok(p)
}

/// Biases of key projections: softmax is invariant to a shift shared by all
/// keys, so their gradient is identically zero and a relative error against
/// finite-difference noise is meaningless. They are checked separately.
pub fn is_key_bias(name: &str) -> bool {
    name.ends_with(".bias") && name.rsplit('.').nth(1).is_some_and(|m| m.starts_with("conv_k"))
}

fn checked_tensors<P: ParamSet>(p: &P) -> Vec<Tensor> {
    p.named_tensors()
        .into_iter()
        .filter(|(name, _)| !is_key_bias(name))
        .map(|(_, t)| t)
        .collect()
}

/// `template` with every non-key-bias slot replaced, in traversal order.
fn with_checked<P: ParamSet + Clone>(template: &P, tensors: &[Tensor]) -> Result<P> {
    let mut p = template.clone();
    let mut it = tensors.iter();
    let mut short = false;
    p.visit_mut("", &mut |name, slot| {
        if !is_key_bias(&name) {
            match it.next() {
                Some(t) => *slot = t.clone(),
                None => short = true,
            }
        }
    });
    if short || it.next().is_some() {
        return Err(Error::shape("with_checked", "tensor count does not match the template"));
    }
    Ok(p)
}

const GRAD_D: usize = 16;
const GRAD_HEADS: usize = 2;

fn random_taps(rng: &mut Rng, batch: usize, side: usize) -> FeatureTaps {
    let [c1, c2, c3, c4] = CodecConfig::test_scale().tap_channels();
    FeatureTaps([
        rng.uniform_tensor(&[batch, c1, side, side], 0.0, 1.0),
        rng.uniform_tensor(&[batch, c2, side / 2, side / 2], 0.0, 1.0),
        rng.uniform_tensor(&[batch, c3, side / 4, side / 4], 0.0, 1.0),
        rng.uniform_tensor(&[batch, c4, side / 8, side / 8], 0.0, 1.0),
    ])
}

/// `t` plus a random gap of magnitude in `[0.25, 0.75]` per element, so no
/// coordinate sits near the kink of a norm or absolute value.
fn displaced(rng: &mut Rng, t: &Tensor) -> Result<Tensor> {
    let gap = Tensor::from_fn(t.shape(), |_| {
        let m = rng.uniform_in(0.25, 0.75);
        if rng.below(2) == 0 { m } else { -m }
    })?;
    t.add(&gap)
}

fn displaced_taps(rng: &mut Rng, taps: &FeatureTaps) -> Result<FeatureTaps> {
    let [a, b, c, d] = &taps.0;
    Ok(FeatureTaps([displaced(rng, a)?, displaced(rng, b)?, displaced(rng, c)?, displaced(rng, d)?]))
}

fn taps_from(ts: &[Tensor]) -> FeatureTaps {
    FeatureTaps([ts[0].clone(), ts[1].clone(), ts[2].clone(), ts[3].clone()])
}

/// Inputs wide enough that attention maps are far from uniform; near-uniform
/// maps make some input gradients vanish into finite-difference noise.
fn wide(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.uniform_tensor(shape, -3.0, 3.0)
}

/// Factor applied to attention projections at the checked point.
const SHARPEN: f64 = 3.0;

/// Scales every attention projection so that attention maps are peaked
/// rather than nearly uniform; deep layers behind near-uniform maps have
/// gradients below finite-difference resolution.
fn sharpen_attention<P: ParamSet>(p: &mut P) -> Result<()> {
    let mut err = None;
    p.visit_mut("", &mut |name, t| {
        let leaf = name.rsplit('.').next().unwrap_or("");
        if matches!(leaf, "wq" | "wk") {
            match t.scale(SHARPEN) {
                Ok(s) => *t = s.detach_param(),
                Err(e) => err = Some(e),
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Every gradient target at test scale for one seed.
pub fn grad_targets(seed: u64) -> Result<Vec<GradTarget>> {
    let mut rng = Rng::new(seed);
    let grid = wide;
    let (d, heads) = (GRAD_D, GRAD_HEADS);
    let mut out = Vec::new();

    let attn = AttnParams::init(d, heads, &mut rng)?;
    let (q, kv) = (grid(&mut rng, &[2, 3, d]), grid(&mut rng, &[2, 4, d]));
    let mut params = vec![q, kv.clone(), kv];
    params.extend(attn.tensors().into_iter().cloned());
    out.push(GradTarget {
        name: "msa",
        params,
        f: Box::new(move |ps| {
            let p = AttnParams::new(ps[3].clone(), ps[4].clone(), ps[5].clone(), ps[6].clone(), heads)?;
            probe(&msa(&ps[0], &ps[1], &ps[2], &p)?, seed)
        }),
    });

    for variant in AmsaVariant::ALL {
        let template = AmsaParams::init(d, heads, &mut rng)?;
        let mut params = vec![grid(&mut rng, &[2, 3, 2, d]), grid(&mut rng, &[1, 3, 2, d]), grid(&mut rng, &[1, 3, 2, d])];
        params.extend(template.tensors());
        out.push(GradTarget {
            name: match variant {
                AmsaVariant::Standard => "amsa[standard]",
                AmsaVariant::VariantA => "amsa[a]",
                AmsaVariant::VariantB => "amsa[b]",
            },
            params,
            f: Box::new(move |ps| {
                let (x, rest) = split(ps, 3);
                probe(&amsa(&x[0], &x[1], &x[2], &with(&template, rest)?, variant)?, seed)
            }),
        });
    }

    let template = EncoderBlockParams::init(d, heads, &mut rng)?;
    let mut params = vec![grid(&mut rng, &[2, 2, 3, d]), grid(&mut rng, &[2, 2, 3, d])];
    params.extend(checked_tensors(&template));
    out.push(GradTarget {
        name: "encoder_block",
        params,
        f: Box::new(move |ps| {
            let (x, rest) = split(ps, 2);
            let q = TokenGrid::new(x[0].clone(), GridKind::Content)?;
            let kv = TokenGrid::new(x[1].clone(), GridKind::Content)?;
            probe(&encoder_block(&q, &kv, &with_checked(&template, rest)?, AmsaVariant::Standard)?.data, seed)
        }),
    });

    let template = DecoderBlockParams::init(d, heads, &mut rng)?;
    let mut params = vec![grid(&mut rng, &[2, 2, 3, d]), grid(&mut rng, &[1, 2, 3, d])];
    params.extend(checked_tensors(&template));
    out.push(GradTarget {
        name: "decoder_block",
        params,
        f: Box::new(move |ps| {
            let (x, rest) = split(ps, 2);
            let c = TokenGrid::new(x[0].clone(), GridKind::Content)?;
            let s = TokenGrid::new(x[1].clone(), GridKind::Style)?;
            probe(&decoder_block(&c, &s, &with_checked(&template, rest)?, AmsaVariant::Standard)?.data, seed)
        }),
    });

    let cfg = DitConfig::test_scale();
    let mut template = DitParams::init(&cfg, &mut rng)?;
    sharpen_attention(&mut template)?;
    let mut params = vec![grid(&mut rng, &[2, 2, 2, d]), grid(&mut rng, &[1, 2, 2, d])];
    params.extend(checked_tensors(&template));
    out.push(GradTarget {
        name: "dit_forward",
        params,
        f: Box::new(move |ps| {
            let (x, rest) = split(ps, 2);
            let c = TokenGrid::new(x[0].clone(), GridKind::Content)?;
            let s = TokenGrid::new(x[1].clone(), GridKind::Style)?;
            probe(&dit_forward(&c, &s, &cfg, &with_checked(&template, rest)?)?.data, seed)
        }),
    });

    let template = CodecParams::init(&CodecConfig::test_scale(), &mut rng)?.decoder;
    let mut params = vec![grid(&mut rng, &[1, 2, 2, d])];
    params.extend(template.tensors());
    out.push(GradTarget {
        name: "decode",
        params,
        f: Box::new(move |ps| {
            let (x, rest) = split(ps, 1);
            let tokens = TokenGrid::new(x[0].clone(), GridKind::Stylized)?;
            probe(&codec::decode(&tokens, &with(&template, rest)?)?, seed)
        }),
    });

    out.extend(loss_targets(&mut rng)?);
    Ok(out)
}

/// Loss gradients with respect to the stylized-side inputs.
fn loss_targets(rng: &mut Rng) -> Result<Vec<GradTarget>> {
    let side = 16;
    let c = random_taps(rng, 2, side);
    let s = random_taps(rng, 1, side);
    let cs = displaced_taps(rng, &c)?;
    let mut out = Vec::new();

    let (c1, s1) = (c.clone(), s.clone());
    out.push(GradTarget {
        name: "content_loss",
        params: cs.0.to_vec(),
        f: Box::new(move |ps| losses::content_loss(&taps_from(ps), &c1)),
    });
    out.push(GradTarget {
        name: "style_loss",
        params: cs.0.to_vec(),
        f: Box::new(move |ps| losses::style_loss(&taps_from(ps), &s1)),
    });

    let img_c = rng.uniform_tensor(&[2, 3, side, side], 0.0, 1.0);
    let img_s = rng.uniform_tensor(&[1, 3, side, side], 0.0, 1.0);
    let ss_taps = displaced_taps(rng, &s)?;
    let mut params = vec![displaced(rng, &img_c)?, displaced(rng, &img_s)?];
    params.extend(cs.0.iter().cloned());
    params.extend(ss_taps.0.iter().cloned());
    let (c2, s2) = (c.clone(), s.clone());
    out.push(GradTarget {
        name: "identity_loss",
        params,
        f: Box::new(move |ps| {
            losses::identity_loss(
                &IdentityInputs {
                    cc: &ps[0],
                    c: &img_c,
                    ss: &ps[1],
                    s: &img_s,
                    taps_cc: &taps_from(&ps[2..6]),
                    taps_c: &c2,
                    taps_ss: &taps_from(&ps[6..10]),
                    taps_s: &s2,
                },
                &LossWeights::default(),
            )
        }),
    });

    let pair = random_taps(rng, 2, side);
    let (p1, p2) = (pair.narrow_batch(0, 1)?, pair.narrow_batch(1, 1)?);
    let mut params = pair.narrow_batch(0, 1)?.0.to_vec();
    params.extend(random_taps(rng, 1, side).0);
    out.push(GradTarget {
        name: "temporal_loss",
        params,
        f: Box::new(move |ps| losses::temporal_loss(&p1, &p2, &taps_from(&ps[0..4]), &taps_from(&ps[4..8]))),
    });

    let (c3, s3) = (c, s);
    let video = random_taps(rng, 2, side);
    out.push(GradTarget {
        name: "total_loss",
        params: cs.0.to_vec(),
        f: Box::new(move |ps| {
            let taps = taps_from(ps);
            let parts = LossParts {
                content: losses::content_loss(&taps, &c3)?,
                style: losses::style_loss(&taps, &s3)?,
                identity: losses::content_loss(&taps, &c3)?.scale(0.5)?,
                temporal: losses::temporal_loss(
                    &video.narrow_batch(0, 1)?,
                    &video.narrow_batch(1, 1)?,
                    &taps.narrow_batch(0, 1)?,
                    &taps.narrow_batch(1, 1)?,
                )?,
            };
            losses::total_loss(&parts, &LossWeights::default())
        }),
    });
    Ok(out)
}

/// `(target name, seed, max relative error)` for every target and seed.
pub fn grad_errors(seeds: &[u64]) -> Result<Vec<(&'static str, u64, f64)>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for target in grad_targets(seed)? {
            let report = grad_check(&target.f, &target.params, GRAD_EPS)?;
            out.push((target.name, seed, report.max_rel_error));
        }
    }
    Ok(out)
}

/// Key-bias gradients must vanish up to rounding.
pub const KEY_BIAS_GRAD_TOL: f64 = 1e-12;

/// Largest tape-gradient magnitude over every key bias of a test-scale
/// transformer.
pub fn key_bias_grad(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let cfg = DitConfig::test_scale();
    let params = DitParams::init(&cfg, &mut rng)?;
    let c = TokenGrid::new(wide(&mut rng, &[2, 2, 3, cfg.embed_dim]), GridKind::Content)?;
    let s = TokenGrid::new(wide(&mut rng, &[1, 2, 3, cfg.embed_dim]), GridKind::Style)?;
    probe(&dit_forward(&c, &s, &cfg, &params)?.data, seed)?.backward()?;
    let mut worst = 0.0f64;
    let mut seen = 0;
    for (name, t) in params.named_tensors() {
        if is_key_bias(&name) {
            seen += 1;
            let g = t.grad().ok_or_else(|| Error::Contract(format!("{name} received no gradient")))?;
            worst = g.data().iter().fold(worst, |m, v| m.max(v.abs()));
        }
    }
    if seen == 0 {
        return Err(Error::Contract("no key biases found".into()));
    }
    Ok(worst)
}

fn grads_suite() -> Result<Vec<Check>> {
    let mut checks: Vec<Check> = grad_errors(&GRAD_SEEDS)?
        .into_iter()
        .map(|(name, seed, err)| Check::below(format!("{name} seed {seed}"), err, GRAD_TOL))
        .collect();
    for seed in GRAD_SEEDS {
        checks.push(Check::below(format!("key-bias gradients vanish, seed {seed}"), key_bias_grad(seed)?, KEY_BIAS_GRAD_TOL));
    }
    Ok(checks)
}

/// Counted runtime FLOPs of `dit_forward` on random tokens.
pub fn runtime_dit_flops(cfg: &DitConfig, dims: &Dims, seed: u64) -> Result<(TokenGrid, u64)> {
    let mut rng = Rng::new(seed);
    let params = DitParams::init(cfg, &mut rng)?;
    let c = TokenGrid::new(grid(&mut rng, &[dims.t, dims.h, dims.w, dims.d]), GridKind::Content)?;
    let s = TokenGrid::new(grid(&mut rng, &[dims.t_kv, dims.h, dims.w, dims.d]), GridKind::Style)?;
    let (out, tally) = cost::count_flops(|| dit_forward(&c, &s, cfg, &params));
    Ok((out?, tally.total()))
}

fn flops_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let gap = |a: u64, b: u64| a.abs_diff(b) as f64;

    let row = &bench::sweep(&[(32, 32)], 1, 512, 8, AmsaVariant::Standard)?[0];
    checks.push(Check::exact(
        "msa/amsa score ratio at 32x32, D=512 minus 16",
        gap(row.msa.score_flops, 16 * row.amsa.score_flops),
    ));

    let mut rng = Rng::new(7);
    for variant in AmsaVariant::ALL {
        let case = AxialCase::random(&mut rng)?;
        let dims = Dims {
            t: case.q.dim(0),
            t_kv: case.k.dim(0),
            h: case.q.dim(1),
            w: case.q.dim(2),
            d: case.q.dim(3),
            heads: case.params.height.heads,
        };
        let (_, tally) = cost::count_flops(|| amsa(&case.q, &case.k, &case.v, &case.params, variant));
        let graph = bench::count_forward(&GraphSpec::Amsa(variant), &dims)?;
        checks.push(Check::exact(format!("amsa[{variant}] counter vs graph"), gap(tally.total(), graph.total_flops)));
        let analytic = attention::amsa_flops(
            dims.t as u64,
            dims.t_kv as u64,
            dims.h as u64,
            dims.w as u64,
            dims.d as u64,
            dims.heads as u64,
            variant,
        );
        checks.push(Check::exact(
            format!("amsa[{variant}] score counter vs closed form"),
            gap(tally.in_scope("score"), analytic.score),
        ));
    }

    let dims = Dims {
        t: 2,
        t_kv: 1,
        h: 3,
        w: 2,
        d: GRAD_D,
        heads: GRAD_HEADS,
    };
    let base = DitConfig::test_scale();
    let configs = [
        ("bimodal", base.clone()),
        ("unimodal", DitConfig { unimodal: true, ..base.clone() }),
        ("no interaction", DitConfig { interaction_enabled: false, ..base.clone() }),
        ("variant b", DitConfig { variant: AmsaVariant::VariantB, ..base.clone() }),
    ];
    for (label, cfg) in &configs {
        let (_, counted) = runtime_dit_flops(cfg, &dims, 3)?;
        let graph = bench::count_forward(&GraphSpec::Dit(cfg.clone()), &dims)?;
        checks.push(Check::exact(format!("dit_forward {label} counter vs graph"), gap(counted, graph.total_flops)));
    }
    let (_, with) = runtime_dit_flops(&configs[0].1, &dims, 3)?;
    let (_, without) = runtime_dit_flops(&configs[2].1, &dims, 3)?;
    let analytic = closed_form::interaction(&base, dims.t as u64, dims.h as u64, dims.w as u64);
    checks.push(Check::exact(
        "interaction saving vs closed form",
        gap(with - without, analytic),
    ));
    Ok(checks)
}

fn losses_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    let taps = random_taps(&mut rng, 2, 16);
    let style = random_taps(&mut rng, 1, 16);
    let img = rng.uniform_tensor(&[2, 3, 16, 16], 0.0, 1.0);
    let img_s = rng.uniform_tensor(&[1, 3, 16, 16], 0.0, 1.0);
    let w = LossWeights::default();

    checks.push(Check::exact("content_loss(x, x)", losses::content_loss(&taps, &taps)?.item()));
    checks.push(Check::exact("style_loss(x, x)", losses::style_loss(&style, &style)?.item()));
    let identity = losses::identity_loss(
        &IdentityInputs {
            cc: &img,
            c: &img,
            ss: &img_s,
            s: &img_s,
            taps_cc: &taps,
            taps_c: &taps,
            taps_ss: &style,
            taps_s: &style,
        },
        &w,
    )?;
    checks.push(Check::exact("identity_loss(x, x)", identity.item()));
    let (a, b) = (taps.narrow_batch(0, 1)?, taps.narrow_batch(1, 1)?);
    checks.push(Check::exact("temporal_loss(x, x)", losses::temporal_loss(&a, &b, &a, &b)?.item()));

    let rescale = |t: &FeatureTaps, rng: &mut Rng| -> Result<FeatureTaps> {
        let mut out = t.clone();
        for tap in out.0.iter_mut() {
            let &[n, _, h, w] = tap.shape() else { unreachable!() };
            *tap = tap.mul(&rng.uniform_tensor(&[n, 1, h, w], 0.1, 10.0))?;
        }
        Ok(out)
    };
    let (ra, rb) = (rescale(&a, &mut rng)?, rescale(&b, &mut rng)?);
    checks.push(Check::below(
        "temporal_loss under per-vector positive rescaling",
        losses::temporal_loss(&a, &b, &ra, &rb)?.item(),
        1e-12,
    ));

    let one = Tensor::scalar(1.0)?;
    let parts = LossParts {
        content: one.clone(),
        style: one.clone(),
        identity: one.clone(),
        temporal: one,
    };
    checks.push(Check::below(
        "total_loss(1, 1, 1, 1) vs 92.6",
        (losses::total_loss(&parts, &w)?.item() - 92.6).abs(),
        TOTAL_LOSS_TOL,
    ));
    Ok(checks)
}

/// With both halves of the content sequence equal and both interaction
/// blocks sharing weights, the cross-modal path must reproduce the
/// single-sequence self-attention path. Returns the max abs difference.
pub fn interaction_coincidence(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let cfg = DitConfig::test_scale();
    let half = grid(&mut rng, &[2, 3, 4, cfg.embed_dim]);
    let seq = TokenGrid::new(Tensor::concat(&[half.clone(), half], 0)?, GridKind::Content)?;
    let shared = EncoderBlockParams::init(cfg.embed_dim, cfg.heads, &mut rng)?;
    let blocks = vec![shared.clone(), shared];
    let cross = video_image_interaction(&seq, &blocks, &cfg)?;
    let solo = video_image_interaction(&seq, &blocks, &DitConfig { unimodal: true, ..cfg })?;
    max_abs_diff(&cross.data, &solo.data)
}
