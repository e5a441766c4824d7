//! FLOP and activation-memory accounting.
//!
//! Costs are exact integers computed from op graphs (see [`graph`]) under the
//! conventions of `numcore::cost`: 1 multiply-add = 2 FLOPs, softmax 5 per
//! element, layer norm 8, GELU 8, other elementwise ops and reductions 1,
//! layout changes free. Activation memory is counted in elements; the MiB
//! column assumes 4-byte floats.

pub mod graph;
pub mod models;

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::AmsaVariant;
use crate::dit::{DitConfig, FFN_EXPANSION};
use crate::error::{Error, Result};
use graph::{OpGraph, Prim};

/// Reference figures for the H=W=32, D=512 attention comparison, quoted for
/// side-by-side reading only: GFLOPs and MiB for full and axial attention.
pub const REFERENCE_MSA_GFLOPS: f64 = 4.29;
pub const REFERENCE_AMSA_GFLOPS: f64 = 0.27;
pub const REFERENCE_MSA_MIB: f64 = 1.8e4;
pub const REFERENCE_AMSA_MIB: f64 = 1.1e4;

pub const FLOP_CONVENTION: &str = "1 multiply-add = 2 FLOPs; softmax 5/elem (max, sub, exp, sum, div); \
layer_norm 8/elem; gelu 8/elem; other elementwise/reduce 1/elem; reshape/permute free";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dims {
    /// Query frames.
    pub t: usize,
    /// Key/value (style) frames: 1 or `t`.
    pub t_kv: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub heads: usize,
}

impl Dims {
    pub fn square(side: usize, d: usize, heads: usize) -> Self {
        Dims {
            t: 1,
            t_kv: 1,
            h: side,
            w: side,
            d,
            heads,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.t, self.t_kv, self.h, self.w, self.d, self.heads].contains(&0) {
            return Err(Error::Config(format!("dims must be positive: {self:?}")));
        }
        if self.t_kv != 1 && self.t_kv != self.t {
            return Err(Error::Config(format!("t_kv must be 1 or t: {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d {} not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

/// Which forward pass to account for.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum GraphSpec {
    /// Full attention over every token of each `[H, W]` frame.
    Msa,
    Amsa(AmsaVariant),
    /// Self-attention encoder block (`t_kv` ignored).
    EncoderBlock(AmsaVariant),
    DecoderBlock(AmsaVariant),
    /// `dims.heads` and `dims.d` override the config's.
    Dit(DitConfig),
}

impl GraphSpec {
    pub fn name(&self) -> String {
        match self {
            GraphSpec::Msa => "msa".into(),
            GraphSpec::Amsa(v) => format!("amsa[{v}]"),
            GraphSpec::EncoderBlock(v) => format!("encoder_block[{v}]"),
            GraphSpec::DecoderBlock(v) => format!("decoder_block[{v}]"),
            GraphSpec::Dit(_) => "dit_forward".into(),
        }
    }

    pub fn build(&self, dims: &Dims) -> Result<OpGraph> {
        dims.validate()?;
        let Dims { t, t_kv, h, w, d, heads } = *dims;
        let mut g = OpGraph::new();
        match self {
            GraphSpec::Msa => {
                let q = g.input("q", &[t, h * w, d]);
                let kv = g.input("kv", &[t_kv, h * w, d]);
                models::msa(&mut g, &q, &kv, &kv, heads)?;
            }
            GraphSpec::Amsa(variant) => {
                let q = g.input("q", &[t, h, w, d]);
                let k = g.input("k", &[t_kv, h, w, d]);
                let v = g.input("v", &[t_kv, h, w, d]);
                models::amsa(&mut g, &q, &k, &v, heads, *variant)?;
            }
            GraphSpec::EncoderBlock(variant) => {
                let x = g.input("x", &[t, h, w, d]);
                // self-attention unless a separate key/value batch is requested
                let kv = if t_kv == t { x.clone() } else { g.input("kv", &[t_kv, h, w, d]) };
                models::encoder_block(&mut g, &x, &kv, heads, *variant)?;
            }
            GraphSpec::DecoderBlock(variant) => {
                let c = g.input("content", &[t, h, w, d]);
                let s = g.input("style", &[t_kv, h, w, d]);
                models::decoder_block(&mut g, &c, &s, heads, *variant)?;
            }
            GraphSpec::Dit(cfg) => {
                let cfg = DitConfig {
                    embed_dim: d,
                    heads,
                    ..cfg.clone()
                };
                let c = g.input("content", &[t, h, w, d]);
                let s = g.input("style", &[t_kv, h, w, d]);
                models::dit_forward(&mut g, &c, &s, &cfg)?;
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LineItem {
    pub name: String,
    pub scope: String,
    pub flops: u64,
    /// Live activation elements right after this op.
    pub peak_activation_elems: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub graph: String,
    pub dims: Dims,
    pub line_items: Vec<LineItem>,
    pub total_flops: u64,
    /// Attention score terms: `QKᵀ` and the weighted sum over `V`.
    pub score_flops: u64,
    pub projection_flops: u64,
    pub peak_activation_elems: u64,
    pub largest_attention_map_elems: u64,
    pub peak_activation_mib_f32: f64,
}

pub fn elems_to_mib_f32(elems: u64) -> f64 {
    elems as f64 * 4.0 / (1024.0 * 1024.0)
}

impl CostReport {
    pub fn from_graph(name: String, dims: Dims, g: &OpGraph) -> Result<Self> {
        let live = g.live_elems();
        let mut line_items = Vec::new();
        for (node, &live_after) in g.nodes.iter().zip(&live) {
            if matches!(node.prim, Prim::Input | Prim::Param | Prim::View) {
                continue;
            }
            line_items.push(LineItem {
                name: node.name.clone(),
                scope: node.scope.clone(),
                flops: node.prim.flops()?,
                peak_activation_elems: live_after,
            });
        }
        let peak = g.peak_activation_elems();
        Ok(CostReport {
            graph: name,
            dims,
            total_flops: line_items.iter().map(|l| l.flops).sum(),
            score_flops: g.flops_in_scope("score")?,
            projection_flops: g.flops_in_scope("proj")?,
            peak_activation_elems: peak,
            largest_attention_map_elems: g.largest_attention_map(),
            peak_activation_mib_f32: elems_to_mib_f32(peak),
            line_items,
        })
    }

    /// FLOPs of line items under `label`.
    pub fn flops_in_scope(&self, label: &str) -> u64 {
        self.line_items
            .iter()
            .filter(|l| l.scope.split('/').any(|s| s == label))
            .map(|l| l.flops)
            .sum()
    }
}

pub fn count_forward(spec: &GraphSpec, dims: &Dims) -> Result<CostReport> {
    let g = spec.build(dims)?;
    CostReport::from_graph(spec.name(), *dims, &g)
}

/// Full versus axial attention at one grid size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub dims: Dims,
    pub msa: CostSummary,
    pub amsa: CostSummary,
    /// MSA/AMSA score-FLOP ratio.
    pub score_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostSummary {
    pub total_flops: u64,
    pub score_flops: u64,
    pub peak_activation_elems: u64,
    pub largest_attention_map_elems: u64,
    pub peak_activation_mib_f32: f64,
}

impl From<&CostReport> for CostSummary {
    fn from(r: &CostReport) -> Self {
        CostSummary {
            total_flops: r.total_flops,
            score_flops: r.score_flops,
            peak_activation_elems: r.peak_activation_elems,
            largest_attention_map_elems: r.largest_attention_map_elems,
            peak_activation_mib_f32: r.peak_activation_mib_f32,
        }
    }
}

pub fn sweep(grid: &[(usize, usize)], t: usize, d: usize, heads: usize, variant: AmsaVariant) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&(h, w)| {
            let dims = Dims {
                t,
                t_kv: t,
                h,
                w,
                d,
                heads,
            };
            let msa = count_forward(&GraphSpec::Msa, &dims)?;
            let amsa = count_forward(&GraphSpec::Amsa(variant), &dims)?;
            Ok(SweepRow {
                dims,
                score_ratio: msa.score_flops as f64 / amsa.score_flops as f64,
                msa: (&msa).into(),
                amsa: (&amsa).into(),
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "h,w,t,d,heads,msa_score_flops,amsa_score_flops,score_ratio,msa_total_flops,\
amsa_total_flops,msa_peak_elems,amsa_peak_elems,msa_attn_map_elems,amsa_attn_map_elems,msa_peak_mib_f32,amsa_peak_mib_f32";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let d = &r.dims;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{:.3}",
            d.h,
            d.w,
            d.t,
            d.d,
            d.heads,
            r.msa.score_flops,
            r.amsa.score_flops,
            r.score_ratio,
            r.msa.total_flops,
            r.amsa.total_flops,
            r.msa.peak_activation_elems,
            r.amsa.peak_activation_elems,
            r.msa.largest_attention_map_elems,
            r.amsa.largest_attention_map_elems,
            r.msa.peak_activation_mib_f32,
            r.amsa.peak_activation_mib_f32,
        );
    }
    out
}

#[derive(Serialize)]
struct SweepDocument<'a> {
    schema: u32,
    convention: &'a str,
    reference: Reference,
    rows: &'a [SweepRow],
}

#[derive(Serialize)]
struct Reference {
    note: &'static str,
    msa_gflops: f64,
    amsa_gflops: f64,
    msa_mib: f64,
    amsa_mib: f64,
}

pub fn sweep_json(rows: &[SweepRow]) -> Result<String> {
    let doc = SweepDocument {
        schema: 1,
        convention: FLOP_CONVENTION,
        reference: Reference {
            note: "published figures at H=W=32, D=512; accounting convention unknown, only the ratio is compared",
            msa_gflops: REFERENCE_MSA_GFLOPS,
            amsa_gflops: REFERENCE_AMSA_GFLOPS,
            msa_mib: REFERENCE_MSA_MIB,
            amsa_mib: REFERENCE_AMSA_MIB,
        },
        rows,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
}

/// Closed-form costs, derived independently of the op graphs.
pub mod closed_form {
    use super::*;
    use crate::attention::amsa_flops;

    /// Scale + softmax over every attention map of an axial layer.
    fn amsa_softmax(t: u64, h: u64, w: u64, heads: u64) -> u64 {
        let per_elem = 1 + crate::numcore::cost::SOFTMAX_FLOPS_PER_ELEM;
        per_elem * heads * t * (w * h * h + h * w * w)
    }

    /// Whole axial layer: projections, score terms, softmax, two norms.
    pub fn amsa_layer(t: u64, t_kv: u64, h: u64, w: u64, d: u64, heads: u64, variant: AmsaVariant) -> u64 {
        let a = amsa_flops(t, t_kv, h, w, d, heads, variant);
        let ln = crate::numcore::cost::LAYER_NORM_FLOPS_PER_ELEM;
        a.score + a.projection + amsa_softmax(t, h, w, heads) + 2 * ln * t * h * w * d
    }

    /// 1×1 conv with bias over `t` frames.
    fn pointwise(t: u64, h: u64, w: u64, d: u64) -> u64 {
        2 * t * d * d * h * w + t * d * h * w
    }

    /// FFN, its residual add and the trailing norm.
    fn ffn_tail(t: u64, h: u64, w: u64, d: u64) -> u64 {
        let n = t * h * w;
        let hidden = FFN_EXPANSION as u64 * d;
        let ln = crate::numcore::cost::LAYER_NORM_FLOPS_PER_ELEM;
        let gelu = crate::numcore::cost::GELU_FLOPS_PER_ELEM;
        2 * n * d * hidden + n * hidden + gelu * n * hidden + 2 * n * hidden * d + n * d + n * d + ln * n * d
    }

    /// One encoder block with `t` query frames and `t_kv` key/value frames.
    pub fn encoder_block(t: u64, t_kv: u64, h: u64, w: u64, d: u64, heads: u64, variant: AmsaVariant) -> u64 {
        let ln = crate::numcore::cost::LAYER_NORM_FLOPS_PER_ELEM;
        pointwise(t, h, w, d)
            + 2 * pointwise(t_kv, h, w, d)
            + amsa_layer(t, t_kv, h, w, d, heads, variant)
            + t * h * w * d
            + ln * t * h * w * d
            + ffn_tail(t, h, w, d)
    }

    /// The interaction stage for a `t`-frame content sequence.
    pub fn interaction(cfg: &DitConfig, t: u64, h: u64, w: u64) -> u64 {
        let (d, heads) = (cfg.embed_dim as u64, cfg.heads as u64);
        match (cfg.interaction_enabled, cfg.unimodal) {
            (false, _) => 0,
            (true, true) => encoder_block(t, t, h, w, d, heads, cfg.variant),
            (true, false) => 2 * encoder_block(t / 2, t / 2, h, w, d, heads, cfg.variant),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{amsa_flops, msa_grid_flops};

    #[test]
    fn graph_score_terms_match_attention_module() {
        for &(t, t_kv, h, w) in &[(1, 1, 4, 6), (3, 1, 5, 2), (2, 2, 3, 3)] {
            let dims = Dims { t, t_kv, h, w, d: 8, heads: 2 };
            for variant in [AmsaVariant::Standard, AmsaVariant::VariantA, AmsaVariant::VariantB] {
                let r = count_forward(&GraphSpec::Amsa(variant), &dims).unwrap();
                let a = amsa_flops(t as u64, t_kv as u64, h as u64, w as u64, 8, 2, variant);
                assert_eq!((r.score_flops, r.projection_flops), (a.score, a.projection));
            }
        }
        let dims = Dims { t: 2, t_kv: 2, h: 3, w: 4, d: 8, heads: 4 };
        let r = count_forward(&GraphSpec::Msa, &dims).unwrap();
        assert_eq!(r.score_flops, msa_grid_flops(2, 3, 4, 8, 4).score);
    }

    #[test]
    fn totals_are_sums_and_maxima_of_line_items() {
        let dims = Dims { t: 2, t_kv: 1, h: 4, w: 4, d: 8, heads: 2 };
        let r = count_forward(&GraphSpec::DecoderBlock(AmsaVariant::Standard), &dims).unwrap();
        assert_eq!(r.total_flops, r.line_items.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(r.peak_activation_elems, r.line_items.iter().map(|l| l.peak_activation_elems).max().unwrap());
    }

    #[test]
    fn encoder_block_closed_form() {
        for variant in [AmsaVariant::Standard, AmsaVariant::VariantA, AmsaVariant::VariantB] {
            let dims = Dims { t: 3, t_kv: 3, h: 4, w: 5, d: 8, heads: 2 };
            let r = count_forward(&GraphSpec::EncoderBlock(variant), &dims).unwrap();
            assert_eq!(r.total_flops, closed_form::encoder_block(3, 3, 4, 5, 8, 2, variant));
        }
    }

    #[test]
    fn attention_map_ratio_is_side_length() {
        let dims = Dims::square(32, 512, 8);
        let msa = count_forward(&GraphSpec::Msa, &dims).unwrap();
        let amsa = count_forward(&GraphSpec::Amsa(AmsaVariant::Standard), &dims).unwrap();
        assert_eq!(msa.largest_attention_map_elems, 1024 * 1024 * 8);
        assert_eq!(amsa.largest_attention_map_elems, 32 * 32 * 32 * 8);
    }

    #[test]
    fn sweep_outputs() {
        let rows = sweep(&[(8, 8), (16, 16)], 1, 16, 2, AmsaVariant::Standard).unwrap();
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(sweep_json(&rows).unwrap().contains("\"schema\": 1"));
        assert!(sweep(&[], 1, 16, 2, AmsaVariant::Standard).is_err());
    }
}
