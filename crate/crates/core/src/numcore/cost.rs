//! Runtime FLOP instrumentation.
//!
//! Every numcore primitive reports its analytic cost through [`record`]. The
//! counter is off unless a closure runs under [`count_flops`], and labels from
//! [`scope`] let callers attribute costs (e.g. attention score terms versus
//! projections).
//!
//! Conventions (shared with the analytic graph model in `bench`):
//! one multiply-add is 2 FLOPs; softmax costs 5 per element (max, subtract,
//! exp, sum, divide); layer norm 8 per element; GELU 8 per element; every
//! other elementwise op or reduction 1 per element it reads. Shape ops are free.

use std::cell::RefCell;
use std::collections::BTreeMap;

pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;
pub const LAYER_NORM_FLOPS_PER_ELEM: u64 = 8;
pub const GELU_FLOPS_PER_ELEM: u64 = 8;
pub const ELEMENTWISE_FLOPS_PER_ELEM: u64 = 1;

pub fn matmul_flops(batch: u64, m: u64, k: u64, n: u64) -> u64 {
    2 * batch * m * k * n
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_flops(b: u64, c: u64, o: u64, kh: u64, kw: u64, oh: u64, ow: u64, bias: bool) -> u64 {
    let macs = 2 * b * o * c * kh * kw * oh * ow;
    if bias {
        macs + b * o * oh * ow
    } else {
        macs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    MatMul,
    Conv2d,
    Softmax,
    LayerNorm,
    Elementwise,
    Gelu,
    Reduce,
    Pool,
}

/// Aggregated counts keyed by (scope path, primitive). Scope paths are
/// `/`-joined labels, empty at top level.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    entries: BTreeMap<(String, Primitive), u64>,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// Sum over entries whose scope path contains `label` as a whole segment.
    pub fn in_scope(&self, label: &str) -> u64 {
        self.entries
            .iter()
            .filter(|((path, _), _)| path.split('/').any(|seg| seg == label))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn by_primitive(&self, prim: Primitive) -> u64 {
        self.entries
            .iter()
            .filter(|((_, p), _)| *p == prim)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Primitive, u64)> {
        self.entries.iter().map(|((s, p), v)| (s.as_str(), *p, *v))
    }
}

struct Recorder {
    scope: Vec<&'static str>,
    tally: FlopTally,
}

thread_local! {
    static RECORDER: RefCell<Option<Recorder>> = const { RefCell::new(None) };
}

/// Runs `f` with instrumentation on and returns what it recorded. Nested
/// calls get their own tally; the outer one resumes afterwards.
pub fn count_flops<T>(f: impl FnOnce() -> T) -> (T, FlopTally) {
    let saved = RECORDER.with(|r| {
        r.borrow_mut().replace(Recorder {
            scope: Vec::new(),
            tally: FlopTally::default(),
        })
    });
    let out = f();
    let rec = RECORDER.with(|r| std::mem::replace(&mut *r.borrow_mut(), saved));
    (out, rec.map(|r| r.tally).unwrap_or_default())
}

/// Attributes everything recorded inside `f` to `label`.
pub fn scope<T>(label: &'static str, f: impl FnOnce() -> T) -> T {
    let pushed = RECORDER.with(|r| match r.borrow_mut().as_mut() {
        Some(rec) => {
            rec.scope.push(label);
            true
        }
        None => false,
    });
    let out = f();
    if pushed {
        RECORDER.with(|r| {
            if let Some(rec) = r.borrow_mut().as_mut() {
                rec.scope.pop();
            }
        });
    }
    out
}

pub(crate) fn record(prim: Primitive, flops: u64) {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            let key = (rec.scope.join("/"), prim);
            *rec.tally.entries.entry(key).or_insert(0) += flops;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn off_by_default_and_scoped_when_on() {
        record(Primitive::MatMul, 10);
        let ((), tally) = count_flops(|| {
            record(Primitive::MatMul, 4);
            scope("score", || scope("inner", || record(Primitive::Softmax, 3)));
        });
        assert_eq!(tally.total(), 7);
        assert_eq!(tally.in_scope("score"), 3);
        assert_eq!(tally.in_scope("inner"), 3);
        assert_eq!(tally.in_scope("sco"), 0);
        assert_eq!(tally.by_primitive(Primitive::MatMul), 4);
    }

    #[test]
    fn nested_counters_are_independent() {
        let (inner, outer) = count_flops(|| {
            record(Primitive::Elementwise, 1);
            let ((), inner) = count_flops(|| record(Primitive::Elementwise, 5));
            record(Primitive::Elementwise, 2);
            inner
        });
        assert_eq!(inner.total(), 5);
        assert_eq!(outer.total(), 3);
    }
}
