//! Shape-level op graphs.
//!
//! A graph records the same primitive sequence as a forward pass, using only
//! shapes. Costs come from the shared conventions in `numcore::cost`; the
//! schedule is insertion order, which is topological by construction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numcore::cost::{self, Primitive};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Prim {
    Input,
    /// Weight tensor; not counted as an activation.
    Param,
    /// Free layout change (reshape, permute, narrow, concat).
    View,
    MatMul { batch: u64, m: u64, k: u64, n: u64 },
    Conv2d { b: u64, c: u64, o: u64, kh: u64, kw: u64, oh: u64, ow: u64, bias: bool },
    Softmax { elems: u64 },
    LayerNorm { elems: u64 },
    Gelu { elems: u64 },
    Elementwise { elems: u64 },
    Reduce { elems: u64 },
    Pool { elems: u64 },
    /// Anything without a cost rule; counting it is an error.
    Custom(String),
}

impl Prim {
    pub fn flops(&self) -> Result<u64> {
        Ok(match *self {
            Prim::Input | Prim::Param | Prim::View => 0,
            Prim::MatMul { batch, m, k, n } => cost::matmul_flops(batch, m, k, n),
            Prim::Conv2d { b, c, o, kh, kw, oh, ow, bias } => cost::conv2d_flops(b, c, o, kh, kw, oh, ow, bias),
            Prim::Softmax { elems } => elems * cost::SOFTMAX_FLOPS_PER_ELEM,
            Prim::LayerNorm { elems } => elems * cost::LAYER_NORM_FLOPS_PER_ELEM,
            Prim::Gelu { elems } => elems * cost::GELU_FLOPS_PER_ELEM,
            Prim::Elementwise { elems } | Prim::Reduce { elems } | Prim::Pool { elems } => {
                elems * cost::ELEMENTWISE_FLOPS_PER_ELEM
            }
            Prim::Custom(ref name) => {
                return Err(Error::Accounting(format!("no cost rule for primitive {name:?}")));
            }
        })
    }

    pub fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Prim::MatMul { .. } => Primitive::MatMul,
            Prim::Conv2d { .. } => Primitive::Conv2d,
            Prim::Softmax { .. } => Primitive::Softmax,
            Prim::LayerNorm { .. } => Primitive::LayerNorm,
            Prim::Gelu { .. } => Primitive::Gelu,
            Prim::Elementwise { .. } => Primitive::Elementwise,
            Prim::Reduce { .. } => Primitive::Reduce,
            Prim::Pool { .. } => Primitive::Pool,
            Prim::Input | Prim::Param | Prim::View | Prim::Custom(_) => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub scope: String,
    pub prim: Prim,
    pub shape: Vec<usize>,
    pub inputs: Vec<usize>,
    /// Views alias their source and hold no storage of their own.
    pub owns_storage: bool,
}

impl Node {
    pub fn elems(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

/// Handle to a node's output.
#[derive(Clone, Debug)]
pub struct Sym {
    pub id: usize,
    pub shape: Vec<usize>,
}

impl Sym {
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct OpGraph {
    pub nodes: Vec<Node>,
    scope: Vec<&'static str>,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let x = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let y = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("{a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

impl OpGraph {
    pub fn new() -> Self {
        OpGraph::default()
    }

    /// Runs `f` with `label` appended to the scope of every node it adds.
    pub fn scoped<T>(&mut self, label: &'static str, f: impl FnOnce(&mut OpGraph) -> T) -> T {
        self.scope.push(label);
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn push(&mut self, name: &str, prim: Prim, shape: Vec<usize>, inputs: &[&Sym]) -> Sym {
        let owns_storage = !matches!(prim, Prim::View | Prim::Param);
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            scope: self.scope.join("/"),
            prim,
            shape: shape.clone(),
            inputs: inputs.iter().map(|s| s.id).collect(),
            owns_storage,
        });
        Sym { id, shape }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Sym {
        self.push(name, Prim::Input, shape.to_vec(), &[])
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Sym {
        self.push(name, Prim::Param, shape.to_vec(), &[])
    }

    pub fn matmul(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        let (ra, rb) = (a.rank(), b.rank());
        if ra < 2 || rb < 2 || a.dim(ra - 1) != b.dim(rb - 2) {
            return Err(Error::shape("matmul", format!("cannot multiply {:?} by {:?}", a.shape, b.shape)));
        }
        let (m, k, n) = (a.dim(ra - 2), a.dim(ra - 1), b.dim(rb - 1));
        let mut shape = broadcast("matmul", &a.shape[..ra - 2], &b.shape[..rb - 2])?;
        let batch = shape.iter().product::<usize>() as u64;
        shape.extend([m, n]);
        let prim = Prim::MatMul {
            batch,
            m: m as u64,
            k: k as u64,
            n: n as u64,
        };
        Ok(self.push("matmul", prim, shape, &[a, b]))
    }

    fn binary(&mut self, name: &str, a: &Sym, b: &Sym) -> Result<Sym> {
        let shape = broadcast("elementwise", &a.shape, &b.shape)?;
        let elems = shape.iter().product::<usize>() as u64;
        Ok(self.push(name, Prim::Elementwise { elems }, shape, &[a, b]))
    }

    pub fn add(&mut self, a: &Sym, b: &Sym) -> Result<Sym> {
        self.binary("add", a, b)
    }

    fn unary(&mut self, name: &str, x: &Sym, make: fn(u64) -> Prim) -> Sym {
        let elems = x.shape.iter().product::<usize>() as u64;
        self.push(name, make(elems), x.shape.clone(), &[x])
    }

    pub fn scale(&mut self, x: &Sym) -> Sym {
        self.unary("scale", x, |elems| Prim::Elementwise { elems })
    }

    pub fn relu(&mut self, x: &Sym) -> Sym {
        self.unary("relu", x, |elems| Prim::Elementwise { elems })
    }

    pub fn gelu(&mut self, x: &Sym) -> Sym {
        self.unary("gelu", x, |elems| Prim::Gelu { elems })
    }

    pub fn softmax_last(&mut self, x: &Sym) -> Sym {
        self.unary("softmax", x, |elems| Prim::Softmax { elems })
    }

    /// Affine parameters are not activations and are left out of the graph.
    pub fn layer_norm(&mut self, x: &Sym) -> Sym {
        self.unary("layer_norm", x, |elems| Prim::LayerNorm { elems })
    }

    pub fn permute(&mut self, x: &Sym, perm: &[usize]) -> Sym {
        let shape = perm.iter().map(|&p| x.shape[p]).collect();
        self.push("permute", Prim::View, shape, &[x])
    }

    pub fn reshape(&mut self, x: &Sym, shape: &[usize]) -> Result<Sym> {
        if shape.iter().product::<usize>() != x.shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape)));
        }
        Ok(self.push("reshape", Prim::View, shape.to_vec(), &[x]))
    }

    pub fn narrow(&mut self, x: &Sym, axis: usize, start: usize, len: usize) -> Result<Sym> {
        if start + len > x.shape[axis] {
            return Err(Error::shape("narrow", format!("{start}+{len} exceeds axis {axis} of {:?}", x.shape)));
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        Ok(self.push("narrow", Prim::View, shape, &[x]))
    }

    pub fn concat(&mut self, parts: &[&Sym], axis: usize) -> Sym {
        let mut shape = parts[0].shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        // free to compute, but the result is a fresh buffer
        let out = self.push("concat", Prim::View, shape, parts);
        self.nodes[out.id].owns_storage = true;
        out
    }

    /// Same-padded stride-1 convolution with bias on `[B, C, H, W]`.
    pub fn conv2d(&mut self, x: &Sym, out_channels: usize, kernel: usize) -> Result<Sym> {
        let &[b, c, h, w] = x.shape.as_slice() else {
            return Err(Error::shape("conv2d", format!("expected rank 4, got {:?}", x.shape)));
        };
        let prim = Prim::Conv2d {
            b: b as u64,
            c: c as u64,
            o: out_channels as u64,
            kh: kernel as u64,
            kw: kernel as u64,
            oh: h as u64,
            ow: w as u64,
            bias: true,
        };
        Ok(self.push("conv2d", prim, vec![b, out_channels, h, w], &[x]))
    }

    pub fn total_flops(&self) -> Result<u64> {
        self.nodes.iter().map(|n| n.prim.flops()).sum()
    }

    /// FLOPs of nodes whose scope contains `label` as a whole segment.
    pub fn flops_in_scope(&self, label: &str) -> Result<u64> {
        let mut total = 0;
        for n in &self.nodes {
            if n.scope.split('/').any(|s| s == label) {
                total += n.prim.flops()?;
            }
        }
        Ok(total)
    }

    /// Live activation elements after each node executes. Inputs are live
    /// from the start; a stored tensor is freed after its last consumer, or
    /// kept to the end when it has none (a graph output). A view keeps its
    /// storage root alive.
    pub fn live_elems(&self) -> Vec<u64> {
        let n = self.nodes.len();
        // storage root of every node
        let mut root = vec![0; n];
        for (i, node) in self.nodes.iter().enumerate() {
            root[i] = match node.inputs.first() {
                Some(&src) if !node.owns_storage => root[src],
                _ => i,
            };
        }
        let mut last_use = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[root[j]] = Some(i);
            }
        }
        let inputs: u64 = self
            .nodes
            .iter()
            .filter(|nd| matches!(nd.prim, Prim::Input))
            .map(Node::elems)
            .sum();
        let mut live = inputs;
        let mut out = Vec::with_capacity(n);
        let mut frees: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, lu) in last_use.iter().enumerate() {
            if let Some(at) = lu {
                frees[*at].push(i);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.owns_storage && !matches!(node.prim, Prim::Input) {
                live += node.elems();
            }
            out.push(live);
            for &j in &frees[i] {
                if self.nodes[j].owns_storage {
                    live -= self.nodes[j].elems();
                }
            }
        }
        out
    }

    pub fn peak_activation_elems(&self) -> u64 {
        self.live_elems().into_iter().max().unwrap_or(0)
    }

    /// Largest single attention-probability map.
    pub fn largest_attention_map(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| matches!(n.prim, Prim::Softmax { .. }))
            .map(Node::elems)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_unknown_primitive() {
        let mut g = OpGraph::new();
        let a = g.input("a", &[3, 4]);
        let b = g.input("b", &[4, 5]);
        g.matmul(&a, &b).unwrap();
        assert_eq!(g.total_flops().unwrap(), 2 * 3 * 4 * 5);
        let c = g.input("c", &[1]);
        g.push("mystery", Prim::Custom("fft".into()), vec![1], &[&c]);
        assert!(matches!(g.total_flops(), Err(Error::Accounting(_))));
    }

    #[test]
    fn liveness_frees_after_last_use() {
        let mut g = OpGraph::new();
        let x = g.input("x", &[10]);
        let y = g.scale(&x);
        let z = g.scale(&y);
        let _ = g.scale(&z);
        // each step holds its input and output only
        assert_eq!(g.live_elems(), vec![10, 20, 20, 20]);
        let v = g.reshape(&z, &[2, 5]).unwrap();
        let _ = g.scale(&v);
        // z stays live through its view
        assert_eq!(g.peak_activation_elems(), 30);
    }
}
