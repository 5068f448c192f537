//! Reverse-mode automatic differentiation over vector-valued primitives.
//!
//! Every value is a flat `f64` vector wrapped in a [`Var`]. Operations are
//! methods on [`Tape`]; when the tape is recording and at least one operand
//! is traced, the operation appends a node holding its vector-Jacobian
//! product. A reverse sweep from one or more seeded outputs then yields
//! adjoints for every traced leaf.
//!
//! The primitive set is deliberately coarse: a dense layer is one node, a
//! sparse linear solve is one node whose adjoint is the transposed solve.
//! That keeps a solver timestep at a few hundred nodes regardless of mesh
//! size.
//!
//! ```
//! use deepconv::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let a = tape.leaf(vec![3.0]);
//! let b = tape.leaf(vec![4.0]);
//! let y = tape.mul(&a, &b);
//! let g = tape.backward(&[(&y, vec![1.0])]).unwrap();
//! assert_eq!(g.wrt(&a), vec![4.0]);
//! assert_eq!(g.wrt(&b), vec![3.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{self, CsrPattern, SolveError, SolverSettings};

/// Index value meaning "no source element"; gathers produce 0 there.
pub const NO_INDEX: u32 = u32::MAX;

#[derive(Debug, Clone, Error)]
pub enum AdError {
    #[error("non-finite adjoint produced by primitive `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("adjoint solve failed in `{op}`: {source}")]
    Solve {
        op: &'static str,
        #[source]
        source: SolveError,
    },
    #[error("seed length {seed} does not match value length {value}")]
    SeedLength { seed: usize, value: usize },
}

type Backward = Box<dyn Fn(&[f64], &[bool]) -> Result<Vec<Option<Vec<f64>>>, SolveError>>;

struct Node {
    op: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<Backward>,
}

/// Append-only operation record.
pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

/// A traced (or constant) vector value.
#[derive(Clone)]
pub struct Var {
    value: Rc<Vec<f64>>,
    node: Option<usize>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("len", &self.value.len())
            .field("node", &self.node)
            .finish()
    }
}

impl Var {
    pub fn constant(values: Vec<f64>) -> Var {
        Var {
            value: Rc::new(values),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(vec![v])
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value.as_ref().clone()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn is_traced(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, detached from the tape.
    pub fn detach(&self) -> Var {
        Var {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        self.value[0]
    }
}

/// Adjoints of the traced leaves after a reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when no seeded output depends on it.
    pub fn wrt(&self, v: &Var) -> Vec<f64> {
        v.node
            .and_then(|n| self.leaves.get(&n).cloned())
            .unwrap_or_else(|| vec![0.0; v.len()])
    }
}

fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn reduce_like(g: Vec<f64>, len: usize) -> Vec<f64> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn broadcast_len(a: &Var, b: &Var) -> usize {
    match (a.len(), b.len()) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        (x, y) => panic!("shape mismatch: {x} vs {y}"),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Tape {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records; operations only compute values.
    pub fn inactive() -> Tape {
        Tape {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes. Vars traced on the old record must not be
    /// used afterwards.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Names of recorded primitives, in order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, values: Vec<f64>) -> Var {
        let node = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: "leaf",
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            value: Rc::new(values),
            node,
        }
    }

    fn record<F>(&self, op: &'static str, value: Vec<f64>, parents: &[&Var], backward: F) -> Var
    where
        F: Fn(&[f64], &[bool]) -> Result<Vec<Option<Vec<f64>>>, SolveError> + 'static,
    {
        let traced = self.recording && parents.iter().any(|p| p.node.is_some());
        let node = if traced {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op,
                parents: parents.iter().map(|p| p.node).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            value: Rc::new(value),
            node,
        }
    }

    /// Reverse sweep from the seeded outputs.
    pub fn backward(&self, seeds: &[(&Var, Vec<f64>)]) -> Result<Gradients, AdError> {
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(nodes.len(), || None);
        let mut top = 0;
        for (v, seed) in seeds {
            if seed.len() != v.len() {
                return Err(AdError::SeedLength {
                    seed: seed.len(),
                    value: v.len(),
                });
            }
            if let Some(n) = v.node {
                accumulate(&mut adj[n], seed.clone());
                top = top.max(n + 1);
            }
        }
        let mut leaves = HashMap::new();
        for i in (0..top).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            let Some(bw) = &node.backward else {
                leaves.insert(i, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let contributions = bw(&g, &needs).map_err(|source| AdError::Solve {
                op: node.op,
                source,
            })?;
            for (parent, c) in node.parents.iter().zip(contributions) {
                if let (Some(p), Some(c)) = (parent, c) {
                    if c.iter().any(|x| !x.is_finite()) {
                        return Err(AdError::NonFinite {
                            op: node.op,
                            node: i,
                        });
                    }
                    accumulate(&mut adj[*p], c);
                }
            }
        }
        Ok(Gradients { leaves })
    }

    // ----- elementwise arithmetic -------------------------------------------

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let n = broadcast_len(a, b);
        let (av, bv) = (a.value.clone(), b.value.clone());
        let value = (0..n).map(|i| bcast(&av, i) + bcast(&bv, i)).collect();
        let (la, lb) = (a.len(), b.len());
        self.record("add", value, &[a, b], move |g, _| {
            Ok(vec![
                Some(reduce_like(g.to_vec(), la)),
                Some(reduce_like(g.to_vec(), lb)),
            ])
        })
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let n = broadcast_len(a, b);
        let (av, bv) = (a.value.clone(), b.value.clone());
        let value = (0..n).map(|i| bcast(&av, i) - bcast(&bv, i)).collect();
        let (la, lb) = (a.len(), b.len());
        self.record("sub", value, &[a, b], move |g, _| {
            Ok(vec![
                Some(reduce_like(g.to_vec(), la)),
                Some(reduce_like(g.iter().map(|x| -x).collect(), lb)),
            ])
        })
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let n = broadcast_len(a, b);
        let (av, bv) = (a.value.clone(), b.value.clone());
        let value = (0..n).map(|i| bcast(&av, i) * bcast(&bv, i)).collect();
        let (la, lb) = (a.len(), b.len());
        self.record("mul", value, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                reduce_like(
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g * bcast(&bv, i))
                        .collect(),
                    la,
                )
            });
            let gb = needs[1].then(|| {
                reduce_like(
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g * bcast(&av, i))
                        .collect(),
                    lb,
                )
            });
            Ok(vec![ga, gb])
        })
    }

    pub fn div(&self, a: &Var, b: &Var) -> Var {
        let n = broadcast_len(a, b);
        let (av, bv) = (a.value.clone(), b.value.clone());
        let value: Vec<f64> = (0..n).map(|i| bcast(&av, i) / bcast(&bv, i)).collect();
        let (la, lb) = (a.len(), b.len());
        self.record("div", value, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                reduce_like(
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g / bcast(&bv, i))
                        .collect(),
                    la,
                )
            });
            let gb = needs[1].then(|| {
                reduce_like(
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let d = bcast(&bv, i);
                            -g * bcast(&av, i) / (d * d)
                        })
                        .collect(),
                    lb,
                )
            });
            Ok(vec![ga, gb])
        })
    }

    pub fn neg(&self, a: &Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let value = a.value.iter().map(|x| x * c).collect();
        self.record("scale", value, &[a], move |g, _| {
            Ok(vec![Some(g.iter().map(|x| x * c).collect())])
        })
    }

    pub fn offset(&self, a: &Var, c: f64) -> Var {
        let value = a.value.iter().map(|x| x + c).collect();
        self.record("offset", value, &[a], |g, _| Ok(vec![Some(g.to_vec())]))
    }

    pub fn tanh(&self, a: &Var) -> Var {
        let value: Rc<Vec<f64>> = Rc::new(a.value.iter().map(|x| tanh(*x)).collect());
        let y = value.clone();
        self.record("tanh", value.as_ref().clone(), &[a], move |g, _| {
            Ok(vec![Some(
                g.iter()
                    .zip(y.iter())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            )])
        })
    }

    pub fn abs(&self, a: &Var) -> Var {
        let av = a.value.clone();
        let value = av.iter().map(|x| x.abs()).collect();
        self.record("abs", value, &[a], move |g, _| {
            Ok(vec![Some(
                g.iter().zip(av.iter()).map(|(g, x)| g * sign(*x)).collect(),
            )])
        })
    }

    /// max(a, 0) with unit slope on the positive branch.
    pub fn relu(&self, a: &Var) -> Var {
        let av = a.value.clone();
        let value = av.iter().map(|x| x.max(0.0)).collect();
        self.record("relu", value, &[a], move |g, _| {
            Ok(vec![Some(
                g.iter()
                    .zip(av.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )])
        })
    }

    /// Clamps to [lo, hi]; zero derivative where clamped.
    pub fn clamp(&self, a: &Var, lo: f64, hi: f64) -> Var {
        let av = a.value.clone();
        let value = av.iter().map(|x| x.clamp(lo, hi)).collect();
        self.record("clamp", value, &[a], move |g, _| {
            Ok(vec![Some(
                g.iter()
                    .zip(av.iter())
                    .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                    .collect(),
            )])
        })
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&self, mask: Arc<Vec<bool>>, a: &Var, b: &Var) -> Var {
        let n = mask.len();
        let (av, bv) = (a.value.clone(), b.value.clone());
        let value = (0..n)
            .map(|i| {
                if mask[i] {
                    bcast(&av, i)
                } else {
                    bcast(&bv, i)
                }
            })
            .collect();
        let (la, lb) = (a.len(), b.len());
        self.record("select", value, &[a, b], move |g, _| {
            let ga = g
                .iter()
                .zip(mask.iter())
                .map(|(g, m)| if *m { *g } else { 0.0 })
                .collect();
            let gb = g
                .iter()
                .zip(mask.iter())
                .map(|(g, m)| if *m { 0.0 } else { *g })
                .collect();
            Ok(vec![Some(reduce_like(ga, la)), Some(reduce_like(gb, lb))])
        })
    }

    // ----- indexing -----------------------------------------------------------

    /// `out[i] = a[idx[i]]`, or 0 where `idx[i] == NO_INDEX`.
    pub fn gather(&self, a: &Var, idx: Arc<Vec<u32>>) -> Var {
        let av = &a.value;
        let value = idx
            .iter()
            .map(|&k| if k == NO_INDEX { 0.0 } else { av[k as usize] })
            .collect();
        let n = a.len();
        self.record("gather", value, &[a], move |g, _| {
            let mut out = vec![0.0; n];
            for (gi, &k) in g.iter().zip(idx.iter()) {
                if k != NO_INDEX {
                    out[k as usize] += gi;
                }
            }
            Ok(vec![Some(out)])
        })
    }

    /// `out[idx[i]] += a[i]` into a zero vector of length `n`.
    pub fn scatter_add(&self, a: &Var, idx: Arc<Vec<u32>>, n: usize) -> Var {
        let mut value = vec![0.0; n];
        for (v, &k) in a.value.iter().zip(idx.iter()) {
            if k != NO_INDEX {
                value[k as usize] += v;
            }
        }
        self.record("scatter_add", value, &[a], move |g, _| {
            Ok(vec![Some(
                idx.iter()
                    .map(|&k| if k == NO_INDEX { 0.0 } else { g[k as usize] })
                    .collect(),
            )])
        })
    }

    pub fn concat(&self, parts: &[&Var]) -> Var {
        let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let mut value = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            value.extend_from_slice(&p.value);
        }
        self.record("concat", value, parts, move |g, needs| {
            let mut off = 0;
            let mut out = Vec::with_capacity(lens.len());
            for (l, need) in lens.iter().zip(needs) {
                out.push(need.then(|| g[off..off + l].to_vec()));
                off += l;
            }
            Ok(out)
        })
    }

    pub fn slice(&self, a: &Var, start: usize, len: usize) -> Var {
        let value = a.value[start..start + len].to_vec();
        let n = a.len();
        self.record("slice", value, &[a], move |g, _| {
            let mut out = vec![0.0; n];
            out[start..start + len].copy_from_slice(g);
            Ok(vec![Some(out)])
        })
    }

    // ----- reductions ----------------------------------------------------------

    pub fn sum(&self, a: &Var) -> Var {
        let value = vec![a.value.iter().sum()];
        let n = a.len();
        self.record("sum", value, &[a], move |g, _| {
            Ok(vec![Some(vec![g[0]; n])])
        })
    }

    /// Sums consecutive groups of `cols` entries (row sums of a row-major
    /// matrix).
    pub fn row_sum(&self, a: &Var, cols: usize) -> Var {
        assert_eq!(a.len() % cols, 0);
        let value = a.value.chunks(cols).map(|c| c.iter().sum()).collect();
        self.record("row_sum", value, &[a], move |g, _| {
            Ok(vec![Some(
                g.iter()
                    .flat_map(|&x| std::iter::repeat_n(x, cols))
                    .collect(),
            )])
        })
    }

    /// max_i |a_i| as a length-1 value; 1 with zero derivative when the
    /// input is identically zero.
    pub fn norm_scale(&self, a: &Var) -> Var {
        let mut best = 0.0;
        let mut arg = None;
        for (i, x) in a.value.iter().enumerate() {
            if x.abs() > best {
                best = x.abs();
                arg = Some(i);
            }
        }
        let value = vec![if arg.is_some() { best } else { 1.0 }];
        let n = a.len();
        let s = arg.map(|i| (i, sign(a.value[i])));
        self.record("norm_scale", value, &[a], move |g, _| {
            let mut out = vec![0.0; n];
            if let Some((i, sg)) = s {
                out[i] = g[0] * sg;
            }
            Ok(vec![Some(out)])
        })
    }

    /// Gradient ratio `num / den` with degenerate handling, clipped to
    /// `[lo, hi]`: |den| < eps gives `hi` (or 1 when |num| < eps too).
    pub fn ratio_clip(&self, num: &Var, den: &Var, eps: f64, lo: f64, hi: f64) -> Var {
        let (nv, dv) = (num.value.clone(), den.value.clone());
        let n = nv.len();
        let mut value = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (nv[i], dv[i]);
            if b.abs() < eps {
                value.push(if a.abs() < eps {
                    1.0f64.clamp(lo, hi)
                } else {
                    hi
                });
                active.push(false);
            } else {
                let r = a / b;
                active.push(r > lo && r < hi);
                value.push(r.clamp(lo, hi));
            }
        }
        self.record("ratio_clip", value, &[num, den], move |g, _| {
            let mut gn = vec![0.0; n];
            let mut gd = vec![0.0; n];
            for i in 0..n {
                if active[i] {
                    gn[i] = g[i] / dv[i];
                    gd[i] = -g[i] * nv[i] / (dv[i] * dv[i]);
                }
            }
            Ok(vec![Some(gn), Some(gd)])
        })
    }

    // ----- dense layers ---------------------------------------------------------

    /// Batched affine map `Y = X W^T + b` with `X` of shape rows x inp
    /// (row-major), `W` of shape out x inp and `b` of length out.
    pub fn dense(&self, x: &Var, w: &Var, b: &Var, inp: usize, out: usize) -> Var {
        assert_eq!(x.len() % inp, 0, "dense input width");
        assert_eq!(w.len(), out * inp, "dense weight shape");
        assert_eq!(b.len(), out, "dense bias shape");
        let rows = x.len() / inp;
        let mut value = vec![0.0; rows * out];
        for r in 0..rows {
            value[r * out..(r + 1) * out].copy_from_slice(&b.value);
        }
        if rows > 0 {
            // SAFETY: slices sized rows*inp, out*inp and rows*out match the
            // strides passed in.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    inp,
                    out,
                    1.0,
                    x.value.as_ptr(),
                    inp as isize,
                    1,
                    w.value.as_ptr(),
                    1,
                    inp as isize,
                    1.0,
                    value.as_mut_ptr(),
                    out as isize,
                    1,
                );
            }
        }
        let (xv, wv) = (x.value.clone(), w.value.clone());
        self.record("dense", value, &[x, w, b], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; rows * inp];
                if rows > 0 {
                    // SAFETY: g is rows x out, w is out x inp, gx is rows x inp.
                    unsafe {
                        matrixmultiply::dgemm(
                            rows,
                            out,
                            inp,
                            1.0,
                            g.as_ptr(),
                            out as isize,
                            1,
                            wv.as_ptr(),
                            inp as isize,
                            1,
                            0.0,
                            gx.as_mut_ptr(),
                            inp as isize,
                            1,
                        );
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; out * inp];
                if rows > 0 {
                    // SAFETY: g^T is out x rows, x is rows x inp, gw is out x inp.
                    unsafe {
                        matrixmultiply::dgemm(
                            out,
                            rows,
                            inp,
                            1.0,
                            g.as_ptr(),
                            1,
                            out as isize,
                            xv.as_ptr(),
                            inp as isize,
                            1,
                            0.0,
                            gw.as_mut_ptr(),
                            inp as isize,
                            1,
                        );
                    }
                }
                gw
            });
            let gb = needs[2].then(|| {
                let mut gb = vec![0.0; out];
                for row in g.chunks(out) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                gb
            });
            Ok(vec![gx, gw, gb])
        })
    }

    // ----- linear systems -------------------------------------------------------

    /// Solves `A x = rhs` where `values` fills `pattern`. The adjoint solves
    /// `A^T lambda = x_bar`, then `rhs_bar = lambda` and
    /// `A_bar[i,j] = -lambda_i x_j` on the stored pattern.
    pub fn linear_solve(
        &self,
        pattern: &Arc<CsrPattern>,
        values: &Var,
        rhs: &Var,
        guess: Option<&[f64]>,
        settings: &SolverSettings,
    ) -> Result<(Var, linalg::SolveStats), SolveError> {
        let n = pattern.n();
        let mut x = guess.map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stats = linalg::solve(pattern, &values.value, &rhs.value, &mut x, settings)?;
        let xv = Rc::new(x.clone());
        let vals = values.value.clone();
        let pat = Arc::clone(pattern);
        let settings = *settings;
        let symmetric = pattern.is_symmetric(&values.value);
        let var = self.record("linear_solve", x, &[values, rhs], move |g, needs| {
            let at = if symmetric {
                vals.as_ref().clone()
            } else {
                pat.transpose_values(&vals)
            };
            let mut lambda = vec![0.0; pat.n()];
            let mut adj_settings = settings;
            if adj_settings.kind == linalg::SolverKind::Cg && !symmetric {
                adj_settings.kind = linalg::SolverKind::BiCgStab;
            }
            linalg::solve(&pat, &at, g, &mut lambda, &adj_settings)?;
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; pat.nnz()];
                let (rp, cols) = (pat.row_ptr(), pat.cols());
                for i in 0..pat.n() {
                    for k in rp[i]..rp[i + 1] {
                        ga[k] = -lambda[i] * xv[cols[k]];
                    }
                }
                ga
            });
            Ok(vec![ga, needs[1].then_some(lambda)])
        });
        Ok((var, stats))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

const EXP2_TABLE: [f64; 32] = [
    1.0,
    1.0218971486541166,
    1.0442737824274138,
    1.0671404006768237,
    1.0905077326652577,
    1.1143867425958924,
    1.1387886347566916,
    1.1637248587775775,
    1.189207115002721,
    1.215247359980469,
    1.241857812073484,
    1.2690509571917332,
    1.2968395546510096,
    1.3252366431597413,
    1.3542555469368927,
    1.383909881963832,
    std::f64::consts::SQRT_2,
    1.4451808069770467,
    1.4768261459394993,
    1.5091644275934228,
    1.5422108254079407,
    1.5759808451078865,
    1.6104903319492543,
    1.645755478153965,
    1.681792830507429,
    1.718619298122478,
    1.7562521603732995,
    1.7947090750031072,
    1.8340080864093424,
    1.8741676341103,
    1.9152065613971474,
    1.9571441241754002,
];

/// tanh from a table-reduced exp; absolute error within a few ulp of 1 and
/// several times cheaper than libm, which matters because the network
/// evaluates about a million of these per step.
#[inline]
#[allow(clippy::excessive_precision)]
pub fn tanh(x: f64) -> f64 {
    const LN2_32_HI: f64 = 6.931_471_803_691_238_2e-1 / 32.0;
    const LN2_32_LO: f64 = 1.908_214_929_270_587_7e-10 / 32.0;
    // round to nearest without a libm call
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    // exp(y) for y in [-40, 0]; below that tanh is 1 to double precision
    let y = (-2.0 * x.abs()).max(-40.0);
    let kf = (y * (32.0 * std::f64::consts::LOG2_E) + SHIFT) - SHIFT;
    let r = (y - kf * LN2_32_HI) - kf * LN2_32_LO;
    let k = kf as i64;
    let r2 = r * r;
    let e = (1.0 + r)
        + r2 * ((0.5 + r * (1.0 / 6.0))
            + r2 * ((1.0 / 24.0 + r * (1.0 / 120.0)) + r2 * (1.0 / 720.0)));
    let scale = f64::from_bits((((k >> 5) + 1023) as u64) << 52);
    let t = e * EXP2_TABLE[(k & 31) as usize] * scale;
    let v = ((1.0 - t) / (1.0 + t)).copysign(x);
    if x.is_nan() {
        x
    } else {
        v
    }
}

/// One finite-difference comparison entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub tape: f64,
    pub fd: f64,
    pub rel_error: f64,
}

/// Tape gradient of a scalar objective plus optional finite-difference
/// comparison records.
#[derive(Debug, Clone, Default)]
pub struct GradientReport {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub checks: Vec<GradCheckEntry>,
}

impl GradientReport {
    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.gradient.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.rel_error))
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.gradient.iter().all(|g| g.is_finite())
    }
}

/// Relative error with an absolute floor: entries whose magnitudes are both
/// below `floor` are compared absolutely.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central finite differences of `f` at `x` along the listed coordinates,
/// compared against `tape_grad`.
pub fn finite_difference_check<F>(
    mut f: F,
    x: &[f64],
    tape_grad: &[f64],
    indices: &[usize],
    h: f64,
    floor: f64,
) -> Vec<GradCheckEntry>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            let fd = (fp - fm) / (2.0 * h);
            GradCheckEntry {
                index: i,
                tape: tape_grad[i],
                fd,
                rel_error: relative_error(tape_grad[i], fd, floor),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn tanh_matches_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.005 + 1e-7;
            assert!((super::tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        }
        assert_eq!(super::tanh(0.0), 0.0);
        assert_eq!(super::tanh(f64::INFINITY), 1.0);
        assert_eq!(super::tanh(-800.0), -1.0);
    }

    use super::*;

    fn grad1(f: impl Fn(&Tape, &Var) -> Var, x: &[f64]) -> Vec<f64> {
        let t = Tape::new();
        let v = t.leaf(x.to_vec());
        let y = f(&t, &v);
        let s = t.sum(&y);
        t.backward(&[(&s, vec![1.0])]).unwrap().wrt(&v)
    }

    fn fd1(f: impl Fn(&Tape, &Var) -> Var, x: &[f64], h: f64) -> Vec<f64> {
        let t = Tape::inactive();
        let eval = |x: &[f64]| -> f64 { f(&t, &Var::constant(x.to_vec())).value().iter().sum() };
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (eval(&p) - eval(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(f: impl Fn(&Tape, &Var) -> Var + Copy, x: &[f64]) {
        let g = grad1(f, x);
        let d = fd1(f, x, 1e-6);
        for (a, b) in g.iter().zip(&d) {
            assert!(relative_error(*a, *b, 1e-8) < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let a = t.leaf(vec![2.5]);
        let b = t.leaf(vec![-1.5]);
        let y = t.mul(&a, &b);
        let g = t.backward(&[(&y, vec![1.0])]).unwrap();
        assert_eq!(g.wrt(&a), vec![-1.5]);
        assert_eq!(g.wrt(&b), vec![2.5]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let g = grad1(|t, x| t.tanh(x), &[0.0]);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn composite_tanh_matches_fd() {
        // f(x) = tanh(2x) at x = 0.3
        let f = |t: &Tape, x: &Var| t.tanh(&t.scale(x, 2.0));
        let g = grad1(f, &[0.3])[0];
        let h = 1e-6f64;
        let fd = ((2.0 * (0.3 + h)).tanh() - (2.0 * (0.3 - h)).tanh()) / (2.0 * h);
        assert!(relative_error(g, fd, 1e-12) < 1e-8, "{g} {fd}");
    }

    #[test]
    fn elementwise_ops_match_fd() {
        let x = [0.3, -1.2, 2.0, 0.7];
        check(|t, x| t.div(&t.mul(x, x), &t.offset(&t.abs(x), 1.0)), &x);
        check(|t, x| t.sub(&t.relu(x), &t.scale(x, 0.5)), &x);
        check(|t, x| t.clamp(x, -1.0, 1.0), &x);
        check(
            |t, x| {
                let s = t.norm_scale(x);
                t.div(x, &s)
            },
            &x,
        );
        check(|t, x| t.mul(x, &t.sum(x)), &x);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let idx = Arc::new(vec![2, NO_INDEX, 0, 2]);
        let x = [1.0, 2.0, 3.0];
        let t = Tape::inactive();
        let y = t.gather(&Var::constant(x.to_vec()), idx.clone());
        assert_eq!(y.value(), &[3.0, 0.0, 1.0, 3.0]);
        check(
            |t, x| {
                let g = t.gather(x, Arc::new(vec![2, NO_INDEX, 0, 2]));
                t.mul(&g, &g)
            },
            &x,
        );
        check(
            |t, x| {
                let s = t.scatter_add(x, Arc::new(vec![1, 1, NO_INDEX]), 2);
                t.mul(&s, &s)
            },
            &x,
        );
    }

    #[test]
    fn dense_layer_matches_fd() {
        let (inp, out, rows) = (3, 2, 4);
        let x: Vec<f64> = (0..rows * inp).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..out * inp).map(|i| (i as f64 * 0.91).cos()).collect();
        let b = vec![0.1, -0.2];
        let run = |t: &Tape, xv: &Var, wv: &Var, bv: &Var| -> Var {
            let y = t.tanh(&t.dense(xv, wv, bv, inp, out));
            t.sum(&t.mul(&y, &y))
        };
        let t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = run(&t, &xv, &wv, &bv);
        let g = t.backward(&[(&y, vec![1.0])]).unwrap();
        let (gx, gw, gb) = (g.wrt(&xv), g.wrt(&wv), g.wrt(&bv));
        let ti = Tape::inactive();
        let eval = |x: &[f64], w: &[f64], b: &[f64]| {
            run(
                &ti,
                &Var::constant(x.to_vec()),
                &Var::constant(w.to_vec()),
                &Var::constant(b.to_vec()),
            )
            .item()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&p, &w, &b) - eval(&m, &w, &b)) / (2.0 * h);
            assert!(relative_error(gx[i], fd, 1e-9) < 1e-6);
        }
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&x, &p, &b) - eval(&x, &m, &b)) / (2.0 * h);
            assert!(relative_error(gw[i], fd, 1e-9) < 1e-6);
        }
        for i in 0..b.len() {
            let (mut p, mut m) = (b.clone(), b.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&x, &w, &p) - eval(&x, &w, &m)) / (2.0 * h);
            assert!(relative_error(gb[i], fd, 1e-9) < 1e-6);
        }
    }

    #[test]
    fn ratio_clip_degenerate_cases() {
        let t = Tape::inactive();
        let num = Var::constant(vec![1.0, 1.0, 0.0, -3.0, 0.5]);
        let den = Var::constant(vec![1.0, 0.0, 0.0, 1.0, 1.0]);
        let r = t.ratio_clip(&num, &den, 1e-12, 0.0, 2.0);
        assert_eq!(r.value(), &[1.0, 2.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn identity_solve_adjoint() {
        let rows: Vec<Vec<usize>> = (0..3).map(|i| vec![i]).collect();
        let p = Arc::new(CsrPattern::from_rows(&rows));
        let t = Tape::new();
        let a = t.leaf(vec![1.0; 3]);
        let b = t.leaf(vec![1.0, 2.0, 3.0]);
        let (x, _) = t
            .linear_solve(&p, &a, &b, None, &SolverSettings::direct())
            .unwrap();
        let xbar = vec![0.5, -1.0, 2.0];
        let g = t.backward(&[(&x, xbar.clone())]).unwrap();
        assert_eq!(g.wrt(&b), xbar);
        let expect: Vec<f64> = (0..3).map(|i| -xbar[i] * x.value()[i]).collect();
        assert_eq!(g.wrt(&a), expect);
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0]);
        let unused = t.leaf(vec![3.0]);
        let y = t.sum(&a);
        let g = t.backward(&[(&y, vec![1.0])]).unwrap();
        assert_eq!(g.wrt(&unused), vec![0.0]);
    }

    #[test]
    fn inactive_tape_records_nothing() {
        let t = Tape::inactive();
        let a = t.leaf(vec![1.0]);
        let b = t.tanh(&a);
        assert!(!b.is_traced());
        assert!(t.is_empty());
    }

    #[test]
    fn replay_is_deterministic() {
        let t = Tape::new();
        let a = t.leaf((0..50).map(|i| i as f64 * 0.1).collect());
        let y = t.sum(&t.tanh(&t.mul(&a, &a)));
        let g1 = t.backward(&[(&y, vec![1.0])]).unwrap().wrt(&a);
        let g2 = t.backward(&[(&y, vec![1.0])]).unwrap().wrt(&a);
        assert_eq!(
            g1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
