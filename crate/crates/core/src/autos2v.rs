//! Semantic-aligned branch: visual embedding, a searchable DAG cell for the
//! semantic embedding, alignment losses and nearest-neighbour prediction.
//!
//! The cell has an input node 0 (the projected attributes) and intermediate
//! nodes `1..=n`. Every node `j` receives one edge from each earlier node
//! `i < j`. A node is the sum of its incoming edge outputs and the cell
//! output is the sum of all intermediate nodes, L2-normalized per class.

use std::collections::BTreeMap;
use std::fmt;

use crate::dataio::ClassId;
use crate::error::{Error, Result};
use crate::numerics::{argmax, l2_normalize, softmax, Rng, Tape, Tensor, Var};
use crate::params::Parameters;

/// Edge from node `.0` to node `.1`.
pub type EdgeId = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    FullyConnected,
    GraphConvolution,
    SkipConnection,
    None,
}

impl OperationKind {
    pub const ALL: [OperationKind; 4] = [
        OperationKind::FullyConnected,
        OperationKind::GraphConvolution,
        OperationKind::SkipConnection,
        OperationKind::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::FullyConnected => "fully_connected",
            OperationKind::GraphConvolution => "graph_convolution",
            OperationKind::SkipConnection => "skip_connection",
            OperationKind::None => "none",
        }
    }
}

impl std::str::FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperationKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::parse(format!("unknown operation {s:?}")))
    }
}

/// All edges of an `n_nodes` cell, ordered by target node then source.
pub fn cell_edges(n_nodes: usize) -> Vec<EdgeId> {
    (1..=n_nodes).flat_map(|j| (0..j).map(move |i| (i, j))).collect()
}

/// Continuous architecture: one score per operation on every edge.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    pub n_nodes: usize,
    pub alpha: BTreeMap<EdgeId, Tensor>,
}

impl ArchParams {
    pub fn uniform(n_nodes: usize) -> Self {
        let alpha = cell_edges(n_nodes).into_iter().map(|e| (e, Tensor::zeros(&[4]))).collect();
        ArchParams { n_nodes, alpha }
    }

    pub fn random(n_nodes: usize, scale: f64, rng: &mut Rng) -> Self {
        let alpha = cell_edges(n_nodes)
            .into_iter()
            .map(|e| (e, rng.normal_tensor(&[4], scale)))
            .collect();
        ArchParams { n_nodes, alpha }
    }

    /// Scores of `±1e6` selecting exactly the operations of `cell`.
    pub fn one_hot(cell: &CellSpec) -> Self {
        let alpha = cell
            .ops
            .iter()
            .map(|(&e, &op)| {
                let mut t = Tensor::full(&[4], -1e6);
                t.data_mut()[op.index()] = 1e6;
                (e, t)
            })
            .collect();
        ArchParams { n_nodes: cell.n_nodes, alpha }
    }

    pub fn weights(&self, edge: EdgeId) -> Result<Tensor> {
        softmax(self.scores(edge)?)
    }

    fn scores(&self, edge: EdgeId) -> Result<&Tensor> {
        self.alpha
            .get(&edge)
            .ok_or_else(|| Error::invalid(format!("edge {edge:?} has no scores")))
    }
}

/// Discrete architecture: one operation per edge. Edges whose operation is
/// `none` are not retained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub n_nodes: usize,
    pub ops: BTreeMap<EdgeId, OperationKind>,
}

impl CellSpec {
    /// Hand-designed semantic embedding: two stacked FC+ReLU layers.
    pub fn two_layer_fc() -> Self {
        let ops = [
            ((0, 1), OperationKind::FullyConnected),
            ((0, 2), OperationKind::None),
            ((1, 2), OperationKind::FullyConnected),
        ];
        CellSpec { n_nodes: 2, ops: ops.into_iter().collect() }
    }

    /// Source nodes of the non-`none` edges entering `node`.
    pub fn retained(&self, node: usize) -> Vec<usize> {
        (0..node)
            .filter(|&i| self.ops.get(&(i, node)).is_some_and(|&op| op != OperationKind::None))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::invalid("cell needs at least one intermediate node"));
        }
        let expected = cell_edges(self.n_nodes);
        if self.ops.len() != expected.len() || expected.iter().any(|e| !self.ops.contains_key(e)) {
            return Err(Error::invalid(format!(
                "cell with {} nodes must list exactly the edges {expected:?}",
                self.n_nodes
            )));
        }
        for j in 1..=self.n_nodes {
            if self.retained(j).is_empty() {
                return Err(Error::invalid(format!("node {j} keeps no non-none input edge")));
            }
        }
        Ok(())
    }

    pub fn count(&self, op: OperationKind) -> usize {
        self.ops.values().filter(|&&o| o == op).count()
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    /// Parses `i j op_name` lines in any order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut ops = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let [i, j, op] = toks[..] else {
                return Err(Error::parse(format!("cell line {line:?} is not `i j op`")));
            };
            let i: usize = i.parse().map_err(|_| Error::parse(format!("bad node {i:?}")))?;
            let j: usize = j.parse().map_err(|_| Error::parse(format!("bad node {j:?}")))?;
            if i >= j {
                return Err(Error::invalid(format!("edge {i} {j} does not point forward")));
            }
            if ops.insert((i, j), op.parse()?).is_some() {
                return Err(Error::invalid(format!("edge {i} {j} listed twice")));
            }
        }
        let n_nodes = ops.keys().map(|&(_, j)| j).max().unwrap_or(0);
        let cell = CellSpec { n_nodes, ops };
        cell.validate()?;
        Ok(cell)
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in cell_edges(self.n_nodes) {
            if let Some(op) = self.ops.get(&e) {
                writeln!(f, "{} {} {}", e.0, e.1, op.name())?;
            }
        }
        Ok(())
    }
}

/// Per-edge argmax of the relaxed scores (ties to the lowest operation
/// index). A node whose edges all pick `none` keeps its best-scoring
/// non-`none` edge instead.
pub fn discretize(arch: &ArchParams) -> Result<CellSpec> {
    let mut ops = BTreeMap::new();
    for e in cell_edges(arch.n_nodes) {
        let w = arch.weights(e)?;
        ops.insert(e, OperationKind::ALL[argmax(w.data())]);
    }
    for j in 1..=arch.n_nodes {
        let all_none = (0..j).all(|i| ops[&(i, j)] == OperationKind::None);
        if !all_none {
            continue;
        }
        let mut best: Option<(f64, EdgeId, OperationKind)> = None;
        for i in 0..j {
            let scores = arch.scores((i, j))?;
            for op in &OperationKind::ALL[..3] {
                let s = scores.data()[op.index()];
                if best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, (i, j), *op));
                }
            }
        }
        let (_, e, op) = best.expect("node has at least one edge");
        ops.insert(e, op);
    }
    let cell = CellSpec { n_nodes: arch.n_nodes, ops };
    cell.validate()?;
    Ok(cell)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Continuous(ArchParams),
    Discrete(CellSpec),
}

impl Arch {
    pub fn n_nodes(&self) -> usize {
        match self {
            Arch::Continuous(a) => a.n_nodes,
            Arch::Discrete(c) => c.n_nodes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub gc_w: Tensor,
}

/// Visual embedding, semantic cell and the class graph.
#[derive(Clone, Debug, PartialEq)]
pub struct S2vModel {
    pub fv_w: Tensor,
    pub fv_b: Tensor,
    pub proj: Tensor,
    pub edges: BTreeMap<EdgeId, EdgeWeights>,
    /// Row-normalized `K×K` graph over all classes.
    pub adjacency: Tensor,
    /// All classes in adjacency / attribute-row order.
    pub classes: Vec<ClassId>,
    pub arch: Arch,
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeVars {
    pub fc_w: Var,
    pub fc_b: Var,
    pub gc_w: Var,
}

/// Tape handles for an [`S2vModel`]: weights in [`Parameters`] order, then
/// architecture scores in edge order (continuous cells only).
#[derive(Clone, Debug)]
pub struct S2vVars {
    pub fv_w: Var,
    pub fv_b: Var,
    pub proj: Var,
    pub edges: BTreeMap<EdgeId, EdgeVars>,
    pub alpha: BTreeMap<EdgeId, Var>,
    pub adjacency: Var,
}

impl S2vVars {
    pub fn weights(&self) -> Vec<Var> {
        let mut out = vec![self.fv_w, self.fv_b, self.proj];
        for ev in self.edges.values() {
            out.extend([ev.fc_w, ev.fc_b, ev.gc_w]);
        }
        out
    }

    pub fn alphas(&self) -> Vec<Var> {
        self.alpha.values().copied().collect()
    }
}

impl Parameters for S2vModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("s2v.fv.weight".into(), &self.fv_w),
            ("s2v.fv.bias".into(), &self.fv_b),
            ("s2v.proj".into(), &self.proj),
        ];
        for (&(i, j), ew) in &self.edges {
            out.push((format!("s2v.edge.{i}_{j}.fc.weight"), &ew.fc_w));
            out.push((format!("s2v.edge.{i}_{j}.fc.bias"), &ew.fc_b));
            out.push((format!("s2v.edge.{i}_{j}.gc.weight"), &ew.gc_w));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("s2v.fv.weight".into(), &mut self.fv_w),
            ("s2v.fv.bias".into(), &mut self.fv_b),
            ("s2v.proj".into(), &mut self.proj),
        ];
        for (&(i, j), ew) in &mut self.edges {
            out.push((format!("s2v.edge.{i}_{j}.fc.weight"), &mut ew.fc_w));
            out.push((format!("s2v.edge.{i}_{j}.fc.bias"), &mut ew.fc_b));
            out.push((format!("s2v.edge.{i}_{j}.gc.weight"), &mut ew.gc_w));
        }
        out
    }
}

/// Architecture scores exposed as named tensors; empty for discrete cells.
impl S2vModel {
    pub fn alpha_params(&self) -> Vec<(String, &Tensor)> {
        match &self.arch {
            Arch::Continuous(a) => {
                a.alpha.iter().map(|(&(i, j), t)| (format!("s2v.alpha.{i}_{j}"), t)).collect()
            }
            Arch::Discrete(_) => Vec::new(),
        }
    }

    pub fn alpha_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match &mut self.arch {
            Arch::Continuous(a) => a
                .alpha
                .iter_mut()
                .map(|(&(i, j), t)| (format!("s2v.alpha.{i}_{j}"), t))
                .collect(),
            Arch::Discrete(_) => Vec::new(),
        }
    }
}

pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::numeric("cosine distance of a zero-norm vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nu * nv))
}

fn check_row_normalized(adjacency: &Tensor) -> Result<usize> {
    let (k, k2) = adjacency.dims2()?;
    if k != k2 {
        return Err(Error::invalid(format!("adjacency {:?} is not square", adjacency.shape())));
    }
    for r in 0..k {
        let row = adjacency.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "adjacency row {r} sums to {sum}, expected a row-normalized non-negative matrix"
            )));
        }
    }
    Ok(k)
}

/// `relu(adjacency · h · weight)` for a row-normalized adjacency.
pub fn graph_conv(h: &Tensor, adjacency: &Tensor, weight: &Tensor) -> Result<Tensor> {
    check_row_normalized(adjacency)?;
    Ok(crate::numerics::relu(&adjacency.matmul(h)?.matmul(weight)?))
}

/// Class graph from attribute cosine similarity: each row keeps itself and
/// its `top_k` most similar classes (ties to the lower index), negative
/// similarities are clamped to zero, and rows are normalized to sum 1.
pub fn build_adjacency(attributes: &Tensor, top_k: usize) -> Result<Tensor> {
    let (k, _) = attributes.dims2()?;
    if k < 2 || top_k == 0 || top_k >= k {
        return Err(Error::invalid(format!("need K >= 2 and 1 <= top_k < K, got K={k} top_k={top_k}")));
    }
    for r in 0..k {
        if attributes.row(r).iter().all(|&v| v == 0.0) {
            return Err(Error::invalid(format!("attribute row {r} is all zero")));
        }
    }
    let unit = l2_normalize(attributes)?;
    let sim = unit.matmul(&unit.transpose()?)?;
    let mut out = Tensor::zeros(&[k, k]);
    for r in 0..k {
        let mut others: Vec<usize> = (0..k).filter(|&c| c != r).collect();
        others.sort_by(|&a, &b| sim.at(r, b).total_cmp(&sim.at(r, a)).then(a.cmp(&b)));
        let mut keep = vec![r];
        keep.extend_from_slice(&others[..top_k]);
        let weights: Vec<f64> = keep.iter().map(|&c| if c == r { 1.0 } else { sim.at(r, c).max(0.0) }).collect();
        let total: f64 = weights.iter().sum();
        for (&c, w) in keep.iter().zip(weights) {
            out.data_mut()[r * k + c] = w / total;
        }
    }
    Ok(out)
}

fn gap(x: &Tensor) -> Vec<f64> {
    let c = *x.shape().last().unwrap();
    let n = x.len() / c;
    let mut out = vec![0.0; c];
    for p in 0..n {
        for (o, v) in out.iter_mut().zip(&x.data()[p * c..(p + 1) * c]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Widths and graph for [`S2vModel::init`].
#[derive(Clone, Debug)]
pub struct S2vShape {
    pub channels: usize,
    pub attr_dim: usize,
    pub embed_dim: usize,
}

impl S2vModel {
    pub fn init(
        shape: &S2vShape,
        classes: Vec<ClassId>,
        adjacency: Tensor,
        arch: Arch,
        rng: &mut Rng,
    ) -> Result<Self> {
        let k = check_row_normalized(&adjacency)?;
        if k != classes.len() {
            return Err(Error::dim(format!("adjacency has {k} rows for {} classes", classes.len())));
        }
        if let Arch::Discrete(cell) = &arch {
            cell.validate()?;
        }
        let e = shape.embed_dim;
        let fv_w = rng.he(shape.channels, e);
        let proj = rng.normal_tensor(&[shape.attr_dim, e], (1.0 / shape.attr_dim as f64).sqrt());
        let edges = cell_edges(arch.n_nodes())
            .into_iter()
            .map(|edge| {
                let ew = EdgeWeights {
                    fc_w: rng.he(e, e),
                    fc_b: Tensor::zeros(&[e]),
                    gc_w: rng.he(e, e),
                };
                (edge, ew)
            })
            .collect();
        Ok(S2vModel { fv_w, fv_b: Tensor::zeros(&[e]), proj, edges, adjacency, classes, arch })
    }

    pub fn embed_dim(&self) -> usize {
        self.fv_w.shape()[1]
    }

    pub fn class_row(&self, class: ClassId) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::invalid(format!("unknown class {class}")))
    }

    /// Weights followed by architecture scores.
    pub fn all_tensors(&self) -> Vec<Tensor> {
        self.params()
            .into_iter()
            .chain(self.alpha_params())
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn bind(&self, tape: &Tape) -> S2vVars {
        let leaves: Vec<Var> = self.all_tensors().into_iter().map(|t| tape.leaf(t)).collect();
        self.vars_from(tape, &leaves)
    }

    /// Reassembles handles from leaves laid out as [`Self::all_tensors`].
    pub fn vars_from(&self, tape: &Tape, leaves: &[Var]) -> S2vVars {
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("leaf list matches parameter layout");
        let fv_w = next();
        let fv_b = next();
        let proj = next();
        let edges = self
            .edges
            .keys()
            .map(|&e| (e, EdgeVars { fc_w: next(), fc_b: next(), gc_w: next() }))
            .collect();
        let alpha = match &self.arch {
            Arch::Continuous(a) => a.alpha.keys().map(|&e| (e, next())).collect(),
            Arch::Discrete(_) => BTreeMap::new(),
        };
        S2vVars { fv_w, fv_b, proj, edges, alpha, adjacency: tape.leaf(self.adjacency.clone()) }
    }

    /// `B×E` unit rows: GAP, linear, ReLU, L2 normalization.
    pub fn embed_visual_on(&self, tape: &Tape, v: &S2vVars, xs: &[&Tensor]) -> Result<Var> {
        let c = self.fv_w.shape()[0];
        let mut pooled = Vec::with_capacity(xs.len() * c);
        for x in xs {
            if x.shape().last() != Some(&c) {
                return Err(Error::dim(format!("feature map {:?} does not have {c} channels", x.shape())));
            }
            pooled.extend(gap(x));
        }
        let g = tape.leaf(Tensor::new(&[xs.len(), c], pooled)?);
        let h = tape.relu(tape.add_row(tape.matmul(g, v.fv_w)?, v.fv_b)?)?;
        tape.normalize_rows(h)
    }

    fn apply_op(&self, tape: &Tape, v: &S2vVars, edge: EdgeId, op: OperationKind, h: Var) -> Result<Option<Var>> {
        let ev = &v.edges[&edge];
        Ok(match op {
            OperationKind::FullyConnected => {
                Some(tape.relu(tape.add_row(tape.matmul(h, ev.fc_w)?, ev.fc_b)?)?)
            }
            OperationKind::GraphConvolution => {
                let mixed = tape.matmul(v.adjacency, h)?;
                Some(tape.relu(tape.matmul(mixed, ev.gc_w)?)?)
            }
            OperationKind::SkipConnection => Some(h),
            OperationKind::None => None,
        })
    }

    /// Softmax(α)-weighted sum of all operations on one edge.
    pub fn mixed_op_on(&self, tape: &Tape, v: &S2vVars, edge: EdgeId, h: Var) -> Result<Var> {
        let alpha = *v
            .alpha
            .get(&edge)
            .ok_or_else(|| Error::contract("mixed operation needs a continuous architecture"))?;
        let w = tape.softmax(alpha)?;
        let mut acc: Option<Var> = None;
        for op in OperationKind::ALL {
            if let Some(out) = self.apply_op(tape, v, edge, op, h)? {
                let term = tape.scale_by(out, w, op.index())?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
        }
        Ok(acc.expect("three operations produce output"))
    }

    /// `K×E` unit rows for a `K×A` attribute matrix on the tape.
    pub fn embed_semantic_on(&self, tape: &Tape, v: &S2vVars, attributes: Var) -> Result<Var> {
        let n = self.arch.n_nodes();
        let mut nodes = vec![tape.matmul(attributes, v.proj)?];
        for j in 1..=n {
            let mut acc: Option<Var> = None;
            for i in 0..j {
                let out = match &self.arch {
                    Arch::Continuous(_) => Some(self.mixed_op_on(tape, v, (i, j), nodes[i])?),
                    Arch::Discrete(cell) => self.apply_op(tape, v, (i, j), cell.ops[&(i, j)], nodes[i])?,
                };
                if let Some(out) = out {
                    acc = Some(match acc {
                        Some(a) => tape.add(a, out)?,
                        None => out,
                    });
                }
            }
            let node = acc.ok_or_else(|| Error::invalid(format!("node {j} has no retained input")))?;
            nodes.push(node);
        }
        let mut out = nodes[1];
        for &node in &nodes[2..] {
            out = tape.add(out, node)?;
        }
        tape.normalize_rows(out)
    }

    /// Mean cosine distance between visual embeddings and their class
    /// semantic embeddings. `rows` index the semantic matrix.
    pub fn s2v_loss_on(&self, tape: &Tape, visual: Var, semantic: Var, rows: &[usize]) -> Result<Var> {
        let targets = tape.gather_rows(semantic, rows)?;
        let dots = tape.sum_all(tape.hadamard(visual, targets)?)?;
        tape.shift(tape.scale(dots, -1.0 / rows.len() as f64)?, 1.0)
    }

    /// Cross-entropy of `cos(f_v, g_j)/temperature` over the candidate rows
    /// `seen_rows`; `targets` index into `seen_rows`.
    pub fn cet_loss_on(
        &self,
        tape: &Tape,
        visual: Var,
        semantic: Var,
        seen_rows: &[usize],
        targets: &[usize],
        temperature: f64,
    ) -> Result<Var> {
        let seen = tape.gather_rows(semantic, seen_rows)?;
        let logits = tape.scale(tape.matmul(visual, tape.transpose(seen)?)?, 1.0 / temperature)?;
        tape.margin_cross_entropy(logits, targets, &vec![1.0; targets.len()])
    }

    pub fn embed_visual(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind(&tape);
        let out = tape.value(self.embed_visual_on(&tape, &v, &[x])?);
        let e = out.len();
        out.reshape(&[e])
    }

    pub fn embed_semantic(&self, attributes: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind(&tape);
        let a = tape.leaf(attributes.clone());
        Ok(tape.value(self.embed_semantic_on(&tape, &v, a)?))
    }

    pub fn mixed_op(&self, h: &Tensor, edge: EdgeId) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind(&tape);
        let leaf = tape.leaf(h.clone());
        Ok(tape.value(self.mixed_op_on(&tape, &v, edge, leaf)?))
    }

    /// Mean cosine distance for a batch against class embeddings `semantic`.
    pub fn s2v_loss(&self, xs: &[&Tensor], labels: &[ClassId], attributes: &Tensor) -> Result<f64> {
        let rows = labels.iter().map(|&l| self.class_row(l)).collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let v = self.bind(&tape);
        let visual = self.embed_visual_on(&tape, &v, xs)?;
        let a = tape.leaf(attributes.clone());
        let semantic = self.embed_semantic_on(&tape, &v, a)?;
        Ok(tape.scalar(self.s2v_loss_on(&tape, visual, semantic, &rows)?))
    }

    /// Class id nearest to `x` by cosine distance among `candidates`, with
    /// `semantic` the precomputed `K×E` class embeddings. Ties go to the
    /// lowest class id.
    pub fn nearest(&self, x: &Tensor, semantic: &Tensor, candidates: &[ClassId]) -> Result<ClassId> {
        let u = self.embed_visual(x)?;
        let mut best: Option<(f64, ClassId)> = None;
        let mut sorted = candidates.to_vec();
        sorted.sort_unstable();
        for c in sorted {
            let d = cosine_distance(u.data(), semantic.row(self.class_row(c)?))?;
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        best.map(|(_, c)| c).ok_or_else(|| Error::invalid("no candidate classes"))
    }
}

/// Nearest unseen class for `x`.
pub fn predict_unseen(
    x: &Tensor,
    model: &S2vModel,
    attributes: &Tensor,
    unseen_classes: &[ClassId],
) -> Result<ClassId> {
    let semantic = model.embed_semantic(attributes)?;
    model.nearest(x, &semantic, unseen_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(arch: Arch, seed: u64) -> (S2vModel, Tensor) {
        let mut rng = Rng::new(seed);
        let attrs = rng.uniform_tensor(&[4, 3], 0.1, 1.0);
        let adj = build_adjacency(&attrs, 2).unwrap();
        let shape = S2vShape { channels: 5, attr_dim: 3, embed_dim: 6 };
        (S2vModel::init(&shape, vec![0, 1, 2, 3], adj, arch, &mut rng).unwrap(), attrs)
    }

    #[test]
    fn operation_set_has_four_members() {
        assert_eq!(OperationKind::ALL.len(), 4);
        for op in OperationKind::ALL {
            assert_eq!(op.name().parse::<OperationKind>().unwrap(), op);
        }
    }

    #[test]
    fn every_node_connects_to_all_predecessors() {
        assert_eq!(cell_edges(3), vec![(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
    }

    #[test]
    fn discretize_examples() {
        let mut arch = ArchParams::uniform(1);
        arch.alpha.insert((0, 1), Tensor::vector(vec![10.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(discretize(&arch).unwrap().ops[&(0, 1)], OperationKind::FullyConnected);

        let tie = ArchParams::uniform(2);
        let cell = discretize(&tie).unwrap();
        assert!(cell.ops.values().all(|&op| op == OperationKind::FullyConnected));
    }

    #[test]
    fn all_none_nodes_promote_best_real_edge() {
        let mut arch = ArchParams::uniform(2);
        arch.alpha.insert((0, 1), Tensor::vector(vec![1.0, 2.0, 0.5, 5.0]).unwrap());
        arch.alpha.insert((0, 2), Tensor::vector(vec![0.1, 0.2, 0.3, 5.0]).unwrap());
        arch.alpha.insert((1, 2), Tensor::vector(vec![3.0, 0.0, 0.0, 5.0]).unwrap());
        let cell = discretize(&arch).unwrap();
        assert_eq!(cell.ops[&(0, 1)], OperationKind::GraphConvolution);
        assert_eq!(cell.ops[&(0, 2)], OperationKind::None);
        assert_eq!(cell.ops[&(1, 2)], OperationKind::FullyConnected);
        assert_eq!(cell.retained(2), vec![1]);
    }

    #[test]
    fn cell_text_round_trip_is_order_independent() {
        let text = "1 2 skip_connection\n0 1 graph_convolution\n0 2 none\n";
        let cell = CellSpec::from_text(text).unwrap();
        assert_eq!(cell.to_text(), "0 1 graph_convolution\n0 2 none\n1 2 skip_connection\n");
        assert_eq!(CellSpec::from_text(&cell.to_text()).unwrap(), cell);
        assert!(CellSpec::from_text("0 1 none\n").is_err());
        assert!(CellSpec::from_text("0 1 conv\n").is_err());
        assert!(CellSpec::from_text("0 2 fully_connected\n").is_err());
    }

    #[test]
    fn graph_conv_examples() {
        let h = Tensor::from_rows(&[vec![1.0, -2.0], vec![-0.5, 3.0]]).unwrap();
        let id = Tensor::identity(2);
        assert_eq!(graph_conv(&h, &id, &id).unwrap(), crate::numerics::relu(&h));

        let uniform = Tensor::full(&[2, 2], 0.5);
        let out = graph_conv(&h, &uniform, &id).unwrap();
        assert_eq!(out.row(0), out.row(1));

        let adj = Tensor::from_rows(&[vec![0.75, 0.25], vec![0.5, 0.5]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0]]).unwrap();
        // adj·h = [[0.625, -0.75], [0.25, 0.5]]; ·w = [[-0.125, -1.5], [0.75, 1.0]]
        let out = graph_conv(&h, &adj, &w).unwrap();
        let want = [0.0, 0.0, 0.75, 1.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }

        let bad = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(graph_conv(&h, &bad, &id), Err(Error::Validation(_))));
    }

    #[test]
    fn adjacency_examples() {
        let same = Tensor::full(&[3, 2], 0.5);
        let dense = build_adjacency(&same, 2).unwrap();
        assert!(dense.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let sparse = build_adjacency(&same, 1).unwrap();
        for r in 0..3 {
            let nz: Vec<f64> = sparse.row(r).iter().copied().filter(|&v| v > 0.0).collect();
            assert_eq!(nz.len(), 2);
            assert!(nz.iter().all(|v| (v - 0.5).abs() < 1e-12));
        }

        // cos(a0,a1)=0.8, cos(a0,a2)=0, cos(a1,a2)=0.6
        let attrs = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]]).unwrap();
        let adj = build_adjacency(&attrs, 1).unwrap();
        let want = [
            1.0 / 1.8, 0.8 / 1.8, 0.0,
            0.8 / 1.8, 1.0 / 1.8, 0.0,
            0.0, 0.6 / 1.6, 1.0 / 1.6,
        ];
        for (a, b) in adj.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{adj:?}");
        }

        assert!(build_adjacency(&attrs, 3).is_err());
        let zero = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(build_adjacency(&zero, 1).is_err());
    }

    #[test]
    fn mixed_op_one_hot_and_uniform() {
        let (mut m, _) = model(Arch::Continuous(ArchParams::uniform(1)), 3);
        let h = Rng::new(9).normal_tensor(&[4, 6], 1.0);
        let set = |m: &mut S2vModel, op: OperationKind| {
            let mut t = Tensor::full(&[4], -1e6);
            t.data_mut()[op.index()] = 1e6;
            if let Arch::Continuous(a) = &mut m.arch {
                a.alpha.insert((0, 1), t);
            }
        };
        set(&mut m, OperationKind::SkipConnection);
        let out = m.mixed_op(&h, (0, 1)).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        set(&mut m, OperationKind::None);
        assert!(m.mixed_op(&h, (0, 1)).unwrap().data().iter().all(|&v| v == 0.0));

        if let Arch::Continuous(a) = &mut m.arch {
            a.alpha.insert((0, 1), Tensor::zeros(&[4]));
        }
        let ew = &m.edges[&(0, 1)];
        let fc = crate::numerics::relu(&{
            let mut t = h.matmul(&ew.fc_w).unwrap();
            for r in 0..4 {
                for c in 0..6 {
                    t.data_mut()[r * 6 + c] += ew.fc_b.data()[c];
                }
            }
            t
        });
        let gc = graph_conv(&h, &m.adjacency, &ew.gc_w).unwrap();
        let out = m.mixed_op(&h, (0, 1)).unwrap();
        for k in 0..out.len() {
            let mean = (fc.data()[k] + gc.data()[k] + h.data()[k] + 0.0) / 4.0;
            assert!((out.data()[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_op_rejects_discrete_cell() {
        let (m, _) = model(Arch::Discrete(CellSpec::two_layer_fc()), 3);
        let h = Tensor::zeros(&[4, 6]);
        assert!(matches!(m.mixed_op(&h, (0, 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn skip_only_cell_passes_projection_through() {
        let ops = cell_edges(2).into_iter().map(|e| (e, OperationKind::SkipConnection)).collect();
        let (m, attrs) = model(Arch::Discrete(CellSpec { n_nodes: 2, ops }), 4);
        let out = m.embed_semantic(&attrs).unwrap();
        let want = l2_normalize(&attrs.matmul(&m.proj).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_none_continuous_cell_hits_zero_guard() {
        let ops: BTreeMap<_, _> = cell_edges(2).into_iter().map(|e| (e, OperationKind::None)).collect();
        let cell = CellSpec { n_nodes: 2, ops };
        assert!(cell.validate().is_err());
        let (m, attrs) = model(Arch::Continuous(ArchParams::one_hot(&cell)), 4);
        assert!(matches!(m.embed_semantic(&attrs), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_fc_node_by_hand() {
        let ops = [((0, 1), OperationKind::FullyConnected)].into_iter().collect();
        let (mut m, _) = model(Arch::Discrete(CellSpec { n_nodes: 1, ops }), 5);
        m.proj = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.0; 6], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let ew = m.edges.get_mut(&(0, 1)).unwrap();
        ew.fc_w = Tensor::identity(6);
        ew.fc_b = Tensor::new(&[6], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let attrs = Tensor::from_rows(&[vec![3.0, 9.0, 4.0], vec![-1.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let out = m.embed_semantic(&attrs).unwrap();
        // row 0: relu((3, 4, 0, …) + (0, 0, 1, …)) = (3, 4, 1) / √26
        let n = 26f64.sqrt();
        assert!((out.at(0, 0) - 3.0 / n).abs() < 1e-15);
        assert!((out.at(0, 1) - 4.0 / n).abs() < 1e-15);
        assert!((out.at(0, 2) - 1.0 / n).abs() < 1e-15);
        // row 1: relu((-1, 0, 1)) = (0, 0, 1)
        assert_eq!(out.row(1)[..3], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn visual_embedding_examples() {
        let (mut m, _) = model(Arch::Discrete(CellSpec::two_layer_fc()), 6);
        let x = Tensor::full(&[2, 2, 5], 0.7);
        assert!(gap(&x).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let e = m.embed_visual(&Rng::new(1).normal_tensor(&[2, 2, 5], 1.0)).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-12);

        m.fv_w = Tensor::zeros(&[5, 6]);
        m.fv_w.data_mut()[0] = 1.0; // channel 0 -> dim 0
        m.fv_w.data_mut()[6 + 1] = 2.0; // channel 1 -> dim 1
        let mut x = Tensor::zeros(&[1, 1, 5]);
        x.data_mut()[0] = 3.0;
        x.data_mut()[1] = 2.0;
        let e = m.embed_visual(&x).unwrap();
        assert!((e.data()[0] - 0.6).abs() < 1e-15);
        assert!((e.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_range_examples() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn prediction_examples() {
        let (m, attrs) = model(Arch::Discrete(CellSpec::two_layer_fc()), 7);
        let x = Rng::new(2).normal_tensor(&[2, 2, 5], 1.0);
        assert_eq!(predict_unseen(&x, &m, &attrs, &[2]).unwrap(), 2);
        // A semantic table whose row 3 equals f_v(x) exactly.
        let u = m.embed_visual(&x).unwrap();
        let mut sem = Rng::new(3).normal_tensor(&[4, 6], 1.0);
        sem.data_mut()[18..24].copy_from_slice(u.data());
        assert_eq!(m.nearest(&x, &sem, &[1, 2, 3]).unwrap(), 3);
        // ties go to the lowest id
        let same = Tensor::full(&[4, 6], 1.0);
        assert_eq!(m.nearest(&x, &same, &[3, 1, 2]).unwrap(), 1);
    }

    #[test]
    fn losses_pass_gradient_check() {
        for seed in [1, 2, 3] {
            let mut rng = Rng::new(100 + seed);
            let (m, attrs) = model(Arch::Continuous(ArchParams::random(2, 0.5, &mut rng)), seed);
            let xs: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[2, 2, 5], 1.0)).collect();
            let refs: Vec<&Tensor> = xs.iter().collect();
            let rows = [0, 2, 1];
            let f = |tape: &Tape, leaves: &[Var]| -> Result<Var> {
                let v = m.vars_from(tape, leaves);
                let visual = m.embed_visual_on(tape, &v, &refs)?;
                let a = tape.leaf(attrs.clone());
                let semantic = m.embed_semantic_on(tape, &v, a)?;
                let l1 = m.s2v_loss_on(tape, visual, semantic, &rows)?;
                let l2 = m.cet_loss_on(tape, visual, semantic, &[0, 1, 2], &rows, 0.1)?;
                tape.add(l1, tape.scale(l2, 0.3)?)
            };
            let err = crate::numerics::grad_check_many(f, &m.all_tensors(), 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
