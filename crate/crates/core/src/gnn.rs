//! Graph convolutions over mesh graphs: symmetric-normalized GCN and a
//! degree-1 B-spline kernel convolution driven by per-edge
//! pseudo-coordinates, plus global average pooling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{KernelGroup, KernelScatterPlan, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{GraphTopology, TriangleMesh};

/// Graph convolution family used by every submodel of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gcn,
    Spline,
}

impl LayerKind {
    /// Column label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            LayerKind::Gcn => "GCNConv",
            LayerKind::Spline => "SplineConv",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(LayerKind::Gcn),
            "spline" => Ok(LayerKind::Spline),
            _ => Err(Error::Invalid(format!("unknown layer type '{s}' (expected gcn or spline)"))),
        }
    }
}

static BASIS_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Number of pseudo-coordinate components clamped into `[0, 1]` by
/// [`spline_basis`] since process start.
pub fn basis_clamp_count() -> usize {
    BASIS_CLAMPS.load(Ordering::Relaxed)
}

/// Uniform Glorot initialization for an `fan_in × fan_out` matrix, repeated
/// `copies` times.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, copies: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..copies * fan_in * fan_out)
        .map(|_| T::from_f64(rng.random_range(-a..=a)))
        .collect()
}

/// GCN propagation for one graph: edge lists including self-loops and the
/// coefficient `1/√(d̂ᵢ d̂ⱼ)` per directed entry.
#[derive(Debug, Clone)]
pub struct GcnGraph<T> {
    num_nodes: usize,
    sources: Arc<[usize]>,
    targets: Arc<[usize]>,
    coef: Tensor<T>,
}

impl<T: Scalar> GcnGraph<T> {
    pub fn new(topology: &GraphTopology) -> Self {
        let n = topology.num_nodes();
        let dhat: Vec<f64> = (0..n).map(|i| (topology.degree(i) + 1) as f64).collect();
        let mut sources = Vec::with_capacity(n + 2 * topology.num_edges());
        let mut targets = Vec::with_capacity(sources.capacity());
        let mut coef = Vec::with_capacity(sources.capacity());
        for i in 0..n {
            targets.push(i);
            sources.push(i);
            coef.push(T::from_f64(1.0 / dhat[i]));
            for &j in topology.neighbors(i) {
                targets.push(i);
                sources.push(j);
                coef.push(T::from_f64(1.0 / (dhat[i] * dhat[j]).sqrt()));
            }
        }
        let m = coef.len();
        GcnGraph {
            num_nodes: n,
            sources: sources.into(),
            targets: targets.into(),
            coef: Tensor::new(vec![m, 1], coef).expect("one coefficient per entry"),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }
}

/// Per-directed-edge pseudo-coordinates `u(i, j) ∈ [0, 1]³`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCoords {
    /// `(i, j)` pairs: target node `i` receives from neighbor `j`.
    pub edges: Vec<(usize, usize)>,
    pub values: Vec<[f64; 3]>,
    /// Components clamped into `[0, 1]` while computing these values.
    pub clamped: usize,
}

impl PseudoCoords {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Normalization radius: the largest absolute displacement component over
/// all edges of `mesh`.
pub fn pseudo_scale(mesh: &TriangleMesh, topology: &GraphTopology) -> Result<f64> {
    let v = mesh.vertices();
    let r = topology
        .edges()
        .iter()
        .flat_map(|&(a, b)| (0..3).map(move |c| (v[b][c] - v[a][c]).abs()))
        .fold(0.0f64, f64::max);
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(Error::InvalidMesh(format!(
            "{}: pseudo-coordinate scale is {r}",
            mesh.structure()
        )))
    }
}

/// `u(i, j) = (pⱼ − pᵢ)/(2r) + 0.5`, clamped to `[0, 1]`, for both directions
/// of every edge. Entries are ordered by target node, then by neighbor.
pub fn compute_pseudo(mesh: &TriangleMesh, topology: &GraphTopology, scale: f64) -> Result<PseudoCoords> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidMesh(format!("pseudo-coordinate scale is {scale}")));
    }
    if topology.num_nodes() != mesh.num_vertices() {
        return Err(Error::shape(
            "compute_pseudo",
            format!("{} nodes vs {} vertices", topology.num_nodes(), mesh.num_vertices()),
        ));
    }
    let v = mesh.vertices();
    let mut edges = Vec::with_capacity(2 * topology.num_edges());
    let mut values = Vec::with_capacity(edges.capacity());
    let mut clamped = 0;
    for i in 0..topology.num_nodes() {
        for &j in topology.neighbors(i) {
            let mut u = [0.0; 3];
            for c in 0..3 {
                let raw = (v[j][c] - v[i][c]) / (2.0 * scale) + 0.5;
                if !(0.0..=1.0).contains(&raw) {
                    clamped += 1;
                }
                u[c] = raw.clamp(0.0, 1.0);
            }
            edges.push((i, j));
            values.push(u);
        }
    }
    Ok(PseudoCoords { edges, values, clamped })
}

/// Non-zero degree-1 tensor-product basis functions at `u` for `k` knots per
/// dimension, as `(kernel index, value)` pairs. The kernel index puts
/// dimension 0 fastest: `i₀ + k·i₁ + k²·i₂`.
pub fn spline_basis(u: Vec3, kernel_size: usize) -> Vec<(usize, f64)> {
    assert!(kernel_size >= 1, "kernel_size must be at least 1");
    let k = kernel_size;
    let mut per_dim = [[(0usize, 0.0f64); 2]; 3];
    for (d, slot) in per_dim.iter_mut().enumerate() {
        let mut x = u[d];
        if !(0.0..=1.0).contains(&x) {
            BASIS_CLAMPS.fetch_add(1, Ordering::Relaxed);
            x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
        }
        if k == 1 {
            *slot = [(0, 1.0), (0, 0.0)];
            continue;
        }
        let p = x * (k - 1) as f64;
        let lo = (p.floor() as usize).min(k - 2);
        let frac = p - lo as f64;
        *slot = [(lo, 1.0 - frac), (lo + 1, frac)];
    }
    let mut out = Vec::with_capacity(8);
    for &(i2, w2) in &per_dim[2] {
        for &(i1, w1) in &per_dim[1] {
            for &(i0, w0) in &per_dim[0] {
                let w = w0 * w1 * w2;
                if w != 0.0 {
                    out.push((i0 + k * i1 + k * k * i2, w));
                }
            }
        }
    }
    out
}

/// Spline propagation for one graph: basis weights already divided by the
/// target's degree, grouped by kernel.
#[derive(Debug, Clone)]
pub struct SplineGraph<T> {
    kernel_size: usize,
    plan: Arc<KernelScatterPlan<T>>,
}

impl<T: Scalar> SplineGraph<T> {
    pub fn new(topology: &GraphTopology, pseudo: &PseudoCoords, kernel_size: usize) -> Result<Self> {
        if kernel_size == 0 {
            return Err(Error::Invalid("spline kernel_size must be at least 1".into()));
        }
        let n = topology.num_nodes();
        let mut expected = Vec::with_capacity(2 * topology.num_edges());
        for i in 0..n {
            expected.extend(topology.neighbors(i).iter().map(|&j| (i, j)));
        }
        if pseudo.edges != expected || pseudo.values.len() != expected.len() {
            return Err(Error::Invalid(format!(
                "pseudo-coordinates cover {} directed edges; graph needs {} in neighbor order",
                pseudo.edges.len(),
                expected.len()
            )));
        }
        let nk = kernel_size.pow(3);
        let mut groups: Vec<KernelGroup<T>> = (0..nk)
            .map(|kernel| KernelGroup { kernel, targets: Vec::new(), sources: Vec::new(), coefs: Vec::new() })
            .collect();
        for (&(i, j), &u) in pseudo.edges.iter().zip(&pseudo.values) {
            let inv_deg = 1.0 / topology.degree(i) as f64;
            for (kernel, b) in spline_basis(u, kernel_size) {
                let g = &mut groups[kernel];
                g.targets.push(i);
                g.sources.push(j);
                g.coefs.push(T::from_f64(b * inv_deg));
            }
        }
        groups.retain(|g| !g.targets.is_empty());
        Ok(SplineGraph {
            kernel_size,
            plan: Arc::new(KernelScatterPlan { n_out: n, groups }),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.plan.n_out
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
}

/// Propagation data for one graph under either layer family.
#[derive(Debug, Clone)]
pub enum GraphPlan<T> {
    Gcn(GcnGraph<T>),
    Spline(SplineGraph<T>),
}

impl<T: Scalar> GraphPlan<T> {
    pub fn num_nodes(&self) -> usize {
        match self {
            GraphPlan::Gcn(g) => g.num_nodes(),
            GraphPlan::Spline(g) => g.num_nodes(),
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            GraphPlan::Gcn(_) => LayerKind::Gcn,
            GraphPlan::Spline(_) => LayerKind::Spline,
        }
    }
}

fn check_rows(op: &'static str, tape: &Tape<impl Scalar>, x: Var, n: usize, din: usize) -> Result<()> {
    let s = tape.value(x).shape();
    if s != [n, din] {
        return Err(Error::shape(op, format!("features {s:?}, expected [{n}, {din}]")));
    }
    Ok(())
}

/// `H' = D̂^{-1/2} Â D̂^{-1/2} H W + b` with `Â = A + I`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcnLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        GcnLayer { name: name.into(), in_dim, out_dim }
    }

    pub fn num_parameters(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let w = glorot(rng, 1, self.in_dim, self.out_dim);
        store.insert(format!("{}.weight", self.name), Tensor::new(vec![self.in_dim, self.out_dim], w)?)?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_dim]))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, graph: &GcnGraph<T>) -> Result<Var> {
        check_rows("gcn_forward", tape, x, graph.num_nodes, self.in_dim)?;
        let w = tape.param(store, &format!("{}.weight", self.name))?;
        let b = tape.param(store, &format!("{}.bias", self.name))?;
        let h = tape.matmul(x, w)?;
        let msg = tape.gather_rows(h, graph.sources.clone())?;
        let coef = tape.constant(graph.coef.clone());
        let msg = tape.mul(msg, coef)?;
        let agg = tape.scatter_sum(msg, graph.targets.clone(), graph.num_nodes)?;
        tape.add(agg, b)
    }
}

/// `xᵢ' = xᵢ·W_root + (1/|N(i)|) Σⱼ Σ_b B_b(u(i,j))·(xⱼ·W_b) + bias`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplineLayer {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel_size: usize,
}

impl SplineLayer {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, kernel_size: usize) -> Self {
        SplineLayer { name: name.into(), in_dim, out_dim, kernel_size }
    }

    pub fn num_kernels(&self) -> usize {
        self.kernel_size.pow(3)
    }

    pub fn num_parameters(&self) -> usize {
        self.num_kernels() * self.in_dim * self.out_dim + self.in_dim * self.out_dim + self.out_dim
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let k = self.num_kernels();
        let w = glorot(rng, k, self.in_dim, self.out_dim);
        store.insert(format!("{}.weight", self.name), Tensor::new(vec![k, self.in_dim, self.out_dim], w)?)?;
        let root = glorot(rng, 1, self.in_dim, self.out_dim);
        store.insert(format!("{}.root", self.name), Tensor::new(vec![self.in_dim, self.out_dim], root)?)?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_dim]))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, graph: &SplineGraph<T>) -> Result<Var> {
        check_rows("spline_forward", tape, x, graph.num_nodes(), self.in_dim)?;
        if graph.kernel_size != self.kernel_size {
            return Err(Error::shape(
                "spline_forward",
                format!("graph kernel_size {} vs layer {}", graph.kernel_size, self.kernel_size),
            ));
        }
        let w = tape.param(store, &format!("{}.weight", self.name))?;
        let root = tape.param(store, &format!("{}.root", self.name))?;
        let b = tape.param(store, &format!("{}.bias", self.name))?;
        let self_term = tape.matmul(x, root)?;
        let agg = tape.kernel_scatter(x, w, graph.plan.clone())?;
        let h = tape.add(self_term, agg)?;
        tape.add(h, b)
    }
}

/// One convolution of either family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphLayer {
    Gcn(GcnLayer),
    Spline(SplineLayer),
}

impl GraphLayer {
    pub fn new(kind: LayerKind, name: impl Into<String>, in_dim: usize, out_dim: usize, kernel_size: usize) -> Self {
        match kind {
            LayerKind::Gcn => GraphLayer::Gcn(GcnLayer::new(name, in_dim, out_dim)),
            LayerKind::Spline => GraphLayer::Spline(SplineLayer::new(name, in_dim, out_dim, kernel_size)),
        }
    }

    pub fn num_parameters(&self) -> usize {
        match self {
            GraphLayer::Gcn(l) => l.num_parameters(),
            GraphLayer::Spline(l) => l.num_parameters(),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        match self {
            GraphLayer::Gcn(l) => l.init(store, rng),
            GraphLayer::Spline(l) => l.init(store, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, graph: &GraphPlan<T>) -> Result<Var> {
        match (self, graph) {
            (GraphLayer::Gcn(l), GraphPlan::Gcn(g)) => l.forward(tape, store, x, g),
            (GraphLayer::Spline(l), GraphPlan::Spline(g)) => l.forward(tape, store, x, g),
            (GraphLayer::Spline(_), GraphPlan::Gcn(_)) => Err(Error::Invalid(
                "spline layer needs pseudo-coordinates; graph was prepared for GCN".into(),
            )),
            (GraphLayer::Gcn(_), GraphPlan::Spline(_)) => {
                Err(Error::Invalid("GCN layer given a graph prepared for spline convolution".into()))
            }
        }
    }
}

/// Column-wise mean of node features.
pub fn global_average_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    match tape.value(x).shape() {
        [n, _] if *n > 0 => tape.mean(x, 0),
        s => Err(Error::shape("global_average_pool", format!("need a non-empty [n, d] input, got {s:?}"))),
    }
}
