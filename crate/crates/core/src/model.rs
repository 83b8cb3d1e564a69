//! Multi-graph shape encoder, standalone heads and the fusion MLP.
//!
//! Parameter paths:
//! `submodel.<structure>.conv{1,2,3}.{weight,root,bias}`, `fc{1,2}.{weight,bias}`
//! and `head.<i>.{weight,bias}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::descriptors::FPFH_DIM;
use crate::error::{Error, Result};
use crate::gnn::{global_average_pool, glorot, GraphLayer, GraphPlan, LayerKind};
use crate::mesh::StructureId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    /// Output width: one value in years, or two class logits.
    pub fn output_dim(self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification => 2,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            _ => Err(Error::Invalid(format!("unknown task '{s}' (expected regression or classification)"))),
        }
    }
}

/// Which inputs a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Shape branch plus its own head, trained end to end.
    Shape,
    /// Head over the image embedding alone.
    Image,
    /// Head over precomputed `[shape embedding, image embedding]`.
    Fusion,
    /// Shape branch and fusion head trained jointly.
    FusionEndToEnd,
}

impl Mode {
    pub fn key(self) -> &'static str {
        match self {
            Mode::Shape => "shape",
            Mode::Image => "image",
            Mode::Fusion => "fusion",
            Mode::FusionEndToEnd => "fusion_e2e",
        }
    }

    pub fn has_shape_branch(self) -> bool {
        matches!(self, Mode::Shape | Mode::FusionEndToEnd)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layer: LayerKind,
    pub task: Task,
    /// Widths of the three convolutions of every submodel.
    pub conv_widths: Vec<usize>,
    /// Spline knots per pseudo-coordinate dimension.
    pub kernel_size: usize,
    /// Widths of the two fully connected layers after concatenation.
    pub fc_widths: Vec<usize>,
    /// Hidden widths of the prediction head; empty means a linear head.
    pub head_hidden: Vec<usize>,
    pub image_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layer: LayerKind::Gcn,
            task: Task::Regression,
            conv_widths: vec![32, 32, 32],
            kernel_size: 5,
            fc_widths: vec![128, 64],
            head_hidden: vec![128],
            image_dim: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.len() != 3 {
            return Err(Error::Invalid(format!(
                "conv_widths must list exactly 3 widths, got {}",
                self.conv_widths.len()
            )));
        }
        if self.fc_widths.len() != 2 {
            return Err(Error::Invalid(format!("fc_widths must list exactly 2 widths, got {}", self.fc_widths.len())));
        }
        let all = self.conv_widths.iter().chain(&self.fc_widths).chain(&self.head_hidden);
        if all.copied().any(|w| w == 0) || self.image_dim == 0 {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        if self.layer == LayerKind::Spline && self.kernel_size == 0 {
            return Err(Error::Invalid("kernel_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn shape_embedding_dim(&self) -> usize {
        self.fc_widths[1]
    }

    pub fn head_input_dim(&self, mode: Mode) -> usize {
        match mode {
            Mode::Shape => self.shape_embedding_dim(),
            Mode::Image => self.image_dim,
            Mode::Fusion | Mode::FusionEndToEnd => self.shape_embedding_dim() + self.image_dim,
        }
    }

    fn conv_layers(&self, structure: StructureId) -> Vec<GraphLayer> {
        let mut dims = vec![FPFH_DIM];
        dims.extend(&self.conv_widths);
        (0..3)
            .map(|i| {
                GraphLayer::new(
                    self.layer,
                    format!("submodel.{}.conv{}", structure.key(), i + 1),
                    dims[i],
                    dims[i + 1],
                    self.kernel_size,
                )
            })
            .collect()
    }

    /// `(name, in, out)` for each dense layer of the head.
    fn head_layers(&self, mode: Mode) -> Vec<(String, usize, usize)> {
        let mut dims = vec![self.head_input_dim(mode)];
        dims.extend(&self.head_hidden);
        dims.push(self.task.output_dim());
        (0..dims.len() - 1).map(|i| (format!("head.{i}"), dims[i], dims[i + 1])).collect()
    }

    fn fc_layers(&self) -> [(String, usize, usize); 2] {
        let h3 = self.conv_widths[2];
        [
            ("fc1".into(), StructureId::COUNT * h3, self.fc_widths[0]),
            ("fc2".into(), self.fc_widths[0], self.fc_widths[1]),
        ]
    }

    /// Trainable scalar count of one submodel.
    pub fn submodel_parameters(&self) -> usize {
        self.conv_layers(StructureId::BrainStem).iter().map(GraphLayer::num_parameters).sum()
    }

    pub fn num_parameters(&self, mode: Mode) -> usize {
        let dense = |(_, i, o): &(String, usize, usize)| i * o + o;
        let head: usize = self.head_layers(mode).iter().map(dense).sum();
        if mode.has_shape_branch() {
            head + StructureId::COUNT * self.submodel_parameters() + self.fc_layers().iter().map(dense).sum::<usize>()
        } else {
            head
        }
    }
}

/// Node features and propagation data for one structure.
#[derive(Debug, Clone)]
pub struct StructureGraph<T> {
    pub features: Tensor<T>,
    pub graph: GraphPlan<T>,
}

/// All 15 structure graphs of one subject in canonical order.
#[derive(Debug, Clone)]
pub struct SubjectGraphs<T> {
    structures: Vec<StructureGraph<T>>,
}

impl<T: Scalar> SubjectGraphs<T> {
    pub fn new(subject: &str, structures: Vec<(StructureId, StructureGraph<T>)>) -> Result<Self> {
        let mut slots: Vec<Option<StructureGraph<T>>> = vec![None; StructureId::COUNT];
        for (id, g) in structures {
            if g.features.shape() != [g.graph.num_nodes(), FPFH_DIM] {
                return Err(Error::shape(
                    "subject_graphs",
                    format!("{subject}/{id}: features {:?} for {} nodes", g.features.shape(), g.graph.num_nodes()),
                ));
            }
            slots[id.index()] = Some(g);
        }
        let missing: Vec<StructureId> = StructureId::ALL.into_iter().filter(|s| slots[s.index()].is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingStructures { subject: subject.to_string(), structures: missing });
        }
        Ok(SubjectGraphs { structures: slots.into_iter().map(|s| s.expect("checked")).collect() })
    }

    pub fn get(&self, id: StructureId) -> &StructureGraph<T> {
        &self.structures[id.index()]
    }
}

/// One sample as seen by a model.
#[derive(Debug, Clone, Copy)]
pub enum SampleInput<'a, T> {
    Graphs(&'a SubjectGraphs<T>),
    Vector(&'a Tensor<T>),
    GraphsAndVector(&'a SubjectGraphs<T>, &'a Tensor<T>),
}

/// Architecture, input mode and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub mode: Mode,
    pub params: ParamStore<T>,
}

fn dense<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

fn init_dense<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::new(vec![i, o], glorot(rng, 1, i, o))?)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[o]))
}

impl<T: Scalar> Model<T> {
    /// Glorot-uniform weights and zero biases from a seeded stream.
    pub fn init(config: ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        if mode.has_shape_branch() {
            for s in StructureId::ALL {
                for layer in config.conv_layers(s) {
                    layer.init(&mut params, &mut rng)?;
                }
            }
            for (name, i, o) in config.fc_layers() {
                init_dense(&mut params, &mut rng, &name, i, o)?;
            }
        }
        for (name, i, o) in config.head_layers(mode) {
            init_dense(&mut params, &mut rng, &name, i, o)?;
        }
        Ok(Model { config, mode, params })
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// architecture.
    pub fn from_params(config: ModelConfig, mode: Mode, params: ParamStore<T>) -> Result<Self> {
        let reference = Model::<T>::init(config.clone(), mode, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::shape("load_model", format!("{name}: {:?} vs {:?}", p.shape(), t.shape())))
                }
                None => return Err(Error::Invalid(format!("checkpoint lacks parameter '{name}'"))),
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::Invalid(format!("checkpoint has unexpected parameter '{extra}'")));
        }
        Ok(Model { config, mode, params })
    }

    /// `pool(relu(conv3(relu(conv2(relu(conv1(x)))))))`
    pub fn submodel_embed(&self, tape: &mut Tape<T>, structure: StructureId, input: &StructureGraph<T>) -> Result<Var> {
        let mut h = tape.constant(input.features.clone());
        for layer in self.config.conv_layers(structure) {
            let z = layer.forward(tape, &self.params, h, &input.graph)?;
            h = tape.relu(z);
        }
        global_average_pool(tape, h)
    }

    /// `FC2(relu(FC1(concat of the 15 submodel embeddings)))`
    pub fn shape_embed(&self, tape: &mut Tape<T>, graphs: &SubjectGraphs<T>) -> Result<Var> {
        if !self.mode.has_shape_branch() {
            return Err(Error::Invalid(format!("{} model has no shape branch", self.mode.key())));
        }
        let mut parts = Vec::with_capacity(StructureId::COUNT);
        for s in StructureId::ALL {
            parts.push(self.submodel_embed(tape, s, graphs.get(s))?);
        }
        let cat = tape.concat(&parts)?;
        let h = dense(tape, &self.params, "fc1", cat)?;
        let h = tape.relu(h);
        dense(tape, &self.params, "fc2", h)
    }

    pub fn head(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let layers = self.config.head_layers(self.mode);
        let expect = layers[0].1;
        let got = tape.value(x).shape().to_vec();
        if got != [expect] {
            return Err(Error::shape("head", format!("input {got:?}, expected [{expect}]")));
        }
        let mut h = x;
        for (i, (name, _, _)) in layers.iter().enumerate() {
            h = dense(tape, &self.params, name, h)?;
            if i + 1 < layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Output vector for one sample: `[age]` or two logits.
    pub fn forward(&self, tape: &mut Tape<T>, input: SampleInput<'_, T>) -> Result<Var> {
        let x = match (self.mode, input) {
            (Mode::Shape, SampleInput::Graphs(g)) => self.shape_embed(tape, g)?,
            (Mode::Image | Mode::Fusion, SampleInput::Vector(v)) => tape.constant(v.clone()),
            (Mode::FusionEndToEnd, SampleInput::GraphsAndVector(g, v)) => {
                let s = self.shape_embed(tape, g)?;
                let v = tape.constant(v.clone());
                tape.concat(&[s, v])?
            }
            (mode, _) => {
                return Err(Error::Invalid(format!("{} model given the wrong kind of input", mode.key())));
            }
        };
        self.head(tape, x)
    }

    /// Forward pass without gradient bookkeeping beyond one scratch tape.
    pub fn predict(&self, input: SampleInput<'_, T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, input)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Shape embedding of one subject.
    pub fn embed(&self, graphs: &SubjectGraphs<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let y = self.shape_embed(&mut tape, graphs)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), mode: self.mode, params: self.params.cast() }
    }
}

/// Softmax of two or more logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::fpfh;
    use crate::gnn::{compute_pseudo, pseudo_scale, GcnGraph, SplineGraph};
    use crate::mesh::{icosphere, mesh_to_graph, TriangleMesh};
    use rand::seq::SliceRandom;

    fn small_config(layer: LayerKind, task: Task) -> ModelConfig {
        ModelConfig {
            layer,
            task,
            conv_widths: vec![4, 4, 3],
            kernel_size: 2,
            fc_widths: vec![6, 5],
            head_hidden: vec![4],
            image_dim: 3,
        }
    }

    fn structure_graph(mesh: &TriangleMesh, layer: LayerKind, k: usize) -> StructureGraph<f64> {
        let topo = mesh_to_graph(mesh);
        let f = fpfh(mesh, &topo).unwrap();
        let features = Tensor::new(
            vec![topo.num_nodes(), FPFH_DIM],
            f.as_slice().iter().map(|&x| x as f64 / 100.0).collect(),
        )
        .unwrap();
        let graph = match layer {
            LayerKind::Gcn => GraphPlan::Gcn(GcnGraph::new(&topo)),
            LayerKind::Spline => {
                let r = pseudo_scale(mesh, &topo).unwrap();
                GraphPlan::Spline(SplineGraph::new(&topo, &compute_pseudo(mesh, &topo, r).unwrap(), k).unwrap())
            }
        };
        StructureGraph { features, graph }
    }

    fn subject(layer: LayerKind, k: usize, stretch: impl Fn(StructureId) -> f64) -> SubjectGraphs<f64> {
        let (v, f) = icosphere(1, 1.0);
        let parts = StructureId::ALL
            .into_iter()
            .map(|s| {
                let a = stretch(s);
                let vs = v.iter().map(|p| [p[0] * a, p[1], p[2] * (2.0 - a)]).collect();
                let mesh = TriangleMesh::new(vs, f.clone(), s).unwrap();
                (s, structure_graph(&mesh, layer, k))
            })
            .collect();
        SubjectGraphs::new("s", parts).unwrap()
    }

    #[test]
    fn gcn_submodel_parameter_count() {
        let c = ModelConfig::default();
        assert_eq!(c.submodel_parameters(), 33 * 32 + 32 + 32 * 32 + 32 + 32 * 32 + 32);
        let m = Model::<f32>::init(c.clone(), Mode::Shape, 1).unwrap();
        assert_eq!(m.params.num_scalars_with_prefix("submodel.hippocampus_l."), c.submodel_parameters());
        assert_eq!(m.params.num_scalars(), c.num_parameters(Mode::Shape));
        let expected_total = 15 * c.submodel_parameters() + (480 * 128 + 128) + (128 * 64 + 64) + (64 * 128 + 128) + (128 + 1);
        assert_eq!(m.params.num_scalars(), expected_total);
    }

    #[test]
    fn spline_and_head_parameter_counts() {
        let c = ModelConfig { layer: LayerKind::Spline, task: Task::Classification, ..ModelConfig::default() };
        let conv = |i: usize, o: usize| 125 * i * o + i * o + o;
        assert_eq!(c.submodel_parameters(), conv(33, 32) + 2 * conv(32, 32));
        let fusion = Model::<f32>::init(c.clone(), Mode::Fusion, 0).unwrap();
        assert_eq!(fusion.params.num_scalars(), (576 * 128 + 128) + (128 * 2 + 2));
        let linear = ModelConfig { head_hidden: vec![], ..c };
        assert_eq!(linear.num_parameters(Mode::Image), 512 * 2 + 2);
    }

    #[test]
    fn missing_structure_is_error() {
        let full = subject(LayerKind::Gcn, 2, |_| 1.0);
        let parts: Vec<_> = StructureId::ALL[..14].iter().map(|&s| (s, full.get(s).clone())).collect();
        match SubjectGraphs::new("sub-01", parts) {
            Err(Error::MissingStructures { subject, structures }) => {
                assert_eq!(subject, "sub-01");
                assert_eq!(structures, vec![StructureId::AccumbensRight]);
            }
            other => panic!("{other:?}"),
        }
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_embedding_and_bias_output() {
        let c = small_config(LayerKind::Gcn, Task::Regression);
        let mut m = Model::<f64>::init(c, Mode::Shape, 3).unwrap();
        zero_all(&mut m.params);
        let g = subject(LayerKind::Gcn, 2, |_| 1.0);
        let mut tape = Tape::new();
        let e = m.submodel_embed(&mut tape, StructureId::BrainStem, g.get(StructureId::BrainStem)).unwrap();
        assert!(tape.value(e).data().iter().all(|&x| x == 0.0));
        m.params.set("head.1.bias", Tensor::vector(vec![42.5])).unwrap();
        assert_eq!(m.predict(SampleInput::Graphs(&g)).unwrap(), vec![42.5]);
    }

    #[test]
    fn multi_graph_with_zero_submodels_by_hand() {
        let c = small_config(LayerKind::Gcn, Task::Regression);
        let mut m = Model::<f64>::init(c, Mode::Shape, 3).unwrap();
        zero_all(&mut m.params);
        let b1 = [0.5, -1.0, 2.0, 0.0, -0.25, 1.5];
        m.params.set("fc1.bias", Tensor::vector(b1.to_vec())).unwrap();
        let mut w2 = vec![0.0; 30];
        for i in 0..5 {
            w2[i * 5 + i] = 1.0 + i as f64;
        }
        w2[5 * 5] = 3.0;
        m.params.set("fc2.weight", Tensor::matrix(6, 5, w2.clone()).unwrap()).unwrap();
        let b2 = [0.1, 0.2, 0.3, 0.4, 0.5];
        m.params.set("fc2.bias", Tensor::vector(b2.to_vec())).unwrap();
        // relu(b1) = (0.5, 0, 2, 0, 0, 1.5); W2ᵀ relu(b1) = (0.5, 0, 6, 0, 0) + 3·1.5 in column 0
        let expect = [0.1 + 0.5 + 4.5, 0.2, 0.3 + 6.0, 0.4, 0.5];
        let g = subject(LayerKind::Gcn, 2, |_| 1.0);
        let got = m.embed(&g).unwrap();
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn three_node_path_scalar_embedding() {
        // Conv widths 1, 1x1 weights w1=2, w2=1, w3=0.5; biases 0.
        let c = ModelConfig {
            conv_widths: vec![1, 1, 1],
            ..small_config(LayerKind::Gcn, Task::Regression)
        };
        let mut m = Model::<f64>::init(c, Mode::Shape, 0).unwrap();
        zero_all(&mut m.params);
        let mut w1 = vec![0.0; FPFH_DIM];
        w1[0] = 2.0;
        m.params.set("submodel.brainstem.conv1.weight", Tensor::matrix(FPFH_DIM, 1, w1).unwrap()).unwrap();
        m.params.set("submodel.brainstem.conv2.weight", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        m.params.set("submodel.brainstem.conv3.weight", Tensor::matrix(1, 1, vec![0.5]).unwrap()).unwrap();
        let topo = crate::mesh::GraphTopology::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let mut feats = vec![0.0; 3 * FPFH_DIM];
        feats[0] = 1.0;
        feats[FPFH_DIM] = -1.0;
        feats[2 * FPFH_DIM] = 3.0;
        let input = StructureGraph {
            features: Tensor::matrix(3, FPFH_DIM, feats).unwrap(),
            graph: GraphPlan::Gcn(GcnGraph::new(&topo)),
        };
        // P = normalized Â for the path, d̂ = (2, 3, 2).
        let s6 = 1.0 / 6f64.sqrt();
        let p = [[0.5, s6, 0.0], [s6, 1.0 / 3.0, s6], [0.0, s6, 0.5]];
        let prop = |x: [f64; 3], w: f64| -> [f64; 3] {
            let mut y = [0.0; 3];
            for i in 0..3 {
                y[i] = ((0..3).map(|j| p[i][j] * x[j]).sum::<f64>() * w).max(0.0);
            }
            y
        };
        let h = prop(prop(prop([1.0, -1.0, 3.0], 2.0), 1.0), 0.5);
        let expect = (h[0] + h[1] + h[2]) / 3.0;
        let mut tape = Tape::new();
        let e = m.submodel_embed(&mut tape, StructureId::BrainStem, &input).unwrap();
        assert!((tape.value(e).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn left_right_swap_changes_embedding() {
        let c = small_config(LayerKind::Gcn, Task::Regression);
        let m = Model::<f64>::init(c, Mode::Shape, 5).unwrap();
        let stretch = |s: StructureId| match s {
            StructureId::HippocampusLeft => 1.4,
            StructureId::HippocampusRight => 0.7,
            _ => 1.0,
        };
        let swapped = |s: StructureId| match s {
            StructureId::HippocampusLeft => 0.7,
            StructureId::HippocampusRight => 1.4,
            _ => 1.0,
        };
        let a = m.embed(&subject(LayerKind::Gcn, 2, stretch)).unwrap();
        let b = m.embed(&subject(LayerKind::Gcn, 2, swapped)).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn fusion_weight_surgery_matches_shape_head() {
        let c = small_config(LayerKind::Gcn, Task::Regression);
        let fusion = Model::<f64>::init(c.clone(), Mode::Fusion, 8).unwrap();
        let mut shape = Model::<f64>::init(c.clone(), Mode::Shape, 9).unwrap();
        let f2 = c.shape_embedding_dim();
        let w = fusion.params.get("head.0.weight").unwrap();
        let cols = w.shape()[1];
        shape
            .params
            .set("head.0.weight", Tensor::matrix(f2, cols, w.data()[..f2 * cols].to_vec()).unwrap())
            .unwrap();
        for name in ["head.0.bias", "head.1.weight", "head.1.bias"] {
            shape.params.set(name, fusion.params.get(name).unwrap().clone()).unwrap();
        }
        let g = subject(LayerKind::Gcn, 2, |_| 1.1);
        let emb = shape.embed(&g).unwrap();
        let mut fused = emb.clone();
        fused.extend(std::iter::repeat_n(0.0, c.image_dim));
        let a = fusion.predict(SampleInput::Vector(&Tensor::vector(fused))).unwrap();
        let b = shape.predict(SampleInput::Graphs(&g)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let c = small_config(LayerKind::Gcn, Task::Classification);
        let m = Model::<f64>::init(c, Mode::Image, 2).unwrap();
        let out = m.predict(SampleInput::Vector(&Tensor::vector(vec![0.3, -2.0, 1.0]))).unwrap();
        assert_eq!(out.len(), 2);
        let p = softmax(&out);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_kind_is_error() {
        let c = small_config(LayerKind::Gcn, Task::Regression);
        let fusion = Model::<f64>::init(c, Mode::Fusion, 0).unwrap();
        let g = subject(LayerKind::Gcn, 2, |_| 1.0);
        assert!(fusion.predict(SampleInput::Graphs(&g)).is_err());
        assert!(fusion.predict(SampleInput::Vector(&Tensor::vector(vec![0.0; 3]))).is_err());
    }

    #[test]
    fn prediction_invariant_to_vertex_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for layer in [LayerKind::Gcn, LayerKind::Spline] {
            let c = ModelConfig { layer, ..small_config(layer, Task::Regression) };
            let m = Model::<f32>::init(c, Mode::Shape, 4).unwrap();
            let (v, f) = icosphere(2, 2.0);
            let base: Vec<(StructureId, TriangleMesh)> = StructureId::ALL
                .into_iter()
                .map(|s| {
                    let vs = v.iter().map(|p| [p[0] * (1.0 + 0.02 * s.index() as f64), p[1], p[2] + 0.1 * p[0] * p[0]]).collect();
                    (s, TriangleMesh::new(vs, f.clone(), s).unwrap())
                })
                .collect();
            let build = |meshes: &[(StructureId, TriangleMesh)], scales: &[f64]| {
                let parts = meshes
                    .iter()
                    .zip(scales)
                    .map(|((s, mesh), &r)| {
                        let topo = mesh_to_graph(mesh);
                        let feats = fpfh(mesh, &topo).unwrap();
                        let features = Tensor::new(
                            vec![topo.num_nodes(), FPFH_DIM],
                            feats.as_slice().iter().map(|x| x / 100.0).collect(),
                        )
                        .unwrap();
                        let graph = match layer {
                            LayerKind::Gcn => GraphPlan::Gcn(GcnGraph::new(&topo)),
                            LayerKind::Spline => GraphPlan::Spline(
                                SplineGraph::new(&topo, &compute_pseudo(mesh, &topo, r).unwrap(), 2).unwrap(),
                            ),
                        };
                        (*s, StructureGraph { features, graph })
                    })
                    .collect();
                SubjectGraphs::new("s", parts).unwrap()
            };
            let scales: Vec<f64> = base.iter().map(|(_, m)| pseudo_scale(m, &mesh_to_graph(m)).unwrap()).collect();
            let permuted: Vec<(StructureId, TriangleMesh)> = base
                .iter()
                .map(|(s, mesh)| {
                    let n = mesh.num_vertices();
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    let mut pv = vec![[0.0; 3]; n];
                    for (i, &p) in perm.iter().enumerate() {
                        pv[p] = mesh.vertices()[i];
                    }
                    let pf = mesh.faces().iter().map(|t| [perm[t[0]], perm[t[1]], perm[t[2]]]).collect();
                    (*s, TriangleMesh::new(pv, pf, *s).unwrap())
                })
                .collect();
            let a = m.predict(SampleInput::Graphs(&build(&base, &scales))).unwrap();
            let b = m.predict(SampleInput::Graphs(&build(&permuted, &scales))).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-4, "{layer:?}: {a:?} vs {b:?}");
        }
    }
}
