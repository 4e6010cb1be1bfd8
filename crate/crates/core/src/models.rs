//! Student/teacher architectures: an MLP and the ConvNet-D family used in
//! the dataset-distillation literature.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::labels::argmax;
use crate::rng;
use crate::tensor::Tensor;

/// Rows evaluated per forward call when scoring large datasets.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Fully connected ReLU stack with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// `depth` blocks of [3x3 conv, optional instance norm, ReLU, 2x2 avg
    /// pool] followed by one dense head.
    ConvNet {
        depth: usize,
        width: usize,
        instance_norm: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-sample input shape: `[D]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden },
            input_shape: vec![input_dim],
            classes,
            seed,
        }
    }

    pub fn convnet(input_shape: [usize; 3], depth: usize, width: usize, classes: usize, seed: u64) -> Self {
        Self {
            kind: ModelKind::ConvNet {
                depth,
                width,
                instance_norm: false,
            },
            input_shape: input_shape.to_vec(),
            classes,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            ModelKind::Mlp { hidden } => format!("mlp{hidden:?}->{}", self.classes),
            ModelKind::ConvNet {
                depth,
                width,
                instance_norm,
            } => format!(
                "convnet-{depth}x{width}{}->{}",
                if *instance_norm { "-in" } else { "" },
                self.classes
            ),
        }
    }

    /// Number of features entering the dense head.
    pub fn head_features(&self) -> Result<usize> {
        self.validate()?;
        Ok(match &self.kind {
            ModelKind::Mlp { hidden } => hidden
                .last()
                .copied()
                .unwrap_or_else(|| self.input_shape.iter().product()),
            ModelKind::ConvNet { depth, width, .. } => {
                let (h, w) = (self.input_shape[1] >> depth, self.input_shape[2] >> depth);
                width * h * w
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::invalid(format!("bad input shape {:?}", self.input_shape)));
        }
        match &self.kind {
            ModelKind::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::invalid("hidden widths must be positive"));
                }
            }
            ModelKind::ConvNet { depth, width, .. } => {
                if *depth == 0 || *width == 0 {
                    return Err(Error::invalid("convnet depth and width must be positive"));
                }
                if self.input_shape.len() != 3 {
                    return Err(Error::invalid(format!(
                        "convnet needs a [C, H, W] input, got {:?}",
                        self.input_shape
                    )));
                }
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for d in 0..*depth {
                    h /= 2;
                    w /= 2;
                    if h == 0 || w == 0 {
                        return Err(Error::invalid(format!(
                            "pooling underflow: {}x{} input vanishes after {} of {depth} pooling stages",
                            self.input_shape[1],
                            self.input_shape[2],
                            d + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A model: its spec and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub parameters: BTreeMap<String, Tensor>,
}

impl TrainedModel {
    pub fn num_parameters(&self) -> usize {
        self.parameters.values().map(Tensor::len).sum()
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (name, t) in &self.parameters {
            bindings.bind(name, t);
        }
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut rng::Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

/// Initializes parameters deterministically from `spec.seed`: He-scaled
/// normals for layers feeding a ReLU, `1/sqrt(fan_in)` for the head, zero
/// biases.
pub fn build_model(spec: &ModelSpec) -> Result<TrainedModel> {
    spec.validate()?;
    let mut rng = rng::rng(spec.seed);
    let mut params = BTreeMap::new();
    match &spec.kind {
        ModelKind::Mlp { hidden } => {
            let mut fan_in: usize = spec.input_shape.iter().product();
            for (i, &width) in hidden.iter().enumerate() {
                let std = (2.0 / fan_in as f64).sqrt();
                params.insert(format!("l{i}.weight"), normal_tensor(&[fan_in, width], std, &mut rng));
                params.insert(format!("l{i}.bias"), Tensor::zeros(&[width]));
                fan_in = width;
            }
        }
        ModelKind::ConvNet { depth, width, .. } => {
            let mut channels = spec.input_shape[0];
            for d in 0..*depth {
                let fan_in = channels * 9;
                let std = (2.0 / fan_in as f64).sqrt();
                params.insert(
                    format!("conv{d}.weight"),
                    normal_tensor(&[*width, channels, 3, 3], std, &mut rng),
                );
                params.insert(format!("conv{d}.bias"), Tensor::zeros(&[*width]));
                channels = *width;
            }
        }
    }
    let features = spec.head_features()?;
    let std = (1.0 / features as f64).sqrt();
    params.insert(
        "head.weight".into(),
        normal_tensor(&[features, spec.classes], std, &mut rng),
    );
    params.insert("head.bias".into(), Tensor::zeros(&[spec.classes]));
    Ok(TrainedModel {
        spec: spec.clone(),
        parameters: params,
    })
}

/// Appends the model's forward pass to `graph`, reading the batch from input
/// `x`, and returns the logits node.
pub fn build_forward(graph: &mut Graph, spec: &ModelSpec) -> Result<NodeId> {
    spec.validate()?;
    let x = graph.input("x");
    let mut h = x;
    match &spec.kind {
        ModelKind::Mlp { hidden } => {
            if spec.input_shape.len() > 1 {
                h = graph.flatten(h);
            }
            for i in 0..hidden.len() {
                let w = graph.param(&format!("l{i}.weight"));
                let b = graph.param(&format!("l{i}.bias"));
                h = graph.matmul(h, w);
                h = graph.add_bias(h, b);
                h = graph.relu(h);
            }
        }
        ModelKind::ConvNet {
            depth,
            instance_norm,
            ..
        } => {
            for d in 0..*depth {
                let w = graph.param(&format!("conv{d}.weight"));
                let b = graph.param(&format!("conv{d}.bias"));
                h = graph.conv2d(h, w, b, 1);
                if *instance_norm {
                    h = graph.instance_norm(h);
                }
                h = graph.relu(h);
                h = graph.avg_pool2(h);
            }
            h = graph.flatten(h);
        }
    }
    let w = graph.param("head.weight");
    let b = graph.param("head.bias");
    let z = graph.matmul(h, w);
    Ok(graph.add_bias(z, b))
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> Result<()> {
    if batch.ndim() != spec.input_shape.len() + 1 || batch.shape()[1..] != spec.input_shape[..] {
        return Err(Error::invalid(format!(
            "batch shape {:?} does not match model input {:?}",
            batch.shape(),
            spec.input_shape
        )));
    }
    Ok(())
}

/// Reusable forward-only evaluator.
pub struct Predictor {
    graph: Graph,
}

impl Predictor {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let mut graph = Graph::new();
        let logits = build_forward(&mut graph, spec)?;
        graph.output("logits", logits);
        Ok(Self { graph })
    }

    pub fn logits(&mut self, model: &TrainedModel, batch: &Tensor) -> Result<Tensor> {
        check_batch(&model.spec, batch)?;
        let mut b = Bindings::new();
        model.bind(&mut b);
        b.bind("x", batch);
        let mut eval = self.graph.evaluate(&b)?;
        Ok(eval.outputs.remove("logits").expect("logits output registered"))
    }
}

/// Logits `[batch, C]` for a batch of inputs.
pub fn forward(model: &TrainedModel, batch: &Tensor) -> Result<Tensor> {
    Predictor::new(&model.spec)?.logits(model, batch)
}

/// Logits for every row of `images`, computed in chunks.
pub fn predict_logits(model: &TrainedModel, images: &Tensor) -> Result<Tensor> {
    let mut predictor = Predictor::new(&model.spec)?;
    let n = images.rows();
    let mut data = Vec::with_capacity(n * model.spec.classes);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let logits = predictor.logits(model, &images.select_rows(&idx))?;
        data.extend_from_slice(logits.data());
        start = end;
    }
    Tensor::new(vec![n, model.spec.classes], data)
}

/// Fraction of rows whose argmax equals `classes`, lowest index on ties.
pub fn accuracy_from_logits(logits: &Tensor, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let hits = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == classes[i])
        .count();
    Ok(hits as f64 / classes.len() as f64)
}

/// Top-1 accuracy of `model` on `data`'s hard labels.
pub fn evaluate_accuracy(model: &TrainedModel, data: &DatasetBundle) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty(format!("dataset `{}`", data.name)));
    }
    let logits = predict_logits(model, &data.images)?;
    accuracy_from_logits(&logits, &data.hard.classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_build_is_deterministic() {
        let spec = ModelSpec::mlp(784, vec![128], 10, 0);
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameters["l0.weight"].shape(), &[784, 128]);
        let c = build_model(&spec.with_seed(1)).unwrap();
        assert_ne!(a.parameters["l0.weight"], c.parameters["l0.weight"]);
    }

    #[test]
    fn convnet_head_features() {
        let spec = ModelSpec::convnet([3, 32, 32], 3, 8, 10, 0);
        // 32 / 2^3 = 4
        assert_eq!(spec.head_features().unwrap(), 8 * 4 * 4);
        let m = build_model(&spec).unwrap();
        assert_eq!(m.parameters["head.weight"].shape(), &[8 * 16, 10]);
    }

    #[test]
    fn convnet_pooling_underflow() {
        let spec = ModelSpec::convnet([3, 32, 32], 6, 8, 10, 0);
        assert!(build_model(&spec).is_err());
        assert!(build_model(&ModelSpec::convnet([3, 32, 32], 5, 4, 10, 0)).is_ok());
    }

    #[test]
    fn rejects_single_class() {
        assert!(build_model(&ModelSpec::mlp(4, vec![], 1, 0)).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = build_model(&ModelSpec::mlp(5, vec![7], 3, 2)).unwrap();
        for v in m.parameters.get_mut("head.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        let x = Tensor::new(vec![4, 5], (0..20).map(|i| i as f64 * 0.3 - 2.0).collect()).unwrap();
        let logits = forward(&m, &x).unwrap();
        assert_eq!(logits.shape(), &[4, 3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_independence() {
        for spec in [
            ModelSpec::mlp(6, vec![16, 8], 4, 3),
            ModelSpec::convnet([1, 8, 8], 2, 4, 4, 3),
        ] {
            let m = build_model(&spec).unwrap();
            let per: usize = spec.input_shape.iter().product();
            let mut shape = vec![8];
            shape.extend(&spec.input_shape);
            let x = Tensor::new(shape, (0..8 * per).map(|i| ((i * 37 % 11) as f64) / 5.0 - 1.0).collect())
                .unwrap();
            let full = forward(&m, &x).unwrap();
            let single = forward(&m, &x.select_rows(&[5])).unwrap();
            for (a, b) in single.row(0).iter().zip(full.row(5)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = build_model(&ModelSpec::mlp(6, vec![], 2, 0)).unwrap();
        assert!(forward(&m, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn accuracy_from_crafted_logits() {
        let logits = Tensor::from_rows(&[
            vec![2.0, 1.0],
            vec![0.0, 3.0],
            vec![1.0, 1.0],
            vec![5.0, 0.0],
        ])
        .unwrap();
        // row 2 ties -> class 0
        assert_eq!(accuracy_from_logits(&logits, &[0, 1, 0, 1]).unwrap(), 0.75);
        assert!(accuracy_from_logits(&logits, &[]).is_err());
    }
}
