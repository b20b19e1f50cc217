//! Mini-batch SGD training, evaluation and single-image classification.

mod confusion;
mod history;

pub use confusion::ConfusionMatrix;
pub use history::{sig6, EpochRecord, TrainHistory, HISTORY_HEADER};

use std::io;

use thiserror::Error;

use crate::graph::{forward_batch, forward_model, ExecError, LayerOp, ModelGraph, TrainingPass, WeightStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vision::{resize_bilinear, Image, LabeledExample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Argument(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("history i/o: {0}")]
    Io(#[from] io::Error),
    #[error("history line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Zero is accepted and leaves every learnable parameter unchanged.
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Replaces the rate of every dropout layer when set.
    pub dropout_rate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            dropout_rate: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(r) = self.dropout_rate {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::Config(format!("dropout rate must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

/// Examples converted to normalized network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    side: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Prepared {
    /// Resizes each image to `side x side` when needed and scales pixel
    /// values into `[0, 1]`.
    pub fn new(examples: &[LabeledExample], side: usize) -> Self {
        let mut pixels = Vec::with_capacity(examples.len() * side * side * 3);
        let mut labels = Vec::with_capacity(examples.len());
        for ex in examples {
            pixels.extend(normalize(&ex.image, side));
            labels.push(ex.label);
        }
        Prepared { side, pixels, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn batch(&self, idx: &[usize]) -> Tensor {
        let n = self.side * self.side * 3;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        Tensor::new(&[idx.len(), self.side, self.side, 3], data).expect("sized")
    }
}

fn normalize(img: &Image, side: usize) -> impl Iterator<Item = f32> {
    let img = if img.width() == side && img.height() == side {
        img.clone()
    } else {
        resize_bilinear(img, side)
    };
    img.data().iter().map(|&v| v as f32 / 255.0).collect::<Vec<_>>().into_iter()
}

fn check_input(graph: &ModelGraph, data: &Prepared) -> Result<(), TrainError> {
    let [h, w, c] = graph.input_shape();
    if h != w || c != 3 || h != data.side {
        return Err(TrainError::Argument(format!(
            "graph input {h}x{w}x{c} does not match {0}x{0}x3 examples",
            data.side
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= graph.num_classes()) {
        return Err(TrainError::Argument(format!(
            "label {bad} out of range for {} classes",
            graph.num_classes()
        )));
    }
    Ok(())
}

/// Copy of `graph` with every dropout layer set to `rate`.
pub fn with_dropout(graph: &ModelGraph, rate: f64) -> Result<ModelGraph, TrainError> {
    let layers = graph
        .layers()
        .iter()
        .cloned()
        .map(|mut l| {
            if let LayerOp::Dropout { .. } = l.op {
                l.op = LayerOp::Dropout { rate };
            }
            l
        })
        .collect();
    ModelGraph::new(layers).map_err(|e| TrainError::Config(e.to_string()))
}

/// Accuracy, mean loss and confusion matrix of a model on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

const EVAL_CHUNK: usize = 64;

/// Inference-mode evaluation. Predictions are the argmax of the
/// probabilities with ties resolved to the lowest class index.
pub fn evaluate(graph: &ModelGraph, weights: &WeightStore, data: &Prepared) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Argument("cannot evaluate on an empty dataset".into()));
    }
    check_input(graph, data)?;
    let classes = graph.num_classes();
    let mut confusion = ConfusionMatrix::new(classes);
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let probs = forward_batch(graph, weights, &data.batch(chunk))?;
        for (row, &i) in probs.data().chunks_exact(classes).zip(chunk) {
            let truth = data.labels[i];
            confusion.record(truth, argmax(row));
            loss -= (row[truth] as f64).max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        loss: loss / data.len() as f64,
        confusion,
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities for one image of any size; it is resized to the
/// graph's input side first.
pub fn classify(graph: &ModelGraph, weights: &WeightStore, img: &Image) -> Result<Tensor, TrainError> {
    let [side, _, _] = graph.input_shape();
    let data: Vec<f32> = normalize(img, side).collect();
    let input = Tensor::new(&[side, side, 3], data).expect("sized");
    Ok(forward_model(graph, weights, &input)?)
}

/// What to do after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Continue,
    Stop,
}

/// Trains with SGD and momentum (`v = momentum * v - lr * g; w += v`) over
/// mini-batches reshuffled every epoch. The last partial batch is used.
/// Weights are initialized from `cfg.seed`, so the run is reproducible
/// bit for bit. Train loss and accuracy are running means over the epoch's
/// batches in training mode; test metrics come from [`evaluate`].
pub fn train(
    graph: &ModelGraph,
    train_set: &Prepared,
    test_set: &Prepared,
    cfg: &TrainConfig,
) -> Result<(WeightStore, TrainHistory), TrainError> {
    train_with(graph, train_set, test_set, cfg, |_| Progress::Continue)
}

/// [`train`] with a callback after each epoch that may stop the run early.
pub fn train_with(
    graph: &ModelGraph,
    train_set: &Prepared,
    test_set: &Prepared,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Progress,
) -> Result<(WeightStore, TrainHistory), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Argument("training set is empty".into()));
    }
    if test_set.is_empty() {
        return Err(TrainError::Argument("test set is empty".into()));
    }
    let owned;
    let graph = match cfg.dropout_rate {
        Some(rate) => {
            owned = with_dropout(graph, rate)?;
            &owned
        }
        None => graph,
    };
    check_input(graph, train_set)?;
    check_input(graph, test_set)?;

    let mut weights = WeightStore::init(graph, cfg.seed);
    let mut velocity = WeightStore::<f32>::zeros_learnable(graph);
    let mut order_rng = Rng::new(cfg.seed ^ 0x5348_5546_464c_4553);
    let mut dropout_rng = Rng::new(cfg.seed ^ 0x4452_4f50_4f55_5453);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut pass = TrainingPass::new();
    let mut history = TrainHistory::default();
    let lr = cfg.learning_rate as f32;
    let mu = cfg.momentum as f32;

    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let probs = pass.forward(graph, &mut weights, &train_set.batch(idx), &mut dropout_rng)?;
            let classes = probs.shape()[1];
            correct += probs
                .data()
                .chunks_exact(classes)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            let loss = pass.loss(&labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b + 1 });
            }
            loss_sum += loss * idx.len() as f64;
            let grads = pass.backward(graph, &weights, &labels)?;
            for (layer, param, g) in grads.iter() {
                let v = velocity.get_mut(layer, param).expect("learnable parameter");
                let w = weights.get_mut(layer, param).expect("learnable parameter");
                for ((v, w), &g) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                    *v = mu * *v - lr * g;
                    *w += *v;
                }
            }
            if !weights.all_finite() {
                return Err(TrainError::Divergence { epoch, batch: b + 1 });
            }
        }
        let test = evaluate(graph, &weights, test_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_loss: test.loss,
            test_acc: test.accuracy,
        };
        history.records.push(record);
        if on_epoch(&record) == Progress::Stop {
            break;
        }
    }
    Ok((weights, history))
}
