//! Fixtures shared by the criterion benches.

use mechbench_core::datasets::{generate, preset, ExperimentConfig, ExperimentData, Scale};
use mechbench_core::models::{srnn_windows, LossGraph, Model};
use mechbench_core::training::TrainData;
use ndarray::{s, Array2};

/// A preset at desk scale with its data and a freshly initialised model.
pub struct Fixture {
    pub config: ExperimentConfig,
    pub data: ExperimentData,
    pub model: Model,
}

impl Fixture {
    pub fn new(name: &str) -> Self {
        let config = preset(name, Scale::Desk).expect("built-in preset");
        let data = generate(&config).expect("data generation");
        let model = Model::init(&config).expect("model init");
        Self { config, data, model }
    }

    /// Loss graph and the first minibatch of the training split.
    pub fn batch(&self) -> (LossGraph, Array2<f64>, Array2<f64>) {
        let n = self.config.batch_size;
        let window = self.config.srnn_window;
        match TrainData::train_split(&self.data) {
            TrainData::Derivative(d) => {
                let lg = LossGraph::for_model(&self.model, 0, 0.0, None).expect("loss graph");
                let x = d.inputs().slice(s![..n, ..]).to_owned();
                let y = d.labels().slice(s![..n, ..]).to_owned();
                (lg, x, y)
            }
            TrainData::Sequence(q) => {
                let steps = window.min(q.trajectories()[0].len() - 1);
                let picks: Vec<_> = (0..n).map(|i| (&q.trajectories()[i % q.n_trajectories()], i % 7)).collect();
                let (x, y) = srnn_windows(&picks, steps).expect("windows");
                let lg = LossGraph::for_model(&self.model, steps, q.dt(), self.config.train_restitution()).expect("loss graph");
                (lg, x, y)
            }
        }
    }
}
