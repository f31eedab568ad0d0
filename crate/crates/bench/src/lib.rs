//! Fixtures shared by the benchmarks.

use dismi_core::{DiscreteJoint, Head, MlpNet, NetConfig, Rng, SyntheticTask, TaskData};
use ndarray::Array2;

/// Default-width network with random weights and a batch of inputs for it.
pub fn net_and_batch(inputs: usize, outputs: usize, batch: usize) -> (MlpNet, Array2<f64>) {
    let mut rng = Rng::new(1);
    let net = NetConfig::default()
        .build(inputs, outputs, Head::Logits, &mut rng)
        .expect("valid dims");
    let data = SyntheticTask::default().generate(batch, &mut rng).expect("valid task");
    let x = data.x.slice(ndarray::s![.., ..inputs.min(data.x.ncols())]).to_owned();
    (net, x)
}

pub fn task_data(n: usize, seed: u64) -> TaskData {
    SyntheticTask::default().generate(n, &mut Rng::new(seed)).expect("valid task")
}

pub fn joint(size: usize, seed: u64) -> DiscreteJoint {
    DiscreteJoint::random(size, size, 1.0, &mut Rng::new(seed)).expect("valid joint")
}
