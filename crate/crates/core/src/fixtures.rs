//! Bundled three-task fixture.
//!
//! `proj.weight` carries the worked example: with a zero base, the task
//! vectors are `[0.2, -0.1, 0.3]`, `[0.4, 0.1, -0.2]` and `[-0.1, 0.2, 0.5]`,
//! giving active sets `{0,1}`, `{1,2}`, `{0,2}` and fused values
//! `[0.30998, 0.15250, 0.40997]` with `beta = 1`, `delta = 1.5`.
//! `proj.bias` is a 2x2 tensor with a non-zero base.
//!
//! The `.safetensors` files under `fixtures/` are generated from
//! [`base`] and [`tasks`] by `cargo run -p taskfuse-core --example write_fixtures`.

use crate::tensor_store::NamedTensor;

pub const WORKED_TAUS: [[f32; 3]; 3] = [[0.2, -0.1, 0.3], [0.4, 0.1, -0.2], [-0.1, 0.2, 0.5]];

/// Fused `proj.weight` to five decimals.
pub const WORKED_FUSED: [f32; 3] = [0.30998, 0.15250, 0.40997];

const BIAS_BASE: [f32; 4] = [0.5, -0.25, 1.0, 0.0];
const BIAS_TASKS: [[f32; 4]; 3] = [
    [0.75, -0.5, 1.5, 0.125],
    [0.25, -0.125, 1.25, -0.25],
    [1.0, 0.5, 0.5, 0.0625],
];

pub const BASE_BYTES: &[u8] = include_bytes!("../fixtures/base.safetensors");
pub const TASK_BYTES: [&[u8]; 3] = [
    include_bytes!("../fixtures/task1.safetensors"),
    include_bytes!("../fixtures/task2.safetensors"),
    include_bytes!("../fixtures/task3.safetensors"),
];

pub fn base() -> Vec<NamedTensor> {
    vec![
        NamedTensor::f32("proj.weight", vec![3], vec![0.0; 3]),
        NamedTensor::f32("proj.bias", vec![2, 2], BIAS_BASE.to_vec()),
    ]
}

pub fn tasks() -> Vec<Vec<NamedTensor>> {
    WORKED_TAUS
        .iter()
        .zip(BIAS_TASKS.iter())
        .map(|(w, b)| {
            vec![
                NamedTensor::f32("proj.weight", vec![3], w.to_vec()),
                NamedTensor::f32("proj.bias", vec![2, 2], b.to_vec()),
            ]
        })
        .collect()
}
