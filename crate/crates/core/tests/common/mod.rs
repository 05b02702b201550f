// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use rce_core::base_model::ToyBaseModel;
use rce_core::pipeline::{self, RunConfig};

/// A run small enough to pretrain and train in well under a second.
pub const TINY: &str = r#"
seed = 1
[model]
d_model = 16
n_layers = 3
n_heads = 2
d_ff = 32
max_seq_len = 64
inject_layer = 1
[pretrain]
steps = 30
[train]
checkpoint_every = 10
[train.optim]
total_steps = 30
warmup_steps = 5
[train.library]
gate_hidden = 8
[train.spawn]
tau = 0.5
generator_hidden = 16
[eval]
batches_per_task = 1
batch_size = 4
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

pub fn tiny_base(cfg: &RunConfig) -> ToyBaseModel {
    pipeline::pretrain(cfg).unwrap().0
}
