#![allow(dead_code)]

use turbo_core::config::TrainConfig;

pub const LINEAR: &str = r#"
[data]
family = "linear-gaussian"
a = [[0.8, 0.3], [-0.4, 0.7]]
b = [0.2, -0.1]
sigma = 0.3
sigma_z = [[1.0, 0.0], [0.0, 1.0]]
"#;

pub const MOONS_UNPAIRED: &str = r#"
[data]
family = "two-moons-map"
noise_z = 0.05
angle = 0.7853981633974483
scale = [1.0, 0.7]
noise_x = 0.02
paired = false
"#;

/// Small nets with smooth critics, suited to finite differences.
pub fn small(preset: &str, seed: u64, extra: &str) -> TrainConfig {
    let text = format!(
        r#"
[run]
preset = "{preset}"
seed = {seed}
steps = 10
batch_size = 16
log_interval = 1
checkpoint_interval = 0

[model]
hidden = [6]
flow_blocks = 2
flow_hidden = [5]

[critic]
hidden = [5]
activation = "tanh"
{extra}
{LINEAR}
"#
    );
    TrainConfig::from_toml(&text).unwrap()
}

pub fn shipped(name: &str) -> TrainConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    TrainConfig::load(&path).unwrap()
}

pub const ALL_PRESETS: [&str; 9] = [
    "AAE", "GAN", "WGAN", "PIX2PIX", "CYCLEGAN", "FLOW", "ALAE", "TURBO_FULL", "VAE_LIKE",
];
