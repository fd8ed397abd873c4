//! Shared fixtures for the criterion benchmarks.

use canfusion::pipeline::fuse;
use canfusion::spatial::{self, PredictorModel, TrainConfig};
use canfusion::synth::generate_config;
use canfusion::{CanFrame, FeatureMatrix, SynthConfig};

/// Spoofing scenario of about `n` frames.
pub fn frames(n: usize) -> Vec<CanFrame> {
    generate_config(&SynthConfig::spoof_scenario(n, 0)).expect("built-in scenario is valid")
}

/// Predictor trained briefly on attack-free traffic of about `n` frames.
pub fn predictor(n: usize) -> PredictorModel {
    let mut clean = SynthConfig::spoof_scenario(n, 1).attack_free();
    clean.profile.seed = 1;
    let frames = generate_config(&clean).expect("built-in scenario is valid");
    spatial::train(&frames, &TrainConfig { epochs: 2, ..TrainConfig::default() }).expect("training converges")
}

pub fn fused(n: usize) -> FeatureMatrix {
    fuse(&frames(n), &predictor(n), 7500).expect("aligned features")
}
