#![allow(dead_code)]

use std::path::Path;

use plr_core::backbone::BackboneConfig;
use plr_core::dataset::AugmentConfig;
use plr_core::synthetic::{make_synthetic_dataset, SyntheticSet};
use plr_core::trainer::{TrainConfig, TrainState};

/// 64×32 input, quarter width, three one-step epochs on a 4-identity set.
pub fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        total_epochs: 3,
        warmup_epochs: 0,
        decay_epochs: (1, 2),
        p: 4,
        k: 4,
        seed: 3,
        backbone: BackboneConfig { input_height: 64, input_width: 32, ..BackboneConfig::default().with_width(0.25) },
        augment: AugmentConfig { target_height: 64, target_width: 32, ..AugmentConfig::default() },
        ..TrainConfig::default()
    }
}

/// The same settings as a partial JSON config.
pub fn tiny_json() -> String {
    r#"{
  "total_epochs": 3, "warmup_epochs": 0, "decay_epochs": [1, 2],
  "p": 4, "k": 4, "seed": 3,
  "backbone": { "input_height": 64, "input_width": 32, "width_multiplier": 0.25 },
  "augment": { "target_height": 64, "target_width": 32 }
}"#
    .to_string()
}

pub fn tiny_data() -> SyntheticSet {
    make_synthetic_dataset(4, 2, 2, 3).unwrap()
}

/// Trains `cfg` for `epochs` epochs on `data`.
pub fn trained(cfg: &TrainConfig, data: &SyntheticSet, epochs: usize) -> TrainState {
    let mut st = TrainState::new(cfg, data.split.num_train_identities).unwrap();
    for _ in 0..epochs {
        st.train_epoch(&data.split, &data.train_images, &mut |_| {}).unwrap();
    }
    st
}

pub fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, tiny_json()).unwrap();
    p
}
