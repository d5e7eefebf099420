//! Frozen synthetic fixtures and the desk-scale training configuration used
//! to check the shift phenomena end to end.
//!
//! Changing any constant here changes every downstream number, so the values
//! are pinned and exercised by the acceptance suite.

use crate::dataio::{ShiftKind, ShiftSpec};
use crate::error::{Error, Result};
use crate::trainer::{Method, SweepGrid, TrainConfig};

/// Seed shared by every preset fixture.
pub const FIXTURE_SEED: u64 = 7;

/// Confounder shift: two classes, each with a 5% minority group whose
/// spurious direction points at the other class.
pub fn s1() -> ShiftSpec {
    ShiftSpec {
        shift_kind: ShiftKind::Confounder,
        classes: 2,
        groups_per_class: 2,
        dim: 64,
        minority_fraction: 0.05,
        class_sep: 0.707,
        group_sep: 2.0,
        spurious_mix: 0.9,
        noise_sigma: 0.2,
        n_train: 8000,
        n_val: 2000,
        n_test: 2000,
        seed: FIXTURE_SEED,
    }
}

/// Subclass shift with group-balanced training data.
pub fn s2() -> ShiftSpec {
    ShiftSpec {
        shift_kind: ShiftKind::Subclass,
        classes: 4,
        groups_per_class: 2,
        dim: 64,
        minority_fraction: 0.5,
        class_sep: 1.414,
        group_sep: 2.0,
        spurious_mix: 0.9,
        noise_sigma: 0.15,
        n_train: 2000,
        n_val: 400,
        n_test: 1000,
        seed: FIXTURE_SEED,
    }
}

/// Data-source shift: three classes observed through two sources, one rare.
pub fn s3() -> ShiftSpec {
    ShiftSpec {
        shift_kind: ShiftKind::DataSource,
        classes: 3,
        groups_per_class: 2,
        dim: 64,
        minority_fraction: 0.1,
        class_sep: 1.0,
        group_sep: 3.0,
        spurious_mix: 0.9,
        noise_sigma: 0.2,
        n_train: 2000,
        n_val: 400,
        n_test: 1000,
        seed: FIXTURE_SEED,
    }
}

pub const PRESET_NAMES: [&str; 3] = ["s1", "s2", "s3"];

pub fn by_name(name: &str) -> Result<ShiftSpec> {
    match name {
        "s1" => Ok(s1()),
        "s2" => Ok(s2()),
        "s3" => Ok(s3()),
        _ => Err(Error::InvalidSpec(format!(
            "unknown preset `{name}` (expected one of {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

/// Contrastive adapter settings sized for a single CPU core: a 64-unit
/// bottleneck, 64 positives and negatives from 128 neighbors, and 25 updates
/// per epoch so early stopping sees the model often.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        max_epochs: 24,
        hidden_dim: 64,
        updates_per_epoch: Some(25),
        seed,
        ..TrainConfig::default()
    };
    cfg.sampling.num_positives = 64;
    cfg.sampling.num_negatives = 64;
    cfg.sampling.num_neighbors = 128;
    cfg
}

/// ERM linear probe on unit-normalized inputs. Use with [`probe_grid`].
pub fn probe_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        method: Method::LinearProbe,
        max_epochs: 150,
        normalize_inputs: true,
        seed,
        ..TrainConfig::default()
    }
}

/// Step sizes for the probe. Unit-norm inputs with no temperature need far
/// larger steps than the adapter does.
pub fn probe_grid() -> SweepGrid {
    SweepGrid {
        learning_rates: vec![1.0, 10.0, 100.0],
        weight_decays: vec![5e-5],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            by_name(name).unwrap().validate().unwrap();
        }
        assert!(by_name("s9").is_err());
        desk_train_config(0).validate().unwrap();
        probe_train_config(0).validate().unwrap();
    }
}
