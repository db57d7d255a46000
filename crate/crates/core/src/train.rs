//! Two-stage training: the baseline branch alone, then the update branch
//! and combiner on top of the frozen baseline.

use diffcore::{AdamConfig, AdamState, Tape};
use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::dataset::{make_batches, Dataset, PairList};
use crate::error::{config_err, invalid, Result};
use crate::model::{BranchId, DualBranchModel, Modality, Pass, Stage};
use crate::pairloss::{total_loss, LossConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err(format!("training.batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err(format!("training.learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean batch loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
}

/// Runs `epochs` passes over `pairs`, updating every parameter that `pass`
/// leaves trainable. Epoch `e` shuffles with stream `epoch_offset + e`.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs(
    model: &mut DualBranchModel,
    data: &Dataset,
    pairs: &PairList,
    loss: &LossConfig,
    config: &TrainConfig,
    pass: Pass,
    epochs: usize,
    epoch_offset: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    loss.validate()?;
    let trainable = model.trainable_names(pass);
    if trainable.is_empty() {
        return Err(invalid("no trainable parameters for this pass"));
    }
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut curve = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let batches = make_batches(pairs.len(), config.batch_size, model.seed(), epoch_offset + e as u64)?;
        let mut total = 0.0;
        for batch in &batches {
            let faces: Vec<&str> = batch.iter().map(|&i| pairs[i].face.as_str()).collect();
            let voices: Vec<&str> = batch.iter().map(|&i| pairs[i].voice.as_str()).collect();
            let ids: Vec<&str> = batch.iter().map(|&i| pairs[i].identity.as_str()).collect();
            let tape = Tape::new();
            let bound = model.bind_for(&tape, pass, &trainable);
            let f = tape.constant(&data.matrix(&faces, Modality::Face)?);
            let v = tape.constant(&data.matrix(&voices, Modality::Voice)?);
            let (emb, updates) = model.forward(&tape, &bound, f, v, pass, true)?;
            let (l, _) = total_loss(&tape, emb, &ids, loss, bound.get("head.weight")?, bound.get("head.bias")?)?;
            let value = tape.scalar(l)?;
            if !value.is_finite() {
                return Err(invalid(format!("loss became {value} in epoch {e}")));
            }
            total += value;
            let mut grads = tape.backward(l)?;
            model.set_grads(&bound, &mut grads)?;
            model.apply_batch_updates(&updates)?;
            adam.step(model.params_mut(&trainable))?;
            model.clear_grads();
        }
        let mean = total / batches.len() as f64;
        debug!("epoch {e}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok(curve)
}

/// Stage 1: trains the baseline branch and head, then freezes the branch.
pub fn train_stage1(
    model: &mut DualBranchModel,
    data: &Dataset,
    pairs: &PairList,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if model.stage() != Stage::Init {
        return Err(invalid(format!("stage 1 expects a fresh model, found stage {}", model.stage())));
    }
    info!("stage 1: {} epochs over {} pairs", config.stage1_epochs, pairs.len());
    let curve = train_epochs(model, data, pairs, loss, config, Pass::Baseline, config.stage1_epochs, 0)?;
    model.set_stage(Stage::Stage1);
    model.freeze_branch(BranchId::Frozen)?;
    Ok(label(Stage::Stage1, curve))
}

/// Stage 2: trains the update branch, combiner and head through the dual
/// path. Single-branch models continue training their only branch, which
/// stays unfrozen for this stage.
pub fn train_stage2(
    model: &mut DualBranchModel,
    data: &Dataset,
    pairs: &PairList,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if model.stage() != Stage::Stage1 {
        return Err(invalid(format!("stage 2 expects a stage-1 model, found stage {}", model.stage())));
    }
    info!("stage 2: {} epochs over {} pairs", config.stage2_epochs, pairs.len());
    let offset = config.stage1_epochs as u64;
    let curve = if model.is_dual() {
        model.set_stage(Stage::Stage2);
        train_epochs(model, data, pairs, loss, config, Pass::Dual, config.stage2_epochs, offset)
    } else {
        model.unfreeze(BranchId::Frozen);
        let curve = train_epochs(model, data, pairs, loss, config, Pass::Baseline, config.stage2_epochs, offset);
        model.set_stage(Stage::Stage2);
        model.freeze_branch(BranchId::Frozen)?;
        curve
    };
    let curve = curve?;
    Ok(label(Stage::Stage2, curve))
}

fn label(stage: Stage, curve: Vec<f64>) -> Vec<EpochLoss> {
    curve
        .into_iter()
        .enumerate()
        .map(|(epoch, loss)| EpochLoss { stage, epoch, loss })
        .collect()
}

/// Both stages in sequence.
pub fn train_two_stage(
    model: &mut DualBranchModel,
    data: &Dataset,
    pairs: &PairList,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    let mut curve = train_stage1(model, data, pairs, loss, config)?;
    curve.extend(train_stage2(model, data, pairs, loss, config)?);
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{augment_pairs, gen_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;

    fn tiny() -> (Dataset, PairList, ModelConfig) {
        let spec = SyntheticSpec {
            n_train_identities: 6,
            n_test_identities: 2,
            scenes_per_identity: 2,
            samples_per_scene: 2,
            face_dim: 10,
            voice_dim: 6,
            latent_dim: 4,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let pairs = augment_pairs(data.dataset.records(), 2, 0).unwrap();
        let config = ModelConfig {
            face_dim: 10,
            voice_dim: 6,
            embed_dim: 8,
            conv_channels: 2,
            ..ModelConfig::default()
        };
        (data.dataset, pairs, config)
    }

    fn short() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 3,
            stage2_epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stages_advance_and_freeze() {
        let (data, pairs, config) = tiny();
        let mut m = DualBranchModel::new(config, 4).unwrap();
        let curve = train_stage1(&mut m, &data, &pairs, &LossConfig::default(), &short()).unwrap();
        assert_eq!(curve.len(), 3);
        assert_eq!(m.stage(), Stage::Stage1);
        assert!(m.is_frozen(BranchId::Frozen));
        let frozen_before = m.param("frozen.face.weight").unwrap().clone();
        let update_before = m.param("update.face.weight").unwrap().clone();
        train_stage2(&mut m, &data, &pairs, &LossConfig::default(), &short()).unwrap();
        assert_eq!(m.stage(), Stage::Stage2);
        assert_eq!(m.param("frozen.face.weight").unwrap(), &frozen_before);
        assert_ne!(m.param("update.face.weight").unwrap(), &update_before);
        assert!(train_stage2(&mut m, &data, &pairs, &LossConfig::default(), &short()).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (data, pairs, config) = tiny();
        let run = || {
            let mut m = DualBranchModel::new(config.clone(), 9).unwrap();
            let curve = train_two_stage(&mut m, &data, &pairs, &LossConfig::default(), &short()).unwrap();
            (m, curve)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn single_branch_trains_through_both_stages() {
        let (data, pairs, config) = tiny();
        let mut m = DualBranchModel::new(ModelConfig { dual: false, ..config }, 2).unwrap();
        train_stage1(&mut m, &data, &pairs, &LossConfig::default(), &short()).unwrap();
        let before = m.param("frozen.face.weight").unwrap().clone();
        train_stage2(&mut m, &data, &pairs, &LossConfig::default(), &short()).unwrap();
        assert_ne!(m.param("frozen.face.weight").unwrap(), &before);
        assert_eq!(m.stage(), Stage::Stage2);
        assert_eq!(m.default_pass(), Pass::Baseline);
    }

    #[test]
    fn loss_decreases_on_average() {
        let (data, pairs, config) = tiny();
        let mut m = DualBranchModel::new(config, 1).unwrap();
        let cfg = TrainConfig {
            stage1_epochs: 15,
            ..short()
        };
        let curve = train_stage1(&mut m, &data, &pairs, &LossConfig::default(), &cfg).unwrap();
        assert!(curve.last().unwrap().loss < curve[0].loss);
    }

    #[test]
    fn invalid_training_config() {
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
