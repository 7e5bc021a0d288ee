use super::config::ModelConfig;
use super::params::{ParamId, ParamVars};
use super::{FeaturePyramid, Init};
use crate::attention::linear;
use crate::error::Result;
use crate::tensor::{Element, Tape, Var};

/// One squeeze-excite fusion sub-module: the pooled summary of level
/// `i−1` gates the channels of level `i`.
#[derive(Clone, Copy, Debug)]
pub struct FfmIds {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl FfmIds {
    pub(crate) fn build_all<T: Element>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> [Self; 3] {
        std::array::from_fn(|k| {
            let i = k + 1;
            let c_prev = cfg.stage_channels(i - 1);
            let c_next = cfg.stage_channels(i);
            let hidden = (c_prev / cfg.ffm_reduction).max(1);
            Self {
                fc1_w: init.trunc(format!("ffm.{i}.fc1.weight"), &[c_prev, hidden]),
                fc1_b: init.zeros(format!("ffm.{i}.fc1.bias"), &[hidden]),
                fc2_w: init.trunc(format!("ffm.{i}.fc2.weight"), &[hidden, c_next]),
                fc2_b: init.zeros(format!("ffm.{i}.fc2.bias"), &[c_next]),
            }
        })
    }
}

/// Channel gate in (0, 1) computed from an `H×W×C` feature map:
/// `sigmoid(fc2(relu(fc1(mean over H, W))))`.
pub fn ffm_gate<T: Element>(tape: &mut Tape<T>, pv: &ParamVars, ids: &FfmIds, feature: Var) -> Result<Var> {
    let chw = tape.permute(feature, &[2, 0, 1])?;
    let pooled = tape.global_avg_pool(chw)?;
    let c = tape.shape(pooled)[0];
    let pooled = tape.reshape(pooled, &[1, c])?;
    let hidden = linear(tape, pooled, pv[ids.fc1_w], Some(pv[ids.fc1_b]))?;
    let hidden = tape.relu(hidden);
    let logits = linear(tape, hidden, pv[ids.fc2_w], Some(pv[ids.fc2_b]))?;
    let gate = tape.sigmoid(logits);
    let n = tape.shape(gate)[1];
    tape.reshape(gate, &[n])
}

pub(crate) fn ffm_fuse<T: Element>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    ids: &[FfmIds; 3],
    pyramid: &FeaturePyramid,
) -> Result<FeaturePyramid> {
    let mut levels = pyramid.levels;
    for i in 1..4 {
        let gate = ffm_gate(tape, pv, &ids[i - 1], pyramid.levels[i - 1])?;
        levels[i] = tape.mul_broadcast(pyramid.levels[i], gate, 2)?;
    }
    Ok(FeaturePyramid { levels })
}
