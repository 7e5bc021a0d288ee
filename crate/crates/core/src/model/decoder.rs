use super::config::ModelConfig;
use super::params::{ParamId, ParamVars};
use super::{FeaturePyramid, Init};
use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tape, Var};

/// A convolution with per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvIds {
    fn build<T: Element>(init: &mut Init<'_, T>, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            weight: init.he(format!("{prefix}.weight"), &[c_out, c_in, k, k], c_in * k * k),
            bias: init.zeros(format!("{prefix}.bias"), &[c_out]),
        }
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var, padding: usize) -> Result<Var> {
        let y = tape.conv2d(x, pv[self.weight], 1, padding)?;
        tape.add_broadcast(y, pv[self.bias], 0)
    }
}

/// Four stages of two 3×3 convolutions + ReLU followed by a 2× upsample,
/// then a 1×1 convolution to one channel.
///
/// Stage 1 starts from the deepest pyramid level; the output of every
/// earlier stage is concatenated with the encoder level at the same
/// resolution before entering the next stage.
#[derive(Clone, Copy, Debug)]
pub struct DecoderIds {
    pub stages: [[ConvIds; 2]; 4],
    pub head: ConvIds,
}

impl DecoderIds {
    pub(crate) fn build<T: Element>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let out = cfg.decoder_channels();
        let stages = std::array::from_fn(|s| {
            let c_in = if s == 0 { cfg.stage_channels(3) } else { out[s - 1] + cfg.stage_channels(3 - s) };
            [
                ConvIds::build(init, &format!("decoder.{s}.conv1"), c_in, out[s], 3),
                ConvIds::build(init, &format!("decoder.{s}.conv2"), out[s], out[s], 3),
            ]
        });
        let head = ConvIds {
            weight: init.trunc("head.weight".into(), &[1, out[3], 1, 1]),
            bias: init.zeros("head.bias".into(), &[1]),
        };
        Self { stages, head }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        pyramid: &FeaturePyramid,
        cfg: &ModelConfig,
    ) -> Result<Var> {
        let mut x: Option<Var> = None;
        for (s, convs) in self.stages.iter().enumerate() {
            let skip = tape.permute(pyramid.levels[3 - s], &[2, 0, 1])?;
            let input = match x {
                None => skip,
                Some(prev) => {
                    if tape.shape(prev)[1..] != tape.shape(skip)[1..] {
                        return dim_err(format!(
                            "decoder stage {s}: incoming {:?} does not match skip feature {:?}",
                            tape.shape(prev),
                            tape.shape(skip)
                        ));
                    }
                    tape.concat(&[prev, skip], 0)?
                }
            };
            let y = convs[0].forward(tape, pv, input, 1)?;
            let y = tape.relu(y);
            let y = convs[1].forward(tape, pv, y, 1)?;
            let y = tape.relu(y);
            x = Some(tape.upsample2x(y, cfg.upsample)?);
        }
        let y = self.head.forward(tape, pv, x.unwrap(), 0)?;
        let (h, w) = (tape.shape(y)[1], tape.shape(y)[2]);
        if (h, w) != (cfg.height, cfg.width) {
            return dim_err(format!("decoder produced {h}×{w}, expected {}×{}", cfg.height, cfg.width));
        }
        tape.reshape(y, &[h, w])
    }
}
