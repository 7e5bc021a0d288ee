//! The depth-completion network: patch embedding, four shifted-window
//! attention stages, the feature fusion module and the convolutional
//! decoder.

mod config;
mod decoder;
mod encoder;
mod fusion;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{fit_window, Modality, ModelConfig, StageGeometry};
pub use decoder::{ConvIds, DecoderIds};
pub use encoder::{patch_concat, patch_embed, patch_merge, patch_project, BlockIds, EmbedIds, StageIds};
pub use fusion::{ffm_gate, FfmIds};
pub use params::{ParamId, ParamStore, ParamVars};

use crate::data::RgbdSample;
use crate::error::{dim_err, Error, Result};
use crate::tensor::init::{he_normal, trunc_normal};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Standard deviation of the truncated-normal init for projections.
pub const INIT_STD: f64 = 0.02;

/// Encoder outputs at 1/2, 1/4, 1/8 and 1/16 resolution, each `H×W×C`
/// with channels C, 2C, 4C, 8C.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// Parameter factory used while building a network.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Element> Init<'_, T> {
    pub fn trunc(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = trunc_normal(shape, INIT_STD, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let t = he_normal(shape, fan_in, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

/// The full network together with its parameters.
#[derive(Clone, Debug)]
pub struct TodeNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embed: EmbedIds,
    stages: Vec<StageIds>,
    ffm: Option<[FfmIds; 3]>,
    decoder: DecoderIds,
}

impl<T: Element> TodeNet<T> {
    /// Builds the network with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let embed = EmbedIds::build(&mut init, &config);
        let stages = config
            .stages()
            .iter()
            .enumerate()
            .map(|(i, g)| StageIds::build(&mut init, i, g, config.stage_depths[i]))
            .collect();
        let ffm = config.use_ffm.then(|| FfmIds::build_all(&mut init, &config));
        let decoder = DecoderIds::build(&mut init, &config);
        Ok(Self { config, params: store, embed, stages, ffm, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> TodeNet<U> {
        TodeNet {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            stages: self.stages.clone(),
            ffm: self.ffm,
            decoder: self.decoder,
        }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let want = [self.config.in_channels(), self.config.height, self.config.width];
        if tape.shape(x) != want {
            return Err(Error::Config(format!(
                "{} input must be {:?}, got {:?}",
                self.config.modality,
                want,
                tape.shape(x)
            )));
        }
        Ok(())
    }

    /// Runs the encoder on `C_in×H×W`.
    pub fn encode(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<FeaturePyramid> {
        self.check_input(tape, x)?;
        let mut feat = patch_embed(tape, x, &self.embed.weights(pv))?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            feat = stage.forward(tape, pv, feat)?;
            levels.push(feat);
        }
        Ok(FeaturePyramid { levels: levels.try_into().unwrap() })
    }

    /// Applies the fusion gates. Errors when the network was built without FFM.
    pub fn ffm_fuse(&self, tape: &mut Tape<T>, pv: &ParamVars, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        let ffm = self
            .ffm
            .as_ref()
            .ok_or_else(|| Error::Contract("network was built without the feature fusion module".into()))?;
        fusion::ffm_fuse(tape, pv, ffm, pyramid)
    }

    /// Decodes a pyramid into a normalized `H×W` depth map.
    pub fn decode(&self, tape: &mut Tape<T>, pv: &ParamVars, pyramid: &FeaturePyramid) -> Result<Var> {
        self.decoder.forward(tape, pv, pyramid, &self.config)
    }

    /// Normalized depth prediction (`H×W`, meters / `max_depth`).
    pub fn forward(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let pyramid = self.encode(tape, pv, x)?;
        let pyramid = if self.ffm.is_some() { self.ffm_fuse(tape, pv, &pyramid)? } else { pyramid };
        self.decode(tape, pv, &pyramid)
    }

    /// Depth prediction in meters without gradient bookkeeping.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &pv, x)?;
        let scale = T::from_f64_lossy(self.config.max_depth);
        let mut out = tape.value(y).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        Ok(out)
    }
}

/// Builds the `C_in×H×W` network input for a sample: RGB scaled to
/// [0, 1] and depth divided by `max_depth` (clamped to [0, 1], 0 stays
/// missing).
pub fn prepare_input<T: Element>(sample: &RgbdSample, config: &ModelConfig) -> Result<Tensor<T>> {
    let (h, w) = (sample.height(), sample.width());
    if (h, w) != (config.height, config.width) {
        return dim_err(format!(
            "sample is {h}×{w} but the model expects {}×{}",
            config.height, config.width
        ));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(config.in_channels() * hw);
    if config.modality != Modality::Depth {
        for ch in 0..3 {
            data.extend(sample.rgb.iter().skip(ch).step_by(3).map(|&v| T::from_f64_lossy(v as f64 / 255.0)));
        }
    }
    if config.modality != Modality::Rgb {
        let inv = 1.0 / config.max_depth;
        data.extend(
            sample
                .raw_depth
                .iter()
                .map(|&d| T::from_f64_lossy((d as f64 * inv).clamp(0.0, 1.0))),
        );
    }
    Tensor::new(&[config.in_channels(), h, w], data)
}
