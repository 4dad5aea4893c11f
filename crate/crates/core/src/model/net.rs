use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fusion::FeaturePyramid;
use super::maps::{mpc_class, pathology_class, ProbabilityMaps};
use super::{DecoderId, DecoderSource, EncoderId, ScenarioConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::study_io::{Availability, SequenceId, Slice};

/// Backbone hyperparameters shared by every U-Net in the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of resolution levels; features halve in size between levels.
    pub n_scales: usize,
    /// Channels at the finest level, doubling per level.
    pub base_channels: usize,
    /// Whether pathology decoders also see their own encoder's features
    /// next to the fused ones.
    pub own_skips: bool,
    /// Blocks gradients from the pathology branches into the prior network.
    pub detach_prior: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_scales: 5,
            base_channels: 16,
            own_skips: true,
            detach_prior: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales < 2 {
            return Err(Error::InvalidConfig(
                "a U-Net needs at least 2 scales".into(),
            ));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig(
                "base_channels must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Inputs must be divisible by this on both axes.
    pub fn size_multiple(&self) -> usize {
        1 << (self.n_scales - 1)
    }

    pub fn check_input_size(&self, dim: (usize, usize)) -> Result<()> {
        let m = self.size_multiple();
        if dim.0 == 0 || dim.1 == 0 || !dim.0.is_multiple_of(m) || !dim.1.is_multiple_of(m) {
            return Err(Error::InvalidConfig(format!(
                "input size {dim:?} must be a positive multiple of {m} for {} scales",
                self.n_scales
            )));
        }
        Ok(())
    }
}

/// Conv 3×3 (no bias) → instance norm → ReLU.
#[derive(Clone, Copy, Debug)]
struct Unit {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block([Unit; 2]);

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Indexed by level; the coarsest level has no decoder block.
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn unit(&mut self, name: &str, c_in: usize, c_out: usize) -> Unit {
        Unit {
            w: self
                .store
                .add_conv(format!("{name}.w"), c_out, c_in, 3, &mut self.rng),
            gamma: self
                .store
                .add_channel_vector(format!("{name}.gamma"), c_out, 1.0),
            beta: self
                .store
                .add_channel_vector(format!("{name}.beta"), c_out, 0.0),
        }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize) -> Block {
        Block([
            self.unit(&format!("{name}.a"), c_in, c_out),
            self.unit(&format!("{name}.b"), c_out, c_out),
        ])
    }

    fn encoder(&mut self, name: &str, c_in: usize, cfg: &NetConfig) -> Encoder {
        let blocks = (0..cfg.n_scales)
            .map(|l| {
                let c_prev = if l == 0 { c_in } else { cfg.channels(l - 1) };
                self.block(&format!("{name}.{l}"), c_prev, cfg.channels(l))
            })
            .collect();
        Encoder { blocks }
    }

    /// `bottom` is the channel count entering the coarsest upsampling and
    /// `skip_factor` the number of same-size pyramids concatenated per level.
    fn decoder(
        &mut self,
        name: &str,
        cfg: &NetConfig,
        bottom: usize,
        skip_factor: usize,
        classes: usize,
    ) -> Decoder {
        let k = cfg.n_scales;
        let blocks = (0..k - 1)
            .map(|l| {
                let up = if l == k - 2 {
                    bottom
                } else {
                    cfg.channels(l + 1)
                };
                self.block(
                    &format!("{name}.{l}"),
                    up + skip_factor * cfg.channels(l),
                    cfg.channels(l),
                )
            })
            .collect();
        Decoder {
            blocks,
            head_w: self.store.add_conv(
                format!("{name}.head.w"),
                classes,
                cfg.channels(0),
                1,
                &mut self.rng,
            ),
            head_b: self
                .store
                .add_channel_vector(format!("{name}.head.b"), classes, 0.0),
        }
    }
}

/// Images of a batch of slices that share one availability pattern.
#[derive(Clone, Debug)]
pub struct NetInput {
    pub availability: Availability,
    /// One `[batch, 1, rows, cols]` tensor per available sequence.
    pub images: BTreeMap<SequenceId, Tensor>,
}

impl NetInput {
    pub fn from_slices(slices: &[&Slice]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
        let availability = Availability::new(first.images.keys().copied())?;
        let dim = first
            .dim()
            .ok_or_else(|| Error::shape("slice without images"))?;
        let mut images = BTreeMap::new();
        for id in availability.iter() {
            let mut data = Vec::with_capacity(slices.len() * dim.0 * dim.1);
            for s in slices {
                let img = s.images.get(&id).ok_or_else(|| {
                    Error::ConfigMismatch("batch mixes availability patterns".into())
                })?;
                if img.dim() != dim {
                    return Err(Error::shape(format!(
                        "batch mixes slice sizes {:?} and {dim:?}",
                        img.dim()
                    )));
                }
                data.extend(img.iter().copied());
            }
            images.insert(id, Tensor::from_vec([slices.len(), 1, dim.0, dim.1], data));
        }
        if slices.iter().any(|s| s.images.len() != availability.len()) {
            return Err(Error::ConfigMismatch(
                "batch mixes availability patterns".into(),
            ));
        }
        Ok(NetInput {
            availability,
            images,
        })
    }

    pub fn batch(&self) -> usize {
        self.images.values().next().map_or(0, |t| t.batch())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.images.values().next().map_or((0, 0), |t| t.spatial())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub mpc: Var,
    pub encoders: BTreeMap<EncoderId, Vec<Var>>,
    pub decoders: BTreeMap<DecoderId, Var>,
}

/// The full model: anatomy prior U-Net, pathology encoders and decoders.
#[derive(Clone, Debug)]
pub struct MyoPsNet {
    scenario: ScenarioConfig,
    config: NetConfig,
    params: ParamStore,
    mpc_sequences: Vec<SequenceId>,
    mpc_encoder: Encoder,
    mpc_decoder: Decoder,
    encoders: BTreeMap<EncoderId, Encoder>,
    decoders: BTreeMap<DecoderId, Decoder>,
}

impl MyoPsNet {
    /// Builds the model with He-normal weights drawn from `seed`.
    pub fn new(scenario: ScenarioConfig, config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if scenario.d_scar.is_empty() || scenario.d_edema.is_empty() {
            return Err(Error::InvalidConfig(
                "a scenario needs at least one scar and one edema decoder".into(),
            ));
        }
        for d in scenario.decoders() {
            if let Some(e) = d.encoder() {
                if !scenario.encoders.contains(&e) {
                    return Err(Error::InvalidConfig(format!("decoder {d} has no encoder")));
                }
                if scenario.encoders.len() < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "decoder {d} has nothing to fuse"
                    )));
                }
            }
        }
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let k = config.n_scales;
        let top = config.channels(k - 1);
        let mpc_sequences = scenario.mpc_sequences();
        let mpc_encoder = b.encoder("mpc.enc", mpc_sequences.len(), &config);
        let mpc_decoder = b.decoder("mpc.dec", &config, top, 1, mpc_class::COUNT);
        let encoders = scenario
            .encoders
            .iter()
            .map(|&e| {
                let c_in = e.sequences().len() + mpc_class::COUNT;
                (e, b.encoder(&format!("enc.{e}"), c_in, &config))
            })
            .collect();
        let own = usize::from(config.own_skips);
        let decoders = scenario
            .decoders()
            .map(|d| {
                let (bottom, skips) = match d.source {
                    DecoderSource::Encoder(_) => (top * (1 + own), 1 + own),
                    DecoderSource::Pooled => (top, 1),
                };
                let dec = b.decoder(
                    &format!("dec.{d}"),
                    &config,
                    bottom,
                    skips,
                    pathology_class::COUNT,
                );
                (d, dec)
            })
            .collect();
        Ok(MyoPsNet {
            scenario,
            config,
            params,
            mpc_sequences,
            mpc_encoder,
            mpc_decoder,
            encoders,
            decoders,
        })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn unit(tape: &mut Tape, u: &Unit, x: Var, w: Option<Var>) -> Var {
        let w = w.unwrap_or_else(|| tape.param(u.w));
        let (g, b) = (tape.param(u.gamma), tape.param(u.beta));
        let y = tape.conv(x, w, None);
        let y = tape.instance_norm(y, g, b);
        tape.relu(y)
    }

    fn block(tape: &mut Tape, blk: &Block, x: Var, first_w: Option<Var>) -> Var {
        let y = Self::unit(tape, &blk.0[0], x, first_w);
        Self::unit(tape, &blk.0[1], y, None)
    }

    fn encode(tape: &mut Tape, enc: &Encoder, x: Var, first_w: Option<Var>) -> Vec<Var> {
        let mut out = Vec::with_capacity(enc.blocks.len());
        let mut x = x;
        for (l, blk) in enc.blocks.iter().enumerate() {
            if l > 0 {
                x = tape.maxpool2(x);
            }
            x = Self::block(tape, blk, x, if l == 0 { first_w } else { None });
            out.push(x);
        }
        out
    }

    /// `skips[l]` lists the tensors concatenated after upsampling at level l.
    fn decode(tape: &mut Tape, dec: &Decoder, bottom: Var, skips: &[Vec<Var>]) -> Var {
        let mut x = bottom;
        for l in (0..dec.blocks.len()).rev() {
            let up = tape.upsample2(x);
            let mut parts = vec![up];
            parts.extend(&skips[l]);
            let cat = tape.concat(&parts);
            x = Self::block(tape, &dec.blocks[l], cat, None);
        }
        let (w, b) = (tape.param(dec.head_w), tape.param(dec.head_b));
        let logits = tape.conv(x, w, Some(b));
        tape.softmax(logits)
    }

    fn mpc_on_tape(&self, tape: &mut Tape, x: Var, sequences: &[SequenceId]) -> Result<Var> {
        let idx = sequences
            .iter()
            .map(|s| {
                self.mpc_sequences
                    .iter()
                    .position(|m| m == s)
                    .ok_or_else(|| {
                        Error::ConfigMismatch(format!(
                            "sequence {s} is not an input of the {} prior network",
                            self.scenario.name
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let first_w = if idx.len() == self.mpc_sequences.len()
            && idx.iter().enumerate().all(|(i, &j)| i == j)
        {
            None
        } else {
            let w = tape.param(self.mpc_encoder.blocks[0].0[0].w);
            Some(tape.gather_in_channels(w, &idx))
        };
        let pyramid = Self::encode(tape, &self.mpc_encoder, x, first_w);
        let k = pyramid.len();
        let skips: Vec<Vec<Var>> = pyramid[..k - 1].iter().map(|&v| vec![v]).collect();
        Ok(Self::decode(
            tape,
            &self.mpc_decoder,
            pyramid[k - 1],
            &skips,
        ))
    }

    /// Anatomy prior on a `[batch, channels, rows, cols]` stack whose
    /// channels are `sequences`, in order.
    pub fn mpc_forward(&self, input: &Tensor, sequences: &[SequenceId]) -> Result<Tensor> {
        if input.channels() != sequences.len() {
            return Err(Error::ConfigMismatch(format!(
                "prior input has {} channels for {} sequences",
                input.channels(),
                sequences.len()
            )));
        }
        self.config.check_input_size(input.spatial())?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(input.clone());
        let out = self.mpc_on_tape(&mut tape, x, sequences)?;
        Ok(tape.value(out).clone())
    }

    /// Records the whole model on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: &NetInput) -> Result<ForwardVars> {
        self.config.check_input_size(input.dim())?;
        let encoders = self.scenario.active_encoders(&input.availability)?;
        let decoders = self.scenario.active_decoders(&input.availability)?;

        let image_vars: BTreeMap<SequenceId, Var> = input
            .images
            .iter()
            .map(|(id, t)| (*id, tape.input(t.clone())))
            .collect();
        let mpc_seqs: Vec<_> = self
            .mpc_sequences
            .iter()
            .copied()
            .filter(|s| input.availability.contains(*s))
            .collect();
        let parts: Vec<_> = mpc_seqs.iter().map(|s| image_vars[s]).collect();
        let x_mpc = tape.concat(&parts);
        let mpc = self.mpc_on_tape(tape, x_mpc, &mpc_seqs)?;
        let prior = if self.config.detach_prior {
            tape.detach(mpc)
        } else {
            mpc
        };

        let mut pyramids = BTreeMap::new();
        for &e in &encoders {
            let mut parts: Vec<_> = e.sequences().iter().map(|s| image_vars[s]).collect();
            parts.push(prior);
            let x = tape.concat(&parts);
            pyramids.insert(e, Self::encode(tape, &self.encoders[&e], x, None));
        }

        let k = self.config.n_scales;
        let mut out = BTreeMap::new();
        for d in decoders {
            let pooled_over = |exclude: Option<EncoderId>| -> Vec<&Vec<Var>> {
                pyramids
                    .iter()
                    .filter(|(e, _)| Some(**e) != exclude)
                    .map(|(_, p)| p)
                    .collect()
            };
            let sources = pooled_over(d.encoder());
            if sources.is_empty() {
                return Err(Error::ConfigMismatch(format!(
                    "decoder {d} has no encoder to fuse"
                )));
            }
            let fused: Vec<Var> = (0..k)
                .map(|l| {
                    let xs: Vec<Var> = sources.iter().map(|p| p[l]).collect();
                    if xs.len() == 1 {
                        xs[0]
                    } else {
                        tape.max(&xs)
                    }
                })
                .collect();
            let (bottom, skips) = match d.encoder() {
                Some(e) => {
                    let own = &pyramids[&e];
                    if self.config.own_skips {
                        let bottom = tape.concat(&[own[k - 1], fused[k - 1]]);
                        (
                            bottom,
                            (0..k - 1)
                                .map(|l| vec![own[l], fused[l]])
                                .collect::<Vec<_>>(),
                        )
                    } else {
                        (own[k - 1], (0..k - 1).map(|l| vec![fused[l]]).collect())
                    }
                }
                None => (fused[k - 1], (0..k - 1).map(|l| vec![fused[l]]).collect()),
            };
            out.insert(d, Self::decode(tape, &self.decoders[&d], bottom, &skips));
        }
        Ok(ForwardVars {
            mpc,
            encoders: pyramids,
            decoders: out,
        })
    }

    /// Runs one decoder on given pyramids. For a pooled decoder `own` is
    /// ignored and `fused` is the pooled pyramid.
    pub fn decoder_forward(
        &self,
        decoder: DecoderId,
        own: &FeaturePyramid,
        fused: &FeaturePyramid,
    ) -> Result<Tensor> {
        let dec = self
            .decoders
            .get(&decoder)
            .ok_or_else(|| Error::ConfigMismatch(format!("scenario has no decoder {decoder}")))?;
        let k = self.config.n_scales;
        let pooled = decoder.encoder().is_none();
        if fused.len() != k || (!pooled && own.len() != k) {
            return Err(Error::shape(format!("pyramids must have {k} scales")));
        }
        for l in 0..k {
            let want = self.config.channels(l);
            let ok = |t: &Tensor| t.channels() == want && t.spatial() == fused[l].spatial();
            if !ok(&fused[l]) || (!pooled && !ok(&own[l])) {
                return Err(Error::shape(format!(
                    "scale {l} features do not match the decoder"
                )));
            }
        }
        let mut tape = Tape::new(&self.params);
        let fv: Vec<Var> = fused.iter().map(|t| tape.input(t.clone())).collect();
        let (bottom, skips) = if pooled {
            (
                fv[k - 1],
                (0..k - 1).map(|l| vec![fv[l]]).collect::<Vec<_>>(),
            )
        } else {
            let ov: Vec<Var> = own.iter().map(|t| tape.input(t.clone())).collect();
            if self.config.own_skips {
                let bottom = tape.concat(&[ov[k - 1], fv[k - 1]]);
                (bottom, (0..k - 1).map(|l| vec![ov[l], fv[l]]).collect())
            } else {
                (ov[k - 1], (0..k - 1).map(|l| vec![fv[l]]).collect())
            }
        };
        let out = Self::decode(&mut tape, dec, bottom, &skips);
        Ok(tape.value(out).clone())
    }

    /// Forward pass without gradient bookkeeping; one map set per slice.
    pub fn predict(&self, input: &NetInput) -> Result<Vec<ProbabilityMaps>> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward(&mut tape, input)?;
        let mpc = tape.value(vars.mpc);
        let decs: BTreeMap<_, _> = vars
            .decoders
            .iter()
            .map(|(d, v)| (*d, tape.value(*v)))
            .collect();
        Ok((0..input.batch())
            .map(|n| ProbabilityMaps::from_batch(mpc, &decs, n))
            .collect())
    }
}

/// Probability maps of one slice; the slice's images decide which branches run.
pub fn model_forward(net: &MyoPsNet, slice: &Slice) -> Result<ProbabilityMaps> {
    let input = NetInput::from_slices(&[slice])?;
    Ok(net.predict(&input)?.remove(0))
}
