//! The assembled recognizer: configuration presets, parameter layout,
//! teacher-forced loss and checkpoint I/O.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{Vocabulary, SOS_INDEX};
use crate::decoder::{decode_step, init_state, AttentionContext, DecoderDims, DecoderParams};
use crate::encoder::{encode, BatchFeatures, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::checkpoint::{read_checkpoint, write_checkpoint};
use crate::numcore::{Graph, NodeId, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::trajectory::{FeatureSequence, DEFAULT_SPACING};

/// Architecture and preprocessing hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub encoder_layers: usize,
    /// GRU units per direction; annotations are twice as wide.
    pub encoder_units: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
    pub attention_dim: usize,
    pub coverage_filters: usize,
    pub coverage_kernel: usize,
    /// Half-width of the uniform weight initializer.
    pub init_scale: f64,
    /// Resampling spacing applied before featurization.
    pub spacing: f64,
}

impl ModelConfig {
    /// Full-size network: 4 x (250 + 250) encoder, 256-wide decoder,
    /// 256 coverage filters of width 5.
    pub fn full() -> Self {
        ModelConfig {
            preset: "full".into(),
            encoder_layers: 4,
            encoder_units: 250,
            embed_dim: 256,
            state_dim: 256,
            attention_dim: 256,
            coverage_filters: 256,
            coverage_kernel: 5,
            init_scale: 0.08,
            spacing: DEFAULT_SPACING,
        }
    }

    /// Two 16-unit bidirectional layers and a 16-wide decoder.
    pub fn tiny() -> Self {
        ModelConfig {
            preset: "tiny".into(),
            encoder_layers: 2,
            encoder_units: 16,
            embed_dim: 16,
            state_dim: 16,
            attention_dim: 16,
            coverage_filters: 16,
            coverage_kernel: 5,
            init_scale: 0.08,
            spacing: 0.1,
        }
    }

    /// Mid-size network for synthetic-corpus experiments on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            preset: "desk".into(),
            encoder_layers: 2,
            encoder_units: 64,
            embed_dim: 64,
            state_dim: 64,
            attention_dim: 64,
            coverage_filters: 32,
            coverage_kernel: 5,
            init_scale: 0.08,
            spacing: 0.08,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "tiny" => Some(Self::tiny()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn annotation_dim(&self) -> usize {
        2 * self.encoder_units
    }

    fn validate(&self) -> Result<()> {
        let ok = self.encoder_layers >= 1
            && self.encoder_units >= 1
            && self.embed_dim >= 2
            && self.embed_dim.is_multiple_of(2)
            && self.state_dim >= 1
            && self.attention_dim >= 1
            && self.coverage_filters >= 1
            && self.coverage_kernel % 2 == 1
            && self.init_scale > 0.0
            && self.spacing > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid model config {self:?}"
            )))
        }
    }
}

/// Parameters plus everything needed to interpret them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub seed: u64,
}

fn layout<T: Scalar>(
    config: &ModelConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> (ParamStore<T>, EncoderParams, DecoderParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = EncoderParams::register(
        &mut store,
        config.encoder_layers,
        config.encoder_units,
        config.init_scale,
        &mut rng,
    );
    let dims = DecoderDims {
        vocab: vocab.len(),
        annotation: config.annotation_dim(),
        embed: config.embed_dim,
        state: config.state_dim,
        attention: config.attention_dim,
        filters: config.coverage_filters,
        kernel: config.coverage_kernel,
    };
    let decoder = DecoderParams::register(&mut store, dims, config.init_scale, &mut rng);
    (store, encoder, decoder)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vec<String>,
}

/// A padded training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub features: BatchFeatures<T>,
    /// Target indices per sample, each ending with `<eos>`.
    pub targets: Vec<Vec<usize>>,
}

impl<T: Scalar> TrainBatch<T> {
    pub fn new(features: &[&FeatureSequence], targets: Vec<Vec<usize>>) -> Result<Self> {
        if features.len() != targets.len() || targets.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument(
                "each sample needs features and a non-empty target".into(),
            ));
        }
        Ok(TrainBatch {
            features: BatchFeatures::new(features)?,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Nodes of a teacher-forced forward pass.
#[derive(Debug, Clone)]
pub struct LossNodes {
    /// Summed CE over valid target positions, averaged over samples.
    pub loss: NodeId,
    /// Output scores per decode step, `[B, K]` each.
    pub logits: Vec<NodeId>,
    /// Previous-token inputs fed at each step.
    pub inputs: Vec<Vec<usize>>,
}

/// Encoder output for one sample, outside any graph.
#[derive(Debug, Clone)]
pub struct EncodedInput<T> {
    /// `[L, D]`
    pub annotations: Tensor<T>,
    /// `U_att a_i` per frame, `[L, n']`.
    pub projected: Tensor<T>,
}

impl<T: Scalar> EncodedInput<T> {
    pub fn frames(&self) -> usize {
        self.annotations.shape()[0]
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let (store, encoder, decoder) = layout(&config, &vocab, seed);
        Ok(Model {
            config,
            vocab,
            store,
            encoder,
            decoder,
            seed,
        })
    }

    /// Attaches an existing parameter store, checking names and shapes
    /// against the layout `config` implies.
    pub fn from_store(
        config: ModelConfig,
        vocab: Vocabulary,
        store: ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (expected, encoder, decoder) = layout::<T>(&config, &vocab, seed);
        if expected.len() != store.len() {
            return Err(Error::Layout(format!(
                "expected {} tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for ((_, n1, a), (_, n2, b)) in expected.iter().zip(store.iter()) {
            if n1 != n2 || a.shape() != b.shape() {
                return Err(Error::Layout(format!(
                    "expected {n1}{:?}, found {n2}{:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Model {
            config,
            vocab,
            store,
            encoder,
            decoder,
            seed,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder,
            seed: self.seed,
        }
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
        };
        write_checkpoint(
            out,
            &self.store,
            self.seed,
            &self.vocab.hash(),
            serde_json::to_value(meta)?,
        )?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let (header, store) = read_checkpoint::<T, R>(input)?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta)?;
        let vocab = Vocabulary::parse_file(&(meta.vocab.join("\n") + "\n"))?;
        if vocab.hash() != header.vocab_hash {
            return Err(Error::VocabMismatch {
                model: header.vocab_hash,
                data: vocab.hash(),
            });
        }
        Self::from_store(meta.config, vocab, store, header.seed)
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file))
    }

    /// Teacher-forced cross-entropy: step `t` is fed the ground-truth token
    /// `t-1` (`<sos>` first) and scored against token `t`.
    pub fn forward_loss(&self, g: &mut Graph<T>, batch: &TrainBatch<T>) -> Result<LossNodes> {
        let b = batch.len();
        let ann = encode(g, &self.encoder, &batch.features)?;
        let ctx = AttentionContext::new(g, &self.decoder, &ann)?;
        let mut state = init_state(g, &self.decoder, &ctx)?;
        let mut coverage = ctx.empty_coverage(g);
        let steps = batch.targets.iter().map(Vec::len).max().unwrap_or(0);
        let share = T::one() / T::of(b as f64);
        let mut total: Option<NodeId> = None;
        let mut logits = Vec::with_capacity(steps);
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = batch
                .targets
                .iter()
                .map(|y| {
                    if t == 0 {
                        SOS_INDEX
                    } else {
                        y.get(t - 1).copied().unwrap_or(SOS_INDEX)
                    }
                })
                .collect();
            let target: Vec<usize> = batch
                .targets
                .iter()
                .map(|y| y.get(t).copied().unwrap_or(0))
                .collect();
            let weights: Vec<T> = batch
                .targets
                .iter()
                .map(|y| if t < y.len() { share } else { T::zero() })
                .collect();
            let step = decode_step(g, &self.decoder, &ctx, &prev, state, coverage)?;
            let ce = g.softmax_ce(step.logits, &target, weights)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
            logits.push(step.logits);
            inputs.push(prev);
            state = step.state;
            coverage = step.coverage;
        }
        let loss = total.ok_or_else(|| Error::InvalidArgument("empty targets".into()))?;
        Ok(LossNodes {
            loss,
            logits,
            inputs,
        })
    }

    /// Runs the encoder on one sequence and precomputes the attention's
    /// annotation projection.
    pub fn encode_one(&self, features: &FeatureSequence) -> Result<EncodedInput<T>> {
        let mut g = Graph::new(&self.store);
        let batch = BatchFeatures::new(&[features])?;
        let ann = encode(&mut g, &self.encoder, &batch)?;
        let annotations = g.value(ann.values).clone();
        let projected = annotations.matmul(self.store.get(self.decoder.attention.u_att))?;
        Ok(EncodedInput {
            annotations,
            projected,
        })
    }
}
