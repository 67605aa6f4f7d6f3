//! Teacher-forced training with adadelta, held-out evaluation and early
//! stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{encode, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::{beam_search, BeamConfig, ModelStepper};
use crate::model::{Model, TrainBatch};
use crate::numcore::{clip_gradients, AdadeltaState, Graph, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::synthcorpus::SampleRecord;
use crate::trajectory::{preprocess, FeatureSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many parameter updates, if set.
    pub max_updates: Option<usize>,
    pub clip_norm: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Updates between held-out evaluations; 0 evaluates once per epoch.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub holdout_fraction: f64,
    /// Beam width for held-out evaluation during training.
    pub eval_beam: usize,
    pub max_caption_len: usize,
    pub max_points: usize,
    /// Stop as soon as the watched exact match reaches this value.
    pub stop_at_exact_match: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 100,
            max_updates: None,
            clip_norm: 100.0,
            rho: 0.95,
            eps: 1e-8,
            seed: 1,
            eval_every: 0,
            patience: 10,
            holdout_fraction: 0.1,
            eval_beam: 1,
            max_caption_len: 64,
            max_points: 4000,
            stop_at_exact_match: None,
        }
    }
}

/// A preprocessed training pair.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub class: String,
    pub features: FeatureSequence,
    /// Caption indices followed by `<eos>`.
    pub target: Vec<usize>,
    pub caption: Vec<String>,
}

/// Preprocesses dataset records against `vocab`.
pub fn prepare(
    records: &[SampleRecord],
    vocab: &Vocabulary,
    spacing: f64,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let raw = r
                .trajectory()
                .map_err(|e| Error::Data(format!("{}: {e}", r.id)))?;
            if raw.len() > cfg.max_points {
                return Err(Error::Data(format!(
                    "{}: {} points exceed {}",
                    r.id,
                    raw.len(),
                    cfg.max_points
                )));
            }
            let target =
                encode(&r.caption, vocab).map_err(|e| Error::Data(format!("{}: {e}", r.id)))?;
            if target.len() > cfg.max_caption_len {
                return Err(Error::Data(format!(
                    "{}: caption longer than {}",
                    r.id, cfg.max_caption_len
                )));
            }
            let (_, features) =
                preprocess(&raw, spacing).map_err(|e| Error::Data(format!("{}: {e}", r.id)))?;
            Ok(Example {
                id: r.id.clone(),
                class: r.class.clone(),
                features,
                target,
                caption: r.caption.clone(),
            })
        })
        .collect()
}

/// Per-class split: a `fraction` of each class (rounded, at least one when
/// the class has two or more samples) goes to the held-out side.
pub fn stratified_split(classes: &[String], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = if fraction <= 0.0 || n < 2 {
            0
        } else {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        };
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Groups indices of similar length: shuffle, stable-sort by length, chunk,
/// then shuffle the batch order.
pub fn bucket_batches<R: rand::Rng>(
    lengths: &[usize],
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = idx
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    batches.shuffle(rng);
    batches
}

/// Summed negative log-probability of the targets, averaged over samples.
/// `steps[t]` holds `[B, K]` distributions; positions past a target's end
/// are padding and contribute nothing.
pub fn ce_loss<T: Scalar>(steps: &[Tensor<T>], targets: &[Vec<usize>]) -> Result<T> {
    let mut total = T::zero();
    for (t, dist) in steps.iter().enumerate() {
        let (b, k) = dist.dims2();
        if b != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{b} distributions for {} targets",
                targets.len()
            )));
        }
        for (i, y) in targets.iter().enumerate() {
            if let Some(&w) = y.get(t) {
                if w >= k {
                    return Err(Error::InvalidArgument(format!(
                        "target index {w} outside vocabulary of {k}"
                    )));
                }
                total -= dist.data()[i * k + w].ln();
            }
        }
    }
    Ok(total / T::of(targets.len().max(1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of samples decoded exactly.
    pub exact_match: f64,
    /// Token edit distance over reference token count.
    pub token_error_rate: f64,
    pub samples: usize,
}

/// Decodes every example and scores whole-caption matches.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    examples: &[Example],
    beam: &BeamConfig,
) -> Result<Metrics> {
    let (mut exact, mut edits, mut reference) = (0usize, 0usize, 0usize);
    for ex in examples {
        let input = model.encode_one(&ex.features)?;
        let out = beam_search(&ModelStepper::new(model, input), beam)?;
        let tokens: Vec<usize> = out
            .best()
            .map(|h| {
                h.tokens
                    .iter()
                    .copied()
                    .take_while(|&t| t != crate::caption::EOS_INDEX)
                    .collect()
            })
            .unwrap_or_default();
        let truth = &ex.target[..ex.target.len() - 1];
        let finished = out.best().is_some_and(|h| h.finished());
        if finished && tokens == truth {
            exact += 1;
        }
        edits += strsim::generic_levenshtein(&tokens, &truth.to_vec());
        reference += truth.len();
    }
    let n = examples.len();
    Ok(Metrics {
        exact_match: if n == 0 { 0.0 } else { exact as f64 / n as f64 },
        token_error_rate: if reference == 0 {
            0.0
        } else {
            edits as f64 / reference as f64
        },
        samples: n,
    })
}

/// Checks that a model can read a dataset's captions.
pub fn check_vocab(model: &Vocabulary, data: &Vocabulary) -> Result<()> {
    if model.hash() != data.hash() {
        return Err(Error::VocabMismatch {
            model: model.hash(),
            data: data.hash(),
        });
    }
    Ok(())
}

/// Outcome of one parameter update.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub applied_norm: f64,
}

/// Owns a model and its optimizer state.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: AdadeltaState<T>,
    pub config: TrainConfig,
    pub updates: usize,
}

/// One metrics log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub update: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub token_err: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub records: Vec<EvalRecord>,
    /// Parameters at the best held-out exact match.
    pub best: ParamStore<T>,
    pub best_exact_match: f64,
    pub updates: usize,
    pub stopped_early: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Self {
        let optimizer = AdadeltaState::new(&model.store, config.rho, config.eps);
        Trainer {
            model,
            optimizer,
            config,
            updates: 0,
        }
    }

    pub fn batch(&self, examples: &[&Example]) -> Result<TrainBatch<T>> {
        let feats: Vec<&FeatureSequence> = examples.iter().map(|e| &e.features).collect();
        TrainBatch::new(&feats, examples.iter().map(|e| e.target.clone()).collect())
    }

    /// Forward, backward, clip and one adadelta update.
    pub fn step(&mut self, batch: &TrainBatch<T>) -> Result<StepStats> {
        let (loss, mut grads) = {
            let mut g = Graph::new(&self.model.store);
            let out = self.model.forward_loss(&mut g, batch)?;
            (g.value(out.loss).data()[0], g.backward(out.loss)?)
        };
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite loss at update {}",
                self.updates
            )));
        }
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm);
        let applied_norm = grads.global_norm();
        self.optimizer.step(&mut self.model.store, &grads);
        self.updates += 1;
        Ok(StepStats {
            loss: loss.as_f64(),
            grad_norm: grad_norm.as_f64(),
            applied_norm: applied_norm.as_f64(),
        })
    }

    fn limit_reached(&self) -> bool {
        self.config.max_updates.is_some_and(|m| self.updates >= m)
    }

    /// Trains until `max_epochs`, `max_updates`, or `patience` evaluations
    /// without held-out improvement. When `heldout` is empty, training
    /// accuracy on `train` is tracked instead.
    pub fn fit(
        &mut self,
        train: &[Example],
        heldout: &[Example],
        mut on_eval: impl FnMut(&EvalRecord),
    ) -> Result<TrainReport<T>> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let lengths: Vec<usize> = train.iter().map(|e| e.features.len()).collect();
        let all: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let beam = BeamConfig {
            beam: self.config.eval_beam,
            max_len: self.config.max_caption_len,
            length_normalize: false,
        };
        let watch = if heldout.is_empty() { train } else { heldout };
        let mut report = TrainReport {
            records: Vec::new(),
            best: self.model.store.clone(),
            best_exact_match: f64::NEG_INFINITY,
            updates: 0,
            stopped_early: false,
        };
        let (mut loss_sum, mut loss_n, mut stale) = (0.0, 0usize, 0usize);
        'epochs: for epoch in 1..=self.config.max_epochs {
            let batches = bucket_batches(&lengths, &all, self.config.batch_size, &mut rng);
            let n_batches = batches.len();
            for (bi, idx) in batches.into_iter().enumerate() {
                let members: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
                let batch = self.batch(&members)?;
                let stats = self.step(&batch)?;
                loss_sum += stats.loss;
                loss_n += 1;
                let end_of_epoch = bi + 1 == n_batches;
                let due = if self.config.eval_every == 0 {
                    end_of_epoch
                } else {
                    self.updates.is_multiple_of(self.config.eval_every)
                };
                if due || self.limit_reached() {
                    let m = evaluate(&self.model, watch, &beam)?;
                    let rec = EvalRecord {
                        epoch,
                        update: self.updates,
                        loss: loss_sum / loss_n as f64,
                        token_err: m.token_error_rate,
                        exact_match: m.exact_match,
                    };
                    (loss_sum, loss_n) = (0.0, 0);
                    on_eval(&rec);
                    report.records.push(rec);
                    if m.exact_match > report.best_exact_match {
                        report.best_exact_match = m.exact_match;
                        report.best = self.model.store.clone();
                        stale = 0;
                        if self
                            .config
                            .stop_at_exact_match
                            .is_some_and(|t| m.exact_match >= t)
                        {
                            break 'epochs;
                        }
                    } else {
                        stale += 1;
                        if stale >= self.config.patience {
                            report.stopped_early = true;
                            break 'epochs;
                        }
                    }
                }
                if self.limit_reached() {
                    break 'epochs;
                }
            }
        }
        report.updates = self.updates;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::StructureKind;
    use crate::model::ModelConfig;
    use crate::numcore::softmax_rows;
    use crate::synthcorpus::{gen_dataset, GenConfig};

    #[test]
    fn ce_loss_closed_forms() {
        let sure = Tensor::matrix(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ce_loss(&[sure.clone(), sure], &[vec![1, 1]]).unwrap(), 0.0);
        let uniform = Tensor::matrix(1, 4, vec![0.25f64; 4]).unwrap();
        let l = ce_loss(&[uniform.clone(), uniform.clone()], &[vec![2, 3]]).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 2.7726).abs() < 1e-4);
        // Second sample is one step long; its padding position is ignored.
        let two = Tensor::matrix(2, 4, vec![0.25f64; 8]).unwrap();
        let l = ce_loss(&[two.clone(), two], &[vec![0, 1], vec![3]]).unwrap();
        assert!((l - 1.5 * 4f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&[uniform], &[vec![4]]).is_err());
    }

    fn small_corpus(classes: usize, per_class: usize) -> (Vocabulary, Vec<Example>) {
        let ds = gen_dataset(&GenConfig {
            n_radicals: 6,
            structures: vec![StructureKind::A, StructureKind::D],
            n_classes: classes,
            samples_per_class: per_class,
            seed: 3,
            strength: 0.5,
            writer_offset: 0,
        })
        .unwrap();
        let ex = prepare(&ds.records(), &ds.vocab, 0.1, &TrainConfig::default()).unwrap();
        (ds.vocab, ex)
    }

    #[test]
    fn graph_loss_agrees_with_distribution_loss() {
        let (vocab, ex) = small_corpus(3, 1);
        let model = Model::<f64>::new(ModelConfig::tiny(), vocab, 2).unwrap();
        let trainer = Trainer::new(model, TrainConfig::default());
        let refs: Vec<&Example> = ex.iter().collect();
        let batch = trainer.batch(&refs).unwrap();
        let mut g = Graph::new(&trainer.model.store);
        let out = trainer.model.forward_loss(&mut g, &batch).unwrap();
        let dists: Vec<Tensor<f64>> = out
            .logits
            .iter()
            .map(|&l| softmax_rows(g.value(l), None).unwrap())
            .collect();
        let direct = ce_loss(&dists, &batch.targets).unwrap();
        assert!((direct - g.value(out.loss).data()[0]).abs() < 1e-10);
    }

    #[test]
    fn stratified_split_is_per_class_and_seeded() {
        let classes: Vec<String> = (0..50).map(|i| format!("c{}", i % 5)).collect();
        let (train, held) = stratified_split(&classes, 0.1, 4);
        assert_eq!((train.len(), held.len()), (45, 5));
        let held_classes: std::collections::BTreeSet<_> =
            held.iter().map(|&i| &classes[i]).collect();
        assert_eq!(held_classes.len(), 5);
        assert_eq!(stratified_split(&classes, 0.1, 4), (train, held));
        let (t, h) = stratified_split(&["x".to_string()], 0.1, 0);
        assert_eq!((t.len(), h.len()), (1, 0));
    }

    #[test]
    fn buckets_cover_all_indices_once() {
        let lengths: Vec<usize> = (0..37).map(|i| (i * 7919) % 50).collect();
        let idx: Vec<usize> = (0..37).collect();
        let batches = bucket_batches(&lengths, &idx, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, idx);
        assert!(batches.iter().all(|b| b.len() <= 8));
        // Within a batch lengths span one contiguous slice of the sorted order.
        let mut sorted = lengths.clone();
        sorted.sort_unstable();
        for b in &batches {
            let (lo, hi) = (
                b.iter().map(|&i| lengths[i]).min().unwrap(),
                b.iter().map(|&i| lengths[i]).max().unwrap(),
            );
            let span = sorted.iter().filter(|&&l| l >= lo && l <= hi).count();
            assert!(span <= b.len() + sorted.iter().filter(|&&l| l == lo || l == hi).count());
        }
    }

    #[test]
    fn clipping_bounds_applied_norm() {
        let (vocab, ex) = small_corpus(4, 1);
        let model = Model::<f64>::new(ModelConfig::tiny(), vocab, 2).unwrap();
        let mut trainer = Trainer::new(
            model,
            TrainConfig {
                clip_norm: 0.01,
                ..TrainConfig::default()
            },
        );
        let refs: Vec<&Example> = ex.iter().collect();
        let batch = trainer.batch(&refs).unwrap();
        for _ in 0..3 {
            let s = trainer.step(&batch).unwrap();
            assert!(s.grad_norm > 0.01);
            assert!(s.applied_norm <= 0.01 + 1e-6);
        }
    }

    #[test]
    fn empty_prediction_is_wrong_and_metrics_ignore_order() {
        let (vocab, ex) = small_corpus(4, 2);
        let mut model = Model::<f64>::new(ModelConfig::tiny(), vocab, 2).unwrap();
        // Force `<eos>` first: every prediction is the empty caption.
        let b_o = model.decoder.b_o;
        model.store.get_mut(b_o).data_mut()[crate::caption::EOS_INDEX] = 1e3;
        let beam = BeamConfig {
            beam: 2,
            max_len: 8,
            length_normalize: false,
        };
        let m = evaluate(&model, &ex, &beam).unwrap();
        assert_eq!(m.exact_match, 0.0);
        assert!((m.token_error_rate - 1.0).abs() < 1e-12);
        let mut rev = ex.clone();
        rev.reverse();
        assert_eq!(evaluate(&model, &rev, &beam).unwrap(), m);
    }

    #[test]
    fn vocab_mismatch_detected() {
        let a = Vocabulary::with_radicals(["x", "y"]).unwrap();
        let b = Vocabulary::with_radicals(["y", "x"]).unwrap();
        assert!(check_vocab(&a, &a).is_ok());
        assert!(matches!(
            check_vocab(&a, &b),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn same_seed_same_loss_curve() {
        let (vocab, ex) = small_corpus(4, 2);
        let run = || {
            let model = Model::<f64>::new(ModelConfig::tiny(), vocab.clone(), 8).unwrap();
            let mut t = Trainer::new(
                model,
                TrainConfig {
                    batch_size: 3,
                    max_updates: Some(6),
                    eval_every: 3,
                    ..TrainConfig::default()
                },
            );
            let report = t.fit(&ex, &[], |_| {}).unwrap();
            (
                report.records,
                t.model
                    .store
                    .iter()
                    .flat_map(|(_, _, v)| v.data().to_vec())
                    .collect::<Vec<_>>(),
            )
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn rejects_empty_training_set() {
        let vocab = Vocabulary::with_radicals(["x"]).unwrap();
        let model = Model::<f64>::new(ModelConfig::tiny(), vocab, 0).unwrap();
        assert!(Trainer::new(model, TrainConfig::default())
            .fit(&[], &[], |_| {})
            .is_err());
    }
}
