//! Beam-search decoding and attention rendering.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::caption::{parse, CaptionTree, EOS_INDEX, SOS_INDEX};
use crate::decoder::{decode_step, init_state, AttentionContext};
use crate::error::{Error, Result};
use crate::model::{EncodedInput, Model};
use crate::numcore::{log_softmax_rows, Graph, Tensor};
use crate::scalar::Scalar;
use crate::trajectory::{preprocess, RawTrajectory};

/// A decoder that can be advanced one token at a time.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial_state(&self) -> Result<Self::State>;

    /// Advances every `(state, previous token)` pair by one step.
    fn step(&self, items: &[(&Self::State, usize)]) -> Result<Vec<StepOutput<Self::State>>>;
}

/// Result of advancing one hypothesis.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    /// Log-probabilities over the full vocabulary.
    pub log_probs: Vec<f64>,
    pub state: S,
    /// Attention row used for this step; empty for models without one.
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by mean instead of summed log-prob.
    #[serde(default)]
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 10,
            max_len: 64,
            length_normalize: false,
        }
    }
}

/// A partial or complete decode.
#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    /// Emitted tokens; a finished hypothesis ends with `<eos>`.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub state: S,
    /// One attention row per emitted token.
    pub attention: Vec<Vec<f64>>,
}

impl<S> Hypothesis<S> {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS_INDEX)
    }

    fn ranking_score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.score / self.tokens.len() as f64
        } else {
            self.score
        }
    }
}

/// Ranked decodes: finished hypotheses best first, then any cut off at
/// `max_len`.
#[derive(Debug, Clone)]
pub struct BeamOutput<S> {
    pub finished: Vec<Hypothesis<S>>,
    pub truncated: Vec<Hypothesis<S>>,
}

impl<S> BeamOutput<S> {
    pub fn best(&self) -> Option<&Hypothesis<S>> {
        self.finished.first().or(self.truncated.first())
    }
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
}

fn lexicographic(a: &[usize], ta: usize, b: &[usize], tb: usize) -> Ordering {
    a.iter().chain([&ta]).cmp(b.iter().chain([&tb]))
}

fn rank_hypotheses<S>(hyps: &mut [Hypothesis<S>], normalize: bool) {
    hyps.sort_by(|a, b| {
        b.ranking_score(normalize)
            .total_cmp(&a.ranking_score(normalize))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Left-to-right beam search from `<sos>`.
///
/// Every live hypothesis is expanded over the full vocabulary and the best
/// `beam` candidates survive; those ending in `<eos>` retire and free their
/// slot. At the last step finished candidates outrank unfinished ones. Ties
/// go to the lexicographically smaller token sequence.
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<BeamOutput<M::State>> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::InvalidArgument(
            "beam and max_len must be at least 1".into(),
        ));
    }
    let k = model.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial_state()?,
        attention: Vec::new(),
    }];
    let mut finished = Vec::new();
    let mut truncated = Vec::new();
    for t in 1..=cfg.max_len {
        if live.is_empty() {
            break;
        }
        let items: Vec<(&M::State, usize)> = live
            .iter()
            .map(|h| (&h.state, h.tokens.last().copied().unwrap_or(SOS_INDEX)))
            .collect();
        let outputs = model.step(&items)?;
        let mut candidates = Vec::with_capacity(live.len() * k);
        for (parent, out) in outputs.iter().enumerate() {
            if out.log_probs.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "step returned {} log-probs for {k} tokens",
                    out.log_probs.len()
                )));
            }
            for (token, &lp) in out.log_probs.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    candidates.push(Candidate {
                        parent,
                        token,
                        score: live[parent].score + lp,
                    });
                }
            }
        }
        let last = t == cfg.max_len;
        candidates.sort_by(|a, b| {
            let eos_first = if last {
                (b.token == EOS_INDEX).cmp(&(a.token == EOS_INDEX))
            } else {
                Ordering::Equal
            };
            eos_first
                .then_with(|| b.score.total_cmp(&a.score))
                .then_with(|| {
                    lexicographic(
                        &live[a.parent].tokens,
                        a.token,
                        &live[b.parent].tokens,
                        b.token,
                    )
                })
        });
        candidates.truncate(cfg.beam);
        let mut next = Vec::with_capacity(candidates.len());
        for c in candidates {
            let parent = &live[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            let mut attention = parent.attention.clone();
            attention.push(outputs[c.parent].attention.clone());
            let hyp = Hypothesis {
                tokens,
                score: c.score,
                state: outputs[c.parent].state.clone(),
                attention,
            };
            if c.token == EOS_INDEX {
                finished.push(hyp);
            } else if last {
                truncated.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    rank_hypotheses(&mut finished, cfg.length_normalize);
    rank_hypotheses(&mut truncated, cfg.length_normalize);
    Ok(BeamOutput {
        finished,
        truncated,
    })
}

/// Greedy argmax decoding, lowest index on ties.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis<M::State>> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial_state()?,
        attention: Vec::new(),
    };
    while h.tokens.len() < max_len && !h.finished() {
        let prev = h.tokens.last().copied().unwrap_or(SOS_INDEX);
        let out = model.step(&[(&h.state, prev)])?.remove(0);
        let (best, lp) =
            out.log_probs
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
        h.tokens.push(best);
        h.score += lp;
        h.state = out.state;
        h.attention.push(out.attention);
    }
    Ok(h)
}

/// Decoder state of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    pub state: Vec<T>,
    pub coverage: Vec<T>,
}

/// Steps a trained model over one encoded input.
pub struct ModelStepper<'m, T: Scalar> {
    model: &'m Model<T>,
    input: EncodedInput<T>,
}

fn tile<T: Scalar>(t: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    let (rows, cols) = t.dims2();
    let mut data = Vec::with_capacity(rows * cols * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::matrix(rows * times, cols, data)?)
}

impl<'m, T: Scalar> ModelStepper<'m, T> {
    pub fn new(model: &'m Model<T>, input: EncodedInput<T>) -> Self {
        ModelStepper { model, input }
    }

    pub fn frames(&self) -> usize {
        self.input.frames()
    }

    fn context(&self, g: &mut Graph<T>, batch: usize) -> Result<AttentionContext> {
        let l = self.frames();
        let annotations = g.input(tile(&self.input.annotations, batch)?);
        let projected = g.input(tile(&self.input.projected, batch)?);
        Ok(AttentionContext {
            annotations,
            projected,
            mask: vec![true; batch * l],
            batch,
            frames: l,
            lengths: vec![l; batch],
        })
    }
}

impl<T: Scalar> StepModel for ModelStepper<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn initial_state(&self) -> Result<Self::State> {
        let mut g = Graph::new(&self.model.store);
        let ctx = self.context(&mut g, 1)?;
        let s = init_state(&mut g, &self.model.decoder, &ctx)?;
        Ok(DecoderState {
            state: g.value(s).data().to_vec(),
            coverage: vec![T::zero(); self.frames()],
        })
    }

    fn step(&self, items: &[(&Self::State, usize)]) -> Result<Vec<StepOutput<Self::State>>> {
        let h = items.len();
        let l = self.frames();
        let n = self.model.decoder.state_dim;
        let mut g = Graph::new(&self.model.store);
        let ctx = self.context(&mut g, h)?;
        let state = g.input(Tensor::matrix(
            h,
            n,
            items
                .iter()
                .flat_map(|(s, _)| s.state.iter().copied())
                .collect(),
        )?);
        let coverage = g.input(Tensor::matrix(
            h,
            l,
            items
                .iter()
                .flat_map(|(s, _)| s.coverage.iter().copied())
                .collect(),
        )?);
        let prev: Vec<usize> = items.iter().map(|&(_, y)| y).collect();
        let out = decode_step(&mut g, &self.model.decoder, &ctx, &prev, state, coverage)?;
        let log_probs = log_softmax_rows(g.value(out.logits));
        let k = self.vocab_size();
        let (states, covs, alphas) = (
            g.value(out.state).data(),
            g.value(out.coverage).data(),
            g.value(out.alpha).data(),
        );
        Ok((0..h)
            .map(|i| StepOutput {
                log_probs: log_probs.data()[i * k..(i + 1) * k]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
                state: DecoderState {
                    state: states[i * n..(i + 1) * n].to_vec(),
                    coverage: covs[i * l..(i + 1) * l].to_vec(),
                },
                attention: alphas[i * l..(i + 1) * l]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
            })
            .collect())
    }
}

/// A decoded caption with its attention trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecognitionResult {
    /// Caption tokens without `<eos>`.
    pub caption: Vec<String>,
    /// Token predicted at every decode step, `<eos>` included.
    pub steps: Vec<String>,
    pub grammatical: bool,
    /// Parse tree in caption notation, present when grammatical.
    pub tree: Option<String>,
    /// Summed log-probability.
    pub score: f64,
    /// Row per decode step, column per pooled encoder frame.
    pub attention: Vec<Vec<f64>>,
    pub frames: usize,
    /// Cut off at `max_len` without emitting `<eos>`.
    pub truncated: bool,
}

impl RecognitionResult {
    pub fn parse_tree(&self, model_vocab: &crate::caption::Vocabulary) -> Option<CaptionTree> {
        parse(&self.caption, model_vocab).ok()
    }
}

fn to_result<T: Scalar, S>(
    model: &Model<T>,
    h: &Hypothesis<S>,
    frames: usize,
) -> Result<RecognitionResult> {
    let steps = h
        .tokens
        .iter()
        .map(|&i| {
            model
                .vocab
                .token(i)
                .map(str::to_string)
                .ok_or(crate::caption::CaptionError::UnknownIndex(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let caption: Vec<String> = steps
        .iter()
        .take_while(|t| *t != crate::caption::EOS)
        .cloned()
        .collect();
    let tree = parse(&caption, &model.vocab).ok();
    Ok(RecognitionResult {
        grammatical: tree.is_some(),
        tree: tree.map(|t| t.to_string()),
        caption,
        steps,
        score: h.score,
        attention: h.attention.clone(),
        frames,
        truncated: !h.finished(),
    })
}

/// All ranked decodes for a raw trajectory.
pub fn recognize_ranked<T: Scalar>(
    raw: &RawTrajectory,
    model: &Model<T>,
    cfg: &BeamConfig,
) -> Result<Vec<RecognitionResult>> {
    let (_, features) = preprocess(raw, model.config.spacing)?;
    let input = model.encode_one(&features)?;
    let frames = input.frames();
    let stepper = ModelStepper::new(model, input);
    let out = beam_search(&stepper, cfg)?;
    out.finished
        .iter()
        .chain(out.truncated.iter())
        .map(|h| to_result(model, h, frames))
        .collect()
}

/// The most likely caption for a raw trajectory.
pub fn recognize<T: Scalar>(
    raw: &RawTrajectory,
    model: &Model<T>,
    cfg: &BeamConfig,
) -> Result<RecognitionResult> {
    recognize_ranked(raw, model, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

/// Pooled encoder frame (0-based) of resampled point `j` (0-based).
pub fn frame_of_point(j: usize) -> usize {
    j / 2
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    fn new(width: u32, height: u32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    fn plot(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            let p = &mut self.pixels[(y as u32 * self.width + x as u32) as usize];
            *p = (*p).max(v);
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), v: u8) {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.plot(
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
                v,
            );
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            w.write_image_data(&self.pixels)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        Ok(out)
    }
}

/// One rendered decode step.
#[derive(Debug, Clone)]
pub struct AttentionFrame {
    pub svg: String,
    pub raster: GrayImage,
    /// Attention intensity per resampled point, scaled so the peak is 1.
    pub intensity: Vec<f64>,
    pub symbol: String,
}

pub const RASTER_SIZE: u32 = 128;
const BASE_GRAY: u8 = 48;

/// Colors the resampled trajectory by the attention of decode step `step`.
pub fn render_attention(
    raw: &RawTrajectory,
    spacing: f64,
    result: &RecognitionResult,
    step: usize,
) -> Result<AttentionFrame> {
    let row = result.attention.get(step).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "step {step} out of range for {} steps",
            result.attention.len()
        ))
    })?;
    let (resampled, _) = preprocess(raw, spacing)?;
    let pts = resampled.points();
    if pts.len().div_ceil(2) != row.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points do not pool to {} frames",
            pts.len(),
            row.len()
        )));
    }
    let peak = row.iter().copied().fold(0.0, f64::max);
    let intensity: Vec<f64> = (0..pts.len())
        .map(|j| {
            if peak > 0.0 {
                row[frame_of_point(j)] / peak
            } else {
                0.0
            }
        })
        .collect();
    let symbol = result.steps.get(step).cloned().unwrap_or_default();

    let (min_x, min_y, max_x, max_y) = resampled.bounds();
    let side = (max_x - min_x).max(max_y - min_y).max(f64::EPSILON);
    let margin = 8.0;
    let scale = (RASTER_SIZE as f64 - 2.0 * margin) / side;
    let to_px = |x: f64, y: f64| (margin + (x - min_x) * scale, margin + (y - min_y) * scale);

    let mut raster = GrayImage::new(RASTER_SIZE, RASTER_SIZE);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" viewBox="0 0 {s} {s}">"#,
        s = RASTER_SIZE
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut offset = 0;
    for stroke in resampled.strokes() {
        let coords: Vec<(f64, f64)> = stroke.iter().map(|p| to_px(p.x, p.y)).collect();
        let path: Vec<String> = coords
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="rgb(187,187,187)" stroke-width="1"/>"#,
            path.join(" ")
        );
        for w in coords.windows(2) {
            raster.line(w[0], w[1], BASE_GRAY);
        }
        for (i, &(x, y)) in coords.iter().enumerate() {
            let a = intensity[offset + i];
            let red = (255.0 * a).round() as u8;
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="rgb({red},0,0)" fill-opacity="{:.3}"/>"#,
                0.15 + 0.85 * a
            );
            let v = BASE_GRAY + ((255 - BASE_GRAY) as f64 * a).round() as u8;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    raster.plot(x.round() as i64 + dx, y.round() as i64 + dy, v);
                }
            }
        }
        offset += stroke.len();
    }
    let label = symbol
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    let _ = writeln!(
        svg,
        r#"<text x="4" y="12" font-size="10" fill="black">{step}: {label}</text>"#
    );
    svg.push_str("</svg>\n");
    Ok(AttentionFrame {
        svg,
        raster,
        intensity,
        symbol,
    })
}
