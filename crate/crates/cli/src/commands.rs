use std::io::Write;
use std::path::Path;

use radseq::caption::{StructureKind, Vocabulary};
use radseq::inference::{recognize, render_attention, BeamConfig, RecognitionResult};
use radseq::model::Model;
use radseq::numcore::checkpoint::sha256_hex;
use radseq::synthcorpus::{gen_dataset, read_jsonl, GenConfig};
use radseq::trainer::{
    check_vocab, evaluate, prepare, stratified_split, EvalRecord, Metrics, Trainer,
};
use radseq::trajectory::RawTrajectory;
use radseq::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{Dtype, RunConfig};
use crate::error::CliError;

/// A loaded checkpoint ready for recognition.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Model<f64>,
    /// SHA-256 of the checkpoint file.
    pub hash: String,
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let model = Model::<f64>::load(bytes.as_slice())?;
    Ok(LoadedModel {
        model,
        hash: sha256_hex(&bytes),
    })
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Vocabulary::parse_file(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Significant-digit rounding for attention payloads.
pub fn round_sig(v: f64, digits: usize) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.*e}", digits - 1).parse().unwrap_or(v)
}

/// JSON shape shared by `recognize` and `POST /recognize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionJson {
    pub caption: Vec<String>,
    pub score: f64,
    pub grammatical: bool,
    pub tree: Option<String>,
    /// Row per decode step, column per pooled frame, 6 significant digits.
    pub attention: Vec<Vec<f64>>,
    pub frames: usize,
    /// Token chosen at each step, `<eos>` included.
    pub steps: Vec<String>,
    pub truncated: bool,
}

impl From<&RecognitionResult> for RecognitionJson {
    fn from(r: &RecognitionResult) -> Self {
        RecognitionJson {
            caption: r.caption.clone(),
            score: r.score,
            grammatical: r.grammatical,
            tree: r.tree.clone(),
            attention: r
                .attention
                .iter()
                .map(|row| row.iter().map(|&v| round_sig(v, 6)).collect())
                .collect(),
            frames: r.frames,
            steps: r.steps.clone(),
            truncated: r.truncated,
        }
    }
}

/// Points file: any JSON object with a `points` array of `[x, y, stroke]`.
#[derive(Debug, Deserialize)]
struct PointsFile {
    points: Vec<[f64; 3]>,
}

pub fn read_points(path: &Path) -> Result<Vec<[f64; 3]>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let parsed: PointsFile = serde_json::from_str(&text)
        .or_else(|_| serde_json::from_str(first))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(parsed.points)
}

pub fn recognize_points(
    m: &Model<f64>,
    points: &[[f64; 3]],
    beam: &BeamConfig,
) -> Result<RecognitionResult, radseq::Error> {
    let raw = RawTrajectory::from_triples(points)?;
    recognize(&raw, m, beam)
}

/// Writes `step_NN.svg` and `step_NN.png` for every decode step.
pub fn visualize(
    m: &Model<f64>,
    points: &[[f64; 3]],
    beam: &BeamConfig,
    out: &Path,
) -> Result<usize, CliError> {
    let raw = RawTrajectory::from_triples(points).map_err(|e| CliError::Data(e.to_string()))?;
    let result = recognize(&raw, m, beam)?;
    std::fs::create_dir_all(out)?;
    for step in 0..result.attention.len() {
        let frame = render_attention(&raw, m.config.spacing, &result, step)?;
        std::fs::write(out.join(format!("step_{step:02}.svg")), &frame.svg)?;
        std::fs::write(
            out.join(format!("step_{step:02}.png")),
            frame.raster.to_png()?,
        )?;
    }
    Ok(result.attention.len())
}

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub out: std::path::PathBuf,
    pub stem: String,
    pub config: GenConfig,
}

pub fn parse_structures(list: &str) -> Result<Vec<StructureKind>, CliError> {
    list.split(',')
        .map(|t| {
            StructureKind::from_token(t.trim())
                .ok_or_else(|| CliError::Usage(format!("unknown structure {t:?}")))
        })
        .collect()
}

pub fn gen_data(args: &GenArgs) -> Result<usize, CliError> {
    let ds = gen_dataset(&args.config)?;
    ds.write(&args.out, &args.stem)?;
    Ok(ds.samples.len())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub updates: usize,
    pub best_exact_match: f64,
    pub stopped_early: bool,
    pub checkpoint: String,
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    mut log: impl FnMut(&EvalRecord),
) -> Result<TrainSummary, CliError> {
    let vocab = read_vocab(&cfg.data.vocab)?;
    let records = read_jsonl(&cfg.data.train, &vocab)?;
    if records.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no samples",
            cfg.data.train.display()
        )));
    }
    let mc = cfg.model_config()?;
    let examples = prepare(&records, &vocab, mc.spacing, &cfg.train)?;
    let classes: Vec<String> = examples.iter().map(|e| e.class.clone()).collect();
    let (tr, ho) = stratified_split(&classes, cfg.train.holdout_fraction, cfg.train.seed);
    let train: Vec<_> = tr.iter().map(|&i| examples[i].clone()).collect();
    let held: Vec<_> = ho.iter().map(|&i| examples[i].clone()).collect();
    let model = Model::<T>::new(mc, vocab, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone());
    let report = trainer.fit(&train, &held, &mut log)?;
    trainer.model.store = report.best;
    if let Some(dir) = cfg.checkpoint.parent() {
        std::fs::create_dir_all(dir)?;
    }
    trainer.model.save_file(&cfg.checkpoint)?;
    Ok(TrainSummary {
        updates: report.updates,
        best_exact_match: report.best_exact_match,
        stopped_early: report.stopped_early,
        checkpoint: cfg.checkpoint.display().to_string(),
    })
}

/// Trains from a run config, writing the best checkpoint and one metrics
/// line per evaluation.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let mut sink: Option<std::io::BufWriter<std::fs::File>> = match &cfg.metrics {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut log = |r: &EvalRecord| {
        let line = serde_json::to_string(r).expect("record serializes");
        eprintln!("{line}");
        if let Some(w) = sink.as_mut() {
            let _ = writeln!(w, "{line}");
            let _ = w.flush();
        }
    };
    match cfg.dtype {
        Dtype::F32 => train_as::<f32>(cfg, &mut log),
        Dtype::F64 => train_as::<f64>(cfg, &mut log),
    }
}

/// Decodes a dataset with a checkpoint and scores it.
pub fn eval(cfg: &RunConfig, data: Option<&Path>) -> Result<Metrics, CliError> {
    let loaded = load_model(&cfg.checkpoint)?;
    let vocab = read_vocab(&cfg.data.vocab)?;
    check_vocab(&loaded.model.vocab, &vocab)?;
    let path = data.or(cfg.data.test.as_deref()).unwrap_or(&cfg.data.train);
    let records = read_jsonl(path, &vocab)?;
    let examples = prepare(&records, &vocab, loaded.model.config.spacing, &cfg.train)?;
    Ok(evaluate(&loaded.model, &examples, &cfg.beam)?)
}
