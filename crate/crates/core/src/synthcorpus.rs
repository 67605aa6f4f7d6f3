//! Synthetic composed characters: radical polyline templates placed by
//! structure layout rules, then perturbed per writer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::caption::{parse, CaptionTree, StructureKind, Vocabulary};
use crate::error::{Error, Result};
use crate::trajectory::{PenPoint, RawTrajectory};

const TEMPLATE_DATA: &str = include_str!("../data/radicals.json");

/// Half of the gap left between side-by-side or stacked children.
const HALF_GAP: f64 = 0.02;

/// Spacing of re-phased points along each stroke during jitter.
const REPHASE_STEP: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadicalTemplate {
    pub id: String,
    /// Polylines in the unit box, in writing order.
    pub strokes: Vec<Vec<[f64; 2]>>,
}

/// The shipped radical glyphs.
pub fn builtin_templates() -> Vec<RadicalTemplate> {
    serde_json::from_str(TEMPLATE_DATA).expect("bundled radical templates are valid")
}

/// Axis-aligned box `[x0, x1] x [y0, y1]`; y grows downward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    /// Maps unit-box coordinates into this box.
    pub fn place(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.x0 + x * (self.x1 - self.x0),
            self.y0 + y * (self.y1 - self.y0),
        )
    }

    /// Sub-box given in this box's unit coordinates.
    pub fn sub(&self, r: Rect) -> Rect {
        let (x0, y0) = self.place(r.x0, r.y0);
        let (x1, y1) = self.place(r.x1, r.y1);
        Rect { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let eps = 1e-9;
        x >= self.x0 - eps && x <= self.x1 + eps && y >= self.y0 - eps && y <= self.y1 + eps
    }
}

/// Placement of the surrounded child inside the surrounding child's extent.
pub fn inset(kind: StructureKind) -> Option<Rect> {
    use StructureKind::*;
    Some(match kind {
        Stl => Rect::new(0.4, 0.4, 0.95, 0.95),
        Str => Rect::new(0.05, 0.4, 0.6, 0.95),
        Sbl => Rect::new(0.4, 0.05, 0.95, 0.6),
        Sl => Rect::new(0.35, 0.25, 0.95, 0.75),
        Sb => Rect::new(0.25, 0.05, 0.75, 0.65),
        St => Rect::new(0.25, 0.35, 0.75, 0.95),
        S => Rect::new(0.25, 0.25, 0.75, 0.75),
        W => Rect::new(0.3, 0.3, 0.7, 0.7),
        A | D => return None,
    })
}

/// Boxes for `n` children split along one axis, leaving a gap between
/// neighbours: two children get `[0, 0.48]` and `[0.52, 1]`.
pub fn split_boxes(n: usize, horizontal: bool) -> Vec<Rect> {
    (0..n)
        .map(|i| {
            let lo = i as f64 / n as f64 + if i > 0 { HALF_GAP } else { 0.0 };
            let hi = (i + 1) as f64 / n as f64 - if i + 1 < n { HALF_GAP } else { 0.0 };
            if horizontal {
                Rect::new(lo, 0.0, hi, 1.0)
            } else {
                Rect::new(0.0, lo, 1.0, hi)
            }
        })
        .collect()
}

/// A composed glyph with the strokes each leaf contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub trajectory: RawTrajectory,
    /// Per leaf in caption order: radical id and its stroke index range.
    pub leaves: Vec<(String, Range<usize>)>,
}

fn bounds(strokes: &[Vec<(f64, f64)>]) -> Rect {
    let mut r = Rect::new(
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in strokes.iter().flatten() {
        r.x0 = r.x0.min(x);
        r.y0 = r.y0.min(y);
        r.x1 = r.x1.max(x);
        r.y1 = r.y1.max(y);
    }
    r
}

fn place_tree(
    tree: &CaptionTree,
    rect: Rect,
    templates: &HashMap<&str, &RadicalTemplate>,
    strokes: &mut Vec<Vec<(f64, f64)>>,
    leaves: &mut Vec<(String, Range<usize>)>,
) -> Result<()> {
    match tree {
        CaptionTree::Leaf(id) => {
            let t = templates
                .get(id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("no template for radical {id}")))?;
            let start = strokes.len();
            strokes.extend(
                t.strokes
                    .iter()
                    .map(|s| s.iter().map(|&[x, y]| rect.place(x, y)).collect()),
            );
            leaves.push((id.clone(), start..strokes.len()));
        }
        CaptionTree::Node { kind, children } => {
            if !kind.accepts_children(children.len()) {
                return Err(Error::InvalidArgument(format!(
                    "{} cannot take {} children",
                    kind.token(),
                    children.len()
                )));
            }
            match inset(*kind) {
                None => {
                    let boxes = split_boxes(children.len(), *kind == StructureKind::A);
                    for (child, b) in children.iter().zip(boxes) {
                        place_tree(child, rect.sub(b), templates, strokes, leaves)?;
                    }
                }
                Some(inner) => {
                    let start = strokes.len();
                    place_tree(&children[0], rect, templates, strokes, leaves)?;
                    let outer = bounds(&strokes[start..]);
                    place_tree(&children[1], outer.sub(inner), templates, strokes, leaves)?;
                }
            }
        }
    }
    Ok(())
}

/// Places every leaf's template strokes into its layout box, emitting
/// strokes in caption order.
pub fn compose(tree: &CaptionTree, templates: &[RadicalTemplate]) -> Result<Composition> {
    let index: HashMap<&str, &RadicalTemplate> =
        templates.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut strokes = Vec::new();
    let mut leaves = Vec::new();
    place_tree(tree, Rect::UNIT, &index, &mut strokes, &mut leaves)?;
    let trajectory = RawTrajectory::from_strokes(strokes)?;
    Ok(Composition { trajectory, leaves })
}

fn rephase(stroke: &[(f64, f64)], phase: f64) -> Vec<(f64, f64)> {
    let mut cum = vec![0.0];
    for w in stroke.windows(2) {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return stroke.to_vec();
    }
    let mut at = vec![0.0];
    let mut s = phase * REPHASE_STEP;
    while s < total {
        if s > 0.0 {
            at.push(s);
        }
        s += REPHASE_STEP;
    }
    at.push(total);
    let mut seg = 0;
    at.into_iter()
        .map(|s| {
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let u = if len > 0.0 {
                ((s - cum[seg]) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (a, b) = (stroke[seg], stroke[seg + 1]);
            (a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1))
        })
        .collect()
}

/// Seeded writer perturbation: random rotation (up to 10 degrees times
/// `strength`), shear, anisotropic scale (up to 15% times `strength`),
/// arc-length re-phasing and Gaussian point noise (sigma `0.01 * strength`).
pub fn jitter(t: &RawTrajectory, seed: u64, strength: f64) -> Result<RawTrajectory> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!(
            "jitter strength {strength} outside [0, 1]"
        )));
    }
    if strength == 0.0 {
        return Ok(t.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng.random_range(-1.0..=1.0) * 10f64.to_radians() * strength;
    let shear = rng.random_range(-1.0..=1.0) * 0.15 * strength;
    let sx = 1.0 + rng.random_range(-1.0..=1.0) * 0.15 * strength;
    let sy = 1.0 + rng.random_range(-1.0..=1.0) * 0.15 * strength;
    let (min_x, min_y, max_x, max_y) = t.bounds();
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let noise = Normal::new(0.0, 0.01 * strength).expect("finite sigma");
    let mut points = Vec::with_capacity(t.len());
    for (k, stroke) in t.strokes().enumerate() {
        let pts: Vec<(f64, f64)> = stroke.iter().map(|p| (p.x, p.y)).collect();
        let phase = rng.random_range(0.0..1.0);
        for (x, y) in rephase(&pts, phase) {
            let (dx, dy) = (x - cx, y - cy);
            let (dx, dy) = (dx + shear * dy, dy);
            let (dx, dy) = (sx * dx, sy * dy);
            let (rx, ry) = (cos * dx - sin * dy, sin * dx + cos * dy);
            points.push(PenPoint::new(
                cx + rx + noise.sample(&mut rng),
                cy + ry + noise.sample(&mut rng),
                k as u32 + 1,
            ));
        }
    }
    Ok(RawTrajectory::new(points)?)
}

/// One dataset line. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub class: String,
    pub points: Vec<[f64; 3]>,
    pub caption: Vec<String>,
}

impl SampleRecord {
    pub fn trajectory(&self) -> Result<RawTrajectory> {
        Ok(RawTrajectory::from_triples(&self.points)?)
    }
}

/// A generated sample with its layout bookkeeping.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub record: SampleRecord,
    /// Per leaf: radical id and stroke index range.
    pub leaves: Vec<(String, Range<usize>)>,
    pub writer_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_radicals: usize,
    pub structures: Vec<StructureKind>,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    #[serde(default = "default_strength")]
    pub strength: f64,
    /// First writer index; disjoint ranges give unseen writers.
    #[serde(default)]
    pub writer_offset: u64,
}

fn default_strength() -> f64 {
    0.5
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_radicals: 20,
            structures: vec![
                StructureKind::A,
                StructureKind::D,
                StructureKind::Stl,
                StructureKind::S,
            ],
            n_classes: 150,
            samples_per_class: 20,
            seed: 1,
            strength: default_strength(),
            writer_offset: 0,
        }
    }
}

/// Generated corpus in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    /// Class id and caption, in class order.
    pub classes: Vec<(String, Vec<String>)>,
    pub samples: Vec<SynthSample>,
}

/// Stable 64-bit mix of a seed and indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Distinct two-child captions `kind { r1 r2 }`, deterministic in `seed`.
pub fn sample_classes(
    radicals: &[String],
    structures: &[StructureKind],
    n_classes: usize,
    seed: u64,
) -> Result<Vec<CaptionTree>> {
    let feasible = structures.len() * radicals.len() * radicals.len();
    if n_classes > feasible || (n_classes > 0 && (structures.is_empty() || radicals.is_empty())) {
        return Err(Error::InvalidArgument(format!(
            "{n_classes} classes requested, {feasible} constructible"
        )));
    }
    let mut all: Vec<(StructureKind, usize, usize)> = structures
        .iter()
        .flat_map(|&k| {
            (0..radicals.len()).flat_map(move |i| (0..radicals.len()).map(move |j| (k, i, j)))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC1A55]));
    all.shuffle(&mut rng);
    Ok(all
        .into_iter()
        .take(n_classes)
        .map(|(k, i, j)| {
            CaptionTree::node(
                k,
                vec![
                    CaptionTree::leaf(radicals[i].clone()),
                    CaptionTree::leaf(radicals[j].clone()),
                ],
            )
        })
        .collect())
}

/// Composes and jitters `samples_per_class` writers for every class.
pub fn gen_dataset(cfg: &GenConfig) -> Result<Dataset> {
    let templates = builtin_templates();
    if cfg.n_radicals == 0 || cfg.n_radicals > templates.len() {
        return Err(Error::InvalidArgument(format!(
            "n_radicals must be in 1..={}",
            templates.len()
        )));
    }
    let templates = &templates[..cfg.n_radicals];
    let radicals: Vec<String> = templates.iter().map(|t| t.id.clone()).collect();
    let vocab = Vocabulary::with_radicals(&radicals)?;
    let trees = sample_classes(&radicals, &cfg.structures, cfg.n_classes, cfg.seed)?;
    let mut classes = Vec::with_capacity(trees.len());
    let mut samples = Vec::with_capacity(trees.len() * cfg.samples_per_class);
    for (c, tree) in trees.iter().enumerate() {
        let class_id = format!("c{c:04}");
        let caption = tree.serialize();
        let comp = compose(tree, templates)?;
        for s in 0..cfg.samples_per_class {
            let writer = cfg.writer_offset + s as u64;
            let writer_seed = derive_seed(cfg.seed, &[c as u64, writer]);
            let t = jitter(&comp.trajectory, writer_seed, cfg.strength)?;
            samples.push(SynthSample {
                record: SampleRecord {
                    id: format!("{class_id}-w{writer:05}"),
                    class: class_id.clone(),
                    points: t.to_triples(),
                    caption: caption.clone(),
                },
                leaves: comp.leaves.clone(),
                writer_seed,
            });
        }
        classes.push((class_id, caption));
    }
    Ok(Dataset {
        vocab,
        classes,
        samples,
    })
}

impl Dataset {
    pub fn records(&self) -> Vec<SampleRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }

    /// Writes `<stem>.jsonl`, `vocab.txt` and `classes.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.jsonl")))?);
        write_jsonl(&mut out, self.samples.iter().map(|s| &s.record))?;
        out.flush()?;
        std::fs::write(dir.join("vocab.txt"), self.vocab.to_file_text())?;
        let classes: BTreeMap<&str, String> = self
            .classes
            .iter()
            .map(|(id, cap)| (id.as_str(), cap.join(" ")))
            .collect();
        std::fs::write(
            dir.join("classes.json"),
            serde_json::to_string_pretty(&classes)? + "\n",
        )?;
        Ok(())
    }
}

pub fn write_jsonl<'a, W: Write>(
    out: &mut W,
    records: impl IntoIterator<Item = &'a SampleRecord>,
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset file, checking every caption against `vocab`.
pub fn read_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: SampleRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            parse(&rec.caption, vocab)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            Ok(rec)
        })
        .collect()
}

fn leaf_set(caption: &[String]) -> BTreeSet<&str> {
    caption
        .iter()
        .map(String::as_str)
        .filter(|t| {
            StructureKind::from_token(t).is_none()
                && *t != crate::caption::OPEN
                && *t != crate::caption::CLOSE
        })
        .collect()
}

/// Chooses `holdout` classes whose radicals all remain covered by the rest.
/// Returns `(train, test)` class indices, each ascending.
pub fn split_zero_shot(
    captions: &[Vec<String>],
    holdout: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if holdout >= captions.len() {
        return Err(Error::InvalidArgument(format!(
            "holdout {holdout} must be below class count {}",
            captions.len()
        )));
    }
    let leaves: Vec<BTreeSet<&str>> = captions.iter().map(|c| leaf_set(c)).collect();
    let mut count: HashMap<&str, usize> = HashMap::new();
    for set in &leaves {
        for &r in set {
            *count.entry(r).or_default() += 1;
        }
    }
    let mut order: Vec<usize> = (0..captions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5B17])));
    let mut test = Vec::with_capacity(holdout);
    for c in order {
        if test.len() == holdout {
            break;
        }
        if leaves[c].iter().all(|r| count[r] >= 2) {
            for r in &leaves[c] {
                *count.get_mut(r).unwrap() -= 1;
            }
            test.push(c);
        }
    }
    if test.len() < holdout {
        return Err(Error::InvalidArgument(format!(
            "only {} classes can be held out with full radical coverage",
            test.len()
        )));
    }
    test.sort_unstable();
    let train = (0..captions.len())
        .filter(|c| test.binary_search(c).is_err())
        .collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::caption::radical_coverage;

    fn templates() -> Vec<RadicalTemplate> {
        builtin_templates()
    }

    fn leaf(s: &str) -> CaptionTree {
        CaptionTree::leaf(s)
    }

    fn points_of(c: &Composition, leaf_index: usize) -> Vec<(f64, f64)> {
        let strokes: Vec<&[PenPoint]> = c.trajectory.strokes().collect();
        c.leaves[leaf_index]
            .1
            .clone()
            .flat_map(|s| strokes[s].iter().map(|p| (p.x, p.y)))
            .collect()
    }

    #[test]
    fn templates_are_valid() {
        let t = templates();
        assert!(t.len() >= 20);
        let ids: BTreeSet<_> = t.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), t.len());
        for r in &t {
            assert!((3..=6).contains(&r.strokes.len()), "{}", r.id);
            assert!(r
                .strokes
                .iter()
                .flatten()
                .all(|&[x, y]| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
        }
    }

    #[test]
    fn leaf_composes_to_its_template() {
        let t = templates();
        let c = compose(&leaf("r05"), &t).unwrap();
        let expect: Vec<[f64; 3]> = t[4]
            .strokes
            .iter()
            .enumerate()
            .flat_map(|(k, s)| s.iter().map(move |&[x, y]| [x, y, k as f64 + 1.0]))
            .collect();
        assert_eq!(c.trajectory.to_triples(), expect);
        assert_eq!(c.leaves, vec![("r05".to_string(), 0..t[4].strokes.len())]);
    }

    #[test]
    fn side_by_side_and_stacked_are_separated() {
        let t = templates();
        let a = compose(
            &CaptionTree::node(StructureKind::A, vec![leaf("r01"), leaf("r02")]),
            &t,
        )
        .unwrap();
        let max1 = points_of(&a, 0)
            .iter()
            .map(|p| p.0)
            .fold(f64::MIN, f64::max);
        let min2 = points_of(&a, 1)
            .iter()
            .map(|p| p.0)
            .fold(f64::MAX, f64::min);
        assert!(max1 <= 0.48 + 1e-12 && min2 >= 0.52 - 1e-12);

        let d = compose(
            &CaptionTree::node(StructureKind::D, vec![leaf("r01"), leaf("r02")]),
            &t,
        )
        .unwrap();
        let max1 = points_of(&d, 0)
            .iter()
            .map(|p| p.1)
            .fold(f64::MIN, f64::max);
        let min2 = points_of(&d, 1)
            .iter()
            .map(|p| p.1)
            .fold(f64::MAX, f64::min);
        assert!(max1 < min2);
    }

    #[test]
    fn three_way_split_keeps_order() {
        let b = split_boxes(3, true);
        assert_eq!(b.len(), 3);
        assert!(b[0].x1 < b[1].x0 && b[1].x1 < b[2].x0);
        assert_eq!((b[0].x0, b[2].x1), (0.0, 1.0));
        assert_eq!(split_boxes(2, true)[0].x1, 0.48);
    }

    #[test]
    fn surround_child_sits_inside_outer_extent() {
        let t = templates();
        for kind in StructureKind::ALL
            .into_iter()
            .filter(|k| inset(*k).is_some())
        {
            let c = compose(&CaptionTree::node(kind, vec![leaf("r01"), leaf("r03")]), &t).unwrap();
            let outer: Vec<Vec<(f64, f64)>> = vec![points_of(&c, 0)];
            let ob = bounds(&outer);
            let want = ob.sub(inset(kind).unwrap());
            for (x, y) in points_of(&c, 1) {
                assert!(want.contains(x, y) && ob.contains(x, y), "{kind:?}");
            }
        }
    }

    #[test]
    fn compose_errors() {
        let t = templates();
        assert!(compose(&leaf("nope"), &t).is_err());
        let bad = CaptionTree::node(
            StructureKind::S,
            vec![leaf("r01"), leaf("r02"), leaf("r03")],
        );
        assert!(compose(&bad, &t).is_err());
    }

    #[test]
    fn jitter_identity_determinism_and_variation() {
        let t = templates();
        let c = compose(
            &CaptionTree::node(StructureKind::A, vec![leaf("r10"), leaf("r17")]),
            &t,
        )
        .unwrap()
        .trajectory;
        assert_eq!(jitter(&c, 5, 0.0).unwrap(), c);
        assert_eq!(jitter(&c, 5, 0.5).unwrap(), jitter(&c, 5, 0.5).unwrap());
        let a = jitter(&c, 5, 0.5).unwrap();
        let b = jitter(&c, 6, 0.5).unwrap();
        assert_eq!(a.stroke_count(), c.stroke_count());
        let n = a.len().min(b.len());
        let max_d = (0..n)
            .map(|i| {
                let (p, q) = (a.points()[i], b.points()[i]);
                ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        assert!(max_d > 0.0);
        assert!(jitter(&c, 5, 1.5).is_err());
    }

    #[test]
    fn dataset_shape_and_distinct_classes() {
        let cfg = GenConfig {
            structures: vec![StructureKind::A, StructureKind::D],
            samples_per_class: 20,
            ..GenConfig::default()
        };
        let ds = gen_dataset(&cfg).unwrap();
        assert_eq!(ds.samples.len(), 3000);
        let distinct: BTreeSet<_> = ds.classes.iter().map(|(_, c)| c.clone()).collect();
        assert_eq!(distinct.len(), 150);
        for s in ds.samples.iter().step_by(37) {
            assert!(parse(&s.record.caption, &ds.vocab).is_ok());
            assert_eq!(
                s.record.trajectory().unwrap().stroke_count(),
                s.leaves.last().unwrap().1.end
            );
        }
    }

    #[test]
    fn dataset_files_are_reproducible() {
        let cfg = GenConfig {
            n_classes: 12,
            samples_per_class: 3,
            ..GenConfig::default()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_dataset(&cfg)
            .unwrap()
            .write(d1.path(), "train")
            .unwrap();
        gen_dataset(&cfg)
            .unwrap()
            .write(d2.path(), "train")
            .unwrap();
        for f in ["train.jsonl", "vocab.txt", "classes.json"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let line = std::fs::read_to_string(d1.path().join("train.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            ["caption", "class", "id", "points"]
                .map(String::from)
                .into_iter()
                .collect()
        );
        let vocab =
            Vocabulary::parse_file(&std::fs::read_to_string(d1.path().join("vocab.txt")).unwrap())
                .unwrap();
        assert_eq!(
            read_jsonl(&d1.path().join("train.jsonl"), &vocab)
                .unwrap()
                .len(),
            36
        );
    }

    #[test]
    fn infeasible_class_count_rejected() {
        let cfg = GenConfig {
            n_radicals: 2,
            structures: vec![StructureKind::A],
            n_classes: 5,
            ..GenConfig::default()
        };
        assert!(gen_dataset(&cfg).is_err());
    }

    fn cap(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn zero_shot_split_examples() {
        let classes = vec![cap("a { r1 r2 }"), cap("d { r1 r2 }"), cap("a { r2 r1 }")];
        for seed in 0..10 {
            let (train, test) = split_zero_shot(&classes, 1, seed).unwrap();
            assert_eq!((train.len(), test.len()), (2, 1));
        }
        let classes = vec![
            cap("a { r1 r2 }"),
            cap("d { r1 r9 }"),
            cap("a { r2 r1 }"),
            cap("d { r2 r2 }"),
        ];
        for seed in 0..20 {
            let (_, test) = split_zero_shot(&classes, 2, seed).unwrap();
            assert!(!test.contains(&1));
        }
        assert!(split_zero_shot(&classes, 4, 0).is_err());
        assert!(split_zero_shot(&[cap("a { r1 r2 }"), cap("a { r3 r4 }")], 1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn zero_shot_split_preserves_coverage(seed in 0u64..1000, holdout in 1usize..30) {
            let radicals: Vec<String> = (1..=20).map(|i| format!("r{i:02}")).collect();
            let trees = sample_classes(&radicals, &[StructureKind::A, StructureKind::D], 120, seed).unwrap();
            let captions: Vec<Vec<String>> = trees.iter().map(CaptionTree::serialize).collect();
            let (train, test) = split_zero_shot(&captions, holdout, seed).unwrap();
            prop_assert_eq!(test.len(), holdout);
            prop_assert_eq!(train.len() + test.len(), captions.len());
            let tr: Vec<Vec<String>> = train.iter().map(|&i| captions[i].clone()).collect();
            let te: Vec<Vec<String>> = test.iter().map(|&i| captions[i].clone()).collect();
            prop_assert!(radical_coverage(&tr, &te).missing.is_empty());
            prop_assert_eq!(split_zero_shot(&captions, holdout, seed).unwrap(), (train, test));
        }

        #[test]
        fn generated_layouts_respect_structure(seed in 0u64..500) {
            let t = templates();
            let radicals: Vec<String> = t.iter().map(|r| r.id.clone()).collect();
            let tree = &sample_classes(&radicals, &StructureKind::ALL, 1, seed).unwrap()[0];
            let c = compose(tree, &t).unwrap();
            let (p1, p2) = (points_of(&c, 0), points_of(&c, 1));
            let CaptionTree::Node { kind, .. } = tree else { unreachable!() };
            match kind {
                StructureKind::A => prop_assert!(p1.iter().map(|p| p.0).fold(f64::MIN, f64::max) < p2.iter().map(|p| p.0).fold(f64::MAX, f64::min)),
                StructureKind::D => prop_assert!(p1.iter().map(|p| p.1).fold(f64::MIN, f64::max) < p2.iter().map(|p| p.1).fold(f64::MAX, f64::min)),
                k => {
                    let ob = bounds(&[p1]);
                    let inner = ob.sub(inset(*k).unwrap());
                    prop_assert!(p2.iter().all(|&(x, y)| inner.contains(x, y)));
                }
            }
        }
    }
}
