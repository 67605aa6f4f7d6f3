//! Stacked bidirectional GRU encoder with one drop-even pooling step on the
//! top layer.

use rand::Rng;

use crate::numcore::{Graph, NodeId, ParamId, ParamStore, ShapeError, Tensor};
use crate::scalar::Scalar;
use crate::trajectory::FeatureSequence;

/// Weights of one GRU.
///
/// Input and recurrent projections are stored fused: `w_x` is
/// `[input, 3·hidden]` with column blocks `[update | reset | candidate]`,
/// `u_zr` is `[hidden, 2·hidden]` for the two gates and `u_h` is the
/// candidate's `[hidden, hidden]` projection of `r ⊙ h`.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        GruParams {
            w_x: store.add_uniform(format!("{prefix}.w_x"), &[input, 3 * hidden], scale, rng),
            u_zr: store.add_uniform(format!("{prefix}.u_zr"), &[hidden, 2 * hidden], scale, rng),
            u_h: store.add_uniform(format!("{prefix}.u_h"), &[hidden, hidden], scale, rng),
            bias: store.add_zeros(format!("{prefix}.b"), &[3 * hidden]),
            input,
            hidden,
        }
    }

    /// `x W_x + b` for a `[B, input]` batch; can be computed ahead of the
    /// recurrence.
    pub fn project_input<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
    ) -> Result<NodeId, ShapeError> {
        let (w, b) = (g.param(self.w_x), g.param(self.bias));
        g.affine(x, w, b)
    }

    /// One GRU update from a pre-projected input:
    ///
    /// ```text
    /// z = σ(W_xz x + U_hz h)      r = σ(W_xr x + U_hr h)
    /// h̃ = tanh(W_xh x + U_rh (r ⊙ h))
    /// h' = (1 - z) ⊙ h + z ⊙ h̃
    /// ```
    pub fn step_projected<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x_proj: NodeId,
        h: NodeId,
    ) -> Result<NodeId, ShapeError> {
        let hd = self.hidden;
        let u_zr = g.param(self.u_zr);
        let u_h = g.param(self.u_h);
        let hu = g.matmul(h, u_zr)?;
        let xzr = g.slice_cols(x_proj, 0, 2 * hd)?;
        let pre = g.add(xzr, hu)?;
        let zr = g.sigmoid(pre);
        let z = g.slice_cols(zr, 0, hd)?;
        let r = g.slice_cols(zr, hd, 2 * hd)?;
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, u_h)?;
        let xh = g.slice_cols(x_proj, 2 * hd, 3 * hd)?;
        let cand_pre = g.add(xh, rhu)?;
        let cand = g.tanh(cand_pre);
        let diff = g.sub(cand, h)?;
        let step = g.mul(z, diff)?;
        g.add(h, step)
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId, ShapeError> {
        let xp = self.project_input(g, x)?;
        self.step_projected(g, xp, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BidirParams {
    pub forward: GruParams,
    pub backward: GruParams,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<BidirParams>,
}

impl EncoderParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        layers: usize,
        units: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let input = if l == 0 {
                    FeatureSequence::DIM
                } else {
                    2 * units
                };
                BidirParams {
                    forward: GruParams::register(
                        store,
                        &format!("enc.{l}.fwd"),
                        input,
                        units,
                        scale,
                        rng,
                    ),
                    backward: GruParams::register(
                        store,
                        &format!("enc.{l}.bwd"),
                        input,
                        units,
                        scale,
                        rng,
                    ),
                }
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn annotation_dim(&self) -> usize {
        2 * self.layers.last().map_or(0, |l| l.forward.hidden)
    }
}

/// Padded, time-major view of a batch of feature sequences.
#[derive(Debug, Clone)]
pub struct BatchFeatures<T> {
    /// One `[B, 6]` tensor per time step; rows past a sample's length are zero.
    pub frames: Vec<Tensor<T>>,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> BatchFeatures<T> {
    pub fn new(seqs: &[&FeatureSequence]) -> Result<Self, ShapeError> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(ShapeError::invalid(
                "encode",
                "every sequence needs at least one frame",
            ));
        }
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let b = seqs.len();
        let frames = (0..steps)
            .map(|t| {
                let mut data = vec![T::zero(); b * FeatureSequence::DIM];
                for (s, seq) in seqs.iter().enumerate() {
                    if let Some(row) = seq.rows().get(t) {
                        for (k, &v) in row.iter().enumerate() {
                            data[s * FeatureSequence::DIM + k] = T::of(v);
                        }
                    }
                }
                Tensor::matrix(b, FeatureSequence::DIM, data).expect("consistent")
            })
            .collect();
        Ok(BatchFeatures {
            frames,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }
}

/// Number of frames kept by [`pool_drop_even`] from `n` inputs.
pub fn pooled_len(n: usize) -> usize {
    n.div_ceil(2)
}

/// Keeps the odd 1-based positions (0-based indices 0, 2, 4, ...).
pub fn pool_drop_even<X: Copy>(seq: &[X]) -> Vec<X> {
    seq.iter().step_by(2).copied().collect()
}

/// Encoder output inside a graph.
#[derive(Debug, Clone)]
pub struct Annotations {
    /// `[B * L, D]`, sample-major.
    pub values: NodeId,
    pub batch: usize,
    /// Padded frame count `L`.
    pub frames: usize,
    pub dim: usize,
    /// Valid frames per sample.
    pub lengths: Vec<usize>,
}

impl Annotations {
    /// Row-major `[B, L]` flags, true on valid frames.
    pub fn mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.frames).map(move |i| i < len))
            .collect()
    }
}

fn step_masks<T: Scalar>(lengths: &[usize], t: usize) -> Option<Vec<T>> {
    if lengths.iter().all(|&l| t < l) {
        None
    } else {
        Some(
            lengths
                .iter()
                .map(|&l| if t < l { T::one() } else { T::zero() })
                .collect(),
        )
    }
}

/// Keeps `h` frozen on rows whose sequence has ended.
fn masked_update<T: Scalar>(
    g: &mut Graph<T>,
    h: NodeId,
    h_new: NodeId,
    mask: Option<Vec<T>>,
) -> Result<NodeId, ShapeError> {
    match mask {
        None => Ok(h_new),
        Some(m) => {
            let diff = g.sub(h_new, h)?;
            let kept = g.row_scale(diff, m)?;
            g.add(h, kept)
        }
    }
}

/// Runs one bidirectional layer over `inputs` (one `[B, in]` node per time
/// step). Output step `t` is `[forward_t | backward_t]`.
pub fn bidir_layer<T: Scalar>(
    g: &mut Graph<T>,
    p: &BidirParams,
    inputs: &[NodeId],
    lengths: &[usize],
) -> Result<Vec<NodeId>, ShapeError> {
    let steps = inputs.len();
    let b = lengths.len();
    let hd = p.forward.hidden;
    let mut fwd = Vec::with_capacity(steps);
    let mut h = g.input(Tensor::zeros(&[b, hd]));
    for (t, &x) in inputs.iter().enumerate() {
        let xp = p.forward.project_input(g, x)?;
        let h_new = p.forward.step_projected(g, xp, h)?;
        h = masked_update(g, h, h_new, step_masks(lengths, t))?;
        fwd.push(h);
    }
    let mut bwd = vec![h; steps];
    let mut h = g.input(Tensor::zeros(&[b, hd]));
    for t in (0..steps).rev() {
        let xp = p.backward.project_input(g, inputs[t])?;
        let h_new = p.backward.step_projected(g, xp, h)?;
        h = masked_update(g, h, h_new, step_masks(lengths, t))?;
        bwd[t] = h;
    }
    fwd.iter()
        .zip(&bwd)
        .map(|(&f, &bk)| g.concat(&[f, bk], 1))
        .collect()
}

/// Full encoder: stacked bidirectional layers, then drop-even pooling of the
/// top layer's concatenated outputs.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &EncoderParams,
    input: &BatchFeatures<T>,
) -> Result<Annotations, ShapeError> {
    if input.steps() == 0 {
        return Err(ShapeError::invalid("encode", "empty sequence"));
    }
    let mut seq: Vec<NodeId> = input.frames.iter().map(|f| g.input(f.clone())).collect();
    for layer in &p.layers {
        seq = bidir_layer(g, layer, &seq, &input.lengths)?;
    }
    let pooled = pool_drop_even(&seq);
    let values = g.interleave(&pooled)?;
    Ok(Annotations {
        values,
        batch: input.batch(),
        frames: pooled.len(),
        dim: p.annotation_dim(),
        lengths: input.lengths.iter().map(|&n| pooled_len(n)).collect(),
    })
}
