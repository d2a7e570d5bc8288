//! Query transformer: latent object queries, one scene query and optional
//! text queries refined by masked cross-attention to sampled voxel features,
//! self-attention and a feed-forward block per layer.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Attention, FeedForward, LayerNorm, Linear};
use crate::sparse::{EncoderOutputs, StageMap};
use crate::tensor::{sigmoid, ParamId, ParamStore, Tape, Tensor, Var};

/// Attention-mask threshold on sigmoid mask probabilities.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Object queries; one scene query is added on top.
    pub queries: usize,
    /// Voxels sampled per level per forward pass.
    pub samples_per_level: usize,
    pub fourier_bands: usize,
    /// Coordinate period (in input voxels) of the lowest Fourier band.
    pub fourier_period: f64,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_cross: LayerNorm,
    cross: Attention,
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Predictions read off the query features after one layer.
#[derive(Clone, Debug)]
pub struct LayerPrediction<'t> {
    /// `O^m`, `(Q+1) × C`.
    pub mask_embed: Var<'t>,
    /// `O^s`, `(Q+1+L_T) × C`.
    pub semantic: Var<'t>,
    /// Object-query mask logits over full-resolution voxels, `Q × N`.
    pub mask_logits: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutputs<'t> {
    pub queries: usize,
    pub text_len: usize,
    /// One prediction per layer, the last being the final output.
    pub layers: Vec<LayerPrediction<'t>>,
    /// Sampled row indices per decoder level.
    pub samples: Vec<Vec<usize>>,
}

impl<'t> DecoderOutputs<'t> {
    pub fn last(&self) -> &LayerPrediction<'t> {
        self.layers.last().expect("decoder has layers")
    }
}

impl<'t> LayerPrediction<'t> {
    pub fn object_semantic(&self, queries: usize) -> Result<Var<'t>> {
        self.semantic.slice_rows(0, queries)
    }

    pub fn scene_semantic(&self, queries: usize) -> Result<Var<'t>> {
        self.semantic.slice_rows(queries, queries + 1)
    }

    pub fn text_semantic(&self, queries: usize) -> Result<Var<'t>> {
        self.semantic.slice_rows(queries + 1, self.semantic.rows())
    }
}

/// `k` row indices out of `n`: all of them in order when `n == k`, a sorted
/// uniform subset when `n > k`, and every index followed by uniform
/// repeats when `n < k`.
pub fn sample_voxels(n: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Input("cannot sample from an empty voxel set".into()));
    }
    if k == 0 {
        return Err(Error::Input("voxel sample count must be positive".into()));
    }
    Ok(if n == k {
        (0..n).collect()
    } else if n > k {
        let mut idx = sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.extend((n..k).map(|_| rng.gen_range(0..n)));
        idx
    })
}

/// Fixed sin/cos features of voxel centres, `N × 6·bands`.
pub fn fourier_features(stage: &StageMap<'_>, bands: usize, period: f64) -> Tensor {
    let coords = stage.coords.coords();
    let width = 6 * bands;
    let mut data = Vec::with_capacity(coords.len() * width);
    for c in coords {
        for axis in 0..3 {
            let p = (f64::from(c[axis + 1]) + 0.5) * f64::from(stage.stride);
            for b in 0..bands {
                let w = std::f64::consts::TAU * (1u64 << b) as f64 / period;
                data.push((w * p).sin());
                data.push((w * p).cos());
            }
        }
    }
    Tensor::new(vec![coords.len(), width], data).expect("sized above")
}

/// Admission mask `rows × samples` for cross-attention. The first
/// `queries` rows admit sampled voxels whose pooled mask probability
/// exceeds the threshold (or everything, if none does); other rows admit all.
pub fn cross_attention_mask(
    level_probs: &Tensor,
    samples: &[usize],
    queries: usize,
    rows: usize,
) -> Vec<bool> {
    let k = samples.len();
    let mut admit = vec![true; rows * k];
    for q in 0..queries {
        let row = &mut admit[q * k..(q + 1) * k];
        for (slot, &v) in row.iter_mut().zip(samples) {
            *slot = level_probs.at(q, v) > MASK_THRESHOLD;
        }
        if !row.iter().any(|&a| a) {
            row.fill(true);
        }
    }
    admit
}

/// Self-attention mask over `[latents | text]`. In causal mode latents see
/// only latents and text position `i` sees every latent plus text `≤ i`.
pub fn self_attention_mask(latents: usize, text_len: usize, causal: bool) -> Option<Vec<bool>> {
    if !causal || text_len == 0 {
        return None;
    }
    let n = latents + text_len;
    let mut admit = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            admit[i * n + j] = if i < latents { j < latents } else { j <= i };
        }
    }
    Some(admit)
}

/// Mean of full-resolution probabilities over each coarse voxel's
/// descendants, `Q × N_level`.
fn pool_probs(probs: &Tensor, ancestors: &[usize], level_len: usize) -> Tensor {
    let q = probs.rows();
    let mut sums = Tensor::zeros(&[q, level_len]);
    let mut counts = vec![0usize; level_len];
    for &a in ancestors {
        counts[a] += 1;
    }
    for r in 0..q {
        let src = probs.row(r);
        let dst = sums.row_mut(r);
        for (v, &a) in ancestors.iter().enumerate() {
            dst[a] += src[v];
        }
        for (s, &c) in dst.iter_mut().zip(&counts) {
            *s /= c.max(1) as f64;
        }
    }
    sums
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub config: DecoderConfig,
    pub query_feat: ParamId,
    level_pos: Vec<Linear>,
    layers: Vec<DecoderLayer>,
    out_norm: LayerNorm,
    sem_proj: Linear,
    /// Mask-head projection producing `O^m`.
    pub mask_proj: Linear,
}

impl QueryDecoder {
    /// `levels` is the number of encoder stages the decoder attends to.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mask_name: &str,
        config: DecoderConfig,
        levels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.layers == 0 || config.queries == 0 || levels == 0 {
            return Err(Error::Input("decoder needs layers, queries and at least one level".into()));
        }
        let c = config.dim;
        let query_feat = store.register(format!("{name}.queries"), normal_tensor(&[config.queries + 1, c], 1.0, rng));
        let level_pos = (0..levels)
            .map(|s| Linear::new(store, &format!("{name}.pos{s}"), 6 * config.fourier_bands, c, false, rng))
            .collect();
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                DecoderLayer {
                    norm_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), c),
                    cross: Attention::new(store, &format!("{p}.cross"), c, config.heads, rng),
                    norm_self: LayerNorm::new(store, &format!("{p}.ln_self"), c),
                    self_attn: Attention::new(store, &format!("{p}.self"), c, config.heads, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), c),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), c, config.ffn_dim, rng),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(store, &format!("{name}.ln_out"), c);
        let sem_proj = Linear::new(store, &format!("{name}.sem_proj"), c, c, true, rng);
        let mask_proj = Linear::new(store, &format!("{mask_name}.embed"), c, c, true, rng);
        Ok(QueryDecoder {
            config,
            query_feat,
            level_pos,
            layers,
            out_norm,
            sem_proj,
            mask_proj,
        })
    }

    /// Which encoder level layer `l` attends to.
    pub fn level_of_layer(&self, layer: usize) -> usize {
        layer % self.level_pos.len()
    }

    fn predict<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        points: Var<'t>,
    ) -> Result<LayerPrediction<'t>> {
        let q = self.config.queries;
        let y = self.out_norm.forward(tape, store, x)?;
        let semantic = self.sem_proj.forward(tape, store, y)?;
        let mask_embed = self.mask_proj.forward(tape, store, y.slice_rows(0, q + 1)?)?;
        let mask_logits = mask_embed.slice_rows(0, q)?.matmul_t(points)?;
        Ok(LayerPrediction {
            mask_embed,
            semantic,
            mask_logits,
        })
    }

    /// Runs all layers. `text` holds `L_T × C` text queries, if any.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        enc: &EncoderOutputs<'t>,
        text: Option<Var<'t>>,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Result<DecoderOutputs<'t>> {
        let cfg = &self.config;
        let q = cfg.queries;
        let levels = enc.decoder_levels();
        if levels.len() != self.level_pos.len() {
            return Err(Error::shape(
                "decoder",
                format!("{} encoder levels for {} projections", levels.len(), self.level_pos.len()),
            ));
        }
        let points = enc.point_embeddings().features;
        let latents = tape.param(store, self.query_feat);
        let (mut x, text_len) = match text {
            Some(t) if t.rows() > 0 => {
                if t.cols() != cfg.dim {
                    return Err(Error::shape("decoder", format!("text width {} vs {}", t.cols(), cfg.dim)));
                }
                (tape.concat_rows(&[latents, t])?, t.rows())
            }
            _ => (latents, 0),
        };
        let rows = q + 1 + text_len;

        let mut samples = Vec::with_capacity(levels.len());
        let mut keys = Vec::with_capacity(levels.len());
        let mut values = Vec::with_capacity(levels.len());
        let mut ancestors = Vec::with_capacity(levels.len());
        for (s, level) in levels.iter().enumerate() {
            let idx = sample_voxels(level.coords.len(), cfg.samples_per_level, rng)?;
            let pe = fourier_features(level, cfg.fourier_bands, cfg.fourier_period);
            let pos = self.level_pos[s].forward(tape, store, tape.constant(pe))?;
            let feats = level.features.gather_rows(&idx)?;
            keys.push(feats.add(pos.gather_rows(&idx)?)?);
            values.push(feats);
            ancestors.push(enc.ancestor_rows(s));
            samples.push(idx);
        }
        let self_admit = self_attention_mask(q + 1, text_len, causal);

        let mut current = self.predict(tape, store, x, points)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let s = self.level_of_layer(l);
            let probs = current.mask_logits.value().map(sigmoid);
            let pooled = pool_probs(&probs, &ancestors[s], levels[s].coords.len());
            let admit = cross_attention_mask(&pooled, &samples[s], q, rows);

            let h = layer.norm_cross.forward(tape, store, x)?;
            x = x.add(layer.cross.forward(tape, store, h, keys[s], values[s], Some(&admit))?)?;
            let h = layer.norm_self.forward(tape, store, x)?;
            x = x.add(layer.self_attn.forward(tape, store, h, h, h, self_admit.as_deref())?)?;
            let h = layer.norm_ffn.forward(tape, store, x)?;
            x = x.add(layer.ffn.forward(tape, store, h)?)?;

            current = self.predict(tape, store, x, points)?;
            layers.push(current.clone());
        }
        Ok(DecoderOutputs {
            queries: q,
            text_len,
            layers,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_voxels(4, 4, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        let padded = sample_voxels(2, 5, &mut rng).unwrap();
        assert_eq!(padded.len(), 5);
        assert!(padded.contains(&0) && padded.contains(&1));
        assert!(padded.iter().all(|&i| i < 2));
        let sub = sample_voxels(100, 10, &mut rng).unwrap();
        assert!(sub.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_voxels(0, 3, &mut rng).is_err());
        let a = sample_voxels(50, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_voxels(50, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_mask_row_falls_back_to_full() {
        let probs = Tensor::from_rows(&[vec![0.9, 0.1, 0.7], vec![0.2, 0.1, 0.0]]).unwrap();
        let admit = cross_attention_mask(&probs, &[0, 1, 2], 2, 3);
        assert_eq!(&admit[0..3], &[true, false, true]);
        assert_eq!(&admit[3..6], &[true, true, true]);
        assert_eq!(&admit[6..9], &[true, true, true]);
    }

    #[test]
    fn causal_mask_layout() {
        let m = self_attention_mask(2, 2, true).unwrap();
        #[rustfmt::skip]
        let expect = [
            true, true, false, false,
            true, true, false, false,
            true, true, true, false,
            true, true, true, true,
        ];
        assert_eq!(m, expect);
        assert!(self_attention_mask(2, 2, false).is_none());
    }

    #[test]
    fn pooled_probabilities_average_descendants() {
        let probs = Tensor::from_rows(&[vec![1.0, 0.0, 0.5]]).unwrap();
        let pooled = pool_probs(&probs, &[0, 0, 1], 2);
        assert_eq!(pooled.data(), &[0.5, 0.5]);
    }
}
