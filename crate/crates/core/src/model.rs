//! The full network: voxel encoder, text encoder, query decoder and heads,
//! with per-task losses and inference entry points.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{DecoderConfig, DecoderOutputs, LayerPrediction, QueryDecoder};
use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::router::losses::{self, GroundingLoss};
use crate::router::{infer_instances, Heads, InstancePrediction, LossWeights, Task};
use crate::sparse::{CoordSet, EncoderConfig, EncoderOutputs, SparseUNet};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::text::{TextEncoder, TextEncoderConfig, TokenSequence, Vocabulary, BOS, EOS};

pub const BACKGROUND: &str = "background";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text: TextEncoderConfig,
    pub decoder: DecoderConfig,
    pub weights: LossWeights,
    /// Apply losses to every decoder layer rather than only the last.
    pub deep_supervision: bool,
    pub top_k: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.decoder.dim;
        if self.encoder.hidden_dim != c || self.text.dim != c {
            return Err(Error::Input(format!(
                "encoder ({}), text ({}) and decoder ({c}) widths must agree",
                self.encoder.hidden_dim, self.text.dim
            )));
        }
        if !c.is_multiple_of(self.decoder.heads) || !c.is_multiple_of(self.text.heads) {
            return Err(Error::Input("model width must be divisible by the head count".into()));
        }
        if self.encoder.stages() < 2 {
            return Err(Error::Input("encoder needs at least two stages".into()));
        }
        Ok(())
    }
}

/// Referring sentence over a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Referral {
    pub sentence: String,
    /// Index into the scene's instances.
    pub target: usize,
    /// Classes named in the sentence.
    pub categories: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SceneSample {
    pub name: String,
    pub grid: VoxelGrid,
    /// Class of every instance.
    pub classes: Vec<usize>,
    /// `G × N` binary instance masks over voxels.
    pub masks: Tensor,
    /// Per-voxel class.
    pub semantic: Vec<usize>,
    pub referrals: Vec<Referral>,
}

impl SceneSample {
    /// Builds targets from a voxel grid carrying semantic and instance labels.
    pub fn from_grid(name: &str, grid: VoxelGrid, classes: usize, referrals: Vec<Referral>) -> Result<Self> {
        let (Some(sem), Some(inst)) = (&grid.semantic, &grid.instance) else {
            return Err(Error::Input(format!("scene {name} has no labels")));
        };
        let mut ids: Vec<u32> = inst.clone();
        ids.sort_unstable();
        ids.dedup();
        let n = grid.coords.len();
        let mut masks = Tensor::zeros(&[ids.len(), n]);
        let mut inst_class = vec![0usize; ids.len()];
        for (v, (&i, &s)) in inst.iter().zip(sem).enumerate() {
            let g = ids.binary_search(&i).expect("collected above");
            masks.row_mut(g)[v] = 1.0;
            inst_class[g] = s as usize;
        }
        let semantic: Vec<usize> = sem.iter().map(|&s| s as usize).collect();
        if let Some(&bad) = semantic.iter().find(|&&s| s >= classes) {
            return Err(Error::Input(format!("scene {name}: class {bad} outside {classes} classes")));
        }
        for r in &referrals {
            if r.target >= ids.len() {
                return Err(Error::Input(format!("scene {name}: referral target {} missing", r.target)));
            }
        }
        Ok(SceneSample {
            name: name.to_string(),
            grid,
            classes: inst_class,
            masks,
            semantic,
            referrals,
        })
    }

    /// One mask per class present, for semantic segmentation.
    pub fn class_masks(&self) -> (Vec<usize>, Tensor) {
        let mut present: Vec<usize> = self.semantic.clone();
        present.sort_unstable();
        present.dedup();
        let n = self.semantic.len();
        let mut masks = Tensor::zeros(&[present.len(), n]);
        for (v, s) in self.semantic.iter().enumerate() {
            let k = present.binary_search(s).expect("collected above");
            masks.row_mut(k)[v] = 1.0;
        }
        (present, masks)
    }
}

#[derive(Clone, Debug)]
pub struct ShapeSample {
    pub name: String,
    pub grid: VoxelGrid,
    pub class: usize,
    pub caption: String,
}

/// Loss terms of one step; absent terms contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms<'t> {
    pub cls: Option<Var<'t>>,
    pub mask: Option<Var<'t>>,
    pub grd: Option<Var<'t>>,
    pub cap: Option<Var<'t>>,
    pub ret: Option<Var<'t>>,
}

pub const LOSS_NAMES: [&str; 5] = ["cls", "mask", "grd", "cap", "ret"];

impl<'t> LossTerms<'t> {
    pub fn terms(&self) -> [Option<Var<'t>>; 5] {
        [self.cls, self.mask, self.grd, self.cap, self.ret]
    }

    /// Plain values of every term, zero when absent.
    pub fn values(&self) -> [f64; 5] {
        self.terms().map(|t| t.map_or(0.0, |v| v.value().item()))
    }

    pub fn total(&self, tape: &'t Tape) -> Result<Var<'t>> {
        let mut total: Option<Var<'t>> = None;
        for t in self.terms().into_iter().flatten() {
            total = Some(match total {
                None => t,
                Some(acc) => acc.add(t)?,
            });
        }
        Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
    }

    fn add_to(slot: &mut Option<Var<'t>>, v: Var<'t>) -> Result<()> {
        *slot = Some(match *slot {
            None => v,
            Some(acc) => acc.add(v)?,
        });
        Ok(())
    }

    fn scaled(self, factor: f64) -> Result<Self> {
        let s = |t: Option<Var<'t>>| t.map(|v| v.scale(factor)).transpose();
        Ok(LossTerms {
            cls: s(self.cls)?,
            mask: s(self.mask)?,
            grd: s(self.grd)?,
            cap: s(self.cap)?,
            ret: s(self.ret)?,
        })
    }
}

/// A batch for one task.
#[derive(Clone, Copy, Debug)]
pub enum Batch<'a> {
    Scenes(&'a [&'a SceneSample]),
    Shapes(&'a [&'a ShapeSample]),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// Class names, background excluded.
    pub classes: Vec<String>,
    pub encoder: SparseUNet,
    pub text: TextEncoder,
    pub decoder: QueryDecoder,
    pub heads: Heads,
}

impl Model {
    /// Registers every parameter in a fresh store. The text config's
    /// vocabulary size is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, classes: Vec<String>, seed: u64) -> Result<(Self, ParamStore)> {
        config.text.vocab_size = vocab.len();
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::Input("at least one class is required".into()));
        }
        for name in classes.iter().map(String::as_str).chain([BACKGROUND]) {
            TokenSequence::sentence(&vocab, name, config.text.max_len)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = SparseUNet::new(&mut store, "encoder", config.encoder.clone(), &mut rng)?;
        let text = TextEncoder::new(&mut store, "text", config.text.clone(), &mut rng);
        let levels = config.encoder.stages() - 1;
        let decoder = QueryDecoder::new(&mut store, "decoder", "heads.mask", config.decoder.clone(), levels, &mut rng)?;
        let heads = Heads::new(&mut store, config.decoder.dim, classes.len(), &mut rng);
        Ok((
            Model {
                config,
                vocab,
                classes,
                encoder,
                text,
                decoder,
                heads,
            },
            store,
        ))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn queries(&self) -> usize {
        self.config.decoder.queries
    }

    pub fn encode_grid<'t>(&self, tape: &'t Tape, store: &ParamStore, grid: &VoxelGrid) -> Result<EncoderOutputs<'t>> {
        let coords = Rc::new(CoordSet::from_grids(&[grid]));
        let feats = tape.constant(grid.features.clone());
        self.encoder.forward(tape, store, coords, feats)
    }

    /// `C_emb`: class names followed by the background entry.
    pub fn class_embeddings<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        let names: Vec<&str> = self.classes.iter().map(String::as_str).chain([BACKGROUND]).collect();
        self.text.embed_class_names(tape, store, &self.vocab, &names)
    }

    fn supervised<'a, 't>(&self, out: &'a DecoderOutputs<'t>) -> &'a [LayerPrediction<'t>] {
        if self.config.deep_supervision {
            &out.layers
        } else {
            std::slice::from_ref(out.last())
        }
    }

    pub fn class_logits<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        pred: &LayerPrediction<'t>,
        class_emb: Var<'t>,
    ) -> Result<Var<'t>> {
        let sem = self.heads.cls.forward(tape, store, pred.object_semantic(self.queries())?)?;
        losses::classify(sem, class_emb)
    }

    /// Instance or semantic segmentation loss of one scene.
    pub fn segmentation_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        task: Task,
        scene: &SceneSample,
        rng: &mut impl Rng,
    ) -> Result<LossTerms<'t>> {
        let w = &self.config.weights;
        let (classes, masks) = match task {
            Task::InstanceSeg => (scene.classes.clone(), scene.masks.clone()),
            Task::SemanticSeg => scene.class_masks(),
            _ => return Err(Error::Contract(format!("{task} is not a segmentation task"))),
        };
        let enc = self.encode_grid(tape, store, &scene.grid)?;
        let out = self.decoder.forward(tape, store, &enc, None, false, rng)?;
        let class_emb = self.class_embeddings(tape, store)?;
        let mut terms = LossTerms::default();
        for pred in self.supervised(&out) {
            let logits = self.class_logits(tape, store, pred, class_emb)?;
            let m = losses::match_instances(&logits.value(), &pred.mask_logits.value(), &classes, &masks, w)?;
            let targets: Vec<Option<usize>> = m.target_of(self.queries()).iter().map(|t| t.map(|g| classes[g])).collect();
            LossTerms::add_to(&mut terms.cls, losses::loss_cls(logits, &targets, w)?)?;
            LossTerms::add_to(&mut terms.mask, losses::loss_mask(pred.mask_logits, &m.pairs, &masks, w)?)?;
        }
        Ok(terms)
    }

    /// `T_emb` of a scene's referring sentences.
    pub fn sentence_embeddings<'t, S: AsRef<str>>(&self, tape: &'t Tape, store: &ParamStore, sentences: &[S]) -> Result<Var<'t>> {
        self.text.embed_sentences(tape, store, &self.vocab, sentences)
    }

    pub fn grounding_logits<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        pred: &LayerPrediction<'t>,
        sentences: Var<'t>,
    ) -> Result<Var<'t>> {
        let eta = tape.param(store, self.heads.ground_eta);
        losses::grounding_logits(sentences, pred.object_semantic(self.queries())?, eta)
    }

    /// Grounding terms summed over supervised layers.
    pub fn grounding_terms<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        scene: &SceneSample,
        rng: &mut impl Rng,
    ) -> Result<Vec<GroundingLoss<'t>>> {
        if scene.referrals.is_empty() {
            return Err(Error::Input(format!("scene {} has no referrals", scene.name)));
        }
        let w = &self.config.weights;
        let enc = self.encode_grid(tape, store, &scene.grid)?;
        let out = self.decoder.forward(tape, store, &enc, None, false, rng)?;
        let sentences: Vec<&str> = scene.referrals.iter().map(|r| r.sentence.as_str()).collect();
        let t_emb = self.sentence_embeddings(tape, store, &sentences)?;
        let targets: Vec<usize> = scene.referrals.iter().map(|r| r.target).collect();
        let mut cat_gt = Tensor::zeros(&[sentences.len(), self.num_classes()]);
        for (r, referral) in scene.referrals.iter().enumerate() {
            for &c in &referral.categories {
                cat_gt.row_mut(r)[c] = 1.0;
            }
        }
        let cat_logits = self.heads.ground_category.forward(tape, store, t_emb)?;
        let mut out_terms = Vec::new();
        for pred in self.supervised(&out) {
            let logits = self.grounding_logits(tape, store, pred, t_emb)?;
            let sim = softmax_rows_plain(&logits.value());
            let (m, per_sentence) = losses::match_referrals(&sim, &pred.mask_logits.value(), &targets, &scene.masks, w)?;
            out_terms.push(losses::loss_grounding(
                logits,
                &per_sentence,
                cat_logits,
                &cat_gt,
                pred.mask_logits,
                &m.pairs,
                &scene.masks,
                w,
            )?);
        }
        Ok(out_terms)
    }

    pub fn grounding_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        scene: &SceneSample,
        rng: &mut impl Rng,
    ) -> Result<LossTerms<'t>> {
        let mut terms = LossTerms::default();
        for g in self.grounding_terms(tape, store, scene, rng)? {
            LossTerms::add_to(&mut terms.grd, g.total()?)?;
        }
        Ok(terms)
    }

    /// Caption input `[BOS] words` and targets `words [EOS]`.
    pub fn caption_io(&self, caption: &str) -> Result<(TokenSequence, Vec<usize>)> {
        let full = TokenSequence::sentence(&self.vocab, caption, self.config.text.max_len + 1)?;
        let ids = full.real();
        let input = TokenSequence::exact(ids[..ids.len() - 1].to_vec());
        let targets = ids[1..].to_vec();
        Ok((input, targets))
    }

    /// Next-token logits for every position of `prefix`, per supervised layer.
    pub fn caption_logits<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        enc: &EncoderOutputs<'t>,
        prefix: &TokenSequence,
        all_layers: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var<'t>>> {
        let text = self.text.encode(tape, store, prefix, true)?;
        let out = self.decoder.forward(tape, store, enc, Some(text), true, rng)?;
        let table = tape.param(store, self.text.token_table);
        let layers = if all_layers { self.supervised(&out) } else { std::slice::from_ref(out.last()) };
        layers
            .iter()
            .map(|pred| {
                let t = self.heads.caption.forward(tape, store, pred.text_semantic(self.queries())?)?;
                losses::caption_logits(t, table)
            })
            .collect()
    }

    pub fn caption_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        shape: &ShapeSample,
        rng: &mut impl Rng,
    ) -> Result<LossTerms<'t>> {
        let (input, targets) = self.caption_io(&shape.caption)?;
        let enc = self.encode_grid(tape, store, &shape.grid)?;
        let mut terms = LossTerms::default();
        for logits in self.caption_logits(tape, store, &enc, &input, true, rng)? {
            LossTerms::add_to(&mut terms.cap, losses::loss_caption(logits, &targets, &self.config.weights)?)?;
        }
        Ok(terms)
    }

    /// Matching-head shape embeddings, one row per supervised layer.
    fn shape_embeddings<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        grid: &VoxelGrid,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var<'t>>> {
        let enc = self.encode_grid(tape, store, grid)?;
        let out = self.decoder.forward(tape, store, &enc, None, false, rng)?;
        self.supervised(&out)
            .iter()
            .map(|pred| self.heads.match_shape.forward(tape, store, pred.scene_semantic(self.queries())?))
            .collect()
    }

    fn text_embeddings<'t, S: AsRef<str>>(&self, tape: &'t Tape, store: &ParamStore, texts: &[S]) -> Result<Var<'t>> {
        let pooled = self.text.embed_texts(tape, store, &self.vocab, texts)?;
        self.heads.match_text.forward(tape, store, pooled)
    }

    /// Per supervised layer, the `B × C` shape embeddings of a batch.
    fn batch_shape_embeddings<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        shapes: &[&ShapeSample],
        rng: &mut impl Rng,
    ) -> Result<Vec<Var<'t>>> {
        let per_shape = shapes
            .iter()
            .map(|s| self.shape_embeddings(tape, store, &s.grid, rng))
            .collect::<Result<Vec<_>>>()?;
        let layers = per_shape[0].len();
        (0..layers)
            .map(|l| tape.concat_rows(&per_shape.iter().map(|p| p[l]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn retrieval_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        shapes: &[&ShapeSample],
        rng: &mut impl Rng,
    ) -> Result<LossTerms<'t>> {
        if shapes.is_empty() {
            return Err(Error::Input("empty retrieval batch".into()));
        }
        let captions: Vec<&str> = shapes.iter().map(|s| s.caption.as_str()).collect();
        let texts = self.text_embeddings(tape, store, &captions)?;
        let scale = tape.param(store, self.heads.match_scale);
        let mut terms = LossTerms::default();
        for emb in self.batch_shape_embeddings(tape, store, shapes, rng)? {
            let logits = losses::matching_logits(emb, texts, scale)?;
            LossTerms::add_to(&mut terms.ret, losses::loss_contrastive(logits, &self.config.weights)?)?;
        }
        Ok(terms)
    }

    pub fn shape_class_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        shapes: &[&ShapeSample],
        rng: &mut impl Rng,
    ) -> Result<LossTerms<'t>> {
        if shapes.is_empty() {
            return Err(Error::Input("empty classification batch".into()));
        }
        let texts = self.text_embeddings(tape, store, &self.classes)?;
        let scale = tape.param(store, self.heads.match_scale);
        let labels: Vec<usize> = shapes.iter().map(|s| s.class).collect();
        let mut terms = LossTerms::default();
        for emb in self.batch_shape_embeddings(tape, store, shapes, rng)? {
            let logits = losses::matching_logits(emb, texts, scale)?;
            LossTerms::add_to(&mut terms.ret, losses::loss_shape_class(logits, &labels, &self.config.weights)?)?;
        }
        Ok(terms)
    }

    /// Loss of one single-task batch, averaged over samples where the loss
    /// is per sample.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        task: Task,
        batch: Batch<'_>,
        rng: &mut impl Rng,
    ) -> Result<LossTerms<'t>> {
        match (task, batch) {
            (Task::SemanticSeg | Task::InstanceSeg | Task::GroundedSeg, Batch::Scenes(scenes)) => {
                if scenes.is_empty() {
                    return Err(Error::Input("empty scene batch".into()));
                }
                let mut total = LossTerms::default();
                for scene in scenes {
                    let t = if task == Task::GroundedSeg {
                        self.grounding_loss(tape, store, scene, rng)?
                    } else {
                        self.segmentation_loss(tape, store, task, scene, rng)?
                    };
                    for (slot, v) in [
                        (&mut total.cls, t.cls),
                        (&mut total.mask, t.mask),
                        (&mut total.grd, t.grd),
                    ] {
                        if let Some(v) = v {
                            LossTerms::add_to(slot, v)?;
                        }
                    }
                }
                total.scaled(1.0 / scenes.len() as f64)
            }
            (Task::Captioning, Batch::Shapes(shapes)) => {
                if shapes.is_empty() {
                    return Err(Error::Input("empty caption batch".into()));
                }
                let mut total = LossTerms::default();
                for s in shapes {
                    if let Some(v) = self.caption_loss(tape, store, s, rng)?.cap {
                        LossTerms::add_to(&mut total.cap, v)?;
                    }
                }
                total.scaled(1.0 / shapes.len() as f64)
            }
            (Task::Retrieval, Batch::Shapes(shapes)) => self.retrieval_loss(tape, store, shapes, rng),
            (Task::ShapeClassification, Batch::Shapes(shapes)) => self.shape_class_loss(tape, store, shapes, rng),
            (task, _) => Err(Error::Input(format!("{task} received the wrong kind of batch"))),
        }
    }

    /// Final-layer class logits and mask logits of a scene.
    pub fn predict_scene(&self, store: &ParamStore, grid: &VoxelGrid, seed: u64) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = self.encode_grid(&tape, store, grid)?;
        let out = self.decoder.forward(&tape, store, &enc, None, false, &mut rng)?;
        let class_emb = self.class_embeddings(&tape, store)?;
        let logits = self.class_logits(&tape, store, out.last(), class_emb)?;
        let masks = out.last().mask_logits.value();
        Ok(((*logits.value()).clone(), (*masks).clone()))
    }

    pub fn infer_instances(&self, store: &ParamStore, grid: &VoxelGrid, seed: u64) -> Result<Vec<InstancePrediction>> {
        let (logits, masks) = self.predict_scene(store, grid, seed)?;
        Ok(infer_instances(&logits, &masks, self.config.top_k))
    }

    pub fn infer_semantic(&self, store: &ParamStore, grid: &VoxelGrid, seed: u64) -> Result<Vec<usize>> {
        let (logits, masks) = self.predict_scene(store, grid, seed)?;
        let inst = infer_instances(&logits, &masks, self.config.top_k);
        let fallback = crate::router::best_foreground_class(&logits);
        Ok(crate::router::infer_semantic(&inst, grid.coords.len(), fallback))
    }

    /// Mask of the best-matching query for each sentence.
    pub fn ground<S: AsRef<str>>(&self, store: &ParamStore, grid: &VoxelGrid, sentences: &[S], seed: u64) -> Result<Vec<Vec<bool>>> {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = self.encode_grid(&tape, store, grid)?;
        let out = self.decoder.forward(&tape, store, &enc, None, false, &mut rng)?;
        let t_emb = self.sentence_embeddings(&tape, store, sentences)?;
        let logits = self.grounding_logits(&tape, store, out.last(), t_emb)?.value();
        let masks = out.last().mask_logits.value();
        Ok((0..logits.rows())
            .map(|r| {
                let q = argmax(logits.row(r));
                masks.row(q).iter().map(|&x| x > 0.0).collect()
            })
            .collect())
    }

    /// Greedy decoding from BOS until EOS or `max_len` tokens.
    pub fn generate_caption(&self, store: &ParamStore, grid: &VoxelGrid, max_len: usize, seed: u64) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let enc = self.encode_grid(&tape, store, grid)?;
        let mut ids = vec![BOS];
        let mut out = Vec::new();
        let limit = max_len.min(self.config.text.max_len);
        while out.len() < limit {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prefix = TokenSequence::exact(ids.clone());
            let logits = self.caption_logits(&tape, store, &enc, &prefix, false, &mut rng)?;
            let last = logits[0].value();
            let next = argmax(last.row(last.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }

    pub fn caption(&self, store: &ParamStore, grid: &VoxelGrid, max_len: usize, seed: u64) -> Result<String> {
        Ok(self.vocab.decode(&self.generate_caption(store, grid, max_len, seed)?))
    }

    fn final_shape_embedding(&self, store: &ParamStore, grid: &VoxelGrid, seed: u64) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = self.encode_grid(&tape, store, grid)?;
        let out = self.decoder.forward(&tape, store, &enc, None, false, &mut rng)?;
        let e = self
            .heads
            .match_shape
            .forward(&tape, store, out.last().scene_semantic(self.queries())?)?;
        Ok(e.value().data().to_vec())
    }

    /// Cosine similarity matrix `shapes × texts` from the matching head.
    pub fn similarity<S: AsRef<str>>(&self, store: &ParamStore, grids: &[&VoxelGrid], texts: &[S], seed: u64) -> Result<Tensor> {
        if grids.is_empty() {
            return Err(Error::Input("no shapes to compare".into()));
        }
        let rows = grids
            .iter()
            .map(|g| self.final_shape_embedding(store, g, seed))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let shapes = tape.constant(Tensor::from_rows(&rows)?);
        let t = self.text_embeddings(&tape, store, texts)?;
        let one = tape.constant(Tensor::scalar(0.0));
        Ok((*losses::matching_logits(shapes, t, one)?.value()).clone())
    }

    pub fn classify_shape(&self, store: &ParamStore, grid: &VoxelGrid, seed: u64) -> Result<usize> {
        let sim = self.similarity(store, &[grid], &self.classes, seed)?;
        Ok(argmax(sim.row(0)))
    }
}

/// Index of the largest value; lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows_plain(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.shape());
    for r in 0..t.rows() {
        crate::tensor::softmax_into(t.row(r), out.row_mut(r));
    }
    out
}
