//! Task routing: which functional heads run for which task, the heads'
//! parameters, set matching, losses and inference.

pub mod dump;
mod hungarian;
mod infer;
pub mod losses;

use std::fmt;
use std::str::FromStr;

pub use hungarian::{assignment_cost, hungarian, MatchResult};
pub use infer::{best_foreground_class, infer_instances, infer_semantic, InstancePrediction};

use rand::Rng;

use crate::error::Error;
use crate::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    SemanticSeg,
    InstanceSeg,
    GroundedSeg,
    Captioning,
    Retrieval,
    ShapeClassification,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::SemanticSeg,
        Task::InstanceSeg,
        Task::GroundedSeg,
        Task::Captioning,
        Task::Retrieval,
        Task::ShapeClassification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::SemanticSeg => "semantic_seg",
            Task::InstanceSeg => "instance_seg",
            Task::GroundedSeg => "grounded_seg",
            Task::Captioning => "captioning",
            Task::Retrieval => "retrieval",
            Task::ShapeClassification => "shape_classification",
        }
    }

    /// Head composition per task.
    pub fn heads(self) -> HeadComposition {
        let none = HeadComposition::default();
        match self {
            Task::SemanticSeg | Task::InstanceSeg => HeadComposition {
                obj_cls: true,
                mask: true,
                ..none
            },
            Task::GroundedSeg => HeadComposition {
                mask: true,
                grounding: true,
                ..none
            },
            Task::Captioning => HeadComposition {
                text_gen: true,
                ..none
            },
            Task::Retrieval | Task::ShapeClassification => HeadComposition {
                matching: true,
                ..none
            },
        }
    }

    /// Scene tasks consume point clouds of whole rooms; the rest consume
    /// single shapes.
    pub fn is_scene_task(self) -> bool {
        matches!(self, Task::SemanticSeg | Task::InstanceSeg | Task::GroundedSeg)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeadComposition {
    pub obj_cls: bool,
    pub mask: bool,
    pub grounding: bool,
    pub text_gen: bool,
    pub matching: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    ObjCls,
    Mask,
    Grounding,
    TextGen,
    Matching,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::ObjCls, Head::Mask, Head::Grounding, Head::TextGen, Head::Matching];

    /// Name prefix of every parameter the head owns.
    pub fn prefix(self) -> &'static str {
        match self {
            Head::ObjCls => "heads.cls",
            Head::Mask => "heads.mask",
            Head::Grounding => "heads.ground",
            Head::TextGen => "heads.caption",
            Head::Matching => "heads.match",
        }
    }
}

impl HeadComposition {
    pub fn uses(&self, head: Head) -> bool {
        match head {
            Head::ObjCls => self.obj_cls,
            Head::Mask => self.mask,
            Head::Grounding => self.grounding,
            Head::TextGen => self.text_gen,
            Head::Matching => self.matching,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub gc: f64,
    pub cap: f64,
    pub ret: f64,
    /// Cross-entropy weight of unmatched (background) queries.
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            bce: 5.0,
            dice: 5.0,
            gc: 0.4,
            cap: 2.0,
            ret: 2.0,
            background: 0.1,
        }
    }
}

/// Parameters owned by the classification, grounding, text-generation and
/// matching heads. The mask head's projection lives in the decoder.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls: Linear,
    pub ground_eta: ParamId,
    pub ground_category: Linear,
    pub caption: Linear,
    pub match_shape: Linear,
    pub match_text: Linear,
    pub match_scale: ParamId,
}

impl Heads {
    pub fn new(store: &mut ParamStore, dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Heads {
            cls: Linear::new(store, "heads.cls.proj", dim, dim, true, rng),
            ground_eta: store.register("heads.ground.eta", Tensor::scalar(0.0)),
            ground_category: Linear::new(store, "heads.ground.category", dim, classes, true, rng),
            caption: Linear::new(store, "heads.caption.proj", dim, dim, true, rng),
            match_shape: Linear::new(store, "heads.match.shape", dim, dim, true, rng),
            match_text: Linear::new(store, "heads.match.text", dim, dim, true, rng),
            match_scale: store.register("heads.match.logit_scale", Tensor::scalar((1.0f64 / 0.07).ln())),
        }
    }
}
