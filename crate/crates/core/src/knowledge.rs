//! Learnable per-class knowledge embeddings and the fusion classifier.
//!
//! For an image representation `y`:
//! similarities `s_g = y · k_g`, response `r = softmax(s)`,
//! knowledge representation `δ = Σ_g r_g k_g`, fused logits
//! `u = FC(LN(y + δ))`. Training minimizes `CE(s, label) + μ·CE(u, label)`.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::normal;
use crate::tensor::Real;
use crate::vit::{LayerNormParams, Linear, INIT_STD};

pub const DEFAULT_MU: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct KnowledgeHead {
    /// `[G, D]`, one row per class.
    pub embeddings: ParamId,
    pub fusion_norm: LayerNormParams,
    pub classifier: Linear,
}

/// Tape handles for one pass through a [`KnowledgeHead`].
#[derive(Clone, Copy, Debug)]
pub struct KnowledgeVars {
    /// `[1, G]` similarity logits.
    pub similarity: Var,
    /// `[1, G]` response coefficients.
    pub response: Var,
    /// `[1, D]` knowledge representation.
    pub delta: Var,
    /// `[1, G]` fused logits.
    pub logits: Var,
}

/// Tape handles of the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct KnowledgeLoss {
    pub knowledge: Var,
    pub representation: Var,
    pub total: Var,
}

impl KnowledgeHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embeddings =
            store.register("knowledge.embeddings", normal(rng, &[classes, dim], INIT_STD));
        Self {
            embeddings,
            fusion_norm: LayerNormParams::new(store, "knowledge.fusion_norm", dim),
            classifier: Linear::new(store, "knowledge.classifier", dim, classes, rng),
        }
    }

    /// `[1, D] → [1, G]` dot products with every class embedding.
    pub fn similarities<T: Real>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<Var> {
        let kt = tape.transpose(self.embeddings.into())?;
        tape.matmul(y, kt)
    }

    pub fn respond<T: Real>(&self, tape: &mut Tape<'_, T>, similarity: Var) -> Result<Var> {
        tape.softmax(similarity, 1)
    }

    /// `r · K`, a convex combination of the class embeddings.
    pub fn knowledge_representation<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        response: Var,
    ) -> Result<Var> {
        tape.matmul(response, self.embeddings.into())
    }

    pub fn fuse<T: Real>(&self, tape: &mut Tape<'_, T>, y: Var, delta: Var) -> Result<Var> {
        let h = tape.add(y, delta)?;
        let h = self.fusion_norm.apply(tape, h)?;
        self.classifier.apply(tape, h)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<KnowledgeVars> {
        let similarity = self.similarities(tape, y)?;
        let response = self.respond(tape, similarity)?;
        let delta = self.knowledge_representation(tape, response)?;
        let logits = self.fuse(tape, y, delta)?;
        Ok(KnowledgeVars {
            similarity,
            response,
            delta,
            logits,
        })
    }

    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &KnowledgeVars,
        label: usize,
        mu: f64,
    ) -> Result<KnowledgeLoss> {
        let knowledge = tape.cross_entropy(vars.similarity, label)?;
        let representation = tape.cross_entropy(vars.logits, label)?;
        let total = total_loss(tape, knowledge, representation, mu)?;
        Ok(KnowledgeLoss {
            knowledge,
            representation,
            total,
        })
    }
}

/// `knowledge + μ · representation`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    knowledge: Var,
    representation: Var,
    mu: f64,
) -> Result<Var> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::config("mu", "must be finite and nonnegative"));
    }
    let weighted = tape.scale(representation, mu);
    tape.add(knowledge, weighted)
}

/// Plain `y · W + b` classifier used when knowledge guidance is off.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub classifier: Linear,
}

impl LinearHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            classifier: Linear::new(store, "linear_head.classifier", dim, classes, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<Var> {
        self.classifier.apply(tape, y)
    }
}

/// Per-image values of one forward, copied off the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardArtifacts {
    pub y: Vec<f64>,
    /// Empty when knowledge guidance is off.
    pub similarity: Vec<f64>,
    pub response: Vec<f64>,
    pub delta: Vec<f64>,
    /// Logits used for prediction.
    pub logits: Vec<f64>,
    pub loss_kl: Option<f64>,
    pub loss_rep: Option<f64>,
    pub loss_total: Option<f64>,
}

impl ForwardArtifacts {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }

    /// Class whose embedding is most similar to `y`.
    pub fn knowledge_prediction(&self) -> Option<usize> {
        (!self.similarity.is_empty()).then(|| argmax(&self.similarity))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
