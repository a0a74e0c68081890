//! Encoder plus classification head, wired for each ablation mode.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::knowledge::{ForwardArtifacts, KnowledgeHead, KnowledgeVars, LinearHead};
use crate::suppression::{suppressed_step, SuppressionMask};
use crate::tensor::{Real, Tensor};
use crate::vit::{AttentionStack, Encoder, KeyMask, ModelConfig};

/// Which of the two additions to the plain encoder are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Peak suppression and knowledge guidance.
    Full,
    /// Knowledge guidance only.
    NoPs,
    /// Peak suppression only.
    NoKg,
    /// Plain encoder with a linear head.
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::NoPs, Mode::NoKg, Mode::Full];

    pub fn peak_suppression(self) -> bool {
        matches!(self, Mode::Full | Mode::NoKg)
    }

    pub fn knowledge_guidance(self) -> bool {
        matches!(self, Mode::Full | Mode::NoPs)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoPs => "no_ps",
            Mode::NoKg => "no_kg",
            Mode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Knowledge(KnowledgeHead),
    Linear(LinearHead),
}

/// Op counts of one forward, in tape units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardCost {
    /// Gradient-free locating pass; zero without peak suppression.
    pub probe: u64,
    /// Encoder part of the main pass.
    pub encoder: u64,
    /// Head and loss part of the main pass.
    pub head: u64,
    /// Rollout arithmetic, zero without peak suppression.
    pub rollout: u64,
}

impl ForwardCost {
    /// All forward ops excluding rollout.
    pub fn forward_total(&self) -> u64 {
        self.probe + self.encoder + self.head
    }
}

pub struct TrainOutcome<T> {
    pub grads: Gradients<T>,
    pub artifacts: ForwardArtifacts,
    pub mask: Option<SuppressionMask>,
    pub cost: ForwardCost,
}

pub struct InferOutcome {
    pub artifacts: ForwardArtifacts,
    pub attention: AttentionStack,
    pub cost: ForwardCost,
}

enum HeadVars {
    Knowledge(KnowledgeVars),
    Linear(Var),
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub head: Head,
    mode: Mode,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &ModelConfig, mode: Mode) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg, &mut store, &mut rng)?;
        let head = if mode.knowledge_guidance() {
            Head::Knowledge(KnowledgeHead::new(
                &mut store,
                cfg.embed_dim,
                cfg.classes,
                &mut rng,
            ))
        } else {
            Head::Linear(LinearHead::new(
                &mut store,
                cfg.embed_dim,
                cfg.classes,
                &mut rng,
            ))
        };
        Ok(Self {
            store,
            encoder,
            head,
            mode,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &ModelConfig {
        self.encoder.config()
    }

    pub fn knowledge_head(&self) -> Option<&KnowledgeHead> {
        match &self.head {
            Head::Knowledge(k) => Some(k),
            Head::Linear(_) => None,
        }
    }

    fn head_forward(&self, tape: &mut Tape<'_, T>, y: Var) -> Result<HeadVars> {
        Ok(match &self.head {
            Head::Knowledge(k) => HeadVars::Knowledge(k.forward(tape, y)?),
            Head::Linear(h) => HeadVars::Linear(h.forward(tape, y)?),
        })
    }

    fn artifacts(tape: &Tape<'_, T>, y: Var, vars: &HeadVars) -> ForwardArtifacts {
        let read = |v: Var| tape.value(v).iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        match vars {
            HeadVars::Knowledge(k) => ForwardArtifacts {
                y: read(y),
                similarity: read(k.similarity),
                response: read(k.response),
                delta: read(k.delta),
                logits: read(k.logits),
                loss_kl: None,
                loss_rep: None,
                loss_total: None,
            },
            HeadVars::Linear(l) => ForwardArtifacts {
                y: read(y),
                similarity: Vec::new(),
                response: Vec::new(),
                delta: Vec::new(),
                logits: read(*l),
                loss_kl: None,
                loss_rep: None,
                loss_total: None,
            },
        }
    }

    /// One image's training forward and backward. Parameters are not
    /// touched; the caller accumulates the returned gradients.
    pub fn train_step(
        &self,
        image: &Tensor<T>,
        label: usize,
        mu: f64,
        top_k: usize,
    ) -> Result<TrainOutcome<T>> {
        let mut cost = ForwardCost::default();
        let (mut tape, y, mask) = if self.mode.peak_suppression() {
            let pass = suppressed_step(&self.encoder, &self.store, image, top_k)?;
            cost.probe = pass.probe_ops;
            cost.rollout = pass.rollout_ops;
            (pass.tape, pass.output.y, Some(pass.mask))
        } else {
            let mut tape = Tape::new(&self.store);
            let full = KeyMask::all(self.config().tokens());
            let out = self.encoder.encode(&mut tape, image, &full)?;
            (tape, out.y, None)
        };
        cost.encoder = tape.op_count();

        let vars = self.head_forward(&mut tape, y)?;
        let mut artifacts = Self::artifacts(&tape, y, &vars);
        let loss = match (&self.head, &vars) {
            (Head::Knowledge(k), HeadVars::Knowledge(v)) => {
                let l = k.loss(&mut tape, v, label, mu)?;
                artifacts.loss_kl = Some(tape.value(l.knowledge)[0].as_f64());
                artifacts.loss_rep = Some(tape.value(l.representation)[0].as_f64());
                l.total
            }
            (_, HeadVars::Linear(logits)) => tape.cross_entropy(*logits, label)?,
            _ => unreachable!("head and vars built together"),
        };
        cost.head = tape.op_count() - cost.encoder;
        let total = tape.value(loss)[0];
        artifacts.loss_total = Some(total.as_f64());
        if !total.is_finite() {
            let at = tape
                .first_non_finite()
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite(at));
        }
        let grads = tape.backward(loss)?.retain_params();
        Ok(TrainOutcome {
            grads,
            artifacts,
            mask,
            cost,
        })
    }

    /// Unsuppressed, gradient-free forward.
    pub fn infer(&self, image: &Tensor<T>) -> Result<InferOutcome> {
        let mut tape = Tape::inference(&self.store);
        let full = KeyMask::all(self.config().tokens());
        let out = self.encoder.encode(&mut tape, image, &full)?;
        let encoder = tape.op_count();
        let vars = self.head_forward(&mut tape, out.y)?;
        let cost = ForwardCost {
            encoder,
            head: tape.op_count() - encoder,
            ..ForwardCost::default()
        };
        Ok(InferOutcome {
            artifacts: Self::artifacts(&tape, out.y, &vars),
            attention: AttentionStack::from_tape(&tape, &out)?,
            cost,
        })
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        Ok(self.infer(image)?.artifacts.prediction())
    }
}
