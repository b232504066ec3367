//! Hook bus: the three intervention families the engine understands, plus
//! the capture filter deciding what a forward pass records.
//!
//! * embedding edits  — replace a token embedding before layer 0
//! * residual edits   — rewrite the residual stream at (layer, position),
//!   either right after the attention block or after the MLP block
//! * attention blocks — force a (target, source) pre-softmax score to -inf
//!   across all heads for a span of layers; surviving weights renormalize

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Where in a layer a residual edit applies. Patching-style experiments all
/// use the post-MLP stream; the post-attention point exists so the hook site
/// itself can be varied as a robustness knob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum HookPoint {
    PostAttention,
    #[default]
    PostMlp,
}

pub type EditFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct ResidualEdit {
    pub layer: usize,
    pub position: usize,
    pub point: HookPoint,
    pub edit: EditFn,
}

impl fmt::Debug for ResidualEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResidualEdit")
            .field("layer", &self.layer)
            .field("position", &self.position)
            .field("point", &self.point)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingEdit {
    pub position: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub layers: Range<usize>,
    /// attending (query) position
    pub target: usize,
    /// attended (key) position
    pub source: usize,
}

/// All hooks for one forward pass. Residual edits at the same site apply in
/// the order they were added.
#[derive(Debug, Clone, Default)]
pub struct HookSet {
    pub embedding_edits: Vec<EmbeddingEdit>,
    pub residual_edits: Vec<ResidualEdit>,
    pub attention_blocks: Vec<AttentionBlock>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.embedding_edits.is_empty()
            && self.residual_edits.is_empty()
            && self.attention_blocks.is_empty()
    }

    pub fn replace_embedding(mut self, position: usize, vector: Vec<f64>) -> Self {
        self.embedding_edits
            .push(EmbeddingEdit { position, vector });
        self
    }

    pub fn edit_residual(
        mut self,
        layer: usize,
        position: usize,
        point: HookPoint,
        edit: EditFn,
    ) -> Self {
        self.residual_edits.push(ResidualEdit {
            layer,
            position,
            point,
            edit,
        });
        self
    }

    /// Overwrite the residual at (layer, position, post-MLP) with a fixed vector.
    pub fn overwrite_residual(self, layer: usize, position: usize, vector: Vec<f64>) -> Self {
        self.edit_residual(
            layer,
            position,
            HookPoint::PostMlp,
            Arc::new(move |_| vector.clone()),
        )
    }

    pub fn block_attention(mut self, layers: Range<usize>, target: usize, source: usize) -> Self {
        self.attention_blocks.push(AttentionBlock {
            layers,
            target,
            source,
        });
        self
    }

    pub fn merge(mut self, other: HookSet) -> Self {
        self.embedding_edits.extend(other.embedding_edits);
        self.residual_edits.extend(other.residual_edits);
        self.attention_blocks.extend(other.attention_blocks);
        self
    }

    /// `max_position` is exclusive: the sequence length for a plain forward,
    /// or the prompt length for decoding (hooks may only touch the prompt).
    pub fn validate(&self, n_layers: usize, d_model: usize, max_position: usize) -> Result<()> {
        for e in &self.embedding_edits {
            if e.position >= max_position {
                return Err(Error::Validation(format!(
                    "embedding edit at position {} outside editable range 0..{max_position}",
                    e.position
                )));
            }
            if e.vector.len() != d_model {
                return Err(Error::Validation(format!(
                    "embedding edit vector has length {}, d_model is {d_model}",
                    e.vector.len()
                )));
            }
        }
        for e in &self.residual_edits {
            if e.layer >= n_layers {
                return Err(Error::Validation(format!(
                    "residual edit at layer {} of a {n_layers}-layer model",
                    e.layer
                )));
            }
            if e.position >= max_position {
                return Err(Error::Validation(format!(
                    "residual edit at position {} outside editable range 0..{max_position}",
                    e.position
                )));
            }
        }
        for b in &self.attention_blocks {
            if b.layers.start > b.layers.end || b.layers.end > n_layers {
                return Err(Error::Validation(format!(
                    "attention block layer range {:?} invalid for {n_layers} layers",
                    b.layers
                )));
            }
            if b.target >= max_position || b.source >= max_position {
                return Err(Error::Validation(format!(
                    "attention block edge ({} -> {}) outside editable range 0..{max_position}",
                    b.target, b.source
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// capture filter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub enum ResidualCapture {
    #[default]
    None,
    /// every (layer, position)
    All,
    Pairs(BTreeSet<(usize, usize)>),
}

impl ResidualCapture {
    pub fn wants(&self, layer: usize, position: usize) -> bool {
        match self {
            ResidualCapture::None => false,
            ResidualCapture::All => true,
            ResidualCapture::Pairs(set) => set.contains(&(layer, position)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum LogitCapture {
    #[default]
    None,
    Last,
    All,
    Positions(BTreeSet<usize>),
}

impl LogitCapture {
    pub fn wants(&self, position: usize, seq_len: usize) -> bool {
        match self {
            LogitCapture::None => false,
            LogitCapture::Last => position + 1 == seq_len,
            LogitCapture::All => true,
            LogitCapture::Positions(set) => set.contains(&position),
        }
    }
}

/// What a forward pass records into its [`crate::engine::ActivationTrace`].
#[derive(Debug, Clone, Default)]
pub struct CaptureSpec {
    pub residual: ResidualCapture,
    /// record row-stochastic weight matrices for every (layer, head)
    pub attention: bool,
    pub logits: LogitCapture,
}

impl CaptureSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn logits_last() -> Self {
        CaptureSpec {
            logits: LogitCapture::Last,
            ..Self::default()
        }
    }

    pub fn everything() -> Self {
        CaptureSpec {
            residual: ResidualCapture::All,
            attention: true,
            logits: LogitCapture::All,
        }
    }

    pub fn residual_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        CaptureSpec {
            residual: ResidualCapture::Pairs(pairs.into_iter().collect()),
            ..Self::default()
        }
    }

    pub fn with_logits(mut self, logits: LogitCapture) -> Self {
        self.logits = logits;
        self
    }

    pub fn with_attention(mut self) -> Self {
        self.attention = true;
        self
    }
}
