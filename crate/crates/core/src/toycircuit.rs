//! A planted cache-and-retrieve circuit for desk-scale validation.
//!
//! The builder hand-writes an 8-layer transformer whose only meaningful
//! computation is a two-hop confidence pathway:
//!
//! * a **cache head** (one attention head at `cache_layer`) fires from the
//!   newline after the answer, reads the answer-level token, and writes a
//!   scaled confidence value plus a "cached" marker into the newline's
//!   residual;
//! * a **retrieve head** (at `retrieve_layer`) fires from the final prompt
//!   colon, keys on the cached marker, and copies the cached value into the
//!   read-out position, where planted unembedding columns turn it into a
//!   digit choice.
//!
//! Construction happens in the coordinates of a random orthonormal frame
//! (column 0 is the confidence axis), so the circuit is invisible to the
//! standard basis; weight matrices that read the residual are conjugated by
//! the frame transpose, writers by the frame. All norm gains are exactly 1,
//! which keeps the closed-form algebra below exact up to the planted noise
//! floor. Every token carries an always-on component that drains
//! non-matching queries to an attention sink (the first prompt token) whose
//! value is zero.
//!
//! Because each stage is explicit, every intervention family has a
//! closed-form expected outcome ([`oracle_expected`]), which the test suites
//! compare against real engine runs.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine;
use crate::error::{Error, Result};
use crate::harness::Trial;
use crate::hooks::{CaptureSpec, HookSet};
use crate::interventions::{EdgeEnd, InterventionSpec, PositionRole, STEERING_BASE_FRACTION};
use crate::kernels::{dot, l2_norm, Matrix};
use crate::model::{LayerWeights, ModelBundle, ModelConfig, Vocab};

// ---------------------------------------------------------------------------
// construction constants
// ---------------------------------------------------------------------------

// frame dimensions reserved for circuit signals
const DIM_CONF: usize = 0; // confidence value
const DIM_ANSWER_MARK: usize = 2; // sits on answer-level tokens
const DIM_NEWLINE: usize = 3; // sits on newline tokens
const DIM_ALWAYS: usize = 4; // sits on every token
const DIM_SINK: usize = 5; // sits on the first prompt token
const DIM_COLON: usize = 6; // sits on colon tokens
const DIM_CACHED: usize = 7; // written by the cache head
const FIRST_NOISE_DIM: usize = 8; // filler content lives above here

// head gains (frame coordinates)
const CACHE_Q_MATCH: f64 = 2.0; // query reads the newline marker
const CACHE_K_MATCH: f64 = 1.0; // key reads the answer marker
const SINK_Q: f64 = 25.0; // query reads the always-on component
const SINK_K: f64 = 15.0; // key reads the sink marker
                          // the sink query also reads the head's own match marker with this (negative)
                          // gain, so the sink never competes at the one target the head serves. The
                          // sink logit is large enough everywhere else that every other attention
                          // weight rounds to zero when accumulated, which keeps off-target positions
                          // bitwise free of circuit signal instead of merely approximately free.
const SINK_SUPPRESS: f64 = -25.0;
const CACHE_V_CONF: f64 = 2.5;
const CACHE_V_MARK: f64 = 1.0;
const CACHE_O_CONF: f64 = 16.0;
const CACHE_O_MARK: f64 = 5.0;
const RETRIEVE_Q_MATCH: f64 = 2.0; // query reads the colon marker
const RETRIEVE_K_MATCH: f64 = 1.5; // key reads the cached marker
const RETRIEVE_V_CONF: f64 = 1.0;
const RETRIEVE_O_CONF: f64 = 7.0;

// read-out geometry: digit k's logit is (slope*k*value + base + offset_k)
const LOGIT_SLOPE: f64 = 3.0;
const LOGIT_BASE: f64 = 40.0;

/// Closed-form level predictions stay this far (in read-out units) from a
/// decode boundary, or the oracle refuses to predict.
pub const ORACLE_GUARD: f64 = 0.25;

const N_QUESTION_WORDS: usize = 24;
const N_ANSWER_WORDS: usize = 16;
pub const N_LEVELS: usize = 10;

// ---------------------------------------------------------------------------
// spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub seed: u64,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub cache_layer: usize,
    pub retrieve_layer: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// scale of every non-circuit weight entry
    pub noise_scale: f64,
    /// magnitude of the four structural markers
    pub marker_gain: f64,
    /// always-on component present on every token
    pub always_on: f64,
    /// confidence encoding of level j is `j * level_step`
    pub level_step: f64,
    /// per-dimension sd of filler-token content
    pub filler_noise: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            seed: 11,
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_mlp: 128,
            cache_layer: 3,
            retrieve_layer: 6,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            noise_scale: 1e-3,
            marker_gain: 40.0,
            always_on: 1.0,
            level_step: 0.5,
            filler_noise: 0.5,
        }
    }
}

impl PlantedSpec {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model <= FIRST_NOISE_DIM {
            return Err(Error::Config(format!(
                "d_model {} leaves no room for the {FIRST_NOISE_DIM} reserved frame dimensions",
                self.d_model
            )));
        }
        let d_head = self.d_head();
        if !d_head.is_multiple_of(2) || d_head < 6 {
            return Err(Error::Config(format!(
                "d_head {d_head} must be even and leave two distinct rotary pairs"
            )));
        }
        if !(self.cache_layer < self.retrieve_layer && self.retrieve_layer < self.n_layers) {
            return Err(Error::Config(format!(
                "need cache < retrieve < n_layers, got {} / {} / {}",
                self.cache_layer, self.retrieve_layer, self.n_layers
            )));
        }
        if self.level_step <= 0.0 || self.marker_gain <= 0.0 || self.always_on <= 0.0 {
            return Err(Error::Config("planted scales must be positive".into()));
        }
        if self.noise_scale < 0.0 || self.filler_noise < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    /// query/key coordinate (within a head) of the content-match rotary pair
    fn match_coord(&self) -> usize {
        self.d_head() - 2
    }

    /// query/key coordinate of the sink rotary pair
    fn sink_coord(&self) -> usize {
        self.d_head() - 4
    }
}

// ---------------------------------------------------------------------------
// closed-form algebra
// ---------------------------------------------------------------------------

/// Exact forward algebra of the planted pathway, used both by the build-time
/// audit and by [`oracle_expected`]. Norm gains are 1, so RMS normalization
/// is just division by `sqrt(|x|^2 / d + eps)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitAlgebra {
    spec: PlantedSpec,
}

impl CircuitAlgebra {
    pub fn new(spec: PlantedSpec) -> Self {
        CircuitAlgebra { spec }
    }

    pub fn spec(&self) -> &PlantedSpec {
        &self.spec
    }

    fn rms_of_norm(&self, norm: f64) -> f64 {
        (norm * norm / self.spec.d_model as f64 + self.spec.norm_eps).sqrt()
    }

    pub fn level_confidence(&self, level: u8) -> f64 {
        level as f64 * self.spec.level_step
    }

    /// Residual norm at the answer-level token (below the cache layer).
    pub fn answer_norm(&self, c: f64) -> f64 {
        let m = self.spec.marker_gain;
        let b = self.spec.always_on;
        (m * m + b * b + c * c).sqrt()
    }

    /// Confidence value the cache head writes into the newline.
    pub fn cached_value(&self, c: f64) -> f64 {
        CACHE_O_CONF * CACHE_V_CONF * c / self.rms_of_norm(self.answer_norm(c))
    }

    /// Cached-marker magnitude the cache head writes alongside the value.
    pub fn cached_marker(&self, c: f64) -> f64 {
        CACHE_O_MARK * CACHE_V_MARK * self.spec.marker_gain / self.rms_of_norm(self.answer_norm(c))
    }

    /// Newline residual norm before the cache head fires.
    pub fn newline_norm_precache(&self) -> f64 {
        let m = self.spec.marker_gain;
        let b = self.spec.always_on;
        (m * m + b * b).sqrt()
    }

    /// Newline residual norm once a value and marker are cached.
    pub fn newline_norm(&self, cached: f64, marker: f64) -> f64 {
        let m = self.spec.marker_gain;
        let b = self.spec.always_on;
        (m * m + b * b + cached * cached + marker * marker).sqrt()
    }

    /// Value the retrieve head deposits at the read-out colon.
    pub fn retrieved_value(&self, cached: f64, marker: f64) -> f64 {
        RETRIEVE_O_CONF * RETRIEVE_V_CONF * cached
            / self.rms_of_norm(self.newline_norm(cached, marker))
    }

    /// Read-out colon residual norm before the retrieve head fires.
    pub fn colon_norm_preretrieve(&self) -> f64 {
        self.newline_norm_precache() // same marker + always-on structure
    }

    /// Read-out colon residual norm after retrieval.
    pub fn colon_norm(&self, readout: f64) -> f64 {
        let m = self.spec.marker_gain;
        let b = self.spec.always_on;
        (m * m + b * b + readout * readout).sqrt()
    }

    /// The full clean chain: level -> cached value -> retrieved read-out.
    pub fn readout(&self, level: u8) -> f64 {
        let c = self.level_confidence(level);
        self.retrieved_value(self.cached_value(c), self.cached_marker(c))
    }

    /// Per-digit logit offsets placing decision boundaries halfway between
    /// consecutive planted read-out values.
    pub fn logit_offsets(&self) -> [f64; N_LEVELS] {
        let mut offsets = [0.0; N_LEVELS];
        for k in 0..N_LEVELS - 1 {
            let mid = 0.5 * (self.readout(k as u8) + self.readout(k as u8 + 1));
            offsets[k + 1] = offsets[k] - LOGIT_SLOPE * mid;
        }
        offsets
    }

    /// Digit the read-out value decodes to (ties resolve to the lower digit,
    /// matching greedy decoding's tie rule).
    pub fn decode(&self, readout: f64) -> u8 {
        let offsets = self.logit_offsets();
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (k, off) in offsets.iter().enumerate() {
            let score = LOGIT_SLOPE * k as f64 * readout + off;
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        best as u8
    }

    /// Distance from the read-out value to the nearest decode boundary.
    pub fn decode_margin(&self, readout: f64) -> f64 {
        (0..N_LEVELS - 1)
            .map(|k| {
                let mid = 0.5 * (self.readout(k as u8) + self.readout(k as u8 + 1));
                (readout - mid).abs()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenKind {
    Sink,         // "Task"
    Colon,        // ":"
    Space,        // " "
    Newline,      // "\n"
    Digit(usize), // "0".."9"
    Level(usize), // "lv0".."lv9"
    Filler,       // everything else
}

fn toy_token_table() -> Vec<(String, TokenKind)> {
    let mut t: Vec<(String, TokenKind)> = vec![
        ("Task".into(), TokenKind::Sink),
        (":".into(), TokenKind::Colon),
        (" ".into(), TokenKind::Space),
        ("\n".into(), TokenKind::Newline),
        ("Q".into(), TokenKind::Filler),
        ("A".into(), TokenKind::Filler),
        ("C".into(), TokenKind::Filler),
        ("?".into(), TokenKind::Filler),
        (".".into(), TokenKind::Filler),
    ];
    for k in 0..N_LEVELS {
        t.push((k.to_string(), TokenKind::Digit(k)));
    }
    for j in 0..N_LEVELS {
        t.push((format!("lv{j}"), TokenKind::Level(j)));
    }
    for w in 0..N_QUESTION_WORDS {
        t.push((format!("w{w}"), TokenKind::Filler));
    }
    for a in 0..N_ANSWER_WORDS {
        t.push((format!("a{a}"), TokenKind::Filler));
    }
    t
}

/// The prompt format the planted circuit was built around.
pub fn toy_prompt(question: &str, answer: &str) -> String {
    format!("Task: Q: {question}\nA: {answer}\nC:")
}

/// Structurally salient positions of a tokenized toy prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyPositions {
    pub answer_span: Range<usize>,
    /// newline right after the answer
    pub newline: usize,
    /// final prompt token (the read-out colon)
    pub readout: usize,
    pub first_answer: usize,
    pub last_answer: usize,
}

/// Locate the toy roles from token structure alone: the answer sits between
/// the second newline's "A: " prefix and that newline.
pub fn toy_positions(tokens: &[u32], vocab: &Vocab) -> Result<ToyPositions> {
    let nl = vocab
        .id("\n")
        .ok_or_else(|| Error::Tokenization("vocabulary has no newline token".into()))?;
    let newlines: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == nl)
        .map(|(i, _)| i)
        .collect();
    if newlines.len() != 2 {
        return Err(Error::Template(format!(
            "toy prompt needs exactly 2 newlines, found {}",
            newlines.len()
        )));
    }
    // after the first newline: "A", ":", " ", then the answer; after the
    // second: the read-out word and colon
    let first_answer = newlines[0] + 4;
    let newline = newlines[1];
    if first_answer >= newline || newline + 3 != tokens.len() {
        return Err(Error::Template("toy prompt structure mismatch".into()));
    }
    Ok(ToyPositions {
        answer_span: first_answer..newline,
        newline,
        readout: tokens.len() - 1,
        first_answer,
        last_answer: newline - 1,
    })
}

impl ToyPositions {
    pub fn resolve(&self, role: PositionRole) -> Option<usize> {
        match role {
            PositionRole::AnswerNewline => Some(self.newline),
            PositionRole::AfterAnswerNewline => Some(self.newline + 1),
            PositionRole::ReadoutColon => Some(self.readout),
            PositionRole::InstructionColon => None,
            PositionRole::LastAnswerToken => Some(self.last_answer),
            PositionRole::FirstAnswerToken => Some(self.first_answer),
        }
    }
}

// ---------------------------------------------------------------------------
// model construction
// ---------------------------------------------------------------------------

/// Handle onto the planted structure: the frame, the algebra, and the token
/// ids the circuit reads and writes.
#[derive(Debug, Clone)]
pub struct PlantedCircuit {
    pub spec: PlantedSpec,
    pub algebra: CircuitAlgebra,
    /// orthonormal frame; column j is frame axis j
    pub frame: Matrix,
    pub digit_tokens: [u32; N_LEVELS],
    pub level_tokens: [u32; N_LEVELS],
}

impl PlantedCircuit {
    /// Physical direction of the planted confidence axis (unit norm).
    pub fn confidence_axis(&self) -> Vec<f64> {
        self.frame_axis(DIM_CONF)
    }

    pub fn frame_axis(&self, dim: usize) -> Vec<f64> {
        (0..self.frame.rows())
            .map(|r| self.frame.get(r, dim))
            .collect()
    }
}

fn orthonormal_frame(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    // Gram-Schmidt over random Gaussian columns
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &cols {
            let p = dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= p * ui;
            }
        }
        let n = l2_norm(&v);
        assert!(n > 1e-8, "random frame column degenerated");
        for vi in &mut v {
            *vi /= n;
        }
        cols.push(v);
    }
    let mut m = Matrix::zeros(d, d);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("gaussian matrix is finite")
}

/// Overwrite one matrix row with `gain` times a frame axis.
fn plant_row(m: &mut Matrix, row: usize, frame: &Matrix, dim: usize, gain: f64) {
    for c in 0..m.cols() {
        m.set(row, c, gain * frame.get(c, dim));
    }
}

/// Overwrite one matrix column with `gain` times a frame axis.
fn plant_col(m: &mut Matrix, col: usize, frame: &Matrix, dim: usize, gain: f64) {
    for r in 0..m.rows() {
        m.set(r, col, gain * frame.get(r, dim));
    }
}

/// Add `gain` times a frame axis onto an existing matrix row.
fn add_row(m: &mut Matrix, row: usize, frame: &Matrix, dim: usize, gain: f64) {
    for c in 0..m.cols() {
        let v = m.get(row, c) + gain * frame.get(c, dim);
        m.set(row, c, v);
    }
}

/// Build the planted model. Fails if the construction audit cannot verify
/// the circuit end to end.
pub fn build_planted_model(spec: &PlantedSpec) -> Result<(ModelBundle, PlantedCircuit)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_model;
    let frame = orthonormal_frame(&mut rng, d);
    let algebra = CircuitAlgebra::new(spec.clone());

    let table = toy_token_table();
    let vocab = Vocab::from_pairs(
        table
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (s.clone(), i as u32)),
    )?;
    let mut digit_tokens = [0u32; N_LEVELS];
    let mut level_tokens = [0u32; N_LEVELS];
    for (i, (_, kind)) in table.iter().enumerate() {
        match kind {
            TokenKind::Digit(k) => digit_tokens[*k] = i as u32,
            TokenKind::Level(j) => level_tokens[*j] = i as u32,
            _ => {}
        }
    }

    // --- embeddings: marker components in frame coordinates ---------------
    let mut embedding = Matrix::zeros(table.len(), d);
    for (i, (_, kind)) in table.iter().enumerate() {
        let mut coords = vec![0.0; d];
        coords[DIM_ALWAYS] = spec.always_on;
        match kind {
            TokenKind::Sink => coords[DIM_SINK] = spec.marker_gain,
            TokenKind::Colon => coords[DIM_COLON] = spec.marker_gain,
            TokenKind::Newline => coords[DIM_NEWLINE] = spec.marker_gain,
            TokenKind::Space => {}
            TokenKind::Level(j) => {
                coords[DIM_CONF] = algebra.level_confidence(*j as u8);
                coords[DIM_ANSWER_MARK] = spec.marker_gain;
            }
            TokenKind::Digit(_) | TokenKind::Filler => {
                for c in coords.iter_mut().skip(FIRST_NOISE_DIM) {
                    *c = spec.filler_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for r in 0..d {
            let mut v = 0.0;
            for (j, &w) in coords.iter().enumerate() {
                if w != 0.0 {
                    v += w * frame.get(r, j);
                }
            }
            embedding.set(i, r, v);
        }
    }

    // --- layers ------------------------------------------------------------
    let d_head = spec.d_head();
    let heads = spec.n_heads * d_head;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        let mut w_q = gaussian_matrix(&mut rng, heads, d, spec.noise_scale);
        let mut w_k = gaussian_matrix(&mut rng, heads, d, spec.noise_scale);
        let mut w_v = gaussian_matrix(&mut rng, heads, d, spec.noise_scale);
        // non-circuit heads read noise but write nothing: any nonzero output
        // column would transport level-scaled content across positions through
        // the softmax tail, and a noiseless linear probe can decode confidence
        // from that leak at layers where the circuit has not written yet
        let mut w_o = Matrix::zeros(d, heads);
        let w_in = gaussian_matrix(&mut rng, spec.d_mlp, d, spec.noise_scale);
        let w_out = gaussian_matrix(&mut rng, d, spec.d_mlp, spec.noise_scale);

        // circuit heads live at head 0 of their layer; rows/columns below
        // index into that head's slice
        if layer == spec.cache_layer {
            plant_row(
                &mut w_q,
                spec.match_coord(),
                &frame,
                DIM_NEWLINE,
                CACHE_Q_MATCH,
            );
            plant_row(
                &mut w_k,
                spec.match_coord(),
                &frame,
                DIM_ANSWER_MARK,
                CACHE_K_MATCH,
            );
            plant_row(&mut w_q, spec.sink_coord(), &frame, DIM_ALWAYS, SINK_Q);
            add_row(
                &mut w_q,
                spec.sink_coord(),
                &frame,
                DIM_NEWLINE,
                SINK_SUPPRESS,
            );
            plant_row(&mut w_k, spec.sink_coord(), &frame, DIM_SINK, SINK_K);
            plant_row(&mut w_v, 0, &frame, DIM_CONF, CACHE_V_CONF);
            plant_row(&mut w_v, 1, &frame, DIM_ANSWER_MARK, CACHE_V_MARK);
            plant_col(&mut w_o, 0, &frame, DIM_CONF, CACHE_O_CONF);
            plant_col(&mut w_o, 1, &frame, DIM_CACHED, CACHE_O_MARK);
        }
        if layer == spec.retrieve_layer {
            plant_row(
                &mut w_q,
                spec.match_coord(),
                &frame,
                DIM_COLON,
                RETRIEVE_Q_MATCH,
            );
            plant_row(
                &mut w_k,
                spec.match_coord(),
                &frame,
                DIM_CACHED,
                RETRIEVE_K_MATCH,
            );
            plant_row(&mut w_q, spec.sink_coord(), &frame, DIM_ALWAYS, SINK_Q);
            add_row(
                &mut w_q,
                spec.sink_coord(),
                &frame,
                DIM_COLON,
                SINK_SUPPRESS,
            );
            plant_row(&mut w_k, spec.sink_coord(), &frame, DIM_SINK, SINK_K);
            plant_row(&mut w_v, 0, &frame, DIM_CONF, RETRIEVE_V_CONF);
            plant_col(&mut w_o, 0, &frame, DIM_CONF, RETRIEVE_O_CONF);
        }

        layers.push(LayerWeights {
            attn_norm_gain: vec![1.0; d],
            w_q,
            w_k,
            w_v,
            w_o,
            mlp_norm_gain: vec![1.0; d],
            w_in,
            w_out,
        });
    }

    // --- unembedding: planted digit columns over a noise floor -------------
    let mut unembedding = gaussian_matrix(&mut rng, d, table.len(), spec.noise_scale);
    let offsets = algebra.logit_offsets();
    for k in 0..N_LEVELS {
        let col = digit_tokens[k] as usize;
        for r in 0..d {
            let v = LOGIT_SLOPE * k as f64 * frame.get(r, DIM_CONF)
                + (LOGIT_BASE + offsets[k]) / spec.marker_gain * frame.get(r, DIM_COLON);
            unembedding.set(r, col, v);
        }
    }

    let model = ModelBundle {
        config: ModelConfig {
            n_layers: spec.n_layers,
            d_model: d,
            n_heads: spec.n_heads,
            d_head,
            d_mlp: spec.d_mlp,
            vocab_size: table.len(),
            norm_eps: spec.norm_eps,
            rope_base: spec.rope_base,
        },
        vocab,
        embedding,
        unembedding,
        final_norm_gain: vec![1.0; d],
        layers,
    };
    model.validate()?;

    let circuit = PlantedCircuit {
        spec: spec.clone(),
        algebra,
        frame,
        digit_tokens,
        level_tokens,
    };
    audit_construction(&model, &circuit)?;
    Ok((model, circuit))
}

/// End-to-end verification that the planted weights implement the algebra:
/// orthonormal frame, concentrated circuit attention, exact level decoding,
/// closed-form read-out agreement, and logit margins clear of the noise
/// floor.
fn audit_construction(model: &ModelBundle, circuit: &PlantedCircuit) -> Result<()> {
    let spec = &circuit.spec;
    let alg = &circuit.algebra;
    let fail = |msg: String| Err(Error::Validation(format!("planted circuit audit: {msg}")));

    // frame orthonormality
    let d = spec.d_model;
    for i in 0..d {
        for j in i..d {
            let mut s = 0.0;
            for r in 0..d {
                s += circuit.frame.get(r, i) * circuit.frame.get(r, j);
            }
            let want = if i == j { 1.0 } else { 0.0 };
            if (s - want).abs() > 1e-10 {
                return fail(format!("frame not orthonormal at ({i}, {j}): {s}"));
            }
        }
    }

    // closed-form identities and margins
    let min_margin = (0..N_LEVELS as u8)
        .map(|j| alg.decode_margin(alg.readout(j)))
        .fold(f64::INFINITY, f64::min);
    for j in 0..N_LEVELS as u8 {
        if alg.decode(alg.readout(j)) != j {
            return fail(format!("closed form decodes level {j} incorrectly"));
        }
    }
    if min_margin < 2.0 * ORACLE_GUARD {
        return fail(format!(
            "closed-form decode margin {min_margin:.3} too close to a boundary"
        ));
    }

    // live forwards at every level
    let noise_floor = spec.noise_scale * (d as f64).sqrt();
    for j in 0..N_LEVELS {
        let prompt = toy_prompt("w0 w1", &format!("a0 lv{j}"));
        let tokens = model.vocab.encode(&prompt)?;
        let pos = toy_positions(&tokens, &model.vocab)?;
        let capture = CaptureSpec::residual_pairs([(spec.retrieve_layer, pos.readout)])
            .with_logits(crate::hooks::LogitCapture::Last)
            .with_attention();
        let trace = engine::forward(model, &tokens, &HookSet::new(), &capture)?;

        let cache_w = trace
            .attention_at(spec.cache_layer, 0)?
            .get(pos.newline, pos.last_answer);
        if cache_w < 0.9 {
            return fail(format!(
                "cache attention weight {cache_w:.3} < 0.9 at level {j}"
            ));
        }
        let retrieve_w = trace
            .attention_at(spec.retrieve_layer, 0)?
            .get(pos.readout, pos.newline);
        if retrieve_w < 0.9 {
            return fail(format!(
                "retrieve attention weight {retrieve_w:.3} < 0.9 at level {j}"
            ));
        }

        let resid = trace.residual_at(spec.retrieve_layer, pos.readout)?;
        let axis = circuit.confidence_axis();
        let emp = dot(resid, &axis);
        let want = alg.readout(j as u8);
        if (emp - want).abs() > 0.1 {
            return fail(format!(
                "read-out value {emp:.4} disagrees with closed form {want:.4} at level {j}"
            ));
        }

        let logits = trace.logits_at(pos.readout)?;
        let decoded = engine::argmax_token(logits);
        if decoded != circuit.digit_tokens[j] {
            return fail(format!("level {j} decodes to token {decoded}"));
        }
        let digit_set: BTreeSet<u32> = circuit.digit_tokens.iter().copied().collect();
        let mut digit_sorted: Vec<f64> = digit_set.iter().map(|&t| logits[t as usize]).collect();
        digit_sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let margin = digit_sorted[0] - digit_sorted[1];
        if margin < 10.0 * noise_floor {
            return fail(format!(
                "digit logit margin {margin:.4} below 10x noise floor {noise_floor:.4} at level {j}"
            ));
        }
        let best_other = logits
            .iter()
            .enumerate()
            .filter(|(t, _)| !digit_set.contains(&(*t as u32)))
            .map(|(_, &l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        if digit_sorted[0] - best_other < 10.0 * noise_floor {
            return fail(format!(
                "digit read-out barely beats a non-digit token at level {j}"
            ));
        }
    }

    // temporal precedence: before its write layer, a carrier position must be
    // bitwise identical across levels — any surviving difference, however
    // small, is a deterministic leak a linear probe could decode
    let mut sites = vec![("read-out", spec.retrieve_layer - 1, Site::Readout)];
    if let Some(pre_cache) = spec.cache_layer.checked_sub(1) {
        sites.push(("newline", pre_cache, Site::Newline));
    }
    let mut reference: Option<Vec<Vec<u64>>> = None;
    for j in 0..N_LEVELS {
        let prompt = toy_prompt("w0 w1", &format!("a0 lv{j}"));
        let tokens = model.vocab.encode(&prompt)?;
        let pos = toy_positions(&tokens, &model.vocab)?;
        let site_pos = |s: Site| match s {
            Site::Readout => pos.readout,
            Site::Newline => pos.newline,
        };
        let capture = CaptureSpec::residual_pairs(sites.iter().map(|&(_, l, s)| (l, site_pos(s))));
        let trace = engine::forward(model, &tokens, &HookSet::new(), &capture)?;
        let snapshot: Vec<Vec<u64>> = sites
            .iter()
            .map(|&(_, l, s)| {
                Ok(trace
                    .residual_at(l, site_pos(s))?
                    .iter()
                    .map(|v| v.to_bits())
                    .collect())
            })
            .collect::<Result<_>>()?;
        match &reference {
            None => reference = Some(snapshot),
            Some(want) => {
                for (k, (name, layer, _)) in sites.iter().enumerate() {
                    if snapshot[k] != want[k] {
                        return fail(format!(
                            "{name} residual at layer {layer} depends on the level \
                             before the circuit writes it (level {j})"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Carrier positions whose pre-write residuals the audit pins bitwise.
#[derive(Clone, Copy)]
enum Site {
    Readout,
    Newline,
}

// ---------------------------------------------------------------------------
// trial generation
// ---------------------------------------------------------------------------

/// Per-level probability that a generated trial's answer is graded correct.
/// Levels are informative but deliberately miscalibrated by a seeded jitter.
pub fn correctness_table(seed: u64) -> [f64; N_LEVELS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = [0.0; N_LEVELS];
    for (j, pj) in p.iter_mut().enumerate() {
        let jitter: f64 = rng.gen_range(-0.08..0.08);
        *pj = (j as f64 / 9.0 + jitter).clamp(0.0, 1.0);
    }
    p
}

/// Generate toy trials: a question of 2-6 content words, an answer of 0-2
/// filler words plus one level token, and a correctness flag drawn from the
/// level's entry in `table`. Questions are unique so downstream
/// deduplication keeps every trial.
pub fn gen_planted_trials(n: usize, seed: u64, table: &[f64; N_LEVELS]) -> Result<Vec<Trial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut trials = Vec::with_capacity(n);
    for id in 0..n {
        let level = rng.gen_range(0..N_LEVELS) as u8;
        let mut attempts = 0;
        let question = loop {
            let n_words = rng.gen_range(2..=6);
            let words: Vec<String> = (0..n_words)
                .map(|_| format!("w{}", rng.gen_range(0..N_QUESTION_WORDS)))
                .collect();
            let candidate = words.join(" ");
            if seen.insert(candidate.clone()) {
                break candidate;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Data(format!(
                    "could not find a unique question after {attempts} attempts (n = {n})"
                )));
            }
        };
        let n_fillers = rng.gen_range(0..=2);
        let mut parts: Vec<String> = (0..n_fillers)
            .map(|_| format!("a{}", rng.gen_range(0..N_ANSWER_WORDS)))
            .collect();
        parts.push(format!("lv{level}"));
        let answer = parts.join(" ");
        let correct = rng.gen::<f64>() < table[level as usize];
        trials.push(Trial {
            id: id as u64,
            question,
            answer,
            correct,
            level: Some(level),
        });
    }
    Ok(trials)
}

/// Everything a downstream consumer needs to reproduce a planted dataset:
/// the model spec, the grading table, and the clean read-out values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedSidecar {
    pub spec: PlantedSpec,
    pub correctness: [f64; N_LEVELS],
    pub readout_values: [f64; N_LEVELS],
    pub trial_seed: u64,
}

impl PlantedSidecar {
    pub fn new(spec: &PlantedSpec, trial_seed: u64) -> Self {
        let alg = CircuitAlgebra::new(spec.clone());
        let mut readout_values = [0.0; N_LEVELS];
        for (j, v) in readout_values.iter_mut().enumerate() {
            *v = alg.readout(j as u8);
        }
        PlantedSidecar {
            spec: spec.clone(),
            correctness: correctness_table(spec.seed),
            readout_values,
            trial_seed,
        }
    }
}

// ---------------------------------------------------------------------------
// intervention oracle
// ---------------------------------------------------------------------------

/// What an intervention should do to the decoded confidence digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOutcome {
    Level(u8),
    /// decodes exactly what the clean run decodes
    Unchanged,
    /// decodes exactly what the corrupted run decodes (patching families)
    SameAsCorrupt,
}

/// Where a steering direction came from. Group-difference directions are
/// only meaningful at sites whose residual actually varies with the level;
/// elsewhere they degenerate into noise and the oracle refuses to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionSource {
    /// the planted confidence axis itself
    PlantedAxis,
    /// difference of high-group and low-group mean residuals at the site
    GroupDifference,
}

fn guarded_level(alg: &CircuitAlgebra, readout: f64) -> Result<OracleOutcome> {
    let margin = alg.decode_margin(readout);
    if margin < ORACLE_GUARD {
        return Err(Error::OracleGap(format!(
            "read-out {readout:.4} sits {margin:.4} from a decode boundary (guard {ORACLE_GUARD})"
        )));
    }
    Ok(OracleOutcome::Level(alg.decode(readout)))
}

fn covers_newline(end: &EdgeEnd) -> bool {
    matches!(end, EdgeEnd::All)
        || matches!(
            end,
            EdgeEnd::Role {
                role: PositionRole::AnswerNewline
            }
        )
}

fn covers_readout(end: &EdgeEnd) -> bool {
    matches!(end, EdgeEnd::All)
        || matches!(
            end,
            EdgeEnd::Role {
                role: PositionRole::ReadoutColon
            }
        )
}

fn covers_last_answer(end: &EdgeEnd, answer_tokens: usize) -> bool {
    match end {
        EdgeEnd::All | EdgeEnd::AnswerSpan => true,
        EdgeEnd::Role {
            role: PositionRole::LastAnswerToken,
        } => true,
        EdgeEnd::Role {
            role: PositionRole::FirstAnswerToken,
        } => answer_tokens == 1,
        _ => false,
    }
}

/// Closed-form expected outcome of one intervention on one trial.
///
/// `answer_tokens` is the trial's answer length in tokens (spaces included),
/// used to detect when the first and last answer tokens coincide. Swap
/// predictions assume the donor was length-matched, patch predictions assume
/// the clean vector came from the same trial, and steering predictions
/// assume the direction is confidence-axis aligned (always true for
/// [`DirectionSource::PlantedAxis`]; true for group differences only at
/// sites the level actually reaches).
pub fn oracle_expected(
    alg: &CircuitAlgebra,
    intervention: &InterventionSpec,
    direction: DirectionSource,
    level: u8,
    answer_tokens: usize,
) -> Result<OracleOutcome> {
    if level as usize >= N_LEVELS {
        return Err(Error::Validation(format!("level {level} out of range")));
    }
    let spec = alg.spec();
    let cache = spec.cache_layer;
    let retrieve = spec.retrieve_layer;
    let causal_cached = |layer: usize| (cache..retrieve).contains(&layer);
    let c = alg.level_confidence(level);

    match intervention {
        InterventionSpec::Steer { role, layer, alpha } => {
            let role = match role {
                PositionRole::FirstAnswerToken if answer_tokens == 1 => {
                    PositionRole::LastAnswerToken
                }
                r => *r,
            };
            match role {
                PositionRole::AnswerNewline => {
                    if *layer >= retrieve {
                        return Ok(OracleOutcome::Unchanged);
                    }
                    let cached = alg.cached_value(c);
                    let marker = alg.cached_marker(c);
                    let norm = if *layer < cache {
                        if direction == DirectionSource::GroupDifference {
                            return Err(Error::OracleGap(
                                "group-difference direction is degenerate below the cache layer"
                                    .into(),
                            ));
                        }
                        alg.newline_norm_precache()
                    } else {
                        alg.newline_norm(cached, marker)
                    };
                    let shifted = cached + alpha * STEERING_BASE_FRACTION * norm;
                    guarded_level(alg, alg.retrieved_value(shifted, marker))
                }
                PositionRole::ReadoutColon => {
                    let readout = alg.readout(level);
                    let norm = if *layer < retrieve {
                        if direction == DirectionSource::GroupDifference {
                            return Err(Error::OracleGap(
                                "group-difference direction is degenerate below the retrieve layer"
                                    .into(),
                            ));
                        }
                        alg.colon_norm_preretrieve()
                    } else {
                        alg.colon_norm(readout)
                    };
                    guarded_level(alg, readout + alpha * STEERING_BASE_FRACTION * norm)
                }
                PositionRole::LastAnswerToken => {
                    if *layer >= cache {
                        return Ok(OracleOutcome::Unchanged);
                    }
                    let shifted = c + alpha * STEERING_BASE_FRACTION * alg.answer_norm(c);
                    guarded_level(
                        alg,
                        alg.retrieved_value(alg.cached_value(shifted), alg.cached_marker(shifted)),
                    )
                }
                _ => Ok(OracleOutcome::Unchanged),
            }
        }
        InterventionSpec::Patch { role, layer } => {
            let restores = match role {
                PositionRole::AnswerNewline => causal_cached(*layer),
                PositionRole::ReadoutColon => *layer >= retrieve,
                PositionRole::LastAnswerToken => *layer < cache,
                PositionRole::FirstAnswerToken => answer_tokens == 1 && *layer < cache,
                _ => false,
            };
            Ok(if restores {
                OracleOutcome::Level(level)
            } else {
                OracleOutcome::SameAsCorrupt
            })
        }
        InterventionSpec::Noise {
            role,
            layer,
            calibration_levels,
        } => {
            if calibration_levels.is_empty() {
                return Err(Error::Validation(
                    "noise oracle needs calibration levels".into(),
                ));
            }
            let mean = |f: &dyn Fn(f64) -> f64| {
                calibration_levels
                    .iter()
                    .map(|&j| f(alg.level_confidence(j)))
                    .sum::<f64>()
                    / calibration_levels.len() as f64
            };
            match role {
                PositionRole::AnswerNewline if causal_cached(*layer) => {
                    let mean_cached = mean(&|cj| alg.cached_value(cj));
                    let mean_marker = mean(&|cj| alg.cached_marker(cj));
                    guarded_level(alg, alg.retrieved_value(mean_cached, mean_marker))
                }
                PositionRole::ReadoutColon if *layer >= retrieve => {
                    let mean_readout = calibration_levels
                        .iter()
                        .map(|&j| alg.readout(j))
                        .sum::<f64>()
                        / calibration_levels.len() as f64;
                    guarded_level(alg, mean_readout)
                }
                PositionRole::LastAnswerToken if *layer < cache => {
                    let mean_c = mean(&|cj| cj);
                    guarded_level(
                        alg,
                        alg.retrieved_value(alg.cached_value(mean_c), alg.cached_marker(mean_c)),
                    )
                }
                _ => Ok(OracleOutcome::Unchanged),
            }
        }
        InterventionSpec::Swap {
            role,
            layer,
            donor_level,
        } => {
            if *donor_level as usize >= N_LEVELS {
                return Err(Error::Validation(format!(
                    "donor level {donor_level} out of range"
                )));
            }
            let transplants = match role {
                PositionRole::AnswerNewline => causal_cached(*layer),
                PositionRole::ReadoutColon => *layer >= retrieve,
                PositionRole::LastAnswerToken => *layer < cache,
                PositionRole::FirstAnswerToken => answer_tokens == 1 && *layer < cache,
                _ => false,
            };
            Ok(if transplants {
                OracleOutcome::Level(*donor_level)
            } else {
                OracleOutcome::Unchanged
            })
        }
        InterventionSpec::Block {
            target,
            source,
            preserve,
            layers,
        } => {
            let window = layers.0..layers.1;
            let kept = |t: &dyn Fn(&EdgeEnd) -> bool, s: &dyn Fn(&EdgeEnd) -> bool| {
                preserve.iter().any(|(pt, ps)| t(pt) && s(ps))
            };
            let retrieve_cut = window.contains(&retrieve)
                && covers_readout(target)
                && covers_newline(source)
                && !kept(&covers_readout, &covers_newline);
            let cache_cut = window.contains(&cache)
                && covers_newline(target)
                && covers_last_answer(source, answer_tokens)
                && !kept(&covers_newline, &|e| covers_last_answer(e, answer_tokens));
            if retrieve_cut || cache_cut {
                guarded_level(alg, 0.0)
            } else {
                Ok(OracleOutcome::Unchanged)
            }
        }
    }
}

// ---------------------------------------------------------------------------
