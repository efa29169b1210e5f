//! Duration-statistics planner, merging blocks, word-token initialization,
//! and assembly of the full four-stage hierarchical model plus the standard
//! Transformer baseline.
//!
//! The stage plan converts duration statistics of speech units (phones,
//! words) and the frame hop into window sizes, merge scales and the word
//! token count. Stages run windowed blocks over progressively coarser
//! token sequences: frame -> phone -> word -> utterance.

use crate::attention::{
    fullattn_block_step, speechblock_step, transformer_encoder_step, word_token_validity,
    AttentionRecord, EncoderLayerParams, MsaParams,
};
use crate::error::{HierformError, Result};
use crate::numerics::{Matrix, Tape, ValueId, LAYER_NORM_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── Duration statistics and the stage plan ──────────────────────────

/// Statistical durations of speech units, in milliseconds. The defaults are
/// the shortest/longest phone (50/200) and word (250/1000) durations.
/// `mismatch` scales all four values to probe sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationStats {
    pub phone_short_ms: f64,
    pub phone_long_ms: f64,
    pub word_short_ms: f64,
    pub word_long_ms: f64,
    pub mismatch: f64,
}

impl Default for DurationStats {
    fn default() -> Self {
        DurationStats {
            phone_short_ms: 50.0,
            phone_long_ms: 200.0,
            word_short_ms: 250.0,
            word_long_ms: 1000.0,
            mismatch: 1.0,
        }
    }
}

impl DurationStats {
    pub fn validate(&self) -> Result<()> {
        let ok = self.phone_short_ms > 0.0
            && self.phone_short_ms < self.phone_long_ms
            && self.word_short_ms > 0.0
            && self.word_short_ms < self.word_long_ms
            && self.mismatch > 0.0;
        if !ok {
            return Err(HierformError::InvalidParam {
                name: "duration_stats",
                reason: "need 0 < short < long for phones and words, mismatch > 0".into(),
            });
        }
        Ok(())
    }

    fn scaled(&self) -> (f64, f64, f64, f64) {
        (
            self.phone_short_ms * self.mismatch,
            self.phone_long_ms * self.mismatch,
            self.word_short_ms * self.mismatch,
            self.word_long_ms * self.mismatch,
        )
    }
}

/// Explicit overrides for derived plan quantities; an override wins over the
/// derived value and downstream quantities are recomputed from it.
#[derive(Debug, Clone, Default)]
pub struct PlanOverrides {
    pub t_w: [Option<usize>; 3],
    pub m: [Option<usize>; 3],
    pub t_z: Option<usize>,
}

/// Per-stage window sizes, merge scales, token spans, sequence lengths and
/// word-token count for one model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub hop_ms: f64,
    /// Milliseconds covered by one token at stages 1..3.
    pub spans_ms: [f64; 3],
    /// Window length in tokens at stages 1..3.
    pub t_w: [usize; 3],
    /// Merge scale in tokens after stages 1..3.
    pub m: [usize; 3],
    /// Sequence lengths T_1..T_4.
    pub lengths: [usize; 4],
    /// Word-token count, constant across stages.
    pub t_z: usize,
    /// Encoder layers per stage.
    pub layers: [usize; 4],
}

impl StagePlan {
    pub fn total_layers(&self) -> usize {
        self.layers.iter().sum()
    }

    /// Tokens entering the utterance stage (sequence plus word tokens).
    pub fn utterance_tokens(&self, word_tokens: bool) -> usize {
        self.lengths[3] + if word_tokens { self.t_z } else { 0 }
    }
}

fn ceil_ratio(num: f64, den: f64) -> usize {
    ((num / den).ceil() as usize).max(1)
}

/// Derives the stage plan from duration statistics.
///
/// Stage-1 tokens span one hop. The window covers the shortest phone at
/// stage 1, twice the longest phone at stage 2 and twice the longest word at
/// stage 3; merge scales cover the shortest phone, the shortest word and the
/// longest word. Token conversions round up so a window always covers the
/// full duration. The word-token count is the utterance duration divided by
/// the longest word duration, clamped to at least one.
pub fn derive_stage_plan(
    stats: &DurationStats,
    hop_ms: f64,
    t_1: usize,
    layers: [usize; 4],
    overrides: &PlanOverrides,
) -> Result<StagePlan> {
    stats.validate()?;
    if hop_ms <= 0.0 {
        return Err(HierformError::InvalidParam {
            name: "hop_ms",
            reason: format!("must be positive, got {hop_ms}"),
        });
    }
    if t_1 == 0 {
        return Err(HierformError::InvalidParam {
            name: "t_1",
            reason: "sequence length must be at least 1".into(),
        });
    }
    let (phone_short, phone_long, word_short, word_long) = stats.scaled();

    let t_w1 = overrides.t_w[0].unwrap_or_else(|| ceil_ratio(phone_short, hop_ms));
    let m1 = overrides.m[0].unwrap_or_else(|| ceil_ratio(phone_short, hop_ms));
    let span2 = hop_ms * m1 as f64;
    let t_w2 = overrides.t_w[1].unwrap_or_else(|| ceil_ratio(2.0 * phone_long, span2));
    let m2 = overrides.m[1].unwrap_or_else(|| ceil_ratio(word_short, span2));
    let span3 = span2 * m2 as f64;
    let t_w3 = overrides.t_w[2].unwrap_or_else(|| ceil_ratio(2.0 * word_long, span3));
    let m3 = overrides.m[2].unwrap_or_else(|| ceil_ratio(word_long, span3));

    let t_z = overrides
        .t_z
        .unwrap_or_else(|| ceil_ratio(t_1 as f64 * hop_ms, word_long));
    if t_z > t_1 {
        return Err(HierformError::Plan(format!(
            "word-token count {t_z} exceeds sequence length {t_1}"
        )));
    }

    let t_2 = t_1.div_ceil(m1);
    let t_3 = t_2.div_ceil(m2);
    let t_4 = t_3.div_ceil(m3);
    Ok(StagePlan {
        hop_ms,
        spans_ms: [hop_ms, span2, span3],
        t_w: [t_w1, t_w2, t_w3],
        m: [m1, m2, m3],
        lengths: [t_1, t_2, t_3, t_4],
        t_z,
        layers,
    })
}

/// Randomly initialized word tokens, uniform in (-1/sqrt(d), 1/sqrt(d)).
pub fn init_word_tokens(t_z: usize, d: usize, seed: u64) -> Result<Matrix> {
    if t_z == 0 {
        return Err(HierformError::InvalidParam {
            name: "t_z",
            reason: "need at least one word token".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Matrix::uniform(t_z, d, 1.0 / (d as f64).sqrt(), &mut rng))
}

// ── Parameter storage ────────────────────────────────────────────────

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

/// Flat named parameter storage. Names are stable identifiers; registration
/// order is the identity used when binding onto a tape.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    fn push(&mut self, name: String, value: Matrix) -> ParamRef {
        self.names.push(name);
        self.values.push(value);
        ParamRef(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn value(&self, r: ParamRef) -> &Matrix {
        &self.values[r.0]
    }

    pub fn value_mut(&mut self, r: ParamRef) -> &mut Matrix {
        &mut self.values[r.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> {
        (0..self.values.len()).map(ParamRef)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> u64 {
        self.values.iter().map(|m| m.len() as u64).sum()
    }
}

#[derive(Debug, Clone)]
pub struct MsaRefs {
    pub wq: Vec<ParamRef>,
    pub wk: Vec<ParamRef>,
    pub wv: Vec<ParamRef>,
    pub wo: ParamRef,
}

#[derive(Debug, Clone)]
pub struct LayerRefs {
    pub msa: MsaRefs,
    pub ffn_w1: ParamRef,
    pub ffn_b1: ParamRef,
    pub ffn_w2: ParamRef,
    pub ffn_b2: ParamRef,
    pub norm1_gamma: ParamRef,
    pub norm1_beta: ParamRef,
    pub norm2_gamma: ParamRef,
    pub norm2_beta: ParamRef,
}

/// Merging block: shared affine for the sequence and word-token paths, with
/// a separate layer norm for each path.
#[derive(Debug, Clone)]
pub struct MergeRefs {
    pub w: ParamRef,
    pub b: ParamRef,
    pub norm_x_gamma: ParamRef,
    pub norm_x_beta: ParamRef,
    pub norm_z_gamma: ParamRef,
    pub norm_z_beta: ParamRef,
}

#[derive(Debug, Clone)]
pub struct AffineRefs {
    pub w: ParamRef,
    pub b: ParamRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hierarchical,
    Baseline,
}

/// Width configuration shared by both model kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub d: usize,
    pub d_ff: usize,
    pub d_cls: usize,
    pub heads: usize,
    pub classes: usize,
    pub input_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(HierformError::InvalidParam {
                name: "heads",
                reason: format!("head count {} must divide width {}", self.heads, self.d),
            });
        }
        if self.d == 0 || self.d_ff == 0 || self.d_cls == 0 || self.classes == 0 {
            return Err(HierformError::InvalidParam {
                name: "dims",
                reason: "all widths must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// All learnable state of one model, with stable per-tensor identifiers.
///
/// Word tokens are trainable but architecturally they are input tokens, not
/// weights; parameter accounting treats them as a separate line item so the
/// model size is independent of the utterance length.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub set: ParamSet,
    pub input_proj: Option<AffineRefs>,
    pub layers: Vec<LayerRefs>,
    pub merges: Vec<MergeRefs>,
    pub word_tokens: Option<ParamRef>,
    pub cls_hidden: AffineRefs,
    pub cls_out: AffineRefs,
}

impl ModelParams {
    /// Builds and initializes a model. The hierarchical kind owns three
    /// merging blocks and the word tokens; the baseline owns neither. Both
    /// share the encoder-layer and classifier structure.
    pub fn init(plan: &StagePlan, dims: &ModelDims, kind: ModelKind, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::default();
        let d = dims.d;
        let d_head = d / dims.heads;

        let weight =
            |set: &mut ParamSet, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
                let limit = 1.0 / (rows as f64).sqrt();
                set.push(name, Matrix::uniform(rows, cols, limit, rng))
            };

        let input_proj = if dims.input_dim != d {
            let w = weight(&mut set, "input_proj.w".into(), dims.input_dim, d, &mut rng);
            let b = set.push("input_proj.b".into(), Matrix::zeros(1, d));
            Some(AffineRefs { w, b })
        } else {
            None
        };

        let mut layers = Vec::new();
        for stage in 0..4 {
            for l in 0..plan.layers[stage] {
                let p = format!("stage{}.layer{}", stage + 1, l + 1);
                let mut wq = Vec::new();
                let mut wk = Vec::new();
                let mut wv = Vec::new();
                for h in 0..dims.heads {
                    wq.push(weight(
                        &mut set,
                        format!("{p}.msa.wq{h}"),
                        d,
                        d_head,
                        &mut rng,
                    ));
                    wk.push(weight(
                        &mut set,
                        format!("{p}.msa.wk{h}"),
                        d,
                        d_head,
                        &mut rng,
                    ));
                    wv.push(weight(
                        &mut set,
                        format!("{p}.msa.wv{h}"),
                        d,
                        d_head,
                        &mut rng,
                    ));
                }
                let wo = weight(&mut set, format!("{p}.msa.wo"), d, d, &mut rng);
                layers.push(LayerRefs {
                    msa: MsaRefs { wq, wk, wv, wo },
                    ffn_w1: weight(&mut set, format!("{p}.ffn.w1"), d, dims.d_ff, &mut rng),
                    ffn_b1: set.push(format!("{p}.ffn.b1"), Matrix::zeros(1, dims.d_ff)),
                    ffn_w2: weight(&mut set, format!("{p}.ffn.w2"), dims.d_ff, d, &mut rng),
                    ffn_b2: set.push(format!("{p}.ffn.b2"), Matrix::zeros(1, d)),
                    norm1_gamma: set
                        .push(format!("{p}.norm1.gamma"), Matrix::new(1, d, vec![1.0; d])?),
                    norm1_beta: set.push(format!("{p}.norm1.beta"), Matrix::zeros(1, d)),
                    norm2_gamma: set
                        .push(format!("{p}.norm2.gamma"), Matrix::new(1, d, vec![1.0; d])?),
                    norm2_beta: set.push(format!("{p}.norm2.beta"), Matrix::zeros(1, d)),
                });
            }
        }

        let mut merges = Vec::new();
        let mut word_tokens = None;
        if kind == ModelKind::Hierarchical {
            for i in 0..3 {
                let p = format!("merge{}", i + 1);
                merges.push(MergeRefs {
                    w: weight(&mut set, format!("{p}.w"), d, d, &mut rng),
                    b: set.push(format!("{p}.b"), Matrix::zeros(1, d)),
                    norm_x_gamma: set.push(
                        format!("{p}.norm_x.gamma"),
                        Matrix::new(1, d, vec![1.0; d])?,
                    ),
                    norm_x_beta: set.push(format!("{p}.norm_x.beta"), Matrix::zeros(1, d)),
                    norm_z_gamma: set.push(
                        format!("{p}.norm_z.gamma"),
                        Matrix::new(1, d, vec![1.0; d])?,
                    ),
                    norm_z_beta: set.push(format!("{p}.norm_z.beta"), Matrix::zeros(1, d)),
                });
            }
            word_tokens =
                Some(set.push("word_tokens".into(), init_word_tokens(plan.t_z, d, seed)?));
        }

        let cls_hidden = AffineRefs {
            w: weight(
                &mut set,
                "classifier.hidden.w".into(),
                d,
                dims.d_cls,
                &mut rng,
            ),
            b: set.push("classifier.hidden.b".into(), Matrix::zeros(1, dims.d_cls)),
        };
        let cls_out = AffineRefs {
            w: weight(
                &mut set,
                "classifier.out.w".into(),
                dims.d_cls,
                dims.classes,
                &mut rng,
            ),
            b: set.push("classifier.out.b".into(), Matrix::zeros(1, dims.classes)),
        };

        Ok(ModelParams {
            kind,
            dims: dims.clone(),
            set,
            input_proj,
            layers,
            merges,
            word_tokens,
            cls_hidden,
            cls_out,
        })
    }
}

// ── Binding parameters onto a tape ───────────────────────────────────

/// A model whose parameters are registered on a tape. Parameter order on the
/// tape matches [`ParamSet`] order, so `ids[r.0]` is the tape id of `r`.
pub struct BoundModel<'a> {
    pub params: &'a ModelParams,
    pub ids: Vec<ValueId>,
}

/// Registers every parameter of `params` on `tape`, in stable order.
pub fn bind_params<'a>(tape: &mut Tape, params: &'a ModelParams) -> BoundModel<'a> {
    let ids = params
        .set
        .refs()
        .map(|r| tape.param(params.set.value(r)))
        .collect();
    BoundModel { params, ids }
}

impl BoundModel<'_> {
    pub fn id(&self, r: ParamRef) -> ValueId {
        self.ids[r.0]
    }

    fn msa_view(&self, refs: &MsaRefs) -> MsaParams {
        MsaParams {
            wq: refs.wq.iter().map(|&r| self.id(r)).collect(),
            wk: refs.wk.iter().map(|&r| self.id(r)).collect(),
            wv: refs.wv.iter().map(|&r| self.id(r)).collect(),
            wo: self.id(refs.wo),
            heads: self.params.dims.heads,
            d_model: self.params.dims.d,
            d_head: self.params.dims.d / self.params.dims.heads,
        }
    }

    pub fn layer_view(&self, index: usize) -> EncoderLayerParams {
        let l = &self.params.layers[index];
        EncoderLayerParams {
            msa: self.msa_view(&l.msa),
            ffn_w1: self.id(l.ffn_w1),
            ffn_b1: self.id(l.ffn_b1),
            ffn_w2: self.id(l.ffn_w2),
            ffn_b2: self.id(l.ffn_b2),
            norm1_gamma: self.id(l.norm1_gamma),
            norm1_beta: self.id(l.norm1_beta),
            norm2_gamma: self.id(l.norm2_gamma),
            norm2_beta: self.id(l.norm2_beta),
        }
    }
}

// ── Forward passes ───────────────────────────────────────────────────

/// Module switches for the ablation studies. All enabled is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablations {
    pub unit_encoder: bool,
    pub word_encoder: bool,
    pub merging: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            unit_encoder: true,
            word_encoder: true,
            merging: true,
        }
    }
}

impl Ablations {
    /// All eight on/off combinations.
    pub fn all_combinations() -> Vec<Ablations> {
        let mut out = Vec::with_capacity(8);
        for unit in [true, false] {
            for word in [true, false] {
                for merge in [true, false] {
                    out.push(Ablations {
                        unit_encoder: unit,
                        word_encoder: word,
                        merging: merge,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub ablations: Ablations,
    pub record_attention: bool,
    /// Forces every stage's window length (testing hook for the
    /// full-attention equivalence).
    pub t_w_override: Option<usize>,
}

pub struct ForwardOutput {
    /// 1-by-classes logits value on the tape.
    pub logits: ValueId,
    /// Per-layer attention records, present when requested.
    pub records: Vec<AttentionRecord>,
    /// Token count that entered the utterance stage.
    pub utterance_tokens: usize,
}

fn affine(tape: &mut Tape, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn classifier(tape: &mut Tape, model: &BoundModel, pooled: ValueId) -> Result<ValueId> {
    let hidden = affine(
        tape,
        pooled,
        model.id(model.params.cls_hidden.w),
        model.id(model.params.cls_hidden.b),
    )?;
    let hidden = tape.relu(hidden)?;
    affine(
        tape,
        hidden,
        model.id(model.params.cls_out.w),
        model.id(model.params.cls_out.b),
    )
}

fn project_input(tape: &mut Tape, model: &BoundModel, x: ValueId) -> Result<ValueId> {
    match &model.params.input_proj {
        Some(p) => affine(tape, x, model.id(p.w), model.id(p.b)),
        None => Ok(x),
    }
}

/// One merging block. The sequence is average-pooled by `m` (masked rows are
/// skipped) then passed through the shared affine and its own norm; word
/// tokens skip pooling and use the same affine with a separate norm. A pooled
/// token is valid when any of its source rows was valid.
pub fn merging_block(
    tape: &mut Tape,
    x: ValueId,
    z: Option<ValueId>,
    m: usize,
    model: &BoundModel,
    merge: &MergeRefs,
    valid: &[bool],
) -> Result<(ValueId, Option<ValueId>, Vec<bool>)> {
    let pooled = tape.masked_avg_pool_rows(x, m, valid)?;
    let projected = affine(tape, pooled, model.id(merge.w), model.id(merge.b))?;
    let x_next = tape.layer_norm(
        projected,
        model.id(merge.norm_x_gamma),
        model.id(merge.norm_x_beta),
        LAYER_NORM_EPS,
    )?;
    let z_next = match z {
        Some(z) => {
            let zp = affine(tape, z, model.id(merge.w), model.id(merge.b))?;
            Some(tape.layer_norm(
                zp,
                model.id(merge.norm_z_gamma),
                model.id(merge.norm_z_beta),
                LAYER_NORM_EPS,
            )?)
        }
        None => None,
    };
    let valid_next = valid
        .chunks(m)
        .map(|chunk| chunk.iter().any(|&v| v))
        .collect();
    Ok((x_next, z_next, valid_next))
}

/// Runs the four-stage hierarchical model: per stage, `layers[stage]` blocks
/// (word-encoder update then unit-encoder step) followed by a merging block;
/// the utterance stage concatenates the sequence with the word tokens and
/// runs standard encoder layers; masked mean pooling and the classifier
/// produce the logits.
pub fn hier_forward(
    tape: &mut Tape,
    model: &BoundModel,
    plan: &StagePlan,
    input: ValueId,
    valid: &[bool],
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    if model.params.kind != ModelKind::Hierarchical {
        return Err(HierformError::Usage(
            "hier_forward needs a hierarchical model".into(),
        ));
    }
    let t_in = tape.value(input).rows();
    if t_in != plan.lengths[0] || valid.len() != t_in {
        return Err(HierformError::Plan(format!(
            "input has {} frames but the plan expects {}",
            t_in, plan.lengths[0]
        )));
    }
    let mut x = project_input(tape, model, input)?;
    let mut z = if opts.ablations.word_encoder {
        Some(
            model.id(model
                .params
                .word_tokens
                .expect("hierarchical model has word tokens")),
        )
    } else {
        None
    };
    // a word token is valid when its segment of the original frames holds
    // real data; the mapping to later stages only coarsens
    let word_valid = if z.is_some() {
        word_token_validity(plan.lengths[0], plan.t_z, valid)?
    } else {
        Vec::new()
    };
    let mut valid_x = valid.to_vec();
    let mut records = Vec::new();
    let mut layer_idx = 0;

    for stage in 0..3 {
        let t_w = opts.t_w_override.unwrap_or(plan.t_w[stage]);
        for _ in 0..plan.layers[stage] {
            let layer = model.layer_view(layer_idx);
            let block = if opts.ablations.unit_encoder {
                speechblock_step(tape, x, z, &layer, t_w, &valid_x)?
            } else {
                fullattn_block_step(tape, x, z, &layer, &valid_x, &word_valid)?
            };
            x = block.x;
            z = block.z;
            if opts.record_attention {
                records.push(block.record);
            }
            layer_idx += 1;
        }
        if opts.ablations.merging {
            let merge = model.params.merges[stage].clone();
            let (xn, zn, vn) = merging_block(tape, x, z, plan.m[stage], model, &merge, &valid_x)?;
            x = xn;
            z = zn;
            valid_x = vn;
        }
    }

    let (mut u, valid_u) = match z {
        Some(z) => {
            let joined = tape.concat_rows(&[x, z])?;
            let mut v = valid_x.clone();
            v.extend(word_valid.iter().copied());
            (joined, v)
        }
        None => (x, valid_x.clone()),
    };
    let utterance_tokens = tape.value(u).rows();
    for _ in 0..plan.layers[3] {
        let layer = model.layer_view(layer_idx);
        let (next, record) = transformer_encoder_step(tape, u, &layer, &valid_u)?;
        u = next;
        if opts.record_attention {
            records.push(record);
        }
        layer_idx += 1;
    }

    let pooled = tape.mean_rows(u, &valid_u)?;
    let logits = classifier(tape, model, pooled)?;
    Ok(ForwardOutput {
        logits,
        records,
        utterance_tokens,
    })
}

/// Baseline: `n_layers` standard Transformer encoder layers over the full
/// sequence, masked mean pooling, same classifier shape.
pub fn baseline_forward(
    tape: &mut Tape,
    model: &BoundModel,
    n_layers: usize,
    input: ValueId,
    valid: &[bool],
    record_attention: bool,
) -> Result<ForwardOutput> {
    if n_layers > model.params.layers.len() {
        return Err(HierformError::Usage(format!(
            "requested {} layers but the model has {}",
            n_layers,
            model.params.layers.len()
        )));
    }
    let mut x = project_input(tape, model, input)?;
    let mut records = Vec::new();
    for i in 0..n_layers {
        let layer = model.layer_view(i);
        let (next, record) = transformer_encoder_step(tape, x, &layer, valid)?;
        x = next;
        if record_attention {
            records.push(record);
        }
    }
    let tokens = tape.value(x).rows();
    let pooled = tape.mean_rows(x, valid)?;
    let logits = classifier(tape, model, pooled)?;
    Ok(ForwardOutput {
        logits,
        records,
        utterance_tokens: tokens,
    })
}

/// Convenience one-shot inference: fresh tape, bind, forward, extract logits.
pub fn infer_logits(
    params: &ModelParams,
    plan: &StagePlan,
    input: &Matrix,
    valid: &[bool],
    opts: &ForwardOptions,
) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
    let mut tape = Tape::new();
    let model = bind_params(&mut tape, params);
    let input_id = tape.input(input.clone());
    let out = match params.kind {
        ModelKind::Hierarchical => hier_forward(&mut tape, &model, plan, input_id, valid, opts)?,
        ModelKind::Baseline => baseline_forward(
            &mut tape,
            &model,
            params.layers.len(),
            input_id,
            valid,
            opts.record_attention,
        )?,
    };
    Ok((tape.value(out.logits).row(0).to_vec(), out.records))
}
