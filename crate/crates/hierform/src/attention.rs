//! Attention machinery: standard multi-head attention, overlapping-window
//! segmentation, even segmentation, the word encoder and the unit encoder,
//! plus the standard Transformer encoder layer.
//!
//! All functions operate on values recorded on a [`Tape`], so every path is
//! differentiable. Parameter structs here are *views*: they hold tape ids of
//! already-registered weight matrices (see the hierarchy module for the
//! owning storage).
//!
//! The windowed path projects keys and values once per layer and reuses them
//! for both the word encoder and the unit encoder (the two share their
//! attention weights), which is exactly the accounting behind the analytic
//! cost formula checked in the analysis module.

use crate::error::{HierformError, Result};
use crate::numerics::{Matrix, Tape, ValueId, LAYER_NORM_EPS};

/// Per-head attention projections. `wq/wk/wv` are d-by-d_head, one per head;
/// `wo` is d-by-d. Shared between the unit encoder and the word encoder of
/// the same layer.
#[derive(Debug, Clone)]
pub struct MsaParams {
    pub wq: Vec<ValueId>,
    pub wk: Vec<ValueId>,
    pub wv: Vec<ValueId>,
    pub wo: ValueId,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
}

/// One encoder layer: attention, a two-layer ReLU feed-forward block, and the
/// two post-residual layer norms.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub msa: MsaParams,
    pub ffn_w1: ValueId,
    pub ffn_b1: ValueId,
    pub ffn_w2: ValueId,
    pub ffn_b2: ValueId,
    pub norm1_gamma: ValueId,
    pub norm1_beta: ValueId,
    pub norm2_gamma: ValueId,
    pub norm2_beta: ValueId,
}

/// The overlapping window of one query token: exactly `t_w` slots covering
/// `[j - floor(t_w/2), j + ceil(t_w/2))` in 0-based positions. Out-of-range
/// slots are `None` and masked during attention.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSpec {
    pub start: isize,
    pub slots: Vec<Option<usize>>,
}

impl WindowSpec {
    /// True for slots that hold a real token.
    pub fn real_mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }
}

/// Window of query `j` in a sequence of length `t`.
pub fn overlap_window(j: usize, t: usize, t_w: usize) -> WindowSpec {
    debug_assert!(j < t && t_w >= 1);
    let start = j as isize - (t_w / 2) as isize;
    let slots = (0..t_w)
        .map(|o| {
            let pos = start + o as isize;
            if pos >= 0 && (pos as usize) < t {
                Some(pos as usize)
            } else {
                None
            }
        })
        .collect();
    WindowSpec { start, slots }
}

/// Segment index (1-based) of token `j` (1-based) when a length-`t_i`
/// sequence is evenly grouped into `t_z` non-overlapping segments:
/// `k = ceil(j * t_z / t_i)`.
pub fn even_segment_of(j: usize, t_i: usize, t_z: usize) -> Result<usize> {
    if t_z > t_i || t_z == 0 {
        return Err(HierformError::Plan(format!(
            "cannot split {t_i} tokens into {t_z} even segments"
        )));
    }
    if j == 0 || j > t_i {
        return Err(HierformError::Usage(format!(
            "token index {j} outside [1, {t_i}]"
        )));
    }
    Ok((j * t_z).div_ceil(t_i))
}

/// 0-based half-open row ranges of the even segments (the preimages of
/// [`even_segment_of`]). Contiguous, disjoint, and covering `[0, t_i)`.
pub fn segment_bounds(t_i: usize, t_z: usize) -> Result<Vec<(usize, usize)>> {
    if t_z > t_i || t_z == 0 {
        return Err(HierformError::Plan(format!(
            "cannot split {t_i} tokens into {t_z} even segments"
        )));
    }
    let mut bounds = Vec::with_capacity(t_z);
    let mut lo = 0;
    for s in 1..=t_z {
        let hi = s * t_i / t_z;
        bounds.push((lo, hi));
        lo = hi;
    }
    Ok(bounds)
}

/// Validity of each word token: a token whose even segment contains no
/// valid sequence position carries only padding and is excluded from
/// attention and pooling downstream.
pub fn word_token_validity(t_i: usize, t_z: usize, valid: &[bool]) -> Result<Vec<bool>> {
    Ok(segment_bounds(t_i, t_z)?
        .into_iter()
        .map(|(lo, hi)| valid[lo..hi].iter().any(|&v| v))
        .collect())
}

/// Per-key attention mass accumulated over all queries and heads of one
/// attention application. `seq_mass` is indexed by sequence position,
/// `word_mass` by word-token index (empty when word tokens are not in play).
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub heads: usize,
    pub queries: usize,
    pub seq_mass: Vec<f64>,
    pub word_mass: Vec<f64>,
}

impl AttentionRecord {
    fn new(heads: usize, queries: usize, seq_len: usize, word_len: usize) -> Self {
        AttentionRecord {
            heads,
            queries,
            seq_mass: vec![0.0; seq_len],
            word_mass: vec![0.0; word_len],
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.seq_mass.iter().sum::<f64>() + self.word_mass.iter().sum::<f64>()
    }
}

const ATTN_EPS: f64 = LAYER_NORM_EPS;

fn project_heads(tape: &mut Tape, x: ValueId, ws: &[ValueId]) -> Result<Vec<ValueId>> {
    ws.iter().map(|&w| tape.matmul(x, w)).collect()
}

/// Full multi-head attention `MSA(query, key, value)` with a per-key mask.
///
/// Per head: scaled dot-product attention at scale `1/sqrt(d_head)`; heads
/// are concatenated and passed through the output projection.
pub fn msa(
    tape: &mut Tape,
    query: ValueId,
    key: ValueId,
    value: ValueId,
    params: &MsaParams,
    mask: &[bool],
) -> Result<(ValueId, AttentionRecord)> {
    let t_q = tape.value(query).rows();
    let t_k = tape.value(key).rows();
    if mask.len() != t_k {
        return Err(HierformError::Usage(format!(
            "mask length {} does not match {} keys",
            mask.len(),
            t_k
        )));
    }
    let scale = 1.0 / (params.d_head as f64).sqrt();
    let mut record = AttentionRecord::new(params.heads, t_q, t_k, 0);
    let mut head_outs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.matmul(query, params.wq[h])?;
        let kh = tape.matmul(key, params.wk[h])?;
        let vh = tape.matmul(value, params.wv[h])?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scores, mask)?;
        accumulate_mass(tape.value(probs), &mut record.seq_mass, None);
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(concat, params.wo)?;
    Ok((out, record))
}

fn accumulate_mass(probs: &Matrix, seq_mass: &mut [f64], remap: Option<&[Option<usize>]>) {
    for r in 0..probs.rows() {
        for (c, &p) in probs.row(r).iter().enumerate() {
            match remap {
                None => seq_mass[c] += p,
                Some(map) => {
                    if let Some(idx) = map[c] {
                        seq_mass[idx] += p;
                    }
                }
            }
        }
    }
}

/// Pre-projected keys/values of the sequence (and word tokens) for one layer.
struct ProjectedKv {
    kx: Vec<ValueId>,
    vx: Vec<ValueId>,
}

fn project_kv(tape: &mut Tape, x: ValueId, msa: &MsaParams) -> Result<ProjectedKv> {
    Ok(ProjectedKv {
        kx: project_heads(tape, x, &msa.wk)?,
        vx: project_heads(tape, x, &msa.wv)?,
    })
}

/// Word-encoder attention given already-projected sequence keys/values:
/// word token `s` attends over its even segment of `x`. No residual, no
/// norm; the output projection is applied (it is part of the attention).
fn word_attend(
    tape: &mut Tape,
    z: ValueId,
    kv: &ProjectedKv,
    msa: &MsaParams,
    t: usize,
    valid: &[bool],
) -> Result<ValueId> {
    let t_z = tape.value(z).rows();
    let bounds = segment_bounds(t, t_z)?;
    let qz = project_heads(tape, z, &msa.wq)?;
    let scale = 1.0 / (msa.d_head as f64).sqrt();
    let mut rows = Vec::with_capacity(t_z);
    for (s, &(lo, hi)) in bounds.iter().enumerate() {
        let slots: Vec<Option<usize>> = (lo..hi).map(Some).collect();
        let mut mask: Vec<bool> = (lo..hi).map(|r| valid[r]).collect();
        if !mask.iter().any(|&m| m) {
            // fully padded segment: attend the zero rows, yielding a zero row
            mask.fill(true);
        }
        let mut head_outs = Vec::with_capacity(msa.heads);
        for h in 0..msa.heads {
            let q = tape.gather_rows(qz[h], &[Some(s)])?;
            let k_seg = tape.gather_rows(kv.kx[h], &slots)?;
            let v_seg = tape.gather_rows(kv.vx[h], &slots)?;
            let scores = tape.matmul_tb(q, k_seg)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax(scores, &mask)?;
            head_outs.push(tape.matmul(probs, v_seg)?);
        }
        rows.push(tape.concat_cols(&head_outs)?);
    }
    let stacked = tape.concat_rows(&rows)?;
    tape.matmul(stacked, msa.wo)
}

/// Updates the word tokens from the sequence: `z_bar(s) = MSA(z(s), seg_s, seg_s)`.
pub fn word_encoder_step(
    tape: &mut Tape,
    z: ValueId,
    x: ValueId,
    msa: &MsaParams,
    valid: &[bool],
) -> Result<ValueId> {
    let t = tape.value(x).rows();
    let kv = project_kv(tape, x, msa)?;
    word_attend(tape, z, &kv, msa, t, valid)
}

/// Windowed attention with optional word-token keys, given pre-projected
/// queries and keys/values. Returns the pre-residual attention output.
#[allow(clippy::too_many_arguments)]
fn window_attend(
    tape: &mut Tape,
    qx: &[ValueId],
    kv: &ProjectedKv,
    word_kv: Option<(&ProjectedKv, usize)>, // projected z_bar kv + t_z
    msa: &MsaParams,
    t: usize,
    t_w: usize,
    valid: &[bool],
) -> Result<(ValueId, AttentionRecord)> {
    let scale = 1.0 / (msa.d_head as f64).sqrt();
    let t_z = word_kv.as_ref().map_or(0, |(_, t_z)| *t_z);
    let mut record = AttentionRecord::new(msa.heads, t, t, t_z);

    // Combined key/value source per head: word-token rows first, then the
    // sequence rows, so window slot i maps to combined row t_z + i.
    let mut ksrc = Vec::with_capacity(msa.heads);
    let mut vsrc = Vec::with_capacity(msa.heads);
    for h in 0..msa.heads {
        match &word_kv {
            Some((zkv, _)) => {
                ksrc.push(tape.concat_rows(&[zkv.kx[h], kv.kx[h]])?);
                vsrc.push(tape.concat_rows(&[zkv.vx[h], kv.vx[h]])?);
            }
            None => {
                ksrc.push(kv.kx[h]);
                vsrc.push(kv.vx[h]);
            }
        }
    }

    let mut query_rows = Vec::with_capacity(t);
    for j in 0..t {
        let window = overlap_window(j, t, t_w);
        let mut slots: Vec<Option<usize>> = Vec::with_capacity(1 + t_w);
        let mut mask: Vec<bool> = Vec::with_capacity(1 + t_w);
        let mut remap: Vec<Option<usize>> = Vec::with_capacity(1 + t_w);
        let word_seg = if t_z > 0 {
            let seg = even_segment_of(j + 1, t, t_z)? - 1;
            slots.push(Some(seg));
            mask.push(true);
            remap.push(None); // word-token mass tracked separately
            Some(seg)
        } else {
            None
        };
        for slot in &window.slots {
            match slot {
                Some(pos) => {
                    slots.push(Some(t_z + pos));
                    mask.push(valid[*pos]);
                    remap.push(Some(*pos));
                }
                None => {
                    slots.push(None);
                    mask.push(false);
                    remap.push(None);
                }
            }
        }
        if !mask.iter().any(|&m| m) {
            // invalid query deep in padding: let it attend its own window so
            // the softmax stays defined; the result is masked downstream
            for (i, slot) in slots.iter().enumerate() {
                mask[i] = slot.is_some();
            }
        }

        let mut head_outs = Vec::with_capacity(msa.heads);
        for h in 0..msa.heads {
            let q = tape.gather_rows(qx[h], &[Some(j)])?;
            let k_win = tape.gather_rows(ksrc[h], &slots)?;
            let v_win = tape.gather_rows(vsrc[h], &slots)?;
            let scores = tape.matmul_tb(q, k_win)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax(scores, &mask)?;
            let pm = tape.value(probs);
            accumulate_mass(pm, &mut record.seq_mass, Some(&remap));
            if let Some(seg) = word_seg {
                record.word_mass[seg] += pm.get(0, 0);
            }
            head_outs.push(tape.matmul(probs, v_win)?);
        }
        query_rows.push(tape.concat_cols(&head_outs)?);
    }
    let stacked = tape.concat_rows(&query_rows)?;
    let out = tape.matmul(stacked, msa.wo)?;
    Ok((out, record))
}

/// Residual + norm + feed-forward + residual + norm tail shared by every
/// encoder variant.
fn encoder_tail(
    tape: &mut Tape,
    attn_out: ValueId,
    x: ValueId,
    layer: &EncoderLayerParams,
) -> Result<ValueId> {
    let sum = tape.add(attn_out, x)?;
    let xhat = tape.layer_norm(sum, layer.norm1_gamma, layer.norm1_beta, ATTN_EPS)?;
    let hidden = tape.matmul(xhat, layer.ffn_w1)?;
    let hidden = tape.add_bias(hidden, layer.ffn_b1)?;
    let hidden = tape.relu(hidden)?;
    let ffn = tape.matmul(hidden, layer.ffn_w2)?;
    let ffn = tape.add_bias(ffn, layer.ffn_b2)?;
    let sum2 = tape.add(ffn, xhat)?;
    tape.layer_norm(sum2, layer.norm2_gamma, layer.norm2_beta, ATTN_EPS)
}

/// One unit-encoder step: windowed attention (with the word token of each
/// query's segment in the key set when enabled), residual + norm, then the
/// feed-forward block with its own residual + norm.
///
/// `z_bar` must already be the updated word tokens for this layer.
pub fn unit_encoder_step(
    tape: &mut Tape,
    x: ValueId,
    z_bar: Option<ValueId>,
    layer: &EncoderLayerParams,
    t_w: usize,
    valid: &[bool],
) -> Result<(ValueId, AttentionRecord)> {
    let t = tape.value(x).rows();
    let qx = project_heads(tape, x, &layer.msa.wq)?;
    let kv = project_kv(tape, x, &layer.msa)?;
    let word_kv = match z_bar {
        Some(z) => {
            let t_z = tape.value(z).rows();
            Some((project_kv(tape, z, &layer.msa)?, t_z))
        }
        None => None,
    };
    let (attn, record) = window_attend(
        tape,
        &qx,
        &kv,
        word_kv.as_ref().map(|(kv, t_z)| (kv, *t_z)),
        &layer.msa,
        t,
        t_w,
        valid,
    )?;
    let out = encoder_tail(tape, attn, x, layer)?;
    Ok((out, record))
}

/// Standard Transformer encoder layer with full attention.
pub fn transformer_encoder_step(
    tape: &mut Tape,
    x: ValueId,
    layer: &EncoderLayerParams,
    valid: &[bool],
) -> Result<(ValueId, AttentionRecord)> {
    let (attn, record) = msa(tape, x, x, x, &layer.msa, valid)?;
    let out = encoder_tail(tape, attn, x, layer)?;
    Ok((out, record))
}

/// Output of one combined word-encoder + unit-encoder block.
pub struct BlockOutput {
    pub x: ValueId,
    pub z: Option<ValueId>,
    pub record: AttentionRecord,
    /// Multiply-accumulates spent on the attention path of this block
    /// (projections + attention matmuls; feed-forward excluded).
    pub attn_macs: u64,
}

/// One full block: word-encoder update (when word tokens are enabled)
/// followed by the unit-encoder step, with the sequence K/V projections
/// computed once and shared between the two.
pub fn speechblock_step(
    tape: &mut Tape,
    x: ValueId,
    z: Option<ValueId>,
    layer: &EncoderLayerParams,
    t_w: usize,
    valid: &[bool],
) -> Result<BlockOutput> {
    let macs_before = tape.macs();
    let t = tape.value(x).rows();
    let qx = project_heads(tape, x, &layer.msa.wq)?;
    let kv = project_kv(tape, x, &layer.msa)?;
    let (z_bar, word_kv) = match z {
        Some(z) => {
            let z_bar = word_attend(tape, z, &kv, &layer.msa, t, valid)?;
            let t_z = tape.value(z_bar).rows();
            (
                Some(z_bar),
                Some((project_kv(tape, z_bar, &layer.msa)?, t_z)),
            )
        }
        None => (None, None),
    };
    let (attn, record) = window_attend(
        tape,
        &qx,
        &kv,
        word_kv.as_ref().map(|(kv, t_z)| (kv, *t_z)),
        &layer.msa,
        t,
        t_w,
        valid,
    )?;
    let attn_macs = tape.macs() - macs_before;
    let out = encoder_tail(tape, attn, x, layer)?;
    Ok(BlockOutput {
        x: out,
        z: z_bar,
        record,
        attn_macs,
    })
}

/// Ablation variant used when the unit encoder is disabled but word tokens
/// are kept: the word encoder still updates `z`, and every sequence token
/// full-attends over the word tokens plus the whole sequence. `word_valid`
/// masks word tokens that cover only padding (see [`word_token_validity`]);
/// it is ignored when `z` is absent.
pub fn fullattn_block_step(
    tape: &mut Tape,
    x: ValueId,
    z: Option<ValueId>,
    layer: &EncoderLayerParams,
    valid: &[bool],
    word_valid: &[bool],
) -> Result<BlockOutput> {
    let macs_before = tape.macs();
    let t = tape.value(x).rows();
    match z {
        None => {
            let (attn, record) = msa(tape, x, x, x, &layer.msa, valid)?;
            let attn_macs = tape.macs() - macs_before;
            let out = encoder_tail(tape, attn, x, layer)?;
            Ok(BlockOutput {
                x: out,
                z: None,
                record,
                attn_macs,
            })
        }
        Some(z) => {
            let kv = project_kv(tape, x, &layer.msa)?;
            let z_bar = word_attend(tape, z, &kv, &layer.msa, t, valid)?;
            let t_z = tape.value(z_bar).rows();
            if word_valid.len() != t_z {
                return Err(HierformError::Usage(format!(
                    "word-token mask has {} entries for {} tokens",
                    word_valid.len(),
                    t_z
                )));
            }
            let keys = tape.concat_rows(&[z_bar, x])?;
            let mut mask = word_valid.to_vec();
            mask.extend_from_slice(valid);
            let (attn, raw) = msa(tape, x, keys, keys, &layer.msa, &mask)?;
            let attn_macs = tape.macs() - macs_before;
            // the first t_z keys are the word tokens
            let mut record = AttentionRecord::new(layer.msa.heads, t, t, t_z);
            record.word_mass.copy_from_slice(&raw.seq_mass[..t_z]);
            record.seq_mass.copy_from_slice(&raw.seq_mass[t_z..]);
            let out = encoder_tail(tape, attn, x, layer)?;
            Ok(BlockOutput {
                x: out,
                z: Some(z_bar),
                record,
                attn_macs,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_m(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::uniform(rows, cols, 1.0, rng)
    }

    /// Registers random MSA weights on the tape, returning the view plus the
    /// raw matrices for oracle computations.
    fn random_msa(
        tape: &mut Tape,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> (MsaParams, Vec<Matrix>, Vec<Matrix>, Vec<Matrix>, Matrix) {
        let d_head = d / heads;
        let wq_m: Vec<Matrix> = (0..heads).map(|_| rand_m(d, d_head, rng)).collect();
        let wk_m: Vec<Matrix> = (0..heads).map(|_| rand_m(d, d_head, rng)).collect();
        let wv_m: Vec<Matrix> = (0..heads).map(|_| rand_m(d, d_head, rng)).collect();
        let wo_m = rand_m(d, d, rng);
        let params = MsaParams {
            wq: wq_m.iter().map(|m| tape.param(m)).collect(),
            wk: wk_m.iter().map(|m| tape.param(m)).collect(),
            wv: wv_m.iter().map(|m| tape.param(m)).collect(),
            wo: tape.param(&wo_m),
            heads,
            d_model: d,
            d_head,
        };
        (params, wq_m, wk_m, wv_m, wo_m)
    }

    fn identity_msa(tape: &mut Tape, d: usize) -> MsaParams {
        let eye = Matrix::eye(d);
        MsaParams {
            wq: vec![tape.param(&eye)],
            wk: vec![tape.param(&eye)],
            wv: vec![tape.param(&eye)],
            wo: tape.param(&eye),
            heads: 1,
            d_model: d,
            d_head: d,
        }
    }

    /// Naive reference MSA: explicit per-head loops over plain matrices.
    #[allow(clippy::too_many_arguments)]
    fn naive_msa(
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        wq: &[Matrix],
        wk: &[Matrix],
        wv: &[Matrix],
        wo: &Matrix,
        mask: &[bool],
    ) -> Matrix {
        let heads = wq.len();
        let d_head = wq[0].cols();
        let mut outs = Vec::new();
        for h in 0..heads {
            let qh = matrix::matmul(q, &wq[h]).unwrap();
            let kh = matrix::matmul(k, &wk[h]).unwrap();
            let vh = matrix::matmul(v, &wv[h]).unwrap();
            let scores = matrix::scale(
                &matrix::matmul_tb(&qh, &kh).unwrap(),
                1.0 / (d_head as f64).sqrt(),
            );
            let probs = matrix::masked_softmax(&scores, mask).unwrap();
            outs.push(matrix::matmul(&probs, &vh).unwrap());
        }
        let refs: Vec<&Matrix> = outs.iter().collect();
        matrix::matmul(&matrix::concat_cols(&refs).unwrap(), wo).unwrap()
    }

    #[test]
    fn msa_single_token_identity_weights() {
        let mut tape = Tape::new();
        let params = identity_msa(&mut tape, 3);
        let x = tape.input(Matrix::new(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
        let (out, record) = msa(&mut tape, x, x, x, &params, &[true]).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(x)) < 1e-12);
        assert!((record.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn msa_identical_keys_split_mass_evenly() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (params, ..) = random_msa(&mut tape, 4, 2, &mut rng);
        let key = tape.input(Matrix::new(2, 4, vec![0.5; 8]).unwrap());
        let q = tape.input(rand_m(3, 4, &mut rng));
        let (_, record) = msa(&mut tape, q, key, key, &params, &[true, true]).unwrap();
        // each of the two identical keys receives half the mass: h*Tq/2 = 3
        assert!((record.seq_mass[0] - 3.0).abs() < 1e-12);
        assert!((record.seq_mass[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn msa_matches_naive_oracle() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (params, wq, wk, wv, wo) = random_msa(&mut tape, 4, 2, &mut rng);
        let xm = rand_m(3, 4, &mut rng);
        let x = tape.input(xm.clone());
        let mask = vec![true, true, true];
        let (out, _) = msa(&mut tape, x, x, x, &params, &mask).unwrap();
        let expect = naive_msa(&xm, &xm, &xm, &wq, &wk, &wv, &wo, &mask);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn window_left_edge() {
        let w = overlap_window(0, 3, 3);
        assert_eq!(w.start, -1);
        assert_eq!(w.slots, vec![None, Some(0), Some(1)]);
        assert_eq!(w.real_mask(), vec![false, true, true]);
    }

    #[test]
    fn window_interior() {
        let w = overlap_window(1, 3, 3);
        assert_eq!(w.slots, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn window_even_length() {
        let w = overlap_window(1, 4, 2);
        assert_eq!(w.slots, vec![Some(0), Some(1)]);
    }

    #[test]
    fn even_segments_exact_split() {
        for j in 1..=3 {
            assert_eq!(even_segment_of(j, 6, 2).unwrap(), 1);
        }
        for j in 4..=6 {
            assert_eq!(even_segment_of(j, 6, 2).unwrap(), 2);
        }
    }

    #[test]
    fn even_segments_uneven_split() {
        assert_eq!(even_segment_of(1, 5, 2).unwrap(), 1);
        assert_eq!(even_segment_of(2, 5, 2).unwrap(), 1);
        assert_eq!(even_segment_of(3, 5, 2).unwrap(), 2);
        assert_eq!(even_segment_of(5, 5, 2).unwrap(), 2);
        assert_eq!(segment_bounds(5, 2).unwrap(), vec![(0, 2), (2, 5)]);
    }

    #[test]
    fn even_segments_single() {
        for j in 1..=4 {
            assert_eq!(even_segment_of(j, 4, 1).unwrap(), 1);
        }
    }

    #[test]
    fn even_segments_rejects_too_many() {
        assert!(even_segment_of(1, 3, 4).is_err());
    }

    #[test]
    fn word_encoder_single_token_attends_whole_sequence() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (params, wq, wk, wv, wo) = random_msa(&mut tape, 4, 2, &mut rng);
        let xm = rand_m(5, 4, &mut rng);
        let zm = rand_m(1, 4, &mut rng);
        let x = tape.input(xm.clone());
        let z = tape.input(zm.clone());
        let valid = vec![true; 5];
        let z_bar = word_encoder_step(&mut tape, z, x, &params, &valid).unwrap();
        let expect = naive_msa(&zm, &xm, &xm, &wq, &wk, &wv, &wo, &valid);
        assert!(tape.value(z_bar).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn word_encoder_constant_input_identity_weights() {
        let mut tape = Tape::new();
        let params = identity_msa(&mut tape, 2);
        let c = [0.7, -0.2];
        let x = tape.input(Matrix::new(4, 2, vec![c[0], c[1]].repeat(4)).unwrap());
        let z = tape.input(Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z_bar = word_encoder_step(&mut tape, z, x, &params, &[true; 4]).unwrap();
        for r in 0..2 {
            assert!((tape.value(z_bar).get(r, 0) - c[0]).abs() < 1e-12);
            assert!((tape.value(z_bar).get(r, 1) - c[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn word_encoder_matches_per_segment_oracle() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (params, wq, wk, wv, wo) = random_msa(&mut tape, 2, 1, &mut rng);
        let xm = rand_m(4, 2, &mut rng);
        let zm = rand_m(2, 2, &mut rng);
        let x = tape.input(xm.clone());
        let z = tape.input(zm.clone());
        let z_bar = word_encoder_step(&mut tape, z, x, &params, &[true; 4]).unwrap();
        // segments of 4 into 2: rows [0,2) and [2,4)
        for (s, (lo, hi)) in [(0usize, (0usize, 2usize)), (1, (2, 4))] {
            let z_row = Matrix::new(1, 2, zm.row(s).to_vec()).unwrap();
            let seg_rows: Vec<Vec<f64>> = (lo..hi).map(|r| xm.row(r).to_vec()).collect();
            let seg = Matrix::from_rows(&seg_rows).unwrap();
            let expect = naive_msa(&z_row, &seg, &seg, &wq, &wk, &wv, &wo, &vec![true; hi - lo]);
            for c in 0..2 {
                assert!((tape.value(z_bar).get(s, c) - expect.get(0, c)).abs() < 1e-12);
            }
        }
    }

    fn random_layer(
        tape: &mut Tape,
        d: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> EncoderLayerParams {
        let (msa, ..) = random_msa(tape, d, heads, rng);
        EncoderLayerParams {
            msa,
            ffn_w1: tape.param(&rand_m(d, d_ff, rng)),
            ffn_b1: tape.param(&rand_m(1, d_ff, rng)),
            ffn_w2: tape.param(&rand_m(d_ff, d, rng)),
            ffn_b2: tape.param(&rand_m(1, d, rng)),
            norm1_gamma: tape.param(&Matrix::new(1, d, vec![1.0; d]).unwrap()),
            norm1_beta: tape.param(&Matrix::zeros(1, d)),
            norm2_gamma: tape.param(&Matrix::new(1, d, vec![1.0; d]).unwrap()),
            norm2_beta: tape.param(&Matrix::zeros(1, d)),
        }
    }

    #[test]
    fn unit_encoder_full_window_equals_transformer_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let t = 7;
            let layer = random_layer(&mut tape, 8, 4, 2, &mut rng);
            let xm = rand_m(t, 8, &mut rng);
            let x1 = tape.input(xm.clone());
            let valid = vec![true; t];
            let (windowed, _) =
                unit_encoder_step(&mut tape, x1, None, &layer, 2 * t + 1, &valid).unwrap();
            let x2 = tape.input(xm);
            let (full, _) = transformer_encoder_step(&mut tape, x2, &layer, &valid).unwrap();
            assert!(tape.value(windowed).max_abs_diff(tape.value(full)) <= 1e-12);
        }
    }

    #[test]
    fn unit_encoder_window_of_one_with_zero_ffn() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = 4;
        let (msa_p, ..) = random_msa(&mut tape, d, 2, &mut rng);
        let ones = Matrix::new(1, d, vec![1.0; d]).unwrap();
        let layer = EncoderLayerParams {
            msa: msa_p,
            ffn_w1: tape.param(&Matrix::zeros(d, 2)),
            ffn_b1: tape.param(&Matrix::zeros(1, 2)),
            ffn_w2: tape.param(&Matrix::zeros(2, d)),
            ffn_b2: tape.param(&Matrix::zeros(1, d)),
            norm1_gamma: tape.param(&ones),
            norm1_beta: tape.param(&Matrix::zeros(1, d)),
            norm2_gamma: tape.param(&ones),
            norm2_beta: tape.param(&Matrix::zeros(1, d)),
        };
        let xm = rand_m(3, d, &mut rng);
        let x = tape.input(xm.clone());
        let (out, record) = unit_encoder_step(&mut tape, x, None, &layer, 1, &[true; 3]).unwrap();
        // window of one: each token attends only itself; with zero FFN the
        // output is Norm(Norm(attn + x) + 0).
        assert!((record.total_mass() - 6.0).abs() < 1e-12); // h * Tq = 2*3
        let g = tape.value(layer.norm1_gamma).clone();
        let b = Matrix::zeros(1, d);
        let ones_mask = [true];
        for j in 0..3 {
            let row = Matrix::new(1, d, xm.row(j).to_vec()).unwrap();
            let wqs: Vec<Matrix> = layer
                .msa
                .wq
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect();
            let wks: Vec<Matrix> = layer
                .msa
                .wk
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect();
            let wvs: Vec<Matrix> = layer
                .msa
                .wv
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect();
            let wo = tape.value(layer.msa.wo).clone();
            let attn = naive_msa(&row, &row, &row, &wqs, &wks, &wvs, &wo, &ones_mask);
            let xhat =
                matrix::layer_norm(&matrix::add(&attn, &row).unwrap(), &g, &b, ATTN_EPS).unwrap();
            let expect = matrix::layer_norm(&xhat, &g, &b, ATTN_EPS).unwrap();
            for c in 0..d {
                assert!((tape.value(out).get(j, c) - expect.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_encoder_with_word_token_matches_naive_loop() {
        // T=2, d=2, Tz=1: replicate the enhanced-window computation directly.
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layer = random_layer(&mut tape, 2, 2, 1, &mut rng);
        let xm = rand_m(2, 2, &mut rng);
        let zm = rand_m(1, 2, &mut rng);
        let x = tape.input(xm.clone());
        let z_bar = tape.input(zm.clone());
        let t_w = 3;
        let (out, _) =
            unit_encoder_step(&mut tape, x, Some(z_bar), &layer, t_w, &[true, true]).unwrap();

        let wq: Vec<Matrix> = layer
            .msa
            .wq
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect();
        let wk: Vec<Matrix> = layer
            .msa
            .wk
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect();
        let wv: Vec<Matrix> = layer
            .msa
            .wv
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect();
        let wo = tape.value(layer.msa.wo).clone();
        let mut attn_rows = Vec::new();
        for j in 0..2usize {
            // key set e = [z_bar; window tokens], padded slots masked
            let window = overlap_window(j, 2, t_w);
            let mut key_rows = vec![zm.row(0).to_vec()];
            let mut mask = vec![true];
            for slot in &window.slots {
                match slot {
                    Some(p) => {
                        key_rows.push(xm.row(*p).to_vec());
                        mask.push(true);
                    }
                    None => {
                        key_rows.push(vec![0.0; 2]);
                        mask.push(false);
                    }
                }
            }
            let keys = Matrix::from_rows(&key_rows).unwrap();
            let q = Matrix::new(1, 2, xm.row(j).to_vec()).unwrap();
            attn_rows.push(naive_msa(&q, &keys, &keys, &wq, &wk, &wv, &wo, &mask));
        }
        let attn = matrix::concat_rows(&attn_rows.iter().collect::<Vec<_>>()).unwrap();
        let g1 = tape.value(layer.norm1_gamma).clone();
        let b1 = tape.value(layer.norm1_beta).clone();
        let xhat =
            matrix::layer_norm(&matrix::add(&attn, &xm).unwrap(), &g1, &b1, ATTN_EPS).unwrap();
        let h = matrix::relu(
            &matrix::add_bias(
                &matrix::matmul(&xhat, tape.value(layer.ffn_w1)).unwrap(),
                tape.value(layer.ffn_b1),
            )
            .unwrap(),
        );
        let f = matrix::add_bias(
            &matrix::matmul(&h, tape.value(layer.ffn_w2)).unwrap(),
            tape.value(layer.ffn_b2),
        )
        .unwrap();
        let g2 = tape.value(layer.norm2_gamma).clone();
        let b2 = tape.value(layer.norm2_beta).clone();
        let expect =
            matrix::layer_norm(&matrix::add(&f, &xhat).unwrap(), &g2, &b2, ATTN_EPS).unwrap();
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn transformer_single_token() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layer = random_layer(&mut tape, 4, 2, 2, &mut rng);
        let x = tape.input(rand_m(1, 4, &mut rng));
        let (out, record) = transformer_encoder_step(&mut tape, x, &layer, &[true]).unwrap();
        assert_eq!(tape.value(out).shape(), (1, 4));
        assert!((record.seq_mass[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn transformer_is_permutation_equivariant() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let layer = random_layer(&mut tape, 8, 4, 2, &mut rng);
        let xm = rand_m(4, 8, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&p| xm.row(p).to_vec()).collect();
        let xp = Matrix::from_rows(&permuted_rows).unwrap();
        let valid = vec![true; 4];
        let a = tape.input(xm);
        let b = tape.input(xp);
        let (out_a, _) = transformer_encoder_step(&mut tape, a, &layer, &valid).unwrap();
        let (out_b, _) = transformer_encoder_step(&mut tape, b, &layer, &valid).unwrap();
        for (bi, &ai) in perm.iter().enumerate() {
            for c in 0..8 {
                let diff = (tape.value(out_a).get(ai, c) - tape.value(out_b).get(bi, c)).abs();
                assert!(diff < 1e-12);
            }
        }
    }

    #[test]
    fn block_step_attention_macs_match_formula() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (t, d, heads, t_w, t_z) = (6usize, 8usize, 2usize, 3usize, 2usize);
        let layer = random_layer(&mut tape, d, 4, heads, &mut rng);
        let x = tape.input(rand_m(t, d, &mut rng));
        let z = tape.input(rand_m(t_z, d, &mut rng));
        let out = speechblock_step(&mut tape, x, Some(z), &layer, t_w, &vec![true; t]).unwrap();
        let expect = (4 * (t + t_z) * d * d + 2 * t * (t_w + 2) * d) as u64;
        assert_eq!(out.attn_macs, expect);
    }

    #[test]
    fn block_step_matches_separate_word_and_unit_steps() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let layer = random_layer(&mut tape, 4, 2, 2, &mut rng);
        let xm = rand_m(5, 4, &mut rng);
        let zm = rand_m(2, 4, &mut rng);
        let valid = vec![true; 5];
        let x1 = tape.input(xm.clone());
        let z1 = tape.input(zm.clone());
        let fused = speechblock_step(&mut tape, x1, Some(z1), &layer, 3, &valid).unwrap();
        let x2 = tape.input(xm);
        let z2 = tape.input(zm);
        let z_bar = word_encoder_step(&mut tape, z2, x2, &layer.msa, &valid).unwrap();
        let (x_bar, _) = unit_encoder_step(&mut tape, x2, Some(z_bar), &layer, 3, &valid).unwrap();
        assert!(tape.value(fused.x).max_abs_diff(tape.value(x_bar)) < 1e-13);
        assert!(tape.value(fused.z.unwrap()).max_abs_diff(tape.value(z_bar)) < 1e-13);
    }

    #[test]
    fn gradients_flow_through_unit_encoder() {
        // End-to-end finite-difference check through one block, word tokens
        // on. The FFN biases are lifted away from zero so no ReLU kink sits
        // inside the central-difference step.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let xm = rand_m(4, d, &mut rng);
        let zm = rand_m(2, d, &mut rng);
        // a plain sum would be constant through the final layer norm; weight
        // the entries so the loss actually depends on the block output
        let weights = rand_m(4, d, &mut rng);
        let eval = |x_in: &Matrix, z_in: &Matrix| -> (f64, Option<(Matrix, Matrix)>) {
            let mut tape = Tape::new();
            let mut rng2 = ChaCha8Rng::seed_from_u64(22);
            let mut layer = random_layer(&mut tape, d, 2, 2, &mut rng2);
            layer.ffn_b1 = tape.param(&Matrix::new(1, 2, vec![3.0, 3.0]).unwrap());
            let x = tape.param(x_in);
            let z = tape.param(z_in);
            let w = tape.input(weights.clone());
            let out = speechblock_step(&mut tape, x, Some(z), &layer, 3, &[true; 4]).unwrap();
            let weighted = tape.hadamard(out.x, w).unwrap();
            let loss = tape.sum(weighted).unwrap();
            let val = tape.value(loss).get(0, 0);
            tape.backward(loss).unwrap();
            (val, Some((tape.grad_or_zero(x), tape.grad_or_zero(z))))
        };
        let (_, grads) = eval(&xm, &zm);
        let (gx, gz) = grads.unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..xm.len() {
            let mut plus = xm.clone();
            plus.data_mut()[i] += eps;
            let mut minus = xm.clone();
            minus.data_mut()[i] -= eps;
            let num = (eval(&plus, &zm).0 - eval(&minus, &zm).0) / (2.0 * eps);
            let a = gx.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        for i in 0..zm.len() {
            let mut plus = zm.clone();
            plus.data_mut()[i] += eps;
            let mut minus = zm.clone();
            minus.data_mut()[i] -= eps;
            let num = (eval(&xm, &plus).0 - eval(&xm, &minus).0) / (2.0 * eps);
            let a = gz.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_contains_query_and_union_covers(t in 1usize..20, t_w in 1usize..9) {
                let mut covered = vec![false; t];
                for j in 0..t {
                    let w = overlap_window(j, t, t_w);
                    prop_assert_eq!(w.slots.len(), t_w);
                    prop_assert!(w.slots.contains(&Some(j)));
                    // real slots are contiguous
                    let reals: Vec<usize> = w.slots.iter().flatten().copied().collect();
                    for pair in reals.windows(2) {
                        prop_assert_eq!(pair[1], pair[0] + 1);
                    }
                    for r in reals {
                        covered[r] = true;
                    }
                }
                prop_assert!(covered.into_iter().all(|c| c));
            }

            #[test]
            fn even_partition_is_contiguous_and_balanced(t_i in 1usize..40, t_z in 1usize..12) {
                prop_assume!(t_z <= t_i);
                let bounds = segment_bounds(t_i, t_z).unwrap();
                prop_assert_eq!(bounds.len(), t_z);
                prop_assert_eq!(bounds[0].0, 0);
                prop_assert_eq!(bounds[t_z - 1].1, t_i);
                let lo_size = t_i / t_z;
                let hi_size = t_i.div_ceil(t_z);
                for (s, &(lo, hi)) in bounds.iter().enumerate() {
                    prop_assert!(hi > lo);
                    let size = hi - lo;
                    prop_assert!(size == lo_size || size == hi_size);
                    for j in lo..hi {
                        prop_assert_eq!(even_segment_of(j + 1, t_i, t_z).unwrap(), s + 1);
                    }
                }
            }
        }

        #[test]
        fn attention_mass_totals_h_times_tq() {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            for (t, t_w, t_z, heads) in [(5, 3, 2, 2), (8, 1, 1, 1), (6, 7, 3, 2)] {
                let mut tape = Tape::new();
                let layer = super::super::tests::random_layer(&mut tape, 4, 2, heads, &mut rng);
                let x = tape.input(Matrix::uniform(t, 4, 1.0, &mut rng));
                let z = tape.input(Matrix::uniform(t_z, 4, 1.0, &mut rng));
                let out =
                    speechblock_step(&mut tape, x, Some(z), &layer, t_w, &vec![true; t]).unwrap();
                assert!((out.record.total_mass() - (heads * t) as f64).abs() < 1e-9);
            }
        }
    }
}
