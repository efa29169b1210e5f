//! Analytic cost formulas, whole-model cost reports, exact parameter
//! counting, and attention-weight profiles.
//!
//! Cost figures are multiply-accumulate counts. The two attention formulas
//! are normative: the tape's instrumented MAC counter reproduces them
//! exactly (see the acceptance suite). Feed-forward cost is `2*T*d*d_ff`
//! per layer (both affine maps together) and is reported in its own column
//! so the attention figures stay formula-exact; with `d_ff = d/2` this
//! accounting also reproduces the published baseline totals the plans were
//! calibrated against.

use crate::attention::AttentionRecord;
use crate::error::{HierformError, Result};
use crate::hierarchy::{Ablations, ModelDims, ModelKind, ModelParams, StagePlan};

/// Full attention cost: `4Td^2 + 2T^2d`.
pub fn msa_flops(t: usize, d: usize) -> u64 {
    let (t, d) = (t as u64, d as u64);
    4 * t * d * d + 2 * t * t * d
}

/// Windowed attention with word tokens: `4(T+Tz)d^2 + 2T(Tw+2)d`.
///
/// The projection term covers Q/K/V/O over the sequence plus the word-token
/// side (word queries, the updated tokens' output projection and their K/V);
/// the linear term covers the per-window attention (`Tw+1` keys per query,
/// the extra key being the word token) plus the word-encoder attention
/// (`+1`), each costing two matmuls.
pub fn smsa_flops(t: usize, t_z: usize, t_w: usize, d: usize) -> u64 {
    let (t, t_z, t_w, d) = (t as u64, t_z as u64, t_w as u64, d as u64);
    4 * (t + t_z) * d * d + 2 * t * (t_w + 2) * d
}

/// Windowed attention without word tokens: `4Td^2 + 2T*Tw*d`.
pub fn windowed_flops(t: usize, t_w: usize, d: usize) -> u64 {
    let (t, t_w, d) = (t as u64, t_w as u64, d as u64);
    4 * t * d * d + 2 * t * t_w * d
}

/// Full attention over the sequence with word tokens in the key set, plus
/// the word-encoder update (the unit-encoder-off, word-encoder-on ablation).
pub fn fullattn_word_flops(t: usize, t_z: usize, d: usize) -> u64 {
    let (t, t_z, d) = (t as u64, t_z as u64, d as u64);
    6 * t * d * d + 4 * t_z * d * d + 2 * t * (t + t_z + 1) * d
}

/// Feed-forward cost per layer: two affine maps, `2*T*d*d_ff` total.
pub fn ffn_flops(t: usize, d: usize, d_ff: usize) -> u64 {
    2 * (t as u64) * (d as u64) * (d_ff as u64)
}

/// Merging-block cost: the shared affine over the pooled sequence and the
/// word tokens. Pooling itself is additions only.
pub fn merge_flops(t_out: usize, t_z: usize, d: usize) -> u64 {
    ((t_out + t_z) as u64) * (d as u64) * (d as u64)
}

/// One line of a cost report. `stage`/`layer` are 1-based; merging-block
/// cost is attributed to the last layer of its stage.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub stage: usize,
    pub layer: usize,
    pub kind: ModelKind,
    pub attn_flops: u64,
    pub ffn_flops: u64,
    pub merge_flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostTotals {
    pub attn: u64,
    pub ffn: u64,
    pub merge: u64,
}

impl CostTotals {
    /// Attention plus feed-forward, the figure the gain is quoted on.
    pub fn attn_ffn(&self) -> u64 {
        self.attn + self.ffn
    }

    pub fn all(&self) -> u64 {
        self.attn + self.ffn + self.merge
    }
}

/// Analytic cost and size comparison of the two model kinds on one plan.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub baseline: CostTotals,
    pub hierarchical: CostTotals,
    pub baseline_params: u64,
    pub hierarchical_params: u64,
    pub word_token_values: u64,
}

impl CostReport {
    /// Signed difference in attention+FFN cost, hierarchical minus baseline.
    /// Antisymmetric under swapping the two kinds.
    pub fn flop_delta(&self) -> i128 {
        self.hierarchical.attn_ffn() as i128 - self.baseline.attn_ffn() as i128
    }

    /// Relative attention+FFN change of the hierarchical model against the
    /// baseline, in percent (negative means cheaper).
    pub fn flop_gain_percent(&self) -> f64 {
        100.0 * self.flop_delta() as f64 / self.baseline.attn_ffn() as f64
    }

    pub fn param_delta(&self) -> i128 {
        self.hierarchical_params as i128 - self.baseline_params as i128
    }

    pub fn param_gain_percent(&self) -> f64 {
        100.0 * self.param_delta() as f64 / self.baseline_params as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,layer,kind,attn_flops,ffn_flops,merge_flops,params\n");
        for r in &self.rows {
            let kind = match r.kind {
                ModelKind::Baseline => "baseline",
                ModelKind::Hierarchical => "hierarchical",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.stage, r.layer, kind, r.attn_flops, r.ffn_flops, r.merge_flops, r.params
            ));
        }
        out
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:<6} {:<13} {:>16} {:>16} {:>13} {:>12}\n",
            "stage", "layer", "kind", "attn_flops", "ffn_flops", "merge_flops", "params"
        ));
        for r in &self.rows {
            let kind = match r.kind {
                ModelKind::Baseline => "baseline",
                ModelKind::Hierarchical => "hierarchical",
            };
            out.push_str(&format!(
                "{:<6} {:<6} {:<13} {:>16} {:>16} {:>13} {:>12}\n",
                r.stage, r.layer, kind, r.attn_flops, r.ffn_flops, r.merge_flops, r.params
            ));
        }
        out.push_str(&format!(
            "\nbaseline      attn+ffn {:>16}  (attn {} ffn {})\n",
            self.baseline.attn_ffn(),
            self.baseline.attn,
            self.baseline.ffn
        ));
        out.push_str(&format!(
            "hierarchical  attn+ffn {:>16}  (attn {} ffn {} merge {})\n",
            self.hierarchical.attn_ffn(),
            self.hierarchical.attn,
            self.hierarchical.ffn,
            self.hierarchical.merge
        ));
        out.push_str(&format!(
            "flop gain     {:+.2}%\n",
            self.flop_gain_percent()
        ));
        out.push_str(&format!(
            "params        baseline {}  hierarchical {}  ({:+.2}%)\n",
            self.baseline_params,
            self.hierarchical_params,
            self.param_gain_percent()
        ));
        out.push_str(&format!(
            "word tokens   {} values (counted separately)\n",
            self.word_token_values
        ));
        out
    }
}

fn layer_param_count(d: u64, d_ff: u64) -> u64 {
    // q/k/v projections (3*d*d over all heads), output projection, the two
    // ffn affines with biases, two norms
    4 * d * d + 2 * d * d_ff + d_ff + d + 4 * d
}

fn merge_param_count(d: u64) -> u64 {
    d * d + d + 4 * d
}

fn classifier_param_count(d: u64, d_cls: u64, classes: u64) -> u64 {
    d * d_cls + d_cls + d_cls * classes + classes
}

/// Structural parameter count for a configuration, without materializing any
/// weights. Word tokens are input tokens and appear on their own line.
#[derive(Debug, Clone)]
pub struct ParamCount {
    pub total: u64,
    pub word_tokens: u64,
    pub by_component: Vec<(String, u64)>,
}

pub fn param_count_for(plan: &StagePlan, dims: &ModelDims, kind: ModelKind) -> ParamCount {
    let d = dims.d as u64;
    let mut by_component = Vec::new();
    if dims.input_dim != dims.d {
        by_component.push(("input_proj".to_string(), (dims.input_dim as u64) * d + d));
    }
    by_component.push((
        "encoder_layers".to_string(),
        plan.total_layers() as u64 * layer_param_count(d, dims.d_ff as u64),
    ));
    if kind == ModelKind::Hierarchical {
        by_component.push(("merging_blocks".to_string(), 3 * merge_param_count(d)));
    }
    by_component.push((
        "classifier".to_string(),
        classifier_param_count(d, dims.d_cls as u64, dims.classes as u64),
    ));
    let total = by_component.iter().map(|(_, c)| c).sum();
    let word_tokens = if kind == ModelKind::Hierarchical {
        plan.t_z as u64 * d
    } else {
        0
    };
    ParamCount {
        total,
        word_tokens,
        by_component,
    }
}

/// Exact count over a materialized model. Matches [`param_count_for`] on the
/// same configuration; invariant under re-seeding.
pub fn count_params(params: &ModelParams) -> ParamCount {
    let mut total = 0u64;
    let mut word_tokens = 0u64;
    for (name, value) in params.set.iter() {
        if name == "word_tokens" {
            word_tokens += value.len() as u64;
        } else {
            total += value.len() as u64;
        }
    }
    ParamCount {
        total,
        word_tokens,
        by_component: Vec::new(),
    }
}

/// Builds the full cost report for one plan: the baseline runs
/// `plan.total_layers()` full-attention layers at `T_1`; the hierarchical
/// model runs its stages at their per-stage lengths with the stated ablation
/// switches.
pub fn model_flops(plan: &StagePlan, dims: &ModelDims, ablations: &Ablations) -> CostReport {
    let d = dims.d;
    let d_ff = dims.d_ff;
    let t_1 = plan.lengths[0];
    let n_layers = plan.total_layers();
    let layer_params = layer_param_count(d as u64, d_ff as u64);

    let mut rows = Vec::new();
    let mut baseline = CostTotals::default();
    for l in 0..n_layers {
        let attn = msa_flops(t_1, d);
        let ffn = ffn_flops(t_1, d, d_ff);
        baseline.attn += attn;
        baseline.ffn += ffn;
        rows.push(CostRow {
            stage: 1,
            layer: l + 1,
            kind: ModelKind::Baseline,
            attn_flops: attn,
            ffn_flops: ffn,
            merge_flops: 0,
            params: layer_params,
        });
    }

    let mut hier = CostTotals::default();
    let t_z = if ablations.word_encoder { plan.t_z } else { 0 };
    let mut t_cur = t_1;
    for stage in 0..3 {
        for l in 0..plan.layers[stage] {
            let attn = match (ablations.unit_encoder, ablations.word_encoder) {
                (true, true) => smsa_flops(t_cur, t_z, plan.t_w[stage], d),
                (true, false) => windowed_flops(t_cur, plan.t_w[stage], d),
                (false, true) => fullattn_word_flops(t_cur, t_z, d),
                (false, false) => msa_flops(t_cur, d),
            };
            let ffn = ffn_flops(t_cur, d, d_ff);
            hier.attn += attn;
            hier.ffn += ffn;
            let is_last = l + 1 == plan.layers[stage];
            let merge = if ablations.merging && is_last {
                merge_flops(t_cur.div_ceil(plan.m[stage]), t_z, d)
            } else {
                0
            };
            hier.merge += merge;
            rows.push(CostRow {
                stage: stage + 1,
                layer: l + 1,
                kind: ModelKind::Hierarchical,
                attn_flops: attn,
                ffn_flops: ffn,
                merge_flops: merge,
                params: layer_params
                    + if merge > 0 {
                        merge_param_count(d as u64)
                    } else {
                        0
                    },
            });
        }
        if ablations.merging {
            t_cur = t_cur.div_ceil(plan.m[stage]);
        }
    }
    let t_utt = t_cur + t_z;
    for l in 0..plan.layers[3] {
        let attn = msa_flops(t_utt, d);
        let ffn = ffn_flops(t_utt, d, d_ff);
        hier.attn += attn;
        hier.ffn += ffn;
        rows.push(CostRow {
            stage: 4,
            layer: l + 1,
            kind: ModelKind::Hierarchical,
            attn_flops: attn,
            ffn_flops: ffn,
            merge_flops: 0,
            params: layer_params,
        });
    }

    let baseline_count = param_count_for(plan, dims, ModelKind::Baseline);
    let hier_count = param_count_for(plan, dims, ModelKind::Hierarchical);
    CostReport {
        rows,
        baseline,
        hierarchical: hier,
        baseline_params: baseline_count.total,
        hierarchical_params: hier_count.total,
        word_token_values: hier_count.word_tokens,
    }
}

/// Hierarchical attention+FFN cost at each mismatch factor, with everything
/// else derived from the same statistics.
pub fn mismatch_sweep(
    stats: &crate::hierarchy::DurationStats,
    hop_ms: f64,
    t_1: usize,
    layers: [usize; 4],
    dims: &ModelDims,
    mismatches: &[f64],
) -> Result<Vec<(f64, u64)>> {
    let mut out = Vec::with_capacity(mismatches.len());
    for &mm in mismatches {
        let scaled = crate::hierarchy::DurationStats {
            mismatch: mm,
            ..stats.clone()
        };
        let plan = crate::hierarchy::derive_stage_plan(
            &scaled,
            hop_ms,
            t_1,
            layers,
            &crate::hierarchy::PlanOverrides::default(),
        )?;
        let report = model_flops(&plan, dims, &Ablations::default());
        out.push((mm, report.hierarchical.attn_ffn()));
    }
    Ok(out)
}

/// Per-token profile of accumulated key-side attention mass for one layer,
/// normalized to (0, 1) by a softmax across tokens.
pub fn attention_weight_profile(records: &[AttentionRecord], layer: usize) -> Result<Vec<f64>> {
    let record = records.get(layer).ok_or_else(|| {
        HierformError::Usage(format!(
            "layer {layer} out of range for {} records",
            records.len()
        ))
    })?;
    let max = record
        .seq_mass
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = record.seq_mass.iter().map(|&m| (m - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}
