//! Model-weight persistence: a flat binary container ("HFW1") of named f64
//! tensors. Loading fills an already-constructed model by name, so the file
//! and the configuration must describe the same architecture.

use crate::error::{HierformError, Result};
use crate::hierarchy::ModelParams;
use crate::numerics::Matrix;
use std::fs;
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"HFW1";

pub fn save_weights(path: &Path, params: &ModelParams) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&(params.set.len() as u32).to_le_bytes());
    for (name, value) in params.set.iter() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for v in value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Replaces every tensor of `params` with the file's tensor of the same
/// name. Errors on magic/shape/name mismatches and on non-finite values.
pub fn load_weights(path: &Path, params: &mut ModelParams) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(HierformError::BadMagic("not a weights file".into()));
    }
    let mut pos = 4;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(HierformError::Truncated(format!(
                "weights file ended at offset {pos}",
                pos = *pos
            )));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let count = read_u32(&mut pos)? as usize;
    if count != params.set.len() {
        return Err(HierformError::Format(format!(
            "weights file has {count} tensors, model expects {}",
            params.set.len()
        )));
    }
    let mut loaded: Vec<(String, Matrix)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| HierformError::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut pos)? as usize;
        let cols = read_u32(&mut pos)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(HierformError::NonFinite { op: "load_weights" });
            }
            data.push(v);
        }
        loaded.push((name, Matrix::new(rows, cols, data)?));
    }
    for (r, (name, value)) in params
        .set
        .refs()
        .collect::<Vec<_>>()
        .into_iter()
        .zip(loaded)
    {
        if params.set.name(r) != name {
            return Err(HierformError::Format(format!(
                "tensor {name:?} does not match expected {:?}; architecture mismatch",
                params.set.name(r)
            )));
        }
        if params.set.value(r).shape() != value.shape() {
            return Err(HierformError::Format(format!(
                "tensor {name:?} has shape {:?}, model expects {:?}",
                value.shape(),
                params.set.value(r).shape()
            )));
        }
        *params.set.value_mut(r) = value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{derive_stage_plan, DurationStats, ModelDims, ModelKind, PlanOverrides};

    fn tiny_model(seed: u64) -> (crate::hierarchy::StagePlan, ModelParams) {
        let plan = derive_stage_plan(
            &DurationStats::default(),
            150.0,
            12,
            [1, 1, 1, 1],
            &PlanOverrides::default(),
        )
        .unwrap();
        let dims = ModelDims {
            d: 8,
            d_ff: 4,
            d_cls: 4,
            heads: 2,
            classes: 2,
            input_dim: 8,
        };
        let params = ModelParams::init(&plan, &dims, ModelKind::Hierarchical, seed).unwrap();
        (plan, params)
    }

    #[test]
    fn weights_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hfw");
        let (_, params) = tiny_model(5);
        save_weights(&path, &params).unwrap();
        let (_, mut other) = tiny_model(6);
        load_weights(&path, &mut other).unwrap();
        for (r_a, r_b) in params.set.refs().zip(other.set.refs()) {
            assert_eq!(params.set.value(r_a), other.set.value(r_b));
        }
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hfw");
        let (_, params) = tiny_model(5);
        save_weights(&path, &params).unwrap();
        let plan = derive_stage_plan(
            &DurationStats::default(),
            150.0,
            12,
            [1, 1, 1, 1],
            &PlanOverrides::default(),
        )
        .unwrap();
        let dims = ModelDims {
            d: 8,
            d_ff: 4,
            d_cls: 4,
            heads: 2,
            classes: 2,
            input_dim: 8,
        };
        let mut baseline = ModelParams::init(&plan, &dims, ModelKind::Baseline, 1).unwrap();
        assert!(load_weights(&path, &mut baseline).is_err());
    }
}
