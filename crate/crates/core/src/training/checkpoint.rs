//! Checkpoint files: an 8-byte magic, a little-endian u64 manifest length,
//! a JSON manifest, every parameter value as a little-endian f64 in manifest
//! order, and finally the blob's byte length as a little-endian u64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CheckpointRecord;
use crate::error::{Error, Result};
use crate::evaluation::MetricReport;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CBAMCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    seed: u64,
    epoch: Option<usize>,
    metrics: ManifestMetrics,
    frozen: Vec<String>,
    parameters: Vec<ManifestParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestMetrics {
    val_loss: f64,
    val_accuracy: f64,
    val_report: MetricReport,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(rec: &CheckpointRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: rec.model.clone(),
        seed: rec.seed,
        epoch: rec.epoch,
        metrics: ManifestMetrics {
            val_loss: rec.val_loss,
            val_accuracy: rec.val_accuracy,
            val_report: rec.val_metrics,
        },
        frozen: rec.frozen.clone(),
        parameters: rec
            .names
            .iter()
            .zip(&rec.values)
            .map(|(name, t)| ManifestParam {
                name: name.clone(),
                shape: t.dims().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let blob_len = 8 * rec.parameter_count();
    let mut out = Vec::with_capacity(24 + json.len() + blob_len);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &rec.values {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(blob_len as u64).to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u64(bytes: &[u8], at: usize, what: &str) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("slice of eight")))
        .ok_or_else(|| format_err(at, format!("file ends before {what}")))
}

fn decode(bytes: &[u8]) -> Result<CheckpointRecord> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(0, "not a checkpoint file (bad magic)"));
    }
    let manifest_len = read_u64(bytes, 8, "manifest length")? as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(16, format!("manifest of {manifest_len} bytes runs past end of file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
        .map_err(|e| format_err(16, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(16, format!("unsupported format version {}", manifest.format_version)));
    }

    let mut count = 0usize;
    for p in &manifest.parameters {
        let n = p
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| count.checked_add(n));
        count = n.ok_or_else(|| format_err(16, format!("parameter {} has an absurd shape", p.name)))?;
    }
    let blob_len = count
        .checked_mul(8)
        .ok_or_else(|| format_err(16, "parameter blob length overflows"))?;
    let expected = manifest_end + blob_len + 8;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("file is {} bytes, manifest implies {expected}", bytes.len()),
        ));
    }
    let trailer_at = manifest_end + blob_len;
    let trailer = read_u64(bytes, trailer_at, "length trailer")?;
    if trailer != blob_len as u64 {
        return Err(format_err(trailer_at, format!("length trailer {trailer} disagrees with blob of {blob_len} bytes")));
    }

    let mut at = manifest_end;
    let mut names = Vec::with_capacity(manifest.parameters.len());
    let mut values = Vec::with_capacity(manifest.parameters.len());
    for p in manifest.parameters {
        let n: usize = p.shape.iter().product();
        let data: Vec<f64> = bytes[at..at + 8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of eight")))
            .collect();
        values.push(Tensor::new(&p.shape, data).map_err(|e| format_err(at, format!("parameter {}: {e}", p.name)))?);
        names.push(p.name);
        at += 8 * n;
    }
    Ok(CheckpointRecord {
        epoch: manifest.epoch,
        val_loss: manifest.metrics.val_loss,
        val_accuracy: manifest.metrics.val_accuracy,
        val_metrics: manifest.metrics.val_report,
        model: manifest.model,
        seed: manifest.seed,
        frozen: manifest.frozen,
        names,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::{build_model, BackboneConfig};
    use crate::training::{evaluate, CheckpointRecord};

    fn record() -> (CheckpointRecord, crate::data::Dataset) {
        let model = build_model(&BackboneConfig::two_block(8, 8), 8, 11).unwrap();
        let val = synth_generate(6, 8, 8, 2).unwrap();
        let eval = evaluate(&model, &val, 32, 0.5).unwrap();
        (CheckpointRecord::capture(&model, Some(3), &eval), val)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (rec, val) = record();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&rec, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, rec);
        let a = rec.restore().unwrap();
        let b = back.restore().unwrap();
        let (batch, _) = val.batch(&[0, 1, 2]).unwrap();
        assert_eq!(a.forward(&batch).unwrap(), b.forward(&batch).unwrap());
        assert_eq!(evaluate(&b, &val, 32, 0.5).unwrap().loss, rec.val_loss);
    }

    #[test]
    fn manifest_lists_every_parameter() {
        let (rec, _) = record();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&rec, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let params = manifest["parameters"].as_array().unwrap();
        assert_eq!(params.len(), rec.values.len());
        let total: u64 = params
            .iter()
            .map(|p| p["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product::<u64>())
            .sum();
        assert_eq!(total as usize, rec.parameter_count());
    }

    #[test]
    fn corruption_is_a_format_error() {
        let (rec, _) = record();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&rec, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let p = dir.path().join(format!("cut{cut}.bin"));
            fs::write(&p, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })), "cut at {cut}");
        }
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset: 0, .. })));

        let mut bad_trailer = bytes.clone();
        let n = bad_trailer.len();
        bad_trailer[n - 1] ^= 1;
        fs::write(&path, &bad_trailer).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset, .. }) if offset as usize == n - 8));

        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
