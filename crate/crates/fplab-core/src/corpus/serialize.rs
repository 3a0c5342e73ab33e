//! JSON-lines serialization for datasets.

use serde::Serialize;

use super::datasets::DownstreamDataset;
use super::fingerprints::FingerprintPair;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct FingerprintRow<'a> {
    key: &'a [u32],
    decryption: &'a [u32],
    family: &'a str,
}

#[derive(Serialize)]
struct PairRow<'a> {
    prompt: &'a [u32],
    target: &'a [u32],
}

/// One JSON object per fingerprint pair.
pub fn fingerprints_to_jsonl(pairs: &[FingerprintPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        let row = FingerprintRow {
            key: &p.key.ids,
            decryption: &p.decryption.ids,
            family: p.family.label(),
        };
        out.push_str(
            &serde_json::to_string(&row)
                .map_err(|e| Error::InvalidArg(format!("jsonl encode: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

/// One JSON object per (prompt, target) pair.
pub fn downstream_to_jsonl(ds: &DownstreamDataset) -> Result<String> {
    let mut out = String::new();
    for p in &ds.pairs {
        let row = PairRow { prompt: &p.prompt.ids, target: &p.target.ids };
        out.push_str(
            &serde_json::to_string(&row)
                .map_err(|e| Error::InvalidArg(format!("jsonl encode: {e}")))?,
        );
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, make_downstream, make_fingerprints, DownstreamName};

    #[test]
    fn fingerprint_jsonl_shape() {
        let spec = build_vocab().unwrap();
        let set = make_fingerprints(&spec, 1, 2, 2).unwrap();
        let text = fingerprints_to_jsonl(&set.effect).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["family"], "F1");
        assert_eq!(v["key"].as_array().unwrap().len(), 12);
        assert_eq!(v["decryption"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn downstream_jsonl_shape() {
        let spec = build_vocab().unwrap();
        let ds = make_downstream(&spec, DownstreamName::Math, 1, 200).unwrap();
        let text = downstream_to_jsonl(&ds).unwrap();
        assert_eq!(text.lines().count(), 200);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(v["prompt"].is_array() && v["target"].is_array());
    }
}
