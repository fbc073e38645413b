//! Feature-file ingestion and padded batch construction.
//!
//! The on-disk format is LPG-JSONL: a header line followed by one dialogue
//! object per line. Records carry per-utterance text/audio feature vectors
//! and an emotion label; there is no speaker field anywhere in the schema.

pub mod probe;
pub mod synth;

use crate::error::{LpgError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Label used at padded positions of a batch; never valid in a file.
pub const PAD_LABEL: i64 = -1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub version: u32,
    pub f_t: usize,
    pub f_a: usize,
    pub num_classes: usize,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    #[serde(rename = "t")]
    pub text_feat: Vec<f64>,
    #[serde(rename = "a")]
    pub audio_feat: Vec<f64>,
    #[serde(rename = "y")]
    pub label: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<UtteranceRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: FeatureHeader,
    pub dialogues: Vec<Dialogue>,
}

impl Dataset {
    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.utterances.len()).sum()
    }

    /// Valid-utterance count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.header.num_classes];
        for d in &self.dialogues {
            for u in &d.utterances {
                counts[u.label as usize] += 1;
            }
        }
        counts
    }
}

/// Train/validation/test dialogue lists sharing one header.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub header: FeatureHeader,
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl DatasetSplit {
    pub fn split(&self, which: &str) -> &[Dialogue] {
        match which {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            _ => panic!("unknown split {which}"),
        }
    }
}

/// Padded per-dialogue batch with a prefix-form validity mask.
#[derive(Debug, Clone)]
pub struct DialogueBatch {
    /// [B, U_max, F_t]
    pub text_feats: Tensor,
    /// [B, U_max, F_a]
    pub audio_feats: Tensor,
    /// [B, U_max], 1.0 on valid positions, 0.0 afterward
    pub mask: Tensor,
    /// [B * U_max], PAD_LABEL on padding
    pub labels: Vec<i64>,
    pub batch: usize,
    pub u_max: usize,
}

impl DialogueBatch {
    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != PAD_LABEL).count()
    }
}

// ── LPG-JSONL I/O ────────────────────────────────────────────────────

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| LpgError::Parse { line: 1, msg: "empty file, header expected".into() })??;
    let header: FeatureHeader = serde_json::from_str(&header_line)
        .map_err(|e| LpgError::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.version != 1 {
        return Err(LpgError::schema(format!("unsupported format version {}", header.version)));
    }
    if header.labels.len() != header.num_classes {
        return Err(LpgError::schema(format!(
            "header declares {} classes but {} label names",
            header.num_classes,
            header.labels.len()
        )));
    }
    let mut dialogues = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line)
            .map_err(|e| LpgError::Parse { line: lineno, msg: e.to_string() })?;
        for u in &d.utterances {
            if u.text_feat.len() != header.f_t {
                return Err(LpgError::schema(format!(
                    "dialogue '{}': text feature dim {} != header f_t {}",
                    d.id,
                    u.text_feat.len(),
                    header.f_t
                )));
            }
            if u.audio_feat.len() != header.f_a {
                return Err(LpgError::schema(format!(
                    "dialogue '{}': audio feature dim {} != header f_a {}",
                    d.id,
                    u.audio_feat.len(),
                    header.f_a
                )));
            }
            if u.label < 0 || u.label as usize >= header.num_classes {
                return Err(LpgError::schema(format!(
                    "dialogue '{}': unknown label id {}",
                    d.id, u.label
                )));
            }
        }
        dialogues.push(d);
    }
    Ok(Dataset { header, dialogues })
}

pub fn write_feature_file(
    path: impl AsRef<Path>,
    header: &FeatureHeader,
    dialogues: &[Dialogue],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "{}", serde_json::to_string(header)?)?;
    for d in dialogues {
        writeln!(out, "{}", serde_json::to_string(d)?)?;
    }
    Ok(())
}

// ── Batching ─────────────────────────────────────────────────────────

/// Groups whole dialogues into batches of at most `max_batch`, padding each
/// batch to its longest dialogue. Padding features are zero.
pub fn pad_batch(
    dialogues: &[Dialogue],
    max_batch: usize,
    f_t: usize,
    f_a: usize,
) -> Result<Vec<DialogueBatch>> {
    if max_batch < 1 {
        return Err(LpgError::contract("max_batch must be >= 1".to_string()));
    }
    let mut batches = Vec::new();
    for chunk in dialogues.chunks(max_batch) {
        let b = chunk.len();
        let u_max = chunk.iter().map(|d| d.utterances.len()).max().unwrap_or(0);
        if chunk.iter().any(|d| d.utterances.is_empty()) {
            return Err(LpgError::contract("dialogue with zero utterances".to_string()));
        }
        let mut text = vec![0.0; b * u_max * f_t];
        let mut audio = vec![0.0; b * u_max * f_a];
        let mut mask = vec![0.0; b * u_max];
        let mut labels = vec![PAD_LABEL; b * u_max];
        for (bi, d) in chunk.iter().enumerate() {
            for (ui, u) in d.utterances.iter().enumerate() {
                if u.text_feat.len() != f_t || u.audio_feat.len() != f_a {
                    return Err(LpgError::dim(format!(
                        "dialogue '{}': feature dims {}/{} vs expected {f_t}/{f_a}",
                        d.id,
                        u.text_feat.len(),
                        u.audio_feat.len()
                    )));
                }
                let t0 = (bi * u_max + ui) * f_t;
                text[t0..t0 + f_t].copy_from_slice(&u.text_feat);
                let a0 = (bi * u_max + ui) * f_a;
                audio[a0..a0 + f_a].copy_from_slice(&u.audio_feat);
                mask[bi * u_max + ui] = 1.0;
                labels[bi * u_max + ui] = u.label;
            }
        }
        batches.push(DialogueBatch {
            text_feats: Tensor::from_vec(vec![b, u_max, f_t], text)?,
            audio_feats: Tensor::from_vec(vec![b, u_max, f_a], audio)?,
            mask: Tensor::from_vec(vec![b, u_max], mask)?,
            labels,
            batch: b,
            u_max,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::LpgError;
    use std::io::Write;

    fn header() -> FeatureHeader {
        FeatureHeader {
            version: 1,
            f_t: 2,
            f_a: 3,
            num_classes: 2,
            labels: vec!["neg".into(), "pos".into()],
        }
    }

    fn dialogue(id: &str, labels: &[i64]) -> Dialogue {
        Dialogue {
            id: id.to_string(),
            utterances: labels
                .iter()
                .map(|&y| UtteranceRecord {
                    text_feat: vec![0.1, 0.2],
                    audio_feat: vec![0.3, 0.4, 0.5],
                    label: y,
                })
                .collect(),
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let dialogues = vec![dialogue("d0", &[0, 1]), dialogue("d1", &[1])];
        write_feature_file(&path, &header(), &dialogues).unwrap();
        let ds = load_feature_file(&path).unwrap();
        assert_eq!(ds.dialogues.len(), 2);
        assert_eq!(ds.utterance_count(), 3);
        assert_eq!(ds.class_counts(), vec![1, 2]);
        assert_eq!(ds.header.labels, header().labels);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{}", serde_json::to_string(&header()).unwrap()).unwrap();
        writeln!(f, "{{not json").unwrap();
        drop(f);
        match load_feature_file(&path) {
            Err(LpgError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error with line number, got {other:?}"),
        }
    }

    #[test]
    fn wrong_feature_width_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dim.jsonl");
        let mut d = dialogue("d0", &[0]);
        d.utterances[0].text_feat.push(9.9);
        write_feature_file(&path, &header(), &[d]).unwrap();
        assert!(matches!(load_feature_file(&path), Err(LpgError::Schema(_))));
    }

    #[test]
    fn out_of_range_label_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("label.jsonl");
        write_feature_file(&path, &header(), &[dialogue("d0", &[2])]).unwrap();
        assert!(matches!(load_feature_file(&path), Err(LpgError::Schema(_))));
        let path2 = dir.path().join("neg.jsonl");
        write_feature_file(&path2, &header(), &[dialogue("d0", &[-1])]).unwrap();
        assert!(load_feature_file(&path2).is_err());
    }

    #[test]
    fn pad_batch_masks_are_prefixes_and_features_zero_padded() {
        let dialogues = vec![dialogue("d0", &[0, 1, 0]), dialogue("d1", &[1])];
        let batches = pad_batch(&dialogues, 8, 2, 3).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!((b.batch, b.u_max), (2, 3));
        assert_eq!(b.mask.data, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.labels, vec![0, 1, 0, 1, PAD_LABEL, PAD_LABEL]);
        assert_eq!(b.valid_count(), 4);
        // padded text rows are zero
        assert!(b.text_feats.data[2 * 3 * 2 - 4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_batch_chunks_whole_dialogues() {
        let dialogues: Vec<Dialogue> =
            (0..5).map(|i| dialogue(&format!("d{i}"), &[0])).collect();
        let batches = pad_batch(&dialogues, 2, 2, 3).unwrap();
        assert_eq!(batches.iter().map(|b| b.batch).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn empty_dialogue_is_contract_error() {
        let d = Dialogue { id: "empty".into(), utterances: vec![] };
        assert!(matches!(pad_batch(&[d], 4, 2, 3), Err(LpgError::Contract(_))));
    }
}
