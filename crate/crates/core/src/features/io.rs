//! Portable feature file.
//!
//! Layout: the 8 magic bytes `MISTFEAT`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then little-endian `f32` payloads in the
//! order video (`K·T·N·D`), question (`M·D`), answers (`A·D`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnswerBank, QuestionFeatures, VideoFeatures};
use crate::error::{MistError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"MISTFEAT";
const VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "A")]
    pub a: usize,
    pub dtype: String,
    pub cls_patch: bool,
    pub cls_frame: bool,
}

impl FeatureHeader {
    fn payload_values(&self) -> Option<usize> {
        let video = self.k.checked_mul(self.t)?.checked_mul(self.n)?.checked_mul(self.d)?;
        let question = self.m.checked_mul(self.d)?;
        let answers = self.a.checked_mul(self.d)?;
        video.checked_add(question)?.checked_add(answers)
    }
}

fn format_err(msg: impl Into<String>) -> MistError {
    MistError::Format(msg.into())
}

pub fn write_features(
    mut w: impl Write,
    v: &VideoFeatures,
    q: &QuestionFeatures,
    a: &AnswerBank,
) -> Result<()> {
    let d = v.dim();
    if q.w.cols() != d || a.a.cols() != d {
        return Err(format_err("question, answer, and video dims differ"));
    }
    let header = FeatureHeader {
        version: VERSION,
        k: v.segments(),
        t: v.frames_per_segment(),
        n: v.patches(),
        d,
        m: q.words(),
        a: a.len(),
        dtype: "f32".into(),
        cls_patch: v.has_cls_patch,
        cls_frame: v.has_cls_frame,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for t in [v.tensor(), &q.w, &a.a] {
        for &x in t.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(mut r: impl Read) -> Result<(VideoFeatures, QuestionFeatures, AnswerBank)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| format_err("file shorter than magic bytes"))?;
    if &magic != MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| format_err("missing header length"))?;
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_HEADER {
        return Err(format_err(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| format_err("truncated header"))?;
    let header: FeatureHeader =
        serde_json::from_slice(&json).map_err(|e| format_err(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(format_err(format!("unsupported version {}", header.version)));
    }
    if header.dtype != "f32" {
        return Err(format_err(format!("unsupported dtype {:?}", header.dtype)));
    }
    let dims = [header.k, header.t, header.n, header.d, header.m, header.a];
    if dims.contains(&0) {
        return Err(format_err("header extents must be positive"));
    }
    let expected = header
        .payload_values()
        .ok_or_else(|| format_err("header extents overflow"))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(format_err(format!(
            "payload length mismatch: header declares {} bytes, found {}",
            expected * 4,
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format_err("payload contains non-finite values"));
    }
    let FeatureHeader { k, t, n, d, m, a, .. } = header;
    let nv = k * t * n * d;
    let video = Tensor::new(vec![k, t, n, d], values[..nv].to_vec())?;
    let question = Tensor::matrix(m, d, values[nv..nv + m * d].to_vec())?;
    let answers = Tensor::matrix(a, d, values[nv + m * d..].to_vec())?;
    Ok((
        VideoFeatures::new(video, header.cls_patch, header.cls_frame)?,
        QuestionFeatures::new(question)?,
        AnswerBank::indexed(answers)?,
    ))
}

pub fn save_features(
    v: &VideoFeatures,
    q: &QuestionFeatures,
    a: &AnswerBank,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_features(BufWriter::new(File::create(path)?), v, q, a)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<(VideoFeatures, QuestionFeatures, AnswerBank)> {
    read_features(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_synthetic, SynthConfig};

    fn encoded() -> (Vec<u8>, crate::features::SynthSample) {
        let s = generate_synthetic(&SynthConfig::tiny(), 5).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &s.video, &s.question, &s.answers).unwrap();
        (buf, s)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (buf, s) = encoded();
        let (v, q, a) = read_features(&buf[..]).unwrap();
        assert_eq!(v, s.video);
        assert_eq!(q, s.question);
        assert_eq!(a, s.answers);
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let (buf, _) = encoded();
        let err = read_features(&buf[..buf.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn header_disagreeing_with_payload_is_rejected() {
        let (buf, _) = encoded();
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&buf[12..12 + len]).unwrap();
        header["N"] = serde_json::json!(header["N"].as_u64().unwrap() + 1);
        let json = serde_json::to_vec(&header).unwrap();
        let mut bad = MAGIC.to_vec();
        bad.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bad.extend_from_slice(&json);
        bad.extend_from_slice(&buf[12 + len..]);
        let err = read_features(&bad[..]).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_and_non_finite_are_rejected() {
        let (mut buf, _) = encoded();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(read_features(&wrong[..]).unwrap_err().to_string().contains("magic"));
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(read_features(&buf[..]).unwrap_err().to_string().contains("non-finite"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.mistfeat");
        let s = generate_synthetic(&SynthConfig::tiny(), 9).unwrap();
        save_features(&s.video, &s.question, &s.answers, &path).unwrap();
        let (v, q, a) = load_features(&path).unwrap();
        assert_eq!((v, q, a), (s.video, s.question, s.answers));
    }
}
