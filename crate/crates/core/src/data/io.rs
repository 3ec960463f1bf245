//! JSON-lines corpus files: a header line, then one clip per line.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{Corpus, CorpusConfig, GestureClip, Split, FORMAT_VERSION};
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

const FORMAT_NAME: &str = "aqgt-corpus";
const SUPPORTED_MAJOR: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: String,
    seed: u64,
    clips: usize,
    checksum: String,
    skeleton: Skeleton,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    id: String,
    speaker: usize,
    split: Split,
    n_frames: usize,
    frames: String,
    confidences: String,
    tokens: Vec<u32>,
    audio: String,
}

pub(crate) fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f32(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!(
            "{} bytes is not a whole number of f32 values",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn clip_line(clip: &GestureClip) -> String {
    let rec = ClipRecord {
        id: clip.id.clone(),
        speaker: clip.speaker,
        split: clip.split,
        n_frames: clip.n_frames,
        frames: encode_f32(&clip.frames),
        confidences: encode_f32(&clip.confidences),
        tokens: clip.tokens.clone(),
        audio: encode_f32(&clip.audio),
    };
    serde_json::to_string(&rec).expect("clip records always serialize")
}

fn digest_lines<'a>(lines: impl Iterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 over the serialized clip lines.
pub fn corpus_checksum(corpus: &Corpus) -> String {
    let lines: Vec<String> = corpus.clips.iter().map(clip_line).collect();
    digest_lines(lines.iter().map(String::as_str))
}

pub fn corpus_to_string(corpus: &Corpus) -> String {
    let lines: Vec<String> = corpus.clips.iter().map(clip_line).collect();
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: corpus.version.clone(),
        seed: corpus.seed,
        clips: corpus.clips.len(),
        checksum: digest_lines(lines.iter().map(String::as_str)),
        skeleton: corpus.skeleton.clone(),
        config: corpus.config.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("headers always serialize");
    out.push('\n');
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, corpus_to_string(corpus)).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_str(&text)
}

fn parse_err(line: usize, e: serde_json::Error) -> Error {
    Error::Parse {
        line,
        column: e.column(),
        reason: e.to_string(),
    }
}

pub fn corpus_from_str(text: &str) -> Result<Corpus> {
    let mut lines = text.lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        column: 0,
        reason: "empty file".into(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|e| parse_err(1, e))?;
    if header.format != FORMAT_NAME {
        return Err(Error::Parse {
            line: 1,
            column: 0,
            reason: format!("not a corpus file (format `{}`)", header.format),
        });
    }
    let major = header
        .version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major != Some(SUPPORTED_MAJOR) {
        return Err(Error::Version {
            found: header.version,
            supported: SUPPORTED_MAJOR,
        });
    }
    let body: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    let actual = digest_lines(body.iter().copied());
    if actual != header.checksum {
        return Err(Error::Checksum {
            expected: header.checksum,
            actual,
        });
    }
    if body.len() != header.clips {
        return Err(Error::Parse {
            line: body.len() + 2,
            column: 0,
            reason: format!(
                "header announces {} clips, file holds {}",
                header.clips,
                body.len()
            ),
        });
    }
    let j = header.skeleton.joints();
    let mut clips = Vec::with_capacity(body.len());
    for (i, l) in body.iter().enumerate() {
        let line = i + 2;
        let rec: ClipRecord = serde_json::from_str(l).map_err(|e| parse_err(line, e))?;
        let field = |name: &str, text: &str, expect: Option<usize>| -> Result<Vec<f64>> {
            let column = l.find(&format!("\"{name}\"")).map_or(0, |c| c + 1);
            let v = decode_f32(text).map_err(|reason| Error::Parse {
                line,
                column,
                reason: format!("{name}: {reason}"),
            })?;
            if let Some(n) = expect {
                if v.len() != n {
                    return Err(Error::Parse {
                        line,
                        column,
                        reason: format!("{name}: expected {n} values, found {}", v.len()),
                    });
                }
            }
            Ok(v)
        };
        let frames = field("frames", &rec.frames, Some(rec.n_frames * j * 3))?;
        let confidences = field("confidences", &rec.confidences, Some(rec.n_frames * j))?;
        let audio = field("audio", &rec.audio, None)?;
        clips.push(GestureClip {
            id: rec.id,
            speaker: rec.speaker,
            split: rec.split,
            n_frames: rec.n_frames,
            frames,
            confidences,
            tokens: rec.tokens,
            audio,
        });
    }
    Ok(Corpus {
        version: header.version,
        seed: header.seed,
        skeleton: header.skeleton,
        config: header.config,
        clips,
    })
}

/// Current on-disk format version.
pub fn format_version() -> &'static str {
    FORMAT_VERSION
}

#[cfg(test)]
mod tests {
    use super::super::corpus::generate_corpus;
    use super::*;

    fn small() -> Corpus {
        let cfg = CorpusConfig {
            clips: 4,
            min_duration: 0.5,
            max_duration: 0.8,
            ..Default::default()
        };
        generate_corpus(&cfg, &Skeleton::upper11(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = small();
        let back = corpus_from_str(&corpus_to_string(&c)).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_major_version_is_rejected() {
        let text =
            corpus_to_string(&small()).replacen("\"version\":\"1.0\"", "\"version\":\"2.0\"", 1);
        assert!(matches!(
            corpus_from_str(&text),
            Err(Error::Version { supported: 1, .. })
        ));
    }

    #[test]
    fn tampering_is_detected() {
        let text = corpus_to_string(&small());
        let tampered = text.replacen("\"speaker\":0", "\"speaker\":1", 1);
        assert!(matches!(
            corpus_from_str(&tampered),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn malformed_header_reports_position() {
        match corpus_from_str("{\"format\": \"aqgt-corpus\",, }\n") {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 1);
                assert!(column > 0);
            }
            other => panic!("{other:?}"),
        }
    }
}
