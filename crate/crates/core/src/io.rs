//! Small file codecs: binary PNM, key=value manifests, sidecars, OBJ.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::Mesh;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PNM: {0}")]
    Pnm(String),
    #[error("malformed key=value text at line {line}: `{text}`")]
    KeyValue { line: usize, text: String },
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("unsupported file extension for {0}")]
    Extension(String),
    #[error("image codec error: {0}")]
    Codec(String),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Decoded binary PNM (P5 gray or P6 RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Row-major, channel-interleaved.
    pub samples: Vec<u16>,
}

impl Pnm {
    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut pos = 0;
        let mut header = Vec::with_capacity(4);
        while header.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(FormatError::Pnm("truncated header".into()));
            }
            header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let channels = match header[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(FormatError::Pnm(format!("unsupported magic {other}"))),
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| FormatError::Pnm(format!("bad header field `{s}`")))
        };
        let width = parse(&header[1])?;
        let height = parse(&header[2])?;
        let maxval = parse(&header[3])?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(FormatError::Pnm("invalid dimensions or maxval".into()));
        }
        let count = width * height * channels;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        if bytes.len() < pos + need {
            return Err(FormatError::Pnm(format!(
                "raster truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        let raster = &bytes[pos..pos + need];
        let samples = if wide {
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        Ok(Self {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, &self.encode())
    }
}

/// Ordered `key=value` text, the format of manifests, sidecars and run configs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(FormatError::KeyValue {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let bytes = read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn set_f64(&mut self, key: impl Into<String>, value: f64) {
        self.set(key, format!("{value:?}"));
    }

    pub fn set_f64s(&mut self, key: impl Into<String>, values: &[f64]) {
        let text: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
        self.set(key, text.join(" "));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, FormatError> {
        self.get(key).ok_or_else(|| FormatError::MissingKey(key.to_string()))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| FormatError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }

    pub fn f64s(&self, key: &str) -> Result<Vec<f64>, FormatError> {
        let raw = self.require(key)?;
        raw.split_whitespace()
            .map(|s| {
                s.parse().map_err(|_| FormatError::BadValue {
                    key: key.to_string(),
                    value: raw.to_string(),
                })
            })
            .collect()
    }

    /// Reads `prefix[0]`, `prefix[1]`, ... until the first gap.
    pub fn indexed_f64s(&self, prefix: &str) -> Result<Vec<f64>, FormatError> {
        let mut out = Vec::new();
        loop {
            let key = format!("{prefix}[{}]", out.len());
            if !self.contains(&key) {
                return Ok(out);
            }
            out.push(self.parse_value(&key)?);
        }
    }

    pub fn set_indexed_f64s(&mut self, prefix: &str, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.set_f64(format!("{prefix}[{i}]"), *v);
        }
    }
}

/// ASCII OBJ with `v` and 1-based `f` records.
pub fn mesh_to_obj(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 40);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
    }
    for t in mesh.triangles.iter() {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<(), FormatError> {
    write_file(path, mesh_to_obj(mesh).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn pnm_roundtrip_8_and_16_bit() {
        for maxval in [255u16, 65535] {
            let pnm = Pnm {
                width: 3,
                height: 2,
                channels: 1,
                maxval,
                samples: vec![0, 1, 2, 200, maxval, 7],
            };
            assert_eq!(Pnm::decode(&pnm.encode()).unwrap(), pnm);
        }
        let rgb = Pnm {
            width: 1,
            height: 2,
            channels: 3,
            maxval: 255,
            samples: vec![1, 2, 3, 4, 5, 6],
        };
        assert_eq!(Pnm::decode(&rgb.encode()).unwrap(), rgb);
    }

    #[test]
    fn pnm_header_comments_and_truncation() {
        let bytes = b"P5\n# comment\n2 1\n255\n\x05\x06";
        assert_eq!(Pnm::decode(bytes).unwrap().samples, vec![5, 6]);
        assert!(Pnm::decode(b"P5\n2 2\n255\n\x01").is_err());
        assert!(Pnm::decode(b"P3\n1 1\n255\n1 2 3").is_err());
    }

    #[test]
    fn key_values_roundtrip() {
        let mut kv = KeyValues::new();
        kv.set_f64("a", 0.1 + 0.2);
        kv.set_f64s("pose", &[1.0, -2.5, 1e-300]);
        kv.set_indexed_f64s("alpha", &[3.0, 4.0]);
        let back = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(back.parse_value::<f64>("a").unwrap(), 0.1 + 0.2);
        assert_eq!(back.f64s("pose").unwrap(), vec![1.0, -2.5, 1e-300]);
        assert_eq!(back.indexed_f64s("alpha").unwrap(), vec![3.0, 4.0]);
        assert!(matches!(back.require("nope"), Err(FormatError::MissingKey(_))));
        assert!(KeyValues::parse("no equals sign").is_err());
    }

    #[test]
    fn obj_uses_one_based_faces() {
        let mesh = Mesh::new(vec![Vector3::zeros(), Vector3::x(), Vector3::y()], vec![[0, 1, 2]]);
        let obj = mesh_to_obj(&mesh);
        assert!(obj.contains("f 1 2 3"));
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 3);
    }
}
