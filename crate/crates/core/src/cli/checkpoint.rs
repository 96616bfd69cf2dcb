//! Binary checkpoint format.
//!
//! ```text
//! "SAPOCKPT" | u32 LE header length | JSON header | f64 LE policy params | [f64 LE EMA shadow]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SapoError};
use crate::model::{ModelKind, ModelSpec, PolicyModel};

pub const MAGIC: &[u8; 8] = b"SAPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

const RNG_NOTE: &str = "all sampling is keyed by (run seed, loop position); no RNG state is stored";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub shapes: Vec<(String, Vec<usize>)>,
    pub vocab_size: usize,
    pub param_count: usize,
    pub includes_ema: bool,
    pub rng_note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub ema: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &dyn PolicyModel, ema: Option<&[f64]>) -> Result<Self> {
        let spec = model.spec();
        let params = model.params().to_vec();
        if let Some(e) = ema {
            if e.len() != params.len() {
                return Err(SapoError::Contract(format!(
                    "ema shadow has {} parameters, model has {}",
                    e.len(),
                    params.len()
                )));
            }
        }
        Ok(Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model_kind: spec.kind,
                shapes: spec
                    .param_shapes()
                    .into_iter()
                    .map(|(n, s)| (n.to_string(), s))
                    .collect(),
                vocab_size: spec.vocab_size,
                param_count: params.len(),
                includes_ema: ema.is_some(),
                rng_note: RNG_NOTE.into(),
            },
            params,
            ema: ema.map(<[f64]>::to_vec),
        })
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::from_shapes(self.header.model_kind, &self.header.shapes)
    }

    /// Rebuilds the policy model.
    pub fn model(&self) -> Result<Box<dyn PolicyModel>> {
        self.spec()?.build_with(self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.params.len() * (1 + self.ema.is_some() as usize);
        let mut out = Vec::with_capacity(12 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for x in self.params.iter().chain(self.ema.iter().flatten()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| SapoError::Format {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing SAPOCKPT magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", header.format_version)));
        }
        let spec = ModelSpec::from_shapes(header.model_kind, &header.shapes).map_err(|e| bad(e.to_string()))?;
        if spec.param_count() != header.param_count || spec.vocab_size != header.vocab_size {
            return Err(bad("header counts disagree with shapes".into()));
        }
        let copies = 1 + header.includes_ema as usize;
        let expected = 12 + hlen + 8 * header.param_count * copies;
        if bytes.len() != expected {
            return Err(bad(format!("file is {} bytes, expected {expected}", bytes.len())));
        }
        let floats: Vec<f64> = bytes[12 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (params, ema) = floats.split_at(header.param_count);
        Ok(Self {
            params: params.to_vec(),
            ema: header.includes_ema.then(|| ema.to_vec()),
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| SapoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SapoError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
