//! JSON documents for models, heads and prompts. Floats are written with 17
//! significant digits so every value round-trips exactly.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::model::{HmmParams, MemHmmParams};
use crate::{Error, Result};

/// A float serialised as `{:.16e}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sig17(pub f64);

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(S::Error::custom(format!("non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

fn ser_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(&Sig17(*x))?;
    }
    seq.end()
}

fn ser_mat<S: Serializer>(m: &[Vec<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<Sig17>> = m.iter().map(|r| r.iter().map(|&x| Sig17(x)).collect()).collect();
    rows.serialize(s)
}

fn ser_opt_vec<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => ser_vec(v, s),
        None => s.serialize_none(),
    }
}

fn ser_map_f64<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let out: BTreeMap<&String, Sig17> = m.iter().map(|(k, v)| (k, Sig17(*v))).collect();
    out.serialize(s)
}

fn ser_map_vec<S: Serializer>(m: &BTreeMap<String, Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let out: BTreeMap<&String, Vec<Sig17>> = m.iter().map(|(k, v)| (k, v.iter().map(|&x| Sig17(x)).collect())).collect();
    out.serialize(s)
}

fn ser_map_mat<S: Serializer>(m: &BTreeMap<String, Vec<Vec<f64>>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let out: BTreeMap<&String, Vec<Vec<Sig17>>> =
        m.iter().map(|(k, v)| (k, v.iter().map(|r| r.iter().map(|&x| Sig17(x)).collect()).collect())).collect();
    out.serialize(s)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn rows_matrix(rows: &[Vec<f64>], what: &'static str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, |r| r.len());
    if let Some(bad) = rows.iter().find(|r| r.len() != c) {
        return Err(Error::DimensionMismatch { what, expected: c, got: bad.len() });
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

/// On-disk model document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelFile {
    pub kind: String,
    pub n_hidden: usize,
    pub n_vocab: usize,
    #[serde(serialize_with = "ser_mat")]
    pub transition: Vec<Vec<f64>>,
    #[serde(serialize_with = "ser_mat")]
    pub emission: Vec<Vec<f64>>,
    #[serde(serialize_with = "ser_vec")]
    pub start: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub syntax_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_vec")]
    pub mem_prior: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Hmm(HmmParams),
    MemHmm(MemHmmParams),
}

impl From<&HmmParams> for ModelFile {
    fn from(p: &HmmParams) -> Self {
        Self {
            kind: "hmm".into(),
            n_hidden: p.n_hidden,
            n_vocab: p.n_vocab,
            transition: matrix_rows(&p.transition),
            emission: matrix_rows(&p.emission),
            start: p.start.iter().copied().collect(),
            n_cells: None,
            mem_size: None,
            syntax_size: None,
            mem_prior: None,
        }
    }
}

impl From<&MemHmmParams> for ModelFile {
    fn from(p: &MemHmmParams) -> Self {
        Self {
            kind: "mem_hmm".into(),
            n_hidden: p.n_hidden(),
            n_vocab: p.n_vocab,
            transition: matrix_rows(&p.transition),
            emission: matrix_rows(&p.emission),
            start: p.start.iter().copied().collect(),
            n_cells: Some(p.n_cells),
            mem_size: Some(p.mem_size),
            syntax_size: Some(p.syntax_size),
            mem_prior: Some(p.mem_prior.iter().copied().collect()),
        }
    }
}

impl ModelFile {
    pub fn into_model(self) -> Result<Model> {
        let transition = rows_matrix(&self.transition, "transition row")?;
        let emission = rows_matrix(&self.emission, "emission row")?;
        let start = DVector::from_vec(self.start);
        match self.kind.as_str() {
            "hmm" => {
                let p = HmmParams::new(transition, emission, start)?;
                if p.n_hidden != self.n_hidden || p.n_vocab != self.n_vocab {
                    return Err(Error::Format("declared sizes disagree with matrices".into()));
                }
                Ok(Model::Hmm(p))
            }
            "mem_hmm" => {
                let field = |v: Option<usize>, name: &str| v.ok_or_else(|| Error::Format(format!("missing field {name}")));
                let p = MemHmmParams::new(
                    field(self.n_cells, "n_cells")?,
                    field(self.mem_size, "mem_size")?,
                    field(self.syntax_size, "syntax_size")?,
                    transition,
                    emission,
                    start,
                    DVector::from_vec(self.mem_prior.ok_or_else(|| Error::Format("missing field mem_prior".into()))?),
                )?;
                if p.n_hidden() != self.n_hidden || p.n_vocab != self.n_vocab {
                    return Err(Error::Format("declared sizes disagree with matrices".into()));
                }
                Ok(Model::MemHmm(p))
            }
            other => Err(Error::Format(format!("unknown model kind {other:?}"))),
        }
    }
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Model::Hmm(p) => ModelFile::from(p),
            Model::MemHmm(p) => ModelFile::from(p),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelFile>(text)?.into_model()
    }

    /// SHA-256 of the JSON document, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

/// Named vectors and matrices, used for heads, prompts and certificates.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamDoc {
    pub kind: String,
    #[serde(default, serialize_with = "ser_map_f64")]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, serialize_with = "ser_map_vec")]
    pub vectors: BTreeMap<String, Vec<f64>>,
    #[serde(default, serialize_with = "ser_map_mat")]
    pub matrices: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ParamDoc {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), ..Default::default() }
    }

    pub fn scalar(mut self, name: &str, v: f64) -> Self {
        self.scalars.insert(name.into(), v);
        self
    }

    pub fn vector(mut self, name: &str, v: &DVector<f64>) -> Self {
        self.vectors.insert(name.into(), v.iter().copied().collect());
        self
    }

    pub fn matrix(mut self, name: &str, m: &DMatrix<f64>) -> Self {
        self.matrices.insert(name.into(), matrix_rows(m));
        self
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        self.scalars.get(name).copied().ok_or_else(|| Error::Format(format!("missing scalar {name}")))
    }

    pub fn get_vector(&self, name: &str) -> Result<DVector<f64>> {
        self.vectors.get(name).map(|v| DVector::from_vec(v.clone())).ok_or_else(|| Error::Format(format!("missing vector {name}")))
    }

    pub fn get_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        rows_matrix(self.matrices.get(name).ok_or_else(|| Error::Format(format!("missing matrix {name}")))?, "matrix row")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
