//! Hyperparameter search spaces.
//!
//! A [`SearchSpace`] is an ordered list of parameters, each continuous (linear
//! or log2 scale) or categorical, optionally conditioned on the value of an
//! earlier categorical parameter. Configurations are encoded into a
//! fixed-length real vector in which every continuous parameter is mapped to
//! `[0, 1]`, every categorical parameter is one-hot, and every conditional
//! parameter carries one extra activity flag. Inactive conditional blocks are
//! all zeros, so the encoded width never depends on the configuration.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SPACE_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub parent: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamKind {
    Continuous { low: f64, high: f64, scale: Scale },
    Categorical { choices: Vec<String> },
}

/// One hyperparameter declaration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParam", into = "RawParam")]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub condition: Option<Condition>,
}

/// File representation of a [`ParamSpec`], flat as in the descriptor format.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParam {
    name: String,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<Scale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<Condition>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Continuous,
    Categorical,
}

impl TryFrom<RawParam> for ParamSpec {
    type Error = String;

    fn try_from(raw: RawParam) -> std::result::Result<Self, String> {
        let kind = match raw.kind {
            RawKind::Continuous => {
                if raw.choices.is_some() {
                    return Err(format!("`{}`: continuous parameter with choices", raw.name));
                }
                let (low, high) = raw
                    .bounds
                    .ok_or_else(|| format!("`{}`: continuous parameter without bounds", raw.name))?;
                ParamKind::Continuous {
                    low,
                    high,
                    scale: raw.scale.unwrap_or(Scale::Linear),
                }
            }
            RawKind::Categorical => {
                if raw.bounds.is_some() || raw.scale.is_some() {
                    return Err(format!("`{}`: categorical parameter with bounds/scale", raw.name));
                }
                ParamKind::Categorical {
                    choices: raw
                        .choices
                        .ok_or_else(|| format!("`{}`: categorical parameter without choices", raw.name))?,
                }
            }
        };
        Ok(ParamSpec {
            name: raw.name,
            kind,
            condition: raw.condition,
        })
    }
}

impl From<ParamSpec> for RawParam {
    fn from(p: ParamSpec) -> Self {
        match p.kind {
            ParamKind::Continuous { low, high, scale } => RawParam {
                name: p.name,
                kind: RawKind::Continuous,
                bounds: Some((low, high)),
                scale: Some(scale),
                choices: None,
                condition: p.condition,
            },
            ParamKind::Categorical { choices } => RawParam {
                name: p.name,
                kind: RawKind::Categorical,
                bounds: None,
                scale: None,
                choices: Some(choices),
                condition: p.condition,
            },
        }
    }
}

impl ParamSpec {
    pub fn continuous(name: &str, low: f64, high: f64, scale: Scale) -> Self {
        ParamSpec {
            name: name.to_string(),
            kind: ParamKind::Continuous { low, high, scale },
            condition: None,
        }
    }

    pub fn categorical<S: AsRef<str>>(name: &str, choices: &[S]) -> Self {
        ParamSpec {
            name: name.to_string(),
            kind: ParamKind::Categorical {
                choices: choices.iter().map(|c| c.as_ref().to_string()).collect(),
            },
            condition: None,
        }
    }

    pub fn when(mut self, parent: &str, value: &str) -> Self {
        self.condition = Some(Condition {
            parent: parent.to_string(),
            value: value.to_string(),
        });
        self
    }

    /// Number of encoded columns this parameter occupies.
    pub fn width(&self) -> usize {
        let base = match &self.kind {
            ParamKind::Continuous { .. } => 1,
            ParamKind::Categorical { choices } => choices.len(),
        };
        base + usize::from(self.condition.is_some())
    }

    /// Map a continuous value onto `[0, 1]` in the parameter's scale.
    fn to_unit(low: f64, high: f64, scale: Scale, v: f64) -> f64 {
        match scale {
            Scale::Linear => (v - low) / (high - low),
            Scale::Log2 => (v.log2() - low.log2()) / (high.log2() - low.log2()),
        }
    }

    fn from_unit(low: f64, high: f64, scale: Scale, u: f64) -> f64 {
        let v = match scale {
            Scale::Linear => low + u * (high - low),
            Scale::Log2 => (low.log2() + u * (high.log2() - low.log2())).exp2(),
        };
        v.clamp(low, high)
    }
}

/// A parameter value: real for continuous parameters, a choice label for
/// categorical ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Choice(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v}"),
            Value::Choice(c) => f.write_str(c),
        }
    }
}

/// One point of a search space. Only active parameters are present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Config(pub BTreeMap<String, Value>);

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_real(mut self, name: &str, v: f64) -> Self {
        self.0.insert(name.to_string(), Value::Real(v));
        self
    }

    pub fn with_choice(mut self, name: &str, c: &str) -> Self {
        self.0.insert(name.to_string(), Value::Choice(c.to_string()));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: &str, v: Value) {
        self.0.insert(name.to_string(), v);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Missing,
    Inactive,
    OutOfRange,
    UnknownChoice,
    WrongType,
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub param: String,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::Missing => write!(f, "{} missing", self.param),
            ViolationKind::Inactive => write!(f, "{} inactive", self.param),
            ViolationKind::Unknown => write!(f, "{} unknown", self.param),
            _ => write!(f, "{} {}", self.param, self.detail),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    format: u32,
    params: Vec<ParamSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    params: Vec<ParamSpec>,
    offsets: Vec<usize>,
    encoded_dim: usize,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self> {
        let mut seen: HashSet<&str> = HashSet::new();
        for (i, p) in params.iter().enumerate() {
            if !seen.insert(&p.name) {
                return Err(Error::Space(format!("duplicate parameter `{}`", p.name)));
            }
            match &p.kind {
                ParamKind::Continuous { low, high, scale } => {
                    if !(low.is_finite() && high.is_finite() && low < high) {
                        return Err(Error::Space(format!("`{}`: need low < high", p.name)));
                    }
                    if *scale == Scale::Log2 && *low <= 0.0 {
                        return Err(Error::Space(format!("`{}`: log2 scale needs low > 0", p.name)));
                    }
                }
                ParamKind::Categorical { choices } => {
                    let distinct: HashSet<&String> = choices.iter().collect();
                    if distinct.len() != choices.len() || choices.len() < 2 {
                        return Err(Error::Space(format!(
                            "`{}`: need at least two distinct choices",
                            p.name
                        )));
                    }
                }
            }
            if let Some(cond) = &p.condition {
                let parent = params[..i].iter().find(|q| q.name == cond.parent).ok_or_else(|| {
                    Error::Space(format!(
                        "`{}`: condition parent `{}` must be declared earlier",
                        p.name, cond.parent
                    ))
                })?;
                if parent.condition.is_some() {
                    return Err(Error::Space(format!(
                        "`{}`: nested conditions are not supported",
                        p.name
                    )));
                }
                match &parent.kind {
                    ParamKind::Categorical { choices } if choices.contains(&cond.value) => {}
                    ParamKind::Categorical { .. } => {
                        return Err(Error::Space(format!(
                            "`{}`: `{}` is not a choice of `{}`",
                            p.name, cond.value, cond.parent
                        )))
                    }
                    ParamKind::Continuous { .. } => {
                        return Err(Error::Space(format!(
                            "`{}`: condition parent `{}` is not categorical",
                            p.name, cond.parent
                        )))
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(params.len());
        let mut dim = 0;
        for p in &params {
            offsets.push(dim);
            dim += p.width();
        }
        Ok(SearchSpace {
            params,
            offsets,
            encoded_dim: dim,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SpaceFile = serde_json::from_str(text)?;
        if file.format != SPACE_FORMAT {
            return Err(Error::Space(format!("unsupported format {}", file.format)));
        }
        Self::new(file.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = SpaceFile {
            format: SPACE_FORMAT,
            params: self.params.clone(),
        };
        serde_json::to_string_pretty(&file).expect("space serializes")
    }

    /// One of the shipped descriptors: `glmnet`, `svm` or `adaboost`.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "glmnet" => include_str!("../data/spaces/glmnet.json"),
            "svm" => include_str!("../data/spaces/svm.json"),
            "adaboost" => include_str!("../data/spaces/adaboost.json"),
            other => return Err(Error::Space(format!("no builtin space `{other}`"))),
        };
        Self::from_json(text)
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn encoded_dim(&self) -> usize {
        self.encoded_dim
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Hex SHA-256 of the canonical descriptor.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(&SpaceFile {
            format: SPACE_FORMAT,
            params: self.params.clone(),
        })
        .expect("space serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn is_active(p: &ParamSpec, config: &Config) -> bool {
        match &p.condition {
            None => true,
            Some(c) => matches!(config.get(&c.parent), Some(Value::Choice(v)) if *v == c.value),
        }
    }

    /// Every invariant violation of `config`; empty when valid.
    pub fn validate(&self, config: &Config) -> Vec<Violation> {
        let mut out = Vec::new();
        let violation = |p: &str, kind, detail: String| Violation {
            param: p.to_string(),
            kind,
            detail,
        };
        for name in config.0.keys() {
            if self.param(name).is_none() {
                out.push(violation(name, ViolationKind::Unknown, String::new()));
            }
        }
        for p in &self.params {
            let active = Self::is_active(p, config);
            match (active, config.get(&p.name)) {
                (true, None) => out.push(violation(&p.name, ViolationKind::Missing, String::new())),
                (false, Some(_)) => out.push(violation(&p.name, ViolationKind::Inactive, String::new())),
                (false, None) => {}
                (true, Some(v)) => match (&p.kind, v) {
                    (ParamKind::Continuous { low, high, .. }, Value::Real(x)) => {
                        if !(x.is_finite() && *x >= *low && *x <= *high) {
                            out.push(violation(
                                &p.name,
                                ViolationKind::OutOfRange,
                                format!("out of [{low}, {high}]"),
                            ));
                        }
                    }
                    (ParamKind::Categorical { choices }, Value::Choice(c)) => {
                        if !choices.contains(c) {
                            out.push(violation(
                                &p.name,
                                ViolationKind::UnknownChoice,
                                format!("has no choice `{c}`"),
                            ));
                        }
                    }
                    (ParamKind::Continuous { .. }, Value::Choice(_)) => out.push(violation(
                        &p.name,
                        ViolationKind::WrongType,
                        "expects a real value".into(),
                    )),
                    (ParamKind::Categorical { .. }, Value::Real(_)) => {
                        out.push(violation(&p.name, ViolationKind::WrongType, "expects a choice".into()))
                    }
                },
            }
        }
        out
    }

    pub fn check(&self, config: &Config) -> Result<()> {
        let v = self.validate(config);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.iter().map(|v| v.to_string()).collect()))
        }
    }

    pub fn encode(&self, config: &Config) -> Result<Vec<f64>> {
        self.check(config)?;
        let mut out = vec![0.0; self.encoded_dim];
        for (p, &off) in self.params.iter().zip(&self.offsets) {
            let Some(v) = config.get(&p.name) else { continue };
            match (&p.kind, v) {
                (ParamKind::Continuous { low, high, scale }, Value::Real(x)) => {
                    out[off] = ParamSpec::to_unit(*low, *high, *scale, *x);
                }
                (ParamKind::Categorical { choices }, Value::Choice(c)) => {
                    let k = choices.iter().position(|x| x == c).expect("validated");
                    out[off + k] = 1.0;
                }
                _ => unreachable!("validated"),
            }
            if p.condition.is_some() {
                out[off + p.width() - 1] = 1.0;
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode). Categoricals decode by argmax,
    /// conditionals by the activity flag; continuous values are clamped.
    pub fn decode(&self, encoded: &[f64]) -> Result<Config> {
        if encoded.len() != self.encoded_dim {
            return Err(Error::Dimension {
                expected: self.encoded_dim,
                got: encoded.len(),
            });
        }
        let mut config = Config::new();
        for (p, &off) in self.params.iter().zip(&self.offsets) {
            if p.condition.is_some() {
                let flag = encoded[off + p.width() - 1];
                if flag < 0.5 || !Self::is_active(p, &config) {
                    continue;
                }
            }
            let v = match &p.kind {
                ParamKind::Continuous { low, high, scale } => {
                    Value::Real(ParamSpec::from_unit(*low, *high, *scale, encoded[off].clamp(0.0, 1.0)))
                }
                ParamKind::Categorical { choices } => {
                    let block = &encoded[off..off + choices.len()];
                    let k = block
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &x)| if x > block[best] { i } else { best });
                    Value::Choice(choices[k].clone())
                }
            };
            config.insert(&p.name, v);
        }
        Ok(config)
    }

    /// Continuous parameters uniform in their own scale, categoricals uniform,
    /// conditionals sampled only when active.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Config {
        let mut config = Config::new();
        for p in &self.params {
            if !Self::is_active(p, &config) {
                continue;
            }
            let v = match &p.kind {
                ParamKind::Continuous { low, high, scale } => {
                    Value::Real(ParamSpec::from_unit(*low, *high, *scale, rng.random::<f64>()))
                }
                ParamKind::Categorical { choices } => {
                    Value::Choice(choices[rng.random_range(0..choices.len())].clone())
                }
            };
            config.insert(&p.name, v);
        }
        config
    }

    /// Latin hypercube design of `n` configurations. Each continuous
    /// parameter gets one point per stratum `[k/n, (k+1)/n)` of its encoded
    /// range, in random stratum order; categoricals are uniform.
    pub fn lhs_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Config> {
        assert!(n >= 1, "lhs_sample needs n >= 1");
        let mut configs = vec![Config::new(); n];
        // Keep offsets off the stratum edges so the encode round trip
        // cannot move a point into a neighbouring stratum.
        const EDGE: f64 = 1e-9;
        for p in &self.params {
            match &p.kind {
                ParamKind::Categorical { choices } => {
                    for c in configs.iter_mut() {
                        if Self::is_active(p, c) {
                            let k = rng.random_range(0..choices.len());
                            c.insert(&p.name, Value::Choice(choices[k].clone()));
                        }
                    }
                }
                ParamKind::Continuous { low, high, scale } => {
                    let mut strata: Vec<usize> = (0..n).collect();
                    strata.shuffle(rng);
                    for (c, k) in configs.iter_mut().zip(strata) {
                        let offset = EDGE + rng.random::<f64>() * (1.0 - 2.0 * EDGE);
                        let u = (k as f64 + offset) / n as f64;
                        if Self::is_active(p, c) {
                            c.insert(&p.name, Value::Real(ParamSpec::from_unit(*low, *high, *scale, u)));
                        }
                    }
                }
            }
        }
        configs
    }

    /// Name of the single continuous parameter, if the space is one-dimensional.
    pub fn single_continuous(&self) -> Option<&ParamSpec> {
        match self.params.as_slice() {
            [p @ ParamSpec {
                kind: ParamKind::Continuous { .. },
                condition: None,
                ..
            }] => Some(p),
            _ => None,
        }
    }

    /// Configuration for encoded coordinate `u` of a one-dimensional space.
    pub fn from_unit_1d(&self, u: f64) -> Option<Config> {
        let p = self.single_continuous()?;
        let ParamKind::Continuous { low, high, scale } = p.kind else {
            return None;
        };
        Some(Config::new().with_real(&p.name, ParamSpec::from_unit(low, high, scale, u)))
    }
}
