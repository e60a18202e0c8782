//! Feature vectors of the shared image/text space and the class vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Normalize `values` to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wrap values that are already unit norm (checked to 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("feature norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Cosine similarity, clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        (self.dot(other) / (self.norm() * other.norm())).clamp(-1.0, 1.0)
    }
}

/// Ordered class names with a prompt template containing one `{name}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    names: Vec<String>,
    prompt_template: String,
}

pub const DEFAULT_TEMPLATE: &str = "photo of {name}";

impl ClassVocabulary {
    pub fn new(names: Vec<String>, prompt_template: impl Into<String>) -> Result<Self> {
        let prompt_template = prompt_template.into();
        if prompt_template.matches("{name}").count() != 1 {
            return Err(Error::Invalid(
                "prompt template must contain exactly one {name} placeholder".into(),
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Invalid(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Invalid(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self {
            names,
            prompt_template,
        })
    }

    /// `class_0 … class_{n-1}` with the default template.
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("class_{i}")).collect(), DEFAULT_TEMPLATE)
            .expect("numbered vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class_id: usize) -> Result<&str> {
        self.names
            .get(class_id)
            .map(String::as_str)
            .ok_or(Error::ClassOutOfRange {
                class_id,
                num_classes: self.names.len(),
            })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn prompt_template(&self) -> &str {
        &self.prompt_template
    }

    pub fn prompt(&self, class_id: usize) -> Result<String> {
        Ok(self.prompt_template.replace("{name}", self.name(class_id)?))
    }

    /// The semantic description used for per-image alignment: `photo of {name}`.
    pub fn description(&self, class_id: usize) -> Result<String> {
        Ok(DEFAULT_TEMPLATE.replace("{name}", self.name(class_id)?))
    }
}
