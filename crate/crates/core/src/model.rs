//! System and barrier models, and the JSON spec document they load from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CbfError, Result};
use crate::expr::{parse, Expr, VectorField};

/// Version of the spec-document schema understood by [`load_model`].
pub const SPEC_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaFamily {
    Linear,
    OddCubic,
}

/// Extended class-K function `α(r) = k1·r + k3·r³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSpec {
    pub family: AlphaFamily,
    pub k1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k3: Option<f64>,
}

impl AlphaSpec {
    pub fn linear(k1: f64) -> Self {
        AlphaSpec {
            family: AlphaFamily::Linear,
            k1,
            k3: None,
        }
    }

    pub fn odd_cubic(k1: f64, k3: f64) -> Self {
        AlphaSpec {
            family: AlphaFamily::OddCubic,
            k1,
            k3: Some(k3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 > 0.0) {
            return Err(CbfError::InvalidAlpha(format!("k1 must be positive, got {}", self.k1)));
        }
        match (self.family, self.k3) {
            (AlphaFamily::Linear, Some(k3)) if k3 != 0.0 => Err(CbfError::InvalidAlpha(
                "the linear family takes no cubic coefficient".into(),
            )),
            (AlphaFamily::OddCubic, Some(k3)) if !(k3.is_finite() && k3 >= 0.0) => Err(
                CbfError::InvalidAlpha(format!("k3 must be nonnegative, got {k3}")),
            ),
            _ => Ok(()),
        }
    }

    fn cubic(&self) -> f64 {
        match self.family {
            AlphaFamily::Linear => 0.0,
            AlphaFamily::OddCubic => self.k3.unwrap_or(0.0),
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.k1 * r + self.cubic() * r * r * r
    }

    pub fn derivative(&self, r: f64) -> f64 {
        self.k1 + 3.0 * self.cubic() * r * r
    }

    /// `α'(0)`, exact.
    pub fn slope_at_zero(&self) -> f64 {
        self.k1
    }
}

/// Serialized form of a system + barrier specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub n: usize,
    pub m: usize,
    pub f: Vec<String>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<String>>,
    pub h: String,
    pub alpha: AlphaSpec,
    pub domain_box: Vec<[f64; 2]>,
}

impl SpecDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CbfError::Schema(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Control-affine dynamics `ẋ = f(x) + G(x)u` with cached Jacobians.
#[derive(Debug, Clone)]
pub struct SystemModel {
    drift: VectorField,
    inputs: Vec<VectorField>,
    drift_jacobian: Vec<Vec<Expr>>,
    input_jacobians: Vec<Vec<Vec<Expr>>>,
}

impl SystemModel {
    pub fn new(drift: VectorField, inputs: Vec<VectorField>) -> Result<Self> {
        let n = drift.dim();
        if n == 0 {
            return Err(CbfError::DimensionMismatch("state dimension must be positive".into()));
        }
        if inputs.is_empty() {
            return Err(CbfError::DimensionMismatch("at least one input column is required".into()));
        }
        for (i, g) in inputs.iter().enumerate() {
            if g.dim() != n {
                return Err(CbfError::DimensionMismatch(format!(
                    "input column {} has {} components, expected {n}",
                    i + 1,
                    g.dim()
                )));
            }
        }
        let drift_jacobian = drift.jacobian();
        let input_jacobians = inputs.iter().map(VectorField::jacobian).collect();
        Ok(SystemModel {
            drift,
            inputs,
            drift_jacobian,
            input_jacobians,
        })
    }

    pub fn n(&self) -> usize {
        self.drift.dim()
    }

    pub fn m(&self) -> usize {
        self.inputs.len()
    }

    pub fn drift(&self) -> &VectorField {
        &self.drift
    }

    pub fn inputs(&self) -> &[VectorField] {
        &self.inputs
    }

    pub fn drift_jacobian(&self) -> &[Vec<Expr>] {
        &self.drift_jacobian
    }

    pub fn input_jacobian(&self, i: usize) -> &[Vec<Expr>] {
        &self.input_jacobians[i]
    }
}

/// Barrier function `h`, its class-K function and the sampling box.
#[derive(Debug, Clone)]
pub struct BarrierSpec {
    h: Expr,
    gradient: Vec<Expr>,
    hessian: Vec<Vec<Expr>>,
    alpha: AlphaSpec,
    domain_box: Vec<[f64; 2]>,
}

impl BarrierSpec {
    pub fn new(h: Expr, alpha: AlphaSpec, domain_box: Vec<[f64; 2]>) -> Result<Self> {
        alpha.validate()?;
        let n = domain_box.len();
        if n == 0 {
            return Err(CbfError::DimensionMismatch("domain box has no axes".into()));
        }
        if let Some(i) = h.max_var().filter(|&i| i >= n) {
            return Err(CbfError::DimensionMismatch(format!(
                "h references x{} but the domain box has {n} axes",
                i + 1
            )));
        }
        for (i, [lo, hi]) in domain_box.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(CbfError::DimensionMismatch(format!(
                    "domain box axis {} is not a proper interval: [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        let barrier = BarrierSpec {
            gradient: h.gradient(n),
            hessian: h.hessian(n),
            h,
            alpha,
            domain_box,
        };
        barrier.check_nonempty()?;
        Ok(barrier)
    }

    /// Same barrier with a different class-K function.
    pub fn with_alpha(&self, alpha: AlphaSpec) -> Result<Self> {
        alpha.validate()?;
        Ok(BarrierSpec {
            alpha,
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.domain_box.len()
    }

    pub fn h(&self) -> &Expr {
        &self.h
    }

    pub fn gradient(&self) -> &[Expr] {
        &self.gradient
    }

    pub fn hessian(&self) -> &[Vec<Expr>] {
        &self.hessian
    }

    pub fn alpha(&self) -> &AlphaSpec {
        &self.alpha
    }

    pub fn domain_box(&self) -> &[[f64; 2]] {
        &self.domain_box
    }

    fn check_nonempty(&self) -> Result<()> {
        let n = self.n();
        // ~1e5 grid points at most
        let per_axis = ((100_000f64).powf(1.0 / n as f64).floor() as usize).clamp(2, 65);
        let total = per_axis.saturating_pow(n as u32);
        let mut x = vec![0.0; n];
        for flat in 0..total {
            let mut rest = flat;
            for (axis, [lo, hi]) in self.domain_box.iter().enumerate() {
                let k = rest % per_axis;
                rest /= per_axis;
                x[axis] = lo + (hi - lo) * (k as f64 + 0.5) / per_axis as f64;
            }
            if self.h.eval(&x).is_ok_and(|v| v > 0.0) {
                return Ok(());
            }
        }
        Err(CbfError::EmptySafeSet)
    }
}

fn parse_field(source: &str, n: usize, field: impl FnOnce() -> String) -> Result<Expr> {
    parse(source, n).map_err(|source| CbfError::Parse {
        field: field(),
        source,
    })
}

/// Build the model and barrier from a spec document, caching all
/// derivative expressions.
pub fn load_model(doc: &SpecDocument) -> Result<(SystemModel, BarrierSpec)> {
    let n = doc.n;
    if n == 0 || doc.m == 0 {
        return Err(CbfError::DimensionMismatch("n and m must be positive".into()));
    }
    if doc.f.len() != n {
        return Err(CbfError::DimensionMismatch(format!(
            "f has {} components, expected n = {n}",
            doc.f.len()
        )));
    }
    if doc.g.len() != doc.m {
        return Err(CbfError::DimensionMismatch(format!(
            "G has {} columns, expected m = {}",
            doc.g.len(),
            doc.m
        )));
    }
    if doc.domain_box.len() != n {
        return Err(CbfError::DimensionMismatch(format!(
            "domain_box has {} intervals, expected n = {n}",
            doc.domain_box.len()
        )));
    }
    let drift = doc
        .f
        .iter()
        .enumerate()
        .map(|(i, s)| parse_field(s, n, || format!("f[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = Vec::with_capacity(doc.m);
    for (j, column) in doc.g.iter().enumerate() {
        if column.len() != n {
            return Err(CbfError::DimensionMismatch(format!(
                "G column {} has {} components, expected n = {n}",
                j + 1,
                column.len()
            )));
        }
        let comps = column
            .iter()
            .enumerate()
            .map(|(i, s)| parse_field(s, n, || format!("G[{j}][{i}]")))
            .collect::<Result<Vec<_>>>()?;
        inputs.push(VectorField::new(comps));
    }
    let h = parse_field(&doc.h, n, || "h".to_string())?;
    let model = SystemModel::new(VectorField::new(drift), inputs)?;
    let barrier = BarrierSpec::new(h, doc.alpha, doc.domain_box.clone())?;
    Ok((model, barrier))
}

pub fn load_model_str(text: &str) -> Result<(SystemModel, BarrierSpec)> {
    load_model(&SpecDocument::from_json(text)?)
}

pub(crate) fn check_dims(model: &SystemModel, barrier: &BarrierSpec, x: &[f64]) -> Result<()> {
    if model.n() != barrier.n() {
        return Err(CbfError::DimensionMismatch(format!(
            "system has n = {} but barrier has n = {}",
            model.n(),
            barrier.n()
        )));
    }
    if x.len() != model.n() {
        return Err(CbfError::DimensionMismatch(format!(
            "state has {} coordinates, expected {}",
            x.len(),
            model.n()
        )));
    }
    Ok(())
}
