use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Draws weights from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub struct Initializer<'a, R: Rng> {
    rng: &'a mut R,
}

impl<'a, R: Rng> Initializer<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { rng }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Inserts every tensor into `g` as a leaf, in order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    /// Gradients of `vars` (as returned by [`ParamSet::bind`]); parameters the
    /// loss does not depend on get zeros.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Appends all entries of `other`, prefixing names with `prefix/`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (name, t) in other.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Text dump with a versioned header. See the README for the layout.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from(CHECKPOINT_HEADER);
        out.push('\n');
        out.push_str(&format!("count {}\n", self.len()));
        for (name, t) in self.iter() {
            let mut fields = vec!["tensor".to_string(), name.to_string(), t.shape().len().to_string()];
            fields.extend(t.shape().iter().map(|d| d.to_string()));
            out.push_str(&fields.join(" "));
            out.push('\n');
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad("missing or unsupported header"));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count "))
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad("missing count line"))?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let header = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut fields = header.split_whitespace();
            if fields.next() != Some("tensor") {
                return Err(bad("expected tensor line"));
            }
            let name = fields.next().ok_or_else(|| bad("missing name"))?;
            let rank: usize = fields
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| bad("missing rank"))?;
            let shape: Vec<usize> = fields
                .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                .collect::<Result<_>>()?;
            if shape.len() != rank {
                return Err(bad("rank does not match dimensions"));
            }
            let values: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad("truncated"))?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad("bad value")))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            set.push(name, t);
        }
        Ok(set)
    }
}

pub const CHECKPOINT_HEADER: &str = "smix-checkpoint v1";
