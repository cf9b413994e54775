use rand::Rng;

use super::{Graph, Initializer, ParamSet, Var};
use crate::error::{Error, Result};

/// Gated recurrent unit built from graph primitives, so its gradient comes
/// from the generic reverse pass. Gate blocks are laid out `[reset | update |
/// candidate]` along the columns of the fused weight matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Graph handles of the four GRU parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[input_dim, 3*hidden]`
    pub w_input: Var,
    /// `[1, 3*hidden]`
    pub b_input: Var,
    /// `[hidden, 3*hidden]`
    pub w_hidden: Var,
    /// `[1, 3*hidden]`
    pub b_hidden: Var,
}

impl GruCell {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self { input_dim, hidden_dim }
    }

    /// Appends `w_input, b_input, w_hidden, b_hidden` to `params` under `prefix`.
    pub fn init_params<R: Rng>(&self, prefix: &str, params: &mut ParamSet, rng: &mut R) {
        let h3 = 3 * self.hidden_dim;
        let mut init = Initializer::new(rng);
        params.push(
            format!("{prefix}.w_input"),
            init.uniform(&[self.input_dim, h3], self.hidden_dim),
        );
        params.push(format!("{prefix}.b_input"), init.uniform(&[1, h3], self.hidden_dim));
        params.push(
            format!("{prefix}.w_hidden"),
            init.uniform(&[self.hidden_dim, h3], self.hidden_dim),
        );
        params.push(format!("{prefix}.b_hidden"), init.uniform(&[1, h3], self.hidden_dim));
    }

    /// One step for a batch of rows: `x` is `[rows, input_dim]`, `h` is
    /// `[rows, hidden]`.
    ///
    /// ```text
    /// r  = sigmoid(x Wr + br + h Ur + cr)
    /// z  = sigmoid(x Wz + bz + h Uz + cz)
    /// n  = tanh(x Wn + bn + r * (h Un + cn))
    /// h' = n + z * (h - n)
    /// ```
    pub fn forward(&self, g: &mut Graph, w: &GruWeights, x: Var, h: Var) -> Result<Var> {
        let (rows, in_dim) = g.value(x).dims2().ok_or_else(|| shape_err(g, x, h))?;
        let (h_rows, hid) = g.value(h).dims2().ok_or_else(|| shape_err(g, x, h))?;
        if in_dim != self.input_dim || hid != self.hidden_dim || rows != h_rows {
            return Err(shape_err(g, x, h));
        }
        let gx = g.linear(x, w.w_input, w.b_input)?;
        let gh = g.linear(h, w.w_hidden, w.b_hidden)?;
        g.gru_gates(gx, gh, h)
    }
}

fn shape_err(g: &Graph, x: Var, h: Var) -> Error {
    Error::shape("gru_cell", &[g.shape(x), g.shape(h)])
}
