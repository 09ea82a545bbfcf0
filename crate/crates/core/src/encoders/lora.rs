use crate::error::{Error, Result};
use crate::numerics::{gelu, matmul, Graph, Tensor, Var};

/// Frozen linear map with a trainable low-rank delta:
/// `y = x·(W + s·B·A)ᵀ + b`, with `W: [d_out, d_in]`, `A: [r, d_in]`, `B: [d_out, r]`.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub down: Tensor,
    pub up: Tensor,
    pub scaling: f64,
}

impl LoraLinear {
    /// Zero up-factor, so the map starts equal to the frozen base.
    pub fn new(weight: Tensor, bias: Tensor, down: Tensor, scaling: f64) -> Result<Self> {
        let [d_out, d_in] = dims2(&weight)?;
        let [r, d_in2] = dims2(&down)?;
        if d_in != d_in2 || bias.shape() != [d_out] {
            return Err(Error::Shape(format!(
                "lora: weight {:?}, bias {:?}, down {:?}",
                weight.shape(),
                bias.shape(),
                down.shape()
            )));
        }
        let up = Tensor::zeros([d_out, r]);
        Ok(Self { weight, bias, down, up, scaling })
    }

    pub fn trainable_params(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// Applies the map to rows of `x: [n, d_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let a = g.constant(self.down.clone());
        let u = g.constant(self.up.clone());
        let y = lora_linear(&mut g, xv, w, b, Some(LoraVars { down: a, up: u, scaling: self.scaling }))?;
        Ok(g.value(y).clone())
    }

    /// `W + s·B·A`.
    pub fn merged_weight(&self) -> Result<Tensor> {
        let delta = matmul(&self.up, &self.down)?;
        self.weight.zip_map(&delta, |w, d| w + self.scaling * d)
    }
}

/// Graph handles for one low-rank delta.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub down: Var,
    pub up: Var,
    pub scaling: f64,
}

/// `x·Wᵀ + b (+ s·(x·Aᵀ)·Bᵀ)`.
pub fn lora_linear(g: &mut Graph, x: Var, w: Var, b: Var, lora: Option<LoraVars>) -> Result<Var> {
    let base = g.linear(x, w)?;
    let base = g.add_row(base, b)?;
    let Some(l) = lora else { return Ok(base) };
    let low = g.linear(x, l.down)?;
    let delta = g.linear(low, l.up)?;
    let delta = if l.scaling == 1.0 { delta } else { g.scale(delta, l.scaling) };
    g.add(base, delta)
}

/// Bottleneck `gelu(x·W_down)·W_up` without biases.
#[derive(Clone, Debug)]
pub struct FusionAdapter {
    /// `[D, r]`
    pub down: Tensor,
    /// `[r, D]`
    pub up: Tensor,
}

impl FusionAdapter {
    pub fn new(down: Tensor, up: Tensor) -> Result<Self> {
        let [d, r] = dims2(&down)?;
        if up.shape() != [r, d] {
            return Err(Error::Shape(format!("adapter down {:?} vs up {:?}", down.shape(), up.shape())));
        }
        Ok(Self { down, up })
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        matmul(&gelu(&matmul(x, &self.down)?), &self.up)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
}

pub fn adapter(g: &mut Graph, x: Var, a: AdapterVars) -> Result<Var> {
    let h = g.matmul(x, a.down)?;
    let h = g.gelu(h);
    g.matmul(h, a.up)
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        &[m, n] => Ok([m, n]),
        s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
    }
}
