use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// A named weight tensor and whether the optimizer may update it.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Self {
            name: name.into(),
            value,
            trainable,
        }
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.leaf(self.value.clone(), self.trainable)
    }
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
        }
    }
}

/// Low-rank update `(alpha / rank) · A · B` added to a frozen linear map.
///
/// Weights are stored input-major (`x · W`), so `down` is `in × r` and `up`
/// is `r × out`. `up` starts at zero, which makes the adapted layer equal to
/// the base layer until the first update.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub down: Param,
    pub up: Param,
}

impl LoraAdapter {
    pub fn new<R: Rng>(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        cfg: LoraConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            rank: cfg.rank,
            alpha: cfg.alpha,
            down: Param::new(
                format!("{prefix}.lora_down"),
                uniform(rng, &[d_in, cfg.rank], bound),
                true,
            ),
            up: Param::new(
                format!("{prefix}.lora_up"),
                Tensor::zeros(&[cfg.rank, d_out]),
                true,
            ),
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `scaling · down · up`, the dense weight delta.
    pub fn delta(&self) -> Result<Tensor> {
        let mut d = crate::numcore::matmul(&self.down.value, &self.up.value)?;
        let s = self.scaling();
        d.data_mut().iter_mut().for_each(|x| *x *= s);
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub lora: Option<LoraAdapter>,
}

pub(crate) struct BoundLinear<'t> {
    weight: Var<'t>,
    bias: Var<'t>,
    lora: Option<(Var<'t>, Var<'t>, f64)>,
}

impl Linear {
    pub fn new<R: Rng>(prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                uniform(rng, &[d_in, d_out], bound),
                true,
            ),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[d_out]), true),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight, &self.bias];
        if let Some(l) = &self.lora {
            v.push(&l.down);
            v.push(&l.up);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some(l) = &mut self.lora {
            v.push(&mut l.down);
            v.push(&mut l.up);
        }
        v
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape) -> BoundLinear<'t> {
        BoundLinear {
            weight: self.weight.bind(tape),
            bias: self.bias.bind(tape),
            lora: self
                .lora
                .as_ref()
                .map(|l| (l.down.bind(tape), l.up.bind(tape), l.scaling())),
        }
    }

    /// Folds the adapter into the base weight. Returns false when there was none.
    pub fn merge(&mut self) -> Result<bool> {
        let Some(l) = self.lora.take() else {
            return Ok(false);
        };
        let delta = l.delta()?;
        for (w, d) in self.weight.value.data_mut().iter_mut().zip(delta.data()) {
            *w += d;
        }
        Ok(true)
    }
}

impl<'t> BoundLinear<'t> {
    pub(crate) fn vars(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.weight, self.bias];
        if let Some((a, b, _)) = self.lora {
            v.push(a);
            v.push(b);
        }
        v
    }

    pub(crate) fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut y = x.matmul(self.weight)?;
        if let Some((down, up, s)) = self.lora {
            y = y.add(x.matmul(down)?.matmul(up)?.scale(s)?)?;
        }
        y.add_row_bias(self.bias)
    }
}

#[cfg(test)]
impl<'t> BoundLinear<'t> {
    pub(crate) fn with_weight(l: &Linear, tape: &'t Tape, w: Var<'t>) -> Self {
        let mut b = l.bind(tape);
        b.weight = w;
        b
    }
}
