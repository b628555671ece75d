use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{fan_in_uniform, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::ndiff::{Graph, Tensor, Var};

/// Widths of a fully connected network: input, hidden layers, output.
/// Hidden layers use relu; the last layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input: usize, layers: &[usize]) -> Self {
        Self {
            input,
            layers: layers.to_vec(),
        }
    }

    /// `(16, 32, 1)` scalar regressor.
    pub fn predictor(input: usize) -> Self {
        Self::new(input, &[16, 32, 1])
    }

    /// `(16, 32, n)` network for the target side of the H-score.
    pub fn target_network(input: usize, n: usize) -> Self {
        Self::new(input, &[16, 32, n])
    }

    /// `(16, 32, 2)` autoencoder decoder.
    pub fn decoder(input: usize) -> Self {
        Self::new(input, &[16, 32, 2])
    }

    pub fn output(&self) -> usize {
        self.layers.last().copied().unwrap_or(self.input)
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.layers.is_empty() || self.layers.contains(&0) {
            return Err(Error::Parameter(format!("invalid MLP widths {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_in = spec.input;
        for (i, &width) in spec.layers.iter().enumerate() {
            params.push(
                format!("layer{i}.weight"),
                fan_in_uniform(&mut rng, width, fan_in),
                true,
            );
            params.push(format!("layer{i}.bias"), Tensor::zeros(&[width]), true);
            fan_in = width;
        }
        Ok(Self { spec, params })
    }

    /// Builds an MLP from explicit `(weight, bias)` pairs.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Parameter("MLP needs at least one layer".into()))?;
        let input = first.0.shape().get(1).copied().unwrap_or(0);
        let mut spec = MlpSpec::new(input, &[]);
        let mut params = ParamSet::new();
        let mut fan_in = input;
        for (i, (w, b)) in layers.into_iter().enumerate() {
            let s = w.shape().to_vec();
            if s.len() != 2 || s[1] != fan_in || b.shape() != [s[0]] {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {s:?} and bias {:?} do not chain from width {fan_in}",
                    b.shape()
                )));
            }
            spec.layers.push(s[0]);
            params.push(format!("layer{i}.weight"), w, true);
            params.push(format!("layer{i}.bias"), b, true);
            fan_in = s[0];
        }
        Ok(Self { spec, params })
    }

    /// `x: batch x input` to `batch x output` on `graph`.
    pub fn forward(&self, graph: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let s = graph.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.spec.input {
            return Err(Error::Dimension(format!(
                "mlp: input {s:?} does not match width {}",
                self.spec.input
            )));
        }
        let mut h = x;
        let last = self.spec.layers.len() - 1;
        for i in 0..=last {
            h = graph.linear(h, bound.var(2 * i), Some(bound.var(2 * i + 1)))?;
            if i < last {
                h = graph.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass over a row-major `batch x input` buffer.
    pub fn predict(&self, inputs: &[f64], batch: usize) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bound = self.params.bind_constants(&mut graph);
        let x = graph.constant(Tensor::new(&[batch, self.spec.input], inputs.to_vec())?);
        let y = self.forward(&mut graph, &bound, x)?;
        Ok(graph.value(y).clone())
    }
}

/// Single-vector forward pass.
pub fn mlp_forward(v: &[f64], mlp: &Mlp) -> Result<Vec<f64>> {
    Ok(mlp.predict(v, 1)?.into_data())
}
