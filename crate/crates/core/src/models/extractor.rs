use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::esn::{esn_init, Reservoir};
use super::params::{fan_in_uniform, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::kpi::K;
use crate::ndiff::{Graph, Tensor, Var};
use crate::preprocess::DEFAULT_SEQ_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// Transformer encoder, bridge projection, reservoir, readout.
    TEsn,
    /// Raw inputs drive the reservoir directly; only the readout trains.
    EsnOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub n_seq: usize,
    pub k: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub n_res: usize,
    pub rho: f64,
    pub gamma: f64,
    /// Embedding dimension.
    pub n: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::TEsn,
            n_seq: DEFAULT_SEQ_LEN,
            k: K,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            layers: 2,
            n_res: 64,
            rho: 0.9,
            gamma: 0.5,
            n: 8,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_seq,
            self.k,
            self.d_model,
            self.heads,
            self.d_ff,
            self.n_res,
            self.n,
        ];
        if sizes.contains(&0) {
            return Err(Error::Parameter(format!(
                "extractor sizes must be positive: {self:?}"
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n > self.n_seq * self.k {
            return Err(Error::Parameter(format!(
                "embedding dimension {} exceeds the flattened input width {}",
                self.n,
                self.n_seq * self.k
            )));
        }
        Ok(())
    }

    pub fn readout_width(&self) -> usize {
        self.n_res + self.n_seq * self.k
    }
}

/// Fixed sinusoidal encodings, `n_seq x d_model`.
pub fn positional_encoding(n_seq: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; n_seq * d_model];
    for t in 0..n_seq {
        for i in 0..d_model {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = t as f64 / rate;
            data[t * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[n_seq, d_model], data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EncoderSlots {
    ln1_gamma: usize,
    ln1_beta: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TransformerSlots {
    w_proj: usize,
    b_proj: usize,
    encoders: Vec<EncoderSlots>,
    w_bridge: usize,
    b_bridge: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Slots {
    transformer: Option<TransformerSlots>,
    w_res: usize,
    w_in: usize,
    w_out: usize,
}

/// The feature function `f`: a `n_seq x k` window to an `n`-vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub seed: u64,
    pub params: ParamSet,
    slots: Slots,
    positional: Tensor,
}

impl Extractor {
    pub fn init(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = &config;
        let transformer = match c.kind {
            ExtractorKind::EsnOnly => None,
            ExtractorKind::TEsn => {
                let (d, f) = (c.d_model, c.d_ff);
                let w_proj = p.push("proj.weight", fan_in_uniform(&mut rng, d, c.k), true);
                let b_proj = p.push("proj.bias", Tensor::zeros(&[d]), true);
                let mut encoders = Vec::with_capacity(c.layers);
                for l in 0..c.layers {
                    let mut lin = |p: &mut ParamSet, name: &str, rows: usize, cols: usize| {
                        let w = p.push(
                            format!("enc{l}.{name}.weight"),
                            fan_in_uniform(&mut rng, rows, cols),
                            true,
                        );
                        let b = p.push(format!("enc{l}.{name}.bias"), Tensor::zeros(&[rows]), true);
                        (w, b)
                    };
                    let ln1_gamma =
                        p.push(format!("enc{l}.ln1.gamma"), Tensor::full(&[d], 1.0), true);
                    let ln1_beta = p.push(format!("enc{l}.ln1.beta"), Tensor::zeros(&[d]), true);
                    let (wq, bq) = lin(&mut p, "query", d, d);
                    let (wk, bk) = lin(&mut p, "key", d, d);
                    let (wv, bv) = lin(&mut p, "value", d, d);
                    let (wo, bo) = lin(&mut p, "attn_out", d, d);
                    let ln2_gamma =
                        p.push(format!("enc{l}.ln2.gamma"), Tensor::full(&[d], 1.0), true);
                    let ln2_beta = p.push(format!("enc{l}.ln2.beta"), Tensor::zeros(&[d]), true);
                    let (w1, b1) = lin(&mut p, "ff1", f, d);
                    let (w2, b2) = lin(&mut p, "ff2", d, f);
                    encoders.push(EncoderSlots {
                        ln1_gamma,
                        ln1_beta,
                        wq,
                        bq,
                        wk,
                        bk,
                        wv,
                        bv,
                        wo,
                        bo,
                        ln2_gamma,
                        ln2_beta,
                        w1,
                        b1,
                        w2,
                        b2,
                    });
                }
                let w_bridge = p.push("bridge.weight", fan_in_uniform(&mut rng, d, d), true);
                let b_bridge = p.push("bridge.bias", Tensor::zeros(&[d]), true);
                Some(TransformerSlots {
                    w_proj,
                    b_proj,
                    encoders,
                    w_bridge,
                    b_bridge,
                })
            }
        };
        let reservoir_input = if transformer.is_some() {
            c.d_model
        } else {
            c.k
        };
        let reservoir_seed = seed ^ 0x7265_7365_7276_6f69;
        let res = esn_init(reservoir_seed, c.n_res, reservoir_input, c.rho, c.gamma)?;
        let w_res = p.push("reservoir.w_res", res.w_res, false);
        let w_in = p.push("reservoir.w_in", res.w_in, false);
        let w_out = p.push(
            "readout.weight",
            fan_in_uniform(&mut rng, c.n, c.readout_width()),
            true,
        );
        let positional = positional_encoding(c.n_seq, c.d_model);
        Ok(Self {
            config,
            seed,
            params: p,
            slots: Slots {
                transformer,
                w_res,
                w_in,
                w_out,
            },
            positional,
        })
    }

    pub fn reservoir(&self) -> Reservoir {
        Reservoir {
            w_res: self.params.get(self.slots.w_res).clone(),
            w_in: self.params.get(self.slots.w_in).clone(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    /// Readout weights, `n x (n_res + n_seq * k)`.
    pub fn readout(&self) -> &Tensor {
        self.params.get(self.slots.w_out)
    }

    pub fn readout_mut(&mut self) -> Result<&mut Tensor> {
        self.params.get_mut(self.slots.w_out)
    }

    fn check_input(&self, graph: &Graph, x: Var) -> Result<usize> {
        let s = graph.shape(x);
        let c = &self.config;
        if s.len() != 3 || s[1] != c.n_seq || s[2] != c.k {
            return Err(Error::Dimension(format!(
                "extractor expects batch x {} x {} input, got {s:?}",
                c.n_seq, c.k
            )));
        }
        Ok(s[0])
    }

    /// Transformer stack over `x: batch x n_seq x k`, returning
    /// `(batch * n_seq) x d_model` rows before the bridge projection.
    pub fn encode(&self, graph: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let b = self.check_input(graph, x)?;
        let t = self
            .slots
            .transformer
            .as_ref()
            .ok_or_else(|| Error::Contract("ESN-only extractor has no transformer".into()))?;
        let c = &self.config;
        let (n, d) = (c.n_seq, c.d_model);
        let rows = graph.reshape(x, &[b * n, c.k])?;
        let z = graph.linear(rows, bound.var(t.w_proj), Some(bound.var(t.b_proj)))?;
        let tiled: Vec<f64> = (0..b)
            .flat_map(|_| self.positional.data().iter().copied())
            .collect();
        let pos = graph.constant(Tensor::new(&[b * n, d], tiled)?);
        let mut h = graph.add(z, pos)?;
        for e in &t.encoders {
            let a = graph.layer_norm(h, bound.var(e.ln1_gamma), bound.var(e.ln1_beta), 1)?;
            let attn = self.attention(graph, bound, e, a, b)?;
            h = graph.add(h, attn)?;
            let f = graph.layer_norm(h, bound.var(e.ln2_gamma), bound.var(e.ln2_beta), 1)?;
            let f = graph.linear(f, bound.var(e.w1), Some(bound.var(e.b1)))?;
            let f = graph.relu(f)?;
            let f = graph.linear(f, bound.var(e.w2), Some(bound.var(e.b2)))?;
            h = graph.add(h, f)?;
        }
        Ok(h)
    }

    fn attention(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        e: &EncoderSlots,
        a: Var,
        b: usize,
    ) -> Result<Var> {
        let c = &self.config;
        let (n, d) = (c.n_seq, c.d_model);
        let dk = d / c.heads;
        let mut project = |w: usize, bias: usize| -> Result<Var> {
            let y = graph.linear(a, bound.var(w), Some(bound.var(bias)))?;
            graph.reshape(y, &[b, n, d])
        };
        let q = project(e.wq, e.bq)?;
        let k = project(e.wk, e.bk)?;
        let v = project(e.wv, e.bv)?;
        let mut heads = Vec::with_capacity(c.heads);
        for hd in 0..c.heads {
            let (lo, hi) = (hd * dk, (hd + 1) * dk);
            let qh = graph.slice(q, 2, lo, hi)?;
            let kh = graph.slice(k, 2, lo, hi)?;
            let vh = graph.slice(v, 2, lo, hi)?;
            let scores = graph.matmul_t(qh, kh, false, true)?;
            let scores = graph.scale(scores, 1.0 / (dk as f64).sqrt())?;
            let weights = graph.softmax(scores, 2)?;
            heads.push(graph.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            graph.concat(&heads, 2)?
        };
        let joined = graph.reshape(joined, &[b * n, d])?;
        graph.linear(joined, bound.var(e.wo), Some(bound.var(e.bo)))
    }

    /// Final reservoir state for each sample, `batch x n_res`.
    pub fn reservoir_state(&self, graph: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let b = self.check_input(graph, x)?;
        let c = &self.config;
        let u = match &self.slots.transformer {
            Some(t) => {
                let h = self.encode(graph, bound, x)?;
                graph.linear(h, bound.var(t.w_bridge), Some(bound.var(t.b_bridge)))?
            }
            None => graph.reshape(x, &[b * c.n_seq, c.k])?,
        };
        // Input drive for every step at once, then the recurrence.
        let drive = graph.linear(u, bound.var(self.slots.w_in), None)?;
        let drive = graph.reshape(drive, &[b, c.n_seq, c.n_res])?;
        let mut state: Option<Var> = None;
        for step in 0..c.n_seq {
            let dt = graph.slice(drive, 1, step, step + 1)?;
            let dt = graph.reshape(dt, &[b, c.n_res])?;
            let pre = match state {
                None => dt,
                Some(s) => {
                    let rec = graph.linear(s, bound.var(self.slots.w_res), None)?;
                    graph.add(rec, dt)?
                }
            };
            state = Some(graph.tanh(pre)?);
        }
        Ok(state.expect("n_seq is positive"))
    }

    /// Embeddings `batch x n` of `x: batch x n_seq x k`.
    pub fn forward(&self, graph: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let b = self.check_input(graph, x)?;
        let c = &self.config;
        let s = self.reservoir_state(graph, bound, x)?;
        let flat = graph.reshape(x, &[b, c.n_seq * c.k])?;
        let joined = graph.concat(&[s, flat], 1)?;
        graph.linear(joined, bound.var(self.slots.w_out), None)
    }

    /// Embeddings of `batch` windows stored row-major in `inputs`.
    pub fn embed_batch(&self, inputs: &[f64], batch: usize) -> Result<Tensor> {
        let c = &self.config;
        let mut graph = Graph::new();
        let bound = self.params.bind_constants(&mut graph);
        let x = graph.constant(Tensor::new(&[batch, c.n_seq, c.k], inputs.to_vec())?);
        let y = self.forward(&mut graph, &bound, x)?;
        Ok(graph.value(y).clone())
    }
}

/// Transformer output `n_seq x d_model` for one window.
pub fn transformer_encode(x: &Tensor, extractor: &Extractor) -> Result<Tensor> {
    let c = &extractor.config;
    let mut graph = Graph::new();
    let bound = extractor.params.bind_constants(&mut graph);
    let xv = graph.constant(x.clone().reshaped(&[1, c.n_seq, c.k])?);
    let h = extractor.encode(&mut graph, &bound, xv)?;
    Ok(graph.value(h).clone())
}

/// `f(X)` for one `n_seq x k` window.
pub fn extract_embedding(x: &Tensor, extractor: &Extractor) -> Result<Vec<f64>> {
    let c = &extractor.config;
    if x.shape() != [c.n_seq, c.k] {
        return Err(Error::Dimension(format!(
            "expected a {} x {} window, got {:?}",
            c.n_seq,
            c.k,
            x.shape()
        )));
    }
    Ok(extractor.embed_batch(x.data(), 1)?.into_data())
}
