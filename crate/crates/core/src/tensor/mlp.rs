use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "id",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "id" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }

    fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
        }
    }
}

/// Shape of an [`Mlp`]; serialised into checkpoints as a one-line string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// `(rows, width)` of the timestep embedding table, if time-conditioned.
    pub time_embedding: Option<(usize, usize)>,
}

impl Architecture {
    pub fn classifier(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim: classes,
            activation: Activation::Silu,
            time_embedding: None,
        }
    }

    /// Noise predictor `ε(x, t)` with one embedding row per timestep `0..=num_timesteps`.
    pub fn denoiser(dim: usize, hidden: &[usize], num_timesteps: usize, embed_dim: usize) -> Self {
        Architecture {
            input_dim: dim,
            hidden: hidden.to_vec(),
            output_dim: dim,
            activation: Activation::Silu,
            time_embedding: Some((num_timesteps + 1, embed_dim)),
        }
    }

    pub fn descriptor(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let emb = match self.time_embedding {
            Some((r, w)) => format!("{r}x{w}"),
            None => "none".into(),
        };
        format!(
            "mlp;in={};hidden={};out={};act={};emb={}",
            self.input_dim,
            hidden.join(","),
            self.output_dim,
            self.activation.tag(),
            emb
        )
    }

    pub fn parse(descriptor: &str) -> Result<Self> {
        let bad = || Error::Malformed(format!("architecture descriptor `{descriptor}`"));
        let mut parts = descriptor.split(';');
        if parts.next() != Some("mlp") {
            return Err(bad());
        }
        let mut field = |key: &str| -> Result<String> {
            let p = parts.next().ok_or_else(bad)?;
            p.strip_prefix(key).and_then(|s| s.strip_prefix('=')).map(str::to_owned).ok_or_else(bad)
        };
        let input_dim = field("in")?.parse().map_err(|_| bad())?;
        let hidden_s = field("hidden")?;
        let hidden = if hidden_s.is_empty() {
            vec![]
        } else {
            hidden_s.split(',').map(|h| h.parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let output_dim = field("out")?.parse().map_err(|_| bad())?;
        let activation = Activation::from_tag(&field("act")?).ok_or_else(bad)?;
        let emb = field("emb")?;
        let time_embedding = if emb == "none" {
            None
        } else {
            let (r, w) = emb.split_once('x').ok_or_else(bad)?;
            Some((r.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
        };
        Ok(Architecture {
            input_dim,
            hidden,
            output_dim,
            activation,
            time_embedding,
        })
    }

    /// Parameter tensor shapes in storage order: embedding table first, then
    /// `(weight, bias)` per layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        if let Some((rows, width)) = self.time_embedding {
            shapes.push(vec![rows, width]);
            fan_in += width;
        }
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            shapes.push(vec![fan_in, h]);
            shapes.push(vec![h]);
            fan_in = h;
        }
        shapes
    }
}

/// Small dense network, optionally conditioned on an integer timestep
/// through a learned embedding concatenated to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    params: Vec<Tensor>,
}

impl Mlp {
    /// LeCun-normal weights, zero biases, standard-normal embedding rows.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.output_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::invalid(format!("degenerate architecture {}", arch.descriptor())));
        }
        let shapes = arch.param_shapes();
        let has_emb = arch.time_embedding.is_some();
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if has_emb && i == 0 {
                    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
                } else if shape.len() == 2 {
                    let std = (1.0 / shape[0] as f64).sqrt();
                    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                } else {
                    vec![0.0; n]
                };
                Tensor::from_parts(shape.clone(), data)
            })
            .collect();
        Ok(Mlp { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let expected = arch.param_shapes();
        let found: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != found {
            return Err(Error::ArchitectureMismatch {
                expected: format!("{} {:?}", arch.descriptor(), expected),
                found: format!("{found:?}"),
            });
        }
        Ok(Mlp { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over architecture and raw parameter bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.descriptor().as_bytes());
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind<'a, 't>(&'a self, tape: &'t Tape) -> BoundMlp<'a, 't> {
        let params = self.params.iter().map(|p| tape.param(p.clone())).collect();
        BoundMlp { mlp: self, params }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_constant<'a, 't>(&'a self, tape: &'t Tape) -> BoundMlp<'a, 't> {
        let params = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        BoundMlp { mlp: self, params }
    }

    /// Forward pass on a value-only tape.
    pub fn eval(&self, x: &Tensor, timesteps: Option<&[usize]>) -> Result<Tensor> {
        let tape = Tape::replaying();
        let xv = tape.constant(x.clone());
        let out = self.bind_constant(&tape).forward(xv, timesteps)?;
        Ok((*out.value()).clone())
    }

    /// Predicted class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.eval(x, None)?))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'a, 't> {
    mlp: &'a Mlp,
    params: Vec<Var<'t>>,
}

impl<'a, 't> BoundMlp<'a, 't> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn mlp(&self) -> &'a Mlp {
        self.mlp
    }

    /// `x` is `[n, input_dim]`; `timesteps` (one per row) is required iff
    /// the network is time-conditioned.
    pub fn forward(&self, x: Var<'t>, timesteps: Option<&[usize]>) -> Result<Var<'t>> {
        let arch = &self.mlp.arch;
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != arch.input_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                lhs: shape,
                rhs: vec![arch.input_dim],
            });
        }
        let mut params = self.params.iter().copied();
        let mut h = match (arch.time_embedding, timesteps) {
            (Some(_), Some(ts)) => {
                if ts.len() != shape[0] {
                    return Err(Error::ShapeMismatch {
                        op: "mlp timesteps",
                        lhs: shape,
                        rhs: vec![ts.len()],
                    });
                }
                let table = params.next().expect("embedding parameter");
                x.concat_cols(table.gather_rows(ts)?)?
            }
            (None, None) => x,
            (Some(_), None) => return Err(Error::invalid("time-conditioned network needs timesteps")),
            (None, Some(_)) => return Err(Error::invalid("network is not time-conditioned")),
        };
        let layers = arch.hidden.len() + 1;
        for layer in 0..layers {
            let w = params.next().expect("weight");
            let b = params.next().expect("bias");
            h = h.matmul(w)?.add_row(b)?;
            if layer + 1 < layers {
                h = arch.activation.apply(h)?;
            }
        }
        Ok(h)
    }
}
