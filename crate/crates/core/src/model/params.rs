use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub up: LinearIdx,
    pub down: LinearIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayerIdx {
    pub ln1: NormIdx,
    pub attn: AttnIdx,
    pub ln2: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderLayerIdx {
    pub ln1: NormIdx,
    pub self_attn: AttnIdx,
    pub ln2: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln3: NormIdx,
    pub ffn: FfnIdx,
}

/// Where each named tensor lives in [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub feat_proj: LinearIdx,
    pub encoder: Vec<EncoderLayerIdx>,
    pub enc_norm: NormIdx,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub decoder: Vec<DecoderLayerIdx>,
    pub dec_norm: NormIdx,
    pub out_proj: LinearIdx,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(
                format!("{prefix}.weight"),
                vec![fan_in, fan_out],
                Init::Xavier,
            ),
            b: self.push(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
            fan_in,
            fan_out,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.push(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            up: self.linear(&format!("{prefix}.up"), d, f),
            down: self.linear(&format!("{prefix}.down"), f, d),
        }
    }
}

fn build(config: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = config.embed_dim;
    let f = config.ffn_dim;
    let mut b = Builder { specs: Vec::new() };
    let feat_proj = b.linear("feat_proj", config.feature_dim, d);
    let encoder = (0..config.layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIdx {
                ln1: b.norm(&format!("{p}.ln1"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, f),
            }
        })
        .collect();
    let enc_norm = b.norm("encoder.norm", d);
    let tok_emb = b.push("tok_emb".into(), vec![config.vocab_size, d], Init::Xavier);
    let pos_emb = b.push(
        "pos_emb".into(),
        vec![config.max_positions, d],
        Init::Xavier,
    );
    let decoder = (0..config.layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIdx {
                ln1: b.norm(&format!("{p}.ln1"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln2: b.norm(&format!("{p}.ln2"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln3: b.norm(&format!("{p}.ln3"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, f),
            }
        })
        .collect();
    let dec_norm = b.norm("decoder.norm", d);
    let out_proj = b.linear("out_proj", d, config.vocab_size);
    let layout = Layout {
        feat_proj,
        encoder,
        enc_norm,
        tok_emb,
        pos_emb,
        decoder,
        dec_norm,
        out_proj,
    };
    (layout, b.specs)
}

/// Every trainable tensor of one captioner.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub(crate) config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) tensors: Vec<Tensor<T>>,
}

impl<T> PartialEq for ModelParams<T>
where
    T: PartialEq,
{
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Xavier => {
                        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n)
                            .map(|_| T::lit(rng.random_range(-limit..limit)))
                            .collect()
                    }
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    /// Params with every tensor set to zero except layer-norm gains (one).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build(config);
        let tensors = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let fill = if init == Init::Ones {
                    T::one()
                } else {
                    T::zero()
                };
                Tensor {
                    name,
                    shape,
                    data: vec![fill; n],
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    /// Assembles params from tensors in layout order, checking names and shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build(config);
        if specs.len() != tensors.len() {
            return Err(crate::Error::CheckpointFormat(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if *name != t.name
                || *shape != t.shape
                || t.data.len() != shape.iter().product::<usize>()
            {
                return Err(crate::Error::CheckpointFormat(format!(
                    "tensor {} does not match layout entry {name} {shape:?}",
                    t.name
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::CheckpointFormat(format!(
                    "tensor {} has non-finite entries",
                    t.name
                )));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn data(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.data.len()])
                .collect(),
        }
    }
}

/// Gradient buffers aligned one-to-one with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Gradients<T>, s: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.tensors
            .iter()
            .flatten()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
