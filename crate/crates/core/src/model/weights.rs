//! Learnable arrays and the little-endian weight file.
//!
//! Weight file layout (all little-endian):
//!
//! ```text
//! magic      8 bytes  "RLENSWT\0"
//! version    u32      1
//! n_layers, n_heads, d_model, d_head, d_mlp, vocab, ctx   7 × u32
//! eps, rope_base                                          2 × f32
//! arrays     f32 row-major, in declared order:
//!            embed [vocab × d]
//!            per layer: attn_norm [d], wq [d × d], wk [d × d], wv [d × d],
//!                       wo [d × n_heads·d_head], mlp_norm [d],
//!                       w_gate [d_mlp × d], w_up [d_mlp × d], w_down [d × d_mlp]
//!            final_norm [d]
//!            unembed [vocab × d]
//! ```
//!
//! A TOML manifest with the same header fields and the array list is written
//! next to the binary for inspection.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{gaussian_draw, Real, RealTensor, RngState};

pub const WEIGHT_MAGIC: &[u8; 8] = b"RLENSWT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Which family a weight array belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArrayKind {
    Embed,
    AttnNorm,
    Wq,
    Wk,
    Wv,
    Wo,
    MlpNorm,
    Gate,
    Up,
    Down,
    FinalNorm,
    Unembed,
}

impl ArrayKind {
    pub const ALL: [ArrayKind; 12] = [
        ArrayKind::Embed,
        ArrayKind::AttnNorm,
        ArrayKind::Wq,
        ArrayKind::Wk,
        ArrayKind::Wv,
        ArrayKind::Wo,
        ArrayKind::MlpNorm,
        ArrayKind::Gate,
        ArrayKind::Up,
        ArrayKind::Down,
        ArrayKind::FinalNorm,
        ArrayKind::Unembed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArrayKind::Embed => "embed",
            ArrayKind::AttnNorm => "attn_norm",
            ArrayKind::Wq => "wq",
            ArrayKind::Wk => "wk",
            ArrayKind::Wv => "wv",
            ArrayKind::Wo => "wo",
            ArrayKind::MlpNorm => "mlp_norm",
            ArrayKind::Gate => "w_gate",
            ArrayKind::Up => "w_up",
            ArrayKind::Down => "w_down",
            ArrayKind::FinalNorm => "final_norm",
            ArrayKind::Unembed => "unembed",
        }
    }

    pub fn is_norm_gain(self) -> bool {
        matches!(self, ArrayKind::AttnNorm | ArrayKind::MlpNorm | ArrayKind::FinalNorm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F> {
    pub attn_norm: RealTensor<F>,
    pub wq: RealTensor<F>,
    pub wk: RealTensor<F>,
    pub wv: RealTensor<F>,
    /// Output projection `[d × n_heads·d_head]`; head `h` owns columns `h·d_head..(h+1)·d_head`.
    pub wo: RealTensor<F>,
    pub mlp_norm: RealTensor<F>,
    pub w_gate: RealTensor<F>,
    pub w_up: RealTensor<F>,
    pub w_down: RealTensor<F>,
}

/// Every learnable array of the model. There are no biases anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<F> {
    pub config: ModelConfig,
    pub embed: RealTensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: RealTensor<F>,
    pub unembed: RealTensor<F>,
}

/// Gradients share the exact layout of the weights.
pub type GradientSet<F> = WeightSet<F>;

impl<F: Real> LayerWeights<F> {
    fn arrays(&self) -> [(ArrayKind, &RealTensor<F>); 9] {
        [
            (ArrayKind::AttnNorm, &self.attn_norm),
            (ArrayKind::Wq, &self.wq),
            (ArrayKind::Wk, &self.wk),
            (ArrayKind::Wv, &self.wv),
            (ArrayKind::Wo, &self.wo),
            (ArrayKind::MlpNorm, &self.mlp_norm),
            (ArrayKind::Gate, &self.w_gate),
            (ArrayKind::Up, &self.w_up),
            (ArrayKind::Down, &self.w_down),
        ]
    }

    fn arrays_mut(&mut self) -> [(ArrayKind, &mut RealTensor<F>); 9] {
        [
            (ArrayKind::AttnNorm, &mut self.attn_norm),
            (ArrayKind::Wq, &mut self.wq),
            (ArrayKind::Wk, &mut self.wk),
            (ArrayKind::Wv, &mut self.wv),
            (ArrayKind::Wo, &mut self.wo),
            (ArrayKind::MlpNorm, &mut self.mlp_norm),
            (ArrayKind::Gate, &mut self.w_gate),
            (ArrayKind::Up, &mut self.w_up),
            (ArrayKind::Down, &mut self.w_down),
        ]
    }
}

fn shape_of(config: &ModelConfig, kind: ArrayKind) -> Vec<usize> {
    let d = config.d_model;
    match kind {
        ArrayKind::Embed | ArrayKind::Unembed => vec![config.vocab, d],
        ArrayKind::AttnNorm | ArrayKind::MlpNorm | ArrayKind::FinalNorm => vec![d],
        ArrayKind::Wq | ArrayKind::Wk | ArrayKind::Wv => vec![d, d],
        ArrayKind::Wo => vec![d, config.n_heads * config.d_head],
        ArrayKind::Gate | ArrayKind::Up => vec![config.d_mlp, d],
        ArrayKind::Down => vec![d, config.d_mlp],
    }
}

impl<F: Real> WeightSet<F> {
    /// Builds a weight set where every array is produced by `fill(kind, shape)`.
    pub fn from_fn(
        config: &ModelConfig,
        mut fill: impl FnMut(ArrayKind, &[usize]) -> RealTensor<F>,
    ) -> Result<Self> {
        config.validate()?;
        let mut make = |kind| {
            let shape = shape_of(config, kind);
            let t = fill(kind, &shape);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{} has shape {:?}, want {:?}", kind.name(), t.shape(), shape)));
            }
            Ok(t)
        };
        let embed = make(ArrayKind::Embed)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: make(ArrayKind::AttnNorm)?,
                wq: make(ArrayKind::Wq)?,
                wk: make(ArrayKind::Wk)?,
                wv: make(ArrayKind::Wv)?,
                wo: make(ArrayKind::Wo)?,
                mlp_norm: make(ArrayKind::MlpNorm)?,
                w_gate: make(ArrayKind::Gate)?,
                w_up: make(ArrayKind::Up)?,
                w_down: make(ArrayKind::Down)?,
            });
        }
        let final_norm = make(ArrayKind::FinalNorm)?;
        let unembed = make(ArrayKind::Unembed)?;
        Ok(Self { config: config.clone(), embed, layers, final_norm, unembed })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::from_fn(config, |_, shape| RealTensor::zeros(shape.to_vec()))
    }

    /// Gaussian initialization: projections and embeddings get `std`, norm gains are 1.
    pub fn init(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        let mut rng = RngState::new(seed);
        Self::from_fn(config, |kind, shape| {
            if kind.is_norm_gain() {
                RealTensor::filled(shape.to_vec(), F::one())
            } else {
                let n = shape.iter().product();
                let data = gaussian_draw(&mut rng, n, F::zero(), F::lit(std));
                RealTensor::new(shape.to_vec(), data).expect("finite draws")
            }
        })
    }

    /// All arrays in file order.
    pub fn arrays(&self) -> Vec<(ArrayKind, &RealTensor<F>)> {
        let mut out = vec![(ArrayKind::Embed, &self.embed)];
        for layer in &self.layers {
            out.extend(layer.arrays());
        }
        out.push((ArrayKind::FinalNorm, &self.final_norm));
        out.push((ArrayKind::Unembed, &self.unembed));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(ArrayKind, &mut RealTensor<F>)> {
        let mut out = vec![(ArrayKind::Embed, &mut self.embed)];
        for layer in &mut self.layers {
            out.extend(layer.arrays_mut());
        }
        out.push((ArrayKind::FinalNorm, &mut self.final_norm));
        out.push((ArrayKind::Unembed, &mut self.unembed));
        out
    }

    pub fn cast<G: Real>(&self) -> WeightSet<G> {
        WeightSet {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
        }
    }

    pub fn eps(&self) -> F {
        F::lit(self.config.eps as f64)
    }

    /// Population standard deviation of every token-embedding entry.
    pub fn embedding_std(&self) -> f64 {
        let xs: Vec<f64> = self.embed.data().iter().map(|x| x.as_f64()).collect();
        crate::numerics::mean_std(&xs).1
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, t)| t.data().iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    config: ModelConfig,
    parameters: usize,
    arrays: Vec<ManifestArray>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestArray {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn write_header(out: &mut Vec<u8>, magic: &[u8; 8], config: &ModelConfig) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        config.n_layers,
        config.n_heads,
        config.d_model,
        config.d_head,
        config.d_mlp,
        config.vocab,
        config.ctx,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&config.eps.to_le_bytes());
    out.extend_from_slice(&config.rope_base.to_le_bytes());
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated file: need {n} bytes at offset {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn finished(&self) -> bool {
        self.at == self.bytes.len()
    }
}

pub(crate) fn read_header(r: &mut ByteReader<'_>, magic: &[u8; 8]) -> Result<ModelConfig> {
    if r.take(8)? != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut ints = [0usize; 7];
    for v in &mut ints {
        *v = r.u32()? as usize;
    }
    let config = ModelConfig {
        n_layers: ints[0],
        n_heads: ints[1],
        d_model: ints[2],
        d_head: ints[3],
        d_mlp: ints[4],
        vocab: ints[5],
        ctx: ints[6],
        eps: r.f32()?,
        rope_base: r.f32()?,
    };
    config.validate()?;
    Ok(config)
}

pub(crate) fn push_f32s<F: Real>(out: &mut Vec<u8>, xs: &[F]) {
    for x in xs {
        let v = x.to_f32().unwrap_or(f32::NAN);
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl WeightSet<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.config.param_count());
        write_header(&mut out, WEIGHT_MAGIC, &self.config);
        for (_, t) in self.arrays() {
            push_f32s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let config = read_header(&mut r, WEIGHT_MAGIC)?;
        let mut failure = None;
        let weights = WeightSet::from_fn(&config, |_, shape| {
            let n = shape.iter().product();
            match r.f32s(n).and_then(|data| RealTensor::new(shape.to_vec(), data)) {
                Ok(t) => t,
                Err(e) => {
                    failure.get_or_insert(e);
                    RealTensor::zeros(shape.to_vec())
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        if !r.finished() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(weights)
    }

    /// Writes the binary file and a `.toml` manifest beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        let manifest = Manifest {
            magic: String::from_utf8_lossy(&WEIGHT_MAGIC[..7]).into_owned(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            parameters: self.config.param_count(),
            arrays: self
                .arrays()
                .into_iter()
                .map(|(k, t)| ManifestArray { name: k.name().to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path.with_extension("toml"), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
