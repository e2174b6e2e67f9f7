//! Mean-field Gaussian variational network with reparameterized sampling.
//!
//! Every weight and bias has a mean and a raw parameter `rho`; the standard
//! deviation is `softplus(rho)`. A dense trunk with ReLU units feeds one or
//! more linear output heads.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose, seeded};
use crate::tensor::{DiffArray, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// One output block shared by every task, indexed by global class.
    Single,
    /// One output block per task, indexed by the task's local labels.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Output width of each head.
    pub heads: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, heads: Vec<usize>) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden,
            heads,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "architecture needs a non-empty input and at least one non-empty hidden layer".into(),
            ));
        }
        if self.heads.is_empty() || self.heads.contains(&0) {
            return Err(Error::Config(
                "architecture needs at least one non-empty output head".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of trunk layers followed by one entry per head.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.extend(self.heads.iter().map(|&w| (prev, w)));
        dims
    }

    fn trunk_len(&self) -> usize {
        self.hidden.len()
    }
}

/// One named trainable buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

const SUFFIXES: [&str; 4] = ["w_mean", "w_rho", "b_mean", "b_rho"];

/// Inverse of softplus.
pub fn rho_for_sigma(sigma: f64) -> f64 {
    sigma + (-(-sigma).exp_m1()).ln()
}

/// Means and raw-variance parameters of every layer, stored as blocks in the
/// order `w_mean, w_rho, b_mean, b_rho` per layer, trunk first, then heads.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    arch: Architecture,
    blocks: Vec<ParamBlock>,
}

impl VariationalParams {
    /// He-style normal means, zero biases, every standard deviation `init_sigma`.
    pub fn init(arch: &Architecture, init_sigma: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if init_sigma.is_nan() || init_sigma <= 0.0 {
            return Err(Error::Config(format!("initial sigma must be > 0, got {init_sigma}")));
        }
        let rho = rho_for_sigma(init_sigma);
        let mut rng = seeded(derive_seed(seed, &[purpose::INIT]));
        let mut blocks = Vec::new();
        for (l, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect();
            let name = layer_name(arch, l);
            let shapes = [
                vec![fan_in, fan_out],
                vec![fan_in, fan_out],
                vec![fan_out],
                vec![fan_out],
            ];
            let values = [w, vec![rho; fan_in * fan_out], vec![0.0; fan_out], vec![rho; fan_out]];
            for ((suffix, shape), values) in SUFFIXES.iter().zip(shapes).zip(values) {
                blocks.push(ParamBlock {
                    name: format!("{name}.{suffix}"),
                    shape,
                    values,
                });
            }
        }
        Ok(Self {
            arch: arch.clone(),
            blocks,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    /// Registers every block as a leaf on `tape`; leaves come back in block order.
    pub fn track(&self, tape: &Tape) -> Result<(ModelView, Vec<DiffArray>)> {
        let leaves = self
            .blocks
            .iter()
            .map(|b| tape.leaf(&b.shape, b.values.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((ModelView::from_blocks(&self.arch, &leaves), leaves))
    }

    /// Untracked view; no gradients are recorded through it.
    pub fn constant_view(&self) -> ModelView {
        let arrays: Vec<DiffArray> = self
            .blocks
            .iter()
            .map(|b| DiffArray::constant(&b.shape, b.values.clone()).expect("block shape"))
            .collect();
        ModelView::from_blocks(&self.arch, &arrays)
    }

    /// Flat little-endian f64 stream plus a JSON sidecar describing the blocks.
    pub fn to_bytes(&self) -> (Vec<u8>, String) {
        let mut bytes = Vec::with_capacity(self.num_parameters() * 8);
        let mut entries = Vec::new();
        let mut offset = 0;
        for b in &self.blocks {
            bytes.extend(b.values.iter().flat_map(|v| v.to_le_bytes()));
            entries.push(BlockEntry {
                name: b.name.clone(),
                shape: b.shape.clone(),
                offset,
                len: b.values.len(),
            });
            offset += b.values.len();
        }
        let sidecar = Sidecar {
            format: SIDECAR_FORMAT.into(),
            dtype: "f64-le".into(),
            architecture: self.arch.clone(),
            blocks: entries,
        };
        (
            bytes,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )
    }

    pub fn from_bytes(bytes: &[u8], sidecar: &str) -> Result<Self> {
        let sidecar: Sidecar =
            serde_json::from_str(sidecar).map_err(|e| Error::Data(format!("parameter sidecar: {e}")))?;
        if sidecar.format != SIDECAR_FORMAT || sidecar.dtype != "f64-le" {
            return Err(Error::Data(format!(
                "unsupported parameter format {} / {}",
                sidecar.format, sidecar.dtype
            )));
        }
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Data("parameter stream length is not a multiple of 8".into()));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        // reference layout for validation
        let expected = Self::init(&sidecar.architecture, 1.0, 0)?;
        if expected.blocks.len() != sidecar.blocks.len() {
            return Err(Error::Data("parameter block count does not match architecture".into()));
        }
        let mut blocks = Vec::with_capacity(sidecar.blocks.len());
        for (entry, reference) in sidecar.blocks.iter().zip(&expected.blocks) {
            let end = entry.offset.checked_add(entry.len).filter(|&e| e <= floats.len());
            if entry.name != reference.name || entry.shape != reference.shape || entry.len != reference.values.len() {
                return Err(Error::Data(format!("unexpected block `{}`", entry.name)));
            }
            let end = end.ok_or_else(|| Error::Data(format!("block `{}` overruns the stream", entry.name)))?;
            blocks.push(ParamBlock {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                values: floats[entry.offset..end].to_vec(),
            });
        }
        Ok(Self {
            arch: sidecar.architecture,
            blocks,
        })
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bytes, sidecar) = self.to_bytes();
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        std::fs::write(&bin, bytes).map_err(|e| Error::io(bin, e))?;
        std::fs::write(&json, sidecar).map_err(|e| Error::io(json, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(bin, e))?;
        let sidecar = std::fs::read_to_string(&json).map_err(|e| Error::io(json, e))?;
        Self::from_bytes(&bytes, &sidecar)
    }
}

const SIDECAR_FORMAT: &str = "mcfrcl-params-v1";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    dtype: String,
    architecture: Architecture,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements.
    offset: usize,
    len: usize,
}

fn layer_name(arch: &Architecture, layer: usize) -> String {
    if layer < arch.trunk_len() {
        format!("hidden{layer}")
    } else {
        format!("head{}", layer - arch.trunk_len())
    }
}

/// Frozen copy of the posterior at the end of a task.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    params: VariationalParams,
    view: ModelView,
}

impl ModelSnapshot {
    pub fn new(params: &VariationalParams) -> Self {
        Self {
            params: params.clone(),
            view: params.constant_view(),
        }
    }

    pub fn params(&self) -> &VariationalParams {
        &self.params
    }

    pub fn view(&self) -> &ModelView {
        &self.view
    }
}

#[derive(Clone, Debug)]
struct LayerView {
    w_mean: DiffArray,
    w_sigma: DiffArray,
    b_mean: DiffArray,
    b_sigma: DiffArray,
}

/// Means and standard deviations of every layer, tracked or constant.
#[derive(Clone, Debug)]
pub struct ModelView {
    arch: Architecture,
    layers: Vec<LayerView>,
}

/// One concrete draw of the trunk and a single head: `(weight, bias)` per layer.
#[derive(Clone, Debug)]
pub struct SampledWeights {
    pub layers: Vec<(DiffArray, DiffArray)>,
}

impl ModelView {
    fn from_blocks(arch: &Architecture, blocks: &[DiffArray]) -> Self {
        let layers = blocks
            .chunks(4)
            .map(|c| LayerView {
                w_mean: c[0].clone(),
                w_sigma: c[1].softplus(),
                b_mean: c[2].clone(),
                b_sigma: c[3].softplus(),
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn head_width(&self, head: usize) -> Result<usize> {
        self.arch.heads.get(head).copied().ok_or(Error::UnknownHead {
            head,
            available: self.arch.heads.len(),
        })
    }

    /// Standard deviations of every weight block, in layer order (trunk, heads).
    pub fn weight_sigmas(&self) -> Vec<&DiffArray> {
        self.layers.iter().map(|l| &l.w_sigma).collect()
    }

    /// Reparameterized draw `mean + sigma * eps` of the trunk and `head`.
    pub fn sample_weights(&self, head: usize, seed: u64) -> Result<SampledWeights> {
        self.head_width(head)?;
        let trunk = self.arch.trunk_len();
        let mut rng = seeded(seed);
        let mut draw = |mean: &DiffArray, sigma: &DiffArray| -> Result<DiffArray> {
            let eps: Vec<f64> = (0..mean.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps = DiffArray::constant(mean.shape(), eps)?;
            Ok(mean.add(&sigma.mul(&eps)?)?)
        };
        let mut layers = Vec::with_capacity(trunk + 1);
        for layer in self.layers[..trunk]
            .iter()
            .chain(std::iter::once(&self.layers[trunk + head]))
        {
            let w = draw(&layer.w_mean, &layer.w_sigma)?;
            let b = draw(&layer.b_mean, &layer.b_sigma)?;
            layers.push((w, b));
        }
        Ok(SampledWeights { layers })
    }

    /// Mean network of the trunk and `head` (no sampling).
    pub fn mean_weights(&self, head: usize) -> Result<SampledWeights> {
        self.head_width(head)?;
        let trunk = self.arch.trunk_len();
        let layers = self.layers[..trunk]
            .iter()
            .chain(std::iter::once(&self.layers[trunk + head]))
            .map(|l| (l.w_mean.clone(), l.b_mean.clone()))
            .collect();
        Ok(SampledWeights { layers })
    }

    /// Average of softmax probabilities over `samples` weight draws.
    /// Returns a row-major `(rows, width)` buffer.
    pub fn predict_mc(&self, inputs: &DiffArray, head: usize, samples: usize, seed: u64) -> Result<Vec<f64>> {
        if samples == 0 {
            return Err(Error::Invalid("predict_mc needs at least one sample".into()));
        }
        let width = self.head_width(head)?;
        let rows = inputs.shape().first().copied().unwrap_or(0);
        let mut probs = vec![0.0; rows * width];
        for j in 0..samples {
            let weights = self.sample_weights(head, derive_seed(seed, &[j as u64]))?;
            let logits = forward(&weights, inputs)?;
            for (r, row) in logits.values().chunks(width).enumerate() {
                let lse = crate::tensor::log_sum_exp(row);
                for (p, &z) in probs[r * width..(r + 1) * width].iter_mut().zip(row) {
                    *p += (z - lse).exp();
                }
            }
        }
        let inv = 1.0 / samples as f64;
        probs.iter_mut().for_each(|p| *p *= inv);
        Ok(probs)
    }
}

/// Dense layers with ReLU on every non-output unit; returns `(batch, width)` logits.
pub fn forward(weights: &SampledWeights, inputs: &DiffArray) -> Result<DiffArray> {
    let expected = weights.layers.first().map(|(w, _)| w.shape()[0]).unwrap_or(0);
    match inputs.shape() {
        [_, d] if *d == expected => {}
        other => {
            return Err(Error::Invalid(format!(
                "input shape {other:?} does not match input layer of width {expected}"
            )))
        }
    }
    let last = weights.layers.len() - 1;
    let mut h = inputs.clone();
    for (l, (w, b)) in weights.layers.iter().enumerate() {
        h = h.matmul(w)?.add(b)?;
        if l < last {
            h = h.relu();
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture::new(3, vec![4, 5], vec![2, 3]).unwrap()
    }

    #[test]
    fn softplus_of_zero_rho() {
        let a = Architecture::new(1, vec![1], vec![1]).unwrap();
        let mut p = VariationalParams::init(&a, 0.05, 0).unwrap();
        p.blocks_mut()[1].values[0] = 0.0;
        let view = p.constant_view();
        assert!((view.weight_sigmas()[0].values()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((rho_for_sigma(0.05).exp().ln_1p() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn init_shapes_and_sigma() {
        let p = VariationalParams::init(&arch(), 0.05, 1).unwrap();
        let names: Vec<&str> = p.blocks().iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names[0], "hidden0.w_mean");
        assert_eq!(names[8], "head0.w_mean");
        assert_eq!(names[12], "head1.w_mean");
        assert_eq!(p.blocks()[0].shape, vec![3, 4]);
        assert_eq!(p.blocks()[12].shape, vec![5, 3]);
        for s in p.constant_view().weight_sigmas() {
            assert!(s.values().iter().all(|&v| (v - 0.05).abs() < 1e-12));
        }
    }

    #[test]
    fn invalid_architectures() {
        assert!(Architecture::new(3, vec![], vec![2]).is_err());
        assert!(Architecture::new(3, vec![4], vec![]).is_err());
        assert!(Architecture::new(0, vec![4], vec![2]).is_err());
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut p = VariationalParams::init(&arch(), 1e-3, 0).unwrap();
        for b in p.blocks_mut() {
            b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let w = p.constant_view().mean_weights(1).unwrap();
        let x = DiffArray::constant(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let out = forward(&w, &x).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_output_layer_passes_through() {
        let eye = DiffArray::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = DiffArray::zeros(&[2]);
        let w = SampledWeights {
            layers: vec![(eye, zero)],
        };
        let x = DiffArray::constant(&[1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(forward(&w, &x).unwrap().values(), &[1.0, -1.0]);
    }

    #[test]
    fn unknown_head_and_bad_input() {
        let view = VariationalParams::init(&arch(), 0.05, 0).unwrap().constant_view();
        assert!(matches!(
            view.sample_weights(2, 0),
            Err(Error::UnknownHead { head: 2, available: 2 })
        ));
        let w = view.sample_weights(0, 0).unwrap();
        assert!(forward(&w, &DiffArray::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let view = VariationalParams::init(&arch(), 0.05, 0).unwrap().constant_view();
        let a = view.sample_weights(0, 9).unwrap();
        let b = view.sample_weights(0, 9).unwrap();
        let c = view.sample_weights(0, 10).unwrap();
        assert_eq!(a.layers[0].0.values(), b.layers[0].0.values());
        assert_ne!(a.layers[0].0.values(), c.layers[0].0.values());
    }

    #[test]
    fn predictive_rows_sum_to_one() {
        let view = VariationalParams::init(&arch(), 0.3, 4).unwrap().constant_view();
        let x = DiffArray::constant(&[3, 3], vec![0.1, 0.9, 0.3, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let p = view.predict_mc(&x, 1, 7, 2).unwrap();
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(view.predict_mc(&x, 1, 0, 2).is_err());
    }

    #[test]
    fn serialization_round_trip_and_validation() {
        let p = VariationalParams::init(&arch(), 0.05, 5).unwrap();
        let (bytes, sidecar) = p.to_bytes();
        assert_eq!(bytes.len(), p.num_parameters() * 8);
        assert_eq!(VariationalParams::from_bytes(&bytes, &sidecar).unwrap(), p);
        assert!(VariationalParams::from_bytes(&bytes[..bytes.len() - 8], &sidecar).is_err());
        assert!(VariationalParams::from_bytes(&bytes, "{}").is_err());
    }
}
