//! Multilayer perceptron with manual forward/backward passes.
//!
//! The same architecture hosts both the bias-amplified model and the
//! debiased model. Layers expose a flattened parameter view
//! ([`MlpModel::layer_params`]) so the cosine constraints can treat each
//! layer as a single vector, and a scatter companion that writes back to
//! exactly one layer.

use std::cell::Cell;
use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CFNM";
const CHECKPOINT_VERSION: u32 = 1;

/// Nonlinearity applied between hidden layers. The output layer is always
/// identity (softmax lives in the loss).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine transform: `z = x W^T + b`, weight shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub(crate) weight: Matrix,
    pub(crate) bias: Vec<f64>,
}

impl AffineLayer {
    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Per-layer activations recorded during one forward pass, sufficient to
/// run backward without recomputation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    /// Pre-activation `z` of each layer.
    preacts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Pre-activation of layer `k`.
    pub fn preactivation(&self, k: usize) -> &Matrix {
        &self.preacts[k]
    }
}

/// One (weight-gradient, bias-gradient) pair per layer.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: Matrix,
    pub db: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> Self {
        GradientSet {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    dw: Matrix::zeros(l.out_dim(), l.in_dim()),
                    db: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// Shape congruence with `model`.
    pub fn matches(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.dw.rows() == l.out_dim()
                    && g.dw.cols() == l.in_dim()
                    && g.db.len() == l.out_dim()
            })
    }
}

/// Ordered affine layers with rectifier nonlinearities between them.
#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<AffineLayer>,
    activation: Activation,
    input_dim: usize,
    class_count: usize,
    forward_calls: Cell<u64>,
}

impl MlpModel {
    /// He-normal initialization: weights from N(0, 2/in_dim), biases zero.
    pub fn init(layer_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "need at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "all layer dims must be >= 1, got {layer_dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        for w in layer_dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let std = (2.0 / in_dim as f64).sqrt();
            let weight =
                Matrix::from_vec(out_dim, in_dim, rng.normal_vec(out_dim * in_dim, 0.0, std))?;
            layers.push(AffineLayer {
                weight,
                bias: vec![0.0; out_dim],
            });
        }
        Ok(MlpModel {
            layers,
            activation: Activation::Relu,
            input_dim: layer_dims[0],
            class_count: *layer_dims.last().unwrap(),
            forward_calls: Cell::new(0),
        })
    }

    pub fn from_layers(layers: Vec<AffineLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layer dims do not chain: {} out vs {} in",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        let input_dim = layers[0].in_dim();
        let class_count = layers.last().unwrap().out_dim();
        Ok(MlpModel {
            layers,
            activation,
            input_dim,
            class_count,
            forward_calls: Cell::new(0),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, k: usize) -> Result<&AffineLayer> {
        self.layers.get(k).ok_or(Error::LayerIndex {
            index: k,
            layers: self.layers.len(),
        })
    }

    pub(crate) fn layer_mut(&mut self, k: usize) -> Result<&mut AffineLayer> {
        let layers = self.layers.len();
        self.layers
            .get_mut(k)
            .ok_or(Error::LayerIndex { index: k, layers })
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(AffineLayer::param_count).sum()
    }

    /// Dims as `[input, hidden.., classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(self.layers.iter().map(AffineLayer::out_dim));
        dims
    }

    /// Total forward passes since construction or the last reset.
    pub fn forward_count(&self) -> u64 {
        self.forward_calls.get()
    }

    pub fn reset_forward_count(&self) {
        self.forward_calls.set(0);
    }

    /// Runs the batch `x` (rows are samples) through the network.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                "forward",
                format!("input has {} columns, model expects {}", x.cols(), self.input_dim),
            ));
        }
        self.forward_calls.set(self.forward_calls.get() + 1);
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let wt = layer.weight.transpose();
            let mut z = a.matmul(&wt)?;
            z.add_row_vector(&layer.bias)?;
            inputs.push(a);
            if k < last {
                let mut next = z.clone();
                for v in next.as_mut_slice() {
                    *v = self.activation.apply(*v);
                }
                a = next;
            } else {
                a = z.clone();
            }
            preacts.push(z);
        }
        Ok((a, ForwardCache { inputs, preacts }))
    }

    /// Exact analytic gradients of every parameter given `dlogits`, the
    /// upstream gradient at the output layer.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<GradientSet> {
        let last = self.layers.len() - 1;
        let out = &cache.preacts[last];
        if cache.inputs.len() != self.layers.len()
            || dlogits.rows() != out.rows()
            || dlogits.cols() != out.cols()
            || cache.inputs[0].cols() != self.input_dim
        {
            return Err(Error::shape(
                "backward",
                format!(
                    "dlogits {}x{} vs cached logits {}x{}",
                    dlogits.rows(),
                    dlogits.cols(),
                    out.rows(),
                    out.cols()
                ),
            ));
        }
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut dz = dlogits.clone();
        for k in (0..self.layers.len()).rev() {
            let dw = dz.transpose().matmul(&cache.inputs[k])?;
            let db = dz.col_sums();
            grads.push(LayerGrad { dw, db });
            if k > 0 {
                let da = dz.matmul(&self.layers[k].weight)?;
                let mut next = da;
                let prev_z = &cache.preacts[k - 1];
                for (v, &z) in next.as_mut_slice().iter_mut().zip(prev_z.as_slice()) {
                    *v *= self.activation.derivative(z);
                }
                dz = next;
            }
        }
        grads.reverse();
        Ok(GradientSet { layers: grads })
    }

    /// Flattened copy of layer `k`: weight row-major, then bias when
    /// `include_bias`.
    pub fn layer_params(&self, k: usize, include_bias: bool) -> Result<Vec<f64>> {
        let layer = self.layer(k)?;
        let mut v = Vec::with_capacity(layer.param_count());
        v.extend_from_slice(layer.weight.as_slice());
        if include_bias {
            v.extend_from_slice(&layer.bias);
        }
        Ok(v)
    }

    /// Writes `v` back into layer `k`; no other layer is touched.
    pub fn scatter_layer_params(&mut self, k: usize, include_bias: bool, v: &[f64]) -> Result<()> {
        let layer = self.layer_mut(k)?;
        let w_len = layer.weight.rows() * layer.weight.cols();
        let expected = if include_bias {
            w_len + layer.bias.len()
        } else {
            w_len
        };
        if v.len() != expected {
            return Err(Error::shape(
                "scatter_layer_params",
                format!("{} values for layer expecting {}", v.len(), expected),
            ));
        }
        layer.weight.as_mut_slice().copy_from_slice(&v[..w_len]);
        if include_bias {
            layer.bias.copy_from_slice(&v[w_len..]);
        }
        Ok(())
    }

    /// Bit-pattern hash of layer `k`, for freeze-isolation checks.
    pub fn layer_digest(&self, k: usize) -> Result<u64> {
        let layer = self.layer(k)?;
        let mut h = DefaultHasher::new();
        for x in layer.weight.as_slice() {
            x.to_bits().hash(&mut h);
        }
        for x in &layer.bias {
            x.to_bits().hash(&mut h);
        }
        Ok(h.finish())
    }

    /// Bit-pattern hash of every parameter.
    pub fn params_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for k in 0..self.layers.len() {
            self.layer_digest(k).unwrap().hash(&mut h);
        }
        h.finish()
    }

    /// Writes the checkpoint format: magic `CFNM`, version, layer count,
    /// then per layer in_dim, out_dim, weights row-major, bias.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        for layer in &self.layers {
            w.write_u32::<LittleEndian>(layer.in_dim() as u32)?;
            w.write_u32::<LittleEndian>(layer.out_dim() as u32)?;
            for x in layer.weight.as_slice() {
                w.write_f64::<LittleEndian>(*x)?;
            }
            for x in &layer.bias {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let layer_count = read_u32(&mut r)? as usize;
        if layer_count == 0 {
            return Err(Error::Format("checkpoint has zero layers".into()));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let in_dim = read_u32(&mut r)? as usize;
            let out_dim = read_u32(&mut r)? as usize;
            if in_dim == 0 || out_dim == 0 {
                return Err(Error::Format("zero layer dimension in checkpoint".into()));
            }
            let mut wdata = vec![0.0; in_dim * out_dim];
            for x in &mut wdata {
                *x = read_f64(&mut r)?;
            }
            let mut bias = vec![0.0; out_dim];
            for x in &mut bias {
                *x = read_f64(&mut r)?;
            }
            layers.push(AffineLayer {
                weight: Matrix::from_vec(out_dim, in_dim, wdata)?,
                bias,
            });
        }
        MlpModel::from_layers(layers, Activation::Relu)
            .map_err(|e| Error::Format(format!("inconsistent checkpoint: {e}")))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    r.read_f64::<LittleEndian>()
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        Rng::new(7, 0)
    }

    #[test]
    fn init_shapes_and_zero_bias() {
        let m = MlpModel::init(&[4, 3], &mut rng()).unwrap();
        assert_eq!(m.layer_count(), 1);
        let l = m.layer(0).unwrap();
        assert_eq!((l.out_dim(), l.in_dim()), (3, 4));
        assert!(l.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::init(&[5, 4, 3], &mut rng()).unwrap();
        let b = MlpModel::init(&[5, 4, 3], &mut rng()).unwrap();
        assert_eq!(a.params_digest(), b.params_digest());
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(MlpModel::init(&[4], &mut rng()).is_err());
        assert!(MlpModel::init(&[4, 0, 3], &mut rng()).is_err());
    }

    #[test]
    fn param_count_matches_direct_count() {
        let dims = [588usize, 100, 100, 100, 10];
        let m = MlpModel::init(&dims, &mut rng()).unwrap();
        // Independent count straight from the dims list.
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(m.param_count(), expected);
        assert_eq!(expected, 80_110);
    }

    #[test]
    fn forward_zero_weights_gives_bias() {
        let mut m = MlpModel::init(&[3, 2], &mut rng()).unwrap();
        let w_len = 6;
        let mut params = vec![0.0; w_len + 2];
        params[w_len] = 0.5;
        params[w_len + 1] = -1.5;
        m.scatter_layer_params(0, true, &params).unwrap();
        let x = Matrix::from_rows(&[vec![9.0, -2.0, 3.0], vec![0.0, 1.0, 2.0]]).unwrap();
        let (logits, _) = m.forward(&x).unwrap();
        for i in 0..2 {
            assert_eq!(logits.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn forward_identity_layer() {
        let mut m = MlpModel::init(&[3, 3], &mut rng()).unwrap();
        let mut params = Matrix::identity(3).as_slice().to_vec();
        params.extend_from_slice(&[0.0; 3]);
        m.scatter_layer_params(0, true, &params).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let (logits, _) = m.forward(&x).unwrap();
        assert_eq!(logits.row(0), x.row(0));
    }

    /// Independent straight-line oracle for a 2-layer relu net.
    fn straightline_2layer(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let l0 = m.layer(0).unwrap();
        let l1 = m.layer(1).unwrap();
        let mut h = vec![0.0; l0.out_dim()];
        for (o, hv) in h.iter_mut().enumerate() {
            let mut acc = l0.bias()[o];
            for (i, &xi) in x.iter().enumerate() {
                acc += l0.weight().get(o, i) * xi;
            }
            *hv = acc.max(0.0);
        }
        let mut out = vec![0.0; l1.out_dim()];
        for (o, ov) in out.iter_mut().enumerate() {
            let mut acc = l1.bias()[o];
            for (i, &hi) in h.iter().enumerate() {
                acc += l1.weight().get(o, i) * hi;
            }
            *ov = acc;
        }
        out
    }

    #[test]
    fn forward_matches_straightline_oracle() {
        let mut r = rng();
        let m = MlpModel::init(&[6, 5, 4], &mut r).unwrap();
        let x = Matrix::from_vec(3, 6, r.normal_vec(18, 0.0, 1.0)).unwrap();
        let (logits, _) = m.forward(&x).unwrap();
        for i in 0..3 {
            let expected = straightline_2layer(&m, x.row(i));
            for (a, e) in logits.row(i).iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn forward_is_batch_decomposable() {
        let mut r = rng();
        let m = MlpModel::init(&[4, 6, 3], &mut r).unwrap();
        let x = Matrix::from_vec(2, 4, r.normal_vec(8, 0.0, 1.0)).unwrap();
        let (both, _) = m.forward(&x).unwrap();
        for i in 0..2 {
            let single = Matrix::from_rows(&[x.row(i).to_vec()]).unwrap();
            let (one, _) = m.forward(&single).unwrap();
            for (a, b) in both.row(i).iter().zip(one.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::init(&[4, 3], &mut rng()).unwrap();
        assert!(m.forward(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn backward_zero_dlogits_zero_grads() {
        let mut r = rng();
        let m = MlpModel::init(&[4, 5, 3], &mut r).unwrap();
        let x = Matrix::from_vec(2, 4, r.normal_vec(8, 0.0, 1.0)).unwrap();
        let (logits, cache) = m.forward(&x).unwrap();
        let dlogits = Matrix::zeros(logits.rows(), logits.cols());
        let grads = m.backward(&cache, &dlogits).unwrap();
        for g in &grads.layers {
            assert!(g.dw.as_slice().iter().all(|&v| v == 0.0));
            assert!(g.db.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_single_linear_layer_chain_rule() {
        let mut r = rng();
        let m = MlpModel::init(&[3, 2], &mut r).unwrap();
        let x = Matrix::from_rows(&[vec![1.5, -2.0, 0.5]]).unwrap();
        let (_, cache) = m.forward(&x).unwrap();
        let dlogits = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let grads = m.backward(&cache, &dlogits).unwrap();
        // dW = dlogits^T x for batch 1.
        for o in 0..2 {
            for i in 0..3 {
                let expected = dlogits.get(0, o) * x.get(0, i);
                assert_eq!(grads.layers[0].dw.get(o, i), expected);
            }
        }
        assert_eq!(grads.layers[0].db, vec![2.0, -1.0]);
    }

    #[test]
    fn backward_rejects_mismatched_dlogits() {
        let mut r = rng();
        let m = MlpModel::init(&[4, 3], &mut r).unwrap();
        let x = Matrix::zeros(2, 4);
        let (_, cache) = m.forward(&x).unwrap();
        assert!(m.backward(&cache, &Matrix::zeros(2, 4)).is_err());
        assert!(m.backward(&cache, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn layer_params_gather_and_scatter() {
        let mut m = MlpModel::init(&[2, 2], &mut rng()).unwrap();
        m.scatter_layer_params(0, true, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        assert_eq!(
            m.layer_params(0, true).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        );
        assert_eq!(m.layer_params(0, false).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(m.layer_params(1, true).is_err());
    }

    #[test]
    fn scatter_gather_round_trip_is_identity() {
        let m0 = MlpModel::init(&[5, 4, 3], &mut rng()).unwrap();
        let mut m = m0.clone();
        for k in 0..m.layer_count() {
            let v = m.layer_params(k, true).unwrap();
            m.scatter_layer_params(k, true, &v).unwrap();
        }
        assert_eq!(m.params_digest(), m0.params_digest());
    }

    #[test]
    fn scatter_touches_only_target_layer() {
        let mut m = MlpModel::init(&[5, 4, 4, 3], &mut rng()).unwrap();
        let before: Vec<u64> = (0..m.layer_count())
            .map(|k| m.layer_digest(k).unwrap())
            .collect();
        let mut v = m.layer_params(1, true).unwrap();
        for x in &mut v {
            *x += 1.0;
        }
        m.scatter_layer_params(1, true, &v).unwrap();
        for k in 0..m.layer_count() {
            let now = m.layer_digest(k).unwrap();
            if k == 1 {
                assert_ne!(now, before[k]);
            } else {
                assert_eq!(now, before[k]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfnm");
        let m = MlpModel::init(&[7, 5, 3], &mut rng()).unwrap();
        m.save(&path).unwrap();
        let loaded = MlpModel::load(&path).unwrap();
        assert_eq!(m.params_digest(), loaded.params_digest());
        assert_eq!(m.layer_dims(), loaded.layer_dims());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfnm");
        let m = MlpModel::init(&[4, 3], &mut rng()).unwrap();
        m.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.cfnm");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(MlpModel::load(&bad), Err(Error::Format(_))));

        let trunc = dir.path().join("trunc.cfnm");
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&trunc, &orig[..orig.len() / 2]).unwrap();
        assert!(matches!(MlpModel::load(&trunc), Err(Error::Format(_))));
    }
}
