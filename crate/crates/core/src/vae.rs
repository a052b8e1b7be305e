//! Convolutional variational autoencoder over wafer maps. The posterior mean
//! is the per-image global feature vector fused into the classifier.
//!
//! Encoder: three stride-2 convolutions → flatten → linear mean/logvar heads.
//! Decoder mirrors it with nearest-neighbour upsampling plus convolutions and
//! a center crop back to the input size, producing per-die 3-state logits.

use crate::adam::AdamState;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    /// Square input size (height == width).
    pub input_size: usize,
    pub latent_dim: usize,
    pub channels: [usize; 3],
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { input_size: 27, latent_dim: 16, channels: [8, 16, 32] }
    }
}

#[derive(Clone, Debug)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig { epochs: 30, batch_size: 32, lr: 0.002, kl_weight: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    pub sample: Vec<f64>,
}

/// `sample = mean + exp(logvar / 2) ⊙ epsilon`.
pub fn reparameterize(mean: &[f64], logvar: &[f64], epsilon: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != logvar.len() || mean.len() != epsilon.len() {
        return Err(Error::invalid(format!(
            "reparameterize length mismatch: mean {}, logvar {}, epsilon {}",
            mean.len(),
            logvar.len(),
            epsilon.len()
        )));
    }
    Ok(mean
        .iter()
        .zip(logvar)
        .zip(epsilon)
        .map(|((m, l), e)| m + (l / 2.0).exp() * e)
        .collect())
}

/// Stride-2 downsampling kernel/padding for the given input size; output is
/// always ceil(h / 2) and divides exactly.
fn downsample_spec(h: usize) -> (usize, usize) {
    if h % 2 == 1 {
        (3, 1)
    } else {
        (4, 1)
    }
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub cfg: VaeConfig,
    /// (path, tensor) in fixed construction order.
    params: Vec<(String, Tensor)>,
    /// Per-encoder-layer (kernel, padding) and spatial sizes after each layer.
    enc_specs: [(usize, usize); 3],
    enc_sizes: [usize; 3],
}

struct VaeVars {
    vars: Vec<Var>,
}

impl VaeVars {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

// Parameter order within `params`.
const ENC1_K: usize = 0;
const ENC1_B: usize = 1;
const ENC2_K: usize = 2;
const ENC2_B: usize = 3;
const ENC3_K: usize = 4;
const ENC3_B: usize = 5;
const MEAN_W: usize = 6;
const MEAN_B: usize = 7;
const LOGVAR_W: usize = 8;
const LOGVAR_B: usize = 9;
const DEC_W: usize = 10;
const DEC_B: usize = 11;
const DEC1_K: usize = 12;
const DEC1_B: usize = 13;
const DEC2_K: usize = 14;
const DEC2_B: usize = 15;
const DEC3_K: usize = 16;
const DEC3_B: usize = 17;

fn he_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("init shape is valid")
}

impl VaeModel {
    pub fn new(cfg: VaeConfig, rng_seed: u64) -> Result<Self> {
        if cfg.input_size < 8 {
            return Err(Error::invalid("vae input_size must be at least 8"));
        }
        if cfg.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        let [c1, c2, c3] = cfg.channels;
        let mut h = cfg.input_size;
        let mut enc_specs = [(0, 0); 3];
        let mut enc_sizes = [0; 3];
        for i in 0..3 {
            enc_specs[i] = downsample_spec(h);
            h = h.div_ceil(2);
            enc_sizes[i] = h;
        }
        let h3 = enc_sizes[2];
        let flat = c3 * h3 * h3;
        let d = cfg.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut params = Vec::new();
        let push = |params: &mut Vec<(String, Tensor)>, name: &str, t: Tensor| {
            params.push((name.to_string(), t));
        };
        let (k1, _) = enc_specs[0];
        let (k2, _) = enc_specs[1];
        let (k3, _) = enc_specs[2];
        push(&mut params, "enc1/k", he_init(&mut rng, vec![c1, 3, k1, k1], 3 * k1 * k1));
        push(&mut params, "enc1/b", Tensor::zeros(vec![c1]));
        push(&mut params, "enc2/k", he_init(&mut rng, vec![c2, c1, k2, k2], c1 * k2 * k2));
        push(&mut params, "enc2/b", Tensor::zeros(vec![c2]));
        push(&mut params, "enc3/k", he_init(&mut rng, vec![c3, c2, k3, k3], c2 * k3 * k3));
        push(&mut params, "enc3/b", Tensor::zeros(vec![c3]));
        push(&mut params, "mean/w", he_init(&mut rng, vec![flat, d], flat));
        push(&mut params, "mean/b", Tensor::zeros(vec![d]));
        push(&mut params, "logvar/w", he_init(&mut rng, vec![flat, d], flat));
        push(&mut params, "logvar/b", Tensor::zeros(vec![d]));
        push(&mut params, "dec/w", he_init(&mut rng, vec![d, flat], d));
        push(&mut params, "dec/b", Tensor::zeros(vec![flat]));
        push(&mut params, "dec1/k", he_init(&mut rng, vec![c2, c3, 3, 3], c3 * 9));
        push(&mut params, "dec1/b", Tensor::zeros(vec![c2]));
        push(&mut params, "dec2/k", he_init(&mut rng, vec![c1, c2, 3, 3], c2 * 9));
        push(&mut params, "dec2/b", Tensor::zeros(vec![c1]));
        push(&mut params, "dec3/k", he_init(&mut rng, vec![3, c1, 3, 3], c1 * 9));
        push(&mut params, "dec3/b", Tensor::zeros(vec![3]));
        Ok(VaeModel { cfg, params, enc_specs, enc_sizes })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter tensors in construction order.
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Mutable parameter access for external optimizers and gradient
    /// verification.
    pub fn params_mut(&mut self) -> &mut Vec<(String, Tensor)> {
        &mut self.params
    }

    /// Batch ELBO (reconstruction + `kl_weight`·KL) and the gradient of every
    /// parameter, with fixed reparameterization noise; the model is not
    /// updated. `eps` must hold `N * latent_dim` values.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        eps: &[f64],
        kl_weight: f64,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let n = self.check_input(x)?;
        let hw = self.cfg.input_size;
        if eps.len() != n * self.cfg.latent_dim {
            return Err(Error::invalid("loss_and_grads: eps must hold N * latent_dim values"));
        }
        let cells = hw * hw;
        let labels: Vec<usize> = (0..n * cells)
            .map(|i| {
                let (img, cell) = (i / cells, i % cells);
                let base = img * 3 * cells + cell;
                (0..3)
                    .max_by(|&a, &b| {
                        x.data()[base + a * cells].partial_cmp(&x.data()[base + b * cells]).unwrap()
                    })
                    .unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let v = self.bind(&mut g, true);
        let xv = g.leaf(x.reshaped(vec![n, 3, hw, hw])?);
        let (mean, logvar) = self.encode_graph(&mut g, xv, &v)?;
        let z = g.reparameterize(mean, logvar, eps)?;
        let logits = self.decode_graph(&mut g, z, &v)?;
        let recon = g.cross_entropy_spatial(logits, &labels)?;
        let kl = g.kl_unit_gaussian(mean, logvar)?;
        let kl_term = g.scale(kl, kl_weight)?;
        let loss = g.add(recon, kl_term)?;
        g.backward(loss)?;
        let grads = v
            .vars
            .iter()
            .map(|&var| g.grad(var).expect("param gradient").to_vec())
            .collect();
        Ok((g.value(loss).item(), grads))
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> VaeVars {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.leaf(t.clone()) })
            .collect();
        VaeVars { vars }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        let hw = self.cfg.input_size;
        match s {
            [3, h, w] if *h == hw && *w == hw => Ok(1),
            [n, 3, h, w] if *h == hw && *w == hw => Ok(*n),
            _ => Err(Error::invalid(format!(
                "vae expects [3,{hw},{hw}] or [N,3,{hw},{hw}], got {:?}",
                s
            ))),
        }
    }

    fn encode_graph(&self, g: &mut Graph, x: Var, v: &VaeVars) -> Result<(Var, Var)> {
        let n = g.shape(x)[0];
        let [_, _, c3] = self.cfg.channels;
        let mut h = x;
        for (i, (k_idx, b_idx)) in
            [(ENC1_K, ENC1_B), (ENC2_K, ENC2_B), (ENC3_K, ENC3_B)].into_iter().enumerate()
        {
            let (_, pad) = self.enc_specs[i];
            h = g.conv2d(h, v.get(k_idx), 2, pad)?;
            h = g.channel_bias(h, v.get(b_idx))?;
            h = g.relu(h)?;
        }
        let h3 = self.enc_sizes[2];
        let flat = g.reshape(h, vec![n, c3 * h3 * h3])?;
        let mean = g.linear(flat, v.get(MEAN_W), v.get(MEAN_B))?;
        let logvar = g.linear(flat, v.get(LOGVAR_W), v.get(LOGVAR_B))?;
        Ok((mean, logvar))
    }

    fn decode_graph(&self, g: &mut Graph, z: Var, v: &VaeVars) -> Result<Var> {
        let n = g.shape(z)[0];
        let [_, _, c3] = self.cfg.channels;
        let h3 = self.enc_sizes[2];
        let mut h = g.linear(z, v.get(DEC_W), v.get(DEC_B))?;
        h = g.relu(h)?;
        h = g.reshape(h, vec![n, c3, h3, h3])?;
        for (k_idx, b_idx, last) in
            [(DEC1_K, DEC1_B, false), (DEC2_K, DEC2_B, false), (DEC3_K, DEC3_B, true)]
        {
            h = g.upsample2x(h)?;
            h = g.conv2d(h, v.get(k_idx), 1, 1)?;
            h = g.channel_bias(h, v.get(b_idx))?;
            if !last {
                h = g.relu(h)?;
            }
        }
        g.crop_center(h, self.cfg.input_size, self.cfg.input_size)
    }

    /// Deterministic mean/logvar plus a sample drawn with the provided noise.
    pub fn encode(&self, x: &Tensor, epsilon: &[f64]) -> Result<LatentCode> {
        let n = self.check_input(x)?;
        if n != 1 {
            return Err(Error::invalid("encode takes a single image; use encode_batch"));
        }
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let hw = self.cfg.input_size;
        let xv = g.leaf(x.reshaped(vec![1, 3, hw, hw])?);
        let (mean, logvar) = self.encode_graph(&mut g, xv, &v)?;
        let mean = g.value(mean).data().to_vec();
        let logvar = g.value(logvar).data().to_vec();
        let sample = reparameterize(&mean, &logvar, epsilon)?;
        Ok(LatentCode { mean, logvar, sample })
    }

    /// Posterior means for a batch `[N,3,H,W]`, row per image.
    pub fn encode_means(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = self.check_input(x)?;
        let hw = self.cfg.input_size;
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let xv = g.leaf(x.reshaped(vec![n, 3, hw, hw])?);
        let (mean, _) = self.encode_graph(&mut g, xv, &v)?;
        let d = self.cfg.latent_dim;
        Ok(g.value(mean).data().chunks(d).map(|c| c.to_vec()).collect())
    }

    /// The per-image latent feature: the posterior mean, no sampling.
    pub fn extract_latent(&self, x: &Tensor) -> Result<Vec<f64>> {
        let eps = vec![0.0; self.cfg.latent_dim];
        Ok(self.encode(x, &eps)?.mean)
    }

    /// Per-die 3-state logits for a latent vector.
    pub fn decode(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::invalid(format!(
                "decode expects a latent of length {}, got {}",
                self.cfg.latent_dim,
                z.len()
            )));
        }
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let zv = g.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let logits = self.decode_graph(&mut g, zv, &v)?;
        let hw = self.cfg.input_size;
        g.value(logits).reshaped(vec![3, hw, hw])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert("model".into(), serde_json::json!("vae"));
        ckpt.meta.insert("latent_dim".into(), serde_json::json!(self.cfg.latent_dim));
        ckpt.meta.insert("input_size".into(), serde_json::json!(self.cfg.input_size));
        ckpt.meta.insert("channels".into(), serde_json::json!(self.cfg.channels));
        for (name, t) in &self.params {
            ckpt.insert(name, t);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let latent_dim = ckpt.meta_u64("latent_dim")? as usize;
        let input_size = ckpt.meta_u64("input_size")? as usize;
        let channels: [usize; 3] = ckpt
            .meta
            .get("channels")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::Checkpoint("missing channels field".into()))?;
        let cfg = VaeConfig { input_size, latent_dim, channels };
        let mut model = VaeModel::new(cfg, 0)?;
        for (name, t) in &mut model.params {
            *t = ckpt.tensor(name)?;
        }
        Ok(model)
    }
}

/// Summed per-cell categorical cross-entropy plus weighted KL against the
/// unit Gaussian: `KL = ½ Σ_d (mean² + exp(logvar) − 1 − logvar)`.
pub fn elbo_loss(
    x: &Tensor,
    logits: &Tensor,
    mean: &[f64],
    logvar: &[f64],
    kl_weight: f64,
) -> Result<f64> {
    if x.shape() != logits.shape() {
        return Err(Error::invalid(format!(
            "elbo_loss: x shape {:?} vs logits {:?}",
            x.shape(),
            logits.shape()
        )));
    }
    if mean.len() != logvar.len() {
        return Err(Error::invalid("elbo_loss: mean/logvar length mismatch"));
    }
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("elbo_loss expects [3,H,W]"));
    }
    let hw = s[1] * s[2];
    let mut recon = 0.0;
    for cell in 0..hw {
        let target = (0..3)
            .max_by(|&a, &b| {
                x.data()[a * hw + cell].partial_cmp(&x.data()[b * hw + cell]).unwrap()
            })
            .unwrap();
        let row: Vec<f64> = (0..3).map(|k| logits.data()[k * hw + cell]).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        recon += logsum - row[target];
    }
    let kl: f64 = mean
        .iter()
        .zip(logvar)
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum();
    Ok(recon + kl_weight * kl)
}

#[derive(Clone, Debug)]
pub struct VaeHistory {
    /// Mean per-image ELBO loss per epoch.
    pub loss: Vec<f64>,
    /// Mean per-image KL component per epoch.
    pub kl: Vec<f64>,
}

/// Trains a fresh VAE on the given maps; deterministic per config and seed.
pub fn pretrain_vae(
    images: &[Tensor],
    cfg: &VaeConfig,
    train: &VaeTrainConfig,
) -> Result<(VaeModel, VaeHistory)> {
    if images.is_empty() {
        return Err(Error::invalid("pretrain_vae: empty dataset"));
    }
    let mut model = VaeModel::new(cfg.clone(), train.seed)?;
    let mut adam = AdamState::new(train.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(0x7ae0));
    let hw = cfg.input_size;
    let d = cfg.latent_dim;
    let n = images.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = VaeHistory { loss: Vec::new(), kl: Vec::new() };
    // Per-cell labels are fixed per image.
    let labels: Vec<Vec<usize>> = images
        .iter()
        .map(|img| {
            let cells = hw * hw;
            (0..cells)
                .map(|cell| {
                    (0..3)
                        .max_by(|&a, &b| {
                            img.data()[a * cells + cell]
                                .partial_cmp(&img.data()[b * cells + cell])
                                .unwrap()
                        })
                        .unwrap()
                })
                .collect()
        })
        .collect();
    for _epoch in 0..train.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_kl = 0.0;
        for batch in order.chunks(train.batch_size) {
            let bn = batch.len();
            let mut xdata = Vec::with_capacity(bn * 3 * hw * hw);
            let mut blabels = Vec::with_capacity(bn * hw * hw);
            for &i in batch {
                model.check_input(&images[i])?;
                xdata.extend_from_slice(images[i].data());
                blabels.extend_from_slice(&labels[i]);
            }
            let eps: Vec<f64> =
                (0..bn * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

            let mut g = Graph::new();
            let v = model.bind(&mut g, true);
            let x = g.leaf(Tensor::new(vec![bn, 3, hw, hw], xdata)?);
            let (mean, logvar) = model.encode_graph(&mut g, x, &v)?;
            let z = g.reparameterize(mean, logvar, &eps)?;
            let logits = model.decode_graph(&mut g, z, &v)?;
            let recon = g.cross_entropy_spatial(logits, &blabels)?;
            let kl = g.kl_unit_gaussian(mean, logvar)?;
            let kl_term = g.scale(kl, train.kl_weight)?;
            let loss = g.add(recon, kl_term)?;
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = v
                .vars
                .iter()
                .map(|&var| g.grad(var).expect("param gradient").to_vec())
                .collect();
            epoch_loss += g.value(loss).item() * bn as f64;
            epoch_kl += g.value(kl).item() * bn as f64;
            let mut refs: Vec<&mut Tensor> =
                model.params.iter_mut().map(|(_, t)| t).collect();
            adam.step(&mut refs, &grads)?;
        }
        history.loss.push(epoch_loss / n as f64);
        history.kl.push(epoch_kl / n as f64);
    }
    Ok((model, history))
}
