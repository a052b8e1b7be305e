//! Miniature staged residual classifier with an optional latent-fusion
//! injection point after any of the four stages.
//!
//! Stem: 7x7 stride-2 convolution (plus optional 2x2 max pool), then four
//! stages of bottleneck blocks (1x1 reduce, 3x3, 1x1 expand, skip with 1x1
//! projection on shape change), global average pool and a linear head. The
//! fusion adapter projects the VAE latent to the channel count at the
//! injection point and broadcast-adds it as a per-channel bias; it starts
//! zero-initialized, so a fused network is exactly the baseline at init.

use crate::adam::AdamState;
use crate::checkpoint::Checkpoint;
use crate::data::WaferMap;
use crate::error::{Error, Result};
use crate::graph::{conv_out_dim, Graph, Var};
use crate::metrics::{report_from_labels, MetricsReport};
use crate::tensor::Tensor;
use crate::vae::VaeModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPoint {
    None,
    AfterStage1,
    AfterStage2,
    AfterStage3,
    AfterStage4,
}

impl FusionPoint {
    /// 1-based stage index, or None.
    pub fn stage(self) -> Option<usize> {
        match self {
            FusionPoint::None => None,
            FusionPoint::AfterStage1 => Some(1),
            FusionPoint::AfterStage2 => Some(2),
            FusionPoint::AfterStage3 => Some(3),
            FusionPoint::AfterStage4 => Some(4),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => FusionPoint::None,
            "after_stage1" => FusionPoint::AfterStage1,
            "after_stage2" => FusionPoint::AfterStage2,
            "after_stage3" => FusionPoint::AfterStage3,
            "after_stage4" => FusionPoint::AfterStage4,
            other => {
                return Err(Error::invalid(format!(
                    "unknown fusion point '{other}' (expected none or after_stage1..4)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square input size.
    pub input_size: usize,
    pub stem_channels: usize,
    /// 2x2/stride-2 max pool after the stem; requires an even post-stem size.
    pub stem_pool: bool,
    pub block_counts: [usize; 4],
    pub stage_channels: [usize; 4],
    pub fusion_point: FusionPoint,
    pub num_classes: usize,
    pub latent_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 27,
            stem_channels: 8,
            stem_pool: true,
            block_counts: [1, 1, 2, 1],
            stage_channels: [8, 16, 32, 64],
            fusion_point: FusionPoint::None,
            num_classes: 9,
            latent_dim: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockSpec {
    in_c: usize,
    out_c: usize,
    width: usize,
    stride: usize,
    mid_k: usize,
    mid_p: usize,
    /// Projection conv (kernel, padding) on the skip path, when shapes change.
    proj: Option<(usize, usize)>,
}

/// Stride-2 kernel/padding preserving exact divisibility for odd/even sizes.
fn stride2_spec(h: usize) -> (usize, usize) {
    if h % 2 == 1 {
        (3, 1)
    } else {
        (4, 1)
    }
}

fn stride2_proj_spec(h: usize) -> (usize, usize) {
    if h % 2 == 1 {
        (1, 0)
    } else {
        (2, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: NetworkConfig,
    params: Vec<(String, Tensor)>,
    stages: Vec<Vec<BlockSpec>>,
}

impl Classifier {
    /// Deterministic initialization per seed; the fusion adapter (when
    /// configured) starts all-zero.
    pub fn new(cfg: NetworkConfig, rng_seed: u64) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if cfg.block_counts.iter().any(|&b| b == 0) {
            return Err(Error::invalid("block counts must be positive"));
        }
        if cfg.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("stage channel widths must be non-decreasing"));
        }
        if cfg.fusion_point != FusionPoint::None && cfg.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive when fusion is enabled"));
        }
        // Trace spatial sizes to validate the topology up front.
        let mut h = conv_out_dim("stem", cfg.input_size, 7, 2, 3)?;
        if cfg.stem_pool {
            h = conv_out_dim("stem pool", h, 2, 2, 0)?;
        }
        let mut stages = Vec::with_capacity(4);
        let mut in_c = cfg.stem_channels;
        for s in 0..4 {
            let mut blocks = Vec::with_capacity(cfg.block_counts[s]);
            for b in 0..cfg.block_counts[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let out_c = cfg.stage_channels[s];
                let (mid_k, mid_p) =
                    if stride == 2 { stride2_spec(h) } else { (3, 1) };
                let proj = if stride == 2 {
                    Some(stride2_proj_spec(h))
                } else if in_c != out_c {
                    Some((1, 0))
                } else {
                    None
                };
                if stride == 2 {
                    h = conv_out_dim("stage", h, mid_k, 2, mid_p)?;
                }
                blocks.push(BlockSpec {
                    in_c,
                    out_c,
                    width: (out_c / 4).max(1),
                    stride,
                    mid_k,
                    mid_p,
                    proj,
                });
                in_c = out_c;
            }
            stages.push(blocks);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut params: Vec<(String, Tensor)> = Vec::new();
        let he = |rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data: Vec<f64> =
                (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
            Tensor::new(shape, data).expect("init shape is valid")
        };
        params.push((
            "stem/k".into(),
            he(&mut rng, vec![cfg.stem_channels, 3, 7, 7], 3 * 49),
        ));
        params.push(("stem/b".into(), Tensor::zeros(vec![cfg.stem_channels])));
        for (s, blocks) in stages.iter().enumerate() {
            for (b, spec) in blocks.iter().enumerate() {
                let prefix = format!("s{}/b{}", s + 1, b);
                params.push((
                    format!("{prefix}/reduce_k"),
                    he(&mut rng, vec![spec.width, spec.in_c, 1, 1], spec.in_c),
                ));
                params.push((format!("{prefix}/reduce_b"), Tensor::zeros(vec![spec.width])));
                params.push((
                    format!("{prefix}/mid_k"),
                    he(
                        &mut rng,
                        vec![spec.width, spec.width, spec.mid_k, spec.mid_k],
                        spec.width * spec.mid_k * spec.mid_k,
                    ),
                ));
                params.push((format!("{prefix}/mid_b"), Tensor::zeros(vec![spec.width])));
                params.push((
                    format!("{prefix}/expand_k"),
                    he(&mut rng, vec![spec.out_c, spec.width, 1, 1], spec.width),
                ));
                params.push((format!("{prefix}/expand_b"), Tensor::zeros(vec![spec.out_c])));
                if let Some((pk, _)) = spec.proj {
                    params.push((
                        format!("{prefix}/proj_k"),
                        he(&mut rng, vec![spec.out_c, spec.in_c, pk, pk], spec.in_c * pk * pk),
                    ));
                }
            }
            if cfg.fusion_point.stage() == Some(s + 1) {
                let c = cfg.stage_channels[s];
                params.push(("fusion/w".into(), Tensor::zeros(vec![cfg.latent_dim, c])));
                params.push(("fusion/b".into(), Tensor::zeros(vec![c])));
            }
        }
        let c_last = cfg.stage_channels[3];
        params.push((
            "head/w".into(),
            he(&mut rng, vec![c_last, cfg.num_classes], c_last),
        ));
        params.push(("head/b".into(), Tensor::zeros(vec![cfg.num_classes])));

        Ok(Classifier { cfg, params, stages })
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

    /// Cross-entropy loss over one labeled batch plus the gradient of every
    /// parameter; the model is not updated. `latents` must be per-example
    /// rows iff fusion is enabled.
    pub fn loss_and_grads(
        &self,
        batch: &[WaferMap],
        latents: Option<&[Vec<f64>]>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::invalid("loss_and_grads: empty batch"));
        }
        let size = self.cfg.input_size;
        let bn = batch.len();
        let mut xdata = Vec::with_capacity(bn * 3 * size * size);
        let mut labels = Vec::with_capacity(bn);
        for m in batch {
            xdata.extend_from_slice(m.to_tensor().data());
            labels.push(m.label.ok_or_else(|| {
                Error::invalid(format!("unlabeled example '{}' in batch", m.id))
            })?);
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let x = g.leaf(Tensor::new(vec![bn, 3, size, size], xdata)?);
        let latent_var = match latents {
            Some(ls) => {
                if ls.len() != bn {
                    return Err(Error::invalid("loss_and_grads: one latent row per example"));
                }
                let flat: Vec<f64> = ls.iter().flat_map(|l| l.iter().copied()).collect();
                Some(g.leaf(Tensor::new(vec![bn, self.cfg.latent_dim], flat)?))
            }
            None => None,
        };
        let logits = self.forward_graph(&mut g, x, latent_var, &vars)?;
        let loss = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).expect("param gradient").to_vec())
            .collect();
        Ok((g.value(loss).item(), grads))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn has_fusion(&self) -> bool {
        self.cfg.fusion_point != FusionPoint::None
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.leaf(t.clone()) })
            .collect()
    }

    /// Shared forward pass. `latent` must be `[N, D]` iff fusion is enabled.
    fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        latent: Option<Var>,
        vars: &[Var],
    ) -> Result<Var> {
        match (self.has_fusion(), latent) {
            (true, None) => {
                return Err(Error::invalid("fusion enabled but no latent vector supplied"))
            }
            (false, Some(_)) => {
                return Err(Error::invalid("latent vector supplied but fusion is disabled"))
            }
            _ => {}
        }
        let mut cursor = 0usize;
        let mut next = || {
            let v = vars[cursor];
            cursor += 1;
            v
        };
        let mut h = g.conv2d(x, next(), 2, 3)?;
        h = g.channel_bias(h, next())?;
        h = g.relu(h)?;
        if self.cfg.stem_pool {
            h = g.max_pool2d(h, 2, 2)?;
        }
        for (s, blocks) in self.stages.iter().enumerate() {
            for spec in blocks {
                let input = h;
                let mut r = g.conv2d(input, next(), 1, 0)?;
                r = g.channel_bias(r, next())?;
                r = g.relu(r)?;
                r = g.conv2d(r, next(), spec.stride, spec.mid_p)?;
                r = g.channel_bias(r, next())?;
                r = g.relu(r)?;
                r = g.conv2d(r, next(), 1, 0)?;
                r = g.channel_bias(r, next())?;
                let skip = if let Some((_, pp)) = spec.proj {
                    g.conv2d(input, next(), spec.stride, pp)?
                } else {
                    input
                };
                h = g.add(r, skip)?;
                h = g.relu(h)?;
            }
            if self.cfg.fusion_point.stage() == Some(s + 1) {
                let latent = latent.expect("checked above");
                let proj = g.linear(latent, next(), next())?;
                h = g.sample_channel_bias(h, proj)?;
            }
        }
        let pooled = g.mean_pool_global(h)?;
        g.linear(pooled, next(), next())
    }

    /// Logits for a batch of stacked images, with optional per-image latents.
    pub fn forward(&self, x: &Tensor, latents: Option<&[Vec<f64>]>) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let hw = self.cfg.input_size;
        let xv = g.leaf(x.reshaped(vec![n, 3, hw, hw])?);
        let latent_var = match latents {
            Some(ls) => {
                if ls.len() != n {
                    return Err(Error::invalid(format!("{} latents for {} images", ls.len(), n)));
                }
                let d = self.cfg.latent_dim;
                if ls.iter().any(|l| l.len() != d) {
                    return Err(Error::invalid(format!("latent length must be {d}")));
                }
                let flat: Vec<f64> = ls.iter().flatten().copied().collect();
                Some(g.leaf(Tensor::new(vec![n, d], flat)?))
            }
            None => None,
        };
        let logits = self.forward_graph(&mut g, xv, latent_var, &vars)?;
        Ok(g.value(logits).clone())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let hw = self.cfg.input_size;
        match x.shape() {
            [3, h, w] if *h == hw && *w == hw => Ok(1),
            [n, 3, h, w] if *h == hw && *w == hw => Ok(*n),
            s => Err(Error::invalid(format!(
                "classifier expects [3,{hw},{hw}] or [N,3,{hw},{hw}], got {s:?}"
            ))),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert("model".into(), serde_json::json!("classifier"));
        ckpt.meta.insert(
            "network_config".into(),
            serde_json::to_value(&self.cfg).expect("config serializes"),
        );
        for (name, t) in &self.params {
            ckpt.insert(name, t);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: NetworkConfig = ckpt
            .meta
            .get("network_config")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::Checkpoint("missing network_config field".into()))?;
        let mut model = Classifier::new(cfg, 0)?;
        for (name, t) in &mut model.params {
            *t = ckpt.tensor(name)?;
        }
        Ok(model)
    }
}

// ── prediction and training ──────────────────────────────────────────

fn stack_images(maps: &[&WaferMap], size: usize) -> Result<Tensor> {
    let hw = 3 * size * size;
    let mut data = Vec::with_capacity(maps.len() * hw);
    for map in maps {
        if map.height != size || map.width != size {
            return Err(Error::invalid(format!(
                "map '{}' is {}x{}, expected {size}x{size}",
                map.id, map.height, map.width
            )));
        }
        data.extend_from_slice(map.to_tensor().data());
    }
    Tensor::new(vec![maps.len(), 3, size, size], data)
}

fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|v| v / sum).collect()
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Caches one latent per image, computed in batches.
pub fn compute_latents(vae: &VaeModel, maps: &[&WaferMap]) -> Result<Vec<Vec<f64>>> {
    let size = vae.cfg.input_size;
    let mut out = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(64) {
        let x = stack_images(chunk, size)?;
        out.extend(vae.encode_means(&x)?);
    }
    Ok(out)
}

/// (class, max softmax probability) per map, in input order.
pub fn predict_batch(
    model: &Classifier,
    vae: Option<&VaeModel>,
    maps: &[&WaferMap],
) -> Result<Vec<(usize, f64)>> {
    match (model.has_fusion(), vae) {
        (true, None) => return Err(Error::invalid("fusion model requires a VAE for prediction")),
        (false, Some(_)) => return Err(Error::invalid("non-fusion model takes no VAE")),
        _ => {}
    }
    let size = model.cfg.input_size;
    let mut out = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(64) {
        let x = stack_images(chunk, size)?;
        let latents = match vae {
            Some(vae) => Some(compute_latents(vae, chunk)?),
            None => None,
        };
        let logits = model.forward(&x, latents.as_deref())?;
        for probs in softmax_rows(&logits) {
            let class = argmax(&probs);
            out.push((class, probs[class]));
        }
    }
    Ok(out)
}

pub fn predict(
    model: &Classifier,
    vae: Option<&VaeModel>,
    map: &WaferMap,
) -> Result<(usize, f64)> {
    Ok(predict_batch(model, vae, &[map])?[0])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 25, batch_size: 32, lr: 0.002, beta1: 0.9, beta2: 0.99, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Cross-entropy training with Adam. Latents are computed once per image and
/// cached; deterministic per seed.
pub fn train_supervised(
    model: &mut Classifier,
    vae: Option<&VaeModel>,
    labeled: &[WaferMap],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if labeled.is_empty() {
        return Err(Error::invalid("train_supervised: empty labeled set"));
    }
    match (model.has_fusion(), vae) {
        (true, None) => return Err(Error::invalid("fusion model requires a VAE for training")),
        (false, Some(_)) => return Err(Error::invalid("non-fusion model takes no VAE")),
        _ => {}
    }
    let size = model.cfg.input_size;
    let refs: Vec<&WaferMap> = labeled.iter().collect();
    let labels: Vec<usize> = labeled
        .iter()
        .map(|m| {
            m.label.ok_or_else(|| {
                Error::invalid(format!("unlabeled example '{}' in training set", m.id))
            })
        })
        .collect::<Result<_>>()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.cfg.num_classes) {
        return Err(Error::invalid(format!("label {bad} outside configured class range")));
    }
    let images: Vec<Tensor> = refs.iter().map(|m| m.to_tensor()).collect();
    let latents: Option<Vec<Vec<f64>>> = match vae {
        Some(vae) => Some(compute_latents(vae, &refs)?),
        None => None,
    };
    let mut adam = AdamState::with_hyperparams(cfg.lr, cfg.beta1, cfg.beta2, 1e-8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xc1a5));
    let n = labeled.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory { loss: Vec::new(), accuracy: Vec::new() };
    let d = model.cfg.latent_dim;
    for _epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let bn = batch.len();
            let mut xdata = Vec::with_capacity(bn * 3 * size * size);
            let mut blabels = Vec::with_capacity(bn);
            for &i in batch {
                xdata.extend_from_slice(images[i].data());
                blabels.push(labels[i]);
            }
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let x = g.leaf(Tensor::new(vec![bn, 3, size, size], xdata)?);
            let latent_var = match &latents {
                Some(ls) => {
                    let flat: Vec<f64> =
                        batch.iter().flat_map(|&i| ls[i].iter().copied()).collect();
                    Some(g.leaf(Tensor::new(vec![bn, d], flat)?))
                }
                None => None,
            };
            let logits = model.forward_graph(&mut g, x, latent_var, &vars)?;
            let loss = g.cross_entropy(logits, &blabels)?;
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| g.grad(v).expect("param gradient").to_vec())
                .collect();
            epoch_loss += g.value(loss).item() * bn as f64;
            let k = model.cfg.num_classes;
            for (row, &label) in g.value(logits).data().chunks(k).zip(&blabels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            let mut prefs: Vec<&mut Tensor> =
                model.params.iter_mut().map(|(_, t)| t).collect();
            adam.step(&mut prefs, &grads)?;
        }
        history.loss.push(epoch_loss / n as f64);
        history.accuracy.push(correct as f64 / n as f64);
    }
    Ok(history)
}

/// Confusion-matrix evaluation of a trained model on a labeled test set.
pub fn evaluate(
    model: &Classifier,
    vae: Option<&VaeModel>,
    test: &[WaferMap],
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate: empty test set"));
    }
    let refs: Vec<&WaferMap> = test.iter().collect();
    let true_labels: Vec<usize> = test
        .iter()
        .map(|m| {
            m.label
                .ok_or_else(|| Error::invalid(format!("unlabeled example '{}' in test set", m.id)))
        })
        .collect::<Result<_>>()?;
    let predicted: Vec<usize> =
        predict_batch(model, vae, &refs)?.into_iter().map(|(c, _)| c).collect();
    report_from_labels(&true_labels, &predicted, model.cfg.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn desk_cfg(fusion: FusionPoint) -> NetworkConfig {
        NetworkConfig { fusion_point: fusion, ..NetworkConfig::default() }
    }

    #[test]
    fn default_config_produces_nine_logits() {
        let model = Classifier::new(desk_cfg(FusionPoint::None), 1).unwrap();
        let x = generate(0, 27, 0.02, 1).unwrap().to_tensor();
        let logits = model.forward(&x, None).unwrap();
        assert_eq!(logits.shape(), &[1, 9]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Classifier::new(desk_cfg(FusionPoint::AfterStage2), 9).unwrap();
        let b = Classifier::new(desk_cfg(FusionPoint::AfterStage2), 9).unwrap();
        for ((n1, t1), (n2, t2)) in a.params.iter().zip(&b.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn fusion_param_count_delta() {
        for (point, stage_c) in [
            (FusionPoint::AfterStage1, 8),
            (FusionPoint::AfterStage2, 16),
            (FusionPoint::AfterStage3, 32),
            (FusionPoint::AfterStage4, 64),
        ] {
            let base = Classifier::new(desk_cfg(FusionPoint::None), 1).unwrap();
            let fused = Classifier::new(desk_cfg(point), 1).unwrap();
            assert_eq!(fused.param_count(), base.param_count() + 16 * stage_c + stage_c);
        }
    }

    #[test]
    fn latent_presence_must_match_fusion() {
        let base = Classifier::new(desk_cfg(FusionPoint::None), 1).unwrap();
        let fused = Classifier::new(desk_cfg(FusionPoint::AfterStage2), 1).unwrap();
        let x = generate(0, 27, 0.02, 1).unwrap().to_tensor();
        let latent = vec![vec![0.1; 16]];
        assert!(base.forward(&x, Some(&latent)).is_err());
        assert!(fused.forward(&x, None).is_err());
        assert!(fused.forward(&x, Some(&latent)).is_ok());
    }

    #[test]
    fn zero_adapter_ignores_latent_exactly() {
        let fused = Classifier::new(desk_cfg(FusionPoint::AfterStage2), 4).unwrap();
        let x = generate(3, 27, 0.02, 2).unwrap().to_tensor();
        let zero = fused.forward(&x, Some(&vec![vec![0.0; 16]])).unwrap();
        let nonzero = fused.forward(&x, Some(&vec![vec![123.4; 16]])).unwrap();
        assert_eq!(zero.data(), nonzero.data());
    }

    #[test]
    fn residual_block_zero_branch_is_identity() {
        // A bottleneck block whose residual-branch parameters are all zero
        // passes its (non-negative) input through unchanged: the branch
        // contributes 0 and relu(x) = x for x >= 0.
        let mut g = Graph::new();
        let mut rng_vals = (1..=100).map(|i| (i % 7) as f64 * 0.5);
        let xdata: Vec<f64> = (0..4 * 25).map(|_| rng_vals.next().unwrap()).collect();
        let x = g.leaf(Tensor::new(vec![1, 4, 5, 5], xdata).unwrap());
        let reduce_k = g.leaf(Tensor::zeros(vec![2, 4, 1, 1]));
        let reduce_b = g.leaf(Tensor::zeros(vec![2]));
        let mid_k = g.leaf(Tensor::zeros(vec![2, 2, 3, 3]));
        let mid_b = g.leaf(Tensor::zeros(vec![2]));
        let expand_k = g.leaf(Tensor::zeros(vec![4, 2, 1, 1]));
        let expand_b = g.leaf(Tensor::zeros(vec![4]));
        let mut r = g.conv2d(x, reduce_k, 1, 0).unwrap();
        r = g.channel_bias(r, reduce_b).unwrap();
        r = g.relu(r).unwrap();
        r = g.conv2d(r, mid_k, 1, 1).unwrap();
        r = g.channel_bias(r, mid_b).unwrap();
        r = g.relu(r).unwrap();
        r = g.conv2d(r, expand_k, 1, 0).unwrap();
        r = g.channel_bias(r, expand_b).unwrap();
        let sum = g.add(r, x).unwrap();
        let out = g.relu(sum).unwrap();
        assert_eq!(g.value(out).data(), g.value(x).data());
    }

    #[test]
    fn predict_confidence_bounds_and_argmax_consistency() {
        let model = Classifier::new(desk_cfg(FusionPoint::None), 6).unwrap();
        for seed in 0..10 {
            let map = generate((seed % 9) as usize, 27, 0.02, seed).unwrap();
            let (class, conf) = predict(&model, None, &map).unwrap();
            assert!((1.0 / 9.0..=1.0).contains(&conf));
            let logits = model.forward(&map.to_tensor(), None).unwrap();
            assert_eq!(argmax(g_row(&logits)), class);
        }
    }

    fn g_row(t: &Tensor) -> &[f64] {
        t.data()
    }

    #[test]
    fn batch_predict_equals_per_item() {
        let model = Classifier::new(desk_cfg(FusionPoint::None), 8).unwrap();
        let maps: Vec<_> =
            (0..7u64).map(|s| generate((s % 9) as usize, 27, 0.02, s).unwrap()).collect();
        let refs: Vec<&WaferMap> = maps.iter().collect();
        let batch = predict_batch(&model, None, &refs).unwrap();
        for (map, &expected) in maps.iter().zip(&batch) {
            assert_eq!(predict(&model, None, map).unwrap(), expected);
        }
    }

    #[test]
    fn train_rejects_empty_or_mismatched_inputs() {
        let mut model = Classifier::new(desk_cfg(FusionPoint::None), 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(train_supervised(&mut model, None, &[], &cfg).is_err());
        let vae = crate::vae::VaeModel::new(crate::vae::VaeConfig::default(), 1).unwrap();
        let maps = vec![generate(0, 27, 0.0, 1).unwrap()];
        assert!(train_supervised(&mut model, Some(&vae), &maps, &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward() {
        let model = Classifier::new(desk_cfg(FusionPoint::AfterStage2), 12).unwrap();
        let ckpt = model.to_checkpoint();
        let back = Classifier::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.cfg, model.cfg);
        let x = generate(4, 27, 0.02, 7).unwrap().to_tensor();
        let latent = vec![vec![0.25; 16]];
        assert_eq!(
            back.forward(&x, Some(&latent)).unwrap().data(),
            model.forward(&x, Some(&latent)).unwrap().data()
        );
    }
}
