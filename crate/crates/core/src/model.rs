//! The dual-branch feature extractor and its two-phase base training.
//!
//! A shared 3x3 stem feeds four stages. Each stage runs a residual conv
//! branch and a global-filter branch on the same input `z`, fuses them as
//! `a * (r + g) + b` and hands the result to both branches of the next stage.
//! The feature vector is the spatial mean of the last fused map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::hflip_augment;
use crate::error::{Error, Result};
use crate::losses::{focal_loss, hybrid_loss, update_centers, CenterBank, LossConfig};
use crate::nn::{
    avg_pool_backward, avg_pool_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    scale_shift_backward, scale_shift_forward, sgd_step, GradStore, Layer, LayerCache, NormAxis, ParamId,
    ParamStore, Sequential, SgdConfig,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples per gradient-accumulation chunk. Fixed so the reduction order, and
/// therefore every bit of the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stage_dims: Vec<usize>,
    pub spectral_blocks: Vec<usize>,
    pub spatial_blocks: Vec<usize>,
    /// Hidden width of the spectral MLP as a multiple of the stage width.
    pub mlp_ratio: usize,
    /// Standard deviation of the initial global-filter coefficients.
    pub filter_init_std: f64,
    /// Epochs of the all-parameter cross-entropy phase that stands in for pretraining.
    pub pretrain_epochs: usize,
    /// Learning rate of that phase.
    pub pretrain_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            stage_dims: vec![16, 32, 64, 128],
            spectral_blocks: vec![2, 2, 2, 2],
            spatial_blocks: vec![2, 2, 2, 2],
            mlp_ratio: 2,
            filter_init_std: 0.02,
            pretrain_epochs: 30,
            pretrain_lr: 0.01,
        }
    }
}

impl ModelConfig {
    /// The full-size layout: widths 64..512 and 3/3/10/3 spectral blocks.
    /// The FFT needs power-of-two extents, so inputs are 128 rather than 224.
    pub fn paper_scale() -> Self {
        ModelConfig {
            input_size: 128,
            stage_dims: vec![64, 128, 256, 512],
            spectral_blocks: vec![3, 3, 10, 3],
            spatial_blocks: vec![2, 2, 2, 2],
            ..ModelConfig::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_dims.last().copied().unwrap_or(0)
    }

    /// Spatial extent of stage `s`.
    pub fn stage_size(&self, s: usize) -> usize {
        self.input_size >> s
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_dims.len();
        if n != 4 || self.spectral_blocks.len() != n || self.spatial_blocks.len() != n {
            return Err(Error::Config(
                "model: stage_dims, spectral_blocks and spatial_blocks must all have 4 entries".into(),
            ));
        }
        if self.stage_dims.contains(&0) {
            return Err(Error::Config("model: stage widths must be positive".into()));
        }
        if !self.input_size.is_power_of_two() || self.input_size < 1 << (n - 1) {
            return Err(Error::Config(format!(
                "model: input_size {} must be a power of two >= {}",
                self.input_size,
                1 << (n - 1)
            )));
        }
        if self.mlp_ratio == 0 || !(self.filter_init_std >= 0.0) || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("model: mlp_ratio, filter_init_std or pretrain_lr out of range".into()));
        }
        Ok(())
    }
}

/// Which branch outputs enter the fusion. The excluded branch contributes zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMask {
    Both,
    SpatialOnly,
    SpectralOnly,
}

impl BranchMask {
    fn spatial(self) -> bool {
        self != BranchMask::SpectralOnly
    }

    fn spectral(self) -> bool {
        self != BranchMask::SpatialOnly
    }
}

/// `post(main(x) + skip(x))` where an empty `skip` is the identity.
#[derive(Debug, Clone)]
pub struct Residual {
    pub main: Sequential,
    pub skip: Sequential,
    pub post_relu: bool,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    main: Vec<LayerCache>,
    skip: Vec<LayerCache>,
    sum: Option<Tensor>,
}

impl Residual {
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ResidualCache)> {
        let (m, main) = self.main.forward(store, x)?;
        let (s, skip) = self.skip.forward(store, x)?;
        let sum = m.add(&s)?;
        if self.post_relu {
            let y = relu_forward(&sum);
            Ok((y, ResidualCache { main, skip, sum: Some(sum) }))
        } else {
            Ok((sum, ResidualCache { main, skip, sum: None }))
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ResidualCache,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let g = match &cache.sum {
            Some(sum) => relu_backward(sum, grad_out)?,
            None => grad_out.clone(),
        };
        let gm = self.main.backward(store, &cache.main, &g, grads)?;
        let gs = self.skip.backward(store, &cache.skip, &g, grads)?;
        gm.add(&gs)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.main.layers.iter().chain(&self.skip.layers).flat_map(|l| l.params()).collect()
    }
}

/// Residual conv block: `relu(LN(conv(relu(LN(conv(x))))) + shortcut(x))`.
fn spatial_block(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Residual {
    let main = Sequential {
        layers: vec![
            Layer::conv(store, rng, &format!("{name}.conv1"), cin, cout, stride),
            Layer::layernorm(store, &format!("{name}.ln1"), cout, NormAxis::Sample),
            Layer::Relu,
            Layer::conv(store, rng, &format!("{name}.conv2"), cout, cout, 1),
            Layer::layernorm(store, &format!("{name}.ln2"), cout, NormAxis::Sample),
        ],
    };
    let skip = if stride != 1 || cin != cout {
        Sequential {
            layers: vec![Layer::conv(store, rng, &format!("{name}.shortcut"), cin, cout, stride)],
        }
    } else {
        Sequential::default()
    };
    Residual { main, skip, post_relu: true }
}

/// The two pre-norm residual halves of a global-filter block.
fn spectral_block(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    dim: usize,
    size: usize,
    cfg: &ModelConfig,
) -> [Residual; 2] {
    let mixer = Residual {
        main: Sequential {
            layers: vec![
                Layer::layernorm(store, &format!("{name}.ln1"), dim, NormAxis::Channel),
                Layer::global_filter(store, rng, &format!("{name}.filter"), dim, size, size, cfg.filter_init_std),
            ],
        },
        skip: Sequential::default(),
        post_relu: false,
    };
    let hidden = dim * cfg.mlp_ratio;
    let mlp = Residual {
        main: Sequential {
            layers: vec![
                Layer::layernorm(store, &format!("{name}.ln2"), dim, NormAxis::Channel),
                Layer::linear(store, rng, &format!("{name}.fc1"), dim, hidden),
                Layer::Gelu,
                Layer::linear(store, rng, &format!("{name}.fc2"), hidden, dim),
            ],
        },
        skip: Sequential::default(),
        post_relu: false,
    };
    [mixer, mlp]
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub spatial: Vec<Residual>,
    /// Stride-2 conv in front of the spectral blocks of every stage but the first.
    pub spectral_entry: Sequential,
    pub spectral: Vec<Residual>,
    pub fuse_a: ParamId,
    pub fuse_b: ParamId,
}

#[derive(Debug, Clone)]
struct StageTrace {
    spatial: Vec<ResidualCache>,
    entry: Vec<LayerCache>,
    spectral: Vec<ResidualCache>,
    r: Tensor,
    g: Tensor,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    mask: BranchMask,
    stem: LayerCache,
    stages: Vec<StageTrace>,
    norm: LayerCache,
    last_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DualBranchModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: Layer,
    pub stages: Vec<Stage>,
    /// Channel LayerNorm on the last fused map, before pooling.
    pub norm: Layer,
}

impl DualBranchModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let dims = &config.stage_dims;
        let stem = Layer::conv(&mut store, &mut rng, "stem", 1, dims[0], 1);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let cin = if s == 0 { dims[0] } else { dims[s - 1] };
            let cout = dims[s];
            let size = config.stage_size(s);
            let stride = if s == 0 { 1 } else { 2 };
            let spatial = (0..config.spatial_blocks[s])
                .map(|i| {
                    let (ci, st) = if i == 0 { (cin, stride) } else { (cout, 1) };
                    spatial_block(&mut store, &mut rng, &format!("spatial.{s}.{i}"), ci, cout, st)
                })
                .collect();
            let spectral_entry = if s == 0 {
                Sequential::default()
            } else {
                Sequential {
                    layers: vec![Layer::conv(&mut store, &mut rng, &format!("spectral.{s}.down"), cin, cout, 2)],
                }
            };
            let spectral = (0..config.spectral_blocks[s])
                .flat_map(|i| spectral_block(&mut store, &mut rng, &format!("spectral.{s}.{i}"), cout, size, config))
                .collect();
            let fuse = Layer::scale_shift(&mut store, &format!("fusion.{s}"));
            let Layer::ScaleShift { a, b } = fuse else { unreachable!() };
            stages.push(Stage {
                spatial,
                spectral_entry,
                spectral,
                fuse_a: a,
                fuse_b: b,
            });
        }
        let norm = Layer::layernorm(&mut store, "norm", dims[3], NormAxis::Channel);
        Ok(DualBranchModel {
            config: config.clone(),
            store,
            stem,
            stages,
            norm,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Parameters of the global-filter branch (entry convs included).
    pub fn spectral_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for st in &self.stages {
            ids.extend(st.spectral_entry.layers.iter().flat_map(|l| l.params()));
            ids.extend(st.spectral.iter().flat_map(|r| r.params()));
        }
        ids
    }

    pub fn set_spectral_frozen(&mut self, frozen: bool) {
        for id in self.spectral_params() {
            self.store.set_frozen(id, frozen);
        }
    }

    pub fn freeze_all(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_frozen(id, true);
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let n = self.config.input_size;
        if image.shape() != [1, n, n] {
            return Err(Error::dim("forward_features", image.shape(), &[1, n, n]));
        }
        Ok(())
    }

    pub fn forward_traced(&self, image: &Tensor, mask: BranchMask) -> Result<(Tensor, Trace)> {
        self.check_input(image)?;
        let store = &self.store;
        let (mut z, stem) = self.stem.forward(store, image)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (s, st) in self.stages.iter().enumerate() {
            let dim = self.config.stage_dims[s];
            let size = self.config.stage_size(s);
            let zeros = || Tensor::zeros(&[dim, size, size]);

            let mut spatial = Vec::new();
            let r = if mask.spatial() {
                let mut h = z.clone();
                for block in &st.spatial {
                    let (y, c) = block.forward(store, &h)?;
                    spatial.push(c);
                    h = y;
                }
                h
            } else {
                zeros()
            };

            let mut entry = Vec::new();
            let mut spectral = Vec::new();
            let g = if mask.spectral() {
                let (mut h, c) = st.spectral_entry.forward(store, &z)?;
                entry = c;
                for block in &st.spectral {
                    let (y, c) = block.forward(store, &h)?;
                    spectral.push(c);
                    h = y;
                }
                h
            } else {
                zeros()
            };

            let a = store.get(st.fuse_a).data()[0];
            let b = store.get(st.fuse_b).data()[0];
            z = scale_shift_forward(&r, &g, a, b)?;
            stages.push(StageTrace { spatial, entry, spectral, r, g });
        }
        let (z, norm) = self.norm.forward(store, &z)?;
        let feature = avg_pool_forward(&z)?;
        Ok((
            feature,
            Trace {
                mask,
                stem,
                stages,
                norm,
                last_shape: z.shape().to_vec(),
            },
        ))
    }

    pub fn forward_features(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_masked(image, BranchMask::Both)
    }

    pub fn forward_masked(&self, image: &Tensor, mask: BranchMask) -> Result<Tensor> {
        Ok(self.forward_traced(image, mask)?.0)
    }

    /// Accumulates parameter gradients of `<grad_feature, feature>` into `grads`.
    pub fn backward(&self, trace: &Trace, grad_feature: &Tensor, grads: &mut GradStore) -> Result<()> {
        let store = &self.store;
        let gz = avg_pool_backward(&trace.last_shape, grad_feature)?;
        let mut gz = self.norm.backward(store, &trace.norm, &gz, grads)?;
        for (st, tr) in self.stages.iter().zip(&trace.stages).rev() {
            let a = store.get(st.fuse_a).data()[0];
            let fg = scale_shift_backward(&tr.r, &tr.g, a, &gz)?;
            grads.accumulate(st.fuse_a, &Tensor::full(&[1], fg.grad_a));
            grads.accumulate(st.fuse_b, &Tensor::full(&[1], fg.grad_b));

            let mut g_in: Option<Tensor> = None;
            if trace.mask.spatial() {
                let mut g = fg.grad_r;
                for (block, c) in st.spatial.iter().zip(&tr.spatial).rev() {
                    g = block.backward(store, c, &g, grads)?;
                }
                g_in = Some(g);
            }
            if trace.mask.spectral() {
                let mut g = fg.grad_g;
                for (block, c) in st.spectral.iter().zip(&tr.spectral).rev() {
                    g = block.backward(store, c, &g, grads)?;
                }
                g = st.spectral_entry.backward(store, &tr.entry, &g, grads)?;
                g_in = Some(match g_in {
                    Some(prev) => prev.add(&g)?,
                    None => g,
                });
            }
            gz = g_in.expect("at least one branch is active");
        }
        self.stem.backward(store, &trace.stem, &gz, grads)?;
        Ok(())
    }

    /// Features for a list of images, one row per image.
    pub fn extract(&self, images: &[Tensor], mask: BranchMask) -> Result<Tensor> {
        let rows: Vec<Tensor> = images
            .par_iter()
            .map(|x| self.forward_masked(x, mask))
            .collect::<Result<_>>()?;
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in &rows {
            data.extend_from_slice(r.data());
        }
        Tensor::new(&[rows.len(), d], data)
    }
}

/// Linear classifier used only while training; never part of the extractor.
#[derive(Debug, Clone)]
pub struct Head {
    pub store: ParamStore,
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    pub fn new(feature_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let Layer::Linear { w, b } = Layer::linear(&mut store, rng, "head", feature_dim, classes) else {
            unreachable!()
        };
        Head { store, w, b }
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        linear_forward(features, self.store.get(self.w), self.store.get(self.b))
    }
}

/// Epoch-mean losses and train accuracies of both phases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub pretrain_loss: Vec<f64>,
    pub pretrain_accuracy: Vec<f64>,
    pub finetune_loss: Vec<f64>,
    pub finetune_accuracy: Vec<f64>,
}

enum Objective<'a> {
    CrossEntropy,
    Hybrid { cfg: &'a LossConfig, bank: &'a mut CenterBank },
}

/// One epoch of minibatch SGD over model + head. Returns `(mean loss, train accuracy)`.
fn run_epoch(
    model: &mut DualBranchModel,
    head: &mut Head,
    images: &[Tensor],
    labels: &[usize],
    sgd: &SgdConfig,
    lr: f64,
    objective: &mut Objective,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let order = rng.permutation(images.len());
    let mut aug_rng = rng.derive(0xA06);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(sgd.batch_size) {
        let xs: Vec<Tensor> = batch.iter().map(|&i| hflip_augment(&images[i], &mut aug_rng, 0.5)).collect();
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let traced: Vec<(Tensor, Trace)> = xs
            .par_iter()
            .map(|x| model.forward_traced(x, BranchMask::Both))
            .collect::<Result<_>>()?;
        let d = model.feature_dim();
        let mut fdata = Vec::with_capacity(batch.len() * d);
        for (f, _) in &traced {
            fdata.extend_from_slice(f.data());
        }
        let features = Tensor::new(&[batch.len(), d], fdata)?;
        let logits = head.logits(&features)?;
        for (i, &y) in ys.iter().enumerate() {
            let row = logits.row(i);
            let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += usize::from(pred == y);
        }

        let (loss, grad_logits, grad_features_extra) = match objective {
            Objective::CrossEntropy => {
                let (l, g) = focal_loss(&logits, &ys, 0.0)?;
                (l, g, None)
            }
            Objective::Hybrid { cfg, bank } => {
                let h = hybrid_loss(&logits, &features, &ys, bank, cfg)?;
                (h.loss, h.grad_logits, Some(h.grad_features))
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss}")));
        }
        loss_sum += loss * batch.len() as f64;

        let (mut gfeat, gw, gb) = linear_backward(&features, head.store.get(head.w), &grad_logits)?;
        if let Some(extra) = grad_features_extra {
            gfeat.add_assign(&extra);
        }
        let mut head_grads = GradStore::zeros_like(&head.store);
        head_grads.accumulate(head.w, &gw);
        head_grads.accumulate(head.b, &gb);

        let chunk_grads: Vec<GradStore> = traced
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = GradStore::zeros_like(&model.store);
                for (k, (_, trace)) in chunk.iter().enumerate() {
                    let i = c * GRAD_CHUNK + k;
                    let gf = Tensor::new(&[d], gfeat.row(i).to_vec())?;
                    model.backward(trace, &gf, &mut g)?;
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let mut grads = GradStore::zeros_like(&model.store);
        for g in &chunk_grads {
            grads.add_assign(g);
        }

        sgd_step(&mut model.store, &grads, lr, sgd.weight_decay);
        sgd_step(&mut head.store, &head_grads, lr, sgd.weight_decay);
        if let Objective::Hybrid { bank, .. } = objective {
            update_centers(bank, &features, &ys)?;
        }
    }
    Ok((loss_sum / images.len() as f64, correct as f64 / images.len() as f64))
}

fn check_base_data(images: &[Tensor], labels: &[usize]) -> Result<usize> {
    if images.len() != labels.len() {
        return Err(Error::Data(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::Data("base training needs at least 2 classes".into()));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Data(format!("base class {c} has {} samples, need at least 2", counts[c])));
    }
    Ok(classes)
}

/// Phase A: every parameter trained with cross-entropy through a throwaway
/// head. Returns per-epoch `(loss, train accuracy)`.
pub fn pretrain(
    model: &mut DualBranchModel,
    images: &[Tensor],
    labels: &[usize],
    sgd: &SgdConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    sgd.validate()?;
    let classes = check_base_data(images, labels)?;
    let root = Rng::new(seed);
    model.set_spectral_frozen(false);
    let mut head = Head::new(model.feature_dim(), classes, &mut root.derive(1));
    let mut rng = root.derive(2);
    let lr = model.config.pretrain_lr;
    (0..model.config.pretrain_epochs)
        .map(|_| run_epoch(model, &mut head, images, labels, sgd, lr, &mut Objective::CrossEntropy, &mut rng))
        .collect()
}

/// Phase B: a fresh head, the spectral branch frozen, the focal + center
/// objective with per-batch center updates. The head is dropped on return.
pub fn finetune(
    model: &mut DualBranchModel,
    images: &[Tensor],
    labels: &[usize],
    loss_cfg: &LossConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    sgd.validate()?;
    loss_cfg.validate()?;
    let classes = check_base_data(images, labels)?;
    let root = Rng::new(seed);
    let d = model.feature_dim();
    model.set_spectral_frozen(true);
    let mut head = Head::new(d, classes, &mut root.derive(3));
    let mut bank = CenterBank::new(classes, d, 0.5)?;
    let mut rng = root.derive(4);
    (0..sgd.epochs)
        .map(|_| {
            let mut obj = Objective::Hybrid { cfg: loss_cfg, bank: &mut bank };
            run_epoch(model, &mut head, images, labels, sgd, sgd.learning_rate, &mut obj, &mut rng)
        })
        .collect()
}

/// Two-phase base training on labels `0..K`: [`pretrain`] then [`finetune`].
/// The model returned never holds classifier parameters.
pub fn train_base(
    model: &mut DualBranchModel,
    images: &[Tensor],
    labels: &[usize],
    loss_cfg: &LossConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<TrainLog> {
    sgd.validate()?;
    loss_cfg.validate()?;
    check_base_data(images, labels)?;
    let a = pretrain(model, images, labels, sgd, seed)?;
    let b = finetune(model, images, labels, loss_cfg, sgd, seed)?;
    Ok(TrainLog {
        pretrain_loss: a.iter().map(|e| e.0).collect(),
        pretrain_accuracy: a.iter().map(|e| e.1).collect(),
        finetune_loss: b.iter().map(|e| e.0).collect(),
        finetune_accuracy: b.iter().map(|e| e.1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{max_relative_error, numeric_gradient};

    fn tiny_config(size: usize) -> ModelConfig {
        ModelConfig {
            input_size: size,
            stage_dims: vec![2, 3, 3, 4],
            spectral_blocks: vec![1, 1, 1, 1],
            spatial_blocks: vec![1, 1, 1, 1],
            filter_init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
        let bad = ModelConfig { stage_dims: vec![16, 32, 64], ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig { input_size: 24, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gfnet_block_zero_init_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let blocks = spectral_block(&mut store, &mut rng, "b", 2, 4, &ModelConfig::default());
        for id in store.ids().collect::<Vec<_>>() {
            let name = &store.param(id).name;
            if name.contains("filter") || name.contains("fc2") {
                let z = Tensor::zeros(store.get(id).shape());
                *store.get_mut(id) = z;
            }
        }
        let x = rng.normal(&[2, 4, 4]);
        let (y, _) = blocks[0].forward(&store, &x).unwrap();
        let (y, _) = blocks[1].forward(&store, &y).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn gfnet_block_gradient() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let blocks = spectral_block(&mut store, &mut rng, "b", 2, 4, &ModelConfig { filter_init_std: 0.5, ..Default::default() });
        let x = rng.normal(&[2, 4, 4]);
        let probe = rng.normal(&[2, 4, 4]);
        let f = |s: &ParamStore, x: &Tensor| {
            let (y, _) = blocks[0].forward(s, x).unwrap();
            blocks[1].forward(s, &y).unwrap().0
        };
        let (y1, c1) = blocks[0].forward(&store, &x).unwrap();
        let (_, c2) = blocks[1].forward(&store, &y1).unwrap();
        let mut grads = GradStore::zeros_like(&store);
        let g = blocks[1].backward(&store, &c2, &probe, &mut grads).unwrap();
        let gx = blocks[0].backward(&store, &c1, &g, &mut grads).unwrap();
        let num = numeric_gradient(&x, 1e-5, |xp| dot(&f(&store, xp), &probe));
        assert!(max_relative_error(&gx, &num, 1e-7) <= 1e-4);
        for id in store.ids() {
            let num = numeric_gradient(store.get(id), 1e-5, |p| {
                let mut s = store.clone();
                *s.get_mut(id) = p.clone();
                dot(&f(&s, &x), &probe)
            });
            assert!(max_relative_error(grads.get(id), &num, 1e-7) <= 1e-4, "{}", store.param(id).name);
        }
    }

    #[test]
    fn stage_shapes() {
        let cfg = ModelConfig::default();
        let model = DualBranchModel::new(&cfg, 3).unwrap();
        let x = Rng::new(4).normal(&[1, 32, 32]);
        let (f, trace) = model.forward_traced(&x, BranchMask::Both).unwrap();
        assert_eq!(f.shape(), [128]);
        for (s, st) in trace.stages.iter().enumerate() {
            let n = 32 >> s;
            assert_eq!(st.r.shape(), [cfg.stage_dims[s], n, n]);
            assert_eq!(st.g.shape(), st.r.shape());
        }
        assert!(model.forward_features(&Rng::new(1).normal(&[1, 16, 16])).is_err());
    }

    #[test]
    fn annihilating_fusion_gives_zero_features() {
        let mut model = DualBranchModel::new(&tiny_config(8), 5).unwrap();
        for st in model.stages.clone() {
            *model.store.get_mut(st.fuse_a) = Tensor::zeros(&[1]);
        }
        let f = model.forward_features(&Rng::new(6).normal(&[1, 8, 8])).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DualBranchModel::new(&tiny_config(8), 7).unwrap();
        let x = Rng::new(8).normal(&[1, 8, 8]);
        let a = model.forward_features(&x).unwrap();
        let b = DualBranchModel::new(&tiny_config(8), 7).unwrap().forward_features(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn end_to_end_stem_gradient() {
        let cfg = ModelConfig {
            input_size: 16,
            stage_dims: vec![2, 4, 4, 4],
            spectral_blocks: vec![1, 1, 1, 1],
            spatial_blocks: vec![1, 1, 1, 1],
            filter_init_std: 0.3,
            ..ModelConfig::default()
        };
        let model = DualBranchModel::new(&cfg, 9).unwrap();
        let x = Rng::new(10).normal(&[1, 16, 16]);
        let probe = Rng::new(11).normal(&[4]);
        for mask in [BranchMask::Both, BranchMask::SpatialOnly, BranchMask::SpectralOnly] {
            let (_, trace) = model.forward_traced(&x, mask).unwrap();
            let mut grads = GradStore::zeros_like(&model.store);
            model.backward(&trace, &probe, &mut grads).unwrap();
            let Layer::Conv3x3 { w, .. } = model.stem else { panic!() };
            let num = numeric_gradient(model.store.get(w), 1e-5, |p| {
                let mut m = model.clone();
                *m.store.get_mut(w) = p.clone();
                dot(&m.forward_masked(&x, mask).unwrap(), &probe)
            });
            let err = max_relative_error(grads.get(w), &num, 1e-6);
            assert!(err <= 1e-3, "{mask:?}: {err}");
            let a = model.stages[1].fuse_a;
            let num = numeric_gradient(model.store.get(a), 1e-5, |p| {
                let mut m = model.clone();
                *m.store.get_mut(a) = p.clone();
                dot(&m.forward_masked(&x, mask).unwrap(), &probe)
            });
            assert!(max_relative_error(grads.get(a), &num, 1e-6) <= 1e-3);
        }
    }

    #[test]
    fn fusion_branch_swap_symmetry() {
        let mut rng = Rng::new(12);
        let r = rng.normal(&[3, 4, 4]);
        let g = rng.normal(&[3, 4, 4]);
        assert_eq!(
            scale_shift_forward(&r, &g, 0.8, 0.1).unwrap(),
            scale_shift_forward(&g, &r, 0.8, 0.1).unwrap()
        );
    }

    /// Two classes that differ by which half of the image is bright.
    fn separable_set(size: usize, per_class: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * per_class {
            let label = i % 2;
            let mut x = Tensor::zeros(&[1, size, size]);
            for r in 0..size {
                for c in 0..size {
                    let top = r < size / 2;
                    let base = if top == (label == 0) { 1.0 } else { 0.0 };
                    x.data_mut()[r * size + c] = base + 0.1 * rng.standard_normal();
                }
            }
            images.push(x);
            labels.push(label);
        }
        (images, labels)
    }

    #[test]
    fn training_separable_two_class() {
        let cfg = ModelConfig { pretrain_epochs: 3, ..tiny_config(8) };
        let mut model = DualBranchModel::new(&cfg, 13).unwrap();
        let (images, labels) = separable_set(8, 12, 14);
        let sgd = SgdConfig { batch_size: 8, epochs: 10, ..SgdConfig::default() };
        let spectral_before: Vec<Tensor> = model.spectral_params().iter().map(|&id| model.store.get(id).clone()).collect();
        let log = train_base(&mut model, &images, &labels, &LossConfig::default(), &sgd, 15).unwrap();
        assert!(log.finetune_loss.iter().all(|l| l.is_finite()));
        assert!(*log.finetune_accuracy.last().unwrap() >= 0.95, "{log:?}");
        // Spectral params moved in phase A but only there.
        let changed = model
            .spectral_params()
            .iter()
            .zip(&spectral_before)
            .any(|(&id, before)| model.store.get(id) != before);
        assert!(changed);
        assert!(model.store.iter().all(|p| !p.name.starts_with("head")));
    }

    #[test]
    fn spectral_branch_bitwise_frozen_in_finetune() {
        let cfg = ModelConfig { pretrain_epochs: 0, ..tiny_config(8) };
        let mut model = DualBranchModel::new(&cfg, 16).unwrap();
        let (images, labels) = separable_set(8, 6, 17);
        let before: Vec<Vec<u64>> = model
            .spectral_params()
            .iter()
            .map(|&id| model.store.get(id).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let spatial_before = model.store.clone();
        let sgd = SgdConfig { batch_size: 4, epochs: 2, ..SgdConfig::default() };
        train_base(&mut model, &images, &labels, &LossConfig::default(), &sgd, 18).unwrap();
        for (&id, b) in model.spectral_params().iter().zip(&before) {
            let now: Vec<u64> = model.store.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, b, "{}", model.store.param(id).name);
        }
        assert_ne!(model.store, spatial_before);
    }

    #[test]
    fn base_data_validation() {
        let mut model = DualBranchModel::new(&tiny_config(8), 1).unwrap();
        let x = vec![Tensor::zeros(&[1, 8, 8]); 3];
        let err = train_base(&mut model, &x, &[0, 0, 1], &LossConfig::default(), &SgdConfig::default(), 1);
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
