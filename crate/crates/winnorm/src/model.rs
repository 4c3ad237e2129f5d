//! Small configurable CNN: stages of 3x3 conv -> normalization -> relu
//! with optional stride-2 downsampling, finished by global average
//! pooling and a linear head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{AffineVars, Mode, NormConfig, NormKind, NormLayer, NormRandomness};
use crate::rng::RngStream;
use crate::tape::{Tape, VarId};
use crate::tensor::{read_wt4, write_wt4, Real, Tensor4};
use crate::window::{partition_blocks, BlockPartition, Region, Strategy};

/// One conv + norm + relu stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub out_channels: usize,
    pub norm: NormConfig,
    /// Stride-2 convolution when set; stride 1 otherwise.
    pub downsample: bool,
}

/// Architecture description. The same seed always builds bit-identical
/// parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub input_dims: (usize, usize),
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    /// Image-space patch size defining the Block-strategy grid.
    #[serde(default = "default_patch")]
    pub patch_dims: (usize, usize),
    pub stages: Vec<StageSpec>,
    pub init_seed: u64,
    /// Draw one window per forward pass and rescale it to every layer's
    /// resolution, instead of sampling independently per layer.
    #[serde(default)]
    pub share_window_across_layers: bool,
}

fn default_in_channels() -> usize {
    3
}

fn default_patch() -> (usize, usize) {
    (8, 8)
}

impl CnnSpec {
    /// Desk-scale default: three stride-2 stages on 32x32 inputs.
    pub fn desk_default(norm: NormConfig, num_classes: usize, init_seed: u64) -> Self {
        CnnSpec {
            input_dims: (32, 32),
            in_channels: 3,
            num_classes,
            patch_dims: (8, 8),
            stages: [32, 64, 128]
                .into_iter()
                .map(|out_channels| StageSpec { out_channels, norm: norm.clone(), downsample: true })
                .collect(),
            init_seed,
            share_window_across_layers: false,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = self.in_channels;
        for stage in &self.stages {
            total += stage.out_channels * cin * 9;
            if stage.norm.affine {
                total += 2 * stage.out_channels;
            }
            cin = stage.out_channels;
        }
        total + self.num_classes * cin + self.num_classes
    }

    /// Feature dims after each stage's convolution.
    pub fn stage_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.stages.len());
        let (mut h, mut w) = self.input_dims;
        for stage in &self.stages {
            if stage.downsample {
                h = (h + 2 - 3) / 2 + 1;
                w = (w + 2 - 3) / 2 + 1;
            }
            dims.push((h, w));
        }
        dims
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor4<T>,
}

/// Tape ids of the bound parameters, parallel to `Model::params`.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub ids: Vec<VarId>,
}

#[derive(Clone, Debug)]
struct StageWiring {
    conv: usize,
    gamma: Option<usize>,
    beta: Option<usize>,
    stride: usize,
}

/// Model state: parameters, norm layers (with their running buffers) and
/// the wiring between them.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub spec: CnnSpec,
    pub params: Vec<Param<T>>,
    pub norm_layers: Vec<NormLayer<T>>,
    pub partitions: Vec<Option<BlockPartition>>,
    stages: Vec<StageWiring>,
    head_w: usize,
    head_b: usize,
}

/// Deterministic He-style initialization from the spec seed.
pub fn build_model<T: Real>(spec: &CnnSpec) -> Result<Model<T>> {
    if spec.stages.is_empty() {
        return Err(Error::InvalidConfig("model needs at least one stage".into()));
    }
    if spec.num_classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    for (h, w) in spec.stage_dims() {
        if h < 2 || w < 2 {
            return Err(Error::InvalidConfig(format!(
                "feature plane collapses to {h}x{w} before the head"
            )));
        }
    }

    let mut init = RngStream::named(spec.init_seed, "init");
    let mut params: Vec<Param<T>> = Vec::new();
    let mut stages = Vec::new();
    let mut norm_layers = Vec::new();
    let mut partitions = Vec::new();
    let dims = spec.stage_dims();

    let mut cin = spec.in_channels;
    for (i, stage) in spec.stages.iter().enumerate() {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let mut kernel =
            Tensor4::<T>::fill_random_normal((stage.out_channels, cin, 3, 3), &mut init, std);
        kernel.requires_grad = true;
        let conv = params.len();
        params.push(Param { name: format!("stage{i}.conv"), tensor: kernel });

        let (gamma, beta) = if stage.norm.affine {
            let g = params.len();
            let mut gt = Tensor4::<T>::full((1, stage.out_channels, 1, 1), T::ONE);
            gt.requires_grad = true;
            params.push(Param { name: format!("stage{i}.gamma"), tensor: gt });
            let b = params.len();
            let mut bt = Tensor4::<T>::zeros((1, stage.out_channels, 1, 1));
            bt.requires_grad = true;
            params.push(Param { name: format!("stage{i}.beta"), tensor: bt });
            (Some(g), Some(b))
        } else {
            (None, None)
        };

        norm_layers.push(NormLayer::new(stage.norm.clone(), stage.out_channels)?);
        partitions.push(if stage.norm.kind == NormKind::Win && stage.norm.strategy == Strategy::Block
        {
            Some(partition_blocks(spec.input_dims, spec.patch_dims, dims[i])?)
        } else {
            None
        });

        stages.push(StageWiring { conv, gamma, beta, stride: if stage.downsample { 2 } else { 1 } });
        cin = stage.out_channels;
    }

    let std = (2.0 / cin as f64).sqrt();
    let mut hw = Tensor4::<T>::fill_random_normal((spec.num_classes, cin, 1, 1), &mut init, std);
    hw.requires_grad = true;
    let head_w = params.len();
    params.push(Param { name: "head.weight".into(), tensor: hw });
    let mut hb = Tensor4::<T>::zeros((1, spec.num_classes, 1, 1));
    hb.requires_grad = true;
    let head_b = params.len();
    params.push(Param { name: "head.bias".into(), tensor: hb });

    Ok(Model { spec: spec.clone(), params, norm_layers, partitions, stages, head_w, head_b })
}

/// Randomness source for paths that must not draw anything (evaluation).
pub struct NoDraws;

impl<T: Real> NormRandomness<T> for NoDraws {
    fn region(
        &mut self,
        _l: usize,
        _d: (usize, usize),
        _c: &NormConfig,
        _p: Option<&BlockPartition>,
    ) -> Result<Region> {
        Err(Error::InvalidConfig("evaluation must not draw regions".into()))
    }
    fn lambda(&mut self, _l: usize, _n: usize, _c: usize, _cfg: &NormConfig) -> Result<Vec<T>> {
        Err(Error::InvalidConfig("evaluation must not draw mixing weights".into()))
    }
    fn speckle(&mut self, _l: usize, _n: usize, _c: usize, _m: f64) -> Result<(Vec<T>, Vec<T>)> {
        Err(Error::InvalidConfig("evaluation must not draw speckle noise".into()))
    }
}

/// Reuses the first drawn window for every subsequent layer, rescaled to
/// that layer's resolution (block index sets are reused as-is since the
/// block grid is resolution-independent).
struct SharedWindow<'a, T: Real> {
    inner: &'a mut dyn NormRandomness<T>,
    cached: Option<((usize, usize), Region)>,
}

impl<T: Real> NormRandomness<T> for SharedWindow<'_, T> {
    fn region(
        &mut self,
        layer_id: usize,
        dims: (usize, usize),
        cfg: &NormConfig,
        partition: Option<&BlockPartition>,
    ) -> Result<Region> {
        if let Some((src_dims, region)) = &self.cached {
            return rescale_region(region, *src_dims, dims, partition);
        }
        let region = self.inner.region(layer_id, dims, cfg, partition)?;
        self.cached = Some((dims, region.clone()));
        Ok(region)
    }

    fn lambda(&mut self, layer_id: usize, n: usize, c: usize, cfg: &NormConfig) -> Result<Vec<T>> {
        self.inner.lambda(layer_id, n, c, cfg)
    }

    fn speckle(&mut self, layer_id: usize, n: usize, c: usize, m: f64) -> Result<(Vec<T>, Vec<T>)> {
        self.inner.speckle(layer_id, n, c, m)
    }
}

fn rescale_region(
    region: &Region,
    from: (usize, usize),
    to: (usize, usize),
    partition: Option<&BlockPartition>,
) -> Result<Region> {
    if from == to {
        return Ok(region.clone());
    }
    match region {
        Region::Full => Ok(Region::Full),
        Region::Window(win) => {
            let (fh, fw) = (from.0 as f64, from.1 as f64);
            let (th, tw) = (to.0 as f64, to.1 as f64);
            let x0 = ((win.x0 as f64) * tw / fw).floor() as usize;
            let x1 = (((win.x1 as f64) * tw / fw).ceil() as usize).clamp(x0 + 1, to.1);
            let y0 = ((win.y0 as f64) * th / fh).floor() as usize;
            let y1 = (((win.y1 as f64) * th / fh).ceil() as usize).clamp(y0 + 1, to.0);
            Ok(Region::Window(crate::window::WindowSpec::new(x0.min(to.1 - 1), y0.min(to.0 - 1), x1, y1)))
        }
        _ => {
            let _ = partition;
            Err(Error::InvalidConfig(
                "share_window_across_layers supports Window and Global strategies only".into(),
            ))
        }
    }
}

impl<T: Real> Model<T> {
    /// Register every parameter on the tape and return the handle list.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams { ids: self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect() }
    }

    /// Run the network. `mode` selects the statistics each norm layer
    /// uses; gradients are recorded iff the tape records them.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: VarId,
        mode: Mode,
        rand: &mut dyn NormRandomness<T>,
        bound: &BoundParams,
    ) -> Result<VarId> {
        let mut shared;
        let rand: &mut dyn NormRandomness<T> =
            if self.spec.share_window_across_layers && mode == Mode::Train {
                shared = SharedWindow { inner: rand, cached: None };
                &mut shared
            } else {
                rand
            };

        let mut cur = x;
        for (i, wiring) in self.stages.iter().enumerate() {
            let conv = tape.conv2d(cur, bound.ids[wiring.conv], wiring.stride, 1)?;
            let affine = match (wiring.gamma, wiring.beta) {
                (Some(g), Some(b)) => {
                    Some(AffineVars { gamma: bound.ids[g], beta: bound.ids[b] })
                }
                _ => None,
            };
            let normed = self.norm_layers[i].forward(
                tape,
                conv,
                mode,
                affine,
                rand,
                i,
                self.partitions[i].as_ref(),
            )?;
            cur = tape.relu(normed)?;
        }
        let pooled = tape.global_avgpool(cur)?;
        tape.linear(pooled, bound.ids[self.head_w], Some(bound.ids[self.head_b]))
    }

    /// Evaluation-mode logits with no gradient bookkeeping.
    pub fn infer(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::inference();
        let input = tape.constant(x.clone());
        let bound = self.bind(&mut tape);
        let logits = self.forward(&mut tape, input, Mode::Eval, &mut NoDraws, &bound)?;
        Ok(tape.value(logits).clone())
    }

    /// Copy accumulated leaf gradients back into `Param::tensor::grad`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) {
        for (param, &id) in self.params.iter_mut().zip(&bound.ids) {
            param.tensor.grad = tape.grad(id).map(|g| g.data().to_vec());
        }
    }

    /// Schedule entries for the offline window cache: one per WIN layer
    /// with a spatial strategy, in forward order.
    pub fn window_schedule(&self) -> (Vec<crate::window::LayerSchedule>, Vec<Option<BlockPartition>>) {
        let dims = self.spec.stage_dims();
        let mut layers = Vec::new();
        let mut parts = Vec::new();
        for (i, stage) in self.spec.stages.iter().enumerate() {
            if stage.norm.kind == NormKind::Win && stage.norm.strategy != Strategy::Speckle {
                layers.push(crate::window::LayerSchedule { layer_id: i, feature_dims: dims[i] });
                parts.push(self.partitions[i].clone());
            }
        }
        (layers, parts)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: one WT4 file per parameter plus a JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    cnn_spec: CnnSpec,
    param_files: Vec<(String, String)>,
    running_files: Vec<(usize, String, String)>,
    epoch: usize,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Model<f32> {
    pub fn save_checkpoint(&self, dir: &Path, epoch: usize, extra: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut param_files = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("param_{i:03}.wt4");
            write_wt4(&dir.join(&file), &p.tensor)?;
            param_files.push((p.name.clone(), file));
        }
        let mut running_files = Vec::new();
        for (i, layer) in self.norm_layers.iter().enumerate() {
            if let Some(running) = &layer.running {
                let c = running.mean.len();
                let mean_file = format!("running_mean_{i:03}.wt4");
                let var_file = format!("running_var_{i:03}.wt4");
                write_wt4(&dir.join(&mean_file), &Tensor4::new((1, c, 1, 1), running.mean.clone())?)?;
                write_wt4(&dir.join(&var_file), &Tensor4::new((1, c, 1, 1), running.var.clone())?)?;
                running_files.push((i, mean_file, var_file));
            }
        }
        let manifest = CheckpointManifest {
            cnn_spec: self.spec.clone(),
            param_files,
            running_files,
            epoch,
            extra,
        };
        let body = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), body)
            .map_err(|e| Error::io(dir.display().to_string(), e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, usize, serde_json::Value)> {
        let manifest_path = dir.join("manifest.json");
        let body = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&body)?;
        let mut model = build_model::<f32>(&manifest.cnn_spec)?;
        if manifest.param_files.len() != model.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} parameters, spec builds {}",
                manifest.param_files.len(),
                model.params.len()
            )));
        }
        for (i, (name, file)) in manifest.param_files.iter().enumerate() {
            if &model.params[i].name != name {
                return Err(Error::Integrity(format!(
                    "parameter {i} is {} in checkpoint, {} in spec",
                    name, model.params[i].name
                )));
            }
            let t = read_wt4(&dir.join(file))?;
            if t.dims() != model.params[i].tensor.dims() {
                return Err(Error::Integrity(format!("parameter {name} has dims {:?}", t.dims())));
            }
            let requires = model.params[i].tensor.requires_grad;
            model.params[i].tensor = t;
            model.params[i].tensor.requires_grad = requires;
        }
        for (i, mean_file, var_file) in &manifest.running_files {
            let mean = read_wt4(&dir.join(mean_file))?;
            let var = read_wt4(&dir.join(var_file))?;
            let layer = model
                .norm_layers
                .get_mut(*i)
                .ok_or_else(|| Error::Integrity(format!("running stats for layer {i}")))?;
            match &mut layer.running {
                Some(r) => {
                    if mean.len() != r.mean.len() || var.len() != r.var.len() {
                        return Err(Error::Integrity(format!("running stats dims for layer {i}")));
                    }
                    r.mean = mean.into_data();
                    r.var = var.into_data();
                }
                None => {
                    return Err(Error::Integrity(format!(
                        "layer {i} has running stats in checkpoint but none in spec"
                    )))
                }
            }
        }
        Ok((model, manifest.epoch, manifest.extra))
    }
}

use std::path::Path;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::OnlineRandomness;

    fn spec(kind: NormConfig) -> CnnSpec {
        CnnSpec::desk_default(kind, 4, 7)
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let s = spec(NormConfig::instance());
        let a = build_model::<f32>(&s).unwrap();
        let b = build_model::<f32>(&s).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.tensor.data().iter().zip(pb.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let mut s2 = s.clone();
        s2.init_seed = 8;
        let c = build_model::<f32>(&s2).unwrap();
        assert_ne!(
            a.params[0].tensor.data()[0].to_bits(),
            c.params[0].tensor.data()[0].to_bits()
        );
    }

    #[test]
    fn three_stage_model_produces_logits() {
        let s = spec(NormConfig::win());
        let mut model = build_model::<f32>(&s).unwrap();
        let mut rng = RngStream::new(11);
        let x = Tensor4::<f32>::fill_random_uniform((5, 3, 32, 32), &mut rng, 0.0, 1.0);
        let logits = model.infer(&x).unwrap();
        assert_eq!(logits.dims(), (5, 4, 1, 1));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [NormConfig::batch(), NormConfig::instance(), NormConfig::win()] {
            let s = spec(cfg);
            let model = build_model::<f32>(&s).unwrap();
            let total: usize = model.params.iter().map(|p| p.tensor.len()).sum();
            assert_eq!(total, s.param_count());
        }
        // Affine BN on (32, 64, 128): convs 864 + 18432 + 73728, affine
        // 2*(32+64+128), head 128*4 + 4.
        let s = spec(NormConfig::batch());
        assert_eq!(s.param_count(), 864 + 18432 + 73728 + 448 + 516);
    }

    #[test]
    fn collapsing_feature_plane_is_rejected() {
        let mut s = spec(NormConfig::instance());
        s.input_dims = (8, 8);
        s.patch_dims = (8, 8);
        // 8 -> 4 -> 2 -> 1: the last stage collapses below 2x2.
        assert!(build_model::<f32>(&s).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_invariant() {
        let s = spec(NormConfig::win());
        let mut model = build_model::<f32>(&s).unwrap();
        let mut rng = RngStream::new(13);
        let x = Tensor4::<f32>::fill_random_uniform((3, 3, 32, 32), &mut rng, 0.0, 1.0);
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        // Single instance evaluated alone matches its in-batch logits.
        let one = Tensor4::from_fn((1, 3, 32, 32), |_, c, h, w| x.at(1, c, h, w));
        let alone = model.infer(&one).unwrap();
        for k in 0..4 {
            assert_eq!(alone.at(0, k, 0, 0).to_bits(), a.at(1, k, 0, 0).to_bits());
        }
    }

    #[test]
    fn train_forward_with_win_layers_runs_and_differs_from_eval() {
        let s = spec(NormConfig::win());
        let mut model = build_model::<f32>(&s).unwrap();
        let mut rng = RngStream::new(17);
        let x = Tensor4::<f32>::fill_random_uniform((2, 3, 32, 32), &mut rng, 0.0, 1.0);
        let mut window = RngStream::named(3, "window");
        let mut lambda = RngStream::named(3, "lambda");
        let mut rand = OnlineRandomness { window: &mut window, lambda: &mut lambda };
        let mut tape = Tape::inference();
        let input = tape.constant(x.clone());
        let bound = model.bind(&mut tape);
        let train_logits = model.forward(&mut tape, input, Mode::Train, &mut rand, &bound).unwrap();
        let eval_logits = model.infer(&x).unwrap();
        let differs = tape
            .value(train_logits)
            .data()
            .iter()
            .zip(eval_logits.data())
            .any(|(a, b)| (a - b).abs() > 1e-7);
        assert!(differs, "window statistics should perturb the logits");
    }

    #[test]
    fn block_strategy_builds_partitions_per_stage() {
        let mut cfg = NormConfig::win();
        cfg.strategy = Strategy::Block;
        let s = spec(cfg);
        let model = build_model::<f32>(&s).unwrap();
        // 32x32 input, 8x8 patches: 16 blocks at every scale.
        for (i, part) in model.partitions.iter().enumerate() {
            let part = part.as_ref().expect("partition per WIN/Block stage");
            assert_eq!(part.block_count(), 16, "stage {i}");
        }
        let dims = s.stage_dims();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4)]);
        assert_eq!(model.partitions[2].as_ref().unwrap().block_dims, (1, 1));
    }

    #[test]
    fn shared_window_mode_runs() {
        let mut s = spec(NormConfig::win());
        s.share_window_across_layers = true;
        let mut model = build_model::<f32>(&s).unwrap();
        let mut rng = RngStream::new(19);
        let x = Tensor4::<f32>::fill_random_uniform((2, 3, 32, 32), &mut rng, 0.0, 1.0);
        let mut window = RngStream::named(5, "window");
        let mut lambda = RngStream::named(5, "lambda");
        let mut rand = OnlineRandomness { window: &mut window, lambda: &mut lambda };
        let mut tape = Tape::inference();
        let input = tape.constant(x);
        let bound = model.bind(&mut tape);
        model.forward(&mut tape, input, Mode::Train, &mut rand, &bound).unwrap();
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(NormConfig::batch());
        let mut model = build_model::<f32>(&s).unwrap();
        // Nudge the running buffers so the round trip is non-trivial.
        for layer in &mut model.norm_layers {
            if let Some(r) = &mut layer.running {
                for (i, m) in r.mean.iter_mut().enumerate() {
                    *m = i as f32 * 0.01;
                }
            }
        }
        model
            .save_checkpoint(dir.path(), 3, serde_json::json!({"note": "test"}))
            .unwrap();
        let (back, epoch, extra) = Model::load_checkpoint(dir.path()).unwrap();
        assert_eq!(epoch, 3);
        assert_eq!(extra["note"], "test");
        assert_eq!(back.spec, model.spec);
        for (a, b) in model.params.iter().zip(&back.params) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (a, b) in model.norm_layers.iter().zip(&back.norm_layers) {
            assert_eq!(a.running.as_ref().map(|r| &r.mean), b.running.as_ref().map(|r| &r.mean));
        }
    }

    #[test]
    fn corrupted_checkpoint_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(NormConfig::instance());
        let model = build_model::<f32>(&s).unwrap();
        model.save_checkpoint(dir.path(), 0, serde_json::Value::Null).unwrap();
        std::fs::remove_file(dir.path().join("param_000.wt4")).unwrap();
        assert!(Model::load_checkpoint(dir.path()).is_err());
    }
}
