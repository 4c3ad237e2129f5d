//! Normalization statistics and layers.
//!
//! Covers per-channel batch statistics with running averages, per-instance
//! spatial statistics, window/block/pixel/mask local statistics, speckle
//! perturbation, beta-weighted mixing of local and global statistics, and
//! the standardize + affine transform, all packaged as differentiable
//! layers with distinct train/eval behavior: training may perturb the
//! statistics, evaluation always uses the global (per-instance) ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor4};
use crate::window::{region_for_strategy, BlockPartition, CachedDraw, Region, Strategy, WindowCache};

/// Normalization family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "BN")]
    Batch,
    #[serde(rename = "IN")]
    Instance,
    #[serde(rename = "WIN")]
    Win,
}

/// Which statistics the local/global mixing applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatSubset {
    Both,
    MeanOnly,
    VarOnly,
}

impl StatSubset {
    pub fn uses_local_mean(self) -> bool {
        matches!(self, StatSubset::Both | StatSubset::MeanOnly)
    }
    pub fn uses_local_var(self) -> bool {
        matches!(self, StatSubset::Both | StatSubset::VarOnly)
    }
}

/// Full configuration of one normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub kind: NormKind,
    #[serde(default = "defaults::strategy")]
    pub strategy: Strategy,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::stat_subset")]
    pub stat_subset: StatSubset,
    #[serde(default = "defaults::mixing")]
    pub mixing: bool,
    #[serde(default)]
    pub affine: bool,
    /// Evaluation always standardizes with global statistics; kept visible
    /// (and fixed) so configs are explicit about the eval contract.
    #[serde(default = "defaults::yes")]
    pub eval_uses_global: bool,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::speckle_magnitude")]
    pub speckle_magnitude: f64,
}

mod defaults {
    use super::{StatSubset, Strategy};
    pub fn strategy() -> Strategy {
        Strategy::Window
    }
    pub fn tau() -> f64 {
        0.7
    }
    pub fn alpha() -> f64 {
        0.1
    }
    pub fn eps() -> f64 {
        1e-5
    }
    pub fn stat_subset() -> StatSubset {
        StatSubset::Both
    }
    pub fn mixing() -> bool {
        true
    }
    pub fn yes() -> bool {
        true
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn speckle_magnitude() -> f64 {
        0.2
    }
}

impl NormConfig {
    pub fn batch() -> Self {
        NormConfig { kind: NormKind::Batch, affine: true, ..Self::win() }
    }

    pub fn instance() -> Self {
        NormConfig { kind: NormKind::Instance, ..Self::win() }
    }

    pub fn win() -> Self {
        NormConfig {
            kind: NormKind::Win,
            strategy: defaults::strategy(),
            tau: defaults::tau(),
            alpha: defaults::alpha(),
            eps: defaults::eps(),
            stat_subset: defaults::stat_subset(),
            mixing: defaults::mixing(),
            affine: false,
            eval_uses_global: true,
            momentum: defaults::momentum(),
            speckle_magnitude: defaults::speckle_magnitude(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig(format!("eps {} must be > 0", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !self.eval_uses_global {
            return Err(Error::InvalidConfig("eval_uses_global is fixed to true".into()));
        }
        if self.kind == NormKind::Win && self.strategy == Strategy::Speckle && self.speckle_magnitude <= 0.0 {
            return Err(Error::InvalidConfig("speckle magnitude must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-(instance, channel) mean and population variance, shape N x C.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsNC<T: Real> {
    pub n: usize,
    pub c: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel mean and population variance, shape C.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsC<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> StatsC<T> {
    /// Replicate channel statistics across N instances.
    pub fn broadcast_nc(&self, n: usize) -> StatsNC<T> {
        let c = self.mean.len();
        let mut mean = Vec::with_capacity(n * c);
        let mut var = Vec::with_capacity(n * c);
        for _ in 0..n {
            mean.extend_from_slice(&self.mean);
            var.extend_from_slice(&self.var);
        }
        StatsNC { n, c, mean, var }
    }
}

/// Exponential-moving-average buffers for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize, momentum: T) -> Self {
        RunningStats { mean: vec![T::ZERO; channels], var: vec![T::ONE; channels], momentum }
    }
}

/// Trainable per-channel affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> AffineParams<T> {
    pub fn identity(channels: usize) -> Self {
        AffineParams { gamma: vec![T::ONE; channels], beta: vec![T::ZERO; channels] }
    }
}

// ---------------------------------------------------------------------------
// Value-level statistics (thin wrappers over the differentiable kernels)
// ---------------------------------------------------------------------------

/// Per-channel statistics over (N, H, W).
pub fn bn_stats<T: Real>(f: &Tensor4<T>) -> Result<StatsC<T>> {
    let mut tape = Tape::inference();
    let id = tape.constant(f.clone());
    let m = tape.reduce_mean_nhw(id)?;
    let centered = tape.sub(id, m)?;
    let sq = tape.mul(centered, centered)?;
    let v = tape.reduce_mean_nhw(sq)?;
    Ok(StatsC { mean: tape.value(m).data().to_vec(), var: tape.value(v).data().to_vec() })
}

/// running' = p * running + (1 - p) * batch, elementwise for mean and var.
pub fn bn_update_running<T: Real>(running: &mut RunningStats<T>, batch: &StatsC<T>) {
    let p = running.momentum;
    let q = T::ONE - p;
    for (r, &b) in running.mean.iter_mut().zip(&batch.mean) {
        *r = p * *r + q * b;
    }
    for (r, &b) in running.var.iter_mut().zip(&batch.var) {
        *r = p * *r + q * b;
    }
}

/// Per-(instance, channel) spatial statistics.
pub fn in_stats<T: Real>(f: &Tensor4<T>) -> Result<StatsNC<T>> {
    win_stats(f, &Region::Full)
}

/// Per-(instance, channel) statistics over a pixel region. With the full
/// plane this is exactly `in_stats`.
pub fn win_stats<T: Real>(f: &Tensor4<T>, region: &Region) -> Result<StatsNC<T>> {
    let mut tape = Tape::inference();
    let id = tape.constant(f.clone());
    let (m, v) = tape.reduce_mean_var_region(id, region)?;
    Ok(StatsNC {
        n: f.n(),
        c: f.c(),
        mean: tape.value(m).data().to_vec(),
        var: tape.value(v).data().to_vec(),
    })
}

/// Multiplicative perturbation factors for speckle statistics: one pair
/// `(1 + eta1, |1 + eta2|)` per (n, c), with eta ~ Normal(0, magnitude^2).
pub fn speckle_factors<T: Real>(
    rng: &mut RngStream,
    n: usize,
    c: usize,
    magnitude: f64,
) -> (Vec<T>, Vec<T>) {
    let mut mean_f = Vec::with_capacity(n * c);
    let mut var_f = Vec::with_capacity(n * c);
    for _ in 0..n * c {
        mean_f.push(T::from_f64(1.0 + magnitude * rng.normal()));
        var_f.push(T::from_f64((1.0 + magnitude * rng.normal()).abs()));
    }
    (mean_f, var_f)
}

/// Global statistics perturbed multiplicatively by speckle noise.
pub fn speckle_stats<T: Real>(
    f: &Tensor4<T>,
    rng: &mut RngStream,
    magnitude: f64,
) -> Result<StatsNC<T>> {
    if magnitude <= 0.0 {
        return Err(Error::InvalidConfig(format!("speckle magnitude {magnitude} must be > 0")));
    }
    let mut stats = in_stats(f)?;
    let (mf, vf) = speckle_factors::<T>(rng, stats.n, stats.c, magnitude);
    for (m, s) in stats.mean.iter_mut().zip(&mf) {
        *m = *m * *s;
    }
    for (v, s) in stats.var.iter_mut().zip(&vf) {
        *v = *v * *s;
    }
    Ok(stats)
}

/// Convex mixing of local and global statistics with per-(n, c) weights.
/// `mean_only` mixes the mean and keeps the global variance; `var_only`
/// is symmetric.
pub fn mix_stats<T: Real>(
    local: &StatsNC<T>,
    global: &StatsNC<T>,
    lambda: &[T],
    subset: StatSubset,
) -> Result<StatsNC<T>> {
    if local.n != global.n || local.c != global.c {
        return Err(Error::shape("mix_stats", format!("{}x{} vs {}x{}", local.n, local.c, global.n, global.c)));
    }
    if lambda.len() != local.n * local.c {
        return Err(Error::shape("mix_stats", format!("{} weights for {} planes", lambda.len(), local.n * local.c)));
    }
    if lambda.iter().any(|l| *l < T::ZERO || *l > T::ONE) {
        return Err(Error::InvalidConfig("mixing weight outside [0, 1]".into()));
    }
    let mix = |a: &[T], b: &[T]| -> Vec<T> {
        lambda
            .iter()
            .zip(a.iter().zip(b))
            .map(|(&l, (&x, &y))| l * x + (T::ONE - l) * y)
            .collect()
    };
    Ok(StatsNC {
        n: local.n,
        c: local.c,
        mean: if subset.uses_local_mean() { mix(&local.mean, &global.mean) } else { global.mean.clone() },
        var: if subset.uses_local_var() { mix(&local.var, &global.var) } else { global.var.clone() },
    })
}

/// Standardize with per-(n, c) statistics, then optionally apply the
/// per-channel affine transform.
pub fn standardize_affine<T: Real>(
    f: &Tensor4<T>,
    stats: &StatsNC<T>,
    eps: f64,
    affine: Option<&AffineParams<T>>,
) -> Result<Tensor4<T>> {
    let (n, c, h, w) = f.dims();
    if stats.n != n || stats.c != c {
        return Err(Error::shape("standardize_affine", format!("stats {}x{} vs tensor {n}x{c}", stats.n, stats.c)));
    }
    if let Some(a) = affine {
        if a.gamma.len() != c || a.beta.len() != c {
            return Err(Error::shape("standardize_affine", "affine params must have C entries"));
        }
    }
    let eps = T::from_f64(eps);
    let mut out = Tensor4::zeros(f.dims());
    for ni in 0..n {
        for ci in 0..c {
            let plane = ni * c + ci;
            let mu = stats.mean[plane];
            let denom = (stats.var[plane] + eps).sqrt();
            let (g, b) = match affine {
                Some(a) => (a.gamma[ci], a.beta[ci]),
                None => (T::ONE, T::ZERO),
            };
            let base = plane * h * w;
            for i in base..base + h * w {
                out.data_mut()[i] = g * (f.data()[i] - mu) / denom + b;
            }
        }
    }
    if !out.all_finite() {
        return Err(Error::degenerate("standardize_affine", "non-finite output"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Randomness plumbing for layers
// ---------------------------------------------------------------------------

/// Source of the per-forward random draws a WIN layer consumes. Online
/// training, cached (offline) training and frozen replay for gradient
/// checks all implement this.
pub trait NormRandomness<T: Real> {
    fn region(
        &mut self,
        layer_id: usize,
        dims: (usize, usize),
        cfg: &NormConfig,
        partition: Option<&BlockPartition>,
    ) -> Result<Region>;

    /// Mixing weights, one per (n, c), all in [0, 1].
    fn lambda(&mut self, layer_id: usize, n: usize, c: usize, cfg: &NormConfig) -> Result<Vec<T>>;

    /// Speckle factors `(1 + eta1, |1 + eta2|)`, one pair per (n, c).
    fn speckle(&mut self, layer_id: usize, n: usize, c: usize, magnitude: f64)
        -> Result<(Vec<T>, Vec<T>)>;
}

/// Draw everything on the fly from the window and lambda streams. Speckle
/// noise replaces the window draw, so it comes from the window stream.
pub struct OnlineRandomness<'a> {
    pub window: &'a mut RngStream,
    pub lambda: &'a mut RngStream,
}

impl<T: Real> NormRandomness<T> for OnlineRandomness<'_> {
    fn region(
        &mut self,
        _layer_id: usize,
        dims: (usize, usize),
        cfg: &NormConfig,
        partition: Option<&BlockPartition>,
    ) -> Result<Region> {
        region_for_strategy(cfg.strategy, self.window, dims, cfg.tau, partition)
    }

    fn lambda(&mut self, _layer_id: usize, n: usize, c: usize, cfg: &NormConfig) -> Result<Vec<T>> {
        let mut raw = vec![0.0f64; n * c];
        self.lambda.beta_fill(cfg.alpha, &mut raw);
        Ok(raw.into_iter().map(T::from_f64).collect())
    }

    fn speckle(
        &mut self,
        _layer_id: usize,
        n: usize,
        c: usize,
        magnitude: f64,
    ) -> Result<(Vec<T>, Vec<T>)> {
        Ok(speckle_factors(self.window, n, c, magnitude))
    }
}

/// Replay pre-drawn window parameters from an epoch cache; mixing weights
/// still come from the lambda stream (only window parameters are cached).
pub struct CachedRandomness<'a> {
    pub cache: &'a WindowCache,
    pub step: usize,
    pub lambda: &'a mut RngStream,
}

impl<T: Real> NormRandomness<T> for CachedRandomness<'_> {
    fn region(
        &mut self,
        layer_id: usize,
        dims: (usize, usize),
        _cfg: &NormConfig,
        partition: Option<&BlockPartition>,
    ) -> Result<Region> {
        match self.cache.replay(layer_id, self.step)? {
            CachedDraw::Full => Ok(Region::Full),
            CachedDraw::Window { window } => {
                window.validate(dims.0, dims.1)?;
                Ok(Region::Window(*window))
            }
            CachedDraw::Blocks { indices } => {
                let part = partition.ok_or_else(|| {
                    Error::InvalidConfig("cached block draw needs a partition".into())
                })?;
                Ok(Region::Blocks(indices.iter().map(|&i| part.rect(i)).collect()))
            }
        }
    }

    fn lambda(&mut self, _layer_id: usize, n: usize, c: usize, cfg: &NormConfig) -> Result<Vec<T>> {
        let mut raw = vec![0.0f64; n * c];
        self.lambda.beta_fill(cfg.alpha, &mut raw);
        Ok(raw.into_iter().map(T::from_f64).collect())
    }

    fn speckle(
        &mut self,
        _layer_id: usize,
        _n: usize,
        _c: usize,
        _magnitude: f64,
    ) -> Result<(Vec<T>, Vec<T>)> {
        Err(Error::InvalidConfig("speckle noise cannot be replayed from a window cache".into()))
    }
}

/// Record of every draw consumed during one forward pass.
#[derive(Clone, Debug)]
pub struct RandomnessLog<T: Real> {
    pub regions: Vec<(usize, Region)>,
    pub lambdas: Vec<(usize, Vec<T>)>,
    pub speckles: Vec<(usize, (Vec<T>, Vec<T>))>,
}

impl<T: Real> Default for RandomnessLog<T> {
    fn default() -> Self {
        RandomnessLog { regions: Vec::new(), lambdas: Vec::new(), speckles: Vec::new() }
    }
}

/// Wraps another source and logs what it hands out, so a later frozen
/// replay can reproduce the pass exactly (used by finite-difference
/// checks, which must re-run the forward with identical randomness).
pub struct RecordingRandomness<'a, T: Real> {
    pub inner: &'a mut dyn NormRandomness<T>,
    pub log: RandomnessLog<T>,
}

impl<'a, T: Real> RecordingRandomness<'a, T> {
    pub fn new(inner: &'a mut dyn NormRandomness<T>) -> Self {
        RecordingRandomness { inner, log: RandomnessLog::default() }
    }
}

impl<T: Real> NormRandomness<T> for RecordingRandomness<'_, T> {
    fn region(
        &mut self,
        layer_id: usize,
        dims: (usize, usize),
        cfg: &NormConfig,
        partition: Option<&BlockPartition>,
    ) -> Result<Region> {
        let r = self.inner.region(layer_id, dims, cfg, partition)?;
        self.log.regions.push((layer_id, r.clone()));
        Ok(r)
    }

    fn lambda(&mut self, layer_id: usize, n: usize, c: usize, cfg: &NormConfig) -> Result<Vec<T>> {
        let l = self.inner.lambda(layer_id, n, c, cfg)?;
        self.log.lambdas.push((layer_id, l.clone()));
        Ok(l)
    }

    fn speckle(
        &mut self,
        layer_id: usize,
        n: usize,
        c: usize,
        magnitude: f64,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let s = self.inner.speckle(layer_id, n, c, magnitude)?;
        self.log.speckles.push((layer_id, s.clone()));
        Ok(s)
    }
}

/// Replays a [`RandomnessLog`] in recorded order.
pub struct FrozenRandomness<'a, T: Real> {
    log: &'a RandomnessLog<T>,
    region_cursor: usize,
    lambda_cursor: usize,
    speckle_cursor: usize,
}

impl<'a, T: Real> FrozenRandomness<'a, T> {
    pub fn new(log: &'a RandomnessLog<T>) -> Self {
        FrozenRandomness { log, region_cursor: 0, lambda_cursor: 0, speckle_cursor: 0 }
    }
}

impl<T: Real> NormRandomness<T> for FrozenRandomness<'_, T> {
    fn region(
        &mut self,
        layer_id: usize,
        _dims: (usize, usize),
        _cfg: &NormConfig,
        _partition: Option<&BlockPartition>,
    ) -> Result<Region> {
        let (id, r) = self
            .log
            .regions
            .get(self.region_cursor)
            .ok_or_else(|| Error::InvalidConfig("frozen randomness exhausted".into()))?;
        if *id != layer_id {
            return Err(Error::InvalidConfig(format!(
                "frozen replay order mismatch: recorded layer {id}, asked for {layer_id}"
            )));
        }
        self.region_cursor += 1;
        Ok(r.clone())
    }

    fn lambda(&mut self, layer_id: usize, _n: usize, _c: usize, _cfg: &NormConfig) -> Result<Vec<T>> {
        let (id, l) = self
            .log
            .lambdas
            .get(self.lambda_cursor)
            .ok_or_else(|| Error::InvalidConfig("frozen randomness exhausted".into()))?;
        if *id != layer_id {
            return Err(Error::InvalidConfig("frozen replay order mismatch".into()));
        }
        self.lambda_cursor += 1;
        Ok(l.clone())
    }

    fn speckle(
        &mut self,
        layer_id: usize,
        _n: usize,
        _c: usize,
        _magnitude: f64,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let (id, s) = self
            .log
            .speckles
            .get(self.speckle_cursor)
            .ok_or_else(|| Error::InvalidConfig("frozen randomness exhausted".into()))?;
        if *id != layer_id {
            return Err(Error::InvalidConfig("frozen replay order mismatch".into()));
        }
        self.speckle_cursor += 1;
        Ok(s.clone())
    }
}

// ---------------------------------------------------------------------------
// The layer
// ---------------------------------------------------------------------------

/// Forward mode of a layer or model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles of the bound affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub gamma: VarId,
    pub beta: VarId,
}

/// One normalization layer. Stateless except for the batch-norm running
/// buffers; affine parameters live with the model and are bound per call.
#[derive(Clone, Debug)]
pub struct NormLayer<T: Real> {
    pub config: NormConfig,
    pub channels: usize,
    pub running: Option<RunningStats<T>>,
}

impl<T: Real> NormLayer<T> {
    pub fn new(config: NormConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        let running = match config.kind {
            NormKind::Batch => Some(RunningStats::new(channels, T::from_f64(config.momentum))),
            _ => None,
        };
        Ok(NormLayer { config, channels, running })
    }

    /// Normalize `f`. In train mode WIN layers draw a region and mixing
    /// weights from `rand`; in eval mode WIN behaves exactly like IN.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        f: VarId,
        mode: Mode,
        affine: Option<AffineVars>,
        rand: &mut dyn NormRandomness<T>,
        layer_id: usize,
        partition: Option<&BlockPartition>,
    ) -> Result<VarId> {
        let dims = tape.value(f).dims();
        let (n, c, h, w) = dims;
        if c != self.channels {
            return Err(Error::shape("norm_layer_forward", format!("{c} channels, layer has {}", self.channels)));
        }
        if self.config.affine != affine.is_some() {
            return Err(Error::InvalidConfig(
                "affine flag and bound affine parameters disagree".into(),
            ));
        }
        let eps = T::from_f64(self.config.eps);

        let (mean, var) = match (self.config.kind, mode) {
            (NormKind::Batch, Mode::Train) => {
                let m = tape.reduce_mean_nhw(f)?;
                let centered = tape.sub(f, m)?;
                let sq = tape.mul(centered, centered)?;
                let v = tape.reduce_mean_nhw(sq)?;
                let batch = StatsC {
                    mean: tape.value(m).data().to_vec(),
                    var: tape.value(v).data().to_vec(),
                };
                if let Some(running) = &mut self.running {
                    bn_update_running(running, &batch);
                }
                (m, v)
            }
            (NormKind::Batch, Mode::Eval) => {
                let running = self.running.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("batch norm layer missing running stats".into())
                })?;
                let m = tape.constant(Tensor4::new((1, c, 1, 1), running.mean.clone())?);
                let v = tape.constant(Tensor4::new((1, c, 1, 1), running.var.clone())?);
                (m, v)
            }
            (NormKind::Instance, _) | (NormKind::Win, Mode::Eval) => {
                tape.reduce_mean_var_region(f, &Region::Full)?
            }
            (NormKind::Win, Mode::Train) => {
                if self.config.strategy == Strategy::Speckle {
                    let (gm, gv) = tape.reduce_mean_var_region(f, &Region::Full)?;
                    let (mf, vf) = rand.speckle(layer_id, n, c, self.config.speckle_magnitude)?;
                    let mf = tape.constant(Tensor4::new((n, c, 1, 1), mf)?);
                    let vf = tape.constant(Tensor4::new((n, c, 1, 1), vf)?);
                    (tape.mul(gm, mf)?, tape.mul(gv, vf)?)
                } else {
                    let region = rand.region(layer_id, (h, w), &self.config, partition)?;
                    let local = tape.reduce_mean_var_region(f, &region)?;
                    if self.config.mixing {
                        let global = tape.reduce_mean_var_region(f, &Region::Full)?;
                        let lam = rand.lambda(layer_id, n, c, &self.config)?;
                        if lam.len() != n * c || lam.iter().any(|l| *l < T::ZERO || *l > T::ONE) {
                            return Err(Error::InvalidConfig("mixing weight outside [0, 1]".into()));
                        }
                        let comp: Vec<T> = lam.iter().map(|&l| T::ONE - l).collect();
                        let lam = tape.constant(Tensor4::new((n, c, 1, 1), lam)?);
                        let comp = tape.constant(Tensor4::new((n, c, 1, 1), comp)?);
                        let mix = |tape: &mut Tape<T>, a: VarId, b: VarId| -> Result<VarId> {
                            let la = tape.mul(a, lam)?;
                            let gb = tape.mul(b, comp)?;
                            tape.add(la, gb)
                        };
                        let mean = if self.config.stat_subset.uses_local_mean() {
                            mix(tape, local.0, global.0)?
                        } else {
                            global.0
                        };
                        let var = if self.config.stat_subset.uses_local_var() {
                            mix(tape, local.1, global.1)?
                        } else {
                            global.1
                        };
                        (mean, var)
                    } else {
                        // No mixing is the lambda = 1 limit: pure local
                        // statistics, subject to the stat subset.
                        match self.config.stat_subset {
                            StatSubset::Both => local,
                            StatSubset::MeanOnly => {
                                let global = tape.reduce_mean_var_region(f, &Region::Full)?;
                                (local.0, global.1)
                            }
                            StatSubset::VarOnly => {
                                let global = tape.reduce_mean_var_region(f, &Region::Full)?;
                                (global.0, local.1)
                            }
                        }
                    }
                }
            }
        };

        let centered = tape.sub(f, mean)?;
        let veps = tape.add_scalar(var, eps)?;
        let denom = tape.sqrt(veps)?;
        let mut out = tape.div(centered, denom)?;
        if let Some(aff) = affine {
            out = tape.mul(out, aff.gamma)?;
            out = tape.add(out, aff.beta)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::{sample_window, WindowSpec};

    fn t4(dims: (usize, usize, usize, usize), data: &[f64]) -> Tensor4<f64> {
        Tensor4::new(dims, data.to_vec()).unwrap()
    }

    fn random_t4(dims: (usize, usize, usize, usize), rng: &mut RngStream) -> Tensor4<f64> {
        Tensor4::fill_random_uniform(dims, rng, -2.0, 2.0)
    }

    #[test]
    fn bn_stats_constant_input() {
        let f = Tensor4::<f64>::full((4, 3, 5, 5), 3.0);
        let s = bn_stats(&f).unwrap();
        for c in 0..3 {
            assert_eq!(s.mean[c], 3.0);
            assert_eq!(s.var[c], 0.0);
        }
    }

    #[test]
    fn bn_running_update_momentum_zero_copies_batch() {
        let mut running = RunningStats::<f64>::new(2, 0.0);
        let batch = StatsC { mean: vec![1.5, -0.5], var: vec![2.0, 0.25] };
        bn_update_running(&mut running, &batch);
        assert_eq!(running.mean, batch.mean);
        assert_eq!(running.var, batch.var);
    }

    #[test]
    fn bn_running_update_is_ema() {
        let mut running = RunningStats::<f64>::new(1, 0.9);
        let batch = StatsC { mean: vec![1.0], var: vec![3.0] };
        bn_update_running(&mut running, &batch);
        assert!((running.mean[0] - 0.1).abs() < 1e-12);
        assert!((running.var[0] - (0.9 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn bn_stats_match_loop_oracle() {
        let mut rng = RngStream::new(17);
        let f = random_t4((4, 3, 5, 5), &mut rng);
        let s = bn_stats(&f).unwrap();
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for h in 0..5 {
                    for w in 0..5 {
                        vals.push(f.at(n, c, h, w));
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!((s.mean[c] - mean).abs() < 1e-10);
            assert!((s.var[c] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn in_stats_2x2_example() {
        let f = t4((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let s = in_stats(&f).unwrap();
        assert_eq!(s.mean, vec![2.5]);
        assert_eq!(s.var, vec![1.25]);
    }

    #[test]
    fn in_stats_identical_instances_have_identical_rows() {
        let mut rng = RngStream::new(23);
        let plane = random_t4((1, 3, 4, 4), &mut rng);
        let doubled = Tensor4::from_fn((2, 3, 4, 4), |_, c, h, w| plane.at(0, c, h, w));
        let s = in_stats(&doubled).unwrap();
        for c in 0..3 {
            assert_eq!(s.mean[c], s.mean[3 + c]);
            assert_eq!(s.var[c], s.var[3 + c]);
        }
    }

    #[test]
    fn win_stats_right_column_example() {
        // Plane [[1,2],[3,4]]: the right column holds {2, 4}.
        let f = t4((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let win = WindowSpec::new(1, 0, 2, 2);
        let s = win_stats(&f, &Region::Window(win)).unwrap();
        assert_eq!(s.mean, vec![3.0]);
        assert_eq!(s.var, vec![1.0]);
    }

    #[test]
    fn win_stats_full_plane_equals_in_stats_bitwise() {
        let mut rng = RngStream::new(31);
        let f = random_t4((2, 3, 8, 8), &mut rng);
        let a = in_stats(&f).unwrap();
        let b = win_stats(&f, &Region::Window(WindowSpec::full(8, 8))).unwrap();
        for i in 0..6 {
            assert_eq!(a.mean[i].to_bits(), b.mean[i].to_bits());
            assert_eq!(a.var[i].to_bits(), b.var[i].to_bits());
        }
    }

    #[test]
    fn win_stats_blocks_match_pooled_identity() {
        // var over the union must equal E[x^2] - E[x]^2 on the union.
        let mut rng = RngStream::new(37);
        let f = random_t4((2, 2, 8, 8), &mut rng);
        let blocks = vec![WindowSpec::new(0, 0, 4, 4), WindowSpec::new(4, 4, 8, 8)];
        let region = Region::Blocks(blocks.clone());
        let s = win_stats(&f, &region).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                let mut vals = Vec::new();
                for b in &blocks {
                    for h in b.y0..b.y1 {
                        for w in b.x0..b.x1 {
                            vals.push(f.at(n, c, h, w));
                        }
                    }
                }
                let e1 = vals.iter().sum::<f64>() / vals.len() as f64;
                let e2 = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
                let i = n * 2 + c;
                assert!((s.mean[i] - e1).abs() < 1e-10);
                assert!((s.var[i] - (e2 - e1 * e1)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn speckle_stats_tiny_magnitude_approaches_in_stats() {
        let mut rng = RngStream::new(41);
        let f = random_t4((2, 2, 6, 6), &mut rng);
        let base = in_stats(&f).unwrap();
        let mut noise = RngStream::new(5);
        let s = speckle_stats(&f, &mut noise, 1e-9).unwrap();
        for i in 0..4 {
            assert!((s.mean[i] - base.mean[i]).abs() < 1e-6);
            assert!((s.var[i] - base.var[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn speckle_variance_never_negative() {
        let mut rng = RngStream::new(43);
        let f = random_t4((4, 4, 4, 4), &mut rng);
        let mut noise = RngStream::new(6);
        for _ in 0..200 {
            let s = speckle_stats(&f, &mut noise, 3.0).unwrap();
            assert!(s.var.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn speckle_perturbation_scale_matches_magnitude() {
        // The mean factor is 1 + eta with eta ~ N(0, magnitude^2); its
        // empirical std over many draws must approach the magnitude.
        let magnitude = 0.2;
        let mut noise = RngStream::new(7);
        let draws = 10_000;
        let (mf, _) = speckle_factors::<f64>(&mut noise, draws, 1, magnitude);
        let mean = mf.iter().sum::<f64>() / draws as f64;
        let var = mf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / draws as f64;
        let std = var.sqrt();
        assert!((std - magnitude).abs() / magnitude < 0.05, "std {std} vs {magnitude}");
    }

    #[test]
    fn mix_stats_lambda_zero_returns_global_exactly() {
        let mut rng = RngStream::new(47);
        let f = random_t4((2, 3, 8, 8), &mut rng);
        let local = win_stats(&f, &Region::Window(WindowSpec::new(0, 0, 4, 4))).unwrap();
        let global = in_stats(&f).unwrap();
        let lam = vec![0.0; 6];
        let mixed = mix_stats(&local, &global, &lam, StatSubset::Both).unwrap();
        for i in 0..6 {
            assert_eq!(mixed.mean[i].to_bits(), global.mean[i].to_bits());
            assert_eq!(mixed.var[i].to_bits(), global.var[i].to_bits());
        }
        // lambda = 1 selects the local statistics.
        let ones = vec![1.0; 6];
        let mixed = mix_stats(&local, &global, &ones, StatSubset::Both).unwrap();
        for i in 0..6 {
            assert!((mixed.mean[i] - local.mean[i]).abs() < 1e-15);
            assert!((mixed.var[i] - local.var[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_stats_halfway_example() {
        let local = StatsNC { n: 1, c: 1, mean: vec![3.0], var: vec![2.0] };
        let global = StatsNC { n: 1, c: 1, mean: vec![2.5], var: vec![1.0] };
        let mixed = mix_stats(&local, &global, &[0.5], StatSubset::Both).unwrap();
        assert!((mixed.mean[0] - 2.75).abs() < 1e-15);
        assert!((mixed.var[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn mix_stats_subsets() {
        let local = StatsNC { n: 1, c: 1, mean: vec![3.0], var: vec![2.0] };
        let global = StatsNC { n: 1, c: 1, mean: vec![2.0], var: vec![1.0] };
        let m = mix_stats(&local, &global, &[1.0], StatSubset::MeanOnly).unwrap();
        assert_eq!((m.mean[0], m.var[0]), (3.0, 1.0));
        let v = mix_stats(&local, &global, &[1.0], StatSubset::VarOnly).unwrap();
        assert_eq!((v.mean[0], v.var[0]), (2.0, 2.0));
    }

    #[test]
    fn mix_stats_is_a_convex_combination() {
        let mut rng = RngStream::new(53);
        for _ in 0..50 {
            let f = random_t4((2, 2, 6, 6), &mut rng);
            let win = sample_window(&mut rng, (6, 6), 0.5).unwrap();
            let local = win_stats(&f, &Region::Window(win)).unwrap();
            let global = in_stats(&f).unwrap();
            let lam: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let mixed = mix_stats(&local, &global, &lam, StatSubset::Both).unwrap();
            for i in 0..4 {
                let (lo, hi) = (local.var[i].min(global.var[i]), local.var[i].max(global.var[i]));
                assert!(mixed.var[i] >= lo - 1e-12 && mixed.var[i] <= hi + 1e-12);
                let (lo, hi) = (local.mean[i].min(global.mean[i]), local.mean[i].max(global.mean[i]));
                assert!(mixed.mean[i] >= lo - 1e-12 && mixed.mean[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn mix_stats_rejects_out_of_range_lambda() {
        let s = StatsNC { n: 1, c: 1, mean: vec![0.0], var: vec![1.0] };
        assert!(mix_stats(&s, &s, &[1.5], StatSubset::Both).is_err());
        assert!(mix_stats(&s, &s, &[-0.1], StatSubset::Both).is_err());
    }

    #[test]
    fn standardize_basic_example() {
        let f = t4((1, 1, 1, 2), &[1.0, 3.0]);
        let stats = StatsNC { n: 1, c: 1, mean: vec![2.0], var: vec![1.0] };
        let out = standardize_affine(&f, &stats, 1e-12, None).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-6);
        assert!((out.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identity_affine_changes_nothing() {
        let mut rng = RngStream::new(59);
        let f = random_t4((2, 3, 4, 4), &mut rng);
        let stats = in_stats(&f).unwrap();
        let plain = standardize_affine(&f, &stats, 1e-5, None).unwrap();
        let affine = AffineParams::identity(3);
        let with = standardize_affine(&f, &stats, 1e-5, Some(&affine)).unwrap();
        for (a, b) in plain.data().iter().zip(with.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn standardized_output_is_zero_mean_unit_var() {
        let mut rng = RngStream::new(61);
        let f = random_t4((3, 4, 8, 8), &mut rng);
        let stats = in_stats(&f).unwrap();
        let out = standardize_affine(&f, &stats, 1e-5, None).unwrap();
        let s = in_stats(&out).unwrap();
        for i in 0..12 {
            assert!(s.mean[i].abs() <= 1e-5, "mean {}", s.mean[i]);
            assert!(s.var[i] > 1.0 - 1e-3 && s.var[i] <= 1.0, "var {}", s.var[i]);
        }
    }

    #[test]
    fn standardize_then_inverse_recovers_input() {
        let mut rng = RngStream::new(67);
        let f = random_t4((2, 2, 6, 6), &mut rng);
        let stats = in_stats(&f).unwrap();
        let eps = 1e-5;
        let out = standardize_affine(&f, &stats, eps, None).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                let plane = n * 2 + c;
                for h in 0..6 {
                    for w in 0..6 {
                        let rec = out.at(n, c, h, w) * (stats.var[plane] + eps).sqrt()
                            + stats.mean[plane];
                        let orig = f.at(n, c, h, w);
                        let rel = (rec - orig).abs() / orig.abs().max(1.0);
                        assert!(rel < 1e-5);
                    }
                }
            }
        }
    }

    // -- layer-level behavior -------------------------------------------

    struct NoRandomness;
    impl<T: Real> NormRandomness<T> for NoRandomness {
        fn region(
            &mut self,
            _l: usize,
            _d: (usize, usize),
            _c: &NormConfig,
            _p: Option<&BlockPartition>,
        ) -> Result<Region> {
            panic!("layer should not draw a region in this mode");
        }
        fn lambda(&mut self, _l: usize, _n: usize, _c: usize, _cfg: &NormConfig) -> Result<Vec<T>> {
            panic!("layer should not draw lambda in this mode");
        }
        fn speckle(
            &mut self,
            _l: usize,
            _n: usize,
            _c: usize,
            _m: f64,
        ) -> Result<(Vec<T>, Vec<T>)> {
            panic!("layer should not draw speckle noise in this mode");
        }
    }

    fn layer_out(
        layer: &mut NormLayer<f64>,
        f: &Tensor4<f64>,
        mode: Mode,
        rand: &mut dyn NormRandomness<f64>,
    ) -> Tensor4<f64> {
        let mut tape = Tape::inference();
        let id = tape.constant(f.clone());
        let out = layer.forward(&mut tape, id, mode, None, rand, 0, None).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn win_eval_equals_instance_norm_bit_for_bit() {
        let mut rng = RngStream::new(71);
        let f = random_t4((2, 3, 8, 8), &mut rng);
        let mut win = NormLayer::new(NormConfig::win(), 3).unwrap();
        let mut inn = NormLayer::new(NormConfig::instance(), 3).unwrap();
        let a = layer_out(&mut win, &f, Mode::Eval, &mut NoRandomness);
        let b = layer_out(&mut inn, &f, Mode::Eval, &mut NoRandomness);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn win_train_tau_one_without_mixing_equals_instance_norm() {
        let mut rng = RngStream::new(73);
        let f = random_t4((2, 3, 8, 8), &mut rng);
        let mut cfg = NormConfig::win();
        cfg.tau = 1.0;
        cfg.mixing = false;
        let mut win = NormLayer::new(cfg, 3).unwrap();
        let mut window_rng = RngStream::named(1, "window");
        let mut lambda_rng = RngStream::named(1, "lambda");
        let mut rand = OnlineRandomness { window: &mut window_rng, lambda: &mut lambda_rng };
        let a = layer_out(&mut win, &f, Mode::Train, &mut rand);
        let mut inn = NormLayer::new(NormConfig::instance(), 3).unwrap();
        let b = layer_out(&mut inn, &f, Mode::Train, &mut NoRandomness);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bn_eval_is_independent_of_batch_composition() {
        let mut rng = RngStream::new(79);
        let mut layer = NormLayer::new(NormConfig::batch(), 2).unwrap();
        // A couple of training steps to move the running buffers.
        let mut window_rng = RngStream::named(2, "window");
        let mut lambda_rng = RngStream::named(2, "lambda");
        let mut rand = OnlineRandomness { window: &mut window_rng, lambda: &mut lambda_rng };
        for _ in 0..3 {
            let f = random_t4((4, 2, 5, 5), &mut rng);
            let mut tape = Tape::inference();
            let id = tape.constant(f);
            let gamma = tape.constant(Tensor4::full((1, 2, 1, 1), 1.0));
            let beta = tape.constant(Tensor4::zeros((1, 2, 1, 1)));
            layer
                .forward(&mut tape, id, Mode::Train, Some(AffineVars { gamma, beta }), &mut rand, 0, None)
                .unwrap();
        }
        // Evaluate one instance alone and inside a larger batch.
        let single = random_t4((1, 2, 5, 5), &mut rng);
        let mut batch = Tensor4::zeros((3, 2, 5, 5));
        for c in 0..2 {
            for h in 0..5 {
                for w in 0..5 {
                    batch.set(1, c, h, w, single.at(0, c, h, w));
                }
            }
        }
        let run_eval = |layer: &mut NormLayer<f64>, f: &Tensor4<f64>| {
            let mut tape = Tape::inference();
            let id = tape.constant(f.clone());
            let gamma = tape.constant(Tensor4::full((1, 2, 1, 1), 1.0));
            let beta = tape.constant(Tensor4::zeros((1, 2, 1, 1)));
            let out = layer
                .forward(&mut tape, id, Mode::Eval, Some(AffineVars { gamma, beta }), &mut NoRandomness, 0, None)
                .unwrap();
            tape.value(out).clone()
        };
        let alone = run_eval(&mut layer, &single);
        let packed = run_eval(&mut layer, &batch);
        for c in 0..2 {
            for h in 0..5 {
                for w in 0..5 {
                    assert_eq!(alone.at(0, c, h, w).to_bits(), packed.at(1, c, h, w).to_bits());
                }
            }
        }
    }

    #[test]
    fn instance_outputs_commute_with_batch_permutation() {
        let mut rng = RngStream::new(83);
        let f = random_t4((3, 2, 4, 4), &mut rng);
        let perm = [2usize, 0, 1];
        let shuffled = Tensor4::from_fn((3, 2, 4, 4), |n, c, h, w| f.at(perm[n], c, h, w));
        let mut layer = NormLayer::new(NormConfig::instance(), 2).unwrap();
        let a = layer_out(&mut layer, &f, Mode::Eval, &mut NoRandomness);
        let b = layer_out(&mut layer, &shuffled, Mode::Eval, &mut NoRandomness);
        for n in 0..3 {
            for c in 0..2 {
                for h in 0..4 {
                    for w in 0..4 {
                        assert_eq!(b.at(n, c, h, w).to_bits(), a.at(perm[n], c, h, w).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn win_train_mean_bounded_by_pooled_mean_inequality() {
        // |mu_win - mu_in| <= (1/tau - 1) * max|f - mu_in| for any window
        // with area >= tau * H * W.
        let mut rng = RngStream::new(89);
        let tau = 0.7;
        for _ in 0..50 {
            let f = random_t4((1, 1, 8, 8), &mut rng);
            let win = sample_window(&mut rng, (8, 8), tau).unwrap();
            let local = win_stats(&f, &Region::Window(win)).unwrap();
            let global = in_stats(&f).unwrap();
            let max_dev = f
                .data()
                .iter()
                .map(|v| (v - global.mean[0]).abs())
                .fold(0.0f64, f64::max);
            let bound = (1.0 / tau - 1.0) * max_dev;
            assert!(
                (local.mean[0] - global.mean[0]).abs() <= bound + 1e-12,
                "deviation {} bound {bound}",
                (local.mean[0] - global.mean[0]).abs()
            );
        }
    }

    #[test]
    fn win_layer_gradient_matches_finite_differences_with_frozen_draws() {
        let mut rng = RngStream::new(97);
        let x0 = random_t4((2, 2, 6, 6), &mut rng);
        let cfg = NormConfig::win();

        // Record one pass of randomness, then replay it for every eval.
        let mut window_rng = RngStream::named(3, "window");
        let mut lambda_rng = RngStream::named(3, "lambda");
        let mut online = OnlineRandomness { window: &mut window_rng, lambda: &mut lambda_rng };
        let mut recorder = RecordingRandomness::new(&mut online);
        {
            let mut layer = NormLayer::new(cfg.clone(), 2).unwrap();
            let mut tape = Tape::inference();
            let id = tape.constant(x0.clone());
            layer.forward(&mut tape, id, Mode::Train, None, &mut recorder, 0, None).unwrap();
        }
        let log = recorder.log;

        let eval = |x: &Tensor4<f64>| -> f64 {
            let mut layer = NormLayer::new(cfg.clone(), 2).unwrap();
            let mut frozen = FrozenRandomness::new(&log);
            let mut tape = Tape::new();
            let id = tape.leaf(x.clone());
            let out = layer.forward(&mut tape, id, Mode::Train, None, &mut frozen, 0, None).unwrap();
            let loss = tape.reduce_mean_all(out).unwrap();
            tape.value(loss).item().unwrap()
        };

        // Analytic gradient.
        let mut layer = NormLayer::new(cfg.clone(), 2).unwrap();
        let mut frozen = FrozenRandomness::new(&log);
        let mut tape = Tape::new();
        let id = tape.leaf(x0.clone().with_grad());
        let out = layer.forward(&mut tape, id, Mode::Train, None, &mut frozen, 0, None).unwrap();
        let loss = tape.reduce_mean_all(out).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(id).unwrap().clone();

        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max((grad.data()[i] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        assert!(worst / scale.max(1e-8) < 1e-4, "fd error {}", worst / scale.max(1e-8));
    }

    #[test]
    fn layer_rejects_mismatched_affine_binding() {
        let mut layer = NormLayer::<f64>::new(NormConfig::batch(), 2).unwrap();
        let mut tape = Tape::inference();
        let id = tape.constant(Tensor4::zeros((1, 2, 4, 4)));
        // Config says affine, no parameters bound.
        assert!(layer
            .forward(&mut tape, id, Mode::Eval, None, &mut NoRandomness, 0, None)
            .is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = NormConfig::win();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = NormConfig::win();
        cfg.alpha = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = NormConfig::win();
        cfg.eps = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = NormConfig::win();
        cfg.eval_uses_global = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn norm_config_json_round_trip_uses_spec_names() {
        let cfg = NormConfig::win();
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"kind\":\"WIN\""));
        assert!(s.contains("\"strategy\":\"Window\""));
        let back: NormConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let bn: NormConfig = serde_json::from_str(r#"{"kind":"BN","affine":true}"#).unwrap();
        assert_eq!(bn.kind, NormKind::Batch);
        assert_eq!(bn.tau, 0.7);
    }
}
