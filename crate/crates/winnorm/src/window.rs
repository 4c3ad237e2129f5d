//! Spatial region sampling for local normalization statistics.
//!
//! Provides the rejection-sampled rectangular window, the block
//! partition-and-sample procedure, the Pixel/Mask ablation regions, and an
//! offline cache that pre-draws a whole epoch of window parameters.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Iteration cap for rejection loops; on exhaustion we fall back to the
/// full plane, which is the tau = 1 semantics.
const MAX_REJECTS: usize = 1000;

/// One rectangular window in feature coordinates, half-open on both axes:
/// pixels with `x0 <= w < x1` and `y0 <= h < y1` belong to the window.
/// x runs over the width axis, y over the height axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl WindowSpec {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        WindowSpec { x0, y0, x1, y1 }
    }

    pub fn full(h: usize, w: usize) -> Self {
        WindowSpec { x0: 0, y0: 0, x1: w, y1: h }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_full(&self, h: usize, w: usize) -> bool {
        self.x0 == 0 && self.y0 == 0 && self.x1 == w && self.y1 == h
    }

    /// Bounds and non-emptiness check against an H x W plane.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > w || self.y1 > h {
            return Err(Error::InvalidConfig(format!(
                "window {self:?} invalid for plane {h}x{w}"
            )));
        }
        Ok(())
    }
}

/// Boolean H x W plane marking the pixels that contribute to statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub h: usize,
    pub w: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::shape("RegionMask::new", format!("{h}x{w} vs {}", bits.len())));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyRegion);
        }
        Ok(RegionMask { h, w, bits })
    }

    pub fn filled(h: usize, w: usize) -> Self {
        RegionMask { h, w, bits: vec![true; h * w] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// A pixel region shared by every (instance, channel) plane. `PerPlane`
/// carries one mask per (n, c) and exists for the general reduction tests.
#[derive(Clone, Debug)]
pub enum Region {
    Full,
    Window(WindowSpec),
    Blocks(Vec<WindowSpec>),
    Mask(RegionMask),
    PerPlane(Vec<RegionMask>),
}

impl Region {
    /// Pixel count per (n, c) plane. For `PerPlane` this is the count of
    /// the given plane index.
    pub fn count(&self, h: usize, w: usize, plane: usize) -> usize {
        match self {
            Region::Full => h * w,
            Region::Window(win) => win.area(),
            Region::Blocks(blocks) => blocks.iter().map(|b| b.area()).sum(),
            Region::Mask(m) => m.count(),
            Region::PerPlane(masks) => masks[plane].count(),
        }
    }

    pub fn validate(&self, h: usize, w: usize, planes: usize) -> Result<()> {
        match self {
            Region::Full => {
                if h * w == 0 {
                    return Err(Error::EmptyRegion);
                }
            }
            Region::Window(win) => win.validate(h, w)?,
            Region::Blocks(blocks) => {
                if blocks.is_empty() {
                    return Err(Error::EmptyRegion);
                }
                for b in blocks {
                    b.validate(h, w)?;
                }
            }
            Region::Mask(m) => {
                if (m.h, m.w) != (h, w) {
                    return Err(Error::shape("Region::validate", format!("mask {}x{} vs plane {h}x{w}", m.h, m.w)));
                }
            }
            Region::PerPlane(masks) => {
                if masks.len() != planes {
                    return Err(Error::shape(
                        "Region::validate",
                        format!("{} masks for {planes} planes", masks.len()),
                    ));
                }
                for m in masks {
                    if (m.h, m.w) != (h, w) {
                        return Err(Error::shape("Region::validate", "mask dims"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Region strategies for local statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Global,
    Window,
    Block,
    Pixel,
    Mask,
    Speckle,
}

/// Draw one window whose area is at least `tau * H * W`.
///
/// Rejection loop: draw a ratio tau' ~ U(0,1), give the candidate window
/// the shape (W*sqrt(tau'), H*sqrt(tau')), center it on a uniform point of
/// the plane, clamp the corners into [0, W] x [0, H], and accept once the
/// clamped integer area clears the threshold.
pub fn sample_window(rng: &mut RngStream, dims: (usize, usize), tau: f64) -> Result<WindowSpec> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::degenerate("sample_window", format!("plane {h}x{w} has no pixels")));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!("tau must be in (0, 1], got {tau}")));
    }
    let need = tau * (h * w) as f64;
    for _ in 0..MAX_REJECTS {
        let ratio = rng.uniform();
        let half_w = (w as f64) * ratio.sqrt() / 2.0;
        let half_h = (h as f64) * ratio.sqrt() / 2.0;
        let cx = rng.uniform() * w as f64;
        let cy = rng.uniform() * h as f64;
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        let x0 = clamp(cx - half_w, w);
        let x1 = clamp(cx + half_w, w);
        let y0 = clamp(cy - half_h, h);
        let y1 = clamp(cy + half_h, h);
        let area = (x1.saturating_sub(x0)) * (y1.saturating_sub(y0));
        if area as f64 >= need {
            return Ok(WindowSpec { x0, y0, x1, y1 });
        }
    }
    Ok(WindowSpec::full(h, w))
}

/// Fixed partition of the feature plane into non-overlapping blocks. The
/// grid is defined on the network input image and rescaled to the feature
/// resolution, so block i covers the same image patch at every depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub input_dims: (usize, usize),
    pub patch_dims: (usize, usize),
    pub feature_dims: (usize, usize),
    /// Feature-space size of one block.
    pub block_dims: (usize, usize),
    pub rows: usize,
    pub cols: usize,
}

impl BlockPartition {
    pub fn block_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Feature-space rectangle of block `i` (row-major block order).
    pub fn rect(&self, i: usize) -> WindowSpec {
        let (bh, bw) = self.block_dims;
        let row = i / self.cols;
        let col = i % self.cols;
        WindowSpec { x0: col * bw, y0: row * bh, x1: (col + 1) * bw, y1: (row + 1) * bh }
    }
}

/// Build the block partition for one feature resolution.
pub fn partition_blocks(
    input_dims: (usize, usize),
    patch_dims: (usize, usize),
    feature_dims: (usize, usize),
) -> Result<BlockPartition> {
    let (h0, w0) = input_dims;
    let (ph, pw) = patch_dims;
    let (fh, fw) = feature_dims;
    if ph == 0 || pw == 0 || h0 == 0 || w0 == 0 {
        return Err(Error::InvalidConfig("partition dims must be positive".into()));
    }
    if h0 % ph != 0 || w0 % pw != 0 {
        return Err(Error::InvalidConfig(format!(
            "input {h0}x{w0} not divisible by patch {ph}x{pw}"
        )));
    }
    // Feature-space block size: patch size scaled by fh/h0 (and fw/w0).
    if (fh * ph) % h0 != 0 || (fw * pw) % w0 != 0 {
        return Err(Error::InvalidConfig(format!(
            "patch {ph}x{pw} is not an integral number of feature pixels at {fh}x{fw} (input {h0}x{w0})"
        )));
    }
    let bh = fh * ph / h0;
    let bw = fw * pw / w0;
    if bh == 0 || bw == 0 {
        return Err(Error::InvalidConfig(format!(
            "blocks collapse below one pixel at feature scale {fh}x{fw}"
        )));
    }
    Ok(BlockPartition {
        input_dims,
        patch_dims,
        feature_dims,
        block_dims: (bh, bw),
        rows: h0 / ph,
        cols: w0 / pw,
    })
}

/// Draw `max(1, floor(tau * B))` distinct block indices uniformly without
/// replacement.
pub fn sample_blocks(rng: &mut RngStream, partition: &BlockPartition, tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!("tau must be in (0, 1], got {tau}")));
    }
    let b = partition.block_count();
    let k = ((tau * b as f64).floor() as usize).clamp(1, b);
    Ok(rng.sample_without_replacement(b, k))
}

/// Build the pixel region for a strategy. `Speckle` is not a region
/// strategy (it perturbs global statistics instead) and is rejected here.
pub fn region_for_strategy(
    strategy: Strategy,
    rng: &mut RngStream,
    dims: (usize, usize),
    tau: f64,
    partition: Option<&BlockPartition>,
) -> Result<Region> {
    let (h, w) = dims;
    match strategy {
        Strategy::Global => Ok(Region::Full),
        Strategy::Window => Ok(Region::Window(sample_window(rng, dims, tau)?)),
        Strategy::Block => {
            let part = partition.ok_or_else(|| {
                Error::InvalidConfig("Block strategy needs a block partition".into())
            })?;
            if part.feature_dims != dims {
                return Err(Error::shape(
                    "region_for_strategy",
                    format!("partition is for {:?}, plane is {dims:?}", part.feature_dims),
                ));
            }
            let picked = sample_blocks(rng, part, tau)?;
            Ok(Region::Blocks(picked.iter().map(|&i| part.rect(i)).collect()))
        }
        Strategy::Pixel => {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::InvalidConfig(format!("tau must be in (0, 1], got {tau}")));
            }
            for _ in 0..MAX_REJECTS {
                let bits: Vec<bool> = (0..h * w).map(|_| rng.uniform() < tau).collect();
                if bits.iter().any(|&b| b) {
                    return Ok(Region::Mask(RegionMask::new(h, w, bits)?));
                }
            }
            // Vanishingly unlikely; keep one pixel so the region is valid.
            let mut bits = vec![false; h * w];
            bits[rng.uniform_int(h * w)] = true;
            Ok(Region::Mask(RegionMask::new(h, w, bits)?))
        }
        Strategy::Mask => {
            // Erase one window-shaped region with target area (1 - tau)*H*W
            // and keep the complement.
            let erase_tau = 1.0 - tau;
            if erase_tau <= 0.0 {
                return Ok(Region::Full);
            }
            for _ in 0..MAX_REJECTS {
                let win = sample_window(rng, dims, erase_tau)?;
                if win.is_full(h, w) {
                    continue;
                }
                let bits: Vec<bool> = (0..h * w)
                    .map(|i| {
                        let (y, x) = (i / w, i % w);
                        !(x >= win.x0 && x < win.x1 && y >= win.y0 && y < win.y1)
                    })
                    .collect();
                return Ok(Region::Mask(RegionMask::new(h, w, bits)?));
            }
            Ok(Region::Full)
        }
        Strategy::Speckle => Err(Error::InvalidConfig(
            "Speckle perturbs global statistics and has no pixel region".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Offline window cache
// ---------------------------------------------------------------------------

/// Region parameters cached for one (layer, step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachedDraw {
    Window { window: WindowSpec },
    Blocks { indices: Vec<usize> },
    Full,
}

/// Per-layer schedule entry: which plane the layer normalizes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub layer_id: usize,
    pub feature_dims: (usize, usize),
}

/// Pre-drawn window parameters for an epoch, keyed by (layer id, step).
/// Replaying the cache reproduces the online draws exactly: the cache is
/// filled by iterating steps in order and layers in schedule order, which
/// is the same order a training epoch consumes the window stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowCache {
    pub steps: usize,
    pub layers: Vec<LayerSchedule>,
    /// Row-major over (step, layer-position).
    pub draws: Vec<CachedDraw>,
}

impl WindowCache {
    fn slot(&self, layer_id: usize, step: usize) -> Result<usize> {
        let pos = self
            .layers
            .iter()
            .position(|l| l.layer_id == layer_id)
            .ok_or_else(|| Error::InvalidConfig(format!("layer {layer_id} not in cache")))?;
        if step >= self.steps {
            return Err(Error::InvalidConfig(format!(
                "replay past end of cache: step {step} of {}",
                self.steps
            )));
        }
        Ok(step * self.layers.len() + pos)
    }

    pub fn replay(&self, layer_id: usize, step: usize) -> Result<&CachedDraw> {
        Ok(&self.draws[self.slot(layer_id, step)?])
    }

    /// JSON-lines serialization: one record per (layer_id, step).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for step in 0..self.steps {
            for (pos, layer) in self.layers.iter().enumerate() {
                let draw = &self.draws[step * self.layers.len() + pos];
                let record = serde_json::json!({
                    "layer_id": layer.layer_id,
                    "step": step,
                    "draw": draw,
                });
                writeln!(out, "{record}").expect("string write");
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Pre-draw an epoch of window parameters. Only Window, Block and Global
/// strategies have cacheable parameters.
pub fn cache_epoch(
    rng: &mut RngStream,
    steps: usize,
    layers: &[LayerSchedule],
    tau: f64,
    strategy: Strategy,
    partitions: &[Option<BlockPartition>],
) -> Result<WindowCache> {
    if partitions.len() != layers.len() {
        return Err(Error::shape("cache_epoch", "one partition slot per layer"));
    }
    let mut draws = Vec::with_capacity(steps * layers.len());
    for _step in 0..steps {
        for (layer, part) in layers.iter().zip(partitions) {
            let draw = match strategy {
                Strategy::Global => CachedDraw::Full,
                Strategy::Window => {
                    CachedDraw::Window { window: sample_window(rng, layer.feature_dims, tau)? }
                }
                Strategy::Block => {
                    let part = part.as_ref().ok_or_else(|| {
                        Error::InvalidConfig("Block strategy needs a partition per layer".into())
                    })?;
                    CachedDraw::Blocks { indices: sample_blocks(rng, part, tau)? }
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "strategy {strategy:?} has no cacheable window parameters"
                    )))
                }
            };
            draws.push(draw);
        }
    }
    Ok(WindowCache { steps, layers: layers.to_vec(), draws })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> RngStream {
        RngStream::named(seed, "window")
    }

    #[test]
    fn tau_one_returns_full_plane() {
        let mut r = rng(1);
        for dims in [(8, 8), (16, 5), (2, 2)] {
            let win = sample_window(&mut r, dims, 1.0).unwrap();
            assert_eq!(win, WindowSpec::full(dims.0, dims.1));
        }
    }

    #[test]
    fn window_area_respects_threshold() {
        let mut r = rng(7);
        for tau in [0.5, 0.7, 0.9] {
            for _ in 0..10_000 {
                let win = sample_window(&mut r, (16, 16), tau).unwrap();
                assert!(win.area() as f64 >= tau * 256.0, "area {} below {tau}", win.area());
                assert!(win.x1 <= 16 && win.y1 <= 16);
            }
        }
    }

    #[test]
    fn window_sampling_is_deterministic() {
        let a = sample_window(&mut rng(42), (8, 8), 0.7).unwrap();
        let b = sample_window(&mut rng(42), (8, 8), 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_rejects_bad_tau_and_dims() {
        assert!(sample_window(&mut rng(0), (8, 8), 0.0).is_err());
        assert!(sample_window(&mut rng(0), (8, 8), 1.5).is_err());
        assert!(sample_window(&mut rng(0), (0, 8), 0.5).is_err());
    }

    #[test]
    fn partition_224_by_32_has_49_blocks() {
        for feat in [(224, 224), (112, 112), (56, 56), (28, 28), (7, 7)] {
            let p = partition_blocks((224, 224), (32, 32), feat).unwrap();
            assert_eq!(p.block_count(), 49);
        }
    }

    #[test]
    fn single_block_degenerates_to_global() {
        let p = partition_blocks((32, 32), (32, 32), (32, 32)).unwrap();
        assert_eq!(p.block_count(), 1);
        assert_eq!(p.rect(0), WindowSpec::full(32, 32));
    }

    #[test]
    fn blocks_tile_the_plane_without_overlap() {
        // Input 64x64, patch 16x16, feature 32x32 (scale 1/2): 16 blocks of 8x8.
        let p = partition_blocks((64, 64), (16, 16), (32, 32)).unwrap();
        assert_eq!(p.block_count(), 16);
        assert_eq!(p.block_dims, (8, 8));
        let mut cover = vec![0u32; 32 * 32];
        for i in 0..16 {
            let r = p.rect(i);
            assert_eq!(r.area(), 64);
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    cover[y * 32 + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1), "blocks must tile exactly once");
    }

    #[test]
    fn partition_rejects_non_divisible() {
        assert!(partition_blocks((224, 224), (33, 32), (224, 224)).is_err());
        // 7x7 feature from a 224 input with 8x8 patches: 7*8/224 = 0.25 px.
        assert!(partition_blocks((224, 224), (8, 8), (7, 7)).is_err());
    }

    #[test]
    fn sample_blocks_counts() {
        let p = partition_blocks((224, 224), (32, 32), (56, 56)).unwrap();
        let picked = sample_blocks(&mut rng(3), &p, 0.7).unwrap();
        assert_eq!(picked.len(), 34); // floor(0.7 * 49)
        let all = sample_blocks(&mut rng(3), &p, 1.0).unwrap();
        assert_eq!(all, (0..49).collect::<Vec<_>>());
        // floor(0.1 * 4) = 0 is clamped up to one block.
        let small = partition_blocks((32, 32), (16, 16), (32, 32)).unwrap();
        assert_eq!(sample_blocks(&mut rng(4), &small, 0.1).unwrap().len(), 1);
    }

    #[test]
    fn sample_blocks_is_uniform() {
        let p = partition_blocks((32, 32), (16, 16), (32, 32)).unwrap();
        assert_eq!(p.block_count(), 4);
        let mut hits = [0usize; 4];
        let mut r = rng(9);
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_blocks(&mut r, &p, 0.5).unwrap() {
                hits[i] += 1;
            }
        }
        for &h in &hits {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "index frequency {freq} not ~0.5");
        }
    }

    #[test]
    fn region_global_covers_everything() {
        let region = region_for_strategy(Strategy::Global, &mut rng(0), (4, 4), 0.7, None).unwrap();
        assert_eq!(region.count(4, 4, 0), 16);
    }

    #[test]
    fn region_pixel_keep_fraction_matches_tau() {
        let mut r = rng(21);
        let mut total = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let region =
                region_for_strategy(Strategy::Pixel, &mut r, (16, 16), 0.7, None).unwrap();
            total += region.count(16, 16, 0);
        }
        let mean_fraction = total as f64 / (draws * 256) as f64;
        assert!((mean_fraction - 0.7).abs() < 0.01, "mean keep fraction {mean_fraction}");
    }

    #[test]
    fn region_mask_complement_is_bounded_and_nonempty() {
        let mut r = rng(33);
        for _ in 0..2000 {
            let region = region_for_strategy(Strategy::Mask, &mut r, (16, 16), 0.7, None).unwrap();
            let kept = region.count(16, 16, 0);
            assert!(kept > 0);
            // The erased window has area >= 0.3 * 256, so at most
            // 256 - ceil(0.3*256) pixels survive.
            assert!(kept <= 256 - (0.3f64 * 256.0).ceil() as usize, "kept {kept}");
        }
    }

    #[test]
    fn region_mask_tau_one_keeps_everything() {
        let region = region_for_strategy(Strategy::Mask, &mut rng(1), (8, 8), 1.0, None).unwrap();
        assert!(matches!(region, Region::Full));
    }

    #[test]
    fn cache_replays_online_draws_exactly() {
        let layers = vec![
            LayerSchedule { layer_id: 0, feature_dims: (16, 16) },
            LayerSchedule { layer_id: 1, feature_dims: (8, 8) },
            LayerSchedule { layer_id: 2, feature_dims: (4, 4) },
        ];
        let parts = vec![None, None, None];
        let steps = 100;
        let cache =
            cache_epoch(&mut rng(77), steps, &layers, 0.7, Strategy::Window, &parts).unwrap();

        // Online draws with the same stream, consumed in the same order.
        let mut online = rng(77);
        for step in 0..steps {
            for layer in &layers {
                let win = sample_window(&mut online, layer.feature_dims, 0.7).unwrap();
                match cache.replay(layer.layer_id, step).unwrap() {
                    CachedDraw::Window { window } => assert_eq!(*window, win),
                    other => panic!("unexpected draw {other:?}"),
                }
            }
        }
    }

    #[test]
    fn cache_replay_past_end_errors() {
        let layers = vec![LayerSchedule { layer_id: 0, feature_dims: (8, 8) }];
        let cache =
            cache_epoch(&mut rng(5), 3, &layers, 0.7, Strategy::Window, &[None]).unwrap();
        assert!(cache.replay(0, 2).is_ok());
        assert!(cache.replay(0, 3).is_err());
        assert!(cache.replay(1, 0).is_err());
    }

    #[test]
    fn cache_jsonl_round_trips_draw_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let layers = vec![LayerSchedule { layer_id: 4, feature_dims: (8, 8) }];
        let cache =
            cache_epoch(&mut rng(5), 2, &layers, 0.7, Strategy::Window, &[None]).unwrap();
        cache.write_jsonl(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["layer_id"], 4);
        assert_eq!(first["step"], 0);
        assert!(first["draw"]["window"]["x1"].is_u64());
    }
}
