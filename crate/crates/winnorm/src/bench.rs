//! Micro-benchmark for window-parameter generation: online (sample every
//! step) versus offline (pre-draw the epoch, replay from the cache).
//! Both modes run the same statistics path over the same feature tensor,
//! with the same seed, so the measured difference is the sampling cost.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::win_stats;
use crate::rng::RngStream;
use crate::tensor::Tensor4;
use crate::window::{cache_epoch, sample_window, CachedDraw, LayerSchedule, Region, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Online,
    Offline,
    Both,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub steps: usize,
    pub epochs_timed: usize,
    pub layer_dims: Vec<(usize, usize)>,
    pub tau: f64,
    pub online_median_secs: Option<f64>,
    pub offline_median_secs: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time `epochs` simulated epochs of `steps` steps over the given layer
/// planes. Every step draws (or replays) one window per layer and runs
/// the window-statistics reduction on a fixed feature tensor.
pub fn bench_windows(
    mode: BenchMode,
    steps: usize,
    epochs: usize,
    layer_dims: &[(usize, usize)],
    tau: f64,
    seed: u64,
) -> Result<BenchReport> {
    if steps == 0 {
        return Err(Error::InvalidConfig("bench needs at least one step".into()));
    }
    if epochs == 0 || layer_dims.is_empty() {
        return Err(Error::InvalidConfig("bench needs epochs >= 1 and at least one layer".into()));
    }

    // One small feature tensor per layer; batch 8, 4 channels.
    let features: Vec<Tensor4<f32>> = layer_dims
        .iter()
        .map(|&(h, w)| {
            let mut rng = RngStream::named(seed, "bench-data");
            Tensor4::fill_random_uniform((8, 4, h, w), &mut rng, 0.0, 1.0)
        })
        .collect();
    let layers: Vec<LayerSchedule> = layer_dims
        .iter()
        .enumerate()
        .map(|(i, &dims)| LayerSchedule { layer_id: i, feature_dims: dims })
        .collect();
    let partitions = vec![None; layers.len()];

    let run_online = || -> Result<Vec<f64>> {
        let mut times = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut rng = RngStream::named(seed, "window");
            let start = Instant::now();
            for _step in 0..steps {
                for (layer, f) in layers.iter().zip(&features) {
                    let win = sample_window(&mut rng, layer.feature_dims, tau)?;
                    std::hint::black_box(win_stats(f, &Region::Window(win))?);
                }
            }
            times.push(start.elapsed().as_secs_f64());
        }
        Ok(times)
    };

    let run_offline = || -> Result<Vec<f64>> {
        // The cache is built once and amortized across epochs; the timed
        // loop only replays it.
        let mut rng = RngStream::named(seed, "window");
        let cache = cache_epoch(&mut rng, steps, &layers, tau, Strategy::Window, &partitions)?;
        let mut times = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let start = Instant::now();
            for step in 0..steps {
                for (layer, f) in layers.iter().zip(&features) {
                    let win = match cache.replay(layer.layer_id, step)? {
                        CachedDraw::Window { window } => *window,
                        _ => unreachable!("window strategy caches windows"),
                    };
                    std::hint::black_box(win_stats(f, &Region::Window(win))?);
                }
            }
            times.push(start.elapsed().as_secs_f64());
        }
        Ok(times)
    };

    let mut report = BenchReport {
        steps,
        epochs_timed: epochs,
        layer_dims: layer_dims.to_vec(),
        tau,
        online_median_secs: None,
        offline_median_secs: None,
    };
    if matches!(mode, BenchMode::Online | BenchMode::Both) {
        report.online_median_secs = Some(median(run_online()?));
    }
    if matches!(mode, BenchMode::Offline | BenchMode::Both) {
        report.offline_median_secs = Some(median(run_offline()?));
    }
    Ok(report)
}
