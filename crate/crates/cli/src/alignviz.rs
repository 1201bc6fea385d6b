//! Per-frame transform parameters of one sequence, plus before/after images
//! of the low-level maps the transformer warps.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use trl_core::checkpoint::Checkpoint;
use trl_core::config::RunConfig;
use trl_core::data::loader::load_frames;
use trl_core::data::synth::{read_placements, PLACEMENT_FILE};
use trl_core::data::image_write;
use trl_core::model::{inspect_alignment, TwoStreamModel};
use trl_core::Tensor;

use crate::{open_dataset, out_dir};

#[derive(Clone, Debug)]
pub struct AlignvizReport {
    /// `(s_x, s_y, τ_x, τ_y)` per frame.
    pub theta: Vec<[f64; 4]>,
    pub theta_csv: PathBuf,
    /// Original then aligned channel-mean image of every frame.
    pub images: Vec<PathBuf>,
    /// Pearson correlation of `(τ_x, τ_y)` with the true patch centre, when
    /// the dataset records placements and both series vary.
    pub correlation: Option<(Option<f64>, Option<f64>)>,
    pub text: String,
}

/// Sample Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (ma, mb) = (a[..n].iter().sum::<f64>() / n as f64, b[..n].iter().sum::<f64>() / n as f64);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 1e-24 && sbb > 1e-24).then(|| sab / (saa * sbb).sqrt())
}

/// Channel means of `maps[t]` (`[T,h,w,C]`), as an `[h,w]` grid.
fn channel_mean(maps: &Tensor<f32>, t: usize) -> Vec<f64> {
    let s = maps.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let frame = &maps.data()[t * h * w * c..(t + 1) * h * w * c];
    frame.chunks(c).map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64).collect()
}

fn grey_image(values: &[f64], lo: f64, hi: f64, h: usize, w: usize) -> Result<Tensor<f32>> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = values
        .iter()
        .flat_map(|&v| {
            let g = ((v - lo) / span).clamp(0.0, 1.0) as f32;
            [g, g, g]
        })
        .collect();
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

/// Writes `alignviz/<sequence>/theta.csv` and the map images under the
/// output directory. Without a checkpoint the untrained model is used.
pub fn cmd_alignviz(cfg: &RunConfig, checkpoint: Option<&Path>, sequence: &str) -> Result<AlignvizReport> {
    let index = open_dataset(cfg)?;
    let record = index.find(sequence).with_context(|| {
        let known = index.records.first().map_or(String::new(), |r| format!(" (e.g. `{}`)", r.sequence));
        format!("unknown sequence `{sequence}`{known}")
    })?;
    let model = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            ck.check_digest(&cfg.model_digest())
                .with_context(|| format!("checkpoint {}", path.display()))?;
            ck.model(&cfg.model)?
        }
        None => TwoStreamModel::new(cfg.model.clone(), index.identities().len(), cfg.seed)?,
    };
    let frames = load_frames::<f32>(record)?;
    let (y, y_aligned, theta) = inspect_alignment(&model, &frames)?;

    let dir = out_dir(cfg)?.join("alignviz").join(sequence.replace('/', "_"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let steps = record.frames;
    let theta: Vec<[f64; 4]> = (0..steps)
        .map(|t| [0, 1, 2, 3].map(|k| theta.at(&[t, k]) as f64))
        .collect();
    let mut csv = String::from("frame,sx,sy,tx,ty\n");
    for (t, th) in theta.iter().enumerate() {
        csv.push_str(&format!("{t},{},{},{},{}\n", th[0], th[1], th[2], th[3]));
    }
    let theta_csv = dir.join("theta.csv");
    std::fs::write(&theta_csv, csv).with_context(|| format!("writing {}", theta_csv.display()))?;

    let (h, w) = (y.shape()[1], y.shape()[2]);
    let mut images = Vec::with_capacity(2 * steps);
    for t in 0..steps {
        let (orig, aligned) = (channel_mean(&y, t), channel_mean(&y_aligned, t));
        let lo = orig.iter().chain(&aligned).copied().fold(f64::INFINITY, f64::min);
        let hi = orig.iter().chain(&aligned).copied().fold(f64::NEG_INFINITY, f64::max);
        for (tag, values) in [("original", &orig), ("aligned", &aligned)] {
            let path = dir.join(format!("{tag}_{t:04}.ppm"));
            image_write(&path, &grey_image(values, lo, hi, h, w)?)?;
            images.push(path);
        }
    }

    let mut text = String::from("frame       sx       sy       tx       ty\n");
    for (t, th) in theta.iter().enumerate() {
        text.push_str(&format!("{t:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n", th[0], th[1], th[2], th[3]));
    }
    let placements = index.root.join(PLACEMENT_FILE);
    let correlation = if placements.exists() {
        let rows = read_placements(&placements)?;
        let mut truth: Vec<(usize, f64, f64)> = rows
            .into_iter()
            .filter(|(s, _, _)| s == sequence)
            .map(|(_, t, p)| (t, p.cx, p.cy))
            .collect();
        truth.sort_by_key(|r| r.0);
        let cx: Vec<f64> = truth.iter().map(|r| r.1).collect();
        let cy: Vec<f64> = truth.iter().map(|r| r.2).collect();
        let tx: Vec<f64> = theta.iter().map(|th| th[2]).collect();
        let ty: Vec<f64> = theta.iter().map(|th| th[3]).collect();
        let c = (pearson(&tx, &cx), pearson(&ty, &cy));
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"));
        text.push_str(&format!(
            "corr(tx, true x offset) = {}, corr(ty, true y offset) = {}\n",
            fmt(c.0),
            fmt(c.1)
        ));
        Some(c)
    } else {
        None
    };
    text.push_str(&format!("wrote {} and {} images to {}\n", theta_csv.display(), images.len(), dir.display()));
    Ok(AlignvizReport {
        theta,
        theta_csv,
        images,
        correlation,
        text,
    })
}
