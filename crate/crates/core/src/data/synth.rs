//! Synthetic tracklets. Every identity is a fixed banded patch coloured from
//! a small palette; each sequence draws it over a cluttered background while
//! its centre and scale follow bounded random walks. Cameras after the first
//! shift all colours by a per-camera offset. A nonzero `colour_mix` blends
//! every colour with its channel rotation, giving a shifted domain.
//!
//! Layout written under the root:
//!
//! ```text
//! id0000/cam1/seq00/frame_0000.ppm
//! placement.csv        sequence,frame,cx,cy,scale
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::SynthConfig;
use crate::data::ppm::image_write;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Patch half-extent at scale 1, in normalized units.
const HALF_HEIGHT: f64 = 0.8;
const HALF_WIDTH: f64 = 0.4;
/// Bounds of the random walks.
const CENTER_LIMIT: f64 = 0.5;
const SCALE_RANGE: (f64, f64) = (0.5, 1.5);
const PIXEL_NOISE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

/// Clothing colours an identity can be drawn from.
pub const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.2],
    [0.15, 0.25, 0.85],
    [0.9, 0.85, 0.15],
];

/// Coloured regions per identity: the top band, the two halves of the
/// middle band, and the bottom band.
const REGIONS: usize = 4;
/// Area of each region in sixths of the patch.
const REGION_AREA: [usize; REGIONS] = [2, 1, 1, 2];

/// Number of distinct appearances the generator can produce: one per
/// area-weighted colour histogram.
pub const MAX_IDENTITIES: usize = 80;

/// Colours of one identity: top to bottom bands, with the middle band split
/// into a left and a right half.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub bands: [[f64; 3]; 3],
    pub middle_right: [f64; 3],
}

type Code = [usize; REGIONS];
type Histogram = [usize; PALETTE.len()];

fn histogram(code: &Code) -> Histogram {
    let mut h = [0; PALETTE.len()];
    for (&c, &a) in code.iter().zip(&REGION_AREA) {
        h[c] += a;
    }
    h
}

fn all_codes() -> Vec<Code> {
    let p = PALETTE.len();
    (0..p.pow(REGIONS as u32))
        .map(|mut n| {
            [0; REGIONS].map(|_| {
                let d = n % p;
                n /= p;
                d
            })
        })
        .collect()
}

/// Every colour histogram, ordered farthest-first (each next one maximizes
/// its L1 distance to those before it) from a seeded shuffle, so the first
/// identities of a dataset are the easiest to tell apart.
fn histogram_order(seed: u64) -> Vec<Histogram> {
    let mut pool: Vec<Histogram> = all_codes().iter().map(histogram).collect();
    pool.sort();
    pool.dedup();
    pool.shuffle(&mut rng::stream(seed, "synth/appearances"));
    let dist = |a: &Histogram, b: &Histogram| a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).sum::<usize>();
    let mut order = vec![pool.remove(0)];
    while !pool.is_empty() {
        let nearest = |h: &Histogram| order.iter().map(|o| dist(h, o)).min().unwrap_or(0);
        let mut best = 0;
        for i in 1..pool.len() {
            if nearest(&pool[i]) > nearest(&pool[best]) {
                best = i;
            }
        }
        order.push(pool.remove(best));
    }
    order
}

impl Appearance {
    /// Distinct identities get distinct colour proportions; which region
    /// carries which colour is drawn at random.
    pub fn for_identity(seed: u64, identity: usize) -> Result<Appearance> {
        if identity >= MAX_IDENTITIES {
            return Err(Error::Config(format!(
                "synthetic identity {identity} exceeds the {MAX_IDENTITIES} distinct appearances"
            )));
        }
        let target = histogram_order(seed)[identity];
        let codes: Vec<Code> = all_codes().into_iter().filter(|c| histogram(c) == target).collect();
        let code = codes
            .choose(&mut rng::stream(seed, &format!("synth/appearance/{identity}")))
            .expect("every histogram comes from a code");
        Ok(Appearance {
            bands: [PALETTE[code[0]], PALETTE[code[1]], PALETTE[code[3]]],
            middle_right: PALETTE[code[2]],
        })
    }

    /// Colour at patch coordinates `(u, v)` in `[0,1]²`.
    fn colour_at(&self, u: f64, v: f64) -> [f64; 3] {
        let band = ((v * 3.0) as usize).min(2);
        if band == 1 && u >= 0.5 {
            self.middle_right
        } else {
            self.bands[band]
        }
    }
}

/// Bounded random walk of the patch placement. Every step moves the centre
/// by at most `translation_drift` per axis and the scale by at most
/// `scale_drift`; clamping to the bounds never lengthens a step.
pub fn placement_walk(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Placement> {
    let mut p = Placement {
        cx: 0.0,
        cy: 0.0,
        scale: 1.0,
    };
    let mut out = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            let mut step = |d: f64| if d > 0.0 { rng.gen_range(-d..=d) } else { 0.0 };
            let (dx, dy, ds) = (
                step(cfg.translation_drift),
                step(cfg.translation_drift),
                step(cfg.scale_drift),
            );
            p.cx = (p.cx + dx).clamp(-CENTER_LIMIT, CENTER_LIMIT);
            p.cy = (p.cy + dy).clamp(-CENTER_LIMIT, CENTER_LIMIT);
            p.scale = (p.scale + ds).clamp(SCALE_RANGE.0, SCALE_RANGE.1);
        }
        out.push(p);
    }
    out
}

struct Blob {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    colour: [f64; 3],
}

fn coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

fn camera_offset(cfg: &SynthConfig, camera: usize) -> [f64; 3] {
    if camera == 0 {
        return [0.0; 3];
    }
    let mut r = rng::stream(cfg.seed, &format!("synth/camera/{camera}"));
    [0; 3].map(|_: i32| if r.gen_bool(0.5) { cfg.camera_shift } else { -cfg.camera_shift })
}

/// Frames `[H,W,3]` of one sequence and the patch placement in each.
pub fn render_sequence(
    cfg: &SynthConfig,
    identity: usize,
    camera: usize,
    sequence: usize,
) -> Result<(Vec<Tensor<f32>>, Vec<Placement>)> {
    let mut r = rng::stream(cfg.seed, &format!("synth/sequence/{identity}/{camera}/{sequence}"));
    let look = Appearance::for_identity(cfg.seed, identity)?;
    let shift = camera_offset(cfg, camera);
    let walk = placement_walk(cfg, &mut r);

    let background = [0; 3].map(|_: i32| r.gen_range(0.3..0.7));
    let count = if cfg.clutter > 0.0 {
        Poisson::new(cfg.clutter)
            .map_err(|e| Error::Config(format!("synth.clutter: {e}")))?
            .sample(&mut r) as usize
    } else {
        0
    };
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let (cx, cy) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            let (hw, hh) = (r.gen_range(0.05..0.2), r.gen_range(0.05..0.2));
            Blob {
                x0: cx - hw,
                x1: cx + hw,
                y0: cy - hh,
                y1: cy + hh,
                colour: [0; 3].map(|_: i32| r.gen_range(0.05..0.95)),
            }
        })
        .collect();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid deviation");

    let (h, w) = (cfg.height, cfg.width);
    let mut frames = Vec::with_capacity(cfg.frames);
    for p in &walk {
        let (hw, hh) = (HALF_WIDTH * p.scale, HALF_HEIGHT * p.scale);
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            let y = coord(i, h);
            for j in 0..w {
                let x = coord(j, w);
                let mut c = background;
                for b in &blobs {
                    if x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1 {
                        c = b.colour;
                    }
                }
                let (u, v) = ((x - (p.cx - hw)) / (2.0 * hw), (y - (p.cy - hh)) / (2.0 * hh));
                if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) {
                    c = look.colour_at(u, v);
                }
                let m = cfg.colour_mix;
                let c = [0, 1, 2].map(|k| (1.0 - m) * c[k] + m * c[(k + 1) % 3]);
                for (k, &ck) in c.iter().enumerate() {
                    let v = ck + shift[k] + noise.sample(&mut r);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        frames.push(Tensor::new(vec![h, w, 3], data)?);
    }
    Ok((frames, walk))
}

pub fn identity_dir(identity: usize) -> String {
    format!("id{identity:04}")
}

pub fn camera_dir(camera: usize) -> String {
    format!("cam{}", camera + 1)
}

pub fn sequence_dir(sequence: usize) -> String {
    format!("seq{sequence:02}")
}

pub fn frame_file(frame: usize) -> String {
    format!("frame_{frame:04}.ppm")
}

pub const PLACEMENT_FILE: &str = "placement.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub identities: usize,
    pub sequences: usize,
    pub frames: usize,
}

/// Renders the whole dataset under `root`.
pub fn synth_generate(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<SynthSummary> {
    cfg.validate()?;
    let root = root.as_ref();
    let mut csv = String::from("sequence,frame,cx,cy,scale\n");
    let mut sequences = 0;
    for id in 0..cfg.identities {
        for cam in 0..cfg.cameras {
            for seq in 0..cfg.sequences_per_camera {
                let rel = format!("{}/{}/{}", identity_dir(id), camera_dir(cam), sequence_dir(seq));
                let dir = root.join(&rel);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let (frames, walk) = render_sequence(cfg, id, cam, seq)?;
                for (t, (frame, p)) in frames.iter().zip(&walk).enumerate() {
                    image_write(dir.join(frame_file(t)), frame)?;
                    let _ = writeln!(csv, "{rel},{t},{},{},{}", p.cx, p.cy, p.scale);
                }
                sequences += 1;
            }
        }
    }
    let path = root.join(PLACEMENT_FILE);
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(SynthSummary {
        root: root.to_path_buf(),
        identities: cfg.identities,
        sequences,
        frames: sequences * cfg.frames,
    })
}

/// Parses a placement file into `(sequence, frame, placement)` rows.
pub fn read_placements(path: impl AsRef<Path>) -> Result<Vec<(String, usize, Placement)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let layout = |line: usize, msg: &str| Error::Layout {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(layout(i + 1, "expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| layout(i + 1, "bad number"));
        rows.push((
            f[0].to_string(),
            f[1].parse().map_err(|_| layout(i + 1, "bad frame index"))?,
            Placement {
                cx: num(f[2])?,
                cy: num(f[3])?,
                scale: num(f[4])?,
            },
        ));
    }
    Ok(rows)
}
