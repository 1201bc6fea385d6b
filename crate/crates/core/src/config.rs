//! Run configuration: typed sections and the flat `section.key = value` text
//! format they are read from and written to.
//!
//! ```text
//! # comments start with '#'
//! data.root = runs/desk/data
//! backbone.front_channels = 16,32
//! st2n.alignment = st2n
//! trl.alpha = 0.5
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalCell {
    Lstm,
    BiLstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    None,
    Stn,
    St2n,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Features {
    Generic,
    Specific,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// One identity-level train/test split; every test sequence from the
    /// first camera is a probe, every other test sequence is gallery.
    Fixed,
    /// Ten random identity halves, single-shot camera-1 probes against
    /// camera-2 gallery.
    HalfSplit10,
}

macro_rules! keyword_enum {
    ($t:ty, $what:literal, $($name:literal => $v:expr),+ $(,)?) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    )),
                }
            }
        }

        impl $t {
            pub fn keyword(self) -> &'static str {
                $(if self == $v { return $name; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(TemporalCell, "temporal cell", "lstm" => TemporalCell::Lstm, "bilstm" => TemporalCell::BiLstm);
keyword_enum!(Alignment, "alignment", "none" => Alignment::None, "stn" => Alignment::Stn, "st2n" => Alignment::St2n);
keyword_enum!(Features, "feature set", "generic" => Features::Generic, "specific" => Features::Specific, "both" => Features::Both);
keyword_enum!(Protocol, "protocol", "fixed" => Protocol::Fixed, "half10" => Protocol::HalfSplit10);

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub front_channels: Vec<usize>,
    /// Max-pool factor after each front-end convolution (1 = no pooling).
    pub front_pool: Vec<usize>,
    pub tail_channels: Vec<usize>,
    pub tail_pool: Vec<usize>,
    /// Per-frame descriptor size. Equal to the last tail width means plain
    /// global average pooling; anything else adds a learned projection.
    pub descriptor_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_height: 64,
            input_width: 64,
            front_channels: vec![16, 32],
            front_pool: vec![2, 2],
            tail_channels: vec![64, 64],
            tail_pool: vec![2, 2],
            descriptor_dim: 64,
        }
    }
}

impl BackboneConfig {
    /// `(H1, W1, C1)` of the shared front-end output.
    pub fn front_shape(&self) -> (usize, usize, usize) {
        let f: usize = self.front_pool.iter().product();
        (
            self.input_height / f,
            self.input_width / f,
            *self.front_channels.last().unwrap_or(&3),
        )
    }

    /// `(H2, W2, C2)` of each stream's tail output.
    pub fn tail_shape(&self) -> (usize, usize, usize) {
        let (h, w, c) = self.front_shape();
        let f: usize = self.tail_pool.iter().product();
        (h / f, w / f, *self.tail_channels.last().unwrap_or(&c))
    }

    pub fn validate(&self) -> Result<()> {
        if self.front_channels.is_empty() || self.tail_channels.is_empty() {
            return Err(Error::Config("front-end and tail need at least one stage".into()));
        }
        if self.front_channels.len() != self.front_pool.len()
            || self.tail_channels.len() != self.tail_pool.len()
        {
            return Err(Error::Config("every stage needs a pool factor".into()));
        }
        if self.descriptor_dim == 0 || self.front_channels.contains(&0) || self.tail_channels.contains(&0) {
            return Err(Error::Config("channel widths and descriptor_dim must be positive".into()));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for &p in self.front_pool.iter().chain(&self.tail_pool) {
            if p == 0 || h % p != 0 || w % p != 0 || h / p == 0 || w / p == 0 {
                return Err(Error::Config(format!(
                    "spatial size {h}x{w} does not divide evenly by pool factor {p}"
                )));
            }
            h /= p;
            w /= p;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct St2nConfig {
    pub alignment: Alignment,
    pub loc_width: usize,
    pub loc_hidden: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub scale_clamp: Option<(f64, f64)>,
}

impl Default for St2nConfig {
    fn default() -> Self {
        St2nConfig {
            alignment: Alignment::St2n,
            loc_width: 512,
            loc_hidden: 256,
            dropout: 0.5,
            batch_norm: true,
            scale_clamp: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrlConfig {
    pub cell: TemporalCell,
    pub hidden: usize,
    pub features: Features,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrlConfig {
    fn default() -> Self {
        TrlConfig {
            cell: TemporalCell::BiLstm,
            hidden: 512,
            features: Features::Both,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl TrlConfig {
    /// Width of one stream's sequence feature.
    pub fn feature_dim(&self) -> usize {
        match self.cell {
            TemporalCell::Lstm => self.hidden,
            TemporalCell::BiLstm => 2 * self.hidden,
        }
    }

    /// Generic/specific weight actually used for the configured feature set.
    pub fn effective_alpha(&self) -> f64 {
        match self.features {
            Features::Generic => 1.0,
            Features::Specific => 0.0,
            Features::Both => self.alpha,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub st2n: St2nConfig,
    pub trl: TrlConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        for (name, v) in [("trl.alpha", self.trl.alpha), ("trl.beta", self.trl.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.st2n.dropout) {
            return Err(Error::Config(format!("st2n.dropout = {} outside [0, 1)", self.st2n.dropout)));
        }
        if self.trl.hidden == 0 || self.st2n.loc_width == 0 || self.st2n.loc_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.st2n.alignment != Alignment::None {
            let (h, w, _) = self.backbone.tail_shape();
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "localization pooling needs a tail map of at least 2x2, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }
}

/// The ablation grid: a unidirectional generic-only baseline, then every
/// combination of alignment and feature set with bidirectional cells. Each
/// entry is labelled `cell-alignment-features`.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut combos = vec![(TemporalCell::Lstm, Alignment::None, Features::Generic)];
    for a in [Alignment::None, Alignment::Stn, Alignment::St2n] {
        for f in [Features::Generic, Features::Specific, Features::Both] {
            combos.push((TemporalCell::BiLstm, a, f));
        }
    }
    combos
        .into_iter()
        .map(|(cell, alignment, features)| {
            let mut c = base.clone();
            c.trl.cell = cell;
            c.st2n.alignment = alignment;
            c.trl.features = features;
            let label = format!("{}-{}-{}", cell.keyword(), alignment.keyword(), features.keyword());
            (label, c)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_lr: f64,
    pub stage1_iterations: usize,
    pub stage2_lr: f64,
    pub stage2_iterations: usize,
    pub batch_size: usize,
    pub frames: usize,
    pub clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_lr: 2e-4,
            stage1_iterations: 300,
            stage2_lr: 2e-5,
            stage2_iterations: 300,
            batch_size: 12,
            frames: 10,
            clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_interval: 100,
        }
    }
}

impl TrainConfig {
    /// Iteration budget of a full-scale run; the defaults are sized for the
    /// synthetic desk dataset.
    pub const FULL_SCALE_ITERATIONS: usize = 10_000;

    /// Defaults with both stages at the full-scale budget.
    pub fn full_scale() -> Self {
        TrainConfig {
            stage1_iterations: Self::FULL_SCALE_ITERATIONS,
            stage2_iterations: Self::FULL_SCALE_ITERATIONS,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("train.clip must be positive".into()));
        }
        if self.frames == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.frames and train.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub cameras: usize,
    pub sequences_per_camera: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Largest per-frame change of the patch centre, in normalized units.
    pub translation_drift: f64,
    /// Largest per-frame change of the patch scale.
    pub scale_drift: f64,
    /// Expected number of clutter blobs per frame.
    pub clutter: f64,
    /// Additive colour offset applied by cameras after the first.
    pub camera_shift: f64,
    /// Domain shift: every colour is blended towards its channel rotation
    /// (r,g,b) -> (g,b,r) by this fraction, in all cameras.
    pub colour_mix: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 20,
            cameras: 2,
            sequences_per_camera: 4,
            frames: 10,
            height: 64,
            width: 64,
            translation_drift: 0.15,
            scale_drift: 0.1,
            clutter: 6.0,
            camera_shift: 0.08,
            colour_mix: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0
            || self.cameras == 0
            || self.sequences_per_camera == 0
            || self.frames == 0
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::Config("synthetic dataset counts must be at least 1".into()));
        }
        if !(self.translation_drift >= 0.0 && self.scale_drift >= 0.0 && self.clutter >= 0.0) {
            return Err(Error::Config("drifts and clutter must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.colour_mix) {
            return Err(Error::Config("synth.colour_mix must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub trials: usize,
    pub ranks: Vec<usize>,
    /// Training identities for the fixed protocol; 0 means half.
    pub train_identities: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::HalfSplit10,
            trials: 10,
            ranks: vec![1, 5, 10, 20],
            train_identities: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Smallest denominator of the relative error; central differences in
    /// 64-bit cannot resolve smaller gradient components to the tolerance.
    pub floor: f64,
    pub tolerance: f64,
    pub corrupt_backward: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-4,
            corrupt_backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: Option<String>,
    pub out_dir: String,
    pub min_length: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_root: None,
            out_dir: "runs/default".into(),
            min_length: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, raw)) = self.map.remove(key) {
            *slot = raw.parse::<T>().map_err(|e| Error::ConfigLine {
                line,
                msg: format!("bad value for `{key}`: {e}"),
            })?;
        }
        Ok(())
    }

    fn take_list(&mut self, key: &str, slot: &mut Vec<usize>) -> Result<()> {
        if let Some((line, raw)) = self.map.remove(key) {
            *slot = raw
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::ConfigLine {
                    line,
                    msg: format!("bad list for `{key}`: {e}"),
                })?;
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::ConfigLine {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.contains('.') {
                return Err(Error::ConfigLine {
                    line,
                    msg: format!("key `{k}` must be of the form section.name"),
                });
            }
            if map.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(Error::ConfigLine {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        let mut e = Entries { map };
        let mut c = RunConfig::default();

        e.take("run.seed", &mut c.seed)?;
        e.take("run.out_dir", &mut c.out_dir)?;
        let mut root = String::new();
        e.take("data.root", &mut root)?;
        c.data_root = (!root.is_empty()).then_some(root);
        e.take("data.min_length", &mut c.min_length)?;

        let b = &mut c.model.backbone;
        e.take("backbone.input_height", &mut b.input_height)?;
        e.take("backbone.input_width", &mut b.input_width)?;
        e.take_list("backbone.front_channels", &mut b.front_channels)?;
        e.take_list("backbone.front_pool", &mut b.front_pool)?;
        e.take_list("backbone.tail_channels", &mut b.tail_channels)?;
        e.take_list("backbone.tail_pool", &mut b.tail_pool)?;
        e.take("backbone.descriptor_dim", &mut b.descriptor_dim)?;

        let s = &mut c.model.st2n;
        e.take("st2n.alignment", &mut s.alignment)?;
        e.take("st2n.loc_width", &mut s.loc_width)?;
        e.take("st2n.loc_hidden", &mut s.loc_hidden)?;
        e.take("st2n.dropout", &mut s.dropout)?;
        e.take("st2n.batch_norm", &mut s.batch_norm)?;
        let mut clamp = String::from("none");
        e.take("st2n.scale_clamp", &mut clamp)?;
        s.scale_clamp = parse_clamp(&clamp)?;

        let t = &mut c.model.trl;
        e.take("trl.cell", &mut t.cell)?;
        e.take("trl.hidden", &mut t.hidden)?;
        e.take("trl.features", &mut t.features)?;
        e.take("trl.alpha", &mut t.alpha)?;
        e.take("trl.beta", &mut t.beta)?;

        let tr = &mut c.train;
        e.take("train.stage1_lr", &mut tr.stage1_lr)?;
        e.take("train.stage1_iterations", &mut tr.stage1_iterations)?;
        e.take("train.stage2_lr", &mut tr.stage2_lr)?;
        e.take("train.stage2_iterations", &mut tr.stage2_iterations)?;
        e.take("train.batch_size", &mut tr.batch_size)?;
        e.take("train.frames", &mut tr.frames)?;
        e.take("train.clip", &mut tr.clip)?;
        e.take("train.adam_beta1", &mut tr.adam_beta1)?;
        e.take("train.adam_beta2", &mut tr.adam_beta2)?;
        e.take("train.adam_eps", &mut tr.adam_eps)?;
        e.take("train.checkpoint_interval", &mut tr.checkpoint_interval)?;

        let sy = &mut c.synth;
        e.take("synth.identities", &mut sy.identities)?;
        e.take("synth.cameras", &mut sy.cameras)?;
        e.take("synth.sequences_per_camera", &mut sy.sequences_per_camera)?;
        e.take("synth.frames", &mut sy.frames)?;
        e.take("synth.height", &mut sy.height)?;
        e.take("synth.width", &mut sy.width)?;
        e.take("synth.translation_drift", &mut sy.translation_drift)?;
        e.take("synth.scale_drift", &mut sy.scale_drift)?;
        e.take("synth.clutter", &mut sy.clutter)?;
        e.take("synth.camera_shift", &mut sy.camera_shift)?;
        e.take("synth.colour_mix", &mut sy.colour_mix)?;
        e.take("synth.seed", &mut sy.seed)?;

        let ev = &mut c.eval;
        e.take("eval.protocol", &mut ev.protocol)?;
        e.take("eval.trials", &mut ev.trials)?;
        e.take_list("eval.ranks", &mut ev.ranks)?;
        e.take("eval.train_identities", &mut ev.train_identities)?;

        let gc = &mut c.gradcheck;
        e.take("gradcheck.step", &mut gc.step)?;
        e.take("gradcheck.floor", &mut gc.floor)?;
        e.take("gradcheck.tolerance", &mut gc.tolerance)?;
        e.take("gradcheck.corrupt_backward", &mut gc.corrupt_backward)?;

        if let Some((key, (line, _))) = e.map.into_iter().min_by_key(|(_, (l, _))| *l) {
            return Err(Error::ConfigLine {
                line,
                msg: format!("unknown key `{key}`"),
            });
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.eval.ranks.contains(&0) {
            return Err(Error::Config("eval.ranks must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_root(&self) -> Result<&str> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::MissingKey("data.root".into()))
    }

    /// Canonical text with every key, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run.seed", self.seed.to_string());
        kv("run.out_dir", self.out_dir.clone());
        kv("data.root", self.data_root.clone().unwrap_or_default());
        kv("data.min_length", self.min_length.to_string());
        let b = &self.model.backbone;
        kv("backbone.input_height", b.input_height.to_string());
        kv("backbone.input_width", b.input_width.to_string());
        kv("backbone.front_channels", fmt_list(&b.front_channels));
        kv("backbone.front_pool", fmt_list(&b.front_pool));
        kv("backbone.tail_channels", fmt_list(&b.tail_channels));
        kv("backbone.tail_pool", fmt_list(&b.tail_pool));
        kv("backbone.descriptor_dim", b.descriptor_dim.to_string());
        let st = &self.model.st2n;
        kv("st2n.alignment", st.alignment.keyword().into());
        kv("st2n.loc_width", st.loc_width.to_string());
        kv("st2n.loc_hidden", st.loc_hidden.to_string());
        kv("st2n.dropout", fmt_f64(st.dropout));
        kv("st2n.batch_norm", st.batch_norm.to_string());
        kv(
            "st2n.scale_clamp",
            match st.scale_clamp {
                None => "none".into(),
                Some((lo, hi)) => format!("{},{}", fmt_f64(lo), fmt_f64(hi)),
            },
        );
        let t = &self.model.trl;
        kv("trl.cell", t.cell.keyword().into());
        kv("trl.hidden", t.hidden.to_string());
        kv("trl.features", t.features.keyword().into());
        kv("trl.alpha", fmt_f64(t.alpha));
        kv("trl.beta", fmt_f64(t.beta));
        let tr = &self.train;
        kv("train.stage1_lr", fmt_f64(tr.stage1_lr));
        kv("train.stage1_iterations", tr.stage1_iterations.to_string());
        kv("train.stage2_lr", fmt_f64(tr.stage2_lr));
        kv("train.stage2_iterations", tr.stage2_iterations.to_string());
        kv("train.batch_size", tr.batch_size.to_string());
        kv("train.frames", tr.frames.to_string());
        kv("train.clip", fmt_f64(tr.clip));
        kv("train.adam_beta1", fmt_f64(tr.adam_beta1));
        kv("train.adam_beta2", fmt_f64(tr.adam_beta2));
        kv("train.adam_eps", fmt_f64(tr.adam_eps));
        kv("train.checkpoint_interval", tr.checkpoint_interval.to_string());
        let sy = &self.synth;
        kv("synth.identities", sy.identities.to_string());
        kv("synth.cameras", sy.cameras.to_string());
        kv("synth.sequences_per_camera", sy.sequences_per_camera.to_string());
        kv("synth.frames", sy.frames.to_string());
        kv("synth.height", sy.height.to_string());
        kv("synth.width", sy.width.to_string());
        kv("synth.translation_drift", fmt_f64(sy.translation_drift));
        kv("synth.scale_drift", fmt_f64(sy.scale_drift));
        kv("synth.clutter", fmt_f64(sy.clutter));
        kv("synth.camera_shift", fmt_f64(sy.camera_shift));
        kv("synth.colour_mix", fmt_f64(sy.colour_mix));
        kv("synth.seed", sy.seed.to_string());
        let ev = &self.eval;
        kv("eval.protocol", ev.protocol.keyword().into());
        kv("eval.trials", ev.trials.to_string());
        kv("eval.ranks", fmt_list(&ev.ranks));
        kv("eval.train_identities", ev.train_identities.to_string());
        let gc = &self.gradcheck;
        kv("gradcheck.step", fmt_f64(gc.step));
        kv("gradcheck.floor", fmt_f64(gc.floor));
        kv("gradcheck.tolerance", fmt_f64(gc.tolerance));
        kv("gradcheck.corrupt_backward", gc.corrupt_backward.to_string());
        s
    }

    /// SHA-256 of the canonical text of the settings that shape the model.
    pub fn model_digest(&self) -> [u8; 32] {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| {
                l.starts_with("backbone.") || l.starts_with("st2n.") || l.starts_with("trl.")
            })
            .collect::<Vec<_>>()
            .join("\n");
        Sha256::digest(text.as_bytes()).into()
    }
}

fn parse_clamp(raw: &str) -> Result<Option<(f64, f64)>> {
    if raw == "none" {
        return Ok(None);
    }
    let bad = || Error::Config(format!("st2n.scale_clamp must be `none` or `lo,hi`, got `{raw}`"));
    let (lo, hi) = raw.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(bad());
    }
    Ok(Some((lo, hi)))
}
