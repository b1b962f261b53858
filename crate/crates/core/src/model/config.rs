use std::fmt;
use std::str::FromStr;

use crate::blocks::ConvVariant;
use crate::error::{Error, Result};
use crate::fem::DEFAULT_RATIO;
use crate::fifm::{default_topk, DEFAULT_REGIONS};
use crate::kv::KvMap;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Conv,
    Transformer,
}

impl StageKind {
    pub fn letter(self) -> char {
        match self {
            StageKind::Conv => 'C',
            StageKind::Transformer => 'T',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub kind: StageKind,
    pub depth: usize,
    pub channels: usize,
    /// Attention heads; only read by transformer stages.
    pub heads: usize,
    /// Key/value sequence reduction; only read by transformer stages.
    pub reduction: usize,
    pub downsample_after: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub stem_channels: usize,
    pub hsi_bands: usize,
    pub x_bands: usize,
    pub conv_variant: ConvVariant,
    pub fem_ratio: usize,
    pub fifm_regions: usize,
    pub fifm_topk: usize,
    pub decoder_width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub use_fem: bool,
    pub use_fifm: bool,
}

/// Parse a layout such as `C-C-T-T` (dashes optional).
pub fn parse_layout(s: &str) -> Result<Vec<StageKind>> {
    s.chars()
        .filter(|c| *c != '-' && !c.is_whitespace())
        .map(|c| match c.to_ascii_uppercase() {
            'C' => Ok(StageKind::Conv),
            'T' => Ok(StageKind::Transformer),
            other => Err(Error::Config(format!("layout {s:?}: unknown stage letter {other:?}"))),
        })
        .collect()
}

pub fn layout_string(kinds: &[StageKind]) -> String {
    kinds
        .iter()
        .map(|k| k.letter().to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// The four layouts compared in the layout ablation.
pub const ABLATION_LAYOUTS: [&str; 4] = ["C-T-T-T", "C-C-T-T", "C-C-C-T", "C-C-C-C"];

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::from_lists(
            "C-C-T-T",
            &[2, 2, 2, 2],
            &[32, 64, 160, 256],
            &[1, 2, 4, 8],
            &[8, 4, 4, 1],
            32,
            144,
            1,
            15,
        )
        .expect("default layout is valid")
    }
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn from_lists(
        layout: &str,
        depths: &[usize],
        channels: &[usize],
        heads: &[usize],
        reductions: &[usize],
        stem: usize,
        hsi_bands: usize,
        x_bands: usize,
        classes: usize,
    ) -> Result<Self> {
        let kinds = parse_layout(layout)?;
        let stages = (0..kinds.len())
            .map(|i| StageConfig {
                kind: kinds[i],
                depth: depths[i],
                channels: channels[i],
                heads: heads[i],
                reduction: reductions[i],
                downsample_after: i == 0,
            })
            .collect();
        Ok(ModelConfig {
            stages,
            stem_channels: stem,
            hsi_bands,
            x_bands,
            conv_variant: ConvVariant::Plain,
            fem_ratio: DEFAULT_RATIO,
            fifm_regions: DEFAULT_REGIONS,
            fifm_topk: default_topk(DEFAULT_REGIONS),
            decoder_width: 64,
            num_classes: classes,
            seed: 0,
            use_fem: true,
            use_fifm: true,
        })
    }

    /// Small configuration for 16–64 pixel tiles on a CPU.
    pub fn toy(hsi_bands: usize, x_bands: usize, classes: usize) -> Self {
        let mut c = ModelConfig::from_lists(
            "C-C-T-T",
            &[1, 1, 1, 1],
            &[8, 16, 16, 16],
            &[1, 2, 2, 2],
            &[4, 4, 4, 1],
            8,
            hsi_bands,
            x_bands,
            classes,
        )
        .expect("toy layout is valid");
        c.decoder_width = 16;
        c.fifm_topk = 2;
        c
    }

    pub fn layout(&self) -> String {
        layout_string(&self.stages.iter().map(|s| s.kind).collect::<Vec<_>>())
    }

    /// Replace stage kinds, keeping all other per-stage settings.
    pub fn with_layout(mut self, layout: &str) -> Result<Self> {
        let kinds = parse_layout(layout)?;
        if kinds.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "layout {layout:?} has {} stages, expected {}",
                kinds.len(),
                self.stages.len()
            )));
        }
        for (s, k) in self.stages.iter_mut().zip(kinds) {
            s.kind = k;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &str| Err(Error::Config(rule.to_string()));
        if self.stages.len() != NUM_STAGES {
            return fail(&format!(
                "model needs exactly {NUM_STAGES} stages, got {}",
                self.stages.len()
            ));
        }
        // Conv stages must precede transformer stages: C*T*.
        let mut seen_t = false;
        for (i, s) in self.stages.iter().enumerate() {
            if s.kind == StageKind::Transformer {
                seen_t = true;
            } else if seen_t {
                return fail(&format!(
                    "layout {}: convolution stage {} follows a transformer stage (conv stages must precede transformer stages)",
                    self.layout(),
                    i + 1
                ));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.depth == 0 || s.channels == 0 {
                return fail(&format!("stage {n}: depth and channels must be ≥ 1"));
            }
            if s.kind == StageKind::Transformer {
                if s.heads == 0 || s.channels % s.heads != 0 {
                    return fail(&format!(
                        "stage {n}: channels {} not divisible by heads {}",
                        s.channels, s.heads
                    ));
                }
                if s.reduction == 0 {
                    return fail(&format!("stage {n}: reduction ratio must be ≥ 1"));
                }
            }
            if self.use_fem && (self.fem_ratio == 0 || (2 * s.channels) % self.fem_ratio != 0) {
                return fail(&format!(
                    "stage {n}: FEM width 2c = {} not divisible by ratio r = {}",
                    2 * s.channels,
                    self.fem_ratio
                ));
            }
        }
        let downs: Vec<usize> = (0..NUM_STAGES).filter(|&i| self.stages[i].downsample_after).collect();
        if downs != [0] {
            return fail("exactly one downsample is allowed and it must follow stage 1");
        }
        if self.stem_channels == 0 || self.hsi_bands == 0 || self.x_bands == 0 {
            return fail("stem channels and band counts must be ≥ 1");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be ≥ 2");
        }
        if self.decoder_width == 0 {
            return fail("decoder width must be ≥ 1");
        }
        if self.use_fifm {
            let s2 = self.fifm_regions * self.fifm_regions;
            if self.fifm_regions == 0 || self.fifm_topk == 0 || self.fifm_topk > s2 {
                return fail(&format!(
                    "FIFM top-k {} must lie in 1..=s² = {s2} (s = {})",
                    self.fifm_topk, self.fifm_regions
                ));
            }
        }
        Ok(())
    }

    /// Spatial size of each stage's features for an `h×w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.stages.len());
        let (mut h, mut w) = (h, w);
        for s in &self.stages {
            out.push((h, w));
            if s.downsample_after {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        out
    }

    /// Reject input sizes the network cannot process exactly.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("input must be non-empty".into()));
        }
        let mut sh = h;
        let mut sw = w;
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if self.use_fifm && (!sh.is_multiple_of(self.fifm_regions) || !sw.is_multiple_of(self.fifm_regions)) {
                return Err(Error::Divisibility(format!(
                    "input {h}×{w}: stage {n} features {sh}×{sw} are not divisible by the {0}×{0} FIFM region grid",
                    self.fifm_regions
                )));
            }
            if s.kind == StageKind::Transformer && !(sh * sw).is_multiple_of(s.reduction) {
                return Err(Error::Divisibility(format!(
                    "input {h}×{w}: stage {n} token count {} is not divisible by reduction ratio {}",
                    sh * sw,
                    s.reduction
                )));
            }
            if s.downsample_after {
                if !sh.is_multiple_of(2) || !sw.is_multiple_of(2) {
                    return Err(Error::Divisibility(format!(
                        "input {h}×{w}: stage {n} features {sh}×{sw} cannot be halved exactly"
                    )));
                }
                sh /= 2;
                sw /= 2;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let col = |f: &dyn Fn(&StageConfig) -> String| self.stages.iter().map(f).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("layout", self.layout());
        put("depths", col(&|s| s.depth.to_string()));
        put("channels", col(&|s| s.channels.to_string()));
        put("heads", col(&|s| s.heads.to_string()));
        put("reductions", col(&|s| s.reduction.to_string()));
        put("downsample", col(&|s| u8::from(s.downsample_after).to_string()));
        put("stem_channels", self.stem_channels.to_string());
        put("hsi_bands", self.hsi_bands.to_string());
        put("x_bands", self.x_bands.to_string());
        put("conv_variant", self.conv_variant.to_string());
        put("fem", self.use_fem.to_string());
        put("fem_ratio", self.fem_ratio.to_string());
        put("fifm", self.use_fifm.to_string());
        put("fifm_regions", self.fifm_regions.to_string());
        put("fifm_topk", self.fifm_topk.to_string());
        put("decoder_width", self.decoder_width.to_string());
        put("num_classes", self.num_classes.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// Read model keys from `kv`, starting from defaults. Keys are consumed
    /// so the caller can reject leftovers.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let mut c = ModelConfig::default();
        let n = NUM_STAGES;
        let fit = |key: &str, v: Vec<usize>| -> Result<Vec<usize>> {
            if v.len() != n {
                return Err(Error::Config(format!(
                    "key {key:?}: expected {n} values, got {}",
                    v.len()
                )));
            }
            Ok(v)
        };
        if let Some(l) = kv.raw("layout") {
            let kinds = parse_layout(&l)?;
            if kinds.len() != n {
                return Err(Error::Config(format!(
                    "layout {l:?} has {} stages, expected {n}",
                    kinds.len()
                )));
            }
            for (s, k) in c.stages.iter_mut().zip(kinds) {
                s.kind = k;
            }
        }
        type Setter = fn(&mut StageConfig, usize);
        let per_stage: [(&str, Setter); 5] = [
            ("depths", |s, v| s.depth = v),
            ("channels", |s, v| s.channels = v),
            ("heads", |s, v| s.heads = v),
            ("reductions", |s, v| s.reduction = v),
            ("downsample", |s, v| s.downsample_after = v != 0),
        ];
        for (key, set) in per_stage {
            if let Some(v) = kv.list::<usize>(key)? {
                for (s, v) in c.stages.iter_mut().zip(fit(key, v)?) {
                    set(s, v);
                }
            }
        }
        c.stem_channels = kv.get_or("stem_channels", c.stem_channels)?;
        c.hsi_bands = kv.get_or("hsi_bands", c.hsi_bands)?;
        c.x_bands = kv.get_or("x_bands", c.x_bands)?;
        c.conv_variant = kv.get_or("conv_variant", c.conv_variant)?;
        c.use_fem = kv.get_or("fem", c.use_fem)?;
        c.fem_ratio = kv.get_or("fem_ratio", c.fem_ratio)?;
        c.use_fifm = kv.get_or("fifm", c.use_fifm)?;
        c.fifm_regions = kv.get_or("fifm_regions", c.fifm_regions)?;
        let topk_default = default_topk(c.fifm_regions);
        c.fifm_topk = kv.get_or("fifm_topk", topk_default)?;
        c.decoder_width = kv.get_or("decoder_width", c.decoder_width)?;
        c.num_classes = kv.get_or("num_classes", c.num_classes)?;
        c.seed = kv.get_or("seed", c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.channels).collect()
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.depth).collect()
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut kv = KvMap::parse(s)?;
        let c = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
