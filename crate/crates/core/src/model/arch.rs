use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Act, LayerSpec, Projection};
use crate::traffic::WINDOW_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Base,
    Large,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Preset::Tiny),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::Config(format!("unknown preset {s:?} (tiny, base, large, custom)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// A residual block: `convs` conv+BN layers, the first one strided. The skip
/// path gets a 1x1 projection when stride or width changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub convs: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub preset: Preset,
    pub input_channels: usize,
    pub input_len: usize,
    pub stem: StemConfig,
    pub blocks: Vec<BlockConfig>,
    /// Hidden FC widths; a final FC to `class_count` is always appended.
    pub head: Vec<usize>,
    pub class_count: usize,
}

fn blocks(convs: &[usize], channels: &[usize], kernel: usize, stride: usize) -> Vec<BlockConfig> {
    convs
        .iter()
        .zip(channels)
        .map(|(&convs, &channels)| BlockConfig {
            convs,
            channels,
            kernel,
            stride,
        })
        .collect()
}

impl ArchitectureConfig {
    pub fn preset(preset: Preset, class_count: usize) -> Result<Self> {
        let (stem, blocks, head) = match preset {
            Preset::Tiny => (
                StemConfig {
                    channels: 16,
                    kernel: 8,
                    stride: 4,
                    padding: 2,
                },
                vec![
                    BlockConfig {
                        convs: 2,
                        channels: 16,
                        kernel: 3,
                        stride: 1,
                    },
                    BlockConfig {
                        convs: 2,
                        channels: 32,
                        kernel: 3,
                        stride: 2,
                    },
                ],
                vec![32],
            ),
            Preset::Base => (
                StemConfig {
                    channels: 64,
                    kernel: 7,
                    stride: 2,
                    padding: 3,
                },
                blocks(&[3, 3, 3, 4, 4], &[64, 128, 256, 512, 704], 3, 2),
                vec![512, 256],
            ),
            Preset::Large => (
                StemConfig {
                    channels: 96,
                    kernel: 7,
                    stride: 2,
                    padding: 3,
                },
                blocks(&[4, 4, 5, 5, 5], &[96, 192, 384, 640, 960], 3, 2),
                vec![512, 256],
            ),
            Preset::Custom => {
                return Err(Error::Config("custom architectures are given field by field".into()));
            }
        };
        let cfg = Self {
            preset,
            input_channels: 2,
            input_len: WINDOW_LEN,
            stem,
            blocks,
            head,
            class_count,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Main-path convolutions inside residual blocks (stem and skip
    /// projections excluded).
    pub fn conv_layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.convs).sum()
    }

    pub fn fc_layer_count(&self) -> usize {
        self.head.len() + 1
    }

    pub fn input_shape(&self) -> Act {
        Act::Seq {
            channels: self.input_channels,
            len: self.input_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.input_channels == 0 || self.input_len == 0 || self.stem.channels == 0 {
            return Err(Error::Config("input and stem dimensions must be positive".into()));
        }
        if self.blocks.iter().any(|b| b.convs == 0 || b.channels == 0 || b.kernel == 0 || b.stride == 0) {
            return Err(Error::Config("every residual block needs at least one conv and positive sizes".into()));
        }
        if self.head.contains(&0) {
            return Err(Error::Config("FC widths must be positive".into()));
        }
        crate::nn::infer_shapes(self.input_shape(), &self.layers()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// The full classifier stack; [`ArchitectureConfig::default_split`]
    /// layers form the feature extractor.
    pub fn layers(&self) -> Vec<(String, LayerSpec)> {
        let mut out: Vec<(String, LayerSpec)> = Vec::new();
        let mut push = |name: String, spec: LayerSpec| out.push((name, spec));
        let s = &self.stem;
        push("stem.conv".into(), LayerSpec::conv(self.input_channels, s.channels, s.kernel, s.stride, s.padding));
        push("stem.bn".into(), LayerSpec::bn(s.channels));
        push("stem.relu".into(), LayerSpec::Relu);
        let mut cin = s.channels;
        for (bi, b) in self.blocks.iter().enumerate() {
            let p = format!("block{}", bi + 1);
            push(format!("{p}.start"), LayerSpec::ResidualStart);
            for ci in 1..=b.convs {
                let (inp, stride) = if ci == 1 { (cin, b.stride) } else { (b.channels, 1) };
                push(format!("{p}.conv{ci}"), LayerSpec::conv(inp, b.channels, b.kernel, stride, b.kernel / 2));
                push(format!("{p}.bn{ci}"), LayerSpec::bn(b.channels));
                if ci < b.convs {
                    push(format!("{p}.relu{ci}"), LayerSpec::Relu);
                }
            }
            let projection = (b.stride != 1 || cin != b.channels).then_some(Projection {
                in_ch: cin,
                out_ch: b.channels,
                stride: b.stride,
            });
            push(format!("{p}.end"), LayerSpec::ResidualEnd { projection });
            push(format!("{p}.relu"), LayerSpec::Relu);
            cin = b.channels;
        }
        push("pool".into(), LayerSpec::GlobalAvgPool);
        let mut width = cin;
        for (i, &h) in self.head.iter().enumerate() {
            push(format!("head.fc{}", i + 1), LayerSpec::fc(width, h));
            push(format!("head.relu{}", i + 1), LayerSpec::Relu);
            width = h;
        }
        push(format!("head.fc{}", self.head.len() + 1), LayerSpec::fc(width, self.class_count));
        out
    }

    /// Layers in the feature extractor by default: everything up to and
    /// including the global pool.
    pub fn default_split(&self) -> usize {
        self.layers()
            .iter()
            .position(|(_, s)| *s == LayerSpec::GlobalAvgPool)
            .map_or(0, |i| i + 1)
    }
}
