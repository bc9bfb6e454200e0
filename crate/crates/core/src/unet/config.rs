use crate::error::{Error, Result};
use crate::ttt::{InnerModelKind, ScanMode, DEFAULT_ETA};
use serde::{Deserialize, Serialize};

/// Where TTT blocks are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Bottleneck stage only.
    #[default]
    Bot,
    /// Every encoder stage, bottleneck included.
    Enc,
    /// Residual blocks everywhere.
    None,
}

impl Variant {
    pub fn has_ttt_at(self, stage: usize, stages: usize) -> bool {
        match self {
            Variant::Bot => stage + 1 == stages,
            Variant::Enc => true,
            Variant::None => false,
        }
    }
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bot => "bot",
            Variant::Enc => "enc",
            Variant::None => "none",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bot" => Ok(Variant::Bot),
            "enc" => Ok(Variant::Enc),
            "none" => Ok(Variant::None),
            _ => Err(Error::InvalidConfig(format!("unknown variant {s:?} (expected bot, enc or none)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TttBlockConfig {
    pub eta: f64,
    pub inner_model: InnerModelKind,
    pub mode: ScanMode,
    /// Length of the causal depthwise convolutions on the key and query
    /// branches.
    pub conv_kernel: usize,
}

impl Default for TttBlockConfig {
    fn default() -> Self {
        Self { eta: DEFAULT_ETA, inner_model: InnerModelKind::Linear, mode: ScanMode::Differentiable, conv_kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub stages: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub pooling_per_axis: Vec<usize>,
    pub patch_size: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    #[serde(default)]
    pub ttt: TttBlockConfig,
}

impl NetworkConfig {
    pub fn channels(&self, stage: usize) -> usize {
        let scaled = self.base_channels.checked_shl(stage as u32).unwrap_or(usize::MAX);
        scaled.min(self.channel_cap)
    }

    /// Per-axis stride of the downsampling convolution entering `stage`.
    pub fn stride(&self, stage: usize) -> Vec<usize> {
        self.pooling_per_axis.iter().map(|&p| if stage >= 1 && stage <= p { 2 } else { 1 }).collect()
    }

    /// Spatial extent of the feature maps at `stage`.
    pub fn spatial(&self, stage: usize) -> Vec<usize> {
        self.patch_size
            .iter()
            .zip(&self.pooling_per_axis)
            .map(|(&n, &p)| n >> stage.min(p))
            .collect()
    }

    pub fn bottleneck(&self) -> Vec<usize> {
        self.spatial(self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size.is_empty() || self.patch_size.len() != self.pooling_per_axis.len() {
            return bad(format!(
                "patch_size {:?} and pooling_per_axis {:?} must have the same non-zero length",
                self.patch_size, self.pooling_per_axis
            ));
        }
        let max_pool = *self.pooling_per_axis.iter().max().unwrap_or(&0);
        if self.stages != max_pool + 1 {
            return bad(format!("stages = {} but pooling_per_axis {:?} needs {}", self.stages, self.pooling_per_axis, max_pool + 1));
        }
        for (axis, (&n, &p)) in self.patch_size.iter().zip(&self.pooling_per_axis).enumerate() {
            if p >= usize::BITS as usize || n == 0 || n % (1usize << p) != 0 {
                return bad(format!("patch_size[{axis}] = {n} is not divisible by 2^{p}"));
            }
        }
        if self.base_channels == 0 || self.channel_cap == 0 {
            return bad("base_channels and channel_cap must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if !(self.ttt.eta >= 0.0 && self.ttt.eta.is_finite()) {
            return bad(format!("ttt.eta must be finite and non-negative, got {}", self.ttt.eta));
        }
        if self.ttt.conv_kernel == 0 {
            return bad("ttt.conv_kernel must be positive".into());
        }
        Ok(())
    }
}

/// A named network configuration with its reference batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub network: NetworkConfig,
    pub batch_size: usize,
}

pub const PRESET_NAMES: [&str; 6] =
    ["synthetic64", "2d_abdomen_mr", "endoscopy", "microscopy", "abdomen_ct", "3d_abdomen_mr"];

fn net(patch: &[usize], stages: usize, pool: &[usize], classes: usize, in_ch: usize) -> NetworkConfig {
    NetworkConfig {
        variant: Variant::Bot,
        stages,
        base_channels: 32,
        channel_cap: 512,
        pooling_per_axis: pool.to_vec(),
        patch_size: patch.to_vec(),
        num_classes: classes,
        input_channels: in_ch,
        ttt: TttBlockConfig::default(),
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    let (name, network, batch_size) = match name {
        "synthetic64" => ("synthetic64", net(&[64, 64], 5, &[4, 4], 3, 1), 8),
        "2d_abdomen_mr" => ("2d_abdomen_mr", net(&[320, 320], 7, &[6, 6], 14, 1), 30),
        "endoscopy" => ("endoscopy", net(&[384, 640], 7, &[6, 6], 8, 3), 13),
        "microscopy" => ("microscopy", net(&[512, 512], 8, &[7, 7], 3, 3), 12),
        "abdomen_ct" => ("abdomen_ct", net(&[40, 224, 192], 6, &[3, 3, 5], 14, 1), 2),
        "3d_abdomen_mr" => ("3d_abdomen_mr", net(&[48, 160, 224], 6, &[3, 5, 5], 14, 1), 2),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(Preset { name, network, batch_size })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_sizes() {
        assert_eq!(preset("2d_abdomen_mr").unwrap().network.bottleneck(), vec![5, 5]);
        assert_eq!(preset("endoscopy").unwrap().network.bottleneck(), vec![6, 10]);
        assert_eq!(preset("synthetic64").unwrap().network.bottleneck(), vec![4, 4]);
        assert_eq!(preset("microscopy").unwrap().network.bottleneck(), vec![4, 4]);
        assert_eq!(preset("abdomen_ct").unwrap().network.bottleneck(), vec![5, 28, 6]);
    }

    #[test]
    fn all_presets_validate() {
        for name in PRESET_NAMES {
            preset(name).unwrap().network.validate().unwrap();
        }
    }

    #[test]
    fn table_values() {
        let p = preset("endoscopy").unwrap();
        assert_eq!((p.network.patch_size.as_slice(), p.batch_size, p.network.stages), (&[384, 640][..], 13, 7));
        let p = preset("3d_abdomen_mr").unwrap();
        assert_eq!(p.network.pooling_per_axis, vec![3, 5, 5]);
        assert_eq!(p.batch_size, 2);
    }

    #[test]
    fn channel_schedule_caps() {
        let n = preset("2d_abdomen_mr").unwrap().network;
        let ch: Vec<usize> = (0..7).map(|s| n.channels(s)).collect();
        assert_eq!(ch, vec![32, 64, 128, 256, 512, 512, 512]);
    }

    #[test]
    fn anisotropic_strides() {
        let n = preset("abdomen_ct").unwrap().network;
        assert_eq!(n.stride(1), vec![2, 2, 2]);
        assert_eq!(n.stride(4), vec![1, 1, 2]);
        assert_eq!(n.stride(0), vec![1, 1, 1]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut n = preset("synthetic64").unwrap().network;
        n.patch_size = vec![60, 64];
        assert!(matches!(n.validate(), Err(Error::InvalidConfig(m)) if m.contains("patch_size[0]")));
        let mut n = preset("synthetic64").unwrap().network;
        n.stages = 4;
        assert!(n.validate().is_err());
        assert!(preset("nope").is_err());
        assert!("sideways".parse::<Variant>().is_err());
    }

    #[test]
    fn unknown_json_keys_rejected() {
        let n = preset("synthetic64").unwrap().network;
        let mut v = serde_json::to_value(&n).unwrap();
        assert_eq!(serde_json::from_value::<NetworkConfig>(v.clone()).unwrap(), n);
        v["colour"] = serde_json::json!(1);
        assert!(serde_json::from_value::<NetworkConfig>(v).is_err());
    }
}
