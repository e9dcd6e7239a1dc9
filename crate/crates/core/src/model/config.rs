use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, parse_bool, parse_fraction, parse_list, parse_value, ConfigError, KeyValue, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsampler {
    /// SemanticFPN: 1x1 lateral convs.
    Sfpn,
    /// 3x3 lateral convs, optionally one extra conv-upsample block to OS 2.
    Usfpn,
}

impl fmt::Display for Upsampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Upsampler::Sfpn => "sfpn",
            Upsampler::Usfpn => "usfpn",
        })
    }
}

impl FromStr for Upsampler {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sfpn" => Ok(Upsampler::Sfpn),
            "usfpn" => Ok(Upsampler::Usfpn),
            _ => Err("expected sfpn or usfpn".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Scales the 2048/512/256 channel trio of the context encoder.
    pub width_mult: f64,
    pub backbone_stage_channels: [usize; 4],
    pub upsampler: Upsampler,
    pub target_os: usize,
    pub cae_enabled: bool,
    pub hfg_guidance_enabled: bool,
    pub hfgm_aa_enabled: bool,
    pub lateral_stop_grad_enabled: bool,
    pub car_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 6,
            width_mult: 1.0 / 16.0,
            backbone_stage_channels: [8, 16, 32, 64],
            upsampler: Upsampler::Usfpn,
            target_os: 4,
            cae_enabled: true,
            hfg_guidance_enabled: true,
            hfgm_aa_enabled: true,
            lateral_stop_grad_enabled: true,
            car_weight: 0.1,
        }
    }
}

fn scaled(base: f64, w: f64) -> usize {
    // the tiny epsilon keeps exact products like 2048/16 from rounding up
    ((base * w) - 1e-9).ceil().max(1.0) as usize
}

impl ModelConfig {
    /// Plain SemanticFPN baseline: no guidance, no axial attention, no
    /// stop-gradients, identity encoder.
    pub fn sfpn_baseline() -> Self {
        ModelConfig {
            upsampler: Upsampler::Sfpn,
            cae_enabled: false,
            hfg_guidance_enabled: false,
            hfgm_aa_enabled: false,
            lateral_stop_grad_enabled: false,
            ..Self::default()
        }
    }

    pub fn cae_wide(&self) -> usize {
        scaled(2048.0, self.width_mult)
    }

    pub fn cae_mid(&self) -> usize {
        scaled(512.0, self.width_mult)
    }

    /// Shared classification width of teacher and student.
    pub fn d_final(&self) -> usize {
        scaled(256.0, self.width_mult)
    }

    /// Channel count of each upsampler branch.
    pub fn fpn_channels(&self) -> usize {
        scaled(256.0, self.width_mult)
    }
}

const KEYS: &[(&str, &str)] = &[
    ("num_classes", "number of classes including background (class 0)"),
    ("width_mult", "scales the 2048/512/256 encoder channels; fractions like 1/16 accepted"),
    ("backbone_stage_channels", "four comma-separated backbone stage widths"),
    ("upsampler", "sfpn or usfpn"),
    ("target_os", "output stride of the student features: 4, or 2 with usfpn"),
    ("cae_enabled", "context-augmented encoder (false = single 1x1 conv)"),
    ("hfg_guidance_enabled", "student classifies against the shared class tokens"),
    ("hfgm_aa_enabled", "axial attention on the merged student features"),
    ("lateral_stop_grad_enabled", "stop gradients on the student's backbone and teacher inputs"),
    ("car_weight", "weight of the class-aware regularizer pair"),
];

impl KeyValue for ModelConfig {
    fn key_docs() -> &'static [(&'static str, &'static str)] {
        KEYS
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "width_mult" => self.width_mult = parse_fraction(key, value)?,
            "backbone_stage_channels" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.backbone_stage_channels = v.try_into().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    msg: "expected exactly four widths".into(),
                })?;
            }
            "upsampler" => self.upsampler = parse_value(key, value)?,
            "target_os" => self.target_os = parse_value(key, value)?,
            "cae_enabled" => self.cae_enabled = parse_bool(key, value)?,
            "hfg_guidance_enabled" => self.hfg_guidance_enabled = parse_bool(key, value)?,
            "hfgm_aa_enabled" => self.hfgm_aa_enabled = parse_bool(key, value)?,
            "lateral_stop_grad_enabled" => self.lateral_stop_grad_enabled = parse_bool(key, value)?,
            "car_weight" => self.car_weight = parse_value(key, value)?,
            _ => return Err(Self::unknown(key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("width_mult", self.width_mult.to_string()),
            ("backbone_stage_channels", join_list(&self.backbone_stage_channels)),
            ("upsampler", self.upsampler.to_string()),
            ("target_os", self.target_os.to_string()),
            ("cae_enabled", self.cae_enabled.to_string()),
            ("hfg_guidance_enabled", self.hfg_guidance_enabled.to_string()),
            ("hfgm_aa_enabled", self.hfgm_aa_enabled.to_string()),
            ("lateral_stop_grad_enabled", self.lateral_stop_grad_enabled.to_string()),
            ("car_weight", self.car_weight.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.num_classes > 255 {
            return fail("num_classes must stay below the ignore label 255");
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return fail("width_mult must be positive");
        }
        if self.backbone_stage_channels.contains(&0) {
            return fail("backbone stage widths must be positive");
        }
        match (self.target_os, self.upsampler) {
            (4, _) | (2, Upsampler::Usfpn) => {}
            (2, Upsampler::Sfpn) => return fail("target_os=2 requires upsampler=usfpn"),
            _ => return fail("target_os must be 4 or 2"),
        }
        if !(self.car_weight >= 0.0 && self.car_weight.is_finite()) {
            return fail("car_weight must be non-negative");
        }
        Ok(())
    }
}
