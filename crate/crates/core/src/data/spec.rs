use std::fmt;
use std::str::FromStr;

use crate::config::{join_list, parse_list, parse_value, ConfigError, KeyValue, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    /// One or two pixels wide.
    ThinLine,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::ThinLine,
        ShapeKind::Ring,
    ];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::ThinLine => "thin_line",
            ShapeKind::Ring => "ring",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown shape kind `{s}`"))
    }
}

/// Scene generator parameters. Foreground class `c >= 1` always draws the
/// shape kind `kinds[(c - 1) % kinds.len()]`; class 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub kinds: Vec<ShapeKind>,
    /// Chance that a drawn shape belongs to the thin-line class; the rest
    /// are spread evenly over the other foreground classes.
    pub thin_line_prob: f64,
    pub noise_std: f64,
    /// Amplitude of the per-class sinusoidal texture.
    pub texture_amp: f64,
    pub ignore_border_px: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 6,
            shapes_min: 2,
            shapes_max: 5,
            kinds: ShapeKind::ALL.to_vec(),
            thin_line_prob: 0.2,
            noise_std: 0.08,
            texture_amp: 0.04,
            ignore_border_px: 1,
        }
    }
}

impl SceneSpec {
    /// A scene mix dominated by thin lines. Noise is lowered because the
    /// line class shares its hue with the triangle class: at the default
    /// noise a 1 px line cannot be told apart by colour at any resolution.
    pub fn thin_heavy() -> Self {
        SceneSpec {
            thin_line_prob: 0.5,
            noise_std: 0.02,
            shapes_min: 3,
            shapes_max: 6,
            ..Self::default()
        }
    }

    pub fn kind_of(&self, class: usize) -> Option<ShapeKind> {
        (class >= 1 && class < self.num_classes).then(|| self.kinds[(class - 1) % self.kinds.len()])
    }

    /// The first class drawing thin lines, if any.
    pub fn thin_line_class(&self) -> Option<usize> {
        (1..self.num_classes).find(|&c| self.kind_of(c) == Some(ShapeKind::ThinLine))
    }
}

const KEYS: &[(&str, &str)] = &[
    ("image_size", "square image side in pixels, a multiple of 32"),
    ("num_classes", "classes including background"),
    ("shapes_min", "fewest shapes per image"),
    ("shapes_max", "most shapes per image"),
    ("kinds", "comma-separated shape kinds cycled over foreground classes"),
    ("thin_line_prob", "probability a shape is drawn from the thin-line class"),
    ("noise_std", "additive Gaussian pixel noise"),
    ("texture_amp", "per-class sinusoidal texture amplitude"),
    ("ignore_border_px", "width of the ignored label border"),
];

impl KeyValue for SceneSpec {
    fn key_docs() -> &'static [(&'static str, &'static str)] {
        KEYS
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "shapes_min" => self.shapes_min = parse_value(key, value)?,
            "shapes_max" => self.shapes_max = parse_value(key, value)?,
            "kinds" => self.kinds = parse_list(key, value)?,
            "thin_line_prob" => self.thin_line_prob = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "texture_amp" => self.texture_amp = parse_value(key, value)?,
            "ignore_border_px" => self.ignore_border_px = parse_value(key, value)?,
            _ => return Err(Self::unknown(key)),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("shapes_min", self.shapes_min.to_string()),
            ("shapes_max", self.shapes_max.to_string()),
            ("kinds", join_list(&self.kinds)),
            ("thin_line_prob", self.thin_line_prob.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("texture_amp", self.texture_amp.to_string()),
            ("ignore_border_px", self.ignore_border_px.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return fail("image_size must be a positive multiple of 32");
        }
        if !(2..255).contains(&self.num_classes) {
            return fail("num_classes must be in 2..255");
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return fail("need 1 <= shapes_min <= shapes_max");
        }
        if self.kinds.is_empty() {
            return fail("at least one shape kind is required");
        }
        if !(0.0..=1.0).contains(&self.thin_line_prob) {
            return fail("thin_line_prob must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.texture_amp >= 0.0) {
            return fail("noise_std and texture_amp must be non-negative");
        }
        if 2 * self.ignore_border_px >= self.image_size {
            return fail("ignore border covers the whole image");
        }
        Ok(())
    }
}
