use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ssm::DEFAULT_STATE_DIM;

/// Smallest bottleneck map that train-mode pooled sampling accepts.
pub const MIN_TRAIN_BOTTLENECK: usize = 3;

/// Total downsampling between the input and the bottleneck.
pub const DOWNSAMPLE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub dse_depths: [usize; 4],
    pub state_dim: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub supervision_levels: usize,
    /// One weight per supervised level, finest first.
    pub loss_weights: Vec<f64>,
    pub auxiliary_branch: bool,
    pub lasea: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            dse_depths: [2, 2, 2, 2],
            state_dim: DEFAULT_STATE_DIM,
            input_height: 256,
            input_width: 256,
            supervision_levels: 4,
            loss_weights: vec![0.25; 4],
            auxiliary_branch: true,
            lasea: true,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for desk-scale training.
    pub fn tiny() -> Self {
        ModelConfig {
            base_channels: 8,
            dse_depths: [1, 1, 1, 1],
            state_dim: 8,
            input_height: 96,
            input_width: 96,
            ..ModelConfig::default()
        }
    }

    /// Same layout without the auxiliary stream and the bottleneck block.
    pub fn baseline(&self) -> Self {
        ModelConfig {
            auxiliary_branch: false,
            lasea: false,
            ..self.clone()
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn bottleneck_channels(&self) -> usize {
        16 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model config", msg));
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels must be even and >= 2, got {}", self.base_channels));
        }
        if self.state_dim == 0 {
            return bad("state_dim must be positive".into());
        }
        if !(1..=4).contains(&self.supervision_levels) {
            return bad(format!("supervision_levels must be 1..=4, got {}", self.supervision_levels));
        }
        if self.loss_weights.len() != self.supervision_levels {
            return bad(format!(
                "{} loss weights for {} supervision levels",
                self.loss_weights.len(),
                self.supervision_levels
            ));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        check_input_size(self.input_height, self.input_width)
    }

    pub fn to_kv(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "dse_depths={}", join(&mut self.dse_depths.iter().map(|d| d.to_string())));
        let _ = writeln!(s, "state_dim={}", self.state_dim);
        let _ = writeln!(s, "input_height={}", self.input_height);
        let _ = writeln!(s, "input_width={}", self.input_width);
        let _ = writeln!(s, "supervision_levels={}", self.supervision_levels);
        let _ = writeln!(s, "loss_weights={}", join(&mut self.loss_weights.iter().map(|w| format!("{w:?}"))));
        let _ = writeln!(s, "auxiliary_branch={}", self.auxiliary_branch);
        let _ = writeln!(s, "lasea={}", self.lasea);
        s
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        ModelConfig::default().overlay_kv(text)
    }

    /// Like [`ModelConfig::from_kv`] but starting from `self`. Without a
    /// `loss_weights` key the levels are weighted equally.
    pub fn overlay_kv(self, text: &str) -> Result<Self> {
        let mut cfg = self;
        let mut weights_given = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::invalid("model config", format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            let flag = |v: &str| v.parse::<bool>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "base_channels" => cfg.base_channels = num(value)?,
                "dse_depths" => {
                    let d = value.split(',').map(|v| num(v.trim())).collect::<Result<Vec<_>>>()?;
                    cfg.dse_depths = d
                        .try_into()
                        .map_err(|d: Vec<usize>| err(format!("dse_depths needs 4 entries, got {}", d.len())))?;
                }
                "state_dim" => cfg.state_dim = num(value)?,
                "input_height" => cfg.input_height = num(value)?,
                "input_width" => cfg.input_width = num(value)?,
                "supervision_levels" => cfg.supervision_levels = num(value)?,
                "loss_weights" => {
                    weights_given = true;
                    cfg.loss_weights = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>().map_err(|e| err(format!("{key}: {e}"))))
                        .collect::<Result<_>>()?;
                }
                "auxiliary_branch" => cfg.auxiliary_branch = flag(value)?,
                "lasea" => cfg.lasea = flag(value)?,
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        if !weights_given {
            cfg.loss_weights = vec![1.0 / cfg.supervision_levels as f64; cfg.supervision_levels];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::invalid(
            "model input",
            format!("input {h}x{w} must be a positive multiple of {DOWNSAMPLE} on both sides"),
        ));
    }
    Ok(())
}

/// Train mode samples a pooled cell from the bottleneck map, which must be at
/// least 3x3, so both input sides must be at least 48.
pub fn check_train_size(h: usize, w: usize) -> Result<()> {
    check_input_size(h, w)?;
    let min = MIN_TRAIN_BOTTLENECK * DOWNSAMPLE;
    if h < min || w < min {
        return Err(Error::invalid(
            "model input",
            format!("train mode needs input of at least {min}x{min}, got {h}x{w}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.supervision_levels = 2;
        cfg.loss_weights = vec![0.7, 0.3];
        cfg.lasea = false;
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = ModelConfig::from_kv("# tiny\nbase_channels = 4\nsupervision_levels=2\n").unwrap();
        assert_eq!(cfg.base_channels, 4);
        assert_eq!(cfg.loss_weights, vec![0.5, 0.5]);
        assert_eq!(cfg.stage_channels(), [4, 8, 16, 32]);
        assert_eq!(cfg.bottleneck_channels(), 64);
    }

    #[test]
    fn overlay_starts_from_base() {
        let cfg = ModelConfig::tiny().overlay_kv("state_dim=4").unwrap();
        assert_eq!((cfg.base_channels, cfg.state_dim, cfg.input_height), (8, 4, 96));
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(ModelConfig::from_kv("base_channels=3").is_err());
        assert!(ModelConfig::from_kv("dse_depths=1,2").is_err());
        assert!(ModelConfig::from_kv("colour=blue").is_err());
        assert!(ModelConfig::from_kv("input_height=100").is_err());
        assert!(ModelConfig::from_kv("supervision_levels=2\nloss_weights=1").is_err());
    }

    #[test]
    fn train_size_floor() {
        assert!(check_train_size(48, 64).is_ok());
        assert!(check_train_size(32, 64).is_err());
        assert!(check_input_size(32, 32).is_ok());
        assert!(check_input_size(40, 32).is_err());
    }
}
