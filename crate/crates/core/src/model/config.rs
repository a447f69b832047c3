use std::collections::BTreeSet;
use std::fmt::Write;

use crate::ctc::Charset;
use crate::error::{Error, Result};

/// Convolution indices (1-based) that may be made deformable.
pub const DEFORMABLE_DOMAIN: [usize; 3] = [3, 4, 5];

/// Architecture of the recognizer.
///
/// `pools[i]` is the `(rows, cols)` window (and stride) of the max pool that
/// follows convolution `i + 1`; `(1, 1)` means no pooling. After the last
/// stage the height is reduced to 1, adaptively or with one fixed `2x1` pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `(width, height)` of input images.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub conv_widths: Vec<usize>,
    pub pools: Vec<(usize, usize)>,
    pub deformable_set: BTreeSet<usize>,
    pub use_residual: bool,
    /// Convolutions followed by a residual block when `use_residual` is set.
    pub residual_after: Vec<usize>,
    pub use_adaptive_pool: bool,
    pub charset: String,
    pub fold_case: bool,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The full model: deformable convolutions 4 and 5, residual blocks,
    /// 200x64 input.
    fn default() -> Self {
        ModelConfig {
            input_size: (200, 64),
            input_channels: 1,
            conv_widths: vec![64, 128, 256, 256, 512, 512, 512],
            pools: vec![(2, 2), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1), (1, 1)],
            deformable_set: [4, 5].into_iter().collect(),
            use_residual: true,
            residual_after: vec![3, 5],
            use_adaptive_pool: true,
            charset: "0123456789".into(),
            fold_case: false,
            hidden: 256,
            lstm_layers: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Unmodified CRNN-style baseline: no deformable layers, no residual
    /// blocks, 100x32 input.
    pub fn baseline() -> Self {
        ModelConfig {
            input_size: (100, 32),
            deformable_set: BTreeSet::new(),
            use_residual: false,
            ..Self::default()
        }
    }

    /// Narrow widths for CPU-scale experiments; same depth and pooling.
    pub fn with_toy_widths(mut self) -> Self {
        self.conv_widths = vec![8, 16, 24, 24, 32, 32, 32];
        self.hidden = 32;
        self
    }

    /// Smallest configuration that still exercises every layer kind:
    /// three convolutions (the third deformable, followed by a residual
    /// block), a single BiLSTM of width 8, 32x16 input.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: (32, 16),
            input_channels: 1,
            conv_widths: vec![2, 3, 3],
            pools: vec![(2, 2), (1, 1), (2, 1)],
            deformable_set: [3].into_iter().collect(),
            use_residual: true,
            residual_after: vec![3],
            use_adaptive_pool: true,
            charset: "012".into(),
            fold_case: false,
            hidden: 8,
            lstm_layers: 1,
            seed: 0,
        }
    }

    pub fn charset(&self) -> Result<Charset> {
        Charset::new(&self.charset, self.fold_case)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_widths.len();
        let bad = |msg: String| Err(Error::Config(msg));
        if n == 0 || self.conv_widths.contains(&0) {
            return bad(format!("conv_widths must be positive, got {:?}", self.conv_widths));
        }
        if self.pools.len() != n {
            return bad(format!("{} pools for {n} convolutions", self.pools.len()));
        }
        if self.pools.iter().any(|&(a, b)| a == 0 || b == 0) {
            return bad("pool windows must be positive".into());
        }
        if let Some(i) = self
            .deformable_set
            .iter()
            .find(|i| !DEFORMABLE_DOMAIN.contains(i) || **i > n)
        {
            return bad(format!(
                "deformable index {i} outside {{3,4,5}} or beyond {n} convolutions"
            ));
        }
        if let Some(i) = self.residual_after.iter().find(|&&i| i == 0 || i > n) {
            return bad(format!("residual position {i} outside 1..={n}"));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return bad(format!("input_channels must be 1 or 3, got {}", self.input_channels));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input size must be positive".into());
        }
        if self.hidden == 0 || self.lstm_layers == 0 {
            return bad("hidden and lstm_layers must be positive".into());
        }
        self.charset()?;
        Ok(())
    }

    /// Canonical `key = value` text, one key per line in a fixed order.
    pub fn to_kv(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}x{}", self.input_size.0, self.input_size.1);
        let _ = writeln!(s, "input_channels = {}", self.input_channels);
        let _ = writeln!(s, "conv_widths = {}", join(&mut self.conv_widths.iter().map(|v| v.to_string())));
        let _ = writeln!(s, "pools = {}", join(&mut self.pools.iter().map(|(a, b)| format!("{a}:{b}"))));
        let _ = writeln!(s, "deformable_set = {}", join(&mut self.deformable_set.iter().map(|v| v.to_string())));
        let _ = writeln!(s, "use_residual = {}", self.use_residual);
        let _ = writeln!(s, "residual_after = {}", join(&mut self.residual_after.iter().map(|v| v.to_string())));
        let _ = writeln!(s, "use_adaptive_pool = {}", self.use_adaptive_pool);
        let _ = writeln!(s, "charset = {}", self.charset);
        let _ = writeln!(s, "fold_case = {}", self.fold_case);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "lstm_layers = {}", self.lstm_layers);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Set one key from its text value. Returns `Ok(false)` for keys this
    /// type does not own.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_size" => self.input_size = parse_size(value)?,
            "input_channels" => self.input_channels = parse_num(key, value)?,
            "conv_widths" => self.conv_widths = parse_list(key, value)?,
            "pools" => {
                self.pools = split_list(value)
                    .map(|item| {
                        let (a, b) = item.split_once(':').ok_or_else(|| {
                            Error::Config(format!("pools: expected rows:cols, got {item:?}"))
                        })?;
                        Ok((parse_num(key, a)?, parse_num(key, b)?))
                    })
                    .collect::<Result<_>>()?
            }
            "deformable_set" => self.deformable_set = parse_deformable_set(value)?,
            "use_residual" => self.use_residual = parse_bool(key, value)?,
            "residual_after" => self.residual_after = parse_list(key, value)?,
            "use_adaptive_pool" => self.use_adaptive_pool = parse_bool(key, value)?,
            "charset" => self.charset = value.to_string(),
            "fold_case" => self.fold_case = parse_bool(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "lstm_layers" => self.lstm_layers = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            if !cfg.apply_kv(k.trim(), v.trim())? {
                return Err(Error::ConfigLine {
                    line: i + 1,
                    msg: format!("unknown key {:?}", k.trim()),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

pub fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    split_list(value).map(|v| parse_num(key, v)).collect()
}

/// `WxH`, e.g. `200x64`.
pub fn parse_size(value: &str) -> Result<(usize, usize)> {
    let (w, h) = value
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("input_size: expected WxH, got {value:?}")))?;
    Ok((parse_num("input_size", w)?, parse_num("input_size", h)?))
}

/// Comma list of convolution indices, each within {3,4,5}. Empty means none.
pub fn parse_deformable_set(value: &str) -> Result<BTreeSet<usize>> {
    let set: BTreeSet<usize> = parse_list("deformable_set", value)?.into_iter().collect();
    if let Some(i) = set.iter().find(|i| !DEFORMABLE_DOMAIN.contains(i)) {
        return Err(Error::Config(format!(
            "deformable_set: index {i} must be within {{3,4,5}}"
        )));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig::baseline(),
            ModelConfig::default().with_toy_widths(),
            ModelConfig::tiny(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::baseline().with_toy_widths();
        cfg.charset = "ab#= c".into();
        cfg.seed = 42;
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse_deformable_set("2,5").is_err());
        assert!(parse_deformable_set("").unwrap().is_empty());
        let mut cfg = ModelConfig::default();
        cfg.deformable_set = [6].into_iter().collect();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.pools.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.charset = "0120".into();
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::from_kv("hidden = 3\nbogus = 1").is_err());
        assert!(parse_size("200by64").is_err());
    }
}
