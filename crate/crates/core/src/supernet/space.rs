use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{NetShape, StageShape};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// ResNet-like search space with elastic depth, width and expansion per stage.
///
/// Stage `s` has `base_channels · 2^s` output channels at full width and the
/// same number of bottleneck channels at full expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub stages: usize,
    pub depth_options: Vec<usize>,
    pub width_options: Vec<f64>,
    pub expansion_options: Vec<f64>,
    pub base_channels: usize,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            stages: 3,
            depth_options: vec![1, 2],
            width_options: vec![0.5, 1.0],
            expansion_options: vec![0.5, 1.0],
            base_channels: 8,
            input_shape: (1, 16, 16),
            num_classes: 4,
        }
    }
}

/// `⌈fraction · channels⌉`, at least one channel.
pub fn active_channels(fraction: f64, channels: usize) -> usize {
    // tolerate representation error in products like 0.3 · 10
    ((fraction * channels as f64 - 1e-9).ceil() as usize).clamp(1, channels)
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("search space: {m}")));
        if self.stages == 0 {
            return bad("stages must be >= 1");
        }
        if self.depth_options.is_empty() || self.width_options.is_empty() || self.expansion_options.is_empty() {
            return bad("option lists must be non-empty");
        }
        if self.depth_options.contains(&0) {
            return bad("depth options must be >= 1");
        }
        let frac_ok = |v: &f64| *v > 0.0 && *v <= 1.0;
        if !self.width_options.iter().all(frac_ok) || !self.expansion_options.iter().all(frac_ok) {
            return bad("width/expansion fractions must lie in (0, 1]");
        }
        for opts in [&self.width_options, &self.expansion_options] {
            for (i, a) in opts.iter().enumerate() {
                if opts[..i].contains(a) {
                    return bad("duplicate option");
                }
            }
        }
        for (i, a) in self.depth_options.iter().enumerate() {
            if self.depth_options[..i].contains(a) {
                return bad("duplicate depth option");
            }
        }
        if self.base_channels == 0 || self.num_classes < 2 {
            return bad("base_channels must be >= 1 and num_classes >= 2");
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad("input shape must be positive");
        }
        Ok(())
    }

    pub fn max_depth(&self) -> usize {
        *self.depth_options.iter().max().unwrap()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn stage_hidden(&self, stage: usize) -> usize {
        self.stage_channels(stage)
    }

    pub fn configs_per_stage(&self) -> usize {
        self.depth_options.len() * self.width_options.len() * self.expansion_options.len()
    }

    pub fn total_configs(&self) -> usize {
        self.configs_per_stage().pow(self.stages as u32)
    }

    /// Penultimate feature width of the maximal network.
    pub fn feature_dim(&self) -> usize {
        self.stage_channels(self.stages - 1)
    }

    /// Shape of the full supernetwork.
    pub fn supernet_shape(&self) -> NetShape {
        let (c, h, w) = self.input_shape;
        NetShape {
            in_channels: c,
            height: h,
            width: w,
            stem: self.base_channels,
            stages: (0..self.stages)
                .map(|s| StageShape {
                    channels: self.stage_channels(s),
                    hidden: self.stage_hidden(s),
                    blocks: self.max_depth(),
                })
                .collect(),
            classes: self.num_classes,
        }
    }

    /// Shape of the compact network a config extracts.
    pub fn subnet_shape(&self, cfg: &ArchitectureConfig) -> Result<NetShape> {
        self.check(cfg)?;
        let mut shape = self.supernet_shape();
        for (st, ch) in shape.stages.iter_mut().zip(&cfg.stages) {
            st.channels = active_channels(ch.width, st.channels);
            st.hidden = active_channels(ch.expansion, st.hidden);
            st.blocks = ch.depth;
        }
        Ok(shape)
    }

    pub fn maximal_config(&self) -> ArchitectureConfig {
        let maxf = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
        ArchitectureConfig {
            stages: vec![
                StageChoice {
                    depth: self.max_depth(),
                    width: maxf(&self.width_options),
                    expansion: maxf(&self.expansion_options),
                };
                self.stages
            ],
        }
    }

    pub fn check(&self, cfg: &ArchitectureConfig) -> Result<()> {
        if cfg.stages.len() != self.stages {
            return Err(Error::InvalidInput(format!(
                "config has {} stages, space has {}",
                cfg.stages.len(),
                self.stages
            )));
        }
        for (s, ch) in cfg.stages.iter().enumerate() {
            if !self.depth_options.contains(&ch.depth)
                || !self.width_options.contains(&ch.width)
                || !self.expansion_options.contains(&ch.expansion)
            {
                return Err(Error::InvalidInput(format!("stage {s} choice {ch} not in search space")));
            }
        }
        Ok(())
    }

    /// Every valid config in mixed-radix order (stage 0 slowest; within a
    /// stage depth, then width, then expansion).
    pub fn enumerate(&self) -> Vec<ArchitectureConfig> {
        let per = self.stage_choices();
        let mut out = Vec::with_capacity(self.total_configs());
        let mut idx = vec![0usize; self.stages];
        loop {
            out.push(ArchitectureConfig {
                stages: idx.iter().map(|&i| per[i]).collect(),
            });
            let mut s = self.stages;
            loop {
                if s == 0 {
                    return out;
                }
                s -= 1;
                idx[s] += 1;
                if idx[s] < per.len() {
                    break;
                }
                idx[s] = 0;
            }
        }
    }

    fn stage_choices(&self) -> Vec<StageChoice> {
        let mut v = Vec::new();
        for &depth in &self.depth_options {
            for &width in &self.width_options {
                for &expansion in &self.expansion_options {
                    v.push(StageChoice { depth, width, expansion });
                }
            }
        }
        v
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("search space serialises");
        short_hash(json.as_bytes())
    }

    /// Mask for `cfg` aligned with the supernet parameter layout. Depth
    /// masking zeroes trailing blocks; width and expansion keep the leading
    /// channel prefix.
    pub fn config_to_mask(&self, cfg: &ArchitectureConfig) -> Result<Mask> {
        let sub = self.subnet_shape(cfg)?;
        let full = self.supernet_shape();
        let layout = full.layout();
        let mut tensors: Vec<Tensor> = full.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let prefix_fill = |t: &mut Tensor, active: &[usize]| {
            let shape = t.shape().to_vec();
            let n = t.len();
            for flat in 0..n {
                let mut rem = flat;
                let mut inside = true;
                for d in (0..shape.len()).rev() {
                    let i = rem % shape[d];
                    rem /= shape[d];
                    if d < active.len() && i >= active[d] {
                        inside = false;
                    }
                }
                if inside {
                    t.data_mut()[flat] = 1.0;
                }
            }
        };
        prefix_fill(&mut tensors[layout.stem], &[full.stem]);
        let mut prev = full.stem;
        for (s, st) in sub.stages.iter().enumerate() {
            prefix_fill(&mut tensors[layout.down[s]], &[st.channels, prev]);
            for b in 0..st.blocks {
                let (w1, w2) = layout.blocks[s][b];
                prefix_fill(&mut tensors[w1], &[st.hidden, st.channels]);
                prefix_fill(&mut tensors[w2], &[st.channels, st.hidden]);
            }
            prev = st.channels;
        }
        prefix_fill(&mut tensors[layout.head_w], &[full.classes, prev]);
        tensors[layout.head_b].fill(1.0);
        Ok(Mask { tensors })
    }

    /// Decode a mask back into the config that produced it.
    pub fn mask_to_config(&self, mask: &Mask) -> Result<ArchitectureConfig> {
        let full = self.supernet_shape();
        let layout = full.layout();
        if mask.tensors.len() != layout.count {
            return Err(Error::shape("mask_to_config", layout.count, mask.tensors.len()));
        }
        // number of output rows with any active entry
        let active_rows = |t: &Tensor| (0..t.rows()).filter(|&i| t.row(i).iter().any(|&v| v != 0.0)).count();
        let mut stages = Vec::with_capacity(self.stages);
        for s in 0..self.stages {
            let down = &mask.tensors[layout.down[s]];
            let active_w = active_rows(down);
            let depth = layout.blocks[s]
                .iter()
                .filter(|&&(w1, _)| mask.tensors[w1].data().iter().any(|&v| v != 0.0))
                .count();
            let (w1, _) = layout.blocks[s][0];
            let active_h = active_rows(&mask.tensors[w1]);
            let find = |opts: &[f64], active: usize, total: usize, what: &str| {
                opts.iter()
                    .copied()
                    .find(|&f| active_channels(f, total) == active)
                    .ok_or_else(|| Error::InvalidInput(format!("stage {s}: no {what} option yields {active} channels")))
            };
            let width = find(&self.width_options, active_w, self.stage_channels(s), "width")?;
            let expansion = find(&self.expansion_options, active_h, self.stage_hidden(s), "expansion")?;
            if !self.depth_options.contains(&depth) {
                return Err(Error::InvalidInput(format!("stage {s}: depth {depth} not in space")));
            }
            stages.push(StageChoice { depth, width, expansion });
        }
        Ok(ArchitectureConfig { stages })
    }
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageChoice {
    pub depth: usize,
    pub width: f64,
    pub expansion: f64,
}

impl fmt::Display for StageChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}w{}e{}", self.depth, self.width, self.expansion)
    }
}

/// Human-readable architecture: one choice per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchitectureConfig {
    pub stages: Vec<StageChoice>,
}

impl fmt::Display for ArchitectureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl ArchitectureConfig {
    pub fn fingerprint(&self) -> String {
        self.to_string()
    }
}

/// Binary mask per supernet parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub tensors: Vec<Tensor>,
}

impl Mask {
    pub fn ones(shapes: &[Vec<usize>]) -> Self {
        Self {
            tensors: shapes.iter().map(|s| Tensor::full(s, 1.0)).collect(),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.data().iter().filter(|&&v| v == 1.0).count())
            .sum()
    }

    pub fn is_binary(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0 || v == 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_counts() {
        let s = SearchSpace::default();
        s.validate().unwrap();
        assert_eq!(s.total_configs(), 512);
        let all = s.enumerate();
        assert_eq!(all.len(), 512);
        assert_eq!(all[511], s.maximal_config());
    }

    #[test]
    fn maximal_config_gives_all_ones() {
        let s = SearchSpace::default();
        let m = s.config_to_mask(&s.maximal_config()).unwrap();
        assert!(m.tensors.iter().all(|t| t.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn shallow_stage_masks_second_block() {
        let s = SearchSpace::default();
        let mut cfg = s.maximal_config();
        cfg.stages[1].depth = 1;
        let m = s.config_to_mask(&cfg).unwrap();
        let layout = s.supernet_shape().layout();
        let (w1, w2) = layout.blocks[1][1];
        assert!(m.tensors[w1].data().iter().all(|&v| v == 0.0));
        assert!(m.tensors[w2].data().iter().all(|&v| v == 0.0));
        let (a1, _) = layout.blocks[1][0];
        assert!(m.tensors[a1].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_width_keeps_leading_channels() {
        let s = SearchSpace {
            base_channels: 16,
            ..SearchSpace::default()
        };
        let mut cfg = s.maximal_config();
        cfg.stages[0].width = 0.5;
        let m = s.config_to_mask(&cfg).unwrap();
        let layout = s.supernet_shape().layout();
        let down = &m.tensors[layout.down[0]];
        // [16 out, 16 in (stem), 3, 3]
        for oc in 0..16 {
            let ones = down.row(oc).iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, if oc < 8 { 16 * 9 } else { 0 }, "channel {oc}");
        }
        assert_eq!(down.data().iter().filter(|&&v| v == 1.0).count(), 8 * 16 * 9);
    }

    #[test]
    fn mask_decoding_inverts_exhaustively() {
        let s = SearchSpace::default();
        for cfg in s.enumerate() {
            let m = s.config_to_mask(&cfg).unwrap();
            assert!(m.is_binary());
            assert_eq!(s.mask_to_config(&m).unwrap(), cfg);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let s = SearchSpace::default();
        let mut cfg = s.maximal_config();
        cfg.stages[0].width = 0.75;
        assert!(s.config_to_mask(&cfg).is_err());
        cfg.stages.pop();
        assert!(s.config_to_mask(&cfg).is_err());
    }

    #[test]
    fn active_channel_rounding() {
        assert_eq!(active_channels(0.5, 16), 8);
        assert_eq!(active_channels(0.5, 5), 3);
        assert_eq!(active_channels(0.3, 10), 3);
        assert_eq!(active_channels(0.01, 4), 1);
    }
}
