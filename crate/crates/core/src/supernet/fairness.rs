use super::space::{ArchitectureConfig, SearchSpace, StageChoice};
use crate::numerics::Rng;

/// Strict-fairness sampler: every (stage, dimension) slot draws its option
/// from a shuffled pool, so within each round of `k` draws every one of the
/// `k` options appears exactly once.
#[derive(Debug, Clone)]
pub struct FairnessSampler {
    space: SearchSpace,
    rng: Rng,
    /// `pools[stage][dim]`, consumed from the back.
    pools: Vec<[Vec<usize>; 3]>,
    refills: u64,
}

impl FairnessSampler {
    pub fn new(space: SearchSpace, rng: Rng) -> Self {
        let pools = vec![[Vec::new(), Vec::new(), Vec::new()]; space.stages];
        Self {
            space,
            rng,
            pools,
            refills: 0,
        }
    }

    pub fn refills(&self) -> u64 {
        self.refills
    }

    fn option_count(&self, dim: usize) -> usize {
        match dim {
            0 => self.space.depth_options.len(),
            1 => self.space.width_options.len(),
            _ => self.space.expansion_options.len(),
        }
    }

    fn draw(&mut self, stage: usize, dim: usize) -> usize {
        if self.pools[stage][dim].is_empty() {
            let k = self.option_count(dim);
            self.pools[stage][dim] = self.rng.permutation(k);
            self.refills += 1;
        }
        self.pools[stage][dim].pop().expect("pool refilled")
    }

    pub fn next_config(&mut self) -> ArchitectureConfig {
        let stages = (0..self.space.stages)
            .map(|s| {
                let d = self.draw(s, 0);
                let w = self.draw(s, 1);
                let e = self.draw(s, 2);
                StageChoice {
                    depth: self.space.depth_options[d],
                    width: self.space.width_options[w],
                    expansion: self.space.expansion_options[e],
                }
            })
            .collect();
        ArchitectureConfig { stages }
    }

    pub fn sample_fair(&mut self, n: usize) -> Vec<ArchitectureConfig> {
        (0..n).map(|_| self.next_config()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_round_uses_every_option_once() {
        let space = SearchSpace::default();
        let mut s = FairnessSampler::new(space.clone(), Rng::new(9));
        let cfgs = s.sample_fair(2);
        for st in 0..space.stages {
            let mut d: Vec<usize> = cfgs.iter().map(|c| c.stages[st].depth).collect();
            d.sort();
            assert_eq!(d, vec![1, 2]);
            let mut w: Vec<f64> = cfgs.iter().map(|c| c.stages[st].width).collect();
            w.sort_by(f64::total_cmp);
            assert_eq!(w, vec![0.5, 1.0]);
        }
        assert_eq!(s.refills(), 9);
    }

    #[test]
    fn deterministic_under_seed() {
        let space = SearchSpace::default();
        let a = FairnessSampler::new(space.clone(), Rng::new(1)).sample_fair(10);
        let b = FairnessSampler::new(space, Rng::new(1)).sample_fair(10);
        assert_eq!(a, b);
    }
}
