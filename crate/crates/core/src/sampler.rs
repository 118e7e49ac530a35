//! Random-walk Metropolis for the per-subject latent factor.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const INITIAL_PROPOSAL_SD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Adaptive,
    Fixed,
}

/// Windowed acceptance-rate tuning of the proposal scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub window: u32,
    pub target: f64,
    pub band: f64,
    pub grow: f64,
    pub shrink: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { window: 50, target: 0.3, band: 0.1, grow: 1.25, shrink: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub proposal_sd: f64,
    /// Acceptances and steps in the current adaptation window.
    pub accept_count: u32,
    pub step_count: u32,
    pub total_accepted: u64,
    pub total_steps: u64,
    pub phase: Phase,
}

impl ChainState {
    pub fn new(k: usize) -> Self {
        Self {
            theta: vec![0.0; k],
            proposal_sd: INITIAL_PROPOSAL_SD,
            accept_count: 0,
            step_count: 0,
            total_accepted: 0,
            total_steps: 0,
            phase: Phase::Adaptive,
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.total_accepted as f64 / self.total_steps as f64
        }
    }

    /// Ends adaptation; the window counters are cleared.
    pub fn freeze(&mut self) {
        self.phase = Phase::Fixed;
        self.accept_count = 0;
        self.step_count = 0;
    }
}

/// `log r` for a move `from → to`; the proposal is symmetric so only the
/// target enters.
pub fn log_accept_ratio(log_target: impl Fn(&[f64]) -> f64, from: &[f64], to: &[f64]) -> f64 {
    log_target(to) - log_target(from)
}

/// One Metropolis step. Returns whether the proposal was accepted. A ratio
/// that is NaN or `−∞` rejects.
pub fn metropolis_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    log_target: impl Fn(&[f64]) -> f64,
    adapt_cfg: &AdaptConfig,
    rng: &mut R,
) -> bool {
    let proposal: Vec<f64> = state
        .theta
        .iter()
        .map(|&t| {
            let e: f64 = StandardNormal.sample(rng);
            t + state.proposal_sd * e
        })
        .collect();
    let log_r = log_accept_ratio(&log_target, &state.theta, &proposal);
    let u: f64 = rng.random();
    let accepted = u < log_r.exp();
    if accepted {
        state.theta = proposal;
    }
    state.step_count += 1;
    state.total_steps += 1;
    if accepted {
        state.accept_count += 1;
        state.total_accepted += 1;
    }
    if state.phase == Phase::Adaptive && state.step_count >= adapt_cfg.window {
        adapt(state, adapt_cfg);
    }
    accepted
}

/// Applies the windowed rule: scale up when acceptance exceeds
/// `target + band`, down when below `target − band`, then reset the window.
/// Does nothing in the fixed phase.
pub fn adapt(state: &mut ChainState, cfg: &AdaptConfig) {
    if state.phase == Phase::Fixed || state.step_count == 0 {
        return;
    }
    let rate = f64::from(state.accept_count) / f64::from(state.step_count);
    if rate > cfg.target + cfg.band {
        state.proposal_sd *= cfg.grow;
    } else if rate < cfg.target - cfg.band {
        state.proposal_sd *= cfg.shrink;
    }
    state.accept_count = 0;
    state.step_count = 0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_scale_always_accepts() {
        let mut s = ChainState::new(2);
        s.proposal_sd = 0.0;
        s.phase = Phase::Fixed;
        let mut r = rng::stream(1, 0, 0);
        for _ in 0..100 {
            assert!(metropolis_step(&mut s, |t| -t[0] * t[0], &AdaptConfig::default(), &mut r));
        }
    }

    #[test]
    fn impossible_proposals_are_rejected() {
        let mut s = ChainState::new(1);
        let mut r = rng::stream(1, 0, 0);
        let target = |t: &[f64]| if t[0] == 0.0 { 0.0 } else { f64::NEG_INFINITY };
        for _ in 0..100 {
            assert!(!metropolis_step(&mut s, target, &AdaptConfig::default(), &mut r));
        }
        assert_eq!(s.theta, vec![0.0]);
        let nan = |_: &[f64]| f64::NAN;
        assert!(!metropolis_step(&mut s, nan, &AdaptConfig::default(), &mut r));
    }

    #[test]
    fn adaptation_rules() {
        let cfg = AdaptConfig::default();
        let mut s = ChainState::new(1);
        s.accept_count = 45;
        s.step_count = 50;
        adapt(&mut s, &cfg);
        assert_eq!(s.proposal_sd, 0.5 * 1.25);
        assert_eq!((s.accept_count, s.step_count), (0, 0));
        let mut s = ChainState::new(1);
        s.accept_count = 2;
        s.step_count = 40;
        adapt(&mut s, &cfg);
        assert_eq!(s.proposal_sd, 0.5 * 0.8);
        let mut s = ChainState::new(1);
        s.accept_count = 15;
        s.step_count = 50;
        adapt(&mut s, &cfg);
        assert_eq!(s.proposal_sd, 0.5);
        let mut s = ChainState::new(1);
        s.phase = Phase::Fixed;
        s.accept_count = 50;
        s.step_count = 50;
        adapt(&mut s, &cfg);
        assert_eq!(s.proposal_sd, 0.5);
    }

    #[test]
    fn log_ratio_is_antisymmetric() {
        let f = |t: &[f64]| -0.5 * t[0] * t[0] + (t[0] * 3.0).sin();
        let a = [0.3];
        let b = [-1.7];
        assert_eq!(log_accept_ratio(f, &a, &b), -log_accept_ratio(f, &b, &a));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut s = ChainState::new(2);
            let mut r = rng::stream(9, 2, 5);
            let mut path = Vec::new();
            for _ in 0..500 {
                metropolis_step(&mut s, |t| -0.5 * (t[0] * t[0] + 4.0 * t[1] * t[1]), &AdaptConfig::default(), &mut r);
                path.extend(s.theta.iter().map(|v| v.to_bits()));
            }
            (path, s.proposal_sd.to_bits())
        };
        assert_eq!(run(), run());
    }
}
