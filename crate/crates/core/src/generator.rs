//! Seeded random instance generation.
//!
//! Hypothesis mode forces the response-map hypotheses by construction:
//! demand lower bounds are zero, demand upper bounds dominate both the
//! generation and the preferred demand, and preferred demands are strictly
//! positive with the horizon total below the total generation. The last
//! point keeps every prosumer a net seller over the horizon (`d_i <= 0`),
//! which keeps the pricing objective bounded below; net-buyer blocks admit
//! unbounded price escalation along the per-block constant direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::market::{assemble, MarketInstance, ProsumerProfile};

/// Configuration for the seeded generator.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    /// Uniform range for the dissatisfaction weights.
    pub q_range: (f64, f64),
    /// Uniform range for per-step generation.
    pub s_range: (f64, f64),
    /// Preferred demands are drawn from `(0, h0_scale]`.
    pub h0_scale: f64,
    /// Uniform range for per-step grid prices.
    pub price_range: (f64, f64),
    /// Force the response-map hypotheses by construction.
    pub hypothesis_mode: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 2,
            k: 3,
            seed: 0,
            q_range: (0.5, 2.0),
            s_range: (0.0, 2.0),
            h0_scale: 2.0,
            price_range: (0.5, 2.0),
            hypothesis_mode: true,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Generate an instance; deterministic under the seed.
pub fn generate(config: &GeneratorConfig) -> MarketInstance {
    assert!(config.n >= 1 && config.k >= 1, "n and K must be positive");
    assert!(
        config.q_range.0 > 0.0 && config.q_range.1 >= config.q_range.0,
        "q range must be positive"
    );
    assert!(
        config.s_range.0 >= 0.0 && config.s_range.1 >= config.s_range.0,
        "s range must be nonnegative"
    );
    assert!(config.h0_scale > 0.0, "h0 scale must be positive");
    if config.hypothesis_mode {
        assert!(
            config.s_range.1 > 0.0,
            "hypothesis mode needs nonzero generation"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid_prices: Vec<f64> = (0..config.k)
        .map(|_| draw(&mut rng, config.price_range))
        .collect();
    let profiles: Vec<ProsumerProfile> = (0..config.n)
        .map(|_| {
            let q: Vec<f64> = (0..config.k).map(|_| draw(&mut rng, config.q_range)).collect();
            let mut s: Vec<f64> = (0..config.k).map(|_| draw(&mut rng, config.s_range)).collect();
            if config.hypothesis_mode {
                // Net-seller totals need some generation to sell.
                while s.iter().sum::<f64>() < 1e-3 {
                    s = (0..config.k).map(|_| draw(&mut rng, config.s_range)).collect();
                }
            }
            let h0_raw: Vec<f64> = (0..config.k)
                .map(|_| draw(&mut rng, (0.05 * config.h0_scale, config.h0_scale)))
                .collect();
            if config.hypothesis_mode {
                let ratio = draw(&mut rng, (0.3, 0.9));
                let h_tot = ratio * s.iter().sum::<f64>();
                let raw_sum: f64 = h0_raw.iter().sum();
                let h0: Vec<f64> = h0_raw.iter().map(|&v| v * h_tot / raw_sum).collect();
                let h_ub: Vec<f64> = h0
                    .iter()
                    .zip(s.iter())
                    .map(|(&a, &b)| a.max(b) + draw(&mut rng, (0.1, 1.0)))
                    .collect();
                ProsumerProfile {
                    q,
                    h_lb: vec![0.0; config.k],
                    h_ub,
                    h_tot,
                    h0,
                    s,
                }
            } else {
                let h_tot: f64 = h0_raw.iter().sum();
                let h_lb: Vec<f64> = h0_raw
                    .iter()
                    .map(|&v| v * draw(&mut rng, (0.0, 0.8)))
                    .collect();
                let h_ub: Vec<f64> = h0_raw
                    .iter()
                    .map(|&v| v * (1.0 + draw(&mut rng, (0.0, 1.0))))
                    .collect();
                ProsumerProfile {
                    q,
                    h_lb,
                    h_ub,
                    h_tot,
                    h0: h0_raw,
                    s,
                }
            }
        })
        .collect();
    assemble(profiles, &grid_prices).expect("generated profiles satisfy the invariants")
}
