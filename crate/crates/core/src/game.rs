//! Payoff model for Tx-cell requests and its closed-form optimum.
//!
//! A node requesting `l` Tx cells earns `alpha * rank_bar * ln(l + 1)` and
//! pays `beta * l * (etx - 1)` for link quality and
//! `gamma * l * (1 - q_ewma / q_max)` for queue slack. The payoff is strictly
//! concave in `l`, so the continuous optimum is
//! `X = alpha * rank_bar / (gamma * (1 - q/q_max) + beta * (etx - 1)) - 1`,
//! projected onto the integer strategy set.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub q_max: u32,
}

impl Default for GameParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            zeta: 0.5,
            q_max: 8,
        }
    }
}

impl GameParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(format!("zeta must lie in [0, 1], got {}", self.zeta));
        }
        if self.q_max == 0 {
            return Err("q_max must be at least 1".to_string());
        }
        Ok(())
    }
}

/// What a node knows when it picks its request size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeGameView {
    pub rank_bar: f64,
    pub etx: f64,
    pub q_ewma: f64,
    pub l_tx_min: u32,
    pub l_rx_parent: u32,
}

pub fn ewma_queue(q_prev: f64, q_now: u32, zeta: f64) -> f64 {
    zeta * q_prev + (1.0 - zeta) * q_now as f64
}

pub fn utility(l: f64, rank_bar: f64) -> f64 {
    rank_bar * (l + 1.0).ln()
}

pub fn link_cost(l: f64, etx: f64) -> f64 {
    l * (etx - 1.0)
}

pub fn queue_cost(l: f64, q_ewma: f64, q_max: u32) -> f64 {
    l * (1.0 - q_ewma / q_max as f64)
}

pub fn payoff(l: f64, view: &NodeGameView, p: &GameParams) -> f64 {
    p.alpha * utility(l, view.rank_bar)
        - p.beta * link_cost(l, view.etx)
        - p.gamma * queue_cost(l, view.q_ewma, p.q_max)
}

/// Unclamped continuous optimum, or `None` when the marginal cost is zero
/// and the payoff grows without bound.
pub fn continuous_optimum(view: &NodeGameView, p: &GameParams) -> Option<f64> {
    let denom = p.gamma * (1.0 - view.q_ewma / p.q_max as f64) + p.beta * (view.etx - 1.0);
    if denom <= 0.0 {
        return None;
    }
    Some(p.alpha * view.rank_bar / denom - 1.0)
}

/// Optimal Tx-cell request in `[l_tx_min, l_rx_parent]`.
pub fn optimal_l_tx(view: &NodeGameView, p: &GameParams) -> u32 {
    let (lo, hi) = (view.l_tx_min, view.l_rx_parent.max(view.l_tx_min));
    let Some(x) = continuous_optimum(view, p) else {
        return hi;
    };
    if x <= lo as f64 {
        return lo;
    }
    if x >= hi as f64 {
        return hi;
    }
    let down = x.floor() as u32;
    let up = x.ceil() as u32;
    if payoff(up as f64, view, p) > payoff(down as f64, view, p) {
        up
    } else {
        down
    }
}

/// Exhaustive argmax over the strategy set, ties to the smaller count.
pub fn brute_force_l_tx(view: &NodeGameView, p: &GameParams) -> u32 {
    let (lo, hi) = (view.l_tx_min, view.l_rx_parent.max(view.l_tx_min));
    let mut best = lo;
    let mut best_v = payoff(lo as f64, view, p);
    for l in lo + 1..=hi {
        let v = payoff(l as f64, view, p);
        if v > best_v {
            best = l;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn view(rank_bar: f64, etx: f64, q: f64, lo: u32, hi: u32) -> NodeGameView {
        NodeGameView {
            rank_bar,
            etx,
            q_ewma: q,
            l_tx_min: lo,
            l_rx_parent: hi,
        }
    }

    fn params(alpha: f64, beta: f64, gamma: f64, q_max: u32) -> GameParams {
        GameParams {
            alpha,
            beta,
            gamma,
            zeta: 0.5,
            q_max,
        }
    }

    #[test]
    fn ewma_examples() {
        assert_eq!(ewma_queue(3.0, 5, 0.0), 5.0);
        assert_eq!(ewma_queue(3.0, 5, 1.0), 3.0);
        assert_eq!(ewma_queue(4.0, 8, 0.5), 6.0);
    }

    #[test]
    fn component_examples() {
        assert_eq!(utility(0.0, 0.7), 0.0);
        assert!((utility(std::f64::consts::E - 1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((utility(3.0, 0.5) - 0.5 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(link_cost(5.0, 1.0), 0.0);
        assert_eq!(link_cost(3.0, 2.0), 3.0);
        assert_eq!(queue_cost(4.0, 8.0, 8), 0.0);
        assert_eq!(queue_cost(4.0, 0.0, 8), 4.0);
        assert_eq!(queue_cost(3.0, 2.0, 8), 2.25);
    }

    #[test]
    fn payoff_examples() {
        let p = params(1.0, 1.0, 1.0, 8);
        assert_eq!(payoff(0.0, &view(1.0, 3.0, 2.0, 0, 5), &p), 0.0);
        let v = payoff(3.0, &view(1.0, 1.5, 2.0, 0, 5), &p);
        assert!((v - (4f64.ln() - 1.5 - 2.25)).abs() < 1e-12);
    }

    #[test]
    fn optimum_examples() {
        let p = params(1.0, 1.0, 1.0, 8);
        assert_eq!(optimal_l_tx(&view(1.0, 1.0, 0.0, 1, 5), &p), 1);

        let p = params(100.0, 1.0, 1.0, 8);
        assert_eq!(optimal_l_tx(&view(1.0, 1.0, 0.0, 1, 5), &p), 5);

        let p = params(8.0, 1.0, 1.0, 8);
        let v = view(0.5, 2.0, 4.0, 1, 5);
        let x = continuous_optimum(&v, &p).unwrap();
        assert!((x - (4.0 / 1.5 - 1.0)).abs() < 1e-12);
        assert_eq!(optimal_l_tx(&v, &p), brute_force_l_tx(&v, &p));
        assert_eq!(optimal_l_tx(&v, &p), 2);
    }

    #[test]
    fn degenerate_denominator() {
        let p = params(1.0, 0.0, 0.0, 8);
        let v = view(1.0, 3.0, 2.0, 2, 9);
        assert_eq!(continuous_optimum(&v, &p), None);
        assert_eq!(optimal_l_tx(&v, &p), 9);
        assert_eq!(brute_force_l_tx(&v, &p), 9);
        // full queue on a perfect link
        let p = params(1.0, 1.0, 1.0, 8);
        assert_eq!(optimal_l_tx(&view(1.0, 1.0, 8.0, 0, 4), &p), 4);
    }

    #[test]
    fn singleton_domain() {
        let p = params(3.0, 1.0, 1.0, 8);
        let v = view(1.0, 2.0, 3.0, 4, 4);
        assert_eq!(brute_force_l_tx(&v, &p), 4);
        assert_eq!(optimal_l_tx(&v, &p), 4);
    }

    fn arb_case() -> impl Strategy<Value = (NodeGameView, GameParams)> {
        (
            (0.001f64..=10.0, 0.0f64..=5.0, 0.0f64..=5.0, 1u32..=16),
            (
                0.01f64..=1.0,
                1.0f64..=8.0,
                0.0f64..=1.0,
                0u32..=64,
                0u32..=64,
            ),
        )
            .prop_map(|((a, b, g, qm), (rb, etx, qf, x, y))| {
                let (lo, hi) = (x.min(y), x.max(y));
                (view(rb, etx, qf * qm as f64, lo, hi), params(a, b, g, qm))
            })
    }

    proptest! {
        #[test]
        fn closed_form_matches_oracle((v, p) in arb_case()) {
            let got = optimal_l_tx(&v, &p);
            prop_assert_eq!(got, brute_force_l_tx(&v, &p));
            prop_assert!(got >= v.l_tx_min && got <= v.l_rx_parent);
        }

        #[test]
        fn strictly_concave((v, p) in arb_case(), l in 1u32..64) {
            let f = |l: u32| payoff(l as f64, &v, &p);
            prop_assert!(f(l - 1) - 2.0 * f(l) + f(l + 1) < 0.0);
        }

        #[test]
        fn comparative_statics((v, p) in arb_case(), bump in 0.0f64..2.0) {
            let worse_link = NodeGameView { etx: (v.etx + bump).min(8.0), ..v };
            let fuller = NodeGameView { q_ewma: (v.q_ewma + bump).min(p.q_max as f64), ..v };
            if let (Some(x), Some(y)) = (continuous_optimum(&v, &p), continuous_optimum(&worse_link, &p)) {
                prop_assert!(y <= x + 1e-9);
            }
            match (continuous_optimum(&v, &p), continuous_optimum(&fuller, &p)) {
                (Some(x), Some(y)) => prop_assert!(y >= x - 1e-9),
                (Some(_), None) | (None, None) => {}
                (None, Some(_)) => prop_assert!(false, "fuller queue regained a finite optimum"),
            }
        }

        #[test]
        fn ewma_stays_bounded(q_prev in 0.0f64..=8.0, q in 0u32..=8, zeta in 0.0f64..=1.0) {
            let e = ewma_queue(q_prev, q, zeta);
            prop_assert!((0.0..=8.0 + 1e-12).contains(&e));
        }
    }
}
