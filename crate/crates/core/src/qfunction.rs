//! Q-function representations: tabular and the chain tile coding.

use crate::error::{invalid, Result};
use crate::mdp::{Mdp, Policy};

/// Anything that assigns a value to `(state, action)`.
pub trait ActionValues {
    fn value(&self, state: usize, action: usize) -> f64;
}

/// `V(x; pi) = sum_a pi(a|x) Q(x, a)`.
pub fn state_value<Q: ActionValues + ?Sized>(q: &Q, pi: &Policy, state: usize) -> f64 {
    pi.row(state)
        .iter()
        .enumerate()
        .map(|(a, p)| p * q.value(state, a))
        .sum()
}

/// Tabular Q-function with terminal entries pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    values: Vec<Vec<f64>>,
    terminal: Vec<bool>,
}

impl TabularQ {
    pub fn zeros(mdp: &Mdp) -> Self {
        Self {
            values: (0..mdp.n_states()).map(|x| vec![0.0; mdp.actions_at(x)]).collect(),
            terminal: mdp.terminal_flags().to_vec(),
        }
    }

    /// Builds from explicit rows; terminal rows are zeroed.
    pub fn from_rows(mdp: &Mdp, mut rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != mdp.n_states()
            || rows.iter().enumerate().any(|(x, r)| r.len() != mdp.actions_at(x))
        {
            return Err(invalid("Q table shape does not match the MDP"));
        }
        for (x, row) in rows.iter_mut().enumerate() {
            if mdp.is_terminal(x) {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Self {
            values: rows,
            terminal: mdp.terminal_flags().to_vec(),
        })
    }

    /// Sets `Q(x, a)`; writes to terminal states are ignored.
    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        if !self.terminal[state] {
            self.values[state][action] = value;
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// `Q(x, a) += alpha (target - Q(x, a))`.
    pub fn apply_update(&mut self, state: usize, action: usize, target: f64, alpha: f64) {
        if self.terminal[state] {
            return;
        }
        let q = &mut self.values[state][action];
        *q += alpha * (target - *q);
    }

    /// Sup-norm distance to another table of the same shape.
    pub fn max_abs_diff(&self, other: &TabularQ) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl ActionValues for TabularQ {
    fn value(&self, state: usize, action: usize) -> f64 {
        self.values[state][action]
    }
}

/// Linear tile coding over a chain with `K` interior states.
///
/// States are laid out as `0` (left absorbing), `1..=K` (interior, `x_1..x_K`)
/// and `K + 1` (right absorbing). Segment weights `w_{k,a}` for
/// `k = 1..K-1` give `Q(x_1, a) = w_{1,a}`, `Q(x_K, a) = w_{K-1,a}` and
/// `Q(x_k, a) = (w_{k-1,a} + w_{k,a}) / 2` in between. Absorbing states are
/// not parameterised and always read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TileCodedQ {
    n_interior: usize,
    n_actions: usize,
    /// row-major `(segment - 1) * n_actions + action`
    weights: Vec<f64>,
}

impl TileCodedQ {
    pub fn zeros(n_interior: usize, n_actions: usize) -> Result<Self> {
        if n_interior < 2 || n_actions == 0 {
            return Err(invalid("tile coding needs at least two interior states"));
        }
        Ok(Self {
            n_interior,
            n_actions,
            weights: vec![0.0; (n_interior - 1) * n_actions],
        })
    }

    /// Zero-initialised coding for a chain MDP, checking its layout.
    pub fn for_chain(mdp: &Mdp) -> Result<Self> {
        let s = mdp.n_states();
        let layout_ok = s >= 4
            && mdp.is_terminal(0)
            && mdp.is_terminal(s - 1)
            && (1..s - 1).all(|x| !mdp.is_terminal(x));
        if !layout_ok {
            return Err(invalid(
                "tile coding requires a chain layout: absorbing ends, interior states between",
            ));
        }
        Self::zeros(s - 2, mdp.n_actions())
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    /// Weight `w_{segment, action}` with `segment` in `1..K`.
    pub fn weight(&self, segment: usize, action: usize) -> f64 {
        self.weights[(segment - 1) * self.n_actions + action]
    }

    pub fn set_weight(&mut self, segment: usize, action: usize, value: f64) {
        self.weights[(segment - 1) * self.n_actions + action] = value;
    }

    /// Active segments and their feature values for interior state `x_k`.
    fn features(&self, state: usize) -> Option<[(usize, f64); 2]> {
        let k = state;
        if k == 0 || k > self.n_interior {
            return None;
        }
        Some(if k == 1 {
            [(1, 1.0), (1, 0.0)]
        } else if k == self.n_interior {
            [(k - 1, 1.0), (k - 1, 0.0)]
        } else {
            [(k - 1, 0.5), (k, 0.5)]
        })
    }

    /// Semi-gradient step `w += alpha (target - Q(x, a)) grad Q(x, a)`.
    pub fn apply_update(&mut self, state: usize, action: usize, target: f64, alpha: f64) {
        let Some(feats) = self.features(state) else {
            return;
        };
        let delta = alpha * (target - self.value(state, action));
        for (segment, g) in feats {
            if g != 0.0 {
                self.weights[(segment - 1) * self.n_actions + action] += delta * g;
            }
        }
    }
}

impl ActionValues for TileCodedQ {
    fn value(&self, state: usize, action: usize) -> f64 {
        match self.features(state) {
            Some(feats) => feats
                .iter()
                .map(|&(segment, g)| g * self.weight(segment, action))
                .sum(),
            None => 0.0,
        }
    }
}

/// Name of a representation, as used in configs and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReprKind {
    Tabular,
    TileCode,
}

impl ReprKind {
    pub fn name(self) -> &'static str {
        match self {
            ReprKind::Tabular => "tabular",
            ReprKind::TileCode => "tilecode",
        }
    }
}

impl std::str::FromStr for ReprKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tabular" => Ok(ReprKind::Tabular),
            "tilecode" => Ok(ReprKind::TileCode),
            other => Err(format!("unknown representation `{other}` (expected tabular or tilecode)")),
        }
    }
}

/// A learnable Q-function of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum QRepr {
    Tabular(TabularQ),
    TileCoded(TileCodedQ),
}

impl QRepr {
    pub fn zeros(kind: ReprKind, mdp: &Mdp) -> Result<Self> {
        Ok(match kind {
            ReprKind::Tabular => QRepr::Tabular(TabularQ::zeros(mdp)),
            ReprKind::TileCode => QRepr::TileCoded(TileCodedQ::for_chain(mdp)?),
        })
    }

    pub fn apply_update(&mut self, state: usize, action: usize, target: f64, alpha: f64) {
        match self {
            QRepr::Tabular(q) => q.apply_update(state, action, target, alpha),
            QRepr::TileCoded(q) => q.apply_update(state, action, target, alpha),
        }
    }
}

impl ActionValues for QRepr {
    fn value(&self, state: usize, action: usize) -> f64 {
        match self {
            QRepr::Tabular(q) => q.value(state, action),
            QRepr::TileCoded(q) => q.value(state, action),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{build_chain, ChainSpec};

    #[test]
    fn tile_formula_examples() {
        let mut q = TileCodedQ::zeros(6, 2).unwrap();
        q.set_weight(2, 1, 2.0);
        q.set_weight(3, 1, 4.0);
        assert_eq!(q.value(3, 1), 3.0);
        q.set_weight(1, 0, 1.25);
        assert_eq!(q.value(1, 0), 1.25);
        q.set_weight(5, 0, -0.5);
        assert_eq!(q.value(6, 0), -0.5);
        assert_eq!(q.value(0, 0), 0.0);
        assert_eq!(q.value(7, 0), 0.0);
    }

    #[test]
    fn tile_hand_expanded_table() {
        // K = 6, weights w_{k,a} = 10k + a
        let mut q = TileCodedQ::zeros(6, 2).unwrap();
        for k in 1..6 {
            for a in 0..2 {
                q.set_weight(k, a, (10 * k + a) as f64);
            }
        }
        let expected = [
            [10.0, 11.0],
            [15.0, 16.0],
            [25.0, 26.0],
            [35.0, 36.0],
            [45.0, 46.0],
            [50.0, 51.0],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                assert_eq!(q.value(i + 1, a), *v, "x_{} a={a}", i + 1);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let q = TileCodedQ::zeros(6, 4).unwrap();
        for x in 0..8 {
            for a in 0..4 {
                assert_eq!(q.value(x, a), 0.0);
            }
        }
    }

    #[test]
    fn updates() {
        let mdp = build_chain(&ChainSpec::default()).unwrap();
        let mut tab = TabularQ::zeros(&mdp);
        tab.apply_update(2, 1, 2.0, 0.5);
        assert_eq!(tab.value(2, 1), 1.0);
        tab.apply_update(2, 1, 1.0, 0.3);
        assert_eq!(tab.value(2, 1), 1.0);
        tab.apply_update(0, 0, 5.0, 1.0);
        assert_eq!(tab.value(0, 0), 0.0);

        let mut tile = TileCodedQ::for_chain(&mdp).unwrap();
        tile.apply_update(3, 0, 2.0, 1.0);
        assert_eq!(tile.weight(2, 0), 1.0);
        assert_eq!(tile.weight(3, 0), 1.0);
        assert_eq!(tile.value(3, 0), 1.0);
        let before = tile.clone();
        tile.apply_update(3, 0, 1.0, 0.7);
        assert_eq!(tile, before);
        tile.apply_update(0, 0, 9.0, 1.0);
        assert_eq!(tile, before);
    }

    #[test]
    fn tile_requires_chain_layout() {
        use crate::mdp::Outcome;
        let stay = |x| vec![vec![Outcome::new(x, 1.0, 1.0)]];
        let mdp = Mdp::new(0.5, 1, vec![false; 4], vec![1.0, 0.0, 0.0, 0.0], (0..4).map(stay).collect())
            .unwrap();
        assert!(TileCodedQ::for_chain(&mdp).is_err());
        assert!(TileCodedQ::zeros(1, 2).is_err());
    }
}
