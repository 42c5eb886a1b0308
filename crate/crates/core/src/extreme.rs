//! Extreme-event labelling and the extreme value loss.
//!
//! Outputs are labelled right-extreme (`y > eps1`), left-extreme (`y < -eps2`)
//! or normal. The loss is a binary cross entropy whose two terms are weighted by
//! class proportions and by GEV-shaped brackets `[1 - u/gamma]^gamma`.

use std::fmt;

use crate::error::{Error, Result};

/// Smallest threshold `choose_thresholds` will return.
pub const MIN_THRESHOLD: f64 = f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventThresholds {
    pub epsilon1: f64,
    pub epsilon2: f64,
}

impl EventThresholds {
    pub fn new(epsilon1: f64, epsilon2: f64) -> Result<Self> {
        for (name, v) in [("epsilon1", epsilon1), ("epsilon2", epsilon2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Argument(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(Self { epsilon1, epsilon2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndicatorLabel {
    Left,
    Normal,
    Right,
}

impl IndicatorLabel {
    pub fn value(self) -> i8 {
        match self {
            IndicatorLabel::Left => -1,
            IndicatorLabel::Normal => 0,
            IndicatorLabel::Right => 1,
        }
    }

    pub fn from_value(v: i8) -> Result<Self> {
        match v {
            -1 => Ok(IndicatorLabel::Left),
            0 => Ok(IndicatorLabel::Normal),
            1 => Ok(IndicatorLabel::Right),
            _ => Err(Error::Argument(format!("indicator label must be -1, 0 or 1, got {v}"))),
        }
    }
}

impl fmt::Display for IndicatorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Which tail a binary extreme-event task targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Right,
    Left,
}

impl Tail {
    /// 1 if `label` is an event of this tail, else 0.
    pub fn binary_label(self, label: IndicatorLabel) -> u8 {
        match (self, label) {
            (Tail::Right, IndicatorLabel::Right) | (Tail::Left, IndicatorLabel::Left) => 1,
            _ => 0,
        }
    }

    /// Signed distance past the threshold, in units of `scale`. Left mirrors right
    /// by flipping the sign of `y`.
    pub fn exceedance_score(self, y: f64, th: &EventThresholds, scale: f64) -> f64 {
        match self {
            Tail::Right => (y - th.epsilon1) / scale,
            Tail::Left => (-y - th.epsilon2) / scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvlParams {
    pub beta0: f64,
    pub beta1: f64,
    pub gamma: f64,
}

impl EvlParams {
    pub fn new(beta0: f64, beta1: f64, gamma: f64) -> Result<Self> {
        for (name, b) in [("beta0", beta0), ("beta1", beta1)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Argument(format!("{name} must lie in [0, 1], got {b}")));
            }
        }
        if beta0 + beta1 > 1.0 + 1e-12 {
            return Err(Error::Argument(format!("beta0 + beta1 = {} exceeds 1", beta0 + beta1)));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Argument(format!("gamma must be finite and > 0, got {gamma}")));
        }
        Ok(Self { beta0, beta1, gamma })
    }

    /// Exchanges the two class weights.
    pub fn swapped(self) -> Self {
        Self { beta0: self.beta1, beta1: self.beta0, gamma: self.gamma }
    }
}

/// Class proportions of a label sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    /// Share of normal events.
    pub beta0: f64,
    /// Share of right-extreme events.
    pub beta1: f64,
    /// Share of left-extreme events.
    pub left: f64,
    pub total: usize,
}

impl BetaEstimate {
    pub fn evl_params(&self, gamma: f64, swap: bool) -> Result<EvlParams> {
        let p = EvlParams::new(self.beta0, self.beta1, gamma)?;
        Ok(if swap { p.swapped() } else { p })
    }
}

pub fn indicator(y: f64, th: &EventThresholds) -> IndicatorLabel {
    if y > th.epsilon1 {
        IndicatorLabel::Right
    } else if y < -th.epsilon2 {
        IndicatorLabel::Left
    } else {
        IndicatorLabel::Normal
    }
}

/// `log G(y)` for the GEV distribution with extreme value index `gamma`.
pub fn gev_log_cdf(y: f64, gamma: f64) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(-(-y).exp());
    }
    let base = 1.0 - y / gamma;
    if !(base > 0.0) {
        return Err(Error::Domain(format!("GEV support requires 1 - y/gamma > 0 (y={y}, gamma={gamma})")));
    }
    Ok(-base.powf(gamma))
}

pub fn gev_cdf(y: f64, gamma: f64) -> Result<f64> {
    gev_log_cdf(y, gamma).map(f64::exp)
}

/// Tail approximation `1 - F(y) ~ (1 - F(xi)) [1 - log G((y - xi) / scale)]` for `y > xi`.
///
/// Evaluated literally; note that at `y -> xi+` this tends to `2 (1 - F(xi))`
/// when `gamma = 0`, so it is not a proper survival function near the threshold.
pub fn tail_prob(y: f64, xi: f64, scale: f64, f_xi: f64, gamma: f64) -> Result<f64> {
    if !(y > xi) {
        return Err(Error::Domain(format!("tail approximation needs y > xi (y={y}, xi={xi})")));
    }
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("scale must be > 0, got {scale}")));
    }
    if !(0.0..1.0).contains(&f_xi) {
        return Err(Error::Domain(format!("F(xi) must lie in [0, 1), got {f_xi}")));
    }
    let log_g = gev_log_cdf((y - xi) / scale, gamma)?;
    Ok((1.0 - f_xi) * (1.0 - log_g))
}

fn evl_check(u: f64, v: u8, p: &EvlParams) -> Result<(f64, f64)> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("EVL needs 0 < u < 1, got {u}")));
    }
    if v > 1 {
        return Err(Error::Domain(format!("EVL label must be 0 or 1, got {v}")));
    }
    let b0 = 1.0 - u / p.gamma;
    let b1 = 1.0 - (1.0 - u) / p.gamma;
    if b0 <= 0.0 || b1 <= 0.0 {
        return Err(Error::Domain(format!("EVL bracket not positive for u={u}, gamma={}", p.gamma)));
    }
    Ok((b0, b1))
}

/// Extreme value loss for predicted event probability `u` and binary label `v`.
pub fn evl_loss(u: f64, v: u8, p: &EvlParams) -> Result<f64> {
    let (b0, b1) = evl_check(u, v, p)?;
    let g = p.gamma;
    let v = f64::from(v);
    let right = if v != 0.0 { -p.beta0 * b0.powf(g) * v * u.ln() } else { 0.0 };
    let normal = if v != 1.0 { -p.beta1 * b1.powf(g) * (1.0 - v) * (1.0 - u).ln() } else { 0.0 };
    Ok(right + normal)
}

/// `d evl_loss / d u`.
pub fn evl_grad(u: f64, v: u8, p: &EvlParams) -> Result<f64> {
    let (b0, b1) = evl_check(u, v, p)?;
    let g = p.gamma;
    let v = f64::from(v);
    let mut d = 0.0;
    if v != 0.0 {
        d += p.beta0 * v * (b0.powf(g - 1.0) * u.ln() - b0.powf(g) / u);
    }
    if v != 1.0 {
        d -= p.beta1 * (1.0 - v) * (b1.powf(g - 1.0) * (1.0 - u).ln() - b1.powf(g) / (1.0 - u));
    }
    Ok(d)
}

/// Loss for a left-extreme task: `u` is the predicted probability of a left event.
pub fn evl_loss_left(u: f64, label: IndicatorLabel, p: &EvlParams) -> Result<f64> {
    evl_loss(u, Tail::Left.binary_label(label), p)
}

pub fn evl_grad_left(u: f64, label: IndicatorLabel, p: &EvlParams) -> Result<f64> {
    evl_grad(u, Tail::Left.binary_label(label), p)
}

pub fn estimate_betas(labels: &[IndicatorLabel]) -> Result<BetaEstimate> {
    if labels.is_empty() {
        return Err(Error::Argument("cannot estimate proportions from an empty label list".into()));
    }
    let mut counts = [0usize; 3];
    for l in labels {
        counts[(l.value() + 1) as usize] += 1;
    }
    let t = labels.len() as f64;
    Ok(BetaEstimate {
        beta0: counts[1] as f64 / t,
        beta1: counts[2] as f64 / t,
        left: counts[0] as f64 / t,
        total: labels.len(),
    })
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `eps1 = Q(q)`, `eps2 = -Q(1 - q)` over training targets, each clamped to at
/// least [`MIN_THRESHOLD`].
pub fn choose_thresholds(targets: &[f64], q: f64) -> Result<EventThresholds> {
    if targets.len() < 2 {
        return Err(Error::Argument("need at least two targets to pick thresholds".into()));
    }
    if !(q > 0.5 && q < 1.0) {
        return Err(Error::Argument(format!("quantile must lie in (0.5, 1), got {q}")));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("non-finite target value".into()));
    }
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let upper = quantile_sorted(&sorted, q);
    let lower = quantile_sorted(&sorted, 1.0 - q);
    let spread_floor = f64::EPSILON * upper.abs().max(lower.abs()).max(1.0);
    if upper - lower <= spread_floor {
        return Err(Error::Data(format!(
            "threshold clamp: quantiles {:.0}% and {:.0}% coincide at {upper}; targets are degenerate",
            (1.0 - q) * 100.0,
            q * 100.0
        )));
    }
    EventThresholds::new(upper.max(MIN_THRESHOLD), (-lower).max(MIN_THRESHOLD))
}
