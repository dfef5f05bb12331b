/// Mean squared hinge that keeps known energies below `m_known` plus the mean squared
/// hinge that keeps unknown energies above `m_unknown`. An empty side contributes 0.
pub fn energy_margin_loss(known: &[f64], unknown: &[f64], m_known: f64, m_unknown: f64) -> f64 {
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|&e| f(e)).sum::<f64>() / xs.len() as f64
        }
    };
    mean(known, &|e| (e - m_known).max(0.0).powi(2)) + mean(unknown, &|e| (m_unknown - e).max(0.0).powi(2))
}

/// Derivatives of [`energy_margin_loss`] with respect to each energy.
pub fn energy_margin_grad(known: &[f64], unknown: &[f64], m_known: f64, m_unknown: f64) -> (Vec<f64>, Vec<f64>) {
    let nk = known.len().max(1) as f64;
    let nu = unknown.len().max(1) as f64;
    (
        known.iter().map(|&e| 2.0 * (e - m_known).max(0.0) / nk).collect(),
        unknown.iter().map(|&e| -2.0 * (m_unknown - e).max(0.0) / nu).collect(),
    )
}

pub fn total_loss(ce_loss: f64, energy_loss: f64, w: f64) -> f64 {
    ce_loss + w * energy_loss
}
