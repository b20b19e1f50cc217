use crate::wire::EMOTION_COUNT;

/// Integer percentages summing to exactly 100: `floor(100 p_i)` plus one
/// point to each of the largest remainders until the total is reached.
/// Remainder ties go to the lower index. Inputs are renormalized by their
/// sum first, so a probability vector carrying float rounding is accepted.
pub fn quantize_probs(p: &[f64; EMOTION_COUNT]) -> Result<[u8; EMOTION_COUNT], String> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(format!("probabilities must be finite and non-negative: {p:?}"));
    }
    let sum: f64 = p.iter().sum();
    if sum <= 0.0 {
        return Err("probabilities sum to zero".into());
    }
    let scaled: Vec<f64> = p.iter().map(|v| v / sum * 100.0).collect();
    let mut out = [0u8; EMOTION_COUNT];
    let mut total = 0u32;
    for (o, s) in out.iter_mut().zip(&scaled) {
        *o = (s.floor() as u32).min(100) as u8;
        total += *o as u32;
    }
    let mut order: Vec<usize> = (0..EMOTION_COUNT).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(100usize.saturating_sub(total as usize)) {
        out[i] += 1;
    }
    Ok(out)
}
