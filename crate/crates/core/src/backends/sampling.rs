//! Temperature and nucleus (top-p) sampling over a masked logit vector.

use rand::Rng;

/// Index of the largest unmasked logit, lowest index on ties.
pub fn argmax_masked(logits: &[f64], allowed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&z, &ok)) in logits.iter().zip(allowed).enumerate() {
        if ok && best.is_none_or(|b| z > logits[b]) {
            best = Some(i);
        }
    }
    best
}

/// Softmax over the allowed entries; disallowed entries get probability 0.
pub fn masked_softmax(logits: &[f64], allowed: &[bool], temperature: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &ok)| ok)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&z, &ok)| if ok { ((z - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Smallest set of tokens (by descending probability, ties by index) whose
/// mass reaches `top_p`, renormalized.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.iter().map(|&(i, p)| (i, p / mass)).collect()
}

pub fn sample_masked<R: Rng + ?Sized>(
    logits: &[f64],
    allowed: &[bool],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Option<usize> {
    if !allowed.iter().any(|&a| a) {
        return None;
    }
    let probs = masked_softmax(logits, allowed, temperature);
    let kept = nucleus(&probs, top_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &kept {
        acc += p;
        if u < acc {
            return Some(i);
        }
    }
    kept.last().map(|&(i, _)| i)
}
