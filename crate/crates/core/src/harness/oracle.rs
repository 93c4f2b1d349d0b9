//! Brute-force reference computations used to check the optimizer.
//!
//! These are deliberately written without reusing the engine's mixing,
//! softmax or entropy code. Only the λ candidate list is shared, since the
//! oracle is defined over the identical grid.

use crate::ensemble::{lambda_candidates, EnsembleError, GreedyConfig, Renormalize, TieBreak};

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseOracle {
    pub lambda: f64,
    pub entropy: f64,
    pub fused: Vec<f64>,
}

fn naive_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for i in 0..p.len() {
        if p[i] >= 1e-300 {
            h -= p[i] * p[i].ln();
        }
    }
    if h < 0.0 {
        0.0
    } else {
        h
    }
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let mut m = v[0];
    for i in 1..v.len() {
        if v[i] > m {
            m = v[i];
        }
    }
    let mut e = vec![0.0; v.len()];
    let mut total = 0.0;
    for i in 0..v.len() {
        e[i] = (v[i] - m).exp();
    }
    for i in 0..v.len() {
        total += e[i];
    }
    for i in 0..v.len() {
        e[i] /= total;
    }
    e
}

fn naive_mix(lambda: f64, a: &[f64], b: &[f64], renormalize: Renormalize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..a.len() {
        out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
    }
    match renormalize {
        Renormalize::None => out,
        Renormalize::Softmax => naive_softmax(&out),
    }
}

/// Exhaustive evaluation of every λ on the grid for one pairwise round.
pub fn oracle_pairwise(
    current: &[f64],
    candidate: &[f64],
    cfg: &GreedyConfig,
) -> Result<PairwiseOracle, EnsembleError> {
    if current.len() != candidate.len() {
        return Err(EnsembleError::LengthMismatch {
            expected: current.len(),
            found: candidate.len(),
        });
    }
    let grid = lambda_candidates(cfg.step_s)?;
    let mut entropies = Vec::new();
    for &l in &grid {
        entropies.push(naive_entropy(&naive_mix(l, current, candidate, cfg.renormalize)));
    }
    let mut lowest = f64::INFINITY;
    for &h in &entropies {
        if h < lowest {
            lowest = h;
        }
    }
    let mut chosen = None;
    for k in 0..grid.len() {
        if entropies[k] <= lowest + 1e-12 {
            match cfg.tie_break {
                TieBreak::LargestLambda => chosen = Some(k),
                TieBreak::SmallestLambda => {
                    if chosen.is_none() {
                        chosen = Some(k)
                    }
                }
            }
        }
    }
    let k = chosen.expect("non-empty grid");
    Ok(PairwiseOracle {
        lambda: grid[k],
        entropy: entropies[k],
        fused: naive_mix(grid[k], current, candidate, cfg.renormalize),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOracle {
    pub weights: Vec<f64>,
    pub entropy: f64,
    pub points_evaluated: usize,
}

fn compositions(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
    if parts == 1 {
        prefix.push(total);
        out(prefix);
        prefix.pop();
        return;
    }
    for k in 0..=total {
        prefix.push(k);
        compositions(total - k, parts - 1, prefix, out);
        prefix.pop();
    }
}

/// Minimum fused entropy over the whole simplex grid with spacing
/// `1 / divisions`.
pub fn oracle_global_simplex(
    per_model: &[Vec<f64>],
    divisions: usize,
) -> Result<SimplexOracle, EnsembleError> {
    let n = per_model.len();
    if n == 0 {
        return Err(EnsembleError::EmptyInput);
    }
    if divisions == 0 {
        return Err(EnsembleError::InvalidStep(0.0));
    }
    let len = per_model[0].len();
    if let Some(bad) = per_model.iter().find(|p| p.len() != len) {
        return Err(EnsembleError::LengthMismatch {
            expected: len,
            found: bad.len(),
        });
    }
    let mut best = SimplexOracle {
        weights: Vec::new(),
        entropy: f64::INFINITY,
        points_evaluated: 0,
    };
    compositions(divisions, n, &mut Vec::with_capacity(n), &mut |counts| {
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / divisions as f64).collect();
        let mut fused = vec![0.0; len];
        for (w, p) in weights.iter().zip(per_model) {
            for i in 0..len {
                fused[i] += w * p[i];
            }
        }
        let h = naive_entropy(&fused);
        best.points_evaluated += 1;
        if h < best.entropy {
            best.entropy = h;
            best.weights = weights;
        }
    });
    Ok(best)
}
