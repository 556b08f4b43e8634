use crate::error::{Error, Result};

/// One-vs-one AUC and the class pairs left out because one side had no
/// rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub auc: f64,
    pub skipped_pairs: Vec<(usize, usize)>,
}

/// `P(score of a positive > score of a negative)`, ties counting one half,
/// via average ranks.
fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

fn pair_score(p: &[f64], a: usize, b: usize) -> f64 {
    let s = p[a] + p[b];
    if s > 0.0 {
        p[a] / s
    } else {
        0.5
    }
}

/// Multiclass AUC by the Hand–Till one-vs-one construction.
///
/// For every unordered class pair `(i, j)`, rows whose target is `i` or `j`
/// are scored by `pᵢ / (pᵢ + pⱼ)` and by `pⱼ / (pᵢ + pⱼ)`; the pair's AUC is
/// the mean of the two Mann–Whitney statistics. The result averages the
/// pairs whose classes both occur in `targets`.
pub fn auc_ovo<P: AsRef<[f64]>>(probs: &[P], targets: &[usize]) -> Result<AucReport> {
    if probs.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let classes = probs.iter().map(|p| p.as_ref().len()).max().unwrap_or(0);
    if probs.iter().any(|p| p.as_ref().len() != classes) {
        return Err(Error::Data("predictions have different class counts".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Data(format!("target {t} out of range for {classes} classes")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (r, &t) in targets.iter().enumerate() {
        by_class[t].push(r);
    }
    if by_class.iter().filter(|rows| !rows.is_empty()).count() < 2 {
        return Err(Error::Data("AUC needs at least two classes present in the targets".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped_pairs = Vec::new();
    for i in 0..classes {
        for j in i + 1..classes {
            if by_class[i].is_empty() || by_class[j].is_empty() {
                skipped_pairs.push((i, j));
                continue;
            }
            let scores = |rows: &[usize], a, b| -> Vec<f64> { rows.iter().map(|&r| pair_score(probs[r].as_ref(), a, b)).collect() };
            let a_ij = mann_whitney(&scores(&by_class[i], i, j), &scores(&by_class[j], i, j));
            let a_ji = mann_whitney(&scores(&by_class[j], j, i), &scores(&by_class[i], j, i));
            total += (a_ij + a_ji) / 2.0;
            used += 1;
        }
    }
    Ok(AucReport {
        auc: total / used as f64,
        skipped_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn brute_force(probs: &[Vec<f64>], targets: &[usize]) -> f64 {
        let c = probs[0].len();
        let (mut total, mut pairs) = (0.0, 0);
        for i in 0..c {
            for j in i + 1..c {
                let ri: Vec<usize> = (0..targets.len()).filter(|&r| targets[r] == i).collect();
                let rj: Vec<usize> = (0..targets.len()).filter(|&r| targets[r] == j).collect();
                if ri.is_empty() || rj.is_empty() {
                    continue;
                }
                let orient = |pos: &[usize], neg: &[usize], a: usize, b: usize| {
                    let s = |r: usize| probs[r][a] / (probs[r][a] + probs[r][b]);
                    let mut acc = 0.0;
                    for &p in pos {
                        for &n in neg {
                            acc += if s(p) > s(n) { 1.0 } else if s(p) == s(n) { 0.5 } else { 0.0 };
                        }
                    }
                    acc / (pos.len() * neg.len()) as f64
                };
                total += (orient(&ri, &rj, i, j) + orient(&rj, &ri, j, i)) / 2.0;
                pairs += 1;
            }
        }
        total / pairs as f64
    }

    fn random_case(seed: u64, n: usize, c: usize, coarse: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let probs = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c)
                    .map(|_| if coarse { rng.gen_range(1..4) as f64 } else { rng.gen::<f64>() + 1e-3 })
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let targets = (0..n).map(|_| rng.gen_range(0..c)).collect();
        (probs, targets)
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..50 {
            let c = 3 + (seed as usize % 2);
            let n = 20 + (seed as usize * 7) % 181;
            let (p, t) = random_case(seed, n, c, seed % 3 == 0);
            let got = auc_ovo(&p, &t).unwrap().auc;
            assert!((got - brute_force(&p, &t)).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn perfect_and_constant() {
        let p = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.1, 0.9]];
        assert_eq!(auc_ovo(&p, &[0, 0, 1, 1]).unwrap().auc, 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        assert_eq!(auc_ovo(&flat, &[0, 1, 0, 1]).unwrap().auc, 0.5);
    }

    #[test]
    fn absent_class_pairs_are_reported() {
        let p = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.7, 0.1]];
        let r = auc_ovo(&p, &[0, 1]).unwrap();
        assert_eq!(r.skipped_pairs, vec![(0, 2), (1, 2)]);
        assert_eq!(r.auc, 1.0);
        assert!(auc_ovo(&p, &[1, 1]).is_err());
    }
}
