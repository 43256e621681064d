//! Shared test-side oracles. Everything here is deliberately independent of
//! the implementation paths it checks: brute-force summations, dense
//! eigendecomposition, exhaustive alignment enumeration, classical test
//! statistics, and a deterministic synthetic corpus.

#![allow(dead_code)]

use fedmark::rng::SplitMix64;

// --- synthetic corpus ----------------------------------------------------

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "that", "it", "was", "for", "on", "are", "with", "as",
    "his", "they", "be", "at", "one", "have", "this", "from", "or", "had", "by", "hot", "word",
    "but", "what", "some", "we", "can", "out", "other", "were", "all", "there", "when", "up",
    "use", "your", "how", "said", "an", "each", "she", "which", "do", "their", "time", "if",
    "will", "way", "about", "many", "then", "them", "write", "would", "like", "so", "these",
    "her", "long", "make", "thing", "see", "him", "two", "has", "look", "more", "day", "could",
    "go", "come", "did", "number", "sound", "no", "most", "people", "my", "over", "know",
    "water", "than", "call", "first", "who", "may", "down", "side", "been", "now", "find",
    "any", "new", "work", "part", "take", "get", "place", "made", "live", "where", "after",
    "back", "little", "only", "round", "man", "year", "came", "show", "every", "good", "me",
    "give", "our", "under", "name", "very", "through", "just", "form", "sentence", "great",
    "think", "say", "help", "low", "line", "differ", "turn", "cause", "much", "mean", "before",
    "move", "right", "boy", "old", "too", "same", "tell", "does", "set", "three", "want",
    "air", "well", "also", "play", "small", "end", "put", "home", "read", "hand", "port",
    "large", "spell", "add", "even", "land", "here", "must", "big", "high", "such", "follow",
    "act", "why", "ask", "men", "change", "went", "light", "kind", "off", "need", "house",
    "picture", "try", "us", "again", "animal", "point", "mother", "world", "near", "build",
    "self", "earth", "father", "head", "stand", "own", "page", "should", "country", "found",
    "answer", "school", "grow", "study", "still", "learn", "plant", "cover", "food", "sun",
    "four", "between", "state", "keep", "eye", "never", "last", "let", "thought", "city",
    "tree", "cross", "farm", "hard", "start", "might", "story", "saw", "far", "sea", "draw",
    "left", "late", "run", "while", "press", "close", "night", "real", "life", "few", "north",
];

/// Deterministic English-like filler text: Zipf-weighted words assembled
/// into sentences and paragraphs. Serves as the "natural" corpus of the
/// simulator at desk scale.
pub fn synth_corpus(target_chars: usize, seed: u64) -> String {
    let mut stream = SplitMix64::new(seed);
    // Zipf-ish cumulative weights over the word list.
    let weights: Vec<f64> = (0..WORDS.len()).map(|i| 1.0 / (i as f64 + 3.0)).collect();
    let total: f64 = weights.iter().sum();
    let cum: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let mut draw_word = move |stream: &mut SplitMix64| {
        let u = (stream.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let idx = cum.partition_point(|&c| c < u).min(WORDS.len() - 1);
        WORDS[idx]
    };

    let mut out = String::with_capacity(target_chars + 128);
    let mut sentences_in_para = 0usize;
    while out.len() < target_chars {
        let n_words = 6 + (stream.next_u64() % 8) as usize;
        let comma_at =
            if n_words >= 8 { Some(3 + (stream.next_u64() % 3) as usize) } else { None };
        for w in 0..n_words {
            let word = draw_word(&mut stream);
            if w == 0 {
                let mut chars = word.chars();
                if let Some(first) = chars.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push(' ');
                out.push_str(word);
            }
            if Some(w) == comma_at {
                out.push(',');
            }
        }
        out.push_str(". ");
        sentences_in_para += 1;
        if sentences_in_para >= 5 + (stream.next_u64() % 4) as usize {
            out.pop();
            out.push('\n');
            sentences_in_para = 0;
        }
    }
    out.truncate(target_chars);
    out
}

// --- numeric oracles ------------------------------------------------------

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Dense symmetric eigensolver (cyclic Jacobi). Returns eigenvalues
/// descending with matching eigenvectors as rows.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> =
        (0..n).map(|i| (a[i][i], (0..n).map(|k| v[k][i]).collect())).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite eigenvalues"));
    let values = pairs.iter().map(|(l, _)| *l).collect();
    let vectors = pairs.into_iter().map(|(_, vec)| vec).collect();
    (values, vectors)
}

/// Sample covariance matrix (1/(N-1)) of the given rows.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, x) in mu.iter_mut().zip(r) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..d {
                cov[i][j] += di * (r[j] - mu[j]);
            }
        }
    }
    for row in &mut cov {
        for x in row.iter_mut() {
            *x /= (n - 1) as f64;
        }
    }
    cov
}

/// Brute-force P[Binomial(n, p) >= s]: every term computed independently via
/// a multiplicative binomial coefficient.
pub fn binomial_tail_oracle(n: u64, s: u64, p: f64) -> f64 {
    let mut total = 0.0;
    for i in s..=n {
        let mut coef = 1.0f64;
        for j in 1..=i {
            coef *= (n - i + j) as f64 / j as f64;
        }
        total += coef * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
    }
    total.min(1.0)
}

/// Exhaustive minimum alignment cost over all monotone alignments between
/// `y` and the key slice, with per-indel penalty `gamma`. Recursion mirrors
/// the textbook definition, no DP reuse.
pub fn alignment_cost_exhaustive(
    match_cost: &dyn Fn(usize, usize) -> f64,
    m: usize,
    n: usize,
    gamma: f64,
) -> f64 {
    fn rec(
        match_cost: &dyn Fn(usize, usize) -> f64,
        i: usize,
        j: usize,
        gamma: f64,
    ) -> f64 {
        if i == 0 && j == 0 {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 {
            best = best.min(rec(match_cost, i - 1, j - 1, gamma) + match_cost(i - 1, j - 1));
        }
        if i > 0 {
            best = best.min(rec(match_cost, i - 1, j, gamma) + gamma);
        }
        if j > 0 {
            best = best.min(rec(match_cost, i, j - 1, gamma) + gamma);
        }
        best
    }
    rec(match_cost, m, n, gamma)
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against U(0, 1).
pub fn ks_statistic_uniform(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite p-values"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let upper = (i as f64 + 1.0) / n - x;
        let lower = x - i as f64 / n;
        d = d.max(upper).max(lower);
    }
    d
}

/// Asymptotic two-sided KS critical value at level alpha.
pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    ((-0.5 * (alpha / 2.0).ln()) / n as f64).sqrt()
}

/// Pearson chi-square statistic of observed counts against expected
/// probabilities.
pub fn chi_square_statistic(observed: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e) * (o as f64 - e) / e
        })
        .sum()
}

/// Upper chi-square quantile via statrs (df = categories - 1).
pub fn chi_square_critical(alpha: f64, df: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(df as f64).expect("valid df").inverse_cdf(1.0 - alpha)
}
