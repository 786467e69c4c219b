//! Independent reference implementations used to cross-check the library.
//!
//! Each one is written from the textbook definition with a different
//! algorithm or numeric route than the production code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Link-overlap relatedness from raw membership lists, in base-10 logs.
pub fn relatedness(a: &[usize], b: &[usize], total: usize) -> f64 {
    let a: Vec<usize> = dedup(a);
    let b: Vec<usize> = dedup(b);
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let max = a.len().max(b.len());
    let min = a.len().min(b.len());
    let d = if inter == 0 || total <= min {
        1.0
    } else {
        let d = ((max as f64).log10() - (inter as f64).log10()) / ((total as f64).log10() - (min as f64).log10());
        d.clamp(0.0, 1.0)
    };
    1.0 - d
}

fn dedup(v: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Stationary weighted PageRank from a direct linear solve.
///
/// Transition `M[i][j] = w(i,j) / deg(j)` for off-diagonal edges; columns of
/// nodes without edges are uniform. Solves `(I - αM) x = (1-α)/N · 1`.
pub fn pagerank(weights: &[f64], n: usize, alpha: f64) -> Vec<f64> {
    let w = DMatrix::from_row_slice(n, n, weights);
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let deg: f64 = (0..n).filter(|&i| i != j).map(|i| w[(i, j)]).sum();
        for i in 0..n {
            m[(i, j)] = if deg > 0.0 {
                if i == j {
                    0.0
                } else {
                    w[(i, j)] / deg
                }
            } else {
                1.0 / n as f64
            };
        }
    }
    let a = DMatrix::<f64>::identity(n, n) - m * alpha;
    let b = DVector::<f64>::from_element(n, (1.0 - alpha) / n as f64);
    let x = a.lu().solve(&b).expect("I - αM is non-singular for α < 1");
    x.iter().copied().collect()
}

pub fn min_eigenvalue(weights: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(n, n, weights);
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Dirichlet-smoothed log-likelihood computed from raw token lists.
pub fn lmd(passages: &[Vec<String>], doc: usize, query: &[String], mu: f64) -> f64 {
    let total: usize = passages.iter().map(Vec::len).sum();
    let dl = passages[doc].len() as f64;
    let mut score = 0.0;
    for q in query {
        let tf = passages[doc].iter().filter(|t| *t == q).count() as f64;
        let cf: usize = passages.iter().map(|p| p.iter().filter(|t| *t == q).count()).sum();
        let pc = if cf == 0 { 1.0 / (total as f64 + 1.0) } else { cf as f64 / total as f64 };
        score += ((tf + mu * pc) / (dl + mu)).ln();
    }
    score
}

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
}

/// Clipped n-gram matches by repeated linear scans.
pub fn clipped_matches(cand: &[String], reference: &[String], n: usize) -> usize {
    let c = ngrams(cand, n);
    let mut r: Vec<Option<&[String]>> = ngrams(reference, n).into_iter().map(Some).collect();
    let mut hits = 0;
    for g in c {
        if let Some(slot) = r.iter_mut().find(|s| s.is_some_and(|x| x == g)) {
            *slot = None;
            hits += 1;
        }
    }
    hits
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// (precision, recall, f1)
pub fn rouge_n(cand: &[String], reference: &[String], n: usize) -> (f64, f64, f64) {
    let hits = clipped_matches(cand, reference, n) as f64;
    let cn = ngrams(cand, n).len() as f64;
    let rn = ngrams(reference, n).len() as f64;
    let p = if cn == 0.0 { 0.0 } else { hits / cn };
    let r = if rn == 0.0 { 0.0 } else { hits / rn };
    (p, r, f1(p, r))
}

/// LCS length by suffix recursion with memoisation.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

pub fn rouge_l(cand: &[String], reference: &[String]) -> (f64, f64, f64) {
    let l = lcs(cand, reference) as f64;
    let p = if cand.is_empty() { 0.0 } else { l / cand.len() as f64 };
    let r = if reference.is_empty() { 0.0 } else { l / reference.len() as f64 };
    (p, r, f1(p, r))
}

/// Single-reference BLEU with add-one smoothing of empty orders.
pub fn bleu(cand: &[String], reference: &[String], max_n: usize) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=max_n {
        let total = ngrams(cand, n).len() as f64;
        let hits = clipped_matches(cand, reference, n) as f64;
        let p = if hits == 0.0 { 1.0 / (total + 1.0) } else { hits / total };
        product *= p;
    }
    let geo = product.powf(1.0 / max_n as f64);
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * geo
}

/// nDCG@k with the ideal DCG found by trying every ordering of the judged grades.
pub fn ndcg_bruteforce(ranked: &[u8], judged: &[u8], k: usize) -> f64 {
    fn dcg(g: &[u8], k: usize) -> f64 {
        g.iter().take(k).enumerate().map(|(i, &x)| (2f64.powi(i32::from(x)) - 1.0) / ((i + 2) as f64).log2()).sum()
    }
    let mut best = 0.0f64;
    permute(&mut judged.to_vec(), 0, &mut |p| best = best.max(dcg(p, k)));
    if best == 0.0 {
        0.0
    } else {
        dcg(ranked, k) / best
    }
}

fn permute(v: &mut Vec<u8>, i: usize, f: &mut impl FnMut(&[u8])) {
    if i == v.len() {
        f(v);
        return;
    }
    for j in i..v.len() {
        v.swap(i, j);
        permute(v, i + 1, f);
        v.swap(i, j);
    }
}
