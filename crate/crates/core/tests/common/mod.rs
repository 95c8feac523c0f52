//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn neg_l2(a: &[f64], b: &[f64]) -> f64 {
    -a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `-log(e^p / Σ e^all)` with a direct (unshifted) sum.
fn nll(p: f64, all: &[f64]) -> f64 {
    -(p.exp() / all.iter().map(|x| x.exp()).sum::<f64>()).ln()
}

pub fn tcn(
    s: fn(&[f64], &[f64]) -> f64,
    zi: &Rows,
    zj: &Rows,
    zk: &Rows,
    negs: &[Vec<usize>],
) -> f64 {
    let b = zi.len();
    let mut total = 0.0;
    for a in 0..b {
        let p = s(&zi[a], &zj[a]);
        let mut all = vec![p, s(&zi[a], &zk[a])];
        for &n in &negs[a] {
            all.push(s(&zi[a], &zi[n]));
        }
        total += nll(p, &all);
    }
    total / b as f64
}

pub fn tcn_text(
    s: fn(&[f64], &[f64]) -> f64,
    zi: &Rows,
    zj: &Rows,
    v: &Rows,
    negs: &[Vec<usize>],
) -> f64 {
    let b = zi.len();
    let mut total = 0.0;
    for a in 0..b {
        let p = s(&zj[a], &v[a]);
        let mut all = vec![p, s(&zi[a], &v[a])];
        for &n in &negs[a] {
            all.push(s(&zj[n], &v[a]));
        }
        total += nll(p, &all);
    }
    total / b as f64
}

pub fn vip(
    s: fn(&[f64], &[f64]) -> f64,
    gamma: f64,
    zi: &Rows,
    zj: &Rows,
    zj1: &Rows,
    g: &Rows,
) -> f64 {
    let b = zi.len() as f64;
    let first: f64 = (0..zi.len()).map(|a| -s(&zi[a], &g[a])).sum::<f64>() * (1.0 - gamma) / b;
    let inner: f64 = (0..zi.len())
        .map(|a| (s(&zj[a], &g[a]) + 1.0 - gamma * s(&zj1[a], &g[a])).exp())
        .sum::<f64>()
        / b;
    first + inner.ln()
}

pub fn infonce(s: fn(&[f64], &[f64]) -> f64, zk: &Rows, v: &Rows) -> f64 {
    let b = zk.len();
    let mut total = 0.0;
    for a in 0..b {
        let num = s(&zk[a], &v[a]).exp();
        let den: f64 = (0..b)
            .filter(|&j| j != a)
            .map(|j| s(&zk[j], &v[a]).exp())
            .sum::<f64>()
            / b as f64;
        total += -(num / den).ln();
    }
    total / b as f64
}

pub fn triplet(s: fn(&[f64], &[f64]) -> f64, margin: f64, zi: &Rows, zj: &Rows, v: &Rows) -> f64 {
    (0..zi.len())
        .map(|a| (s(&v[a], &zi[a]) - s(&v[a], &zj[a]) + margin).max(0.0))
        .sum()
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; x.len()];
    for i in 0..x.len() {
        let less = x.iter().filter(|&&y| y < x[i]).count() as f64;
        let eq = x.iter().filter(|&&y| y == x[i]).count() as f64;
        r[i] = less + (eq + 1.0) / 2.0;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
