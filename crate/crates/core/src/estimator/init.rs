use rand::Rng;

use crate::dataset::Dataset;
use crate::linalg::Matrix;

/// Weight kept on the hard k-means label; the rest is spread evenly so no
/// component starts empty.
const HARD_LABEL_WEIGHT: f64 = 0.9;

fn point(data: &Dataset<f64>, i: usize) -> Vec<f64> {
    data.x(i).iter().chain(data.y(i)).copied().collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding plus Lloyd iterations on the concatenated (x, y) rows.
pub fn kmeans_labels<R: Rng + ?Sized>(data: &Dataset<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = data.n();
    let pts: Vec<Vec<f64>> = (0..n).map(|i| point(data, i)).collect();
    let mut centers = vec![pts[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[next].clone());
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(dist2(p, centers.last().unwrap()));
        }
    }
    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                .unwrap_or(0);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Softened one-hot responsibilities from k-means labels.
pub fn kmeans_responsibilities<R: Rng + ?Sized>(data: &Dataset<f64>, k: usize, rng: &mut R) -> Matrix<f64> {
    let labels = kmeans_labels(data, k, rng);
    let mut resp = Matrix::zeros(data.n(), k);
    if k == 1 {
        resp.as_mut_slice().iter_mut().for_each(|v| *v = 1.0);
        return resp;
    }
    let rest = (1.0 - HARD_LABEL_WEIGHT) / (k - 1) as f64;
    for (i, &l) in labels.iter().enumerate() {
        for c in 0..k {
            resp[(i, c)] = if c == l { HARD_LABEL_WEIGHT } else { rest };
        }
    }
    resp
}

/// Rows drawn uniformly from the simplex.
pub fn random_responsibilities<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Matrix<f64> {
    let mut resp = Matrix::zeros(n, k);
    for i in 0..n {
        let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..k {
            resp[(i, c)] = e[c] / s;
        }
    }
    resp
}
