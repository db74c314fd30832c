use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nearest;
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Lloyd's k-means seeded from `k` distinct random rows.
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// centroid. Stops early once assignments no longer change.
pub fn kmeans_init(vectors: &Mat, k: usize, iters: usize, seed: u64) -> Result<Mat> {
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if vectors.rows < k {
        return Err(Error::Config(format!(
            "k-means needs at least k = {k} rows, got {}",
            vectors.rows
        )));
    }
    let dim = vectors.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = rand::seq::index::sample(&mut rng, vectors.rows, k);
    let mut centroids = Mat::zeros(k, dim);
    for (c, i) in init.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(vectors.row(i));
    }

    let mut assign: Vec<usize> = vec![usize::MAX; vectors.rows];
    for _ in 0..iters {
        let mut changed = false;
        let mut dists = vec![0.0; vectors.rows];
        for i in 0..vectors.rows {
            let (c, d) = nearest(&centroids.data, dim, vectors.row(i));
            if assign[i] != c {
                changed = true;
                assign[i] = c;
            }
            dists[i] = d;
        }
        if !changed {
            break;
        }
        let mut sums = Mat::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..vectors.rows {
            counts[assign[i]] += 1;
            for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(vectors.row(i)) {
                *s += *v;
            }
        }
        // farthest points first, ties by index
        let mut order: Vec<usize> = (0..vectors.rows).collect();
        order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        let mut donors = order.into_iter();
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            } else if let Some(p) = donors.next() {
                centroids.row_mut(c).copy_from_slice(vectors.row(p));
                // the donor now sits on its own centroid
                dists[p] = 0.0;
            }
        }
    }
    Ok(centroids)
}

/// Sum of squared distances to the nearest centroid.
#[cfg(test)]
pub(crate) fn inertia(vectors: &Mat, centroids: &Mat) -> f64 {
    (0..vectors.rows)
        .map(|i| {
            let (c, _) = nearest(&centroids.data, centroids.cols, vectors.row(i));
            crate::tensor::sq_dist(vectors.row(i), centroids.row(c))
        })
        .sum()
}
