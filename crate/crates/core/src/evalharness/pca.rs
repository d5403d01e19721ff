//! Principal component projection by power iteration with deflation. The
//! covariance matrix is never formed; each step applies `Xᵀ(Xv)/(n-1)`.

use serde::Serialize;

use super::EvalError;
use crate::scalar::Scalar;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection<T> {
    pub mean: Vec<T>,
    /// Unit principal directions, most variance first.
    pub components: Vec<Vec<T>>,
    /// Variance captured by each component.
    pub variances: Vec<T>,
    pub total_variance: T,
    /// One row per input vector.
    pub coords: Vec<Vec<T>>,
    pub iterations: Vec<usize>,
}

impl<T: Scalar> Projection<T> {
    /// Input vector `i` rebuilt from the mean and its coordinates.
    pub fn reconstruct(&self, i: usize) -> Vec<T> {
        let mut out = self.mean.clone();
        for (c, comp) in self.coords[i].iter().zip(&self.components) {
            for (o, x) in out.iter_mut().zip(comp) {
                *o += *c * *x;
            }
        }
        out
    }

    pub fn explained_ratio(&self, component: usize) -> T {
        self.variances[component] / self.total_variance
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).fold(T::zero(), |s, v| s + v)
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Removes the projections onto `basis` (two passes for stability).
fn orthogonalize<T: Scalar>(v: &mut [T], basis: &[Vec<T>]) {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * *y;
            }
        }
    }
}

fn covariance_apply<T: Scalar>(rows: &[Vec<T>], v: &[T], denom: T) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for row in rows {
        let w = dot(row, v);
        for (o, x) in out.iter_mut().zip(row) {
            *o += w * *x;
        }
    }
    out.iter_mut().for_each(|o| *o /= denom);
    out
}

/// Projects `vectors` onto their top `components` principal directions.
pub fn pca_project<T: Scalar>(vectors: &[Vec<T>], components: usize) -> Result<Projection<T>, EvalError> {
    pca_project_with(vectors, components, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS)
}

pub fn pca_project_with<T: Scalar>(
    vectors: &[Vec<T>],
    components: usize,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Projection<T>, EvalError> {
    let n = vectors.len();
    if n < 2 {
        return Err(EvalError::DegenerateData("at least two vectors are required".into()));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(EvalError::DegenerateData("vectors must share a positive dimension".into()));
    }
    if components == 0 || components > d {
        return Err(EvalError::InvalidParams(format!("cannot extract {components} components from dimension {d}")));
    }
    let n_t = T::lit(n as f64);
    let mut mean = vec![T::zero(); d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += *x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_t);
    let rows: Vec<Vec<T>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(x, m)| *x - *m).collect()).collect();
    let denom = T::lit((n - 1) as f64);
    let total_variance = rows.iter().map(|r| dot(r, r)).fold(T::zero(), |s, v| s + v) / denom;
    if total_variance <= T::zero() {
        return Err(EvalError::DegenerateData("all vectors are identical".into()));
    }

    let tol = T::lit(tolerance).max(T::epsilon() * T::lit(100.0));
    let negligible = total_variance * T::epsilon() * T::lit(1e3);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| norm(&rows[*b]).total_cmp(&norm(&rows[*a])).then(a.cmp(b)));

    let mut basis: Vec<Vec<T>> = Vec::with_capacity(components);
    let mut variances = Vec::with_capacity(components);
    let mut iterations = Vec::with_capacity(components);
    for _ in 0..components {
        let unit = |j: usize| (0..d).map(|i| if i == j { T::one() } else { T::zero() }).collect::<Vec<T>>();
        let candidates = order.iter().map(|i| rows[*i].clone()).chain((0..d).map(unit));
        let mut v = Vec::new();
        for mut c in candidates {
            let before = norm(&c);
            orthogonalize(&mut c, &basis);
            let after = norm(&c);
            if after > before * T::epsilon().sqrt() && after > T::zero() {
                c.iter_mut().for_each(|x| *x /= after);
                v = c;
                break;
            }
        }
        let mut used = 0;
        for it in 1..=max_iterations {
            used = it;
            let mut w = covariance_apply(&rows, &v, denom);
            orthogonalize(&mut w, &basis);
            let nw = norm(&w);
            if nw <= negligible {
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let change = norm(&w.iter().zip(&v).map(|(a, b)| *a - *b).collect::<Vec<_>>());
            v = w;
            if change < tol {
                break;
            }
        }
        let xv: Vec<T> = rows.iter().map(|r| dot(r, &v)).collect();
        variances.push((dot(&xv, &xv) / denom).max(T::zero()));
        iterations.push(used);
        basis.push(v);
    }
    let coords = rows.iter().map(|r| basis.iter().map(|b| dot(r, b)).collect()).collect();
    Ok(Projection { mean, components: basis, variances, total_variance, coords, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planar_data_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 20;
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let data: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                (0..d).map(|i| offset[i] + a * u[i] + b * w[i]).collect()
            })
            .collect();
        let p = pca_project(&data, 2).unwrap();
        for (i, row) in data.iter().enumerate() {
            let err = p.reconstruct(i).iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "row {i}: {err}");
        }
        assert!((dot(&p.components[0], &p.components[1])).abs() < 1e-6);
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn collinear_second_component_vanishes() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project(&data, 2).unwrap();
        assert!(p.explained_ratio(1) < 1e-9);
        assert!((norm(&p.components[1]) - 1.0).abs() < 1e-9);
        assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-6);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(pca_project(&[vec![1.0, 2.0], vec![1.0, 2.0]], 2), Err(EvalError::DegenerateData(_))));
        assert!(matches!(pca_project(&[vec![1.0]], 1), Err(EvalError::DegenerateData(_))));
        assert!(pca_project(&[vec![1.0], vec![2.0]], 2).is_err());
    }

    #[test]
    fn works_in_f32() {
        let data: Vec<Vec<f32>> = (0..12).map(|i| vec![i as f32, (i % 3) as f32, 1.0]).collect();
        let p = pca_project(&data, 2).unwrap();
        assert!(p.variances[0] >= p.variances[1]);
        assert!((norm(&p.components[0]) - 1.0).abs() < 1e-5);
    }
}
