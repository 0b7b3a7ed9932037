//! Gradient-domain (Poisson) compositing.
//!
//! Inside the region the output keeps the Laplacian of the insert; on the
//! 4-connected outer boundary it matches the base. Image edges are treated
//! as Neumann boundaries (missing neighbours are simply dropped from the
//! stencil). Each channel is an SPD system solved with conjugate residuals,
//! whose residual norm never increases from one iteration to the next.

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone)]
pub struct BlendProblem {
    pub base: RgbImage,
    pub insert: RgbImage,
    pub region: Mask,
}

#[derive(Debug, Clone)]
pub struct BlendOutcome {
    pub image: RgbImage,
    /// Iterations used by the slowest channel.
    pub iterations: usize,
    /// Residual 2-norm per iteration (starting residual first), per channel.
    pub residuals: Vec<Vec<f64>>,
}

impl BlendOutcome {
    pub fn final_residual(&self) -> f64 {
        self.residuals
            .iter()
            .filter_map(|r| r.last().copied())
            .fold(0.0, f64::max)
    }
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Sparse operator of the Dirichlet problem on the region pixels.
struct System {
    /// (y, x) of each unknown.
    cells: Vec<(usize, usize)>,
    /// For each unknown: in-image neighbour count and the unknown indices of
    /// its in-region neighbours.
    degree: Vec<f64>,
    inner: Vec<Vec<usize>>,
    /// For each unknown: pixel positions of neighbours outside the region.
    outer: Vec<Vec<(usize, usize)>>,
    /// All in-image neighbours (for the guidance field).
    all: Vec<Vec<(usize, usize)>>,
}

impl System {
    fn new(region: &Mask) -> Self {
        let (h, w) = (region.height, region.width);
        let mut index = vec![usize::MAX; h * w];
        let mut cells = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if region.get(y, x) {
                    index[y * w + x] = cells.len();
                    cells.push((y, x));
                }
            }
        }
        let mut degree = Vec::with_capacity(cells.len());
        let mut inner = Vec::with_capacity(cells.len());
        let mut outer = Vec::with_capacity(cells.len());
        let mut all = Vec::with_capacity(cells.len());
        for &(y, x) in &cells {
            let mut nb_in = Vec::new();
            let mut nb_out = Vec::new();
            let mut nb_all = Vec::new();
            for (dy, dx) in NEIGHBOURS {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                nb_all.push((ny, nx));
                if region.get(ny, nx) {
                    nb_in.push(index[ny * w + nx]);
                } else {
                    nb_out.push((ny, nx));
                }
            }
            degree.push(nb_all.len() as f64);
            inner.push(nb_in);
            outer.push(nb_out);
            all.push(nb_all);
        }
        Self {
            cells,
            degree,
            inner,
            outer,
            all,
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = self.degree[i] * x[i];
            for &j in &self.inner[i] {
                v -= x[j];
            }
            *o = v;
        }
    }

    fn rhs(&self, base: &RgbImage, insert: &RgbImage, c: usize) -> Vec<f64> {
        (0..self.cells.len())
            .map(|i| {
                let (y, x) = self.cells[i];
                let gp = insert.get(c, y, x);
                let guide: f64 = self.all[i].iter().map(|&(ny, nx)| gp - insert.get(c, ny, nx)).sum();
                let bound: f64 = self.outer[i].iter().map(|&(ny, nx)| base.get(c, ny, nx)).sum();
                guide + bound
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate residual iteration for SPD `A`. Returns the residual history.
fn conjugate_residual(
    sys: &System,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let mut r = vec![0.0; n];
    sys.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut history = vec![norm(&r)];
    if history[0] <= tol {
        return Ok(history);
    }
    let mut ar = vec![0.0; n];
    sys.apply(&r, &mut ar);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar);
    for _ in 0..max_iters {
        let app = dot(&ap, &ap);
        if app == 0.0 {
            break;
        }
        let alpha = rar / app;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r);
        history.push(res);
        if res <= tol {
            return Ok(history);
        }
        sys.apply(&r, &mut ar);
        let rar_next = dot(&r, &ar);
        let beta = rar_next / rar;
        rar = rar_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    Err(Error::NoConvergence {
        iterations: history.len() - 1,
        residual: *history.last().unwrap_or(&f64::NAN),
    })
}

/// Solves the per-channel Poisson problem. Pixels outside the region are
/// copied from `base` unchanged.
pub fn poisson_blend(problem: &BlendProblem, tol: f64, max_iters: usize) -> Result<BlendOutcome> {
    let BlendProblem {
        base,
        insert,
        region,
    } = problem;
    if !base.same_dims(insert) {
        return Err(Error::Shape("base and insert differ in shape".into()));
    }
    region.expect_dims(base.height, base.width)?;
    if region.is_empty() {
        return Err(Error::EmptyHole);
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    base.ensure_finite()?;
    insert.ensure_finite()?;

    let mut image = base.clone();
    if region.count() == region.height * region.width {
        // No boundary to anchor the solution: keep the insert.
        image.data.copy_from_slice(&insert.data);
        return Ok(BlendOutcome {
            image,
            iterations: 0,
            residuals: vec![Vec::new(); base.channels],
        });
    }

    let sys = System::new(region);
    let mut residuals = Vec::with_capacity(base.channels);
    let mut iterations = 0;
    for c in 0..base.channels {
        let b = sys.rhs(base, insert, c);
        let mut x: Vec<f64> = sys.cells.iter().map(|&(y, x)| base.get(c, y, x)).collect();
        let history = conjugate_residual(&sys, &b, &mut x, tol, max_iters)?;
        iterations = iterations.max(history.len() - 1);
        residuals.push(history);
        for (&(y, xx), v) in sys.cells.iter().zip(x) {
            image.set(c, y, xx, v);
        }
    }
    Ok(BlendOutcome {
        image,
        iterations,
        residuals,
    })
}

/// Mean absolute step across the region boundary, a simple seam measure.
pub fn seam_gradient(image: &RgbImage, region: &Mask) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for y in 0..region.height {
        for x in 0..region.width {
            if !region.get(y, x) {
                continue;
            }
            for (dy, dx) in NEIGHBOURS {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= region.height as isize || nx >= region.width as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if region.get(ny, nx) {
                    continue;
                }
                for c in 0..image.channels {
                    total += (image.get(c, y, x) - image.get(c, ny, nx)).abs();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BlendProblem {
        let base = RgbImage::from_fn(3, h, w, |_, _, _| rng.random());
        let insert = RgbImage::from_fn(3, h, w, |_, _, _| rng.random());
        let (y0, x0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
        let (y1, x1) = (rng.random_range(y0 + 1..h), rng.random_range(x0 + 1..w));
        let mut region = Mask::from_fn(h, w, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x));
        // ragged edge
        for _ in 0..h {
            let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
            region.set(y, x, !region.get(y, x));
        }
        if region.count() == h * w {
            region.set(0, 0, false);
        }
        if region.is_empty() {
            region.set(h / 2, w / 2, true);
        }
        BlendProblem { base, insert, region }
    }

    /// Assembles the same equations densely and solves them by LU.
    fn dense_oracle(p: &BlendProblem) -> RgbImage {
        let (h, w) = (p.region.height, p.region.width);
        let cells: Vec<(usize, usize)> = (0..h * w)
            .map(|i| (i / w, i % w))
            .filter(|&(y, x)| p.region.get(y, x))
            .collect();
        let pos = |y: usize, x: usize| cells.iter().position(|&c| c == (y, x));
        let n = cells.len();
        let mut out = p.base.clone();
        for c in 0..3 {
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut b = DVector::<f64>::zeros(n);
            for (i, &(y, x)) in cells.iter().enumerate() {
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    a[(i, i)] += 1.0;
                    b[i] += p.insert.get(c, y, x) - p.insert.get(c, ny, nx);
                    match pos(ny, nx) {
                        Some(j) => a[(i, j)] -= 1.0,
                        None => b[i] += p.base.get(c, ny, nx),
                    }
                }
            }
            let sol = a.lu().solve(&b).expect("nonsingular");
            for (i, &(y, x)) in cells.iter().enumerate() {
                out.set(c, y, x, sol[i]);
            }
        }
        out
    }

    #[test]
    fn matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = random_problem(&mut rng, 16, 16);
            let got = poisson_blend(&p, 1e-12, 2000).unwrap();
            let want = dense_oracle(&p);
            assert!(got.image.max_abs_diff(&want) < 1e-8);
        }
    }

    #[test]
    fn residual_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_problem(&mut rng, 16, 16);
        let out = poisson_blend(&p, 1e-12, 2000).unwrap();
        for hist in &out.residuals {
            for pair in hist.windows(2) {
                assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{pair:?}");
            }
        }
    }

    #[test]
    fn outside_region_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_problem(&mut rng, 12, 9);
        let out = poisson_blend(&p, 1e-10, 2000).unwrap();
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..9 {
                    if !p.region.get(y, x) {
                        assert_eq!(out.image.get(c, y, x).to_bits(), p.base.get(c, y, x).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn constant_offset_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = random_problem(&mut rng, 16, 16);
        p.insert = RgbImage::from_fn(3, 16, 16, |c, y, x| p.base.get(c, y, x) + 0.3);
        let out = poisson_blend(&p, 1e-10, 2000).unwrap();
        assert!(out.image.max_abs_diff(&p.base) < 1e-12);
        p.insert = p.base.clone();
        let out = poisson_blend(&p, 1e-10, 2000).unwrap();
        assert!(out.image.max_abs_diff(&p.base) < 1e-12);
    }

    #[test]
    fn errors() {
        let img = RgbImage::zeros(3, 4, 4);
        let p = BlendProblem {
            base: img.clone(),
            insert: img.clone(),
            region: Mask::empty(4, 4),
        };
        assert!(matches!(poisson_blend(&p, 1e-6, 10), Err(Error::EmptyHole)));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_problem(&mut rng, 16, 16);
        match poisson_blend(&p, 1e-14, 1) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 1e-14);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_region_returns_insert() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p0 = random_problem(&mut rng, 6, 6);
        let p = BlendProblem {
            region: Mask::full(6, 6),
            ..p0
        };
        let out = poisson_blend(&p, 1e-10, 10).unwrap();
        assert_eq!(out.image, p.insert);
    }

    #[test]
    fn blending_reduces_seams() {
        let base = RgbImage::filled(3, 16, 16, 0.2);
        let insert = RgbImage::from_fn(3, 16, 16, |_, y, _| 0.7 + 0.01 * y as f64);
        let region = Mask::from_fn(16, 16, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
        let naive = RgbImage::from_fn(3, 16, 16, |c, y, x| {
            if region.get(y, x) { insert.get(c, y, x) } else { base.get(c, y, x) }
        });
        let out = poisson_blend(&BlendProblem { base, insert, region: region.clone() }, 1e-10, 1000).unwrap();
        assert!(seam_gradient(&out.image, &region) < 0.1 * seam_gradient(&naive, &region));
    }
}
