//! Gradient projections onto the direction of a reference optimum, and
//! filter-normalized two-dimensional loss slices.
//!
//! Filter normalization treats each row of a weight matrix (one output
//! unit's incoming weights) as a filter and each bias vector as one more
//! filter. A random direction `δ` is rescaled so that, per filter `f`,
//! `‖δ_f‖ = ‖θ_f‖` at the center parameters.

use std::fmt::Display;
use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::io::fmt_f64;
use crate::linalg;
use crate::training::Snapshot;

/// `‖θ^(k) − θ*‖` below this is reported as a degenerate projection.
pub const DEGENERATE_DIRECTION: f64 = 1e-12;

const STREAM_DELTA: u64 = 21;
const STREAM_ETA: u64 = 22;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("term `{term}` at epoch {epoch}: {message}")]
    Term {
        term: String,
        epoch: u32,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, DiagError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub value: f64,
    /// Set when `θ^(k)` and `θ*` coincide; `value` is then 0.
    pub degenerate: bool,
}

/// `p = ⟨∇L, d*⟩ / ‖d*‖` with `d* = θ^(k) − θ*`.
///
/// With this sign, `p > 0` means the descent step `−∇L` has a positive
/// component towards `θ*`.
pub fn project(grad: &[f64], theta_k: &[f64], theta_star: &[f64]) -> Result<Projection> {
    if grad.len() != theta_k.len() || theta_k.len() != theta_star.len() {
        return Err(DiagError::Dimension(format!(
            "gradient {}, snapshot {}, reference {}",
            grad.len(),
            theta_k.len(),
            theta_star.len()
        )));
    }
    let d: Vec<f64> = theta_k.iter().zip(theta_star).map(|(a, b)| a - b).collect();
    let norm = linalg::norm(&d);
    if norm < DEGENERATE_DIRECTION {
        return Ok(Projection {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Projection {
        value: linalg::dot(grad, &d) / norm,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub epoch: u32,
    pub term: String,
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectionTrace {
    pub rows: Vec<ProjectionRow>,
}

impl ProjectionTrace {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epoch,term,value,degenerate")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.epoch, r.term, fmt_f64(r.value), u8::from(r.degenerate))?;
        }
        Ok(())
    }
}

/// Projections of each term's gradient at every snapshot. `grad` returns
/// the gradient of `term` at the given parameters.
pub fn gradient_projection<T, F, E>(
    snapshots: &[Snapshot],
    theta_star: &[f64],
    terms: &[T],
    mut grad: F,
) -> Result<ProjectionTrace>
where
    T: Copy + Display,
    F: FnMut(&[f64], T) -> std::result::Result<Vec<f64>, E>,
    E: Display,
{
    let mut rows = Vec::with_capacity(snapshots.len() * terms.len());
    for snap in snapshots {
        for &term in terms {
            let g = grad(&snap.params, term).map_err(|e| DiagError::Term {
                term: term.to_string(),
                epoch: snap.epoch,
                message: e.to_string(),
            })?;
            let p = project(&g, &snap.params, theta_star)?;
            if !p.value.is_finite() {
                return Err(DiagError::Term {
                    term: term.to_string(),
                    epoch: snap.epoch,
                    message: format!("non-finite projection {}", p.value),
                });
            }
            rows.push(ProjectionRow {
                epoch: snap.epoch,
                term: term.to_string(),
                value: p.value,
                degenerate: p.degenerate,
            });
        }
    }
    Ok(ProjectionTrace { rows })
}

/// Filters of an MLP's flat parameter layout: each weight row, then the
/// bias, layer by layer.
pub fn filter_segments(dims: &[usize]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        for _ in 0..fan_out {
            out.push(offset..offset + fan_in);
            offset += fan_in;
        }
        out.push(offset..offset + fan_out);
        offset += fan_out;
    }
    out
}

/// Gaussian direction rescaled filter by filter to the center's norms.
/// Entries outside every segment are zero.
pub fn filter_normalized_direction(
    center: &[f64],
    segments: &[Range<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if let Some(s) = segments.iter().find(|s| s.end > center.len()) {
        return Err(DiagError::Dimension(format!(
            "segment {s:?} exceeds {} parameters",
            center.len()
        )));
    }
    let mut dir = vec![0.0; center.len()];
    for seg in segments {
        for v in &mut dir[seg.clone()] {
            *v = StandardNormal.sample(rng);
        }
        let dn = linalg::norm(&dir[seg.clone()]);
        let cn = linalg::norm(&center[seg.clone()]);
        let scale = if dn > 0.0 { cn / dn } else { 0.0 };
        dir[seg.clone()].iter_mut().for_each(|v| *v *= scale);
    }
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    /// Shared coordinates of both axes, ascending, with 0 in the middle.
    pub coords: Vec<f64>,
    /// Row-major over `(a, b)`; `None` where the loss could not be evaluated.
    pub values: Vec<Option<f64>>,
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl LandscapeGrid {
    pub fn size(&self) -> usize {
        self.coords.len()
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size() + j]
    }

    /// Value at `(0, 0)`.
    pub fn center_value(&self) -> Option<f64> {
        let c = self.size() / 2;
        self.value(c, c)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "a,b,value")?;
        for (i, &a) in self.coords.iter().enumerate() {
            for (j, &b) in self.coords.iter().enumerate() {
                let v = self.value(i, j).map(fmt_f64).unwrap_or_default();
                writeln!(w, "{},{},{}", fmt_f64(a), fmt_f64(b), v)?;
            }
        }
        Ok(())
    }
}

/// `grid_size` points from `−range` to `range`; the middle one is exactly 0.
pub fn grid_coords(range: f64, grid_size: usize) -> Result<Vec<f64>> {
    if grid_size == 0 || grid_size.is_multiple_of(2) {
        return Err(DiagError::Invalid(format!("grid size {grid_size} must be odd")));
    }
    if !(range >= 0.0 && range.is_finite()) {
        return Err(DiagError::Invalid(format!("range {range} must be finite and non-negative")));
    }
    if grid_size == 1 {
        return Ok(vec![0.0]);
    }
    let c = (grid_size / 2) as f64;
    Ok((0..grid_size).map(|i| (i as f64 - c) / c * range).collect())
}

/// Loss over `center + a δ + b η` for two seeded, filter-normalized random
/// directions.
pub fn landscape_slice<F, E>(
    center: &[f64],
    segments: &[Range<usize>],
    loss: F,
    range: f64,
    grid_size: usize,
    seed: u64,
) -> Result<LandscapeGrid>
where
    F: Fn(&[f64]) -> std::result::Result<f64, E> + Sync,
{
    let stream = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let delta = filter_normalized_direction(center, segments, &mut stream(STREAM_DELTA))?;
    let eta = filter_normalized_direction(center, segments, &mut stream(STREAM_ETA))?;
    landscape_with_directions(center, delta, eta, loss, range, grid_size)
}

/// As [`landscape_slice`] with explicit directions.
pub fn landscape_with_directions<F, E>(
    center: &[f64],
    delta: Vec<f64>,
    eta: Vec<f64>,
    loss: F,
    range: f64,
    grid_size: usize,
) -> Result<LandscapeGrid>
where
    F: Fn(&[f64]) -> std::result::Result<f64, E> + Sync,
{
    if delta.len() != center.len() || eta.len() != center.len() {
        return Err(DiagError::Dimension(format!(
            "directions {} and {} for {} parameters",
            delta.len(),
            eta.len(),
            center.len()
        )));
    }
    let coords = grid_coords(range, grid_size)?;
    let n = coords.len();
    let values = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (coords[k / n], coords[k % n]);
            let result = if a == 0.0 && b == 0.0 {
                loss(center)
            } else {
                let point: Vec<f64> = center
                    .iter()
                    .zip(delta.iter().zip(&eta))
                    .map(|(c, (d, e))| c + a * d + b * e)
                    .collect();
                loss(&point)
            };
            result.ok().filter(|v| !v.is_nan())
        })
        .collect();
    Ok(LandscapeGrid {
        coords,
        values,
        delta,
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_quadratic() {
        // L = θ², θ = 2, θ* = 0
        let p = project(&[4.0], &[2.0], &[0.0]).unwrap();
        assert_eq!(p, Projection { value: 4.0, degenerate: false });
    }

    #[test]
    fn orthogonal_and_degenerate() {
        let p = project(&[0.0, 3.0], &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(p.value, 0.0);
        assert!(!p.degenerate);
        let p = project(&[5.0, 3.0], &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(p, Projection { value: 0.0, degenerate: true });
        assert!(project(&[1.0], &[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn projection_homogeneity(
            g in prop::collection::vec(-5.0f64..5.0, 4),
            d in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(linalg::norm(&d) > 1e-3);
            let zero = [0.0; 4];
            let base = project(&g, &d, &zero).unwrap().value;
            let gs: Vec<f64> = g.iter().map(|v| c * v).collect();
            let ds: Vec<f64> = d.iter().map(|v| c * v).collect();
            let scaled_grad = project(&gs, &d, &zero).unwrap().value;
            let scaled_dir = project(&g, &ds, &zero).unwrap().value;
            let tol = 1e-12 * (1.0 + base.abs() * c);
            prop_assert!((scaled_grad - c * base).abs() <= tol);
            prop_assert!((scaled_dir - base).abs() <= tol);
        }
    }

    #[test]
    fn convex_toy_projections_are_positive() {
        // L(θ) = ½ Σ q_i (θ_i − θ*_i)², gradient descent from a fixed start.
        let q = [1.0, 4.0, 0.5, 2.5];
        let star = [0.3, -1.2, 2.0, 0.0];
        let grad = |th: &[f64]| -> Vec<f64> {
            th.iter().zip(&star).zip(&q).map(|((t, s), q)| q * (t - s)).collect()
        };
        let mut theta = vec![3.0, 1.0, -2.0, 4.0];
        let mut snaps = Vec::new();
        for epoch in 0..40 {
            let g = grad(&theta);
            theta.iter_mut().zip(&g).for_each(|(t, g)| *t -= 0.1 * g);
            snaps.push(Snapshot {
                epoch,
                params: theta.clone(),
            });
        }
        let trace = gradient_projection(&snaps, &star, &["quadratic"], |p, _| {
            Ok::<_, String>(grad(p))
        })
        .unwrap();
        assert_eq!(trace.rows.len(), 40);
        assert!(trace.rows.iter().all(|r| r.value > 0.0 && !r.degenerate));
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,term,value,degenerate\n0,quadratic,"));
    }

    #[test]
    fn term_errors_carry_epoch() {
        let snaps = [Snapshot { epoch: 7, params: vec![1.0] }];
        let err = gradient_projection(&snaps, &[0.0], &["c_loss"], |_, _| Err::<Vec<f64>, _>("boom"))
            .unwrap_err();
        assert_eq!(
            err,
            DiagError::Term {
                term: "c_loss".into(),
                epoch: 7,
                message: "boom".into()
            }
        );
    }

    #[test]
    fn segments_cover_layout() {
        let dims = [3, 2, 1];
        let segs = filter_segments(&dims);
        // two weight rows of 3, bias of 2, one weight row of 2, bias of 1
        assert_eq!(segs, vec![0..3, 3..6, 6..8, 8..10, 10..11]);
        assert_eq!(segs.last().unwrap().end, crate::autodiff::MlpModel::param_count(&dims));
    }

    #[test]
    fn directions_match_filter_norms() {
        let center: Vec<f64> = (0..11).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let segs = filter_segments(&[3, 2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dir = filter_normalized_direction(&center, &segs, &mut rng).unwrap();
        for s in &segs {
            let dn = linalg::norm(&dir[s.clone()]);
            let cn = linalg::norm(&center[s.clone()]);
            assert!((dn - cn).abs() <= 1e-12 * cn.max(1.0), "{s:?}");
        }
    }

    fn bowl(p: &[f64]) -> std::result::Result<f64, String> {
        Ok(p.iter().map(|v| v * v).sum())
    }

    #[test]
    fn grid_center_and_shape() {
        let center = vec![0.7, -0.2, 1.1, 0.4, 0.0, 0.3];
        let segs = filter_segments(&[2, 2]);
        let grid = landscape_slice(&center, &segs, bowl, 1.0, 51, 3).unwrap();
        assert_eq!(grid.values.len(), 2601);
        assert_eq!(grid.coords[25], 0.0);
        assert_eq!(grid.coords[0], -1.0);
        assert_eq!(grid.coords[50], 1.0);
        assert_eq!(grid.center_value().unwrap().to_bits(), bowl(&center).unwrap().to_bits());
        let again = landscape_slice(&center, &segs, bowl, 1.0, 51, 3).unwrap();
        assert_eq!(grid, again);
    }

    #[test]
    fn zero_directions_give_constant_grid() {
        let center = vec![0.5, 1.5];
        let grid = landscape_with_directions(&center, vec![0.0; 2], vec![0.0; 2], bowl, 2.0, 5).unwrap();
        assert!(grid.values.iter().all(|v| *v == Some(2.5)));
    }

    #[test]
    fn failures_are_missing_points() {
        let center = vec![0.0, 0.0];
        let loss = |p: &[f64]| if p[0] > 0.5 { Err("out of domain") } else { Ok(p[0]) };
        let grid = landscape_with_directions(&center, vec![1.0, 0.0], vec![0.0, 1.0], loss, 1.0, 3).unwrap();
        assert_eq!(grid.values.iter().filter(|v| v.is_none()).count(), 3);
        let mut csv = Vec::new();
        grid.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().contains("1.0,0.0,\n"));
    }

    #[test]
    fn grid_size_validation() {
        assert!(grid_coords(1.0, 0).is_err());
        assert!(grid_coords(1.0, 4).is_err());
        assert_eq!(grid_coords(1.0, 1).unwrap(), vec![0.0]);
    }

    #[test]
    fn evaluation_order_does_not_matter() {
        let center = vec![0.3, -0.4, 0.8];
        let delta = vec![0.1, 0.2, -0.3];
        let eta = vec![-0.5, 0.0, 0.25];
        let coords = grid_coords(1.5, 7).unwrap();
        let grid = landscape_with_directions(&center, delta.clone(), eta.clone(), bowl, 1.5, 7).unwrap();
        // Serial evaluation in reverse order.
        for k in (0..49).rev() {
            let (a, b) = (coords[k / 7], coords[k % 7]);
            let p: Vec<f64> = (0..3).map(|i| center[i] + a * delta[i] + b * eta[i]).collect();
            let expected = if a == 0.0 && b == 0.0 { bowl(&center) } else { bowl(&p) };
            assert_eq!(grid.values[k], expected.ok());
        }
    }
}
