use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Sobel gradient-magnitude threshold on luminance in `[0, 1]`.
pub const SOBEL_THRESHOLD: f64 = 1.0;

/// A set of integer pixel coordinates `(x, y)`, kept sorted by `(x, y)` without duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSet {
    points: Vec<(i32, i32)>,
}

impl EdgeSet {
    pub fn new(mut points: Vec<(i32, i32)>) -> Self {
        points.sort_unstable();
        points.dedup();
        EdgeSet { points }
    }

    pub fn points(&self) -> &[(i32, i32)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: (i32, i32)) -> bool {
        self.points.binary_search(&p).is_ok()
    }

    pub fn is_superset_of(&self, other: &EdgeSet) -> bool {
        other.points.iter().all(|&p| self.contains(p))
    }

    /// Active pixels of a row-major `w × h` boolean map.
    pub fn from_mask(mask: &[bool], w: usize, h: usize) -> Self {
        assert_eq!(mask.len(), w * h);
        let pts = (0..w * h).filter(|&i| mask[i]).map(|i| ((i % w) as i32, (i / w) as i32)).collect();
        EdgeSet::new(pts)
    }

    /// Filled pixels of `mask` that have an unfilled or off-map 4-neighbour.
    pub fn boundary_of(mask: &[bool], w: usize, h: usize) -> Self {
        assert_eq!(mask.len(), w * h);
        let filled = |x: i64, y: i64| {
            x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask[y as usize * w + x as usize]
        };
        let mut pts = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if filled(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !filled(x + dx, y + dy)) {
                    pts.push((x as i32, y as i32));
                }
            }
        }
        EdgeSet::new(pts)
    }
}

fn sq_dist(a: (i32, i32), b: (i32, i32)) -> i64 {
    let dx = (a.0 - b.0) as i64;
    let dy = (a.1 - b.1) as i64;
    dx * dx + dy * dy
}

/// `max_{p∈a} min_{q∈b} |p − q|²`, scanning `b` (sorted by x) outward from
/// each `p.x` and stopping once the x-gap alone exceeds the best distance.
fn directed_sq(a: &[(i32, i32)], b: &[(i32, i32)]) -> i64 {
    let mut worst = 0;
    for &p in a {
        let start = b.partition_point(|q| q.0 < p.0);
        let mut best = i64::MAX;
        for q in &b[start..] {
            let dx = (q.0 - p.0) as i64;
            if dx * dx >= best {
                break;
            }
            best = best.min(sq_dist(p, *q));
        }
        for q in b[..start].iter().rev() {
            let dx = (p.0 - q.0) as i64;
            if dx * dx >= best {
                break;
            }
            best = best.min(sq_dist(p, *q));
        }
        worst = worst.max(best);
        if worst == i64::MAX {
            break;
        }
    }
    worst
}

/// Symmetric Hausdorff distance in pixels,
/// `max(max_{p∈a} min_{q∈b} ‖p−q‖, max_{q∈b} min_{p∈a} ‖p−q‖)`.
///
/// Both sets must be non-empty.
///
/// ```
/// use nanocontrol::data::{hausdorff, EdgeSet};
/// let a = EdgeSet::new(vec![(0, 0)]);
/// let b = EdgeSet::new(vec![(3, 4)]);
/// assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
/// ```
pub fn hausdorff(a: &EdgeSet, b: &EdgeSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return contract_err(format!("hausdorff distance of an empty edge set ({} vs {} points)", a.len(), b.len()));
    }
    let d = directed_sq(a.points(), b.points()).max(directed_sq(b.points(), a.points()));
    Ok((d as f64).sqrt())
}

/// Mean of squared differences over every element, accumulated in f64.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return dim_err(format!("mse: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return dim_err("mse of empty tensors");
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

fn plane(image: &Tensor<f64>) -> Result<(Vec<f64>, usize, usize)> {
    match *image.shape() {
        [1, h, w] => Ok((image.data().to_vec(), w, h)),
        [3, h, w] => Ok((super::gray_of(image)?.into_data(), w, h)),
        [h, w] => Ok((image.data().to_vec(), w, h)),
        ref s => dim_err(format!("edge extraction needs [1×H×W], [3×H×W] or [H×W], got {s:?}")),
    }
}

/// Pixels whose Sobel gradient magnitude on luminance exceeds
/// [`SOBEL_THRESHOLD`]. Borders are handled by clamping coordinates.
pub fn edge_extract(image: &Tensor<f64>) -> Result<EdgeSet> {
    let (g, w, h) = plane(image)?;
    let at = |x: i64, y: i64| g[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let mut pts = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            if (gx * gx + gy * gy).sqrt() > SOBEL_THRESHOLD {
                pts.push((x as i32, y as i32));
            }
        }
    }
    Ok(EdgeSet::new(pts))
}

/// Boundary of the region whose luminance exceeds `threshold`, using the
/// same 4-neighbour rule as rendered edge maps.
pub fn boundary_extract(image: &Tensor<f64>, threshold: f64) -> Result<EdgeSet> {
    let (g, w, h) = plane(image)?;
    let mask: Vec<bool> = g.iter().map(|&v| v > threshold).collect();
    Ok(EdgeSet::boundary_of(&mask, w, h))
}
