//! Box extraction from activation maps and localization metrics
//! (per-threshold box accuracy, MaxBoxAcc, mean IoU).
//!
//! A map is min-max normalized, upsampled to image resolution, binarized at
//! `value > τ` and the tight box around its largest 4-connected component is
//! compared with the ground truth. `τ = 0` keeps every pixel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// IoU thresholds reported by default.
pub const DEFAULT_DELTAS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
/// Number of intervals in the threshold grid; the grid has `TAU_STEPS + 1` points.
pub const TAU_STEPS: usize = 100;

/// The inclusive threshold grid `{0.00, 0.01, …, 1.00}`.
pub fn tau_grid() -> Vec<f64> {
    (0..=TAU_STEPS).map(|i| i as f64 / TAU_STEPS as f64).collect()
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::Contract(format!(
                "invalid box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x_max < width && self.y_max < height
    }
}

/// Intersection over union with inclusive pixel areas; disjoint boxes give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    if x0 > x1 || y0 > y1 {
        return 0.0;
    }
    let inter = (x1 - x0 + 1) * (y1 - y0 + 1);
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Per-image min-max normalization; a constant map becomes all zeros.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min(), map.max());
    if hi - lo <= 0.0 {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - lo) / (hi - lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

/// Resizes a `[h,w]` map to `[height,width]`.
pub fn upsample(map: &Tensor, (width, height): (usize, usize), mode: Upsample) -> Result<Tensor> {
    let [h, w] = *map.shape() else {
        return Err(Error::Shape(format!("expected a 2-D map, got {:?}", map.shape())));
    };
    if width == 0 || height == 0 {
        return Err(Error::Shape("target size must be positive".into()));
    }
    let out = match mode {
        Upsample::Nearest => Tensor::from_fn(&[height, width], |i| {
            map.at(&[i[0] * h / height, i[1] * w / width])
        }),
        Upsample::Bilinear => {
            let coord = |dst: usize, src_len: usize, dst_len: usize| {
                let c = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
                    .clamp(0.0, (src_len - 1) as f64);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, c - lo as f64)
            };
            Tensor::from_fn(&[height, width], |i| {
                let (y0, y1, fy) = coord(i[0], h, height);
                let (x0, x1, fx) = coord(i[1], w, width);
                let top = map.at(&[y0, x0]) * (1.0 - fx) + map.at(&[y0, x1]) * fx;
                let bot = map.at(&[y1, x0]) * (1.0 - fx) + map.at(&[y1, x1]) * fx;
                top * (1.0 - fy) + bot * fy
            })
        }
    };
    Ok(out)
}

fn survives(v: f64, tau: f64) -> bool {
    tau <= 0.0 || v > tau
}

/// Reusable flood-fill scratch space.
#[derive(Debug, Default)]
struct Labeler {
    visited: Vec<bool>,
    stack: Vec<usize>,
}

impl Labeler {
    /// Tight box of the largest 4-connected component of `{v > τ}` in a
    /// row-major `height x width` buffer. Ties go to the component whose
    /// first pixel in row-major order comes first.
    fn largest_box(&mut self, values: &[f64], width: usize, tau: f64) -> Option<BoundingBox> {
        let n = values.len();
        self.visited.clear();
        self.visited.resize(n, false);
        let mut best: Option<(usize, BoundingBox)> = None;
        for start in 0..n {
            if self.visited[start] || !survives(values[start], tau) {
                continue;
            }
            self.visited[start] = true;
            self.stack.push(start);
            let (mut area, mut bx) = (0usize, BoundingBox {
                x_min: start % width,
                y_min: start / width,
                x_max: start % width,
                y_max: start / width,
            });
            while let Some(p) = self.stack.pop() {
                area += 1;
                let (x, y) = (p % width, p / width);
                bx.x_min = bx.x_min.min(x);
                bx.x_max = bx.x_max.max(x);
                bx.y_min = bx.y_min.min(y);
                bx.y_max = bx.y_max.max(y);
                let mut visit = |q: usize, stack: &mut Vec<usize>| {
                    if !self.visited[q] && survives(values[q], tau) {
                        self.visited[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    visit(p - 1, &mut self.stack);
                }
                if x + 1 < width {
                    visit(p + 1, &mut self.stack);
                }
                if y > 0 {
                    visit(p - width, &mut self.stack);
                }
                if p + width < n {
                    visit(p + width, &mut self.stack);
                }
            }
            if best.is_none_or(|(a, _)| area > a) {
                best = Some((area, bx));
            }
        }
        best.map(|(_, b)| b)
    }
}

/// Box around the largest surviving component of a normalized map after
/// upsampling to `target = (width, height)`; `None` if nothing survives.
pub fn extract_box(
    norm_map: &Tensor,
    tau: f64,
    target: (usize, usize),
    mode: Upsample,
) -> Result<Option<BoundingBox>> {
    let up = upsample(norm_map, target, mode)?;
    Ok(Labeler::default().largest_box(up.data(), target.0, tau))
}

/// One image to localize: its raw activation map and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    /// Raw `[h,w]` activation map.
    pub activation: Tensor,
    pub gt_box: BoundingBox,
    /// `(width, height)` of the image in pixels.
    pub image_size: (usize, usize),
}

impl EvalSample {
    pub fn new(activation: Tensor, gt_box: BoundingBox, image_size: (usize, usize)) -> Result<Self> {
        if activation.rank() != 2 {
            return Err(Error::Shape(format!(
                "activation must be 2-D, got {:?}",
                activation.shape()
            )));
        }
        if !gt_box.fits_in(image_size.0, image_size.1) {
            return Err(Error::Contract(format!(
                "ground-truth box {gt_box:?} outside {image_size:?} image"
            )));
        }
        Ok(Self {
            activation,
            gt_box,
            image_size,
        })
    }
}

/// IoU of every sample at every grid threshold: `table[sample][tau]`.
pub fn iou_table(samples: &[EvalSample], mode: Upsample) -> Result<Vec<Vec<f64>>> {
    let grid = tau_grid();
    let mut labeler = Labeler::default();
    samples
        .iter()
        .map(|s| {
            let up = upsample(&normalize_map(&s.activation), s.image_size, mode)?;
            Ok(grid
                .iter()
                .map(|&tau| {
                    labeler
                        .largest_box(up.data(), s.image_size.0, tau)
                        .map_or(0.0, |b| iou(&b, &s.gt_box))
                })
                .collect())
        })
        .collect()
}

fn curve_from_table(table: &[Vec<f64>], delta: f64) -> Vec<f64> {
    let n = table.len() as f64;
    (0..=TAU_STEPS)
        .map(|t| table.iter().filter(|row| row[t] >= delta).count() as f64 / n)
        .collect()
}

fn require_samples(samples: &[EvalSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Contract("no evaluation samples".into()));
    }
    Ok(())
}

/// Fraction of samples with IoU ≥ `delta`, for every grid threshold.
pub fn box_acc_curve(samples: &[EvalSample], delta: f64, mode: Upsample) -> Result<Vec<f64>> {
    require_samples(samples)?;
    Ok(curve_from_table(&iou_table(samples, mode)?, delta))
}

/// Mean IoU at threshold `tau`; a missing box counts as 0.
pub fn miou_at(samples: &[EvalSample], tau: f64, mode: Upsample) -> Result<f64> {
    require_samples(samples)?;
    let mut labeler = Labeler::default();
    let mut sum = 0.0;
    for s in samples {
        let up = upsample(&normalize_map(&s.activation), s.image_size, mode)?;
        sum += labeler
            .largest_box(up.data(), s.image_size.0, tau)
            .map_or(0.0, |b| iou(&b, &s.gt_box));
    }
    Ok(sum / samples.len() as f64)
}

/// Full threshold sweep for a set of IoU thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct WsolReport {
    pub tau_grid: Vec<f64>,
    pub deltas: Vec<f64>,
    /// `acc[d][t]`: box accuracy at `deltas[d]` and `tau_grid[t]`.
    pub acc: Vec<Vec<f64>>,
    pub max_box_acc: Vec<f64>,
    /// Per-delta argmax threshold (smallest on ties).
    pub optimal_tau: Vec<f64>,
    /// Threshold maximizing the mean accuracy over deltas (smallest on ties).
    pub overall_optimal_tau: f64,
    /// Mean IoU at every grid threshold.
    pub miou_curve: Vec<f64>,
    pub miou_at_optimal_tau: f64,
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl WsolReport {
    pub fn from_iou_table(table: &[Vec<f64>], deltas: &[f64]) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Contract("no evaluation samples".into()));
        }
        if deltas.is_empty() {
            return Err(Error::Contract("no IoU thresholds".into()));
        }
        let grid = tau_grid();
        let acc: Vec<Vec<f64>> = deltas.iter().map(|&d| curve_from_table(table, d)).collect();
        let max_box_acc = acc.iter().map(|c| c.iter().copied().fold(0.0, f64::max)).collect();
        let optimal_tau = acc.iter().map(|c| grid[first_argmax(c)]).collect();
        let mean_curve: Vec<f64> = (0..grid.len())
            .map(|t| acc.iter().map(|c| c[t]).sum::<f64>() / deltas.len() as f64)
            .collect();
        let best = first_argmax(&mean_curve);
        let n = table.len() as f64;
        let miou_curve: Vec<f64> = (0..grid.len())
            .map(|t| table.iter().map(|row| row[t]).sum::<f64>() / n)
            .collect();
        Ok(Self {
            miou_at_optimal_tau: miou_curve[best],
            overall_optimal_tau: grid[best],
            tau_grid: grid,
            deltas: deltas.to_vec(),
            acc,
            max_box_acc,
            optimal_tau,
            miou_curve,
        })
    }

    /// Mean of MaxBoxAcc over the deltas.
    pub fn mean_max_box_acc(&self) -> f64 {
        self.max_box_acc.iter().sum::<f64>() / self.max_box_acc.len() as f64
    }

    /// Box accuracy averaged over deltas at each threshold.
    pub fn mean_curve(&self) -> Vec<f64> {
        (0..self.tau_grid.len())
            .map(|t| self.acc.iter().map(|c| c[t]).sum::<f64>() / self.deltas.len() as f64)
            .collect()
    }

    pub fn max_box_acc_at(&self, delta: f64) -> Option<f64> {
        self.deltas
            .iter()
            .position(|&d| (d - delta).abs() < 1e-12)
            .map(|i| self.max_box_acc[i])
    }
}

/// MaxBoxAcc, optimal thresholds and mIoU for `samples`.
pub fn max_box_acc(samples: &[EvalSample], deltas: &[f64], mode: Upsample) -> Result<WsolReport> {
    require_samples(samples)?;
    WsolReport::from_iou_table(&iou_table(samples, mode)?, deltas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = bx(0, 0, 3, 3);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(4, 0, 6, 3)), 0.0);
        assert!((iou(&a, &bx(2, 2, 5, 5)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_box() {
        assert!(BoundingBox::new(3, 0, 2, 0).is_err());
    }

    #[test]
    fn normalize_cases() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        assert_eq!(normalize_map(&m).data(), &[0.0, 0.5, 0.5, 1.0]);
        assert_eq!(normalize_map(&Tensor::full(&[2, 3], 4.0)), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn single_hot_cell_upsampled() {
        let mut m = Tensor::zeros(&[8, 8]);
        m.data_mut()[2 * 8 + 5] = 1.0;
        let b = extract_box(&m, 0.5, (64, 64), Upsample::Nearest).unwrap().unwrap();
        assert_eq!(b, bx(40, 16, 47, 23));
        assert_eq!(b.area(), 64);
    }

    #[test]
    fn tau_zero_and_one() {
        let m = Tensor::new(vec![2, 2], vec![0.0, 0.2, 1.0, 0.5]).unwrap();
        assert_eq!(
            extract_box(&m, 0.0, (2, 2), Upsample::Nearest).unwrap(),
            Some(bx(0, 0, 1, 1))
        );
        assert_eq!(extract_box(&m, 1.0, (2, 2), Upsample::Nearest).unwrap(), None);
    }

    #[test]
    fn largest_component_wins() {
        // area-5 component on the right, area-3 on the left
        let rows = [
            [1.0, 0.0, 0.0, 1.0, 1.0],
            [1.0, 0.0, 0.0, 1.0, 1.0],
            [1.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let m = Tensor::new(vec![3, 5], rows.concat()).unwrap();
        let b = extract_box(&m, 0.5, (5, 3), Upsample::Nearest).unwrap().unwrap();
        assert_eq!(b, bx(3, 0, 4, 2));
    }

    #[test]
    fn equal_components_prefer_topmost_leftmost() {
        let rows = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let m = Tensor::new(vec![2, 3], rows.concat()).unwrap();
        let b = extract_box(&m, 0.5, (3, 2), Upsample::Nearest).unwrap().unwrap();
        assert_eq!(b, bx(2, 0, 2, 0));
    }

    #[test]
    fn diagonal_pixels_are_separate() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = extract_box(&m, 0.5, (2, 2), Upsample::Nearest).unwrap().unwrap();
        assert_eq!(b.area(), 1);
    }

    #[test]
    fn bilinear_keeps_constant_maps() {
        let m = Tensor::full(&[3, 3], 0.25);
        let up = upsample(&m, (7, 5), Upsample::Bilinear).unwrap();
        assert_eq!(up.shape(), &[5, 7]);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn empty_samples_are_contract_errors() {
        assert!(matches!(miou_at(&[], 0.5, Upsample::Nearest), Err(Error::Contract(_))));
        assert!(box_acc_curve(&[], 0.5, Upsample::Nearest).is_err());
    }

    #[test]
    fn gt_outside_image_rejected() {
        assert!(EvalSample::new(Tensor::zeros(&[2, 2]), bx(0, 0, 8, 8), (8, 8)).is_err());
    }
}
