//! Brute-force reference implementations and fixture helpers shared by the
//! integration tests. Written for clarity, not speed, and independent of the
//! library's own kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rfga_core::wsol::BoundingBox;
use rfga_core::{PoolView, Tensor};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_0f_7e57)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha20Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn idx(shape: &[usize], i: &[usize]) -> usize {
    i.iter().zip(shape).fold(0, |acc, (&a, &d)| acc * d + a)
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Per-sample `[C,H,W]` pooling by explicit loops.
pub fn avg_pool(x: &Tensor, view: PoolView) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    match view {
        PoolView::Channel => Tensor::from_fn(&[c, 1, 1], |i| {
            let mut s = 0.0;
            for y in 0..h {
                for z in 0..w {
                    s += d[(i[0] * h + y) * w + z];
                }
            }
            s / (h * w) as f64
        }),
        PoolView::Height => Tensor::from_fn(&[c, h, 1], |i| {
            (0..w).map(|z| d[(i[0] * h + i[1]) * w + z]).sum::<f64>() / w as f64
        }),
        PoolView::Width => Tensor::from_fn(&[c, 1, w], |i| {
            (0..h).map(|y| d[(i[0] * h + y) * w + i[2]]).sum::<f64>() / h as f64
        }),
    }
}

/// Sliding-window cross-correlation with zero padding along `axis`.
pub fn conv1d(signal: &Tensor, kernel: &[f64], axis: usize) -> Tensor {
    let shape = signal.shape().to_vec();
    let half = (kernel.len() / 2) as isize;
    Tensor::from_fn(&shape, |i| {
        let mut acc = 0.0;
        for (t, &k) in kernel.iter().enumerate() {
            let pos = i[axis] as isize + t as isize - half;
            if pos < 0 || pos >= shape[axis] as isize {
                continue;
            }
            let mut j = i.to_vec();
            j[axis] = pos as usize;
            acc += k * signal.data()[idx(&shape, &j)];
        }
        acc
    })
}

/// `σ(z_h[c,h] + z_w[c,w] + z_c[c])` by a triple loop; absent views add 0.
pub fn expand(
    z_h: Option<&Tensor>,
    z_w: Option<&Tensor>,
    z_c: Option<&Tensor>,
    (c, h, w): (usize, usize, usize),
) -> Tensor {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                if let Some(t) = z_h {
                    s += t.data()[ch * h + y];
                }
                if let Some(t) = z_w {
                    s += t.data()[ch * w + x];
                }
                if let Some(t) = z_c {
                    s += t.data()[ch];
                }
                out[(ch * h + y) * w + x] = sigmoid(s);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

pub fn normalize(map: &Tensor) -> Tensor {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Nearest-neighbour upsampling, binarization and component search by
/// iterative minimum-label propagation. `τ = 0` keeps every pixel.
pub fn extract_box(norm_map: &Tensor, tau: f64, (width, height): (usize, usize)) -> Option<BoundingBox> {
    let (h, w) = (norm_map.shape()[0], norm_map.shape()[1]);
    let mut fg = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let v = norm_map.data()[(y * h / height) * w + x * w / width];
            fg[y * width + x] = tau <= 0.0 || v > tau;
        }
    }
    let mut label: Vec<usize> = (0..fg.len()).collect();
    loop {
        let mut changed = false;
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                if !fg[p] {
                    continue;
                }
                let mut best = label[p];
                let mut consider = |q: usize| {
                    if fg[q] && label[q] < best {
                        best = label[q];
                    }
                };
                if x > 0 {
                    consider(p - 1);
                }
                if x + 1 < width {
                    consider(p + 1);
                }
                if y > 0 {
                    consider(p - width);
                }
                if y + 1 < height {
                    consider(p + width);
                }
                if best < label[p] {
                    label[p] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    // label = row-major index of the component's first pixel
    let mut count = vec![0usize; fg.len()];
    for p in 0..fg.len() {
        if fg[p] {
            count[label[p]] += 1;
        }
    }
    let mut best: Option<usize> = None;
    for l in 0..fg.len() {
        if count[l] > 0 && best.is_none_or(|b| count[l] > count[b]) {
            best = Some(l);
        }
    }
    let best = best?;
    let pts: Vec<(usize, usize)> = (0..fg.len())
        .filter(|&p| fg[p] && label[p] == best)
        .map(|p| (p % width, p / width))
        .collect();
    Some(BoundingBox {
        x_min: pts.iter().map(|p| p.0).min().unwrap(),
        y_min: pts.iter().map(|p| p.1).min().unwrap(),
        x_max: pts.iter().map(|p| p.0).max().unwrap(),
        y_max: pts.iter().map(|p| p.1).max().unwrap(),
    })
}

/// IoU by counting pixels.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..=a.y_max.max(b.y_max) {
        for x in 0..=a.x_max.max(b.x_max) {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

/// Everything a localization report contains, recomputed from scratch.
#[derive(Debug)]
pub struct ReportOracle {
    pub acc: Vec<Vec<f64>>,
    pub max_box_acc: Vec<f64>,
    pub optimal_tau: Vec<f64>,
    pub overall_optimal_tau: f64,
    pub miou: f64,
}

/// `maps[i]` raw activation, `gts[i]` ground truth, all images `size`.
pub fn report(maps: &[Tensor], gts: &[BoundingBox], size: (usize, usize), deltas: &[f64]) -> ReportOracle {
    let taus: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let table: Vec<Vec<f64>> = maps
        .iter()
        .zip(gts)
        .map(|(m, g)| {
            let n = normalize(m);
            taus.iter()
                .map(|&t| extract_box(&n, t, size).map_or(0.0, |b| iou(&b, g)))
                .collect()
        })
        .collect();
    let n = maps.len() as f64;
    let acc: Vec<Vec<f64>> = deltas
        .iter()
        .map(|&d| {
            (0..taus.len())
                .map(|t| table.iter().filter(|r| r[t] >= d).count() as f64 / n)
                .collect()
        })
        .collect();
    let argmax = |v: &[f64]| {
        let mut b = 0;
        for i in 1..v.len() {
            if v[i] > v[b] {
                b = i;
            }
        }
        b
    };
    let mean_curve: Vec<f64> = (0..taus.len())
        .map(|t| acc.iter().map(|c| c[t]).sum::<f64>() / deltas.len() as f64)
        .collect();
    let best = argmax(&mean_curve);
    ReportOracle {
        max_box_acc: acc.iter().map(|c| c[argmax(c)]).collect(),
        optimal_tau: acc.iter().map(|c| taus[argmax(c)]).collect(),
        overall_optimal_tau: taus[best],
        miou: table.iter().map(|r| r[best]).sum::<f64>() / n,
        acc,
    }
}

/// Random map with a few blobs so components of varied sizes appear.
pub fn blobby_map(h: usize, w: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let centers: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.5..2.5),
            )
        })
        .collect();
    Tensor::from_fn(&[h, w], |i| {
        let noise: f64 = rng.random_range(0.0..0.3);
        centers
            .iter()
            .map(|&(cy, cx, s)| {
                let d2 = (i[0] as f64 - cy).powi(2) + (i[1] as f64 - cx).powi(2);
                (-d2 / (2.0 * s * s)).exp()
            })
            .sum::<f64>()
            + noise
    })
}

pub fn random_box(width: usize, height: usize, rng: &mut ChaCha20Rng) -> BoundingBox {
    let (x0, x1) = {
        let a = rng.random_range(0..width);
        let b = rng.random_range(0..width);
        (a.min(b), a.max(b))
    };
    let (y0, y1) = {
        let a = rng.random_range(0..height);
        let b = rng.random_range(0..height);
        (a.min(b), a.max(b))
    };
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}
