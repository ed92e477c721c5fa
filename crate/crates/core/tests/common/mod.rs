//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use pinpoint_core::anomaly_map::ScoreGrid;
use pinpoint_core::feature_store::BinaryMask;
use pinpoint_core::student::{per_patch_loss, LossDistance, Params, StudentNet};
use rand::Rng;

/// AUROC by counting every (positive, negative) pair; ties count one half.
pub fn pairwise_auroc(scores: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut twice = 0u64;
    for p in &pos {
        for n in &neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    twice as f64 / (2.0 * pos.len() as f64 * neg.len() as f64)
}

/// 8-connected labelling by union-find; returns a label per pixel (0 for
/// background) and the number of components.
pub fn label_components(mask: &BinaryMask) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            for (dr, dc) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || cc >= w as i64 || !mask.get(rr as usize, cc as usize) {
                    continue;
                }
                let a = find(&mut parent, r * w + c);
                let b = find(&mut parent, rr as usize * w + cc as usize);
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut labels = vec![0; h * w];
    let mut roots = std::collections::HashMap::new();
    for (i, label) in labels.iter_mut().enumerate() {
        if mask.data[i] {
            let root = find(&mut parent, i);
            let next = roots.len() + 1;
            *label = *roots.entry(root).or_insert(next);
        }
    }
    (labels, roots.len())
}

/// AUPRO evaluated at every distinct score, regions optionally capped in size.
pub fn dense_aupro(maps: &[ScoreGrid], masks: &[BinaryMask], limit: f64, max_region: Option<f64>) -> f64 {
    let mut negatives = Vec::new();
    let mut regions: Vec<Vec<f32>> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let (labels, count) = label_components(mask);
        let mut per = vec![Vec::new(); count];
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                negatives.push(map.data[i]);
            } else {
                per[l - 1].push(map.data[i]);
            }
        }
        regions.extend(per);
    }
    regions.retain(|r| max_region.is_none_or(|cap| r.len() as f64 <= cap));
    let mut thresholds: Vec<f32> = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0f64, 0.0f64)];
    for &t in &thresholds {
        let fpr = negatives.iter().filter(|&&s| s >= t).count() as f64 / negatives.len() as f64;
        let pro = regions
            .iter()
            .map(|r| r.iter().filter(|&&s| s >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        points.push((fpr, pro));
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

/// Mean per-patch loss of `net` on a batch, the objective `backward` differentiates.
pub fn mean_loss(net: &StudentNet<f64>, x: &[f64], t: &[f64], distance: LossDistance) -> f64 {
    let out = net.forward(x).unwrap();
    let d = net.d_out();
    let n = out.len() / d;
    out.chunks_exact(d).zip(t.chunks_exact(d)).map(|(p, q)| per_patch_loss(p, q, distance)).sum::<f64>() / n as f64
}

/// Central-difference gradient of `mean_loss` for every parameter.
pub fn numeric_gradient(net: &StudentNet<f64>, x: &[f64], t: &[f64], distance: LossDistance, h: f64) -> Params<f64> {
    let mut probe = net.clone();
    let mut grad = Params::zeros(net.params.d_in, net.params.units, net.params.d_out);
    for b in 0..6 {
        let len = probe.params.blocks()[b].1.len();
        for i in 0..len {
            let orig = probe.params.blocks()[b].1[i];
            probe.params.blocks_mut()[b].1[i] = orig + h;
            let up = mean_loss(&probe, x, t, distance);
            probe.params.blocks_mut()[b].1[i] = orig - h;
            let down = mean_loss(&probe, x, t, distance);
            probe.params.blocks_mut()[b].1[i] = orig;
            grad.blocks_mut()[b].1[i] = (up - down) / (2.0 * h);
        }
    }
    grad
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random toy segmentation set: a few anomalous images with up to `max_regions`
/// blobs each and one nominal image. Scores are noisy and optionally coarse
/// so that ties occur.
pub fn random_toy<R: Rng>(rng: &mut R, max_side: usize, max_regions: usize) -> (Vec<ScoreGrid>, Vec<BinaryMask>) {
    let images = rng.gen_range(1..=3);
    let coarse = rng.gen_bool(0.5);
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for i in 0..=images {
        let h = rng.gen_range(8..=max_side);
        let w = rng.gen_range(8..=max_side);
        let mut mask = BinaryMask::empty(h, w);
        if i < images {
            for _ in 0..rng.gen_range(1..=max_regions) {
                let bh = rng.gen_range(1..=(h / 3).max(1));
                let bw = rng.gen_range(1..=(w / 3).max(1));
                let r0 = rng.gen_range(0..=h - bh);
                let c0 = rng.gen_range(0..=w - bw);
                for r in r0..r0 + bh {
                    for c in c0..c0 + bw {
                        mask.set(r, c, true);
                    }
                }
            }
        }
        let shift = rng.gen_range(0.0..1.5);
        let data = mask
            .data
            .iter()
            .map(|&m| {
                let v: f32 = rng.gen_range(0.0..1.0) + if m { shift } else { 0.0 };
                if coarse { (v * 16.0).round() / 16.0 } else { v }
            })
            .collect();
        maps.push(ScoreGrid::new(h, w, data));
        masks.push(mask);
    }
    (maps, masks)
}
