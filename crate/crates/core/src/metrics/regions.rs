use std::collections::VecDeque;

use crate::feature_store::BinaryMask;

/// One 8-connected ground-truth defect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub sample_id: String,
    /// Position in raster order of the region's first pixel.
    pub component_id: usize,
    /// Flat row-major pixel indices, in discovery order.
    pub pixels: Vec<usize>,
}

impl Region {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// Maximal 8-connected regions of `mask`, numbered by raster scan of their
/// first pixel.
pub fn connected_components(mask: &BinaryMask, sample_id: &str) -> Vec<Region> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (r, c) = (p / w, p % w);
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let q = nr * w + nc;
                    if mask.data[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        regions.push(Region {
            sample_id: sample_id.to_string(),
            component_id: regions.len(),
            pixels,
        });
    }
    regions
}
