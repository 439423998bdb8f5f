use crate::Scalar;

/// A region of a feature map in cell units: rows `[y0, y1)`, columns `[x0, x1)`
/// of batch item `batch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiCells {
    pub batch: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Splits `[start, start + len)` into `parts` bins. Bin `i` covers
/// `[start + floor(i*len/parts), start + ceil((i+1)*len/parts))`, so no bin is
/// empty even when `len < parts` (short ranges replicate their cells).
pub fn roi_bins(start: usize, len: usize, parts: usize) -> Vec<(usize, usize)> {
    assert!(len >= 1 && parts >= 1);
    (0..parts)
        .map(|i| {
            let lo = i * len / parts;
            let hi = ((i + 1) * len).div_ceil(parts);
            (start + lo, start + hi.max(lo + 1))
        })
        .collect()
}

/// Max pooling of each ROI into `[d, p, p]`; returns the pooled data and the
/// flat source index of every output element.
pub(crate) fn roi_pool_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    rois: &[RoiCells],
    p: usize,
) -> (Vec<T>, Vec<usize>) {
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(rois.len() * d * p * p);
    let mut arg = Vec::with_capacity(rois.len() * d * p * p);
    for r in rois {
        assert!(r.batch < b, "roi batch index out of range");
        assert!(r.y0 < r.y1 && r.y1 <= h && r.x0 < r.x1 && r.x1 <= w, "roi {r:?} outside {h}x{w}");
        let ybins = roi_bins(r.y0, r.y1 - r.y0, p);
        let xbins = roi_bins(r.x0, r.x1 - r.x0, p);
        for ch in 0..d {
            let plane = (r.batch * d + ch) * h * w;
            for &(ya, yb) in &ybins {
                for &(xa, xb) in &xbins {
                    let mut best = plane + ya * w + xa;
                    for yy in ya..yb {
                        for xx in xa..xb {
                            let idx = plane + yy * w + xx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_partition_even_ranges() {
        assert_eq!(roi_bins(0, 4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(roi_bins(3, 6, 3), vec![(3, 5), (5, 7), (7, 9)]);
    }

    #[test]
    fn bins_never_empty_for_short_ranges() {
        assert_eq!(roi_bins(5, 1, 3), vec![(5, 6), (5, 6), (5, 6)]);
        for len in 1..10 {
            for p in 1..5 {
                let bins = roi_bins(0, len, p);
                assert!(bins.iter().all(|&(a, b)| a < b && b <= len));
                assert_eq!(bins[0].0, 0);
                assert_eq!(bins[p - 1].1, len);
            }
        }
    }
}
