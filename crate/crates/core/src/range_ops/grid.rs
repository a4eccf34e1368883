//! Per-pixel k-nearest-neighbour sampling grids ranked by range difference.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// For every pixel, `k` sampling offsets `(d_row, d_col)` taken from a search
/// window and ordered by absolute range difference to the query pixel.
///
/// Selection ranks candidates by `(|range diff|, ring, d_row, d_col)` where
/// `ring` is the Chebyshev distance of the offset, so exact range ties prefer
/// spatially closer pixels. The selected offsets are then listed by
/// `(|range diff|, d_row, d_col)`; on a constant-range image this yields the
/// centered `sqrt(k) x sqrt(k)` block in row-major order, which makes the
/// proximity convolution coincide with an ordinary convolution there.
///
/// Positions outside the image take the range of the nearest border pixel
/// for ranking and read zero features, mirroring zero-padded convolution.
/// Invalid pixels never become candidates; missing slots repeat `(0, 0)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProximityGrid {
    height: usize,
    width: usize,
    k: usize,
    offsets: Vec<(i16, i16)>,
}

impl ProximityGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The `k` offsets of pixel `(row, col)`.
    pub fn offsets_at(&self, row: usize, col: usize) -> &[(i16, i16)] {
        let p = row * self.width + col;
        &self.offsets[p * self.k..(p + 1) * self.k]
    }

    pub fn offsets(&self) -> &[(i16, i16)] {
        &self.offsets
    }

    /// Linear source index of every (pixel, slot), `None` when outside the image.
    pub(crate) fn source_indices(&self) -> Vec<Option<usize>> {
        let (h, w) = (self.height as isize, self.width as isize);
        self.offsets
            .iter()
            .enumerate()
            .map(|(i, &(dr, dc))| {
                let p = i / self.k;
                let r = (p / self.width) as isize + dr as isize;
                let c = (p % self.width) as isize + dc as isize;
                (r >= 0 && c >= 0 && r < h && c < w).then(|| (r * w + c) as usize)
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    diff: f32,
    ring: i16,
    dr: i16,
    dc: i16,
}

/// Builds the proximity grid of a `height x width` range image.
///
/// `search` is the odd `(rows, cols)` extent of the window examined around
/// each pixel and `k` the number of neighbours kept (the query included).
pub fn build_proximity_grid(
    range: &[f32],
    valid: &[bool],
    height: usize,
    width: usize,
    search: (usize, usize),
    k: usize,
) -> Result<ProximityGrid> {
    const OP: &str = "build_proximity_grid";
    let (sh, sw) = search;
    if sh % 2 == 0 || sw % 2 == 0 {
        return Err(Error::invalid(
            OP,
            format!("search extents must be odd, got {sh}x{sw}"),
        ));
    }
    if k == 0 || k > sh * sw {
        return Err(Error::invalid(
            OP,
            format!("k = {k} must lie in [1, {}]", sh * sw),
        ));
    }
    if range.len() != height * width || valid.len() != height * width {
        return Err(Error::shape(
            OP,
            &[height, width],
            &[range.len(), valid.len()],
        ));
    }
    if sh / 2 > i16::MAX as usize || sw / 2 > i16::MAX as usize {
        return Err(Error::invalid(OP, "search window too large"));
    }
    let (rh, rw) = ((sh / 2) as isize, (sw / 2) as isize);
    let mut offsets = Vec::with_capacity(height * width * k);
    let mut cands: Vec<Candidate> = Vec::with_capacity(sh * sw);
    let rank = |a: &Candidate, b: &Candidate| -> Ordering {
        a.diff
            .total_cmp(&b.diff)
            .then(a.ring.cmp(&b.ring))
            .then(a.dr.cmp(&b.dr))
            .then(a.dc.cmp(&b.dc))
    };
    for r in 0..height {
        for c in 0..width {
            let p = r * width + c;
            if !valid[p] {
                offsets.extend(std::iter::repeat_n((0, 0), k));
                continue;
            }
            let rp = range[p];
            cands.clear();
            for dr in -rh..=rh {
                for dc in -rw..=rw {
                    let qr = (r as isize + dr).clamp(0, height as isize - 1) as usize;
                    let qc = (c as isize + dc).clamp(0, width as isize - 1) as usize;
                    let q = qr * width + qc;
                    if !valid[q] {
                        continue;
                    }
                    cands.push(Candidate {
                        diff: (range[q] - rp).abs(),
                        ring: dr.abs().max(dc.abs()) as i16,
                        dr: dr as i16,
                        dc: dc as i16,
                    });
                }
            }
            cands.sort_by(rank);
            cands.truncate(k);
            cands.sort_by(|a, b| {
                a.diff
                    .total_cmp(&b.diff)
                    .then(a.dr.cmp(&b.dr))
                    .then(a.dc.cmp(&b.dc))
            });
            offsets.extend(cands.iter().map(|cd| (cd.dr, cd.dc)));
            offsets.extend(std::iter::repeat_n((0, 0), k - cands.len()));
        }
    }
    Ok(ProximityGrid {
        height,
        width,
        k,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_3x3() -> Vec<(i16, i16)> {
        (-1..=1)
            .flat_map(|r| (-1..=1).map(move |c| (r, c)))
            .collect()
    }

    #[test]
    fn constant_range_gives_centered_block_everywhere() {
        let (h, w) = (6, 7);
        let g =
            build_proximity_grid(&vec![12.5; h * w], &vec![true; h * w], h, w, (5, 5), 9).unwrap();
        for r in 0..h {
            for c in 0..w {
                assert_eq!(
                    g.offsets_at(r, c),
                    centered_3x3().as_slice(),
                    "pixel {r},{c}"
                );
            }
        }
    }

    #[test]
    fn far_pixels_are_never_selected() {
        // 5x5 image, center query at 10, ring-1 neighbours at 10.1, outer ring at 50
        let mut range = vec![50.0_f32; 25];
        for r in 1..4 {
            for c in 1..4 {
                range[r * 5 + c] = 10.1;
            }
        }
        range[12] = 10.0;
        let g = build_proximity_grid(&range, &[true; 25], 5, 5, (5, 5), 9).unwrap();
        let offs = g.offsets_at(2, 2);
        assert_eq!(offs[0], (0, 0));
        assert!(offs.iter().all(|&(dr, dc)| dr.abs() <= 1 && dc.abs() <= 1));
    }

    #[test]
    fn k_one_is_query_only() {
        let range: Vec<f32> = (0..20).map(|i| (i * 7 % 5) as f32).collect();
        let g = build_proximity_grid(&range, &[true; 20], 4, 5, (5, 5), 1).unwrap();
        assert!(g.offsets().iter().all(|&o| o == (0, 0)));
    }

    #[test]
    fn even_search_rejected() {
        assert!(build_proximity_grid(&[1.0; 4], &[true; 4], 2, 2, (4, 5), 9).is_err());
    }

    #[test]
    fn invalid_pixels_are_skipped_and_padding_repeats_query() {
        let mut valid = vec![false; 9];
        valid[4] = true;
        valid[0] = true;
        let g = build_proximity_grid(&[3.0; 9], &valid, 3, 3, (3, 3), 4).unwrap();
        assert_eq!(g.offsets_at(1, 1), &[(-1, -1), (0, 0), (0, 0), (0, 0)]);
        // invalid query pixels carry only the query offset
        assert_eq!(g.offsets_at(0, 1), &[(0, 0); 4]);
    }
}
