//! Binary-mask geometry shared by the shape descriptors and the boundary
//! metrics. Pixels outside the image count as background.

use super::Mask;

/// Number of foreground/background pixel-edge transitions (4-neighbourhood).
pub fn crack_perimeter(mask: &Mask) -> usize {
    let (h, w) = mask.dims();
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.at(r as usize, c as usize);
    let mut edges = 0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            if fg(r, c) {
                edges += [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().filter(|(dr, dc)| !fg(r + dr, c + dc)).count();
            }
        }
    }
    edges
}

/// Crack length with each one-pixel staircase step replaced by its
/// diagonal: every concave corner of the crack polygon (a lattice point with
/// exactly three of its four pixels in the foreground) subtracts `2 − √2`.
/// Rectangles keep their exact crack length; digital disks come out close to
/// their Euclidean circumference.
pub fn corner_corrected_perimeter(mask: &Mask) -> f64 {
    let (h, w) = mask.dims();
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.at(r as usize, c as usize);
    let mut concave = 0usize;
    for r in 0..=h as isize {
        for c in 0..=w as isize {
            let around = [fg(r - 1, c - 1), fg(r - 1, c), fg(r, c - 1), fg(r, c)];
            if around.iter().filter(|&&b| b).count() == 3 {
                concave += 1;
            }
        }
    }
    crack_perimeter(mask) as f64 - (2.0 - std::f64::consts::SQRT_2) * concave as f64
}

/// Eigenvalues `(λ_min, λ_max)` of the second central moments of the region,
/// treating each pixel as a unit square of uniform density (so each axis
/// variance carries the extra 1/12 of a unit interval). A `w × h` rectangle
/// then has eigenvalues exactly `w²/12` and `h²/12`.
pub fn coordinate_covariance_eigen(mask: &Mask) -> (f64, f64) {
    let (h, w) = mask.dims();
    let (mut n, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) {
                n += 1.0;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    let (mr, mc) = (sr / n, sc / n);
    let (mut vrr, mut vcc, mut vrc) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) {
                let (dr, dc) = (r as f64 - mr, c as f64 - mc);
                vrr += dr * dr;
                vcc += dc * dc;
                vrc += dr * dc;
            }
        }
    }
    let (a, b, cross) = (vrr / n + 1.0 / 12.0, vcc / n + 1.0 / 12.0, vrc / n);
    let mid = 0.5 * (a + b);
    let disc = (0.25 * (a - b) * (a - b) + cross * cross).sqrt();
    (mid - disc, mid + disc)
}

/// Inclusive `(row_min, row_max, col_min, col_max)` of the foreground.
pub fn bounding_box(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dims();
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) {
                bb = Some(match bb {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    bb
}

/// Foreground pixels with at least one background pixel among their 8
/// neighbours.
pub fn boundary(mask: &Mask) -> Vec<bool> {
    let (h, w) = mask.dims();
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !mask.at(r, c) {
                continue;
            }
            'scan: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize || !mask.at(rr as usize, cc as usize) {
                        out[r * w + c] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Boundary pixel coordinates `(row, col)` in raster order.
pub fn boundary_points(mask: &Mask) -> Vec<(usize, usize)> {
    let w = mask.width;
    boundary(mask).iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| (i / w, i % w)).collect()
}

/// Dilation by `radius` steps of the 8-connected neighbourhood (a square
/// structuring element of side `2·radius + 1`), clipped to the image.
pub fn dilate(mask: &Mask, radius: usize) -> Vec<bool> {
    let (h, w) = mask.dims();
    // separable: rows then columns
    let mut tmp = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) {
                let (lo, hi) = (c.saturating_sub(radius), (c + radius).min(w - 1));
                tmp[r * w + lo..=r * w + hi].iter_mut().for_each(|v| *v = true);
            }
        }
    }
    let mut out = vec![false; h * w];
    for c in 0..w {
        for r in 0..h {
            if tmp[r * w + c] {
                let (lo, hi) = (r.saturating_sub(radius), (r + radius).min(h - 1));
                for rr in lo..=hi {
                    out[rr * w + c] = true;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                m.pixels[r * w + c] = true;
            }
        }
        m
    }

    #[test]
    fn crack_perimeter_of_rectangle() {
        assert_eq!(crack_perimeter(&rect(30, 30, 5, 5, 20, 10)), 60);
        // touching the image edge still counts the outer edges
        assert_eq!(crack_perimeter(&rect(4, 4, 0, 0, 4, 4)), 16);
    }

    #[test]
    fn corner_correction_leaves_rectangles_alone() {
        let m = rect(30, 30, 5, 5, 20, 10);
        assert_eq!(corner_corrected_perimeter(&m), 60.0);
        // an L-shaped step has one concave corner
        let mut l = rect(6, 6, 1, 1, 4, 4);
        l.pixels[6 + 4] = false;
        assert_eq!(crack_perimeter(&l), 16);
        assert!((corner_corrected_perimeter(&l) - (14.0 + std::f64::consts::SQRT_2)).abs() < 1e-12);
    }

    #[test]
    fn rectangle_moment_eigenvalues() {
        let (lo, hi) = coordinate_covariance_eigen(&rect(30, 30, 5, 5, 20, 10));
        assert!((lo - 100.0 / 12.0).abs() < 1e-12);
        assert!((hi - 400.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let m = rect(7, 7, 1, 1, 5, 5);
        let b = boundary(&m);
        assert_eq!(b.iter().filter(|&&v| v).count(), 16);
        assert!(!b[3 * 7 + 3]);
        let single = rect(5, 5, 2, 2, 1, 1);
        assert_eq!(boundary_points(&single), vec![(2, 2)]);
    }

    #[test]
    fn dilation_is_chebyshev_ball() {
        let single = rect(9, 9, 4, 4, 1, 1);
        let d = dilate(&single, 2);
        assert_eq!(d.iter().filter(|&&v| v).count(), 25);
        let corner = rect(9, 9, 0, 0, 1, 1);
        assert_eq!(dilate(&corner, 2).iter().filter(|&&v| v).count(), 9);
    }
}
