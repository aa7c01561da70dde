//! FC-kernel locality heatmaps.
//!
//! The set-sharing FC3 weight `(s*h*w, h*w)` is viewed as
//! `(s, h, w, 1, h, w)`; fixing a share-set and an output position yields an
//! `h x w` grid of the weights connecting that output point to every input
//! position. The grid is log-rescaled by the smallest nonzero magnitude of
//! the whole matrix, which makes locality visible after a merge: positions
//! near the output point carry the conv weights, everything else keeps the
//! FC's long-range structure.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::FcLayer;
use crate::tensor::Matrix;

/// Guard factor for exact-zero entries before the logarithm.
pub const ZERO_GUARD: f32 = 1e-12;

/// Extracts the `h x w` grid `ln(max(|v|, m*guard) / m)` for share-set
/// `set_idx` and output position `(i, j)`; `m` is the minimum nonzero
/// magnitude over the whole kernel.
pub fn locality_heatmap(
    fc3: &FcLayer,
    share_sets: usize,
    h: usize,
    w: usize,
    set_idx: usize,
    out_pos: (usize, usize),
) -> Result<Matrix> {
    let hw = h * w;
    if fc3.weight().rows() != share_sets * hw || fc3.weight().cols() != hw {
        return Err(Error::Dimension {
            axis: "fc3 weight shape",
            expected: share_sets * hw * hw,
            actual: fc3.weight().rows() * fc3.weight().cols(),
        });
    }
    let (i, j) = out_pos;
    if set_idx >= share_sets || i >= h || j >= w {
        return Err(Error::Index(format!(
            "set {set_idx}, position ({i}, {j}) outside (s = {share_sets}, h = {h}, w = {w})"
        )));
    }

    let min_nonzero = fc3
        .weight()
        .data()
        .iter()
        .map(|v| v.abs())
        .filter(|v| *v > 0.0)
        .fold(f32::INFINITY, f32::min);
    let m = if min_nonzero.is_finite() { min_nonzero } else { 1.0 };

    let row = fc3.weight().row(set_idx * hw + i * w + j);
    let mut grid = Matrix::zeros(h, w);
    for u in 0..h {
        for v in 0..w {
            let val = row[u * w + v].abs().max(m * ZERO_GUARD);
            grid.set(u, v, (val / m).ln());
        }
    }
    Ok(grid)
}

/// Writes the heatmap as `<base>.csv` (row-major floats) and `<base>.pgm`
/// (binary 8-bit P5, min-max normalized). Returns the two paths.
pub fn export_locality_heatmap(
    fc3: &FcLayer,
    share_sets: usize,
    h: usize,
    w: usize,
    set_idx: usize,
    out_pos: (usize, usize),
    base: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let grid = locality_heatmap(fc3, share_sets, h, w, set_idx, out_pos)?;
    let csv_path = base.with_extension("csv");
    let pgm_path = base.with_extension("pgm");
    fs::write(&csv_path, grid_to_csv(&grid))?;
    fs::write(&pgm_path, grid_to_pgm(&grid))?;
    Ok((csv_path, pgm_path))
}

pub fn grid_to_csv(grid: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..grid.rows() {
        let row: Vec<String> = grid.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn grid_to_pgm(grid: &Matrix) -> Vec<u8> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for v in grid.data() {
        min = min.min(*v);
        max = max.max(*v);
    }
    let range = if max > min { max - min } else { 1.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(
        grid.data()
            .iter()
            .map(|v| ((v - min) / range * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::BnParams;
    use crate::reparam::merge_local_into_channel;
    use crate::ConvLayer;

    fn identity_fc3(s: usize, hw: usize) -> FcLayer {
        let mut weight = Matrix::zeros(s * hw, hw);
        for i in 0..s {
            for r in 0..hw {
                weight.set(i * hw + r, r, 1.0);
            }
        }
        FcLayer::new_grouped(weight, None, s).unwrap()
    }

    #[test]
    fn identity_kernel_heatmap_is_a_delta() {
        let (s, h, w) = (2, 4, 4);
        let fc3 = identity_fc3(s, h * w);
        let grid = locality_heatmap(&fc3, s, h, w, 1, (2, 3)).unwrap();
        let floor = (ZERO_GUARD).ln();
        for u in 0..h {
            for v in 0..w {
                if (u, v) == (2, 3) {
                    assert_eq!(grid.at(u, v), 0.0); // ln(1/1)
                } else {
                    assert!((grid.at(u, v) - floor).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn merged_conv_dominates_its_neighborhood() {
        let (s, h, w) = (1usize, 8usize, 8usize);
        let hw = h * w;
        // small random-ish fc3, large 3x3 conv
        let mut weight = Matrix::zeros(hw, hw);
        for r in 0..hw {
            for c in 0..hw {
                weight.set(r, c, 0.01 * ((r * 31 + c * 17) % 13) as f32 - 0.06);
            }
        }
        let fc3 = FcLayer::new_grouped(weight, None, 1).unwrap();
        let conv = ConvLayer::depthwise(vec![10.0; 9], 1, 3).unwrap();
        let merged = merge_local_into_channel(
            &fc3,
            &BnParams::identity(1),
            &[(conv, BnParams::identity(1))],
            1,
            h,
            w,
        )
        .unwrap();

        let (i, j) = (4usize, 4usize);
        let grid = locality_heatmap(&merged, 1, h, w, 0, (i, j)).unwrap();
        let inside_min = (i - 1..=i + 1)
            .flat_map(|u| (j - 1..=j + 1).map(move |v| (u, v)))
            .map(|(u, v)| grid.at(u, v))
            .fold(f32::INFINITY, f32::min);
        let outside_max = (0..h)
            .flat_map(|u| (0..w).map(move |v| (u, v)))
            .filter(|(u, v)| u.abs_diff(i) > 1 || v.abs_diff(j) > 1)
            .map(|(u, v)| grid.at(u, v))
            .fold(f32::NEG_INFINITY, f32::max);
        assert!(inside_min > outside_max);
    }

    #[test]
    fn out_of_range_indices_error() {
        let fc3 = identity_fc3(2, 16);
        assert!(matches!(
            locality_heatmap(&fc3, 2, 4, 4, 2, (0, 0)),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            locality_heatmap(&fc3, 2, 4, 4, 0, (4, 0)),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn export_writes_csv_and_pgm() {
        let fc3 = identity_fc3(1, 16);
        let mut base = std::env::temp_dir();
        base.push(format!("repmlp-heatmap-test-{}", std::process::id()));
        let (csv, pgm) = export_locality_heatmap(&fc3, 1, 4, 4, 0, (1, 2), &base).unwrap();

        let text = fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 4);

        let bytes = fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 4\n255\n".len() + 16);

        fs::remove_file(csv).ok();
        fs::remove_file(pgm).ok();
    }
}
