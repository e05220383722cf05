//! Spectral embedding of the road-cell graph.
//!
//! Road cells are vertices, 8-neighbour road cells share an edge of weight 1.
//! Each road cell receives its entries in the eigenvectors of the graph
//! Laplacian `L = D - W` with the smallest nonzero eigenvalues.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array3;

use crate::error::{HintError, Result};
use crate::grid::RoadMask;

const ZERO_EIGEN_TOL: f64 = 1e-9;

/// Dense Laplacian over the road cells of `mask`, with the cell list giving
/// the row-major vertex order.
pub fn road_laplacian(mask: &RoadMask) -> (DMatrix<f64>, Vec<(usize, usize)>) {
    let cells = mask.road_cells();
    let (rows, cols) = mask.mask.dim();
    let mut index = vec![usize::MAX; rows * cols];
    for (i, &(r, c)) in cells.iter().enumerate() {
        index[r * cols + c] = i;
    }
    let n = cells.len();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for (i, &(r, c)) in cells.iter().enumerate() {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                    continue;
                }
                let j = index[nr as usize * cols + nc as usize];
                if j != usize::MAX {
                    lap[(i, j)] = -1.0;
                    lap[(i, i)] += 1.0;
                }
            }
        }
    }
    (lap, cells)
}

/// Eigenpairs of a symmetric matrix sorted by ascending eigenvalue, each
/// eigenvector sign-fixed so its largest-magnitude entry (first on ties) is
/// positive.
pub fn sorted_eigenpairs(m: &DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m.clone());
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..m.nrows())
        .map(|k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            fix_sign(&mut v);
            (eig.eigenvalues[k], v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        // ties within rounding keep the earlier index
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Spectral channels `[rows, cols, n_spec]`; non-road cells are zero.
pub fn spectral_features(mask: &RoadMask, n_spec: usize) -> Result<Array3<f64>> {
    let (rows, cols) = mask.mask.dim();
    let (lap, cells) = road_laplacian(mask);
    if cells.is_empty() {
        return Err(HintError::InvalidInput("spectral features need at least one road cell".into()));
    }
    let pairs = sorted_eigenpairs(&lap);
    let scale = pairs.last().map(|p| p.0.abs()).unwrap_or(0.0).max(1.0);
    let nonzero: Vec<&(f64, Vec<f64>)> = pairs.iter().filter(|p| p.0 > ZERO_EIGEN_TOL * scale).take(n_spec).collect();
    if nonzero.len() < n_spec {
        log::warn!(
            "road graph has {} cells; only {} nonzero spectral channels, padding the rest with 0",
            cells.len(),
            nonzero.len()
        );
    }
    let mut out = Array3::<f64>::zeros((rows, cols, n_spec));
    for (ch, (_, vec)) in nonzero.iter().enumerate() {
        for (i, &(r, c)) in cells.iter().enumerate() {
            out[[r, c, ch]] = vec[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mask_from(rows: usize, cols: usize, cells: &[(usize, usize)]) -> RoadMask {
        let mut m = Array2::zeros((rows, cols));
        for &(r, c) in cells {
            m[[r, c]] = 1;
        }
        RoadMask { mask: m }
    }

    #[test]
    fn path_of_three_cells() {
        let mask = mask_from(1, 3, &[(0, 0), (0, 1), (0, 2)]);
        let (lap, _) = road_laplacian(&mask);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(lap, expected);
        let pairs = sorted_eigenpairs(&lap);
        assert!(pairs[0].0.abs() < 1e-12);
        assert!((pairs[1].0 - 1.0).abs() < 1e-12);
        assert!((pairs[2].0 - 3.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v = &pairs[1].1;
        assert!((v[0] - h).abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] + h).abs() < 1e-12);

        let f = spectral_features(&mask, 2).unwrap();
        assert!((f[[0, 0, 0]] - h).abs() < 1e-12);
        assert!((f[[0, 2, 1]] - pairs[2].1[2]).abs() < 1e-12);
    }

    #[test]
    fn two_components_have_two_null_vectors() {
        // two 2x2 cliques separated by an empty column
        let mask = mask_from(2, 5, &[(0, 0), (0, 1), (1, 0), (1, 1), (0, 3), (0, 4), (1, 3), (1, 4)]);
        let (lap, _) = road_laplacian(&mask);
        let pairs = sorted_eigenpairs(&lap);
        let zeros = pairs.iter().filter(|p| p.0.abs() < 1e-9).count();
        assert_eq!(zeros, 2);
        // clique K4 spectrum is {0, 4, 4, 4}; both components contribute
        let f = spectral_features(&mask, 6).unwrap();
        for ch in 0..6 {
            let col: Vec<f64> = (0..2).flat_map(|r| (0..5).map(move |c| (r, c))).map(|(r, c)| f[[r, c, ch]]).collect();
            let norm: f64 = col.iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-9, "channel {ch} is a unit eigenvector");
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(spectral_features(&mask_from(3, 3, &[]), 2).is_err());
    }

    #[test]
    fn small_graph_pads_with_zero() {
        let mask = mask_from(1, 3, &[(0, 0), (0, 1), (0, 2)]);
        let f = spectral_features(&mask, 5).unwrap();
        for ch in 2..5 {
            assert!(f.index_axis(ndarray::Axis(2), ch).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn features_are_invariant_under_relabeling() {
        // an irregular road pattern with a simple spectrum; transposing the
        // grid relabels vertices but preserves the graph
        let cells = [(0, 0), (0, 1), (1, 1), (2, 1), (2, 2), (3, 2), (3, 3), (1, 3)];
        let mask = mask_from(4, 4, &cells);
        let transposed: Vec<(usize, usize)> = cells.iter().map(|&(r, c)| (c, r)).collect();
        let mask_t = mask_from(4, 4, &transposed);
        let a = spectral_features(&mask, 4).unwrap();
        let b = spectral_features(&mask_t, 4).unwrap();
        let pairs = sorted_eigenpairs(&road_laplacian(&mask).0);
        for ch in 0..4 {
            let gap_ok = pairs.windows(2).all(|w| (w[1].0 - w[0].0).abs() > 1e-6);
            assert!(gap_ok, "test graph must have a simple spectrum");
            for &(r, c) in &cells {
                assert!((a[[r, c, ch]] - b[[c, r, ch]]).abs() < 1e-9);
            }
        }
    }
}
