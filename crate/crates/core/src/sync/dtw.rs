use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotone frame correspondence from `(0, 0)` to `(n1 - 1, n2 - 1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpingPath {
    pub pairs: Vec<(usize, usize)>,
}

impl WarpingPath {
    /// Sum of `block` over the path, accumulated in path order.
    pub fn score(&self, block: &DMatrix<f64>) -> f64 {
        self.pairs.iter().fold(0.0, |acc, &(p, q)| acc + block[(p, q)])
    }

    pub fn is_valid(&self, n1: usize, n2: usize) -> bool {
        let Some(&first) = self.pairs.first() else { return false };
        if first != (0, 0) || *self.pairs.last().unwrap() != (n1 - 1, n2 - 1) {
            return false;
        }
        self.pairs.windows(2).all(|w| {
            let (dp, dq) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            matches!((dp, dq), (1, 0) | (0, 1) | (1, 1))
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Start,
    Diagonal,
    Down,
    Right,
}

/// Max-sum dynamic time warping over steps (1,1), (1,0), (0,1).
///
/// Ties prefer the diagonal step, then (1,0). Scores accumulate in path
/// order so the returned path's `score` equals the optimum exactly.
pub fn dtw_align(block: &DMatrix<f64>) -> Result<WarpingPath> {
    let (n1, n2) = block.shape();
    if n1 == 0 || n2 == 0 {
        return Err(Error::Input("dtw needs a nonempty matrix".into()));
    }
    let mut acc = DMatrix::<f64>::zeros(n1, n2);
    let mut from = vec![Step::Start; n1 * n2];
    for p in 0..n1 {
        for q in 0..n2 {
            if p == 0 && q == 0 {
                acc[(0, 0)] = block[(0, 0)];
                continue;
            }
            let mut best: Option<(f64, Step)> = None;
            let candidates = [
                (p > 0 && q > 0, Step::Diagonal, (p.wrapping_sub(1), q.wrapping_sub(1))),
                (p > 0, Step::Down, (p.wrapping_sub(1), q)),
                (q > 0, Step::Right, (p, q.wrapping_sub(1))),
            ];
            for (ok, step, prev) in candidates {
                if !ok {
                    continue;
                }
                let v = acc[prev];
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, step));
                }
            }
            let (v, step) = best.expect("some predecessor exists");
            acc[(p, q)] = v + block[(p, q)];
            from[p * n2 + q] = step;
        }
    }
    let mut pairs = Vec::with_capacity(n1 + n2);
    let (mut p, mut q) = (n1 - 1, n2 - 1);
    loop {
        pairs.push((p, q));
        match from[p * n2 + q] {
            Step::Start => break,
            Step::Diagonal => {
                p -= 1;
                q -= 1;
            }
            Step::Down => p -= 1,
            Step::Right => q -= 1,
        }
    }
    pairs.reverse();
    Ok(WarpingPath { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_takes_the_diagonal() {
        let path = dtw_align(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(path.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn single_row_visits_every_column() {
        let m = DMatrix::from_element(1, 5, 0.3);
        let path = dtw_align(&m).unwrap();
        assert_eq!(path.pairs, (0..5).map(|q| (0, q)).collect::<Vec<_>>());
        assert!(path.is_valid(1, 5));
    }

    #[test]
    fn ties_prefer_diagonal_then_down() {
        let zeros = DMatrix::zeros(3, 2);
        let path = dtw_align(&zeros).unwrap();
        // Backtracking from (2,1): diagonal first, then down.
        assert_eq!(path.pairs, vec![(0, 0), (1, 0), (2, 1)]);
    }

    #[test]
    fn empty_input_fails() {
        assert!(dtw_align(&DMatrix::zeros(0, 3)).is_err());
    }
}
