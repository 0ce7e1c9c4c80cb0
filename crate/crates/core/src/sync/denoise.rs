//! Cycle-consistent denoising of the stacked affinity matrix.
//!
//! Minimizes `|A - X|_F^2 + lambda |X|_*` over matrices with entries in
//! `[0, 1]` and identity diagonal blocks. The nuclear-norm proximal step
//! (soft-thresholded eigenvalues) and the box projection are alternated with
//! an ADMM splitting; every iterate is scored at its feasible copy and only
//! strict improvements are kept, so the recorded objective never increases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::affinity::{assemble, AffinityGrid};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_nuclear_norm, symmetric_svt, symmetrize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseOptions {
    /// Nuclear-norm weight; `None` selects `50 N_a / |P_C(A)|_*`.
    pub lambda: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    /// ADMM penalty.
    pub rho: f64,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        Self { lambda: None, max_iter: 60, tol: 1e-5, rho: 2.0 }
    }
}

/// Denoised stacked correspondence matrix split back into blocks.
#[derive(Debug, Clone)]
pub struct StackedCorrespondence {
    pub blocks: Vec<Vec<DMatrix<f64>>>,
    pub total_frames: usize,
    pub lambda: f64,
    /// Objective of the best iterate so far, one entry per iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl StackedCorrespondence {
    pub fn to_grid(&self) -> AffinityGrid {
        AffinityGrid { blocks: self.blocks.clone() }
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        assemble(&self.blocks)
    }
}

fn offsets(counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(counts.len());
    let mut acc = 0;
    for &n in counts {
        out.push(acc);
        acc += n;
    }
    out
}

/// Clamps to `[0, 1]` and resets diagonal blocks to the identity.
fn project_feasible(m: &mut DMatrix<f64>, counts: &[usize]) {
    m.apply(|v| *v = v.clamp(0.0, 1.0));
    for (&o, &n) in offsets(counts).iter().zip(counts) {
        let mut block = m.view_mut((o, o), (n, n));
        block.fill(0.0);
        block.fill_diagonal(1.0);
    }
}

fn split(m: &DMatrix<f64>, counts: &[usize]) -> Vec<Vec<DMatrix<f64>>> {
    let offs = offsets(counts);
    (0..counts.len())
        .map(|j1| {
            (0..counts.len())
                .map(|j2| m.view((offs[j1], offs[j2]), (counts[j1], counts[j2])).into_owned())
                .collect()
        })
        .collect()
}

/// Objective `|A - X|_F^2 + lambda |X|_*` for symmetric `X`.
pub fn denoise_objective(a: &DMatrix<f64>, x: &DMatrix<f64>, lambda: f64) -> f64 {
    (a - x).norm_squared() + lambda * symmetric_nuclear_norm(x)
}

/// Default nuclear-norm weight for a grid.
pub fn default_lambda(grid: &AffinityGrid) -> f64 {
    let counts = grid.frame_counts();
    let mut a = grid.assemble();
    project_feasible(&mut a, &counts);
    let total: usize = counts.iter().sum();
    50.0 * total as f64 / symmetric_nuclear_norm(&a).max(f64::MIN_POSITIVE)
}

pub fn consistent_denoise(grid: &AffinityGrid, options: &DenoiseOptions) -> Result<StackedCorrespondence> {
    grid.validate()?;
    let counts = grid.frame_counts();
    let total: usize = counts.iter().sum();
    let lambda = options.lambda.unwrap_or_else(|| default_lambda(grid));
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("denoise lambda must be positive, got {lambda}")));
    }
    if !(options.rho > 0.0) {
        return Err(Error::Config(format!("denoise rho must be positive, got {}", options.rho)));
    }

    let mut a = grid.assemble();
    for (&o, &n) in offsets(&counts).iter().zip(&counts) {
        let mut block = a.view_mut((o, o), (n, n));
        block.fill(0.0);
        block.fill_diagonal(1.0);
    }

    let rho = options.rho;
    let mut w = a.clone();
    project_feasible(&mut w, &counts);
    let mut best = w.clone();
    let mut best_obj = denoise_objective(&a, &best, lambda);
    let mut trace = vec![best_obj];
    let mut u = DMatrix::<f64>::zeros(total, total);
    let mut converged = false;
    let scale = (total as f64).sqrt();

    for _ in 0..options.max_iter {
        let center = (&a * 2.0 + (&w - &u) * rho) / (2.0 + rho);
        let x = symmetric_svt(&center, lambda / (2.0 + rho));
        let mut w_next = &x + &u;
        project_feasible(&mut w_next, &counts);
        symmetrize(&mut w_next);
        u += &x - &w_next;
        let primal = (&x - &w_next).norm();
        let dual = rho * (&w_next - &w).norm();
        w = w_next;

        let obj = denoise_objective(&a, &w, lambda);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from(&w);
        }
        trace.push(best_obj);
        if primal <= options.tol * scale && dual <= options.tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("consistent_denoise stopped after {} iterations without converging", options.max_iter);
    }
    Ok(StackedCorrespondence {
        blocks: split(&best, &counts),
        total_frames: total,
        lambda,
        objective_trace: trace,
        converged,
    })
}
