//! Symmetric spectral grids over the compact frequency box K.
//!
//! The continuum integrals over K are replaced by weighted sums over the
//! node set {j Delta_eta : |j Delta_eta| <= kappa}; equivalently every
//! spectral function is an L-periodic band-limited function on the torus
//! [0, L)^n with L = 1/Delta_eta. On this discrete model the Parseval
//! identity and all pointwise-in-eta solver formulas are exact, and a
//! commensurate eps (L = N_per eps) makes the real-space finite-difference
//! oracle well-posed on the same torus.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{CoreError, Result};

/// The symmetric box K = [-kappa_1, kappa_1] x ... (frequency units).
#[derive(Debug, Clone, PartialEq)]
pub struct CompactBox {
    half_widths: Vec<f64>,
}

impl CompactBox {
    pub fn new(half_widths: Vec<f64>) -> Result<Self> {
        if half_widths.is_empty() || half_widths.len() > crate::coeff::MAX_DIM {
            return Err(CoreError::Unsupported(format!(
                "box dimension {}",
                half_widths.len()
            )));
        }
        if half_widths.iter().any(|k| *k <= 0.0 || !k.is_finite()) {
            return Err(CoreError::InvalidGrid(
                "box half-widths must be positive".into(),
            ));
        }
        Ok(CompactBox { half_widths })
    }

    pub fn dim(&self) -> usize {
        self.half_widths.len()
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.half_widths
    }

    pub fn contains(&self, eta: &[f64]) -> bool {
        eta.len() == self.dim()
            && eta
                .iter()
                .zip(&self.half_widths)
                .all(|(e, k)| e.abs() <= k + 1e-12)
    }

    /// sup_{eta in K} |eta| (Euclidean).
    pub fn max_radius(&self) -> f64 {
        self.half_widths.iter().map(|k| k * k).sum::<f64>().sqrt()
    }
}

/// Symmetric node set over K with uniform step Delta_eta = 1/L.
#[derive(Debug)]
pub struct SpectralGrid {
    k_box: CompactBox,
    delta: f64,
    dim: usize,
    nodes: Vec<[f64; 2]>,
    neg_index: Vec<usize>,
    zero_index: usize,
    /// eps (bit pattern) -> N_per for the eps values declared at build time.
    n_per: HashMap<u64, u64>,
}

impl SpectralGrid {
    /// Build the grid and validate the commensurability of every eps in
    /// `eps_list` (L = N_per eps with integer N_per, and K inside Z/eps).
    pub fn make(k_box: CompactBox, delta: f64, eps_list: &[f64]) -> Result<Arc<SpectralGrid>> {
        if delta <= 0.0 || !delta.is_finite() {
            return Err(CoreError::InvalidGrid("delta_eta must be positive".into()));
        }
        let dim = k_box.dim();
        let counts: Vec<i64> = k_box
            .half_widths()
            .iter()
            .map(|k| (k / delta + 1e-9).floor() as i64)
            .collect();
        let mut nodes: Vec<[f64; 2]> = Vec::new();
        if dim == 1 {
            for j in -counts[0]..=counts[0] {
                nodes.push([j as f64 * delta, 0.0]);
            }
        } else {
            for j1 in -counts[0]..=counts[0] {
                for j2 in -counts[1]..=counts[1] {
                    nodes.push([j1 as f64 * delta, j2 as f64 * delta]);
                }
            }
        }
        let key = |n: &[f64; 2]| {
            let canon = |x: f64| if x == 0.0 { 0.0f64 } else { x };
            (canon(n[0]).to_bits(), canon(n[1]).to_bits())
        };
        let lookup: HashMap<(u64, u64), usize> =
            nodes.iter().enumerate().map(|(i, n)| (key(n), i)).collect();
        let neg_index: Vec<usize> = nodes
            .iter()
            .map(|n| {
                let neg = [-n[0], -n[1]];
                *lookup.get(&key(&neg)).expect("grid closed under negation")
            })
            .collect();
        let zero_index = *lookup
            .get(&key(&[0.0, 0.0]))
            .expect("0 is always a node");
        let mut grid = SpectralGrid {
            k_box,
            delta,
            dim,
            nodes,
            neg_index,
            zero_index,
            n_per: HashMap::new(),
        };
        for &eps in eps_list {
            let n_per = grid.check_eps(eps)?;
            grid.n_per.insert(eps.to_bits(), n_per);
        }
        Ok(Arc::new(grid))
    }

    fn check_eps(&self, eps: f64) -> Result<u64> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(CoreError::InvalidGrid("eps must be positive".into()));
        }
        // K must fit in Z/eps = [-1/(2 eps), 1/(2 eps))^n
        let kappa_max = self
            .k_box
            .half_widths()
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        if kappa_max * eps >= 0.5 {
            return Err(CoreError::InvalidGrid(format!(
                "K not contained in Z/eps for eps = {eps} (kappa_max = {kappa_max})"
            )));
        }
        let ratio = self.box_length() / eps;
        let n_per = ratio.round();
        if (ratio - n_per).abs() > 1e-9 * n_per.max(1.0) || n_per < 1.0 {
            return Err(CoreError::InvalidGrid(format!(
                "eps = {eps} incommensurate with the torus length {} (L/eps = {ratio})",
                self.box_length()
            )));
        }
        Ok(n_per as u64)
    }

    /// Commensurability check for an arbitrary eps (also accepts values not
    /// declared at construction).
    pub fn validate_eps(&self, eps: f64) -> Result<u64> {
        self.check_eps(eps)
    }

    pub fn n_per(&self, eps: f64) -> Option<u64> {
        self.n_per.get(&eps.to_bits()).copied()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn k_box(&self) -> &CompactBox {
        &self.k_box
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Quadrature weight w = Delta_eta^n.
    pub fn weight(&self) -> f64 {
        self.delta.powi(self.dim as i32)
    }

    /// Torus length L = 1/Delta_eta (per axis).
    pub fn box_length(&self) -> f64 {
        1.0 / self.delta
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i][..self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.nodes.iter().map(move |n| &n[..self.dim])
    }

    /// Index of -eta_i.
    pub fn neg(&self, i: usize) -> usize {
        self.neg_index[i]
    }

    pub fn zero_index(&self) -> usize {
        self.zero_index
    }

    /// Mask of nodes inside a sub-box (projection support).
    pub fn mask_inside(&self, sub: &CompactBox) -> Vec<bool> {
        self.nodes().map(|n| sub.contains(n)).collect()
    }
}
