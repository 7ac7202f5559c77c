//! Truncated two-sided geometric noise sampled by inverse CDF from a
//! fixed-width uniform.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Coins, TapeError};

/// Noise on `[-bound, bound]` with pmf proportional to `exp(-eps * |z|)`,
/// quantized to multiples of `2^-width` so that neighbouring masses stay
/// within a factor `exp(eps)` wherever the width allows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncatedGeometric {
    pub eps: f64,
    pub bound: i64,
    pub width: u32,
}

impl PartialEq for TruncatedGeometric {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for TruncatedGeometric {}

impl Hash for TruncatedGeometric {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.eps.to_bits().hash(state);
        self.bound.hash(state);
        self.width.hash(state);
    }
}

impl PartialOrd for TruncatedGeometric {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TruncatedGeometric {
    fn cmp(&self, other: &Self) -> Ordering {
        self.eps
            .total_cmp(&other.eps)
            .then(self.bound.cmp(&other.bound))
            .then(self.width.cmp(&other.width))
    }
}

impl TruncatedGeometric {
    pub fn new(eps: f64, bound: i64, width: u32) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Parameter(format!("noise eps must be positive, got {eps}")));
        }
        if bound < 0 {
            return Err(Error::Parameter("noise bound must be nonnegative".into()));
        }
        if width == 0 || width > 30 {
            return Err(Error::Parameter(format!("draw width must be in 1..=30, got {width}")));
        }
        Ok(TruncatedGeometric { eps, bound, width })
    }

    /// Unquantized pmf renormalized over `[-bound, bound]`.
    pub fn pmf(&self, z: i64) -> f64 {
        if z.abs() > self.bound {
            return 0.0;
        }
        let r = (-self.eps).exp();
        let total = (1.0 + r - 2.0 * (-self.eps * (self.bound + 1) as f64).exp()) / (1.0 - r);
        (-self.eps * z.abs() as f64).exp() / total
    }

    /// Cumulative thresholds: `u < thresholds[i]` decodes to at most `-bound + i`.
    pub fn thresholds(&self) -> Vec<u64> {
        let mut acc = 0;
        self.counts()
            .iter()
            .map(|k| {
                acc += k;
                acc
            })
            .collect()
    }

    /// Number of `width`-bit uniforms mapping to each value in `[-bound, bound]`.
    pub fn counts(&self) -> Arc<Vec<u64>> {
        static CACHE: OnceLock<Mutex<HashMap<TruncatedGeometric, Arc<Vec<u64>>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(c) = cache.lock().expect("noise cache").get(self) {
            return c.clone();
        }
        let half = self.half_counts();
        let b = self.bound as usize;
        let full: Vec<u64> = (0..=2 * b).map(|i| half[i.abs_diff(b)]).collect();
        let full = Arc::new(full);
        cache.lock().expect("noise cache").insert(self.clone(), full.clone());
        full
    }

    /// Counts for `z = 0..=bound`. Floors the scaled pmf, drops tail atoms
    /// too small to grow, caps each count at
    /// `e^eps` times its outer neighbour, then hands out the remaining units
    /// by largest shortfall wherever neighbouring counts stay within a factor
    /// `e^eps`. Shifting the law by one then only loses mass at the edges.
    fn half_counts(&self) -> Vec<u64> {
        let b = self.bound as usize;
        let scale = 1u64 << self.width;
        let f = self.eps.exp();
        let target: Vec<f64> = (0..=b).map(|z| scale as f64 * self.pmf(z as i64)).collect();
        let mut c: Vec<u64> = target.iter().map(|t| t.floor() as u64).collect();
        // A count below 1/(e^eps - 1) cannot grow by the ratio cap, so any
        // such atom would pin every inner count to its own value.
        let min_edge = (1.0 / (f - 1.0)).ceil() as u64;
        if let Some(edge) = (1..=b).rev().find(|&z| c[z] >= min_edge) {
            for v in &mut c[edge + 1..] {
                *v = 0;
            }
        }
        for z in (0..b).rev() {
            if c[z + 1] > 0 {
                c[z] = c[z].min((f * c[z + 1] as f64).floor() as u64);
            }
        }
        let total = |c: &[u64]| c[0] + 2 * c[1..].iter().sum::<u64>();
        let within = |a: u64, b: u64| a as f64 <= f * b as f64 && b as f64 <= f * a as f64;
        let fits = |c: &[u64], z: usize, v: u64| -> bool {
            if z < b {
                let outer = c[z + 1];
                if outer > 0 && !within(v, outer) {
                    return false;
                }
                if outer == 0 && z > 0 && c[z - 1] == 0 {
                    return false;
                }
            }
            if z > 0 && !within(c[z - 1], v) {
                return false;
            }
            true
        };
        if b == 0 {
            return vec![scale];
        }
        let mut deficit = scale - total(&c);
        if deficit % 2 == 1 {
            if c[0] > 0 && fits(&c, 0, c[0] - 1) {
                c[0] -= 1;
            } else {
                c[0] += 1;
            }
            deficit = scale - total(&c);
        }
        while deficit > 0 {
            let mut best: Option<(f64, usize)> = None;
            for z in 0..=b {
                let step = if z == 0 { 2 } else { 1 };
                if fits(&c, z, c[z] + step) {
                    let gap = target[z] - c[z] as f64;
                    if best.map_or(true, |(g, _)| gap > g) {
                        best = Some((gap, z));
                    }
                }
            }
            let Some((_, z)) = best else {
                // Widths too small for the ratio constraint put the rest at the center.
                c[0] += deficit;
                break;
            };
            c[z] += if z == 0 { 2 } else { 1 };
            deficit = scale - total(&c);
        }
        c
    }

    /// The sampled law: value and exact probability, zero-mass values dropped.
    pub fn quantized_pmf(&self) -> Vec<(i64, f64)> {
        let scale = (1u64 << self.width) as f64;
        self.counts()
            .iter()
            .enumerate()
            .filter(|(_, k)| **k > 0)
            .map(|(i, k)| (-self.bound + i as i64, *k as f64 / scale))
            .collect()
    }

    /// Inverse CDF of the uniform `u` in `[0, 2^width)`.
    pub fn from_uniform(&self, u: u64) -> i64 {
        debug_assert!(u < (1u64 << self.width));
        let mut acc = 0;
        for (i, k) in self.counts().iter().enumerate() {
            acc += k;
            if u < acc {
                return -self.bound + i as i64;
            }
        }
        self.bound
    }

    /// Uniforms in `[lo, hi)` decode to `z`; `None` if `z` has zero mass.
    pub fn preimage(&self, z: i64) -> Option<(u64, u64)> {
        if z.abs() > self.bound {
            return None;
        }
        let t = self.thresholds();
        let i = (z + self.bound) as usize;
        let lo = if i == 0 { 0 } else { t[i - 1] };
        let hi = t[i];
        (hi > lo).then_some((lo, hi))
    }

    /// Total variation distance between the sampled law and the untruncated
    /// discrete Laplace with the same `eps`.
    pub fn tail_deficit(&self) -> f64 {
        let r = (-self.eps).exp();
        let norm = (1.0 - r) / (1.0 + r);
        let laplace = |z: i64| norm * (-self.eps * z.abs() as f64).exp();
        let scale = (1u64 << self.width) as f64;
        let mut inside = 0.0;
        for (i, k) in self.counts().iter().enumerate() {
            let z = -self.bound + i as i64;
            inside += (*k as f64 / scale - laplace(z)).abs();
        }
        let outside = 2.0 * r.powi(self.bound as i32 + 1) / (1.0 + r);
        0.5 * (inside + outside)
    }

    /// Mean and variance of the sampled law.
    pub fn moments(&self) -> (f64, f64) {
        let pmf = self.quantized_pmf();
        let mean: f64 = pmf.iter().map(|(z, p)| *z as f64 * p).sum();
        let var = pmf.iter().map(|(z, p)| (*z as f64 - mean).powi(2) * p).sum();
        (mean, var)
    }
}

/// Draws one noise value from `coins`.
pub fn noise_sample(spec: &TruncatedGeometric, coins: &mut dyn Coins) -> Result<i64, TapeError> {
    coins.noise(spec)
}
