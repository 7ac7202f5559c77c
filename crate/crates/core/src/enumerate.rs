//! Exact enumeration of randomized runs.
//!
//! [`enumerate_paths`] explores the tree of draws a run actually makes:
//! the run is replayed with a scripted prefix and, whenever it asks for a
//! draw past the script, every value of that draw becomes a new branch.
//! Each leaf carries the exact probability of its draw sequence.
//!
//! [`enumerate_merged`] does the same one atomic step at a time and merges
//! identical intermediate states, which turns long chains of independent
//! draws into convolutions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Choice, Coins, DrawKind, Stream, TapeError, TapeSet};

/// Coins that replay a fixed script and signal a branch point after it.
#[derive(Debug, Clone)]
pub struct PathCoins {
    script: Vec<Choice>,
    pos: usize,
    stream: Stream,
    consumed: BTreeMap<Stream, u64>,
}

impl PathCoins {
    pub fn new(script: Vec<Choice>) -> Self {
        PathCoins {
            script,
            pos: 0,
            stream: Stream::Controller,
            consumed: BTreeMap::new(),
        }
    }

    pub fn with_stream(mut self, stream: Stream) -> Self {
        self.stream = stream;
        self
    }

    /// Draws replayed so far.
    pub fn used(&self) -> &[Choice] {
        &self.script[..self.pos]
    }
}

impl Coins for PathCoins {
    fn draw_in(&mut self, region: u32, kind: &DrawKind) -> Result<i64, TapeError> {
        match self.script.get(self.pos) {
            Some(c) => {
                debug_assert!(
                    c.stream == self.stream && c.region == region && &c.kind == kind,
                    "replayed run diverged from its script"
                );
                self.pos += 1;
                *self.consumed.entry(self.stream).or_insert(0) += kind.width() as u64;
                Ok(c.value)
            }
            None => Err(TapeError::Branch {
                stream: self.stream,
                region,
                kind: kind.clone(),
            }),
        }
    }

    fn consumed_bits(&self) -> u64 {
        self.consumed.get(&self.stream).copied().unwrap_or(0)
    }
}

impl TapeSet for PathCoins {
    fn coins(&mut self, stream: Stream) -> &mut dyn Coins {
        self.stream = stream;
        self
    }
}

/// One fully-determined run.
#[derive(Debug, Clone)]
pub struct Leaf<T> {
    pub choices: Vec<Choice>,
    pub mass: f64,
    pub value: T,
}

impl<T> Leaf<T> {
    /// The draws made on `stream`, in order.
    pub fn stream_choices(&self, stream: Stream) -> Vec<Choice> {
        self.choices.iter().filter(|c| c.stream == stream).cloned().collect()
    }
}

fn branch_of(e: &Error) -> Option<(Stream, u32, DrawKind)> {
    match e {
        Error::Tape(TapeError::Branch {
            stream,
            region,
            kind,
        }) => Some((*stream, *region, kind.clone())),
        _ => None,
    }
}

/// Enumerates every draw sequence `run` can make, up to `cap` leaves.
pub fn enumerate_paths<T>(
    mut run: impl FnMut(&mut PathCoins) -> Result<T>,
    cap: usize,
) -> Result<Vec<Leaf<T>>> {
    let mut leaves = Vec::new();
    let mut stack: Vec<(Vec<Choice>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((script, mass)) = stack.pop() {
        let mut coins = PathCoins::new(script);
        match run(&mut coins) {
            Ok(value) => {
                if leaves.len() >= cap {
                    return Err(Error::EnumerationCap { cap });
                }
                let PathCoins { mut script, pos, .. } = coins;
                script.truncate(pos);
                leaves.push(Leaf {
                    choices: script,
                    mass,
                    value,
                });
            }
            Err(e) => {
                let Some((stream, region, kind)) = branch_of(&e) else {
                    return Err(e);
                };
                let script = coins.script;
                // Push in reverse so leaves come out in increasing draw order.
                for (value, p) in kind.support().into_iter().rev() {
                    let mut next = script.clone();
                    next.push(Choice {
                        stream,
                        region,
                        kind: kind.clone(),
                        value,
                    });
                    stack.push((next, mass * p));
                }
                if stack.len() > cap.saturating_mul(64) {
                    return Err(Error::EnumerationCap { cap });
                }
            }
        }
    }
    Ok(leaves)
}

/// A randomized process that advances in atomic steps.
pub trait Stepper: Clone + Ord {
    type Output: Clone + Ord;

    /// Advances one step; `Some` ends the process.
    fn step(&mut self, coins: &mut dyn Coins) -> Result<Option<Self::Output>>;
}

/// Exact output distribution of `init`, merging equal intermediate states.
pub fn enumerate_merged<S: Stepper>(
    init: S,
    max_steps: usize,
    cap: usize,
) -> Result<Vec<(S::Output, f64)>> {
    let mut frontier: BTreeMap<S, f64> = BTreeMap::new();
    frontier.insert(init, 1.0);
    let mut outputs: BTreeMap<S::Output, f64> = BTreeMap::new();
    for _ in 0..max_steps {
        if frontier.is_empty() {
            return Ok(outputs.into_iter().collect());
        }
        let mut next: BTreeMap<S, f64> = BTreeMap::new();
        for (state, mass) in frontier {
            let mut stack: Vec<(Vec<Choice>, f64)> = vec![(Vec::new(), mass)];
            while let Some((script, m)) = stack.pop() {
                let mut s = state.clone();
                let mut coins = PathCoins::new(script);
                match s.step(&mut coins) {
                    Ok(None) => *next.entry(s).or_insert(0.0) += m,
                    Ok(Some(out)) => *outputs.entry(out).or_insert(0.0) += m,
                    Err(e) => {
                        let Some((stream, region, kind)) = branch_of(&e) else {
                            return Err(e);
                        };
                        let script = coins.script;
                        for (value, p) in kind.support().into_iter().rev() {
                            let mut ext = script.clone();
                            ext.push(Choice {
                                stream,
                                region,
                                kind: kind.clone(),
                                value,
                            });
                            stack.push((ext, m * p));
                        }
                    }
                }
            }
            if next.len() > cap || outputs.len() > cap {
                return Err(Error::EnumerationCap { cap });
            }
        }
        frontier = next;
    }
    if frontier.is_empty() {
        Ok(outputs.into_iter().collect())
    } else {
        Err(Error::Parameter(format!(
            "process did not finish within {max_steps} steps"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::TruncatedGeometric;

    #[test]
    fn leaves_cover_all_draws_with_exact_mass() {
        let leaves = enumerate_paths(
            |c| {
                let a = c.bits(2)?;
                // Draw more only on one branch.
                if a == 3 {
                    Ok(a + c.bits(1)?)
                } else {
                    Ok(a)
                }
            },
            100,
        )
        .unwrap();
        assert_eq!(leaves.len(), 5);
        let total: f64 = leaves.iter().map(|l| l.mass).sum();
        assert_eq!(total, 1.0);
        let deep: Vec<_> = leaves.iter().filter(|l| l.choices.len() == 2).collect();
        assert_eq!(deep.len(), 2);
        assert!(deep.iter().all(|l| l.mass == 0.125));
    }

    #[test]
    fn cap_is_enforced() {
        let r = enumerate_paths(|c| Ok(c.bits(8)?), 10);
        assert!(matches!(r, Err(Error::EnumerationCap { .. })));
    }

    #[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
    struct SumOf {
        left: u32,
        total: i64,
        spec: TruncatedGeometric,
    }

    impl Stepper for SumOf {
        type Output = i64;
        fn step(&mut self, coins: &mut dyn Coins) -> Result<Option<i64>> {
            if self.left == 0 {
                return Ok(Some(self.total));
            }
            self.total += coins.noise(&self.spec)?;
            self.left -= 1;
            Ok(None)
        }
    }

    #[test]
    fn merged_enumeration_convolves() {
        let spec = TruncatedGeometric::new(0.5, 3, 6).unwrap();
        let pmf = spec.quantized_pmf();
        let merged = enumerate_merged(
            SumOf {
                left: 2,
                total: 0,
                spec: spec.clone(),
            },
            10,
            1000,
        )
        .unwrap();
        let mut conv: BTreeMap<i64, f64> = BTreeMap::new();
        for (a, p) in &pmf {
            for (b, q) in &pmf {
                *conv.entry(a + b).or_insert(0.0) += p * q;
            }
        }
        assert_eq!(merged.len(), conv.len());
        for (v, m) in merged {
            assert!((conv[&v] - m).abs() < 1e-15);
        }
    }
}
