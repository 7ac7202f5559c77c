//! Finite distributions, (ε,δ)-closeness, the coupling sampler and
//! privacy-parameter arithmetic.

use std::collections::BTreeMap;
use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tape::Choice;

/// Float sums are accepted as normalized within this slack.
pub const FLOAT_SLACK: f64 = 1e-12;

/// Probability arithmetic: `f64` for large audits, exact rationals when a
/// verdict must not depend on rounding.
pub trait Mass: Clone + PartialOrd + Debug + Send + Sync + 'static {
    const EXACT: bool;
    fn zero() -> Self;
    fn one() -> Self;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    /// Exact for rationals: every finite float is a dyadic rational.
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn to_json(&self) -> Value;
    fn from_json(v: &Value) -> Option<Self>;

    fn is_zero(&self) -> bool {
        *self == Self::zero()
    }

    fn max0(&self) -> Self {
        if *self > Self::zero() {
            self.clone()
        } else {
            Self::zero()
        }
    }

    /// `e^eps`; exact at `eps = 0`.
    fn exp(eps: f64) -> Self {
        if eps == 0.0 {
            Self::one()
        } else {
            Self::from_f64(eps.exp())
        }
    }
}

impl Mass for f64 {
    const EXACT: bool = false;
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn to_json(&self) -> Value {
        serde_json::json!(self)
    }
    fn from_json(v: &Value) -> Option<Self> {
        v.as_f64()
    }
}

impl Mass for BigRational {
    const EXACT: bool = true;
    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        One::one()
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn from_f64(x: f64) -> Self {
        BigRational::from_float(x).expect("finite mass")
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn to_json(&self) -> Value {
        Value::String(format!("{}/{}", self.numer(), self.denom()))
    }
    fn from_json(v: &Value) -> Option<Self> {
        let s = v.as_str()?;
        let (n, d) = s.split_once('/').unwrap_or((s, "1"));
        let n: BigInt = n.trim().parse().ok()?;
        let d: BigInt = d.trim().parse().ok()?;
        if d.is_zero() || n.is_negative() {
            return None;
        }
        Some(BigRational::new(n, d))
    }
}

/// A distribution over byte strings with finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePmf<M: Mass = f64> {
    atoms: BTreeMap<Vec<u8>, M>,
}

impl<M: Mass> FinitePmf<M> {
    /// Builds a pmf from distinct atoms whose masses sum to one.
    pub fn new(atoms: impl IntoIterator<Item = (Vec<u8>, M)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (v, m) in atoms {
            if m < M::zero() {
                return Err(Error::Parameter("negative mass".into()));
            }
            if map.insert(v.clone(), m).is_some() {
                return Err(Error::Parameter(format!("duplicate atom {}", hex::encode(&v))));
            }
        }
        Self::checked(map)
    }

    /// Sums the masses of repeated values.
    pub fn from_weights(atoms: impl IntoIterator<Item = (Vec<u8>, M)>) -> Result<Self> {
        let mut map: BTreeMap<Vec<u8>, M> = BTreeMap::new();
        for (v, m) in atoms {
            if m < M::zero() {
                return Err(Error::Parameter("negative mass".into()));
            }
            let e = map.entry(v).or_insert_with(M::zero);
            *e = e.add(&m);
        }
        Self::checked(map)
    }

    fn checked(mut map: BTreeMap<Vec<u8>, M>) -> Result<Self> {
        map.retain(|_, m| !m.is_zero());
        let total = map.values().fold(M::zero(), |a, m| a.add(m));
        let ok = if M::EXACT {
            total == M::one()
        } else {
            (total.to_f64() - 1.0).abs() <= FLOAT_SLACK
        };
        if !ok {
            return Err(Error::Parameter(format!(
                "masses sum to {} instead of 1",
                total.to_f64()
            )));
        }
        Ok(FinitePmf { atoms: map })
    }

    pub fn point(value: impl Into<Vec<u8>>) -> Self {
        FinitePmf {
            atoms: BTreeMap::from([(value.into(), M::one())]),
        }
    }

    pub fn uniform(values: impl IntoIterator<Item = Vec<u8>>) -> Result<Self> {
        let values: Vec<Vec<u8>> = values.into_iter().collect();
        if values.is_empty() {
            return Err(Error::Parameter("uniform over an empty set".into()));
        }
        let m = M::one().div(&M::from_f64(values.len() as f64));
        Self::new(values.into_iter().map(|v| (v, m.clone())))
    }

    pub fn mass(&self, value: &[u8]) -> M {
        self.atoms.get(value).cloned().unwrap_or_else(M::zero)
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&Vec<u8>, &M)> {
        self.atoms.iter()
    }

    pub fn support_len(&self) -> usize {
        self.atoms.len()
    }

    /// Image under `h`.
    pub fn map(&self, mut h: impl FnMut(&[u8]) -> Vec<u8>) -> Self {
        let mut out: BTreeMap<Vec<u8>, M> = BTreeMap::new();
        for (v, m) in &self.atoms {
            let e = out.entry(h(v)).or_insert_with(M::zero);
            *e = e.add(m);
        }
        FinitePmf { atoms: out }
    }

    pub fn to_f64(&self) -> FinitePmf<f64> {
        FinitePmf {
            atoms: self.atoms.iter().map(|(v, m)| (v.clone(), m.to_f64())).collect(),
        }
    }

    /// JSON array of `{value_hex, mass}` in value order.
    pub fn to_json(&self) -> Value {
        Value::Array(
            self.atoms
                .iter()
                .map(|(v, m)| serde_json::json!({"value_hex": hex::encode(v), "mass": m.to_json()}))
                .collect(),
        )
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let arr = v
            .as_array()
            .ok_or_else(|| Error::Parameter("pmf must be a JSON array".into()))?;
        let mut atoms = Vec::with_capacity(arr.len());
        for a in arr {
            let value = a
                .get("value_hex")
                .and_then(Value::as_str)
                .and_then(|s| hex::decode(s).ok())
                .ok_or_else(|| Error::Parameter("bad value_hex".into()))?;
            let mass = a
                .get("mass")
                .and_then(M::from_json)
                .ok_or_else(|| Error::Parameter("bad mass".into()))?;
            atoms.push((value, mass));
        }
        Self::new(atoms)
    }
}

impl FinitePmf<f64> {
    pub fn to_rational(&self) -> FinitePmf<BigRational> {
        FinitePmf {
            atoms: self
                .atoms
                .iter()
                .map(|(v, m)| (v.clone(), BigRational::from_f64(*m)))
                .collect(),
        }
    }
}

/// `Σ_x max(0, P(x) − e^eps·Q(x))`.
pub fn hockey_stick<M: Mass>(p: &FinitePmf<M>, q: &FinitePmf<M>, eps: f64) -> M {
    let factor = M::exp(eps);
    let mut total = M::zero();
    for (v, pm) in &p.atoms {
        let d = pm.sub(&factor.mul(&q.mass(v)));
        total = total.add(&d.max0());
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosenessReport {
    pub eps: f64,
    pub delta_forward: f64,
    pub delta_backward: f64,
    pub passed: bool,
    pub method: Method,
    /// Bootstrap upper bound on `max(delta_forward, delta_backward)`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub upper_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trials: Option<u64>,
}

impl ClosenessReport {
    pub fn exact(eps: f64, forward: f64, backward: f64, passed: bool) -> Self {
        ClosenessReport {
            eps,
            delta_forward: forward,
            delta_backward: backward,
            passed,
            method: Method::Exact,
            upper_bound: None,
            confidence: None,
            trials: None,
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta_forward.max(self.delta_backward)
    }
}

/// Exact two-sided check; the comparison against `delta` is done in `M`.
pub fn check_indisting<M: Mass>(
    p: &FinitePmf<M>,
    q: &FinitePmf<M>,
    eps: f64,
    delta: f64,
) -> ClosenessReport {
    let fwd = hockey_stick(p, q, eps);
    let bwd = hockey_stick(q, p, eps);
    let d = M::from_f64(delta);
    let passed = fwd <= d && bwd <= d;
    ClosenessReport::exact(eps, fwd.to_f64(), bwd.to_f64(), passed)
}

/// How an audit evaluates closeness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum AuditMode {
    /// Enumerate every tape.
    Exact,
    Sampled { trials: u64, confidence: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditOptions {
    pub mode: AuditMode,
    pub seed: u64,
    /// Leaves allowed in exact enumeration.
    pub enumeration_cap: usize,
    /// Attempts allowed in rejection sampling.
    pub attempt_cap: u64,
    /// Atomic steps allowed per run.
    pub max_steps: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            mode: AuditMode::Exact,
            seed: 0,
            enumeration_cap: 1 << 20,
            attempt_cap: 1 << 20,
            max_steps: 10_000,
        }
    }
}

impl AuditOptions {
    pub fn sampled(trials: u64, seed: u64) -> Self {
        AuditOptions {
            mode: AuditMode::Sampled {
                trials,
                confidence: 0.95,
            },
            seed,
            ..AuditOptions::default()
        }
    }
}

/// Bootstrap replicates drawn by [`estimate_from_samples`].
pub const BOOTSTRAP_REPLICATES: usize = 200;

/// Sampled closeness check. `sample_p(i)` and `sample_q(i)` produce the
/// `i`-th draw of each side; `seed` drives the bootstrap.
pub fn estimate_indisting(
    mut sample_p: impl FnMut(u64) -> Result<Vec<u8>>,
    mut sample_q: impl FnMut(u64) -> Result<Vec<u8>>,
    eps: f64,
    delta: f64,
    trials: u64,
    confidence: f64,
    seed: u64,
) -> Result<ClosenessReport> {
    if trials < 1000 {
        return Err(Error::Parameter(format!("need at least 1000 trials, got {trials}")));
    }
    let ps = (0..trials).map(&mut sample_p).collect::<Result<Vec<_>>>()?;
    let qs = (0..trials).map(&mut sample_q).collect::<Result<Vec<_>>>()?;
    estimate_from_samples(&ps, &qs, eps, delta, confidence, seed)
}

fn counts(samples: &[Vec<u8>]) -> BTreeMap<Vec<u8>, u64> {
    let mut c = BTreeMap::new();
    for s in samples {
        *c.entry(s.clone()).or_insert(0) += 1;
    }
    c
}

fn plug_in(p: &BTreeMap<Vec<u8>, u64>, np: u64, q: &BTreeMap<Vec<u8>, u64>, nq: u64, eps: f64) -> (f64, f64) {
    let f = eps.exp();
    let hs = |a: &BTreeMap<Vec<u8>, u64>, na: u64, b: &BTreeMap<Vec<u8>, u64>, nb: u64| {
        a.iter()
            .map(|(v, &k)| {
                let pa = k as f64 / na as f64;
                let pb = b.get(v).copied().unwrap_or(0) as f64 / nb as f64;
                (pa - f * pb).max(0.0)
            })
            .sum::<f64>()
    };
    (hs(p, np, q, nq), hs(q, nq, p, np))
}

/// Multinomial resample of observed counts via sequential binomials.
fn resample(c: &BTreeMap<Vec<u8>, u64>, n: u64, rng: &mut ChaCha8Rng) -> BTreeMap<Vec<u8>, u64> {
    let mut left = n;
    let mut rest = n as f64;
    let mut out = BTreeMap::new();
    for (v, &k) in c {
        if left == 0 {
            break;
        }
        let p = (k as f64 / rest).clamp(0.0, 1.0);
        let draw = Binomial::new(left, p).expect("valid binomial").sample(rng);
        if draw > 0 {
            out.insert(v.clone(), draw);
        }
        left -= draw;
        rest -= k as f64;
    }
    out
}

/// Plug-in hockey-stick on empirical pmfs with a one-sided bootstrap upper
/// bound on the larger direction.
pub fn estimate_from_samples(
    ps: &[Vec<u8>],
    qs: &[Vec<u8>],
    eps: f64,
    delta: f64,
    confidence: f64,
    seed: u64,
) -> Result<ClosenessReport> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Parameter(format!("confidence must be in (0,1), got {confidence}")));
    }
    if ps.is_empty() || qs.is_empty() {
        return Err(Error::Parameter("no samples".into()));
    }
    let (np, nq) = (ps.len() as u64, qs.len() as u64);
    let cp = counts(ps);
    let cq = counts(qs);
    let (fwd, bwd) = plug_in(&cp, np, &cq, nq, eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps: Vec<f64> = (0..BOOTSTRAP_REPLICATES)
        .map(|_| {
            let bp = resample(&cp, np, &mut rng);
            let bq = resample(&cq, nq, &mut rng);
            let (f, b) = plug_in(&bp, np, &bq, nq, eps);
            f.max(b)
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    // Basic bootstrap: the plug-in estimate is biased upward, and reflecting
    // the lower replicate quantile around it cancels that bias to first order.
    let idx = (((1.0 - confidence) * reps.len() as f64).floor() as usize).min(reps.len() - 1);
    let point = fwd.max(bwd);
    let upper = (2.0 * point - reps[idx]).clamp(0.0, 1.0);
    Ok(ClosenessReport {
        eps,
        delta_forward: fwd,
        delta_backward: bwd,
        passed: upper <= delta,
        method: Method::Sampled,
        upper_bound: Some(upper),
        confidence: Some(confidence),
        trials: Some(np.min(nq)),
    })
}

/// Output of the coupling sampler.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Coupled {
    Value(Vec<u8>),
    /// `g⁻¹(f(x))` is empty.
    NoPreimage,
}

/// Supports up to this size are conditioned exactly.
pub const COUPLING_ENUMERATION_CAP: usize = 1 << 16;

/// Law of `Y'` given `X = x`: `Q` conditioned on `g(Y') = f(x)`.
pub fn coupling_conditional(
    f: &BTreeMap<Vec<u8>, Vec<u8>>,
    g: &BTreeMap<Vec<u8>, Vec<u8>>,
    q: &FinitePmf<f64>,
    x: &[u8],
) -> Result<Option<Vec<(Vec<u8>, f64)>>> {
    let z = f
        .get(x)
        .ok_or_else(|| Error::Parameter(format!("f undefined at {}", hex::encode(x))))?;
    let mut hits = Vec::new();
    let mut total = 0.0;
    for (y, m) in q.atoms() {
        let gy = g
            .get(y)
            .ok_or_else(|| Error::Parameter(format!("g undefined at {}", hex::encode(y))))?;
        if gy == z {
            hits.push((y.clone(), *m));
            total += m;
        }
    }
    if hits.is_empty() {
        return Ok(None);
    }
    Ok(Some(hits.into_iter().map(|(y, m)| (y, m / total)).collect()))
}

/// Samples `y'` from `Q` conditioned on `g(y') = f(x)`.
pub fn coupling_sample(
    f: &BTreeMap<Vec<u8>, Vec<u8>>,
    g: &BTreeMap<Vec<u8>, Vec<u8>>,
    _p: &FinitePmf<f64>,
    q: &FinitePmf<f64>,
    x: &[u8],
    attempt_cap: u64,
    rng: &mut impl Rng,
) -> Result<Coupled> {
    if q.support_len() <= COUPLING_ENUMERATION_CAP {
        let Some(cond) = coupling_conditional(f, g, q, x)? else {
            return Ok(Coupled::NoPreimage);
        };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (y, m) in &cond {
            acc += m;
            if u < acc {
                return Ok(Coupled::Value(y.clone()));
            }
        }
        return Ok(Coupled::Value(cond.last().expect("nonempty").0.clone()));
    }
    let z = f
        .get(x)
        .ok_or_else(|| Error::Parameter(format!("f undefined at {}", hex::encode(x))))?;
    let atoms: Vec<(&Vec<u8>, &f64)> = q.atoms().collect();
    for _ in 0..attempt_cap {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = atoms.last().expect("nonempty").0;
        for (y, m) in &atoms {
            acc += **m;
            if u < acc {
                pick = y;
                break;
            }
        }
        if g.get(pick) == Some(z) {
            return Ok(Coupled::Value(pick.clone()));
        }
    }
    Err(Error::CappedSampling {
        attempts: attempt_cap as usize,
    })
}

/// Exact joint law of `(f(X), Y')` for `X ~ P`, by enumeration.
pub fn coupling_law(
    f: &BTreeMap<Vec<u8>, Vec<u8>>,
    g: &BTreeMap<Vec<u8>, Vec<u8>>,
    p: &FinitePmf<f64>,
    q: &FinitePmf<f64>,
) -> Result<Vec<(Vec<u8>, Coupled, f64)>> {
    let mut out = Vec::new();
    for (x, px) in p.atoms() {
        let z = f
            .get(x)
            .ok_or_else(|| Error::Parameter(format!("f undefined at {}", hex::encode(x))))?;
        match coupling_conditional(f, g, q, x)? {
            None => out.push((z.clone(), Coupled::NoPreimage, *px)),
            Some(cond) => {
                for (y, m) in cond {
                    out.push((z.clone(), Coupled::Value(y), px * m));
                }
            }
        }
    }
    Ok(out)
}

/// `(3ε, 2δ/δ' + 2δ/(1 − e^{−ε}))`.
pub fn conditioning_params(eps: f64, delta: f64, delta_prime: f64) -> Result<(f64, f64)> {
    if eps == 0.0 {
        return Err(Error::Degenerate("eps = 0 makes 1 - e^-eps vanish".into()));
    }
    if !(eps > 0.0) || !(delta_prime > 0.0) || delta < 0.0 {
        return Err(Error::Parameter("need eps > 0, delta' > 0, delta >= 0".into()));
    }
    let gamma = 2.0 * delta / delta_prime + 2.0 * delta / (1.0 - (-eps).exp());
    Ok((3.0 * eps, gamma))
}

/// `(kε, δ·(e^{kε} − 1)/(e^ε − 1))`, the ratio read as `k` at `ε = 0`.
pub fn group_privacy_params(eps: f64, delta: f64, k: u32) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Parameter("group size must be at least 1".into()));
    }
    let ratio = if eps == 0.0 {
        k as f64
    } else {
        ((k as f64 * eps).exp_m1()) / eps.exp_m1()
    };
    Ok((k as f64 * eps, delta * ratio))
}

/// Basic composition: componentwise sums.
pub fn compose_params(params: &[(f64, f64)]) -> Result<(f64, f64)> {
    if params.iter().any(|(e, d)| *e < 0.0 || *d < 0.0) {
        return Err(Error::Parameter("parameters must be nonnegative".into()));
    }
    Ok(params.iter().fold((0.0, 0.0), |(e, d), (a, b)| (e + a, d + b)))
}

/// `(α, γ) = (3ε, 2δ/β + 2δ/(1 − e^{−ε}))`.
pub fn unlearning_params(eps: f64, delta: f64, beta: f64) -> Result<(f64, f64)> {
    if !(beta > 0.0) {
        return Err(Error::Parameter("beta must be positive".into()));
    }
    conditioning_params(eps, delta, beta)
}

/// Hockey-stick divergences, both directions, between a law over tape
/// cylinders and the uniform tape.
///
/// Each entry of `law` is a draw path with its probability. The path stands
/// for the cylinder of tapes that reproduce those draws, and within it the
/// tape is uniform. Paths must form a prefix tree: two paths that agree up
/// to some position must make the same kind of draw there.
pub fn tape_law_divergence<M: Mass>(law: &[(Vec<Choice>, M)], eps: f64) -> Result<(M, M)> {
    let total = law.iter().fold(M::zero(), |a, (_, m)| a.add(m));
    let normalized = if M::EXACT {
        total == M::one()
    } else {
        (total.to_f64() - 1.0).abs() <= FLOAT_SLACK
    };
    if !normalized {
        return Err(Error::Parameter(format!("tape law sums to {}", total.to_f64())));
    }
    let mut paths: Vec<(Vec<Choice>, M)> = law.iter().map(|(p, m)| (canonical_path(p), m.clone())).collect();
    paths.sort_by(|a, b| a.0.cmp(&b.0));
    let factor = M::exp(eps);
    let mut fwd = M::zero();
    let mut bwd = M::zero();
    walk(&paths, 0, M::one(), M::zero(), &factor, &mut fwd, &mut bwd)?;
    Ok((fwd, bwd))
}

/// Groups draws by region, keeping the order within each region.
fn canonical_path(path: &[Choice]) -> Vec<Choice> {
    let mut p = path.to_vec();
    p.sort_by_key(|c| (c.stream, c.region));
    p
}

/// `paths` share their first `depth` draws and lie in a cylinder of uniform
/// mass `pi`; `density` is the law's density there from shorter paths.
fn walk<M: Mass>(
    paths: &[(Vec<Choice>, M)],
    depth: usize,
    pi: M,
    mut density: M,
    factor: &M,
    fwd: &mut M,
    bwd: &mut M,
) -> Result<()> {
    let mut rest_start = 0;
    for (p, m) in paths {
        if p.len() == depth {
            density = density.add(&m.div(&pi));
            rest_start += 1;
        } else {
            break;
        }
    }
    let deeper = &paths[rest_start..];
    let mut covered = M::zero();
    let mut i = 0;
    if let Some((first, _)) = deeper.first() {
        let slot = &first[depth];
        let support: BTreeMap<i64, f64> = slot.kind.support().into_iter().collect();
        while i < deeper.len() {
            let c = &deeper[i].0[depth];
            if c.stream != slot.stream || c.region != slot.region || c.kind != slot.kind {
                return Err(Error::Unsupported(
                    "tape law paths make different draws at the same position".into(),
                ));
            }
            let mut j = i + 1;
            while j < deeper.len() && deeper[j].0[depth] == *c {
                j += 1;
            }
            let p = *support
                .get(&c.value)
                .ok_or_else(|| Error::Parameter(format!("draw value {} has no mass", c.value)))?;
            let p = M::from_f64(p);
            covered = covered.add(&p);
            walk(&deeper[i..j], depth + 1, pi.mul(&p), density.clone(), factor, fwd, bwd)?;
            i = j;
        }
    }
    let free = pi.mul(&M::one().sub(&covered).max0());
    if !free.is_zero() {
        *fwd = fwd.add(&free.mul(&density.sub(factor).max0()));
        *bwd = bwd.add(&free.mul(&M::one().sub(&factor.mul(&density)).max0()));
    }
    Ok(())
}

/// Two-sided check of a tape law against uniform.
pub fn check_tape_law<M: Mass>(law: &[(Vec<Choice>, M)], eps: f64, delta: f64) -> Result<ClosenessReport> {
    let (fwd, bwd) = tape_law_divergence(law, eps)?;
    let d = M::from_f64(delta);
    let passed = fwd <= d && bwd <= d;
    Ok(ClosenessReport::exact(eps, fwd.to_f64(), bwd.to_f64(), passed))
}
