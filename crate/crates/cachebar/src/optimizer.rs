//! Budget-distribution analysis and optimization.
//!
//! Given a per-domain budget distribution over {0..w} lines per cache set,
//! this module computes the distribution of evictions a Prime-Probe
//! attacker observes for each victim demand, scores distributions by the
//! total statistical distance between those eviction rows (security) and by
//! the earth mover's distance from the full-cache allocation (performance),
//! and searches the constrained simplex for the budget distribution
//! minimizing the normalized security term subject to the performance
//! bound.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PmfError {
    #[error("probability vector is empty")]
    Empty,
    #[error("probability at {index} is negative ({value})")]
    Negative { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("index {index} out of range for {ways} ways")]
    OutOfRange { index: usize, ways: usize },
    #[error("bad probability file: {0}")]
    BadFile(String),
}

const SUM_TOLERANCE: f64 = 1e-9;

/// Probability mass function over per-set line budgets {0..w}.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPmf {
    probs: Vec<f64>,
}

impl BudgetPmf {
    pub fn new(probs: Vec<f64>) -> Result<Self, PmfError> {
        if probs.is_empty() {
            return Err(PmfError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if value < 0.0 || !value.is_finite() {
                return Err(PmfError::Negative { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(PmfError::NotNormalized { sum });
        }
        Ok(BudgetPmf { probs })
    }

    /// All mass on budget `q`.
    pub fn degenerate(ways: usize, q: usize) -> Result<Self, PmfError> {
        if q > ways {
            return Err(PmfError::OutOfRange { index: q, ways });
        }
        let mut probs = vec![0.0; ways + 1];
        probs[q] = 1.0;
        Ok(BudgetPmf { probs })
    }

    /// Uniform over `lo..=hi`.
    pub fn uniform_over(ways: usize, lo: usize, hi: usize) -> Result<Self, PmfError> {
        if hi > ways || lo > hi {
            return Err(PmfError::OutOfRange { index: hi.max(lo), ways });
        }
        let mut probs = vec![0.0; ways + 1];
        let p = 1.0 / (hi - lo + 1) as f64;
        for q in lo..=hi {
            probs[q] = p;
        }
        Ok(BudgetPmf { probs })
    }

    pub fn ways(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn prob(&self, q: usize) -> f64 {
        self.probs.get(q).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Budgets with nonzero mass.
    pub fn support(&self) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(q, _)| q)
            .collect()
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (q, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return q;
            }
        }
        self.probs.len() - 1
    }

    /// One probability per line; `#` starts a comment.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = String::from("# per-domain budget distribution, index = lines per set\n");
        for p in &self.probs {
            text.push_str(&format!("{p:.17}\n"));
        }
        std::fs::write(path, text)
    }

    pub fn load(path: &Path) -> Result<Self, PmfError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PmfError::BadFile(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PmfError> {
        let mut probs = Vec::new();
        for raw in text.lines() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            probs.push(
                body.parse::<f64>()
                    .map_err(|_| PmfError::BadFile(format!("bad probability `{body}`")))?,
            );
        }
        Self::new(probs)
    }
}

/// Distribution of the total attacker line allocation across `m` colluding
/// domains, clamped at `w`: mass on raw sums >= w aggregates at w.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerSumPmf {
    probs: Vec<f64>,
}

impl AttackerSumPmf {
    pub fn ways(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn prob(&self, q: usize) -> f64 {
        self.probs.get(q).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Treats an explicit vector as an attacker-sum distribution (tests and
    /// degenerate setups).
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, PmfError> {
        let pmf = BudgetPmf::new(probs)?;
        Ok(AttackerSumPmf { probs: pmf.probs })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (q, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return q;
            }
        }
        self.probs.len() - 1
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("attacker count must be at least 1")]
    NoAttackers,
    #[error("ways must be at least 2, got {0}")]
    TooFewWays(usize),
    #[error("epsilon must lie strictly between 0 and 1, got {0}")]
    BadEpsilon(f64),
    #[error("no feasible distribution in the searched support")]
    Infeasible,
    #[error(transparent)]
    Pmf(#[from] PmfError),
}

/// Distribution of the attackers' total allocation: the m-fold convolution
/// of the per-domain budget distribution, with all mass on sums >= w
/// collapsed onto w.
pub fn attacker_sum_pmf(pmf: &BudgetPmf, attackers: usize) -> Result<AttackerSumPmf, OptimizerError> {
    if attackers == 0 {
        return Err(OptimizerError::NoAttackers);
    }
    let w = pmf.ways();
    let mut conv = pmf.probs().to_vec();
    for _ in 1..attackers {
        let mut next = vec![0.0; conv.len() + w];
        for (i, &a) in conv.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in pmf.probs().iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        conv = next;
    }
    let mut probs = vec![0.0; w + 1];
    for (sum, &p) in conv.iter().enumerate() {
        probs[sum.min(w)] += p;
    }
    Ok(AttackerSumPmf { probs })
}

/// P_d[X = x] for one victim demand `d`: the probability the attacker
/// observes `x` evictions, marginalized over the victim budget and the
/// attacker allocation. Victim demand beyond its budget back-fills the
/// victim's own flushed lines, so the effective footprint is min(q0, d).
pub fn eviction_row(victim: &BudgetPmf, attacker: &AttackerSumPmf, d: usize) -> Vec<f64> {
    let w = victim.ways();
    debug_assert!(d <= w);
    let mut row = vec![0.0; w + 1];

    // x = 0: no evictions iff w >= q_a + min(q0, d).
    let mut p0 = 0.0;
    for q0 in 0..=d.min(w) {
        let mut inner = 0.0;
        for qa in 0..=(w - q0) {
            inner += attacker.prob(qa);
        }
        p0 += victim.prob(q0) * inner;
    }
    if d < w {
        let mut inner = 0.0;
        for qa in 0..=(w - d) {
            inner += attacker.prob(qa);
        }
        for q0 in (d + 1)..=w {
            p0 += victim.prob(q0) * inner;
        }
    }
    row[0] = p0;

    // x >= 1: exactly x evictions iff x + w = q_a + min(q0, d).
    for x in 1..=w {
        let mut p = 0.0;
        for q0 in 0..=d.min(w) {
            if x + w >= q0 && x + w - q0 <= w {
                p += victim.prob(q0) * attacker.prob(x + w - q0);
            }
        }
        if d < w && x + w - d <= w {
            for q0 in (d + 1)..=w {
                p += victim.prob(q0) * attacker.prob(x + w - d);
            }
        }
        row[x] = p;
    }
    row
}

/// All rows P_d[X = x] for d, x in {0..w}.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionDistribution {
    rows: Vec<Vec<f64>>,
}

impl EvictionDistribution {
    pub fn compute(victim: &BudgetPmf, attacker: &AttackerSumPmf) -> Self {
        let w = victim.ways();
        EvictionDistribution {
            rows: (0..=w).map(|d| eviction_row(victim, attacker, d)).collect(),
        }
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.rows[d]
    }

    pub fn ways(&self) -> usize {
        self.rows.len() - 1
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Security objective: the sum over all demand pairs d < d' of the L1
/// distance between their eviction rows. All domains draw from the same
/// distribution, so one shared per-domain distribution is passed.
pub fn security_objective(pmf: &BudgetPmf, attackers: usize) -> Result<f64, OptimizerError> {
    let attacker = attacker_sum_pmf(pmf, attackers)?;
    Ok(security_objective_with(pmf, &attacker))
}

/// Security objective against an explicit attacker-sum distribution.
pub fn security_objective_with(victim: &BudgetPmf, attacker: &AttackerSumPmf) -> f64 {
    let w = victim.ways();
    let rows: Vec<Vec<f64>> = (0..=w).map(|d| eviction_row(victim, attacker, d)).collect();
    let mut total = 0.0;
    for d in 0..=w {
        for d2 in (d + 1)..=w {
            total += l1(&rows[d], &rows[d2]);
        }
    }
    total
}

/// Performance objective: the earth mover's distance from the distribution
/// concentrated on the full budget w, i.e. the expected number of withheld
/// lines.
pub fn emd_objective(pmf: &BudgetPmf) -> f64 {
    let w = pmf.ways();
    pmf.probs().iter().enumerate().map(|(q, &p)| (w - q) as f64 * p).sum()
}

/// Worst (largest) possible security objective: the value at the
/// degenerate-at-w distribution, where the attacker observes every demand
/// exactly.
pub fn security_worst_case(ways: usize, attackers: usize) -> Result<f64, OptimizerError> {
    let deg = BudgetPmf::degenerate(ways, ways)?;
    security_objective(&deg, attackers)
}

/// Worst possible performance objective: the value at degenerate-at-0.
pub fn emd_worst_case(ways: usize) -> f64 {
    let deg = BudgetPmf::degenerate(ways, 0).expect("0 <= ways");
    emd_objective(&deg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeParams {
    pub ways: usize,
    pub attackers: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub starts: usize,
    pub iterations: usize,
    /// Optional cap on the largest budget the search may assign mass to.
    /// A domain with the full budget w can prime whole sets, so operators
    /// may want to withhold the top of the range; `None` searches all of
    /// {floor..w} as the formulation states.
    pub support_max: Option<usize>,
}

impl OptimizeParams {
    pub fn new(ways: usize, attackers: usize, epsilon: f64) -> Self {
        OptimizeParams {
            ways,
            attackers,
            epsilon,
            seed: 0,
            starts: 16,
            iterations: 4000,
            support_max: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_starts(mut self, starts: usize) -> Self {
        self.starts = starts;
        self
    }

    pub fn with_support_max(mut self, support_max: usize) -> Self {
        self.support_max = Some(support_max);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub pmf: BudgetPmf,
    /// Minimized value: the normalized security term.
    pub u: f64,
    pub security_term: f64,
    pub emd_term: f64,
    /// Normalizer for the security term (its worst case).
    pub gamma: f64,
    /// Normalizer for the performance term (its worst case).
    pub delta: f64,
    pub epsilon: f64,
}

/// Smallest budget the fairness constraint allows: no mass below
/// w/(m+1).
pub fn fairness_floor(ways: usize, attackers: usize) -> usize {
    // ceil(w / (m+1)); an exact multiple keeps the boundary value itself.
    ways.div_ceil(attackers + 1)
}

struct Objective {
    attackers: usize,
    gamma: f64,
    emd_bound_scale: f64, // 1 / (delta * (1 + epsilon))
}

impl Objective {
    /// Returns (u, emd_term, feasible): u = security/gamma, feasibility is
    /// u >= emd/(delta(1+eps)).
    fn eval(&self, probs: &[f64]) -> (f64, f64, bool) {
        let pmf = BudgetPmf { probs: probs.to_vec() };
        let attacker = attacker_sum_pmf(&pmf, self.attackers).expect("attackers >= 1");
        let security = security_objective_with(&pmf, &attacker);
        let u = security / self.gamma;
        let emd_term = emd_objective(&pmf) * self.emd_bound_scale;
        (u, emd_term, u + 1e-12 >= emd_term)
    }

    /// Penalized score for the annealer.
    fn score(&self, probs: &[f64]) -> f64 {
        let (u, emd_term, _) = self.eval(probs);
        let violation = (emd_term - u).max(0.0);
        u + 10.0 * violation
    }
}

fn normalize(probs: &mut [f64]) {
    let sum: f64 = probs.iter().sum();
    if sum > 0.0 {
        for p in probs.iter_mut() {
            *p /= sum;
        }
    }
}

/// Minimizes the normalized security term over budget distributions subject
/// to the simplex, fairness and performance constraints, by multi-start
/// simplex-projected coordinate perturbation with annealed acceptance.
/// Deterministic for a fixed seed.
pub fn optimize(params: OptimizeParams) -> Result<OptimizationResult, OptimizerError> {
    let OptimizeParams { ways, attackers, epsilon, seed, starts, iterations, support_max } =
        params;
    if ways < 2 {
        return Err(OptimizerError::TooFewWays(ways));
    }
    if attackers == 0 {
        return Err(OptimizerError::NoAttackers);
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(OptimizerError::BadEpsilon(epsilon));
    }

    let floor = fairness_floor(ways, attackers);
    let ceil = support_max.unwrap_or(ways).min(ways);
    if ceil < floor {
        return Err(PmfError::OutOfRange { index: ceil, ways }.into());
    }
    let support: Vec<usize> = (floor..=ceil).collect();
    let gamma = security_worst_case(ways, attackers)?;
    let delta = emd_worst_case(ways);
    let objective = Objective {
        attackers,
        gamma,
        emd_bound_scale: 1.0 / (delta * (1.0 + epsilon)),
    };

    // The all-mass-at-ceiling distribution is feasible whenever its emd
    // term does not exceed its security term, which holds for the
    // unrestricted ceiling w (emd 0); a best candidate therefore always
    // exists in the default configuration.
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    {
        let mut deg = vec![0.0; ways + 1];
        deg[ceil] = 1.0;
        candidates.push(deg);
        let mut uni = vec![0.0; ways + 1];
        for &q in &support {
            uni[q] = 1.0 / support.len() as f64;
        }
        candidates.push(uni);
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |probs: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
        let (u, _, feasible) = objective.eval(probs);
        if feasible && best.as_ref().is_none_or(|(bu, _)| u < *bu) {
            *best = Some((u, probs.to_vec()));
        }
    };
    for c in &candidates {
        consider(c, &mut best);
    }

    for start in 0..starts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(start as u64));
        // Random point on the support simplex.
        let mut probs = vec![0.0; ways + 1];
        for &q in &support {
            let u: f64 = rng.gen();
            probs[q] = -(1.0 - u).ln();
        }
        normalize(&mut probs);

        let mut score = objective.score(&probs);
        let t0: f64 = 0.05;
        let t1: f64 = 1e-4;
        for it in 0..iterations {
            let frac = it as f64 / iterations.max(1) as f64;
            let temp = t0 * (t1 / t0).powf(frac);
            let step = 0.30 * (1.0 - frac) + 0.01;

            let i = support[rng.gen_range(0..support.len())];
            let j = support[rng.gen_range(0..support.len())];
            if i == j || probs[i] == 0.0 {
                continue;
            }
            // Move mass i -> j; occasionally drain the coordinate entirely
            // so exact zeros are reachable.
            let amount = if rng.gen::<f64>() < 0.05 {
                probs[i]
            } else {
                (rng.gen::<f64>() * step).min(probs[i])
            };
            let mut next = probs.clone();
            next[i] -= amount;
            next[j] += amount;
            let next_score = objective.score(&next);
            let accept = next_score <= score
                || rng.gen::<f64>() < ((score - next_score) / temp).exp();
            if accept {
                probs = next;
                score = next_score;
            }
        }
        consider(&probs, &mut best);

        // Polish: drop near-zero coordinates when that does not hurt.
        if let Some((best_u, best_probs)) = &best {
            let mut polished = best_probs.clone();
            let mut improved = false;
            for &q in &support {
                if polished[q] > 0.0 && polished[q] < 5e-3 {
                    let mut trial = polished.clone();
                    trial[q] = 0.0;
                    normalize(&mut trial);
                    let (u, _, feasible) = objective.eval(&trial);
                    if feasible && u <= best_u + 1e-9 {
                        polished = trial;
                        improved = true;
                    }
                }
            }
            if improved {
                consider(&polished, &mut best);
            }
        }
    }

    let (_, best_probs) = best.ok_or(OptimizerError::Infeasible)?;
    let pmf = BudgetPmf::new(best_probs).expect("simplex moves preserve normalization");
    let security_term = security_objective(&pmf, attackers)?;
    let emd_term = emd_objective(&pmf);
    Ok(OptimizationResult {
        u: security_term / gamma,
        security_term,
        emd_term,
        gamma,
        delta,
        epsilon,
        pmf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_pmf(w: usize) -> impl Strategy<Value = BudgetPmf> {
        prop::collection::vec(0.0f64..1.0, w + 1).prop_map(move |mut v| {
            let sum: f64 = v.iter().sum();
            if sum == 0.0 {
                v[0] = 1.0;
            } else {
                for p in v.iter_mut() {
                    *p /= sum;
                }
            }
            // Exact renormalization to survive the constructor tolerance.
            let sum: f64 = v.iter().sum();
            for p in v.iter_mut() {
                *p /= sum;
            }
            BudgetPmf::new(v).unwrap()
        })
    }

    /// Brute-force attacker-sum distribution by enumerating all m-tuples.
    fn attacker_sum_bruteforce(pmf: &BudgetPmf, m: usize) -> Vec<f64> {
        let w = pmf.ways();
        let mut out = vec![0.0; w + 1];
        let mut idx = vec![0usize; m];
        loop {
            let p: f64 = idx.iter().map(|&q| pmf.prob(q)).product();
            let sum: usize = idx.iter().sum();
            out[sum.min(w)] += p;
            // Odometer.
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] <= w {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == m {
                    return out;
                }
            }
        }
    }

    #[test]
    fn pmf_constructor_validates() {
        assert!(matches!(BudgetPmf::new(vec![]), Err(PmfError::Empty)));
        assert!(matches!(BudgetPmf::new(vec![0.5, -0.5]), Err(PmfError::Negative { .. })));
        assert!(matches!(BudgetPmf::new(vec![0.5, 0.4]), Err(PmfError::NotNormalized { .. })));
        assert!(BudgetPmf::new(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn pmf_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pmf.txt");
        let pmf = BudgetPmf::new(vec![0.0, 0.25, 0.5, 0.25]).unwrap();
        pmf.save(&path).unwrap();
        let loaded = BudgetPmf::load(&path).unwrap();
        assert_eq!(pmf, loaded);
    }

    #[test]
    fn degenerate_convolutions() {
        let w = 16;
        let pmf = BudgetPmf::degenerate(w, 1).unwrap();
        let sum = attacker_sum_pmf(&pmf, 2).unwrap();
        assert_eq!(sum.prob(2), 1.0);

        let full = BudgetPmf::degenerate(w, w).unwrap();
        for m in 1..=4 {
            let s = attacker_sum_pmf(&full, m).unwrap();
            assert_eq!(s.prob(w), 1.0, "clamped at w for m={m}");
        }
    }

    #[test]
    fn zero_attackers_is_error() {
        let pmf = BudgetPmf::degenerate(4, 2).unwrap();
        assert_eq!(attacker_sum_pmf(&pmf, 0), Err(OptimizerError::NoAttackers));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn convolution_matches_enumeration(pmf in arb_pmf(8), m in 1usize..=3) {
            let fast = attacker_sum_pmf(&pmf, m).unwrap();
            let brute = attacker_sum_bruteforce(&pmf, m);
            for q in 0..=8 {
                prop_assert!((fast.prob(q) - brute[q]).abs() < 1e-12);
            }
        }

        #[test]
        fn eviction_rows_are_distributions(pmf in arb_pmf(8), m in 1usize..=3, d in 0usize..=8) {
            let attacker = attacker_sum_pmf(&pmf, m).unwrap();
            let row = eviction_row(&pmf, &attacker, d);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
            for (x, &p) in row.iter().enumerate() {
                prop_assert!(p >= -1e-15);
                if x > d {
                    prop_assert!(p.abs() < 1e-12, "P_d[X={x}] must vanish for x > d={d}");
                }
            }
        }
    }

    #[test]
    fn degenerate_budgets_give_point_rows() {
        // With fixed budgets the eviction count is deterministic:
        // x = max(0, q_a + min(q0, d) - w).
        let w = 8;
        for q0 in 0..=w {
            for qa in 0..=w {
                let victim = BudgetPmf::degenerate(w, q0).unwrap();
                let mut a = vec![0.0; w + 1];
                a[qa] = 1.0;
                let attacker = AttackerSumPmf::from_probs(a).unwrap();
                for d in 0..=w {
                    let row = eviction_row(&victim, &attacker, d);
                    let x = (qa + q0.min(d)).saturating_sub(w);
                    for (i, &p) in row.iter().enumerate() {
                        let expect = if i == x { 1.0 } else { 0.0 };
                        assert!(
                            (p - expect).abs() < 1e-12,
                            "q0={q0} qa={qa} d={d}: row[{i}]={p}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn full_budgets_reveal_demand_exactly() {
        let w = 16;
        let full = BudgetPmf::degenerate(w, w).unwrap();
        let attacker = attacker_sum_pmf(&full, 3).unwrap();
        for d in 0..=w {
            let row = eviction_row(&full, &attacker, d);
            assert_eq!(row[d], 1.0, "attacker observes the demand exactly");
        }
    }

    #[test]
    fn attacker_starved_rows_identical() {
        let w = 8;
        let victim = BudgetPmf::uniform_over(w, 2, 6).unwrap();
        let attacker = AttackerSumPmf::from_probs({
            let mut v = vec![0.0; w + 1];
            v[0] = 1.0;
            v
        })
        .unwrap();
        for d in 0..=w {
            let row = eviction_row(&victim, &attacker, d);
            assert!((row[0] - 1.0).abs() < 1e-12, "no lines, no evictions");
        }
    }

    /// Direct LRU replay of one prime-fill-probe round with fixed
    /// allocations; independent of both the cache module and the formulas.
    fn replay_evictions(q0: usize, qa: usize, d: usize, w: usize) -> usize {
        #[derive(Clone, Copy, PartialEq)]
        enum Who {
            Attacker(usize),
            Victim(usize),
        }
        let mut set: Vec<Who> = Vec::new(); // MRU at front
        for i in 0..qa.min(w) {
            set.insert(0, Who::Attacker(i));
        }
        let mut evicted = 0;
        // The victim touches min(q0, d) distinct page blocks; demand beyond
        // the budget recycles its own flushed lines.
        for v in 0..q0.min(d) {
            if set.len() == w {
                if matches!(set.pop(), Some(Who::Attacker(_))) {
                    evicted += 1;
                }
            }
            set.insert(0, Who::Victim(v));
        }
        evicted
    }

    #[test]
    fn rows_match_monte_carlo_replay() {
        use rand::SeedableRng;
        let w = 6;
        let victim = BudgetPmf::new(vec![0.05, 0.1, 0.15, 0.2, 0.2, 0.2, 0.1]).unwrap();
        let per_attacker = BudgetPmf::new(vec![0.1, 0.2, 0.4, 0.2, 0.1, 0.0, 0.0]).unwrap();
        let attacker = attacker_sum_pmf(&per_attacker, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        for d in [0usize, 1, 3, 6] {
            let mut freq = vec![0f64; w + 1];
            for _ in 0..n {
                let q0 = victim.sample(&mut rng);
                let qa = attacker.sample(&mut rng);
                freq[replay_evictions(q0, qa, d, w)] += 1.0;
            }
            let row = eviction_row(&victim, &attacker, d);
            let tv: f64 = row
                .iter()
                .zip(&freq)
                .map(|(p, f)| (p - f / n as f64).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.01, "d={d}: TV {tv} vs Monte-Carlo replay");
        }
    }

    #[test]
    fn worst_case_normalizers() {
        // Degenerate-at-w rows are point masses at d, so every pair is at
        // L1 distance 2: gamma = 2 * C(w+1, 2).
        for w in [4usize, 8, 16] {
            let gamma = security_worst_case(w, 3).unwrap();
            let pairs = (w + 1) * w / 2;
            assert_eq!(gamma, (2 * pairs) as f64, "w={w}");
        }
        assert_eq!(security_worst_case(16, 3).unwrap(), 272.0);
        assert_eq!(emd_worst_case(16), 16.0);
    }

    #[test]
    fn emd_examples() {
        let w = 16;
        assert_eq!(emd_objective(&BudgetPmf::degenerate(w, w).unwrap()), 0.0);
        assert_eq!(emd_objective(&BudgetPmf::degenerate(w, 0).unwrap()), 16.0);
        let uniform = BudgetPmf::uniform_over(w, 0, w).unwrap();
        assert!((emd_objective(&uniform) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn security_bounded_by_gamma() {
        let w = 8;
        let gamma = security_worst_case(w, 2).unwrap();
        for pmf in [
            BudgetPmf::uniform_over(w, 0, w).unwrap(),
            BudgetPmf::uniform_over(w, 3, 6).unwrap(),
            BudgetPmf::degenerate(w, 5).unwrap(),
        ] {
            let s = security_objective(&pmf, 2).unwrap();
            assert!(s >= 0.0 && s <= gamma + 1e-9);
        }
    }

    #[test]
    fn fairness_floor_values() {
        assert_eq!(fairness_floor(16, 3), 4);
        assert_eq!(fairness_floor(4, 1), 2);
        assert_eq!(fairness_floor(16, 2), 6); // ceil(16/3)
        assert_eq!(fairness_floor(16, 15), 1);
    }

    #[test]
    fn optimize_validates_inputs() {
        assert!(matches!(
            optimize(OptimizeParams::new(1, 3, 0.01)),
            Err(OptimizerError::TooFewWays(1))
        ));
        assert!(matches!(
            optimize(OptimizeParams::new(16, 0, 0.01)),
            Err(OptimizerError::NoAttackers)
        ));
        assert!(matches!(
            optimize(OptimizeParams::new(16, 3, 1.5)),
            Err(OptimizerError::BadEpsilon(_))
        ));
    }

    /// Exhaustive grid search over the 3-point support simplex for w=4,
    /// m=1 at the given resolution; the validation oracle for the annealer.
    fn grid_search_w4(epsilon: f64, resolution: f64) -> (f64, Vec<f64>) {
        let gamma = security_worst_case(4, 1).unwrap();
        let delta = emd_worst_case(4);
        let scale = 1.0 / (delta * (1.0 + epsilon));
        let steps = (1.0 / resolution).round() as usize;
        let mut best = (f64::INFINITY, vec![]);
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let p2 = i as f64 * resolution;
                let p3 = j as f64 * resolution;
                let p4 = 1.0 - p2 - p3;
                let mut probs = vec![0.0, 0.0, p2, p3, p4];
                normalize(&mut probs);
                let pmf = match BudgetPmf::new(probs.clone()) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let u = security_objective(&pmf, 1).unwrap() / gamma;
                let emd_term = emd_objective(&pmf) * scale;
                if u + 1e-12 >= emd_term && u < best.0 {
                    best = (u, probs);
                }
            }
        }
        best
    }

    #[test]
    fn optimize_w4_matches_grid_search() {
        let (grid_u, _) = grid_search_w4(0.01, 0.01);
        let result = optimize(OptimizeParams::new(4, 1, 0.01).with_seed(11)).unwrap();
        assert!(
            (result.u - grid_u).abs() < 1e-3,
            "annealed u={} vs grid u={grid_u}",
            result.u
        );
        // Fairness: no mass below w/(m+1) = 2.
        assert_eq!(result.pmf.prob(0), 0.0);
        assert_eq!(result.pmf.prob(1), 0.0);
        // Feasibility invariants.
        assert!((result.u - result.security_term / result.gamma).abs() < 1e-12);
        assert!(result.u + 1e-9 >= result.emd_term / (result.delta * (1.0 + result.epsilon)));
    }

    #[test]
    fn optimize_is_deterministic() {
        let a = optimize(OptimizeParams::new(4, 1, 0.01).with_seed(3)).unwrap();
        let b = optimize(OptimizeParams::new(4, 1, 0.01).with_seed(3)).unwrap();
        assert_eq!(a.pmf, b.pmf);
        assert_eq!(a.u, b.u);
    }

    #[test]
    fn optimize_beats_uniform_baseline() {
        let w = 8;
        let m = 3;
        let floor = fairness_floor(w, m);
        let uniform = BudgetPmf::uniform_over(w, floor, w).unwrap();
        let gamma = security_worst_case(w, m).unwrap();
        let u_uniform = security_objective(&uniform, m).unwrap() / gamma;
        let result = optimize(OptimizeParams::new(w, m, 0.01).with_seed(5)).unwrap();
        assert!(result.u <= u_uniform + 1e-9);
    }
}
