//! Simulated adversaries and leakage quantification: a Flush-Reload covert
//! channel, Prime-Probe trials against the budgeted simulator, a naive
//! Bayes demand classifier, confusion matrices and their budget-weighted
//! aggregation.
//!
//! Classifiers see only what a real attacker sees: the probe-miss count per
//! trial (and the attacker's own budget). Eviction attribution inside the
//! simulator is used for assertions, never for classification.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cache::{CacheGeometry, DomainId, PageId};
use crate::lifecycle::{AccessKind, VPage};
use crate::optimizer::{AttackerSumPmf, BudgetPmf};
use crate::sim::{SimConfig, Simulator};

pub const RECEIVER: DomainId = DomainId(1);
pub const SENDER: DomainId = DomainId(2);

/// Victim-demand classes partitioning {0..16}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DemandClass {
    None,
    One,
    Few,
    Some,
    Lots,
    Most,
}

pub const CLASSES: [DemandClass; 6] = [
    DemandClass::None,
    DemandClass::One,
    DemandClass::Few,
    DemandClass::Some,
    DemandClass::Lots,
    DemandClass::Most,
];

impl DemandClass {
    pub fn of(demand: usize) -> DemandClass {
        match demand {
            0 => DemandClass::None,
            1 => DemandClass::One,
            2..=4 => DemandClass::Few,
            5..=8 => DemandClass::Some,
            9..=12 => DemandClass::Lots,
            13..=16 => DemandClass::Most,
            _ => panic!("demand {demand} out of range"),
        }
    }

    pub fn index(self) -> usize {
        CLASSES.iter().position(|c| *c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            DemandClass::None => "none",
            DemandClass::One => "one",
            DemandClass::Few => "few",
            DemandClass::Some => "some",
            DemandClass::Lots => "lots",
            DemandClass::Most => "most",
        }
    }
}

/// One Prime-Probe observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialRecord {
    pub demand: usize,
    pub victim_budget: usize,
    pub attacker_budget: usize,
    /// Probe misses the attacker counted.
    pub evictions: usize,
    /// A probe read looked fault-inflated and the trial is discarded.
    pub dropped: bool,
}

impl TrialRecord {
    pub fn class(&self) -> DemandClass {
        DemandClass::of(self.demand)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlushReloadOutcome {
    pub shared_hit_rate: f64,
    pub unshared_hit_rate: f64,
    pub trials: usize,
}

/// Flush-Reload covert channel: a receiver repeatedly flushes and reloads
/// one block of a page it shares with a sender, timing the reload. The
/// sender either touches that page (`shared` phase) or a private page
/// (`unshared` baseline) `fr_interval` times per trial. Returns the
/// receiver's reload hit rates for both phases.
pub fn flush_reload_experiment(
    defense: bool,
    trials: usize,
    fr_interval: usize,
) -> FlushReloadOutcome {
    let geom = CacheGeometry::derive(16 * 64 * 64, 16, 64, 4096).unwrap();
    let shared_page = PageId(0);
    let private_page = PageId(50);

    let hit_rate = |sender_touches_shared: bool| -> f64 {
        let mut cfg = SimConfig::coa_only(geom);
        cfg.lifecycle.coa_enabled = defense;
        let mut sim = Simulator::new(cfg);
        sim.map(RECEIVER, VPage(0), shared_page).unwrap();
        sim.map(SENDER, VPage(0), shared_page).unwrap();
        sim.map(SENDER, VPage(1), private_page).unwrap();

        let mut hits = 0usize;
        for trial in 0..trials {
            sim.access(RECEIVER, VPage(0), AccessKind::Clflush).unwrap();
            for _ in 0..fr_interval {
                let target = if sender_touches_shared { VPage(0) } else { VPage(1) };
                sim.access(SENDER, target, AccessKind::Read).unwrap();
            }
            let reload = sim.access(RECEIVER, VPage(0), AccessKind::Read).unwrap();
            if reload.cache.is_some_and(|r| r.is_hit()) {
                hits += 1;
            }
            // Let the daemons run occasionally so demotions and merges
            // happen mid-experiment, as they would under real timers.
            if trial % 997 == 996 {
                sim.tick();
            }
        }
        hits as f64 / trials.max(1) as f64
    };

    FlushReloadOutcome {
        shared_hit_rate: hit_rate(true),
        unshared_hit_rate: hit_rate(false),
        trials,
    }
}

pub const VICTIM: DomainId = DomainId(0);
pub const ATTACKER: DomainId = DomainId(1);

/// Prime-Probe harness parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimeProbeConfig {
    /// Symmetric measurement noise: probability that a trial's count is
    /// off by one in either direction. Zero keeps the analytic oracle
    /// exact.
    pub noise: f64,
    /// Probe readings above this latency are treated as fault-inflated and
    /// the trial dropped.
    pub drop_threshold: u32,
}

impl Default for PrimeProbeConfig {
    fn default() -> Self {
        PrimeProbeConfig { noise: 0.0, drop_threshold: 1000 }
    }
}

/// Reusable Prime-Probe bench: one victim and one attacker domain, each
/// with 17 private pages of the target color.
pub struct PrimeProbeBench {
    sim: Simulator,
    cfg: PrimeProbeConfig,
    ways: usize,
}

impl PrimeProbeBench {
    pub fn new(cfg: PrimeProbeConfig) -> Self {
        let geom = CacheGeometry::derive(16 * 64 * 64, 16, 64, 4096).unwrap();
        let mut sim = Simulator::new(SimConfig::new(geom));
        for i in 0..17u64 {
            sim.map(VICTIM, VPage(i), PageId(i)).unwrap();
            sim.map(ATTACKER, VPage(i), PageId(100 + i)).unwrap();
        }
        PrimeProbeBench { sim, cfg, ways: geom.ways }
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    /// One trial at fixed budgets: prime, victim fill, reverse probe.
    pub fn trial<R: Rng>(
        &mut self,
        demand: usize,
        victim_budget: usize,
        attacker_budget: usize,
        rng: &mut R,
    ) -> TrialRecord {
        let sim = &mut self.sim;
        sim.reset_interval_state();
        sim.set_budget(VICTIM, victim_budget);
        sim.set_budget(ATTACKER, attacker_budget);

        for i in 0..attacker_budget as u64 {
            sim.access(ATTACKER, VPage(i), AccessKind::Read).unwrap();
        }
        let evicted_for_assert = sim.victim_fill(VICTIM, 0, demand).unwrap();

        let hit_latency = sim.latency_model().hit;
        let mut misses = 0usize;
        let mut dropped = false;
        for i in (0..attacker_budget as u64).rev() {
            let out = sim.access(ATTACKER, VPage(i), AccessKind::Read).unwrap();
            if out.latency > self.cfg.drop_threshold {
                dropped = true;
            } else if out.latency > hit_latency {
                misses += 1;
            }
        }
        debug_assert!(
            dropped || misses == evicted_for_assert,
            "probe misses diverge from attributed evictions"
        );
        debug_assert!(misses <= demand.min(victim_budget).max(0) || dropped);

        let mut evictions = misses;
        if self.cfg.noise > 0.0 && rng.gen::<f64>() < self.cfg.noise {
            if rng.gen::<bool>() {
                evictions = (evictions + 1).min(self.ways);
            } else {
                evictions = evictions.saturating_sub(1);
            }
        }
        TrialRecord {
            demand,
            victim_budget,
            attacker_budget,
            evictions,
            dropped,
        }
    }
}

/// `n` Prime-Probe trials at a fixed (d, q_v, q_a) cell.
pub fn prime_probe_trials(
    n: usize,
    demand: usize,
    victim_budget: usize,
    attacker_budget: usize,
    seed: u64,
) -> Vec<TrialRecord> {
    prime_probe_trials_with(PrimeProbeConfig::default(), n, demand, victim_budget, attacker_budget, seed)
}

pub fn prime_probe_trials_with(
    cfg: PrimeProbeConfig,
    n: usize,
    demand: usize,
    victim_budget: usize,
    attacker_budget: usize,
    seed: u64,
) -> Vec<TrialRecord> {
    let mut bench = PrimeProbeBench::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| bench.trial(demand, victim_budget, attacker_budget, &mut rng)).collect()
}

/// `n` trials at demand `d` with budgets redrawn per trial: the victim's
/// from `victim`, the attacker's total from `attacker_sum`. The empirical
/// eviction distribution converges to the analytic row for `d`.
pub fn prime_probe_trials_random_budgets(
    cfg: PrimeProbeConfig,
    n: usize,
    demand: usize,
    victim: &BudgetPmf,
    attacker_sum: &AttackerSumPmf,
    seed: u64,
) -> Vec<TrialRecord> {
    let mut bench = PrimeProbeBench::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q_v = victim.sample(&mut rng);
            let q_a = attacker_sum.sample(&mut rng);
            bench.trial(demand, q_v, q_a, &mut rng)
        })
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("no usable training records for attacker budget {attacker_budget}, class {class}")]
    EmptyClass { attacker_budget: usize, class: &'static str },
    #[error("no training records at all")]
    NoRecords,
    #[error("no classifier trained for attacker budget {0}")]
    UnknownBudget(usize),
    #[error("no confusion matrix for budget pair (q_v={victim_budget}, q_a={attacker_budget})")]
    MissingPair { victim_budget: usize, attacker_budget: usize },
}

/// Per-attacker-budget naive Bayes model: class-conditional eviction
/// distributions with add-one smoothing and uniform class priors.
#[derive(Debug, Clone)]
pub struct NbClassifier {
    ways: usize,
    /// attacker budget -> per-class conditional PMF over x in {0..w}.
    models: BTreeMap<usize, [Vec<f64>; 6]>,
}

/// Trains one classifier per attacker budget found in `records` (the
/// attacker knows its own budget). Dropped records are excluded.
pub fn train(records: &[TrialRecord], ways: usize) -> Result<NbClassifier, AttackError> {
    let mut grouped: BTreeMap<usize, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.dropped) {
        grouped.entry(r.attacker_budget).or_default().push(r);
    }
    if grouped.is_empty() {
        return Err(AttackError::NoRecords);
    }
    let mut models = BTreeMap::new();
    for (q_a, rows) in grouped {
        let mut counts = vec![[0u64; 6]; ways + 1];
        let mut totals = [0u64; 6];
        for r in rows {
            let c = r.class().index();
            counts[r.evictions.min(ways)][c] += 1;
            totals[c] += 1;
        }
        for (ci, &t) in totals.iter().enumerate() {
            if t == 0 {
                return Err(AttackError::EmptyClass {
                    attacker_budget: q_a,
                    class: CLASSES[ci].name(),
                });
            }
        }
        let mut conditionals: [Vec<f64>; 6] = Default::default();
        for (ci, cond) in conditionals.iter_mut().enumerate() {
            *cond = (0..=ways)
                .map(|x| (counts[x][ci] as f64 + 1.0) / (totals[ci] as f64 + (ways + 1) as f64))
                .collect();
        }
        models.insert(q_a, conditionals);
    }
    Ok(NbClassifier { ways, models })
}

impl NbClassifier {
    pub fn ways(&self) -> usize {
        self.ways
    }

    /// Most likely demand class for an observation of `x` evictions under
    /// attacker budget `q_a`; uniform priors, ties to the smaller class.
    pub fn predict(&self, attacker_budget: usize, x: usize) -> Result<DemandClass, AttackError> {
        let model =
            self.models.get(&attacker_budget).ok_or(AttackError::UnknownBudget(attacker_budget))?;
        let x = x.min(self.ways);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (ci, cond) in model.iter().enumerate() {
            let score = cond[x].ln(); // priors uniform over the six classes
            if score > best.0 {
                best = (score, ci);
            }
        }
        Ok(CLASSES[best.1])
    }
}

/// Row-stochastic 6x6 confusion matrix: rows are true classes, columns the
/// classifier's output. Rows with no test mass stay all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    cells: [[f64; 6]; 6],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 6]; 6]) -> Self {
        let mut cells = [[0.0; 6]; 6];
        for (r, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total > 0 {
                for (c, &n) in row.iter().enumerate() {
                    cells[r][c] = n as f64 / total as f64;
                }
            }
        }
        ConfusionMatrix { cells }
    }

    pub fn from_cells(cells: [[f64; 6]; 6]) -> Self {
        ConfusionMatrix { cells }
    }

    pub fn cell(&self, true_class: DemandClass, predicted: DemandClass) -> f64 {
        self.cells[true_class.index()][predicted.index()]
    }

    pub fn cells(&self) -> &[[f64; 6]; 6] {
        &self.cells
    }

    pub fn populated_rows(&self) -> Vec<usize> {
        (0..6).filter(|&r| self.cells[r].iter().sum::<f64>() > 0.0).collect()
    }

    /// Accuracy averaged over populated classes (mean of the diagonal).
    pub fn accuracy(&self) -> f64 {
        let rows = self.populated_rows();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|&r| self.cells[r][r]).sum::<f64>() / rows.len() as f64
    }

    /// Smallest per-class mass on the true or an adjacent class.
    pub fn min_adjacent_mass(&self) -> f64 {
        self.populated_rows()
            .into_iter()
            .map(|r| {
                let lo = r.saturating_sub(1);
                let hi = (r + 1).min(5);
                self.cells[r][lo..=hi].iter().sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Row sums are 1 (within tolerance) for populated rows.
    pub fn check_row_stochastic(&self) -> Result<(), String> {
        for r in self.populated_rows() {
            let sum: f64 = self.cells[r].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(format!("row {r} sums to {sum}"));
            }
        }
        Ok(())
    }
}

/// Per-(q_v, q_a) evaluation artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_pair: BTreeMap<(usize, usize), ConfusionMatrix>,
    /// Overall accuracy across all test records (class-averaged, pooled).
    pub pooled: ConfusionMatrix,
}

/// Evaluates `classifier` on test records, producing one row-stochastic
/// confusion matrix per (victim budget, attacker budget) pair plus the
/// pooled matrix across all records.
pub fn evaluate(classifier: &NbClassifier, records: &[TrialRecord]) -> Result<Evaluation, AttackError> {
    let mut counts: BTreeMap<(usize, usize), [[u64; 6]; 6]> = BTreeMap::new();
    let mut pooled = [[0u64; 6]; 6];
    for r in records.iter().filter(|r| !r.dropped) {
        let predicted = classifier.predict(r.attacker_budget, r.evictions)?;
        let cell = counts.entry((r.victim_budget, r.attacker_budget)).or_insert([[0; 6]; 6]);
        cell[r.class().index()][predicted.index()] += 1;
        pooled[r.class().index()][predicted.index()] += 1;
    }
    Ok(Evaluation {
        per_pair: counts.into_iter().map(|(k, v)| (k, ConfusionMatrix::from_counts(v))).collect(),
        pooled: ConfusionMatrix::from_counts(pooled),
    })
}

/// Budget-weighted aggregate: sums per-pair matrices with weights
/// P[Q_a = q_a] * P[Q_v = q_v] over the supports of the two distributions.
pub fn aggregate_confusion(
    per_pair: &BTreeMap<(usize, usize), ConfusionMatrix>,
    victim: &BudgetPmf,
    attacker: &BudgetPmf,
) -> Result<ConfusionMatrix, AttackError> {
    let mut cells = [[0.0; 6]; 6];
    for q_v in victim.support() {
        for q_a in attacker.support() {
            let weight = victim.prob(q_v) * attacker.prob(q_a);
            let m = per_pair.get(&(q_v, q_a)).ok_or(AttackError::MissingPair {
                victim_budget: q_v,
                attacker_budget: q_a,
            })?;
            for r in 0..6 {
                for c in 0..6 {
                    cells[r][c] += weight * m.cells()[r][c];
                }
            }
        }
    }
    Ok(ConfusionMatrix::from_cells(cells))
}

/// Full classifier pipeline at one budget distribution: per-cell trials,
/// per-attacker-budget training, per-pair evaluation and the weighted
/// aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    pub seed: u64,
    pub noise: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { train_per_cell: 64, test_per_cell: 64, seed: 0, noise: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub per_pair: BTreeMap<(usize, usize), ConfusionMatrix>,
    pub accuracy_per_pair: BTreeMap<(usize, usize), f64>,
    pub aggregate: ConfusionMatrix,
    pub aggregate_accuracy: f64,
}

/// Runs the pipeline over every (q_v, q_a) pair in the distribution's
/// support, for demands 0..=16, with train and test sets drawn from
/// independent seeds.
pub fn classifier_pipeline(
    pmf: &BudgetPmf,
    cfg: PipelineConfig,
) -> Result<PipelineOutcome, AttackError> {
    let ways = pmf.ways();
    let support = pmf.support();
    let bench_cfg = PrimeProbeConfig { noise: cfg.noise, ..PrimeProbeConfig::default() };

    let mut bench = PrimeProbeBench::new(bench_cfg);
    let mut train_records = Vec::new();
    let mut test_records = Vec::new();
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    for &q_a in &support {
        for &q_v in &support {
            for d in 0..=ways {
                for _ in 0..cfg.train_per_cell {
                    train_records.push(bench.trial(d, q_v, q_a, &mut train_rng));
                }
                for _ in 0..cfg.test_per_cell {
                    test_records.push(bench.trial(d, q_v, q_a, &mut test_rng));
                }
            }
        }
    }

    let classifier = train(&train_records, ways)?;
    let eval = evaluate(&classifier, &test_records)?;
    let aggregate = aggregate_confusion(&eval.per_pair, pmf, pmf)?;
    let accuracy_per_pair =
        eval.per_pair.iter().map(|(k, m)| (*k, m.accuracy())).collect();
    Ok(PipelineOutcome {
        aggregate_accuracy: aggregate.accuracy(),
        aggregate,
        accuracy_per_pair,
        per_pair: eval.per_pair,
    })
}

/// The undefended baseline: both budgets pinned at the full cache.
pub fn no_defense_pipeline(
    ways: usize,
    cfg: PipelineConfig,
) -> Result<PipelineOutcome, AttackError> {
    let pmf = BudgetPmf::degenerate(ways, ways).expect("w <= w");
    classifier_pipeline(&pmf, cfg)
}
