//! Box-constrained genetic algorithm for the basis-risk objective, with an
//! optional gradient polish of each generation's best individual.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::catopt::{basis_risk, dot, BondTerms, EventLossTable};
use super::channel::TaskPool;
use super::WorkloadError;

/// Extra cost added to the basis risk, for problem-specific constraints.
pub type Penalty = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// What the GA minimizes: basis risk plus an optional penalty.
#[derive(Clone)]
pub struct Objective {
    pub table: Arc<EventLossTable>,
    pub terms: BondTerms,
    pub penalty: Option<Penalty>,
}

impl Objective {
    pub fn new(table: EventLossTable, terms: BondTerms) -> Self {
        Self {
            table: Arc::new(table),
            terms,
            penalty: None,
        }
    }

    pub fn with_penalty(mut self, penalty: Penalty) -> Self {
        self.penalty = Some(penalty);
        self
    }

    pub fn dim(&self) -> usize {
        self.table.m
    }

    pub fn value(&self, w: &[f64]) -> Result<f64, WorkloadError> {
        let risk = basis_risk(w, &self.table, &self.terms)?;
        Ok(risk + self.penalty.as_ref().map_or(0.0, |p| p(w)))
    }
}

/// Evaluates a batch of candidate weight vectors.
pub trait FitnessEvaluator {
    fn evaluate(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>, WorkloadError>;
}

impl FitnessEvaluator for Objective {
    fn evaluate(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>, WorkloadError> {
        batch.iter().map(|w| self.value(w)).collect()
    }
}

/// Ships candidates to a [`TaskPool`] as comma-separated weights.
pub struct Pooled<'a>(pub &'a mut dyn TaskPool);

impl FitnessEvaluator for Pooled<'_> {
    fn evaluate(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>, WorkloadError> {
        let tasks: Vec<String> = batch.iter().map(|w| encode_weights(w)).collect();
        self.0
            .map(&tasks)?
            .iter()
            .map(|r| {
                r.parse()
                    .map_err(|_| WorkloadError::Protocol(format!("fitness `{r}` is not a number")))
            })
            .collect()
    }
}

pub fn encode_weights(w: &[f64]) -> String {
    w.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub fn decode_weights(s: &str) -> Result<Vec<f64>, WorkloadError> {
    s.split(',')
        .map(|v| {
            v.parse()
                .map_err(|_| WorkloadError::Protocol(format!("bad weight `{v}`")))
        })
        .collect()
}

/// Worker-side handler: weights in, objective value out.
pub fn fitness_task(objective: &Objective, payload: &str) -> Result<String, WorkloadError> {
    Ok(objective.value(&decode_weights(payload)?)?.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_sigma: f64,
    pub elitism: usize,
    pub seed: u64,
    pub polish: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 100,
            tournament_size: 3,
            crossover_rate: 0.9,
            mutation_sigma: 0.1,
            elitism: 2,
            seed: 1,
            polish: true,
        }
    }
}

impl GaConfig {
    /// Population 200 over 50 generations.
    pub fn large_scale() -> Self {
        Self {
            population: 200,
            generations: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidInput(m));
        if self.population < 2 {
            return bad(format!("population must be >= 2, got {}", self.population));
        }
        if self.generations < 1 {
            return bad("generations must be >= 1".into());
        }
        if self.elitism >= self.population {
            return bad(format!(
                "elitism ({}) must be smaller than the population ({})",
                self.elitism, self.population
            ));
        }
        if self.tournament_size < 1 {
            return bad("tournament size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad(format!("crossover rate must be in [0, 1], got {}", self.crossover_rate));
        }
        if !(self.mutation_sigma.is_finite() && self.mutation_sigma > 0.0) {
            return bad(format!("mutation sigma must be > 0, got {}", self.mutation_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStats {
    /// 0 is the initial population.
    pub generation: usize,
    pub best_risk: f64,
    pub mean_risk: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaResult {
    pub best_w: Vec<f64>,
    pub best_risk: f64,
    pub history: Vec<GenerationStats>,
}

/// A run that stopped early; `history` covers the completed generations.
#[derive(Debug)]
pub struct GaAbort {
    pub history: Vec<GenerationStats>,
    pub error: WorkloadError,
}

impl std::fmt::Display for GaAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "optimisation aborted after {} generation(s): {}",
            self.history.len().saturating_sub(1),
            self.error
        )
    }
}

impl std::error::Error for GaAbort {}

fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn tournament(rng: &mut ChaCha8Rng, fitness: &[f64], k: usize) -> usize {
    let mut best = rng.gen_range(0..fitness.len());
    for _ in 1..k {
        let c = rng.gen_range(0..fitness.len());
        if fitness[c] < fitness[best] || (fitness[c] == fitness[best] && c < best) {
            best = c;
        }
    }
    best
}

/// Indices sorted by fitness, ties broken by index.
fn ranking(fitness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    order
}

fn stats(generation: usize, fitness: &[f64], evaluations: usize) -> GenerationStats {
    GenerationStats {
        generation,
        best_risk: fitness.iter().copied().fold(f64::INFINITY, f64::min),
        mean_risk: fitness.iter().sum::<f64>() / fitness.len() as f64,
        evaluations,
    }
}

/// Minimize `objective` over `[0, 1]^m`. All randomness comes from
/// `cfg.seed` and is drawn on the calling side, so the result depends only
/// on the seed, not on how `evaluator` spreads the work.
pub fn optimize(
    objective: &Objective,
    cfg: &GaConfig,
    evaluator: &mut dyn FitnessEvaluator,
) -> Result<GaResult, GaAbort> {
    let abort = |history: &[GenerationStats], error| GaAbort {
        history: history.to_vec(),
        error,
    };
    cfg.validate().map_err(|e| abort(&[], e))?;
    let m = objective.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.mutation_sigma).expect("sigma validated");
    let gene_rate = 1.0 / m as f64;

    let mut pop: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| (0..m).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let mut fitness = evaluator.evaluate(&pop).map_err(|e| abort(&[], e))?;
    let mut evaluations = pop.len();
    let mut history = vec![stats(0, &fitness, evaluations)];

    for generation in 1..=cfg.generations {
        let order = ranking(&fitness);
        let mut next: Vec<Vec<f64>> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<f64> = order[..cfg.elitism].iter().map(|&i| fitness[i]).collect();
        let mut children = Vec::with_capacity(cfg.population - cfg.elitism);
        while next.len() + children.len() < cfg.population {
            let a = &pop[tournament(&mut rng, &fitness, cfg.tournament_size)];
            let b = &pop[tournament(&mut rng, &fitness, cfg.tournament_size)];
            let mut child: Vec<f64> = if rng.gen::<f64>() < cfg.crossover_rate {
                a.iter().zip(b).map(|(x, y)| if rng.gen::<bool>() { *x } else { *y }).collect()
            } else {
                a.clone()
            };
            for g in child.iter_mut() {
                if rng.gen::<f64>() < gene_rate {
                    *g = clip01(*g + normal.sample(&mut rng));
                }
            }
            children.push(child);
        }
        let child_fit = evaluator.evaluate(&children).map_err(|e| abort(&history, e))?;
        evaluations += children.len();
        next.extend(children);
        next_fit.extend(child_fit);

        if cfg.polish {
            let best = ranking(&next_fit)[0];
            let (w, risk, evals) = polish(objective, &next[best], next_fit[best], &PolishConfig::default())
                .map_err(|e| abort(&history, e))?;
            evaluations += evals;
            next[best] = w;
            next_fit[best] = risk;
        }
        pop = next;
        fitness = next_fit;
        history.push(stats(generation, &fitness, evaluations));
    }
    let best = ranking(&fitness)[0];
    Ok(GaResult {
        best_w: pop[best].clone(),
        best_risk: fitness[best],
        history,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PolishConfig {
    pub iterations: usize,
    /// Width (in currency units) of the softplus used to smooth the kinks.
    pub smoothing: f64,
    pub max_backtracks: usize,
}

impl Default for PolishConfig {
    fn default() -> Self {
        Self {
            iterations: 25,
            smoothing: 1.0,
            max_backtracks: 40,
        }
    }
}

fn softplus(x: f64, s: f64) -> f64 {
    let z = x / s;
    if z > 35.0 {
        x
    } else if z < -35.0 {
        s * z.exp()
    } else {
        s * z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smoothed recovery `L - sp(L - sp(u - Att))` and its derivative in `u`.
fn smooth_pay(u: f64, terms: &BondTerms, s: f64) -> (f64, f64) {
    let inner = softplus(u - terms.attachment, s);
    let value = terms.limit - softplus(terms.limit - inner, s);
    let slope = sigmoid((terms.limit - inner) / s) * sigmoid((u - terms.attachment) / s);
    (value, slope)
}

/// Mean squared error of the smoothed recovery, and its gradient.
pub fn smoothed_objective(table: &EventLossTable, terms: &BondTerms, w: &[f64], s: f64) -> (f64, Vec<f64>) {
    let n = table.n() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; table.m];
    for i in 0..table.n() {
        let row = table.row(i);
        let (r, slope) = smooth_pay(dot(w, row), terms, s);
        let resid = r - terms.pay(table.cl[i]);
        value += resid * resid;
        let coeff = 2.0 * resid * slope / n;
        for (g, x) in grad.iter_mut().zip(row) {
            *g += coeff * x;
        }
    }
    (value / n, grad)
}

/// Projected descent on the smoothed objective, accepting a step only if
/// the exact objective improves. Returns the point, its objective value
/// and the number of exact evaluations spent.
pub fn polish(
    objective: &Objective,
    start: &[f64],
    start_value: f64,
    cfg: &PolishConfig,
) -> Result<(Vec<f64>, f64, usize), WorkloadError> {
    let mut w = start.to_vec();
    let mut value = start_value;
    let mut evaluations = 0;
    let mut step = 1e-4;
    for _ in 0..cfg.iterations {
        let (_, grad) = smoothed_objective(&objective.table, &objective.terms, &w, cfg.smoothing);
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let mut accepted = false;
        for _ in 0..cfg.max_backtracks {
            let cand: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| clip01(x - step * g)).collect();
            let v = objective.value(&cand)?;
            evaluations += 1;
            if v < value {
                w = cand;
                value = v;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((w, value, evaluations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::catopt::{planted_table, PLANTED_TERMS};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn permutation(len: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    fn planted(m: usize, n: usize, seed: u64) -> (Objective, Vec<f64>) {
        let (table, w) = planted_table(m, n, seed);
        (Objective::new(table, PLANTED_TERMS), w)
    }

    /// Evaluates in a scrambled order to mimic out-of-order workers.
    struct Scrambled(Objective, u64);

    impl FitnessEvaluator for Scrambled {
        fn evaluate(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>, WorkloadError> {
            self.1 += 1;
            let mut out = vec![0.0; batch.len()];
            for i in permutation(batch.len(), self.1) {
                out[i] = self.0.value(&batch[i])?;
            }
            Ok(out)
        }
    }

    #[test]
    fn config_validation() {
        assert!(GaConfig::default().validate().is_ok());
        let large = GaConfig::large_scale();
        assert_eq!((large.population, large.generations), (200, 50));
        for bad in [
            GaConfig { population: 1, elitism: 0, ..Default::default() },
            GaConfig { generations: 0, ..Default::default() },
            GaConfig { elitism: 50, ..Default::default() },
            GaConfig { mutation_sigma: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn one_generation_with_elitism_never_worsens() {
        let (obj, _) = planted(5, 40, 2);
        let cfg = GaConfig { generations: 1, elitism: 1, polish: false, population: 10, ..Default::default() };
        let r = optimize(&obj, &cfg, &mut obj.clone()).unwrap();
        assert_eq!(r.history.len(), 2);
        assert!(r.best_risk <= r.history[0].best_risk);
    }

    #[test]
    fn evaluation_order_does_not_change_the_outcome() {
        let (obj, _) = planted(6, 50, 4);
        let cfg = GaConfig { generations: 15, population: 20, ..Default::default() };
        let a = optimize(&obj, &cfg, &mut obj.clone()).unwrap();
        let b = optimize(&obj, &cfg, &mut Scrambled(obj.clone(), 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn penalty_hook_steers_the_search() {
        let (obj, _) = planted(4, 60, 9);
        let pen = obj.clone().with_penalty(Arc::new(|w: &[f64]| 1e3 * w[0]));
        let cfg = GaConfig { generations: 30, population: 20, ..Default::default() };
        let r = optimize(&pen, &cfg, &mut pen.clone()).unwrap();
        assert!(r.best_w[0] < 0.05, "{:?}", r.best_w);
    }

    #[test]
    fn evaluator_failure_keeps_partial_history() {
        struct FailAfter(Objective, usize);
        impl FitnessEvaluator for FailAfter {
            fn evaluate(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>, WorkloadError> {
                if self.1 == 0 {
                    return Err(WorkloadError::Worker { rank: 2, message: "gone".into() });
                }
                self.1 -= 1;
                self.0.evaluate(batch)
            }
        }
        let (obj, _) = planted(3, 20, 1);
        let cfg = GaConfig { generations: 10, population: 8, ..Default::default() };
        let err = optimize(&obj, &cfg, &mut FailAfter(obj.clone(), 4)).unwrap_err();
        assert_eq!(err.history.len(), 4);
        assert!(matches!(err.error, WorkloadError::Worker { rank: 2, .. }));
    }

    #[test]
    fn planted_optimum_is_recovered() {
        let (obj, _) = planted(10, 200, 2024);
        let max_actual = obj.table.actual_recoveries(&obj.terms).into_iter().fold(0.0, f64::max);
        let r = optimize(&obj, &GaConfig::default(), &mut obj.clone()).unwrap();
        assert!(r.best_risk <= 0.01 * max_actual, "{} vs {}", r.best_risk, max_actual);
        assert_eq!(r.best_risk, basis_risk(&r.best_w, &obj.table, &obj.terms).unwrap());
    }

    #[test]
    fn codec_round_trips() {
        let w = vec![0.1, 1.0 / 3.0, 0.0, 1.0];
        assert_eq!(decode_weights(&encode_weights(&w)).unwrap(), w);
        assert!(decode_weights("0.1,x").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn best_risk_never_increases(seed in any::<u64>(), polish in any::<bool>()) {
            let (obj, _) = planted(4, 30, seed ^ 0x5eed);
            let cfg = GaConfig { generations: 12, population: 12, seed, polish, ..Default::default() };
            let r = optimize(&obj, &cfg, &mut obj.clone()).unwrap();
            for pair in r.history.windows(2) {
                prop_assert!(pair[1].best_risk <= pair[0].best_risk);
            }
        }

        #[test]
        fn gradient_matches_central_differences(seed in any::<u64>()) {
            let (table, _) = planted_table(5, 30, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..0.95)).collect();
            let s = 1.0;
            let (_, grad) = smoothed_objective(&table, &PLANTED_TERMS, &w, s);
            let h = 1e-6;
            for j in 0..5 {
                let mut up = w.clone();
                let mut down = w.clone();
                up[j] += h;
                down[j] -= h;
                let fd = (smoothed_objective(&table, &PLANTED_TERMS, &up, s).0
                    - smoothed_objective(&table, &PLANTED_TERMS, &down, s).0) / (2.0 * h);
                let scale = grad[j].abs().max(fd.abs()).max(1e-8);
                prop_assert!((grad[j] - fd).abs() <= 1e-4 * scale, "j={} analytic={} fd={}", j, grad[j], fd);
            }
        }
    }
}
