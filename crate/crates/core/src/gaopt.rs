//! Genetic search over the temporal filter size and the feature mask.
//!
//! A chromosome is 14 filter bits followed by the 21 mask bits. Each
//! candidate is scored by training a depth-capped tree on the training rows
//! and measuring F1 on the validation rows, minus a per-feature charge.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{assemble, Column, FeatureMask, N_FEATURES};
use crate::ingest::CanFrame;
use crate::matrix::Matrix;
use crate::ml::metrics::f1_score;
use crate::ml::tree::{train_dt, TreeParams};
use crate::spatial::SpatialFeatures;
use crate::temporal::{temporal_features_for_ids, TemporalFeatures};

pub const FILTER_BITS: usize = 14;
pub const FILTER_MIN: usize = 500;
pub const FILTER_MAX: usize = FILTER_MIN + (1 << FILTER_BITS) - 1;
pub const GENOME_LEN: usize = FILTER_BITS + N_FEATURES;
pub const FEATURE_PENALTY: f64 = 0.001;

/// Filter size encoded by big-endian `bits`, offset by [`FILTER_MIN`].
pub fn decode_filter(bits: &[bool; FILTER_BITS]) -> usize {
    FILTER_MIN + bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

/// Inverse of [`decode_filter`]; `None` outside `FILTER_MIN..=FILTER_MAX`.
pub fn encode_filter(size: usize) -> Option<[bool; FILTER_BITS]> {
    if !(FILTER_MIN..=FILTER_MAX).contains(&size) {
        return None;
    }
    let v = size - FILTER_MIN;
    let mut bits = [false; FILTER_BITS];
    for (i, b) in bits.iter_mut().enumerate() {
        *b = (v >> (FILTER_BITS - 1 - i)) & 1 == 1;
    }
    Some(bits)
}

/// Validation F1 minus a fixed charge per selected feature.
pub fn fitness(f1: f64, n_selected: usize) -> f64 {
    f1 - FEATURE_PENALTY * n_selected as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    pub filter_bits: [bool; FILTER_BITS],
    pub mask: FeatureMask,
    pub fitness: Option<f64>,
}

impl Chromosome {
    pub fn new(filter_size: usize, mask: FeatureMask) -> Result<Self> {
        let filter_bits = encode_filter(filter_size).ok_or_else(|| {
            Error::config(format!("filter size {filter_size} outside {FILTER_MIN}..={FILTER_MAX}"))
        })?;
        Ok(Chromosome { filter_bits, mask, fitness: None })
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut genes = [false; GENOME_LEN];
        for g in genes.iter_mut() {
            *g = rng.gen();
        }
        Self::from_genes(&genes)
    }

    pub fn filter_size(&self) -> usize {
        decode_filter(&self.filter_bits)
    }

    pub fn genes(&self) -> [bool; GENOME_LEN] {
        let mut g = [false; GENOME_LEN];
        g[..FILTER_BITS].copy_from_slice(&self.filter_bits);
        g[FILTER_BITS..].copy_from_slice(&self.mask.0);
        g
    }

    pub fn from_genes(genes: &[bool; GENOME_LEN]) -> Self {
        let mut filter_bits = [false; FILTER_BITS];
        let mut mask = [false; N_FEATURES];
        filter_bits.copy_from_slice(&genes[..FILTER_BITS]);
        mask.copy_from_slice(&genes[FILTER_BITS..]);
        Chromosome { filter_bits, mask: FeatureMask(mask), fitness: None }
    }

    fn score(&self) -> f64 {
        self.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elite_fraction: f64,
    pub tournament_fraction: f64,
    pub random_fraction: f64,
    pub tournament_size: usize,
    /// Stop once the best fitness has not improved for this many generations.
    pub stagnation_limit: usize,
    pub seed: u64,
    pub tree: TreeParams,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 25,
            generations: 5,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            elite_fraction: 0.20,
            tournament_fraction: 0.80,
            random_fraction: 0.20,
            tournament_size: 3,
            stagnation_limit: 2,
            seed: 0,
            tree: TreeParams { max_depth: Some(12), ..TreeParams::default() },
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
            ("elite_fraction", self.elite_fraction),
            ("tournament_fraction", self.tournament_fraction),
            ("random_fraction", self.random_fraction),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if (self.tournament_fraction + self.random_fraction - 1.0).abs() > 1e-9 {
            return Err(Error::config("tournament_fraction + random_fraction must equal 1"));
        }
        if self.population < 2 {
            return Err(Error::config("population must be at least 2"));
        }
        if self.generations == 0 {
            return Err(Error::config("generations must be at least 1"));
        }
        if self.tournament_size == 0 {
            return Err(Error::config("tournament_size must be at least 1"));
        }
        if self.stagnation_limit == 0 {
            return Err(Error::config("stagnation_limit must be at least 1"));
        }
        Ok(())
    }

    pub fn n_elite(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).round() as usize).min(self.population)
    }
}

impl fmt::Display for GaConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "population size {}, generations {}, crossover rate {}, mutation rate {}, elite {}%, tournament size {}, seed {}",
            self.population,
            self.generations,
            self.crossover_rate,
            self.mutation_rate,
            self.elite_fraction * 100.0,
            self.tournament_size,
            self.seed
        )
    }
}

/// Everything a candidate needs to be scored: the fused matrix minus its
/// temporal columns, labels, the train/validation rows, and a cache of
/// temporal features keyed by filter size.
pub struct EvalContext {
    base: Matrix,
    ids: Vec<u32>,
    labels: Vec<bool>,
    train: Vec<usize>,
    val: Vec<usize>,
    tree: TreeParams,
    cache: Mutex<HashMap<usize, Arc<Vec<TemporalFeatures>>>>,
}

impl EvalContext {
    pub fn new(
        frames: &[CanFrame],
        spatial: &[SpatialFeatures],
        train: Vec<usize>,
        val: Vec<usize>,
        tree: TreeParams,
    ) -> Result<Self> {
        let placeholder = vec![[0.0; 2]; frames.len()];
        let fused = assemble(frames, spatial, &placeholder)?;
        let n = frames.len();
        if train.is_empty() || val.is_empty() {
            return Err(Error::config("search needs non-empty training and validation rows"));
        }
        if let Some(&bad) = train.iter().chain(&val).find(|&&i| i >= n) {
            return Err(Error::Shape(format!("row index {bad} out of range for {n} frames")));
        }
        Ok(EvalContext {
            base: fused.values,
            ids: frames.iter().map(|f| f.can_id).collect(),
            labels: fused.labels,
            train,
            val,
            tree,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Temporal features for `filter_size`, computed once and shared.
    pub fn temporal(&self, filter_size: usize) -> Result<Arc<Vec<TemporalFeatures>>> {
        if let Some(t) = self.cache.lock().unwrap().get(&filter_size) {
            return Ok(Arc::clone(t));
        }
        let computed = Arc::new(temporal_features_for_ids(&self.ids, filter_size)?);
        let mut cache = self.cache.lock().unwrap();
        Ok(Arc::clone(cache.entry(filter_size).or_insert(computed)))
    }

    pub fn cached_sizes(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    fn gather(&self, rows: &[usize], cols: &[usize], temporal: &[TemporalFeatures]) -> Matrix {
        let se = Column::Se.index();
        let ratio = Column::Ratio.index();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let base = self.base.row(r);
            for &c in cols {
                data.push(if c == se {
                    temporal[r][0]
                } else if c == ratio {
                    temporal[r][1]
                } else {
                    base[c]
                });
            }
        }
        Matrix::from_vec(cols.len(), data).expect("gathered shape")
    }

    /// Validation F1 of a tree trained on the masked training rows.
    pub fn validation_f1(&self, filter_size: usize, mask: &FeatureMask) -> Result<f64> {
        let cols = mask.indices();
        let temporal = self.temporal(filter_size)?;
        let x_train = self.gather(&self.train, &cols, &temporal);
        let y_train: Vec<bool> = self.train.iter().map(|&i| self.labels[i]).collect();
        let tree = train_dt(&x_train, &y_train, &self.tree)?;
        let x_val = self.gather(&self.val, &cols, &temporal);
        let y_val: Vec<bool> = self.val.iter().map(|&i| self.labels[i]).collect();
        Ok(f1_score(&y_val, &tree.predict(&x_val)?))
    }

    /// Fitness of `c`; an empty mask scores negative infinity.
    pub fn evaluate_individual(&self, c: &Chromosome) -> Result<f64> {
        if c.mask.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let f1 = self.validation_f1(c.filter_size(), &c.mask)?;
        Ok(fitness(f1, c.mask.count()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    /// Mean over individuals with a finite fitness.
    pub mean_fitness: f64,
    pub best_filter_size: usize,
    pub best_n_features: usize,
}

impl fmt::Display for GenerationStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gen {} best {:.4} mean {:.4} filter {} features {}",
            self.generation, self.best_fitness, self.mean_fitness, self.best_filter_size, self.best_n_features
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaResult {
    pub best: Chromosome,
    pub history: Vec<GenerationStats>,
    /// Evaluated population of every generation, ranked best first.
    pub generations: Vec<Vec<Chromosome>>,
}

impl GaResult {
    pub fn subspace(&self) -> Subspace {
        Subspace {
            filter_size: self.best.filter_size(),
            mask: self.best.mask,
            fitness: self.best.score(),
        }
    }
}

fn evaluate_population(pop: &mut [Chromosome], ctx: &EvalContext) -> Result<()> {
    let pending: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].fitness.is_none()).collect();
    let scores = pending
        .par_iter()
        .map(|&i| ctx.evaluate_individual(&pop[i]))
        .collect::<Result<Vec<f64>>>()?;
    for (i, s) in pending.into_iter().zip(scores) {
        pop[i].fitness = Some(s);
    }
    Ok(())
}

/// Index of the parent chosen from a population ranked best first.
fn select<R: Rng>(ranked: &[Chromosome], cfg: &GaConfig, rng: &mut R) -> usize {
    let n = ranked.len();
    if rng.gen_bool(cfg.tournament_fraction) {
        // Ranked order means the lowest drawn index is the fittest contender.
        (0..cfg.tournament_size).map(|_| rng.gen_range(0..n)).min().unwrap()
    } else {
        rng.gen_range(0..n)
    }
}

fn uniform_crossover<R: Rng>(a: &[bool; GENOME_LEN], b: &[bool; GENOME_LEN], rng: &mut R) -> ([bool; GENOME_LEN], [bool; GENOME_LEN]) {
    let (mut x, mut y) = (*a, *b);
    for i in 0..GENOME_LEN {
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut x[i], &mut y[i]);
        }
    }
    (x, y)
}

fn mutate<R: Rng>(genes: &mut [bool; GENOME_LEN], rate: f64, rng: &mut R) {
    for g in genes.iter_mut() {
        if rng.gen_bool(rate) {
            *g = !*g;
        }
    }
}

fn rank(pop: &mut [Chromosome]) {
    // Stable, so ties keep their previous order.
    pop.sort_by(|a, b| b.score().total_cmp(&a.score()));
}

fn stats(generation: usize, ranked: &[Chromosome]) -> GenerationStats {
    let finite: Vec<f64> = ranked.iter().map(Chromosome::score).filter(|s| s.is_finite()).collect();
    let mean = if finite.is_empty() {
        f64::NEG_INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    GenerationStats {
        generation,
        best_fitness: ranked[0].score(),
        mean_fitness: mean,
        best_filter_size: ranked[0].filter_size(),
        best_n_features: ranked[0].mask.count(),
    }
}

pub fn run(cfg: &GaConfig, ctx: &EvalContext) -> Result<GaResult> {
    run_with(cfg, ctx, |_| {})
}

/// Runs the search, calling `observer` after each generation is evaluated.
pub fn run_with<F: FnMut(&GenerationStats)>(cfg: &GaConfig, ctx: &EvalContext, mut observer: F) -> Result<GaResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop: Vec<Chromosome> = (0..cfg.population).map(|_| Chromosome::random(&mut rng)).collect();
    let n_elite = cfg.n_elite();
    let mut history = Vec::new();
    let mut generations = Vec::new();
    let mut best: Option<Chromosome> = None;
    let mut stagnant = 0;

    for gen in 0..cfg.generations {
        evaluate_population(&mut pop, ctx)?;
        rank(&mut pop);
        let s = stats(gen, &pop);
        observer(&s);
        history.push(s);
        generations.push(pop.clone());

        match &best {
            Some(b) if pop[0].score() <= b.score() => stagnant += 1,
            _ => {
                best = Some(pop[0].clone());
                stagnant = 0;
            }
        }
        if stagnant >= cfg.stagnation_limit || gen + 1 == cfg.generations {
            break;
        }

        let mut next: Vec<Chromosome> = pop[..n_elite].to_vec();
        while next.len() < cfg.population {
            let a = pop[select(&pop, cfg, &mut rng)].genes();
            let b = pop[select(&pop, cfg, &mut rng)].genes();
            let (mut x, mut y) = if rng.gen_bool(cfg.crossover_rate) {
                uniform_crossover(&a, &b, &mut rng)
            } else {
                (a, b)
            };
            mutate(&mut x, cfg.mutation_rate, &mut rng);
            mutate(&mut y, cfg.mutation_rate, &mut rng);
            next.push(Chromosome::from_genes(&x));
            if next.len() < cfg.population {
                next.push(Chromosome::from_genes(&y));
            }
        }
        // Offspring identical to an already scored individual reuse its fitness.
        let known: HashMap<[bool; GENOME_LEN], f64> = pop.iter().map(|c| (c.genes(), c.score())).collect();
        for c in next.iter_mut().skip(n_elite) {
            c.fitness = known.get(&c.genes()).copied();
        }
        pop = next;
    }

    Ok(GaResult {
        best: best.expect("at least one generation"),
        history,
        generations,
    })
}

/// The winning filter size and feature set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    pub filter_size: usize,
    pub mask: FeatureMask,
    pub fitness: f64,
}

impl Subspace {
    /// Three-column table: filter size, selected feature names, fitness.
    pub fn to_table(&self) -> String {
        format!(
            "Filter Size | Optimal Features | Fitness\n{} | {} | {:.4}\n",
            self.filter_size,
            self.mask.names(),
            self.fitness
        )
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let row = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .nth(1)
            .ok_or_else(|| Error::Format("subspace table has no data row".into()))?;
        let cells: Vec<&str> = row.split('|').map(str::trim).collect();
        let [size, names, fit] = cells[..] else {
            return Err(Error::Format(format!("expected 3 cells, got {}", cells.len())));
        };
        let filter_size = size
            .parse()
            .map_err(|_| Error::Format(format!("bad filter size {size:?}")))?;
        let fitness = fit.parse().map_err(|_| Error::Format(format!("bad fitness {fit:?}")))?;
        let mask = names.parse()?;
        Ok(Subspace { filter_size, mask, fitness })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_table(&text)
    }
}
