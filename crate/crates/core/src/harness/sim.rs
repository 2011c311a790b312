//! Teacher-student simulation sweep over (setting, angle, α, seed) cells.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Setting};
use crate::dataset::{generate_teacher_dataset, take_subset};
use crate::error::{Error, Result};
use crate::perceptron::{analytic_error, train_max_margin, Perceptron};
use crate::rng::derive_seed;
use crate::sampler::{sample_biased, sample_hard_margin, sample_random};

const TAG_TEACHER: u64 = 0x7465_6163;
const TAG_SAMPLE: u64 = 0x7361_6d70;

/// One trained student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub setting: Setting,
    /// Bias angle in degrees, empty for unbiased settings.
    pub theta_deg: Option<f64>,
    pub alpha: f64,
    pub seed: u64,
    #[serde(rename = "P")]
    pub p: usize,
    pub epsilon_g: f64,
    pub achieved_margin: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// A cell that raised an error; the sweep continues without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub setting: Setting,
    pub theta_deg: Option<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rows: Vec<SimRow>,
    pub failures: Vec<CellFailure>,
    pub version: String,
    pub rng: String,
}

pub const RNG_ID: &str = "ChaCha8 (rand_chacha), splitmix64 seed derivation";

/// `P = round(α·d)`.
pub fn subset_size(alpha: f64, d: usize) -> usize {
    (alpha * d as f64).round() as usize
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    setting: Setting,
    theta_deg: Option<f64>,
    alpha: f64,
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for setting in cfg.effective_settings() {
        let thetas: Vec<Option<f64>> = match setting {
            Setting::Biased => cfg.thetas_deg.iter().map(|&t| Some(t)).collect(),
            _ => vec![None],
        };
        for theta_deg in thetas {
            for &alpha in &cfg.alphas {
                out.push(Cell {
                    setting,
                    theta_deg,
                    alpha,
                });
            }
        }
    }
    out
}

/// The teacher used for a simulation seed.
pub fn teacher_for_seed(d: usize, seed: u64) -> Result<Perceptron> {
    Perceptron::random(d, derive_seed(seed, &[TAG_TEACHER]))
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    cells: &[Cell],
) -> Result<Vec<std::result::Result<SimRow, CellFailure>>> {
    let teacher = teacher_for_seed(cfg.d, seed)?;
    let pool = generate_teacher_dataset(cfg.d, cfg.pool_size(), &teacher, seed)?;
    let mm = cfg.max_margin.to_config();
    Ok(cells
        .iter()
        .map(|c| {
            let p = subset_size(c.alpha, cfg.d);
            // Random and biased draws share this seed, so an unbalanced
            // biased cell at angle 0 reproduces the random cell.
            let sample_seed = derive_seed(seed, &[TAG_SAMPLE, c.alpha.to_bits()]);
            let run = || -> Result<SimRow> {
                let sel = match c.setting {
                    Setting::Random => sample_random(&pool, p, sample_seed)?,
                    Setting::Hard => sample_hard_margin(&pool, &teacher, p, cfg.hard_mode, cfg.balanced, sample_seed)?,
                    Setting::Biased => {
                        let theta = c.theta_deg.unwrap_or(0.0).to_radians();
                        sample_biased(&pool, &teacher, theta, p, sample_seed, cfg.balanced)?
                    }
                };
                let sub = take_subset(&pool, &sel)?;
                let report = train_max_margin(&sub, mm)?;
                Ok(SimRow {
                    setting: c.setting,
                    theta_deg: c.theta_deg,
                    alpha: c.alpha,
                    seed,
                    p,
                    epsilon_g: analytic_error(&report.student, &teacher)?,
                    achieved_margin: report.achieved_margin,
                    converged: report.converged,
                    iterations: report.iterations,
                })
            };
            run().map_err(|e| {
                log::warn!(
                    "cell {} theta={:?} alpha={} seed={} failed: {e}",
                    c.setting.as_str(),
                    c.theta_deg,
                    c.alpha,
                    seed
                );
                CellFailure {
                    setting: c.setting,
                    theta_deg: c.theta_deg,
                    alpha: c.alpha,
                    seed,
                    error: e.to_string(),
                }
            })
        })
        .collect())
}

fn sort_key(setting: Setting, theta: Option<f64>, alpha: f64, seed: u64) -> (Setting, u64, u64, u64) {
    // Non-negative floats order like their bit patterns.
    (setting, theta.map_or(0, f64::to_bits), alpha.to_bits(), seed)
}

/// Runs every configured cell. Each seed draws its teacher and pool once and
/// reuses them for all settings and α. Rows come back sorted by
/// (setting, angle, α, seed) whatever the worker count.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cells = cells(cfg);
    let seeds: Vec<u64> = cfg.seeds.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let work = || -> Vec<Result<Vec<_>>> { seeds.par_iter().map(|&s| run_seed(cfg, s, &cells)).collect() };
    let per_seed = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(work),
        None => work(),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in seeds.iter().zip(per_seed) {
        match outcome {
            Ok(cells) => {
                for c in cells {
                    match c {
                        Ok(r) => rows.push(r),
                        Err(f) => failures.push(f),
                    }
                }
            }
            Err(e) => {
                // Teacher or pool generation failed: every cell of the seed is lost.
                log::warn!("seed {seed} failed: {e}");
                for c in &cells {
                    failures.push(CellFailure {
                        setting: c.setting,
                        theta_deg: c.theta_deg,
                        alpha: c.alpha,
                        seed: *seed,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    rows.sort_by_key(|r| sort_key(r.setting, r.theta_deg, r.alpha, r.seed));
    failures.sort_by_key(|f| sort_key(f.setting, f.theta_deg, f.alpha, f.seed));
    Ok(ExperimentResult {
        config: cfg.clone(),
        rows,
        failures,
        version: crate::VERSION.to_string(),
        rng: RNG_ID.to_string(),
    })
}

pub fn write_rows_csv<W: std::io::Write>(rows: &[SimRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_rows_csv<R: std::io::Read>(reader: R) -> Result<Vec<SimRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            d: 10,
            alphas: vec![0.5, 2.0],
            seeds: vec![3, 1],
            settings: vec![Setting::Random, Setting::Hard, Setting::Biased],
            thetas_deg: vec![0.0, 45.0],
            workers: Some(1),
            ..Default::default()
        }
    }

    #[test]
    fn covers_every_cell_in_sorted_order() {
        let res = run_simulation(&small()).unwrap();
        assert!(res.failures.is_empty(), "{:?}", res.failures);
        // random 2 + hard 2 + biased 2x2, for 2 seeds
        assert_eq!(res.rows.len(), 16);
        let keys: Vec<_> = res
            .rows
            .iter()
            .map(|r| sort_key(r.setting, r.theta_deg, r.alpha, r.seed))
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(res.rows[0].seed, 1);
        assert!(res.rows.iter().all(|r| r.p == subset_size(r.alpha, 10)));
    }

    #[test]
    fn biased_at_zero_matches_random() {
        let res = run_simulation(&small()).unwrap();
        let pick = |s: Setting, t: Option<f64>| -> Vec<f64> {
            res.rows
                .iter()
                .filter(|r| r.setting == s && r.theta_deg == t)
                .map(|r| r.epsilon_g)
                .collect()
        };
        assert_eq!(pick(Setting::Random, None), pick(Setting::Biased, Some(0.0)));
    }

    #[test]
    fn worker_count_does_not_change_rows() {
        let a = run_simulation(&small()).unwrap();
        let mut cfg = small();
        cfg.workers = Some(3);
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let mut cfg = small();
        cfg.n = Some(12);
        cfg.alphas = vec![2.0];
        cfg.settings = vec![Setting::Random];
        let res = run_simulation(&cfg).unwrap();
        assert!(res.rows.is_empty());
        assert_eq!(res.failures.len(), 2);
        assert!(res.failures[0].error.contains("samples"));
    }

    #[test]
    fn csv_round_trip() {
        let res = run_simulation(&small()).unwrap();
        let mut buf = Vec::new();
        write_rows_csv(&res.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("setting,theta_deg,alpha,seed,P,epsilon_g,achieved_margin,converged,iterations"));
        assert_eq!(read_rows_csv(&buf[..]).unwrap(), res.rows);
    }
}
