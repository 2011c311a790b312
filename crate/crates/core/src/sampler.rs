//! Low-resource subset selection: uniform, hard (small teacher margin) and
//! biased (agreement with a rotated probe).

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{dot, sign, LabeledDataset, Strategy, SubsetSelection};
use crate::error::{Error, Result};
use crate::perceptron::{rotate_from, Perceptron};
use crate::rng::{stream_rng, Stream};

/// How hard-margin selection picks among candidate rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HardMode {
    /// The `P` rows with the smallest teacher margin.
    Smallest,
    /// `P` rows drawn uniformly from those whose teacher margin lies in
    /// `[lo, lo + width]`.
    Band { lo: f64, width: f64 },
}

impl Default for HardMode {
    fn default() -> Self {
        HardMode::Smallest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    HardMargin { mode: HardMode },
    Biased { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub strategy: SamplingStrategy,
    #[serde(rename = "P")]
    pub p: usize,
    pub seed: u64,
    /// Equal counts per label for hard and biased selection.
    pub balanced: bool,
}

/// Dispatches on the sampling strategy.
pub fn sample(ds: &LabeledDataset, teacher: &Perceptron, spec: &SamplingSpec) -> Result<SubsetSelection> {
    match spec.strategy {
        SamplingStrategy::Random => sample_random(ds, spec.p, spec.seed),
        SamplingStrategy::HardMargin { mode } => {
            sample_hard_margin(ds, teacher, spec.p, mode, spec.balanced, spec.seed)
        }
        SamplingStrategy::Biased { theta } => sample_biased(ds, teacher, theta, spec.p, spec.seed, spec.balanced),
    }
}

fn check_size(p: usize, n: usize) -> Result<()> {
    if p > n {
        return Err(Error::NotEnoughSamples {
            requested: p,
            available: n,
        });
    }
    Ok(())
}

/// `P` distinct rows uniformly without replacement.
pub fn sample_random(ds: &LabeledDataset, p: usize, seed: u64) -> Result<SubsetSelection> {
    check_size(p, ds.len())?;
    let mut rng = stream_rng(seed, Stream::Sampling);
    let indices = index::sample(&mut rng, ds.len(), p).into_vec();
    SubsetSelection::new(Strategy::Random, seed, None, indices)
}

/// Splits `p` over the labels present in `groups`. Each label gets `p / C`;
/// the remainder goes one each to the lowest labels.
pub(crate) fn per_label_quota(p: usize, groups: &BTreeMap<i8, Vec<usize>>) -> Result<Vec<(i8, usize)>> {
    let c = groups.len().max(1);
    let base = p / c;
    let extra = p % c;
    groups
        .iter()
        .enumerate()
        .map(|(pos, (&label, members))| {
            let want = base + usize::from(pos < extra);
            if members.len() < want {
                return Err(Error::NotEnoughSamples {
                    requested: want,
                    available: members.len(),
                });
            }
            Ok((label, want))
        })
        .collect()
}

/// Rows with the smallest teacher margin `m_i = y_i T·x_i`, ties broken by
/// ascending index. With `balanced`, each label contributes its own smallest
/// margins. The returned order is by ascending margin.
pub fn sample_hard_margin(
    ds: &LabeledDataset,
    teacher: &Perceptron,
    p: usize,
    mode: HardMode,
    balanced: bool,
    seed: u64,
) -> Result<SubsetSelection> {
    check_size(p, ds.len())?;
    let margins = ds.teacher_margins(teacher)?;
    let by_margin = |a: &usize, b: &usize| margins[*a].total_cmp(&margins[*b]).then(a.cmp(b));

    let candidates: Vec<usize> = match mode {
        HardMode::Smallest => (0..ds.len()).collect(),
        HardMode::Band { lo, width } => {
            if !(width >= 0.0) || !lo.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bad margin band [{lo}, {lo} + {width}]"
                )));
            }
            (0..ds.len())
                .filter(|&i| margins[i] >= lo && margins[i] <= lo + width)
                .collect()
        }
    };

    let groups: BTreeMap<i8, Vec<usize>> = if balanced {
        let mut g: BTreeMap<i8, Vec<usize>> = ds.indices_by_label().keys().map(|&l| (l, Vec::new())).collect();
        for &i in &candidates {
            g.entry(ds.label(i)).or_default().push(i);
        }
        g
    } else {
        BTreeMap::from([(0, candidates)])
    };

    let quota = per_label_quota(p, &groups)?;
    let mut rng = stream_rng(seed, Stream::Sampling);
    let mut chosen = Vec::with_capacity(p);
    for (label, want) in quota {
        let members = &groups[&label];
        match mode {
            HardMode::Smallest => {
                let mut sorted = members.clone();
                sorted.sort_by(by_margin);
                chosen.extend_from_slice(&sorted[..want]);
            }
            HardMode::Band { .. } => {
                chosen.extend(
                    index::sample(&mut rng, members.len(), want)
                        .into_iter()
                        .map(|k| members[k]),
                );
            }
        }
    }
    chosen.sort_by(by_margin);
    SubsetSelection::new(Strategy::HardMargin, seed, None, chosen)
}

/// Rows on which a probe at angle `theta` from the teacher agrees with the
/// label (and the label agrees with the teacher), sampled uniformly.
///
/// The probe is `rotate_from(teacher, theta, seed)`; the draw uses the same
/// sampling stream as [`sample_random`], so `theta = 0` without balancing
/// returns exactly the random selection for the same seed.
pub fn sample_biased(
    ds: &LabeledDataset,
    teacher: &Perceptron,
    theta: f64,
    p: usize,
    seed: u64,
    balanced: bool,
) -> Result<SubsetSelection> {
    if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta {theta} outside [0, pi/2]")));
    }
    let probe = bias_probe(teacher, theta, seed)?;
    let eligible = eligible_rows(ds, teacher, &probe)?;
    if eligible.len() < p {
        return Err(Error::NotEnoughEligible {
            requested: p,
            eligible: eligible.len(),
        });
    }
    let mut rng = stream_rng(seed, Stream::Sampling);
    let indices = if balanced {
        let mut groups: BTreeMap<i8, Vec<usize>> = ds.indices_by_label().keys().map(|&l| (l, Vec::new())).collect();
        for &i in &eligible {
            groups.entry(ds.label(i)).or_default().push(i);
        }
        let quota = per_label_quota(p, &groups).map_err(|_| Error::NotEnoughEligible {
            requested: p,
            eligible: eligible.len(),
        })?;
        let mut out = Vec::with_capacity(p);
        for (label, want) in quota {
            let members = &groups[&label];
            out.extend(
                index::sample(&mut rng, members.len(), want)
                    .into_iter()
                    .map(|k| members[k]),
            );
        }
        out
    } else {
        index::sample(&mut rng, eligible.len(), p)
            .into_iter()
            .map(|k| eligible[k])
            .collect()
    };
    SubsetSelection::new(Strategy::Biased, seed, Some(theta), indices)
}

/// The spurious classifier used by [`sample_biased`] for this seed.
pub fn bias_probe(teacher: &Perceptron, theta: f64, seed: u64) -> Result<Perceptron> {
    rotate_from(teacher, theta, seed)
}

/// Rows satisfying both `y = sign(J_bias·x)` and `y = sign(T·x)`.
pub fn eligible_rows(ds: &LabeledDataset, teacher: &Perceptron, probe: &Perceptron) -> Result<Vec<usize>> {
    teacher.check_dim(ds.d())?;
    probe.check_dim(ds.d())?;
    Ok(ds
        .rows()
        .zip(ds.labels())
        .enumerate()
        .filter(|(_, (x, &y))| sign(dot(probe.weights(), x)) == y && sign(dot(teacher.weights(), x)) == y)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_teacher_dataset;
    use std::collections::BTreeSet;

    fn setup(d: usize, n: usize, seed: u64) -> (Perceptron, LabeledDataset) {
        let t = Perceptron::random(d, seed).unwrap();
        let ds = generate_teacher_dataset(d, n, &t, seed).unwrap();
        (t, ds)
    }

    #[test]
    fn random_exhaustive_is_a_permutation() {
        let (_, ds) = setup(3, 30, 1);
        let sel = sample_random(&ds, 30, 4).unwrap();
        let set: BTreeSet<usize> = sel.indices.iter().copied().collect();
        assert_eq!(set.len(), 30);
        assert_ne!(sel.indices, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn random_is_seeded() {
        let (_, ds) = setup(3, 1000, 1);
        assert_eq!(sample_random(&ds, 1, 5).unwrap(), sample_random(&ds, 1, 5).unwrap());
        let distinct: BTreeSet<usize> = (0..20).map(|s| sample_random(&ds, 1, s).unwrap().indices[0]).collect();
        assert!(distinct.len() > 1);
        assert!(matches!(
            sample_random(&ds, 1001, 0),
            Err(Error::NotEnoughSamples { .. })
        ));
    }

    #[test]
    fn random_single_draw_frequencies() {
        let (_, ds) = setup(2, 10, 3);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for s in 0..draws {
            counts[sample_random(&ds, 1, s).unwrap().indices[0]] += 1;
        }
        let expected = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 5.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn hard_margin_picks_boundary_point_first() {
        let t = Perceptron::new(vec![1.0, 0.0]).unwrap();
        let ds = LabeledDataset::new(2, vec![3.0, 0.5, 0.01, 2.0, -4.0, 1.0, 2.5, -1.0], vec![1, 1, -1, 1]).unwrap();
        let sel = sample_hard_margin(&ds, &t, 1, HardMode::Smallest, false, 0).unwrap();
        assert_eq!(sel.indices, vec![1]);
        let all = sample_hard_margin(&ds, &t, 4, HardMode::Smallest, false, 0).unwrap();
        assert_eq!(all.indices, vec![1, 3, 0, 2]);
    }

    #[test]
    fn hard_margin_ties_by_index() {
        let t = Perceptron::new(vec![1.0]).unwrap();
        let ds = LabeledDataset::new(1, vec![1.0, 2.0, 1.0, -1.0], vec![1, 1, 1, -1]).unwrap();
        let sel = sample_hard_margin(&ds, &t, 3, HardMode::Smallest, false, 0).unwrap();
        assert_eq!(sel.indices, vec![0, 2, 3]);
    }

    #[test]
    fn hard_margin_separates_selected_from_rest() {
        let (t, ds) = setup(10, 500, 7);
        let margins = ds.teacher_margins(&t).unwrap();
        for balanced in [false, true] {
            let sel = sample_hard_margin(&ds, &t, 60, HardMode::Smallest, balanced, 0).unwrap();
            let chosen: BTreeSet<usize> = sel.indices.iter().copied().collect();
            if balanced {
                for (label, members) in ds.indices_by_label() {
                    let max_in = members
                        .iter()
                        .filter(|i| chosen.contains(i))
                        .map(|&i| margins[i])
                        .fold(f64::MIN, f64::max);
                    let min_out = members
                        .iter()
                        .filter(|i| !chosen.contains(i))
                        .map(|&i| margins[i])
                        .fold(f64::MAX, f64::min);
                    assert!(max_in <= min_out, "label {label}");
                }
                assert!(sel.label_counts(&ds).values().all(|&c| c == 30));
            } else {
                let mut sorted: Vec<usize> = (0..ds.len()).collect();
                sorted.sort_by(|a, b| margins[*a].total_cmp(&margins[*b]).then(a.cmp(b)));
                let oracle: BTreeSet<usize> = sorted[..60].iter().copied().collect();
                assert_eq!(chosen, oracle);
            }
        }
    }

    #[test]
    fn hard_margin_is_permutation_equivariant() {
        let (t, ds) = setup(5, 80, 2);
        let perm: Vec<usize> = sample_random(&ds, 80, 99).unwrap().indices;
        let shuffled = crate::dataset::take_indices(&ds, &perm).unwrap();
        let a = sample_hard_margin(&ds, &t, 15, HardMode::Smallest, false, 0).unwrap();
        let b = sample_hard_margin(&shuffled, &t, 15, HardMode::Smallest, false, 0).unwrap();
        let mapped: Vec<usize> = b.indices.iter().map(|&i| perm[i]).collect();
        assert_eq!(a.indices, mapped);
    }

    #[test]
    fn hard_margin_band() {
        let (t, ds) = setup(4, 2000, 5);
        let margins = ds.teacher_margins(&t).unwrap();
        let sel = sample_hard_margin(&ds, &t, 20, HardMode::Band { lo: 0.5, width: 0.1 }, false, 3).unwrap();
        assert_eq!(sel.p, 20);
        assert!(sel.indices.iter().all(|&i| (0.5..=0.6).contains(&margins[i])));
        assert!(sample_hard_margin(&ds, &t, 1500, HardMode::Band { lo: 0.5, width: 0.1 }, false, 3).is_err());
    }

    #[test]
    fn biased_theta_zero_equals_random() {
        let (t, ds) = setup(6, 300, 4);
        for seed in 0..5 {
            let b = sample_biased(&ds, &t, 0.0, 40, seed, false).unwrap();
            let r = sample_random(&ds, 40, seed).unwrap();
            assert_eq!(b.indices, r.indices);
        }
    }

    #[test]
    fn biased_selection_satisfies_both_signs() {
        let (t, ds) = setup(8, 1000, 6);
        let theta = 1.0;
        let sel = sample_biased(&ds, &t, theta, 100, 11, true).unwrap();
        let probe = bias_probe(&t, theta, 11).unwrap();
        for &i in &sel.indices {
            assert_eq!(probe.predict(ds.row(i)), ds.label(i));
            assert_eq!(t.predict(ds.row(i)), ds.label(i));
        }
        assert!(sel.label_counts(&ds).values().all(|&c| c == 50));
        assert_eq!(sel.theta, Some(theta));
    }

    #[test]
    fn orthogonal_probe_keeps_half() {
        let (t, ds) = setup(10, 100_000, 8);
        let probe = bias_probe(&t, std::f64::consts::FRAC_PI_2, 1).unwrap();
        let frac = eligible_rows(&ds, &t, &probe).unwrap().len() as f64 / ds.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn biased_reports_eligible_count() {
        let (t, ds) = setup(4, 100, 9);
        match sample_biased(&ds, &t, std::f64::consts::FRAC_PI_2, 90, 0, false) {
            Err(Error::NotEnoughEligible {
                requested: 90,
                eligible,
            }) => assert!(eligible < 90),
            other => panic!("unexpected {other:?}"),
        }
        assert!(sample_biased(&ds, &t, 2.0, 10, 0, false).is_err());
    }

    #[test]
    fn quota_distributes_remainder_to_low_labels() {
        let groups = BTreeMap::from([(-1i8, vec![0, 1, 2]), (1i8, vec![3, 4, 5])]);
        assert_eq!(per_label_quota(5, &groups).unwrap(), vec![(-1, 3), (1, 2)]);
        assert!(per_label_quota(7, &groups).is_err());
    }
}
