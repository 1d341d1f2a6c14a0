//! Surprising-event detection over a three-way contingency cube of
//! (event class, population, country) counts.
//!
//! The trailing history is fitted by iterative proportional fitting to the
//! maximum-entropy table that reproduces all three two-way margins. The fit is
//! rescaled to the current month's total and each current cell is compared to
//! its expectation with a Poisson z-score; cells above the threshold are
//! surprising and their events form the truncated ground truth.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GsrEvent, Vocabulary, YearMonth};
use crate::scoring::{match_month, ScoreReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 1000;
pub const DEFAULT_SIGMA_THRESHOLD: f64 = 5.0;
/// Lower bound on the variance used in the z-score denominator.
pub const VARIANCE_FLOOR: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurpriseError {
    #[error("event `{id}`: {axis} `{value}` is not on the cube axes")]
    UnknownCategory {
        id: String,
        axis: &'static str,
        value: String,
    },
    #[error("cube shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("fitted history is empty")]
    NoHistory,
    #[error("current month has no events")]
    EmptyCurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeAxes {
    pub event_classes: Vec<String>,
    pub populations: Vec<String>,
    pub countries: Vec<String>,
}

impl CubeAxes {
    pub fn from_vocabulary(v: &Vocabulary) -> Self {
        CubeAxes {
            event_classes: v.event_classes.clone(),
            populations: v.populations.clone(),
            countries: v.countries.clone(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [
            self.event_classes.len(),
            self.populations.len(),
            self.countries.len(),
        ]
    }
}

/// Flat row-major index into a cube of the given shape.
fn flat(shape: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * shape[1] + j) * shape[2] + k
}

fn unflat(shape: [usize; 3], idx: usize) -> (usize, usize, usize) {
    let k = idx % shape[2];
    let j = (idx / shape[2]) % shape[1];
    let i = idx / (shape[1] * shape[2]);
    (i, j, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountCube {
    pub axes: CubeAxes,
    counts: Vec<u64>,
    /// Ids of the events counted in each cell.
    members: Vec<Vec<String>>,
}

impl CountCube {
    pub fn zeros(axes: CubeAxes) -> Self {
        let n = axes.shape().iter().product();
        CountCube {
            axes,
            counts: vec![0; n],
            members: vec![Vec::new(); n],
        }
    }

    /// A cube built from raw counts, with no member ids.
    pub fn from_counts(axes: CubeAxes, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), axes.shape().iter().product::<usize>());
        let members = vec![Vec::new(); counts.len()];
        CountCube {
            axes,
            counts,
            members,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.axes.shape()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u64 {
        self.counts[flat(self.shape(), i, j, k)]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn members(&self, i: usize, j: usize, k: usize) -> &[String] {
        &self.members[flat(self.shape(), i, j, k)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn axis_index(list: &[String], value: &str) -> Option<usize> {
    let wanted = crate::domain::normalize_place_name(value);
    list.iter()
        .position(|c| crate::domain::normalize_place_name(c) == wanted)
}

pub fn build_cube(events: &[GsrEvent], axes: &CubeAxes) -> Result<CountCube, SurpriseError> {
    let mut cube = CountCube::zeros(axes.clone());
    let shape = cube.shape();
    for e in events {
        let unknown = |axis: &'static str, value: &str| SurpriseError::UnknownCategory {
            id: e.id.clone(),
            axis,
            value: value.to_string(),
        };
        let i = axis_index(&axes.event_classes, &e.event_type.class)
            .ok_or_else(|| unknown("event class", &e.event_type.class))?;
        let j = axis_index(&axes.populations, e.population.as_str())
            .ok_or_else(|| unknown("population", e.population.as_str()))?;
        let k = axis_index(&axes.countries, &e.location.country)
            .ok_or_else(|| unknown("country", &e.location.country))?;
        let idx = flat(shape, i, j, k);
        cube.counts[idx] += 1;
        cube.members[idx].push(e.id.clone());
    }
    Ok(cube)
}

/// One of the three two-way margins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Margin {
    /// Summed over countries.
    ClassPopulation,
    /// Summed over populations.
    ClassCountry,
    /// Summed over classes.
    PopulationCountry,
}

pub const STANDARD_ORDER: [Margin; 3] = [
    Margin::ClassPopulation,
    Margin::ClassCountry,
    Margin::PopulationCountry,
];

impl Margin {
    fn size(self, shape: [usize; 3]) -> usize {
        match self {
            Margin::ClassPopulation => shape[0] * shape[1],
            Margin::ClassCountry => shape[0] * shape[2],
            Margin::PopulationCountry => shape[1] * shape[2],
        }
    }

    fn slot(self, shape: [usize; 3], i: usize, j: usize, k: usize) -> usize {
        match self {
            Margin::ClassPopulation => i * shape[1] + j,
            Margin::ClassCountry => i * shape[2] + k,
            Margin::PopulationCountry => j * shape[2] + k,
        }
    }

    /// Margin sums of `values`.
    pub fn sums(self, shape: [usize; 3], values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size(shape)];
        for (idx, v) in values.iter().enumerate() {
            let (i, j, k) = unflat(shape, idx);
            out[self.slot(shape, i, j, k)] += v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCube {
    pub shape: [usize; 3],
    pub estimates: Vec<f64>,
    /// Sweeps that moved some cell by at least the tolerance.
    pub iterations_used: usize,
    pub converged: bool,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl FittedCube {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.estimates[flat(self.shape, i, j, k)]
    }

    pub fn total(&self) -> f64 {
        self.estimates.iter().sum()
    }
}

pub fn ipf_fit(cube: &CountCube, tolerance: f64, max_iterations: usize) -> FittedCube {
    ipf_fit_ordered(cube, tolerance, max_iterations, STANDARD_ORDER)
}

/// Iterative proportional fitting with the margin updates applied in `order` each sweep.
///
/// Cells under a zero source margin start (and stay) at zero; all others start
/// at one. Updates within a sweep are sequential, each using the margins of the
/// table as left by the previous update.
pub fn ipf_fit_ordered(
    cube: &CountCube,
    tolerance: f64,
    max_iterations: usize,
    order: [Margin; 3],
) -> FittedCube {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let shape = cube.shape();
    let source: Vec<f64> = cube.counts.iter().map(|&c| c as f64).collect();
    let targets: Vec<Vec<f64>> = order.iter().map(|m| m.sums(shape, &source)).collect();

    let mut fit: Vec<f64> = (0..source.len())
        .map(|idx| {
            let (i, j, k) = unflat(shape, idx);
            let pinned = order
                .iter()
                .zip(&targets)
                .any(|(m, t)| t[m.slot(shape, i, j, k)] == 0.0);
            if pinned {
                0.0
            } else {
                1.0
            }
        })
        .collect();

    let mut iterations_used = 0;
    let mut converged = false;
    for _ in 0..max_iterations {
        let before = fit.clone();
        for (margin, target) in order.iter().zip(&targets) {
            let current = margin.sums(shape, &fit);
            for (idx, m) in fit.iter_mut().enumerate() {
                let (i, j, k) = unflat(shape, idx);
                let slot = margin.slot(shape, i, j, k);
                if current[slot] > 0.0 {
                    *m *= target[slot] / current[slot];
                }
            }
        }
        let change = fit
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change < tolerance {
            converged = true;
            break;
        }
        iterations_used += 1;
    }

    FittedCube {
        shape,
        estimates: fit,
        iterations_used,
        converged,
        tolerance,
        max_iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurpriseCell {
    pub event_class: String,
    pub population: String,
    pub country: String,
    pub index: [usize; 3],
    pub observed: u64,
    pub expected: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurpriseResult {
    pub sigma_threshold: f64,
    pub scale: f64,
    pub shape: [usize; 3],
    /// Row-major over (class, population, country).
    pub z_scores: Vec<f64>,
    pub surprising_cells: Vec<SurpriseCell>,
    pub truncated_event_ids: BTreeSet<String>,
}

impl SurpriseResult {
    pub fn z(&self, i: usize, j: usize, k: usize) -> f64 {
        self.z_scores[flat(self.shape, i, j, k)]
    }

    pub fn is_surprising(&self, i: usize, j: usize, k: usize) -> bool {
        self.surprising_cells.iter().any(|c| c.index == [i, j, k])
    }
}

/// `(observed - expected) / sqrt(max(expected, VARIANCE_FLOOR))`.
pub fn poisson_z(observed: f64, expected: f64) -> f64 {
    (observed - expected) / expected.max(VARIANCE_FLOOR).sqrt()
}

pub fn detect_surprise(
    fit: &FittedCube,
    current: &CountCube,
    sigma_threshold: f64,
) -> Result<SurpriseResult, SurpriseError> {
    if fit.shape != current.shape() {
        return Err(SurpriseError::ShapeMismatch(fit.shape, current.shape()));
    }
    let fitted_total = fit.total();
    if fitted_total <= 0.0 {
        return Err(SurpriseError::NoHistory);
    }
    let observed_total = current.total();
    if observed_total == 0 {
        return Err(SurpriseError::EmptyCurrent);
    }
    let scale = observed_total as f64 / fitted_total;
    let shape = fit.shape;
    let mut z_scores = Vec::with_capacity(fit.estimates.len());
    let mut surprising_cells = Vec::new();
    let mut truncated_event_ids = BTreeSet::new();
    for (idx, m) in fit.estimates.iter().enumerate() {
        let expected = scale * m;
        let observed = current.counts[idx];
        let z = poisson_z(observed as f64, expected);
        z_scores.push(z);
        if z > sigma_threshold {
            let (i, j, k) = unflat(shape, idx);
            surprising_cells.push(SurpriseCell {
                event_class: current.axes.event_classes[i].clone(),
                population: current.axes.populations[j].clone(),
                country: current.axes.countries[k].clone(),
                index: [i, j, k],
                observed,
                expected,
                z_score: z,
            });
            truncated_event_ids.extend(current.members[idx].iter().cloned());
        }
    }
    Ok(SurpriseResult {
        sigma_threshold,
        scale,
        shape,
        z_scores,
        surprising_cells,
        truncated_event_ids,
    })
}

/// Scores `alerts` against only the events of `gsr_month` that fall in surprising cells.
pub fn evaluate_truncated(
    month: YearMonth,
    gsr_month: &[GsrEvent],
    result: &SurpriseResult,
    alerts: &[crate::domain::Alert],
) -> ScoreReport {
    let truncated: Vec<GsrEvent> = gsr_month
        .iter()
        .filter(|e| result.truncated_event_ids.contains(&e.id))
        .cloned()
        .collect();
    let mut report = match_month(month, alerts, &truncated);
    report.surprise_truncated = true;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::testkit::event;
    use proptest::prelude::*;

    fn axes(shape: [usize; 3]) -> CubeAxes {
        let names = |p: &str, n: usize| (0..n).map(|x| format!("{p}{x}")).collect();
        CubeAxes {
            event_classes: names("class", shape[0]),
            populations: names("pop", shape[1]),
            countries: names("country", shape[2]),
        }
    }

    fn cube(shape: [usize; 3], counts: Vec<u64>) -> CountCube {
        CountCube::from_counts(axes(shape), counts)
    }

    fn ev(id: &str, class: usize, pop: usize, country: usize) -> GsrEvent {
        let mut e = event(id, "2014-06-10", &format!("country{country}"), "", "");
        e.event_type.class = format!("class{class}");
        e.population = crate::domain::Population(format!("pop{pop}"));
        e
    }

    #[test]
    fn empty_events_give_zero_cube() {
        let c = build_cube(&[], &axes([2, 2, 2])).unwrap();
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn counts_events_per_cell() {
        let events = vec![ev("a", 1, 0, 1), ev("b", 1, 0, 1), ev("c", 1, 0, 1)];
        let c = build_cube(&events, &axes([2, 2, 2])).unwrap();
        assert_eq!(c.get(1, 0, 1), 3);
        assert_eq!(c.total(), 3);
        assert_eq!(c.members(1, 0, 1), ["a", "b", "c"]);
    }

    #[test]
    fn country_margin_matches_recount() {
        let events = vec![
            ev("a", 0, 0, 0),
            ev("b", 1, 1, 0),
            ev("c", 0, 1, 1),
            ev("d", 1, 0, 1),
            ev("e", 1, 1, 1),
        ];
        let c = build_cube(&events, &axes([2, 2, 2])).unwrap();
        let per_country: Vec<u64> = (0..2)
            .map(|k| {
                (0..2)
                    .flat_map(|i| (0..2).map(move |j| (i, j)))
                    .map(|(i, j)| c.get(i, j, k))
                    .sum()
            })
            .collect();
        let recount: Vec<u64> = (0..2)
            .map(|k| {
                events
                    .iter()
                    .filter(|e| e.location.country == format!("country{k}"))
                    .count() as u64
            })
            .collect();
        assert_eq!(per_country, recount);
        assert_eq!(recount, vec![2, 3]);
    }

    #[test]
    fn unknown_category_names_event() {
        let mut e = ev("odd", 0, 0, 0);
        e.location.country = "Atlantis".into();
        match build_cube(&[e], &axes([1, 1, 1])) {
            Err(SurpriseError::UnknownCategory { id, axis, .. }) => {
                assert_eq!(id, "odd");
                assert_eq!(axis, "country");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uniform_cube_fits_in_one_sweep() {
        let c = cube([2, 2, 2], vec![2; 8]);
        let fit = ipf_fit(&c, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS);
        assert!(fit.converged);
        assert_eq!(fit.iterations_used, 1);
        assert!(fit.estimates.iter().all(|&m| m == 2.0));
    }

    #[test]
    fn zero_margins_are_pinned() {
        // Class 1 never occurs in country 0.
        let mut counts = vec![3u64; 8];
        counts[flat([2, 2, 2], 1, 0, 0)] = 0;
        counts[flat([2, 2, 2], 1, 1, 0)] = 0;
        let fit = ipf_fit(
            &cube([2, 2, 2], counts),
            DEFAULT_TOLERANCE,
            DEFAULT_MAX_ITERATIONS,
        );
        assert_eq!(fit.get(1, 0, 0), 0.0);
        assert_eq!(fit.get(1, 1, 0), 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn reports_non_convergence() {
        let c = cube([2, 2, 2], vec![5, 1, 1, 1, 1, 1, 1, 5]);
        let fit = ipf_fit(&c, 1e-15, 2);
        assert!(!fit.converged);
        assert_eq!(fit.iterations_used, 2);
    }

    #[test]
    fn z_score_examples() {
        assert_eq!(poisson_z(20.0, 4.0), 8.0);
        assert_eq!(poisson_z(110.0, 100.0), 1.0);
        assert!((poisson_z(1.0, 0.0) - 1.0 / 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matching_expectation_is_not_surprising() {
        let c = cube([2, 2, 2], vec![4; 8]);
        let fit = ipf_fit(&c, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS);
        let current = cube([2, 2, 2], vec![2; 8]);
        let r = detect_surprise(&fit, &current, DEFAULT_SIGMA_THRESHOLD).unwrap();
        assert!((r.scale - 0.5).abs() < 1e-12);
        assert!(r.surprising_cells.is_empty());
        assert!(r.z_scores.iter().all(|z| z.abs() < 1e-9));
    }

    #[test]
    fn errors_on_empty_inputs() {
        let fit = ipf_fit(&cube([1, 1, 2], vec![0, 0]), DEFAULT_TOLERANCE, 10);
        let current = cube([1, 1, 2], vec![1, 0]);
        assert_eq!(
            detect_surprise(&fit, &current, 5.0),
            Err(SurpriseError::NoHistory)
        );
        let fit = ipf_fit(&cube([1, 1, 2], vec![1, 1]), DEFAULT_TOLERANCE, 10);
        let current = cube([1, 1, 2], vec![0, 0]);
        assert_eq!(
            detect_surprise(&fit, &current, 5.0),
            Err(SurpriseError::EmptyCurrent)
        );
        let other = cube([1, 2, 1], vec![1, 1]);
        assert!(matches!(
            detect_surprise(&fit, &other, 5.0),
            Err(SurpriseError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn uptick_cell_is_flagged_and_truncates() {
        let shape = [2, 2, 2];
        let history = cube(shape, vec![12; 8]);
        let fit = ipf_fit(&history, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS);
        let mut events = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let n = if (i, j, k) == (1, 0, 1) { 40 } else { 4 };
                    for x in 0..n {
                        events.push(ev(&format!("e{i}{j}{k}-{x}"), i, j, k));
                    }
                }
            }
        }
        let current = build_cube(&events, &axes(shape)).unwrap();
        let r = detect_surprise(&fit, &current, DEFAULT_SIGMA_THRESHOLD).unwrap();
        assert_eq!(r.surprising_cells.len(), 1);
        assert_eq!(r.surprising_cells[0].index, [1, 0, 1]);
        assert_eq!(r.truncated_event_ids.len(), 40);
        assert!(r
            .truncated_event_ids
            .iter()
            .all(|id| id.starts_with("e101-")));

        let month: YearMonth = "2014-06".parse().unwrap();
        let report = evaluate_truncated(month, &events, &r, &[]);
        assert!(report.surprise_truncated);
        assert_eq!(report.event_count, 40);
        assert_eq!(report.recall, Some(0.0));
    }

    #[test]
    fn no_surprise_gives_empty_truncated_report() {
        let c = cube([1, 1, 1], vec![3]);
        let fit = ipf_fit(&c, DEFAULT_TOLERANCE, 10);
        let events = vec![ev("a", 0, 0, 0)];
        let current = build_cube(&events, &axes([1, 1, 1])).unwrap();
        let r = detect_surprise(&fit, &current, 5.0).unwrap();
        let report = evaluate_truncated("2014-06".parse().unwrap(), &events, &r, &[]);
        assert_eq!(report.event_count, 0);
        assert_eq!(report.recall, None);
    }

    fn arb_cube() -> impl Strategy<Value = CountCube> {
        proptest::collection::vec(0u64..15, 3 * 4 * 5).prop_map(|c| cube([3, 4, 5], c))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn fits_stay_nonnegative_and_pinned(c in arb_cube()) {
            let fit = ipf_fit(&c, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS);
            prop_assert!(fit.estimates.iter().all(|&m| m >= 0.0));
            let source: Vec<f64> = c.counts().iter().map(|&x| x as f64).collect();
            for m in STANDARD_ORDER {
                let s = m.sums(c.shape(), &source);
                let f = m.sums(c.shape(), &fit.estimates);
                for (a, b) in s.iter().zip(&f) {
                    if *a == 0.0 {
                        prop_assert_eq!(*b, 0.0);
                    }
                }
            }
        }

        #[test]
        fn raising_threshold_never_adds_cells(c in arb_cube(), cur in arb_cube(), lo in 0.0f64..4.0, step in 0.0f64..4.0) {
            let fit = ipf_fit(&c, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS);
            prop_assume!(fit.total() > 0.0 && cur.total() > 0);
            let a = detect_surprise(&fit, &cur, lo).unwrap();
            let b = detect_surprise(&fit, &cur, lo + step).unwrap();
            prop_assert!(b.truncated_event_ids.is_subset(&a.truncated_event_ids));
            prop_assert!(b.surprising_cells.iter().all(|cell| a.is_surprising(cell.index[0], cell.index[1], cell.index[2])));
            let scaled: f64 = fit.estimates.iter().map(|m| m * a.scale).sum();
            prop_assert!((scaled - cur.total() as f64).abs() <= 1e-9 * cur.total() as f64);
        }
    }
}
