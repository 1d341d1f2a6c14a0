#![allow(dead_code)]

use std::collections::BTreeSet;

use alertscore::domain::{Alert, EventType, GsrEvent, Location, Population, YearMonth};
use alertscore::surprise::{CountCube, CubeAxes};
use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

pub fn june() -> YearMonth {
    "2014-06".parse().unwrap()
}

pub fn event(id: &str, day: &str, country: &str, state: &str, city: &str) -> GsrEvent {
    let d = date(day);
    GsrEvent {
        id: id.into(),
        event_date: d,
        report_date: d + Days::new(1),
        location: Location::new(country, state, city),
        population: Population("labor".into()),
        event_type: EventType {
            class: "employment".into(),
            violent: false,
        },
    }
}

/// An alert agreeing with `e` on every field, issued three days before the event.
pub fn perfect_alert(id: &str, e: &GsrEvent) -> Alert {
    Alert {
        id: id.into(),
        issued_at: e.event_date - Days::new(3),
        predicted_date: e.event_date,
        location: e.location.clone(),
        population: e.population.clone(),
        event_type: e.event_type.clone(),
        probability: 0.5,
        model: "test".into(),
        sources: BTreeSet::from(["news".to_string()]),
    }
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Pair quality in units of 1/42, or None when the pair may not be matched.
pub fn oracle_units(a: &Alert, e: &GsrEvent) -> Option<i64> {
    let gap = (a.predicted_date - e.event_date).num_days().abs();
    if a.issued_at >= e.report_date
        || fold(&a.location.country) != fold(&e.location.country)
        || gap > 7
    {
        return None;
    }
    let date = 6 * (7 - gap);
    let state_eq = fold(&a.location.state) == fold(&e.location.state);
    let city_eq = fold(&a.location.city) == fold(&e.location.city);
    let location = 14 * (1 + state_eq as i64 + (state_eq && city_eq) as i64);
    let event_type = 21
        * ((fold(&a.event_type.class) == fold(&e.event_type.class)) as i64
            + (a.event_type.violent == e.event_type.violent) as i64);
    let population = 42 * (fold(a.population.as_str()) == fold(e.population.as_str())) as i64;
    Some(date + location + event_type + population)
}

type Best = Option<(i64, usize, Vec<(String, String)>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub units: i64,
    pub pairs: Vec<(String, String)>,
}

/// Enumerates every matching over legal pairs; keeps the best by total quality,
/// then size, then the lexicographically smallest sorted list of id pairs.
pub fn brute_force(alerts: &[Alert], events: &[GsrEvent]) -> BruteForce {
    let w: Vec<Vec<Option<i64>>> = alerts
        .iter()
        .map(|a| events.iter().map(|e| oracle_units(a, e)).collect())
        .collect();
    let mut best: Best = None;
    let mut used = vec![false; events.len()];
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    fn rec(
        i: usize,
        w: &[Vec<Option<i64>>],
        alerts: &[Alert],
        events: &[GsrEvent],
        used: &mut Vec<bool>,
        chosen: &mut Vec<(usize, usize)>,
        best: &mut Best,
    ) {
        if i == alerts.len() {
            let units: i64 = chosen.iter().map(|&(a, e)| w[a][e].unwrap()).sum();
            let mut pairs: Vec<(String, String)> = chosen
                .iter()
                .map(|&(a, e)| (alerts[a].id.clone(), events[e].id.clone()))
                .collect();
            pairs.sort();
            let better = match best {
                None => true,
                Some((bu, bn, bp)) => {
                    units > *bu
                        || (units == *bu
                            && (pairs.len() > *bn || (pairs.len() == *bn && pairs < *bp)))
                }
            };
            if better {
                *best = Some((units, pairs.len(), pairs));
            }
            return;
        }
        rec(i + 1, w, alerts, events, used, chosen, best);
        for j in 0..events.len() {
            if !used[j] && w[i][j].is_some() {
                used[j] = true;
                chosen.push((i, j));
                rec(i + 1, w, alerts, events, used, chosen, best);
                chosen.pop();
                used[j] = false;
            }
        }
    }
    rec(0, &w, alerts, events, &mut used, &mut chosen, &mut best);
    let (units, _, pairs) = best.unwrap();
    BruteForce { units, pairs }
}

/// A small June instance with few distinct field values, so ties are common.
pub fn random_instance(rng: &mut ChaCha8Rng, max_side: usize) -> (Vec<Alert>, Vec<GsrEvent>) {
    let n = rng.random_range(0..=max_side);
    let m = rng.random_range(0..=max_side);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
    let countries = ["Brazil", "Mexico"];
    let states = ["s1", "s2"];
    let cities = ["c1", "c2"];
    let classes = ["employment", "housing"];
    let pops = ["labor", "business"];
    let mut alert_ids: Vec<usize> = (0..n).collect();
    alert_ids.shuffle(rng);
    let mut event_ids: Vec<usize> = (0..m).collect();
    event_ids.shuffle(rng);
    let events: Vec<GsrEvent> = (0..m)
        .map(|i| {
            let d = june().day(rng.random_range(1..=30)).unwrap();
            GsrEvent {
                id: format!("e{}", event_ids[i]),
                event_date: d,
                report_date: d + Days::new(rng.random_range(0..=3)),
                location: Location::new(
                    pick(rng, &countries),
                    pick(rng, &states),
                    pick(rng, &cities),
                ),
                population: Population(pick(rng, &pops)),
                event_type: EventType {
                    class: pick(rng, &classes),
                    violent: rng.random_bool(0.5),
                },
            }
        })
        .collect();
    let alerts: Vec<Alert> = (0..n)
        .map(|i| {
            let d = june().day(rng.random_range(1..=30)).unwrap();
            Alert {
                id: format!("a{}", alert_ids[i]),
                issued_at: d - Days::new(rng.random_range(0..=10)),
                predicted_date: d,
                location: Location::new(
                    pick(rng, &countries),
                    pick(rng, &states),
                    pick(rng, &cities),
                ),
                population: Population(pick(rng, &pops)),
                event_type: EventType {
                    class: pick(rng, &classes),
                    violent: rng.random_bool(0.5),
                },
                probability: rng.random_range(0.0..=1.0),
                model: "test".into(),
                sources: BTreeSet::from(["news".to_string()]),
            }
        })
        .collect();
    (alerts, events)
}

pub fn axes(shape: [usize; 3]) -> CubeAxes {
    let names = |p: &str, n: usize| (0..n).map(|x| format!("{p}{x}")).collect();
    CubeAxes {
        event_classes: names("class", shape[0]),
        populations: names("pop", shape[1]),
        countries: names("country", shape[2]),
    }
}

pub fn cube(shape: [usize; 3], counts: Vec<u64>) -> CountCube {
    CountCube::from_counts(axes(shape), counts)
}

pub fn idx(shape: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * shape[1] + j) * shape[2] + k
}

/// The three two-way margin tables of a row-major cube, summed by explicit loops.
pub fn two_way_margins(
    shape: [usize; 3],
    cell: impl Fn(usize, usize, usize) -> f64,
) -> [Vec<f64>; 3] {
    let [a, b, c] = shape;
    let mut ij = vec![0.0; a * b];
    let mut ik = vec![0.0; a * c];
    let mut jk = vec![0.0; b * c];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let v = cell(i, j, k);
                ij[i * b + j] += v;
                ik[i * c + k] += v;
                jk[j * c + k] += v;
            }
        }
    }
    [ij, ik, jk]
}

/// Max-entropy table with the two-way margins of a strictly positive 2x2x2 table.
///
/// All such tables are `n + t * s` with `s = (-1)^(i+j+k)`; entropy is concave
/// in `t`, so its maximiser is found by bisection on the derivative.
pub fn maxent_2x2x2(n: [f64; 8]) -> [f64; 8] {
    let sign = |c: usize| {
        if c.count_ones().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    };
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (c, &v) in n.iter().enumerate() {
        let bound = -v / sign(c);
        if sign(c) > 0.0 {
            lo = lo.max(bound);
        } else {
            hi = hi.min(bound);
        }
    }
    let derivative = |t: f64| -> f64 {
        -(0..8)
            .map(|c| sign(c) * (n[c] + t * sign(c)).ln())
            .sum::<f64>()
    };
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if derivative(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let t = 0.5 * (a + b);
    std::array::from_fn(|c| n[c] + t * sign(c))
}
