//! Seeded generator for GSR and alert corpora with known ground truth.
//!
//! Events are drawn per (country, city, class, population) cell and month from
//! a Poisson rate. Alerts copy a covered event, shift the predicted date by a
//! bounded jitter (kept inside the event's month) and are issued a planned
//! lead time before the event. False alarms are spread uniformly.

use std::collections::BTreeSet;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    normalize_place_name, Alert, EventType, GsrEvent, Location, Population, Vocabulary, YearMonth,
};

/// Fields that define "similar" warnings for narrative warning counts.
pub const SIMILARITY_KEY: &str = "city+event_class";
pub const NOISE_SIGMAS: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityProfile {
    pub name: String,
    #[serde(default)]
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountryProfile {
    pub name: String,
    pub cities: Vec<CityProfile>,
}

/// Multiplies the rate of every city cell of one (country, class, population).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Uptick {
    pub month: YearMonth,
    pub country: String,
    pub event_class: String,
    pub population: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub start: YearMonth,
    #[serde(default = "default_months")]
    pub months: u32,
    pub countries: Vec<CountryProfile>,
    pub event_classes: Vec<String>,
    pub populations: Vec<String>,
    /// Expected events per (city, class, population) per month.
    #[serde(default = "default_base_rate")]
    pub base_rate: f64,
    #[serde(default)]
    pub violent_share: f64,
    #[serde(default)]
    pub upticks: Vec<Uptick>,
    /// Probability that an event gets a matching alert.
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    #[serde(default)]
    pub date_jitter_days: u32,
    #[serde(default = "default_lead_days")]
    pub lead_days: [u32; 2],
    #[serde(default = "default_report_delay")]
    pub report_delay_days: [u32; 2],
    /// Expected unmatched alerts per country per month.
    #[serde(default)]
    pub false_alarms_per_country: f64,
    #[serde(default = "default_sources")]
    pub sources: Vec<String>,
    #[serde(default = "default_model")]
    pub model: String,
}

fn default_months() -> u32 {
    4
}
fn default_base_rate() -> f64 {
    2.0
}
fn default_coverage() -> f64 {
    0.8
}
fn default_lead_days() -> [u32; 2] {
    [1, 14]
}
fn default_report_delay() -> [u32; 2] {
    [1, 3]
}
fn default_sources() -> Vec<String> {
    ["news", "twitter", "blogs"].map(String::from).to_vec()
}
fn default_model() -> String {
    "synthetic".into()
}

impl SyntheticProfile {
    /// A small two-country profile used by the CLI when no profile is configured.
    pub fn example() -> Self {
        let city = |name: &str, state: &str| CityProfile {
            name: name.into(),
            state: state.into(),
        };
        SyntheticProfile {
            start: YearMonth::new(2014, 1).expect("valid month"),
            months: default_months(),
            countries: vec![
                CountryProfile {
                    name: "Venezuela".into(),
                    cities: vec![
                        city("Caracas", "Distrito Capital"),
                        city("Maracaibo", "Zulia"),
                    ],
                },
                CountryProfile {
                    name: "Brazil".into(),
                    cities: vec![city("São Paulo", "SP"), city("Recife", "PE")],
                },
            ],
            event_classes: ["employment", "economic", "government-policy"]
                .map(String::from)
                .to_vec(),
            populations: ["general-population", "business", "labor"]
                .map(String::from)
                .to_vec(),
            base_rate: default_base_rate(),
            violent_share: 0.2,
            upticks: Vec::new(),
            coverage: default_coverage(),
            date_jitter_days: 2,
            lead_days: default_lead_days(),
            report_delay_days: default_report_delay(),
            false_alarms_per_country: 1.0,
            sources: default_sources(),
            model: default_model(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            countries: self.countries.iter().map(|c| c.name.clone()).collect(),
            event_classes: self.event_classes.clone(),
            populations: self.populations.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |msg: String| Err(SyntheticError::InvalidProfile(msg));
        if self.months == 0 {
            return bad("months must be at least 1".into());
        }
        if self.countries.is_empty() || self.event_classes.is_empty() || self.populations.is_empty()
        {
            return bad("countries, event_classes and populations must be non-empty".into());
        }
        if let Some(c) = self.countries.iter().find(|c| c.cities.is_empty()) {
            return bad(format!("country `{}` has no cities", c.name));
        }
        if !(self.base_rate >= 0.0 && self.base_rate.is_finite()) {
            return bad(format!(
                "base_rate {} must be finite and non-negative",
                self.base_rate
            ));
        }
        if !(self.false_alarms_per_country >= 0.0 && self.false_alarms_per_country.is_finite()) {
            return bad("false_alarms_per_country must be finite and non-negative".into());
        }
        for (name, p) in [
            ("coverage", self.coverage),
            ("violent_share", self.violent_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.date_jitter_days > crate::scoring::DATE_WINDOW_DAYS as u32 {
            return bad(format!(
                "date_jitter_days {} exceeds the {}-day match window",
                self.date_jitter_days,
                crate::scoring::DATE_WINDOW_DAYS
            ));
        }
        if self.lead_days[0] == 0 || self.lead_days[0] > self.lead_days[1] {
            return bad(format!(
                "lead_days {:?} must be an increasing range starting at 1 or more",
                self.lead_days
            ));
        }
        if self.lead_days[1] > 30 {
            return bad("lead_days may not exceed 30".into());
        }
        if self.report_delay_days[0] > self.report_delay_days[1] {
            return bad(format!(
                "report_delay_days {:?} is not a range",
                self.report_delay_days
            ));
        }
        if self.sources.is_empty() {
            return bad("at least one source tag is required".into());
        }
        let vocab = self.vocabulary();
        for u in &self.upticks {
            if vocab.country_index(&u.country).is_none()
                || vocab.event_class_index(&u.event_class).is_none()
                || vocab.population_index(&u.population).is_none()
            {
                return bad(format!(
                    "uptick ({}, {}, {}) is not a profile cell",
                    u.country, u.event_class, u.population
                ));
            }
            if !(u.factor >= 0.0 && u.factor.is_finite()) {
                return bad(format!(
                    "uptick factor {} must be finite and non-negative",
                    u.factor
                ));
            }
        }
        Ok(())
    }

    pub fn month_list(&self) -> Vec<YearMonth> {
        (0..self.months as i32)
            .map(|i| self.start.offset(i))
            .collect()
    }

    fn factor(&self, month: YearMonth, country: &str, class: &str, population: &str) -> f64 {
        self.upticks
            .iter()
            .filter(|u| {
                u.month == month
                    && normalize_place_name(&u.country) == normalize_place_name(country)
                    && normalize_place_name(&u.event_class) == normalize_place_name(class)
                    && normalize_place_name(&u.population) == normalize_place_name(population)
            })
            .map(|u| u.factor)
            .product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UptickReport {
    pub month: YearMonth,
    pub country: String,
    pub event_class: String,
    pub population: String,
    pub factor: f64,
    /// Baseline expectation summed over the country's cities.
    pub baseline_count: f64,
    pub expected_count: f64,
    /// `observed_count` lies within `expected_count ± noise_bound` except with
    /// probability below the 5σ normal tail.
    pub noise_bound: f64,
    pub observed_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub months: Vec<YearMonth>,
    pub cells_per_month: usize,
    pub base_rate: f64,
    pub event_count: usize,
    pub alert_count: usize,
    pub covered_event_count: usize,
    pub false_alarm_count: usize,
    pub similarity_key: String,
    pub upticks: Vec<UptickReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub gsr: Vec<GsrEvent>,
    pub alerts: Vec<Alert>,
    pub manifest: Manifest,
}

fn draw_count(rng: &mut ChaCha8Rng, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    let d = Poisson::new(rate).expect("positive finite rate");
    d.sample(rng) as u64
}

fn draw_sources(rng: &mut ChaCha8Rng, sources: &[String]) -> BTreeSet<String> {
    let mut picked: BTreeSet<String> = sources
        .iter()
        .filter(|_| rng.random_bool(0.5))
        .cloned()
        .collect();
    if picked.is_empty() {
        picked.insert(sources[rng.random_range(0..sources.len())].clone());
    }
    picked
}

fn clamp_to_month(date: NaiveDate, month: YearMonth) -> NaiveDate {
    date.clamp(month.first_day(), month.last_day())
}

pub fn generate(profile: &SyntheticProfile, seed: u64) -> Result<SyntheticCorpus, SyntheticError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let months = profile.month_list();
    let cells_per_month: usize = profile
        .countries
        .iter()
        .map(|c| c.cities.len() * profile.event_classes.len() * profile.populations.len())
        .sum();

    let mut gsr = Vec::new();
    let mut alerts = Vec::new();
    let mut covered = 0usize;
    let mut false_alarms = 0usize;
    let mut upticks: Vec<UptickReport> = Vec::new();

    for &month in &months {
        let days = month.days();
        let mut event_n = 0usize;
        let mut alert_n = 0usize;
        for country in &profile.countries {
            for class in &profile.event_classes {
                for pop in &profile.populations {
                    let factor = profile.factor(month, &country.name, class, pop);
                    let mut cell_total = 0u64;
                    for city in &country.cities {
                        let count = draw_count(&mut rng, profile.base_rate * factor);
                        cell_total += count;
                        for _ in 0..count {
                            event_n += 1;
                            let event_date =
                                month.day(rng.random_range(1..=days)).expect("day in month");
                            let delay = rng.random_range(
                                profile.report_delay_days[0]..=profile.report_delay_days[1],
                            );
                            let event = GsrEvent {
                                id: format!("gsr-{month}-{event_n:05}"),
                                event_date,
                                report_date: event_date + Days::new(delay as u64),
                                location: Location::new(&country.name, &city.state, &city.name),
                                population: Population(pop.clone()),
                                event_type: EventType {
                                    class: class.clone(),
                                    violent: rng.random_bool(profile.violent_share),
                                },
                            };
                            if rng.random_bool(profile.coverage) {
                                covered += 1;
                                alert_n += 1;
                                let j = profile.date_jitter_days as i64;
                                let shift = rng.random_range(-j..=j);
                                let predicted = clamp_to_month(
                                    event_date
                                        .checked_add_signed(chrono::Duration::days(shift))
                                        .expect("date in range"),
                                    month,
                                );
                                let lead =
                                    rng.random_range(profile.lead_days[0]..=profile.lead_days[1]);
                                alerts.push(Alert {
                                    id: format!("{}-{month}-{alert_n:05}", profile.model),
                                    issued_at: event_date - Days::new(lead as u64),
                                    predicted_date: predicted,
                                    location: event.location.clone(),
                                    population: event.population.clone(),
                                    event_type: event.event_type.clone(),
                                    probability: rng.random_range(0.5..0.95),
                                    model: profile.model.clone(),
                                    sources: draw_sources(&mut rng, &profile.sources),
                                });
                            }
                            gsr.push(event);
                        }
                    }
                    if factor != 1.0 {
                        let baseline = profile.base_rate * country.cities.len() as f64;
                        let expected = baseline * factor;
                        upticks.push(UptickReport {
                            month,
                            country: country.name.clone(),
                            event_class: class.clone(),
                            population: pop.clone(),
                            factor,
                            baseline_count: baseline,
                            expected_count: expected,
                            noise_bound: NOISE_SIGMAS * expected.sqrt(),
                            observed_count: cell_total,
                        });
                    }
                }
            }
            let n_false = draw_count(&mut rng, profile.false_alarms_per_country);
            for _ in 0..n_false {
                alert_n += 1;
                false_alarms += 1;
                let city = &country.cities[rng.random_range(0..country.cities.len())];
                let predicted = month.day(rng.random_range(1..=days)).expect("day in month");
                let lead = rng.random_range(profile.lead_days[0]..=profile.lead_days[1]);
                alerts.push(Alert {
                    id: format!("{}-{month}-{alert_n:05}", profile.model),
                    issued_at: predicted - Days::new(lead as u64),
                    predicted_date: predicted,
                    location: Location::new(&country.name, &city.state, &city.name),
                    population: Population(
                        profile.populations[rng.random_range(0..profile.populations.len())].clone(),
                    ),
                    event_type: EventType {
                        class: profile.event_classes
                            [rng.random_range(0..profile.event_classes.len())]
                        .clone(),
                        violent: rng.random_bool(profile.violent_share),
                    },
                    probability: rng.random_range(0.05..0.5),
                    model: profile.model.clone(),
                    sources: draw_sources(&mut rng, &profile.sources),
                });
            }
        }
    }

    let manifest = Manifest {
        seed,
        months,
        cells_per_month,
        base_rate: profile.base_rate,
        event_count: gsr.len(),
        alert_count: alerts.len(),
        covered_event_count: covered,
        false_alarm_count: false_alarms,
        similarity_key: SIMILARITY_KEY.into(),
        upticks,
    };
    Ok(SyntheticCorpus {
        gsr,
        alerts,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{write_alerts, write_gsr};
    use crate::scoring::is_legal_pair;

    #[test]
    fn same_seed_same_bytes() {
        let p = SyntheticProfile::example();
        let a = generate(&p, 11).unwrap();
        let b = generate(&p, 11).unwrap();
        assert_eq!(write_gsr(&a.gsr), write_gsr(&b.gsr));
        assert_eq!(write_alerts(&a.alerts), write_alerts(&b.alerts));
        let c = generate(&p, 12).unwrap();
        assert_ne!(write_gsr(&a.gsr), write_gsr(&c.gsr));
    }

    #[test]
    fn zero_rate_gives_empty_gsr() {
        let mut p = SyntheticProfile::example();
        p.base_rate = 0.0;
        p.false_alarms_per_country = 0.0;
        let c = generate(&p, 1).unwrap();
        assert!(c.gsr.is_empty());
        assert!(c.alerts.is_empty());
    }

    #[test]
    fn records_are_valid_and_covered_alerts_are_legal() {
        let mut p = SyntheticProfile::example();
        p.coverage = 1.0;
        p.false_alarms_per_country = 0.0;
        let c = generate(&p, 3).unwrap();
        assert_eq!(c.alerts.len(), c.gsr.len());
        for (a, e) in c.alerts.iter().zip(&c.gsr) {
            a.validate().unwrap();
            e.validate().unwrap();
            assert!(is_legal_pair(a, e));
            assert_eq!(YearMonth::of(a.predicted_date), YearMonth::of(e.event_date));
        }
        assert_eq!(c.manifest.covered_event_count, c.gsr.len());
    }

    #[test]
    fn uptick_within_manifest_bound() {
        let mut p = SyntheticProfile::example();
        p.base_rate = 3.0;
        p.upticks.push(Uptick {
            month: p.start.offset(3),
            country: "Brazil".into(),
            event_class: "economic".into(),
            population: "labor".into(),
            factor: 10.0,
        });
        for seed in 0..20 {
            let c = generate(&p, seed).unwrap();
            let u = &c.manifest.upticks[0];
            assert_eq!(u.expected_count, 60.0);
            assert!((u.observed_count as f64 - u.expected_count).abs() <= u.noise_bound);
            let counted = c
                .gsr
                .iter()
                .filter(|e| {
                    YearMonth::of(e.event_date) == u.month
                        && e.location.country == "Brazil"
                        && e.event_type.class == "economic"
                        && e.population.as_str() == "labor"
                })
                .count() as u64;
            assert_eq!(counted, u.observed_count);
        }
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        let mut p = SyntheticProfile::example();
        p.lead_days = [0, 3];
        assert!(generate(&p, 0).is_err());
        let mut p = SyntheticProfile::example();
        p.upticks.push(Uptick {
            month: p.start,
            country: "Atlantis".into(),
            event_class: "economic".into(),
            population: "labor".into(),
            factor: 2.0,
        });
        assert!(p.validate().is_err());
    }

    #[test]
    fn profile_round_trips_through_toml() {
        let p = SyntheticProfile::example();
        let text = toml::to_string(&p).unwrap();
        let back: SyntheticProfile = toml::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
