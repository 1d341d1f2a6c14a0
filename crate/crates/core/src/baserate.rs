//! History-only forecaster: the trailing three months of ground truth, per
//! location and category cell, become next month's alerts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    normalize_place_name, Alert, EventType, GsrEvent, Location, Population, YearMonth,
};

pub const HISTORY_MONTHS: i32 = 3;
pub const MAX_PROBABILITY: f64 = 0.95;
pub const MODEL_NAME: &str = "baserate";
pub const SOURCE_TAG: &str = "gsr-history";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaserateError {
    #[error("event `{id}` dated {date} is outside the history window {from}..={to}")]
    OutsideWindow {
        id: String,
        date: chrono::NaiveDate,
        from: YearMonth,
        to: YearMonth,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub country: String,
    pub state: String,
    pub city: String,
    pub population: Population,
    pub event_type: EventType,
    pub trailing_count: u64,
    pub monthly_rate: f64,
}

impl RateCell {
    /// `round_half_up(trailing_count / 3)`, computed exactly.
    pub fn alerts_to_emit(&self) -> u64 {
        (2 * self.trailing_count + HISTORY_MONTHS as u64) / (2 * HISTORY_MONTHS as u64)
    }
}

/// The three calendar months preceding `target`, oldest first.
pub fn history_window(target: YearMonth) -> (YearMonth, YearMonth) {
    (target.offset(-HISTORY_MONTHS), target.prev())
}

pub fn build_rate_table(
    history: &[GsrEvent],
    target_month: YearMonth,
) -> Result<Vec<RateCell>, BaserateError> {
    let (from, to) = history_window(target_month);
    // Keyed on normalized names; the first spelling seen is the one reported.
    type Key = (String, String, String, String, String, bool);
    let mut cells: BTreeMap<Key, (Location, Population, EventType, u64)> = BTreeMap::new();
    for e in history {
        let m = YearMonth::of(e.event_date);
        if m < from || m > to {
            return Err(BaserateError::OutsideWindow {
                id: e.id.clone(),
                date: e.event_date,
                from,
                to,
            });
        }
        let key = (
            normalize_place_name(&e.location.country),
            normalize_place_name(&e.location.state),
            normalize_place_name(&e.location.city),
            normalize_place_name(e.population.as_str()),
            normalize_place_name(&e.event_type.class),
            e.event_type.violent,
        );
        cells
            .entry(key)
            .or_insert_with(|| {
                (
                    e.location.clone(),
                    e.population.clone(),
                    e.event_type.clone(),
                    0,
                )
            })
            .3 += 1;
    }
    Ok(cells
        .into_values()
        .map(|(loc, population, event_type, count)| RateCell {
            country: loc.country,
            state: loc.state,
            city: loc.city,
            population,
            event_type,
            trailing_count: count,
            monthly_rate: count as f64 / HISTORY_MONTHS as f64,
        })
        .collect())
}

pub fn baserate_probability(rate: f64) -> f64 {
    (rate / (rate + 1.0)).min(MAX_PROBABILITY)
}

/// Day of month for the k-th (1-based) of `n` evenly spaced alerts.
fn spaced_day(k: u64, n: u64, days_in_month: u32) -> u32 {
    let day = k * days_in_month as u64 / (n + 1);
    // More alerts than days would put the first one on day 0.
    day.max(1) as u32
}

pub fn generate_baserate_alerts(table: &[RateCell], target_month: YearMonth) -> Vec<Alert> {
    let issued_at = target_month.prev().last_day();
    let days = target_month.days();
    let mut alerts = Vec::new();
    for (cell_index, cell) in table.iter().enumerate() {
        let n = cell.alerts_to_emit();
        for k in 1..=n {
            let day = spaced_day(k, n, days);
            alerts.push(Alert {
                id: format!("{MODEL_NAME}-{target_month}-{cell_index:05}-{k:03}"),
                issued_at,
                predicted_date: target_month.day(day).expect("day within month"),
                location: Location::new(&cell.country, &cell.state, &cell.city),
                population: cell.population.clone(),
                event_type: cell.event_type.clone(),
                probability: baserate_probability(cell.monthly_rate),
                model: MODEL_NAME.to_string(),
                sources: BTreeSet::from([SOURCE_TAG.to_string()]),
            });
        }
    }
    alerts
}

/// Keeps the events inside the history window of `target` and forecasts it.
pub fn forecast_month(events: &[GsrEvent], target: YearMonth) -> Vec<Alert> {
    let (from, to) = history_window(target);
    let history: Vec<GsrEvent> = events
        .iter()
        .filter(|e| {
            let m = YearMonth::of(e.event_date);
            m >= from && m <= to
        })
        .cloned()
        .collect();
    let table = build_rate_table(&history, target).expect("history filtered to window");
    generate_baserate_alerts(&table, target)
}
