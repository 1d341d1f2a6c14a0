//! Alerts, ground-truth events, categorical vocabularies and their line-oriented
//! JSON record format.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// Alerts issued more than this many days after their predicted date are rejected.
pub const MAX_POST_DATING_DAYS: u64 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("unknown {axis} `{value}`")]
    Vocabulary { axis: &'static str, value: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<DomainError>,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

impl DomainError {
    fn at_line(self, line: usize) -> Self {
        DomainError::AtLine {
            line,
            source: Box::new(self),
        }
    }
}

/// Case-folds, trims, strips diacritics and collapses internal whitespace.
pub fn normalize_place_name(raw: &str) -> String {
    let stripped: String = raw
        .to_lowercase()
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A calendar month, written `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    year: i32,
    month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, 1).map(|_| YearMonth { year, month })
    }

    pub fn of(date: NaiveDate) -> Self {
        YearMonth {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("validated month")
    }

    pub fn last_day(self) -> NaiveDate {
        self.next().first_day().pred_opt().expect("date in range")
    }

    pub fn days(self) -> u32 {
        self.last_day().day()
    }

    /// The given day of this month, if it exists.
    pub fn day(self, day: u32) -> Option<NaiveDate> {
        NaiveDate::from_ymd_opt(self.year, self.month, day)
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            YearMonth {
                year: self.year + 1,
                month: 1,
            }
        } else {
            YearMonth {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    pub fn prev(self) -> Self {
        if self.month == 1 {
            YearMonth {
                year: self.year - 1,
                month: 12,
            }
        } else {
            YearMonth {
                year: self.year,
                month: self.month - 1,
            }
        }
    }

    /// Shifts by a signed number of months.
    pub fn offset(self, months: i32) -> Self {
        let index = self.year * 12 + self.month as i32 - 1 + months;
        YearMonth {
            year: index.div_euclid(12),
            month: index.rem_euclid(12) as u32 + 1,
        }
    }

    pub fn contains(self, date: NaiveDate) -> bool {
        YearMonth::of(date) == self
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::InvalidField {
            field: "month",
            reason: format!("expected YYYY-MM, got `{s}`"),
        };
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        YearMonth::new(year, month).ok_or_else(bad)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The closed categorical sets of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub countries: Vec<String>,
    pub event_classes: Vec<String>,
    pub populations: Vec<String>,
}

impl Vocabulary {
    fn resolve(list: &[String], axis: &'static str, value: &str) -> Result<String, DomainError> {
        let wanted = normalize_place_name(value);
        list.iter()
            .find(|c| normalize_place_name(c) == wanted)
            .cloned()
            .ok_or_else(|| DomainError::Vocabulary {
                axis,
                value: value.to_string(),
            })
    }

    pub fn country(&self, value: &str) -> Result<String, DomainError> {
        Self::resolve(&self.countries, "country", value)
    }

    pub fn event_class(&self, value: &str) -> Result<String, DomainError> {
        Self::resolve(&self.event_classes, "event class", value)
    }

    pub fn population(&self, value: &str) -> Result<Population, DomainError> {
        Self::resolve(&self.populations, "population", value).map(Population)
    }

    pub fn country_index(&self, value: &str) -> Option<usize> {
        index_of(&self.countries, value)
    }

    pub fn event_class_index(&self, value: &str) -> Option<usize> {
        index_of(&self.event_classes, value)
    }

    pub fn population_index(&self, value: &str) -> Option<usize> {
        index_of(&self.populations, value)
    }
}

fn index_of(list: &[String], value: &str) -> Option<usize> {
    let wanted = normalize_place_name(value);
    list.iter().position(|c| normalize_place_name(c) == wanted)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub country: String,
    pub state: String,
    pub city: String,
}

impl Location {
    pub fn new(
        country: impl Into<String>,
        state: impl Into<String>,
        city: impl Into<String>,
    ) -> Self {
        Location {
            country: country.into(),
            state: state.into(),
            city: city.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventType {
    pub class: String,
    pub violent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Population(pub String);

impl Population {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alert {
    pub id: String,
    pub issued_at: NaiveDate,
    pub predicted_date: NaiveDate,
    pub location: Location,
    pub population: Population,
    pub event_type: EventType,
    pub probability: f64,
    pub model: String,
    pub sources: BTreeSet<String>,
}

impl Alert {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(0.0..=1.0).contains(&self.probability) || self.probability.is_nan() {
            return Err(DomainError::Validation(format!(
                "alert `{}`: probability {} outside [0, 1]",
                self.id, self.probability
            )));
        }
        let latest = self.predicted_date + Days::new(MAX_POST_DATING_DAYS);
        if self.issued_at > latest {
            return Err(DomainError::Validation(format!(
                "alert `{}`: issued {} more than {} days after predicted date {}",
                self.id, self.issued_at, MAX_POST_DATING_DAYS, self.predicted_date
            )));
        }
        if self.id.is_empty() {
            return Err(DomainError::Validation("alert id is empty".into()));
        }
        Ok(())
    }

    pub fn to_record(&self) -> String {
        let rec = AlertRecord {
            id: &self.id,
            issued_at: self.issued_at,
            predicted_date: self.predicted_date,
            country: &self.location.country,
            state: &self.location.state,
            city: &self.location.city,
            population: self.population.as_str(),
            event_class: &self.event_type.class,
            violent: self.event_type.violent,
            probability: self.probability,
            model: &self.model,
            sources: &self.sources,
        };
        serde_json::to_string(&rec).expect("alert serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GsrEvent {
    pub id: String,
    pub event_date: NaiveDate,
    pub report_date: NaiveDate,
    pub location: Location,
    pub population: Population,
    pub event_type: EventType,
}

impl GsrEvent {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.report_date < self.event_date {
            return Err(DomainError::Validation(format!(
                "event `{}`: report date {} precedes event date {}",
                self.id, self.report_date, self.event_date
            )));
        }
        if self.id.is_empty() {
            return Err(DomainError::Validation("event id is empty".into()));
        }
        Ok(())
    }

    pub fn to_record(&self) -> String {
        let rec = GsrRecord {
            id: &self.id,
            event_date: self.event_date,
            report_date: self.report_date,
            country: &self.location.country,
            state: &self.location.state,
            city: &self.location.city,
            population: self.population.as_str(),
            event_class: &self.event_type.class,
            violent: self.event_type.violent,
        };
        serde_json::to_string(&rec).expect("event serializes")
    }
}

#[derive(Serialize)]
struct AlertRecord<'a> {
    id: &'a str,
    issued_at: NaiveDate,
    predicted_date: NaiveDate,
    country: &'a str,
    state: &'a str,
    city: &'a str,
    population: &'a str,
    event_class: &'a str,
    violent: bool,
    probability: f64,
    model: &'a str,
    sources: &'a BTreeSet<String>,
}

#[derive(Serialize)]
struct GsrRecord<'a> {
    id: &'a str,
    event_date: NaiveDate,
    report_date: NaiveDate,
    country: &'a str,
    state: &'a str,
    city: &'a str,
    population: &'a str,
    event_class: &'a str,
    violent: bool,
}

const ALERT_FIELDS: &[&str] = &[
    "id",
    "issued_at",
    "predicted_date",
    "country",
    "state",
    "city",
    "population",
    "event_class",
    "violent",
    "probability",
    "model",
    "sources",
];

const GSR_FIELDS: &[&str] = &[
    "id",
    "event_date",
    "report_date",
    "country",
    "state",
    "city",
    "population",
    "event_class",
    "violent",
];

struct Fields(Map<String, Value>);

impl Fields {
    fn parse(record: &str, allowed: &[&str]) -> Result<Self, DomainError> {
        let value: Value =
            serde_json::from_str(record).map_err(|e| DomainError::Malformed(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(DomainError::Malformed("record is not a JSON object".into()));
        };
        if let Some(extra) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(DomainError::Malformed(format!(
                "unexpected field `{extra}`"
            )));
        }
        Ok(Fields(map))
    }

    fn get(&self, field: &'static str) -> Option<&Value> {
        self.0.get(field).filter(|v| !v.is_null())
    }

    fn string(&self, field: &'static str) -> Result<String, DomainError> {
        match self.get(field) {
            None => Err(DomainError::MissingField(field)),
            Some(Value::String(s)) => Ok(s.trim().to_string()),
            Some(other) => Err(DomainError::InvalidField {
                field,
                reason: format!("expected a string, got {other}"),
            }),
        }
    }

    /// Location parts may be absent or empty.
    fn optional_string(&self, field: &'static str) -> Result<String, DomainError> {
        match self.get(field) {
            None => Ok(String::new()),
            Some(_) => self.string(field),
        }
    }

    fn date(&self, field: &'static str) -> Result<NaiveDate, DomainError> {
        let raw = self.string(field)?;
        parse_date(&raw).ok_or_else(|| DomainError::InvalidField {
            field,
            reason: format!("expected an ISO-8601 date, got `{raw}`"),
        })
    }

    fn optional_date(&self, field: &'static str) -> Result<Option<NaiveDate>, DomainError> {
        match self.get(field) {
            None => Ok(None),
            Some(_) => self.date(field).map(Some),
        }
    }

    fn boolean(&self, field: &'static str) -> Result<bool, DomainError> {
        match self.get(field) {
            None => Err(DomainError::MissingField(field)),
            Some(Value::Bool(b)) => Ok(*b),
            Some(other) => Err(DomainError::InvalidField {
                field,
                reason: format!("expected a boolean, got {other}"),
            }),
        }
    }

    fn number(&self, field: &'static str) -> Result<f64, DomainError> {
        match self.get(field) {
            None => Err(DomainError::MissingField(field)),
            Some(Value::Number(n)) => n.as_f64().ok_or_else(|| DomainError::InvalidField {
                field,
                reason: format!("not representable: {n}"),
            }),
            Some(other) => Err(DomainError::InvalidField {
                field,
                reason: format!("expected a number, got {other}"),
            }),
        }
    }

    fn string_set(&self, field: &'static str) -> Result<BTreeSet<String>, DomainError> {
        match self.get(field) {
            None => Err(DomainError::MissingField(field)),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.trim().to_lowercase()),
                    other => Err(DomainError::InvalidField {
                        field,
                        reason: format!("expected strings, got {other}"),
                    }),
                })
                .collect(),
            Some(other) => Err(DomainError::InvalidField {
                field,
                reason: format!("expected an array, got {other}"),
            }),
        }
    }
}

/// Accepts `YYYY-MM-DD`, optionally followed by a time part (`T...`), which is dropped.
fn parse_date(raw: &str) -> Option<NaiveDate> {
    let day_part = raw.split(['T', ' ']).next()?;
    NaiveDate::parse_from_str(day_part, "%Y-%m-%d").ok()
}

pub fn parse_alert_record(record: &str, vocab: &Vocabulary) -> Result<Alert, DomainError> {
    let f = Fields::parse(record, ALERT_FIELDS)?;
    let alert = Alert {
        id: f.string("id")?,
        issued_at: f.date("issued_at")?,
        predicted_date: f.date("predicted_date")?,
        location: Location {
            country: vocab.country(&f.string("country")?)?,
            state: f.optional_string("state")?,
            city: f.optional_string("city")?,
        },
        population: vocab.population(&f.string("population")?)?,
        event_type: EventType {
            class: vocab.event_class(&f.string("event_class")?)?,
            violent: f.boolean("violent")?,
        },
        probability: f.number("probability")?,
        model: f.string("model")?,
        sources: f.string_set("sources")?,
    };
    alert.validate()?;
    Ok(alert)
}

pub fn parse_gsr_record(record: &str, vocab: &Vocabulary) -> Result<GsrEvent, DomainError> {
    let f = Fields::parse(record, GSR_FIELDS)?;
    let event_date = f.date("event_date")?;
    let report_date = match f.optional_date("report_date")? {
        Some(d) => d,
        None => event_date
            .succ_opt()
            .ok_or_else(|| DomainError::InvalidField {
                field: "event_date",
                reason: "out of range".into(),
            })?,
    };
    let event = GsrEvent {
        id: f.string("id")?,
        event_date,
        report_date,
        location: Location {
            country: vocab.country(&f.string("country")?)?,
            state: f.optional_string("state")?,
            city: f.optional_string("city")?,
        },
        population: vocab.population(&f.string("population")?)?,
        event_type: EventType {
            class: vocab.event_class(&f.string("event_class")?)?,
            violent: f.boolean("violent")?,
        },
    };
    event.validate()?;
    Ok(event)
}

fn load_lines<T>(
    reader: impl BufRead,
    parse: impl Fn(&str) -> Result<T, DomainError>,
    id_of: impl Fn(&T) -> &str,
) -> Result<Vec<T>, DomainError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DomainError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = parse(&line).map_err(|e| e.at_line(n + 1))?;
        if !seen.insert(id_of(&item).to_string()) {
            return Err(DomainError::DuplicateId(id_of(&item).to_string()).at_line(n + 1));
        }
        out.push(item);
    }
    Ok(out)
}

/// Reads newline-delimited alert records; blank lines are skipped, duplicate ids rejected.
pub fn load_alerts(reader: impl BufRead, vocab: &Vocabulary) -> Result<Vec<Alert>, DomainError> {
    load_lines(reader, |l| parse_alert_record(l, vocab), |a| &a.id)
}

pub fn load_gsr(reader: impl BufRead, vocab: &Vocabulary) -> Result<Vec<GsrEvent>, DomainError> {
    load_lines(reader, |l| parse_gsr_record(l, vocab), |e| &e.id)
}

pub fn write_alerts(alerts: &[Alert]) -> String {
    let mut out = String::new();
    for a in alerts {
        out.push_str(&a.to_record());
        out.push('\n');
    }
    out
}

pub fn write_gsr(events: &[GsrEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_record());
        out.push('\n');
    }
    out
}
