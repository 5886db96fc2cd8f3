//! Minute-level accelerometry to daily MVPA minutes, and cohort selection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MINUTES_PER_DAY: usize = 1440;
pub const DAYS_OBSERVED: u8 = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteRecord {
    pub participant_id: String,
    pub day_index: u8,
    /// 1 = Monday, 7 = Sunday.
    pub day_of_week: u8,
    #[serde(rename = "minute")]
    pub minute_of_day: u16,
    pub counts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayActivity {
    pub participant_id: String,
    pub day_index: u8,
    pub day_of_week: u8,
    pub wear_minutes: u16,
    pub mvpa_minutes: f64,
    pub is_full_day: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivityThresholds {
    /// Minutes with counts at or above this are MVPA.
    pub moderate: u32,
    /// Vigorous minutes are a subset of MVPA minutes; reported, never added twice.
    pub vigorous: u32,
    /// Length of a zero-count run that is treated as nonwear.
    pub nonwear_run: usize,
    pub full_day_wear: u16,
}

impl Default for ActivityThresholds {
    fn default() -> Self {
        Self {
            moderate: 2020,
            vigorous: 5999,
            nonwear_run: 60,
            full_day_wear: 600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    MexicanAmerican,
    OtherHispanic,
    NonHispanicWhite,
    NonHispanicBlack,
    Other,
}

impl Race {
    pub const ALL: [Race; 5] = [
        Race::MexicanAmerican,
        Race::OtherHispanic,
        Race::NonHispanicWhite,
        Race::NonHispanicBlack,
        Race::Other,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Cohort {
    MemOnly,
    MemAndRfm,
}

/// Demographic row. `education` is a 1..6 code carried for reporting; it
/// does not enter the default design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub participant_id: String,
    pub age: f64,
    pub sex: Sex,
    pub race: Race,
    pub education: u8,
    pub bmi: f64,
}

pub const COVARIATE_NAMES: [&str; 8] = [
    "intercept",
    "age_per_100",
    "female",
    "bmi_per_10",
    "mexican_american",
    "other_hispanic",
    "nh_black",
    "other_race",
];

impl Participant {
    /// `Z_i`: intercept, age/100, female, BMI/10 and four race indicators
    /// with non-Hispanic White as the reference level.
    pub fn covariates(&self) -> [f64; 8] {
        let ind = |r: Race| if self.race == r { 1.0 } else { 0.0 };
        [
            1.0,
            self.age / 100.0,
            if self.sex == Sex::Female { 1.0 } else { 0.0 },
            self.bmi / 10.0,
            ind(Race::MexicanAmerican),
            ind(Race::OtherHispanic),
            ind(Race::NonHispanicBlack),
            ind(Race::Other),
        ]
    }

    /// AR(1) group: 0 under 65 years, 1 otherwise.
    pub fn age_group(&self) -> usize {
        usize::from(self.age >= 65.0)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.age >= 18.0) {
            return Err(format!("age {} below 18", self.age));
        }
        if !(self.bmi > 0.0) || !self.bmi.is_finite() {
            return Err(format!("bmi {}", self.bmi));
        }
        if !(1..=6).contains(&self.education) {
            return Err(format!("education code {} outside 1..6", self.education));
        }
        Ok(())
    }
}

/// One risk-factor row as read. Empty cells mean the measurement is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub participant_id: String,
    pub waist_cm: Option<f64>,
    pub glucose_mgdl: Option<f64>,
    pub triglycerides_mgdl: Option<f64>,
    pub sbp_mmhg: Option<f64>,
    pub dbp_mmhg: Option<f64>,
    pub ldl_mgdl: Option<f64>,
    pub hdl_mgdl: Option<f64>,
    pub survey_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskFactorPanel {
    pub participant_id: String,
    pub waist_cm: f64,
    pub glucose_mgdl: f64,
    pub triglycerides_mgdl: f64,
    pub sbp_mmhg: f64,
    pub dbp_mmhg: f64,
    pub ldl_mgdl: f64,
    pub hdl_mgdl: f64,
    pub survey_weight: f64,
}

impl RiskFactorPanel {
    /// Raw measurements in risk-factor order
    /// (waist, glucose, triglycerides, SBP, DBP, LDL, HDL).
    pub fn raw(&self) -> [f64; 7] {
        [
            self.waist_cm,
            self.glucose_mgdl,
            self.triglycerides_mgdl,
            self.sbp_mmhg,
            self.dbp_mmhg,
            self.ldl_mgdl,
            self.hdl_mgdl,
        ]
    }
}

impl PanelRow {
    /// The complete panel, or `None` when any field is missing or not
    /// strictly positive.
    pub fn complete(&self) -> Option<RiskFactorPanel> {
        let vals = [
            self.waist_cm?,
            self.glucose_mgdl?,
            self.triglycerides_mgdl?,
            self.sbp_mmhg?,
            self.dbp_mmhg?,
            self.ldl_mgdl?,
            self.hdl_mgdl?,
            self.survey_weight?,
        ];
        if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return None;
        }
        Some(RiskFactorPanel {
            participant_id: self.participant_id.clone(),
            waist_cm: vals[0],
            glucose_mgdl: vals[1],
            triglycerides_mgdl: vals[2],
            sbp_mmhg: vals[3],
            dbp_mmhg: vals[4],
            ldl_mgdl: vals[5],
            hdl_mgdl: vals[6],
            survey_weight: vals[7],
        })
    }
}

impl From<&RiskFactorPanel> for PanelRow {
    fn from(p: &RiskFactorPanel) -> Self {
        Self {
            participant_id: p.participant_id.clone(),
            waist_cm: Some(p.waist_cm),
            glucose_mgdl: Some(p.glucose_mgdl),
            triglycerides_mgdl: Some(p.triglycerides_mgdl),
            sbp_mmhg: Some(p.sbp_mmhg),
            dbp_mmhg: Some(p.dbp_mmhg),
            ldl_mgdl: Some(p.ldl_mgdl),
            hdl_mgdl: Some(p.hdl_mgdl),
            survey_weight: Some(p.survey_weight),
        }
    }
}

/// Summarizes one participant-day. Minutes absent from `records` count as
/// nonwear.
pub fn derive_mvpa_minutes(records: &[MinuteRecord], thresholds: &ActivityThresholds) -> Result<DayActivity> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("empty participant-day".into()))?;
    let mut counts: Vec<Option<u32>> = vec![None; MINUTES_PER_DAY];
    for r in records {
        if r.participant_id != first.participant_id || r.day_index != first.day_index {
            return Err(Error::Data(format!(
                "records for {} day {} mixed with {} day {}",
                first.participant_id, first.day_index, r.participant_id, r.day_index
            )));
        }
        if r.day_of_week != first.day_of_week {
            return Err(Error::Data(format!(
                "participant {} day {}: inconsistent day_of_week {} vs {}",
                r.participant_id, r.day_index, first.day_of_week, r.day_of_week
            )));
        }
        let m = r.minute_of_day as usize;
        if m >= MINUTES_PER_DAY {
            return Err(Error::Data(format!(
                "participant {} day {}: minute {m} out of range",
                r.participant_id, r.day_index
            )));
        }
        if counts[m].replace(r.counts).is_some() {
            return Err(Error::Data(format!(
                "participant {} day {}: duplicate minute {m}",
                r.participant_id, r.day_index
            )));
        }
    }
    Ok(summarize_day(
        &first.participant_id,
        first.day_index,
        first.day_of_week,
        &counts,
        thresholds,
    ))
}

fn summarize_day(
    participant_id: &str,
    day_index: u8,
    day_of_week: u8,
    counts: &[Option<u32>],
    thresholds: &ActivityThresholds,
) -> DayActivity {
    let mvpa = counts
        .iter()
        .filter(|c| matches!(c, Some(v) if *v >= thresholds.moderate))
        .count();
    // A run of zero-or-missing minutes of length ≥ nonwear_run is nonwear in
    // full; shorter runs contribute only their missing minutes.
    let mut nonwear = 0usize;
    let (mut run, mut missing_in_run) = (0usize, 0usize);
    for c in counts.iter().chain(std::iter::once(&Some(1))) {
        match c {
            Some(0) | None => {
                run += 1;
                missing_in_run += usize::from(c.is_none());
            }
            Some(_) => {
                nonwear += if run >= thresholds.nonwear_run { run } else { missing_in_run };
                run = 0;
                missing_in_run = 0;
            }
        }
    }
    let wear = (MINUTES_PER_DAY - nonwear) as u16;
    DayActivity {
        participant_id: participant_id.to_string(),
        day_index,
        day_of_week,
        wear_minutes: wear,
        mvpa_minutes: mvpa as f64,
        is_full_day: wear >= thresholds.full_day_wear,
    }
}

pub fn read_minutes(path: &Path) -> Result<Vec<MinuteRecord>> {
    let rows: Vec<MinuteRecord> = io::read_csv(path)?;
    for r in &rows {
        if !(1..=7).contains(&r.day_of_week) {
            return Err(Error::Data(format!(
                "participant {} day {}: day_of_week {} outside 1..7",
                r.participant_id, r.day_index, r.day_of_week
            )));
        }
    }
    Ok(rows)
}

pub fn write_minutes(path: &Path, rows: &[MinuteRecord]) -> Result<()> {
    io::write_csv(path, rows, None)
}

/// Groups minute records by participant-day and summarizes each day.
/// Output is sorted by (participant_id, day_index).
pub fn derive_days(records: &[MinuteRecord], thresholds: &ActivityThresholds) -> Result<Vec<DayActivity>> {
    let mut groups: BTreeMap<(&str, u8), Vec<MinuteRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.participant_id.as_str(), r.day_index))
            .or_default()
            .push(r.clone());
    }
    groups
        .values()
        .map(|g| derive_mvpa_minutes(g, thresholds))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohorts {
    /// Participants with seven full days, sorted.
    pub mem: Vec<String>,
    /// Members of `mem` with a complete panel, sorted.
    pub rfm: Vec<String>,
    pub warnings: Vec<String>,
}

impl Cohorts {
    pub fn cohort_of(&self, id: &str) -> Option<Cohort> {
        if self.rfm.binary_search_by(|p| p.as_str().cmp(id)).is_ok() {
            Some(Cohort::MemAndRfm)
        } else if self.mem.binary_search_by(|p| p.as_str().cmp(id)).is_ok() {
            Some(Cohort::MemOnly)
        } else {
            None
        }
    }
}

pub fn build_cohorts(days: &[DayActivity], panels: &[PanelRow]) -> Cohorts {
    let mut full: HashMap<&str, BTreeSet<u8>> = HashMap::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for d in days {
        seen.insert(&d.participant_id);
        if d.is_full_day {
            full.entry(&d.participant_id).or_default().insert(d.day_index);
        }
    }
    let mem: Vec<String> = seen
        .iter()
        .filter(|id| {
            full.get(*id)
                .is_some_and(|s| (1..=DAYS_OBSERVED).all(|k| s.contains(&k)))
        })
        .map(|s| s.to_string())
        .collect();
    let mut warnings = Vec::new();
    let mut rfm = Vec::new();
    for p in panels {
        if !seen.contains(p.participant_id.as_str()) {
            warnings.push(format!(
                "participant {} has a risk-factor panel but no accelerometry; excluded",
                p.participant_id
            ));
            continue;
        }
        if mem.binary_search(&p.participant_id).is_ok() && p.complete().is_some() {
            rfm.push(p.participant_id.clone());
        }
    }
    rfm.sort();
    rfm.dedup();
    Cohorts { mem, rfm, warnings }
}

pub fn read_participants(path: &Path) -> Result<Vec<Participant>> {
    let rows: Vec<Participant> = io::read_csv(path)?;
    for p in &rows {
        p.validate()
            .map_err(|m| Error::Data(format!("participant {}: {m}", p.participant_id)))?;
    }
    Ok(rows)
}

pub fn read_panels(path: &Path) -> Result<Vec<PanelRow>> {
    io::read_csv(path)
}
