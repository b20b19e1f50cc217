//! System Usability Scale scoring and experience-weighted aggregation of
//! expert usability and utility ratings.

use std::fmt::{self, Write as _};
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::trainer::sig6;

pub const SUS_ITEMS: usize = 10;
pub const UTILITY_ITEMS: usize = 4;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("answer {index} is {value}, expected 1..=5")]
    Validation { index: usize, value: u8 },
    #[error("{0}")]
    Argument(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

fn check_likert(answers: &[u8]) -> Result<(), ExpertError> {
    match answers.iter().position(|a| !(1..=5).contains(a)) {
        Some(i) => Err(ExpertError::Validation {
            index: i + 1,
            value: answers[i],
        }),
        None => Ok(()),
    }
}

/// Ten Likert answers in questionnaire order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SusResponse([u8; SUS_ITEMS]);

impl SusResponse {
    pub fn new(answers: [u8; SUS_ITEMS]) -> Result<Self, ExpertError> {
        check_likert(&answers)?;
        Ok(SusResponse(answers))
    }

    pub fn answers(&self) -> &[u8; SUS_ITEMS] {
        &self.0
    }

    /// Sum of odd-numbered items minus 5.
    pub fn x(&self) -> i32 {
        self.0.iter().step_by(2).map(|&a| a as i32).sum::<i32>() - 5
    }

    /// 25 minus the sum of even-numbered items.
    pub fn y(&self) -> i32 {
        25 - self.0.iter().skip(1).step_by(2).map(|&a| a as i32).sum::<i32>()
    }

    pub fn score(&self) -> f64 {
        (self.x() + self.y()) as f64 * 2.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UtilityResponse([u8; UTILITY_ITEMS]);

impl UtilityResponse {
    pub fn new(answers: [u8; UTILITY_ITEMS]) -> Result<Self, ExpertError> {
        check_likert(&answers)?;
        Ok(UtilityResponse(answers))
    }

    pub fn answers(&self) -> &[u8; UTILITY_ITEMS] {
        &self.0
    }

    pub fn average(&self) -> f64 {
        self.0.iter().map(|&a| a as f64).sum::<f64>() / UTILITY_ITEMS as f64
    }
}

pub fn sus_score(r: &SusResponse) -> f64 {
    r.score()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertProfile {
    pub id: String,
    pub years_experience: f64,
    pub patients_treated: u64,
}

/// `W_i = (YE_i / ΣYE + PT_i / ΣPT) / 2`.
pub fn expert_weights(profiles: &[ExpertProfile]) -> Result<Vec<f64>, ExpertError> {
    if let Some(p) = profiles
        .iter()
        .find(|p| !p.years_experience.is_finite() || p.years_experience < 0.0)
    {
        return Err(ExpertError::Argument(format!(
            "expert {}: years of experience must be non-negative",
            p.id
        )));
    }
    let ye: f64 = profiles.iter().map(|p| p.years_experience).sum();
    let pt: u64 = profiles.iter().map(|p| p.patients_treated).sum();
    if ye <= 0.0 || pt == 0 {
        return Err(ExpertError::Argument(
            "total years of experience and total patients treated must be positive".into(),
        ));
    }
    Ok(profiles
        .iter()
        .map(|p| (p.years_experience / ye + p.patients_treated as f64 / pt as f64) / 2.0)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Excellent,
    Good,
    Okay,
    Poor,
    Awful,
}

impl Band {
    /// `>= 80.3` Excellent, `(68, 80.3)` Good, exactly 68 Okay,
    /// `(51, 68)` Poor, `<= 51` Awful.
    pub fn of(score: f64) -> Band {
        if score >= 80.3 {
            Band::Excellent
        } else if score > 68.0 {
            Band::Good
        } else if score == 68.0 {
            Band::Okay
        } else if score > 51.0 {
            Band::Poor
        } else {
            Band::Awful
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Excellent => "Excellent",
            Band::Good => "Good",
            Band::Okay => "Okay",
            Band::Poor => "Poor",
            Band::Awful => "Awful",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRow {
    pub id: String,
    pub sus_score: f64,
    pub avg_utility: f64,
    pub weight: f64,
    pub weighted_usability: f64,
    pub weighted_utility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub experts: Vec<ExpertRow>,
    pub total_usability: f64,
    pub total_utility: f64,
    pub band: Band,
}

pub fn weighted_totals(
    ids: &[String],
    sus: &[f64],
    utility: &[f64],
    weights: &[f64],
) -> Result<EvalReport, ExpertError> {
    let n = weights.len();
    if ids.len() != n || sus.len() != n || utility.len() != n {
        return Err(ExpertError::Argument(format!(
            "length mismatch: {} ids, {} SUS scores, {} utility averages, {n} weights",
            ids.len(),
            sus.len(),
            utility.len()
        )));
    }
    let experts: Vec<ExpertRow> = (0..n)
        .map(|i| ExpertRow {
            id: ids[i].clone(),
            sus_score: sus[i],
            avg_utility: utility[i],
            weight: weights[i],
            weighted_usability: weights[i] * sus[i],
            weighted_utility: weights[i] * utility[i],
        })
        .collect();
    let total_usability = experts.iter().map(|e| e.weighted_usability).sum();
    let total_utility = experts.iter().map(|e| e.weighted_utility).sum();
    Ok(EvalReport {
        experts,
        total_usability,
        total_utility,
        band: Band::of(total_usability),
    })
}

/// One questionnaire row: profile plus answers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertResponse {
    pub profile: ExpertProfile,
    pub sus: SusResponse,
    pub utility: UtilityResponse,
}

pub fn evaluate(responses: &[ExpertResponse]) -> Result<EvalReport, ExpertError> {
    let profiles: Vec<ExpertProfile> = responses.iter().map(|r| r.profile.clone()).collect();
    let weights = expert_weights(&profiles)?;
    let ids: Vec<String> = profiles.into_iter().map(|p| p.id).collect();
    let sus: Vec<f64> = responses.iter().map(|r| r.sus.score()).collect();
    let util: Vec<f64> = responses.iter().map(|r| r.utility.average()).collect();
    weighted_totals(&ids, &sus, &util, &weights)
}

const FIELDS: usize = 3 + SUS_ITEMS + UTILITY_ITEMS;

/// Parses `id,YE,PT,q1..q10,u1..u4` rows. Blank lines and lines starting
/// with `#` are skipped; a first row whose id column reads `id` is a header.
pub fn parse_responses(text: &str) -> Result<Vec<ExpertResponse>, ExpertError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("id")) {
            continue;
        }
        let bad = |message: String| ExpertError::Parse { line, message };
        if rec.len() != FIELDS {
            return Err(bad(format!("expected {FIELDS} fields, got {}", rec.len())));
        }
        let answer = |j: usize| -> Result<u8, ExpertError> {
            rec[j]
                .parse::<u8>()
                .map_err(|_| bad(format!("field {}: bad answer `{}`", j + 1, &rec[j])))
        };
        let mut sus = [0u8; SUS_ITEMS];
        for (k, a) in sus.iter_mut().enumerate() {
            *a = answer(3 + k)?;
        }
        let mut util = [0u8; UTILITY_ITEMS];
        for (k, a) in util.iter_mut().enumerate() {
            *a = answer(3 + SUS_ITEMS + k)?;
        }
        let with_line = |e: ExpertError| bad(e.to_string());
        out.push(ExpertResponse {
            profile: ExpertProfile {
                id: rec[0].to_string(),
                years_experience: rec[1]
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| bad(format!("bad years of experience `{}`", &rec[1])))?,
                patients_treated: rec[2]
                    .parse()
                    .map_err(|_| bad(format!("bad patients treated `{}`", &rec[2])))?,
            },
            sus: SusResponse::new(sus).map_err(with_line)?,
            utility: UtilityResponse::new(util).map_err(with_line)?,
        });
    }
    if out.is_empty() {
        return Err(ExpertError::Argument("no expert rows".into()));
    }
    Ok(out)
}

pub fn read_responses(path: &Path) -> Result<Vec<ExpertResponse>, ExpertError> {
    parse_responses(&std::fs::read_to_string(path)?)
}

impl EvalReport {
    /// Table with two-decimal rounding, one column per expert.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<14}", "");
        for e in &self.experts {
            let _ = write!(out, " {:>8}", e.id);
        }
        out.push('\n');
        let rows: [(&str, fn(&ExpertRow) -> f64); 5] = [
            ("SUS score", |e| e.sus_score),
            ("W", |e| e.weight),
            ("W usability", |e| e.weighted_usability),
            ("AVG utility", |e| e.avg_utility),
            ("W utility", |e| e.weighted_utility),
        ];
        for (name, f) in rows {
            let _ = write!(out, "{name:<14}");
            for e in &self.experts {
                let _ = write!(out, " {:>8.2}", f(e));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "Total W usability {:.1} ({})", self.total_usability, self.band);
        let _ = writeln!(out, "Total W utility {:.2}", self.total_utility);
        out
    }

    /// Unrounded values (six significant digits), one row per expert and
    /// a final `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,sus_score,avg_utility,weight,w_usability,w_utility\n");
        for e in &self.experts {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.id,
                sig6(e.sus_score),
                sig6(e.avg_utility),
                sig6(e.weight),
                sig6(e.weighted_usability),
                sig6(e.weighted_utility)
            );
        }
        let _ = writeln!(
            out,
            "total,,,{},{},{}",
            sig6(self.experts.iter().map(|e| e.weight).sum()),
            sig6(self.total_usability),
            sig6(self.total_utility)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sus(a: [u8; 10]) -> SusResponse {
        SusResponse::new(a).unwrap()
    }

    #[test]
    fn worked_examples() {
        let e1 = sus([4, 3, 5, 2, 5, 3, 4, 2, 4, 2]);
        assert_eq!((e1.x(), e1.y(), e1.score()), (17, 13, 75.0));
        let e3 = sus([3, 1, 5, 2, 5, 1, 4, 1, 3, 2]);
        assert_eq!((e3.x(), e3.y(), e3.score()), (15, 18, 82.5));
        assert_eq!(sus([3; 10]).score(), 50.0);
    }

    #[test]
    fn out_of_range_answer() {
        let err = SusResponse::new([3, 3, 3, 6, 3, 3, 3, 3, 3, 3]).unwrap_err();
        assert!(matches!(err, ExpertError::Validation { index: 4, value: 6 }));
        assert!(UtilityResponse::new([0, 1, 1, 1]).is_err());
    }

    #[test]
    fn bands() {
        assert_eq!(Band::of(80.3), Band::Excellent);
        assert_eq!(Band::of(80.29), Band::Good);
        assert_eq!(Band::of(73.8), Band::Good);
        assert_eq!(Band::of(68.0), Band::Okay);
        assert_eq!(Band::of(67.5), Band::Poor);
        assert_eq!(Band::of(51.0), Band::Awful);
    }

    #[test]
    fn weights_edge_cases() {
        let p = |ye: f64, pt: u64| ExpertProfile {
            id: "x".into(),
            years_experience: ye,
            patients_treated: pt,
        };
        assert_eq!(expert_weights(&[p(3.0, 7)]).unwrap(), vec![1.0]);
        let w = expert_weights(&[p(2.0, 5), p(2.0, 5), p(2.0, 5), p(2.0, 5)]).unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(expert_weights(&[p(0.0, 4)]).is_err());
        assert!(expert_weights(&[p(1.0, 0)]).is_err());
    }

    #[test]
    fn length_mismatch() {
        let err = weighted_totals(&["a".into()], &[70.0, 80.0], &[3.0], &[1.0]).unwrap_err();
        assert!(matches!(err, ExpertError::Argument(_)));
    }

    #[test]
    fn csv_errors_carry_lines() {
        let text = "id,ye,pt,q1,q2,q3,q4,q5,q6,q7,q8,q9,q10,u1,u2,u3,u4\n\
                    E1,23,260,4,3,5,2,5,3,4,2,4,2,4,2,4,4\n\
                    E2,21,86,4,1,2,5,5,2,5,1,4,3,5,4,5\n";
        match parse_responses(text).unwrap_err() {
            ExpertError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        let text = "E1,23,260,4,3,5,2,5,3,4,2,4,9,4,2,4,4\n";
        assert!(matches!(parse_responses(text), Err(ExpertError::Parse { line: 1, .. })));
    }
}
