//! Per-epoch training history and its CSV form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::TrainError;

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                sig6(r.train_loss),
                sig6(r.train_acc),
                sig6(r.test_loss),
                sig6(r.test_acc)
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(TrainError::Parse {
                line: 1,
                message: format!("expected header `{HISTORY_HEADER}`"),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |message: String| TrainError::Parse { line: i + 2, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(format!("bad epoch `{}`", f[0])))?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                test_loss: num(f[3])?,
                test_acc: num(f[4])?,
            });
        }
        Ok(TrainHistory { records })
    }

    pub fn export(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Six significant digits in the style of C's `%g`: fixed notation for
/// decimal exponents in `[-4, 6)`, scientific otherwise, trailing zeros
/// removed.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

fn trim(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(1.0 / 3.0), "0.333333");
        assert_eq!(sig6(1.945910149), "1.94591");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(0.000012345678), "1.23457e-5");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn csv_round_trip() {
        let h = TrainHistory {
            records: (1..=3)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / e as f64,
                    train_acc: 0.5,
                    test_loss: 2.0 / 3.0,
                    test_acc: 0.25,
                })
                .collect(),
        };
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 4);
        let back = TrainHistory::parse_csv(&csv).unwrap();
        for (a, b) in h.records.iter().zip(&back.records) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.train_loss - b.train_loss).abs() <= 5e-6 * a.train_loss.abs());
            assert!((a.test_loss - b.test_loss).abs() <= 5e-6 * a.test_loss.abs());
        }
    }
}
