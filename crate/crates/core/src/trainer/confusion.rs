use std::fmt::Write as _;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.n + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.n..][..self.n].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| {
                let s = self.row_sum(i);
                (0..self.n)
                    .map(|j| if s == 0 { 0.0 } else { self.get(i, j) as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    /// Row-normalized percentages with class labels.
    pub fn render(&self, labels: &[&str]) -> String {
        let name = |i: usize| labels.get(i).copied().unwrap_or("?");
        let width = (0..self.n).map(|i| name(i).len()).max().unwrap_or(1).max(6);
        let mut out = format!("{:width$}", "true\\pred");
        for j in 0..self.n {
            let _ = write!(out, " {:>width$}", name(j));
        }
        out.push('\n');
        for (i, row) in self.normalized().iter().enumerate() {
            let _ = write!(out, "{:width$}", name(i));
            for v in row {
                let _ = write!(out, " {:>width$}", format!("{:.1}%", v * 100.0));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_accuracy() {
        let mut cm = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0)] {
            cm.record(t, p);
        }
        assert_eq!(cm.row_sum(0), 2);
        assert_eq!(cm.trace(), 3);
        assert!((cm.accuracy() - 0.6).abs() < 1e-12);
        for row in cm.normalized() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(cm.render(&["a", "b", "c"]).contains("50.0%"));
    }
}
