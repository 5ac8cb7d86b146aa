//! Average accuracy, forgetting, and the gap to a joint-training upper bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `acc[j][i]`: accuracy on task `i` after training through task `j`
/// (both zero-based); row `j` holds `j + 1` entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        self.rows.push(row);
        if let Err(e) = self.validate() {
            self.rows.pop();
            return Err(e);
        }
        Ok(())
    }

    pub fn get(&self, j: usize, i: usize) -> Option<f64> {
        self.rows.get(j).and_then(|r| r.get(i)).copied()
    }

    pub fn validate(&self) -> Result<()> {
        for (j, row) in self.rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::InvalidArgument(format!(
                    "accuracy row {j} has {} entries; expected {}",
                    row.len(),
                    j + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }
}

/// `A_T`: mean of the final row.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.validate()?;
    let row = m.final_row().ok_or_else(|| Error::InvalidArgument("empty accuracy matrix".into()))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `F_T = 1/(T−1) Σ_{i<T} [max_{i ≤ j < T} acc[j][i] − acc[T][i]]`, absent for
/// fewer than two tasks.
pub fn forgetting(m: &AccuracyMatrix) -> Result<Option<f64>> {
    m.validate()?;
    let t = m.tasks();
    if t < 2 {
        return Ok(None);
    }
    let last = &m.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|i| {
            let best = (i..t - 1).map(|j| m.rows[j][i]).fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .sum();
    Ok(Some(total / (t - 1) as f64))
}

/// Whether a value is on the fraction scale (`[0, 1]`) or the percent
/// scale (`(1, 100]`). Values in `[0, 1]` are read as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Fraction,
    Percent,
}

pub fn scale_of(v: f64) -> Result<Scale> {
    if (0.0..=1.0).contains(&v) {
        Ok(Scale::Fraction)
    } else if v > 1.0 && v <= 100.0 {
        Ok(Scale::Percent)
    } else {
        Err(Error::InvalidArgument(format!("accuracy {v} is neither a fraction nor a percentage")))
    }
}

/// `Δ = A_U − A_T`. Both arguments must be on the same scale; a value in
/// `[0, 1]` next to one above 1 is reported as a unit mismatch.
pub fn upper_bound_gap(a_upper: f64, a_t: f64) -> Result<f64> {
    let (su, st) = (scale_of(a_upper)?, scale_of(a_t)?);
    if su != st {
        return Err(Error::InvalidArgument(format!(
            "unit mismatch: upper bound {a_upper} and accuracy {a_t} are on different scales"
        )));
    }
    Ok(a_upper - a_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_bound_gap: Option<f64>,
    pub per_task_final_acc: Vec<f64>,
}

pub fn summarize(m: &AccuracyMatrix, upper: Option<f64>) -> Result<MetricsSummary> {
    let a = average_accuracy(m)?;
    Ok(MetricsSummary {
        average_accuracy: a,
        forgetting: forgetting(m)?,
        upper_bound_gap: upper.map(|u| upper_bound_gap(u, a)).transpose()?,
        per_task_final_acc: m.final_row().expect("validated non-empty").to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]).unwrap();
        assert!((average_accuracy(&m).unwrap() - 0.7).abs() < 1e-15);
        let single = AccuracyMatrix::from_rows(vec![vec![0.37]]).unwrap();
        assert_eq!(average_accuracy(&single).unwrap(), 0.37);
        assert_eq!(forgetting(&single).unwrap(), None);
        let none = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.9, 0.8]]).unwrap();
        assert_eq!(forgetting(&none).unwrap(), Some(0.0));
        let half = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.5, 0.7]]).unwrap();
        assert_eq!(forgetting(&half).unwrap(), Some(0.5));
    }

    #[test]
    fn malformed_matrices_are_rejected() {
        assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
        assert!(average_accuracy(&AccuracyMatrix::new()).is_err());
    }

    #[test]
    fn gap_and_units() {
        assert!((upper_bound_gap(90.9, 87.8).unwrap() - 3.1).abs() < 1e-9);
        assert_eq!(upper_bound_gap(0.8, 0.8).unwrap(), 0.0);
        assert!(upper_bound_gap(90.9, 0.878).is_err());
    }
}
