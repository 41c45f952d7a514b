//! Trajectory datasets and their JSON file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};

/// One recorded trajectory. `u[k]` is the control applied from `t[k]` to `t[k+1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Window of `horizon` transitions starting at `offset`.
    pub fn segment(&self, offset: usize, horizon: usize) -> Result<Segment> {
        if offset + horizon >= self.x.len() {
            return Err(Error::shape(format!(
                "segment [{offset}, {}] exceeds a trajectory of {} points",
                offset + horizon,
                self.x.len()
            )));
        }
        Ok(Segment {
            x: Mat::from_rows(&self.x[offset..=offset + horizon])?,
            u: Mat::from_rows(&self.u[offset..offset + horizon])?,
        })
    }
}

/// States `x_i ..= x_{i+H}` and the controls `u_i .. u_{i+H-1}` between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub x: Mat,
    pub u: Mat,
}

impl Segment {
    pub fn horizon(&self) -> usize {
        self.u.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub dt: f64,
    pub state_dim: usize,
    pub control_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("dataset dt must be > 0"));
        }
        for (i, tr) in self.trajectories.iter().enumerate() {
            if tr.t.len() != tr.x.len() || tr.u.len() != tr.x.len() {
                return Err(Error::shape(format!("trajectory {i}: t, x and u lengths differ")));
            }
            if tr.x.iter().any(|x| x.len() != self.state_dim) || tr.u.iter().any(|u| u.len() != self.control_dim) {
                return Err(Error::shape(format!("trajectory {i}: wrong state or control width")));
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Every `[x; u]` in the dataset, one per row.
    pub fn all_points(&self) -> Mat {
        let rows: Vec<Vec<f64>> = self
            .trajectories
            .iter()
            .flat_map(|tr| tr.x.iter().zip(&tr.u).map(|(x, u)| x.iter().chain(u).copied().collect()))
            .collect();
        if rows.is_empty() {
            return Mat::zeros(0, self.state_dim + self.control_dim);
        }
        Mat::from_rows(&rows).expect("validated widths")
    }

    /// Per-dimension variance of one-step state differences, floored at `1e-6`.
    pub fn step_difference_variance(&self) -> Vec<f64> {
        let n = self.state_dim;
        let diffs: Vec<Vec<f64>> = self
            .trajectories
            .iter()
            .flat_map(|tr| tr.x.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()))
            .collect();
        let count = diffs.len() as f64;
        (0..n)
            .map(|i| {
                if diffs.len() < 2 {
                    return 1e-6;
                }
                let mean = diffs.iter().map(|d| d[i]).sum::<f64>() / count;
                let var = diffs.iter().map(|d| (d[i] - mean).powi(2)).sum::<f64>() / (count - 1.0);
                var.max(1e-6)
            })
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ds: Dataset = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            dt: 0.1,
            state_dim: 1,
            control_dim: 1,
            trajectories: vec![Trajectory {
                t: vec![0.0, 0.1, 0.2],
                x: vec![vec![1.0], vec![0.5], vec![0.1]],
                u: vec![vec![0.0], vec![1.0], vec![2.0]],
            }],
        }
    }

    #[test]
    fn segment_bounds() {
        let ds = tiny();
        let s = ds.trajectories[0].segment(0, 2).unwrap();
        assert_eq!(s.x.rows(), 3);
        assert_eq!(s.u.rows(), 2);
        assert!(matches!(ds.trajectories[0].segment(1, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn json_round_trip() {
        let ds = tiny();
        let back: Dataset = serde_json::from_str(&ds.to_json_string()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"dt":0.1,"state_dim":1,"control_dim":0,"trajectories":[],"extra":1}"#;
        assert!(serde_json::from_str::<Dataset>(text).is_err());
    }

    #[test]
    fn step_variance_floor() {
        let mut ds = tiny();
        ds.trajectories[0].x = vec![vec![1.0]; 3];
        assert_eq!(ds.step_difference_variance(), vec![1e-6]);
        let v = tiny().step_difference_variance();
        assert!((v[0] - 0.005).abs() < 1e-12);
    }
}
