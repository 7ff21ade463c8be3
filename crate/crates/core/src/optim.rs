//! Full-batch gradient descent and one-pass SGD from the origin, with
//! optional projection onto the unit ball and suffix averaging.
//!
//! Iterates are numbered from 1: `w_1 = 0` and a run of length `T` performs
//! `T - 1` updates. GD uses the mean subgradient over the whole dataset at
//! every step; SGD uses sample `t` at step `t`.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::vecops::{axpy, norm, scale};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Record {
    All,
    /// Keep only the last `m` iterates.
    Suffix(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    /// Number of iterates `T`.
    pub len: usize,
    pub projected: bool,
    /// 1-based step of each stored iterate, increasing.
    pub steps: Vec<usize>,
    pub iterates: Vec<Vec<f64>>,
    /// `‖w_t‖` for every `t`, whether stored or not.
    pub norms: Vec<f64>,
}

impl Trajectory {
    /// The stored iterate `w_t`, if `t` is inside the recorded window.
    pub fn iterate(&self, t: usize) -> Option<&[f64]> {
        self.steps
            .binary_search(&t)
            .ok()
            .map(|i| self.iterates[i].as_slice())
    }

    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("trajectories are never empty")
    }

    pub fn max_norm(&self) -> f64 {
        self.norms.iter().copied().fold(0.0, f64::max)
    }
}

/// `w / max(1, ‖w‖)`.
pub fn project_ball(w: &[f64]) -> Vec<f64> {
    let mut out = w.to_vec();
    project_in_place(&mut out);
    out
}

fn project_in_place(w: &mut [f64]) {
    let r = norm(w);
    if r > 1.0 {
        scale(1.0 / r, w);
    }
}

struct Recorder {
    record: Record,
    steps: VecDeque<usize>,
    iterates: VecDeque<Vec<f64>>,
    norms: Vec<f64>,
}

impl Recorder {
    fn new(record: Record) -> Self {
        Self {
            record,
            steps: VecDeque::new(),
            iterates: VecDeque::new(),
            norms: Vec::new(),
        }
    }

    fn push(&mut self, t: usize, w: &[f64]) {
        self.norms.push(norm(w));
        if let Record::Suffix(m) = self.record {
            if self.iterates.len() == m {
                self.steps.pop_front();
                self.iterates.pop_front();
            }
        }
        self.steps.push_back(t);
        self.iterates.push_back(w.to_vec());
    }

    fn finish(self, dim: usize, len: usize, projected: bool) -> Trajectory {
        Trajectory {
            dim,
            len,
            projected,
            steps: self.steps.into(),
            iterates: self.iterates.into(),
            norms: self.norms,
        }
    }
}

fn run<F>(
    dim: usize,
    len: usize,
    eta: f64,
    projected: bool,
    record: Record,
    mut grad: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    if len == 0 {
        return Err(Error::InvalidParams(
            "a run needs at least one iterate".into(),
        ));
    }
    if record == Record::Suffix(0) {
        return Err(Error::InvalidParams(
            "suffix window must be positive".into(),
        ));
    }
    let mut rec = Recorder::new(record);
    let mut w = vec![0.0; dim];
    rec.push(1, &w);
    for t in 1..len {
        let g = grad(t, &w).map_err(|e| e.at_step(t))?;
        axpy(-eta, &g, &mut w);
        if projected {
            project_in_place(&mut w);
        }
        rec.push(t + 1, &w);
    }
    Ok(rec.finish(dim, len, projected))
}

/// Full-batch GD for `len` iterates.
pub fn run_gd<O: Objective>(
    obj: &O,
    samples: &[O::Sample],
    eta: f64,
    len: usize,
    projected: bool,
    record: Record,
) -> Result<Trajectory> {
    if samples.is_empty() {
        return Err(Error::InvalidParams("GD needs a nonempty dataset".into()));
    }
    run(obj.dim(), len, eta, projected, record, |_, w| {
        obj.batch_grad(w, samples)
    })
}

/// One-pass SGD with `samples.len()` iterates; step `t` uses sample `t`.
pub fn run_sgd<O: Objective>(
    obj: &O,
    samples: &[O::Sample],
    eta: f64,
    projected: bool,
    record: Record,
) -> Result<Trajectory> {
    run(obj.dim(), samples.len(), eta, projected, record, |t, w| {
        obj.grad(w, &samples[t - 1])
    })
}

/// Mean of the last `m` iterates, `w_{T,m}`.
pub fn suffix_average(traj: &Trajectory, m: usize) -> Result<Vec<f64>> {
    if m == 0 || m > traj.len {
        return Err(Error::OutOfRange(format!(
            "suffix length {m} outside 1..={}",
            traj.len
        )));
    }
    let first = traj.len - m + 1;
    let mut acc = vec![0.0; traj.dim];
    for t in first..=traj.len {
        let w = traj.iterate(t).ok_or_else(|| {
            Error::OutOfRange(format!(
                "iterate {t} was not recorded (window starts at {})",
                traj.steps[0]
            ))
        })?;
        axpy(1.0, w, &mut acc);
    }
    scale(1.0 / m as f64, &mut acc);
    Ok(acc)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    len: usize,
    projected: bool,
    steps: Vec<usize>,
    norms: Vec<f64>,
    params: serde_json::Value,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.bin` (stored iterates as little-endian `f64`, row after
/// row) and `<stem>.json` (layout, step indices and `params`).
pub fn write_checkpoint(traj: &Trajectory, stem: &Path, params: serde_json::Value) -> Result<()> {
    let bin = with_ext(stem, "bin");
    let mut bytes = Vec::with_capacity(traj.iterates.len() * traj.dim * 8);
    for w in &traj.iterates {
        for x in w {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::File::create(&bin)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(&bin, e))?;
    let side = Sidecar {
        dim: traj.dim,
        len: traj.len,
        projected: traj.projected,
        steps: traj.steps.clone(),
        norms: traj.norms.clone(),
        params,
    };
    let json = with_ext(stem, "json");
    fs::write(&json, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&json, e))
}

/// Reads a checkpoint written by [`write_checkpoint`]; returns the
/// trajectory and the stored parameter document.
pub fn read_checkpoint(stem: &Path) -> Result<(Trajectory, serde_json::Value)> {
    let json = with_ext(stem, "json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let bin = with_ext(stem, "bin");
    let mut bytes = Vec::new();
    fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != side.steps.len() * side.dim * 8 {
        return Err(Error::InvalidParams(format!(
            "{} holds {} bytes, sidecar expects {} iterates of dimension {}",
            bin.display(),
            bytes.len(),
            side.steps.len(),
            side.dim
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let iterates = if side.dim == 0 {
        vec![Vec::new(); side.steps.len()]
    } else {
        values.chunks(side.dim).map(<[f64]>::to_vec).collect()
    };
    let traj = Trajectory {
        dim: side.dim,
        len: side.len,
        projected: side.projected,
        steps: side.steps,
        iterates,
        norms: side.norms,
    };
    Ok((traj, side.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance_smallstep::SmallStepParams;

    struct Zero;

    impl Objective for Zero {
        type Sample = ();
        fn dim(&self) -> usize {
            3
        }
        fn loss(&self, _: &[f64], _: &()) -> Result<f64> {
            Ok(0.0)
        }
        fn grad(&self, _: &[f64], _: &()) -> Result<Vec<f64>> {
            Ok(vec![0.0; 3])
        }
    }

    #[test]
    fn zero_loss_stays_at_origin() {
        let traj = run_gd(&Zero, &[()], 0.1, 5, false, Record::All).unwrap();
        assert!(traj.iterates.iter().all(|w| w.iter().all(|&x| x == 0.0)));
        let traj = run_sgd(&Zero, &[(); 4], 0.1, true, Record::All).unwrap();
        assert_eq!(traj.steps, vec![1, 2, 3, 4]);
    }

    #[test]
    fn projection() {
        assert_eq!(project_ball(&[0.3, 0.4]), vec![0.3, 0.4]);
        assert_eq!(project_ball(&[0.0, 2.0]), vec![0.0, 1.0]);
        let p = project_ball(&[3.0, 4.0]);
        assert_eq!(project_ball(&p), p);
    }

    #[test]
    fn suffix_window_and_average() {
        let p = SmallStepParams::new(0.02, 100).unwrap();
        let full = run_gd(&p, &[()], p.eta, 100, false, Record::All).unwrap();
        let tail = run_gd(&p, &[()], p.eta, 100, false, Record::Suffix(10)).unwrap();
        assert_eq!(tail.steps, (91..=100).collect::<Vec<_>>());
        assert_eq!(
            suffix_average(&full, 10).unwrap(),
            suffix_average(&tail, 10).unwrap()
        );
        assert_eq!(suffix_average(&full, 1).unwrap(), full.last());
        assert!(matches!(
            suffix_average(&tail, 11),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            suffix_average(&full, 0),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = SmallStepParams::new(0.05, 20).unwrap();
        let traj = run_gd(&p, &[()], p.eta, 20, true, Record::All).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("run");
        write_checkpoint(&traj, &stem, serde_json::to_value(&p).unwrap()).unwrap();
        let (back, params) = read_checkpoint(&stem).unwrap();
        assert_eq!(back, traj);
        assert_eq!(params["T"], 20);
    }
}
