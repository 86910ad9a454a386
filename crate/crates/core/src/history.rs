//! The pathwise state `(ΔT_1, η_1, ..., ΔT_n, η_n)` of a skeleton and the step path
//! `A^k` it determines.

use crate::error::{Error, Result};
use crate::path::PathView;
use crate::scalar::Scalar;
use crate::skeleton::Mark;

#[derive(Debug, Clone, PartialEq)]
struct Track<S> {
    // Index 0 is the origin: time 0, level 0, integral 0.
    times: Vec<S>,
    levels: Vec<i64>,
    integral: Vec<S>,
    max_level: Vec<i64>,
    merged: Vec<usize>,
}

impl<S: Scalar> Track<S> {
    fn new() -> Self {
        Self {
            times: vec![S::zero()],
            levels: vec![0],
            integral: vec![S::zero()],
            max_level: vec![0],
            merged: vec![0],
        }
    }

    fn last(&self) -> usize {
        self.times.len() - 1
    }

    /// Position of the last event at or before `t`.
    fn locate(&self, t: S) -> usize {
        self.times.partition_point(|s| *s <= t).saturating_sub(1)
    }
}

/// Merged events of a `d`-dimensional skeleton at mesh `ε`, with per-coordinate indices.
///
/// Event `n` (1-based) has time `T_n` and mark `η_n`; `T_0 = 0`. Times are stored
/// absolutely so that per-coordinate and merged times are the same floats.
#[derive(Debug, Clone, PartialEq)]
pub struct History<S> {
    mesh: S,
    times: Vec<S>,
    marks: Vec<Mark>,
    // Position of each merged event inside its coordinate's track.
    slots: Vec<usize>,
    tracks: Vec<Track<S>>,
}

impl<S: Scalar> History<S> {
    pub fn new(dim: usize, mesh: S) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        assert!(mesh > S::zero(), "mesh must be positive");
        Self {
            mesh,
            times: vec![S::zero()],
            marks: Vec::new(),
            slots: vec![0],
            tracks: (0..dim).map(|_| Track::new()).collect(),
        }
    }

    /// Rebuilds a history from inter-arrival times and marks.
    pub fn from_increments(dim: usize, mesh: S, steps: &[(S, Mark)]) -> Result<Self> {
        let mut h = Self::new(dim, mesh);
        for &(dt, mark) in steps {
            h.push(dt, mark)?;
        }
        Ok(h)
    }

    pub fn mesh(&self) -> S {
        self.mesh
    }

    pub fn dimension(&self) -> usize {
        self.tracks.len()
    }

    /// Number of events `n`.
    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    /// `T_n` for `n` in `0..=len`.
    pub fn time(&self, n: usize) -> S {
        self.times[n]
    }

    /// `T_1, ..., T_len`.
    pub fn event_times(&self) -> &[S] {
        &self.times[1..]
    }

    pub fn current_time(&self) -> S {
        self.times[self.len()]
    }

    /// `η_n` for `n` in `1..=len`.
    pub fn mark(&self, n: usize) -> Mark {
        self.marks[n - 1]
    }

    pub fn marks(&self) -> &[Mark] {
        &self.marks
    }

    /// `ΔT_n = T_n − T_{n−1}`.
    pub fn increment(&self, n: usize) -> S {
        self.times[n] - self.times[n - 1]
    }

    /// `(ΔT_i, η_i)` for `i = 1..=len`.
    pub fn increments(&self) -> Vec<(S, Mark)> {
        (1..=self.len()).map(|n| (self.increment(n), self.mark(n))).collect()
    }

    fn check_coordinate(&self, j: usize) -> Result<()> {
        if j < self.dimension() {
            Ok(())
        } else {
            Err(Error::CoordinateOutOfRange { coordinate: j, dimension: self.dimension() })
        }
    }

    /// Appends an event at absolute time `time > T_n`. A time equal to `T_n` is accepted
    /// only from a higher coordinate than event `n` (ties are ordered by coordinate).
    pub fn push_at(&mut self, time: S, mark: Mark) -> Result<()> {
        self.check_coordinate(mark.coordinate)?;
        let tie_ok = time == self.current_time()
            && self.marks.last().is_some_and(|last| last.coordinate < mark.coordinate);
        if time <= self.current_time() && !tie_ok {
            return Err(Error::DegenerateInput(format!(
                "event time {time} does not exceed {}",
                self.current_time()
            )));
        }
        let track = &mut self.tracks[mark.coordinate];
        let i = track.last();
        let level = track.levels[i] + i64::from(mark.sign);
        let int = track.integral[i] + self.mesh * S::from_i64_lossy(track.levels[i]) * (time - track.times[i]);
        track.times.push(time);
        track.levels.push(level);
        track.integral.push(int);
        track.max_level.push(track.max_level[i].max(level));
        track.merged.push(self.marks.len() + 1);
        self.slots.push(i + 1);
        self.times.push(time);
        self.marks.push(mark);
        Ok(())
    }

    /// Appends an event after the inter-arrival `dt > 0`.
    pub fn push(&mut self, dt: S, mark: Mark) -> Result<()> {
        if !(dt > S::zero()) {
            return Err(Error::DegenerateInput(format!("inter-arrival {dt} is not positive")));
        }
        self.push_at(self.current_time() + dt, mark)
    }

    /// Removes the last event.
    pub fn pop(&mut self) -> Option<(S, Mark)> {
        let mark = self.marks.pop()?;
        let dt = self.increment(self.marks.len() + 1);
        self.times.pop();
        self.slots.pop();
        let track = &mut self.tracks[mark.coordinate];
        track.times.pop();
        track.levels.pop();
        track.integral.pop();
        track.max_level.pop();
        track.merged.pop();
        Some((dt, mark))
    }

    /// The projection onto the first `n` events.
    pub fn prefix(&self, n: usize) -> Self {
        let mut h = self.clone();
        while h.len() > n {
            h.pop();
        }
        h
    }

    /// Time since the last coordinate-`j` event (or since 0), measured at `T_n`.
    pub fn elapsed(&self, j: usize) -> S {
        let track = &self.tracks[j];
        self.current_time() - track.times[track.last()]
    }

    /// Number of coordinate-`j` events in `(0, t]`.
    pub fn count(&self, j: usize, t: S) -> usize {
        self.tracks[j].locate(t)
    }

    pub fn coordinate_count(&self, j: usize) -> usize {
        self.tracks[j].last()
    }

    /// `T^{j}_m` for `m` in `0..=coordinate_count(j)`.
    pub fn coordinate_time(&self, j: usize, m: usize) -> S {
        self.tracks[j].times[m]
    }

    pub fn coordinate_times(&self, j: usize) -> &[S] {
        &self.tracks[j].times
    }

    /// Merged index of the `m`-th coordinate-`j` event.
    pub fn merged_index(&self, j: usize, m: usize) -> usize {
        self.tracks[j].merged[m]
    }

    /// Lattice level `A^j(T^j_m)/ε`.
    pub fn coordinate_level(&self, j: usize, m: usize) -> i64 {
        self.tracks[j].levels[m]
    }

    /// Lattice level of the event's own coordinate just after event `n`.
    pub fn level_after(&self, n: usize) -> i64 {
        if n == 0 {
            return 0;
        }
        let mark = self.mark(n);
        self.tracks[mark.coordinate].levels[self.slots[n]]
    }

    /// `A^j(t)/ε`.
    pub fn level(&self, j: usize, t: S) -> i64 {
        let track = &self.tracks[j];
        track.levels[track.locate(t)]
    }

    /// `A^j(T_n)`.
    pub fn value_at_event(&self, j: usize, n: usize) -> S {
        let track = &self.tracks[j];
        let m = if n > 0 && self.mark(n).coordinate == j {
            self.slots[n]
        } else {
            track.locate(self.times[n])
        };
        self.mesh * S::from_i64_lossy(track.levels[m])
    }
}

impl<S: Scalar> PathView<S> for History<S> {
    fn dim(&self) -> usize {
        self.dimension()
    }

    fn value(&self, j: usize, t: S) -> S {
        self.mesh * S::from_i64_lossy(self.level(j, t))
    }

    fn integral(&self, j: usize, t: S) -> S {
        if t <= S::zero() {
            return S::zero();
        }
        let track = &self.tracks[j];
        let m = track.locate(t);
        track.integral[m] + self.mesh * S::from_i64_lossy(track.levels[m]) * (t - track.times[m])
    }

    fn running_max(&self, j: usize, t: S) -> S {
        let track = &self.tracks[j];
        self.mesh * S::from_i64_lossy(track.max_level[track.locate(t)])
    }
}
