//! Realizations of the discrete-type skeleton: hitting times `T^{k,j}_n` of `±ε` moves
//! of each Brownian coordinate and the random walks `A^{k,j}` they drive.

use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit_time::ExitLaw;
use crate::history::History;
use crate::numerics::quadrature::integrate;
use crate::path::{PathView, SampledPath};
use crate::scalar::Scalar;

/// First mesh of the default schedule `ε_k = 0.4·2^{-k}`.
pub const DEFAULT_MESH_BASE: f64 = 0.4;

/// Ratio `ε²/h` below which a sampled path is too coarse for crossing detection.
pub const MIN_GRID_RATIO: f64 = 100.0;

/// `ε_k = base·2^{-k}`.
pub fn schedule_mesh<S: Scalar>(base: S, k: usize) -> S {
    base * S::lit(0.5).powi(k as i32)
}

/// `(k, ε_k)` for each requested level.
pub fn mesh_schedule<S: Scalar>(base: S, levels: impl IntoIterator<Item = usize>) -> Vec<(usize, S)> {
    levels.into_iter().map(|k| (k, schedule_mesh(base, k))).collect()
}

/// Which coordinate moved at an event, and in which direction. Coordinates are
/// 0-based here and 1-based in the integer code and in files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mark {
    pub coordinate: usize,
    pub sign: i8,
}

impl Mark {
    pub fn new(coordinate: usize, sign: i8) -> Self {
        assert!(sign == 1 || sign == -1, "mark sign must be ±1");
        Self { coordinate, sign }
    }

    /// `±(j + 1)`.
    pub fn encode(self) -> i64 {
        i64::from(self.sign) * (self.coordinate as i64 + 1)
    }

    pub fn decode(code: i64, dim: usize) -> Result<Self> {
        let j = code.unsigned_abs() as usize;
        if code == 0 || j > dim {
            return Err(Error::CoordinateOutOfRange { coordinate: j, dimension: dim });
        }
        Ok(Self::new(j - 1, code.signum() as i8))
    }

    /// The vector `η ∈ {−1, 0, 1}^d` with one nonzero entry.
    pub fn to_vector(self, dim: usize) -> Vec<i8> {
        let mut v = vec![0; dim];
        v[self.coordinate] = self.sign;
        v
    }

    pub fn from_vector(v: &[i8]) -> Result<Self> {
        let nonzero: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0).collect();
        match nonzero.as_slice() {
            [j] if v[*j].abs() == 1 => Ok(Self::new(*j, v[*j])),
            _ => Err(Error::DegenerateInput(format!("{v:?} is not a mark vector"))),
        }
    }

    pub fn sign_scalar<S: Scalar>(self) -> S {
        if self.sign > 0 {
            S::one()
        } else {
            -S::one()
        }
    }

    pub fn fair_sign<R: Rng + ?Sized>(rng: &mut R) -> i8 {
        if rng.random::<bool>() {
            1
        } else {
            -1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Intrinsic,
    PathDriven,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Intrinsic => "intrinsic",
            Mode::PathDriven => "path_driven",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "intrinsic" => Some(Mode::Intrinsic),
            "path_driven" => Some(Mode::PathDriven),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig<S> {
    pub dimension: usize,
    pub mesh: S,
    pub horizon: S,
    pub mode: Mode,
    /// Intrinsic generation continues until at least this many merged events exist.
    pub min_events: usize,
}

impl<S: Scalar> SkeletonConfig<S> {
    pub fn intrinsic(dimension: usize, mesh: S, horizon: S) -> Self {
        Self { dimension, mesh, horizon, mode: Mode::Intrinsic, min_events: 0 }
    }

    /// Also asks for the horizon index `⌈d·T/ε²⌉` of merged events.
    pub fn through_horizon_index(mut self) -> Self {
        self.min_events = self.horizon_index();
        self
    }

    /// `⌈d·T/ε²⌉`: the merged event whose expected time is `T`.
    pub fn horizon_index(&self) -> usize {
        let r = S::from_usize_lossy(self.dimension) * self.horizon / (self.mesh * self.mesh);
        // Guard against ⌈·⌉ rounding up an exact integer polluted by one ulp.
        let nearest = r.round();
        let r = if (r - nearest).abs() <= r * S::epsilon() * S::lit(4.0) { nearest } else { r.ceil() };
        r.to_usize().unwrap_or(usize::MAX).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if !(self.mesh > S::zero() && self.mesh.is_finite()) {
            return Err(Error::Config(format!("mesh {} must be positive", self.mesh)));
        }
        if !(self.horizon > S::zero() && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon {} must be positive", self.horizon)));
        }
        Ok(())
    }
}

/// One realization of `{T^{k,j}_n, A^{k,j}}` for `j < d`. Immutable once built.
#[derive(Debug, Clone)]
pub struct Skeleton<S> {
    config: SkeletonConfig<S>,
    events: History<S>,
    driving: Option<Arc<SampledPath<S>>>,
}

impl<S: Scalar> Skeleton<S> {
    /// Renewal construction `T^{j}_n = T^{j}_{n−1} + ε²τ` with fair signs, run until
    /// every coordinate has an event past the horizon and `min_events` is reached.
    pub fn generate_intrinsic<R: Rng + ?Sized>(
        config: SkeletonConfig<S>,
        law: &ExitLaw<S>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode != Mode::Intrinsic {
            return Err(Error::ModeMismatch("generate_intrinsic needs intrinsic mode".into()));
        }
        let d = config.dimension;
        let eps2 = config.mesh * config.mesh;
        let mut events = History::new(d, config.mesh);
        let mut pending = Vec::with_capacity(d);
        for _ in 0..d {
            let t = eps2 * law.sample(rng)?;
            pending.push((t, Mark::fair_sign(rng)));
        }
        let mut beyond = vec![false; d];
        while !(beyond.iter().all(|&b| b) && events.len() >= config.min_events) {
            let mut j = 0;
            for i in 1..d {
                if pending[i].0 < pending[j].0 {
                    j = i;
                }
            }
            let (t, sign) = pending[j];
            events.push_at(t, Mark::new(j, sign))?;
            beyond[j] |= t > config.horizon;
            let next = t + eps2 * law.sample(rng)?;
            pending[j] = (next, Mark::fair_sign(rng));
        }
        Ok(Self { config, events, driving: None })
    }

    /// Crossing times of the lattice `B^j(0) + εℤ` by a uniformly sampled path, located by
    /// linear interpolation; the horizon is the end of the path.
    pub fn extract_from_path(path: Arc<SampledPath<S>>, mesh: S) -> Result<Self> {
        let horizon = path.end();
        Self::extract_with_horizon(path, mesh, horizon)
    }

    pub fn extract_with_horizon(path: Arc<SampledPath<S>>, mesh: S, horizon: S) -> Result<Self> {
        let config = SkeletonConfig {
            dimension: path.dim(),
            mesh,
            horizon,
            mode: Mode::PathDriven,
            min_events: 0,
        };
        config.validate()?;
        if horizon > path.end() {
            return Err(Error::Config(format!("horizon {horizon} is past the path end {}", path.end())));
        }
        let h = path
            .uniform_step()
            .ok_or_else(|| Error::DegenerateInput("crossing detection needs a uniform grid".into()))?;
        if h * S::lit(MIN_GRID_RATIO) > mesh * mesh {
            return Err(Error::GridTooCoarse { step: h.as_f64(), mesh: mesh.as_f64() });
        }
        let mut all = Vec::new();
        for j in 0..path.dim() {
            all.extend(crossings(path.coordinate(j).values(), h, mesh).into_iter().map(|(t, s)| (t, j, s)));
        }
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times").then(a.1.cmp(&b.1)));
        let mut events = History::new(path.dim(), mesh);
        for (t, j, s) in all {
            events.push_at(t, Mark::new(j, s))?;
        }
        Ok(Self { config, events, driving: Some(path) })
    }

    /// Wraps an existing event history, e.g. one read back from disk.
    pub fn from_history(config: SkeletonConfig<S>, events: History<S>) -> Result<Self> {
        config.validate()?;
        if events.dimension() != config.dimension || events.mesh() != config.mesh {
            return Err(Error::Config("history does not match the configuration".into()));
        }
        Ok(Self { config, events, driving: None })
    }

    pub fn config(&self) -> &SkeletonConfig<S> {
        &self.config
    }

    pub fn mesh(&self) -> S {
        self.config.mesh
    }

    pub fn horizon(&self) -> S {
        self.config.horizon
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn events(&self) -> &History<S> {
        &self.events
    }

    pub fn driving_path(&self) -> Option<&Arc<SampledPath<S>>> {
        self.driving.as_ref()
    }

    /// Number of merged events in `(0, t]`.
    pub fn count_to(&self, t: S) -> usize {
        self.events.event_times().partition_point(|s| *s <= t)
    }

    /// Number of merged events up to the horizon.
    pub fn events_in_horizon(&self) -> usize {
        self.count_to(self.horizon())
    }

    /// `A^{k,j}(t)`.
    pub fn walk(&self, j: usize, t: S) -> S {
        self.events.value(j, t)
    }

    fn check_coordinate(&self, j: usize) -> Result<()> {
        if j < self.dimension() {
            Ok(())
        } else {
            Err(Error::CoordinateOutOfRange { coordinate: j, dimension: self.dimension() })
        }
    }

    /// `[A^{k,j}, A^{k,j}](t) = ε²·#{n : T^{k,j}_n ≤ t}`.
    pub fn quadratic_variation(&self, j: usize, t: S) -> Result<S> {
        self.check_coordinate(j)?;
        Ok(self.mesh() * self.mesh() * S::from_usize_lossy(self.events.count(j, t)))
    }

    /// `⟨A^{k,j}, A^{k,j}⟩(t) = ε² ∫_0^t h^{k,j}(s) ds`, the hazard of the scaled exit law
    /// integrated by adaptive quadrature over each inter-event interval.
    pub fn angle_bracket(&self, j: usize, t: S, law: &ExitLaw<S>, abs_tol: S) -> Result<S> {
        self.check_coordinate(j)?;
        let eps2 = self.mesh() * self.mesh();
        let times = self.events.coordinate_times(j);
        let mut total = S::zero();
        for (m, &start) in times.iter().enumerate() {
            if start >= t {
                break;
            }
            let stop = times.get(m + 1).map_or(t, |&next| next.min(t));
            let span = (stop - start) / eps2;
            total += eps2 * integrate(|u| law.hazard(u), S::zero(), span, abs_tol)?;
        }
        Ok(total)
    }

    /// `max_n ΔT^k_n` over merged events at or before the horizon (0 if none).
    pub fn max_increment(&self) -> S {
        (1..=self.events_in_horizon()).map(|n| self.events.increment(n)).fold(S::zero(), |a, b| a.max(b))
    }

    /// Writes the event list as CSV (`coordinate,n,time,sign`, 1-based), in merged order,
    /// after a `#` line carrying the configuration.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        writeln!(
            w,
            "# dimension={} mesh={} horizon={} mode={} min_events={}",
            c.dimension,
            c.mesh,
            c.horizon,
            c.mode.name(),
            c.min_events
        )?;
        writeln!(w, "coordinate,n,time,sign")?;
        let mut seen = vec![0usize; c.dimension];
        for n in 1..=self.events.len() {
            let mark = self.events.mark(n);
            seen[mark.coordinate] += 1;
            writeln!(w, "{},{},{},{}", mark.coordinate + 1, seen[mark.coordinate], self.events.time(n), mark.sign)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { line: line + 1, message };
        let (i, header) = lines.next().ok_or_else(|| parse_err(0, "empty input".into()))?;
        let header = header?;
        let config = parse_config_line(header.trim_start_matches('#')).map_err(|m| parse_err(i, m))?;
        match lines.next() {
            Some((_, Ok(l))) if l.trim() == "coordinate,n,time,sign" => {}
            Some((i, _)) => return Err(parse_err(i, "expected column header".into())),
            None => return Err(parse_err(1, "missing column header".into())),
        }
        let mut events = History::new(config.dimension, config.mesh);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(parse_err(i, format!("expected 4 fields, found {}", fields.len())));
            }
            let coordinate: usize = fields[0].parse().map_err(|_| parse_err(i, "bad coordinate".into()))?;
            let time: S = fields[2].parse().map_err(|_| parse_err(i, "bad time".into()))?;
            let sign: i8 = fields[3].parse().map_err(|_| parse_err(i, "bad sign".into()))?;
            if coordinate == 0 || coordinate > config.dimension || sign.abs() != 1 {
                return Err(parse_err(i, "mark out of range".into()));
            }
            events.push_at(time, Mark::new(coordinate - 1, sign)).map_err(|e| parse_err(i, e.to_string()))?;
        }
        Self::from_history(config, events)
    }

    /// Little-endian binary dump: magic, configuration, then `(coordinate u32, time f64,
    /// sign i8)` per merged event.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(c.dimension as u32).to_le_bytes())?;
        w.write_all(&c.mesh.as_f64().to_le_bytes())?;
        w.write_all(&c.horizon.as_f64().to_le_bytes())?;
        w.write_all(&[matches!(c.mode, Mode::PathDriven) as u8])?;
        w.write_all(&(c.min_events as u64).to_le_bytes())?;
        w.write_all(&(self.events.len() as u64).to_le_bytes())?;
        for n in 1..=self.events.len() {
            let mark = self.events.mark(n);
            w.write_all(&(mark.coordinate as u32).to_le_bytes())?;
            w.write_all(&self.events.time(n).as_f64().to_le_bytes())?;
            w.write_all(&mark.sign.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Parse { line: 0, message: "not a skeleton dump".into() });
        }
        let dimension = read_u32(&mut r)? as usize;
        let mesh = S::lit(read_f64(&mut r)?);
        let horizon = S::lit(read_f64(&mut r)?);
        let mut mode = [0u8; 1];
        r.read_exact(&mut mode)?;
        let mode = if mode[0] == 1 { Mode::PathDriven } else { Mode::Intrinsic };
        let min_events = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        let config = SkeletonConfig { dimension, mesh, horizon, mode, min_events };
        config.validate()?;
        let mut events = History::new(dimension, mesh);
        for _ in 0..count {
            let j = read_u32(&mut r)? as usize;
            let t = S::lit(read_f64(&mut r)?);
            let mut s = [0u8; 1];
            r.read_exact(&mut s)?;
            let sign = i8::from_le_bytes(s);
            if sign.abs() != 1 {
                return Err(Error::Parse { line: 0, message: format!("bad sign {sign}") });
            }
            events.push_at(t, Mark::new(j, sign))?;
        }
        Self::from_history(config, events)
    }
}

impl<S: Scalar> PathView<S> for Skeleton<S> {
    fn dim(&self) -> usize {
        self.dimension()
    }

    fn value(&self, j: usize, t: S) -> S {
        self.events.value(j, t)
    }

    fn integral(&self, j: usize, t: S) -> S {
        self.events.integral(j, t)
    }

    fn running_max(&self, j: usize, t: S) -> S {
        self.events.running_max(j, t)
    }
}

const BINARY_MAGIC: &[u8; 8] = b"WKSKEL01";

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn parse_config_line<S: Scalar>(line: &str) -> std::result::Result<SkeletonConfig<S>, String> {
    let mut config = SkeletonConfig::intrinsic(0, S::zero(), S::zero());
    for field in line.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| format!("malformed field {field:?}"))?;
        let bad = || format!("bad value for {key}: {value:?}");
        match key {
            "dimension" => config.dimension = value.parse().map_err(|_| bad())?,
            "mesh" => config.mesh = value.parse().map_err(|_| bad())?,
            "horizon" => config.horizon = value.parse().map_err(|_| bad())?,
            "mode" => config.mode = Mode::parse(value).ok_or_else(bad)?,
            "min_events" => config.min_events = value.parse().map_err(|_| bad())?,
            _ => return Err(format!("unknown key {key:?}")),
        }
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

/// Crossings of `x_0 + εℤ` by the polyline through `values` (grid step `h`), as
/// `(time, sign)`. Several crossings inside one grid step are all reported, in order.
fn crossings<S: Scalar>(values: &[S], h: S, eps: S) -> Vec<(S, i8)> {
    let x0 = values[0];
    let mut level = 0i64;
    let mut last = S::zero();
    let mut out = Vec::new();
    for i in 1..values.len() {
        let (a, b) = (values[i - 1], values[i]);
        loop {
            let up = x0 + eps * S::from_i64_lossy(level + 1);
            let down = x0 + eps * S::from_i64_lossy(level - 1);
            let (target, sign) = if b >= up {
                (up, 1i8)
            } else if b <= down {
                (down, -1i8)
            } else {
                break;
            };
            let w = ((target - a) / (b - a)).max(S::zero()).min(S::one());
            let mut t = h * S::from_usize_lossy(i - 1) + h * w;
            if t <= last {
                t = last + last.abs() * S::epsilon() + S::min_positive_value();
            }
            out.push((t, sign));
            last = t;
            level += i64::from(sign);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::stats::Summary;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn intrinsic(d: usize, eps: f64, horizon: f64, seed: u64) -> Skeleton<f64> {
        let law = ExitLaw::default();
        Skeleton::generate_intrinsic(SkeletonConfig::intrinsic(d, eps, horizon), &law, &mut stream(seed, 0)).unwrap()
    }

    #[test]
    fn mark_codes_round_trip() {
        for d in 1..4 {
            for j in 0..d {
                for s in [-1, 1] {
                    let m = Mark::new(j, s);
                    assert_eq!(Mark::decode(m.encode(), d).unwrap(), m);
                    assert_eq!(Mark::from_vector(&m.to_vector(d)).unwrap(), m);
                    assert_eq!(m.to_vector(d).iter().map(|x| usize::from(x.unsigned_abs())).sum::<usize>(), 1);
                }
            }
        }
        assert!(Mark::decode(0, 2).is_err());
        assert!(Mark::decode(3, 2).is_err());
        assert!(Mark::from_vector(&[1, -1]).is_err());
    }

    #[test]
    fn schedule_is_square_summable() {
        let s = mesh_schedule(DEFAULT_MESH_BASE, 0..60);
        assert_eq!(s[2].1, 0.1);
        let total: f64 = s.iter().map(|(_, e)| e * e).sum();
        assert!((total - 0.16 * 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn horizon_index_is_exact_on_integers() {
        let c = SkeletonConfig::intrinsic(1, 0.1, 1.0);
        assert_eq!(c.horizon_index(), 100);
        assert_eq!(SkeletonConfig::intrinsic(2, 0.05, 1.0).horizon_index(), 800);
        assert_eq!(SkeletonConfig::intrinsic(1, 0.3, 1.0).horizon_index(), 12);
    }

    #[test]
    fn intrinsic_walk_has_exact_unit_jumps() {
        let s = intrinsic(3, 0.1, 2.0, 5);
        let ev = s.events();
        for j in 0..3 {
            assert!(ev.coordinate_time(j, ev.coordinate_count(j)) > 2.0);
            for m in 1..=ev.coordinate_count(j) {
                let jump = ev.coordinate_level(j, m) - ev.coordinate_level(j, m - 1);
                assert_eq!(jump.abs(), 1);
                let t = ev.coordinate_time(j, m);
                assert_eq!(s.walk(j, t), 0.1 * ev.coordinate_level(j, m) as f64);
            }
        }
        assert!(ev.event_times().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn merged_list_is_sorted_union() {
        let s = intrinsic(2, 0.2, 3.0, 6);
        let ev = s.events();
        let mut union: Vec<(f64, usize)> = Vec::new();
        for j in 0..2 {
            for m in 1..=ev.coordinate_count(j) {
                union.push((ev.coordinate_time(j, m), j));
                assert_eq!(ev.mark(ev.merged_index(j, m)).coordinate, j);
            }
        }
        union.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let merged: Vec<(f64, usize)> = (1..=ev.len()).map(|n| (ev.time(n), ev.mark(n).coordinate)).collect();
        assert_eq!(union, merged);
    }

    #[test]
    fn mean_interarrival_and_fair_signs() {
        let s = intrinsic(1, 1.0, 200_000.0, 7);
        let ev = s.events();
        let gaps: Vec<f64> = (1..=ev.len()).map(|n| ev.increment(n)).collect();
        let summary = Summary::from_slice(&gaps);
        assert!(ev.len() > 190_000);
        assert!(summary.z_score(1.0).abs() < 3.0, "mean {}", summary.mean);
        let plus: Vec<f64> = ev.marks().iter().map(|m| f64::from(m.sign > 0)).collect();
        assert!(Summary::from_slice(&plus).z_score(0.5).abs() < 3.0);
    }

    #[test]
    fn two_coordinates_never_tie() {
        for seed in 0..2000 {
            let s = intrinsic(2, 0.3, 1.0, seed);
            assert!(s.events().event_times().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn quadratic_variation_counts_events() {
        let s = intrinsic(1, 0.1, 1.0, 8);
        let ev = s.events();
        assert_eq!(s.quadratic_variation(0, ev.time(1) * 0.5).unwrap(), 0.0);
        assert_eq!(s.quadratic_variation(0, ev.time(1)).unwrap(), 0.1 * 0.1);
        assert!(s.quadratic_variation(1, 1.0).is_err());
        let mean = (0..10_000)
            .map(|i| intrinsic(1, 0.1, 1.0, 1000 + i).quadratic_variation(0, 1.0).unwrap())
            .sum::<f64>()
            / 10_000.0;
        // Renewal theorem: E N(t) = t/ε² + O(1).
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn angle_bracket_matches_cumulative_hazard() {
        // ∫_0^u hazard = −ln S(u), so the bracket is −ε² Σ ln S(Δ/ε²).
        let law = ExitLaw::default();
        let s = intrinsic(2, 0.1, 1.0, 9);
        for j in 0..2 {
            let times = s.events().coordinate_times(j);
            for t in [0.013, 0.37, 1.0] {
                let mut oracle = 0.0;
                for (m, &a) in times.iter().enumerate() {
                    if a >= t {
                        break;
                    }
                    let b = times.get(m + 1).map_or(t, |&x| x.min(t));
                    oracle -= 0.01 * law.survival((b - a) / 0.01).ln();
                }
                let got = s.angle_bracket(j, t, &law, 1e-12).unwrap();
                assert!((got - oracle).abs() < 1e-9, "t={t}: {got} vs {oracle}");
            }
        }
        assert!(s.angle_bracket(0, 1e-6, &law, 1e-12).unwrap() < 1e-12);
    }

    #[test]
    fn angle_bracket_compensates_squared_walk() {
        let law = ExitLaw::default();
        let (mut bracket, mut square) = (Summary::default(), Summary::default());
        for i in 0..10_000 {
            let s = intrinsic(1, 0.1, 1.0, 20_000 + i);
            bracket.push(s.angle_bracket(0, 1.0, &law, 1e-10).unwrap());
            square.push(s.walk(0, 1.0).powi(2));
        }
        let gap = bracket.mean - square.mean;
        let se = (bracket.stderr().powi(2) + square.stderr().powi(2)).sqrt();
        assert!(gap.abs() < 3.0 * se, "bracket {} vs A² {}", bracket.mean, square.mean);
        assert!((bracket.mean - 1.0).abs() < 0.02);
    }

    #[test]
    fn walk_is_centered() {
        for t in [0.25, 0.5, 1.0] {
            let values: Vec<f64> = (0..10_000).map(|i| intrinsic(1, 0.1, 1.0, 50_000 + i).walk(0, t)).collect();
            assert!(Summary::from_slice(&values).z_score(0.0).abs() < 3.0);
        }
    }

    #[test]
    fn rescaling_the_mesh_rescales_time() {
        for seed in 0..200 {
            let fine = intrinsic(2, 0.25, 1.0, seed);
            let unit = intrinsic(2, 1.0, 16.0, seed);
            assert_eq!(fine.events().len(), unit.events().len());
            assert_eq!(fine.events_in_horizon(), unit.events_in_horizon());
            for n in 1..=fine.events().len() {
                assert_eq!(fine.events().time(n) * 16.0, unit.events().time(n));
                assert_eq!(fine.events().mark(n), unit.events().mark(n));
            }
        }
    }

    #[test]
    fn min_events_extends_generation() {
        let law = ExitLaw::default();
        let config = SkeletonConfig::intrinsic(1, 0.1, 1.0).through_horizon_index();
        for seed in 0..100 {
            let s = Skeleton::generate_intrinsic(config, &law, &mut stream(seed, 3)).unwrap();
            assert!(s.events().len() >= 100);
            assert!(s.events().current_time() > 1.0);
        }
    }

    #[test]
    fn max_increment_examples() {
        let mut h = History::new(1, 0.1);
        h.push(0.4, Mark::new(0, 1)).unwrap();
        let s = Skeleton::from_history(SkeletonConfig::intrinsic(1, 0.1, 1.0), h).unwrap();
        assert_eq!(s.max_increment(), 0.4);
        let mean = (0..1000).map(|i| intrinsic(1, 0.05, 1.0, 70_000 + i).max_increment()).sum::<f64>() / 1000.0;
        assert!(mean > 0.0025);
    }

    #[test]
    fn max_increment_moments_decrease_along_schedule() {
        let law = ExitLaw::default();
        let mut last = f64::INFINITY;
        for (k, eps) in mesh_schedule(DEFAULT_MESH_BASE, 2..=6) {
            let q2: f64 = (0..1000)
                .map(|i| {
                    let c = SkeletonConfig::intrinsic(1, eps, 1.0);
                    Skeleton::generate_intrinsic(c, &law, &mut stream(k as u64, i)).unwrap().max_increment().powi(2)
                })
                .sum::<f64>()
                / 1000.0;
            assert!(q2 < last, "level {k}: {q2} vs {last}");
            last = q2;
        }
    }

    #[test]
    fn ramp_crosses_every_level_upward() {
        let h = 1e-4;
        let values: Vec<f64> = (0..=10_000).map(|i| i as f64 * h).collect();
        let path = Arc::new(SampledPath::uniform(h, vec![values]));
        let s = Skeleton::extract_from_path(path, 0.1).unwrap();
        let ev = s.events();
        assert_eq!(ev.len(), 10);
        for n in 1..=10 {
            assert!((ev.time(n) - 0.1 * n as f64).abs() < 1e-12);
            assert_eq!(ev.mark(n), Mark::new(0, 1));
        }
    }

    #[test]
    fn constant_path_has_no_events() {
        let path = Arc::new(SampledPath::uniform(1e-5, vec![vec![0.3; 1000], vec![-1.0; 1000]]));
        let s = Skeleton::extract_from_path(path, 0.05).unwrap();
        assert!(s.events().is_empty());
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let path = Arc::new(SampledPath::uniform(1e-3, vec![vec![0.0; 10]]));
        assert!(matches!(Skeleton::extract_from_path(path, 0.1), Err(Error::GridTooCoarse { .. })));
    }

    #[test]
    fn extracted_walk_tracks_the_path() {
        let mut rng = stream(11, 0);
        let h = 1e-5;
        let path = Arc::new(SampledPath::brownian(2, h, 1.0, &mut rng));
        let eps = 0.05;
        let s = Skeleton::extract_from_path(path.clone(), eps).unwrap();
        for j in 0..2 {
            let values = path.coordinate(j).values();
            for (i, &b) in values.iter().enumerate() {
                assert!((s.walk(j, i as f64 * h) - b).abs() <= eps + 3.0 * h.sqrt());
            }
            let ev = s.events();
            for m in 1..=ev.coordinate_count(j) {
                let t = ev.coordinate_time(j, m);
                assert!((path.value(j, t) - s.walk(j, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let s = intrinsic(2, 0.1, 0.5, 12);
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        let back = Skeleton::<f64>::read_csv(csv.as_slice()).unwrap();
        assert_eq!(back.events(), s.events());
        assert_eq!(back.config(), s.config());
        let mut bin = Vec::new();
        s.write_binary(&mut bin).unwrap();
        let back = Skeleton::<f64>::read_binary(bin.as_slice()).unwrap();
        assert_eq!(back.events(), s.events());
        let text = String::from_utf8(csv).unwrap();
        assert!(text.lines().nth(1) == Some("coordinate,n,time,sign"));
        let broken = text.replace("coordinate,n,time,sign", "a,b");
        assert!(matches!(Skeleton::<f64>::read_csv(broken.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn crossings_hit_the_lattice(steps in proptest::collection::vec(-0.004f64..0.004, 1..400), eps in 0.05f64..0.2) {
            let mut values = vec![0.0];
            for s in &steps {
                values.push(values.last().unwrap() + s);
            }
            let h = 1e-5;
            let path = Arc::new(SampledPath::uniform(h, vec![values]));
            let s = Skeleton::extract_from_path(path.clone(), eps).unwrap();
            let ev = s.events();
            for n in 1..=ev.len() {
                let target = eps * ev.level_after(n) as f64;
                prop_assert!((path.value(0, ev.time(n)) - target).abs() < 1e-9);
                prop_assert!(n == 1 || ev.time(n) > ev.time(n - 1));
            }
        }
    }
}
