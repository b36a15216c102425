//! File formats.
//!
//! All logs are CSV with a header row, preceded by a `# mimu <kind> v<N>`
//! line. Units are s, m, rad, N.
//!
//! - Sensor log: `t`, per IMU `{imu}_gx,gy,gz,ax,ay,az`, then `q1..qN`, per
//!   foot `{foot}_f1..f4`, and optionally per IMU `{imu}_tilt_x,y,z`.
//!   Without tilt columns the estimator falls back to its own tilt filter.
//! - Ground truth: `t`, per IMU `{imu}_px,py,pz,qw,qx,qy,qz,vx,vy,vz`, per
//!   foot `{foot}_contact,{foot}_flat` (0 or 1).
//! - Trajectory: `t`, per estimated IMU `{imu}_px,py,pz,qw,qx,qy,qz,vx,vy,vz`
//!   followed by the marginal standard deviations `{imu}_sd_rx..rz` and
//!   `{imu}_sd_px..pz`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Cursor, Read, Write};

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::estimator::{ImuSample, LinkState, SensorFrame};
use crate::manifold::Rotation;
use crate::metrics::{Trajectory, TrajectoryPoint};
use crate::robot::KinematicChain;
use crate::sim::GroundTruth;

pub const SENSOR_LOG_VERSION: u32 = 1;
pub const TRUTH_VERSION: u32 = 1;
pub const TRAJECTORY_VERSION: u32 = 1;

const POSE_FIELDS: [&str; 10] = ["px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"];
const STD_FIELDS: [&str; 6] = ["sd_rx", "sd_ry", "sd_rz", "sd_px", "sd_py", "sd_pz"];

fn version_line(kind: &str, version: u32) -> String {
    format!("# mimu {kind} v{version}\n")
}

/// Consumes the version line and returns the rest of the input, plus the
/// number of lines consumed.
fn strip_version<R: Read>(input: R, kind: &str, version: u32) -> Result<(impl Read, u64)> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let trimmed = first.trim_end();
    if let Some(rest) = trimmed.strip_prefix("# mimu ") {
        let expected = format!("{kind} v{version}");
        if rest != expected {
            return Err(Error::Schema { line: 1, message: format!("expected `# mimu {expected}`, found `{trimmed}`") });
        }
        Ok((Cursor::new(Vec::new()).chain(reader), 1))
    } else {
        Ok((Cursor::new(first.into_bytes()).chain(reader), 0))
    }
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input)
}

fn schema(line: u64, message: impl Into<String>) -> Error {
    Error::Schema { line, message: message.into() }
}

/// Maps csv errors to line-numbered schema errors where possible.
fn csv_error(e: csv::Error, offset: u64) -> Error {
    let line = e.position().map(|p| p.line() + offset);
    match (line, e.kind()) {
        (Some(line), csv::ErrorKind::UnequalLengths { expected_len, len, .. }) => {
            schema(line, format!("expected {expected_len} fields, found {len}"))
        }
        (Some(line), _) => schema(line, e.to_string()),
        (None, _) => Error::Csv(e),
    }
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(header: &csv::StringRecord) -> Result<Self> {
        let mut index = HashMap::new();
        for (k, name) in header.iter().enumerate() {
            if index.insert(name.to_string(), k).is_some() {
                return Err(schema(1, format!("duplicate column `{name}`")));
            }
        }
        Ok(Columns { index })
    }

    fn get(&self, name: &str, line: u64) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| schema(line, format!("missing column `{name}`")))
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    line: u64,
}

impl Row<'_> {
    fn f64(&self, col: usize) -> Result<f64> {
        let s = self.record.get(col).ok_or_else(|| schema(self.line, "row too short"))?;
        let v: f64 = s.parse().map_err(|_| schema(self.line, format!("`{s}` is not a number")))?;
        if !v.is_finite() {
            return Err(schema(self.line, format!("non-finite value `{s}`")));
        }
        Ok(v)
    }

    fn vec3(&self, cols: &[usize]) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64(cols[0])?, self.f64(cols[1])?, self.f64(cols[2])?))
    }

    fn flag(&self, col: usize) -> Result<bool> {
        match self.record.get(col) {
            Some("0") => Ok(false),
            Some("1") => Ok(true),
            other => Err(schema(self.line, format!("flag must be 0 or 1, found {other:?}"))),
        }
    }

    fn rotation(&self, cols: &[usize]) -> Result<Rotation> {
        let q = Quaternion::new(self.f64(cols[0])?, self.f64(cols[1])?, self.f64(cols[2])?, self.f64(cols[3])?);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(schema(self.line, format!("quaternion norm {} is not 1", q.norm())));
        }
        Ok(UnitQuaternion::from_quaternion(q).to_rotation_matrix())
    }
}

fn named(prefix: &str, fields: &[&str]) -> Vec<String> {
    fields.iter().map(|f| format!("{prefix}_{f}")).collect()
}

fn lookup(cols: &Columns, names: &[String], line: u64) -> Result<Vec<usize>> {
    names.iter().map(|n| cols.get(n, line)).collect()
}

fn push_rotation(out: &mut Vec<String>, r: &Rotation) {
    let q = UnitQuaternion::from_rotation_matrix(r);
    out.extend([q.w, q.i, q.j, q.k].iter().map(|v| v.to_string()));
}

fn push_vec(out: &mut Vec<String>, v: &Vector3<f64>) {
    out.extend(v.iter().map(|x| x.to_string()));
}

/// Header of a sensor log for `chain`.
pub fn sensor_header(chain: &KinematicChain, tilts: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for imu in chain.imus() {
        h.extend(named(&imu.name, &["gx", "gy", "gz", "ax", "ay", "az"]));
    }
    h.extend((1..=chain.n_joints()).map(|k| format!("q{k}")));
    for foot in chain.feet() {
        h.extend(named(&foot.name, &["f1", "f2", "f3", "f4"]));
    }
    if tilts {
        for imu in chain.imus() {
            h.extend(named(&imu.name, &["tilt_x", "tilt_y", "tilt_z"]));
        }
    }
    h
}

pub struct SensorLogWriter<W: Write> {
    csv: csv::Writer<W>,
    tilts: bool,
}

impl<W: Write> SensorLogWriter<W> {
    pub fn new(mut out: W, chain: &KinematicChain, tilts: bool) -> Result<Self> {
        out.write_all(version_line("sensor-log", SENSOR_LOG_VERSION).as_bytes())?;
        let mut csv = csv::Writer::from_writer(out);
        csv.write_record(sensor_header(chain, tilts))?;
        Ok(SensorLogWriter { csv, tilts })
    }

    pub fn write(&mut self, f: &SensorFrame) -> Result<()> {
        let mut row = vec![f.t.to_string()];
        for s in &f.imu {
            push_vec(&mut row, &s.gyro);
            push_vec(&mut row, &s.accel);
        }
        row.extend(f.joints.iter().map(|q| q.to_string()));
        for forces in &f.forces {
            row.extend(forces.iter().map(|x| x.to_string()));
        }
        if self.tilts {
            let tilts = f.tilts.as_ref().ok_or_else(|| Error::Config("frame has no tilts for a tilt log".into()))?;
            for t in tilts {
                push_vec(&mut row, t);
            }
        }
        self.csv.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.csv.flush()?;
        self.csv.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

struct SensorColumns {
    t: usize,
    imu: Vec<[usize; 6]>,
    joints: Vec<usize>,
    feet: Vec<[usize; 4]>,
    tilts: Option<Vec<[usize; 3]>>,
}

/// Streaming sensor-log reader; yields one frame per row.
pub struct SensorLogReader {
    records: csv::StringRecordsIntoIter<Box<dyn Read>>,
    cols: SensorColumns,
    offset: u64,
}

impl std::fmt::Debug for SensorLogReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SensorLogReader").field("has_tilts", &self.has_tilts()).finish()
    }
}

fn fixed<const N: usize>(v: Vec<usize>) -> [usize; N] {
    v.try_into().expect("field lists have fixed lengths")
}

impl SensorLogReader {
    pub fn new(input: impl Read + 'static, chain: &KinematicChain) -> Result<SensorLogReader> {
        let (input, offset) = strip_version(input, "sensor-log", SENSOR_LOG_VERSION)?;
        let mut csv = csv_reader(Box::new(input) as Box<dyn Read>);
        let header = csv.headers().map_err(|e| csv_error(e, offset))?.clone();
        let line = offset + 1;
        let cols = Columns::new(&header)?;
        let t = cols.get("t", line)?;
        let imu = chain
            .imus()
            .iter()
            .map(|m| lookup(&cols, &named(&m.name, &["gx", "gy", "gz", "ax", "ay", "az"]), line).map(fixed))
            .collect::<Result<Vec<[usize; 6]>>>()?;
        let joints = lookup(&cols, &(1..=chain.n_joints()).map(|k| format!("q{k}")).collect::<Vec<_>>(), line)?;
        let feet = chain
            .feet()
            .iter()
            .map(|f| lookup(&cols, &named(&f.name, &["f1", "f2", "f3", "f4"]), line).map(fixed))
            .collect::<Result<Vec<[usize; 4]>>>()?;
        let tilt_names: Vec<Vec<String>> =
            chain.imus().iter().map(|m| named(&m.name, &["tilt_x", "tilt_y", "tilt_z"])).collect();
        let present = tilt_names.iter().flatten().filter(|n| cols.has(n)).count();
        let tilts = match present {
            0 => None,
            n if n == 3 * chain.n_imus() => {
                Some(tilt_names.iter().map(|names| lookup(&cols, names, line).map(fixed)).collect::<Result<Vec<_>>>()?)
            }
            n => return Err(schema(line, format!("{n} tilt columns; expected none or {}", 3 * chain.n_imus()))),
        };
        let expected = 1 + 6 * imu.len() + joints.len() + 4 * feet.len() + tilts.as_ref().map_or(0, |t| 3 * t.len());
        if header.len() != expected {
            let known = sensor_header(chain, tilts.is_some());
            let extra: Vec<&str> = header.iter().filter(|h| !known.iter().any(|k| k == h)).collect();
            return Err(schema(line, format!("unexpected columns {extra:?}")));
        }
        Ok(SensorLogReader {
            records: csv.into_records(),
            cols: SensorColumns { t, imu, joints, feet, tilts },
            offset,
        })
    }

    pub fn has_tilts(&self) -> bool {
        self.cols.tilts.is_some()
    }

    fn parse(&self, record: &csv::StringRecord) -> Result<SensorFrame> {
        let line = record.position().map_or(0, |p| p.line()) + self.offset;
        let row = Row { record, line };
        let c = &self.cols;
        let imu = c
            .imu
            .iter()
            .map(|k| Ok(ImuSample { gyro: row.vec3(&k[..3])?, accel: row.vec3(&k[3..])? }))
            .collect::<Result<Vec<_>>>()?;
        let joints = c.joints.iter().map(|&k| row.f64(k)).collect::<Result<Vec<_>>>()?;
        let forces = c
            .feet
            .iter()
            .map(|k| Ok([row.f64(k[0])?, row.f64(k[1])?, row.f64(k[2])?, row.f64(k[3])?]))
            .collect::<Result<Vec<_>>>()?;
        let tilts = match &c.tilts {
            None => None,
            Some(cols) => Some(
                cols.iter()
                    .map(|k| {
                        let v = row.vec3(k)?;
                        if (v.norm() - 1.0).abs() > 1e-6 {
                            return Err(schema(line, format!("tilt norm {} is not 1", v.norm())));
                        }
                        Ok(Unit::new_unchecked(v))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(SensorFrame { t: row.f64(c.t)?, imu, joints, forces, tilts })
    }
}

impl Iterator for SensorLogReader {
    type Item = Result<SensorFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = self.records.next()?;
        Some(record.map_err(|e| csv_error(e, self.offset)).and_then(|r| self.parse(&r)))
    }
}

/// Writes the ground truth of a simulated run.
pub fn write_truth<W: Write>(mut out: W, chain: &KinematicChain, truth: &GroundTruth) -> Result<W> {
    out.write_all(version_line("truth", TRUTH_VERSION).as_bytes())?;
    let mut csv = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for imu in chain.imus() {
        header.extend(named(&imu.name, &POSE_FIELDS));
    }
    for foot in chain.feet() {
        header.extend(named(&foot.name, &["contact", "flat"]));
    }
    csv.write_record(&header)?;
    for s in &truth.samples {
        let mut row = vec![s.t.to_string()];
        for m in &s.imus {
            push_vec(&mut row, &m.pose.translation);
            push_rotation(&mut row, &m.pose.rotation);
            push_vec(&mut row, &m.velocity);
        }
        for (c, f) in s.contacts.iter().zip(&s.flat) {
            row.push(u8::from(*c).to_string());
            row.push(u8::from(*f).to_string());
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    csv.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Ground truth read back from CSV.
#[derive(Clone, Debug, Default)]
pub struct TruthLog {
    pub imu_names: Vec<String>,
    pub t: Vec<f64>,
    /// `links[k][i]`: state of IMU `i` at tick `k`, zero biases.
    pub links: Vec<Vec<LinkState>>,
    pub contacts: Vec<Vec<bool>>,
    pub flat: Vec<Vec<bool>>,
}

impl TruthLog {
    pub fn imu(&self, name: &str) -> Result<usize> {
        self.imu_names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownLink(name.to_string()))
    }

    pub fn trajectory(&self, imu: usize) -> Trajectory {
        Trajectory(
            self.t
                .iter()
                .zip(&self.links)
                .map(|(&t, l)| TrajectoryPoint { t, position: l[imu].position, orientation: l[imu].rotation })
                .collect(),
        )
    }

    /// Touchdowns after the first sample, over all feet.
    pub fn steps(&self) -> usize {
        self.contacts.windows(2).map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| !**a && **b).count()).sum()
    }
}

/// Reads a ground-truth log. IMU and foot names come from the header.
pub fn read_truth<R: Read>(input: R) -> Result<TruthLog> {
    let (input, offset) = strip_version(input, "truth", TRUTH_VERSION)?;
    let mut csv = csv_reader(input);
    let header = csv.headers().map_err(|e| csv_error(e, offset))?.clone();
    let line = offset + 1;
    let cols = Columns::new(&header)?;
    let t_col = cols.get("t", line)?;
    let imu_names = prefixes(&header, "_px");
    let feet = prefixes(&header, "_contact");
    if imu_names.is_empty() {
        return Err(schema(line, "no `{imu}_px` columns"));
    }
    let imu_cols = imu_names.iter().map(|n| lookup(&cols, &named(n, &POSE_FIELDS), line)).collect::<Result<Vec<_>>>()?;
    let foot_cols =
        feet.iter().map(|n| lookup(&cols, &named(n, &["contact", "flat"]), line)).collect::<Result<Vec<_>>>()?;
    let expected = 1 + 10 * imu_names.len() + 2 * feet.len();
    if header.len() != expected {
        return Err(schema(line, format!("{} columns, expected {expected}", header.len())));
    }
    let mut log = TruthLog { imu_names, ..TruthLog::default() };
    for record in csv.records() {
        let record = record.map_err(|e| csv_error(e, offset))?;
        let row = Row { record: &record, line: record.position().map_or(0, |p| p.line()) + offset };
        log.t.push(row.f64(t_col)?);
        log.links.push(
            imu_cols
                .iter()
                .map(|c| {
                    Ok(LinkState {
                        velocity: row.vec3(&c[7..10])?,
                        ..LinkState::at_rest(row.rotation(&c[3..7])?, row.vec3(&c[..3])?)
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        );
        log.contacts.push(foot_cols.iter().map(|c| row.flag(c[0])).collect::<Result<Vec<_>>>()?);
        log.flat.push(foot_cols.iter().map(|c| row.flag(c[1])).collect::<Result<Vec<_>>>()?);
    }
    Ok(log)
}

/// Column-name prefixes of the columns ending in `suffix`, in header order.
fn prefixes(header: &csv::StringRecord, suffix: &str) -> Vec<String> {
    header.iter().filter_map(|h| h.strip_suffix(suffix)).filter(|p| !p.is_empty()).map(String::from).collect()
}

/// State of one estimated IMU at one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkEstimate {
    pub imu: usize,
    pub state: LinkState,
    /// Marginal standard deviations of `δθ` (rad) then `δp` (m).
    pub std: [f64; 6],
}

/// Streaming trajectory writer.
pub struct TrajectoryWriter<W: Write> {
    csv: csv::Writer<W>,
    imus: Vec<usize>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W, chain: &KinematicChain, imus: &[usize]) -> Result<Self> {
        out.write_all(version_line("trajectory", TRAJECTORY_VERSION).as_bytes())?;
        let mut csv = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for &i in imus {
            let name = &chain.imus().get(i).ok_or_else(|| Error::UnknownLink(format!("IMU #{i}")))?.name;
            header.extend(named(name, &POSE_FIELDS));
            header.extend(named(name, &STD_FIELDS));
        }
        csv.write_record(&header)?;
        Ok(TrajectoryWriter { csv, imus: imus.to_vec() })
    }

    pub fn write(&mut self, t: f64, estimates: &[LinkEstimate]) -> Result<()> {
        let mut row = vec![t.to_string()];
        for &i in &self.imus {
            let e = estimates
                .iter()
                .find(|e| e.imu == i)
                .ok_or_else(|| Error::UnknownLink(format!("no estimate for IMU #{i}")))?;
            push_vec(&mut row, &e.state.position);
            push_rotation(&mut row, &e.state.rotation);
            push_vec(&mut row, &e.state.velocity);
            row.extend(e.std.iter().map(|x| x.to_string()));
        }
        self.csv.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.csv.flush()?;
        self.csv.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Reads the trajectory of IMU `imu` (the first one in the file when
/// `None`) from a trajectory log or a ground-truth log.
pub fn read_trajectory<R: Read>(input: R, imu: Option<&str>) -> Result<(String, Trajectory)> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let rest = Cursor::new(first.clone().into_bytes()).chain(reader);
    if first.trim_end() == version_line("truth", TRUTH_VERSION).trim_end() {
        let log = read_truth(rest)?;
        let k = match imu {
            Some(name) => log.imu(name)?,
            None => 0,
        };
        return Ok((log.imu_names[k].clone(), log.trajectory(k)));
    }
    let (input, offset) = strip_version(rest, "trajectory", TRAJECTORY_VERSION)?;
    let mut csv = csv_reader(input);
    let header = csv.headers().map_err(|e| csv_error(e, offset))?.clone();
    let line = offset + 1;
    let cols = Columns::new(&header)?;
    let t_col = cols.get("t", line)?;
    let names = prefixes(&header, "_px").into_iter().filter(|n| !n.ends_with("_sd")).collect::<Vec<_>>();
    let name = match imu {
        Some(n) if names.iter().any(|m| m == n) => n.to_string(),
        Some(n) => return Err(schema(line, format!("no columns for IMU `{n}`"))),
        None => names.first().cloned().ok_or_else(|| schema(line, "no `{imu}_px` columns"))?,
    };
    let c = lookup(&cols, &named(&name, &POSE_FIELDS[..7]), line)?;
    let mut points = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| csv_error(e, offset))?;
        let row = Row { record: &record, line: record.position().map_or(0, |p| p.line()) + offset };
        points.push(TrajectoryPoint { t: row.f64(t_col)?, position: row.vec3(&c[..3])?, orientation: row.rotation(&c[3..7])? });
    }
    Ok((name, Trajectory(points)))
}
