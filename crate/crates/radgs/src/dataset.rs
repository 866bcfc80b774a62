//! On-disk sequence format and its in-memory mirror.
//!
//! Layout under a dataset directory:
//!   manifest.json           schema version, intrinsics, mounting, frame index
//!   frames/NNNNNN.raw.ply   radar detections (x y z doppler power, binary LE)
//!   frames/NNNNNN.enh.ply   enhanced cloud (x y z red green blue)
//!   frames/NNNNNN.png       camera image
//!   gt/trajectory.tum       `timestamp tx ty tz qx qy qz qw` per line
//!
//! Frames tagged image-only in the manifest carry no radar or enhanced file.
//!
//! Round trips are byte-exact by construction: floating-point fields are
//! stored as IEEE doubles (PLY) or as shortest round-trip decimal strings
//! (TUM, JSON), the in-memory representation keeps exactly what was parsed,
//! and writers derive everything else from those values. Radar PLYs also
//! carry the native spherical measurement (theta_y, theta_p, range) so the
//! Cartesian convenience columns never have to be inverted; files from other
//! toolchains that lack the spherical columns still import, with angles
//! derived from x y z.

use crate::doppler::RadarDetection;
use crate::error::{Error, Result};
use crate::geometry::{mat3_to_quat, quat_to_mat3, Mat3, Pose, Vec3};
use crate::image::{decode_png_rgb8, encode_png_rgb8, CameraIntrinsics, ColorImage};
use crate::map::GaussianPrimitive;
use crate::metrics::TrajectoryRecord;
use crate::sim::{EnhancedCloud, CAMERA_TO_BODY};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameEntry {
    pub index: u32,
    pub timestamp: f64,
    /// Image-only frames have no radar or enhanced cloud (unsynchronized
    /// camera captures between radar frames).
    pub image_only: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub camera: CameraIntrinsics,
    /// Fixed mounting: p_body = camera_to_body * p_camera.
    pub camera_to_body: Mat3,
    pub frames: Vec<FrameEntry>,
}

/// One trajectory file row, kept verbatim so rewriting the file reproduces
/// it byte for byte. Quaternion order matches the file: x y z w.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumRow {
    pub timestamp: f64,
    pub translation: Vec3,
    pub quat_xyzw: [f64; 4],
}

impl TumRow {
    pub fn from_pose(timestamp: f64, pose: &Pose) -> Self {
        let q = mat3_to_quat(&pose.rotation);
        TumRow {
            timestamp,
            translation: pose.translation,
            quat_xyzw: [q[1], q[2], q[3], q[0]],
        }
    }

    pub fn to_pose(&self) -> Pose {
        let q = self.quat_xyzw;
        Pose::new(
            quat_to_mat3([q[3], q[0], q[1], q[2]]),
            self.translation,
            self.timestamp,
        )
    }
}

pub fn record_to_tum_rows(record: &TrajectoryRecord) -> Vec<TumRow> {
    record
        .samples()
        .iter()
        .map(|(t, pose)| TumRow::from_pose(*t, pose))
        .collect()
}

pub fn tum_rows_to_record(rows: &[TumRow]) -> Result<TrajectoryRecord> {
    let mut record = TrajectoryRecord::new();
    for row in rows {
        record.push(row.timestamp, row.to_pose())?;
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct DatasetFrame {
    pub timestamp: f64,
    pub image_only: bool,
    /// Empty for image-only frames.
    pub raw: Vec<RadarDetection>,
    /// Empty for image-only frames.
    pub enhanced: EnhancedCloud,
    pub image: ColorImage,
}

/// A full sequence in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub camera: CameraIntrinsics,
    pub frames: Vec<DatasetFrame>,
    pub gt_rows: Vec<TumRow>,
}

impl Dataset {
    pub fn new(camera: CameraIntrinsics) -> Self {
        Dataset {
            camera,
            frames: Vec::new(),
            gt_rows: Vec::new(),
        }
    }

    fn check_stamp(&self, timestamp: f64) -> Result<()> {
        if let Some(last) = self.frames.last() {
            if timestamp <= last.timestamp {
                return Err(Error::data(format!(
                    "frame timestamps must strictly increase: {timestamp} after {}",
                    last.timestamp
                )));
            }
        }
        Ok(())
    }

    pub fn push_frame(
        &mut self,
        timestamp: f64,
        raw: Vec<RadarDetection>,
        enhanced: EnhancedCloud,
        image: ColorImage,
    ) -> Result<()> {
        self.check_stamp(timestamp)?;
        self.frames.push(DatasetFrame {
            timestamp,
            image_only: false,
            raw,
            enhanced,
            image,
        });
        Ok(())
    }

    pub fn push_image_frame(&mut self, timestamp: f64, image: ColorImage) -> Result<()> {
        self.check_stamp(timestamp)?;
        self.frames.push(DatasetFrame {
            timestamp,
            image_only: true,
            raw: Vec::new(),
            enhanced: EnhancedCloud::default(),
            image,
        });
        Ok(())
    }

    pub fn gt_record(&self) -> Result<TrajectoryRecord> {
        tum_rows_to_record(&self.gt_rows)
    }
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    F64,
    F32,
    U8,
}

impl PlyScalar {
    fn size(self) -> usize {
        match self {
            PlyScalar::F64 => 8,
            PlyScalar::F32 => 4,
            PlyScalar::U8 => 1,
        }
    }

    fn parse(name: &str) -> Option<Self> {
        match name {
            "double" | "float64" => Some(PlyScalar::F64),
            "float" | "float32" => Some(PlyScalar::F32),
            "uchar" | "uint8" => Some(PlyScalar::U8),
            _ => None,
        }
    }
}

struct PlyColumns {
    count: usize,
    /// (name, scalar, byte offset within a row)
    props: Vec<(String, PlyScalar, usize)>,
    stride: usize,
    data_offset: usize,
}

fn parse_ply_header(bytes: &[u8], path: &Path) -> Result<PlyColumns> {
    let named = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    let end = b"end_header\n";
    let header_len = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| named("missing ply end_header".into()))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_len])
        .map_err(|_| named("ply header is not valid text".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(named("not a ply file".into()));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, PlyScalar, usize)> = Vec::new();
    let mut stride = 0usize;
    for line in lines {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                let rest: Vec<&str> = words.collect();
                if rest != ["binary_little_endian", "1.0"] {
                    return Err(named(format!(
                        "unsupported ply format `{}`",
                        rest.join(" ")
                    )));
                }
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                if count.is_some() {
                    return Err(named("multiple ply elements are not supported".into()));
                }
                let _name = words.next();
                let n: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| named("malformed element line".into()))?;
                count = Some(n);
            }
            Some("property") => {
                let ty = words
                    .next()
                    .ok_or_else(|| named("malformed property line".into()))?;
                if ty == "list" {
                    return Err(named("list properties are not supported".into()));
                }
                let scalar = PlyScalar::parse(ty)
                    .ok_or_else(|| named(format!("unsupported property type `{ty}`")))?;
                let name = words
                    .next()
                    .ok_or_else(|| named("property without a name".into()))?;
                props.push((name.to_string(), scalar, stride));
                stride += scalar.size();
            }
            Some("end_header") => break,
            Some(other) => return Err(named(format!("unexpected header line `{other}`"))),
            None => {}
        }
    }
    let count = count.ok_or_else(|| named("ply header has no element".into()))?;
    let expected = header_len + count * stride;
    if bytes.len() < expected {
        return Err(named(format!(
            "ply data truncated: {} bytes, need {expected}",
            bytes.len()
        )));
    }
    Ok(PlyColumns {
        count,
        props,
        stride,
        data_offset: header_len,
    })
}

impl PlyColumns {
    fn column(&self, name: &str) -> Option<(PlyScalar, usize)> {
        self.props
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|&(_, s, off)| (s, off))
    }

    fn require(&self, name: &str, path: &Path) -> Result<(PlyScalar, usize)> {
        self.column(name).ok_or_else(|| {
            Error::data(format!("{}: missing property `{name}`", path.display()))
        })
    }

    fn value(&self, bytes: &[u8], row: usize, col: (PlyScalar, usize)) -> f64 {
        let at = self.data_offset + row * self.stride + col.1;
        match col.0 {
            PlyScalar::F64 => f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()),
            PlyScalar::F32 => f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64,
            PlyScalar::U8 => bytes[at] as f64,
        }
    }
}

fn ply_header(props: &[(&str, &str)], count: usize) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {count}");
    for (ty, name) in props {
        let _ = writeln!(header, "property {ty} {name}");
    }
    header.push_str("end_header\n");
    header.into_bytes()
}

fn encode_raw_ply(dets: &[RadarDetection]) -> Vec<u8> {
    let mut out = ply_header(
        &[
            ("double", "x"),
            ("double", "y"),
            ("double", "z"),
            ("double", "doppler"),
            ("double", "power"),
            ("double", "theta_y"),
            ("double", "theta_p"),
            ("double", "range"),
            ("uchar", "gt_dynamic"),
        ],
        dets.len(),
    );
    for d in dets {
        let p = d.cartesian();
        for v in [p[0], p[1], p[2], d.doppler, d.power, d.theta_y, d.theta_p, d.range] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match d.dynamic {
            Some(false) => 0,
            Some(true) => 1,
            None => 2,
        });
    }
    out
}

fn decode_raw_ply(bytes: &[u8], path: &Path) -> Result<Vec<RadarDetection>> {
    let cols = parse_ply_header(bytes, path)?;
    let doppler = cols.require("doppler", path)?;
    let power = cols.require("power", path)?;
    let spherical = match (
        cols.column("theta_y"),
        cols.column("theta_p"),
        cols.column("range"),
    ) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let cartesian = match (cols.column("x"), cols.column("y"), cols.column("z")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    if spherical.is_none() && cartesian.is_none() {
        return Err(Error::data(format!(
            "{}: need either spherical or x y z properties",
            path.display()
        )));
    }
    let dynamic = cols.column("gt_dynamic");
    let mut dets = Vec::with_capacity(cols.count);
    for row in 0..cols.count {
        let (theta_y, theta_p, range) = match spherical {
            Some((a, b, c)) => (
                cols.value(bytes, row, a),
                cols.value(bytes, row, b),
                cols.value(bytes, row, c),
            ),
            None => {
                let (cx, cy, cz) = cartesian.unwrap();
                let x = cols.value(bytes, row, cx);
                let y = cols.value(bytes, row, cy);
                let z = cols.value(bytes, row, cz);
                let range = (x * x + y * y + z * z).sqrt();
                (y.atan2(x), z.atan2((x * x + y * y).sqrt()), range)
            }
        };
        dets.push(RadarDetection {
            theta_y,
            theta_p,
            range,
            doppler: cols.value(bytes, row, doppler),
            power: cols.value(bytes, row, power),
            dynamic: dynamic.map(|col| cols.value(bytes, row, col)).and_then(|v| {
                match v as u8 {
                    0 => Some(false),
                    1 => Some(true),
                    _ => None,
                }
            }),
        });
    }
    Ok(dets)
}

fn encode_enh_ply(cloud: &EnhancedCloud) -> Vec<u8> {
    let mut out = ply_header(
        &[
            ("double", "x"),
            ("double", "y"),
            ("double", "z"),
            ("uchar", "red"),
            ("uchar", "green"),
            ("uchar", "blue"),
            ("uchar", "gt_dynamic"),
        ],
        cloud.points.len(),
    );
    for i in 0..cloud.points.len() {
        for v in cloud.points[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in cloud.colors[i] {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(cloud.labels[i] as u8);
    }
    out
}

fn decode_enh_ply(bytes: &[u8], path: &Path) -> Result<EnhancedCloud> {
    let cols = parse_ply_header(bytes, path)?;
    let x = cols.require("x", path)?;
    let y = cols.require("y", path)?;
    let z = cols.require("z", path)?;
    let red = cols.column("red").or_else(|| cols.column("r"));
    let green = cols.column("green").or_else(|| cols.column("g"));
    let blue = cols.column("blue").or_else(|| cols.column("b"));
    let label = cols.column("gt_dynamic");
    let mut cloud = EnhancedCloud::default();
    for row in 0..cols.count {
        cloud.points.push([
            cols.value(bytes, row, x),
            cols.value(bytes, row, y),
            cols.value(bytes, row, z),
        ]);
        let channel = |c: Option<(PlyScalar, usize)>| {
            c.map_or(0.5, |col| cols.value(bytes, row, col) / 255.0)
        };
        cloud
            .colors
            .push([channel(red), channel(green), channel(blue)]);
        cloud
            .labels
            .push(label.is_some_and(|col| cols.value(bytes, row, col) != 0.0));
    }
    Ok(cloud)
}

/// Reads a Gaussian map export (the writer lives on `GaussianMap::to_ply`):
/// double x y z, the upper covariance triangle cxx..czz, opacity, then uchar
/// red green blue level. Gradient accumulators are not persisted and come
/// back zeroed; `obs_count` restarts at 1.
pub fn decode_map_ply(bytes: &[u8]) -> Result<Vec<GaussianPrimitive>> {
    let path = Path::new("map.ply");
    let cols = parse_ply_header(bytes, path)?;
    let pos = [
        cols.require("x", path)?,
        cols.require("y", path)?,
        cols.require("z", path)?,
    ];
    let cov = [
        cols.require("cxx", path)?,
        cols.require("cxy", path)?,
        cols.require("cxz", path)?,
        cols.require("cyy", path)?,
        cols.require("cyz", path)?,
        cols.require("czz", path)?,
    ];
    let opacity = cols.require("opacity", path)?;
    let rgb = [
        cols.require("red", path)?,
        cols.require("green", path)?,
        cols.require("blue", path)?,
    ];
    let level = cols.require("level", path)?;
    let mut out = Vec::with_capacity(cols.count);
    for row in 0..cols.count {
        let v = |c| cols.value(bytes, row, c);
        let (cxx, cxy, cxz) = (v(cov[0]), v(cov[1]), v(cov[2]));
        let (cyy, cyz, czz) = (v(cov[3]), v(cov[4]), v(cov[5]));
        out.push(GaussianPrimitive {
            mean: [v(pos[0]), v(pos[1]), v(pos[2])],
            cov: [[cxx, cxy, cxz], [cxy, cyy, cyz], [cxz, cyz, czz]],
            opacity: v(opacity),
            color: [v(rgb[0]) / 255.0, v(rgb[1]) / 255.0, v(rgb[2]) / 255.0],
            level: v(level) as u32,
            accum_grad: 0.0,
            grad_count: 0,
            obs_count: 1,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// TUM trajectory text
// ---------------------------------------------------------------------------

pub fn encode_tum(rows: &[TumRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let t = r.translation;
        let q = r.quat_xyzw;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            r.timestamp, t[0], t[1], t[2], q[0], q[1], q[2], q[3]
        );
    }
    out
}

pub fn decode_tum(text: &str) -> Result<Vec<TumRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::data(format!("trajectory line {}: malformed number", lineno + 1))
            })?;
        if fields.len() != 8 {
            return Err(Error::data(format!(
                "trajectory line {}: expected 8 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        rows.push(TumRow {
            timestamp: fields[0],
            translation: [fields[1], fields[2], fields[3]],
            quat_xyzw: [fields[4], fields[5], fields[6], fields[7]],
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Directory export / import
// ---------------------------------------------------------------------------

fn frame_path(dir: &Path, index: u32, suffix: &str) -> PathBuf {
    dir.join("frames").join(format!("{index:06}.{suffix}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::data(format!("missing file {}", path.display()))
        } else {
            Error::Io(e)
        }
    })
}

pub fn export_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("gt"))?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        camera: dataset.camera,
        camera_to_body: CAMERA_TO_BODY,
        frames: dataset
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameEntry {
                index: i as u32,
                timestamp: f.timestamp,
                image_only: f.image_only,
            })
            .collect(),
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    manifest_json.push('\n');
    write_file(&dir.join("manifest.json"), manifest_json.as_bytes())?;
    for (i, frame) in dataset.frames.iter().enumerate() {
        let index = i as u32;
        write_file(
            &frame_path(dir, index, "png"),
            &encode_png_rgb8(&frame.image)?,
        )?;
        if !frame.image_only {
            write_file(&frame_path(dir, index, "raw.ply"), &encode_raw_ply(&frame.raw))?;
            write_file(
                &frame_path(dir, index, "enh.ply"),
                &encode_enh_ply(&frame.enhanced),
            )?;
        }
    }
    write_file(
        &dir.join("gt").join("trajectory.tum"),
        encode_tum(&dataset.gt_rows).as_bytes(),
    )?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| Error::data(format!("{}: {e}", manifest_path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::data(format!(
            "unsupported schema version {} (expected {})",
            manifest.schema_version, SCHEMA_VERSION
        )));
    }
    manifest.camera.validate()?;
    let mut dataset = Dataset::new(manifest.camera);
    for entry in &manifest.frames {
        let image = decode_png_rgb8(&read_file(&frame_path(dir, entry.index, "png"))?)?;
        if entry.image_only {
            dataset.push_image_frame(entry.timestamp, image)?;
        } else {
            let raw_path = frame_path(dir, entry.index, "raw.ply");
            let raw = decode_raw_ply(&read_file(&raw_path)?, &raw_path)?;
            let enh_path = frame_path(dir, entry.index, "enh.ply");
            let enhanced = decode_enh_ply(&read_file(&enh_path)?, &enh_path)?;
            dataset.push_frame(entry.timestamp, raw, enhanced, image)?;
        }
    }
    let gt_path = dir.join("gt").join("trajectory.tum");
    dataset.gt_rows = decode_tum(
        std::str::from_utf8(&read_file(&gt_path)?)
            .map_err(|_| Error::data(format!("{}: not valid text", gt_path.display())))?,
    )?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, mat3_sub, IDENTITY3};
    use crate::sim::{
        build_world, camera_frame, enhanced_frame, radar_frame, sample_trajectory,
        TrajectoryKind, WorldSpec,
    };

    fn sample_dataset() -> Dataset {
        let world = build_world(WorldSpec::campus(17)).unwrap();
        let camera = world.spec.camera;
        let mut dataset = Dataset::new(camera);
        let traj = sample_trajectory(TrajectoryKind::Arc, 8.0, 3, 2.0).unwrap();
        let mut half_step = f64::INFINITY;
        if traj.len() > 1 {
            half_step = (traj[1].0.stamp - traj[0].0.stamp) / 2.0;
        }
        for (pose, velocity) in &traj {
            let t = pose.stamp;
            dataset
                .push_frame(
                    t,
                    radar_frame(&world, pose, *velocity, t),
                    enhanced_frame(&world, pose, world.spec.enhanced_density, t),
                    camera_frame(&world, pose, &camera, t),
                )
                .unwrap();
            dataset.gt_rows.push(TumRow::from_pose(t, pose));
            if pose.stamp < traj.last().unwrap().0.stamp {
                let t_img = t + half_step;
                dataset
                    .push_image_frame(t_img, camera_frame(&world, pose, &camera, t_img))
                    .unwrap();
            }
        }
        dataset
    }

    fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    files.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn export_import_export_is_byte_identical() {
        let dataset = sample_dataset();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        export_dataset(dir_a.path(), &dataset).unwrap();
        let imported = import_dataset(dir_a.path()).unwrap();
        export_dataset(dir_b.path(), &imported).unwrap();
        let a = dir_snapshot(dir_a.path());
        let b = dir_snapshot(dir_b.path());
        assert_eq!(a.len(), b.len());
        for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(bytes_a, bytes_b, "file {name_a} differs");
        }
    }

    #[test]
    fn contents_survive_a_round_trip_exactly() {
        let dataset = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &dataset).unwrap();
        let imported = import_dataset(dir.path()).unwrap();
        assert_eq!(imported.frames.len(), dataset.frames.len());
        for (a, b) in dataset.frames.iter().zip(&imported.frames) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.image_only, b.image_only);
            assert_eq!(a.raw, b.raw);
            assert_eq!(a.enhanced.points, b.enhanced.points);
            assert_eq!(a.enhanced.colors, b.enhanced.colors);
            assert_eq!(a.enhanced.labels, b.enhanced.labels);
            assert_eq!(a.image.data, b.image.data);
        }
        assert_eq!(dataset.gt_rows, imported.gt_rows);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let camera = WorldSpec::campus(1).camera;
        let dataset = Dataset::new(camera);
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &dataset).unwrap();
        let imported = import_dataset(dir.path()).unwrap();
        assert!(imported.frames.is_empty());
        assert!(imported.gt_rows.is_empty());
    }

    #[test]
    fn schema_version_mismatch_is_rejected() {
        let dataset = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &dataset).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(
            &manifest_path,
            text.replace(
                &format!("\"schema_version\": {SCHEMA_VERSION}"),
                "\"schema_version\": 999",
            ),
        )
        .unwrap();
        let err = import_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("schema version 999"), "{err}");
    }

    #[test]
    fn missing_frame_file_is_a_named_error() {
        let dataset = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &dataset).unwrap();
        let victim = dir.path().join("frames").join("000000.raw.ply");
        fs::remove_file(&victim).unwrap();
        let err = import_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000000.raw.ply"), "{err}");
    }

    #[test]
    fn foreign_cartesian_only_ply_imports() {
        // A minimal float32 file like public radar datasets ship: x y z
        // doppler power, no spherical columns, no ground-truth flag.
        let mut bytes = ply_header(
            &[
                ("float", "x"),
                ("float", "y"),
                ("float", "z"),
                ("float", "doppler"),
                ("float", "power"),
            ],
            2,
        );
        for row in [[3.0f32, 4.0, 0.0, -1.25, 12.0], [0.0, 0.0, 2.0, 0.5, 3.0]] {
            for v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = Path::new("inline.raw.ply");
        let dets = decode_raw_ply(&bytes, path).unwrap();
        assert_eq!(dets.len(), 2);
        assert!((dets[0].range - 5.0).abs() < 1e-7);
        assert!((dets[0].theta_y - (4.0f64 / 3.0).atan()).abs() < 1e-7);
        assert!(dets[0].theta_p.abs() < 1e-7);
        assert_eq!(dets[0].dynamic, None);
        assert!((dets[1].theta_p - std::f64::consts::FRAC_PI_2).abs() < 1e-7);
        assert_eq!(dets[1].doppler, 0.5);
    }

    #[test]
    fn malformed_ply_headers_are_rejected() {
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(parse_ply_header(ascii, Path::new("a.ply")).is_err());
        let truncated = b"ply\nformat binary_little_endian 1.0\nelement vertex 5\nproperty double x\nend_header\n";
        assert!(parse_ply_header(truncated, Path::new("b.ply")).is_err());
    }

    #[test]
    fn tum_rows_round_trip_through_poses() {
        let mut rows = Vec::new();
        let mut original = Vec::new();
        for i in 0..5 {
            let pose = Pose::new(
                exp_so3([0.1 * i as f64, -0.2, 0.05 * i as f64]),
                [i as f64, 2.0 * i as f64, -0.5],
                0.0,
            );
            original.push(pose);
            rows.push(TumRow::from_pose(i as f64 * 0.1, &pose));
        }
        let text = encode_tum(&rows);
        let parsed = decode_tum(&text).unwrap();
        assert_eq!(rows, parsed);
        let record = tum_rows_to_record(&parsed).unwrap();
        for ((_, recovered), pose) in record.samples().iter().zip(&original) {
            assert_eq!(recovered.translation, pose.translation);
            let diff = mat3_sub(&recovered.rotation, &pose.rotation);
            let err: f64 = diff.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-12, "rotation error {err}");
        }
        assert!(decode_tum("0 1 2 3 4 5 6\n").is_err());
        assert!(decode_tum("# comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn image_only_frames_skip_cloud_files() {
        let dataset = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &dataset).unwrap();
        let image_only: Vec<u32> = dataset
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.image_only)
            .map(|(i, _)| i as u32)
            .collect();
        assert!(!image_only.is_empty());
        for idx in image_only {
            assert!(frame_path(dir.path(), idx, "png").exists());
            assert!(!frame_path(dir.path(), idx, "raw.ply").exists());
            assert!(!frame_path(dir.path(), idx, "enh.ply").exists());
        }
        let imported = import_dataset(dir.path()).unwrap();
        let flags: Vec<bool> = imported.frames.iter().map(|f| f.image_only).collect();
        assert_eq!(flags, vec![false, true, false, true, false]);
    }

    #[test]
    fn identity_pose_round_trips_headers() {
        let row = TumRow::from_pose(0.0, &Pose::new(IDENTITY3, [0.0; 3], 0.0));
        assert_eq!(row.quat_xyzw, [0.0, 0.0, 0.0, 1.0]);
    }
}
