//! COLMAP `.txt` codec. Floats are written in shortest round-trip form so
//! a write→parse→write cycle reproduces every line.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};

use super::{
    CameraModel, CameraModelKind, FeaturePoint, ImageRecord, Location, Point3D, Pose, SfmError,
    SparseReconstruction, TrackElement,
};

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, line: usize, text: &'a str) -> Self {
        Self {
            path,
            line,
            tokens: text.split_whitespace(),
        }
    }

    fn malformed(&self, reason: impl Into<String>) -> SfmError {
        SfmError::MalformedRecord {
            file: self.path.to_path_buf(),
            location: Location::Line(self.line),
            reason: reason.into(),
        }
    }

    fn raw(&mut self, what: &str) -> Result<&'a str, SfmError> {
        self.tokens
            .next()
            .ok_or_else(|| self.malformed(format!("missing {what}")))
    }

    fn next<T: FromStr>(&mut self, what: &str) -> Result<T, SfmError> {
        let tok = self.raw(what)?;
        tok.parse()
            .map_err(|_| self.malformed(format!("cannot parse {what} from {tok:?}")))
    }

    fn has_more(&mut self) -> bool {
        self.tokens.clone().next().is_some()
    }

    fn finish(mut self) -> Result<(), SfmError> {
        match self.tokens.next() {
            Some(tok) => Err(self.malformed(format!("unexpected trailing token {tok:?}"))),
            None => Ok(()),
        }
    }
}

/// Non-comment, non-blank lines with 1-based numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(super) fn read_cameras(path: &Path, text: &str) -> Result<Vec<CameraModel>, SfmError> {
    let mut cameras = Vec::new();
    for (line, content) in data_lines(text) {
        let mut f = Fields::new(path, line, content);
        let camera_id: u32 = f.next("CAMERA_ID")?;
        let model_name = f.raw("MODEL")?;
        let model = CameraModelKind::from_name(model_name).ok_or(SfmError::UnsupportedCameraModel {
            camera_id,
            model: model_name.to_string(),
        })?;
        let width = f.next("WIDTH")?;
        let height = f.next("HEIGHT")?;
        let params = (0..model.param_count())
            .map(|_| f.next::<f64>("PARAMS"))
            .collect::<Result<_, _>>()?;
        f.finish()?;
        cameras.push(CameraModel {
            camera_id,
            model,
            width,
            height,
            params,
        });
    }
    Ok(cameras)
}

pub(super) fn read_images(path: &Path, text: &str) -> Result<Vec<ImageRecord>, SfmError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut images = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let header = lines[i].trim();
        i += 1;
        if header.is_empty() || header.starts_with('#') {
            continue;
        }
        let mut f = Fields::new(path, i, header);
        let image_id = f.next("IMAGE_ID")?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = f.next("Q")?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = f.next("T")?;
        }
        let camera_id = f.next("CAMERA_ID")?;
        let name = f.raw("NAME")?.to_string();
        f.finish()?;

        // The observation line always follows its header, and may be empty.
        let obs = lines.get(i).map_or("", |l| l.trim());
        let obs_line = i + 1;
        i += 1;
        let mut f = Fields::new(path, obs_line, obs);
        let mut features = Vec::new();
        while f.has_more() {
            let x = f.next("X")?;
            let y = f.next("Y")?;
            let id: i64 = f.next("POINT3D_ID")?;
            let point3d_id = match id {
                -1 => None,
                id if id >= 0 => Some(id as u64),
                id => return Err(f.malformed(format!("negative POINT3D_ID {id}"))),
            };
            features.push(FeaturePoint {
                xy: Vector2::new(x, y),
                point3d_id,
            });
        }
        images.push(ImageRecord {
            image_id,
            name,
            pose: Pose { qvec, tvec },
            camera_id,
            features,
        });
    }
    Ok(images)
}

pub(super) fn read_points3d(path: &Path, text: &str) -> Result<Vec<Point3D>, SfmError> {
    let mut points = Vec::new();
    for (line, content) in data_lines(text) {
        let mut f = Fields::new(path, line, content);
        let point3d_id = f.next("POINT3D_ID")?;
        let xyz = Vector3::new(f.next("X")?, f.next("Y")?, f.next("Z")?);
        let color = [f.next("R")?, f.next("G")?, f.next("B")?];
        let error = f.next("ERROR")?;
        let mut track = Vec::new();
        while f.has_more() {
            track.push(TrackElement {
                image_id: f.next("IMAGE_ID")?,
                feature_index: f.next("POINT2D_IDX")?,
            });
        }
        points.push(Point3D {
            point3d_id,
            xyz,
            color,
            error,
            track,
        });
    }
    Ok(points)
}

pub(super) fn write_cameras(recon: &SparseReconstruction) -> String {
    let mut out = String::new();
    out.push_str("# Camera list with one line of data per camera:\n");
    out.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    writeln!(out, "# Number of cameras: {}", recon.cameras().len()).unwrap();
    for cam in recon.cameras().values() {
        write!(out, "{} {} {} {}", cam.camera_id, cam.model.name(), cam.width, cam.height).unwrap();
        for p in &cam.params {
            write!(out, " {p}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub(super) fn write_images(recon: &SparseReconstruction) -> String {
    let mut out = String::new();
    let observations: usize = recon
        .images()
        .values()
        .map(|i| i.features.iter().filter(|f| f.point3d_id.is_some()).count())
        .sum();
    let mean = if recon.images().is_empty() {
        0.0
    } else {
        observations as f64 / recon.images().len() as f64
    };
    out.push_str("# Image list with two lines of data per image:\n");
    out.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    out.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    writeln!(
        out,
        "# Number of images: {}, mean observations per image: {mean}",
        recon.images().len()
    )
    .unwrap();
    for img in recon.images().values() {
        let [qw, qx, qy, qz] = img.pose.qvec;
        let [tx, ty, tz] = img.pose.tvec;
        writeln!(
            out,
            "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}",
            img.image_id, img.camera_id, img.name
        )
        .unwrap();
        let mut first = true;
        for f in &img.features {
            if !first {
                out.push(' ');
            }
            first = false;
            match f.point3d_id {
                Some(id) => write!(out, "{} {} {id}", f.xy.x, f.xy.y),
                None => write!(out, "{} {} -1", f.xy.x, f.xy.y),
            }
            .unwrap();
        }
        out.push('\n');
    }
    out
}

pub(super) fn write_points3d(recon: &SparseReconstruction) -> String {
    let mut out = String::new();
    let total: usize = recon.points3d().values().map(|p| p.track.len()).sum();
    let mean = if recon.points3d().is_empty() {
        0.0
    } else {
        total as f64 / recon.points3d().len() as f64
    };
    out.push_str("# 3D point list with one line of data per point:\n");
    out.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    writeln!(
        out,
        "# Number of points: {}, mean track length: {mean}",
        recon.points3d().len()
    )
    .unwrap();
    for p in recon.points3d().values() {
        let [r, g, b] = p.color;
        write!(
            out,
            "{} {} {} {} {r} {g} {b} {}",
            p.point3d_id, p.xyz.x, p.xyz.y, p.xyz.z, p.error
        )
        .unwrap();
        for el in &p.track {
            write!(out, " {} {}", el.image_id, el.feature_index).unwrap();
        }
        out.push('\n');
    }
    out
}
