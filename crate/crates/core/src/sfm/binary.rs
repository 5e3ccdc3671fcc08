//! COLMAP `.bin` codec: little-endian, 64-bit counts, `u64::MAX` as the
//! unmatched-feature sentinel.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Vector2, Vector3};

use super::{
    CameraModel, CameraModelKind, FeaturePoint, ImageRecord, Location, Point3D, Pose, SfmError,
    SparseReconstruction, TrackElement, INVALID_POINT3D_ID,
};

struct Reader<'a> {
    path: &'a Path,
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            cur: Cursor::new(bytes),
        }
    }

    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn malformed(&self, at: u64, reason: impl Into<String>) -> SfmError {
        SfmError::MalformedRecord {
            file: self.path.to_path_buf(),
            location: Location::Byte(at),
            reason: reason.into(),
        }
    }

    fn eof(&self, what: &str) -> SfmError {
        self.malformed(self.offset(), format!("unexpected end of file reading {what}"))
    }

    fn u8(&mut self, what: &str) -> Result<u8, SfmError> {
        self.cur.read_u8().map_err(|_| self.eof(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32, SfmError> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.eof(what))
    }

    fn i32(&mut self, what: &str) -> Result<i32, SfmError> {
        self.cur.read_i32::<LittleEndian>().map_err(|_| self.eof(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SfmError> {
        self.cur.read_u64::<LittleEndian>().map_err(|_| self.eof(what))
    }

    fn f64(&mut self, what: &str) -> Result<f64, SfmError> {
        self.cur.read_f64::<LittleEndian>().map_err(|_| self.eof(what))
    }

    /// Guards allocations driven by a count field against truncated input.
    fn count(&mut self, what: &str, min_record_bytes: u64) -> Result<usize, SfmError> {
        let at = self.offset();
        let n = self.u64(what)?;
        let remaining = self.cur.get_ref().len() as u64 - self.offset();
        if n.saturating_mul(min_record_bytes) > remaining {
            return Err(self.malformed(at, format!("{what} = {n} exceeds remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }

    fn c_string(&mut self, what: &str) -> Result<String, SfmError> {
        let at = self.offset();
        let mut bytes = Vec::new();
        loop {
            let mut b = [0u8; 1];
            self.cur.read_exact(&mut b).map_err(|_| self.eof(what))?;
            if b[0] == 0 {
                break;
            }
            bytes.push(b[0]);
        }
        String::from_utf8(bytes).map_err(|_| self.malformed(at, format!("{what} is not UTF-8")))
    }

    fn finish(&self) -> Result<(), SfmError> {
        let len = self.cur.get_ref().len() as u64;
        if self.offset() != len {
            return Err(self.malformed(self.offset(), format!("{} trailing bytes", len - self.offset())));
        }
        Ok(())
    }
}

pub(super) fn read_cameras(path: &Path, bytes: &[u8]) -> Result<Vec<CameraModel>, SfmError> {
    let mut r = Reader::new(path, bytes);
    let n = r.count("camera count", 24)?;
    let mut cameras = Vec::with_capacity(n);
    for _ in 0..n {
        let camera_id = r.u32("camera_id")?;
        let model_id = r.i32("model_id")?;
        let model = CameraModelKind::from_colmap_id(model_id).ok_or(SfmError::UnsupportedCameraModel {
            camera_id,
            model: format!("id {model_id}"),
        })?;
        let at = r.offset();
        let width = r.u64("width")?;
        let height = r.u64("height")?;
        let (Ok(width), Ok(height)) = (u32::try_from(width), u32::try_from(height)) else {
            return Err(r.malformed(at, format!("camera {camera_id} size {width}x{height} too large")));
        };
        let params = (0..model.param_count())
            .map(|_| r.f64("camera params"))
            .collect::<Result<_, _>>()?;
        cameras.push(CameraModel {
            camera_id,
            model,
            width,
            height,
            params,
        });
    }
    r.finish()?;
    Ok(cameras)
}

pub(super) fn read_images(path: &Path, bytes: &[u8]) -> Result<Vec<ImageRecord>, SfmError> {
    let mut r = Reader::new(path, bytes);
    let n = r.count("image count", 69)?;
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let image_id = r.u32("image_id")?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = r.f64("qvec")?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = r.f64("tvec")?;
        }
        let camera_id = r.u32("camera_id")?;
        let name = r.c_string("image name")?;
        let num_points = r.count("points2D count", 24)?;
        let mut features = Vec::with_capacity(num_points);
        for _ in 0..num_points {
            let x = r.f64("point2D x")?;
            let y = r.f64("point2D y")?;
            let id = r.u64("point3D_id")?;
            features.push(FeaturePoint {
                xy: Vector2::new(x, y),
                point3d_id: (id != INVALID_POINT3D_ID).then_some(id),
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
    r.finish()?;
    Ok(images)
}

pub(super) fn read_points3d(path: &Path, bytes: &[u8]) -> Result<Vec<Point3D>, SfmError> {
    let mut r = Reader::new(path, bytes);
    let n = r.count("point count", 51)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let point3d_id = r.u64("point3D_id")?;
        if point3d_id == INVALID_POINT3D_ID {
            return Err(r.malformed(at, "point uses the reserved id"));
        }
        let x = r.f64("x")?;
        let y = r.f64("y")?;
        let z = r.f64("z")?;
        let color = [r.u8("r")?, r.u8("g")?, r.u8("b")?];
        let error = r.f64("error")?;
        let track_len = r.count("track length", 8)?;
        let track = (0..track_len)
            .map(|_| {
                Ok(TrackElement {
                    image_id: r.u32("track image_id")?,
                    feature_index: r.u32("track point2D_idx")?,
                })
            })
            .collect::<Result<_, SfmError>>()?;
        points.push(Point3D {
            point3d_id,
            xyz: Vector3::new(x, y, z),
            color,
            error,
            track,
        });
    }
    r.finish()?;
    Ok(points)
}

// Writes into a Vec<u8> cannot fail.
pub(super) fn write_cameras(recon: &SparseReconstruction) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(recon.cameras().len() as u64).unwrap();
    for cam in recon.cameras().values() {
        out.write_u32::<LittleEndian>(cam.camera_id).unwrap();
        out.write_i32::<LittleEndian>(cam.model.colmap_id()).unwrap();
        out.write_u64::<LittleEndian>(u64::from(cam.width)).unwrap();
        out.write_u64::<LittleEndian>(u64::from(cam.height)).unwrap();
        for p in &cam.params {
            out.write_f64::<LittleEndian>(*p).unwrap();
        }
    }
    out
}

pub(super) fn write_images(recon: &SparseReconstruction) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(recon.images().len() as u64).unwrap();
    for img in recon.images().values() {
        out.write_u32::<LittleEndian>(img.image_id).unwrap();
        for q in img.pose.qvec {
            out.write_f64::<LittleEndian>(q).unwrap();
        }
        for t in img.pose.tvec {
            out.write_f64::<LittleEndian>(t).unwrap();
        }
        out.write_u32::<LittleEndian>(img.camera_id).unwrap();
        out.extend_from_slice(img.name.as_bytes());
        out.push(0);
        out.write_u64::<LittleEndian>(img.features.len() as u64).unwrap();
        for f in &img.features {
            out.write_f64::<LittleEndian>(f.xy.x).unwrap();
            out.write_f64::<LittleEndian>(f.xy.y).unwrap();
            out.write_u64::<LittleEndian>(f.point3d_id.unwrap_or(INVALID_POINT3D_ID))
                .unwrap();
        }
    }
    out
}

pub(super) fn write_points3d(recon: &SparseReconstruction) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u64::<LittleEndian>(recon.points3d().len() as u64).unwrap();
    for p in recon.points3d().values() {
        out.write_u64::<LittleEndian>(p.point3d_id).unwrap();
        for v in p.xyz.iter() {
            out.write_f64::<LittleEndian>(*v).unwrap();
        }
        out.extend_from_slice(&p.color);
        out.write_f64::<LittleEndian>(p.error).unwrap();
        out.write_u64::<LittleEndian>(p.track.len() as u64).unwrap();
        for el in &p.track {
            out.write_u32::<LittleEndian>(el.image_id).unwrap();
            out.write_u32::<LittleEndian>(el.feature_index).unwrap();
        }
    }
    out
}
