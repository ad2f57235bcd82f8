//! `RFSC` scene archive: magic, u32 version, u64 seed, then tagged sections
//! (`FRID`, `PCLD`, `BOXS`, `CALB`, optional `SEGS`), each a 4-byte tag and a
//! u64 payload length. Unknown tags are skipped. All little-endian.

use std::io::{Read, Write};

use nalgebra::{Matrix3x4, Matrix4};

use crate::error::{Error, Result};
use crate::fusionkp::{read_seg_scores, write_seg_scores};
use crate::geom::{CalibContext, OrientedBox3D, PointCloud};
use crate::head::ObjectClass;

use super::synthetic::SyntheticScene;
use super::{Difficulty, Frame, GroundTruth};

pub const SCENE_MAGIC: &[u8; 4] = b"RFSC";
pub const SCENE_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::MalformedFile("scene archive is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_f64s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn class_code(c: ObjectClass) -> u8 {
    match c {
        ObjectClass::Car => 0,
        ObjectClass::Pedestrian => 1,
        ObjectClass::Cyclist => 2,
    }
}

fn difficulty_code(d: Difficulty) -> u8 {
    match d {
        Difficulty::Easy => 0,
        Difficulty::Moderate => 1,
        Difficulty::Hard => 2,
        Difficulty::Ignored => 3,
    }
}

pub fn write_scene<W: Write>(scene: &SyntheticScene, mut w: W) -> Result<()> {
    let f = &scene.frame;
    let mut out = Vec::new();
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&scene.seed.to_le_bytes());

    section(&mut out, b"FRID", f.id.as_bytes());

    let mut p = Vec::new();
    p.extend_from_slice(&(f.cloud.len() as u64).to_le_bytes());
    put_f64s(&mut p, f.cloud.points().iter().flatten().copied());
    for o in &scene.point_object {
        p.extend_from_slice(&o.map_or(-1, |i| i as i32).to_le_bytes());
    }
    section(&mut out, b"PCLD", &p);

    let mut b = Vec::new();
    b.extend_from_slice(&(f.objects.len() as u32).to_le_bytes());
    for g in &f.objects {
        b.push(class_code(g.class));
        b.push(difficulty_code(g.difficulty));
        put_f64s(&mut b, g.bbox.center.iter().chain(&g.bbox.size).copied());
        put_f64s(&mut b, [g.bbox.yaw]);
    }
    section(&mut out, b"BOXS", &b);

    let mut c = Vec::new();
    let t = f.calib.lidar_to_cam();
    let m = f.calib.projection();
    put_f64s(&mut c, (0..4).flat_map(|r| (0..4).map(move |k| t[(r, k)])));
    put_f64s(&mut c, (0..3).flat_map(|r| (0..4).map(move |k| m[(r, k)])));
    c.extend_from_slice(&f.calib.image_size().0.to_le_bytes());
    c.extend_from_slice(&f.calib.image_size().1.to_le_bytes());
    section(&mut out, b"CALB", &c);

    if let Some(seg) = &f.segmentation {
        let mut s = Vec::new();
        write_seg_scores(seg, &mut s)?;
        section(&mut out, b"SEGS", &s);
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_scene<R: Read>(mut r: R) -> Result<SyntheticScene> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4).ok() != Some(&SCENE_MAGIC[..]) {
        return Err(Error::MalformedFile("not a scene archive".into()));
    }
    let version = cur.u32()?;
    if version != SCENE_VERSION {
        return Err(Error::MalformedFile(format!("unsupported scene version {version}")));
    }
    let seed = cur.u64()?;
    let (mut id, mut cloud, mut objects, mut calib, mut seg) = (None, None, None, None, None);
    while !cur.done() {
        let tag: [u8; 4] = cur.take(4)?.try_into().unwrap();
        let len = cur.u64()? as usize;
        let mut s = Cursor {
            buf: cur.take(len)?,
            pos: 0,
        };
        match &tag {
            b"FRID" => {
                id = Some(
                    String::from_utf8(s.buf.to_vec()).map_err(|_| Error::MalformedFile("frame id is not UTF-8".into()))?,
                );
            }
            b"PCLD" => {
                let n = s.u64()? as usize;
                let mut pts = Vec::with_capacity(n);
                for _ in 0..n {
                    pts.push([s.f64()?, s.f64()?, s.f64()?, s.f64()?]);
                }
                let mut owner = Vec::with_capacity(n);
                for _ in 0..n {
                    let o = s.i32()?;
                    owner.push((o >= 0).then_some(o as usize));
                }
                let pc = PointCloud::new(pts).map_err(|e| Error::MalformedFile(e.to_string()))?;
                cloud = Some((pc, owner));
            }
            b"BOXS" => {
                let n = s.u32()? as usize;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    let class = match s.u8()? {
                        0 => ObjectClass::Car,
                        1 => ObjectClass::Pedestrian,
                        2 => ObjectClass::Cyclist,
                        k => return Err(Error::MalformedFile(format!("class code {k}"))),
                    };
                    let difficulty = match s.u8()? {
                        0 => Difficulty::Easy,
                        1 => Difficulty::Moderate,
                        2 => Difficulty::Hard,
                        3 => Difficulty::Ignored,
                        k => return Err(Error::MalformedFile(format!("difficulty code {k}"))),
                    };
                    let c = [s.f64()?, s.f64()?, s.f64()?];
                    let size = [s.f64()?, s.f64()?, s.f64()?];
                    let bbox = OrientedBox3D::new(c, size, s.f64()?)
                        .map_err(|e| Error::MalformedFile(e.to_string()))?;
                    v.push(GroundTruth { class, bbox, difficulty });
                }
                objects = Some(v);
            }
            b"CALB" => {
                let mut t = [0.0; 16];
                for v in &mut t {
                    *v = s.f64()?;
                }
                let mut m = [0.0; 12];
                for v in &mut m {
                    *v = s.f64()?;
                }
                let size = (s.u32()?, s.u32()?);
                calib = Some(
                    CalibContext::new(Matrix4::from_row_slice(&t), Matrix3x4::from_row_slice(&m), size)
                        .map_err(|e| Error::MalformedFile(e.to_string()))?,
                );
            }
            b"SEGS" => seg = Some(read_seg_scores(s.buf)?),
            _ => {}
        }
    }
    let missing = |what: &str| Error::MalformedFile(format!("scene archive lacks {what}"));
    let (cloud, point_object) = cloud.ok_or_else(|| missing("PCLD"))?;
    Ok(SyntheticScene {
        frame: Frame {
            id: id.unwrap_or_else(|| format!("{seed:06}")),
            cloud,
            calib: calib.ok_or_else(|| missing("CALB"))?,
            objects: objects.ok_or_else(|| missing("BOXS"))?,
            segmentation: seg,
        },
        seed,
        point_object,
    })
}
