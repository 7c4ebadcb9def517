//! Binary dataset file, little-endian throughout:
//!
//! ```text
//! magic            4 bytes  "LGWD"
//! version          u32
//! world spec       extent f64, num_classes u32, max_objects u32,
//!                  num_classes x (w_min f64, w_max f64, l_min f64, l_max f64),
//!                  points_density f64, occlusion u8, point_noise f64,
//!                  range_noise f64, azimuth_bins u32, seed u64
//! scene count      u64
//! per scene        scene_id u64
//!                  n_boxes u32, n_boxes x (class_id i32, x f32, y f32, w f32, l f32, yaw f32)
//!                  n_points u32, n_points x (x f32, y f32)
//!                  bins u32, channels u32, bins x channels f32 (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{BoxLabel, Panorama, Scene, SizeRange, WorldError, WorldSpec};

pub const MAGIC: &[u8; 4] = b"LGWD";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_dataset(mut w: impl Write, spec: &WorldSpec, scenes: &[Scene]) -> Result<(), WorldError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_f64::<LE>(spec.extent)?;
    w.write_u32::<LE>(spec.num_classes as u32)?;
    w.write_u32::<LE>(spec.max_objects as u32)?;
    for s in &spec.class_sizes {
        for v in [s.width.0, s.width.1, s.length.0, s.length.1] {
            w.write_f64::<LE>(v)?;
        }
    }
    w.write_f64::<LE>(spec.points_density)?;
    w.write_u8(spec.occlusion as u8)?;
    w.write_f64::<LE>(spec.point_noise)?;
    w.write_f64::<LE>(spec.range_noise)?;
    w.write_u32::<LE>(spec.azimuth_bins as u32)?;
    w.write_u64::<LE>(spec.seed)?;
    w.write_u64::<LE>(scenes.len() as u64)?;
    for s in scenes {
        w.write_u64::<LE>(s.scene_id)?;
        w.write_u32::<LE>(s.boxes.len() as u32)?;
        for b in &s.boxes {
            w.write_i32::<LE>(b.class_id as i32)?;
            for v in [b.x, b.y, b.w, b.l, b.yaw] {
                w.write_f32::<LE>(v)?;
            }
        }
        w.write_u32::<LE>(s.lidar_points.len() as u32)?;
        for p in &s.lidar_points {
            w.write_f32::<LE>(p[0])?;
            w.write_f32::<LE>(p[1])?;
        }
        w.write_u32::<LE>(s.panorama.bins as u32)?;
        w.write_u32::<LE>(s.panorama.channels as u32)?;
        for &v in &s.panorama.data {
            w.write_f32::<LE>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn ctx<T>(r: std::io::Result<T>, what: &str) -> Result<T, WorldError> {
    r.map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => WorldError::Truncated(what.to_string()),
        _ => WorldError::Io(e),
    })
}

pub fn read_dataset(mut r: impl Read) -> Result<(WorldSpec, Vec<Scene>), WorldError> {
    let mut magic = [0u8; 4];
    ctx(r.read_exact(&mut magic), "header")?;
    if &magic != MAGIC {
        return Err(WorldError::BadMagic);
    }
    let version = ctx(r.read_u32::<LE>(), "header")?;
    if version != FORMAT_VERSION {
        return Err(WorldError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let h = "world spec";
    let extent = ctx(r.read_f64::<LE>(), h)?;
    let num_classes = ctx(r.read_u32::<LE>(), h)? as usize;
    let max_objects = ctx(r.read_u32::<LE>(), h)? as usize;
    if num_classes > 1 << 16 {
        return Err(WorldError::Corrupt(format!("implausible class count {num_classes}")));
    }
    let mut class_sizes = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v = [0.0; 4];
        for x in &mut v {
            *x = ctx(r.read_f64::<LE>(), h)?;
        }
        class_sizes.push(SizeRange { width: (v[0], v[1]), length: (v[2], v[3]) });
    }
    let spec = WorldSpec {
        extent,
        num_classes,
        max_objects,
        class_sizes,
        points_density: ctx(r.read_f64::<LE>(), h)?,
        occlusion: ctx(r.read_u8(), h)? != 0,
        point_noise: ctx(r.read_f64::<LE>(), h)?,
        range_noise: ctx(r.read_f64::<LE>(), h)?,
        azimuth_bins: ctx(r.read_u32::<LE>(), h)? as usize,
        seed: ctx(r.read_u64::<LE>(), h)?,
    };
    let count = ctx(r.read_u64::<LE>(), "scene count")?;
    let mut scenes = Vec::new();
    for i in 0..count {
        let what = format!("scene record {i}");
        let scene_id = ctx(r.read_u64::<LE>(), &what)?;
        let n_boxes = ctx(r.read_u32::<LE>(), &what)?;
        let mut boxes = Vec::new();
        for _ in 0..n_boxes {
            let class_id = ctx(r.read_i32::<LE>(), &what)?;
            if class_id < 0 {
                return Err(WorldError::Corrupt(format!("negative class id in {what}")));
            }
            let mut v = [0f32; 5];
            for x in &mut v {
                *x = ctx(r.read_f32::<LE>(), &what)?;
            }
            boxes.push(BoxLabel { class_id: class_id as u32, x: v[0], y: v[1], w: v[2], l: v[3], yaw: v[4] });
        }
        let n_points = ctx(r.read_u32::<LE>(), &what)?;
        let mut lidar_points = Vec::new();
        for _ in 0..n_points {
            lidar_points.push([ctx(r.read_f32::<LE>(), &what)?, ctx(r.read_f32::<LE>(), &what)?]);
        }
        let bins = ctx(r.read_u32::<LE>(), &what)? as usize;
        let channels = ctx(r.read_u32::<LE>(), &what)? as usize;
        let mut data = Vec::new();
        for _ in 0..bins * channels {
            data.push(ctx(r.read_f32::<LE>(), &what)?);
        }
        scenes.push(Scene { scene_id, boxes, lidar_points, panorama: Panorama { bins, channels, data } });
    }
    Ok((spec, scenes))
}

/// Writes to a sibling temp file and renames it into place.
pub fn serialize_dataset(path: &Path, spec: &WorldSpec, scenes: &[Scene]) -> Result<(), WorldError> {
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp)?;
        write_dataset(BufWriter::new(f), spec, scenes)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(WorldSpec, Vec<Scene>), WorldError> {
    read_dataset(BufReader::new(File::open(path)?))
}
