//! On-disk formats: the "DPO1" scene container with its JSON sidecar,
//! the "DPOW" parameter checkpoint, and JSON-lines run logs.
//!
//! Container layout (little-endian): magic `DPO1`; u32 h, w, channels;
//! f64 cell_size; u64 scene count; then per scene a u32 box count, the
//! boxes as 7 float64 `[cx cy cz dx dy dz yaw]`, and the feature grid as
//! float32 row-major with the channel axis innermost. Seeds and configs
//! live in the sidecar at `<path>.json`.
//!
//! Checkpoint layout: magic `DPOW`; u32 input channels, hidden width,
//! output width; u64 value count; float64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::BatchRecord;
use crate::detector::{Params, OUT_DIM};
use crate::geom3d::Box3D;
use crate::scene_gen::{BevFeature, GenConfig, GridSpec, Scene, ShiftSpec};

const SCENE_MAGIC: &[u8; 4] = b"DPO1";
const PARAMS_MAGIC: &[u8; 4] = b"DPOW";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a {expected} file (bad magic)")]
    BadMagic { path: String, expected: String },
    #[error("{path} is truncated or malformed: {what}")]
    Malformed { path: String, what: String },
    #[error("sidecar error on {path}: {source}")]
    Sidecar {
        path: String,
        source: serde_json::Error,
    },
}

fn wrap_io<T>(path: &Path, result: std::io::Result<T>) -> Result<T, IoError> {
    result.map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Dataset metadata stored next to the binary container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub kind: String,
    pub grid: GridSpec,
    pub generator: GenConfig,
    pub shift: Option<ShiftSpec>,
    pub base_seed: u64,
    pub scene_seeds: Vec<u64>,
    /// Present for streams; scenes regroup into batches of this size.
    pub batch_size: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    std::path::PathBuf::from(name)
}

/// Writes the container and its sidecar.
pub fn write_scenes(
    path: &Path,
    scenes: &[Scene],
    grid: &GridSpec,
    sidecar: &DatasetSidecar,
) -> Result<(), IoError> {
    let file = wrap_io(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| wrap_io(path, w.write_all(buf));
    write(SCENE_MAGIC)?;
    write(&(grid.h as u32).to_le_bytes())?;
    write(&(grid.w as u32).to_le_bytes())?;
    write(&(grid.channels as u32).to_le_bytes())?;
    write(&grid.cell_size.to_le_bytes())?;
    write(&(scenes.len() as u64).to_le_bytes())?;
    for scene in scenes {
        write(&(scene.gt_boxes.len() as u32).to_le_bytes())?;
        for b in &scene.gt_boxes {
            for v in [b.cx, b.cy, b.cz, b.dx, b.dy, b.dz, b.yaw] {
                write(&v.to_le_bytes())?;
            }
        }
        for v in &scene.bev.values {
            write(&(*v as f32).to_le_bytes())?;
        }
    }
    wrap_io(path, w.flush())?;
    let json = serde_json::to_string_pretty(sidecar).map_err(|source| IoError::Sidecar {
        path: path.display().to_string(),
        source,
    })?;
    let sp = sidecar_path(path);
    wrap_io(&sp, std::fs::write(&sp, json))?;
    Ok(())
}

/// Loads a container and its sidecar back into scenes ordered as written.
pub fn load_scenes(path: &Path) -> Result<(Vec<Scene>, DatasetSidecar), IoError> {
    let sp = sidecar_path(path);
    let sidecar_text = wrap_io(&sp, std::fs::read_to_string(&sp))?;
    let sidecar: DatasetSidecar =
        serde_json::from_str(&sidecar_text).map_err(|source| IoError::Sidecar {
            path: sp.display().to_string(),
            source,
        })?;

    let file = wrap_io(path, File::open(path))?;
    let mut r = BufReader::new(file);
    let display = path.display().to_string();
    let mut magic = [0u8; 4];
    wrap_io(path, r.read_exact(&mut magic))?;
    if &magic != SCENE_MAGIC {
        return Err(IoError::BadMagic {
            path: display,
            expected: "DPO1".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, IoError> {
        wrap_io(path, r.read_exact(&mut u32buf))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    wrap_io(path, r.read_exact(&mut u64buf))?;
    let cell_size = f64::from_le_bytes(u64buf);
    wrap_io(path, r.read_exact(&mut u64buf))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let grid = GridSpec {
        h,
        w,
        channels,
        cell_size,
    };
    if grid != sidecar.grid {
        return Err(IoError::Malformed {
            path: display,
            what: "grid header disagrees with sidecar".into(),
        });
    }
    if sidecar.scene_seeds.len() != count {
        return Err(IoError::Malformed {
            path: display,
            what: "sidecar seed count disagrees with header".into(),
        });
    }
    let mut scenes = Vec::with_capacity(count);
    for idx in 0..count {
        wrap_io(path, r.read_exact(&mut u32buf))?;
        let n_boxes = u32::from_le_bytes(u32buf) as usize;
        let mut gt_boxes = Vec::with_capacity(n_boxes);
        for _ in 0..n_boxes {
            let mut vals = [0.0f64; 7];
            for v in vals.iter_mut() {
                wrap_io(path, r.read_exact(&mut u64buf))?;
                *v = f64::from_le_bytes(u64buf);
            }
            gt_boxes.push(Box3D::new(
                vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6],
            ));
        }
        let mut values = Vec::with_capacity(grid.entries());
        let mut f32buf = [0u8; 4];
        for _ in 0..grid.entries() {
            wrap_io(path, r.read_exact(&mut f32buf))?;
            values.push(f32::from_le_bytes(f32buf) as f64);
        }
        scenes.push(Scene {
            gt_boxes,
            bev: BevFeature {
                values,
                h,
                w,
                channels,
                cell_size,
            },
            shift_applied: sidecar.shift,
            seed: sidecar.scene_seeds[idx],
            objects: Vec::new(),
        });
    }
    Ok((scenes, sidecar))
}

/// Regroups a loaded stream container into its batches.
pub fn scenes_to_batches(scenes: Vec<Scene>, batch_size: usize) -> Vec<Vec<Scene>> {
    let mut batches = Vec::new();
    let mut current = Vec::with_capacity(batch_size);
    for scene in scenes {
        current.push(scene);
        if current.len() == batch_size {
            batches.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

pub fn write_params(path: &Path, params: &Params) -> Result<(), IoError> {
    let file = wrap_io(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    let mut write = |buf: &[u8]| wrap_io(path, w.write_all(buf));
    write(PARAMS_MAGIC)?;
    write(&(params.input_channels as u32).to_le_bytes())?;
    write(&(params.hidden as u32).to_le_bytes())?;
    write(&(OUT_DIM as u32).to_le_bytes())?;
    write(&(params.len() as u64).to_le_bytes())?;
    for v in &params.values {
        write(&v.to_le_bytes())?;
    }
    wrap_io(path, w.flush())
}

pub fn load_params(path: &Path) -> Result<Params, IoError> {
    let file = wrap_io(path, File::open(path))?;
    let mut r = BufReader::new(file);
    let display = path.display().to_string();
    let mut magic = [0u8; 4];
    wrap_io(path, r.read_exact(&mut magic))?;
    if &magic != PARAMS_MAGIC {
        return Err(IoError::BadMagic {
            path: display,
            expected: "DPOW".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    wrap_io(path, r.read_exact(&mut u32buf))?;
    let input_channels = u32::from_le_bytes(u32buf) as usize;
    wrap_io(path, r.read_exact(&mut u32buf))?;
    let hidden = u32::from_le_bytes(u32buf) as usize;
    wrap_io(path, r.read_exact(&mut u32buf))?;
    let out = u32::from_le_bytes(u32buf) as usize;
    wrap_io(path, r.read_exact(&mut u64buf))?;
    let len = u64::from_le_bytes(u64buf) as usize;
    if out != OUT_DIM || len != Params::expected_len(input_channels, hidden) {
        return Err(IoError::Malformed {
            path: display,
            what: format!("dims header inconsistent (out {out}, len {len})"),
        });
    }
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        wrap_io(path, r.read_exact(&mut u64buf))?;
        values.push(f64::from_le_bytes(u64buf));
    }
    Ok(Params {
        values,
        input_channels,
        hidden,
    })
}

/// One JSON object per batch record.
pub fn write_jsonl_log(path: &Path, records: &[BatchRecord]) -> Result<(), IoError> {
    let file = wrap_io(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|source| IoError::Sidecar {
            path: path.display().to_string(),
            source,
        })?;
        wrap_io(path, writeln!(w, "{line}"))?;
    }
    wrap_io(path, w.flush())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_gen::{derive_seed, make_dataset};
    use crate::testutil::test_grid_and_gen;

    #[test]
    fn scene_container_round_trips() {
        let (grid, gen_cfg) = test_grid_and_gen();
        let scenes = make_dataset(3, &gen_cfg, &grid, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.dpo1");
        let sidecar = DatasetSidecar {
            kind: "source".into(),
            grid,
            generator: gen_cfg,
            shift: None,
            base_seed: 42,
            scene_seeds: scenes.iter().map(|s| s.seed).collect(),
            batch_size: None,
        };
        write_scenes(&path, &scenes, &grid, &sidecar).unwrap();
        let (loaded, loaded_sidecar) = load_scenes(&path).unwrap();
        assert_eq!(loaded_sidecar, sidecar);
        assert_eq!(loaded.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.gt_boxes, b.gt_boxes);
            assert_eq!(a.seed, b.seed);
            // features go through f32, so loading is exact only after one hop
            for (x, y) in a.bev.values.iter().zip(&b.bev.values) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // a second write from loaded scenes is byte-identical
        let path2 = dir.path().join("scenes2.dpo1");
        write_scenes(&path2, &loaded, &grid, &loaded_sidecar).unwrap();
        let (reloaded, _) = load_scenes(&path2).unwrap();
        assert_eq!(
            reloaded.iter().map(|s| &s.bev).collect::<Vec<_>>(),
            loaded.iter().map(|s| &s.bev).collect::<Vec<_>>()
        );
    }

    #[test]
    fn params_checkpoint_round_trips_bitwise() {
        let params = Params::random_init(7, 8, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.dpow");
        write_params(&path, &params).unwrap();
        assert_eq!(load_params(&path).unwrap(), params);
    }

    #[test]
    fn bad_magic_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.dpow");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_params(&path),
            Err(IoError::BadMagic { .. })
        ));
    }

    #[test]
    fn batches_regroup() {
        let (grid, gen_cfg) = test_grid_and_gen();
        let scenes = make_dataset(5, &gen_cfg, &grid, derive_seed(1, 2)).unwrap();
        let batches = scenes_to_batches(scenes, 2);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 1);
    }
}
