//! `pgm-motion/1` JSON-lines container: a header line followed by one line
//! per frame.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sequence::{Frame, Motion};
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

pub const MOTION_FORMAT: &str = "pgm-motion/1";

#[derive(Serialize, Deserialize)]
struct MotionHeader {
    format: String,
    skeleton: Skeleton,
    fps: f64,
    frames: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, String>,
}

pub fn motion_to_jsonl(skeleton: &Skeleton, motion: &Motion) -> Result<String> {
    motion_to_jsonl_tagged(skeleton, motion, &BTreeMap::new())
}

/// As [`motion_to_jsonl`] with provenance tags in the header.
pub fn motion_to_jsonl_tagged(
    skeleton: &Skeleton,
    motion: &Motion,
    provenance: &BTreeMap<String, String>,
) -> Result<String> {
    let header = MotionHeader {
        format: MOTION_FORMAT.into(),
        skeleton: skeleton.clone(),
        fps: motion.fps,
        frames: motion.len(),
        provenance: provenance.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for f in &motion.frames {
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn motion_from_jsonl(text: &str) -> Result<(Skeleton, Motion)> {
    motion_from_jsonl_tagged(text).map(|(s, m, _)| (s, m))
}

pub fn motion_from_jsonl_tagged(
    text: &str,
) -> Result<(Skeleton, Motion, BTreeMap<String, String>)> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty motion file".into(),
    })?;
    let header: MotionHeader = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != MOTION_FORMAT {
        return Err(Error::Version {
            found: header.format,
            expected: MOTION_FORMAT.into(),
        });
    }
    let mut frames = Vec::with_capacity(header.frames);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Frame = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        frames.push(f);
    }
    if frames.len() != header.frames {
        return Err(Error::Parse {
            line: frames.len() + 2,
            msg: format!("expected {} frames, found {}", header.frames, frames.len()),
        });
    }
    let motion = Motion {
        fps: header.fps,
        frames,
    };
    motion.check_compatible(&header.skeleton)?;
    Ok((header.skeleton, motion, header.provenance))
}

pub fn write_motion(path: &Path, skeleton: &Skeleton, motion: &Motion) -> Result<()> {
    let text = motion_to_jsonl(skeleton, motion)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_motion(path: &Path) -> Result<(Skeleton, Motion)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    motion_from_jsonl(&text)
}
