//! File formats: binary PPM/PGM images, PFM depth, the feature file,
//! pose JSON and the on-disk layout of a two-frame dataset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::depth_map::DepthMap;
use crate::error::{ensure, Error, Result};
use crate::geometry::RigidPose;
use crate::numerics::Grid2;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Splits a Netpbm-style header into `count` whitespace-separated tokens
/// (skipping `#` comments) and returns them with the offset of the payload,
/// which starts after exactly one whitespace byte.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        ensure!(i > start, Format, "truncated header");
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    ensure!(i < bytes.len(), Format, "missing payload");
    Ok((tokens, i + 1))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| format_err(format!("bad {what}: {s:?}")))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (`P6`, 8-bit). One-channel grids are written as gray.
pub fn encode_ppm(image: &Grid2) -> Result<Vec<u8>> {
    let (h, w, c) = image.shape();
    ensure!(c == 1 || c == 3, Contract, "PPM needs 1 or 3 channels, got {c}");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                out.push(to_byte(image.at(y, x, if c == 3 { k } else { 0 })));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Grid2> {
    let (t, off) = header_tokens(bytes, 4)?;
    ensure!(t[0] == "P6", Format, "not a binary PPM (magic {:?})", t[0]);
    let (w, h): (usize, usize) = (parse(&t[1], "width")?, parse(&t[2], "height")?);
    let max: u32 = parse(&t[3], "maxval")?;
    ensure!(max == 255, Format, "only 8-bit PPM is supported");
    let data = &bytes[off..];
    ensure!(data.len() >= h * w * 3, Format, "PPM payload too short");
    Grid2::new(
        h,
        w,
        3,
        data[..h * w * 3].iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Binary PGM (`P5`, 8-bit) of a one-channel grid mapped from `[lo, hi]`.
pub fn encode_pgm(g: &Grid2, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let (h, w, c) = g.shape();
    ensure!(c == 1, Contract, "PGM needs one channel, got {c}");
    ensure!(hi > lo, Contract, "PGM range [{lo}, {hi}] is empty");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(g.data().iter().map(|&v| to_byte((v - lo) / (hi - lo))));
    Ok(out)
}

/// Values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grid2> {
    let (t, off) = header_tokens(bytes, 4)?;
    ensure!(t[0] == "P5", Format, "not a binary PGM (magic {:?})", t[0]);
    let (w, h): (usize, usize) = (parse(&t[1], "width")?, parse(&t[2], "height")?);
    let max: u32 = parse(&t[3], "maxval")?;
    ensure!(max == 255, Format, "only 8-bit PGM is supported");
    let data = &bytes[off..];
    ensure!(data.len() >= h * w, Format, "PGM payload too short");
    Grid2::new(h, w, 1, data[..h * w].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Grayscale PFM: `Pf`, scale −1 (little-endian), rows bottom-up.
/// Invalid pixels are written as 0.
pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let d = if depth.is_valid(y, x) { depth.at(y, x) } else { 0.0 };
            out.extend_from_slice(&(d as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a grayscale PFM of either endianness; non-positive or non-finite
/// samples become invalid pixels.
pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let (t, off) = header_tokens(bytes, 4)?;
    ensure!(t[0] == "Pf", Format, "not a grayscale PFM (magic {:?})", t[0]);
    let (w, h): (usize, usize) = (parse(&t[1], "width")?, parse(&t[2], "height")?);
    let scale: f64 = parse(&t[3], "scale")?;
    ensure!(scale != 0.0, Format, "PFM scale must be nonzero");
    let data = &bytes[off..];
    ensure!(data.len() >= h * w * 4, Format, "PFM payload too short");
    let mut depth = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for (i, chunk) in data[..h * w * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        } as f64;
        let (row, x) = (h - 1 - i / w, i % w);
        if v.is_finite() && v > 0.0 {
            depth[row * w + x] = v;
            valid[row * w + x] = true;
        }
    }
    DepthMap::with_mask(h, w, depth, valid)
}

/// Magic bytes of the feature file.
pub const FEATURE_MAGIC: [u8; 4] = *b"M2DF";

/// Feature file: magic, then `H, W, C, scale` as u32 LE, then `H·W·C`
/// f32 LE values in row-major, channel-fastest order.
pub fn encode_features(f: &Grid2, scale: usize) -> Vec<u8> {
    let (h, w, c) = f.shape();
    let mut out = Vec::with_capacity(20 + h * w * c * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    for v in [h, w, c, scale] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in f.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Features and their downsampling factor.
pub fn decode_features(bytes: &[u8]) -> Result<(Grid2, usize)> {
    ensure!(
        bytes.len() >= 20 && bytes[..4] == FEATURE_MAGIC,
        Format,
        "not a feature file"
    );
    let word = |i: usize| {
        u32::from_le_bytes([bytes[4 + 4 * i], bytes[5 + 4 * i], bytes[6 + 4 * i], bytes[7 + 4 * i]])
            as usize
    };
    let (h, w, c, scale) = (word(0), word(1), word(2), word(3));
    ensure!(scale >= 1, Format, "feature scale must be positive");
    let n = h * w * c;
    ensure!(bytes.len() == 20 + n * 4, Format, "feature payload has the wrong length");
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((Grid2::new(h, w, c, data)?, scale))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, image: &Grid2) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Grid2> {
    decode_ppm(&read_bytes(path)?)
}

pub fn write_pgm(path: &Path, g: &Grid2, lo: f64, hi: f64) -> Result<()> {
    write_bytes(path, &encode_pgm(g, lo, hi)?)
}

pub fn read_pgm(path: &Path) -> Result<Grid2> {
    decode_pgm(&read_bytes(path)?)
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_bytes(path)?)
}

pub fn write_features(path: &Path, f: &Grid2, scale: usize) -> Result<()> {
    write_bytes(path, &encode_features(f, scale))
}

pub fn read_features(path: &Path) -> Result<(Grid2, usize)> {
    decode_features(&read_bytes(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

/// Ego motion `P_{t→t-1}` as a row-major 3×4 matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub ego_motion: Vec<f64>,
}

impl PoseFile {
    pub fn from_pose(p: &RigidPose) -> Self {
        Self {
            ego_motion: p.to_row_major_3x4().to_vec(),
        }
    }

    pub fn pose(&self) -> Result<RigidPose> {
        ensure!(
            self.ego_motion.len() == 12,
            Format,
            "ego_motion needs 12 values, got {}",
            self.ego_motion.len()
        );
        RigidPose::from_row_major_3x4(&self.ego_motion)
    }
}

/// Which of the two frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    Prev,
    Curr,
}

impl Frame {
    fn tag(self) -> &'static str {
        match self {
            Frame::Prev => "prev",
            Frame::Curr => "curr",
        }
    }
}

/// File names inside a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn rig(&self) -> PathBuf {
        self.root.join("rig.json")
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.json")
    }

    pub fn pose(&self) -> PathBuf {
        self.root.join("pose.json")
    }

    pub fn image(&self, cam: usize, frame: Frame) -> PathBuf {
        self.root
            .join("images")
            .join(format!("cam{cam}_{}.ppm", frame.tag()))
    }

    pub fn depth(&self, cam: usize, frame: Frame) -> PathBuf {
        self.root
            .join("depth")
            .join(format!("cam{cam}_{}.pfm", frame.tag()))
    }

    pub fn features(&self, cam: usize, frame: Frame) -> PathBuf {
        self.root
            .join("features")
            .join(format!("cam{cam}_{}.m2df", frame.tag()))
    }
}
