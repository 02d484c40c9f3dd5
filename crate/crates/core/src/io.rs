//! PNG images, tensor dumps and user-supplied stereo pairs on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dh_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseTransform};
use crate::scene::BackgroundPair;

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decoded 8-bit pixels as `(channels, height, width, bytes)`.
fn decode(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let f = File::open(path)?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| format_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err(path, "unexpanded palette image")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    // Rows may be padded to `line_size`.
    let mut packed = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(info.line_size).take(h) {
        packed.extend_from_slice(&row[..w * channels]);
    }
    Ok((channels, h, w, packed))
}

/// Reads an image as `[3, H, W]` in `[0, 1]`. Gray is replicated, alpha dropped.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (c, h, w, px) = decode(path)?;
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for p in 0..h * w {
        for ch in 0..3 {
            let src = if c < 3 { 0 } else { ch };
            d[ch * h * w + p] = px[p * c + src] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Reads a mask as `[1, H, W]` with values in `{0, 1}`: a pixel is set when
/// its first channel is at least 128, or its alpha when present.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (c, h, w, px) = decode(path)?;
    let src = match c {
        2 => 1,
        4 => 3,
        _ => 0,
    };
    Ok(Tensor::from_fn(&[1, h, w], |p| if px[p * c + src] >= 128 { 1.0 } else { 0.0 }))
}

fn encode(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let f = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| format_err(path, e))?;
    writer.finish().map_err(|e| format_err(path, e))?;
    Ok(())
}

/// Writes a `[3, H, W]` tensor as 8-bit RGB, clamping to `[0, 1]`.
pub fn write_rgb(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!("RGB image must be [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            bytes.push(to_u8(d[c * h * w + p]));
        }
    }
    encode(path.as_ref(), w, h, png::ColorType::Rgb, &bytes)
}

/// Writes a `[1, H, W]` tensor as 8-bit grayscale.
pub fn write_gray(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Contract(format!("gray image must be [1,H,W], got {s:?}")));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    encode(path.as_ref(), s[2], s[1], png::ColorType::Grayscale, &bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let f = File::create(path)?;
    t.write_dump(BufWriter::new(f))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path)?;
    Tensor::read_dump(BufReader::new(f)).map_err(|e| format_err(path, e))
}

/// Camera sidecar of a user stereo pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSidecar {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Target-to-source rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Loads every stereo pair in `dir`. A pair named `NAME` consists of
/// `NAME_t.png`, `NAME_s.png`, `NAME.json` and optionally `NAME_depth.dhtn`
/// holding `[1, H, W]` target depth. Pairs are returned sorted by name and
/// must share intrinsics.
pub fn load_stereo_dir(dir: impl AsRef<Path>) -> Result<(CameraIntrinsics, Vec<BackgroundPair>)> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_owned))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no stereo pair sidecars in {}", dir.display())));
    }
    let mut intrinsics: Option<CameraIntrinsics> = None;
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let at = |suffix: &str| -> PathBuf { dir.join(format!("{name}{suffix}")) };
        let sidecar_path = at(".json");
        let sidecar: PoseSidecar =
            serde_json::from_reader(BufReader::new(File::open(&sidecar_path)?)).map_err(|e| format_err(&sidecar_path, e))?;
        let frame_t = read_rgb(at("_t.png"))?;
        let frame_s = read_rgb(at("_s.png"))?;
        let (h, w) = (frame_t.shape()[1], frame_t.shape()[2]);
        let k = CameraIntrinsics::new(sidecar.fx, sidecar.fy, sidecar.cx, sidecar.cy, w, h)?;
        match &intrinsics {
            None => intrinsics = Some(k),
            Some(k0) if *k0 != k => {
                return Err(Error::Config(format!("pair {name} has intrinsics differing from the first pair")));
            }
            _ => {}
        }
        let depth_path = at("_depth.dhtn");
        let depth_t = if depth_path.exists() { Some(read_tensor(&depth_path)?) } else { None };
        let pair = BackgroundPair {
            frame_t,
            frame_s,
            pose: PoseTransform::from_row_major(sidecar.rotation, sidecar.translation)?,
            depth_t,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok((intrinsics.expect("at least one pair"), pairs))
}

/// Writes `pair` in the layout read by [`load_stereo_dir`].
pub fn save_stereo_pair(dir: impl AsRef<Path>, name: &str, k: &CameraIntrinsics, pair: &BackgroundPair) -> Result<()> {
    let dir = dir.as_ref();
    write_rgb(dir.join(format!("{name}_t.png")), &pair.frame_t)?;
    write_rgb(dir.join(format!("{name}_s.png")), &pair.frame_s)?;
    let t = pair.pose.translation;
    let sidecar = PoseSidecar {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        rotation: pair.pose.rotation_row_major(),
        translation: [t.x, t.y, t.z],
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(format!("{name}.json")), json)?;
    if let Some(d) = &pair.depth_t {
        write_tensor(dir.join(format!("{name}_depth.dhtn")), d)?;
    }
    Ok(())
}
