//! IDX files: big-endian header, unsigned-byte payload.
//!
//! Images use magic `0x00000803` (`[n, rows, cols]`); `0x00000804`
//! (`[n, channels, rows, cols]`) is accepted for multi-channel data. Labels use
//! `0x00000801` (`[n]`). Gzip-compressed files are decompressed on load.

use std::io::Read;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IMAGES_RGB_MAGIC: u32 = 0x0000_0804;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.into(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

/// Parse header and payload; returns the dimension list and the payload.
fn parse<'a>(bytes: &'a [u8], path: &Path, accepted: &[u32]) -> Result<(Vec<usize>, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if !accepted.contains(&magic) {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
            expected: accepted[0],
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|k| be_u32(bytes, 4 + 4 * k, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let want: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < want {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("header promises {want} payload bytes, file holds {have}"),
        });
    }
    if have > want {
        return Err(Error::CountMismatch {
            path: path.into(),
            detail: format!("{} trailing bytes after the {want} promised by the header", have - want),
        });
    }
    Ok((dims, &bytes[start..]))
}

/// Load an image file and its label file; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let (dims, payload) = parse(&img_bytes, images, &[IMAGES_MAGIC, IMAGES_RGB_MAGIC])?;
    let (n, c, h, w) = match dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => unreachable!("rank fixed by magic"),
    };
    let lab_bytes = read(labels)?;
    let (ldims, lpayload) = parse(&lab_bytes, labels, &[LABELS_MAGIC])?;
    if ldims[0] != n {
        return Err(Error::CountMismatch {
            path: labels.into(),
            detail: format!("{} labels for {n} images in {}", ldims[0], images.display()),
        });
    }
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("{}: empty image set", images.display())));
    }
    Ok(Dataset {
        channels: c,
        height: h,
        width: w,
        pixels: payload.iter().map(|&b| b as f32 / 255.0).collect(),
        labels: lpayload.iter().map(|&b| b as usize).collect(),
    })
}

/// Write `data` as an image file and a label file. Pixels are quantized to
/// the nearest multiple of 1/255.
pub fn write_idx(images: &Path, labels: &Path, data: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(20 + data.pixels.len());
    if data.channels == 1 {
        out.extend(IMAGES_MAGIC.to_be_bytes());
        for d in [data.len(), data.height, data.width] {
            out.extend((d as u32).to_be_bytes());
        }
    } else {
        out.extend(IMAGES_RGB_MAGIC.to_be_bytes());
        for d in [data.len(), data.channels, data.height, data.width] {
            out.extend((d as u32).to_be_bytes());
        }
    }
    out.extend(data.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(images, out).map_err(|e| Error::io(images, e))?;

    let mut out = Vec::with_capacity(8 + data.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((data.len() as u32).to_be_bytes());
    for &l in &data.labels {
        let b = u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    std::fs::write(labels, out).map_err(|e| Error::io(labels, e))
}
