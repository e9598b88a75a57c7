//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// A decoded 8-bit image; `channels` is 3 for PPM and 1 for PGM, samples
/// interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u8,
    pub data: Vec<u8>,
}

pub fn encode(img: &Netpbm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, msg)
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(self.path, start as u64, format!("{what} out of range")))
    }
}

/// Parses a P5 or P6 file. `path` is only used to locate errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Netpbm> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(c.err("bad magic, expected P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(c.err(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.err("expected single whitespace before raster"));
    }
    c.pos += 1;
    let need = width * height * channels;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated raster: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(Error::format(
            path,
            (c.pos + need) as u64,
            "trailing bytes after raster",
        ));
    }
    let data = bytes[c.pos..].to_vec();
    if let Some(i) = data.iter().position(|&v| v as usize > maxval) {
        return Err(Error::format(
            path,
            (c.pos + i) as u64,
            "sample exceeds maxval",
        ));
    }
    Ok(Netpbm {
        width,
        height,
        channels,
        maxval: maxval as u8,
        data,
    })
}

pub fn read(path: &Path) -> Result<Netpbm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, img: &Netpbm) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb() -> Netpbm {
        Netpbm {
            width: 3,
            height: 2,
            channels: 3,
            maxval: 255,
            data: (0..18).map(|i| (i * 13) as u8).collect(),
        }
    }

    #[test]
    fn round_trip() {
        let img = rgb();
        assert_eq!(decode(&encode(&img), Path::new("x.ppm")).unwrap(), img);
        let gray = Netpbm {
            channels: 1,
            data: vec![0, 1, 2, 3, 0, 1],
            ..rgb()
        };
        assert_eq!(decode(&encode(&gray), Path::new("x.pgm")).unwrap(), gray);
    }

    #[test]
    fn header_comments_accepted() {
        let mut bytes = b"P5 # comment\n2 # w\n1\n255\n".to_vec();
        bytes.extend([7, 9]);
        let img = decode(&bytes, Path::new("c.pgm")).unwrap();
        assert_eq!(
            (img.width, img.height, img.data.clone()),
            (2, 1, vec![7, 9])
        );
    }

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corruption_is_located() {
        let good = encode(&rgb());
        let mut bad = good.clone();
        bad[0] = b'Q';
        assert_eq!(offset_of(decode(&bad, Path::new("a")).unwrap_err()), 0);
        let truncated = &good[..good.len() - 4];
        assert_eq!(
            offset_of(decode(truncated, Path::new("a")).unwrap_err()),
            truncated.len() as u64
        );
        let mut long = good.clone();
        long.push(0);
        assert_eq!(
            offset_of(decode(&long, Path::new("a")).unwrap_err()),
            good.len() as u64
        );
        assert!(decode(b"P6\nx 2\n255\n", Path::new("a")).is_err());
    }

    #[test]
    fn sample_above_maxval_rejected() {
        let mut bytes = b"P5\n2 1\n4\n".to_vec();
        bytes.extend([1, 5]);
        assert_eq!(offset_of(decode(&bytes, Path::new("m")).unwrap_err()), 10);
    }

    #[test]
    fn error_names_file() {
        let e = decode(b"P5\n", Path::new("dir/00001.inst.pgm")).unwrap_err();
        assert!(e.to_string().contains("00001.inst.pgm"));
    }
}
