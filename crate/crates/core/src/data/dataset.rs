//! Directory layout: per sample `NNNNN.ppm` (RGB), `NNNNN.inst.pgm`
//! (instance index per pixel, 0 background) and `NNNNN.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{self, Netpbm};
use super::synth::{tight_box, Instance, SynthSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f32; 4],
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    schema_version: u32,
    has_mask: bool,
    instances: Vec<InstanceRecord>,
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

/// Writes `samples` as `00000.*`, `00001.*`, … creating `dir` if needed.
pub fn write_dataset(samples: &[SynthSample], dir: &Path) -> Result<()> {
    if samples.len() > 100_000 {
        return Err(Error::InvalidArgument(
            "at most 100000 samples per directory".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(s, dir, &stem(i))?;
    }
    Ok(())
}

fn write_sample(s: &SynthSample, dir: &Path, stem: &str) -> Result<()> {
    if s.instances.len() > 255 {
        return Err(Error::InvalidArgument(
            "at most 255 instances per image".into(),
        ));
    }
    let n = s.pixels();
    let mut rgb = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            rgb[3 * i + c] = s.image[c * n + i];
        }
    }
    netpbm::write(
        &dir.join(format!("{stem}.ppm")),
        &Netpbm {
            width: s.width,
            height: s.height,
            channels: 3,
            maxval: 255,
            data: rgb,
        },
    )?;
    let mut inst = vec![0u8; n];
    for (k, instance) in s.instances.iter().enumerate() {
        for (o, &m) in inst.iter_mut().zip(&instance.mask) {
            if m {
                *o = (k + 1) as u8;
            }
        }
    }
    netpbm::write(
        &dir.join(format!("{stem}.inst.pgm")),
        &Netpbm {
            width: s.width,
            height: s.height,
            channels: 1,
            maxval: 255,
            data: inst,
        },
    )?;
    let record = SampleRecord {
        schema_version: SCHEMA_VERSION,
        has_mask: s.has_mask_annotation,
        instances: s
            .instances
            .iter()
            .map(|i| InstanceRecord {
                class: i.class,
                bbox: [i.bbox.x_min, i.bbox.y_min, i.bbox.x_max, i.bbox.y_max],
            })
            .collect(),
    };
    let path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&record).expect("record serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)) as u64
}

/// Reads one sample given the path of its JSON file. Every inconsistency
/// names the offending file.
pub fn read_sample(json_path: &Path) -> Result<SynthSample> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let record: SampleRecord = serde_json::from_str(&text).map_err(|e| {
        Error::format(
            json_path,
            byte_offset(&text, e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if record.schema_version != SCHEMA_VERSION {
        let off = text.find("schema_version").unwrap_or(0) as u64;
        return Err(Error::format(
            json_path,
            off,
            format!("unsupported schema version {}", record.schema_version),
        ));
    }
    let stem = json_path
        .file_name()
        .and_then(|f| f.to_str())
        .and_then(|f| f.strip_suffix(".json"))
        .ok_or_else(|| Error::format(json_path, 0, "not a sample json file"))?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let ppm_path = dir.join(format!("{stem}.ppm"));
    let pgm_path = dir.join(format!("{stem}.inst.pgm"));
    let ppm = netpbm::read(&ppm_path)?;
    let pgm_bytes = std::fs::read(&pgm_path).map_err(|e| Error::io(&pgm_path, e))?;
    let pgm = netpbm::decode(&pgm_bytes, &pgm_path)?;
    let raster_start = (pgm_bytes.len() - pgm.data.len()) as u64;
    if ppm.channels != 3 || ppm.maxval != 255 {
        return Err(Error::format(&ppm_path, 0, "expected an 8-bit P6 image"));
    }
    if pgm.channels != 1 {
        return Err(Error::format(&pgm_path, 0, "expected a P5 image"));
    }
    if (pgm.width, pgm.height) != (ppm.width, ppm.height) {
        return Err(Error::format(
            &pgm_path,
            0,
            "dimensions differ from the RGB image",
        ));
    }
    let (w, h) = (ppm.width, ppm.height);
    let n = w * h;
    let mut image = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            image[c * n + i] = ppm.data[3 * i + c];
        }
    }
    if let Some(i) = pgm
        .data
        .iter()
        .position(|&v| v as usize > record.instances.len())
    {
        return Err(Error::format(
            &pgm_path,
            raster_start + i as u64,
            format!(
                "instance index {} but only {} instances",
                pgm.data[i],
                record.instances.len()
            ),
        ));
    }
    let mut instances = Vec::with_capacity(record.instances.len());
    for (k, r) in record.instances.iter().enumerate() {
        if r.class == 0 {
            let off = text.find("\"class\"").unwrap_or(0) as u64;
            return Err(Error::format(
                json_path,
                off,
                format!("instance {k}: class 0 is background"),
            ));
        }
        let mask: Vec<bool> = pgm.data.iter().map(|&v| v as usize == k + 1).collect();
        let [x0, y0, x1, y1] = r.bbox;
        let bbox = BBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
            label: r.class,
            score: None,
        };
        match tight_box(&mask, w, h, r.class) {
            Some(t) if t == bbox => {}
            Some(_) => {
                return Err(Error::format(
                    json_path,
                    0,
                    format!("instance {k}: box is not tight around its mask"),
                ))
            }
            None => {
                return Err(Error::format(
                    &pgm_path,
                    raster_start,
                    format!("instance {k}: empty mask"),
                ))
            }
        }
        instances.push(Instance {
            class: r.class,
            bbox,
            mask,
        });
    }
    Ok(SynthSample {
        width: w,
        height: h,
        image,
        instances,
        has_mask_annotation: record.has_mask,
    })
}

/// Sample JSON files of `dir` sorted by index. Files not named
/// `NNNNN.json` are ignored.
pub fn sample_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(".json") {
            if stem.len() == 5 && stem.bytes().all(|b| b.is_ascii_digit()) {
                out.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every sample of `dir` in index order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SynthSample>> {
    sample_files(dir)?.iter().map(|p| read_sample(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_corpus, DatasetConfig};

    #[test]
    fn offsets_from_line_and_column() {
        let t = "ab\ncde\nf";
        assert_eq!(byte_offset(t, 1, 1), 0);
        assert_eq!(byte_offset(t, 2, 2), 4);
        assert_eq!(byte_offset(t, 3, 1), 7);
    }

    #[test]
    fn round_trip_small() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = generate_corpus(1, 5, &DatasetConfig::default()).unwrap();
        corpus[2].has_mask_annotation = false;
        write_dataset(&corpus, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn bad_json_located() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(2, 1, &DatasetConfig::default()).unwrap();
        write_dataset(&corpus, dir.path()).unwrap();
        let p = dir.path().join("00000.json");
        std::fs::write(&p, "{\n  \"schema_version\": 1,\n  \"has_mask\": tru\n}").unwrap();
        match read_dataset(dir.path()).unwrap_err() {
            Error::Format { path, offset, .. } => {
                assert_eq!(path, p);
                assert!(offset > 20);
            }
            e => panic!("{e:?}"),
        }
    }
}
