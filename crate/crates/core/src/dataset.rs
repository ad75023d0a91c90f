//! On-disk video datasets: a text manifest plus one binary frame blob.
//!
//! `manifest.txt` starts with the line `echovt-manifest 1`; every further
//! non-empty line is a tab-separated record
//! `id num_frames height width fps label_a kind_a label_b kind_b ef_percent offset length`.
//! `frames.bin` starts with the magic `EVTF` and a little-endian `u32` version,
//! followed by 8-bit row-major frames. `offset`/`length` locate a video's bytes
//! in the blob.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::sampling::VideoRecord;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "frames.bin";
pub const MANIFEST_HEADER: &str = "echovt-manifest";
pub const BLOB_MAGIC: &[u8; 4] = b"EVTF";
pub const FORMAT_VERSION: u32 = 1;
const BLOB_HEADER_LEN: usize = 8;

pub fn write_dataset(videos: &[VideoRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = BufWriter::new(fs::File::create(dir.join(BLOB_FILE))?);
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    blob.write_all(BLOB_MAGIC)?;
    blob.write_all(&FORMAT_VERSION.to_le_bytes())?;
    writeln!(manifest, "{MANIFEST_HEADER} {FORMAT_VERSION}")?;
    let mut offset = BLOB_HEADER_LEN as u64;
    for v in videos {
        if v.id.is_empty() || v.id.contains(['\t', '\n']) {
            return Err(Error::Validation(format!("video id {:?} not storable", v.id)));
        }
        let (h, w) = v.frames.first().map_or((0, 0), |f| (f.height, f.width));
        let mut length = 0u64;
        for f in &v.frames {
            if (f.height, f.width) != (h, w) {
                return Err(Error::Validation(format!("{}: frames differ in size", v.id)));
            }
            blob.write_all(&f.pixels)?;
            length += f.pixels.len() as u64;
        }
        writeln!(
            manifest,
            "{}\t{}\t{h}\t{w}\t{}\t{}\t{}\t{}\t{}\t{}\t{offset}\t{length}",
            v.id,
            v.frames.len(),
            v.fps,
            v.label_a,
            v.kind_a,
            v.label_b,
            v.kind_b,
            v.ef_percent,
        )?;
        offset += length;
    }
    blob.flush()?;
    manifest.flush()?;
    Ok(())
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

struct ManifestLine {
    id: String,
    num_frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    label_a: usize,
    kind_a: String,
    label_b: usize,
    kind_b: String,
    ef_percent: f64,
    offset: u64,
    length: u64,
}

fn parse_line(line: &str) -> std::result::Result<ManifestLine, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 12 {
        return Err(format!("expected 12 fields, found {}", cols.len()));
    }
    fn num<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
        s.parse().map_err(|_| format!("bad {name} `{s}`"))
    }
    Ok(ManifestLine {
        id: cols[0].to_string(),
        num_frames: num(cols[1], "num_frames")?,
        height: num(cols[2], "height")?,
        width: num(cols[3], "width")?,
        fps: num(cols[4], "fps")?,
        label_a: num(cols[5], "label_a")?,
        kind_a: cols[6].to_string(),
        label_b: num(cols[7], "label_b")?,
        kind_b: cols[8].to_string(),
        ef_percent: num(cols[9], "ef_percent")?,
        offset: num(cols[10], "offset")?,
        length: num(cols[11], "length")?,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VideoRecord>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let blob = fs::read(&blob_path)?;
    if blob.len() < BLOB_HEADER_LEN || &blob[..4] != BLOB_MAGIC {
        return Err(format_err(&blob_path, 0, "missing frame blob magic"));
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format_err(&blob_path, 4, format!("unsupported blob version {version}")));
    }

    let mut videos = Vec::new();
    let mut pos = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("");
    if header.trim_end() != format!("{MANIFEST_HEADER} {FORMAT_VERSION}") {
        return Err(format_err(&manifest_path, 0, format!("bad header `{}`", header.trim_end())));
    }
    pos += header.len() as u64;
    for raw in lines {
        let line_offset = pos;
        pos += raw.len() as u64;
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let m = parse_line(line).map_err(|e| format_err(&manifest_path, line_offset, e))?;
        let frame_len = m.height * m.width;
        if m.length != (m.num_frames * frame_len) as u64 {
            return Err(format_err(
                &manifest_path,
                line_offset,
                format!("{}: length {} does not match {} frames of {}x{}", m.id, m.length, m.num_frames, m.height, m.width),
            ));
        }
        let end = m.offset + m.length;
        if m.offset < BLOB_HEADER_LEN as u64 || end > blob.len() as u64 {
            return Err(Error::TruncatedBlob {
                id: m.id,
                offset: m.offset,
                needed: m.length,
                available: (blob.len() as u64).saturating_sub(m.offset),
            });
        }
        let bytes = &blob[m.offset as usize..end as usize];
        let frames = if frame_len == 0 {
            Vec::new()
        } else {
            bytes
                .chunks_exact(frame_len)
                .map(|px| Frame::new(m.height, m.width, px.to_vec()).map(Arc::new))
                .collect::<Result<Vec<_>>>()?
        };
        let bad_kind = |e: Error| format_err(&manifest_path, line_offset, e.to_string());
        let video = VideoRecord {
            id: m.id,
            frames,
            fps: m.fps,
            label_a: m.label_a,
            label_b: m.label_b,
            kind_a: m.kind_a.parse().map_err(bad_kind)?,
            kind_b: m.kind_b.parse().map_err(bad_kind)?,
            ef_percent: m.ef_percent,
        };
        videos.push(video);
    }
    Ok(videos)
}

/// Reads a directory of per-video subfolders of PNG frames.
///
/// The directory's `manifest.txt` lists one video per line, tab-separated:
/// `id fps label_a kind_a label_b kind_b ef_percent`; frames of video `id`
/// are the `.png` files in `dir/id`, in file-name order, converted to grayscale.
pub fn import_image_dir(dir: &Path) -> Result<Vec<VideoRecord>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let mut videos = Vec::new();
    let mut pos = 0u64;
    for raw in text.split_inclusive('\n') {
        let line_offset = pos;
        pos += raw.len() as u64;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let err = |m: String| format_err(&manifest_path, line_offset, m);
        if cols.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", cols.len())));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad index `{s}`")));
        let id = cols[0].to_string();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir.join(&id))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let frames = paths
            .iter()
            .map(|p| {
                let img = image::open(p)
                    .map_err(|e| Error::Image {
                        path: p.clone(),
                        msg: e.to_string(),
                    })?
                    .into_luma8();
                let (w, h) = img.dimensions();
                Frame::new(h as usize, w as usize, img.into_raw()).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        let video = VideoRecord {
            id,
            frames,
            fps: parse_f(cols[1])?,
            label_a: parse_u(cols[2])?,
            kind_a: cols[3].parse().map_err(|e: Error| err(e.to_string()))?,
            label_b: parse_u(cols[4])?,
            kind_b: cols[5].parse().map_err(|e: Error| err(e.to_string()))?,
            ef_percent: parse_f(cols[6])?,
        };
        video.validate()?;
        videos.push(video);
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Kind;

    fn sample() -> Vec<VideoRecord> {
        let frame = |v: u8| Arc::new(Frame::new(2, 3, vec![v, 1, 2, 3, 4, 255]).unwrap());
        vec![
            VideoRecord {
                id: "a".into(),
                frames: vec![frame(0), frame(9), frame(200)],
                fps: 50.0,
                label_a: 0,
                label_b: 2,
                kind_a: Kind::Ed,
                kind_b: Kind::Es,
                ef_percent: 56.25,
            },
            VideoRecord {
                id: "b".into(),
                frames: vec![frame(7), frame(8)],
                fps: 1.0 / 3.0,
                label_a: 0,
                label_b: 1,
                kind_a: Kind::Es,
                kind_b: Kind::Ed,
                ef_percent: 61.123456789,
            },
        ]
    }

    fn same(a: &VideoRecord, b: &VideoRecord) -> bool {
        a.id == b.id
            && a.frames == b.frames
            && a.fps == b.fps
            && (a.label_a, a.label_b, a.kind_a, a.kind_b) == (b.label_a, b.label_b, b.kind_a, b.kind_b)
            && a.ef_percent == b.ef_percent
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let videos = sample();
        write_dataset(&videos, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(videos.iter().zip(&back).all(|(a, b)| same(a, b)));
        assert_eq!(back[0].ef_percent, 56.25);
    }

    #[test]
    fn truncated_blob_names_video() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&sample(), dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::TruncatedBlob { id, .. }) => assert_eq!(id, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&sample(), dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] = b'X';
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { offset: 0, .. })));

        write_dataset(&sample(), dir.path()).unwrap();
        let man = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&man).unwrap().replace("56.25", "fifty");
        fs::write(&man, text).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, "echovt-manifest 1\n".len() as u64);
                assert!(msg.contains("ef_percent"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn png_import() {
        let dir = tempfile::tempdir().unwrap();
        let vid = dir.path().join("v1");
        fs::create_dir(&vid).unwrap();
        for k in 0..3u8 {
            let img = image::GrayImage::from_fn(4, 2, |x, y| image::Luma([k * 10 + (x + y) as u8]));
            img.save(vid.join(format!("{k:03}.png"))).unwrap();
        }
        fs::write(dir.path().join(MANIFEST_FILE), "v1\t30\t0\tED\t2\tES\t55.5\n").unwrap();
        let videos = import_image_dir(dir.path()).unwrap();
        assert_eq!(videos.len(), 1);
        let v = &videos[0];
        assert_eq!(v.frames.len(), 3);
        assert_eq!((v.frames[0].height, v.frames[0].width), (2, 4));
        assert_eq!(v.frames[2].get(1, 3), 24);
        assert_eq!(v.kind_b, Kind::Es);
    }
}
