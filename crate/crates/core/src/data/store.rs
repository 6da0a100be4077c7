//! On-disk dataset layout.
//!
//! ```text
//! <dir>/dataset.cfg              generator settings (key = value)
//! <dir>/{train,test}/manifest.txt   one "<id> <label> <frame_count>" line per video
//! <dir>/{train,test}/<id>.rrt       frames of one video
//! ```
//!
//! A `.rrt` file is little-endian: the magic `RRT1`, a `u32` rank, one `u32`
//! per dimension (`[frames, channels, height, width]`), then the `f32`
//! values in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::synthetic::SyntheticSpec;
use super::{Dataset, Frame, VideoSample};
use crate::config::KeyValues;
use crate::error::{io_err, Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RRT1";
pub const MANIFEST: &str = "manifest.txt";
pub const SPEC_FILE: &str = "dataset.cfg";

pub fn encode_video(frames: &[Frame]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("cannot encode a video without frames".into()))?;
    let dims = [frames.len(), first.channels, first.height, first.width];
    let mut out = Vec::with_capacity(8 + 16 + frames.len() * first.data.len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for f in frames {
        if !f.same_shape(first) {
            return Err(Error::Data("frames differ in shape".into()));
        }
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_video(bytes: &[u8]) -> Result<Vec<Frame>> {
    let bad = |m: &str| Error::Data(format!("tensor file: {m}"));
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    if u32_at(4)? != 4 {
        return Err(bad("expected rank 4"));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(8 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let per = c * h * w;
    let body = &bytes[24..];
    if body.len() != n * per * 4 {
        return Err(bad("payload length does not match header"));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    values
        .chunks(per.max(1))
        .take(n)
        .map(|chunk| Frame::new(c, h, w, chunk.to_vec()))
        .collect()
}

fn write_split(dir: &Path, videos: &[VideoSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST);
    let file = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut manifest = BufWriter::new(file);
    for v in videos {
        writeln!(manifest, "{} {} {}", v.id, v.label, v.frames.len()).map_err(io_err(&manifest_path))?;
        let path = dir.join(format!("{}.rrt", v.id));
        fs::write(&path, encode_video(&v.frames)?).map_err(io_err(&path))?;
    }
    manifest.flush().map_err(io_err(&manifest_path))
}

fn read_split(dir: &Path, num_classes: usize) -> Result<Vec<VideoSample>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut videos = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, label, count] = fields.as_slice() else {
            return Err(Error::Data(format!("{}:{}: expected 3 fields", manifest_path.display(), lineno + 1)));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", manifest_path.display(), lineno + 1)))
        };
        let path = dir.join(format!("{id}.rrt"));
        let frames = decode_video(&fs::read(&path).map_err(io_err(&path))?)?;
        if frames.len() != parse(count)? {
            return Err(Error::Data(format!("{id}: manifest frame count disagrees with tensor file")));
        }
        let video = VideoSample {
            id: (*id).to_string(),
            label: parse(label)?,
            frames,
        };
        video.validate(num_classes)?;
        videos.push(video);
    }
    Ok(videos)
}

pub fn save_dataset(dir: &Path, spec: &SyntheticSpec, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spec_path = dir.join(SPEC_FILE);
    fs::write(&spec_path, spec.to_kv().to_text()).map_err(io_err(&spec_path))?;
    write_split(&dir.join("train"), &data.train)?;
    write_split(&dir.join("test"), &data.test)
}

pub fn load_dataset(dir: &Path) -> Result<(SyntheticSpec, Dataset)> {
    let spec = SyntheticSpec::from_kv(&KeyValues::load(&dir.join(SPEC_FILE))?)?;
    let data = Dataset {
        num_classes: spec.num_classes,
        train: read_split(&dir.join("train"), spec.num_classes)?,
        test: read_split(&dir.join("test"), spec.num_classes)?,
    };
    Ok((spec, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic;

    #[test]
    fn video_encoding_layout() {
        let f = Frame::new(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode_video(std::slice::from_ref(&f)).unwrap();
        assert_eq!(&bytes[..4], b"RRT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 24 + 8);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), -2.5);
        assert_eq!(decode_video(&bytes).unwrap(), vec![f]);
        assert!(decode_video(&bytes[..30]).is_err());
        assert!(decode_video(b"NOPE").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let spec = SyntheticSpec {
            num_classes: 2,
            train_per_class: 2,
            test_per_class: 1,
            frames_per_video: 3,
            height: 12,
            width: 12,
            pattern_size: 3,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &spec, &data).unwrap();
        let manifest = fs::read_to_string(dir.path().join("train").join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().count(), 4);
        assert!(manifest.starts_with("train-00000 0 3\n"));
        let (spec2, data2) = load_dataset(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(data2, data);
    }
}
