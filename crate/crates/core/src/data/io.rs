use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, ImageSample};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Relative to the dataset root.
    pub file: String,
    pub label: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write!(f, "{magic}\n{w} {h}\n255\n").map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// 8-bit binary PPM (`P6`).
pub fn write_ppm(path: &Path, img: &ImageSample) -> Result<(), DataError> {
    let bytes: Vec<u8> = img.pixels.iter().map(|v| quantize(*v)).collect();
    write_netpbm(path, "P6", img.width, img.height, &bytes)
}

/// 8-bit binary PGM (`P5`) of row-major values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), DataError> {
    if values.len() != width * height {
        return Err(DataError::Config(format!("{} values for a {width}×{height} map", values.len())));
    }
    let bytes: Vec<u8> = values.iter().map(|v| quantize(*v)).collect();
    write_netpbm(path, "P5", width, height, &bytes)
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("unparsable header number")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

/// Reads a `P6` file as `(width, height, interleaved RGB in [0, 1])`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DataError::MissingFile { path: path.to_path_buf() },
            _ => io_err(path)(e),
        })?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let bad = |msg: String| DataError::Image {
        path: path.to_path_buf(),
        msg,
    };
    let h = parse_header(&bytes, b"P6").map_err(bad)?;
    let n = h.width * h.height * 3;
    let body = &bytes[h.offset..];
    if body.len() != n {
        return Err(bad(format!("expected {n} pixel bytes, found {}", body.len())));
    }
    if let Some(b) = body.iter().find(|b| usize::from(**b) > h.maxval) {
        return Err(bad(format!("pixel {b} exceeds maxval {}", h.maxval)));
    }
    let scale = h.maxval as f64;
    Ok((h.width, h.height, body.iter().map(|b| f64::from(*b) / scale).collect()))
}

/// Writes images under `images/` and a `manifest.csv` in sample order.
pub fn write_dataset(root: &Path, samples: &[ImageSample]) -> Result<(), DataError> {
    fs::create_dir_all(root.join("images")).map_err(io_err(root))?;
    let manifest = root.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| DataError::Manifest {
        path: manifest.clone(),
        msg: e.to_string(),
    })?;
    for s in samples {
        let file = format!("images/{}.ppm", s.id);
        write_ppm(&root.join(&file), s)?;
        w.serialize(ManifestRow {
            id: s.id.clone(),
            file,
            label: s.label,
        })
        .map_err(|e| DataError::Manifest {
            path: manifest.clone(),
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err(&manifest))
}

/// Streams samples in manifest order, reading one image at a time.
pub struct DatasetReader {
    root: PathBuf,
    manifest: PathBuf,
    rows: csv::DeserializeRecordsIntoIter<BufReader<File>, ManifestRow>,
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let manifest = root.join(MANIFEST);
        let f = File::open(&manifest).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DataError::MissingFile { path: manifest.clone() },
            _ => io_err(&manifest)(e),
        })?;
        let mut reader = csv::Reader::from_reader(BufReader::new(f));
        let headers = reader.headers().map_err(|e| DataError::Manifest {
            path: manifest.clone(),
            msg: e.to_string(),
        })?;
        if !headers.iter().eq(["id", "file", "label"]) {
            return Err(DataError::Manifest {
                path: manifest,
                msg: "header must be `id,file,label`".into(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            rows: reader.into_deserialize(),
        })
    }

    fn load(&self, row: ManifestRow) -> Result<ImageSample, DataError> {
        let path = self.root.join(&row.file);
        let (w, h, pixels) = read_ppm(&path)?;
        Ok(ImageSample {
            id: row.id,
            label: row.label,
            height: h,
            width: w,
            pixels,
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<ImageSample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        let row = self.rows.next()?;
        Some(
            row.map_err(|e| DataError::Manifest {
                path: self.manifest.clone(),
                msg: e.to_string(),
            })
            .and_then(|r| self.load(r)),
        )
    }
}

/// Reads a whole dataset into memory.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>, DataError> {
    DatasetReader::open(root)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: usize) -> ImageSample {
        let pixels = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        ImageSample::new(id, label, 4, 3, pixels).unwrap()
    }

    #[test]
    fn ppm_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = sample("a", 0);
        write_ppm(&p, &img).unwrap();
        let (w, h, px) = read_ppm(&p).unwrap();
        assert_eq!((w, h), (3, 4));
        assert_eq!(px, img.pixels);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_ppm(&p).unwrap().2, vec![1.0, 0.0, 0.2]);
    }

    #[test]
    fn corrupt_header_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.ppm");
        fs::write(&p, b"P3\n1 1\n255\n").unwrap();
        let err = read_ppm(&p).unwrap_err();
        assert!(matches!(err, DataError::Image { .. }));
        assert!(err.to_string().contains("broken.ppm"));
        fs::write(&p, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert!(read_ppm(&p).unwrap_err().to_string().contains("pixel bytes"));
        fs::write(&p, b"P6\n1 1\n100\n\x00\x00\xff").unwrap();
        assert!(read_ppm(&p).unwrap_err().to_string().contains("exceeds maxval"));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![sample("x1", 0), sample("x2", 2), sample("x0", 1)];
        write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, samples);
    }

    #[test]
    fn missing_image_and_bad_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample("a", 0)]).unwrap();
        fs::remove_file(dir.path().join("images/a.ppm")).unwrap();
        let r: Result<Vec<_>, _> = DatasetReader::open(dir.path()).unwrap().collect();
        assert!(matches!(r, Err(DataError::MissingFile { .. })));

        fs::write(dir.path().join(MANIFEST), "id,path,label\n").unwrap();
        assert!(matches!(DatasetReader::open(dir.path()), Err(DataError::Manifest { .. })));
        fs::write(dir.path().join(MANIFEST), "id,file,label\na,images/a.ppm,notanumber\n").unwrap();
        let first = DatasetReader::open(dir.path()).unwrap().next().unwrap();
        assert!(matches!(first, Err(DataError::Manifest { .. })));
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        write_pgm(&p, 2, 1, &[0.0, 1.0]).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
        assert!(write_pgm(&p, 2, 2, &[0.0]).is_err());
    }
}
