//! File plumbing: images, raw YUV, numeric CSV tables, binary readers.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::{ImagePlane, RgbRaster};

const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbRaster> {
    let img = image::open(path.as_ref())?.to_rgb8();
    RgbRaster::from_rgb8(&img)
}

/// Image files (png/ppm/pgm/pnm) directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Writes an 8-bit grey image; the format follows the extension (PPM is
/// written as three equal channels).
pub fn save_plane(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let grey = plane.to_luma8();
    let is_ppm = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        image::DynamicImage::ImageLuma8(grey).to_rgb8().save(path)?;
    } else {
        grey.save(path)?;
    }
    Ok(())
}

/// Chroma layout of a raw planar YUV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChromaLayout {
    Yuv420,
    Yuv444,
}

/// Reads one 8-bit planar YUV frame. Subsampled chroma is returned at its
/// native resolution.
pub fn load_raw_yuv(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    layout: ChromaLayout,
) -> Result<(ImagePlane, ImagePlane, ImagePlane)> {
    let bytes = std::fs::read(path)?;
    let (cw, ch) = match layout {
        ChromaLayout::Yuv420 => (width.div_ceil(2), height.div_ceil(2)),
        ChromaLayout::Yuv444 => (width, height),
    };
    let (luma_len, chroma_len) = (width * height, cw * ch);
    if bytes.len() < luma_len + 2 * chroma_len {
        return Err(Error::dim(format!(
            "raw YUV file has {} bytes, a {width}x{height} frame needs {}",
            bytes.len(),
            luma_len + 2 * chroma_len
        )));
    }
    let plane = |data: &[u8], w, h| ImagePlane::new(w, h, data.iter().map(|&b| b as f64).collect());
    Ok((
        plane(&bytes[..luma_len], width, height)?,
        plane(&bytes[luma_len..luma_len + chroma_len], cw, ch)?,
        plane(&bytes[luma_len + chroma_len..luma_len + 2 * chroma_len], cw, ch)?,
    ))
}

/// Headerless numeric CSV, one row per record.
pub fn read_table(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::format(format!("{}:{}: `{field}` is not a number", path.as_ref().display(), line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes rows with shortest round-trip float formatting.
pub fn write_table<W: std::io::Write>(writer: W, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).flexible(true).from_writer(writer);
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_file(path: impl AsRef<Path>, rows: &[Vec<f64>]) -> Result<()> {
    write_table(std::fs::File::create(path)?, rows)
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec![0.1, 2.0, -3.5e-7], vec![1.0 / 3.0, 0.0, 7.0]];
        write_table_file(&path, &rows).unwrap();
        assert_eq!(read_table(&path).unwrap(), rows);
    }

    #[test]
    fn non_numeric_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "1,2\n3,x\n").unwrap();
        assert!(matches!(read_table(&path), Err(Error::Format(_))));
    }

    #[test]
    fn raw_yuv_420() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.yuv");
        let mut bytes = vec![10u8; 4 * 2];
        bytes.extend([20u8; 2]);
        bytes.extend([30u8; 2]);
        std::fs::write(&path, &bytes).unwrap();
        let (y, u, v) = load_raw_yuv(&path, 4, 2, ChromaLayout::Yuv420).unwrap();
        assert_eq!((y.width(), y.height(), u.width(), u.height()), (4, 2, 2, 1));
        assert_eq!((y.get(3, 1), u.get(1, 0), v.get(0, 0)), (10.0, 20.0, 30.0));
        assert!(load_raw_yuv(&path, 8, 8, ChromaLayout::Yuv420).is_err());
    }

    #[test]
    fn image_listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let plane = ImagePlane::constant(4, 4, 9.0).unwrap();
        for name in ["b.png", "a.ppm", "c.PNG"] {
            save_plane(&plane, dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let names: Vec<String> = list_images(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["a.ppm", "b.png", "c.PNG"]);
        let back = load_rgb(dir.path().join("a.ppm")).unwrap();
        assert!(back.pixels().iter().all(|p| *p == [9.0; 3]));
    }
}
