use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, ImageSample, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Result of scanning a class-labelled directory tree.
#[derive(Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Files that were not PNG or P6 PPM, as [`Error::UnsupportedFormat`].
    pub skipped: Vec<Error>,
}

/// Loads `<root>/Monkeypox/*` and `<root>/Others/*` in lexicographic path
/// order. Files in an unrecognized format are reported and skipped; a
/// recognized file that fails to decode is an error.
pub fn load_directory(root: impl AsRef<Path>) -> Result<Loaded> {
    let root = root.as_ref();
    let mut files: Vec<(PathBuf, Label)> = Vec::new();
    for label in Label::ALL {
        let dir = root.join(label.name());
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_file() {
                files.push((path, label));
            }
        }
    }
    files.sort();

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut found = [0usize; 2];
    for (path, label) in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let pixels = if bytes.starts_with(PNG_MAGIC) {
            decode_png(&bytes).map_err(|e| located(&path, e))?
        } else if bytes.starts_with(b"P6") {
            read_ppm(&bytes).map_err(|e| located(&path, e))?
        } else {
            skipped.push(Error::UnsupportedFormat {
                path: path.clone(),
                magic: magic_hex(&bytes),
            });
            continue;
        };
        let id = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        samples.push(ImageSample::new(pixels, label, id)?);
        found[label as usize] += 1;
    }
    for label in Label::ALL {
        if found[label as usize] == 0 {
            return Err(Error::EmptyClass(root.join(label.name())));
        }
    }
    Ok(Loaded {
        dataset: Dataset::new(samples)?,
        skipped,
    })
}

fn located(path: &Path, err: Error) -> Error {
    match err {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    }
}

fn magic_hex(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let fail = |detail: String| Error::Format { offset: 0, detail };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| fail(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(fail(format!("png: unsupported color type {other:?}"))),
    };
    let mut planes = vec![0.0; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            for c in 0..3 {
                let v = if channels >= 3 { px[c] } else { px[0] };
                planes[(c * h + y) * w + x] = v as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], planes)
}

/// Decodes a binary P6 PPM with maxval 255 into 3×H×W values in [0, 1].
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let fail = |offset: usize, detail: &str| Error::Format {
        offset: offset as u64,
        detail: format!("ppm: {detail}"),
    };
    if !bytes.starts_with(b"P6") {
        return Err(fail(0, "missing P6 magic"));
    }
    pos += 2;
    let mut field = |name: &str| -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
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
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, &format!("expected {name}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(fail(pos, &format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(fail(pos, "zero image extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected whitespace after header"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| fail(pos, "image extent overflows"))?;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(fail(
            bytes.len(),
            &format!("truncated pixel data: {} of {need} bytes", body.len()),
        ));
    }
    let mut planes = vec![0.0; need];
    for (i, px) in body[..need].chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * width * height + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, height, width], planes)
}

/// Encodes a 3×H×W image as binary P6, rounding each value to the nearest of 256 levels.
pub fn write_ppm(path: impl AsRef<Path>, pixels: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match pixels.dims() {
        &[3, h, w] => (h, w),
        other => return Err(Error::shape("write_ppm", format!("expected 3×H×W, got {other:?}"))),
    };
    let data = pixels.data();
    let mut body = Vec::with_capacity(3 * h * w + 20);
    write!(body, "P6\n{w} {h}\n255\n").expect("writing to a Vec cannot fail");
    for i in 0..h * w {
        for c in 0..3 {
            body.push((data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&body)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes every sample as `<root>/<class>/<id>.ppm`, with path separators in
/// ids replaced by underscores.
pub fn write_dataset_ppm(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for label in Label::ALL {
        let dir = root.join(label.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in ds.samples() {
        let name = s.source_id().replace(['/', '\\'], "_");
        write_ppm(root.join(s.label().name()).join(format!("{name}.ppm")), s.pixels())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, data: &[u8]) {
        let file = fs::File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(data).unwrap();
    }

    fn ppm_bytes(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(rgb);
        v
    }

    #[test]
    fn single_red_pixel_ppm() {
        let t = read_ppm(&ppm_bytes(1, 1, &[255, 0, 0])).unwrap();
        assert_eq!(t.dims(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_header_comments_and_planar_layout() {
        let bytes = b"P6 # comment\n2 1\n# another\n255\n\x00\x10\x20\x30\x40\x50".to_vec();
        let t = read_ppm(&bytes).unwrap();
        assert_eq!(t.dims(), &[3, 1, 2]);
        let v: Vec<u8> = t.data().iter().map(|x| (x * 255.0).round() as u8).collect();
        assert_eq!(v, vec![0x00, 0x30, 0x10, 0x40, 0x20, 0x50]);
    }

    #[test]
    fn corrupt_ppm_reports_offsets() {
        let err = read_ppm(&ppm_bytes(2, 2, &[1, 2, 3])).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let err = read_ppm(b"P6\n2 x\n255\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 5, .. }), "{err:?}");
        assert!(read_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn directory_loading_orders_labels_and_skips_text() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("Monkeypox")).unwrap();
        fs::create_dir_all(root.join("Others")).unwrap();
        for name in ["c.ppm", "a.ppm", "b.ppm"] {
            fs::write(root.join("Monkeypox").join(name), ppm_bytes(1, 1, &[255, 0, 0])).unwrap();
        }
        write_png(&root.join("Others/x.png"), 2, 1, png::ColorType::Rgba, &[0, 255, 0, 9, 0, 0, 255, 9]);
        fs::write(root.join("Others/y.ppm"), ppm_bytes(1, 1, &[0, 0, 0])).unwrap();
        fs::write(root.join("Others/notes.txt"), b"hello").unwrap();

        let loaded = load_directory(root).unwrap();
        let ids: Vec<&str> = loaded.dataset.samples().iter().map(|s| s.source_id()).collect();
        assert_eq!(
            ids,
            ["Monkeypox/a.ppm", "Monkeypox/b.ppm", "Monkeypox/c.ppm", "Others/x.png", "Others/y.ppm"]
        );
        assert_eq!(loaded.dataset.labels(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(loaded.skipped.len(), 1);
        let msg = loaded.skipped[0].to_string();
        assert!(msg.contains("notes.txt") && msg.contains("68 65 6c 6c 6f"), "{msg}");
        let png = &loaded.dataset.samples()[3];
        assert_eq!(png.pixels().data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);

        let again = load_directory(root).unwrap();
        assert_eq!(again.dataset, loaded.dataset);
    }

    #[test]
    fn empty_class_and_missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_directory(dir.path()), Err(Error::Io { .. })));
        fs::create_dir_all(dir.path().join("Monkeypox")).unwrap();
        fs::create_dir_all(dir.path().join("Others")).unwrap();
        fs::write(dir.path().join("Monkeypox/a.ppm"), ppm_bytes(1, 1, &[1, 2, 3])).unwrap();
        fs::write(dir.path().join("Others/a.txt"), b"no").unwrap();
        assert!(matches!(load_directory(dir.path()), Err(Error::EmptyClass(p)) if p.ends_with("Others")));
    }

    #[test]
    fn ppm_round_trip_is_exact_on_byte_levels() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let t = Tensor::new(&[3, 4, 5], data).unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &t).unwrap();
        assert_eq!(read_ppm(&fs::read(path).unwrap()).unwrap(), t);
    }
}
