//! Binary netpbm I/O (PGM `P5`, PPM `P6`, maxval 255), BT.601 full-range
//! colour conversion and dataset manifests.
//!
//! Images are `1×1×h×w` tensors with values in `[0, 1]`; loading divides the
//! 8-bit payload by 255 and saving rounds half away from zero. Saved files
//! always use the canonical header `P5\n<w> <h>\n255\n`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Registered infrared and visible luminance images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub ir: Tensor,
    pub vis_y: Tensor,
    /// Visible chroma kept for colour recombination, `1×2×h×w`.
    pub vis_cbcr: Option<Tensor>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, ir: Tensor, vis_y: Tensor) -> Result<Self> {
        let pair = Self {
            id: id.into(),
            ir,
            vis_y,
            vis_cbcr: None,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.ir.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 {
            return Err(Error::Dimension(format!(
                "pair `{}`: images must be 1×1×h×w, got {s:?}",
                self.id
            )));
        }
        if self.vis_y.shape() != s {
            return Err(Error::Dimension(format!(
                "pair `{}`: infrared {s:?} and visible {:?} differ",
                self.id,
                self.vis_y.shape()
            )));
        }
        if let Some(c) = &self.vis_cbcr {
            if c.shape() != [1, 2, s[2], s[3]] {
                return Err(Error::Dimension(format!(
                    "pair `{}`: chroma shape {:?} does not match",
                    self.id,
                    c.shape()
                )));
            }
        }
        for (name, t) in [("infrared", &self.ir), ("visible", &self.vis_y)] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!(
                    "pair `{}`: {name} values outside [0, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.ir.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.ir.shape()[3]
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload_at: usize,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || !(bytes[..2] == *b"P5" || bytes[..2] == *b"P6") {
        return Err(format_err(0, "expected binary netpbm magic P5 or P6"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    let mut starts = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err(pos, "truncated header")),
            }
        }
        let start = pos;
        starts[i] = start;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(start, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| format_err(start, format!("header field `{text}` out of range")))?;
        if i < 2 && *field == 0 {
            return Err(format_err(start, "image extents must be positive"));
        }
    }
    if fields[2] != 255 {
        return Err(format_err(
            starts[2],
            format!("maxval {} unsupported, need 255", fields[2]),
        ));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(pos, "expected one whitespace byte after maxval")),
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        payload_at: pos,
    })
}

fn payload<'b>(bytes: &'b [u8], h: &Header, channels: usize) -> Result<&'b [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.payload_at;
    if have < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(format_err(h.payload_at + need, "trailing bytes after payload"));
    }
    Ok(&bytes[h.payload_at..])
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    if h.magic != *b"P5" {
        return Err(format_err(0, "expected PGM magic P5"));
    }
    let data = payload(bytes, &h, 1)?
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![1, 1, h.height, h.width], data)
}

/// 8-bit code of a value in `[0, 1]`, rounding half away from zero.
pub fn quantize(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
    }
    Ok((v * 255.0).round() as u8)
}

/// Snaps every value onto the 8-bit grid `k/255`.
pub fn quantize_tensor(t: &Tensor) -> Result<Tensor> {
    let data = t
        .data()
        .iter()
        .map(|&v| quantize(v).map(|b| b as f64 / 255.0))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(t.shape().to_vec(), data)
}

fn image_extents(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match t.shape() {
        [1, c, h, w] if *c == channels => Ok((*h, *w)),
        s => Err(Error::Dimension(format!(
            "expected a 1×{channels}×h×w image, got {s:?}"
        ))),
    }
}

pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_extents(t, 1)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in t.data() {
        out.push(quantize(v)?);
    }
    Ok(out)
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_pgm(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(t)?).map_err(|e| Error::io(path, e))
}

/// Full-range BT.601 RGB → YCbCr on `[0, 1]` values. Written in
/// difference form so that grey pixels map to `(v, ½, ½)` exactly.
pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = g + 0.299 * (r - g) + 0.114 * (b - g);
    (y, 0.5 + (b - y) / 1.772, 0.5 + (r - y) / 1.402)
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * (cr - 0.5);
    let b = y + 1.772 * (cb - 0.5);
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    (r, g, b)
}

/// Decodes a `P6` image into luminance `1×1×h×w` and chroma `1×2×h×w`.
pub fn decode_ppm_as_ycbcr(bytes: &[u8]) -> Result<(Tensor, Tensor)> {
    let h = parse_header(bytes)?;
    if h.magic != *b"P6" {
        return Err(format_err(0, "expected PPM magic P6"));
    }
    let px = payload(bytes, &h, 3)?;
    let n = h.width * h.height;
    let mut y = Vec::with_capacity(n);
    let mut cbcr = vec![0.0; 2 * n];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        let [r, g, b] = [rgb[0], rgb[1], rgb[2]].map(|v| v as f64 / 255.0);
        let (yy, cb, cr) = rgb_to_ycbcr(r, g, b);
        y.push(yy);
        cbcr[i] = cb;
        cbcr[n + i] = cr;
    }
    Ok((
        Tensor::new(vec![1, 1, h.height, h.width], y)?,
        Tensor::new(vec![1, 2, h.height, h.width], cbcr)?,
    ))
}

pub fn load_ppm_as_ycbcr(path: &Path) -> Result<(Tensor, Tensor)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm_as_ycbcr(&bytes)
}

/// Recombines luminance and chroma into `P6` bytes, clamping to `[0, 1]`.
pub fn encode_ycbcr_as_ppm(y: &Tensor, cbcr: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_extents(y, 1)?;
    if cbcr.shape() != [1, 2, h, w] {
        return Err(Error::Dimension(format!(
            "chroma {:?} does not match luminance {:?}",
            cbcr.shape(),
            y.shape()
        )));
    }
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let c = cbcr.data();
    for (i, &yy) in y.data().iter().enumerate() {
        let (r, g, b) = ycbcr_to_rgb(yy, c[i], c[n + i]);
        for v in [r, g, b] {
            if v.is_nan() {
                return Err(Error::Domain("NaN pixel in colour recombination".into()));
            }
            out.push(quantize(v.clamp(0.0, 1.0))?);
        }
    }
    Ok(out)
}

pub fn recombine_to_ppm(path: &Path, y: &Tensor, cbcr: &Tensor) -> Result<()> {
    fs::write(path, encode_ycbcr_as_ppm(y, cbcr)?).map_err(|e| Error::io(path, e))
}

/// Loads a grey image from either format; colour files contribute their
/// luminance and chroma.
pub fn load_luminance(path: &Path) -> Result<(Tensor, Option<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        let (y, c) = decode_ppm_as_ycbcr(&bytes)?;
        Ok((y, Some(c)))
    } else {
        Ok((decode_pgm(&bytes)?, None))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub ir_path: PathBuf,
    pub vis_path: PathBuf,
    /// 1-based line in the manifest file.
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses manifest text; relative paths are resolved against `root`.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let bad = |message: String| Error::Validation {
                line: Some(line),
                message,
            };
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(bad(format!(
                    "expected `id, ir_path, vis_path`, got `{trimmed}`"
                )));
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(bad(format!("duplicate id `{}`", fields[0])));
            }
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    root.join(p)
                }
            };
            let (ir_path, vis_path) = (resolve(fields[1]), resolve(fields[2]));
            for p in [&ir_path, &vis_path] {
                if !p.is_file() {
                    return Err(bad(format!("file not found: {}", p.display())));
                }
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                ir_path,
                vis_path,
                line,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every pair in manifest order.
    pub fn load_pairs(&self) -> Result<Vec<ImagePair>> {
        self.entries
            .iter()
            .map(|e| {
                let (ir, _) = load_luminance(&e.ir_path)?;
                let (vis_y, vis_cbcr) = load_luminance(&e.vis_path)?;
                let pair = ImagePair {
                    id: e.id.clone(),
                    ir,
                    vis_y,
                    vis_cbcr,
                };
                pair.validate().map_err(|err| Error::Validation {
                    line: Some(e.line),
                    message: err.to_string(),
                })?;
                Ok(pair)
            })
            .collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::parse(&text, root)
}

/// Writes `pairs` as PGM files under `dir` together with a `manifest.csv`
/// referencing them, and returns the manifest path.
pub fn write_dataset(dir: &Path, pairs: &[ImagePair]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::from("# id, ir, vis\n");
    for p in pairs {
        let ir_name = format!("{}_ir.pgm", p.id);
        let vis_name = format!("{}_vis.pgm", p.id);
        save_pgm(&dir.join(&ir_name), &p.ir)?;
        save_pgm(&dir.join(&vis_name), &p.vis_y)?;
        text.push_str(&format!("{}, {ir_name}, {vis_name}\n", p.id));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Edge-replicates a `1×c×h×w` image up to extents divisible by `multiple`.
pub fn pad_to_multiple(t: &Tensor, multiple: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || multiple == 0 {
        return Err(Error::Dimension(format!("cannot pad shape {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let src = t.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for i in 0..ph {
            let si = i.min(h - 1);
            for j in 0..pw {
                out.push(src[(ch * h + si) * w + j.min(w - 1)]);
            }
        }
    }
    Tensor::new(vec![1, c, ph, pw], out)
}

/// Top-left `h×w` window of a `1×c×H×W` image.
pub fn crop_to(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[2] < h || s[3] < w {
        return Err(Error::Dimension(format!("cannot crop {s:?} to {h}x{w}")));
    }
    let (c, sh, sw) = (s[1], s[2], s[3]);
    let src = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let row = (ch * sh + i) * sw;
            out.extend_from_slice(&src[row..row + w]);
        }
    }
    Tensor::new(vec![1, c, h, w], out)
}
