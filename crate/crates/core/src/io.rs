//! Binary PPM images, the weight file format and input padding.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::aligner::{AlignerConfig, AlignerWeights, FEATURE_LAYERS, IMAGE_CHANNELS};
use crate::attention::Activation;
use crate::error::{Result, XabaError};
use crate::pyramid::{FusionWeights, PyramidConfig, PyramidWeights};
use crate::scalar::{lit, Scalar};
use crate::tensor::{pad_reflect, ConvKernel, CropRecord, Shape, Tensor};

/// Byte cursor that reports failures with their offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(XabaError::format(
                self.bytes.len(),
                format!(
                    "truncated {what}: needed {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }
}

// --- PPM ---------------------------------------------------------------------

fn ppm_token(r: &mut Reader<'_>) -> Result<(usize, String)> {
    loop {
        match r.peek() {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            Some(b'#') => {
                while let Some(b) = r.peek() {
                    r.pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = r.pos;
    while let Some(b) = r.peek() {
        if b.is_ascii_whitespace() || b == b'#' {
            break;
        }
        r.pos += 1;
    }
    if start == r.pos {
        return Err(XabaError::format(start, "unexpected end of PPM header"));
    }
    Ok((
        start,
        String::from_utf8_lossy(&r.bytes[start..r.pos]).into_owned(),
    ))
}

fn ppm_number(r: &mut Reader<'_>, what: &str) -> Result<usize> {
    let (at, tok) = ppm_token(r)?;
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(XabaError::format(at, format!("invalid PPM {what} '{tok}'"))),
    }
}

/// Decodes a binary (P6) PPM with maxval 255 into a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    let (at, magic) = ppm_token(&mut r)?;
    if magic != "P6" {
        return Err(XabaError::format(
            at,
            format!("expected P6 magic, found '{magic}'"),
        ));
    }
    let width = ppm_number(&mut r, "width")?;
    let height = ppm_number(&mut r, "height")?;
    let (maxval_at, maxval) = ppm_token(&mut r)?;
    if maxval != "255" {
        return Err(XabaError::format(
            maxval_at,
            format!("maxval '{maxval}' unsupported, only 255"),
        ));
    }
    match r.peek() {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => {
            return Err(XabaError::format(
                r.pos,
                "missing whitespace after PPM header",
            ))
        }
    }
    let payload = r.take(width * height * IMAGE_CHANNELS, "PPM payload")?;
    if r.pos != bytes.len() {
        return Err(XabaError::format(
            r.pos,
            format!("{} trailing bytes after PPM payload", bytes.len() - r.pos),
        ));
    }
    let scale = lit::<T>(255.0);
    Ok(Tensor::from_fn(
        Shape::new(1, IMAGE_CHANNELS, height, width),
        |_, c, y, x| lit::<T>(payload[(y * width + x) * IMAGE_CHANNELS + c] as f64) / scale,
    ))
}

/// Encodes a `(1, 3, h, w)` tensor; values are clamped to `[0, 1]` and
/// rounded half up to 8 bits.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.batch != 1 || s.channels != IMAGE_CHANNELS {
        return Err(XabaError::config(format!(
            "PPM needs a single 3-channel image, got {s}"
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.reserve(s.numel());
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..IMAGE_CHANNELS {
                let v = img.at(0, c, y, x).to_f64_lossy();
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                out.push((v * 255.0 + 0.5).floor() as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_image<T: Scalar>(img: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

// --- Weight files ------------------------------------------------------------

pub const WEIGHT_MAGIC: &[u8; 4] = b"XABA";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named little-endian `f32` tensors behind a magic/version header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub entries: Vec<WeightEntry>,
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != WEIGHT_MAGIC {
            return Err(XabaError::format(0, "not a weight file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != WEIGHT_VERSION {
            return Err(XabaError::format(
                4,
                format!("weight format version {version}, expected {WEIGHT_VERSION}"),
            ));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        let mut seen = BTreeSet::new();
        for i in 0..count {
            let label = format!("entry {i} of {count}");
            let start = r.pos;
            let len = r.u32(&format!("name length of {label}"))? as usize;
            let name = std::str::from_utf8(r.take(len, &format!("name of {label}"))?)
                .map_err(|_| XabaError::format(start + 4, format!("name of {label} is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(XabaError::format(
                    start,
                    format!("duplicate entry '{name}'"),
                ));
            }
            let ndims = r.u32(&format!("rank of '{name}'"))? as usize;
            let mut dims = Vec::with_capacity(ndims.min(8));
            for _ in 0..ndims {
                dims.push(r.u32(&format!("dims of '{name}'"))? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| XabaError::format(start, format!("dims of '{name}' overflow")))?;
            let raw = r.take(numel * 4, &format!("payload of '{name}'"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push(WeightEntry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(XabaError::format(
                r.pos,
                format!("{} trailing bytes after last entry", bytes.len() - r.pos),
            ));
        }
        Ok(WeightFile { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Architecture recovered from a weight file. Block size and activation are
/// not stored; they are chosen at inference time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightsMeta {
    pub scales: Vec<usize>,
    pub fe: usize,
    pub fm: usize,
    pub share_projection: bool,
}

impl WeightsMeta {
    pub fn pyramid_config(
        &self,
        block_size: usize,
        activation: Activation,
    ) -> Result<PyramidConfig> {
        PyramidConfig::new(
            self.scales.clone(),
            AlignerConfig {
                block_size,
                fe: self.fe,
                fm: self.fm,
                activation,
                share_projection: self.share_projection,
                sparsity_tau: 0.0,
            },
        )
    }
}

pub fn weights_to_file<T: Scalar>(w: &PyramidWeights<T>, scales: &[usize]) -> Result<WeightFile> {
    if scales.len() != w.scales.len() {
        return Err(XabaError::config(format!(
            "{} scale factors for {} scales",
            scales.len(),
            w.scales.len()
        )));
    }
    let mut entries = Vec::new();
    for (name, k) in w.kernel_names(scales).into_iter().zip(w.kernels()) {
        entries.push(WeightEntry {
            name: format!("{name}/weight"),
            dims: k.weight.shape().dims().to_vec(),
            data: k
                .weight
                .data()
                .iter()
                .map(|v| v.to_f64_lossy() as f32)
                .collect(),
        });
        entries.push(WeightEntry {
            name: format!("{name}/bias"),
            dims: vec![k.bias.len()],
            data: k.bias.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        });
    }
    Ok(WeightFile { entries })
}

fn kernel_from<T: Scalar>(
    entries: &BTreeMap<&str, &WeightEntry>,
    prefix: &str,
) -> Result<ConvKernel<T>> {
    let get = |part: &str| {
        let name = format!("{prefix}/{part}");
        entries
            .get(name.as_str())
            .copied()
            .ok_or_else(|| XabaError::config(format!("missing parameter {name}")))
    };
    let (w, b) = (get("weight")?, get("bias")?);
    let [o, i, kh, kw] = w.dims[..] else {
        return Err(XabaError::config(format!(
            "{prefix}/weight must be 4-D, got {:?}",
            w.dims
        )));
    };
    if b.dims != [o] {
        return Err(XabaError::config(format!(
            "{prefix}/bias has dims {:?}, expected [{o}]",
            b.dims
        )));
    }
    let weight = Tensor::new(
        Shape::new(o, i, kh, kw),
        w.data.iter().map(|&v| lit(v as f64)).collect(),
    )?;
    ConvKernel::new(weight, b.data.iter().map(|&v| lit(v as f64)).collect())
}

/// Rebuilds pyramid weights from named entries, inferring the architecture
/// from names and shapes. Names that do not belong to the layout are reported
/// together as unknown parameters.
pub fn weights_from_file<T: Scalar>(file: &WeightFile) -> Result<(WeightsMeta, PyramidWeights<T>)> {
    let entries: BTreeMap<&str, &WeightEntry> =
        file.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut scales = BTreeSet::new();
    for name in entries.keys() {
        if let Some(k) = name
            .strip_prefix("scale")
            .and_then(|r| r.split('/').next())
            .and_then(|k| k.parse().ok())
        {
            scales.insert(k);
        }
    }
    let scales: Vec<usize> = scales.into_iter().collect();
    if scales.is_empty() {
        return Err(XabaError::config("weight file holds no scale parameters"));
    }
    let share_projection =
        !entries.contains_key(format!("scale{}/proj_k/weight", scales[0]).as_str());

    let mut per_scale = Vec::new();
    for &k in &scales {
        let feature_layers = (0..FEATURE_LAYERS)
            .map(|i| kernel_from(&entries, &format!("scale{k}/feat{i}")))
            .collect::<Result<Vec<_>>>()?;
        let proj_q = kernel_from(&entries, &format!("scale{k}/proj_q"))?;
        let proj_k = if share_projection {
            None
        } else {
            Some(kernel_from(&entries, &format!("scale{k}/proj_k"))?)
        };
        per_scale.push(AlignerWeights {
            feature_layers,
            proj_q,
            proj_k,
        });
    }
    let mask_layers = (0..2)
        .map(|i| kernel_from(&entries, &format!("fusion/mask{i}")))
        .collect::<Result<Vec<_>>>()?;
    let weights = PyramidWeights {
        scales: per_scale,
        fusion: FusionWeights { mask_layers },
    };

    let expected: BTreeSet<String> = weights
        .kernel_names(&scales)
        .into_iter()
        .flat_map(|n| [format!("{n}/weight"), format!("{n}/bias")])
        .collect();
    let unknown: Vec<&str> = entries
        .keys()
        .copied()
        .filter(|n| !expected.contains(*n))
        .collect();
    if !unknown.is_empty() {
        return Err(XabaError::config(format!(
            "unknown parameter(s): {}",
            unknown.join(", ")
        )));
    }

    let meta = WeightsMeta {
        scales,
        fe: weights.scales[0].fe(),
        fm: weights.scales[0].fm(),
        share_projection,
    };
    // Any block size works for validation; shapes do not depend on it.
    weights.validate(&meta.pyramid_config(2, Activation::Softmax)?)?;
    Ok((meta, weights))
}

pub fn save_weights<T: Scalar>(
    w: &PyramidWeights<T>,
    scales: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    weights_to_file(w, scales)?.write(path)
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<(WeightsMeta, PyramidWeights<T>)> {
    weights_from_file(&WeightFile::read(path)?)
}

/// Reflect-pads `img` so the pyramid accepts it; crop the output with the record.
pub fn pad_for<T: Scalar>(cfg: &PyramidConfig, img: &Tensor<T>) -> Result<(Tensor<T>, CropRecord)> {
    pad_reflect(img, cfg.required_multiple())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(share: bool) -> PyramidConfig {
        PyramidConfig::new(
            vec![1, 2, 4],
            AlignerConfig {
                block_size: 20,
                fe: 8,
                fm: 4,
                share_projection: share,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn white_pixel() {
        let t: Tensor<f32> = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 1));
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_by_two_gradient_fixture() {
        let payload: [u8; 12] = [0, 0, 0, 85, 85, 85, 170, 170, 170, 255, 255, 255];
        let img = Tensor::<f32>::from_fn(Shape::new(1, 3, 2, 2), |_, _, y, x| {
            (y * 2 + x) as f32 / 3.0
        });
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 2\n255\n");
        assert_eq!(&bytes[11..], &payload);
        let back: Tensor<f32> = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn header_variants_and_errors() {
        let t: Tensor<f64> = decode_ppm(b"P6 # comment\n1\t1 255\n\x00\x80\xff").unwrap();
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
        let err = |b: &[u8]| match decode_ppm::<f32>(b) {
            Err(XabaError::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(err(b"P3\n1 1\n255\n"), 0);
        assert_eq!(err(b"P6\n1 1\n65535\n"), 7);
        assert_eq!(err(b"P6\n1 1\n255\n\x00\x00"), 13);
        assert_eq!(err(b"P6\nx 1\n255\n"), 3);
        assert_eq!(err(b"P6\n1 1\n255\n\x00\x00\x00\x00"), 14);
        assert_eq!(err(b"P6\n1 1"), 6);
    }

    #[test]
    fn rounding_half_up_and_clamp() {
        let img = Tensor::<f32>::new(Shape::new(1, 3, 1, 1), vec![-1.0, 0.5 / 255.0, 2.0]).unwrap();
        assert_eq!(&encode_ppm(&img).unwrap()[11..], &[0, 1, 255]);
        assert!(encode_ppm(&Tensor::<f32>::zeros(Shape::new(2, 3, 1, 1))).is_err());
    }

    #[test]
    fn weight_round_trip_is_bitwise() {
        for share in [true, false] {
            let c = cfg(share);
            let w = PyramidWeights::<f32>::init(&c, &mut ChaCha8Rng::seed_from_u64(4));
            let file = weights_to_file(&w, &c.scales).unwrap();
            let bytes = file.encode();
            assert_eq!(WeightFile::decode(&bytes).unwrap(), file);
            let (meta, back) =
                weights_from_file::<f32>(&WeightFile::decode(&bytes).unwrap()).unwrap();
            assert_eq!(back, w);
            assert_eq!(
                meta,
                WeightsMeta {
                    scales: vec![1, 2, 4],
                    fe: 8,
                    fm: 4,
                    share_projection: share
                }
            );
            assert_eq!(
                weights_to_file(&back, &meta.scales).unwrap().encode(),
                bytes
            );
        }
    }

    #[test]
    fn header_layout() {
        let file = WeightFile {
            entries: vec![WeightEntry {
                name: "a".into(),
                dims: vec![2],
                data: vec![1.0, -2.0],
            }],
        };
        let bytes = file.encode();
        let mut expected = b"XABA".to_vec();
        for v in [1u32, 1, 1] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.push(b'a');
        for v in [1u32, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_weight_files() {
        let c = cfg(true);
        let w = PyramidWeights::<f32>::init(&c, &mut ChaCha8Rng::seed_from_u64(5));
        let file = weights_to_file(&w, &c.scales).unwrap();
        let bytes = file.encode();

        let cut = &bytes[..bytes.len() - 10];
        let msg = WeightFile::decode(cut).unwrap_err().to_string();
        assert!(msg.contains("fusion/mask1/bias"), "{msg}");

        let mut v2 = bytes.clone();
        v2[4] = 2;
        let msg = WeightFile::decode(&v2).unwrap_err().to_string();
        assert!(msg.contains("version 2"), "{msg}");

        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(WeightFile::decode(&bad).is_err());

        let mut renamed = file.clone();
        renamed.entries[0].name = "scale1/feature0/weight".into();
        let msg = weights_from_file::<f32>(&renamed).unwrap_err().to_string();
        assert!(
            msg.contains("missing parameter scale1/feat0/weight"),
            "{msg}"
        );
        renamed.entries.push(file.entries[0].clone());
        let msg = weights_from_file::<f32>(&renamed).unwrap_err().to_string();
        assert!(
            msg.contains("unknown parameter(s): scale1/feature0/weight"),
            "{msg}"
        );

        let mut dropped = file.clone();
        dropped.entries.retain(|e| e.name != "scale2/proj_q/bias");
        let msg = weights_from_file::<f32>(&dropped).unwrap_err().to_string();
        assert!(
            msg.contains("missing parameter scale2/proj_q/bias"),
            "{msg}"
        );
    }

    #[test]
    fn padding_policy() {
        let c = cfg(true);
        let img = Tensor::<f32>::zeros(Shape::new(1, 3, 375, 1250));
        let (padded, record) = pad_for(&c, &img).unwrap();
        assert_eq!((padded.shape().height, padded.shape().width), (400, 1280));
        assert_eq!((record.height, record.width), (375, 1250));
        let even = Tensor::<f32>::zeros(Shape::new(1, 3, 80, 160));
        assert_eq!(pad_for(&c, &even).unwrap().0, even);
    }
}
