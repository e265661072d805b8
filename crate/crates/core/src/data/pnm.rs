//! Binary netpbm codecs: P6 (RGB) and P5 (grayscale), 8-bit samples.

use std::path::Path;

use crate::error::{rejected, Error, Result};
use crate::evidence::BinaryMask;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(rejected(format!("{width}x{height} RGB image needs {} bytes", width * height * 3)));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("consistent dims")
    }

    /// Inverse of [`RgbImage::to_tensor`]; values are clamped to `[0, 1]` and rounded.
    /// Single-channel tensors are replicated to gray.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 && c != 1 {
            return Err(rejected(format!("cannot render {c}-channel tensor as RGB")));
        }
        let plane = h * w;
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for ch in 0..3 {
                let src = if c == 3 { ch } else { 0 };
                data.push(q(t.data()[src * plane + i]));
            }
        }
        Self::new(w, h, data)
    }

    pub fn to_gray_tensor(&self) -> Tensor {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / (3.0 * 255.0))
            .collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("consistent dims")
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(rejected(format!("{width}x{height} gray image needs {} bytes", width * height)));
        }
        Ok(Self { width, height, data })
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Corrupt("header truncated".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(Error::Format(format!("malformed header number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits").parse().expect("digits");
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::Format("missing whitespace after maxval".into())),
        None => return Err(Error::Corrupt("header truncated".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    Ok(Header { width, height, maxval, offset: pos })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let body = &bytes[h.offset..];
    if body.len() < need {
        return Err(Error::Corrupt(format!("payload truncated: {} of {need} bytes", body.len())));
    }
    Ok(&body[..need])
}

fn rescale(samples: &[u8], maxval: usize) -> Result<Vec<u8>> {
    if maxval == 255 {
        return Ok(samples.to_vec());
    }
    samples
        .iter()
        .map(|&v| {
            if usize::from(v) > maxval {
                Err(Error::Format(format!("sample {v} exceeds maxval {maxval}")))
            } else {
                Ok(((usize::from(v) * 255 + maxval / 2) / maxval) as u8)
            }
        })
        .collect()
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    let data = rescale(payload(bytes, &h, 3)?, h.maxval)?;
    RgbImage::new(h.width, h.height, data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5")?;
    let data = rescale(payload(bytes, &h, 1)?, h.maxval)?;
    GrayImage::new(h.width, h.height, data)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// P6 file as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(read_ppm(path)?.to_tensor())
}

/// Pixels `>= 128` are foreground.
pub fn mask_from_gray(img: &GrayImage) -> BinaryMask {
    BinaryMask::from_fn(img.width, img.height, |x, y| img.data[y * img.width + x] >= 128)
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage {
        width: mask.width(),
        height: mask.height(),
        data: mask.iter().map(|fg| if fg { 255 } else { 0 }).collect(),
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(mask_from_gray(&read_pgm(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_bytes_decode() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data()[..4], [1.0, 0.0, 0.0, 0.2]);
        assert_eq!(t.data()[4..8], [0.0, 1.0, 0.0, 0.4]);
        assert_eq!(t.data()[8..], [0.0, 0.0, 1.0, 0.6]);
    }

    #[test]
    fn mask_threshold_boundary() {
        let mut bytes = b"P5 2 1 255\n".to_vec();
        bytes.extend_from_slice(&[127, 128]);
        let m = mask_from_gray(&decode_pgm(&bytes).unwrap());
        assert!(!m.get(0, 0));
        assert!(m.get(1, 0));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n..."), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n255\n\x01\x02"), Err(Error::Corrupt(_))));
        assert!(matches!(decode_ppm(b"P6\n1"), Err(Error::Corrupt(_))));
        assert!(matches!(decode_ppm(b"P6\nx 1\n255\n"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P6\n1 1\n255\n\x00"), Err(Error::Format(_))));
    }

    #[test]
    fn low_maxval_is_rescaled() {
        let img = decode_pgm(b"P5 2 1 1\n\x00\x01").unwrap();
        assert_eq!(img.data, vec![0, 255]);
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let img = RgbImage::new(w, h, data).unwrap();
            let bytes = encode_ppm(&img);
            prop_assert_eq!(&decode_ppm(&bytes).unwrap(), &img);
            prop_assert_eq!(RgbImage::from_tensor(&img.to_tensor()).unwrap(), img);
            let g = GrayImage::new(w, h, bytes[..w * h].to_vec()).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&g)).unwrap(), g);
        }
    }
}
