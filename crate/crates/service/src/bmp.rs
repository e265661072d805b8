//! Uncompressed 24-bit BMP encoding for browser delivery.

use derm_core::data::{GrayImage, RgbImage};

const FILE_HEADER: usize = 14;
const INFO_HEADER: usize = 40;

/// Bottom-up BGR rows, each padded to a multiple of four bytes.
pub fn encode_bmp(img: &RgbImage) -> Vec<u8> {
    let row = img.width * 3;
    let stride = row.div_ceil(4) * 4;
    let pixels = stride * img.height;
    let offset = FILE_HEADER + INFO_HEADER;
    let mut out = Vec::with_capacity(offset + pixels);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&((offset + pixels) as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(offset as u32).to_le_bytes());

    out.extend_from_slice(&(INFO_HEADER as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as i32).to_le_bytes());
    out.extend_from_slice(&(img.height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(pixels as u32).to_le_bytes());
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&[0; 8]);

    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let [r, g, b] = img.pixel(x, y);
            out.extend_from_slice(&[b, g, r]);
        }
        out.extend(std::iter::repeat_n(0, stride - row));
    }
    out
}

pub fn gray_to_rgb(img: &GrayImage) -> RgbImage {
    RgbImage { width: img.width, height: img.height, data: img.data.iter().flat_map(|&v| [v, v, v]).collect() }
}
