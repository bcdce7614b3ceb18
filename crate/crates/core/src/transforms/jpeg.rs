//! Baseline JPEG encoder (4:2:0, standard tables) and a codec roundtrip.
//!
//! Encoding is done here; decoding goes through the `image` crate so the
//! produced bitstream is checked by an independent decoder.

use image::ImageFormat;

use crate::error::{Error, Result};
use crate::imaging::{from_u8, to_u8};
use crate::tensor::Tensor;

#[rustfmt::skip]
const LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16,  24,  40,  51,  61,
    12, 12, 14, 19,  26,  58,  60,  55,
    14, 13, 16, 24,  40,  57,  69,  56,
    14, 17, 22, 29,  51,  87,  80,  62,
    18, 22, 37, 56,  68, 109, 103,  77,
    24, 35, 55, 64,  81, 104, 113,  92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103,  99,
];

#[rustfmt::skip]
const CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Zigzag position -> natural (row-major) index.
#[rustfmt::skip]
const ZIGZAG: [usize; 64] = [
     0,  1,  8, 16,  9,  2,  3, 10,
    17, 24, 32, 25, 18, 11,  4,  5,
    12, 19, 26, 33, 40, 48, 41, 34,
    27, 20, 13,  6,  7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36,
    29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46,
    53, 60, 61, 54, 47, 55, 62, 63,
];

const LUMA_DC_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const LUMA_DC_VALS: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
const CHROMA_DC_BITS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
const CHROMA_DC_VALS: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
const LUMA_AC_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D];
#[rustfmt::skip]
const LUMA_AC_VALS: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
    0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
];
const CHROMA_AC_BITS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
#[rustfmt::skip]
const CHROMA_AC_VALS: [u8; 162] = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0,
    0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
    0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3,
    0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
];

/// Quantisation tables (natural order) for a quality in 1..=100, using the
/// usual libjpeg scaling of the standard tables.
pub fn quality_tables(quality: u8) -> ([u16; 64], [u16; 64]) {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |base: &[u16; 64]| {
        let mut out = [0u16; 64];
        for (o, &b) in out.iter_mut().zip(base) {
            *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
        }
        out
    };
    (scaled(&LUMA_QTABLE), scaled(&CHROMA_QTABLE))
}

/// Canonical Huffman code (code, length) for every symbol value.
struct HuffTable {
    codes: [(u16, u8); 256],
}

impl HuffTable {
    fn new(bits: &[u8; 16], vals: &[u8]) -> Self {
        let mut codes = [(0u16, 0u8); 256];
        let mut code = 0u16;
        let mut k = 0;
        for (len_minus_one, &count) in bits.iter().enumerate() {
            for _ in 0..count {
                codes[vals[k] as usize] = (code, len_minus_one as u8 + 1);
                code += 1;
                k += 1;
            }
            code <<= 1;
        }
        Self { codes }
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    n_bits: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        Self { out, acc: 0, n_bits: 0 }
    }

    fn put(&mut self, bits: u16, len: u8) {
        debug_assert!(len <= 16);
        self.acc = (self.acc << len) | (bits as u32 & ((1u32 << len) - 1));
        self.n_bits += len as u32;
        while self.n_bits >= 8 {
            let byte = (self.acc >> (self.n_bits - 8)) as u8;
            self.out.push(byte);
            if byte == 0xFF {
                self.out.push(0x00);
            }
            self.n_bits -= 8;
        }
        self.acc &= (1u32 << self.n_bits) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n_bits > 0 {
            let pad = 8 - self.n_bits as u8;
            self.put((1u16 << pad) - 1, pad);
        }
        self.out
    }
}

/// Bit length and JPEG magnitude encoding of a coefficient.
fn magnitude(v: i32) -> (u8, u16) {
    let size = (32 - v.unsigned_abs().leading_zeros()) as u8;
    let bits = if v < 0 { (v - 1) as u16 } else { v as u16 };
    (size, bits & ((1u32 << size) - 1) as u16)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Orthonormal 2-D DCT-II of an 8×8 block of level-shifted samples.
fn fdct(block: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| basis[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| basis[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn block(&self, bx: usize, by: usize) -> [f64; 64] {
        let mut b = [0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                b[y * 8 + x] = self.data[(by * 8 + y) * self.w + bx * 8 + x] - 128.0;
            }
        }
        b
    }
}

struct Component<'a> {
    qtable: &'a [u16; 64],
    dc: &'a HuffTable,
    ac: &'a HuffTable,
    pred: i32,
}

impl Component<'_> {
    fn encode_block(&mut self, w: &mut BitWriter, block: &[f64; 64], basis: &[[f64; 8]; 8]) {
        let coef = fdct(block, basis);
        let mut zz = [0i32; 64];
        for (k, &nat) in ZIGZAG.iter().enumerate() {
            zz[k] = (coef[nat] / self.qtable[nat] as f64).round() as i32;
        }
        let diff = zz[0] - self.pred;
        self.pred = zz[0];
        let (size, bits) = magnitude(diff);
        let (code, len) = self.dc.codes[size as usize];
        w.put(code, len);
        w.put(bits, size);

        let mut run = 0;
        for &v in &zz[1..] {
            if v == 0 {
                run += 1;
                continue;
            }
            while run > 15 {
                let (code, len) = self.ac.codes[0xF0];
                w.put(code, len);
                run -= 16;
            }
            let (size, bits) = magnitude(v);
            let (code, len) = self.ac.codes[(run << 4 | size as usize) & 0xFF];
            w.put(code, len);
            w.put(bits, size);
            run = 0;
        }
        if run > 0 {
            let (code, len) = self.ac.codes[0x00];
            w.put(code, len);
        }
    }
}

fn segment(out: &mut Vec<u8>, marker: u8, payload: &[u8]) {
    out.extend_from_slice(&[0xFF, marker]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
}

/// Encodes a 1×3×H×W image in [0, 1] as a baseline JFIF bitstream with
/// 2×2 chroma subsampling.
pub fn encode_jpeg(image: &Tensor, quality: u8) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 || h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("cannot JPEG-encode shape {:?}", image.shape())));
    }
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("JPEG quality must be 1..=100, got {quality}")));
    }

    // Colour conversion on the 8-bit grid, padded to whole 16×16 MCUs by edge replication.
    let (pw, ph) = (w.div_ceil(16) * 16, h.div_ceil(16) * 16);
    let mut planes: Vec<Plane> = (0..3).map(|_| Plane { w: pw, h: ph, data: vec![0.0; pw * ph] }).collect();
    for y in 0..ph {
        for x in 0..pw {
            let (sy, sx) = (y.min(h - 1), x.min(w - 1));
            let r = to_u8(image.get(0, 0, sy, sx)) as f64;
            let g = to_u8(image.get(0, 1, sy, sx)) as f64;
            let b = to_u8(image.get(0, 2, sy, sx)) as f64;
            planes[0].data[y * pw + x] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1].data[y * pw + x] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            planes[2].data[y * pw + x] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
    }
    let subsample = |p: &Plane| {
        let (sw, sh) = (p.w / 2, p.h / 2);
        let mut data = vec![0.0; sw * sh];
        for y in 0..sh {
            for x in 0..sw {
                let i = 2 * y * p.w + 2 * x;
                data[y * sw + x] = (p.data[i] + p.data[i + 1] + p.data[i + p.w] + p.data[i + p.w + 1]) / 4.0;
            }
        }
        Plane { w: sw, h: sh, data }
    };
    let cb = subsample(&planes[1]);
    let cr = subsample(&planes[2]);
    let luma = &planes[0];

    let (lq, cq) = quality_tables(quality);
    let mut out = vec![0xFF, 0xD8];
    segment(&mut out, 0xE0, b"JFIF\0\x01\x01\x00\x00\x01\x00\x01\x00\x00");
    for (id, table) in [(0u8, &lq), (1u8, &cq)] {
        let mut payload = vec![id];
        payload.extend(ZIGZAG.iter().map(|&nat| table[nat] as u8));
        segment(&mut out, 0xDB, &payload);
    }
    let mut sof = vec![8];
    sof.extend_from_slice(&(h as u16).to_be_bytes());
    sof.extend_from_slice(&(w as u16).to_be_bytes());
    sof.extend_from_slice(&[3, 1, 0x22, 0, 2, 0x11, 1, 3, 0x11, 1]);
    segment(&mut out, 0xC0, &sof);
    for (class_id, bits, vals) in [
        (0x00u8, &LUMA_DC_BITS, &LUMA_DC_VALS[..]),
        (0x10, &LUMA_AC_BITS, &LUMA_AC_VALS[..]),
        (0x01, &CHROMA_DC_BITS, &CHROMA_DC_VALS[..]),
        (0x11, &CHROMA_AC_BITS, &CHROMA_AC_VALS[..]),
    ] {
        let mut payload = vec![class_id];
        payload.extend_from_slice(bits);
        payload.extend_from_slice(vals);
        segment(&mut out, 0xC4, &payload);
    }
    segment(&mut out, 0xDA, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);

    let tables = [
        HuffTable::new(&LUMA_DC_BITS, &LUMA_DC_VALS),
        HuffTable::new(&LUMA_AC_BITS, &LUMA_AC_VALS),
        HuffTable::new(&CHROMA_DC_BITS, &CHROMA_DC_VALS),
        HuffTable::new(&CHROMA_AC_BITS, &CHROMA_AC_VALS),
    ];
    let mut y_comp = Component { qtable: &lq, dc: &tables[0], ac: &tables[1], pred: 0 };
    let mut cb_comp = Component { qtable: &cq, dc: &tables[2], ac: &tables[3], pred: 0 };
    let mut cr_comp = Component { qtable: &cq, dc: &tables[2], ac: &tables[3], pred: 0 };
    let basis = dct_basis();
    let mut writer = BitWriter::new(out);
    for my in 0..ph / 16 {
        for mx in 0..pw / 16 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                y_comp.encode_block(&mut writer, &luma.block(2 * mx + dx, 2 * my + dy), &basis);
            }
            cb_comp.encode_block(&mut writer, &cb.block(mx, my), &basis);
            cr_comp.encode_block(&mut writer, &cr.block(mx, my), &basis);
        }
    }
    let mut out = writer.finish();
    out.extend_from_slice(&[0xFF, 0xD9]);
    Ok(out)
}

/// Encode at `quality`, then decode back to a tensor in [0, 1].
pub fn jpeg_roundtrip(image: &Tensor, quality: u8) -> Result<Tensor> {
    let bytes = encode_jpeg(image, quality)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)?.to_rgb8();
    let [_, _, h, w] = image.shape();
    if decoded.dimensions() != (w as u32, h as u32) {
        return Err(Error::InvalidArgument(format!(
            "decoder returned {:?} for a {w}x{h} image",
            decoded.dimensions()
        )));
    }
    Ok(Tensor::from_fn(image.shape(), |_, c, y, x| {
        from_u8(decoded.get_pixel(x as u32, y as u32)[c])
    }))
}
