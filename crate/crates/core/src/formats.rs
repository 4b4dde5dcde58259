//! `.eocube` and `.eomask` binary files.
//!
//! ```text
//! .eocube  "EOC1" | u32 C,T,H,W | u8 dtype (0 = f32) | u8 has_wavelengths
//!          | [C × f32 wavelengths µm] | f32 payload in [C][T][H][W] order
//! .eomask  "EOM1" | u32 H,W | i16 payload, row-major
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"EOC1";
pub const MASK_MAGIC: &[u8; 4] = b"EOM1";

#[derive(Clone, Debug, PartialEq)]
pub struct RawCube {
    pub shape: [usize; 4],
    pub wavelengths: Option<Vec<f32>>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i16>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            format: self.format,
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos -= 4;
            return Err(self.err(format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn checked_len(dims: &[usize], elem: usize, r: &Reader) -> Result<usize> {
    dims.iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.err(format!("dimensions {dims:?} overflow")))
}

pub fn encode_cube(cube: &RawCube) -> Result<Vec<u8>> {
    let [c, t, h, w] = cube.shape;
    if cube.data.len() != c * t * h * w {
        return Err(Error::Data(format!("payload of {} values for shape {:?}", cube.data.len(), cube.shape)));
    }
    let mut out = Vec::with_capacity(14 + 4 * (c + cube.data.len()));
    out.extend_from_slice(CUBE_MAGIC);
    for d in cube.shape {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(0);
    match &cube.wavelengths {
        Some(wl) => {
            if wl.len() != c {
                return Err(Error::Data(format!("{} wavelengths for {c} bands", wl.len())));
            }
            out.push(1);
            for v in wl {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<RawCube> {
    let mut r = Reader { bytes, pos: 0, format: "eocube" };
    r.magic(CUBE_MAGIC)?;
    let shape = [r.u32("C")?, r.u32("T")?, r.u32("H")?, r.u32("W")?];
    let dtype = r.u8("dtype")?;
    if dtype != 0 {
        r.pos -= 1;
        return Err(r.err(format!("unsupported dtype code {dtype}")));
    }
    let flag = r.u8("wavelength flag")?;
    let wavelengths = match flag {
        0 => None,
        1 => Some(f32s(r.take(checked_len(&[shape[0]], 4, &r)?, "wavelength table")?)),
        _ => {
            r.pos -= 1;
            return Err(r.err(format!("wavelength flag {flag} is neither 0 nor 1")));
        }
    };
    let n = checked_len(&shape, 4, &r)?;
    let data = f32s(r.take(n, "payload")?);
    r.finish()?;
    Ok(RawCube { shape, wavelengths, data })
}

fn f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

pub fn encode_mask(mask: &RawMask) -> Result<Vec<u8>> {
    if mask.data.len() != mask.height * mask.width {
        return Err(Error::Data(format!("{} mask values for {}x{}", mask.data.len(), mask.height, mask.width)));
    }
    let mut out = Vec::with_capacity(12 + 2 * mask.data.len());
    out.extend_from_slice(MASK_MAGIC);
    for d in [mask.height, mask.width] {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &mask.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<RawMask> {
    let mut r = Reader { bytes, pos: 0, format: "eomask" };
    r.magic(MASK_MAGIC)?;
    let (height, width) = (r.u32("H")?, r.u32("W")?);
    let n = checked_len(&[height, width], 2, &r)?;
    let data = r
        .take(n, "payload")?
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    r.finish()?;
    Ok(RawMask { height, width, data })
}

pub fn read_cube(path: &Path) -> Result<RawCube> {
    decode_cube(&std::fs::read(path)?)
}

pub fn write_cube(path: &Path, cube: &RawCube) -> Result<()> {
    Ok(std::fs::write(path, encode_cube(cube)?)?)
}

pub fn read_mask(path: &Path) -> Result<RawMask> {
    decode_mask(&std::fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &RawMask) -> Result<()> {
    Ok(std::fs::write(path, encode_mask(mask)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cube_layout_is_bit_exact() {
        let cube = RawCube {
            shape: [1, 1, 1, 2],
            wavelengths: Some(vec![0.5]),
            data: vec![1.0, -2.0],
        };
        let b = encode_cube(&cube).unwrap();
        let mut expect = b"EOC1".to_vec();
        for d in [1u32, 1, 1, 2] {
            expect.extend_from_slice(&d.to_le_bytes());
        }
        expect.extend_from_slice(&[0, 1]);
        expect.extend_from_slice(&0.5f32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
        assert_eq!(decode_cube(&b).unwrap(), cube);
    }

    #[test]
    fn mask_layout_is_bit_exact() {
        let m = RawMask { height: 1, width: 3, data: vec![-1, 0, 1] };
        let b = encode_mask(&m).unwrap();
        assert_eq!(b, [b"EOM1".as_slice(), &[1, 0, 0, 0, 3, 0, 0, 0, 0xff, 0xff, 0, 0, 1, 0]].concat());
        assert_eq!(decode_mask(&b).unwrap(), m);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let cube = RawCube { shape: [2, 1, 2, 2], wavelengths: None, data: vec![0.0; 8] };
        let b = encode_cube(&cube).unwrap();
        match decode_cube(&b[..b.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 22),
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cube(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = b.clone();
        bad[20] = 3;
        assert!(matches!(decode_cube(&bad), Err(Error::Format { offset: 20, .. })));
        let mut long = b;
        long.push(0);
        assert!(decode_cube(&long).is_err());
        assert!(decode_mask(b"EOM1\x01\x00").is_err());
    }

    proptest! {
        #[test]
        fn cube_round_trip(c in 1usize..4, h in 1usize..5, w in 1usize..5, wl in any::<bool>(), seed in any::<u32>()) {
            let data: Vec<f32> = (0..c * h * w).map(|i| (i as f32 + seed as f32) * 0.37 - 5.0).collect();
            let cube = RawCube { shape: [c, 1, h, w], wavelengths: wl.then(|| (0..c).map(|i| 0.4 + i as f32 * 0.1).collect()), data };
            let b = encode_cube(&cube).unwrap();
            prop_assert_eq!(decode_cube(&b).unwrap(), cube);
        }

        #[test]
        fn mask_round_trip(h in 0usize..6, w in 0usize..6, vals in proptest::collection::vec(-1i16..5, 36)) {
            let m = RawMask { height: h, width: w, data: vals[..h * w].to_vec() };
            prop_assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
        }
    }
}
