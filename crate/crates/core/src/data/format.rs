//! MSTD-DATA container.
//!
//! Little-endian: magic `MSTDDATA`, version `u16`, modality count `u8`,
//! classes `u16`, samples `u32`, one `u32` width per modality, labels as
//! `u16[samples]`, then each modality's `f32` payload `[samples × dim_i]`
//! in modality order.

use std::fs;
use std::path::Path;

use super::DatasetBundle;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"MSTDDATA";
pub const DATA_VERSION: u16 = 1;

pub fn encode_bundle(b: &DatasetBundle) -> Result<Vec<u8>> {
    let m = u8::try_from(b.num_modalities()).map_err(|_| Error::usage("too many modalities"))?;
    let classes = u16::try_from(b.classes).map_err(|_| Error::usage("too many classes"))?;
    let samples = u32::try_from(b.samples()).map_err(|_| Error::usage("too many samples"))?;
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.push(m);
    out.extend_from_slice(&classes.to_le_bytes());
    out.extend_from_slice(&samples.to_le_bytes());
    for d in b.dims() {
        let d = u32::try_from(d).map_err(|_| Error::usage("modality too wide"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &y in &b.labels {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    for t in &b.modalities {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_bundle(buf: &[u8]) -> Result<DatasetBundle> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic")? != DATA_MAGIC {
        return Err(Error::format(0, "bad magic, expected MSTDDATA"));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
    if version != DATA_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let m = c.take(1, "modality count")?[0] as usize;
    let classes = u16::from_le_bytes(c.take(2, "class count")?.try_into().unwrap()) as usize;
    let samples = u32::from_le_bytes(c.take(4, "sample count")?.try_into().unwrap()) as usize;
    if m < 2 {
        return Err(Error::format(10, format!("need at least 2 modalities, header says {m}")));
    }
    let mut dims = Vec::with_capacity(m);
    for _ in 0..m {
        dims.push(u32::from_le_bytes(c.take(4, "modality width")?.try_into().unwrap()) as usize);
    }
    let payload: usize = dims.iter().map(|d| d * samples * 4).sum::<usize>() + samples * 2;
    if c.buf.len() - c.pos != payload {
        return Err(Error::format(
            c.pos as u64,
            format!(
                "header declares {payload} payload bytes but {} follow",
                c.buf.len() - c.pos
            ),
        ));
    }
    let label_start = c.pos;
    let labels: Vec<usize> = c
        .take(samples * 2, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    if let Some((s, y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::format(
            (label_start + 2 * s) as u64,
            format!("label {y} of sample {s} is outside [0, {classes})"),
        ));
    }
    let mut modalities = Vec::with_capacity(m);
    for &d in &dims {
        let start = c.pos;
        let data = c
            .take(d * samples * 4, "modality payload")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        modalities.push(Tensor::new(vec![samples, d], data).map_err(|e| Error::format(start as u64, e.to_string()))?);
    }
    DatasetBundle::new(modalities, labels, classes).map_err(|e| Error::format(label_start as u64, e.to_string()))
}

pub fn save_bundle(path: &Path, b: &DatasetBundle) -> Result<()> {
    let bytes = encode_bundle(b)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_external(path: &Path) -> Result<DatasetBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn small() -> DatasetBundle {
        generate(&SyntheticSpec {
            samples: 50,
            dims: vec![3, 5, 2],
            informativeness: vec![1.0, 0.5, 0.2],
            ..SyntheticSpec::reference()
        })
        .unwrap()
    }

    #[test]
    fn generate_save_load_is_bit_identical() {
        let b = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.mstd");
        save_bundle(&p, &b).unwrap();
        let r = load_external(&p).unwrap();
        assert_eq!(r.labels, b.labels);
        for (x, y) in r.modalities.iter().zip(&b.modalities) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn truncation_is_an_error_not_a_crash() {
        let bytes = encode_bundle(&small()).unwrap();
        for cut in [0, 5, 9, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_bundle(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_bundle(&small()).unwrap();
        bytes[3] = b'x';
        assert!(matches!(decode_bundle(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn out_of_range_label_names_sample() {
        let b = small();
        let mut bytes = encode_bundle(&b).unwrap();
        let header = 8 + 2 + 1 + 2 + 4 + 4 * 3;
        let sample = 7;
        bytes[header + 2 * sample..header + 2 * sample + 2].copy_from_slice(&9u16.to_le_bytes());
        let err = decode_bundle(&bytes).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset as usize, header + 2 * sample);
                assert!(message.contains("sample 7"), "{message}");
            }
            other => panic!("{other}"),
        }
    }
}
