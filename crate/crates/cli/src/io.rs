//! On-disk formats. Binary files are little-endian regardless of host; the
//! text formats (CSV, PGM) are locale-independent ('.' decimal, ASCII).

use std::fs;
use std::path::Path;

use dvdp_core::cascade::{Backend, Shape};

use crate::failure::{CliResult, Failure};

/// 17 significant digits: enough to round-trip any finite 64-bit float
/// through decimal text.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    fn from_code(code: u8, path: &Path) -> CliResult<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(Failure::config(format!(
                "{}: unknown dtype code {other}",
                path.display()
            ))),
        }
    }
}

/// An n-dimensional array of 64-bit values. Files may narrow to 32-bit on
/// write; in memory everything is f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> CliResult<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Failure::config(format!(
                "tensor shape {shape:?} wants {want} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"DVTF";
const CHECKPOINT_MAGIC: &[u8; 4] = b"DVCK";
const FORMAT_VERSION: u16 = 1;

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor, dtype: Dtype) -> CliResult<()> {
    if t.shape.len() > u8::MAX as usize {
        return Err(Failure::config(format!(
            "tensor rank {} exceeds the format limit",
            t.shape.len()
        )));
    }
    buf.push(dtype.code());
    buf.push(t.shape.len() as u8);
    for &s in &t.shape {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => {
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Sequential reader with file-tagged error messages.
struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Failure::config(format!(
                "{}: truncated file (wanted {n} bytes at offset {})",
                self.path.display(),
                self.at
            )));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize64(&mut self) -> CliResult<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| {
            Failure::config(format!(
                "{}: size field {v} exceeds the address space",
                self.path.display()
            ))
        })
    }

    fn finished(&self) -> bool {
        self.at == self.buf.len()
    }

    fn expect_magic(&mut self, magic: &[u8; 4], kind: &str) -> CliResult<()> {
        if self.take(4)? != magic {
            return Err(Failure::config(format!(
                "{}: not a {kind} file (bad magic)",
                self.path.display()
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Failure::config(format!(
                "{}: unsupported {kind} version {version}",
                self.path.display()
            )));
        }
        Ok(())
    }

    fn tensor(&mut self) -> CliResult<(Tensor, Dtype)> {
        let dtype = Dtype::from_code(self.u8()?, self.path)?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let s = self.usize64()?;
            count = count.checked_mul(s).ok_or_else(|| {
                Failure::config(format!(
                    "{}: tensor shape overflows",
                    self.path.display()
                ))
            })?;
            shape.push(s);
        }
        let raw = self.take(count * dtype.width())?;
        let data = match dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok((Tensor { shape, data }, dtype))
    }
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> CliResult<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.shape.len() + dtype.width() * t.data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_tensor(&mut buf, t, dtype)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> CliResult<(Tensor, Dtype)> {
    let buf = fs::read(path)
        .map_err(|e| Failure::other(format!("{}: {e}", path.display())))?;
    let mut cur = Cursor {
        buf: &buf,
        at: 0,
        path,
    };
    cur.expect_magic(TENSOR_MAGIC, "tensor")?;
    let out = cur.tensor()?;
    if !cur.finished() {
        return Err(Failure::config(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            buf.len() - cur.at
        )));
    }
    Ok(out)
}

/// Cascade identity stored in checkpoints so parameters cannot be loaded
/// into a mismatched geometry.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct CascadeDescriptor {
    pub shape: Shape,
    pub levels: usize,
    pub backend: Backend,
}

/// Trained-parameter container: schedule digest and cascade descriptor up
/// front, then a named list of tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub schedule_digest: [u8; 32],
    pub cascade: CascadeDescriptor,
    pub hidden: usize,
    pub tensors: Vec<(String, Tensor)>,
}

fn shape_fields(shape: Shape) -> (u8, [u64; 3]) {
    match shape {
        Shape::Image {
            channels,
            height,
            width,
        } => (0, [channels as u64, height as u64, width as u64]),
        Shape::Flat { len, group } => (1, [len as u64, group as u64, 0]),
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.schedule_digest);
    let (kind, fields) = shape_fields(ck.cascade.shape);
    buf.push(kind);
    for f in fields {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    buf.push(ck.cascade.levels as u8);
    buf.push(match ck.cascade.backend {
        Backend::Pooling => 0,
        Backend::Dense => 1,
    });
    buf.extend_from_slice(&(ck.hidden as u32).to_le_bytes());
    buf.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ck.tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Failure::config(format!("tensor name '{name}' too long")));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        push_tensor(&mut buf, tensor, Dtype::F64)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let buf = fs::read(path)
        .map_err(|e| Failure::other(format!("{}: {e}", path.display())))?;
    let mut cur = Cursor {
        buf: &buf,
        at: 0,
        path,
    };
    cur.expect_magic(CHECKPOINT_MAGIC, "checkpoint")?;
    let mut schedule_digest = [0u8; 32];
    schedule_digest.copy_from_slice(cur.take(32)?);
    let kind = cur.u8()?;
    let f = [cur.usize64()?, cur.usize64()?, cur.usize64()?];
    let shape = match kind {
        0 => Shape::Image {
            channels: f[0],
            height: f[1],
            width: f[2],
        },
        1 => Shape::Flat {
            len: f[0],
            group: f[1],
        },
        other => {
            return Err(Failure::config(format!(
                "{}: unknown shape kind {other}",
                path.display()
            )))
        }
    };
    let levels = cur.u8()? as usize;
    let backend = match cur.u8()? {
        0 => Backend::Pooling,
        1 => Backend::Dense,
        other => {
            return Err(Failure::config(format!(
                "{}: unknown backend code {other}",
                path.display()
            )))
        }
    };
    let hidden = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| {
            Failure::config(format!("{}: tensor name is not UTF-8", path.display()))
        })?;
        let (tensor, dtype) = cur.tensor()?;
        if dtype != Dtype::F64 {
            return Err(Failure::config(format!(
                "{}: checkpoint tensors must be 64-bit",
                path.display()
            )));
        }
        tensors.push((name, tensor));
    }
    if !cur.finished() {
        return Err(Failure::config(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            buf.len() - cur.at
        )));
    }
    Ok(Checkpoint {
        schedule_digest,
        cascade: CascadeDescriptor {
            shape,
            levels,
            backend,
        },
        hidden,
        tensors,
    })
}

/// Plain (P2) grayscale image: values rescaled affinely from [min, max] to
/// [0, 255]. A constant input maps to all zeros. Lines stay within the
/// format's 70-character limit.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f64]) -> CliResult<()> {
    if rows * cols != data.len() {
        return Err(Failure::config(format!(
            "image geometry {rows}x{cols} wants {} values, got {}",
            rows * cols,
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Failure::numeric(format!(
            "{}: non-finite value in image export",
            path.display()
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in data.chunks(cols) {
        for line in row.chunks(17) {
            let text: Vec<String> = line
                .iter()
                .map(|&v| {
                    let g = if span > 0.0 {
                        ((v - lo) / span * 255.0).round() as u32
                    } else {
                        0
                    };
                    g.min(255).to_string()
                })
                .collect();
            out.push_str(&text.join(" "));
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dvdp-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn tensor_round_trip_is_value_exact() {
        let t = Tensor::new(
            vec![2, 3],
            vec![0.1, -2.5e300, 3.0, f64::MIN_POSITIVE, 0.0, 1.0 / 3.0],
        )
        .unwrap();
        let path = tmp("roundtrip.dvtf");
        write_tensor(&path, &t, Dtype::F64).unwrap();
        let (back, dtype) = read_tensor(&path).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_layout_is_little_endian() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let path = tmp("layout.dvtf");
        write_tensor(&path, &t, Dtype::F64).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DVTF");
        assert_eq!(bytes[4..6], [1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 1);
        assert_eq!(bytes[8..16], 1u64.to_le_bytes());
        assert_eq!(bytes[16..24], 1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn narrow_dtype_narrows_values() {
        let t = Tensor::new(vec![2], vec![0.1, 7.0]).unwrap();
        let path = tmp("narrow.dvtf");
        write_tensor(&path, &t, Dtype::F32).unwrap();
        let (back, dtype) = read_tensor(&path).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(back.data[0], 0.1f32 as f64);
        assert_eq!(back.data[1], 7.0);
    }

    #[test]
    fn corrupt_tensors_are_rejected() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path = tmp("corrupt.dvtf");
        write_tensor(&path, &t, Dtype::F64).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(read_tensor(&path), Err(Failure::Config(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(read_tensor(&path), Err(Failure::Config(_))));

        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Failure::Config(_))));

        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&path, &trailing).unwrap();
        assert!(matches!(read_tensor(&path), Err(Failure::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let ck = Checkpoint {
            schedule_digest: [7; 32],
            cascade: CascadeDescriptor {
                shape: Shape::Flat { len: 8, group: 2 },
                levels: 2,
                backend: Backend::Dense,
            },
            hidden: 64,
            tensors: vec![
                (
                    "L0.w1".into(),
                    Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                ),
                ("L0.b1".into(), Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap()),
            ],
        };
        let path = tmp("roundtrip.dvck");
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.schedule_digest, ck.schedule_digest);
        assert_eq!(back.cascade, ck.cascade);
        assert_eq!(back.hidden, ck.hidden);
        assert_eq!(back.tensors, ck.tensors);
    }

    #[test]
    fn pgm_rescales_to_full_range() {
        let path = tmp("scale.pgm");
        write_pgm(&path, 1, 3, &[-1.0, 0.0, 1.0]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "P2\n3 1\n255\n0 128 255\n");
    }

    #[test]
    fn pgm_constant_image_is_black() {
        let path = tmp("flat.pgm");
        write_pgm(&path, 2, 2, &[3.0; 4]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "P2\n2 2\n255\n0 0\n0 0\n");
    }

    #[test]
    fn pgm_lines_stay_short() {
        let data: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let path = tmp("wide.pgm");
        write_pgm(&path, 1, 100, &data).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.len() <= 70));
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.249e0, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }
}
