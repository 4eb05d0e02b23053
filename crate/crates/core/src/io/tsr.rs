//! `TSR1` tensor files: the magic `TSR1`, a dtype code byte (0 = f32,
//! 1 = f64, 2 = u8, 3 = i64), a rank byte, `rank` little-endian `u64`
//! dims, then the row-major little-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"TSR1";

pub trait TsrElement: Element {
    const CODE: u8;
    const SIZE: usize;
    const NAME: &'static str;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

macro_rules! tsr_element {
    ($t:ty, $code:expr, $name:expr) => {
        impl TsrElement for $t {
            const CODE: u8 = $code;
            const SIZE: usize = std::mem::size_of::<$t>();
            const NAME: &'static str = $name;
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn take(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

tsr_element!(f32, 0, "f32");
tsr_element!(f64, 1, "f64");
tsr_element!(u8, 2, "u8");
tsr_element!(i64, 3, "i64");

fn dtype_name(code: u8) -> Option<&'static str> {
    match code {
        0 => Some(f32::NAME),
        1 => Some(f64::NAME),
        2 => Some(u8::NAME),
        3 => Some(i64::NAME),
        _ => None,
    }
}

fn dtype_size(code: u8) -> usize {
    match code {
        0 => 4,
        1 | 3 => 8,
        _ => 1,
    }
}

pub fn encode<T: TsrElement>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| {
        Error::InvalidArgument(format!("rank {} does not fit the format", t.rank()))
    })?;
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + T::SIZE * t.len());
    out.extend_from_slice(MAGIC);
    out.push(T::CODE);
    out.push(rank);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.put(&mut out);
    }
    Ok(out)
}

struct Header {
    code: u8,
    dims: Vec<usize>,
    offset: usize,
}

fn header(bytes: &[u8], path: &Path) -> Result<Header> {
    let fail = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 6 {
        return Err(fail(format!(
            "file is {} bytes, shorter than the 6-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected \"TSR1\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let code = bytes[4];
    if dtype_name(code).is_none() {
        return Err(fail(format!("unknown dtype code {code}")));
    }
    let rank = bytes[5] as usize;
    let offset = 6 + 8 * rank;
    if bytes.len() < offset {
        return Err(fail(format!(
            "truncated header: expected {offset} bytes for rank {rank}, found {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[6..offset]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fail(format!("dims {dims:?} overflow")))?;
    let expected = offset + count * dtype_size(code);
    if bytes.len() != expected {
        return Err(fail(format!(
            "payload length mismatch: expected {expected} bytes for dims {dims:?} of {}, found {}",
            dtype_name(code).unwrap_or("?"),
            bytes.len()
        )));
    }
    Ok(Header { code, dims, offset })
}

fn payload<T: TsrElement>(bytes: &[u8], h: &Header, path: &Path) -> Result<Tensor<T>> {
    let data = bytes[h.offset..]
        .chunks_exact(T::SIZE)
        .map(T::take)
        .collect();
    Tensor::new(h.dims.clone(), data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn decode<T: TsrElement>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let h = header(bytes, path)?;
    if h.code != T::CODE {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "dtype mismatch: file holds {}, caller expected {}",
                dtype_name(h.code).unwrap_or("?"),
                T::NAME
            ),
        });
    }
    payload(bytes, &h, path)
}

pub fn write_tsr<T: TsrElement>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tsr<T: TsrElement>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// A tensor of whichever dtype a file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
    I64(Tensor<i64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
            AnyTensor::U8(t) => t.dims(),
            AnyTensor::I64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            AnyTensor::F32(_) => f32::NAME,
            AnyTensor::F64(_) => f64::NAME,
            AnyTensor::U8(_) => u8::NAME,
            AnyTensor::I64(_) => i64::NAME,
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Tensor<f64> {
        let dims = self.dims().to_vec();
        let data: Vec<f64> = match self {
            AnyTensor::F32(t) => t.data().iter().map(|&v| v as f64).collect(),
            AnyTensor::F64(t) => t.data().to_vec(),
            AnyTensor::U8(t) => t.data().iter().map(|&v| v as f64).collect(),
            AnyTensor::I64(t) => t.data().iter().map(|&v| v as f64).collect(),
        };
        Tensor::new(dims, data).expect("converted from a valid tensor")
    }
}

pub fn read_tsr_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let h = header(&bytes, &path)?;
    Ok(match h.code {
        0 => AnyTensor::F32(payload(&bytes, &h, &path)?),
        1 => AnyTensor::F64(payload(&bytes, &h, &path)?),
        2 => AnyTensor::U8(payload(&bytes, &h, &path)?),
        _ => AnyTensor::I64(payload(&bytes, &h, &path)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f32_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsr");
        let t =
            Tensor::<f32>::randn(vec![3, 4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        write_tsr(&path, &t).unwrap();
        let back: Tensor<f32> = read_tsr(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(read_tsr_any(&path).unwrap().dtype(), "f32");
    }

    #[test]
    fn single_f64_is_22_bytes() {
        let t = Tensor::<f64>::new(vec![1], vec![2.5]).unwrap();
        assert_eq!(encode(&t).unwrap().len(), 4 + 1 + 1 + 8 + 8);
    }

    #[test]
    fn truncation_names_expected_and_actual() {
        let t = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let mut bytes = encode(&t).unwrap();
        bytes.truncate(bytes.len() - 3);
        let msg = decode::<f32>(&bytes, Path::new("x.tsr"))
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("expected 46 bytes") && msg.contains("found 43"),
            "{msg}"
        );
    }

    #[test]
    fn bad_magic_and_dtype_mismatch() {
        let t = Tensor::<u8>::new(vec![2], vec![1, 2]).unwrap();
        let mut bytes = encode(&t).unwrap();
        let msg = decode::<f32>(&bytes, Path::new("x"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("dtype mismatch"), "{msg}");
        bytes[0] = b'X';
        let msg = decode::<u8>(&bytes, Path::new("x"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("bad magic"), "{msg}");
    }

    fn round_trip<T: TsrElement>(t: &Tensor<T>) -> Vec<u8> {
        let bytes = encode(t).unwrap();
        let back: Tensor<T> = decode(&bytes, Path::new("mem")).unwrap();
        encode(&back).unwrap()
    }

    proptest! {
        #[test]
        fn every_dtype_round_trips(dims in prop::collection::vec(1usize..5, 1..5), seed in 0u64..1000) {
            let len: usize = dims.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::<f64>::randn(dims.clone(), 1e3, &mut rng).unwrap();
            let b = encode(&f).unwrap();
            prop_assert_eq!(round_trip(&f), b);
            let g = f.cast::<f32>();
            prop_assert_eq!(round_trip(&g), encode(&g).unwrap());
            let u = Tensor::<u8>::new(dims.clone(), (0..len).map(|i| (i * 37 % 256) as u8).collect()).unwrap();
            prop_assert_eq!(round_trip(&u), encode(&u).unwrap());
            let l = Tensor::<i64>::new(dims, (0..len).map(|i| i as i64 * -7_000_000_007).collect()).unwrap();
            prop_assert_eq!(round_trip(&l), encode(&l).unwrap());
        }
    }
}
