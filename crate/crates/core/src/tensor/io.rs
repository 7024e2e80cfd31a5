//! Flat binary fixture format: `"TNSR"`, `u32` rank, `rank` x `u64` dims,
//! then `f64` values row-major. Everything little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Io(e.to_string())
}

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> Result<()> {
    out.write_all(TENSOR_MAGIC).map_err(io_err)?;
    out.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io_err)?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Io(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(io_err)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 16 {
        return Err(TensorError::Io(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        input.read_exact(&mut dim).map_err(io_err)?;
        let d = u64::from_le_bytes(dim);
        total = total
            .checked_mul(d)
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| TensorError::Io("tensor too large".into()))?;
        shape.push(d as usize);
    }
    let mut data = Vec::with_capacity(total as usize);
    let mut value = [0u8; 8];
    for _ in 0..total {
        input.read_exact(&mut value).map_err(io_err)?;
        data.push(f64::from_le_bytes(value));
    }
    Tensor::new(data, &shape)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    write_tensor(&mut file, t)?;
    file.flush().map_err(io_err)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    read_tensor(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let t = Tensor::new(vec![1.5, -2.0, 3.25, 0.1, 7.0, 1e-300], &[2, 3]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(buf.len(), 4 + 4 + 2 * 8 + 6 * 8);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn truncated_input_is_an_error() {
        let t = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
        assert!(read_tensor(&mut &b"NOPE"[..]).is_err());
    }
}
