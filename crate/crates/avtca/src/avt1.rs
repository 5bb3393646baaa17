//! `AVT1` raw tensors: magic, `u8` rank, `rank x u32` extents, then the
//! `f32` payload in row-major order, all little-endian.

use std::io::{self, Read, Write};

use avtca_core::Tensor;

pub const MAGIC: &[u8; 4] = b"AVT1";

pub fn write<W: Write>(w: &mut W, t: &Tensor<f32>) -> io::Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| invalid(format!("rank {} does not fit in a byte", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[rank])?;
    for &n in t.shape() {
        let n = u32::try_from(n).map_err(|_| invalid(format!("extent {n} does not fit in u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read<R: Read>(r: &mut R) -> io::Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid(format!("bad magic {magic:?}, expected AVT1")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| invalid("extents overflow".into()))?;
    let mut bytes = vec![0u8; n.checked_mul(4).ok_or_else(|| invalid("payload overflow".into()))?];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))
}

pub fn to_bytes(t: &Tensor<f32>) -> io::Result<Vec<u8>> {
    let mut out = Vec::new();
    write(&mut out, t)?;
    Ok(out)
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}
