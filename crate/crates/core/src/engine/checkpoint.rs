use std::io::{Read, Write};

use super::{EncoderParams, EngineError, PATCH_FEATURES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GAEC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic, version, dim`, then the text table, patch projection and
/// output projection as little-endian f64, row-major.
pub fn write_checkpoint<W: Write>(mut w: W, params: &EncoderParams) -> Result<(), EngineError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.dim as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.param_count() * 8);
    for x in params.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint. The vocabulary size follows from the payload length.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EncoderParams, EngineError> {
    let bad = |m: String| EngineError::Checkpoint(m);
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| bad("truncated header".into()))?;
    if &header[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(bad("dimension is zero".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values".into()));
    }
    let count = payload.len() / 8;
    let fixed = dim * PATCH_FEATURES + dim * dim;
    if count < fixed || !(count - fixed).is_multiple_of(dim) {
        return Err(bad(format!("{count} values do not fit dimension {dim}")));
    }
    let vocab = (count - fixed) / dim;
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut params = EncoderParams::zeros(vocab, dim);
    for x in params.iter_mut() {
        *x = values.next().expect("length checked");
    }
    if !params.is_finite() {
        return Err(bad("non-finite weights".into()));
    }
    Ok(params)
}
