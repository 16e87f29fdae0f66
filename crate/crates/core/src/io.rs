//! Flat little-endian array files and WAV helpers.
//!
//! Array layout: a `u64` element count followed by that many `f64` values.
//! Matrix layout: `u64` rows, `u64` cols, then `rows * cols` row-major `f64`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn write_f64_array(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f64_array(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let n = cur.u64()? as usize;
    let values = cur.f64s(n)?;
    cur.finish()?;
    Ok(values)
}

pub fn write_f64_matrix(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    values: &[f64],
) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::shape("matrix payload", rows * cols, values.len()));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f64_matrix(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let rows = cur.u64()? as usize;
    let cols = cur.u64()? as usize;
    let values = cur.f64s(rows.checked_mul(cols).ok_or_else(|| {
        Error::Format("matrix dimensions overflow".into())
    })?)?;
    cur.finish()?;
    Ok((rows, cols, values))
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Format("element count overflow".into())
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::Format("element count overflow".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("unterminated header line".into()))?;
        let text = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        self.pos += nl + 1;
        Ok(text)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Reads a mono WAV file (32-bit float or 16/24/32-bit integer PCM).
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<T>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "expected mono audio, found {} channels",
            spec.channels
        )));
    }
    let samples: Vec<T> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| T::of(f64::from(v))))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| T::of(f64::from(v) * scale)))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Writes mono 32-bit float PCM.
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, samples: &[T], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(s.as_f64() as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_f64_array(&p, &[1.0, -2.5, 3.25]).unwrap();
        assert_eq!(read_f64_array(&p).unwrap(), vec![1.0, -2.5, 3.25]);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_f64_array(&p), Err(Error::Format(_))));
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_f64_matrix(&p, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (r, c, v) = read_f64_matrix(&p).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(v[5], 6.0);
    }

    #[test]
    fn wav_round_trip_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let x = vec![0.0f64, 0.5, -0.25, 0.125];
        write_wav(&p, &x, 16000).unwrap();
        let (y, sr) = read_wav::<f64>(&p).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(y, x);
    }

    #[test]
    fn wav_reads_16_bit_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.finalize().unwrap();
        let (y, _) = read_wav::<f64>(&p).unwrap();
        assert_eq!(y, vec![0.5, -1.0]);
    }
}
