//! Binary dataset ("XLCD") and checkpoint ("XLCM", "XLCQ") formats.
//!
//! All integers and floats are little-endian. Readers report the byte offset
//! at which a file stops making sense.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::compression::{PruneMask, QuantizedConvLayer, QuantizedLayer, QuantizedModel};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvLayer, Tensor4};
use crate::xlcnet::{Dataset, Model};

pub const DATASET_MAGIC: [u8; 4] = *b"XLCD";
pub const MODEL_MAGIC: [u8; 4] = *b"XLCM";
pub const QUANTIZED_MAGIC: [u8; 4] = *b"XLCQ";
pub const DATASET_VERSION: u16 = 1;
pub const MODEL_VERSION: u16 = 1;
pub const QUANTIZED_VERSION: u16 = 1;
pub const DATASET_HEADER_LEN: u64 = 32;

/// Where an artifact came from: the experiment config hash (which covers the
/// master seed) and the master seed itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub config_hash: u64,
    pub seed: u64,
}

impl Provenance {
    /// The 48-bit tag that fits the dataset header.
    pub fn tag48(&self) -> [u8; 6] {
        let b = self.config_hash.to_le_bytes();
        [b[0], b[1], b[2], b[3], b[4], b[5]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub antennas: u32,
    pub rows: u32,
    pub cols: u32,
    pub count: u64,
    pub tag: [u8; 6],
}

/// Bytes per stored sample: SNR tag plus two `rows x cols x 2` grids.
pub fn dataset_sample_bytes(rows: usize, cols: usize) -> u64 {
    4 + 2 * (rows * cols * 2) as u64 * 4
}

struct Writer<W> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn i64(&mut self, v: i64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32s(&mut self, v: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 4);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }
    fn dim(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| {
            Error::InvalidArgument(format!("dimension {v} does not fit in 32 bits"))
        })?;
        self.u32(v)
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset,
            reason: reason.into(),
        })
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    self.offset += got as u64;
                    return self.fail(format!(
                        "unexpected end of file, {} more bytes expected",
                        buf.len() - got
                    ));
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.fill(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let at = self.offset;
        let got: [u8; 4] = self.array()?;
        if got != expected {
            return Err(Error::Format {
                offset: at,
                reason: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(&expected)
                ),
            });
        }
        Ok(())
    }

    fn version(&mut self, supported: u16) -> Result<u16> {
        let at = self.offset;
        let v = self.u16()?;
        if v != supported {
            return Err(Error::Format {
                offset: at,
                reason: format!("unsupported format version {v}, expected {supported}"),
            });
        }
        Ok(v)
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.offset;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format {
                offset: at,
                reason: format!("flag byte must be 0 or 1, got {v}"),
            }),
        }
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => return self.fail("trailing bytes after the last record"),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn create(path: &Path) -> Result<Writer<BufWriter<File>>> {
    Ok(Writer {
        inner: BufWriter::new(File::create(path)?),
    })
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    Ok(Reader {
        inner: BufReader::new(file),
        offset: 0,
    })
}

pub fn encode_dataset<W: Write>(out: W, data: &Dataset, tag: [u8; 6]) -> Result<()> {
    let mut w = Writer { inner: out };
    w.bytes(&DATASET_MAGIC)?;
    w.u16(DATASET_VERSION)?;
    w.dim(data.rows * data.cols)?;
    w.dim(data.rows)?;
    w.dim(data.cols)?;
    w.u64(data.len() as u64)?;
    w.bytes(&tag)?;
    for i in 0..data.len() {
        w.f32(data.snr_db[i])?;
        w.f32s(data.ls_grid(i))?;
        w.f32s(data.truth_grid(i))?;
    }
    w.inner.flush()?;
    Ok(())
}

pub fn decode_dataset<R: Read>(input: R) -> Result<(Dataset, DatasetHeader)> {
    let mut r = Reader {
        inner: input,
        offset: 0,
    };
    r.magic(DATASET_MAGIC)?;
    let version = r.version(DATASET_VERSION)?;
    let antennas = r.u32()?;
    let at = r.offset;
    let rows = r.u32()?;
    let cols = r.u32()?;
    if rows as u64 * cols as u64 != antennas as u64 {
        return Err(Error::Format {
            offset: at,
            reason: format!("grid {rows}x{cols} does not hold {antennas} antennas"),
        });
    }
    let count = r.u64()?;
    let tag: [u8; 6] = r.array()?;
    let header = DatasetHeader {
        version,
        antennas,
        rows,
        cols,
        count,
        tag,
    };
    let mut data = Dataset::new(rows as usize, cols as usize);
    let n = data.grid_len();
    for _ in 0..count {
        let snr = r.f32()?;
        let ls = r.f32s(n)?;
        let truth = r.f32s(n)?;
        data.push(snr, &ls, &truth)?;
    }
    r.expect_eof()?;
    Ok((data, header))
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    data: &Dataset,
    provenance: &Provenance,
) -> Result<()> {
    let w = create(path.as_ref())?;
    encode_dataset(w.inner, data, provenance.tag48())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(Dataset, DatasetHeader)> {
    decode_dataset(open(path.as_ref())?.inner)
}

fn write_bn<W: Write>(w: &mut Writer<W>, bn: &BatchNorm<f32>) -> Result<()> {
    w.f32s(&bn.gamma)?;
    w.f32s(&bn.beta)?;
    w.f32s(&bn.running_mean)?;
    w.f32s(&bn.running_var)?;
    w.f32(bn.eps)?;
    w.f32(bn.momentum)
}

fn read_bn<R: Read>(r: &mut Reader<R>, channels: usize) -> Result<BatchNorm<f32>> {
    Ok(BatchNorm {
        gamma: r.f32s(channels)?,
        beta: r.f32s(channels)?,
        running_mean: r.f32s(channels)?,
        running_var: r.f32s(channels)?,
        eps: r.f32()?,
        momentum: r.f32()?,
    })
}

fn write_preamble<W: Write>(
    w: &mut Writer<W>,
    magic: [u8; 4],
    version: u16,
    rows: usize,
    cols: usize,
    layers: usize,
    prov: &Provenance,
) -> Result<()> {
    w.bytes(&magic)?;
    w.u16(version)?;
    w.u16(0)?;
    w.dim(rows)?;
    w.dim(cols)?;
    w.dim(layers)?;
    w.u64(prov.config_hash)?;
    w.u64(prov.seed)
}

struct Preamble {
    rows: usize,
    cols: usize,
    layers: usize,
    provenance: Provenance,
}

fn read_preamble<R: Read>(r: &mut Reader<R>, magic: [u8; 4], version: u16) -> Result<Preamble> {
    r.magic(magic)?;
    r.version(version)?;
    r.u16()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let config_hash = r.u64()?;
    let seed = r.u64()?;
    Ok(Preamble {
        rows,
        cols,
        layers,
        provenance: Provenance { config_hash, seed },
    })
}

/// Layer shape record shared by both checkpoint formats.
fn write_layer_head<W: Write>(
    w: &mut Writer<W>,
    shape: [usize; 4],
    relu: bool,
    bn: bool,
) -> Result<()> {
    w.dim(shape[0])?;
    w.dim(shape[1])?;
    w.dim(shape[2])?;
    w.u8(relu as u8)?;
    w.u8(bn as u8)
}

fn read_layer_head<R: Read>(r: &mut Reader<R>) -> Result<([usize; 4], bool, bool)> {
    let at = r.offset;
    let out = r.u32()? as usize;
    let inp = r.u32()? as usize;
    let f = r.u32()? as usize;
    if out == 0 || inp == 0 || f == 0 || f.is_multiple_of(2) {
        return Err(Error::Format {
            offset: at,
            reason: format!("invalid layer shape {out}x{inp}x{f}x{f}"),
        });
    }
    let relu = r.flag()?;
    let bn = r.flag()?;
    Ok(([out, inp, f, f], relu, bn))
}

pub fn encode_model<W: Write>(
    out: W,
    model: &Model<f32>,
    mask: Option<&PruneMask>,
    prov: &Provenance,
) -> Result<()> {
    model.validate()?;
    if let Some(m) = mask {
        m.check_model(model)?;
    }
    let mut w = Writer { inner: out };
    write_preamble(
        &mut w,
        MODEL_MAGIC,
        MODEL_VERSION,
        model.rows,
        model.cols,
        model.layers.len(),
        prov,
    )?;
    for (i, layer) in model.layers.iter().enumerate() {
        write_layer_head(
            &mut w,
            layer.kernels.shape(),
            layer.relu,
            layer.bn.is_some(),
        )?;
        w.f32s(layer.kernels.data())?;
        w.f32s(&layer.bias)?;
        if let Some(bn) = &layer.bn {
            write_bn(&mut w, bn)?;
        }
        match mask {
            Some(m) => {
                w.u8(1)?;
                w.bytes(&pack_bits(m.layer(i)))?;
            }
            None => w.u8(0)?,
        }
    }
    w.inner.flush()?;
    Ok(())
}

/// A full-precision checkpoint: the model, its pruning mask if it has one, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub mask: Option<PruneMask>,
    pub provenance: Provenance,
}

pub fn decode_model<R: Read>(input: R) -> Result<ModelCheckpoint> {
    let mut r = Reader {
        inner: input,
        offset: 0,
    };
    let pre = read_preamble(&mut r, MODEL_MAGIC, MODEL_VERSION)?;
    let mut layers = Vec::with_capacity(pre.layers);
    let mut masks = Vec::with_capacity(pre.layers);
    let mut any_mask = None;
    for _ in 0..pre.layers {
        let (shape, relu, has_bn) = read_layer_head(&mut r)?;
        let n: usize = shape.iter().product();
        let kernels = Tensor4::from_vec(shape, r.f32s(n)?)?;
        let bias = r.f32s(shape[0])?;
        let bn = if has_bn {
            Some(read_bn(&mut r, shape[0])?)
        } else {
            None
        };
        let at = r.offset;
        let has_mask = r.flag()?;
        if *any_mask.get_or_insert(has_mask) != has_mask {
            return Err(Error::Format {
                offset: at,
                reason: "mask present for some layers only".into(),
            });
        }
        if has_mask {
            let bytes = r.vec(n.div_ceil(8))?;
            masks.push(unpack_bits(&bytes, n));
        }
        layers.push(ConvLayer {
            kernels,
            bias,
            bn,
            relu,
        });
    }
    r.expect_eof()?;
    let model = Model {
        layers,
        rows: pre.rows,
        cols: pre.cols,
    };
    model.validate()?;
    let mask = any_mask
        .unwrap_or(false)
        .then(|| PruneMask::from_layers(masks));
    Ok(ModelCheckpoint {
        model,
        mask,
        provenance: pre.provenance,
    })
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &Model<f32>,
    mask: Option<&PruneMask>,
    prov: &Provenance,
) -> Result<()> {
    let w = create(path.as_ref())?;
    encode_model(w.inner, model, mask, prov)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    decode_model(open(path.as_ref())?.inner)
}

pub fn encode_quantized<W: Write>(out: W, model: &QuantizedModel, prov: &Provenance) -> Result<()> {
    let mut w = Writer { inner: out };
    write_preamble(
        &mut w,
        QUANTIZED_MAGIC,
        QUANTIZED_VERSION,
        model.rows,
        model.cols,
        model.layers.len(),
        prov,
    )?;
    for layer in &model.layers {
        let q = &layer.kernels;
        write_layer_head(&mut w, q.shape, layer.relu, layer.bn.is_some())?;
        w.u8(q.bits)?;
        w.u8(q.constant.is_some() as u8)?;
        w.f32(q.scale)?;
        w.i64(q.zero_point)?;
        w.f32(q.constant.unwrap_or(0.0))?;
        w.bytes(&pack_bits(&q.retained))?;
        w.u64(q.packed.len() as u64)?;
        w.bytes(&q.packed)?;
        w.f32s(&layer.bias)?;
        if let Some(bn) = &layer.bn {
            write_bn(&mut w, bn)?;
        }
    }
    w.inner.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub model: QuantizedModel,
    pub provenance: Provenance,
}

pub fn decode_quantized<R: Read>(input: R) -> Result<QuantizedCheckpoint> {
    let mut r = Reader {
        inner: input,
        offset: 0,
    };
    let pre = read_preamble(&mut r, QUANTIZED_MAGIC, QUANTIZED_VERSION)?;
    let mut layers = Vec::with_capacity(pre.layers);
    for _ in 0..pre.layers {
        let (shape, relu, has_bn) = read_layer_head(&mut r)?;
        let n: usize = shape.iter().product();
        let at = r.offset;
        let bits = r.u8()?;
        if !(1..=32).contains(&bits) {
            return Err(Error::Format {
                offset: at,
                reason: format!("bit width {bits} outside 1..=32"),
            });
        }
        let is_constant = r.flag()?;
        let scale = r.f32()?;
        let zero_point = r.i64()?;
        let constant = r.f32()?;
        let retained = unpack_bits(&r.vec(n.div_ceil(8))?, n);
        let kept = retained.iter().filter(|&&k| k).count();
        let at = r.offset;
        let packed_len = r.u64()?;
        let expected = (kept * bits as usize).div_ceil(8) as u64;
        if packed_len != expected {
            return Err(Error::Format {
                offset: at,
                reason: format!("{packed_len} code bytes for {kept} weights at {bits} bits, expected {expected}"),
            });
        }
        let packed = r.vec(packed_len as usize)?;
        let bias = r.f32s(shape[0])?;
        let bn = if has_bn {
            Some(read_bn(&mut r, shape[0])?)
        } else {
            None
        };
        layers.push(QuantizedConvLayer {
            kernels: QuantizedLayer {
                shape,
                bits,
                scale,
                zero_point,
                constant: is_constant.then_some(constant),
                retained,
                packed,
            },
            bias,
            bn,
            relu,
        });
    }
    r.expect_eof()?;
    Ok(QuantizedCheckpoint {
        model: QuantizedModel {
            rows: pre.rows,
            cols: pre.cols,
            layers,
        },
        provenance: pre.provenance,
    })
}

pub fn save_quantized(
    path: impl AsRef<Path>,
    model: &QuantizedModel,
    prov: &Provenance,
) -> Result<()> {
    let w = create(path.as_ref())?;
    encode_quantized(w.inner, model, prov)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedCheckpoint> {
    decode_quantized(open(path.as_ref())?.inner)
}
