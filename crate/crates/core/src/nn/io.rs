//! Versioned little-endian weight files.
//!
//! ```text
//! "USNN" | version u32 | input kind u8 + 3 x u32 | loss u8 | layer count u32
//! per layer: kind u8 | 2 x u32 params | weight count u32 | f32 weights | bias count u32 | f32 biases
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::layer::{Layer, LayerSpec, Shape};
use super::network::{LossKind, Network};
use super::NnError;

pub const MAGIC: &[u8; 4] = b"USNN";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), NnError> {
    let v = u32::try_from(v).map_err(|_| NnError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) -> Result<(), NnError> {
    put_u32(out, values.len())?;
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(net: &Network) -> Result<Vec<u8>, NnError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    match net.input {
        Shape::Image { c, h, w } => {
            out.push(0);
            put_u32(&mut out, c)?;
            put_u32(&mut out, h)?;
            put_u32(&mut out, w)?;
        }
        Shape::Flat(n) => {
            out.push(1);
            put_u32(&mut out, n)?;
            put_u32(&mut out, 0)?;
            put_u32(&mut out, 0)?;
        }
    }
    out.push(match net.loss {
        LossKind::CrossEntropy => 0,
        LossKind::Mse => 1,
    });
    put_u32(&mut out, net.layers.len())?;
    for layer in &net.layers {
        let (tag, a, b) = match layer.spec {
            LayerSpec::Conv2d { filters, kernel } => (0u8, filters, kernel),
            LayerSpec::MaxPool { size } => (1, size, 0),
            LayerSpec::Relu => (2, 0, 0),
            LayerSpec::Flatten => (3, 0, 0),
            LayerSpec::Dense { neurons } => (4, neurons, 0),
            LayerSpec::Softmax => (5, 0, 0),
            LayerSpec::LinearOutput => (6, 0, 0),
        };
        out.push(tag);
        put_u32(&mut out, a)?;
        put_u32(&mut out, b)?;
        put_f32s(&mut out, &layer.weights)?;
        put_f32s(&mut out, &layer.bias)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Format(format!("truncated weight file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, expected: usize) -> Result<Vec<f32>, NnError> {
        let n = self.u32()?;
        if n != expected {
            return Err(NnError::Format(format!("expected {expected} parameters, file has {n}")));
        }
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| NnError::Format("parameter count overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Network, NnError> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(NnError::Format("not a weight file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION as usize {
        return Err(NnError::Format(format!("unsupported weight file version {version}")));
    }
    let kind = cur.u8()?;
    let (a, b, c) = (cur.u32()?, cur.u32()?, cur.u32()?);
    let input = match kind {
        0 => Shape::Image { c: a, h: b, w: c },
        1 => Shape::Flat(a),
        k => return Err(NnError::Format(format!("unknown input kind {k}"))),
    };
    let loss = match cur.u8()? {
        0 => LossKind::CrossEntropy,
        1 => LossKind::Mse,
        k => return Err(NnError::Format(format!("unknown loss kind {k}"))),
    };
    let count = cur.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    let mut shape = input;
    for _ in 0..count {
        let tag = cur.u8()?;
        let (p, q) = (cur.u32()?, cur.u32()?);
        let spec = match tag {
            0 => LayerSpec::Conv2d { filters: p, kernel: q },
            1 => LayerSpec::MaxPool { size: p },
            2 => LayerSpec::Relu,
            3 => LayerSpec::Flatten,
            4 => LayerSpec::Dense { neurons: p },
            5 => LayerSpec::Softmax,
            6 => LayerSpec::LinearOutput,
            t => return Err(NnError::Format(format!("unknown layer kind {t}"))),
        };
        let mut layer = Layer::new(spec, shape)?;
        layer.weights = cur.f32s(layer.weights.len())?;
        layer.bias = cur.f32s(layer.bias.len())?;
        shape = layer.output;
        layers.push(layer);
    }
    if cur.pos != buf.len() {
        return Err(NnError::Format(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    let net = Network { input, layers, loss };
    net.validate()?;
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<(), NnError> {
    let bytes = encode(net)?;
    let mut f = std::fs::File::create(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes).map_err(|e| NnError::Io(e.to_string()))
}

pub fn load(path: &Path) -> Result<Network, NnError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
    decode(&buf)
}
