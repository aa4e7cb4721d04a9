//! Versioned binary container for everything a run needs to resume:
//! network parameters (batch-norm running statistics included), the fitted
//! initializer, and the replay buffer with its exact RNG position.
//!
//! Layout is little-endian throughout: magic `JOUL`, a format version,
//! a presence flag byte, then the network / initializer / buffer sections.
//! Tensors are encoded as rank, dims, then raw f64 bits. A version other
//! than [`CHECKPOINT_VERSION`] is refused outright rather than guessed at.

use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::init::{CovFactor, InformativeInit};
use crate::net::{BatchNorm, Conv3x3, Dense, Layer, SplitNetwork};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::io::{Read as _, Write as _};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JOUL";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_INIT: u8 = 1;
const FLAG_BUFFER: u8 = 2;

/// Everything restored from a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub net: SplitNetwork,
    pub init: Option<InformativeInit>,
    pub buffer: Option<ReplayBuffer>,
}

pub fn save(
    path: &Path,
    net: &SplitNetwork,
    init: Option<&InformativeInit>,
    buffer: Option<&ReplayBuffer>,
) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let mut flags = 0u8;
    if init.is_some() {
        flags |= FLAG_INIT;
    }
    if buffer.is_some() {
        flags |= FLAG_BUFFER;
    }
    w.u8(flags);

    write_net(&mut w, net);
    if let Some(init) = init {
        write_init(&mut w, init);
    }
    if let Some(buf) = buffer {
        write_buffer(&mut w, buf);
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(&w.buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "not a checkpoint file: bad magic {magic:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let flags = r.u8("flags")?;

    let net = read_net(&mut r)?;
    let init = if flags & FLAG_INIT != 0 {
        Some(read_init(&mut r)?)
    } else {
        None
    };
    let buffer = if flags & FLAG_BUFFER != 0 {
        Some(read_buffer(&mut r)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after final section",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { net, init, buffer })
}

// ── section encoders ─────────────────────────────────────────────────────

fn write_net(w: &mut Writer, net: &SplitNetwork) {
    w.shape(net.input_shape());
    w.u32(net.num_classes() as u32);
    let layers: Vec<&Layer> = net.layers().collect();
    w.u32(layers.len() as u32);
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                w.u8(0);
                w.tensor(&d.w);
                w.tensor(&d.b);
            }
            Layer::Conv3x3(c) => {
                w.u8(1);
                w.tensor(&c.w);
                w.tensor(&c.b);
            }
            Layer::BatchNorm(bn) => {
                w.u8(2);
                w.tensor(&bn.gamma);
                w.tensor(&bn.beta);
                w.tensor(&bn.running_mean);
                w.tensor(&bn.running_var);
                w.f64(bn.momentum);
                w.f64(bn.eps);
            }
            Layer::Relu => w.u8(3),
        }
    }
}

fn read_net(r: &mut Reader) -> Result<SplitNetwork> {
    let input_shape = r.shape("network input shape")?;
    let num_classes = r.u32("class count")? as usize;
    let layer_count = r.u32("layer count")? as usize;
    if layer_count == 0 {
        return Err(Error::Checkpoint("network with zero layers".into()));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let tag = r.u8("layer tag")?;
        layers.push(match tag {
            0 => Layer::Dense(Dense {
                w: r.tensor("dense weight")?,
                b: r.tensor("dense bias")?,
            }),
            1 => Layer::Conv3x3(Conv3x3 {
                w: r.tensor("conv weight")?,
                b: r.tensor("conv bias")?,
            }),
            2 => Layer::BatchNorm(BatchNorm {
                gamma: r.tensor("bn gamma")?,
                beta: r.tensor("bn beta")?,
                running_mean: r.tensor("bn running mean")?,
                running_var: r.tensor("bn running var")?,
                momentum: r.f64("bn momentum")?,
                eps: r.f64("bn eps")?,
            }),
            3 => Layer::Relu,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown layer tag {other} at layer {i}"
                )))
            }
        });
    }
    let first = layers.remove(0);
    SplitNetwork::new(first, layers, &input_shape, num_classes)
}

fn write_init(w: &mut Writer, init: &InformativeInit) {
    w.u32(init.num_classes() as u32);
    for p in &init.pi {
        w.f64(*p);
    }
    for (mu, factor) in init.mu.iter().zip(&init.cov_factor) {
        w.tensor(mu);
        match factor {
            CovFactor::Full(l) => {
                w.u8(0);
                w.tensor(l);
            }
            CovFactor::Diagonal(l) => {
                w.u8(1);
                w.tensor(l);
            }
        }
    }
    w.f64(init.jitter);
}

fn read_init(r: &mut Reader) -> Result<InformativeInit> {
    let c = r.u32("initializer class count")? as usize;
    let mut pi = Vec::with_capacity(c);
    for _ in 0..c {
        pi.push(r.f64("mixture weight")?);
    }
    let mut mu = Vec::with_capacity(c);
    let mut cov_factor = Vec::with_capacity(c);
    for _ in 0..c {
        mu.push(r.tensor("class mean")?);
        let tag = r.u8("factor tag")?;
        let l = r.tensor("covariance factor")?;
        cov_factor.push(match tag {
            0 => CovFactor::Full(l),
            1 => CovFactor::Diagonal(l),
            other => {
                return Err(Error::Checkpoint(format!("unknown factor tag {other}")))
            }
        });
    }
    let jitter = r.f64("jitter")?;
    let init = InformativeInit {
        pi,
        mu,
        cov_factor,
        jitter,
    };
    init.validate()?;
    Ok(init)
}

fn write_buffer(w: &mut Writer, buf: &ReplayBuffer) {
    w.u64(buf.capacity() as u64);
    w.f64(buf.rho());
    let rng = buf.rng();
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
    w.u64(buf.slots().len() as u64);
    for slot in buf.slots() {
        w.tensor(slot);
    }
}

fn read_buffer(r: &mut Reader) -> Result<ReplayBuffer> {
    let capacity = r.u64("buffer capacity")? as usize;
    let rho = r.f64("buffer rho")?;
    let seed: [u8; 32] = r
        .take(32, "buffer rng seed")?
        .try_into()
        .expect("fixed-length take");
    let stream = r.u64("buffer rng stream")?;
    let word_pos = r.u128("buffer rng position")?;
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let count = r.u64("buffer slot count")? as usize;
    let mut slots = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        slots.push(r.tensor("buffer slot")?);
    }
    ReplayBuffer::from_parts(capacity, rho, slots, rng)
}

// ── byte-level plumbing ──────────────────────────────────────────────────

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.shape(t.shape());
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("fixed-length take"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("fixed-length take"),
        ))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16, what)?.try_into().expect("fixed-length take"),
        ))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("fixed-length take"),
        ))
    }

    fn shape(&mut self, what: &str) -> Result<Vec<usize>> {
        let rank = self.u32(what)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "implausible rank {rank} for {what}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64(what)? as usize);
        }
        Ok(dims)
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let shape = self.shape(what)?;
        let len: usize = shape.iter().product();
        // Bound the claimed size by the bytes actually present.
        if len > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!(
                "truncated: tensor {what} claims {len} elements beyond end of file"
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64(what)?);
        }
        Tensor::from_vec(&shape, data)
    }
}
