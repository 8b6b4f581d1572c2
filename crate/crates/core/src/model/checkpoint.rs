//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u8   version (= 1)
//! arch:  u32 in_channels, u32 base_channels, u32 n, n x u32 dilations,
//!        3 x u32 trunk widths, u32 fm_channels, u32 pool_stages, u32 groups,
//!        u8 flags (bit0 confidence, bit1 cross-layer), u8 fm_output,
//!        u8 init (0 Gaussian, 1 He), f64 Gaussian std (0 for He)
//! bins:  u32 n, n x f64 edges
//! u32  tensor count, then per tensor:
//!        u32 name length, UTF-8 name, u8 rank, rank x u32 extents,
//!        extents-product x f64 values
//! ```

use std::fs;
use std::path::Path;

use super::{ArchConfig, CatCnn, FmOutput, ModelParams, WeightInit};
use crate::error::{Error, Result};
use crate::groundtruth::GroupBins;
use crate::tensor::Tensor;

pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CatCnn,
    pub bins: GroupBins,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        let a = &self.model.arch;
        w.u8(VERSION);
        w.u32(a.in_channels);
        w.u32(a.base_channels);
        w.u32(a.dilation_set.len());
        a.dilation_set.iter().for_each(|&d| w.u32(d));
        a.trunk_widths.iter().for_each(|&t| w.u32(t));
        w.u32(a.fm_channels);
        w.u32(a.pool_stages);
        w.u32(a.groups);
        w.u8(u8::from(a.use_confidence) | (u8::from(a.use_cross_layer) << 1));
        w.u8(a.fm_output.code());
        match a.init {
            WeightInit::Gaussian { std } => {
                w.u8(0);
                w.f64(std);
            }
            WeightInit::He => {
                w.u8(1);
                w.f64(0.0);
            }
        }

        w.u32(self.bins.edges.len());
        self.bins.edges.iter().for_each(|&e| w.f64(e));

        w.u32(self.model.params.len());
        for (name, t) in self.model.params.iter() {
            w.u32(name.len());
            w.0.extend_from_slice(name.as_bytes());
            w.u8(t.shape().len() as u8);
            t.shape().iter().for_each(|&d| w.u32(d));
            t.data().iter().for_each(|&v| w.f64(v));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let in_channels = r.u32()?;
        let base_channels = r.u32()?;
        let n_dil = r.u32()?;
        let dilation_set = (0..n_dil).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let trunk_widths = [r.u32()?, r.u32()?, r.u32()?];
        let fm_channels = r.u32()?;
        let pool_stages = r.u32()?;
        let groups = r.u32()?;
        let flags = r.u8()?;
        let fm_output = FmOutput::from_code(r.u8()?)?;
        let init = match (r.u8()?, r.f64()?) {
            (0, std) => WeightInit::Gaussian { std },
            (1, _) => WeightInit::He,
            (t, _) => return Err(Error::Checkpoint(format!("unknown init tag {t}"))),
        };
        let arch = ArchConfig {
            in_channels,
            base_channels,
            dilation_set,
            trunk_widths,
            fm_channels,
            pool_stages,
            groups,
            use_confidence: flags & 1 != 0,
            use_cross_layer: flags & 2 != 0,
            fm_output,
            init,
        };
        arch.validate()?;

        let n_edges = r.u32()?;
        let edges = (0..n_edges).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if edges.len() < 2 {
            return Err(Error::Checkpoint("group bins need at least two edges".into()));
        }

        let n = r.u32()?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let params = ModelParams::from_entries(&arch, entries)?;
        Ok(Self {
            model: CatCnn { arch, params },
            bins: GroupBins { edges },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
