//! Versioned binary checkpoints.
//!
//! Layout: magic `PNSB`, `u32` version, one kind byte, the standardizer, the
//! base architecture, then kind-specific networks. A network is a layer count,
//! `(fan_in, fan_out, activation)` per layer and the flat little-endian `f64`
//! values.

use std::io::{Read, Write};

use crate::baselines::{BaselineKind, BaselineModel};
use crate::data::Standardizer;
use crate::enn::HyperModel;
use crate::error::{Error, Result};
use crate::mlp::{Activation, LayerShape, MlpLayout};
use crate::neural::{AnchoredModel, AnchoredParams, Architecture};

const MAGIC: &[u8; 4] = b"PNSB";
pub const VERSION: u32 = 1;

/// Any model the harness can store.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Anchored(AnchoredModel),
    Hyper(HyperModel),
    Baseline(BaselineModel),
}

impl Checkpoint {
    fn kind(&self) -> u8 {
        match self {
            Checkpoint::Anchored(_) => 0,
            Checkpoint::Hyper(_) => 1,
            Checkpoint::Baseline(m) => match m.kind {
                BaselineKind::SLearner => 2,
                BaselineKind::TLearner => 3,
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind() {
            0 => "anchored",
            1 => "anch_enn",
            2 => "s_learner",
            _ => "t_learner",
        }
    }
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.0.write_all(&(v.len() as u64).to_le_bytes())?;
        for x in v {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn arch(&mut self, a: &Architecture) -> Result<()> {
        self.u32(a.input_dim)?;
        self.u32(a.hidden)?;
        self.u32(a.depth)
    }
    fn network(&mut self, layout: &MlpLayout, values: &[f64]) -> Result<()> {
        self.u32(layout.layers().len())?;
        for l in layout.layers() {
            self.u32(l.fan_in)?;
            self.u32(l.fan_out)?;
            self.u8(match l.activation {
                Activation::Identity => 0,
                Activation::Relu => 1,
            })?;
        }
        self.f64s(values)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(self.bytes()?);
        if n > 1 << 32 {
            return Err(Error::Checkpoint(format!("implausible value count {n}")));
        }
        let n = usize::try_from(n)
            .map_err(|_| Error::Checkpoint(format!("value count {n} exceeds this platform")))?;
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
    fn arch(&mut self) -> Result<Architecture> {
        Ok(Architecture::new(self.u32()?, self.u32()?, self.u32()?))
    }
    fn network(&mut self) -> Result<(MlpLayout, Vec<f64>)> {
        let n = self.u32()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let fan_in = self.u32()?;
            let fan_out = self.u32()?;
            let activation = match self.u8()? {
                0 => Activation::Identity,
                1 => Activation::Relu,
                b => return Err(Error::Checkpoint(format!("unknown activation tag {b}"))),
            };
            layers.push(LayerShape {
                fan_in,
                fan_out,
                activation,
            });
        }
        let layout = MlpLayout::new(layers)?;
        let values = self.f64s()?;
        if values.len() != layout.n_params() {
            return Err(Error::Checkpoint(format!(
                "network declares {} parameters but stores {}",
                layout.n_params(),
                values.len()
            )));
        }
        Ok((layout, values))
    }
}

fn outcome_layout(arch: &Architecture, kind: BaselineKind) -> MlpLayout {
    let d = match kind {
        BaselineKind::SLearner => arch.input_dim + 1,
        BaselineKind::TLearner => arch.input_dim,
    };
    Architecture::new(d, arch.hidden, arch.depth).layout_with_outputs(1)
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, writer: W) -> Result<()> {
    let mut w = Writer(writer);
    w.0.write_all(MAGIC)?;
    w.u32(VERSION as usize)?;
    w.u8(ckpt.kind())?;
    let std = match ckpt {
        Checkpoint::Anchored(m) => &m.standardizer,
        Checkpoint::Hyper(h) => &h.standardizer,
        Checkpoint::Baseline(b) => &b.standardizer,
    };
    w.f64s(&std.mean)?;
    w.f64s(&std.scale)?;
    match ckpt {
        Checkpoint::Anchored(m) => {
            w.arch(&m.params.arch)?;
            w.network(&m.params.arch.layout(), &m.params.values)?;
        }
        Checkpoint::Hyper(h) => {
            w.arch(&h.arch)?;
            w.u32(h.index_dim)?;
            w.f64s(&[h.prior_scale])?;
            w.network(&h.generator_layout, &h.generator)?;
            w.network(&h.prior_layout, h.prior())?;
        }
        Checkpoint::Baseline(b) => {
            w.arch(&b.arch)?;
            w.network(&b.arch.layout_with_outputs(4), &b.joint)?;
            w.u32(b.outcome.len())?;
            let layout = outcome_layout(&b.arch, b.kind);
            for net in &b.outcome {
                w.network(&layout, net)?;
            }
        }
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<Checkpoint> {
    let mut r = Reader(reader);
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = r.u8()?;
    let standardizer = Standardizer {
        mean: r.f64s()?,
        scale: r.f64s()?,
    };
    if standardizer.mean.len() != standardizer.scale.len() {
        return Err(Error::Checkpoint("standardizer lengths differ".into()));
    }
    let arch = r.arch()?;
    let check_layout = |found: &MlpLayout, expected: &MlpLayout, what: &str| {
        if found == expected {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{what} layout does not match architecture")))
        }
    };
    match kind {
        0 => {
            let (layout, values) = r.network()?;
            check_layout(&layout, &arch.layout(), "anchored")?;
            Ok(Checkpoint::Anchored(AnchoredModel {
                params: AnchoredParams::from_values(arch, values)?,
                standardizer,
            }))
        }
        1 => {
            let index_dim = r.u32()?;
            let prior_scale = r.f64s()?;
            let prior_scale = *prior_scale
                .first()
                .ok_or_else(|| Error::Checkpoint("missing prior scale".into()))?;
            let (gl, gv) = r.network()?;
            let (pl, pv) = r.network()?;
            Ok(Checkpoint::Hyper(HyperModel::from_parts(
                arch,
                index_dim,
                prior_scale,
                gl,
                gv,
                pl,
                pv,
                standardizer,
            )?))
        }
        2 | 3 => {
            let kind = if kind == 2 {
                BaselineKind::SLearner
            } else {
                BaselineKind::TLearner
            };
            let (jl, joint) = r.network()?;
            check_layout(&jl, &arch.layout_with_outputs(4), "joint")?;
            let n = r.u32()?;
            let expected = if kind == BaselineKind::SLearner { 1 } else { 2 };
            if n != expected {
                return Err(Error::Checkpoint(format!(
                    "expected {expected} outcome networks, found {n}"
                )));
            }
            let layout = outcome_layout(&arch, kind);
            let mut outcome = Vec::with_capacity(n);
            for _ in 0..n {
                let (l, v) = r.network()?;
                check_layout(&l, &layout, "outcome")?;
                outcome.push(v);
            }
            Ok(Checkpoint::Baseline(BaselineModel {
                kind,
                arch,
                standardizer,
                joint,
                outcome,
            }))
        }
        k => Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enn::EnnConfig;

    fn roundtrip(c: &Checkpoint) -> Checkpoint {
        let mut buf = Vec::new();
        write_checkpoint(c, &mut buf).unwrap();
        read_checkpoint(&buf[..]).unwrap()
    }

    #[test]
    fn anchored_roundtrip() {
        let arch = Architecture::new(3, 4, 2);
        let c = Checkpoint::Anchored(AnchoredModel {
            params: AnchoredParams::init(arch, 1),
            standardizer: Standardizer {
                mean: vec![0.1, 0.2, 0.3],
                scale: vec![1.0, 2.0, 3.0],
            },
        });
        assert_eq!(roundtrip(&c), c);
    }

    #[test]
    fn hyper_roundtrip() {
        let cfg = EnnConfig {
            index_dim: 3,
            generator_hidden: 4,
            prior_hidden: 4,
            ..Default::default()
        };
        let h = HyperModel::new(Architecture::new(2, 3, 1), &cfg, 5).unwrap();
        let c = Checkpoint::Hyper(h);
        assert_eq!(roundtrip(&c), c);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(read_checkpoint(&b"NOPE"[..]).is_err());
        let arch = Architecture::new(2, 3, 1);
        let c = Checkpoint::Anchored(AnchoredModel {
            params: AnchoredParams::init(arch, 1),
            standardizer: Standardizer::identity(2),
        });
        let mut buf = Vec::new();
        write_checkpoint(&c, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
