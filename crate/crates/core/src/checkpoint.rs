//! `QCKP` checkpoint files: a teacher or quantized model together with the
//! provenance needed to reproduce it.
//!
//! Layout after the magic and `u16` version:
//! architecture JSON; config hash `u64`; seed `u64`; stage count `u32` and
//! one string per stage; tensor count `u32` and `(name, tensor)` records;
//! a `u8` flag, and when set the quantizer block: plan JSON, weight
//! quantizer records, then `T`, cluster count and activation records
//! `(layer, cluster, params)`. Quantizer params are `f32` scale, `i32`
//! zero-point, `u8` bits, `u8` signed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::diffusion::unet::{ToyUNet, UNetConfig};
use crate::error::{Error, Result};
use crate::finetune::{QuantPlan, QuantizedModel};
use crate::params::ParamStore;
use crate::quant::{build_cluster_map, FakeQuantizer, QuantParams, WeightQuantizer};

const MAGIC: &[u8; 4] = b"QCKP";
const VERSION: u16 = 1;

/// Stable 64-bit hash of a configuration's canonical text.
pub fn config_hash(canonical: &str) -> u64 {
    crate::rng::fnv1a(canonical.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: u64,
    pub seed: u64,
    /// Commands that produced this checkpoint, oldest first.
    pub stages: Vec<String>,
}

impl Provenance {
    /// Refuses a checkpoint written under a different configuration unless
    /// `allow_mismatch` is set.
    pub fn check(&self, expected_hash: u64, allow_mismatch: bool) -> Result<()> {
        if self.config_hash != expected_hash && !allow_mismatch {
            return Err(Error::ConfigMismatch {
                found: self.config_hash,
                expected: expected_hash,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Teacher {
        model: ToyUNet,
        provenance: Provenance,
    },
    Quantized {
        model: QuantizedModel,
        provenance: Provenance,
    },
}

impl Checkpoint {
    pub fn provenance(&self) -> &Provenance {
        match self {
            Checkpoint::Teacher { provenance, .. } | Checkpoint::Quantized { provenance, .. } => {
                provenance
            }
        }
    }

    /// The full-precision network (the quantized model's latent weights).
    pub fn network(&self) -> &ToyUNet {
        match self {
            Checkpoint::Teacher { model, .. } => model,
            Checkpoint::Quantized { model, .. } => &model.model,
        }
    }
}

fn write_params<W: Write>(w: &mut Writer<W>, p: &QuantParams) -> Result<()> {
    w.f32(p.scale)?;
    w.i32(p.zero_point)?;
    w.u8(p.bits)?;
    w.u8(p.signed as u8)
}

fn read_bool<R: Read>(r: &mut Reader<R>) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Format(format!("flag byte {v}"))),
    }
}

fn read_params<R: Read>(r: &mut Reader<R>) -> Result<QuantParams> {
    let scale = r.f32()?;
    let zero_point = r.i32()?;
    let bits = r.u8()?;
    let signed = read_bool(r)?;
    QuantParams::new(scale, zero_point, bits, signed)
}

fn write_fq<W: Write>(w: &mut Writer<W>, fq: &FakeQuantizer) -> Result<()> {
    write_params(w, &fq.params)?;
    w.u8(fq.scale_learnable as u8)?;
    w.u8(fq.frozen as u8)
}

fn read_fq<R: Read>(r: &mut Reader<R>) -> Result<FakeQuantizer> {
    let params = read_params(r)?;
    Ok(FakeQuantizer {
        params,
        scale_learnable: read_bool(r)?,
        frozen: read_bool(r)?,
    })
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, out: W) -> Result<()> {
    let mut w = Writer::new(out, MAGIC, VERSION)?;
    let net = ckpt.network();
    w.str(&serde_json::to_string(&net.config)?)?;
    let prov = ckpt.provenance();
    w.u64(prov.config_hash)?;
    w.u64(prov.seed)?;
    w.u32(prov.stages.len() as u32)?;
    for s in &prov.stages {
        w.str(s)?;
    }
    w.u32(net.params.len() as u32)?;
    for (name, t) in net.params.iter() {
        w.str(name)?;
        w.tensor(t)?;
    }
    match ckpt {
        Checkpoint::Teacher { .. } => w.u8(0)?,
        Checkpoint::Quantized { model, .. } => {
            w.u8(1)?;
            w.str(&serde_json::to_string(&model.plan)?)?;
            w.u32(model.weights.len() as u32)?;
            for (layer, wq) in &model.weights {
                w.str(layer)?;
                match wq {
                    WeightQuantizer::PerTensor(fq) => {
                        w.u8(0)?;
                        write_fq(&mut w, fq)?;
                    }
                    WeightQuantizer::PerChannel(per) => {
                        w.u8(1)?;
                        w.u32(per.len() as u32)?;
                        for fq in per {
                            write_fq(&mut w, fq)?;
                        }
                    }
                }
            }
            let map = model.acts.map();
            w.u32(map.total_steps() as u32)?;
            w.u32(map.num_clusters() as u32)?;
            w.u32(model.acts.len() as u32)?;
            for (layer, cluster, p) in model.acts.iter() {
                w.str(layer)?;
                w.u32(cluster as u32)?;
                write_params(&mut w, p)?;
            }
        }
    }
    w.finish()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader::new(input, MAGIC, VERSION)?;
    let config: UNetConfig = serde_json::from_str(&r.str()?)?;
    let config_hash = r.u64()?;
    let seed = r.u64()?;
    let stages = (0..r.u32()?).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let provenance = Provenance {
        config_hash,
        seed,
        stages,
    };
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        params.insert(name, r.tensor()?);
    }
    let model = ToyUNet::from_params(config, params)?;
    let ckpt = match read_bool(&mut r)? {
        false => Checkpoint::Teacher { model, provenance },
        true => {
            let plan: QuantPlan = serde_json::from_str(&r.str()?)?;
            let mut weights = BTreeMap::new();
            for _ in 0..r.u32()? {
                let layer = r.str()?;
                let wq = match r.u8()? {
                    0 => WeightQuantizer::PerTensor(read_fq(&mut r)?),
                    1 => WeightQuantizer::PerChannel(
                        (0..r.u32()?)
                            .map(|_| read_fq(&mut r))
                            .collect::<Result<_>>()?,
                    ),
                    v => return Err(Error::Format(format!("weight quantizer kind {v}"))),
                };
                weights.insert(layer, wq);
            }
            let total = r.u32()? as usize;
            let clusters = r.u32()? as usize;
            let mut acts = build_cluster_map(total, clusters)?;
            for _ in 0..r.u32()? {
                let layer = r.str()?;
                let cluster = r.u32()? as usize;
                acts.insert(&layer, cluster, read_params(&mut r)?)?;
            }
            acts.check_total()?;
            let selection = model.selection();
            Checkpoint::Quantized {
                model: QuantizedModel {
                    model,
                    weights,
                    acts,
                    selection,
                    plan,
                },
                provenance,
            }
        }
    };
    r.expect_end()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(ckpt, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn teacher_round_trip_is_bit_exact() {
        let model = ToyUNet::new(UNetConfig::default(), &mut substream(0, "t")).unwrap();
        let prov = Provenance {
            config_hash: 7,
            seed: 3,
            stages: vec!["teacher-train".into()],
        };
        let ckpt = Checkpoint::Teacher {
            model,
            provenance: prov,
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert!(back.network().params.bit_eq(&ckpt.network().params));
        assert_eq!(back.provenance(), ckpt.provenance());
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn bad_magic_version_and_truncation_are_reported() {
        let model = ToyUNet::zeros(UNetConfig::default()).unwrap();
        let ckpt = Checkpoint::Teacher {
            model,
            provenance: Provenance {
                config_hash: 0,
                seed: 0,
                stages: vec![],
            },
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::BadMagic { .. })
        ));
        let mut newer = buf.clone();
        newer[4] = 9;
        assert!(matches!(
            read_checkpoint(newer.as_slice()),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(matches!(
            read_checkpoint(&buf[..buf.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn hash_mismatch_needs_override() {
        let p = Provenance {
            config_hash: config_hash("a"),
            seed: 0,
            stages: vec![],
        };
        assert!(p.check(config_hash("a"), false).is_ok());
        assert!(matches!(
            p.check(config_hash("b"), false),
            Err(Error::ConfigMismatch { .. })
        ));
        assert!(p.check(config_hash("b"), true).is_ok());
    }
}
