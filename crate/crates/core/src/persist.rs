//! Binary checkpoints: parameters, optimizer moments, RNG position and best-epoch metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Rng, RngState, Tensor};
use crate::training::{Adam, BestSnapshot, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARECKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema_hash: u64,
    pub config: TrainConfig,
    pub modality_dim: Option<usize>,
    pub state: TrainState,
}

fn write_tensors<W: Write>(enc: &mut Encoder<W>, tensors: &[&Tensor]) -> Result<()> {
    enc.len(tensors.len())?;
    tensors.iter().try_for_each(|t| enc.tensor(t))
}

fn read_tensors<R: Read>(
    dec: &mut Decoder<R>,
    like: &[&Tensor],
    what: &str,
) -> Result<Vec<Tensor>> {
    let n = dec.len()?;
    if n != like.len() {
        return Err(Error::format(format!(
            "{what}: checkpoint has {n} tensors, model has {}",
            like.len()
        )));
    }
    like.iter()
        .enumerate()
        .map(|(k, expected)| {
            let t = dec.tensor()?;
            if t.shape() != expected.shape() {
                return Err(Error::format(format!(
                    "{what}: tensor {k} has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            Ok(t)
        })
        .collect()
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut enc = Encoder::new(out);
        enc.raw(CHECKPOINT_MAGIC)?;
        enc.u32(CHECKPOINT_VERSION)?;
        enc.u64(self.schema_hash)?;
        enc.str(&self.config.to_text())?;
        match self.modality_dim {
            Some(d) => {
                enc.u8(1)?;
                enc.len(d)?;
            }
            None => enc.u8(0)?,
        }
        let s = &self.state;
        enc.len(s.epoch)?;
        match &s.best {
            Some(b) => {
                enc.u8(1)?;
                enc.len(b.epoch)?;
                enc.u8(u8::from(b.val_auc.is_some()))?;
                enc.f64(b.val_auc.unwrap_or(f64::NAN))?;
                enc.f64(b.val_logloss)?;
            }
            None => enc.u8(0)?,
        }
        let rng = s.rng.state();
        enc.raw(&rng.seed)?;
        enc.u64(rng.stream)?;
        enc.u128(rng.word_pos)?;
        write_tensors(&mut enc, &s.model.tensors())?;
        write_tensors(&mut enc, &s.adam.m.iter().collect::<Vec<_>>())?;
        write_tensors(&mut enc, &s.adam.v.iter().collect::<Vec<_>>())?;
        enc.u64(s.adam.step)?;
        Ok(enc.into_inner())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.write(Vec::new())
    }

    /// Reads a checkpoint written for `schema`; a different schema is a [`Error::SchemaMismatch`].
    pub fn read<R: Read>(input: R, schema: &FeatureSchema) -> Result<Self> {
        let mut dec = Decoder::new(input);
        dec.expect_magic(CHECKPOINT_MAGIC)?;
        let version = dec.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let schema_hash = dec.u64()?;
        if schema_hash != schema.hash() {
            return Err(Error::SchemaMismatch {
                expected: schema.hash(),
                found: schema_hash,
            });
        }
        let config = TrainConfig::parse(&dec.str()?)?;
        let modality_dim = match dec.u8()? {
            0 => None,
            1 => Some(dec.len()?),
            t => return Err(Error::format(format!("bad modality flag {t}"))),
        };
        let epoch = dec.len()?;
        let best_meta = match dec.u8()? {
            0 => None,
            1 => {
                let e = dec.len()?;
                let has_auc = dec.u8()? == 1;
                let auc = dec.f64()?;
                let logloss = dec.f64()?;
                Some((e, has_auc.then_some(auc), logloss))
            }
            t => return Err(Error::format(format!("bad best-epoch flag {t}"))),
        };
        let mut seed = [0u8; 32];
        dec.raw(&mut seed)?;
        let rng = Rng::from_state(RngState {
            seed,
            stream: dec.u64()?,
            word_pos: dec.u128()?,
        });

        // Shapes come from a freshly built skeleton; its values are overwritten.
        let mut model = Model::new(
            &config.model_config(),
            schema,
            modality_dim,
            &mut Rng::new(0),
        )?;
        let params = read_tensors(&mut dec, &model.tensors(), "parameters")?;
        for (dst, src) in model.tensors_mut().into_iter().zip(params) {
            *dst = src;
        }
        let m = read_tensors(&mut dec, &model.tensors(), "first moments")?;
        let v = read_tensors(&mut dec, &model.tensors(), "second moments")?;
        let step = dec.u64()?;
        let best = best_meta.map(|(epoch, val_auc, val_logloss)| BestSnapshot {
            epoch,
            val_auc,
            val_logloss,
            model: model.clone(),
        });
        Ok(Checkpoint {
            schema_hash,
            config,
            modality_dim,
            state: TrainState {
                model,
                adam: Adam { m, v, step },
                epoch,
                best,
                rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = self.write(BufWriter::new(File::create(path)?))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, schema: &FeatureSchema) -> Result<Self> {
        Checkpoint::read(BufReader::new(File::open(path)?), schema)
    }
}
