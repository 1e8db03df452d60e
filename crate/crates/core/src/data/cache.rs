//! Encoded dataset cache.
//!
//! Layout (little-endian): magic `AREC1`, format version `u32`, the schema
//! block (length-prefixed), the schema hash `u64`, split seed and ratios,
//! then the train, validation and test example sections.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetSplit, EncodedExample, FeatureSchema, FieldValue, SplitRatios};
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 5] = b"AREC1";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCache {
    pub schema: FeatureSchema,
    pub split: DatasetSplit<EncodedExample>,
}

fn write_examples<W: Write>(enc: &mut Encoder<W>, examples: &[EncodedExample]) -> Result<()> {
    enc.len(examples.len())?;
    for ex in examples {
        enc.u8(ex.label)?;
        enc.str(&ex.item_key)?;
        for v in &ex.values {
            match v {
                FieldValue::Cat(i) => {
                    enc.u8(0)?;
                    enc.len(*i)?;
                }
                FieldValue::Multi(ix) => {
                    enc.u8(1)?;
                    enc.len(ix.len())?;
                    for i in ix {
                        enc.len(*i)?;
                    }
                }
                FieldValue::Num(x) => {
                    enc.u8(2)?;
                    enc.f64(*x)?;
                }
            }
        }
    }
    Ok(())
}

fn read_examples<R: Read>(
    dec: &mut Decoder<R>,
    schema: &FeatureSchema,
) -> Result<Vec<EncodedExample>> {
    let n = dec.len()?;
    let mut out = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let label = dec.u8()?;
        let item_key = dec.str()?;
        let mut values = Vec::with_capacity(schema.len());
        for _ in 0..schema.len() {
            let v = match dec.u8()? {
                0 => FieldValue::Cat(dec.len()?),
                1 => {
                    let q = dec.len()?;
                    FieldValue::Multi((0..q).map(|_| dec.len()).collect::<Result<_>>()?)
                }
                2 => FieldValue::Num(dec.f64()?),
                t => return Err(Error::format(format!("unknown value tag {t}"))),
            };
            values.push(v);
        }
        let ex = EncodedExample {
            values,
            label,
            item_key,
        };
        schema
            .validate(&ex)
            .map_err(|e| Error::format(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_cache(path: &Path, cache: &DatasetCache) -> Result<()> {
    let mut enc = Encoder::new(BufWriter::new(File::create(path)?));
    enc.raw(CACHE_MAGIC)?;
    enc.u32(CACHE_VERSION)?;
    enc.bytes(&cache.schema.to_bytes())?;
    enc.u64(cache.schema.hash())?;
    let s = &cache.split;
    enc.u64(s.seed)?;
    enc.f64(s.ratios.train)?;
    enc.f64(s.ratios.validation)?;
    enc.f64(s.ratios.test)?;
    write_examples(&mut enc, &s.train)?;
    write_examples(&mut enc, &s.validation)?;
    write_examples(&mut enc, &s.test)?;
    enc.into_inner().flush()?;
    Ok(())
}

/// Loads a cache; when `expected_schema` is given the stored schema must hash to it.
pub fn read_cache(path: &Path, expected_schema: Option<u64>) -> Result<DatasetCache> {
    let mut dec = Decoder::new(BufReader::new(File::open(path)?));
    dec.expect_magic(CACHE_MAGIC)?;
    let version = dec.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::format(format!(
            "unsupported cache version {version}"
        )));
    }
    let block = dec.bytes()?;
    let schema = FeatureSchema::read_from(&mut Decoder::new(block.as_slice()))?;
    let stored = dec.u64()?;
    if stored != schema.hash() {
        return Err(Error::SchemaMismatch {
            expected: stored,
            found: schema.hash(),
        });
    }
    if let Some(expected) = expected_schema {
        if expected != stored {
            return Err(Error::SchemaMismatch {
                expected,
                found: stored,
            });
        }
    }
    let seed = dec.u64()?;
    let ratios = SplitRatios {
        train: dec.f64()?,
        validation: dec.f64()?,
        test: dec.f64()?,
    };
    let train = read_examples(&mut dec, &schema)?;
    let validation = read_examples(&mut dec, &schema)?;
    let test = read_examples(&mut dec, &schema)?;
    Ok(DatasetCache {
        schema,
        split: DatasetSplit {
            train,
            validation,
            test,
            seed,
            ratios,
        },
    })
}
