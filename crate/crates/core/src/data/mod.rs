//! Raw interaction tables, the feature schema, encoded examples and splits.

mod amazon;
mod cache;
mod movielens;
pub mod synthetic;

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub use amazon::parse_amazon;
pub use cache::{read_cache, write_cache, DatasetCache, CACHE_MAGIC};
pub use movielens::parse_movielens;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Categorical,
    MultiCategorical,
    Continuous,
}

impl FieldKind {
    fn tag(self) -> u8 {
        match self {
            FieldKind::Categorical => 0,
            FieldKind::MultiCategorical => 1,
            FieldKind::Continuous => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(FieldKind::Categorical),
            1 => Ok(FieldKind::MultiCategorical),
            2 => Ok(FieldKind::Continuous),
            t => Err(Error::format(format!("unknown field kind tag {t}"))),
        }
    }
}

/// One unencoded field value.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Cat(String),
    Multi(Vec<String>),
    Num(f64),
}

/// One parsed interaction before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
    /// One value per column of the owning table, in column order.
    pub values: Vec<RawValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<(String, FieldKind)>,
    /// Column holding the user id, used to condition modality fusion.
    pub user_column: Option<usize>,
    pub records: Vec<RawRecord>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Ratings of 4 and 5 are positives.
pub fn binarize_label(rating: f64) -> Result<u8> {
    if !(1.0..=5.0).contains(&rating) {
        return Err(Error::domain(format!("rating {rating} outside [1, 5]")));
    }
    Ok(u8::from(rating >= 4.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Known values; value `vocab[k]` encodes to index `k + 1`, index 0 is out-of-vocabulary.
    pub vocab: Vec<String>,
    /// Min-max bounds fitted on training rows (continuous fields only).
    pub range: (f64, f64),
}

impl FieldSpec {
    /// Number of embedding rows: vocabulary plus the reserved index.
    pub fn cardinality(&self) -> usize {
        match self.kind {
            FieldKind::Continuous => 1,
            _ => self.vocab.len() + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    pub user_field: Option<usize>,
    lookup: Vec<HashMap<String, usize>>,
}

/// Encoded payload of a single field.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Cat(usize),
    /// Sorted, de-duplicated active indices; never empty.
    Multi(Vec<usize>),
    Num(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub values: Vec<FieldValue>,
    pub label: u8,
    /// Raw item id, used to look up per-item modality features.
    pub item_key: String,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>, user_field: Option<usize>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for f in &fields {
            if !names.insert(f.name.as_str()) {
                return Err(Error::domain(format!("duplicate field name {:?}", f.name)));
            }
        }
        if let Some(u) = user_field {
            if u >= fields.len() || fields[u].kind != FieldKind::Categorical {
                return Err(Error::domain("user field must be a categorical field"));
            }
        }
        let lookup = fields
            .iter()
            .map(|f| {
                f.vocab
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (v.clone(), k + 1))
                    .collect()
            })
            .collect();
        Ok(FeatureSchema {
            fields,
            user_field,
            lookup,
        })
    }

    /// Fits vocabularies and normalization bounds on `records` (training rows only).
    pub fn build(
        columns: &[(String, FieldKind)],
        user_column: Option<usize>,
        records: &[RawRecord],
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::domain("cannot build a schema from an empty table"));
        }
        let mut fields = Vec::with_capacity(columns.len());
        for (c, (name, kind)) in columns.iter().enumerate() {
            let mut spec = FieldSpec {
                name: name.clone(),
                kind: *kind,
                vocab: Vec::new(),
                range: (0.0, 0.0),
            };
            match kind {
                FieldKind::Categorical | FieldKind::MultiCategorical => {
                    let mut seen = BTreeSet::new();
                    for r in records {
                        match &r.values[c] {
                            RawValue::Cat(v) => {
                                seen.insert(v.clone());
                            }
                            RawValue::Multi(vs) => seen.extend(vs.iter().cloned()),
                            RawValue::Num(_) => {
                                return Err(Error::domain(format!(
                                    "column {name} holds a number but is categorical"
                                )))
                            }
                        }
                    }
                    spec.vocab = seen.into_iter().collect();
                }
                FieldKind::Continuous => {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for r in records {
                        match r.values[c] {
                            RawValue::Num(v) => {
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                            _ => {
                                return Err(Error::domain(format!(
                                    "column {name} is continuous but holds a category"
                                )))
                            }
                        }
                    }
                    spec.range = (lo, hi);
                }
            }
            fields.push(spec);
        }
        Self::new(fields, user_column)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn index_of(&self, field: usize, raw: &str) -> usize {
        self.lookup[field].get(raw).copied().unwrap_or(0)
    }

    /// Inverse of categorical encoding; `None` for the reserved index.
    pub fn decode(&self, field: usize, index: usize) -> Option<&str> {
        if index == 0 {
            return None;
        }
        self.fields[field].vocab.get(index - 1).map(String::as_str)
    }

    pub fn encode(&self, record: &RawRecord) -> Result<EncodedExample> {
        if record.values.len() != self.fields.len() {
            return Err(Error::Encoding(format!(
                "record has {} values, schema has {} fields",
                record.values.len(),
                self.fields.len()
            )));
        }
        let values = self
            .fields
            .iter()
            .zip(&record.values)
            .enumerate()
            .map(|(i, (spec, raw))| match (spec.kind, raw) {
                (FieldKind::Categorical, RawValue::Cat(v)) => {
                    Ok(FieldValue::Cat(self.index_of(i, v)))
                }
                (FieldKind::MultiCategorical, RawValue::Multi(vs)) => {
                    let set: BTreeSet<usize> = vs.iter().map(|v| self.index_of(i, v)).collect();
                    if set.is_empty() {
                        Ok(FieldValue::Multi(vec![0]))
                    } else {
                        Ok(FieldValue::Multi(set.into_iter().collect()))
                    }
                }
                (FieldKind::MultiCategorical, RawValue::Cat(v)) => {
                    Ok(FieldValue::Multi(vec![self.index_of(i, v)]))
                }
                (FieldKind::Continuous, RawValue::Num(v)) => {
                    let (lo, hi) = spec.range;
                    let x = if hi > lo {
                        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    Ok(FieldValue::Num(x))
                }
                _ => Err(Error::Encoding(format!(
                    "value {raw:?} does not fit field {} ({:?})",
                    spec.name, spec.kind
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedExample {
            values,
            label: binarize_label(record.rating)?,
            item_key: record.item.clone(),
        })
    }

    /// Checks that an example can be embedded under this schema.
    pub fn validate(&self, example: &EncodedExample) -> Result<()> {
        if example.values.len() != self.fields.len() {
            return Err(Error::Encoding(format!(
                "example has {} fields, schema has {}",
                example.values.len(),
                self.fields.len()
            )));
        }
        for (spec, v) in self.fields.iter().zip(&example.values) {
            let card = spec.cardinality();
            let ok = match (spec.kind, v) {
                (FieldKind::Categorical, FieldValue::Cat(i)) => *i < card,
                (FieldKind::MultiCategorical, FieldValue::Multi(ix)) => {
                    !ix.is_empty() && ix.iter().all(|i| *i < card)
                }
                (FieldKind::Continuous, FieldValue::Num(x)) => x.is_finite(),
                _ => false,
            };
            if !ok {
                return Err(Error::Encoding(format!(
                    "value {v:?} invalid for field {} (cardinality {card})",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn write_to<W: std::io::Write>(&self, enc: &mut Encoder<W>) -> Result<()> {
        enc.len(self.fields.len())?;
        for f in &self.fields {
            enc.str(&f.name)?;
            enc.u8(f.kind.tag())?;
            enc.len(f.vocab.len())?;
            for v in &f.vocab {
                enc.str(v)?;
            }
            enc.f64(f.range.0)?;
            enc.f64(f.range.1)?;
        }
        enc.u64(self.user_field.map_or(u64::MAX, |u| u as u64))
    }

    pub(crate) fn read_from<R: std::io::Read>(dec: &mut Decoder<R>) -> Result<Self> {
        let n = dec.len()?;
        let mut fields = Vec::with_capacity(n);
        for _ in 0..n {
            let name = dec.str()?;
            let kind = FieldKind::from_tag(dec.u8()?)?;
            let nv = dec.len()?;
            let vocab = (0..nv).map(|_| dec.str()).collect::<Result<Vec<_>>>()?;
            let range = (dec.f64()?, dec.f64()?);
            fields.push(FieldSpec {
                name,
                kind,
                vocab,
                range,
            });
        }
        let user = dec.u64()?;
        let user_field = (user != u64::MAX).then_some(user as usize);
        Self::new(fields, user_field).map_err(|e| Error::format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(Vec::new());
        self.write_to(&mut enc)
            .expect("writing to a Vec cannot fail");
        enc.into_inner()
    }

    /// Stable 64-bit fingerprint of the field layout, vocabularies and bounds.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for f in &self.fields {
            let detail = match f.kind {
                FieldKind::Continuous => {
                    format!("continuous, range [{}, {}]", f.range.0, f.range.1)
                }
                FieldKind::Categorical => format!("categorical, cardinality {}", f.cardinality()),
                FieldKind::MultiCategorical => {
                    format!("multi-categorical, cardinality {}", f.cardinality())
                }
            };
            s.push_str(&format!("  {:<12} {}\n", f.name, detail));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::config(format!(
                "split ratios must be positive: {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

impl<T> DatasetSplit<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    pub fn map<U, F>(self, mut f: F) -> Result<DatasetSplit<U>>
    where
        F: FnMut(T) -> Result<U>,
    {
        Ok(DatasetSplit {
            train: self.train.into_iter().map(&mut f).collect::<Result<_>>()?,
            validation: self
                .validation
                .into_iter()
                .map(&mut f)
                .collect::<Result<_>>()?,
            test: self.test.into_iter().map(&mut f).collect::<Result<_>>()?,
            seed: self.seed,
            ratios: self.ratios,
        })
    }
}

/// Seeded uniform permutation followed by a contiguous train/validation/test cut.
pub fn split<T>(items: Vec<T>, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit<T>> {
    ratios.validate()?;
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);

    let n_train = (((n as f64) * ratios.train).round() as usize).min(n);
    let n_val = (((n as f64) * ratios.validation).round() as usize).min(n - n_train);

    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter()
            .map(|&i| slots[i].take().expect("permutation visits each index once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let validation = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
        ratios,
    })
}

/// Splits the raw table, fits the schema on the training part, and encodes all three parts.
pub fn prepare(
    table: RawTable,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(FeatureSchema, DatasetSplit<EncodedExample>)> {
    let RawTable {
        columns,
        user_column,
        records,
    } = table;
    let raw = split(records, ratios, seed)?;
    let schema = FeatureSchema::build(&columns, user_column, &raw.train)?;
    let encoded = raw.map(|r| schema.encode(&r))?;
    Ok((schema, encoded))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, genres: &[&str], ts: f64, rating: f64) -> RawRecord {
        RawRecord {
            user: user.into(),
            item: "m".into(),
            rating,
            timestamp: ts as i64,
            values: vec![
                RawValue::Cat(user.into()),
                RawValue::Multi(genres.iter().map(|g| g.to_string()).collect()),
                RawValue::Num(ts),
            ],
        }
    }

    fn columns() -> Vec<(String, FieldKind)> {
        vec![
            ("user_id".into(), FieldKind::Categorical),
            ("genres".into(), FieldKind::MultiCategorical),
            ("timestamp".into(), FieldKind::Continuous),
        ]
    }

    #[test]
    fn label_threshold() {
        assert_eq!(binarize_label(5.0).unwrap(), 1);
        assert_eq!(binarize_label(4.0).unwrap(), 1);
        assert_eq!(binarize_label(3.0).unwrap(), 0);
        assert_eq!(binarize_label(1.0).unwrap(), 0);
        assert!(matches!(binarize_label(0.0), Err(Error::Domain(_))));
        assert!(matches!(binarize_label(6.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_user_schema_has_reserved_slot() {
        let rows = vec![rec("u1", &["a"], 10.0, 5.0), rec("u1", &["b"], 20.0, 2.0)];
        let schema = FeatureSchema::build(&columns(), Some(0), &rows).unwrap();
        assert_eq!(schema.fields[0].cardinality(), 2);
        assert_eq!(schema.fields[1].cardinality(), 3);
    }

    #[test]
    fn empty_table_is_a_domain_error() {
        assert!(matches!(
            FeatureSchema::build(&columns(), None, &[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn continuous_is_min_max_normalized_and_clamped() {
        let rows = vec![rec("u1", &["a"], 10.0, 5.0), rec("u2", &["b"], 30.0, 2.0)];
        let schema = FeatureSchema::build(&columns(), None, &rows).unwrap();
        let mid = schema.encode(&rec("u1", &["a"], 20.0, 5.0)).unwrap();
        assert_eq!(mid.values[2], FieldValue::Num(0.5));
        let late = schema.encode(&rec("u1", &["a"], 99.0, 5.0)).unwrap();
        assert_eq!(late.values[2], FieldValue::Num(1.0));
        let early = schema.encode(&rec("u1", &["a"], 0.0, 5.0)).unwrap();
        assert_eq!(early.values[2], FieldValue::Num(0.0));
    }

    #[test]
    fn unseen_values_map_to_reserved_index() {
        let rows = vec![rec("u1", &["a", "b"], 1.0, 5.0)];
        let schema = FeatureSchema::build(&columns(), None, &rows).unwrap();
        let ex = schema
            .encode(&rec("stranger", &["a", "zzz"], 1.0, 3.0))
            .unwrap();
        assert_eq!(ex.values[0], FieldValue::Cat(0));
        assert_eq!(ex.values[1], FieldValue::Multi(vec![0, 1]));
        assert_eq!(ex.label, 0);
    }

    #[test]
    fn multi_hot_count_matches_active_values() {
        let rows = vec![rec("u1", &["a", "b", "c", "b"], 1.0, 5.0)];
        let schema = FeatureSchema::build(&columns(), None, &rows).unwrap();
        let ex = schema.encode(&rows[0]).unwrap();
        match &ex.values[1] {
            FieldValue::Multi(ix) => assert_eq!(ix.len(), 3),
            v => panic!("unexpected {v:?}"),
        }
    }

    #[test]
    fn categorical_encoding_round_trips() {
        let rows: Vec<_> = ["x", "y", "z"]
            .iter()
            .map(|u| rec(u, &["g"], 1.0, 4.0))
            .collect();
        let schema = FeatureSchema::build(&columns(), None, &rows).unwrap();
        for r in &rows {
            let ex = schema.encode(r).unwrap();
            let FieldValue::Cat(i) = ex.values[0] else {
                panic!()
            };
            assert_eq!(schema.decode(0, i), Some(r.user.as_str()));
        }
        assert_eq!(schema.decode(0, 0), None);
    }

    #[test]
    fn validate_rejects_out_of_range_indices() {
        let rows = vec![rec("u1", &["a"], 1.0, 5.0)];
        let schema = FeatureSchema::build(&columns(), None, &rows).unwrap();
        let mut ex = schema.encode(&rows[0]).unwrap();
        schema.validate(&ex).unwrap();
        ex.values[0] = FieldValue::Cat(7);
        assert!(matches!(schema.validate(&ex), Err(Error::Encoding(_))));
    }

    #[test]
    fn duplicate_field_names_rejected() {
        let spec = FieldSpec {
            name: "a".into(),
            kind: FieldKind::Categorical,
            vocab: vec![],
            range: (0.0, 0.0),
        };
        assert!(FeatureSchema::new(vec![spec.clone(), spec], None).is_err());
    }

    #[test]
    fn schema_hash_tracks_content() {
        let rows = vec![rec("u1", &["a"], 1.0, 5.0)];
        let a = FeatureSchema::build(&columns(), None, &rows).unwrap();
        let b = FeatureSchema::build(&columns(), None, &rows).unwrap();
        assert_eq!(a.hash(), b.hash());
        let rows2 = vec![rec("u2", &["a"], 1.0, 5.0)];
        let c = FeatureSchema::build(&columns(), None, &rows2).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split((0..10).collect::<Vec<_>>(), SplitRatios::default(), 3).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
        let again = split((0..10).collect::<Vec<_>>(), SplitRatios::default(), 3).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn split_partitions_input() {
        let s = split((0..1000).collect::<Vec<_>>(), SplitRatios::default(), 17).unwrap();
        let mut all: Vec<_> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert!((s.train.len() as i64 - 800).abs() <= 1);
        assert!((s.validation.len() as i64 - 100).abs() <= 1);
    }

    #[test]
    fn different_seeds_give_different_splits() {
        let a = split((0..1000).collect::<Vec<_>>(), SplitRatios::default(), 1).unwrap();
        let b = split((0..1000).collect::<Vec<_>>(), SplitRatios::default(), 2).unwrap();
        assert_ne!(a.test, b.test);
        // Expected overlap of two random 100-subsets of 1000 is 10; identical sets would be 100.
        let overlap = a.test.iter().filter(|x| b.test.contains(x)).count();
        assert!(overlap < 40, "overlap {overlap}");
    }

    #[test]
    fn bad_ratios_are_config_errors() {
        let r = SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.2,
        };
        assert!(matches!(split(vec![1, 2, 3], r, 0), Err(Error::Config(_))));
        let r = SplitRatios {
            train: 1.0,
            validation: 0.0,
            test: 0.0,
        };
        assert!(matches!(split(vec![1, 2, 3], r, 0), Err(Error::Config(_))));
    }

    #[test]
    fn vocabulary_is_fitted_on_train_only() {
        let table = RawTable {
            columns: columns(),
            user_column: Some(0),
            records: (0..50)
                .map(|i| rec(&format!("u{i}"), &["g"], i as f64, 5.0))
                .collect(),
        };
        let (schema, split) = prepare(table, SplitRatios::default(), 4).unwrap();
        assert_eq!(schema.fields[0].vocab.len(), split.train.len());
        for ex in split.test.iter().chain(&split.validation) {
            assert_eq!(ex.values[0], FieldValue::Cat(0));
        }
    }
}
