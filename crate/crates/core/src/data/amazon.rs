use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{FieldKind, RawRecord, RawTable, RawValue};
use crate::error::{Error, Result};

const NO_CATEGORY: &str = "(none)";

fn categories(obj: &serde_json::Map<String, Value>) -> Vec<String> {
    let mut out = Vec::new();
    // 2018 dumps carry a flat `category` list, 2014 dumps a nested `categories` list.
    for key in ["category", "categories"] {
        let Some(v) = obj.get(key) else { continue };
        let mut stack = vec![v];
        while let Some(v) = stack.pop() {
            match v {
                Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
                Value::Array(items) => stack.extend(items.iter().rev()),
                _ => {}
            }
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    out.retain(|c| seen.insert(c.clone()));
    if out.is_empty() {
        out.push(NO_CATEGORY.to_string());
    }
    out
}

/// Parses newline-delimited JSON review records.
///
/// Each record needs `reviewerID`, `asin`, `overall` and `unixReviewTime`;
/// the product category list becomes a multi-categorical column.
/// Columns: `user_id, item_id, category, timestamp`.
pub fn parse_amazon(reviews: &Path) -> Result<RawTable> {
    let text = fs::read_to_string(reviews)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            file: reviews.to_path_buf(),
            line: no,
            msg,
        };
        let value: Value =
            serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err("record is not a JSON object".into()))?;

        let text_field = |name: &str| -> Result<String> {
            match obj.get(name) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(Value::Number(n)) => Ok(n.to_string()),
                _ => Err(err(format!("missing field `{name}`"))),
            }
        };
        let user = text_field("reviewerID")?;
        let item = text_field("asin")?;
        let rating = obj
            .get("overall")
            .and_then(Value::as_f64)
            .ok_or_else(|| err("missing field `overall`".into()))?;
        let timestamp = obj
            .get("unixReviewTime")
            .and_then(Value::as_i64)
            .ok_or_else(|| err("missing field `unixReviewTime`".into()))?;

        records.push(RawRecord {
            values: vec![
                RawValue::Cat(user.clone()),
                RawValue::Cat(item.clone()),
                RawValue::Multi(categories(obj)),
                RawValue::Num(timestamp as f64),
            ],
            user,
            item,
            rating,
            timestamp,
        });
    }
    Ok(RawTable {
        columns: vec![
            ("user_id".into(), FieldKind::Categorical),
            ("item_id".into(), FieldKind::Categorical),
            ("category".into(), FieldKind::MultiCategorical),
            ("timestamp".into(), FieldKind::Continuous),
        ],
        user_column: Some(0),
        records,
    })
}
