use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{FieldKind, RawRecord, RawTable, RawValue};
use crate::error::{Error, Result};

struct User {
    gender: String,
    age: String,
    occupation: String,
}

/// MovieLens `.dat` files are Latin-1; every byte maps to the code point of the same value.
fn read_latin1(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn split_line<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
    expected: usize,
) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != expected {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: line_no,
            msg: format!(
                "expected {expected} '::'-separated fields, found {}",
                parts.len()
            ),
        });
    }
    Ok(parts)
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Joins `ratings.dat` with `users.dat` and `movies.dat`, one record per rating in file order.
///
/// Columns: `user_id, movie_id, gender, age, occupation, genres, timestamp`.
pub fn parse_movielens(ratings: &Path, users: &Path, movies: &Path) -> Result<RawTable> {
    let mut user_table = HashMap::new();
    let text = read_latin1(users)?;
    for (no, line) in non_blank_lines(&text) {
        let p = split_line(users, no, line, 5)?;
        user_table.insert(
            p[0].to_string(),
            User {
                gender: p[1].to_string(),
                age: p[2].to_string(),
                occupation: p[3].to_string(),
            },
        );
    }

    let mut movie_genres: HashMap<String, Vec<String>> = HashMap::new();
    let text = read_latin1(movies)?;
    for (no, line) in non_blank_lines(&text) {
        let p = split_line(movies, no, line, 3)?;
        let genres = p[2]
            .split('|')
            .filter(|g| !g.is_empty())
            .map(str::to_string)
            .collect();
        movie_genres.insert(p[0].to_string(), genres);
    }

    let text = read_latin1(ratings)?;
    let mut records = Vec::new();
    for (no, line) in non_blank_lines(&text) {
        let p = split_line(ratings, no, line, 4)?;
        let parse_err = |what: &str, v: &str| Error::Parse {
            file: ratings.to_path_buf(),
            line: no,
            msg: format!("invalid {what} {v:?}"),
        };
        let user_id = p[0].trim();
        let movie_id = p[1].trim();
        user_id
            .parse::<u64>()
            .map_err(|_| parse_err("user id", user_id))?;
        movie_id
            .parse::<u64>()
            .map_err(|_| parse_err("movie id", movie_id))?;
        let rating: f64 = p[2]
            .trim()
            .parse::<u8>()
            .map_err(|_| parse_err("rating", p[2]))?
            .into();
        let timestamp: i64 = p[3]
            .trim()
            .parse()
            .map_err(|_| parse_err("timestamp", p[3]))?;

        let user = user_table.get(user_id).ok_or_else(|| {
            Error::Referential(format!(
                "{}:{no}: user {user_id} not found in {}",
                ratings.display(),
                users.display()
            ))
        })?;
        let genres = movie_genres.get(movie_id).ok_or_else(|| {
            Error::Referential(format!(
                "{}:{no}: movie {movie_id} not found in {}",
                ratings.display(),
                movies.display()
            ))
        })?;

        records.push(RawRecord {
            user: user_id.to_string(),
            item: movie_id.to_string(),
            rating,
            timestamp,
            values: vec![
                RawValue::Cat(user_id.to_string()),
                RawValue::Cat(movie_id.to_string()),
                RawValue::Cat(user.gender.clone()),
                RawValue::Cat(user.age.clone()),
                RawValue::Cat(user.occupation.clone()),
                RawValue::Multi(genres.clone()),
                RawValue::Num(timestamp as f64),
            ],
        });
    }

    Ok(RawTable {
        columns: movielens_columns(),
        user_column: Some(0),
        records,
    })
}

pub(crate) fn movielens_columns() -> Vec<(String, FieldKind)> {
    [
        ("user_id", FieldKind::Categorical),
        ("movie_id", FieldKind::Categorical),
        ("gender", FieldKind::Categorical),
        ("age", FieldKind::Categorical),
        ("occupation", FieldKind::Categorical),
        ("genres", FieldKind::MultiCategorical),
        ("timestamp", FieldKind::Continuous),
    ]
    .into_iter()
    .map(|(n, k)| (n.to_string(), k))
    .collect()
}
