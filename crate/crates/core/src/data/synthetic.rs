//! Seeded MovieLens-shaped tables with a planted preference signal.

use super::movielens::movielens_columns;
use super::{RawRecord, RawTable, RawValue};
use crate::numerics::Rng;

const GENRES: [&str; 6] = ["Action", "Comedy", "Drama", "Horror", "Romance", "Sci-Fi"];

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub rows: usize,
    pub latent_dim: usize,
    /// When set, the label depends only on item parity (even items are liked).
    pub separable: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 60,
            items: 40,
            rows: 1000,
            latent_dim: 3,
            separable: false,
            seed: 1,
        }
    }
}

/// Builds a table with the MovieLens column layout.
pub fn synthetic_table(cfg: &SyntheticConfig) -> RawTable {
    let mut rng = Rng::new(cfg.seed);
    let users: Vec<(Vec<f64>, &str, &str, String)> = (0..cfg.users)
        .map(|_| {
            let latent = (0..cfg.latent_dim).map(|_| rng.normal(1.0)).collect();
            let gender = if rng.below(2) == 0 { "F" } else { "M" };
            let age = ["1", "18", "25", "35", "45", "50", "56"][rng.below(7)];
            (latent, gender, age, rng.below(21).to_string())
        })
        .collect();
    let items: Vec<(Vec<f64>, Vec<String>)> = (0..cfg.items)
        .map(|_| {
            let latent = (0..cfg.latent_dim).map(|_| rng.normal(1.0)).collect();
            let first = rng.below(GENRES.len());
            let mut genres = vec![GENRES[first].to_string()];
            if rng.below(2) == 0 {
                let second = rng.below(GENRES.len());
                if second != first {
                    genres.push(GENRES[second].to_string());
                }
            }
            (latent, genres)
        })
        .collect();

    let records = (0..cfg.rows)
        .map(|_| {
            let u = rng.below(cfg.users);
            let i = rng.below(cfg.items);
            let rating = if cfg.separable {
                if i % 2 == 0 {
                    5.0
                } else {
                    1.0
                }
            } else {
                let affinity: f64 = users[u].0.iter().zip(&items[i].0).map(|(a, b)| a * b).sum();
                let noisy = 3.0 + affinity + rng.normal(0.5);
                noisy.round().clamp(1.0, 5.0)
            };
            let timestamp = 978_300_000 + rng.below(1_000_000) as i64;
            let user = (u + 1).to_string();
            let item = (i + 1).to_string();
            RawRecord {
                values: vec![
                    RawValue::Cat(user.clone()),
                    RawValue::Cat(item.clone()),
                    RawValue::Cat(users[u].1.to_string()),
                    RawValue::Cat(users[u].2.to_string()),
                    RawValue::Cat(users[u].3.clone()),
                    RawValue::Multi(items[i].1.clone()),
                    RawValue::Num(timestamp as f64),
                ],
                user,
                item,
                rating,
                timestamp,
            }
        })
        .collect();

    RawTable {
        columns: movielens_columns(),
        user_column: Some(0),
        records,
    }
}

/// Renders a table in MovieLens `.dat` form: `(ratings, users, movies)`.
pub fn to_movielens_files(table: &RawTable) -> (String, String, String) {
    let mut ratings = String::new();
    let mut users = std::collections::BTreeMap::new();
    let mut movies = std::collections::BTreeMap::new();
    for r in &table.records {
        ratings.push_str(&format!(
            "{}::{}::{}::{}\n",
            r.user, r.item, r.rating as u8, r.timestamp
        ));
        let cat = |k: usize| match &r.values[k] {
            RawValue::Cat(s) => s.clone(),
            _ => String::new(),
        };
        users
            .entry(r.user.parse::<u64>().unwrap_or(0))
            .or_insert_with(|| format!("{}::{}::{}::{}::00000", r.user, cat(2), cat(3), cat(4)));
        if let RawValue::Multi(g) = &r.values[5] {
            movies
                .entry(r.item.parse::<u64>().unwrap_or(0))
                .or_insert_with(|| format!("{}::Movie {} (2000)::{}", r.item, r.item, g.join("|")));
        }
    }
    let join = |m: std::collections::BTreeMap<u64, String>| {
        m.into_values().map(|l| l + "\n").collect::<String>()
    };
    (ratings, join(users), join(movies))
}
