//! Synthetic multi-table datasets with planted ground truth.
//!
//! Every entity carries music-like attributes. Clean values are already in
//! the canonical form the built-in rules produce, so corruption that the
//! rules undo leaves coordinated text identical across copies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::{Cluster, Dataset, EntityRef, SourceTable};

pub const COLUMNS: [&str; 12] = [
    "tid", "number", "title", "artist", "composer", "album", "label", "year", "length", "language", "weight",
    "volume",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Corruption {
    /// Per free-text token: one random character edit.
    pub typo_rate: f64,
    /// Per field: g→kg, L→ml, four→two-digit years, ordinal→digits, language→code.
    pub unit_mangle_rate: f64,
    /// Per length field: seconds → m:ss, milliseconds or decimal minutes.
    pub time_format_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_tables: usize,
    pub n_entities: usize,
    pub presence_prob: f64,
    pub corruption: Corruption,
    /// Chance that an entity gets a decoy: a distinct record in a single
    /// table with the same free text and different numeric attributes.
    pub decoy_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_tables: 4,
            n_entities: 100,
            presence_prob: 0.9,
            corruption: Corruption::default(),
            decoy_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tables < 2 {
            return Err(Error::NeedTwoTables { found: self.n_tables });
        }
        let c = &self.corruption;
        for (name, p) in [
            ("presence_prob", self.presence_prob),
            ("typo_rate", c.typo_rate),
            ("unit_mangle_rate", c.unit_mangle_rate),
            ("time_format_rate", c.time_format_rate),
            ("decoy_rate", self.decoy_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

const ONSETS: [&str; 32] = [
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "qu", "r", "s", "t", "v", "w", "x",
    "y", "z", "br", "ch", "cr", "dr", "fl", "gr", "kl", "ph", "sh", "st", "th",
];
const VOWELS: [&str; 12] = ["a", "e", "i", "o", "u", "y", "ai", "ou", "ea", "ie", "oo", "au"];
const CODAS: [&str; 12] = ["", "", "", "n", "r", "s", "l", "m", "k", "x", "nd", "st"];

const LANGUAGES: [(&str, &[&str]); 9] = [
    ("English", &["En", "Eng"]),
    ("French", &["Fr", "Fre"]),
    ("German", &["De", "Ger"]),
    ("Spanish", &["Es", "Spa"]),
    ("Italian", &["Ita"]),
    ("Japanese", &["Ja", "Jpn"]),
    ("Chinese", &["Zh", "Chi"]),
    ("Portuguese", &["Pt", "Por"]),
    ("Russian", &["Ru", "Rus"]),
];

#[derive(Debug, Clone)]
struct Entity {
    number: u32,
    title: Vec<String>,
    artist: Vec<String>,
    composer: Vec<String>,
    album: Vec<String>,
    label: Vec<String>,
    year: u32,
    length_secs: u32,
    language: usize,
    weight_g: u32,
    volume_ml: u32,
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    let mut chars = w.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<String> {
    (0..rng.gen_range(lo..=hi)).map(|_| word(rng)).collect()
}

fn numeric_attributes(rng: &mut ChaCha8Rng, e: &mut Entity) {
    e.number = rng.gen_range(1..=20);
    e.year = rng.gen_range(1960..=2024);
    e.length_secs = rng.gen_range(90..=420);
    e.weight_g = rng.gen_range(5..=400) * 5;
    e.volume_ml = rng.gen_range(1..=50) * 50;
}

fn new_entity(rng: &mut ChaCha8Rng) -> Entity {
    let mut e = Entity {
        number: 0,
        title: words(rng, 3, 5),
        artist: words(rng, 2, 3),
        composer: words(rng, 2, 3),
        album: words(rng, 2, 4),
        label: words(rng, 1, 2),
        year: 0,
        length_secs: 0,
        language: rng.gen_range(0..LANGUAGES.len()),
        weight_g: 0,
        volume_ml: 0,
    };
    numeric_attributes(rng, &mut e);
    e
}

fn ordinal(n: u32) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// `ml / 1000` with trailing zeros trimmed.
fn litres(ml: u32) -> String {
    let s = format!("{}.{:03}", ml / 1000, ml % 1000);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn kilograms(g: u32) -> String {
    litres(g)
}

fn typo(rng: &mut ChaCha8Rng, w: &str) -> String {
    let mut chars: Vec<char> = w.chars().collect();
    let letter = (b'a' + rng.gen_range(0..26u8)) as char;
    let pos = rng.gen_range(0..chars.len());
    match rng.gen_range(0..4) {
        0 => chars[pos] = letter,
        1 if chars.len() > 3 => {
            chars.remove(pos);
        }
        2 if pos + 1 < chars.len() => chars.swap(pos, pos + 1),
        _ => chars.insert(pos, letter),
    }
    chars.into_iter().collect()
}

fn text_field(rng: &mut ChaCha8Rng, tokens: &[String], rate: f64) -> String {
    tokens
        .iter()
        .map(|t| if rng.gen_bool(rate) { typo(rng, t) } else { t.clone() })
        .collect::<Vec<_>>()
        .join(" ")
}

fn render(rng: &mut ChaCha8Rng, e: &Entity, c: &Corruption, tid: String) -> Vec<String> {
    let mangle = |rng: &mut ChaCha8Rng| rng.gen_bool(c.unit_mangle_rate);
    let number = if mangle(rng) { e.number.to_string() } else { ordinal(e.number) };
    let title = text_field(rng, &e.title, c.typo_rate);
    let artist = text_field(rng, &e.artist, c.typo_rate);
    let composer = text_field(rng, &e.composer, c.typo_rate);
    let album = text_field(rng, &e.album, c.typo_rate);
    let label = text_field(rng, &e.label, c.typo_rate);
    let year = if mangle(rng) { format!("{:02}", e.year % 100) } else { e.year.to_string() };
    let length = if rng.gen_bool(c.time_format_rate) {
        match rng.gen_range(0..3) {
            0 => format!("{}:{:02}", e.length_secs / 60, e.length_secs % 60),
            1 => (e.length_secs * 1000).to_string(),
            _ => format!("{:.3}", f64::from(e.length_secs) / 60.0),
        }
    } else {
        format!("{}sec", e.length_secs)
    };
    let (name, codes) = LANGUAGES[e.language];
    let language = if mangle(rng) { codes.choose(rng).unwrap().to_string() } else { name.to_string() };
    let weight = if mangle(rng) { format!("{}kg", kilograms(e.weight_g)) } else { format!("{}g", e.weight_g) };
    let volume = if mangle(rng) { format!("{}ml", e.volume_ml) } else { format!("{}L", litres(e.volume_ml)) };
    vec![tid, number, title, artist, composer, album, label, year, length, language, weight, volume]
}

/// Builds a dataset; ground truth lists every entity present in two or more tables.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entities: Vec<Entity> = (0..spec.n_entities).map(|_| new_entity(&mut rng)).collect();
    let present: Vec<Vec<bool>> = (0..spec.n_tables)
        .map(|_| (0..spec.n_entities).map(|_| rng.gen_bool(spec.presence_prob)).collect())
        .collect();

    // Decoys copy an entity's free text with fresh numbers into one table.
    let mut decoys: Vec<Vec<Entity>> = vec![Vec::new(); spec.n_tables];
    for e in &entities {
        if !rng.gen_bool(spec.decoy_rate) {
            continue;
        }
        let t = rng.gen_range(0..spec.n_tables);
        let mut decoy = e.clone();
        numeric_attributes(&mut rng, &mut decoy);
        decoys[t].push(decoy);
    }

    let mut members: Vec<Vec<EntityRef>> = vec![Vec::new(); spec.n_entities];
    let mut tables = Vec::with_capacity(spec.n_tables);
    for (t, table_decoys) in decoys.iter().enumerate() {
        // Some(id) for planted entities, None for decoys
        let mut slots: Vec<(Option<usize>, &Entity)> = (0..spec.n_entities)
            .filter(|&id| present[t][id])
            .map(|id| (Some(id), &entities[id]))
            .chain(table_decoys.iter().map(|d| (None, d)))
            .collect();
        slots.shuffle(&mut rng);
        let rows: Vec<Vec<String>> = slots
            .iter()
            .enumerate()
            .map(|(row, &(id, e))| {
                if let Some(id) = id {
                    members[id].push(EntityRef::new(t as u32, row as u32));
                }
                let tid = format!("{t}-{:06}", rng.gen_range(0..1_000_000));
                render(&mut rng, e, &spec.corruption, tid)
            })
            .collect();
        let columns = COLUMNS.iter().map(|c| c.to_string()).collect();
        tables.push(SourceTable::new(t as u32, format!("source_{t}"), columns, rows)?);
    }
    let mut truth: Vec<Cluster> = members
        .into_iter()
        .filter(|m| m.len() >= 2)
        .map(Cluster::new)
        .collect();
    truth.sort();
    Dataset::new(tables, Some(truth))
}
