//! Synthetic attribute-membership micro-world used as an offline teacher.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{make_summary_label, TeacherError};
use crate::corpus::{Choice, QuestionRecord, ReasoningTrace, TraceSource};

const ATTRIBUTE_POOL: &[(&str, &str)] = &[
    ("fluffy", "Fluffy things are covered in soft fur."),
    ("metallic", "Metallic things are made of metal."),
    ("edible", "Edible things can be eaten safely."),
    ("buoyant", "Buoyant things float on water."),
    ("luminous", "Luminous things give off their own light."),
    ("fragile", "Fragile things break easily."),
    ("venomous", "Venomous things can inject poison."),
    ("nocturnal", "Nocturnal things are active at night."),
    ("aquatic", "Aquatic things live in water."),
    ("magnetic", "Magnetic things attract iron."),
    ("fragrant", "Fragrant things have a pleasant smell."),
    ("hollow", "Hollow things have an empty space inside."),
    ("flammable", "Flammable things catch fire easily."),
    ("elastic", "Elastic things return to shape after stretching."),
    ("transparent", "Transparent things let light pass through."),
    ("migratory", "Migratory things travel with the seasons."),
    ("spiky", "Spiky things are covered in sharp points."),
    ("sticky", "Sticky things cling to surfaces."),
    ("frozen", "Frozen things are turned to ice by cold."),
    ("heavy", "Heavy things weigh a great deal."),
    ("ancient", "Ancient things are very old."),
    ("striped", "Striped things have bands of colour."),
    ("carnivorous", "Carnivorous things eat meat."),
    ("musical", "Musical things make pleasant sounds."),
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

const QUESTION_TEMPLATE: &str = "Which one is {}?";
const MEMBERSHIP_RATE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    /// Indices into [`MicroWorld::attributes`].
    pub attributes: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroWorld {
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub attributes: Vec<Attribute>,
    pub templates: Vec<String>,
}

impl MicroWorld {
    fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    fn entity(&self, name: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.name == name)
    }

    /// Parses `Which one is <attribute>?` back to an attribute index.
    pub fn queried_attribute(&self, stem: &str) -> Option<usize> {
        let (prefix, suffix) = QUESTION_TEMPLATE.split_once("{}")?;
        let name = stem.strip_prefix(prefix)?.strip_suffix(suffix)?;
        self.attribute_index(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<QuestionRecord>,
    pub validation: Vec<QuestionRecord>,
    pub test: Vec<QuestionRecord>,
}

fn entity_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}")))
        .collect();
    syllables.shuffle(rng);
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name = format!(
            "{}{}",
            syllables.choose(rng).expect("syllables"),
            syllables.choose(rng).expect("syllables")
        );
        if names.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Generates a world and `n_questions` records. Entity count is twice the
/// attribute count; every question has exactly one satisfying option.
pub fn gen_microworld(
    seed: u64,
    n_questions: usize,
    n_options: usize,
    n_attributes: usize,
) -> Result<(MicroWorld, Vec<QuestionRecord>), TeacherError> {
    if !(2..=26).contains(&n_options) {
        return Err(TeacherError::InfeasibleWorld(format!(
            "{n_options} options, expected 2..=26"
        )));
    }
    if n_attributes < n_options {
        return Err(TeacherError::InfeasibleWorld(format!(
            "{n_attributes} attributes is fewer than {n_options} options"
        )));
    }
    if n_attributes > ATTRIBUTE_POOL.len() {
        return Err(TeacherError::InfeasibleWorld(format!(
            "at most {} attributes are available",
            ATTRIBUTE_POOL.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..ATTRIBUTE_POOL.len()).collect();
    pool.shuffle(&mut rng);
    pool.truncate(n_attributes);
    pool.sort_unstable();
    let attributes: Vec<Attribute> = pool
        .iter()
        .map(|&i| Attribute {
            name: ATTRIBUTE_POOL[i].0.to_string(),
            definition: ATTRIBUTE_POOL[i].1.to_string(),
        })
        .collect();

    let n_entities = 2 * n_attributes;
    let mut entities: Vec<Entity> = entity_names(&mut rng, n_entities)
        .into_iter()
        .map(|name| Entity {
            name,
            attributes: BTreeSet::new(),
        })
        .collect();
    for entity in &mut entities {
        for a in 0..n_attributes {
            if rng.random_bool(MEMBERSHIP_RATE) {
                entity.attributes.insert(a);
            }
        }
    }
    // every attribute needs at least one holder and n_options - 1 non-holders
    for a in 0..n_attributes {
        let holders: Vec<usize> = (0..n_entities)
            .filter(|&e| entities[e].attributes.contains(&a))
            .collect();
        if holders.is_empty() {
            let e = rng.random_range(0..n_entities);
            entities[e].attributes.insert(a);
        } else {
            let mut excess = holders.len() as isize - (n_entities - (n_options - 1)) as isize;
            let mut holders = holders;
            holders.shuffle(&mut rng);
            while excess > 0 {
                let e = holders.pop().expect("holder");
                entities[e].attributes.remove(&a);
                excess -= 1;
            }
        }
    }

    let world = MicroWorld {
        seed,
        entities,
        attributes,
        templates: vec![QUESTION_TEMPLATE.to_string()],
    };

    let mut records = Vec::with_capacity(n_questions);
    for i in 0..n_questions {
        let a = rng.random_range(0..n_attributes);
        let (holders, others): (Vec<&Entity>, Vec<&Entity>) =
            world.entities.iter().partition(|e| e.attributes.contains(&a));
        let gold_entity = holders.choose(&mut rng).expect("attribute has a holder");
        let mut options: Vec<&Entity> = others.choose_multiple(&mut rng, n_options - 1).copied().collect();
        let gold_pos = rng.random_range(0..n_options);
        options.insert(gold_pos, gold_entity);
        let record = QuestionRecord {
            id: format!("mw{seed}-{i:05}"),
            stem: QUESTION_TEMPLATE.replace("{}", &world.attributes[a].name),
            options: options
                .iter()
                .zip('A'..='Z')
                .map(|(e, label)| Choice {
                    label,
                    text: e.name.clone(),
                })
                .collect(),
            gold: (b'A' + gold_pos as u8) as char,
        };
        records.push(record);
    }
    Ok((world, records))
}

fn id_hash(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

/// 80/10/10 split by the SHA-256 of each record id.
pub fn split_by_hash(records: &[QuestionRecord]) -> Splits {
    let mut ranked: Vec<(&QuestionRecord, [u8; 32])> = records.iter().map(|r| (r, id_hash(&r.id))).collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.id.cmp(&b.0.id)));
    let n = ranked.len();
    let (train_end, val_end) = (n * 8 / 10, n * 9 / 10);
    let mut splits = Splits::default();
    for (i, (r, _)) in ranked.into_iter().enumerate() {
        let bucket = if i < train_end {
            &mut splits.train
        } else if i < val_end {
            &mut splits.validation
        } else {
            &mut splits.test
        };
        bucket.push(r.clone());
    }
    splits
}

pub fn specific_text(label: char, entity: &str, attribute: &str, holds: bool) -> String {
    if holds {
        format!("{label} is correct. Because {entity} is {attribute}.")
    } else {
        format!("{label} is incorrect. Because {entity} is not {attribute}.")
    }
}

/// The oracle trace for a record generated from `world`.
pub fn synth_trace(world: &MicroWorld, record: &QuestionRecord) -> Result<ReasoningTrace, TeacherError> {
    let foreign = |why: &str| TeacherError::ForeignRecord(format!("{}: {why}", record.id));
    let a = world
        .queried_attribute(&record.stem)
        .ok_or_else(|| foreign("unknown attribute"))?;
    let attribute = &world.attributes[a];
    let mut specifics = BTreeMap::new();
    for choice in &record.options {
        let entity = world.entity(&choice.text).ok_or_else(|| foreign("unknown entity"))?;
        let holds = entity.attributes.contains(&a);
        if holds != (choice.label == record.gold) {
            return Err(foreign("gold disagrees with the world"));
        }
        specifics.insert(
            choice.label,
            specific_text(choice.label, &entity.name, &attribute.name, holds),
        );
    }
    Ok(ReasoningTrace {
        question_id: record.id.clone(),
        general: attribute.definition.clone(),
        specifics,
        summary: make_summary_label(record),
        source: TraceSource::SyntheticOracle,
    })
}
