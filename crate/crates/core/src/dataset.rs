//! Interaction log ingestion, cleaning and student-level fold splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default seed for fold shuffling.
pub const DEFAULT_SEED: u64 = 42;

/// Bijection between opaque string identifiers and dense indices.
///
/// Indices are assigned in sorted identifier order so that the mapping only
/// depends on the set of identifiers, not on row order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> Self {
        let set: BTreeSet<String> = ids.into_iter().collect();
        let ids: Vec<String> = set.into_iter().collect();
        let lookup = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self { ids, lookup }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// One graded attempt. Skill and problem are indices into the owning
/// [`Dataset`]'s indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub problem: Option<usize>,
    pub skill: usize,
    pub correct: bool,
    pub order: i64,
}

/// All attempts of one student, sorted by `order`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentLog {
    pub id: String,
    pub records: Vec<InteractionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    /// Students sorted by identifier.
    pub students: Vec<StudentLog>,
    pub skill_index: IdIndex,
    pub problem_index: IdIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub skills: usize,
    pub problems: usize,
    pub students: usize,
    pub records: usize,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<10} {:>10}", "skills", self.skills)?;
        writeln!(f, "{:<10} {:>10}", "problems", self.problems)?;
        writeln!(f, "{:<10} {:>10}", "students", self.students)?;
        write!(f, "{:<10} {:>10}", "records", self.records)
    }
}

impl Dataset {
    pub fn n_skills(&self) -> usize {
        self.skill_index.len()
    }

    pub fn n_problems(&self) -> usize {
        self.problem_index.len()
    }

    pub fn n_records(&self) -> usize {
        self.students.iter().map(|s| s.records.len()).sum()
    }

    /// True when at least one problem identifier is known.
    pub fn has_problem_info(&self) -> bool {
        !self.problem_index.is_empty()
    }

    pub fn summary(&self) -> Summary {
        Summary {
            skills: self.n_skills(),
            problems: self.n_problems(),
            students: self.students.len(),
            records: self.n_records(),
        }
    }

    pub fn student_ids(&self) -> impl Iterator<Item = &str> {
        self.students.iter().map(|s| s.id.as_str())
    }

    pub fn student(&self, id: &str) -> Option<&StudentLog> {
        self.students
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.students[i])
    }

    /// Restricts the dataset to the given students. Skill and problem
    /// indices are kept so artifacts fitted on a subset stay aligned with
    /// the full dataset.
    pub fn subset(&self, students: &BTreeSet<String>) -> Dataset {
        Dataset {
            students: self
                .students
                .iter()
                .filter(|s| students.contains(&s.id))
                .cloned()
                .collect(),
            skill_index: self.skill_index.clone(),
            problem_index: self.problem_index.clone(),
        }
    }

    /// Writes the canonical five-column comma-separated form.
    pub fn write_canonical<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(writer);
        w.write_record(CANONICAL_COLUMNS)?;
        for student in &self.students {
            for r in &student.records {
                let problem = r.problem.map(|p| self.problem_index.id(p)).unwrap_or("");
                let correct = if r.correct { "1" } else { "0" };
                let order = r.order.to_string();
                w.write_record([
                    student.id.as_str(),
                    problem,
                    self.skill_index.id(r.skill),
                    correct,
                    order.as_str(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub const CANONICAL_COLUMNS: [&str; 5] =
    ["student_id", "problem_id", "skill_id", "correct", "order"];

/// Names of the source columns holding each field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub student: String,
    pub problem: Option<String>,
    pub skill: String,
    pub correct: String,
    /// Row position is used when absent.
    pub order: Option<String>,
    /// When set, only rows whose value in this column is `1` are kept
    /// (ASSISTments marks scaffolding rows with `original = 0`).
    pub original: Option<String>,
}

impl ColumnMap {
    pub fn canonical() -> Self {
        Self {
            student: "student_id".into(),
            problem: Some("problem_id".into()),
            skill: "skill_id".into(),
            correct: "correct".into(),
            order: Some("order".into()),
            original: None,
        }
    }

    /// ASSISTments 2009-2010 skill builder.
    pub fn assistments_2009() -> Self {
        Self {
            student: "user_id".into(),
            problem: Some("problem_id".into()),
            skill: "skill_id".into(),
            correct: "correct".into(),
            order: Some("order_id".into()),
            original: Some("original".into()),
        }
    }

    /// ASSISTments 2014-2015 skill builder; carries no problem identifiers.
    pub fn assistments_2014() -> Self {
        Self {
            student: "user_id".into(),
            problem: None,
            skill: "sequence_id".into(),
            correct: "correct".into(),
            order: Some("log_id".into()),
            original: None,
        }
    }

    /// KDD Cup 2010 Algebra I 2005-2006. Composite KC strings are kept as a
    /// single skill identifier.
    pub fn kdd_algebra_2005() -> Self {
        Self {
            student: "Anon Student Id".into(),
            problem: Some("Problem Name".into()),
            skill: "KC(Default)".into(),
            correct: "Correct First Attempt".into(),
            order: Some("Row".into()),
            original: None,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["canonical", "assist2009", "assist2014", "algebra2005"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "canonical" => Ok(Self::canonical()),
            "assist2009" => Ok(Self::assistments_2009()),
            "assist2014" => Ok(Self::assistments_2014()),
            "algebra2005" => Ok(Self::kdd_algebra_2005()),
            _ => Err(Error::UnknownPreset {
                name: name.to_string(),
                available: Self::PRESETS.join(", "),
            }),
        }
    }
}

/// Row-level accounting from [`load_interactions`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub kept: usize,
    pub missing_skill: usize,
    pub not_original: usize,
    pub malformed: usize,
}

fn is_missing(value: &str) -> bool {
    let v = value.trim();
    v.is_empty()
        || v.eq_ignore_ascii_case("na")
        || v.eq_ignore_ascii_case("nan")
        || v.eq_ignore_ascii_case("null")
}

fn parse_binary(value: &str) -> Option<bool> {
    match value.trim() {
        "1" => Some(true),
        "0" => Some(false),
        other => match other.parse::<f64>() {
            Ok(v) if v == 1.0 => Some(true),
            Ok(v) if v == 0.0 => Some(false),
            _ => None,
        },
    }
}

fn detect_delimiter(header: &str) -> u8 {
    let tabs = header.matches('\t').count();
    let commas = header.matches(',').count();
    if tabs > commas {
        b'\t'
    } else {
        b','
    }
}

struct RawRecord {
    problem: Option<String>,
    skill: String,
    correct: bool,
    order: i64,
    row: usize,
}

/// Reads a delimiter-separated interaction log with a header line.
///
/// Rows without a skill are dropped, rows that fail to parse are skipped and
/// counted. Records are grouped per student and sorted by the order column
/// (row position breaks ties).
pub fn load_interactions<R: Read>(
    mut source: R,
    columns: &ColumnMap,
) -> Result<(Dataset, IngestReport)> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let header_line = text.lines().next().unwrap_or("");
    let delimiter = detect_delimiter(header_line);

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let position = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let student_col = position(&columns.student)?;
    let skill_col = position(&columns.skill)?;
    let correct_col = position(&columns.correct)?;
    let problem_col = columns.problem.as_deref().map(position).transpose()?;
    let order_col = columns.order.as_deref().map(position).transpose()?;
    let original_col = columns.original.as_deref().map(position).transpose()?;

    let mut report = IngestReport::default();
    let mut grouped: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
    for (row, result) in reader.records().enumerate() {
        report.rows += 1;
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                log::warn!("row {}: {e}", row + 2);
                report.malformed += 1;
                continue;
            }
        };
        let field = |col: usize| record.get(col);
        let (Some(student), Some(skill), Some(correct)) =
            (field(student_col), field(skill_col), field(correct_col))
        else {
            report.malformed += 1;
            continue;
        };
        if let Some(col) = original_col {
            match field(col).map(str::trim) {
                Some("1") => {}
                Some(_) => {
                    report.not_original += 1;
                    continue;
                }
                None => {
                    report.malformed += 1;
                    continue;
                }
            }
        }
        if is_missing(skill) {
            report.missing_skill += 1;
            continue;
        }
        if is_missing(student) {
            report.malformed += 1;
            continue;
        }
        let Some(correct) = parse_binary(correct) else {
            report.malformed += 1;
            continue;
        };
        let order = match order_col {
            Some(col) => match field(col).and_then(|v| v.trim().parse::<i64>().ok()) {
                Some(o) => o,
                None => {
                    report.malformed += 1;
                    continue;
                }
            },
            None => row as i64,
        };
        let problem = problem_col
            .and_then(field)
            .filter(|p| !is_missing(p))
            .map(|p| p.trim().to_string());
        report.kept += 1;
        grouped
            .entry(student.trim().to_string())
            .or_default()
            .push(RawRecord {
                problem,
                skill: skill.trim().to_string(),
                correct,
                order,
                row,
            });
    }
    if report.malformed > 0 {
        log::warn!("skipped {} malformed rows", report.malformed);
    }
    Ok((build(grouped), report))
}

fn build(mut grouped: BTreeMap<String, Vec<RawRecord>>) -> Dataset {
    let skill_index = IdIndex::from_ids(grouped.values().flatten().map(|r| r.skill.clone()));
    let problem_index =
        IdIndex::from_ids(grouped.values().flatten().filter_map(|r| r.problem.clone()));
    let students = std::mem::take(&mut grouped)
        .into_iter()
        .map(|(id, mut raw)| {
            raw.sort_by_key(|r| (r.order, r.row));
            let records = raw
                .iter()
                .map(|r| InteractionRecord {
                    problem: r.problem.as_deref().and_then(|p| problem_index.get(p)),
                    skill: skill_index.get(&r.skill).expect("indexed above"),
                    correct: r.correct,
                    order: r.order,
                })
                .collect();
            StudentLog { id, records }
        })
        .collect();
    Dataset {
        students,
        skill_index,
        problem_index,
    }
}

/// Keeps the first attempt per (student, problem), removes duplicate rows
/// (same order within a student) and, when the dataset carries problem
/// information, drops records without a problem. Skill and problem indices
/// are compacted to the identifiers that survive.
pub fn clean(raw: &Dataset) -> Dataset {
    let require_problem = raw.has_problem_info();
    let mut grouped: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
    for student in &raw.students {
        let mut seen_problems = HashSet::new();
        let mut seen_orders = HashSet::new();
        let mut kept = Vec::new();
        for (row, r) in student.records.iter().enumerate() {
            if require_problem && r.problem.is_none() {
                continue;
            }
            if !seen_orders.insert(r.order) {
                continue;
            }
            if let Some(p) = r.problem {
                if !seen_problems.insert(p) {
                    continue;
                }
            }
            kept.push(RawRecord {
                problem: r.problem.map(|p| raw.problem_index.id(p).to_string()),
                skill: raw.skill_index.id(r.skill).to_string(),
                correct: r.correct,
                order: r.order,
                row,
            });
        }
        if !kept.is_empty() {
            grouped.insert(student.id.clone(), kept);
        }
    }
    build(grouped)
}

/// One student-level cross-validation split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_students: BTreeSet<String>,
    pub test_students: BTreeSet<String>,
}

/// Shuffles students with a seeded RNG and partitions them into `k` test
/// folds whose sizes differ by at most one.
pub fn split_folds(data: &Dataset, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "k must be at least 2, got {k}"
        )));
    }
    let n = data.students.len();
    if n < k {
        return Err(Error::TooFewStudents {
            needed: k,
            found: n,
        });
    }
    let mut ids: Vec<&str> = data.student_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold_id in 0..k {
        let size = base + usize::from(fold_id < extra);
        let test: BTreeSet<String> = ids[start..start + size]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let train = ids
            .iter()
            .filter(|s| !test.contains(**s))
            .map(|s| s.to_string())
            .collect();
        folds.push(FoldSplit {
            fold_id,
            train_students: train,
            test_students: test,
        });
        start += size;
    }
    Ok(folds)
}
