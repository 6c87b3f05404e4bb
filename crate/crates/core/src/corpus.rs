//! Corpus files, statistics and out-of-vocabulary analysis.
//!
//! Files are UTF-8 comma-separated values with a header row naming the
//! columns `index,district,contents` and, for training data, `ipa`.
//! Fields may be double-quoted with `""` escapes; quoted fields can hold
//! commas and newlines. LF and CRLF line endings are both accepted.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub index: i64,
    pub district: String,
    pub contents: String,
    pub ipa: Option<String>,
}

impl Example {
    pub fn new(index: i64, district: &str, contents: &str, ipa: Option<&str>) -> Self {
        Example {
            index,
            district: district.to_string(),
            contents: contents.to_string(),
            ipa: ipa.map(str::to_string),
        }
    }
}

struct Table {
    columns: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

fn read_table<R: Read>(reader: R, path: &Path, required: &[&str]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let columns: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim_start_matches('\u{feff}').trim().to_string(), i))
        .collect();
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|c| !columns.contains_key(*c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: format!("missing column(s) {}", missing.join(", ")),
        });
    }
    let mut rows = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        rows.push((n as u64 + 1, record));
    }
    Ok(Table { columns, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.record());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            message: format!("{kind:?}"),
        },
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Parses examples from any reader; `path` is only used in error messages.
pub fn parse_corpus<R: Read>(reader: R, path: &Path, expect_targets: bool) -> Result<Vec<Example>> {
    let mut required = vec!["index", "district", "contents"];
    if expect_targets {
        required.push("ipa");
    }
    let table = read_table(reader, path, &required)?;
    let col = |name: &str| table.columns.get(name).copied();
    let (ci, cd, cc, cipa) = (
        col("index").unwrap(),
        col("district").unwrap(),
        col("contents").unwrap(),
        col("ipa"),
    );
    let bad = |row: u64, message: String| Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        message,
    };

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (row, rec) in &table.rows {
        let row = *row;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let index: i64 = field(ci)
            .trim()
            .parse()
            .map_err(|_| bad(row, format!("index {:?} is not an integer", field(ci))))?;
        if !seen.insert(index) {
            return Err(bad(row, format!("duplicate index {index}")));
        }
        let district = field(cd).trim();
        if district.is_empty() {
            return Err(bad(row, "empty district".into()));
        }
        let contents = field(cc);
        if contents.is_empty() {
            return Err(bad(row, "empty contents".into()));
        }
        let ipa = cipa.map(|c| field(c).to_string());
        if expect_targets && ipa.as_deref().is_none_or(str::is_empty) {
            return Err(bad(row, "missing ipa target".into()));
        }
        out.push(Example {
            index,
            district: district.to_string(),
            contents: contents.to_string(),
            ipa,
        });
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, expect_targets: bool) -> Result<Vec<Example>> {
    let path = path.as_ref();
    parse_corpus(open(path)?, path, expect_targets)
}

/// Reads an `index,ipa` prediction file.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<(i64, String)>> {
    let path = path.as_ref();
    let table = read_table(open(path)?, path, &["index", "ipa"])?;
    let (ci, cipa) = (table.columns["index"], table.columns["ipa"]);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (row, rec) in &table.rows {
        let raw = rec.get(ci).unwrap_or("");
        let index: i64 = raw.trim().parse().map_err(|_| Error::MalformedRow {
            path: path.to_path_buf(),
            row: *row,
            message: format!("index {raw:?} is not an integer"),
        })?;
        if !seen.insert(index) {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row: *row,
                message: format!("duplicate index {index}"),
            });
        }
        out.push((index, rec.get(cipa).unwrap_or("").to_string()));
    }
    Ok(out)
}

fn write_csv<W: Write>(
    writer: W,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()
}

pub fn write_predictions(path: impl AsRef<Path>, rows: &[(i64, String)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(
        file,
        &["index", "ipa"],
        rows.iter().map(|(i, ipa)| vec![i.to_string(), ipa.clone()]),
    )
    .map_err(|e| Error::io(path, e))
}

/// Writes examples in the corpus schema; the `ipa` column is emitted when
/// `with_targets` is set.
pub fn write_corpus(
    path: impl AsRef<Path>,
    examples: &[Example],
    with_targets: bool,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let header: &[&str] = if with_targets {
        &["index", "district", "contents", "ipa"]
    } else {
        &["index", "district", "contents"]
    };
    write_csv(
        file,
        header,
        examples.iter().map(|e| {
            let mut row = vec![e.index.to_string(), e.district.clone(), e.contents.clone()];
            if with_targets {
                row.push(e.ipa.clone().unwrap_or_default());
            }
            row
        }),
    )
    .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub max: usize,
    pub min: usize,
    pub mean: f64,
    pub median: f64,
}

impl LengthStats {
    /// Statistics of a nonempty list of lengths. The median of an even count
    /// is the mean of the two middle values.
    pub fn from_lengths(lengths: &[usize]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        Some(LengthStats {
            max: sorted[n - 1],
            min: sorted[0],
            mean: sorted.iter().sum::<usize>() as f64 / n as f64,
            median,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub lengths: LengthStats,
    pub unique_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub rows: usize,
    pub contents: ColumnStats,
    pub ipa: Option<ColumnStats>,
    pub test: Option<TestStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestStats {
    pub rows: usize,
    pub contents: ColumnStats,
    /// Test word types that never occur in the training contents.
    pub oov_count: usize,
    /// `oov_count / contents.unique_words`, in `[0, 1]`.
    pub oov_rate: f64,
}

fn word_types<'a>(texts: impl Iterator<Item = &'a str>) -> HashSet<&'a str> {
    texts.flat_map(str::split_whitespace).collect()
}

fn column_stats<'a>(texts: impl Iterator<Item = &'a str> + Clone) -> Option<ColumnStats> {
    let lengths: Vec<usize> = texts.clone().map(|t| t.chars().count()).collect();
    Some(ColumnStats {
        lengths: LengthStats::from_lengths(&lengths)?,
        unique_words: word_types(texts).len(),
    })
}

/// Length statistics in codepoints, word-type counts, and OOV analysis of
/// the test contents against the training contents.
pub fn compute_stats(train: &[Example], test: Option<&[Example]>) -> Result<CorpusStats> {
    let contents = column_stats(train.iter().map(|e| e.contents.as_str()))
        .ok_or_else(|| Error::contract("statistics need a nonempty training corpus"))?;
    let ipa = if train.iter().all(|e| e.ipa.is_some()) {
        column_stats(train.iter().filter_map(|e| e.ipa.as_deref()))
    } else {
        None
    };
    let test = match test {
        Some(rows) if !rows.is_empty() => {
            let train_words = word_types(train.iter().map(|e| e.contents.as_str()));
            let test_words = word_types(rows.iter().map(|e| e.contents.as_str()));
            let oov_count = test_words.difference(&train_words).count();
            let test_contents =
                column_stats(rows.iter().map(|e| e.contents.as_str())).expect("rows is nonempty");
            let oov_rate = if test_words.is_empty() {
                0.0
            } else {
                oov_count as f64 / test_words.len() as f64
            };
            Some(TestStats {
                rows: rows.len(),
                contents: test_contents,
                oov_count,
                oov_rate,
            })
        }
        _ => None,
    };
    Ok(CorpusStats {
        rows: train.len(),
        contents,
        ipa,
        test,
    })
}

/// Source/target id pairs: the source carries the district token in front
/// of the content bytes, the target is the bare IPA bytes.
pub fn attach_dgt(
    examples: &[Example],
    vocab: &Vocabulary,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    examples
        .iter()
        .map(|e| {
            let ipa = e
                .ipa
                .as_deref()
                .ok_or_else(|| Error::contract(format!("example {} has no ipa target", e.index)))?;
            Ok((
                vocab.encode(&e.contents, Some(&e.district))?,
                vocab.encode(ipa, None)?,
            ))
        })
        .collect()
}

/// District labels in order of first appearance.
pub fn districts_of(examples: &[Example]) -> Vec<String> {
    let mut seen = HashSet::new();
    examples
        .iter()
        .filter(|e| seen.insert(e.district.as_str()))
        .map(|e| e.district.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn parse(text: &str, expect: bool) -> Result<Vec<Example>> {
        parse_corpus(text.as_bytes(), &PathBuf::from("mem.csv"), expect)
    }

    #[test]
    fn three_rows() {
        let rows = parse(
            "index,district,contents,ipa\n0,d1,ka,kʰa\n1,d2,ka,xa\n2,d1,ta,ta\n",
            true,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1], Example::new(1, "d2", "ka", Some("xa")));
    }

    #[test]
    fn quoted_fields() {
        let text = "index,district,contents,ipa\r\n7,d1,\"a, b\",\"say \"\"hi\"\"\nthere\"\r\n";
        let rows = parse(text, true).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].contents, "a, b");
        assert_eq!(rows[0].ipa.as_deref(), Some("say \"hi\"\nthere"));
    }

    #[test]
    fn schema_errors() {
        let err = parse("index,district,contents\n0,d1,ka\n", true).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
        let err = parse("index,contents,ipa\n0,ka,ka\n", false).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
        // Test files need no ipa column.
        let rows = parse("index,district,contents\n0,d1,ka\n", false).unwrap();
        assert_eq!(rows[0].ipa, None);
    }

    #[test]
    fn malformed_rows_report_row_numbers() {
        let err = parse(
            "index,district,contents,ipa\n0,d1,ka,ka\nx,d1,ka,ka\n",
            true,
        )
        .unwrap_err();
        match err {
            Error::MalformedRow { row, .. } => assert_eq!(row, 2),
            e => panic!("{e}"),
        }
        let err = parse("index,district,contents,ipa\n0,d1,ka,ka\n1,d1,ka\n", true).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { .. }), "{err}");
        let err = parse(
            "index,district,contents,ipa\n0,d1,ka,ka\n0,d1,ka,ka\n",
            true,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }));
        let err = parse("index,district,contents,ipa\n0,d1,ka,\n", true).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
        let err = parse("index,district,contents,ipa\n0,,ka,ka\n", true).unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let rows = vec![
            Example::new(3, "d1", "আমি, তুমি", Some("ami, tumi")),
            Example::new(4, "d2", "line\nbreak", Some("\"q\"")),
        ];
        write_corpus(&path, &rows, true).unwrap();
        assert_eq!(load_corpus(&path, true).unwrap(), rows);

        let preds = vec![(3, "ami".to_string()), (4, "x, y".to_string())];
        let p = dir.path().join("p.csv");
        write_predictions(&p, &preds).unwrap();
        assert_eq!(load_predictions(&p).unwrap(), preds);

        assert!(matches!(
            load_corpus(dir.path().join("missing.csv"), true),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn stats_arithmetic() {
        let train = vec![
            Example::new(0, "d", "abc", None),
            Example::new(1, "d", "a", None),
        ];
        let s = compute_stats(&train, None).unwrap();
        assert_eq!(
            s.contents.lengths,
            LengthStats {
                max: 3,
                min: 1,
                mean: 2.0,
                median: 2.0
            }
        );
        assert!(s.ipa.is_none());
        assert!(compute_stats(&[], None).is_err());
    }

    #[test]
    fn lengths_count_codepoints() {
        let train = vec![Example::new(0, "d", "আ", Some("a"))];
        let s = compute_stats(&train, None).unwrap();
        assert_eq!(s.contents.lengths.max, 1);
    }

    #[test]
    fn oov_uses_word_types() {
        let train = vec![Example::new(0, "d", "a b c a", None)];
        let test = vec![
            Example::new(0, "d", "b c d e", None),
            Example::new(1, "d", "d d", None),
        ];
        let s = compute_stats(&train, Some(&test)).unwrap();
        let t = s.test.unwrap();
        assert_eq!(t.contents.unique_words, 4);
        assert_eq!(t.oov_count, 2);
        assert_eq!(t.oov_rate, 0.5);
        assert_eq!(s.contents.unique_words, 3);

        let covered = vec![Example::new(0, "d", "a c", None)];
        assert_eq!(
            compute_stats(&train, Some(&covered))
                .unwrap()
                .test
                .unwrap()
                .oov_rate,
            0.0
        );
    }

    #[test]
    fn stats_ignore_row_order() {
        let mut rows: Vec<Example> = (0..9)
            .map(|i| {
                Example::new(
                    i,
                    "d",
                    &"xy ".repeat(i as usize + 1),
                    Some(&"z".repeat(2 * i as usize + 1)),
                )
            })
            .collect();
        let a = compute_stats(&rows, Some(&rows[..3])).unwrap();
        rows.reverse();
        let b = compute_stats(&rows, Some(&rows[6..])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dgt_on_source_only() {
        let vocab = Vocabulary::with_districts(["d1"]).unwrap();
        let rows = vec![Example::new(0, "d1", "AB", Some("ab"))];
        let pairs = attach_dgt(&rows, &vocab).unwrap();
        assert_eq!(pairs[0].0, vec![259, 68, 69, 1]);
        assert_eq!(pairs[0].1, vocab.encode("ab", None).unwrap());
        assert_eq!(
            &pairs[0].0[1..],
            vocab.encode("AB", None).unwrap().as_slice()
        );
        assert!(!vocab.is_district_id(pairs[0].1[0]));

        let unknown = vec![Example::new(0, "d9", "AB", Some("ab"))];
        assert!(matches!(
            attach_dgt(&unknown, &vocab),
            Err(Error::UnknownDistrict(_))
        ));
    }

    #[test]
    fn districts_in_first_seen_order() {
        let rows = vec![
            Example::new(0, "b", "x", None),
            Example::new(1, "a", "x", None),
            Example::new(2, "b", "x", None),
        ];
        assert_eq!(districts_of(&rows), vec!["b".to_string(), "a".to_string()]);
    }
}
