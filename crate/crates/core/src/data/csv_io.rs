use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{regularize_yearly, Cohort, Sequence, CLASS_NAMES, FEATURE_NAMES};
use crate::error::{Error, Result};

/// Maps raw diagnosis strings to class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap(pub BTreeMap<String, usize>);

impl Default for LabelMap {
    fn default() -> Self {
        let pairs = [("CN", 0), ("SMC", 0), ("MCI", 1), ("EMCI", 1), ("LMCI", 1), ("AD", 2)];
        Self(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

impl LabelMap {
    pub fn get(&self, raw: &str) -> Option<usize> {
        self.0.get(raw).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    pub min_visits: usize,
    pub label_map: LabelMap,
    /// Keep one visit per 12-month mark.
    pub regularize_yearly: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            min_visits: 3,
            label_map: LabelMap::default(),
            regularize_yearly: false,
        }
    }
}

struct Columns {
    subject: usize,
    months: usize,
    icv: Option<usize>,
    features: Vec<usize>,
    label: usize,
}

fn locate(headers: &csv::StringRecord) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| find(name).ok_or_else(|| Error::Csv(format!("missing required column `{name}`")));
    Ok(Columns {
        subject: need("subject_id")?,
        months: need("months")?,
        icv: find("ICV"),
        features: FEATURE_NAMES.iter().map(|n| need(n)).collect::<Result<_>>()?,
        label: need("label")?,
    })
}

fn parse_cell(raw: &str, line: u64, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    s.parse::<f64>()
        .map_err(|_| Error::Csv(format!("line {line}: column `{column}` has non-numeric value `{s}`")))
}

struct Row {
    months: f64,
    icv: f64,
    features: Vec<f64>,
    label: Option<usize>,
    line: u64,
}

/// Parses a cohort from any reader.
pub fn read_csv(reader: impl Read, opts: &LoadOptions) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let cols = locate(rdr.headers()?)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let subject = field(cols.subject).trim().to_string();
        if subject.is_empty() {
            return Err(Error::Csv(format!("line {line}: empty subject_id")));
        }
        let months = parse_cell(field(cols.months), line, "months")?;
        if !months.is_finite() {
            return Err(Error::Csv(format!("line {line}: missing months")));
        }
        let icv = match cols.icv {
            Some(i) => parse_cell(field(i), line, "ICV")?,
            None => f64::NAN,
        };
        let features = cols
            .features
            .iter()
            .zip(FEATURE_NAMES)
            .map(|(&i, name)| parse_cell(field(i), line, name))
            .collect::<Result<Vec<_>>>()?;
        let raw_label = field(cols.label).trim();
        let label = if raw_label.is_empty() {
            None
        } else {
            Some(
                opts.label_map
                    .get(raw_label)
                    .ok_or_else(|| Error::Csv(format!("line {line}: unknown label `{raw_label}`")))?,
            )
        };
        if !groups.contains_key(&subject) {
            order.push(subject.clone());
        }
        groups.entry(subject).or_default().push(Row {
            months,
            icv,
            features,
            label,
            line,
        });
    }

    let mut sequences = Vec::with_capacity(order.len());
    let mut dropped = 0usize;
    for subject in order {
        let mut rows = groups.remove(&subject).expect("grouped");
        rows.sort_by(|a, b| a.months.total_cmp(&b.months));
        if let Some(w) = rows.windows(2).find(|w| w[0].months == w[1].months) {
            return Err(Error::Csv(format!(
                "line {}: duplicate visit for subject `{subject}` at month {}",
                w[1].line, w[1].months
            )));
        }
        let base = rows[0].months;
        let seq = Sequence::new(
            subject,
            rows.iter().map(|r| r.months - base).collect(),
            &rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>(),
            rows.iter().map(|r| r.label).collect(),
            if cols.icv.is_some() {
                rows.iter().map(|r| r.icv).collect()
            } else {
                Vec::new()
            },
        )?;
        let seq = if opts.regularize_yearly {
            regularize_yearly(&seq)
        } else {
            seq
        };
        if seq.len() < opts.min_visits {
            dropped += 1;
        } else {
            sequences.push(seq);
        }
    }
    if dropped > 0 {
        warn!("excluded {dropped} subject(s) with fewer than {} visits", opts.min_visits);
    }
    Ok(Cohort::new(sequences))
}

pub fn load_csv(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Cohort> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(std::io::BufReader::new(file), opts)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Writes the cohort in the canonical column order. The ICV column is
/// present iff some sequence carries ICV values.
pub fn write_csv_to(writer: impl Write, cohort: &Cohort) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_icv = cohort.has_icv();
    let mut header = vec!["subject_id", "months"];
    if with_icv {
        header.push("ICV");
    }
    header.extend(FEATURE_NAMES);
    header.push("label");
    w.write_record(&header)?;
    for seq in &cohort.sequences {
        for i in 0..seq.len() {
            let mut rec = vec![seq.subject_id.clone(), fmt(seq.times[i])];
            if with_icv {
                rec.push(seq.icv.get(i).map_or(String::new(), |&v| fmt(v)));
            }
            rec.extend(seq.visit(i).iter().map(|&v| fmt(v)));
            rec.push(match seq.labels[i] {
                Some(k) => cohort
                    .class_names
                    .get(k)
                    .cloned()
                    .unwrap_or_else(|| CLASS_NAMES[k].to_string()),
                None => String::new(),
            });
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(std::io::BufWriter::new(file), cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,months,ICV,entorhinal,hippocampus,fusiform,midtemporal,ventricles,wholebrain,mmse,adas11,adas13,label";

    fn row(subject: &str, months: f64, label: &str) -> String {
        format!("{subject},{months},1500000,3600,7000,17000,19000,30000,1000000,28,8,12,{label}")
    }

    #[test]
    fn loads_three_visit_subject() {
        let text = [HEADER.to_string(), row("s1", 12.0, "MCI"), row("s1", 0.0, "CN"), row("s1", 24.0, "")].join("\n");
        let c = read_csv(text.as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(c.len(), 1);
        let s = &c.sequences[0];
        assert_eq!(s.times, vec![0.0, 12.0, 24.0]);
        assert_eq!(s.labels, vec![Some(0), Some(1), None]);
        assert_eq!(s.icv, vec![1.5e6; 3]);
    }

    #[test]
    fn short_subjects_are_excluded() {
        let text = [
            HEADER.to_string(),
            row("a", 0.0, "CN"),
            row("a", 6.0, "CN"),
            row("b", 0.0, "AD"),
            row("b", 6.0, "AD"),
            row("b", 12.0, "AD"),
        ]
        .join("\n");
        let c = read_csv(text.as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.sequences[0].subject_id, "b");
    }

    #[test]
    fn times_are_rebased_to_first_visit() {
        let text = [HEADER.to_string(), row("a", 6.0, ""), row("a", 18.0, ""), row("a", 30.0, "")].join("\n");
        let c = read_csv(text.as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(c.sequences[0].times, vec![0.0, 12.0, 24.0]);
    }

    #[test]
    fn errors_are_reported() {
        let missing = "subject_id,months,entorhinal\na,0,1";
        assert!(read_csv(missing.as_bytes(), &LoadOptions::default())
            .unwrap_err()
            .to_string()
            .contains("hippocampus"));
        let dup = [HEADER.to_string(), row("a", 0.0, ""), row("a", 0.0, ""), row("a", 6.0, "")].join("\n");
        assert!(read_csv(dup.as_bytes(), &LoadOptions::default())
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        let bad = [HEADER.to_string(), row("a", 0.0, "").replace("3600", "abc")].join("\n");
        assert!(read_csv(bad.as_bytes(), &LoadOptions::default())
            .unwrap_err()
            .to_string()
            .contains("entorhinal"));
        let label = [HEADER.to_string(), row("a", 0.0, "XYZ")].join("\n");
        assert!(read_csv(label.as_bytes(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn default_label_grouping() {
        let m = LabelMap::default();
        assert_eq!(m.get("SMC"), Some(0));
        assert_eq!(m.get("EMCI"), Some(1));
        assert_eq!(m.get("LMCI"), Some(1));
        assert_eq!(m.get("AD"), Some(2));
    }

    #[test]
    fn round_trip_preserves_values_and_masks() {
        let text = [
            HEADER.to_string(),
            row("a", 0.0, "CN"),
            "a,6,,3500.25,,17000,19000,30000,1000000,,8,12,".to_string(),
            row("a", 12.0, "MCI"),
        ]
        .join("\n");
        let c = read_csv(text.as_bytes(), &LoadOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &c).unwrap();
        let back = read_csv(buf.as_slice(), &LoadOptions::default()).unwrap();
        assert_eq!(back.sequences[0].mask, c.sequences[0].mask);
        let bits = |s: &Sequence| s.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.sequences[0]), bits(&c.sequences[0]));
        assert_eq!(back.sequences[0].labels, c.sequences[0].labels);
        assert!(back.sequences[0].icv[1].is_nan());
    }
}
