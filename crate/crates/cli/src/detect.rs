//! Guesses a dataset descriptor from a file's first line, with explicit overrides.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nbeval_core::interactions::{ColumnMapping, ColumnRef, DatasetDescriptor};

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct DescriptorArgs {
    pub mapping: Option<String>,
    pub delimiter: Option<String>,
    pub header: Option<bool>,
}

/// Parses `user=0,item=1,timestamp=3`; column names are allowed in place of indices.
pub fn parse_mapping(text: &str) -> Result<ColumnMapping, CliError> {
    let (mut user, mut item, mut timestamp) = (None, None, None);
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("mapping entry {part:?} is not key=column")))?;
        let column: ColumnRef = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad column {value:?}")))?;
        match key.trim() {
            "user" | "user_id" => user = Some(column),
            "item" | "item_id" => item = Some(column),
            "timestamp" | "time" | "ts" => timestamp = Some(column),
            other => return Err(CliError::Usage(format!("unknown mapping key {other:?}"))),
        }
    }
    match (user, item, timestamp) {
        (Some(user), Some(item), Some(timestamp)) => Ok(ColumnMapping { user, item, timestamp }),
        _ => Err(CliError::Usage("mapping needs user, item and timestamp".into())),
    }
}

fn parse_delimiter(text: &str) -> Result<char, CliError> {
    match text {
        "tab" | "\\t" | "\t" => Ok('\t'),
        "comma" => Ok(','),
        "semicolon" => Ok(';'),
        "space" => Ok(' '),
        s if s.chars().count() == 1 => Ok(s.chars().next().unwrap()),
        s => Err(CliError::Usage(format!("delimiter {s:?} must be a single character"))),
    }
}

fn column_value<'a>(fields: &'a [&'a str], header: &[&str], column: &ColumnRef) -> Option<&'a str> {
    match column {
        ColumnRef::Index(i) => fields.get(*i).copied(),
        ColumnRef::Name(n) => header
            .iter()
            .position(|h| h.trim() == n)
            .and_then(|i| fields.get(i).copied()),
    }
}

pub fn resolve(path: &Path, args: &DescriptorArgs) -> Result<DatasetDescriptor, CliError> {
    let file = File::open(path).map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| CliError::Environment(format!("{}: {e}", path.display())))?;
    let first = first.trim_end_matches(['\n', '\r']);

    let delimiter = match &args.delimiter {
        Some(d) => parse_delimiter(d)?,
        None if first.contains('\t') => '\t',
        None if first.contains(',') => ',',
        None if first.contains(';') => ';',
        None => ' ',
    };
    let fields: Vec<&str> = first.split(delimiter).collect();
    let mapping = match &args.mapping {
        Some(m) => parse_mapping(m)?,
        None if fields.len() >= 4 => ColumnMapping::by_index(0, 1, 3),
        None => ColumnMapping::by_index(0, 1, 2),
    };
    let header = args.header.unwrap_or_else(|| {
        if first.trim().is_empty() {
            return false;
        }
        // a first row whose timestamp is not an integer is a header
        let ts = match &mapping.timestamp {
            ColumnRef::Index(i) => fields.get(*i).copied(),
            ColumnRef::Name(_) => return true,
        };
        ts.is_none_or(|v| v.trim().parse::<i64>().is_err())
    });
    if header && !first.trim().is_empty() {
        for column in [&mapping.user, &mapping.item, &mapping.timestamp] {
            if column_value(&fields, &fields, column).is_none() {
                return Err(CliError::Validation(format!("column {column} is not in the header")));
            }
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(DatasetDescriptor {
        name,
        source_uri: path.display().to_string(),
        column_mapping: mapping,
        delimiter,
        header,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn detect(content: &str) -> DatasetDescriptor {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        resolve(f.path(), &DescriptorArgs::default()).unwrap()
    }

    #[test]
    fn movielens_layout() {
        let d = detect("196\t242\t3\t881250949\n");
        assert_eq!(d.delimiter, '\t');
        assert!(!d.header);
        assert_eq!(d.column_mapping, ColumnMapping::by_index(0, 1, 3));
    }

    #[test]
    fn three_columns_with_header() {
        let d = detect("user_id,item_id,timestamp\nu1,i1,5\n");
        assert_eq!(d.delimiter, ',');
        assert!(d.header);
        assert_eq!(d.column_mapping, ColumnMapping::by_index(0, 1, 2));
    }

    #[test]
    fn explicit_mapping() {
        let m = parse_mapping("user=userId,item=1,timestamp=3").unwrap();
        assert_eq!(m.user, ColumnRef::Name("userId".into()));
        assert_eq!(m.timestamp, ColumnRef::Index(3));
        assert!(parse_mapping("user=0,item=1").is_err());
    }
}
