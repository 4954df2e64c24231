//! Train and pair manifests.
//!
//! Both are plain CSV: comma separated, no quoting, UTF-8, `\n` or `\r\n`
//! line endings, with a header row naming the columns.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use super::DataError;

/// Identity id to the ordered list of image paths showing that identity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainManifest {
    groups: BTreeMap<u64, Vec<String>>,
}

impl TrainManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_groups(groups: BTreeMap<u64, Vec<String>>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for (id, paths) in &groups {
            if paths.is_empty() {
                return Err(DataError::InvalidManifest(format!("group {id} is empty")));
            }
            for p in paths {
                if !seen.insert(p.as_str()) {
                    return Err(DataError::DuplicatePath(p.clone()));
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &BTreeMap<u64, Vec<String>> {
        &self.groups
    }

    pub fn identity_count(&self) -> usize {
        self.groups.len()
    }

    pub fn image_count(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Smallest id strictly greater than every id in use.
    pub fn next_id(&self) -> u64 {
        self.groups.keys().next_back().map_or(0, |&id| id + 1)
    }

    /// Paths in identity order, then within-group order.
    pub fn paths(&self) -> impl Iterator<Item = (u64, &str)> {
        self.groups
            .iter()
            .flat_map(|(&id, paths)| paths.iter().map(move |p| (id, p.as_str())))
    }

    /// Union with another manifest. Ids and paths must not collide.
    pub fn merged(&self, other: &TrainManifest) -> Result<TrainManifest, DataError> {
        let mut groups = self.groups.clone();
        for (&id, paths) in &other.groups {
            if groups.insert(id, paths.clone()).is_some() {
                return Err(DataError::InvalidManifest(format!(
                    "identity {id} present in both manifests"
                )));
            }
        }
        Self::from_groups(groups)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dog_id,image\n");
        for (id, path) in self.paths() {
            let _ = writeln!(out, "{id},{path}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub image_a: String,
    pub image_b: String,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairManifest {
    pairs: Vec<Pair>,
}

impl PairManifest {
    pub fn new(pairs: Vec<Pair>) -> Result<Self, DataError> {
        let labeled = pairs.iter().filter(|p| p.label.is_some()).count();
        if labeled != 0 && labeled != pairs.len() {
            return Err(DataError::InvalidManifest(
                "labels must be present for all pairs or for none".to_string(),
            ));
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.image_a == p.image_b {
                return Err(DataError::SelfPair {
                    line: i + 2,
                    path: p.image_a.clone(),
                });
            }
            if let Some(l) = p.label {
                if l > 1 {
                    return Err(DataError::BadLabel {
                        line: i + 2,
                        value: l.to_string(),
                    });
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.pairs.first().is_some_and(|p| p.label.is_some())
    }

    pub fn to_csv(&self) -> String {
        let labeled = self.is_labeled();
        let mut out = String::from(if labeled {
            "imageA,imageB,label\n"
        } else {
            "imageA,imageB\n"
        });
        for p in &self.pairs {
            match p.label {
                Some(l) => {
                    let _ = writeln!(out, "{},{},{l}", p.image_a, p.image_b);
                }
                None => {
                    let _ = writeln!(out, "{},{}", p.image_a, p.image_b);
                }
            }
        }
        out
    }
}

/// Splits text into (1-based line number, fields) rows, dropping blank lines.
pub(crate) fn csv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.split('\n').enumerate().filter_map(|(i, line)| {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            None
        } else {
            Some((i + 1, line.split(',').map(str::trim).collect()))
        }
    })
}

/// Position of each named column in the header, or `MissingColumn`.
pub(crate) fn column_indices<const N: usize>(
    header: &[&str],
    names: [&str; N],
) -> Result<[usize; N], DataError> {
    let mut out = [0; N];
    for (slot, name) in out.iter_mut().zip(names) {
        *slot = header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }
    Ok(out)
}

pub(crate) fn field<'a>(row: &[&'a str], idx: usize, line: usize) -> Result<&'a str, DataError> {
    row.get(idx)
        .copied()
        .ok_or_else(|| DataError::InvalidManifest(format!("line {line}: too few fields")))
}

pub fn parse_train_manifest(text: &str) -> Result<TrainManifest, DataError> {
    let mut rows = csv_rows(text);
    let (_, header) = rows
        .next()
        .ok_or_else(|| DataError::MissingColumn("dog_id".to_string()))?;
    let [id_col, image_col] = column_indices(&header, ["dog_id", "image"])?;

    let mut groups: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (line, row) in rows {
        let raw_id = field(&row, id_col, line)?;
        let id: u64 = raw_id.parse().map_err(|_| DataError::NonIntegerId {
            line,
            value: raw_id.to_string(),
        })?;
        let path = field(&row, image_col, line)?;
        if path.is_empty() {
            return Err(DataError::InvalidManifest(format!("line {line}: empty image path")));
        }
        if !seen.insert(path.to_string()) {
            return Err(DataError::DuplicatePath(path.to_string()));
        }
        groups.entry(id).or_default().push(path.to_string());
    }
    Ok(TrainManifest { groups })
}

pub fn parse_pair_manifest(text: &str) -> Result<PairManifest, DataError> {
    let mut rows = csv_rows(text);
    let (_, header) = rows
        .next()
        .ok_or_else(|| DataError::MissingColumn("imageA".to_string()))?;
    let [a_col, b_col] = column_indices(&header, ["imageA", "imageB"])?;
    let label_col = header.iter().position(|h| *h == "label");

    let mut pairs = Vec::new();
    for (line, row) in rows {
        let image_a = field(&row, a_col, line)?.to_string();
        let image_b = field(&row, b_col, line)?.to_string();
        if image_a == image_b {
            return Err(DataError::SelfPair {
                line,
                path: image_a,
            });
        }
        let label = match label_col {
            None => None,
            Some(col) => {
                let raw = row.get(col).copied().unwrap_or("");
                match raw {
                    "0" => Some(0),
                    "1" => Some(1),
                    _ => {
                        return Err(DataError::BadLabel {
                            line,
                            value: raw.to_string(),
                        })
                    }
                }
            }
        };
        pairs.push(Pair {
            image_a,
            image_b,
            label,
        });
    }
    Ok(PairManifest { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_rows_by_id() {
        let m = parse_train_manifest("dog_id,image\n0,a.pgm\n0,b.pgm\n1,c.pgm\n").unwrap();
        assert_eq!(m.groups()[&0], vec!["a.pgm", "b.pgm"]);
        assert_eq!(m.groups()[&1], vec!["c.pgm"]);
        assert_eq!(m.next_id(), 2);
    }

    #[test]
    fn keeps_row_order_within_interleaved_groups() {
        let m = parse_train_manifest("dog_id,image\r\n3,z\r\n1,y\r\n3,a\r\n").unwrap();
        assert_eq!(m.groups()[&3], vec!["z", "a"]);
        assert_eq!(m.groups().keys().copied().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn table_shaped_manifest() {
        let mut text = String::from("dog_id,image\n");
        for id in 0..6000 {
            for k in 0..2 + id % 3 {
                text.push_str(&format!("{id},img_{id}_{k}.jpg\n"));
            }
        }
        let m = parse_train_manifest(&text).unwrap();
        assert_eq!(m.identity_count(), 6000);
        assert_eq!(*m.groups().keys().next_back().unwrap(), 5999);
        assert!(m.groups().values().all(|g| g.len() >= 2));
    }

    #[test]
    fn train_manifest_errors() {
        assert!(matches!(
            parse_train_manifest("id,image\n0,a\n"),
            Err(DataError::MissingColumn(c)) if c == "dog_id"
        ));
        assert!(matches!(
            parse_train_manifest("dog_id,image\nx,a\n"),
            Err(DataError::NonIntegerId { line: 2, .. })
        ));
        assert!(matches!(
            parse_train_manifest("dog_id,image\n-1,a\n"),
            Err(DataError::NonIntegerId { .. })
        ));
        assert!(matches!(
            parse_train_manifest("dog_id,image\n0,a\n1,a\n"),
            Err(DataError::DuplicatePath(p)) if p == "a"
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let m = parse_train_manifest("dog_id,image\n0,a\n0,b\n7,c\n").unwrap();
        assert_eq!(parse_train_manifest(&m.to_csv()).unwrap(), m);
        let p = parse_pair_manifest("imageA,imageB,label\na,b,1\nc,d,0\n").unwrap();
        assert_eq!(parse_pair_manifest(&p.to_csv()).unwrap(), p);
    }

    #[test]
    fn unlabeled_pairs() {
        let p = parse_pair_manifest("imageA,imageB\nx,y\nu,v\n").unwrap();
        assert_eq!(p.len(), 2);
        assert!(!p.is_labeled());
        assert!(p.pairs().iter().all(|q| q.label.is_none()));
    }

    #[test]
    fn balanced_labeled_pairs() {
        let mut text = String::from("imageA,imageB,label\n");
        for i in 0..2000 {
            text.push_str(&format!("a{i},b{i},{}\n", u8::from(i < 1000)));
        }
        let p = parse_pair_manifest(&text).unwrap();
        assert_eq!(p.len(), 2000);
        assert_eq!(p.pairs().iter().filter(|q| q.label == Some(1)).count(), 1000);
    }

    #[test]
    fn pair_manifest_errors() {
        assert!(matches!(
            parse_pair_manifest("imageA,image2\na,b\n"),
            Err(DataError::MissingColumn(c)) if c == "imageB"
        ));
        assert!(matches!(
            parse_pair_manifest("imageA,imageB,label\na,b,2\n"),
            Err(DataError::BadLabel { line: 2, .. })
        ));
        assert!(matches!(
            parse_pair_manifest("imageA,imageB,label\na,b,\n"),
            Err(DataError::BadLabel { .. })
        ));
        assert!(matches!(
            parse_pair_manifest("imageA,imageB\nx.pgm,x.pgm\n"),
            Err(DataError::SelfPair { .. })
        ));
    }

    #[test]
    fn merge_rejects_collisions() {
        let a = parse_train_manifest("dog_id,image\n0,a\n").unwrap();
        let b = parse_train_manifest("dog_id,image\n1,b\n").unwrap();
        assert_eq!(a.merged(&b).unwrap().identity_count(), 2);
        assert!(a.merged(&a).is_err());
        let c = parse_train_manifest("dog_id,image\n5,a\n").unwrap();
        assert!(matches!(a.merged(&c), Err(DataError::DuplicatePath(_))));
    }
}
