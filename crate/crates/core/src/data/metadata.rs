//! Metadata CSV (`id,class,segmentation`) and scan file discovery.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{load_image, DataError, Organ};

/// `case{N}_day{M}_slice_{K}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SliceId {
    pub case: u32,
    pub day: u32,
    pub slice: u32,
}

impl FromStr for SliceId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed id {s:?}; expected case{{N}}_day{{M}}_slice_{{K}}");
        let rest = s.strip_prefix("case").ok_or_else(bad)?;
        let (case, rest) = rest.split_once("_day").ok_or_else(bad)?;
        let (day, slice) = rest.split_once("_slice_").ok_or_else(bad)?;
        let num = |t: &str| -> Result<u32, String> {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            t.parse().map_err(|_| bad())
        };
        Ok(SliceId {
            case: num(case)?,
            day: num(day)?,
            slice: num(slice)?,
        })
    }
}

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case{}_day{}_slice_{:04}", self.case, self.day, self.slice)
    }
}

/// The three class rows of one slice, merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataEntry {
    pub id: SliceId,
    /// Indexed by [`Organ::index`]; `None` is an empty segmentation cell.
    pub rle: [Option<String>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub id: SliceId,
    pub image_path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub rle: [Option<String>; 3],
}

impl SliceRecord {
    pub fn rle(&self, organ: Organ) -> Option<&str> {
        self.rle[organ.index()].as_deref()
    }

    /// Number of organs with an annotation on this slice (0–3).
    pub fn organ_count(&self) -> usize {
        self.rle.iter().filter(|r| r.is_some()).count()
    }
}

/// Parses the metadata table, merging class rows per slice in order of first
/// appearance.
pub fn read_metadata_table<R: Read>(reader: R) -> Result<Vec<MetadataEntry>, DataError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| DataError::Metadata {
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(DataError::Metadata {
                row: 1,
                reason: format!("missing column {name:?}"),
            })
    };
    let (id_col, class_col, seg_col) = (column("id")?, column("class")?, column("segmentation")?);
    let mut entries: Vec<MetadataEntry> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, row) in csv.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| DataError::Metadata {
            row: line,
            reason: e.to_string(),
        })?;
        let field = |c: usize| row.get(c).unwrap_or("").trim();
        let id: SliceId = field(id_col)
            .parse()
            .map_err(|reason| DataError::Metadata { row: line, reason })?;
        let organ = Organ::from_label(field(class_col)).ok_or_else(|| DataError::Metadata {
            row: line,
            reason: format!("unknown class {:?}", field(class_col)),
        })?;
        let seg = field(seg_col);
        let slot = *index.entry(id).or_insert_with(|| {
            entries.push(MetadataEntry {
                id,
                rle: [None, None, None],
            });
            entries.len() - 1
        });
        if !seg.is_empty() && !seg.eq_ignore_ascii_case("nan") {
            entries[slot].rle[organ.index()] = Some(seg.to_string());
        }
    }
    Ok(entries)
}

/// Reads the metadata CSV and resolves every slice's scan under the CSV's
/// directory (`case{N}/case{N}_day{M}/scans/slice_{K}_...`).
pub fn parse_metadata(csv_path: &Path) -> Result<Vec<SliceRecord>, DataError> {
    let file = fs::File::open(csv_path).map_err(|e| DataError::io(csv_path, e))?;
    let entries = read_metadata_table(file)?;
    let root = csv_path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let (image_path, dims) = locate_image(root, &e.id)?;
            let (width, height) = match dims {
                Some(d) => d,
                None => {
                    let img = load_image(&image_path)?;
                    (img.width, img.height)
                }
            };
            Ok(SliceRecord {
                id: e.id,
                image_path,
                height,
                width,
                rle: e.rle,
            })
        })
        .collect()
}

/// Finds the scan for `id` and, when the filename carries them, its
/// `(width, height)`.
pub fn locate_image(root: &Path, id: &SliceId) -> Result<(PathBuf, Option<(usize, usize)>), DataError> {
    let case = format!("case{}", id.case);
    let day = format!("case{}_day{}", id.case, id.day);
    for base in [root.to_path_buf(), root.join("train")] {
        let scans = base.join(&case).join(&day).join("scans");
        let Ok(listing) = fs::read_dir(&scans) else { continue };
        let mut names: Vec<String> = listing.filter_map(|e| e.ok()?.file_name().into_string().ok()).collect();
        names.sort();
        for name in names {
            let Some((stem, ext)) = name.rsplit_once('.') else {
                continue;
            };
            if !matches!(ext, "png" | "pgm") {
                continue;
            }
            let Some(rest) = stem.strip_prefix("slice_") else {
                continue;
            };
            let parts: Vec<&str> = rest.split('_').collect();
            if parts[0].parse::<u32>().ok() != Some(id.slice) {
                continue;
            }
            let dims = match (
                parts.get(1).and_then(|w| w.parse().ok()),
                parts.get(2).and_then(|h| h.parse().ok()),
            ) {
                (Some(w), Some(h)) if w > 0 && h > 0 => Some((w, h)),
                _ => None,
            };
            return Ok((scans.join(&name), dims));
        }
    }
    Err(DataError::MissingImage(id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_slice_ids() {
        let id: SliceId = "case123_day20_slice_0085".parse().unwrap();
        assert_eq!(
            id,
            SliceId {
                case: 123,
                day: 20,
                slice: 85
            }
        );
        assert_eq!(id.to_string(), "case123_day20_slice_0085");
        for bad in [
            "case_day1_slice_1",
            "case1_day1_slice",
            "case1_dayx_slice_2",
            "cas1_day1_slice_1",
        ] {
            assert!(bad.parse::<SliceId>().is_err(), "{bad}");
        }
    }

    #[test]
    fn merges_class_rows_per_slice() {
        let csv = "id,class,segmentation\n\
            case1_day2_slice_0001,large_bowel,1 3\n\
            case1_day2_slice_0001,small_bowel,\n\
            case1_day2_slice_0001,stomach,10 2\n\
            case1_day2_slice_0002,large_bowel,\n\
            case1_day2_slice_0002,small_bowel,5 5\n\
            case1_day2_slice_0002,stomach,\n";
        let entries = read_metadata_table(csv.as_bytes()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].rle, [Some("1 3".into()), None, Some("10 2".into())]);
        assert_eq!(entries[1].rle, [None, Some("5 5".into()), None]);
    }

    #[test]
    fn reports_row_of_bad_id_and_class() {
        let csv = "id,class,segmentation\ncase1_day2_slice_0001,stomach,\nbogus,stomach,\n";
        let err = read_metadata_table(csv.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        let csv = "id,class,segmentation\ncase1_day2_slice_0001,liver,\n";
        let err = read_metadata_table(csv.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("liver"), "{err}");
    }
}
