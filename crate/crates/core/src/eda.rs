//! Dataset statistics: how many organs each slice carries, how often each
//! class is annotated, mask areas, and raw-intensity ratios per image.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_image, rle_area, DataError, GrayImage16, Organ, SliceId, SliceRecord};
use crate::svg;

/// Thresholds for the `ratio_larger` columns. Comparison is strict.
pub const INTENSITY_THRESHOLDS: [u16; 4] = [10, 20, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityMetrics {
    /// Mean of the raw 16-bit values.
    pub avg: f64,
    pub ratio_nonzero: f64,
    /// Fraction of pixels `> τ` for each τ in [`INTENSITY_THRESHOLDS`].
    pub ratio_larger: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    /// Slices with 0, 1, 2 and 3 annotated organs.
    pub organ_count_hist: [usize; 4],
    /// Slices on which each class is annotated.
    pub class_presence: [usize; 3],
    /// Mask pixel areas per class, in record order.
    pub area_samples: [Vec<(SliceId, usize)>; 3],
    pub intensity: Vec<(SliceId, IntensityMetrics)>,
}

pub fn organ_count_distribution(records: &[SliceRecord]) -> [usize; 4] {
    let mut hist = [0; 4];
    for r in records {
        hist[r.organ_count()] += 1;
    }
    hist
}

pub fn class_presence(records: &[SliceRecord]) -> [usize; 3] {
    let mut counts = [0; 3];
    for r in records {
        for o in Organ::ALL {
            counts[o.index()] += usize::from(r.rle(o).is_some());
        }
    }
    counts
}

/// Area of every present mask, as the sum of its run lengths.
pub fn mask_area_distribution(records: &[SliceRecord]) -> Result<[Vec<(SliceId, usize)>; 3], DataError> {
    let mut areas: [Vec<(SliceId, usize)>; 3] = Default::default();
    for r in records {
        for o in Organ::ALL {
            if let Some(rle) = r.rle(o) {
                let a = rle_area(rle, r.height * r.width).map_err(|e| DataError::Rle {
                    id: r.id.to_string(),
                    organ: o,
                    source: e,
                })?;
                areas[o.index()].push((r.id, a));
            }
        }
    }
    Ok(areas)
}

pub fn intensity_metrics(image: &GrayImage16) -> Result<IntensityMetrics, DataError> {
    let px = &image.pixels;
    if px.is_empty() {
        return Err(DataError::Invalid("empty image".into()));
    }
    let n = px.len() as f64;
    let frac = |t: u16| px.iter().filter(|&&v| v > t).count() as f64 / n;
    Ok(IntensityMetrics {
        avg: px.iter().map(|&v| f64::from(v)).sum::<f64>() / n,
        ratio_nonzero: frac(0),
        ratio_larger: INTENSITY_THRESHOLDS.map(frac),
    })
}

/// Reads every image once and gathers all statistics.
pub fn collect_stats(records: &[SliceRecord]) -> Result<DatasetStats, DataError> {
    let intensity = records
        .iter()
        .map(|r| Ok((r.id, intensity_metrics(&load_image(&r.image_path)?)?)))
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(DatasetStats {
        organ_count_hist: organ_count_distribution(records),
        class_presence: class_presence(records),
        area_samples: mask_area_distribution(records)?,
        intensity,
    })
}

pub const ORGAN_HIST_HEADER: &str = "organs,slices";
pub const CLASS_PRESENCE_HEADER: &str = "class,masks";
pub const MASK_AREAS_HEADER: &str = "id,class,area";
pub const INTENSITY_HEADER: &str =
    "id,avg_intensity,ratio_nonzero,ratio_larger10,ratio_larger20,ratio_larger50,ratio_larger100";

fn csvs(stats: &DatasetStats) -> [(&'static str, String); 4] {
    let mut hist = format!("{ORGAN_HIST_HEADER}\n");
    for (k, n) in stats.organ_count_hist.iter().enumerate() {
        let _ = writeln!(hist, "{k},{n}");
    }
    let mut presence = format!("{CLASS_PRESENCE_HEADER}\n");
    for o in Organ::ALL {
        let _ = writeln!(presence, "{o},{}", stats.class_presence[o.index()]);
    }
    let mut areas = format!("{MASK_AREAS_HEADER}\n");
    for o in Organ::ALL {
        for (id, a) in &stats.area_samples[o.index()] {
            let _ = writeln!(areas, "{id},{o},{a}");
        }
    }
    let mut intensity = format!("{INTENSITY_HEADER}\n");
    for (id, m) in &stats.intensity {
        let _ = write!(intensity, "{id},{},{}", m.avg, m.ratio_nonzero);
        for r in m.ratio_larger {
            let _ = write!(intensity, ",{r}");
        }
        intensity.push('\n');
    }
    [
        ("organ_hist.csv", hist),
        ("class_presence.csv", presence),
        ("mask_areas.csv", areas),
        ("intensity.csv", intensity),
    ]
}

fn charts(stats: &DatasetStats) -> [(&'static str, String); 4] {
    let hist: Vec<(String, f64)> = stats
        .organ_count_hist
        .iter()
        .enumerate()
        .map(|(k, &n)| (format!("{k} organs"), n as f64))
        .collect();
    let presence: Vec<(String, f64)> = Organ::ALL
        .iter()
        .map(|o| (o.to_string(), stats.class_presence[o.index()] as f64))
        .collect();
    let areas: Vec<(String, Vec<f64>)> = Organ::ALL
        .iter()
        .map(|o| {
            (
                o.to_string(),
                stats.area_samples[o.index()].iter().map(|a| a.1 as f64).collect(),
            )
        })
        .collect();
    let col = |f: &dyn Fn(&IntensityMetrics) -> f64| stats.intensity.iter().map(|(_, m)| f(m)).collect::<Vec<_>>();
    let mut ratios = vec![("nonzero".to_string(), col(&|m| m.ratio_nonzero))];
    for (i, t) in INTENSITY_THRESHOLDS.iter().enumerate() {
        ratios.push((format!("larger{t}"), col(&|m| m.ratio_larger[i])));
    }
    [
        ("organ_hist.svg", svg::bar_chart("Organs per slice", "slices", &hist)),
        (
            "class_presence.svg",
            svg::bar_chart("Annotated masks per class", "masks", &presence),
        ),
        (
            "mask_areas.svg",
            svg::box_chart("Mask area per class", "pixels", &areas),
        ),
        (
            "intensity.svg",
            svg::box_chart("Pixel ratios per image", "fraction of pixels", &ratios),
        ),
    ]
}

/// Writes the four CSVs and their SVG charts; returns the paths written.
pub fn emit_report(stats: &DatasetStats, out: &Path) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    let mut written = Vec::new();
    for (name, text) in csvs(stats).into_iter().chain(charts(stats)) {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(slice: u32, rles: [Option<&str>; 3]) -> SliceRecord {
        SliceRecord {
            id: SliceId { case: 1, day: 1, slice },
            image_path: PathBuf::from("unused"),
            height: 4,
            width: 4,
            rle: rles.map(|r| r.map(String::from)),
        }
    }

    #[test]
    fn organ_histogram_counts_present_rles() {
        let recs = [
            record(1, [None, None, None]),
            record(2, [Some("1 1"), None, None]),
            record(3, [None, None, Some("2 3")]),
            record(4, [Some("1 1"), Some("3 2"), None]),
            record(5, [Some("1 1"), Some("3 2"), Some("9 4")]),
        ];
        assert_eq!(organ_count_distribution(&recs), [1, 2, 1, 1]);
        assert_eq!(class_presence(&recs), [3, 2, 2]);
        let areas = mask_area_distribution(&recs).unwrap();
        assert_eq!(areas[2].iter().map(|a| a.1).collect::<Vec<_>>(), vec![3, 4]);
        assert!(mask_area_distribution(&[record(6, [Some("1"), None, None])]).is_err());
    }

    #[test]
    fn hand_counted_intensity_ratios() {
        let img = GrayImage16::new(2, 2, vec![0, 10, 50, 100]).unwrap();
        let m = intensity_metrics(&img).unwrap();
        assert_eq!(m.avg, 40.0);
        assert_eq!(m.ratio_nonzero, 0.75);
        assert_eq!(m.ratio_larger, [0.5, 0.5, 0.25, 0.0]);
        let elevens = GrayImage16::new(1, 3, vec![11; 3]).unwrap();
        let m = intensity_metrics(&elevens).unwrap();
        assert_eq!((m.ratio_larger[0], m.ratio_larger[1]), (1.0, 0.0));
        let zeros = intensity_metrics(&GrayImage16::new(2, 2, vec![0; 4]).unwrap()).unwrap();
        assert_eq!(
            (zeros.avg, zeros.ratio_nonzero, zeros.ratio_larger),
            (0.0, 0.0, [0.0; 4])
        );
    }
}
