//! Loading, imputing and splitting the facial keypoints training table.
//!
//! The on-disk format is the Kaggle one: a header row, one `<slot>_x` /
//! `<slot>_y` column pair per keypoint, and a final `Image` column holding
//! the row-major pixels as space separated integers. An empty cell marks a
//! missing coordinate.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Provenance, TargetMatrix};
use crate::rng::SplitMix64;

/// Side length of the face images in the Kaggle dataset.
pub const IMAGE_SIDE: usize = 96;
pub const IMAGE_COLUMN: &str = "Image";

/// The fifteen facial landmarks, in CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keypoint {
    LeftEyeCenter,
    RightEyeCenter,
    LeftEyeInnerCorner,
    LeftEyeOuterCorner,
    RightEyeInnerCorner,
    RightEyeOuterCorner,
    LeftEyebrowInnerEnd,
    LeftEyebrowOuterEnd,
    RightEyebrowInnerEnd,
    RightEyebrowOuterEnd,
    NoseTip,
    MouthLeftCorner,
    MouthRightCorner,
    MouthCenterTopLip,
    MouthCenterBottomLip,
}

impl Keypoint {
    pub const COUNT: usize = 15;

    pub const ALL: [Keypoint; Self::COUNT] = [
        Keypoint::LeftEyeCenter,
        Keypoint::RightEyeCenter,
        Keypoint::LeftEyeInnerCorner,
        Keypoint::LeftEyeOuterCorner,
        Keypoint::RightEyeInnerCorner,
        Keypoint::RightEyeOuterCorner,
        Keypoint::LeftEyebrowInnerEnd,
        Keypoint::LeftEyebrowOuterEnd,
        Keypoint::RightEyebrowInnerEnd,
        Keypoint::RightEyebrowOuterEnd,
        Keypoint::NoseTip,
        Keypoint::MouthLeftCorner,
        Keypoint::MouthRightCorner,
        Keypoint::MouthCenterTopLip,
        Keypoint::MouthCenterBottomLip,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::LeftEyeCenter => "left_eye_center",
            Keypoint::RightEyeCenter => "right_eye_center",
            Keypoint::LeftEyeInnerCorner => "left_eye_inner_corner",
            Keypoint::LeftEyeOuterCorner => "left_eye_outer_corner",
            Keypoint::RightEyeInnerCorner => "right_eye_inner_corner",
            Keypoint::RightEyeOuterCorner => "right_eye_outer_corner",
            Keypoint::LeftEyebrowInnerEnd => "left_eyebrow_inner_end",
            Keypoint::LeftEyebrowOuterEnd => "left_eyebrow_outer_end",
            Keypoint::RightEyebrowInnerEnd => "right_eyebrow_inner_end",
            Keypoint::RightEyebrowOuterEnd => "right_eyebrow_outer_end",
            Keypoint::NoseTip => "nose_tip",
            Keypoint::MouthLeftCorner => "mouth_left_corner",
            Keypoint::MouthRightCorner => "mouth_right_corner",
            Keypoint::MouthCenterTopLip => "mouth_center_top_lip",
            Keypoint::MouthCenterBottomLip => "mouth_center_bottom_lip",
        }
    }

    pub fn from_name(name: &str) -> Option<Keypoint> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Eyes and eyebrows, as opposed to nose and mouth.
    pub fn is_eye_region(self) -> bool {
        self.index() <= Keypoint::RightEyebrowOuterEnd.index()
    }
}

impl fmt::Display for Keypoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                format!("{} pixels ({width}x{height})", width * height),
                format!("{} pixels", pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Pixel lookup with edge replication for out-of-range coordinates.
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Fifteen optional landmark positions, indexed by [`Keypoint`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KeypointSet {
    slots: [Option<Point>; Keypoint::COUNT],
}

impl KeypointSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, kp: Keypoint) -> Option<Point> {
        self.slots[kp.index()]
    }

    pub fn set(&mut self, kp: Keypoint, value: Option<Point>) {
        self.slots[kp.index()] = value;
    }

    pub fn with(mut self, kp: Keypoint, x: f64, y: f64) -> Self {
        self.set(kp, Some(Point::new(x, y)));
        self
    }

    pub fn present(&self) -> impl Iterator<Item = (Keypoint, Point)> + '_ {
        Keypoint::ALL
            .into_iter()
            .filter_map(|k| self.get(k).map(|p| (k, p)))
    }

    pub fn has_all(&self, slots: &[Keypoint]) -> bool {
        slots.iter().all(|&k| self.get(k).is_some())
    }

    /// Copy keeping only the listed slots.
    pub fn restricted_to(&self, slots: &[Keypoint]) -> Self {
        let mut out = Self::empty();
        for &k in slots {
            out.set(k, self.get(k));
        }
        out
    }
}

/// Which group of keypoints a dataset targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    All15,
    Four,
    Eleven,
}

impl Task {
    pub fn keypoint_count(self) -> usize {
        match self {
            Task::All15 => 15,
            Task::Four => 4,
            Task::Eleven => 11,
        }
    }

    pub fn output_count(self) -> usize {
        2 * self.keypoint_count()
    }

    fn from_slot_count(n: usize) -> Result<Self> {
        match n {
            15 => Ok(Task::All15),
            4 => Ok(Task::Four),
            11 => Ok(Task::Eleven),
            _ => Err(Error::invalid(format!(
                "{n} keypoint columns do not match any task (expected 4, 11 or 15)"
            ))),
        }
    }

    /// File-name suffix used for derived CSVs (`keypoint_4f.csv`, ...).
    pub fn file_suffix(self) -> &'static str {
        match self {
            Task::All15 => "15f",
            Task::Four => "4f",
            Task::Eleven => "11f",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::All15 => "all15",
            Task::Four => "four",
            Task::Eleven => "eleven",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub keypoints: KeypointSet,
}

/// Ordered face samples together with the keypoint slots they target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    task: Task,
    slots: Vec<Keypoint>,
    imputed: bool,
}

impl Dataset {
    /// `slots` are the keypoints this dataset targets, in canonical order.
    pub fn new(samples: Vec<Sample>, mut slots: Vec<Keypoint>) -> Result<Self> {
        slots.sort_unstable();
        slots.dedup();
        let task = Task::from_slot_count(slots.len())?;
        if let Some(first) = samples.first() {
            let (w, h) = (first.image.width, first.image.height);
            if let Some(i) = samples
                .iter()
                .position(|s| s.image.width != w || s.image.height != h)
            {
                return Err(Error::shape(
                    format!("{w}x{h} image"),
                    format!(
                        "{}x{} image in sample {i}",
                        samples[i].image.width, samples[i].image.height
                    ),
                ));
            }
        }
        Ok(Self {
            samples,
            task,
            slots,
            imputed: false,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn slots(&self) -> &[Keypoint] {
        &self.slots
    }

    pub fn is_imputed(&self) -> bool {
        self.imputed
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.image.width, s.image.height))
    }

    /// Column headers of the target matrix, e.g. `nose_tip_x`.
    pub fn target_names(&self) -> Vec<String> {
        target_names(&self.slots)
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            task: self.task,
            slots: self.slots.clone(),
            imputed: self.imputed,
        }
    }

    /// Keeps at most the first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Number of missing entries per targeted slot.
    pub fn missing_counts(&self) -> Vec<(Keypoint, usize)> {
        self.slots
            .iter()
            .map(|&k| {
                let n = self
                    .samples
                    .iter()
                    .filter(|s| s.keypoints.get(k).is_none())
                    .count();
                (k, n)
            })
            .collect()
    }
}

pub fn target_names(slots: &[Keypoint]) -> Vec<String> {
    slots
        .iter()
        .flat_map(|k| [format!("{}_x", k.name()), format!("{}_y", k.name())])
        .collect()
}

// ---------------------------------------------------------------------------
// CSV input

struct Table {
    slots: Vec<Keypoint>,
    keypoints: Vec<KeypointSet>,
    images: Option<Vec<GrayImage>>,
}

enum Column {
    X(Keypoint),
    Y(Keypoint),
    Image,
}

fn parse_header(header: &csv::StringRecord) -> Result<(Vec<Column>, Vec<Keypoint>)> {
    let mut columns = Vec::with_capacity(header.len());
    let mut slots = Vec::new();
    for name in header.iter() {
        let name = name.trim();
        let col = if name == IMAGE_COLUMN {
            Column::Image
        } else if let Some(kp) = name.strip_suffix("_x").and_then(Keypoint::from_name) {
            slots.push(kp);
            Column::X(kp)
        } else if let Some(kp) = name.strip_suffix("_y").and_then(Keypoint::from_name) {
            Column::Y(kp)
        } else {
            return Err(Error::Parse {
                row: 0,
                column: name.to_string(),
                message: "unknown column in header".into(),
            });
        };
        columns.push(col);
    }
    for &kp in &slots {
        let has_y = columns.iter().any(|c| matches!(c, Column::Y(k) if *k == kp));
        if !has_y {
            return Err(Error::Parse {
                row: 0,
                column: format!("{}_y", kp.name()),
                message: "missing column in header".into(),
            });
        }
    }
    Ok((columns, slots))
}

fn parse_coordinate(cell: &str, row: usize, column: &str, limit: usize) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let err = |message: String| Error::Parse {
        row,
        column: column.to_string(),
        message,
    };
    let v: f64 = cell
        .parse()
        .map_err(|_| err(format!("`{cell}` is not a number")))?;
    if !v.is_finite() || v < 0.0 || v >= limit as f64 {
        return Err(err(format!("coordinate {v} outside [0, {limit})")));
    }
    Ok(Some(v))
}

fn parse_pixels(cell: &str, row: usize) -> Result<Vec<u8>> {
    cell.split_ascii_whitespace()
        .map(|tok| {
            tok.parse::<u8>().map_err(|_| Error::Parse {
                row,
                column: IMAGE_COLUMN.into(),
                message: format!("`{tok}` is not an intensity in [0, 255]"),
            })
        })
        .collect()
}

fn image_side(n_pixels: usize) -> Option<usize> {
    let side = (n_pixels as f64).sqrt().round() as usize;
    (side > 0 && side * side == n_pixels).then_some(side)
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let (columns, slots) = parse_header(&header)?;
    let has_image = columns.iter().any(|c| matches!(c, Column::Image));

    let mut keypoints = Vec::new();
    let mut images = Vec::new();
    let mut side: Option<usize> = None;

    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != columns.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", columns.len(), record.len()),
            });
        }

        // Pixels first so coordinates can be range-checked against the image size.
        let mut image = None;
        if let Some(pos) = columns.iter().position(|c| matches!(c, Column::Image)) {
            let pixels = parse_pixels(&record[pos], row)?;
            let expected = side.map(|s| s * s);
            let s = match (expected, image_side(pixels.len())) {
                (Some(e), _) if e != pixels.len() => None,
                (_, s) => s,
            };
            let Some(s) = s else {
                return Err(Error::Parse {
                    row,
                    column: IMAGE_COLUMN.into(),
                    message: format!(
                        "{} pixels do not form a square image{}",
                        pixels.len(),
                        expected.map_or(String::new(), |e| format!(" of {e} pixels")),
                    ),
                });
            };
            side = Some(s);
            image = Some(GrayImage::new(s, s, pixels)?);
        }
        let limit = side.unwrap_or(IMAGE_SIDE);

        let mut xs = [None; Keypoint::COUNT];
        let mut ys = [None; Keypoint::COUNT];
        for (col, (cell, name)) in columns.iter().zip(record.iter().zip(header.iter())) {
            match col {
                Column::X(k) => xs[k.index()] = parse_coordinate(cell, row, name, limit)?,
                Column::Y(k) => ys[k.index()] = parse_coordinate(cell, row, name, limit)?,
                Column::Image => {}
            }
        }
        let mut set = KeypointSet::empty();
        for &k in &slots {
            match (xs[k.index()], ys[k.index()]) {
                (Some(x), Some(y)) => set.set(k, Some(Point::new(x, y))),
                (None, None) => {}
                (Some(_), None) | (None, Some(_)) => {
                    return Err(Error::Parse {
                        row,
                        column: k.name().into(),
                        message: "only one coordinate of the pair is present".into(),
                    })
                }
            }
        }
        keypoints.push(set);
        if let Some(img) = image {
            images.push(img);
        }
    }

    Ok(Table {
        slots,
        keypoints,
        images: has_image.then_some(images),
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn table_to_dataset(table: Table) -> Result<Dataset> {
    let images = table.images.ok_or_else(|| Error::Parse {
        row: 0,
        column: IMAGE_COLUMN.into(),
        message: "missing column in header".into(),
    })?;
    let samples = images
        .into_iter()
        .zip(table.keypoints)
        .map(|(image, keypoints)| Sample { image, keypoints })
        .collect();
    Dataset::new(samples, table.slots)
}

/// Reads a training table: keypoint coordinate columns plus the `Image` column.
pub fn load_training_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_training_csv(open(path)?)
}

pub fn read_training_csv<R: Read>(reader: R) -> Result<Dataset> {
    table_to_dataset(read_table(reader)?)
}

/// Reads only the `Image` column of a CSV; coordinate columns, if any, are
/// validated but discarded.
pub fn load_images_csv(path: impl AsRef<Path>) -> Result<Vec<GrayImage>> {
    let path = path.as_ref();
    read_table(open(path)?)?.images.ok_or_else(|| Error::Parse {
        row: 0,
        column: IMAGE_COLUMN.into(),
        message: "missing column in header".into(),
    })
}

/// Joins a keypoint-only CSV with an image-only CSV row by row, the layout of
/// the derived `keypoint_*` / `im_*` files.
pub fn load_split_pair(keypoints: impl AsRef<Path>, images: impl AsRef<Path>) -> Result<Dataset> {
    let kp = read_table(open(keypoints.as_ref())?)?;
    let im = load_images_csv(images)?;
    if kp.keypoints.len() != im.len() {
        return Err(Error::shape(
            format!("{} image rows", kp.keypoints.len()),
            format!("{} image rows", im.len()),
        ));
    }
    let mut ds = table_to_dataset(Table {
        slots: kp.slots,
        keypoints: kp.keypoints,
        images: Some(im),
    })?;
    ds.imputed = ds
        .samples
        .iter()
        .all(|s| s.keypoints.has_all(&ds.slots));
    Ok(ds)
}

// ---------------------------------------------------------------------------
// CSV output

fn format_pixels(img: &GrayImage) -> String {
    let mut out = String::with_capacity(img.pixels.len() * 4);
    for (i, p) in img.pixels.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&p.to_string());
    }
    out
}

fn coordinate_cells(set: &KeypointSet, slots: &[Keypoint]) -> Vec<String> {
    slots
        .iter()
        .flat_map(|&k| match set.get(k) {
            // `{}` on f64 prints the shortest string that parses back exactly.
            Some(p) => [p.x.to_string(), p.y.to_string()],
            None => [String::new(), String::new()],
        })
        .collect()
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn finish<W: Write>(mut wtr: csv::Writer<W>) -> Result<()> {
    wtr.flush()
        .map_err(|e| Error::io("<csv output>", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv output>", std::io::Error::other(e.to_string()))
}

/// Writes coordinate columns followed by `Image`, mirroring the input format.
pub fn write_training_csv<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    let mut header = d.target_names();
    header.push(IMAGE_COLUMN.into());
    wtr.write_record(&header).map_err(csv_err)?;
    for s in &d.samples {
        let mut row = coordinate_cells(&s.keypoints, &d.slots);
        row.push(format_pixels(&s.image));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    finish(wtr)
}

pub fn write_keypoints_csv<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(d.target_names()).map_err(csv_err)?;
    for s in &d.samples {
        wtr.write_record(coordinate_cells(&s.keypoints, &d.slots))
            .map_err(csv_err)?;
    }
    finish(wtr)
}

pub fn write_images_csv<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record([IMAGE_COLUMN]).map_err(csv_err)?;
    for s in &d.samples {
        wtr.write_record([format_pixels(&s.image)]).map_err(csv_err)?;
    }
    finish(wtr)
}

/// Convenience wrapper writing one of the CSV layouts to a file path.
pub fn write_to_path(
    path: impl AsRef<Path>,
    f: impl FnOnce(&mut std::io::BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Arithmetic mean of the present values of each targeted slot.
pub fn column_means(d: &Dataset) -> Result<Vec<(Keypoint, Point)>> {
    d.slots
        .iter()
        .map(|&k| {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for p in d.samples.iter().filter_map(|s| s.keypoints.get(k)) {
                sx += p.x;
                sy += p.y;
                n += 1;
            }
            if n == 0 {
                return Err(Error::EmptyColumn(format!("{}_x", k.name())));
            }
            Ok((k, Point::new(sx / n as f64, sy / n as f64)))
        })
        .collect()
}

/// Fills absent slots from precomputed means (e.g. means of a training split).
pub fn impute_with(d: &Dataset, means: &[(Keypoint, Point)]) -> Result<Dataset> {
    let mut out = d.clone();
    for &k in &d.slots {
        let mean = means
            .iter()
            .find(|(m, _)| *m == k)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::EmptyColumn(format!("{}_x", k.name())))?;
        for s in &mut out.samples {
            if s.keypoints.get(k).is_none() {
                s.keypoints.set(k, Some(mean));
            }
        }
    }
    out.imputed = true;
    Ok(out)
}

/// Replaces every absent targeted slot with its column mean.
pub fn impute_column_means(d: &Dataset) -> Result<Dataset> {
    impute_with(d, &column_means(d)?)
}

/// Splits the full table into the near-complete four-keypoint task (every
/// row) and the eleven-keypoint task (rows where all eleven are present).
///
/// The four slots are the ones with the fewest missing entries, ties going
/// to the earlier column.
pub fn split_by_keypoint_coverage(d: &Dataset) -> Result<(Dataset, Dataset)> {
    if d.task != Task::All15 {
        return Err(Error::invalid(format!(
            "coverage split needs the 15-keypoint table, got task {}",
            d.task
        )));
    }
    let mut counts = d.missing_counts();
    counts.sort_by_key(|&(k, n)| (n, k.index()));
    let mut four: Vec<Keypoint> = counts[..4].iter().map(|&(k, _)| k).collect();
    four.sort_unstable();
    let eleven: Vec<Keypoint> = Keypoint::ALL
        .into_iter()
        .filter(|k| !four.contains(k))
        .collect();

    let restrict = |s: &Sample, slots: &[Keypoint]| Sample {
        image: s.image.clone(),
        keypoints: s.keypoints.restricted_to(slots),
    };
    let four_ds = Dataset {
        samples: d.samples.iter().map(|s| restrict(s, &four)).collect(),
        task: Task::Four,
        slots: four,
        imputed: d.imputed,
    };
    let eleven_ds = Dataset {
        samples: d
            .samples
            .iter()
            .filter(|s| s.keypoints.has_all(&eleven))
            .map(|s| restrict(s, &eleven))
            .collect(),
        task: Task::Eleven,
        slots: eleven,
        imputed: d.imputed,
    };
    Ok((four_ds, eleven_ds))
}

/// Seeded shuffled partition of `0..n`; the first `floor(train_fraction * n)`
/// shuffled indices form the training side.
pub fn holdout_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!("holdout split needs at least 2 rows, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    // The epsilon keeps products like 0.29 * 100 from flooring one short.
    let n_train = (train_fraction * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} leaves one side of a {n}-row split empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut idx);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn holdout_split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = holdout_indices(d.len(), train_fraction, seed)?;
    Ok((d.select(&train), d.select(&test)))
}

/// Row-major pixel features, optionally divided by 255.
pub fn images_to_features(images: &[&GrayImage], scale_pixels: bool) -> FeatureMatrix {
    let ncols = images.first().map_or(0, |i| i.pixels.len());
    let scale = if scale_pixels { 1.0 / 255.0 } else { 1.0 };
    let data = nalgebra::DMatrix::from_fn(images.len(), ncols, |i, j| {
        images[i].pixels[j] as f64 * scale
    });
    FeatureMatrix::new(data, Provenance::Raw)
}

/// Pixel features and keypoint targets of an imputed dataset.
pub fn to_matrices(d: &Dataset, scale_pixels: bool) -> Result<(FeatureMatrix, TargetMatrix)> {
    if !d.imputed {
        return Err(Error::NotImputed);
    }
    let images: Vec<&GrayImage> = d.samples.iter().map(|s| &s.image).collect();
    let x = images_to_features(&images, scale_pixels);
    let m = 2 * d.slots.len();
    let y = nalgebra::DMatrix::from_fn(d.len(), m, |i, j| {
        let p = d.samples[i].keypoints.get(d.slots[j / 2]).expect("imputed");
        if j % 2 == 0 {
            p.x
        } else {
            p.y
        }
    });
    Ok((x, TargetMatrix(y)))
}
