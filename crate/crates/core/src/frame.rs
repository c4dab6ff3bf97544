//! Per-frame facial features in the OpenFace 2.0 column layout.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FRAME_WIDTH: usize = 42;
pub const N_AU_C: usize = 18;
pub const N_AU_R: usize = 17;
pub const N_POSE: usize = 6;

/// Action-unit numbers with a presence channel, in column order.
pub const AU_C: [u8; N_AU_C] = [1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 28, 45];
/// Action-unit numbers with an intensity channel; AU28 has none.
pub const AU_R: [u8; N_AU_R] = [1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 45];

pub const POSE_NAMES: [&str; N_POSE] = ["pose_Tx", "pose_Ty", "pose_Tz", "pose_Rx", "pose_Ry", "pose_Rz"];

pub const SUCCESS: usize = 0;
pub const AU_C_START: usize = 1;
pub const AU_R_START: usize = AU_C_START + N_AU_C;
pub const POSE_START: usize = AU_R_START + N_AU_R;

pub const POSE_RX: usize = 3;
pub const POSE_RY: usize = 4;

/// Column names in file order.
pub fn column_names() -> Vec<String> {
    let mut names = vec!["success".to_string()];
    names.extend(AU_C.iter().map(|n| format!("AU{n:02}_c")));
    names.extend(AU_R.iter().map(|n| format!("AU{n:02}_r")));
    names.extend(POSE_NAMES.iter().map(|s| s.to_string()));
    names
}

pub fn au_c_index(au: u8) -> Option<usize> {
    AU_C.iter().position(|a| *a == au).map(|i| AU_C_START + i)
}

pub fn au_r_index(au: u8) -> Option<usize> {
    AU_R.iter().position(|a| *a == au).map(|i| AU_R_START + i)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameFeatures(pub [f64; FRAME_WIDTH]);

impl Default for FrameFeatures {
    fn default() -> Self {
        let mut v = [0.0; FRAME_WIDTH];
        v[SUCCESS] = 1.0;
        Self(v)
    }
}

impl FrameFeatures {
    pub fn success(&self) -> bool {
        self.0[SUCCESS] >= 0.5
    }

    pub fn au_c(&self) -> &[f64] {
        &self.0[AU_C_START..AU_R_START]
    }

    pub fn au_r(&self) -> &[f64] {
        &self.0[AU_R_START..POSE_START]
    }

    /// Presence and intensity channels, the 35 facial-unit inputs.
    pub fn fau(&self) -> &[f64] {
        &self.0[AU_C_START..POSE_START]
    }

    pub fn pose(&self) -> &[f64] {
        &self.0[POSE_START..]
    }

    pub fn pose_mut(&mut self) -> &mut [f64] {
        &mut self.0[POSE_START..]
    }
}

pub fn write_feature_csv<W: Write>(frames: &[FrameFeatures], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(column_names())?;
    for f in frames {
        w.write_record(f.0.iter().map(|v| format_value(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest text that parses back to the same `f64`.
fn format_value(v: f64) -> String {
    format!("{v:?}")
}

pub fn save_feature_csv(frames: &[FrameFeatures], path: &Path) -> Result<()> {
    write_feature_csv(frames, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// A parsed stream; `valid[i]` is false where the tracker reported failure.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub frames: Vec<FrameFeatures>,
    pub valid: Vec<bool>,
}

/// Reads a feature CSV. Header names are matched after trimming, extra
/// columns are ignored, and column order in the file is free.
pub fn read_feature_csv<R: Read>(input: R) -> Result<FeatureStream> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = r.headers()?.clone();
    let names = column_names();
    let mut map = Vec::with_capacity(FRAME_WIDTH);
    for name in &names {
        match header.iter().position(|h| h == name) {
            Some(i) => map.push(i),
            None => return Err(Error::MissingColumn(name.clone())),
        }
    }
    let mut frames = Vec::new();
    let mut valid = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; FRAME_WIDTH];
        for (j, &src) in map.iter().enumerate() {
            let cell = rec.get(src).unwrap_or("");
            let x: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row + 1,
                column: names[j].clone(),
                message: format!("not a number: {cell:?}"),
            })?;
            check_range(j, x).map_err(|message| Error::Parse { row: row + 1, column: names[j].clone(), message })?;
            v[j] = x;
        }
        let f = FrameFeatures(v);
        valid.push(f.success());
        frames.push(f);
    }
    Ok(FeatureStream { frames, valid })
}

fn check_range(col: usize, x: f64) -> std::result::Result<(), String> {
    if !x.is_finite() {
        return Err(format!("non-finite value {x}"));
    }
    let ok = match col {
        SUCCESS => x == 0.0 || x == 1.0,
        c if c < AU_R_START => x == 0.0 || x == 1.0,
        c if c < POSE_START => (0.0..=5.0).contains(&x),
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("value {x} out of range"))
    }
}

pub fn load_feature_csv(path: &Path) -> Result<FeatureStream> {
    read_feature_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}
