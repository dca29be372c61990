//! Point clouds and their ASCII PLY / CSV representations.

use crate::se3::{Pose, Vec3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

pub type Rgb = [u8; 3];

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("malformed CSV at record {record}: {message}")]
    CsvRecord { record: usize, message: String },
    #[error("unsupported file extension for {0}")]
    UnknownFormat(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<Rgb>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, colors: None }
    }

    /// Panics if `colors` and `points` differ in length.
    pub fn with_colors(points: Vec<Vec3>, colors: Vec<Rgb>) -> Self {
        assert_eq!(points.len(), colors.len(), "one color per point");
        Self {
            points,
            colors: Some(colors),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    /// Sub-cloud of the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn extend(&mut self, other: &PointCloud) {
        match (&mut self.colors, &other.colors) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (None, None) => {}
            (Some(a), None) => a.extend(std::iter::repeat_n([0, 0, 0], other.len())),
            (None, Some(b)) => {
                let mut c = vec![[0, 0, 0]; self.points.len()];
                c.extend_from_slice(b);
                self.colors = Some(c);
            }
        }
        self.points.extend_from_slice(&other.points);
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Each point mapped through `p -> R p + t`.
    pub fn transformed(&self, g: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| g.transform_point(p)).collect(),
            colors: self.colors.clone(),
        }
    }

    pub fn read_file(path: &Path) -> Result<Self, CloudIoError> {
        let file = std::fs::File::open(path)?;
        match extension(path).as_deref() {
            Some("ply") => read_ply(file),
            Some("csv") => read_csv(file),
            _ => Err(CloudIoError::UnknownFormat(path.display().to_string())),
        }
    }

    pub fn write_file(&self, path: &Path) -> Result<(), CloudIoError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        match extension(path).as_deref() {
            Some("ply") => write_ply(self, &mut w)?,
            Some("csv") => write_csv(self, None, &mut w)?,
            _ => return Err(CloudIoError::UnknownFormat(path.display().to_string())),
        }
        w.flush()?;
        Ok(())
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Writes an ASCII PLY with a single `vertex` element.
pub fn write_ply<W: Write>(cloud: &PointCloud, mut out: W) -> Result<(), CloudIoError> {
    let mut s = String::with_capacity(64 + cloud.len() * 48);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        // `{}` on f64 prints the shortest representation that round-trips.
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(c) = &cloud.colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

#[derive(Debug)]
enum PlyProperty {
    Scalar(String),
    List,
}

/// Reads an ASCII PLY; elements other than `vertex` are skipped and unknown
/// vertex properties ignored.
pub fn read_ply<R: Read>(input: R) -> Result<PointCloud, CloudIoError> {
    let mut lines = BufReader::new(input).lines();
    let bad = |m: &str| CloudIoError::Ply(m.to_string());

    match lines.next() {
        Some(Ok(l)) if l.trim() == "ply" => {}
        _ => return Err(bad("missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_ok = false;
    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated header"))??;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format_ok = true,
            ["format", other, _] => return Err(CloudIoError::Ply(format!("unsupported format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", ..] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .properties
                .push(PlyProperty::List),
            ["property", _ty, name] => elements
                .last_mut()
                .ok_or_else(|| bad("property before element"))?
                .properties
                .push(PlyProperty::Scalar(name.to_string())),
            _ => return Err(CloudIoError::Ply(format!("unexpected header line '{line}'"))),
        }
    }
    if !format_ok {
        return Err(bad("missing format line"));
    }

    let mut cloud = PointCloud::default();
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                lines.next().ok_or_else(|| bad("truncated body"))??;
            }
            continue;
        }
        if el.properties.iter().any(|p| matches!(p, PlyProperty::List)) {
            return Err(bad("list properties on vertex are not supported"));
        }
        let col = |name: &str| {
            el.properties
                .iter()
                .position(|p| matches!(p, PlyProperty::Scalar(n) if n == name))
        };
        let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(bad("vertex lacks x/y/z")),
        };
        let rgb = match (col("red"), col("green"), col("blue")) {
            (Some(r), Some(g), Some(b)) => Some((r, g, b)),
            _ => None,
        };
        let mut points = Vec::with_capacity(el.count);
        let mut colors = rgb.map(|_| Vec::with_capacity(el.count));
        for _ in 0..el.count {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))??;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("non-numeric vertex value"))?;
            if vals.len() < el.properties.len() {
                return Err(bad("short vertex line"));
            }
            points.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
            if let (Some(c), Some((r, g, b))) = (colors.as_mut(), rgb) {
                c.push([vals[r] as u8, vals[g] as u8, vals[b] as u8]);
            }
        }
        cloud = PointCloud { points, colors };
    }
    Ok(cloud)
}

/// Writes `x,y,z[,r,g,b][,label]` with a header row.
pub fn write_csv<W: Write>(cloud: &PointCloud, labels: Option<&[i32]>, out: W) -> Result<(), CloudIoError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["x", "y", "z"];
    if cloud.colors.is_some() {
        header.extend(["r", "g", "b"]);
    }
    if labels.is_some() {
        header.push("label");
    }
    w.write_record(&header)?;
    for (i, p) in cloud.points.iter().enumerate() {
        let mut rec = vec![p.x.to_string(), p.y.to_string(), p.z.to_string()];
        if let Some(c) = &cloud.colors {
            rec.extend(c[i].iter().map(|v| v.to_string()));
        }
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `x,y,z[,r,g,b]`. A leading non-numeric row is treated as a header;
/// columns beyond the sixth are ignored.
pub fn read_csv<R: Read>(input: R) -> Result<PointCloud, CloudIoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut points = Vec::new();
    let mut colors: Option<Vec<Rgb>> = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(CloudIoError::CsvRecord {
                    record: i,
                    message: "non-numeric field".into(),
                })
            }
        };
        if vals.len() < 3 {
            return Err(CloudIoError::CsvRecord {
                record: i,
                message: "fewer than 3 columns".into(),
            });
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        if vals.len() >= 6 {
            colors
                .get_or_insert_with(Vec::new)
                .push([vals[3] as u8, vals[4] as u8, vals[5] as u8]);
        }
    }
    if colors.as_ref().is_some_and(|c| c.len() != points.len()) {
        return Err(CloudIoError::CsvRecord {
            record: 0,
            message: "color columns present on only some rows".into(),
        });
    }
    Ok(PointCloud { points, colors })
}
